#include "gramlm/model.hpp"

#include <algorithm>
#include <cmath>
#include <limits>
#include <numbers>

#include "gramlm/error.hpp"

namespace gramlm {

int ModelConfig::gen_hidden() const {
  const int h = (hidden / 3 / gen_heads) * gen_heads;
  return std::max(h, gen_heads);
}

int ModelConfig::gen_ffn() const { return std::max(1, ffn / 3); }

void ModelConfig::validate() const {
  auto need = [](bool ok, const std::string& what) {
    if (!ok) throw ConfigError(what);
  };
  need(layers >= 1, "model layers must be >= 1");
  need(hidden >= 1 && heads >= 1, "hidden size and heads must be >= 1");
  need(hidden % heads == 0, "hidden size " + std::to_string(hidden) +
                                " is not divisible by heads " + std::to_string(heads));
  need(ffn >= 1, "feed-forward size must be >= 1");
  need(max_positions >= 1, "max positions must be >= 1");
  need(fine_vocab >= 1, "fine vocab must be non-empty");
  need(ngram_vocab >= 0, "n-gram vocab size must be >= 0");
  need(gen_layers >= 1 && gen_heads >= 1, "generator layers and heads must be >= 1");
  need(dropout >= 0.0 && dropout < 1.0, "dropout must be in [0, 1)");
  need(max_query >= 1, "max query must be >= 1");
}

namespace {

constexpr double kNormEps = 1e-12;
constexpr double kInitStd = 0.02;

template <typename S>
void fill_truncated_normal(Matrix<S>& m, RngState& rng) {
  for (Eigen::Index i = 0; i < m.size(); ++i) {
    double z = rng.normal();
    while (std::abs(z) > 2.0) z = rng.normal();
    m.data()[i] = static_cast<S>(z * kInitStd);
  }
}

template <typename S>
Matrix<S> weight(Eigen::Index rows, Eigen::Index cols, RngState& rng) {
  Matrix<S> m(rows, cols);
  fill_truncated_normal(m, rng);
  return m;
}

template <typename S>
LayerNorm<S> unit_norm(int h) {
  return {RowVector<S>::Ones(h), RowVector<S>::Zero(h)};
}

template <typename S>
Encoder<S> init_encoder(int vocab, int positions, int h, int heads, int ffn, int layers,
                        RngState& rng) {
  Encoder<S> enc;
  enc.heads = heads;
  enc.embedding = weight<S>(vocab, h, rng);
  enc.position = weight<S>(positions, h, rng);
  enc.embed_norm = unit_norm<S>(h);
  for (int l = 0; l < layers; ++l) {
    EncoderLayer<S> layer;
    layer.wq = weight<S>(h, h, rng);
    layer.wk = weight<S>(h, h, rng);
    layer.wv = weight<S>(h, h, rng);
    layer.wo = weight<S>(h, h, rng);
    layer.bq = layer.bk = layer.bv = layer.bo = RowVector<S>::Zero(h);
    layer.attn_norm = unit_norm<S>(h);
    layer.w_in = weight<S>(h, ffn, rng);
    layer.b_in = RowVector<S>::Zero(ffn);
    layer.w_out = weight<S>(ffn, h, rng);
    layer.b_out = RowVector<S>::Zero(h);
    layer.ffn_norm = unit_norm<S>(h);
    enc.layers.push_back(std::move(layer));
  }
  return enc;
}

template <typename S>
void layer_norm_forward(const Matrix<S>& x, const LayerNorm<S>& p, NormTrace<S>& tr,
                        Matrix<S>& y) {
  const Vector<S> mean = x.rowwise().mean();
  const Matrix<S> centered = x.colwise() - mean;
  const Vector<S> var = centered.array().square().rowwise().mean();
  tr.rstd = (var.array() + static_cast<S>(kNormEps)).rsqrt();
  tr.xhat = centered.array().colwise() * tr.rstd.array();
  y = (tr.xhat.array().rowwise() * p.gamma.array()).rowwise() + p.beta.array();
}

template <typename S>
Matrix<S> layer_norm_backward(const Matrix<S>& dy, const LayerNorm<S>& p, const NormTrace<S>& tr,
                              LayerNorm<S>& g) {
  g.gamma += dy.cwiseProduct(tr.xhat).colwise().sum();
  g.beta += dy.colwise().sum();
  const Matrix<S> dxhat = dy.array().rowwise() * p.gamma.array();
  const Vector<S> mean_d = dxhat.rowwise().mean();
  const Vector<S> mean_dx = dxhat.cwiseProduct(tr.xhat).rowwise().mean();
  Matrix<S> dx = (dxhat.colwise() - mean_d) - (tr.xhat.array().colwise() * mean_dx.array()).matrix();
  return dx.array().colwise() * tr.rstd.array();
}

template <typename S>
S gelu(S x) {
  return static_cast<S>(0.5) * x * (1 + std::erf(x / std::numbers::sqrt2_v<S>));
}

template <typename S>
S gelu_grad(S x) {
  const S cdf = static_cast<S>(0.5) * (1 + std::erf(x / std::numbers::sqrt2_v<S>));
  const S pdf = std::exp(-x * x / 2) * std::numbers::inv_sqrtpi_v<S> / std::numbers::sqrt2_v<S>;
  return cdf + x * pdf;
}

template <typename S>
Matrix<S> dropout_keep(Eigen::Index rows, Eigen::Index cols, DropoutSpec spec) {
  if (!spec.active()) return {};
  Matrix<S> keep(rows, cols);
  const S scale = static_cast<S>(1.0 / (1.0 - spec.rate));
  for (Eigen::Index i = 0; i < keep.size(); ++i) {
    keep.data()[i] = spec.rng->uniform() < spec.rate ? S(0) : scale;
  }
  return keep;
}

template <typename S>
void apply_keep(Matrix<S>& m, const Matrix<S>& keep) {
  if (keep.size() != 0) m = m.cwiseProduct(keep);
}

template <typename S>
void check_finite(const Encoder<S>& enc) {
  visit_encoder(enc, "", [](const std::string& name, const auto& t, bool) {
    if (name == "embedding" || name == "position") return;  // checked per gathered row
    if (!t.allFinite()) throw NumericError("non-finite parameter in tensor " + name);
  });
}

// Row softmax over scores + mask; blocked entries are exactly zero.
template <typename S>
Matrix<S> masked_softmax(const Matrix<S>& scores, const Matrix<S>& mask) {
  Matrix<S> p(scores.rows(), scores.cols());
  for (Eigen::Index i = 0; i < scores.rows(); ++i) {
    S top = -std::numeric_limits<S>::infinity();
    for (Eigen::Index j = 0; j < scores.cols(); ++j) {
      if (!std::isinf(mask(i, j))) top = std::max(top, scores(i, j) + mask(i, j));
    }
    S total = 0;
    for (Eigen::Index j = 0; j < scores.cols(); ++j) {
      if (std::isinf(mask(i, j))) {
        p(i, j) = 0;
      } else {
        p(i, j) = std::exp(scores(i, j) + mask(i, j) - top);
        total += p(i, j);
      }
    }
    if (total > 0) p.row(i) /= total;
  }
  return p;
}

}  // namespace

template <typename S>
ModelParams<S> init_params(const ModelConfig& config, std::uint64_t seed) {
  config.validate();
  RngState rng = derive_rng(seed, 0x1417);
  ModelParams<S> p;
  const int joint = config.joint_vocab();
  const int h = config.hidden;
  p.encoder = init_encoder<S>(joint, config.max_positions, h, config.heads, config.ffn,
                              config.layers, rng);
  p.fine_w = weight<S>(h, config.fine_vocab, rng);
  p.fine_b = RowVector<S>::Zero(config.fine_vocab);
  p.ngram_w = weight<S>(h, joint, rng);
  p.ngram_b = RowVector<S>::Zero(joint);
  p.rtd_w = weight<S>(h, 1, rng);
  p.rtd_b = RowVector<S>::Zero(1);
  const int gh = config.gen_hidden();
  p.generator = init_encoder<S>(joint, config.max_positions, gh, config.gen_heads,
                                config.gen_ffn(), config.gen_layers, rng);
  p.gen_ngram_w = weight<S>(gh, joint, rng);
  p.gen_ngram_b = RowVector<S>::Zero(joint);
  return p;
}

template <typename S>
ModelParams<S> zeros_like(const ModelParams<S>& params) {
  ModelParams<S> out = params;
  visit_params(out, [](const std::string&, auto& t, bool) { t.setZero(); });
  return out;
}

template <typename S>
Activations<S> encode(const Encoder<S>& enc, std::span<const TokenId> ids,
                      std::span<const std::uint32_t> positions, const Matrix<S>& mask,
                      DropoutSpec dropout) {
  const auto n = static_cast<Eigen::Index>(ids.size());
  if (positions.size() != ids.size()) {
    throw ArgumentError("encode: " + std::to_string(ids.size()) + " ids but " +
                        std::to_string(positions.size()) + " positions");
  }
  if (mask.rows() != n || mask.cols() != n) {
    throw ArgumentError("encode: attention mask must be " + std::to_string(n) + "x" +
                        std::to_string(n));
  }
  if (n == 0) throw ArgumentError("encode: empty input");
  check_finite(enc);

  const int h = enc.hidden();
  Activations<S> act;
  act.ids.assign(ids.begin(), ids.end());
  act.positions.assign(positions.begin(), positions.end());
  Matrix<S> x(n, h);
  for (Eigen::Index i = 0; i < n; ++i) {
    const TokenId id = ids[static_cast<std::size_t>(i)];
    const std::uint32_t pos = positions[static_cast<std::size_t>(i)];
    if (id >= static_cast<TokenId>(enc.vocab())) {
      throw ArgumentError("encode: token id " + std::to_string(id) + " outside vocab of " +
                          std::to_string(enc.vocab()));
    }
    if (pos < 1 || pos > static_cast<std::uint32_t>(enc.position.rows())) {
      throw ArgumentError("encode: position " + std::to_string(pos) + " outside [1, " +
                          std::to_string(enc.position.rows()) + "]");
    }
    x.row(i) = enc.embedding.row(id) + enc.position.row(pos - 1);
  }
  if (!x.allFinite()) throw NumericError("non-finite parameter in tensor embedding/position");
  layer_norm_forward(x, enc.embed_norm, act.embed_norm, act.embedded);
  act.embed_keep = dropout_keep<S>(n, h, dropout);
  apply_keep(act.embedded, act.embed_keep);

  const int heads = enc.heads;
  const int dk = h / heads;
  const S scale = static_cast<S>(1.0 / std::sqrt(static_cast<double>(dk)));
  const Matrix<S>* input = &act.embedded;
  act.layers.resize(enc.layers.size());
  for (std::size_t l = 0; l < enc.layers.size(); ++l) {
    const EncoderLayer<S>& w = enc.layers[l];
    LayerTrace<S>& tr = act.layers[l];
    tr.input = *input;
    tr.q = (tr.input * w.wq).rowwise() + w.bq;
    tr.k = (tr.input * w.wk).rowwise() + w.bk;
    tr.v = (tr.input * w.wv).rowwise() + w.bv;
    tr.context.resize(n, h);
    tr.probs.resize(static_cast<std::size_t>(heads));
    for (int a = 0; a < heads; ++a) {
      const Matrix<S> scores =
          (tr.q.middleCols(a * dk, dk) * tr.k.middleCols(a * dk, dk).transpose()) * scale;
      tr.probs[static_cast<std::size_t>(a)] = masked_softmax(scores, mask);
      tr.context.middleCols(a * dk, dk) =
          tr.probs[static_cast<std::size_t>(a)] * tr.v.middleCols(a * dk, dk);
    }
    Matrix<S> attn = (tr.context * w.wo).rowwise() + w.bo;
    tr.attn_keep = dropout_keep<S>(n, h, dropout);
    apply_keep(attn, tr.attn_keep);
    const Matrix<S> r1 = tr.input + attn;
    layer_norm_forward(r1, w.attn_norm, tr.attn_norm, tr.mid);

    tr.pre_act = (tr.mid * w.w_in).rowwise() + w.b_in;
    tr.act = tr.pre_act.unaryExpr([](S v) { return gelu(v); });
    Matrix<S> f = (tr.act * w.w_out).rowwise() + w.b_out;
    tr.ffn_keep = dropout_keep<S>(n, h, dropout);
    apply_keep(f, tr.ffn_keep);
    const Matrix<S> r2 = tr.mid + f;
    layer_norm_forward(r2, w.ffn_norm, tr.ffn_norm, tr.output);
    input = &tr.output;
  }
  return act;
}

template <typename S>
void backward_encoder(const Encoder<S>& enc, const Activations<S>& act, const Matrix<S>& d_output,
                      Encoder<S>& grad) {
  const int h = enc.hidden();
  const int heads = enc.heads;
  const int dk = h / heads;
  const S scale = static_cast<S>(1.0 / std::sqrt(static_cast<double>(dk)));
  Matrix<S> d = d_output;
  for (std::size_t li = enc.layers.size(); li-- > 0;) {
    const EncoderLayer<S>& w = enc.layers[li];
    EncoderLayer<S>& g = grad.layers[li];
    const LayerTrace<S>& tr = act.layers[li];

    const Matrix<S> d_r2 = layer_norm_backward(d, w.ffn_norm, tr.ffn_norm, g.ffn_norm);
    Matrix<S> d_f = d_r2;
    apply_keep(d_f, tr.ffn_keep);
    g.w_out.noalias() += tr.act.transpose() * d_f;
    g.b_out += d_f.colwise().sum();
    const Matrix<S> d_pre =
        (d_f * w.w_out.transpose()).cwiseProduct(tr.pre_act.unaryExpr([](S v) { return gelu_grad(v); }));
    g.w_in.noalias() += tr.mid.transpose() * d_pre;
    g.b_in += d_pre.colwise().sum();
    const Matrix<S> d_mid = d_r2 + d_pre * w.w_in.transpose();

    const Matrix<S> d_r1 = layer_norm_backward(d_mid, w.attn_norm, tr.attn_norm, g.attn_norm);
    Matrix<S> d_attn = d_r1;
    apply_keep(d_attn, tr.attn_keep);
    g.wo.noalias() += tr.context.transpose() * d_attn;
    g.bo += d_attn.colwise().sum();
    const Matrix<S> d_ctx = d_attn * w.wo.transpose();

    Matrix<S> dq(d.rows(), h), dkm(d.rows(), h), dv(d.rows(), h);
    for (int a = 0; a < heads; ++a) {
      const Matrix<S>& p = tr.probs[static_cast<std::size_t>(a)];
      const auto dc = d_ctx.middleCols(a * dk, dk);
      const Matrix<S> dp = dc * tr.v.middleCols(a * dk, dk).transpose();
      dv.middleCols(a * dk, dk) = p.transpose() * dc;
      const Vector<S> row_dot = dp.cwiseProduct(p).rowwise().sum();
      const Matrix<S> ds = (p.array() * (dp.colwise() - row_dot).array()).matrix() * scale;
      dq.middleCols(a * dk, dk) = ds * tr.k.middleCols(a * dk, dk);
      dkm.middleCols(a * dk, dk) = ds.transpose() * tr.q.middleCols(a * dk, dk);
    }
    g.wq.noalias() += tr.input.transpose() * dq;
    g.wk.noalias() += tr.input.transpose() * dkm;
    g.wv.noalias() += tr.input.transpose() * dv;
    g.bq += dq.colwise().sum();
    g.bk += dkm.colwise().sum();
    g.bv += dv.colwise().sum();
    d = d_r1 + dq * w.wq.transpose() + dkm * w.wk.transpose() + dv * w.wv.transpose();
  }
  apply_keep(d, act.embed_keep);
  const Matrix<S> d_x = layer_norm_backward(d, enc.embed_norm, act.embed_norm, grad.embed_norm);
  for (Eigen::Index i = 0; i < d_x.rows(); ++i) {
    grad.embedding.row(act.ids[static_cast<std::size_t>(i)]) += d_x.row(i);
    grad.position.row(act.positions[static_cast<std::size_t>(i)] - 1) += d_x.row(i);
  }
}

template <typename S>
Matrix<S> gather_rows(const Matrix<S>& m, std::span<const std::uint32_t> rows) {
  Matrix<S> out(static_cast<Eigen::Index>(rows.size()), m.cols());
  for (std::size_t i = 0; i < rows.size(); ++i) {
    if (rows[i] >= m.rows()) {
      throw ArgumentError("row index " + std::to_string(rows[i]) + " outside " +
                          std::to_string(m.rows()) + " rows");
    }
    out.row(static_cast<Eigen::Index>(i)) = m.row(rows[i]);
  }
  return out;
}

template <typename S>
Matrix<S> predict_fine(const Activations<S>& act, std::span<const std::uint32_t> rows,
                       const ModelParams<S>& params) {
  return (gather_rows(act.output(), rows) * params.fine_w).rowwise() + params.fine_b;
}

template <typename S>
Matrix<S> predict_ngram(const Activations<S>& act, std::span<const std::uint32_t> rows,
                        const ModelParams<S>& params) {
  return (gather_rows(act.output(), rows) * params.ngram_w).rowwise() + params.ngram_b;
}

template <typename S>
Vector<S> predict_rtd(const Activations<S>& act, std::size_t context_length,
                      const ModelParams<S>& params) {
  if (context_length > static_cast<std::size_t>(act.output().rows())) {
    throw ArgumentError("context length exceeds encoded length");
  }
  const auto t = static_cast<Eigen::Index>(context_length);
  return (act.output().topRows(t) * params.rtd_w).array() + params.rtd_b(0);
}

template <typename S>
Matrix<S> generator_logits(const ModelParams<S>& params, const MaskPlan& plan, TokenId mask_id) {
  const std::vector<TokenId> ids = masked_context(plan, mask_id);
  const std::size_t t = plan.context_length();
  const std::span<const std::uint32_t> positions(plan.positions.data(), t);
  const auto n = static_cast<Eigen::Index>(t);
  const Activations<S> act = encode(params.generator, std::span<const TokenId>(ids), positions,
                                    Matrix<S>::Zero(n, n).eval());
  std::vector<std::uint32_t> slots;
  for (const Target& c : plan.coarse) slots.push_back(c.index);
  return (gather_rows(act.output(), slots) * params.gen_ngram_w).rowwise() + params.gen_ngram_b;
}

template <typename S>
std::vector<std::uint32_t> sample_rows(const Matrix<S>& logits, double temperature,
                                       RngState& rng) {
  if (!(temperature > 0.0)) throw ArgumentError("sampling temperature must be > 0");
  std::vector<std::uint32_t> out;
  out.reserve(static_cast<std::size_t>(logits.rows()));
  std::vector<double> p(static_cast<std::size_t>(logits.cols()));
  for (Eigen::Index i = 0; i < logits.rows(); ++i) {
    const double top = static_cast<double>(logits.row(i).maxCoeff());
    double total = 0.0;
    for (Eigen::Index j = 0; j < logits.cols(); ++j) {
      p[static_cast<std::size_t>(j)] = std::exp((static_cast<double>(logits(i, j)) - top) / temperature);
      total += p[static_cast<std::size_t>(j)];
    }
    double u = rng.uniform() * total;
    std::uint32_t pick = static_cast<std::uint32_t>(logits.cols() - 1);
    for (std::size_t j = 0; j < p.size(); ++j) {
      if (u < p[j]) {
        pick = static_cast<std::uint32_t>(j);
        break;
      }
      u -= p[j];
    }
    // Guard against rounding landing on a zero-probability tail entry.
    while (p[pick] == 0.0 && pick > 0) --pick;
    out.push_back(pick);
  }
  return out;
}

template <typename S>
std::vector<std::uint32_t> generator_forward_and_sample(const ModelParams<S>& params,
                                                        const MaskPlan& plan, TokenId mask_id,
                                                        RngState& rng, double temperature) {
  return sample_rows(generator_logits(params, plan, mask_id), temperature, rng);
}

template <typename S>
Encoder<S> export_finetune_weights(const ModelParams<S>& params, int fine_vocab) {
  if (fine_vocab < 1 || fine_vocab > params.encoder.vocab()) {
    throw ArgumentError("fine vocab size outside embedding table");
  }
  Encoder<S> out = params.encoder;
  out.embedding = params.encoder.embedding.topRows(fine_vocab);
  return out;
}

std::size_t vanilla_encoder_parameter_count(int vocab, int max_positions, int hidden, int ffn,
                                            int layers) {
  const std::size_t h = static_cast<std::size_t>(hidden);
  const std::size_t f = static_cast<std::size_t>(ffn);
  const std::size_t per_layer = 4 * (h * h + h) + 2 * h + (h * f + f) + (f * h + h) + 2 * h;
  return static_cast<std::size_t>(vocab) * h + static_cast<std::size_t>(max_positions) * h +
         2 * h + static_cast<std::size_t>(layers) * per_layer;
}

#define GRAMLM_INSTANTIATE_MODEL(S)                                                             \
  template ModelParams<S> init_params<S>(const ModelConfig&, std::uint64_t);                    \
  template ModelParams<S> zeros_like<S>(const ModelParams<S>&);                                 \
  template Activations<S> encode<S>(const Encoder<S>&, std::span<const TokenId>,                \
                                    std::span<const std::uint32_t>, const Matrix<S>&,           \
                                    DropoutSpec);                                               \
  template void backward_encoder<S>(const Encoder<S>&, const Activations<S>&, const Matrix<S>&, \
                                    Encoder<S>&);                                               \
  template Matrix<S> gather_rows<S>(const Matrix<S>&, std::span<const std::uint32_t>);          \
  template Matrix<S> predict_fine<S>(const Activations<S>&, std::span<const std::uint32_t>,     \
                                     const ModelParams<S>&);                                    \
  template Matrix<S> predict_ngram<S>(const Activations<S>&, std::span<const std::uint32_t>,    \
                                      const ModelParams<S>&);                                   \
  template Vector<S> predict_rtd<S>(const Activations<S>&, std::size_t, const ModelParams<S>&); \
  template Matrix<S> generator_logits<S>(const ModelParams<S>&, const MaskPlan&, TokenId);      \
  template std::vector<std::uint32_t> sample_rows<S>(const Matrix<S>&, double, RngState&);      \
  template std::vector<std::uint32_t> generator_forward_and_sample<S>(                          \
      const ModelParams<S>&, const MaskPlan&, TokenId, RngState&, double);                      \
  template Encoder<S> export_finetune_weights<S>(const ModelParams<S>&, int);

GRAMLM_INSTANTIATE_MODEL(float)
GRAMLM_INSTANTIATE_MODEL(double)

}  // namespace gramlm
