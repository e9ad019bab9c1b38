#pragma once

#include <Eigen/Core>
#include <cstdint>
#include <span>
#include <string>
#include <type_traits>
#include <vector>

#include "gramlm/maskplan.hpp"
#include "gramlm/rng.hpp"
#include "gramlm/vocab.hpp"

namespace gramlm {

template <typename Scalar>
using Matrix = Eigen::Matrix<Scalar, Eigen::Dynamic, Eigen::Dynamic>;
template <typename Scalar>
using RowVector = Eigen::Matrix<Scalar, 1, Eigen::Dynamic>;
template <typename Scalar>
using Vector = Eigen::Matrix<Scalar, Eigen::Dynamic, 1>;

struct ModelConfig {
  int layers = 2;
  int hidden = 32;
  int heads = 2;
  int ffn = 64;
  int max_positions = 128;
  int fine_vocab = 0;
  int ngram_vocab = 0;
  int gen_layers = 1;
  int gen_heads = 1;
  double dropout = 0.1;
  int max_query = 8;

  int joint_vocab() const { return fine_vocab + ngram_vocab; }
  int head_dim() const { return hidden / heads; }
  // floor(hidden / 3) rounded down to a multiple of gen_heads.
  int gen_hidden() const;
  int gen_ffn() const;
  // Throws ConfigError.
  void validate() const;

  bool operator==(const ModelConfig&) const = default;
};

template <typename Scalar>
struct LayerNorm {
  RowVector<Scalar> gamma;
  RowVector<Scalar> beta;
};

template <typename Scalar>
struct EncoderLayer {
  Matrix<Scalar> wq, wk, wv, wo;
  RowVector<Scalar> bq, bk, bv, bo;
  LayerNorm<Scalar> attn_norm;
  Matrix<Scalar> w_in, w_out;
  RowVector<Scalar> b_in, b_out;
  LayerNorm<Scalar> ffn_norm;
};

// Post-norm transformer encoder over a joint-vocab embedding table.
template <typename Scalar>
struct Encoder {
  int heads = 1;
  Matrix<Scalar> embedding;  // vocab rows x hidden
  Matrix<Scalar> position;   // max_positions x hidden, row p-1 for position p
  LayerNorm<Scalar> embed_norm;
  std::vector<EncoderLayer<Scalar>> layers;

  int hidden() const { return static_cast<int>(embedding.cols()); }
  int vocab() const { return static_cast<int>(embedding.rows()); }
};

// Standard model theta with its heads, plus the narrow generator theta'.
template <typename Scalar>
struct ModelParams {
  Encoder<Scalar> encoder;
  Matrix<Scalar> fine_w;  // hidden x |V_F|
  RowVector<Scalar> fine_b;
  Matrix<Scalar> ngram_w;  // hidden x |<V_F, V_N>|
  RowVector<Scalar> ngram_b;
  Matrix<Scalar> rtd_w;  // hidden x 1
  RowVector<Scalar> rtd_b;
  Encoder<Scalar> generator;
  Matrix<Scalar> gen_ngram_w;
  RowVector<Scalar> gen_ngram_b;
};

// Calls fn(name, tensor, decays) for each tensor in a fixed order. Works on
// const and mutable encoders/params.
template <typename EncoderT, typename Fn>
void visit_encoder(EncoderT& enc, const std::string& prefix, Fn&& fn) {
  fn(prefix + "embedding", enc.embedding, true);
  fn(prefix + "position", enc.position, true);
  fn(prefix + "embed_norm.gamma", enc.embed_norm.gamma, false);
  fn(prefix + "embed_norm.beta", enc.embed_norm.beta, false);
  for (std::size_t l = 0; l < enc.layers.size(); ++l) {
    auto& layer = enc.layers[l];
    const std::string p = prefix + "layer" + std::to_string(l) + ".";
    fn(p + "wq", layer.wq, true);
    fn(p + "bq", layer.bq, false);
    fn(p + "wk", layer.wk, true);
    fn(p + "bk", layer.bk, false);
    fn(p + "wv", layer.wv, true);
    fn(p + "bv", layer.bv, false);
    fn(p + "wo", layer.wo, true);
    fn(p + "bo", layer.bo, false);
    fn(p + "attn_norm.gamma", layer.attn_norm.gamma, false);
    fn(p + "attn_norm.beta", layer.attn_norm.beta, false);
    fn(p + "w_in", layer.w_in, true);
    fn(p + "b_in", layer.b_in, false);
    fn(p + "w_out", layer.w_out, true);
    fn(p + "b_out", layer.b_out, false);
    fn(p + "ffn_norm.gamma", layer.ffn_norm.gamma, false);
    fn(p + "ffn_norm.beta", layer.ffn_norm.beta, false);
  }
}

template <typename ParamsT, typename Fn>
void visit_params(ParamsT& params, Fn&& fn) {
  visit_encoder(params.encoder, "encoder.", fn);
  fn("head.fine_w", params.fine_w, true);
  fn("head.fine_b", params.fine_b, false);
  fn("head.ngram_w", params.ngram_w, true);
  fn("head.ngram_b", params.ngram_b, false);
  fn("head.rtd_w", params.rtd_w, true);
  fn("head.rtd_b", params.rtd_b, false);
  visit_encoder(params.generator, "generator.", fn);
  fn("generator.head.ngram_w", params.gen_ngram_w, true);
  fn("generator.head.ngram_b", params.gen_ngram_b, false);
}

// Flat, named views over parameter storage.
template <typename T>
struct TensorRef {
  using Plain = Matrix<std::remove_const_t<T>>;
  using MapType = std::conditional_t<std::is_const_v<T>, Eigen::Map<const Plain>, Eigen::Map<Plain>>;

  std::string name;
  T* data = nullptr;
  Eigen::Index rows = 0;
  Eigen::Index cols = 0;
  bool decays = false;

  Eigen::Index size() const { return rows * cols; }
  MapType map() const { return MapType(data, rows, cols); }
};

template <typename ParamsT>
auto tensor_refs(ParamsT& params) {
  using Elem = std::conditional_t<std::is_const_v<ParamsT>,
                                  const typename std::remove_cvref_t<decltype(params.fine_w)>::Scalar,
                                  typename std::remove_cvref_t<decltype(params.fine_w)>::Scalar>;
  std::vector<TensorRef<Elem>> refs;
  visit_params(params, [&](const std::string& name, auto& t, bool decays) {
    refs.push_back({name, t.data(), t.rows(), t.cols(), decays});
  });
  return refs;
}

template <typename EncoderT>
std::size_t parameter_count(const EncoderT& enc) {
  std::size_t n = 0;
  visit_encoder(enc, "", [&](const std::string&, const auto& t, bool) { n += t.size(); });
  return n;
}

template <typename Scalar>
std::size_t parameter_count(const ModelParams<Scalar>& params) {
  std::size_t n = 0;
  visit_params(params, [&](const std::string&, const auto& t, bool) { n += t.size(); });
  return n;
}

// Truncated normal (std 0.02, cut at 2 std) weights, zero biases, unit
// norm gains.
template <typename Scalar>
ModelParams<Scalar> init_params(const ModelConfig& config, std::uint64_t seed);

template <typename Scalar>
ModelParams<Scalar> zeros_like(const ModelParams<Scalar>& params);

template <typename Scalar>
struct NormTrace {
  Matrix<Scalar> xhat;
  Vector<Scalar> rstd;
};

template <typename Scalar>
struct LayerTrace {
  Matrix<Scalar> input;
  Matrix<Scalar> q, k, v;
  std::vector<Matrix<Scalar>> probs;  // per head, (T+Q) x (T+Q)
  Matrix<Scalar> context;
  Matrix<Scalar> attn_keep;  // dropout multipliers; empty when off
  NormTrace<Scalar> attn_norm;
  Matrix<Scalar> mid;
  Matrix<Scalar> pre_act;
  Matrix<Scalar> act;
  Matrix<Scalar> ffn_keep;
  NormTrace<Scalar> ffn_norm;
  Matrix<Scalar> output;
};

// Everything the forward pass computed; enough for reverse mode.
template <typename Scalar>
struct Activations {
  std::vector<TokenId> ids;
  std::vector<std::uint32_t> positions;
  NormTrace<Scalar> embed_norm;
  Matrix<Scalar> embed_keep;
  Matrix<Scalar> embedded;
  std::vector<LayerTrace<Scalar>> layers;

  const Matrix<Scalar>& output() const { return layers.empty() ? embedded : layers.back().output; }
  // Post-softmax attention weights of one head.
  const Matrix<Scalar>& attention(std::size_t layer, std::size_t head) const {
    return layers.at(layer).probs.at(head);
  }
};

struct DropoutSpec {
  double rate = 0.0;
  RngState* rng = nullptr;
  bool active() const { return rate > 0.0 && rng != nullptr; }
};

// Forward pass with additive attention mask (0 / -inf). Attention weights
// are exactly zero at blocked entries.
// Throws ArgumentError on out-of-range ids/positions or a mis-shaped mask,
// NumericError on non-finite parameters.
template <typename Scalar>
Activations<Scalar> encode(const Encoder<Scalar>& enc, std::span<const TokenId> ids,
                           std::span<const std::uint32_t> positions, const Matrix<Scalar>& mask,
                           DropoutSpec dropout = {});

// Accumulates parameter gradients of <d_output, output> into `grad`.
template <typename Scalar>
void backward_encoder(const Encoder<Scalar>& enc, const Activations<Scalar>& act,
                      const Matrix<Scalar>& d_output, Encoder<Scalar>& grad);

template <typename Scalar>
Matrix<Scalar> gather_rows(const Matrix<Scalar>& m, std::span<const std::uint32_t> rows);

// Logits over V_F at the given rows.
template <typename Scalar>
Matrix<Scalar> predict_fine(const Activations<Scalar>& act, std::span<const std::uint32_t> rows,
                            const ModelParams<Scalar>& params);
// Logits over <V_F, V_N> at the given rows.
template <typename Scalar>
Matrix<Scalar> predict_ngram(const Activations<Scalar>& act, std::span<const std::uint32_t> rows,
                             const ModelParams<Scalar>& params);
// One "is original" logit per context position [0, context_length).
template <typename Scalar>
Vector<Scalar> predict_rtd(const Activations<Scalar>& act, std::size_t context_length,
                           const ModelParams<Scalar>& params);

// Generator logits at the coarse slots of the plan, read from the explicit
// view (every coarse slot shows [MASK], no queries).
template <typename Scalar>
Matrix<Scalar> generator_logits(const ModelParams<Scalar>& params, const MaskPlan& plan,
                                TokenId mask_id);

// One draw per row from softmax(logits / temperature).
template <typename Scalar>
std::vector<std::uint32_t> sample_rows(const Matrix<Scalar>& logits, double temperature,
                                       RngState& rng);

template <typename Scalar>
std::vector<std::uint32_t> generator_forward_and_sample(const ModelParams<Scalar>& params,
                                                        const MaskPlan& plan, TokenId mask_id,
                                                        RngState& rng, double temperature);

// Fine-tuning export: encoder with the embedding truncated to V_F rows; all
// heads and the generator are dropped.
template <typename Scalar>
Encoder<Scalar> export_finetune_weights(const ModelParams<Scalar>& params, int fine_vocab);

// Parameter count of a plain encoder with the given shape.
std::size_t vanilla_encoder_parameter_count(int vocab, int max_positions, int hidden, int ffn,
                                            int layers);

// Same layout, converted scalar type.
template <typename To, typename From>
ModelParams<To> cast_params(const ModelParams<From>& like) {
  ModelParams<To> out;
  auto cast_encoder = [](const Encoder<From>& e) {
    Encoder<To> o;
    o.heads = e.heads;
    o.embedding = e.embedding.template cast<To>();
    o.position = e.position.template cast<To>();
    o.embed_norm = {e.embed_norm.gamma.template cast<To>(), e.embed_norm.beta.template cast<To>()};
    for (const auto& l : e.layers) {
      EncoderLayer<To> t;
      t.wq = l.wq.template cast<To>();
      t.wk = l.wk.template cast<To>();
      t.wv = l.wv.template cast<To>();
      t.wo = l.wo.template cast<To>();
      t.bq = l.bq.template cast<To>();
      t.bk = l.bk.template cast<To>();
      t.bv = l.bv.template cast<To>();
      t.bo = l.bo.template cast<To>();
      t.attn_norm = {l.attn_norm.gamma.template cast<To>(), l.attn_norm.beta.template cast<To>()};
      t.w_in = l.w_in.template cast<To>();
      t.b_in = l.b_in.template cast<To>();
      t.w_out = l.w_out.template cast<To>();
      t.b_out = l.b_out.template cast<To>();
      t.ffn_norm = {l.ffn_norm.gamma.template cast<To>(), l.ffn_norm.beta.template cast<To>()};
      o.layers.push_back(std::move(t));
    }
    return o;
  };
  out.encoder = cast_encoder(like.encoder);
  out.generator = cast_encoder(like.generator);
  out.fine_w = like.fine_w.template cast<To>();
  out.fine_b = like.fine_b.template cast<To>();
  out.ngram_w = like.ngram_w.template cast<To>();
  out.ngram_b = like.ngram_b.template cast<To>();
  out.rtd_w = like.rtd_w.template cast<To>();
  out.rtd_b = like.rtd_b.template cast<To>();
  out.gen_ngram_w = like.gen_ngram_w.template cast<To>();
  out.gen_ngram_b = like.gen_ngram_b.template cast<To>();
  return out;
}

}  // namespace gramlm
