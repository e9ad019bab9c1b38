#include "gramlm/train.hpp"

#include <algorithm>
#include <charconv>
#include <chrono>
#include <cmath>
#include <fstream>
#include <numeric>
#include <sstream>

#include "json.hpp"

#include "gramlm/error.hpp"
#include "gramlm/objective.hpp"

namespace gramlm {

namespace {

std::string_view trim(std::string_view s) {
  const auto first = s.find_first_not_of(" \t\r");
  if (first == std::string_view::npos) return {};
  const auto last = s.find_last_not_of(" \t\r");
  return s.substr(first, last - first + 1);
}

template <typename T>
T parse_number(std::string_view key, std::string_view value) {
  T out{};
  const auto [ptr, ec] = std::from_chars(value.data(), value.data() + value.size(), out);
  if (ec != std::errc() || ptr != value.data() + value.size()) {
    throw ConfigError("config key '" + std::string(key) + "': cannot parse '" +
                      std::string(value) + "'");
  }
  return out;
}

bool parse_bool(std::string_view key, std::string_view value) {
  if (value == "true" || value == "1") return true;
  if (value == "false" || value == "0") return false;
  throw ConfigError("config key '" + std::string(key) + "': expected true or false");
}

}  // namespace

void TrainConfig::validate() const {
  auto need = [](bool ok, const std::string& what) {
    if (!ok) throw ConfigError(what);
  };
  need(batch_size >= 1, "batch_size must be >= 1");
  need(learning_rate >= 0.0 && std::isfinite(learning_rate), "learning_rate must be >= 0");
  need(total_steps >= 0, "total_steps must be >= 0");
  need(warmup_steps >= 0 && warmup_steps <= total_steps, "warmup_steps must lie in [0, total_steps]");
  need(beta1 >= 0.0 && beta1 < 1.0 && beta2 >= 0.0 && beta2 < 1.0, "betas must lie in [0, 1)");
  need(epsilon > 0.0, "epsilon must be > 0");
  need(weight_decay >= 0.0, "weight_decay must be >= 0");
  need(temperature > 0.0, "temperature must be > 0");
  need(keep_mask_prob >= 0.0 && keep_mask_prob < 1.0, "keep_mask_prob must lie in [0, 1)");
  need(checkpoint_every >= 0, "checkpoint_every must be >= 0");
  for (double w : {weights.contiguous, weights.explicit_ngram, weights.comprehensive,
                   weights.generator, weights.rtd}) {
    need(w >= 0.0, "loss weights must be >= 0");
  }
  model.validate();
}

void apply_train_option(TrainConfig& c, std::string_view key, std::string_view raw) {
  std::string_view value = trim(raw);
  if (value.size() >= 2 && value.front() == '"' && value.back() == '"') {
    value = value.substr(1, value.size() - 2);
  }
  auto i = [&] { return parse_number<int>(key, value); };
  auto d = [&] { return parse_number<double>(key, value); };
  if (key == "objective") c.objective = parse_objective(value);
  else if (key == "batch_size") c.batch_size = i();
  else if (key == "learning_rate") c.learning_rate = d();
  else if (key == "warmup_steps") c.warmup_steps = i();
  else if (key == "total_steps") c.total_steps = i();
  else if (key == "seed") c.seed = parse_number<std::uint64_t>(key, value);
  else if (key == "weights.contiguous") c.weights.contiguous = d();
  else if (key == "weights.explicit") c.weights.explicit_ngram = d();
  else if (key == "weights.comprehensive") c.weights.comprehensive = d();
  else if (key == "weights.generator") c.weights.generator = d();
  else if (key == "weights.rtd" || key == "lambda") c.weights.rtd = d();
  else if (key == "beta1") c.beta1 = d();
  else if (key == "beta2") c.beta2 = d();
  else if (key == "epsilon") c.epsilon = d();
  else if (key == "weight_decay") c.weight_decay = d();
  else if (key == "schedule") {
    if (value == "linear") c.schedule = Schedule::kLinear;
    else if (value == "constant") c.schedule = Schedule::kConstant;
    else throw ConfigError("schedule must be linear or constant");
  }
  else if (key == "clip_norm") c.clip_norm = d();
  else if (key == "temperature") c.temperature = d();
  else if (key == "keep_mask_prob") c.keep_mask_prob = d();
  else if (key == "checkpoint_every") c.checkpoint_every = i();
  else if (key == "deterministic") c.deterministic = parse_bool(key, value);
  else if (key == "model.layers") c.model.layers = i();
  else if (key == "model.hidden") c.model.hidden = i();
  else if (key == "model.heads") c.model.heads = i();
  else if (key == "model.ffn") c.model.ffn = i();
  else if (key == "model.max_positions") c.model.max_positions = i();
  else if (key == "model.gen_layers") c.model.gen_layers = i();
  else if (key == "model.gen_heads") c.model.gen_heads = i();
  else if (key == "model.dropout") c.model.dropout = d();
  else if (key == "model.max_query") c.model.max_query = i();
  else throw ConfigError("unknown config key '" + std::string(key) + "'");
}

TrainConfig parse_train_config(std::string_view text, TrainConfig base) {
  std::string section;
  std::size_t line_no = 0;
  while (!text.empty()) {
    const auto nl = text.find('\n');
    std::string_view line = text.substr(0, nl);
    text = nl == std::string_view::npos ? std::string_view{} : text.substr(nl + 1);
    ++line_no;
    if (const auto hash = line.find('#'); hash != std::string_view::npos) line = line.substr(0, hash);
    line = trim(line);
    if (line.empty()) continue;
    if (line.front() == '[') {
      if (line.back() != ']') throw ConfigError("line " + std::to_string(line_no) + ": bad section");
      section = std::string(trim(line.substr(1, line.size() - 2)));
      continue;
    }
    const auto eq = line.find('=');
    if (eq == std::string_view::npos) {
      throw ConfigError("line " + std::to_string(line_no) + ": expected key = value");
    }
    const std::string key =
        (section.empty() ? "" : section + ".") + std::string(trim(line.substr(0, eq)));
    try {
      apply_train_option(base, key, line.substr(eq + 1));
    } catch (const Error& e) {
      throw ConfigError("line " + std::to_string(line_no) + ": " + e.what());
    }
  }
  return base;
}

TrainConfig load_train_config(const std::filesystem::path& path, TrainConfig base) {
  std::ifstream in(path);
  if (!in) throw IoError("cannot read config: " + path.string());
  std::ostringstream buf;
  buf << in.rdbuf();
  try {
    return parse_train_config(buf.str(), std::move(base));
  } catch (const ConfigError& e) {
    throw ConfigError(path.string() + ": " + e.what());
  }
}

std::string train_config_json(const TrainConfig& c) {
  nlohmann::ordered_json j;
  j["objective"] = objective_name(c.objective);
  j["batch_size"] = c.batch_size;
  j["learning_rate"] = c.learning_rate;
  j["warmup_steps"] = c.warmup_steps;
  j["total_steps"] = c.total_steps;
  j["seed"] = c.seed;
  j["weights"] = {{"contiguous", c.weights.contiguous},
                  {"explicit", c.weights.explicit_ngram},
                  {"comprehensive", c.weights.comprehensive},
                  {"generator", c.weights.generator},
                  {"rtd", c.weights.rtd}};
  j["beta1"] = c.beta1;
  j["beta2"] = c.beta2;
  j["epsilon"] = c.epsilon;
  j["weight_decay"] = c.weight_decay;
  j["schedule"] = c.schedule == Schedule::kLinear ? "linear" : "constant";
  j["clip_norm"] = c.clip_norm;
  j["temperature"] = c.temperature;
  j["keep_mask_prob"] = c.keep_mask_prob;
  j["model"] = {{"layers", c.model.layers},       {"hidden", c.model.hidden},
                {"heads", c.model.heads},         {"ffn", c.model.ffn},
                {"max_positions", c.model.max_positions}, {"fine_vocab", c.model.fine_vocab},
                {"ngram_vocab", c.model.ngram_vocab}, {"gen_layers", c.model.gen_layers},
                {"gen_heads", c.model.gen_heads}, {"dropout", c.model.dropout},
                {"max_query", c.model.max_query}};
  return j.dump();
}

double learning_rate_at(const TrainConfig& c, std::uint64_t step) {
  if (c.schedule == Schedule::kConstant) return c.learning_rate;
  const double t = static_cast<double>(step + 1);
  if (c.warmup_steps > 0 && t <= c.warmup_steps) return c.learning_rate * t / c.warmup_steps;
  const double span = static_cast<double>(c.total_steps - c.warmup_steps);
  if (span <= 0) return c.learning_rate;
  return c.learning_rate * std::max(0.0, (c.total_steps - t + 1) / span);
}

double clip_global_norm(ModelParams<float>& grads, double max_norm) {
  double sq = 0.0;
  visit_params(grads, [&](const std::string&, const auto& t, bool) {
    sq += t.template cast<double>().squaredNorm();
  });
  const double norm = std::sqrt(sq);
  if (max_norm > 0.0 && norm > max_norm) {
    const float scale = static_cast<float>(max_norm / norm);
    visit_params(grads, [&](const std::string&, auto& t, bool) { t *= scale; });
  }
  return norm;
}

void adamw_update(ModelParams<float>& params, const ModelParams<float>& grads, AdamState& state,
                  const TrainConfig& c, double lr, std::uint64_t step) {
  auto p = tensor_refs(params);
  const auto g = tensor_refs(grads);
  auto m = tensor_refs(state.m);
  auto v = tensor_refs(state.v);
  const double bc1 = 1.0 - std::pow(c.beta1, static_cast<double>(step));
  const double bc2 = 1.0 - std::pow(c.beta2, static_cast<double>(step));
  const auto b1 = static_cast<float>(c.beta1);
  const auto b2 = static_cast<float>(c.beta2);
  const auto lr_f = static_cast<float>(lr);
  const auto step_size = static_cast<float>(lr / bc1);
  const auto inv_bc2 = static_cast<float>(1.0 / bc2);
  const auto eps = static_cast<float>(c.epsilon);
  const auto decay = static_cast<float>(c.weight_decay);
  for (std::size_t i = 0; i < p.size(); ++i) {
    auto pm = p[i].map();
    const auto gm = g[i].map();
    auto mm = m[i].map();
    auto vm = v[i].map();
    mm = b1 * mm + (1.0f - b1) * gm;
    vm = b2 * vm + (1.0f - b2) * gm.cwiseProduct(gm);
    if (lr == 0.0) continue;
    if (p[i].decays && decay > 0.0f) pm -= (lr_f * decay) * pm;
    pm.array() -= step_size * mm.array() / ((vm.array() * inv_bc2).sqrt() + eps);
  }
}

std::string metrics_json(std::uint64_t step, const LossReport& r, double lr, double wall_ms) {
  nlohmann::ordered_json j;
  j["step"] = step;
  j["contiguous"] = r.contiguous;
  j["explicit"] = r.explicit_ngram;
  j["comprehensive"] = r.comprehensive;
  j["generator"] = r.generator;
  j["rtd"] = r.rtd;
  j["total"] = r.total;
  j["lr"] = lr;
  j["wall_ms"] = wall_ms;
  return j.dump();
}

Trainer::Trainer(TrainConfig config, std::span<const MaskPlan> plans, TokenId mask_id,
                 std::size_t joint_size)
    : config_(std::move(config)), plans_(plans), mask_id_(mask_id), joint_size_(joint_size) {
  config_.validate();
  if (plans_.empty()) throw ArgumentError("no training plans");
  for (const MaskPlan& p : plans_) {
    if (p.objective != config_.objective) {
      throw ConfigError("plan objective " + std::string(objective_name(p.objective)) +
                        " does not match configured objective " +
                        std::string(objective_name(config_.objective)));
    }
  }
  params_ = init_params<float>(config_.model, config_.seed);
  adam_ = {zeros_like(params_), zeros_like(params_)};
  grads_ = zeros_like(params_);
}

Trainer::Trainer(TrainConfig config, std::span<const MaskPlan> plans, TokenId mask_id,
                 std::size_t joint_size, Checkpoint resume)
    : Trainer(std::move(config), plans, mask_id, joint_size) {
  if (!(resume.config == config_.model)) {
    throw VersionError("checkpoint model config does not match the training config");
  }
  params_ = std::move(resume.params);
  if (resume.adam_m && resume.adam_v) {
    adam_ = {std::move(*resume.adam_m), std::move(*resume.adam_v)};
  }
  step_ = resume.step;
}

std::vector<MaskPlan> Trainer::batch_at(std::uint64_t step) const {
  const std::size_t n = plans_.size();
  const auto b = static_cast<std::uint64_t>(config_.batch_size);
  std::vector<MaskPlan> batch;
  batch.reserve(b);
  std::uint64_t cached_epoch = UINT64_MAX;
  std::vector<std::size_t> order(n);
  for (std::uint64_t k = step * b; k < (step + 1) * b; ++k) {
    const std::uint64_t epoch = k / n;
    if (epoch != cached_epoch) {
      std::iota(order.begin(), order.end(), std::size_t{0});
      RngState rng = derive_rng(config_.seed, 0x5EED0000ULL + epoch);
      for (std::size_t i = n; i > 1; --i) std::swap(order[i - 1], order[rng.below(i)]);
      cached_epoch = epoch;
    }
    batch.push_back(plans_[order[k % n]]);
  }
  return batch;
}

LossReport Trainer::step() {
  std::vector<MaskPlan> batch = batch_at(step_);
  RngState rng = derive_rng(config_.seed, step_);
  if (config_.objective == Objective::kRelation) {
    for (MaskPlan& plan : batch) {
      if (plan.rtd_labels) continue;
      const auto sampled =
          generator_forward_and_sample(params_, plan, mask_id_, rng, config_.temperature);
      std::vector<std::uint8_t> keep;
      if (config_.keep_mask_prob > 0.0) {
        for (std::size_t i = 0; i < sampled.size(); ++i) {
          keep.push_back(rng.uniform() < config_.keep_mask_prob ? 1 : 0);
        }
      }
      plan = fill_relation(plan, sampled, joint_size_, mask_id_, keep);
    }
  }
  visit_params(grads_, [](const std::string&, auto& t, bool) { t.setZero(); });
  BatchOptions options;
  options.mask_id = mask_id_;
  options.dropout = {config_.model.dropout, &rng};
  const LossReport report = evaluate_batch(params_, batch, config_.weights, options, &grads_);
  check_finite_gradients(grads_);
  clip_global_norm(grads_, config_.clip_norm);
  const double lr = learning_rate_at(config_, step_);
  ++step_;
  adamw_update(params_, grads_, adam_, config_, lr, step_);
  return report;
}

void Trainer::run(std::uint64_t until, std::ostream* metrics,
                  const std::function<void(const Trainer&)>& on_checkpoint,
                  const std::optional<std::filesystem::path>& nan_dump) {
  while (step_ < until) {
    const double lr = learning_rate_at(config_, step_);
    const auto start = std::chrono::steady_clock::now();
    LossReport report;
    try {
      report = step();
    } catch (const NumericError& e) {
      if (nan_dump) {
        nlohmann::json meta = {{"diagnostic", e.what()}, {"failed_step", step_ + 1}};
        save_checkpoint(*nan_dump, checkpoint(meta.dump()));
        throw NumericError(std::string(e.what()) + " at step " + std::to_string(step_ + 1) +
                           "; diagnostic checkpoint written to " + nan_dump->string());
      }
      throw NumericError(std::string(e.what()) + " at step " + std::to_string(step_ + 1));
    }
    const double wall =
        config_.deterministic
            ? 0.0
            : std::chrono::duration<double, std::milli>(std::chrono::steady_clock::now() - start)
                  .count();
    if (metrics) *metrics << metrics_json(step_, report, lr, wall) << '\n';
    if (on_checkpoint && config_.checkpoint_every > 0 &&
        step_ % static_cast<std::uint64_t>(config_.checkpoint_every) == 0) {
      on_checkpoint(*this);
    }
  }
  if (metrics) metrics->flush();
}

Checkpoint Trainer::checkpoint(const std::string& meta_json) const {
  Checkpoint c;
  c.config = config_.model;
  c.params = params_;
  c.adam_m = adam_.m;
  c.adam_v = adam_.v;
  c.step = step_;
  c.rng = {config_.seed, step_};
  c.meta_json = meta_json;
  return c;
}

double geometric_mean_ppl(std::span<const double> log_ppls) {
  if (log_ppls.empty()) throw ArgumentError("n-gram perplexity needs at least one masked n-gram");
  double sum = 0.0;
  for (double l : log_ppls) sum += l;
  return std::exp(sum / static_cast<double>(log_ppls.size()));
}

PplResult eval_ngram_ppl(const ModelParams<float>& params, std::span<const MaskPlan> plans,
                         PplMode mode) {
  std::vector<double> logs;
  for (const MaskPlan& plan : plans) {
    if (plan.masked.empty()) continue;
    const std::vector<TokenId> input = plan.input_ids();
    const Activations<float> act =
        encode(params.encoder, std::span<const TokenId>(input), plan.positions,
               build_attention_mask<float>(plan));
    std::vector<std::uint32_t> fine_rows, fine_ids, coarse_rows, coarse_ids;
    for (const Target& f : plan.fine) {
      fine_rows.push_back(f.index);
      fine_ids.push_back(f.id);
    }
    for (const Target& c : plan.coarse) {
      coarse_rows.push_back(c.index);
      coarse_ids.push_back(c.id);
    }
    // Per-target NLLs, in target order.
    auto per_target = [](const Matrix<float>& logits, const std::vector<std::uint32_t>& targets) {
      std::vector<double> out;
      for (Eigen::Index i = 0; i < logits.rows(); ++i) {
        const Matrix<float> row = logits.row(i);
        const std::uint32_t t = targets[static_cast<std::size_t>(i)];
        out.push_back(softmax_nll(row, std::span<const std::uint32_t>(&t, 1)).sum);
      }
      return out;
    };
    const auto fine_nll =
        fine_rows.empty() ? std::vector<double>{} : per_target(predict_fine(act, fine_rows, params), fine_ids);
    const auto coarse_nll = coarse_rows.empty()
                                ? std::vector<double>{}
                                : per_target(predict_ngram(act, coarse_rows, params), coarse_ids);
    std::size_t fi = 0;
    std::size_t ci = 0;
    for (const MaskedSegment& m : plan.masked) {
      if (m.coarse > 0) {
        logs.push_back(coarse_nll.at(ci));
      } else if (m.fine > 0) {
        double sum = 0.0;
        for (std::uint32_t k = 0; k < m.fine; ++k) sum += fine_nll.at(fi + k);
        logs.push_back(mode == PplMode::kNgram ? sum : sum / m.fine);
      }
      ci += m.coarse;
      fi += m.fine;
    }
  }
  PplResult result;
  result.ppl = geometric_mean_ppl(logs);
  result.ngrams = logs.size();
  result.mean_log_ppl = std::log(result.ppl);
  return result;
}

}  // namespace gramlm
