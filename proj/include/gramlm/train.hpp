#pragma once

#include <cstdint>
#include <filesystem>
#include <functional>
#include <optional>
#include <ostream>
#include <span>
#include <string>
#include <string_view>
#include <vector>

#include "gramlm/checkpoint.hpp"
#include "gramlm/loss.hpp"
#include "gramlm/maskplan.hpp"
#include "gramlm/model.hpp"

namespace gramlm {

enum class Schedule { kLinear, kConstant };

struct TrainConfig {
  Objective objective = Objective::kExplicit;
  int batch_size = 8;
  double learning_rate = 1e-3;
  int warmup_steps = 100;
  int total_steps = 2000;
  std::uint64_t seed = 1;
  LossWeights weights;
  double beta1 = 0.9;
  double beta2 = 0.999;
  double epsilon = 1e-6;
  double weight_decay = 0.01;
  Schedule schedule = Schedule::kLinear;
  double clip_norm = 1.0;  // <= 0 disables clipping
  double temperature = 1.0;
  // Relation modeling: chance that a slot keeps [MASK] instead of a sample.
  double keep_mask_prob = 0.0;
  int checkpoint_every = 0;
  // Metrics carry wall_ms = 0 so logs are byte-identical across runs.
  bool deterministic = true;
  ModelConfig model;

  // Throws ConfigError.
  void validate() const;
};

// "key = value" lines, '#' comments, optional [section] headers that prefix
// keys ("[model]" then "hidden = 32" sets model.hidden).
TrainConfig parse_train_config(std::string_view text, TrainConfig base = {});
TrainConfig load_train_config(const std::filesystem::path& path, TrainConfig base = {});
// Throws ConfigError for unknown keys or malformed values.
void apply_train_option(TrainConfig& config, std::string_view key, std::string_view value);
std::string train_config_json(const TrainConfig& config);

// Rate for 0-based step: linear warmup to the peak, then linear decay to 0.
double learning_rate_at(const TrainConfig& config, std::uint64_t step);

// Scales gradients in place to the given global norm; returns the norm before.
double clip_global_norm(ModelParams<float>& grads, double max_norm);

struct AdamState {
  ModelParams<float> m;
  ModelParams<float> v;
};

// Decoupled weight decay on decaying tensors only; `step` is 1-based.
void adamw_update(ModelParams<float>& params, const ModelParams<float>& grads, AdamState& state,
                  const TrainConfig& config, double lr, std::uint64_t step);

std::string metrics_json(std::uint64_t step, const LossReport& report, double lr, double wall_ms);

class Trainer {
 public:
  // Fresh parameters from config.seed. `plans` must outlive the trainer.
  Trainer(TrainConfig config, std::span<const MaskPlan> plans, TokenId mask_id,
          std::size_t joint_size);
  // Resumes model, optimizer moments and step from a checkpoint.
  Trainer(TrainConfig config, std::span<const MaskPlan> plans, TokenId mask_id,
          std::size_t joint_size, Checkpoint resume);

  // One optimizer step; returns the pre-update loss of the batch.
  LossReport step();
  // Steps until `until` (exclusive upper bound on step count), writing one
  // metrics line per step. On a non-finite loss or gradient writes a
  // diagnostic checkpoint next to `nan_dump` (if set) and rethrows.
  void run(std::uint64_t until, std::ostream* metrics,
           const std::function<void(const Trainer&)>& on_checkpoint = {},
           const std::optional<std::filesystem::path>& nan_dump = std::nullopt);

  Checkpoint checkpoint(const std::string& meta_json = "{}") const;
  const ModelParams<float>& params() const { return params_; }
  std::uint64_t steps_done() const { return step_; }
  const TrainConfig& config() const { return config_; }

  // The batch used at a 0-based step (epoch-wise permutations of the plans).
  std::vector<MaskPlan> batch_at(std::uint64_t step) const;

 private:
  TrainConfig config_;
  std::span<const MaskPlan> plans_;
  TokenId mask_id_;
  std::size_t joint_size_;
  ModelParams<float> params_;
  AdamState adam_;
  ModelParams<float> grads_;
  std::uint64_t step_ = 0;
};

enum class PplMode {
  // PPL(w) = exp(total NLL of w): token NLLs summed over a contiguous span,
  // identity NLL for a collapsed slot.
  kNgram,
  // PPL(w) = exp(mean token NLL within w) for contiguous spans.
  kTokenMean,
};

struct PplResult {
  double ppl = 0.0;
  double mean_log_ppl = 0.0;
  std::size_t ngrams = 0;
};

// (prod PPL_i)^(1/k) computed as exp(mean log PPL_i). Throws ArgumentError
// when k = 0.
double geometric_mean_ppl(std::span<const double> log_ppls);

// Per masked segment of every plan: identity NLL at a coarse slot, token
// NLLs otherwise. Throws ArgumentError when the plans hold no masked segment.
PplResult eval_ngram_ppl(const ModelParams<float>& params, std::span<const MaskPlan> plans,
                         PplMode mode = PplMode::kNgram);

}  // namespace gramlm
