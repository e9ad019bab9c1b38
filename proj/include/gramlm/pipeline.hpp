#pragma once

#include <cstdint>
#include <filesystem>
#include <optional>
#include <string>
#include <utility>
#include <vector>

#include "gramlm/corpus.hpp"
#include "gramlm/lexicon.hpp"
#include "gramlm/maskplan.hpp"
#include "gramlm/train.hpp"

namespace gramlm {

// FNV-1a of the file's bytes. Throws IoError.
std::string file_hash(const std::filesystem::path& path);

struct Provenance {
  std::string command;
  std::uint64_t seed = 0;
  std::string config_hash;
  std::vector<std::pair<std::string, std::string>> inputs;  // path, hash

  void add_input(const std::filesystem::path& path);
  std::string json() const;
};

struct ExtractLexiconOptions {
  std::vector<std::filesystem::path> corpus;
  TokenizeConfig tokenize;
  LexiconConfig lexicon;
  int shards = 1;
  std::uint64_t seed = 0;
  std::filesystem::path out;
};

NGramLexicon cmd_extract_lexicon(const ExtractLexiconOptions& options);

struct SegmentOptions {
  std::vector<std::filesystem::path> corpus;
  TokenizeConfig tokenize;
  std::filesystem::path lexicon;
  std::uint64_t seed = 0;
  std::filesystem::path out;
};

// Per document: 1-based boundaries, a tab, then segments joined by " | ".
void cmd_segment(const SegmentOptions& options);

struct MakeMasksOptions {
  std::vector<std::filesystem::path> corpus;
  TokenizeConfig tokenize;
  std::filesystem::path lexicon;
  std::filesystem::path vocab;
  Objective objective = Objective::kExplicit;
  double rate = 0.15;
  std::uint64_t seed = 0;
  std::size_t max_tokens = 64;
  int max_query = 8;
  // Mask only multi-word segments; windows without one are skipped.
  bool ngram_only = false;
  std::filesystem::path out;
  std::optional<std::filesystem::path> json_out;
};

// Relation plans are written in comprehensive layout without sampled
// identities; the trainer fills them from the generator each step. Masked
// n-grams longer than max_query fall back to contiguous masking with a
// warning on stderr. Returns the number of plans written.
std::size_t cmd_make_masks(const MakeMasksOptions& options);

// Plans in memory, built the same way cmd_make_masks writes them.
std::vector<MaskPlan> build_plans(const WordStream& stream, const JointVocab& joint,
                                  const MakeMasksOptions& options);

struct PlanHeader {
  Objective objective = Objective::kExplicit;
  std::size_t fine_vocab = 0;
  std::size_t joint_size = 0;
  TokenId mask_id = 4;
  int max_query = 8;
};
PlanHeader parse_plan_header(const std::string& header_json);

struct TrainOptions {
  std::filesystem::path plans;
  std::optional<std::filesystem::path> config;
  std::vector<std::pair<std::string, std::string>> overrides;
  std::optional<std::uint64_t> seed;
  std::filesystem::path out;
  std::optional<std::filesystem::path> metrics;
  std::optional<std::filesystem::path> resume;
  // Stop after this many total steps (0 = config total_steps).
  std::uint64_t stop_at = 0;
};

// Returns the final trainer step count.
std::uint64_t cmd_train(const TrainOptions& options);

struct EvalPplOptions {
  std::filesystem::path checkpoint;
  std::filesystem::path plans;
  PplMode mode = PplMode::kNgram;
  std::uint64_t seed = 0;
};

// Returns a JSON object with the result and provenance.
std::string cmd_eval_ppl(const EvalPplOptions& options);

struct ExportOptions {
  std::filesystem::path checkpoint;
  std::filesystem::path out;
  std::uint64_t seed = 0;
};

void cmd_export(const ExportOptions& options);

struct InspectOptions {
  std::filesystem::path checkpoint;
  std::filesystem::path vocab;
  std::string text;
  bool lowercase = true;
  std::uint64_t seed = 0;
  std::filesystem::path out;
};

// Last layer head-mean attention as CSV with token labels.
void cmd_inspect_attention(const InspectOptions& options);

}  // namespace gramlm
