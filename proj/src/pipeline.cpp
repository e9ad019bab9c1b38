#include "gramlm/pipeline.hpp"

#include <algorithm>
#include <fstream>
#include <iomanip>
#include <iostream>
#include <sstream>

#include "json.hpp"

#include "gramlm/checkpoint.hpp"
#include "gramlm/error.hpp"
#include "gramlm/hash.hpp"
#include "gramlm/plan_io.hpp"

namespace gramlm {

namespace {

using nlohmann::ordered_json;

std::string lexicon_config_string(const ExtractLexiconOptions& o) {
  ordered_json j;
  ordered_json k = ordered_json::object();
  for (const auto& [order, size] : o.lexicon.k) k[std::to_string(order)] = size;
  j["k"] = k;
  j["min_count"] = o.lexicon.min_count;
  j["lowercase"] = o.tokenize.lowercase;
  j["doc_per_line"] = o.tokenize.doc_per_line;
  return j.dump();
}

std::string masks_config_string(const MakeMasksOptions& o) {
  ordered_json j;
  j["objective"] = objective_name(o.objective);
  j["rate"] = o.rate;
  j["max_tokens"] = o.max_tokens;
  j["max_query"] = o.max_query;
  j["ngram_only"] = o.ngram_only;
  j["lowercase"] = o.tokenize.lowercase;
  j["doc_per_line"] = o.tokenize.doc_per_line;
  return j.dump();
}

std::string csv_field(const std::string& s) {
  if (s.find_first_of(",\"\n") == std::string::npos) return s;
  std::string out = "\"";
  for (char c : s) {
    if (c == '"') out += '"';
    out += c;
  }
  return out + "\"";
}

}  // namespace

std::string file_hash(const std::filesystem::path& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw IoError("cannot read " + path.string());
  Fnv1a h;
  char buf[1 << 16];
  while (in) {
    in.read(buf, sizeof buf);
    h.update(std::string_view(buf, static_cast<std::size_t>(in.gcount())));
  }
  return h.hex();
}

void Provenance::add_input(const std::filesystem::path& path) {
  inputs.emplace_back(path.string(), file_hash(path));
}

std::string Provenance::json() const {
  ordered_json j;
  j["tool"] = "gramlm";
  j["command"] = command;
  j["seed"] = seed;
  j["config_hash"] = config_hash;
  ordered_json in = ordered_json::array();
  for (const auto& [path, hash] : inputs) in.push_back({{"path", path}, {"hash", hash}});
  j["inputs"] = in;
  return j.dump();
}

NGramLexicon cmd_extract_lexicon(const ExtractLexiconOptions& o) {
  if (o.corpus.empty()) throw ArgumentError("extract-lexicon needs at least one corpus file");
  if (o.lexicon.k.empty()) throw ConfigError("no n-gram orders requested");
  for (const auto& [order, k] : o.lexicon.k) {
    if (order < 2) throw ConfigError("n-gram orders start at 2");
    if (k < 1) throw ConfigError("k for order " + std::to_string(order) + " must be >= 1");
  }
  Provenance prov{"extract-lexicon", o.seed, hash_hex(lexicon_config_string(o)), {}};
  for (const auto& p : o.corpus) prov.add_input(p);

  const WordStream stream = ingest(o.corpus, o.tokenize);
  const int n_max = o.lexicon.k.rbegin()->first;
  const CountTables counts = o.shards > 1 ? count_ngrams_sharded(stream, n_max, o.shards)
                                          : count_ngrams(stream, n_max);
  NGramLexicon lexicon = extract_lexicon(counts, o.lexicon);

  std::ofstream out(o.out, std::ios::binary | std::ios::trunc);
  if (!out) throw IoError("cannot write " + o.out.string());
  write_lexicon_tsv(out, lexicon, prov.json());
  out.close();
  if (!out) throw IoError("error while writing " + o.out.string());
  return lexicon;
}

void cmd_segment(const SegmentOptions& o) {
  if (o.corpus.empty()) throw ArgumentError("segment needs at least one corpus file");
  Provenance prov{"segment", o.seed,
                  hash_hex(std::string("lowercase=") + (o.tokenize.lowercase ? "1" : "0") +
                           " doc_per_line=" + (o.tokenize.doc_per_line ? "1" : "0")),
                  {}};
  for (const auto& p : o.corpus) prov.add_input(p);
  prov.add_input(o.lexicon);
  const NGramLexicon lexicon = load_lexicon(o.lexicon);
  const WordStream stream = ingest(o.corpus, o.tokenize);
  std::ofstream out(o.out, std::ios::binary | std::ios::trunc);
  if (!out) throw IoError("cannot write " + o.out.string());
  out << "# " << prov.json() << '\n';
  for (const Words& doc : stream.documents) {
    const BoundarySeq b = extract_boundaries(doc, lexicon);
    for (std::size_t i = 0; i < b.b.size(); ++i) out << (i ? " " : "") << b.b[i];
    out << '\t';
    for (std::size_t s = 0; s < b.segment_count(); ++s) {
      if (s) out << " | ";
      out << join_words(std::span(doc).subspan(b.segment_begin(s), b.segment_length(s)));
    }
    out << '\n';
  }
  if (!out) throw IoError("error while writing " + o.out.string());
}

std::vector<MaskPlan> build_plans(const WordStream& stream, const JointVocab& joint,
                                  const MakeMasksOptions& o) {
  if (o.objective != Objective::kContiguous && joint.ngram_size() == 0) {
    throw ConfigError(std::string(objective_name(o.objective)) +
                      " masking needs a non-empty n-gram lexicon");
  }
  if (o.max_tokens < 1) throw ConfigError("max_tokens must be >= 1");
  PlanOptions plan_options{o.max_query};
  RngState rng = derive_rng(o.seed, 0);
  std::vector<MaskPlan> plans;
  for (const Words& doc : stream.documents) {
    const SegmentedSequence seq = segment_sequence(doc, joint);
    for (const SegmentedSequence& window : split_windows(seq, o.max_tokens)) {
      const MaskedSet masked = o.ngram_only ? sample_ngram_mask(window, o.rate, rng)
                                            : sample_mask(window.boundaries, o.rate, rng);
      if (masked.empty()) continue;
      switch (o.objective) {
        case Objective::kContiguous:
          plans.push_back(plan_contiguous(window, masked, joint.fine()));
          break;
        case Objective::kExplicit:
          plans.push_back(plan_explicit(window, masked, joint));
          break;
        case Objective::kComprehensive:
          plans.push_back(plan_comprehensive(window, masked, joint, plan_options));
          break;
        case Objective::kRelation:
          plans.push_back(plan_comprehensive(window, masked, joint, plan_options));
          plans.back().objective = Objective::kRelation;
          break;
      }
    }
  }
  return plans;
}

std::size_t cmd_make_masks(const MakeMasksOptions& o) {
  if (o.corpus.empty()) throw ArgumentError("make-masks needs at least one corpus file");
  if (!(o.rate > 0.0 && o.rate < 1.0)) throw ArgumentError("mask rate must be in (0, 1)");
  Provenance prov{"make-masks", o.seed, hash_hex(masks_config_string(o)), {}};
  for (const auto& p : o.corpus) prov.add_input(p);
  prov.add_input(o.lexicon);
  prov.add_input(o.vocab);

  const JointVocab joint(FineVocab::load(o.vocab), load_lexicon(o.lexicon));
  const WordStream stream = ingest(o.corpus, o.tokenize);
  const std::vector<MaskPlan> plans = build_plans(stream, joint, o);
  if (o.objective == Objective::kComprehensive || o.objective == Objective::kRelation) {
    std::size_t fallback = 0;
    for (const MaskPlan& plan : plans) {
      for (const MaskedSegment& m : plan.masked) fallback += m.coarse == 0 && m.fine > 1;
    }
    if (fallback > 0) {
      std::clog << "warning: " << fallback << " masked segments longer than " << o.max_query
                << " subwords or outside the lexicon were masked contiguously\n";
    }
  }

  ordered_json header;
  header["provenance"] = ordered_json::parse(prov.json());
  header["objective"] = objective_name(o.objective);
  header["fine_vocab"] = joint.fine_size();
  header["joint_size"] = joint.size();
  header["mask_id"] = joint.fine().mask_id();
  header["max_query"] = o.max_query;
  header["plans"] = plans.size();
  PlanWriter writer(o.out, header.dump());
  for (const MaskPlan& plan : plans) writer.write(plan);
  writer.close();

  if (o.json_out) {
    std::ofstream js(*o.json_out, std::ios::trunc);
    if (!js) throw IoError("cannot write " + o.json_out->string());
    js << header.dump() << '\n';
    for (const MaskPlan& plan : plans) js << plan_to_json(plan, &joint) << '\n';
    if (!js) throw IoError("error while writing " + o.json_out->string());
  }
  return plans.size();
}

PlanHeader parse_plan_header(const std::string& header_json) {
  try {
    const auto j = nlohmann::json::parse(header_json);
    PlanHeader h;
    h.objective = parse_objective(j.at("objective").get<std::string>());
    h.fine_vocab = j.at("fine_vocab");
    h.joint_size = j.at("joint_size");
    h.mask_id = j.at("mask_id");
    h.max_query = j.at("max_query");
    return h;
  } catch (const nlohmann::json::exception& e) {
    throw ParseError(std::string("plan file header: ") + e.what(), 0);
  }
}

std::uint64_t cmd_train(const TrainOptions& o) {
  const PlanFile file = read_plan_file(o.plans);
  const PlanHeader header = parse_plan_header(file.header_json);

  TrainConfig config;
  config.objective = header.objective;
  if (o.config) config = load_train_config(*o.config, config);
  for (const auto& [key, value] : o.overrides) apply_train_option(config, key, value);
  if (o.seed) config.seed = *o.seed;
  config.model.fine_vocab = static_cast<int>(header.fine_vocab);
  config.model.ngram_vocab = static_cast<int>(header.joint_size - header.fine_vocab);
  config.validate();
  std::size_t longest = 0;
  for (const MaskPlan& p : file.plans) longest = std::max(longest, p.context_length());
  if (longest > static_cast<std::size_t>(config.model.max_positions)) {
    throw ConfigError("plans need " + std::to_string(longest) + " positions but max_positions is " +
                      std::to_string(config.model.max_positions));
  }

  Provenance prov{"train", config.seed, hash_hex(train_config_json(config)), {}};
  prov.add_input(o.plans);
  if (o.config) prov.add_input(*o.config);
  if (o.resume) prov.add_input(*o.resume);
  ordered_json meta;
  meta["objective"] = objective_name(config.objective);
  meta["train_config"] = ordered_json::parse(train_config_json(config));
  meta["provenance"] = ordered_json::parse(prov.json());
  const std::string meta_json = meta.dump();

  std::optional<Trainer> trainer;
  if (o.resume) {
    trainer.emplace(config, file.plans, header.mask_id, header.joint_size, load_checkpoint(*o.resume));
  } else {
    trainer.emplace(config, file.plans, header.mask_id, header.joint_size);
  }

  std::ofstream metrics;
  if (o.metrics) {
    metrics.open(*o.metrics, o.resume ? std::ios::app : std::ios::trunc);
    if (!metrics) throw IoError("cannot write " + o.metrics->string());
  }
  const std::uint64_t until =
      o.stop_at ? std::min<std::uint64_t>(o.stop_at, static_cast<std::uint64_t>(config.total_steps))
                : static_cast<std::uint64_t>(config.total_steps);
  std::filesystem::path nan_dump = o.out;
  nan_dump += ".nan";
  trainer->run(
      until, o.metrics ? &metrics : nullptr,
      [&](const Trainer& t) { save_checkpoint(o.out, t.checkpoint(meta_json)); }, nan_dump);
  save_checkpoint(o.out, trainer->checkpoint(meta_json));
  if (o.metrics && !metrics) throw IoError("error while writing " + o.metrics->string());
  return trainer->steps_done();
}

std::string cmd_eval_ppl(const EvalPplOptions& o) {
  const Checkpoint ckpt = load_checkpoint(o.checkpoint);
  const PlanFile file = read_plan_file(o.plans);
  const PlanHeader header = parse_plan_header(file.header_json);
  if (header.joint_size != static_cast<std::size_t>(ckpt.config.joint_vocab()) ||
      header.fine_vocab != static_cast<std::size_t>(ckpt.config.fine_vocab)) {
    throw VersionError("plan vocab sizes do not match the checkpoint");
  }
  const PplResult r = eval_ngram_ppl(ckpt.params, file.plans, o.mode);
  Provenance prov{"eval-ppl", o.seed,
                  hash_hex(o.mode == PplMode::kNgram ? "mode=ngram" : "mode=token-mean"), {}};
  prov.add_input(o.checkpoint);
  prov.add_input(o.plans);
  ordered_json j;
  j["provenance"] = ordered_json::parse(prov.json());
  j["objective"] = objective_name(header.objective);
  j["mode"] = o.mode == PplMode::kNgram ? "ngram" : "token-mean";
  j["ngrams"] = r.ngrams;
  j["ppl"] = r.ppl;
  j["mean_log_ppl"] = r.mean_log_ppl;
  return j.dump();
}

void cmd_export(const ExportOptions& o) {
  const Checkpoint ckpt = load_checkpoint(o.checkpoint);
  const Encoder<float> enc = export_finetune_weights(ckpt.params, ckpt.config.fine_vocab);
  Provenance prov{"export", o.seed, hash_hex(model_config_json(ckpt.config)), {}};
  prov.add_input(o.checkpoint);
  ordered_json meta;
  meta["provenance"] = ordered_json::parse(prov.json());
  meta["parameters"] = parameter_count(enc);
  save_encoder(o.out, enc, meta.dump());
}

void cmd_inspect_attention(const InspectOptions& o) {
  const Checkpoint ckpt = load_checkpoint(o.checkpoint);
  const FineVocab vocab = FineVocab::load(o.vocab);
  if (vocab.size() != static_cast<std::size_t>(ckpt.config.fine_vocab)) {
    throw VersionError("vocab has " + std::to_string(vocab.size()) + " pieces, checkpoint expects " +
                       std::to_string(ckpt.config.fine_vocab));
  }
  validate_utf8(o.text);
  const Words words = split_words(o.text, o.lowercase);
  if (words.empty()) throw ArgumentError("inspect-attention needs non-empty text");
  const SubwordEncoding encoding = subword_tokenize(words, vocab);
  const std::size_t n = encoding.ids.size();
  if (n > static_cast<std::size_t>(ckpt.config.max_positions)) {
    throw ArgumentError("text has " + std::to_string(n) + " subwords, model supports " +
                        std::to_string(ckpt.config.max_positions));
  }
  std::vector<std::uint32_t> positions(n);
  for (std::size_t i = 0; i < n; ++i) positions[i] = static_cast<std::uint32_t>(i + 1);
  const auto size = static_cast<Eigen::Index>(n);
  const Activations<float> act =
      encode(ckpt.params.encoder, std::span<const TokenId>(encoding.ids), positions,
             Matrix<float>::Zero(size, size).eval());
  const std::size_t last = act.layers.size() - 1;
  Matrix<double> mean = Matrix<double>::Zero(size, size);
  for (int h = 0; h < ckpt.params.encoder.heads; ++h) {
    mean += act.attention(last, static_cast<std::size_t>(h)).cast<double>();
  }
  mean /= static_cast<double>(ckpt.params.encoder.heads);

  Provenance prov{"inspect-attention", o.seed, hash_hex(o.text), {}};
  prov.add_input(o.checkpoint);
  prov.add_input(o.vocab);
  std::ofstream out(o.out, std::ios::trunc);
  if (!out) throw IoError("cannot write " + o.out.string());
  out << "# " << prov.json() << '\n';
  out << "token";
  for (TokenId id : encoding.ids) out << ',' << csv_field(vocab.piece(id));
  out << '\n' << std::setprecision(9);
  for (Eigen::Index i = 0; i < size; ++i) {
    out << csv_field(vocab.piece(encoding.ids[static_cast<std::size_t>(i)]));
    for (Eigen::Index j = 0; j < size; ++j) out << ',' << mean(i, j);
    out << '\n';
  }
  if (!out) throw IoError("error while writing " + o.out.string());
}

}  // namespace gramlm
