// gramlm: n-gram lexicon extraction, mask planning, training and inspection.
#include <iostream>
#include <map>
#include <string>
#include <vector>

#include "CLI11.hpp"

#include "gramlm/error.hpp"
#include "gramlm/pipeline.hpp"

namespace {

using namespace gramlm;

int exit_code_for(const std::exception& e) {
  if (dynamic_cast<const NumericError*>(&e)) return 4;
  if (dynamic_cast<const ArgumentError*>(&e) || dynamic_cast<const ConfigError*>(&e)) return 2;
  return 3;
}

std::pair<std::string, std::string> split_override(const std::string& kv) {
  const auto eq = kv.find('=');
  if (eq == std::string::npos) throw ArgumentError("override '" + kv + "' is not key=value");
  return {kv.substr(0, eq), kv.substr(eq + 1)};
}

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"gramlm: explicit n-gram masked language modeling pipeline"};
  app.require_subcommand(1);

  // extract-lexicon
  ExtractLexiconOptions ex;
  std::size_t k2 = 2000;
  std::size_t k3 = 1000;
  std::vector<std::string> extra_k;
  bool ex_no_lower = false;
  bool ex_paragraphs = false;
  auto* ex_cmd = app.add_subcommand("extract-lexicon", "Score n-grams with the t-test and keep the top k per order");
  ex_cmd->add_option("corpus", ex.corpus, "UTF-8 corpus files")->required()->check(CLI::ExistingFile);
  ex_cmd->add_option("--k2", k2, "bigrams to keep")->capture_default_str();
  ex_cmd->add_option("--k3", k3, "trigrams to keep (0 drops the order)")->capture_default_str();
  ex_cmd->add_option("--k", extra_k, "extra order=k pairs, e.g. 4=500");
  ex_cmd->add_option("--min-count", ex.lexicon.min_count, "count floor before scoring")->capture_default_str();
  ex_cmd->add_option("--shards", ex.shards, "counting threads")->capture_default_str();
  ex_cmd->add_flag("--no-lowercase", ex_no_lower, "keep case");
  ex_cmd->add_flag("--paragraphs", ex_paragraphs, "documents are separated by blank lines instead of one per line");
  ex_cmd->add_option("--seed", ex.seed, "recorded in the provenance header")->capture_default_str();
  ex_cmd->add_option("-o,--out", ex.out, "lexicon TSV")->required();

  // segment
  SegmentOptions sg;
  bool sg_no_lower = false;
  bool sg_paragraphs = false;
  auto* sg_cmd = app.add_subcommand("segment", "Maximum-matching n-gram boundaries per document");
  sg_cmd->add_option("corpus", sg.corpus, "UTF-8 corpus files")->required()->check(CLI::ExistingFile);
  sg_cmd->add_option("--lexicon", sg.lexicon, "lexicon TSV")->required()->check(CLI::ExistingFile);
  sg_cmd->add_flag("--no-lowercase", sg_no_lower, "keep case");
  sg_cmd->add_flag("--paragraphs", sg_paragraphs, "documents are separated by blank lines");
  sg_cmd->add_option("--seed", sg.seed, "recorded in the provenance header")->capture_default_str();
  sg_cmd->add_option("-o,--out", sg.out, "TSV output")->required();

  // make-masks
  MakeMasksOptions mm;
  std::string mm_objective = "explicit";
  std::string mm_json;
  bool mm_no_lower = false;
  bool mm_paragraphs = false;
  auto* mm_cmd = app.add_subcommand("make-masks", "Segment, sample masks and write training plans");
  mm_cmd->add_option("corpus", mm.corpus, "UTF-8 corpus files")->required()->check(CLI::ExistingFile);
  mm_cmd->add_option("--lexicon", mm.lexicon, "lexicon TSV")->required()->check(CLI::ExistingFile);
  mm_cmd->add_option("--vocab", mm.vocab, "fine vocab, one piece per line")->required()->check(CLI::ExistingFile);
  mm_cmd->add_option("--objective", mm_objective, "contiguous | explicit | comprehensive | relation")->capture_default_str();
  mm_cmd->add_option("--rate", mm.rate, "fraction of segments masked")->capture_default_str();
  mm_cmd->add_option("--max-tokens", mm.max_tokens, "subwords per window")->capture_default_str();
  mm_cmd->add_option("--max-query", mm.max_query, "longest n-gram given query symbols")->capture_default_str();
  mm_cmd->add_flag("--ngram-only", mm.ngram_only, "mask only multi-word segments (evaluation sets)");
  mm_cmd->add_flag("--no-lowercase", mm_no_lower, "keep case");
  mm_cmd->add_flag("--paragraphs", mm_paragraphs, "documents are separated by blank lines");
  mm_cmd->add_option("--seed", mm.seed, "mask sampling seed")->capture_default_str();
  mm_cmd->add_option("--dump-json", mm_json, "also write a JSON-lines dump");
  mm_cmd->add_option("-o,--out", mm.out, "plan file")->required();

  // train
  TrainOptions tr;
  std::string tr_config;
  std::vector<std::string> tr_set;
  std::string tr_metrics;
  std::string tr_resume;
  std::uint64_t tr_seed = 0;
  auto* tr_cmd = app.add_subcommand("train", "Train on a plan file");
  tr_cmd->add_option("plans", tr.plans, "plan file")->required()->check(CLI::ExistingFile);
  tr_cmd->add_option("--config", tr_config, "key = value config file")->check(CLI::ExistingFile);
  tr_cmd->add_option("--set", tr_set, "config override key=value (repeatable)");
  auto* tr_seed_opt = tr_cmd->add_option("--seed", tr_seed, "overrides the config seed");
  tr_cmd->add_option("--metrics", tr_metrics, "JSON-lines metrics log");
  tr_cmd->add_option("--resume", tr_resume, "continue from checkpoint")->check(CLI::ExistingFile);
  tr_cmd->add_option("--stop-at", tr.stop_at, "stop after this many total steps");
  std::string tr_keep;
  tr_cmd->add_option("--keep-mask-prob", tr_keep, "relation modeling: chance a slot keeps [MASK]");
  tr_cmd->add_option("-o,--out", tr.out, "checkpoint")->required();

  // eval-ppl
  EvalPplOptions ev;
  std::string ev_mode = "ngram";
  auto* ev_cmd = app.add_subcommand("eval-ppl", "Geometric-mean n-gram perplexity on held-out plans");
  ev_cmd->add_option("checkpoint", ev.checkpoint, "checkpoint")->required()->check(CLI::ExistingFile);
  ev_cmd->add_option("plans", ev.plans, "plan file")->required()->check(CLI::ExistingFile);
  ev_cmd->add_option("--mode", ev_mode, "ngram | token-mean")->capture_default_str();
  ev_cmd->add_option("--seed", ev.seed, "recorded in the provenance header")->capture_default_str();

  // export
  ExportOptions exp;
  auto* exp_cmd = app.add_subcommand("export", "Drop n-gram rows and auxiliary heads for fine-tuning");
  exp_cmd->add_option("checkpoint", exp.checkpoint, "checkpoint")->required()->check(CLI::ExistingFile);
  exp_cmd->add_option("--seed", exp.seed, "recorded in the provenance header")->capture_default_str();
  exp_cmd->add_option("-o,--out", exp.out, "encoder file")->required();

  // inspect-attention
  InspectOptions in;
  bool in_no_lower = false;
  auto* in_cmd = app.add_subcommand("inspect-attention", "Last-layer head-mean attention as CSV");
  in_cmd->add_option("checkpoint", in.checkpoint, "checkpoint")->required()->check(CLI::ExistingFile);
  in_cmd->add_option("--vocab", in.vocab, "fine vocab")->required()->check(CLI::ExistingFile);
  in_cmd->add_option("--text", in.text, "sentence to encode")->required();
  in_cmd->add_flag("--no-lowercase", in_no_lower, "keep case");
  in_cmd->add_option("--seed", in.seed, "recorded in the provenance header")->capture_default_str();
  in_cmd->add_option("-o,--out", in.out, "CSV output")->required();

  try {
    app.parse(argc, argv);
  } catch (const CLI::ParseError& e) {
    const int rc = app.exit(e);
    return rc == 0 ? 0 : 2;
  }

  try {
    if (*ex_cmd) {
      ex.lexicon.k = {{2, k2}};
      if (k3 > 0) ex.lexicon.k[3] = k3;
      for (const auto& kv : extra_k) {
        const auto [order, k] = split_override(kv);
        ex.lexicon.k[std::stoi(order)] = static_cast<std::size_t>(std::stoull(k));
      }
      ex.tokenize = {!ex_no_lower, !ex_paragraphs};
      cmd_extract_lexicon(ex);
    } else if (*sg_cmd) {
      sg.tokenize = {!sg_no_lower, !sg_paragraphs};
      cmd_segment(sg);
    } else if (*mm_cmd) {
      mm.objective = parse_objective(mm_objective);
      mm.tokenize = {!mm_no_lower, !mm_paragraphs};
      if (!mm_json.empty()) mm.json_out = mm_json;
      const std::size_t n = cmd_make_masks(mm);
      std::cerr << "wrote " << n << " plans to " << mm.out.string() << '\n';
    } else if (*tr_cmd) {
      if (!tr_config.empty()) tr.config = tr_config;
      for (const auto& kv : tr_set) tr.overrides.push_back(split_override(kv));
      if (*tr_seed_opt) tr.seed = tr_seed;
      if (!tr_keep.empty()) tr.overrides.emplace_back("keep_mask_prob", tr_keep);
      if (!tr_metrics.empty()) tr.metrics = tr_metrics;
      if (!tr_resume.empty()) tr.resume = tr_resume;
      const auto steps = cmd_train(tr);
      std::cerr << "trained to step " << steps << "; checkpoint " << tr.out.string() << '\n';
    } else if (*ev_cmd) {
      if (ev_mode == "ngram") ev.mode = PplMode::kNgram;
      else if (ev_mode == "token-mean") ev.mode = PplMode::kTokenMean;
      else throw ArgumentError("--mode must be ngram or token-mean");
      std::cout << cmd_eval_ppl(ev) << '\n';
    } else if (*exp_cmd) {
      cmd_export(exp);
    } else if (*in_cmd) {
      in.lowercase = !in_no_lower;
      cmd_inspect_attention(in);
    }
  } catch (const std::invalid_argument& e) {
    std::cerr << "gramlm: invalid number: " << e.what() << '\n';
    return 2;
  } catch (const Error& e) {
    std::cerr << "gramlm: " << e.what() << '\n';
    return exit_code_for(e);
  } catch (const std::exception& e) {
    std::cerr << "gramlm: " << e.what() << '\n';
    return 3;
  }
  return 0;
}
