// Acceptance run: one PASS/FAIL line per criterion, exit status 1 if any fails.
#include <sys/wait.h>

#include <algorithm>
#include <chrono>
#include <cstdio>
#include <cstdlib>
#include <functional>
#include <iostream>
#include <set>
#include <sstream>
#include <string>
#include <vector>

#include "fixtures.hpp"
#include "gramlm/checkpoint.hpp"
#include "gramlm/corpus.hpp"
#include "gramlm/lexicon.hpp"
#include "gramlm/loss.hpp"
#include "gramlm/objective.hpp"
#include "gramlm/pipeline.hpp"
#include "gramlm/segmenter.hpp"
#include "gramlm/train.hpp"
#include "oracles.hpp"
#include "synthetic.hpp"
#include "tempdir.hpp"

using namespace gramlm;
using namespace gramlm::testing;

namespace {

struct Outcome {
  bool pass = false;
  std::string detail;
};

class Stopwatch {
 public:
  double seconds() const {
    return std::chrono::duration<double>(std::chrono::steady_clock::now() - start_).count();
  }

 private:
  std::chrono::steady_clock::time_point start_ = std::chrono::steady_clock::now();
};

std::string fmt(const char* f, auto... args) {
  char buf[512];
  std::snprintf(buf, sizeof buf, f, args...);
  return buf;
}

Outcome lexicon_oracle() {
  const auto path = std::filesystem::path(GRAMLM_TEST_DATA) / "synthetic50k.txt";
  const LexiconConfig cfg;  // k2 = 2000, k3 = 1000, min_count = 5
  Stopwatch timer;
  const std::vector<std::filesystem::path> files{path};
  const WordStream stream = ingest(files, {});
  const NGramLexicon lex = extract_lexicon(count_ngrams(stream, 3), cfg);
  const double secs = timer.seconds();
  const auto oracle = brute_force_lexicon(stream, cfg);
  std::size_t words = 0;
  for (const auto& d : stream.documents) words += d.size();
  std::size_t mismatched = 0;
  for (const auto& [order, rows] : oracle) {
    const auto& got = lex.by_order().at(order);
    if (got.size() != rows.size()) mismatched += std::max(got.size(), rows.size());
    for (std::size_t i = 0; i < std::min(got.size(), rows.size()); ++i) mismatched += !(got[i] == rows[i]);
  }
  return {mismatched == 0 && secs < 10.0,
          fmt("%zu words, %zu rows, %zu mismatched, %.2f s (< 10 s)", words, lex.size(), mismatched,
              secs)};
}

Outcome segmentation_oracle() {
  Stopwatch timer;
  RngState rng{2024, 0};
  const std::vector<std::string> alphabet{"a", "b", "c", "d", "e"};
  std::size_t mismatched = 0;
  std::size_t total = 0;
  std::size_t multi = 0;
  for (int lexicon_round = 0; lexicon_round < 10; ++lexicon_round) {
    std::set<Tuple> entries;
    while (entries.size() < 50) {
      Tuple t(2 + rng.below(3));
      for (auto& w : t) w = alphabet[rng.below(alphabet.size())];
      entries.insert(t);
    }
    std::map<int, std::vector<ScoredNGram>> by_order;
    for (const auto& e : entries) by_order[static_cast<int>(e.size())].push_back({e, 1.0, 1});
    const NGramLexicon lex(by_order);
    for (int s = 0; s < 100; ++s) {
      Words x(1 + rng.below(12));
      for (auto& w : x) w = alphabet[rng.below(alphabet.size())];
      const BoundarySeq got = extract_boundaries(x, lex);
      const BoundarySeq want = exhaustive_min_path(x, entries, 4);
      mismatched += !(got == want);
      multi += got.segment_count() < x.size();
      ++total;
    }
  }
  const double secs = timer.seconds();
  return {mismatched == 0 && secs < 10.0,
          fmt("%zu sequences (%zu with n-grams), %zu mismatched, %.2f s (< 10 s)", total, multi,
              mismatched, secs)};
}

MaskPlan slot_plan(const std::vector<TokenId>& context, std::uint32_t slot, int queries,
                   const FineVocab& fine) {
  MaskPlan p;
  p.objective = Objective::kComprehensive;
  p.context_ids = context;
  p.context_ids[slot] = fine.mask_id();
  for (std::uint32_t i = 0; i < context.size(); ++i) p.positions.push_back(i + 1);
  for (int i = 1; i <= queries; ++i) {
    p.query_ids.push_back(fine.query_id(i));
    p.positions.push_back(slot + 1);
  }
  return p;
}

template <typename S>
Activations<S> encode_plan(const Encoder<S>& enc, const MaskPlan& plan) {
  const auto ids = plan.input_ids();
  return encode(enc, ids, plan.positions, build_attention_mask<S>(plan));
}

Outcome length_leak() {
  Stopwatch timer;
  const JointVocab joint = toy_joint();
  RngState rng{7, 0};
  double worst = 0.0;
  for (int instance = 0; instance < 100; ++instance) {
    const int heads = 1 << rng.below(3);
    const int hidden = heads * 4 * static_cast<int>(1 + rng.below(3));
    ModelConfig cfg = tiny_config(joint, 1 + static_cast<int>(rng.below(3)), hidden, heads,
                                  2 * hidden);
    const ModelParams<float> p = init_params<float>(cfg, 1000 + instance);
    std::vector<TokenId> ctx(3 + rng.below(10));
    for (auto& t : ctx) t = static_cast<TokenId>(rng.below(joint.size()));
    const auto slot = static_cast<std::uint32_t>(rng.below(ctx.size()));
    const auto two = encode_plan(p.encoder, slot_plan(ctx, slot, 2, joint.fine()));
    const auto three = encode_plan(p.encoder, slot_plan(ctx, slot, 3, joint.fine()));
    const auto t = static_cast<Eigen::Index>(ctx.size());
    worst = std::max(worst, static_cast<double>((two.output().topRows(t) - three.output().topRows(t))
                                                    .cwiseAbs()
                                                    .maxCoeff()));
  }
  const double secs = timer.seconds();
  return {worst <= 1e-6 && secs < 30.0,
          fmt("100 models, max |h2 - h3| = %.3g (<= 1e-6), %.2f s (< 30 s)", worst, secs)};
}

Outcome mask_soundness() {
  const JointVocab joint = toy_joint();
  RngState rng{8, 0};
  std::size_t leaks = 0;
  std::size_t checked = 0;
  double worst_row = 0.0;
  for (int trial = 0; trial < 20; ++trial) {
    const ModelConfig cfg = tiny_config(joint, 3, 16, 4, 32);
    const ModelParams<float> p = init_params<float>(cfg, 50 + trial);
    const Objective o = trial % 2 ? Objective::kRelation : Objective::kComprehensive;
    for (const MaskPlan& plan : random_plans(joint, o, 10, rng, 0.4, 12)) {
      const auto mask = build_attention_mask<float>(plan);
      const auto act = encode_plan(p.encoder, plan);
      for (std::size_t l = 0; l < act.layers.size(); ++l) {
        for (int h = 0; h < cfg.heads; ++h) {
          const auto& a = act.attention(l, static_cast<std::size_t>(h));
          leaks += ((mask.array() != 0.0f) && (a.array() != 0.0f)).count();
          checked += (mask.array() != 0.0f).count();
          worst_row = std::max(worst_row,
                               static_cast<double>((a.rowwise().sum().array() - 1.0f).abs().maxCoeff()));
        }
      }
    }
  }
  return {leaks == 0 && checked > 0 && worst_row <= 1e-5,
          fmt("%zu blocked weights, %zu nonzero; max |row sum - 1| = %.3g (<= 1e-5)", checked, leaks,
              worst_row)};
}

Outcome gradient_check() {
  Stopwatch timer;
  const JointVocab joint = toy_joint();
  const ModelConfig cfg = tiny_config(joint, 2, 16, 2, 32);
  const ModelParams<double> p = init_params<double>(cfg, 99);
  std::string detail;
  bool pass = true;
  for (Objective o : {Objective::kContiguous, Objective::kExplicit, Objective::kComprehensive,
                      Objective::kRelation}) {
    RngState rng{500 + static_cast<std::uint64_t>(o), 0};
    const auto plans = random_plans(joint, o, 3, rng);
    const auto r = finite_difference_check(p, plans, LossWeights{}, 200, rng);
    pass &= r.samples.size() == 200 && r.max_rel_error <= 1e-4;
    detail += fmt("%s %.2g; ", std::string(objective_name(o)).c_str(), r.max_rel_error);
  }
  const double secs = timer.seconds();
  pass &= secs < 120.0;
  return {pass, "max rel error per loss over 200 params: " + detail + fmt("%.1f s (< 120 s)", secs)};
}

Outcome additivity() {
  const JointVocab joint = toy_joint();
  RngState rng{10, 0};
  const auto plans = random_plans(joint, Objective::kComprehensive, 64, rng);
  TrainConfig c;
  c.objective = Objective::kComprehensive;
  c.batch_size = 4;
  c.total_steps = 100;
  c.warmup_steps = 10;
  c.model = tiny_config(joint, 2, 16, 2, 32);
  Trainer t(c, plans, joint.fine().mask_id(), joint.size());
  std::size_t failures = 0;
  std::size_t plans_checked = 0;
  for (int step = 0; step < 100; ++step) {
    const auto batch = t.batch_at(t.steps_done());
    const LossReport r = t.step();
    failures += !(r.comprehensive_sum == r.coarse_sum + r.fine_sum);
    for (const MaskPlan& plan : batch) {
      const auto ids = plan.input_ids();
      const auto act = encode(t.params().encoder, ids, plan.positions, build_attention_mask<float>(plan));
      std::vector<std::uint32_t> cr, cy, fr, fy;
      for (const auto& x : plan.coarse) cr.push_back(x.index), cy.push_back(x.id);
      for (const auto& x : plan.fine) fr.push_back(x.index), fy.push_back(x.id);
      const Matrix<float> coarse = predict_ngram(act, cr, t.params());
      const Matrix<float> fine = predict_fine(act, fr, t.params());
      const ComprehensiveNll comp = loss_comprehensive(coarse, fine, plan);
      failures += !(comp.sum == loss_explicit(coarse, cy).sum + loss_contiguous(fine, fy).sum);
      ++plans_checked;
    }
  }
  return {failures == 0,
          fmt("100 batches, %zu plans; %zu inexact decompositions", plans_checked, failures)};
}

struct ReplicationSetup {
  JointVocab joint;
  std::vector<MaskPlan> train_cont, train_expl, held_cont, held_expl;
  std::size_t bytes = 0;
};

ReplicationSetup replication_setup() {
  SyntheticSpec spec;
  spec.words = 170000;
  spec.seed = 31;
  const SyntheticCorpus corpus = make_synthetic_corpus(spec);
  const WordStream all = ingest_text(corpus.text, {});
  WordStream train, held;
  for (std::size_t i = 0; i < all.documents.size(); ++i) {
    (i % 10 == 9 ? held : train).documents.push_back(all.documents[i]);
  }
  const NGramLexicon lex = extract_lexicon(count_ngrams(train, 3), LexiconConfig{});
  ReplicationSetup s{JointVocab(synthetic_vocab(corpus), lex), {}, {}, {}, {}, corpus.text.size()};
  MakeMasksOptions o;
  o.seed = 1;
  o.max_tokens = 48;
  o.objective = Objective::kContiguous;
  s.train_cont = build_plans(train, s.joint, o);
  o.objective = Objective::kExplicit;
  s.train_expl = build_plans(train, s.joint, o);
  o.ngram_only = true;
  o.seed = 2;
  s.held_expl = build_plans(held, s.joint, o);
  o.objective = Objective::kContiguous;
  s.held_cont = build_plans(held, s.joint, o);
  return s;
}

Outcome directional_replication() {
  Stopwatch timer;
  const ReplicationSetup s = replication_setup();
  std::vector<double> cont, expl, cont_mean;
  for (std::uint64_t seed : {1, 2, 3}) {
    for (Objective o : {Objective::kContiguous, Objective::kExplicit}) {
      TrainConfig c;
      c.objective = o;
      c.batch_size = 16;
      c.learning_rate = 1e-3;
      c.warmup_steps = 200;
      c.total_steps = 2000;
      c.seed = seed;
      c.model.layers = 2;
      c.model.hidden = 32;
      c.model.heads = 2;
      c.model.ffn = 64;
      c.model.max_positions = 64;
      c.model.fine_vocab = static_cast<int>(s.joint.fine_size());
      c.model.ngram_vocab = static_cast<int>(s.joint.ngram_size());
      const auto& plans = o == Objective::kContiguous ? s.train_cont : s.train_expl;
      Trainer t(c, plans, s.joint.fine().mask_id(), s.joint.size());
      t.run(2000, nullptr);
      if (o == Objective::kContiguous) {
        cont.push_back(eval_ngram_ppl(t.params(), s.held_cont).ppl);
        cont_mean.push_back(eval_ngram_ppl(t.params(), s.held_cont, PplMode::kTokenMean).ppl);
      } else {
        expl.push_back(eval_ngram_ppl(t.params(), s.held_expl).ppl);
      }
    }
  }
  auto median = [](std::vector<double> v) {
    std::sort(v.begin(), v.end());
    return v[1];
  };
  const double secs = timer.seconds();
  const double mc = median(cont);
  const double me = median(expl);
  return {me < mc && secs <= 1800.0,
          fmt("%.2f MB corpus, |V_N| = %zu; median n-gram PPL explicit %.2f < contiguous %.2f "
              "(token-mean contiguous %.2f); %.0f s (<= 1800 s)",
              s.bytes / 1e6, s.joint.ngram_size(), me, mc, median(cont_mean), secs)};
}

Outcome rtd_sanity() {
  const JointVocab joint = toy_joint();
  RngState rng{12, 0};
  std::size_t not_original = 0;
  std::size_t positions = 0;
  double worst = 0.0;
  // Only generator-filled slots: no token-by-token fallback spans.
  for (const MaskPlan& base : random_plans(joint, Objective::kComprehensive, 50, rng, 0.3, 10, false)) {
    std::vector<std::uint32_t> truth;
    for (const auto& c : base.coarse) truth.push_back(c.id);
    const MaskPlan plan = fill_relation(base, truth, joint.size(), joint.fine().mask_id());
    not_original += std::count(plan.rtd_labels->begin(), plan.rtd_labels->end(), 0);
    const Vector<double> zero = Vector<double>::Zero(static_cast<Eigen::Index>(plan.context_length()));
    const Nll n = loss_rtd(zero, *plan.rtd_labels);
    positions += n.count;
    worst = std::max(worst, std::abs(n.mean() - std::log(2.0)));
  }
  Matrix<double> logits(1, 6);
  logits << 0.3, -1.2, 2.0, 0.0, 1.1, -0.4;
  const Eigen::ArrayXd e = (logits.row(0).array() - logits.maxCoeff()).exp().transpose();
  const Eigen::ArrayXd probs = e / e.sum();
  const int draws = 100000;
  Eigen::ArrayXd counts = Eigen::ArrayXd::Zero(6);
  RngState draw_rng{13, 0};
  for (int i = 0; i < draws; ++i) counts(sample_rows(logits, 1.0, draw_rng)[0]) += 1;
  double worst_z = 0.0;
  for (int j = 0; j < 6; ++j) {
    worst_z = std::max(worst_z, std::abs(counts(j) - draws * probs(j)) /
                                    std::sqrt(draws * probs(j) * (1 - probs(j))));
  }
  return {not_original == 0 && worst <= 1e-9 && worst_z <= 3.0,
          fmt("%zu positions, %zu labeled replaced; |rtd - ln 2| = %.2g (<= 1e-9); "
              "max sampling z = %.2f over 1e5 draws (<= 3)",
              positions, not_original, worst, worst_z)};
}

Outcome export_parity() {
  const JointVocab joint = toy_joint();
  ModelConfig cfg = tiny_config(joint, 2, 16, 2, 32);
  cfg.fine_vocab = 100;
  cfg.ngram_vocab = 7;
  const ModelParams<float> p = init_params<float>(cfg, 4);
  const Encoder<float> e = export_finetune_weights(p, cfg.fine_vocab);
  TempDir dir;
  save_encoder(dir / "e.bin", e);
  const Encoder<float> reloaded = load_encoder(dir / "e.bin");
  const std::size_t count = parameter_count(e);
  const std::size_t vanilla =
      vanilla_encoder_parameter_count(cfg.fine_vocab, cfg.max_positions, cfg.hidden, cfg.ffn, cfg.layers);
  RngState rng{3, 0};
  std::size_t differing = 0;
  for (int trial = 0; trial < 50; ++trial) {
    const std::size_t n = 1 + rng.below(20);
    std::vector<TokenId> ids(n);
    std::vector<std::uint32_t> pos(n);
    for (std::size_t i = 0; i < n; ++i) {
      ids[i] = static_cast<TokenId>(rng.below(cfg.fine_vocab));
      pos[i] = static_cast<std::uint32_t>(i + 1);
    }
    const Matrix<float> mask = Matrix<float>::Zero(n, n);
    const auto before = encode(p.encoder, ids, pos, mask).output();
    differing += !(before == encode(e, ids, pos, mask).output());
    differing += !(before == encode(reloaded, ids, pos, mask).output());
  }
  return {count == vanilla && e.embedding.rows() == 100 && differing == 0,
          fmt("exported %zu params, vanilla %zu; embedding %ldx%ld; %zu of 100 forwards differ",
              count, vanilla, static_cast<long>(e.embedding.rows()),
              static_cast<long>(e.embedding.cols()), differing)};
}

int run_cli(const std::string& args) {
  const int status = std::system((std::string(GRAMLM_CLI) + " " + args + " 2>/dev/null").c_str());
  return WIFEXITED(status) ? WEXITSTATUS(status) : -1;
}

Outcome determinism() {
  TempDir dir;
  const auto corpus = std::filesystem::path(GRAMLM_TEST_DATA) / "synthetic50k.txt";
  const auto vocab = std::filesystem::path(GRAMLM_TEST_DATA) / "synthetic50k.vocab";
  auto q = [](const std::filesystem::path& p) { return "'" + p.string() + "'"; };
  int rc = run_cli("extract-lexicon " + q(corpus) + " --k2 200 --k3 100 -o " + q(dir / "lex.tsv"));
  bool ok = rc == 0;
  // Same command lines both times; outputs are moved aside after each run.
  for (const char* run : {"a", "b"}) {
    const std::string r(run);
    ok &= run_cli("make-masks " + q(corpus) + " --lexicon " + q(dir / "lex.tsv") + " --vocab " +
                  q(vocab) + " --objective relation --seed 9 -o " + q(dir / "plans")) == 0;
    ok &= run_cli("train " + q(dir / "plans") +
                  " --seed 9 --set total_steps=40 --set warmup_steps=5 --set model.hidden=16"
                  " --set model.ffn=32 --metrics " +
                  q(dir / "metrics") + " -o " + q(dir / "ckpt")) == 0;
    for (const char* f : {"plans", "metrics", "ckpt"}) {
      std::error_code ec;
      std::filesystem::rename(dir / f, dir / (std::string(f) + "_" + r), ec);
      ok &= !ec;
    }
  }
  const std::string pa = read_file(dir / "plans_a");
  const std::string ma = read_file(dir / "metrics_a");
  const bool same_plans = !pa.empty() && pa == read_file(dir / "plans_b");
  const bool same_metrics = !ma.empty() && ma == read_file(dir / "metrics_b");
  const bool same_ckpt = read_file(dir / "ckpt_a") == read_file(dir / "ckpt_b");
  return {ok && same_plans && same_metrics && same_ckpt,
          fmt("plan files %s (%zu bytes), metrics logs %s (%zu lines), checkpoints %s",
              same_plans ? "identical" : "DIFFER", pa.size(), same_metrics ? "identical" : "DIFFER",
              static_cast<std::size_t>(std::count(ma.begin(), ma.end(), '\n')),
              same_ckpt ? "identical" : "DIFFER")};
}

}  // namespace

int main(int argc, char** argv) {
  const std::vector<std::pair<const char*, std::function<Outcome()>>> criteria{
      {"lexicon oracle equivalence", lexicon_oracle},
      {"segmentation oracle equivalence", segmentation_oracle},
      {"length-leak freedom", length_leak},
      {"mask soundness", mask_soundness},
      {"gradient correctness", gradient_check},
      {"comprehensive loss additivity", additivity},
      {"explicit beats contiguous n-gram perplexity", directional_replication},
      {"RTD sanity", rtd_sanity},
      {"export parity", export_parity},
      {"determinism", determinism},
  };
  // Optional: run a subset, e.g. `acceptance 1 4 10`.
  std::set<int> only;
  for (int i = 1; i < argc; ++i) only.insert(std::atoi(argv[i]));
  int failed = 0;
  for (std::size_t i = 0; i < criteria.size(); ++i) {
    const int id = static_cast<int>(i + 1);
    if (!only.empty() && !only.count(id)) continue;
    Outcome r;
    try {
      r = criteria[i].second();
    } catch (const std::exception& e) {
      r = {false, std::string("exception: ") + e.what()};
    }
    failed += !r.pass;
    std::cout << (r.pass ? "PASS" : "FAIL") << " criterion " << id << " (" << criteria[i].first
              << "): " << r.detail << std::endl;
  }
  return failed == 0 ? 0 : 1;
}
