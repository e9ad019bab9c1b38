#include <cmath>
#include <cstring>
#include <numeric>
#include <sstream>

#include "doctest.h"
#include "fixtures.hpp"
#include "gramlm/error.hpp"
#include "gramlm/loss.hpp"
#include "gramlm/objective.hpp"
#include "gramlm/train.hpp"
#include "tempdir.hpp"

using namespace gramlm;
using namespace gramlm::testing;

namespace {

// Logits whose softmax row is exactly `probs` (up to rounding).
Matrix<double> logits_for(std::initializer_list<std::initializer_list<double>> rows) {
  Matrix<double> m(static_cast<Eigen::Index>(rows.size()), static_cast<Eigen::Index>(rows.begin()->size()));
  Eigen::Index i = 0;
  for (const auto& r : rows) {
    Eigen::Index j = 0;
    for (double p : r) m(i, j++) = std::log(p);
    ++i;
  }
  return m;
}

bool params_bit_equal(const ModelParams<float>& a, const ModelParams<float>& b) {
  const auto ra = tensor_refs(a);
  const auto rb = tensor_refs(b);
  for (std::size_t i = 0; i < ra.size(); ++i) {
    if (std::memcmp(ra[i].data, rb[i].data, sizeof(float) * ra[i].size()) != 0) return false;
  }
  return true;
}

TrainConfig small_train_config(const JointVocab& joint, Objective objective) {
  TrainConfig c;
  c.objective = objective;
  c.batch_size = 4;
  c.learning_rate = 3e-3;
  c.warmup_steps = 10;
  c.total_steps = 200;
  c.seed = 5;
  c.model = tiny_config(joint, 1, 16, 2, 32);
  c.model.dropout = 0.1;
  return c;
}

}  // namespace

TEST_CASE("cross-entropy worked values") {
  const std::vector<std::uint32_t> t0{0};
  CHECK(loss_contiguous(Matrix<double>::Zero(1, 4).eval(), t0).mean() ==
        doctest::Approx(std::log(4.0)).epsilon(1e-15));
  CHECK(loss_explicit(Matrix<double>::Zero(1, 107).eval(), t0).mean() ==
        doctest::Approx(std::log(107.0)).epsilon(1e-15));
  const std::vector<std::uint32_t> t01{0, 1};
  const auto two = logits_for({{0.5, 0.25, 0.25}, {0.5, 0.25, 0.25}});
  CHECK(loss_contiguous(two, t01).mean() ==
        doctest::Approx((std::log(2.0) + std::log(4.0)) / 2).epsilon(1e-14));
  CHECK(loss_explicit(logits_for({{0.1, 0.9}}), t0).sum == doctest::Approx(std::log(10.0)).epsilon(1e-14));
  Matrix<double> sharp = Matrix<double>::Constant(1, 5, -50.0);
  sharp(0, 3) = 50.0;
  const std::vector<std::uint32_t> t3{3};
  CHECK(loss_contiguous(sharp, t3).sum < 1e-40);
  const std::vector<std::uint32_t> bad{5};
  CHECK_THROWS_AS(loss_contiguous(sharp, bad), ArgumentError);
  CHECK_THROWS_AS(loss_contiguous(sharp, t01), ArgumentError);
}

TEST_CASE("explicit loss is invariant to slot order") {
  Matrix<double> l(3, 4);
  l << 0.1, 0.2, 0.3, 0.4, -1, 2, 0, 1, 3, 3, 3, -2;
  Matrix<double> r(3, 4);
  r << l.row(2), l.row(0), l.row(1);
  const std::vector<std::uint32_t> a{1, 2, 0};
  const std::vector<std::uint32_t> b{0, 1, 2};
  CHECK(loss_explicit(l, a).sum == doctest::Approx(loss_explicit(r, b).sum).epsilon(1e-15));
}

TEST_CASE("binary cross-entropy worked values") {
  const Vector<double> zeros = Vector<double>::Zero(6);
  const std::vector<std::uint8_t> labels{1, 0, 1, 1, 0, 1};
  CHECK(std::abs(loss_rtd(zeros, labels).mean() - std::log(2.0)) <= 1e-12);
  Vector<double> confident(6);
  for (int i = 0; i < 6; ++i) confident(i) = labels[i] ? 60.0 : -60.0;
  CHECK(loss_rtd(confident, labels).mean() < 1e-20);
  std::vector<std::uint8_t> flipped = labels;
  flipped[2] = 0;
  Vector<double> z(6);
  z << 0.3, -0.2, 1.5, 0.1, -2, 0.7;
  const double delta = loss_rtd(z, flipped).sum - loss_rtd(z, labels).sum;
  // softplus(1.5) - softplus(-1.5) = 1.5
  CHECK(delta == doctest::Approx(1.5).epsilon(1e-12));
}

TEST_CASE("comprehensive loss is the sum of its parts") {
  const JointVocab joint = toy_joint();
  RngState rng{2, 0};
  const MaskPlan plan = random_plans(joint, Objective::kComprehensive, 1, rng)[0];
  Matrix<double> coarse = Matrix<double>::Random(plan.coarse.size(), joint.size());
  Matrix<double> fine = Matrix<double>::Random(plan.fine.size(), joint.fine_size());
  std::vector<std::uint32_t> cy, fy;
  for (const auto& t : plan.coarse) cy.push_back(t.id);
  for (const auto& t : plan.fine) fy.push_back(t.id);
  const ComprehensiveNll c = loss_comprehensive(coarse, fine, plan);
  CHECK(c.sum == loss_explicit(coarse, cy).sum + loss_contiguous(fine, fy).sum);
  CHECK(c.coarse.count == plan.coarse.size());
  CHECK(c.fine.count == plan.fine.size());

  // Direct evaluation of -log p(y) - sum log p(x) for a 2-slot plan.
  double direct = 0.0;
  for (Eigen::Index i = 0; i < coarse.rows(); ++i) {
    direct += std::log(coarse.row(i).array().exp().sum()) - coarse(i, cy[i]);
  }
  for (Eigen::Index i = 0; i < fine.rows(); ++i) {
    direct += std::log(fine.row(i).array().exp().sum()) - fine(i, fy[i]);
  }
  CHECK(c.sum == doctest::Approx(direct).epsilon(1e-12));

  MaskPlan no_fine = plan;
  no_fine.fine.clear();
  const Matrix<double> empty(0, joint.fine_size());
  CHECK(loss_comprehensive(coarse, empty, no_fine).sum == loss_explicit(coarse, cy).sum);
}

TEST_CASE("batch report is additive and recombines") {
  const JointVocab joint = toy_joint();
  const auto params = init_params<double>(tiny_config(joint), 3);
  RngState rng{8, 0};
  const auto comp = random_plans(joint, Objective::kComprehensive, 5, rng);
  const LossReport r = evaluate_batch(params, comp, {}, {});
  CHECK(r.comprehensive_sum == r.coarse_sum + r.fine_sum);
  CHECK(r.comprehensive >= 0.0);

  const auto rel = random_plans(joint, Objective::kRelation, 5, rng);
  LossWeights w;
  const LossReport a = evaluate_batch(params, rel, w, {});
  CHECK(std::abs(a.total - (a.generator + a.comprehensive + a.rtd)) <= 1e-12);
  CHECK(std::abs(loss_joint_relation(a, a, 1.0) - a.total) <= 1e-12);
  w.rtd = 0.0;
  const LossReport b = evaluate_batch(params, rel, w, {});
  CHECK(b.total == b.generator + b.comprehensive);
  CHECK(b.rtd == a.rtd);
  w.rtd = 2.5;
  const LossReport c = evaluate_batch(params, rel, w, {});
  CHECK(std::abs(c.total - (c.generator + c.comprehensive + 2.5 * c.rtd)) <= 1e-12);
  CHECK(loss_joint_relation(c, c, 0.0) == c.generator + c.comprehensive);
}

TEST_CASE("generator gradient equals that of the generator term alone") {
  const JointVocab joint = toy_joint();
  const auto params = init_params<double>(tiny_config(joint), 12);
  RngState rng{13, 0};
  const auto plans = random_plans(joint, Objective::kRelation, 3, rng);
  ModelParams<double> full = zeros_like(params);
  ModelParams<double> gen = zeros_like(params);
  evaluate_batch(params, plans, LossWeights{}, {}, &full);
  evaluate_batch(params, plans, LossWeights{0, 0, 0, 1, 0}, {}, &gen);
  const auto a = tensor_refs(std::as_const(full));
  const auto b = tensor_refs(std::as_const(gen));
  for (std::size_t i = 0; i < a.size(); ++i) {
    if (a[i].name.rfind("generator.", 0) == 0) CHECK(a[i].map() == b[i].map());
  }
  // And against finite differences of the full total on generator weights.
  ModelParams<double> p = params;
  double& w = p.generator.layers[0].w_in(1, 2);
  const double saved = w;
  const double eps = 1e-5;
  w = saved + eps;
  const double up = evaluate_batch(p, plans, LossWeights{}, {}).total;
  w = saved - eps;
  const double down = evaluate_batch(p, plans, LossWeights{}, {}).total;
  CHECK(grad_rel_error(full.generator.layers[0].w_in(1, 2), (up - down) / (2 * eps)) < 1e-4);
}

TEST_CASE("config parser, overrides and validation") {
  const TrainConfig c = parse_train_config(R"(
# comment
objective = comprehensive
batch_size = 16
learning_rate = 5e-4
lambda = 50
[model]
hidden = 48
heads = 4
[weights]
generator = 0.5
)");
  CHECK(c.objective == Objective::kComprehensive);
  CHECK(c.batch_size == 16);
  CHECK(c.learning_rate == 5e-4);
  CHECK(c.weights.rtd == 50);
  CHECK(c.weights.generator == 0.5);
  CHECK(c.model.hidden == 48);
  CHECK(c.model.heads == 4);
  TrainConfig d;
  apply_train_option(d, "model.layers", "3");
  CHECK(d.model.layers == 3);
  CHECK_THROWS_AS(apply_train_option(d, "nonsense", "1"), ConfigError);
  CHECK_THROWS_AS(apply_train_option(d, "batch_size", "many"), ConfigError);
  CHECK_THROWS_AS(parse_train_config("just words\n"), ConfigError);
  TrainConfig bad;
  bad.model.fine_vocab = 10;
  bad.warmup_steps = 5000;
  CHECK_THROWS_AS(bad.validate(), ConfigError);
  CHECK(train_config_json(c).find("\"comprehensive\"") != std::string::npos);
}

TEST_CASE("learning-rate schedule") {
  TrainConfig c;
  c.learning_rate = 1.0;
  c.warmup_steps = 4;
  c.total_steps = 12;
  CHECK(learning_rate_at(c, 0) == 0.25);
  CHECK(learning_rate_at(c, 3) == 1.0);
  CHECK(learning_rate_at(c, 4) == 1.0);
  CHECK(learning_rate_at(c, 7) == 0.625);
  CHECK(learning_rate_at(c, 11) == 0.125);
  c.schedule = Schedule::kConstant;
  CHECK(learning_rate_at(c, 11) == 1.0);
}

TEST_CASE("global-norm clipping") {
  const JointVocab joint = toy_joint();
  ModelParams<float> g = zeros_like(init_params<float>(tiny_config(joint), 1));
  g.fine_b.setConstant(1.0f);
  const double before = clip_global_norm(g, 1.0);
  CHECK(before == doctest::Approx(std::sqrt(double(g.fine_b.size()))));
  CHECK(g.fine_b.norm() == doctest::Approx(1.0).epsilon(1e-6));
  CHECK(clip_global_norm(g, 0.0) == doctest::Approx(1.0).epsilon(1e-6));
}

TEST_CASE("zero learning rate leaves parameters bit-identical") {
  const JointVocab joint = toy_joint();
  RngState rng{3, 0};
  const auto plans = random_plans(joint, Objective::kExplicit, 16, rng);
  TrainConfig c = small_train_config(joint, Objective::kExplicit);
  c.learning_rate = 0.0;
  Trainer t(c, plans, joint.fine().mask_id(), joint.size());
  const ModelParams<float> before = t.params();
  for (int i = 0; i < 15; ++i) t.step();
  CHECK(params_bit_equal(before, t.params()));
}

TEST_CASE("resume reproduces the uninterrupted run exactly") {
  const JointVocab joint = toy_joint();
  for (Objective o : {Objective::kExplicit, Objective::kRelation}) {
    RngState rng{4, 0};
    // Relation plans are stored unfilled; the trainer samples each step.
    const bool relation = o == Objective::kRelation;
    auto plans = random_plans(joint, relation ? Objective::kComprehensive : o, 12, rng);
    if (relation) {
      for (auto& p : plans) p.objective = o;
    }
    TrainConfig c = small_train_config(joint, o);
    c.total_steps = 30;
    c.keep_mask_prob = 0.2;
    std::ostringstream full_log;
    Trainer full(c, plans, joint.fine().mask_id(), joint.size());
    full.run(20, &full_log);

    std::ostringstream part_log;
    Trainer first(c, plans, joint.fine().mask_id(), joint.size());
    first.run(8, &part_log);
    TempDir dir;
    save_checkpoint(dir / "mid.bin", first.checkpoint());
    Trainer second(c, plans, joint.fine().mask_id(), joint.size(), load_checkpoint(dir / "mid.bin"));
    second.run(20, &part_log);
    CHECK(part_log.str() == full_log.str());
    CHECK(params_bit_equal(full.params(), second.params()));
  }
}

TEST_CASE("mismatched objectives and configs are rejected") {
  const JointVocab joint = toy_joint();
  RngState rng{4, 0};
  const auto plans = random_plans(joint, Objective::kExplicit, 4, rng);
  CHECK_THROWS_AS(Trainer(small_train_config(joint, Objective::kContiguous), plans,
                          joint.fine().mask_id(), joint.size()),
                  ConfigError);
  TrainConfig c = small_train_config(joint, Objective::kExplicit);
  Trainer t(c, plans, joint.fine().mask_id(), joint.size());
  TrainConfig other = c;
  other.model.hidden = 32;
  CHECK_THROWS_AS(Trainer(other, plans, joint.fine().mask_id(), joint.size(), t.checkpoint()),
                  VersionError);
}

TEST_CASE("non-finite loss aborts with a diagnostic checkpoint") {
  const JointVocab joint = toy_joint();
  RngState rng{4, 0};
  const auto plans = random_plans(joint, Objective::kExplicit, 4, rng);
  TrainConfig c = small_train_config(joint, Objective::kExplicit);
  c.learning_rate = 1e30;
  c.warmup_steps = 0;
  c.clip_norm = 0.0;
  Trainer t(c, plans, joint.fine().mask_id(), joint.size());
  TempDir dir;
  CHECK_THROWS_AS(t.run(50, nullptr, {}, dir / "nan.bin"), NumericError);
  CHECK(std::filesystem::exists(dir / "nan.bin"));
  CHECK(load_checkpoint(dir / "nan.bin").meta_json.find("diagnostic") != std::string::npos);
}

TEST_CASE("smoke run: explicit loss goes down, median of three seeds") {
  const JointVocab joint = toy_joint();
  std::vector<double> ratios;
  for (std::uint64_t seed : {1, 2, 3}) {
    RngState rng{seed, 0};
    const auto plans = random_plans(joint, Objective::kExplicit, 100, rng);
    TrainConfig c = small_train_config(joint, Objective::kExplicit);
    c.seed = seed;
    Trainer t(c, plans, joint.fine().mask_id(), joint.size());
    const auto initial = evaluate_batch(t.params(), std::span(plans), {}, {}).explicit_ngram;
    t.run(200, nullptr);
    const auto final = evaluate_batch(t.params(), std::span(plans), {}, {}).explicit_ngram;
    ratios.push_back(final / initial);
  }
  std::sort(ratios.begin(), ratios.end());
  CHECK(ratios[1] < 1.0);
}

TEST_CASE("metrics lines") {
  LossReport r;
  r.explicit_ngram = 1.5;
  r.total = 1.5;
  CHECK(metrics_json(3, r, 0.001, 0.0) ==
        R"({"step":3,"contiguous":0.0,"explicit":1.5,"comprehensive":0.0,"generator":0.0,"rtd":0.0,"total":1.5,"lr":0.001,"wall_ms":0.0})");
}

TEST_CASE("geometric-mean perplexity") {
  const std::vector<double> one{std::log(5.0)};
  CHECK(geometric_mean_ppl(one) == doctest::Approx(5.0).epsilon(1e-14));
  const std::vector<double> two{std::log(4.0), std::log(16.0)};
  CHECK(geometric_mean_ppl(two) == doctest::Approx(8.0).epsilon(1e-14));
  CHECK_THROWS_AS(geometric_mean_ppl(std::span<const double>{}), ArgumentError);
  RngState rng{9, 0};
  for (int k = 1; k <= 10; ++k) {
    std::vector<double> ppl(k), logs(k);
    for (int i = 0; i < k; ++i) {
      ppl[i] = 1.0 + 50.0 * rng.uniform();
      logs[i] = std::log(ppl[i]);
    }
    const double direct = std::pow(std::accumulate(ppl.begin(), ppl.end(), 1.0, std::multiplies<>()),
                                   1.0 / k);
    CHECK(std::abs(geometric_mean_ppl(logs) - direct) <= 1e-9 * direct);
  }
}

TEST_CASE("n-gram perplexity of a uniform model") {
  const JointVocab joint = toy_joint();
  ModelParams<float> p = init_params<float>(tiny_config(joint), 1);
  p.fine_w.setZero();
  p.ngram_w.setZero();
  RngState rng{3, 0};
  const auto expl = random_plans(joint, Objective::kExplicit, 10, rng, 0.3, 10, false);
  CHECK(eval_ngram_ppl(p, expl).ppl == doctest::Approx(double(joint.size())).epsilon(1e-5));
  const auto cont = random_plans(joint, Objective::kContiguous, 10, rng);
  const double fine = static_cast<double>(joint.fine_size());
  CHECK(eval_ngram_ppl(p, cont, PplMode::kTokenMean).ppl == doctest::Approx(fine).epsilon(1e-5));
  const PplResult sum_mode = eval_ngram_ppl(p, cont, PplMode::kNgram);
  CHECK(sum_mode.ppl >= fine * (1 - 1e-5));
  CHECK_THROWS_AS(eval_ngram_ppl(p, std::span<const MaskPlan>{}), ArgumentError);
}
