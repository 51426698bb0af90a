#include <gtest/gtest.h>

#include <cmath>
#include <set>
#include <sstream>

#include "emask/error.hpp"
#include "fixtures.hpp"

using namespace emask;

TEST(Schedule, UniformIsDisjointAndCovers) {
  for (std::uint64_t seed : {0ULL, 3ULL, 77ULL}) {
    const auto s = PhaseSchedule::uniform(20, 5, seed);
    EXPECT_EQ(s.n_phases(), 5);
    std::set<std::uint32_t> all;
    for (int l = 0; l < 5; ++l) {
      EXPECT_EQ(s.new_classes(l).size(), 4u);
      for (auto c : s.new_classes(l)) EXPECT_TRUE(all.insert(c).second);
      EXPECT_EQ(s.seen_classes(l).size(), 4u * static_cast<std::size_t>(l + 1));
    }
    EXPECT_EQ(all.size(), 20u);
  }
  EXPECT_EQ(PhaseSchedule::uniform(6, 3).new_classes(1), (std::vector<std::uint32_t>{2, 3}));
  EXPECT_NE(PhaseSchedule::uniform(20, 5, 1).all_classes(), PhaseSchedule::uniform(20, 5, 2).all_classes());
}

TEST(Schedule, Rejections) {
  EXPECT_THROW(PhaseSchedule::uniform(20, 3), ConfigError);
  EXPECT_THROW(PhaseSchedule({{0, 1}, {1, 2}}), ConfigError);
  EXPECT_THROW(PhaseSchedule({{0, 1}, {}}), ContractError);
  EXPECT_THROW(PhaseSchedule({{0, 1}, {2}}), ConfigError);
  EXPECT_THROW(PhaseSchedule::uniform(4, 2).new_classes(2), ContractError);
}

TEST(LogitMask, OldRowsForNewSamplesNewRowsForExemplars) {
  EXPECT_EQ(logit_mask(2, 5, SampleOrigin::New), (std::vector<std::uint8_t>{1, 1, 0, 0, 0}));
  EXPECT_EQ(logit_mask(2, 5, SampleOrigin::Exemplar), (std::vector<std::uint8_t>{0, 0, 1, 1, 1}));
  EXPECT_EQ(logit_mask(0, 3, SampleOrigin::New), (std::vector<std::uint8_t>{0, 0, 0}));
}

TEST(MaskedLogitCe, ClosedForm) {
  // Two live logits 1 and 0 with the label on the larger: ln(1 + e^-1).
  const auto z = nk::Tensor::matrix({{1.0, 0.0, 50.0}});
  const std::vector<std::uint8_t> m{0, 0, 1};
  EXPECT_NEAR(masked_logit_ce(z, 0, m), std::log1p(std::exp(-1.0)), 1e-12);
  EXPECT_NEAR(masked_logit_ce(z, 0, m), 0.31326168751822286, 1e-12);
  const std::vector<std::uint8_t> none{0, 0, 0};
  EXPECT_GT(masked_logit_ce(z, 0, none), 40.0);
  const auto pair = nk::Tensor::matrix({{2.0, 1.0}});
  EXPECT_NEAR(masked_logit_ce(pair, 0, std::vector<std::uint8_t>{0, 0}), 0.31326168751822286, 1e-12);
}

TEST(Budget, QuotaTimesFullLengthRawCost) {
  ExperimentConfig c;
  EXPECT_EQ(budget_bytes(c), 5u * 12360u);
  c.quota = 10;
  EXPECT_EQ(budget_bytes(c), 10u * 12360u);
}

TEST(Metrics, AverageAccuracyAndCsv) {
  MetricsLog log;
  for (int l = 1; l <= 3; ++l) {
    PhaseMetrics m;
    m.phase = l;
    m.accuracy = 0.1 * l;
    m.seconds = 12.5;
    log.phases.push_back(m);
  }
  EXPECT_NEAR(log.a_bar(), 0.2, 1e-12);
  EXPECT_NEAR(log.a_bar_sum(), 0.6, 1e-12);
  std::ostringstream a, b;
  log.write_csv(a);
  log.write_csv(b, true);
  EXPECT_NE(a.str().find(",0.000\n"), std::string::npos);
  EXPECT_NE(b.str().find(",12.500\n"), std::string::npos);
  EXPECT_EQ(a.str().substr(0, a.str().find('\n')),
            "phase,seen_classes,A_l,A_bar_running,exemplars_per_class_mean,preserved_ratio_mean,buffer_bytes,seconds");
}

TEST(LabelTable, RowsInArrivalOrder) {
  LabelTable t;
  const std::uint32_t a[] = {7, 3}, b[] = {9};
  t.add(a);
  t.add(b);
  EXPECT_EQ(t.row(3), 1u);
  EXPECT_EQ(t.row(9), 2u);
  EXPECT_THROW(t.row(4), ContractError);
  EXPECT_THROW(t.add(b), ContractError);
}

TEST(Config, Validation) {
  ExperimentConfig c;
  EXPECT_NO_THROW(c.validate());
  c.train.replay_fraction = 1.5;
  EXPECT_THROW(c.validate(), ConfigError);
  c = {};
  c.model.ssf_enabled = false;
  EXPECT_THROW(c.validate(), ConfigError);
  c.regime = Regime::FT;
  EXPECT_NO_THROW(c.validate());
  EXPECT_THROW(parse_exemplar_method("nope"), ConfigError);
  EXPECT_EQ(parse_exemplar_method("cim"), ExemplarMethod::CimLike);
}

namespace {

struct TinyRun : ::testing::Test {
  SyntheticSpec spec = fixture::small_spec();
  Dataset data = generate(spec);
};

}  // namespace

TEST_F(TinyRun, BudgetsHoldAfterEveryPhase) {
  for (auto method : {ExemplarMethod::Raw, ExemplarMethod::Masked, ExemplarMethod::CimLike}) {
    auto cfg = fixture::tiny_experiment(spec, 2);
    cfg.method = method;
    Experiment ex(cfg, data);
    while (ex.phases_done() < 2) {
      const auto m = ex.run_phase();
      const auto& buf = ex.state().buffer;
      for (auto c : buf.classes()) EXPECT_LE(buf.class_bytes(c), budget_bytes(cfg));
      EXPECT_GT(m.exemplars_per_class_mean, 0.0);
      EXPECT_GE(m.accuracy, 0.0);
    }
  }
}

TEST_F(TinyRun, SinglePhaseIsPlainSupervisedTraining) {
  auto cfg = fixture::tiny_experiment(spec, 1);
  cfg.train.epochs_per_phase = 4;
  const auto log = run_experiment(cfg, data);
  ASSERT_EQ(log.phases.size(), 1u);
  EXPECT_EQ(log.phases[0].seen_classes, 4);
  EXPECT_DOUBLE_EQ(log.a_bar(), log.phases[0].accuracy);
}

TEST_F(TinyRun, Deterministic) {
  auto cfg = fixture::tiny_experiment(spec, 2);
  cfg.train.seed = 3;
  std::ostringstream a, b;
  run_experiment(cfg, data).write_csv(a);
  run_experiment(cfg, data).write_csv(b);
  EXPECT_EQ(a.str(), b.str());
}

TEST_F(TinyRun, NoExemplarsMeansEmptyBuffer) {
  auto cfg = fixture::tiny_experiment(spec, 2);
  cfg.method = ExemplarMethod::None;
  Experiment ex(cfg, data);
  ex.run();
  EXPECT_TRUE(ex.state().buffer.empty());
}

TEST_F(TinyRun, RejectsMismatchedDataset) {
  auto cfg = fixture::tiny_experiment(spec, 2);
  cfg.model.image_size = 64;
  EXPECT_THROW(Experiment(cfg, data), ConfigError);
  cfg = fixture::tiny_experiment(spec, 3);
  EXPECT_THROW(Experiment(cfg, data), ConfigError);
}

TEST_F(TinyRun, MaskedHeadRowsReceiveNoGradient) {
  Model model(fixture::tiny_model(spec), 1);
  Rng rng(2);
  model.extend_classifier(4, rng);
  model.trainable_params(Regime::SSF);
  const auto mask = logit_mask(2, 4, SampleOrigin::New);
  model.zero_grad();
  nk::Graph g;
  const auto nodes = model.build(g, model.embed(data.train[0]));
  g.backward(g.masked_cross_entropy(nodes.logits, 3, mask));
  const auto& w = model.head().weight.grad;
  const std::size_t d = w.cols();
  for (std::size_t r = 0; r < 2; ++r)
    for (std::size_t k = 0; k < d; ++k) EXPECT_EQ(w(r, k), 0.0);
  EXPECT_EQ(model.head().bias.grad[0], 0.0);
  EXPECT_NE(model.head().bias.grad[3], 0.0);
}

TEST_F(TinyRun, TokenDropoutIsSeededAndValidated) {
  auto cfg = fixture::tiny_experiment(spec, 2);
  cfg.train.token_dropout = 0.5;
  std::ostringstream a, b, plain;
  run_experiment(cfg, data).write_csv(a);
  run_experiment(cfg, data).write_csv(b);
  EXPECT_EQ(a.str(), b.str());
  cfg.train.token_dropout = 0.0;
  run_experiment(cfg, data).write_csv(plain);
  EXPECT_NE(a.str(), plain.str());
  cfg.train.token_dropout = 1.0;
  EXPECT_THROW(cfg.validate(), ConfigError);
}
