// End-to-end acceptance checks. Prints one PASS/FAIL line per check and
// exits non-zero if any check fails. Pass check names to run a subset.

#include <algorithm>
#include <atomic>
#include <chrono>
#include <cmath>
#include <cstdio>
#include <functional>
#include <map>
#include <mutex>
#include <random>
#include <set>
#include <sstream>
#include <string>
#include <thread>
#include <vector>

#include "emask/augment.hpp"
#include "emask/buffer.hpp"
#include "emask/gradcheck.hpp"
#include "emask/log.hpp"
#include "emask/masking.hpp"
#include "emask/trainer.hpp"
#include "fixtures.hpp"
#include "oracles.hpp"

using namespace emask;
using Clock = std::chrono::steady_clock;

namespace {

// Tolerances and sizes.
constexpr double kGradTolerance = 1e-4;
constexpr double kGradSecondsLimit = 60.0;
constexpr int kOracleBundles = 200;
constexpr double kOracleSecondsLimit = 10.0;
constexpr int kScaleBundles = 100;
constexpr int kNestingBundles = 100;
constexpr int kHerdingSets = 100;
constexpr int kNullityBatches = 50;
constexpr double kMoreExemplarsFactor = 2.0;
constexpr double kMoreExemplarsRatioCap = 0.45;
constexpr double kMdaSlack = 0.005;  // half an accuracy point
constexpr double kEndToEndSecondsLimit = 20.0 * 60.0;
constexpr double kFgAlignmentFloor = 0.6;
const std::vector<std::uint64_t> kSeeds = {1, 2, 3};

struct Outcome {
  bool pass = false;
  std::string detail;
};

std::string fmt(const char* f, double v) {
  char buf[64];
  std::snprintf(buf, sizeof buf, f, v);
  return buf;
}

double seconds_since(Clock::time_point t0) { return std::chrono::duration<double>(Clock::now() - t0).count(); }

template <class F>
void parallel_for(std::size_t n, F job) {
  const std::size_t workers = std::max(1u, std::thread::hardware_concurrency());
  std::atomic<std::size_t> next{0};
  std::vector<std::thread> pool;
  for (std::size_t w = 0; w < std::min(workers, n); ++w)
    pool.emplace_back([&] {
      for (std::size_t i; (i = next++) < n;) job(i);
    });
  for (auto& t : pool) t.join();
}

// ---------------------------------------------------------------------------

Outcome gradient_check() {
  const auto t0 = Clock::now();
  SyntheticSpec spec;
  spec.n_classes = 4;
  spec.train_per_class = 2;
  spec.test_per_class = 0;
  const auto data = generate(spec);
  ModelConfig mc;
  mc.d_model = 16;
  mc.n_heads = 2;
  mc.n_blocks = 2;
  Model model(mc, 21);
  Rng rng(5);
  model.extend_classifier(4, rng);
  std::mt19937_64 jitter_rng(9);
  std::normal_distribution<double> jitter(0.0, 0.1);
  for (auto* p : model.parameters())
    if (p->kind == nk::ParamKind::Ssf)
      for (double& v : p->value.values()) v += jitter(jitter_rng);

  // One new-class sample and one exemplar-origin sample.
  fixture::BatchLoss loss{&model,
                          {model.embed(data.train[0]), model.embed(raw_exemplar(data.train[5], mc.geometry()))},
                          {0, 2},
                          {logit_mask(0, 4, SampleOrigin::New), logit_mask(3, 4, SampleOrigin::Exemplar)}};
  nk::GradCheckOptions opt;
  opt.tolerance = kGradTolerance;
  const auto report = nk::finite_diff_check(
      model.parameters(), [&] { return loss.value(); }, [&] { loss.backward(); }, opt);
  std::size_t coords = 0;
  for (const auto& e : report.entries) coords += e.checked;
  const double secs = seconds_since(t0);
  return {report.passed && secs < kGradSecondsLimit,
          "max rel error " + fmt("%.2e", report.max_rel_error) + " over " + std::to_string(coords) +
              " coordinates, " + fmt("%.1f", secs) + " s"};
}

Outcome mask_oracle() {
  const auto t0 = Clock::now();
  std::mt19937_64 rng(2024);
  const MaskingConfig cfg;
  int mismatches = 0;
  for (int i = 0; i < kOracleBundles; ++i) {
    const std::size_t nt = 2 + rng() % 31, ni = 16;
    const auto b = oracle::random_bundle(rng, nt, ni, 0.2 + 0.05 * (i % 40));
    const auto ids = oracle::random_caption(rng, nt);
    const auto want = oracle::naive_masks(b, ids);
    const auto got = attention_masks(b, ids, cfg);
    if (got.image != want.image || got.text != want.text) ++mismatches;
  }
  // Same comparison through mask_exemplar on rendered samples.
  SyntheticSpec spec;
  spec.n_classes = 20;
  spec.train_per_class = 10;
  spec.test_per_class = 0;
  const auto data = generate(spec);
  Model model(ModelConfig{}, 3);
  Rng hr(1);
  model.extend_classifier(20, hr);
  int model_cases = 0;
  for (std::size_t i = 0; i < data.train.size(); i += 1) {
    const auto& s = data.train[i];
    const auto out = mask_exemplar(s, model, cfg, s.label);
    const auto att = model.forward(model.embed(s)).attention;
    const auto want = oracle::naive_masks(att, s.caption);
    ++model_cases;
    if (out.masks.image != want.image || out.masks.text != want.text) ++mismatches;
    for (const auto& t : out.exemplar.text)
      if (!want.text[t.position] || s.caption[t.position] != t.id) ++mismatches;
    for (const auto& p : out.exemplar.image)
      if (!want.image[p.position]) ++mismatches;
  }
  const double secs = seconds_since(t0);
  return {mismatches == 0 && secs < kOracleSecondsLimit,
          std::to_string(kOracleBundles) + " random bundles + " + std::to_string(model_cases) +
              " model samples, " + std::to_string(mismatches) + " mismatches, " + fmt("%.1f", secs) + " s"};
}

Outcome scale_invariance() {
  std::mt19937_64 rng(77);
  std::uniform_real_distribution<double> cdist(0.0, 10.0);
  int changed = 0;
  for (int i = 0; i < kScaleBundles; ++i) {
    const std::size_t nt = 2 + rng() % 31;
    const auto b = oracle::random_bundle(rng, nt, 16, 0.5 + 0.02 * i);
    const auto ids = oracle::random_caption(rng, nt);
    double c = 0.0;
    while (c == 0.0) c = 10.0 - cdist(rng);  // (0, 10]
    auto scaled = b;
    for (double& v : scaled.matrix.values()) v *= c;
    const auto m0 = attention_masks(b, ids, MaskingConfig{});
    const auto m1 = attention_masks(scaled, ids, MaskingConfig{});
    if (m0.image != m1.image || m0.text != m1.text) ++changed;
  }
  return {changed == 0, std::to_string(kScaleBundles) + " bundles, " + std::to_string(changed) + " changed"};
}

Outcome threshold_nesting() {
  std::mt19937_64 rng(31);
  const double ks[] = {-0.5, -0.25, 0.0, 0.25, 0.5};
  int image_breaks = 0, text_breaks = 0;
  for (int i = 0; i < kNestingBundles; ++i) {
    const std::size_t nt = 2 + rng() % 31;
    const auto b = oracle::random_bundle(rng, nt, 16, 0.5 + 0.02 * i);
    const auto ids = oracle::random_caption(rng, nt);
    MaskPair prev;
    for (std::size_t j = 0; j < std::size(ks); ++j) {
      MaskingConfig cfg;
      cfg.threshold_offset = ks[j];
      const auto m = attention_masks(b, ids, cfg);
      if (j > 0) {
        for (std::size_t t = 0; t < m.image.size(); ++t) image_breaks += m.image[t] > prev.image[t];
        for (std::size_t t = 0; t < m.text.size(); ++t) text_breaks += m.text[t] > prev.text[t];
      }
      prev = m;
    }
  }
  return {image_breaks == 0 && text_breaks == 0,
          std::to_string(kNestingBundles) + " bundles x 5 offsets, " + std::to_string(image_breaks) +
              " image and " + std::to_string(text_breaks) + " text tokens outside the looser set"};
}

Outcome herding_oracle() {
  std::mt19937_64 rng(5);
  std::normal_distribution<double> d(0.0, 1.0);
  const CostModel cm;
  int wrong = 0;
  for (int trial = 0; trial < kHerdingSets; ++trial) {
    const std::size_t n = 1 + rng() % 40, dim = 2 + rng() % 64;
    std::vector<Candidate> cands(n);
    std::vector<std::vector<double>> feats(n);
    std::vector<std::size_t> costs(n);
    for (std::size_t i = 0; i < n; ++i) {
      if (i > 0 && rng() % 5 == 0) {
        feats[i] = feats[rng() % i];
      } else {
        feats[i].resize(dim);
        for (double& v : feats[i]) v = d(rng);
      }
      cands[i].feature = feats[i];
      MaskedExemplar e;
      e.label = 0;
      const std::size_t ni = 1 + rng() % 16, nt = rng() % 32;
      for (std::size_t k = 0; k < ni; ++k) e.image.push_back({static_cast<std::uint16_t>(k), false, std::vector<std::uint8_t>(768)});
      for (std::size_t k = 0; k < nt; ++k) e.text.push_back({static_cast<std::uint16_t>(k), 5});
      costs[i] = oracle::record_bytes(e, 768);
      cands[i].exemplar = std::move(e);
    }
    std::vector<double> mean(dim);
    for (double& v : mean) v = d(rng);
    const std::size_t budget = trial % 3 == 0 ? SIZE_MAX : 5 * 12360;
    if (select_exemplars(cands, mean, budget, cm) != oracle::herding(feats, mean, costs, budget)) ++wrong;
  }
  return {wrong == 0, std::to_string(kHerdingSets) + " candidate sets, " + std::to_string(wrong) + " differ"};
}

Outcome masked_logit_nullity() {
  SyntheticSpec spec;
  spec.n_classes = 8;
  spec.train_per_class = 8;
  spec.test_per_class = 0;
  const auto data = generate(spec);
  ModelConfig mc;
  mc.d_model = 32;
  mc.n_blocks = 2;
  Model model(mc, 8);
  std::mt19937_64 rng(8);
  const auto g = mc.geometry();
  int nonzero = 0;
  double max_norm = 0.0;
  for (int batch = 0; batch < kNullityBatches; ++batch) {
    const std::size_t rows_old = 1 + rng() % 6, rows_total = rows_old + 1 + rng() % (8 - rows_old);
    Model m = model;
    Rng hr(rng());
    m.extend_classifier(static_cast<int>(rows_total), hr);
    m.trainable_params(batch % 2 ? Regime::SSF : Regime::FT);
    for (SampleOrigin origin : {SampleOrigin::New, SampleOrigin::Exemplar}) {
      m.zero_grad();
      const auto mask = logit_mask(rows_old, rows_total, origin);
      for (int k = 0; k < 4; ++k) {
        const auto& s = data.train[rng() % data.train.size()];
        std::size_t label;
        do label = rng() % rows_total; while (mask[label]);
        TokenSequence seq;
        if (origin == SampleOrigin::New) {
          seq = m.embed(s);
        } else {
          MaskPair mp;
          mp.image.assign(16, 0);
          for (auto& v : mp.image) v = rng() % 2;
          mp.image[rng() % 16] = 1;
          mp.text.assign(s.caption.size(), 1);
          seq = m.embed(apply_masks(s, mp, g));
        }
        nk::Graph graph;
        const auto nodes = m.build(graph, seq);
        const auto loss = graph.masked_cross_entropy(nodes.logits, label, mask);
        graph.backward(graph.scale(loss, 0.25));
        const auto& dz = graph.grad(nodes.logits);
        for (std::size_t r = 0; r < rows_total; ++r)
          if (mask[r] && dz[r] != 0.0) ++nonzero;
      }
      const auto& w = m.head().weight.grad;
      const auto& bgrad = m.head().bias.grad;
      for (std::size_t r = 0; r < rows_total; ++r) {
        if (!mask[r]) continue;
        double sq = bgrad[r] * bgrad[r];
        for (double v : w.row_span(r)) sq += v * v;
        max_norm = std::max(max_norm, std::sqrt(sq));
        if (sq != 0.0) ++nonzero;
      }
    }
  }
  return {nonzero == 0, std::to_string(kNullityBatches) + " batches per origin, max masked-row gradient norm " +
                            fmt("%.1e", max_norm)};
}

Outcome reproducibility() {
  SyntheticSpec spec;
  spec.n_classes = 8;
  spec.train_per_class = 10;
  spec.test_per_class = 5;
  const auto data = generate(spec);
  ExperimentConfig cfg;
  cfg.n_phases = 2;
  cfg.train.epochs_per_phase = 3;
  cfg.train.seed = 42;
  std::string csv[2], diag[2];
  std::vector<std::uint8_t> buf[2];
  for (int r = 0; r < 2; ++r) {
    Experiment ex(cfg, data);
    const auto log = ex.run();
    std::ostringstream a, b;
    log.write_csv(a);
    log.write_diagnostics_csv(b);
    csv[r] = a.str();
    diag[r] = b.str();
    buf[r] = serialize(ex.state().buffer);
  }
  const bool same = csv[0] == csv[1] && diag[0] == diag[1] && buf[0] == buf[1];
  return {same, std::string("metrics CSV ") + (csv[0] == csv[1] ? "identical" : "differs") + ", diagnostics " +
                    (diag[0] == diag[1] ? "identical" : "differs") + ", buffer " +
                    (buf[0] == buf[1] ? "identical" : "differs")};
}

Outcome degenerate_inputs() {
  std::vector<std::string> failures;
  {
    AttentionBundle b;
    b.n_text = 6;
    b.n_image = 16;
    b.matrix = nk::Tensor::matrix(23, 23, 1.0 / 23.0);
    const std::vector<std::uint16_t> ids{4, 5, 6, 7, 8, token::kSep};
    const auto m = attention_masks(b, ids, MaskingConfig{});
    if (m.kept_image() != 16 || m.kept_text() != 6 || !m.fallback) failures.push_back("uniform attention");
  }
  {
    const PatchGeometry g{64, 16};
    MemoryBuffer buf(CostModel::for_geometry(g), g, 5 * 12360);
    const std::uint32_t cls[] = {3};
    buf.register_classes(cls);
    SyntheticSpec spec;
    spec.n_classes = 4;
    spec.train_per_class = 1;
    spec.test_per_class = 0;
    const auto s = generate(spec).train[3];
    buf.insert(raw_exemplar(s, g));
    Rng rng(1);
    for (int i = 0; i < 20; ++i) {
      const auto a = mda_sample(3, buf, rng);
      if (!(a.composite.image == buf.exemplars(3)[0].image && a.composite.text == buf.exemplars(3)[0].text)) {
        failures.push_back("singleton MDA");
        break;
      }
    }
  }
  {
    SyntheticSpec spec;
    spec.n_classes = 4;
    spec.train_per_class = 10;
    spec.test_per_class = 5;
    const auto data = generate(spec);
    ExperimentConfig cfg;
    cfg.n_phases = 1;
    cfg.train.epochs_per_phase = 5;
    cfg.train.seed = 1;
    Experiment ex(cfg, data);
    const auto log = ex.run();
    if (log.phases.size() != 1 || log.phases[0].seen_classes != 4 || ex.state().buffer.empty())
      failures.push_back("single phase");
  }
  std::string detail = "uniform attention, singleton MDA, single-phase schedule";
  if (!failures.empty()) {
    detail = "failed:";
    for (const auto& f : failures) detail += " " + f + ";";
  }
  return {failures.empty(), detail};
}

// ---------------------------------------------------------------------------
// Shared end-to-end runs on the default benchmark.

struct RunResult {
  MetricsLog log;
  MemoryBuffer buffer;
  double seconds = 0.0;
};

struct Benchmark {
  Dataset data;
  std::map<std::string, std::vector<RunResult>> runs;  // method label -> per seed
  double wall_seconds = 0.0;
};

ExperimentConfig benchmark_config(const std::string& label, std::uint64_t seed) {
  ExperimentConfig cfg;  // 20 classes, five phases, quota 5, SSF
  cfg.train.seed = seed;
  cfg.method = label == "raw" ? ExemplarMethod::Raw : ExemplarMethod::Masked;
  cfg.mda = label == "masked+mda";
  return cfg;
}

Benchmark& benchmark() {
  static Benchmark b = [] {
    Benchmark out;
    out.data = generate(SyntheticSpec{});
    const std::vector<std::string> labels = {"raw", "masked+mda", "masked"};
    struct Job {
      std::string label;
      std::size_t seed_index;
    };
    std::vector<Job> jobs;
    for (const auto& l : labels) {
      out.runs[l].resize(kSeeds.size());
      for (std::size_t i = 0; i < kSeeds.size(); ++i) jobs.push_back({l, i});
    }
    std::mutex mu;
    const auto t0 = Clock::now();
    parallel_for(jobs.size(), [&](std::size_t j) {
      const auto& job = jobs[j];
      const auto t = Clock::now();
      Experiment ex(benchmark_config(job.label, kSeeds[job.seed_index]), out.data);
      RunResult r;
      r.log = ex.run();
      r.buffer = ex.state().buffer;
      r.seconds = seconds_since(t);
      std::lock_guard<std::mutex> lock(mu);
      std::fprintf(stderr, "  run %-10s seed %llu: A_bar %.4f (%.0f s)\n", job.label.c_str(),
                   static_cast<unsigned long long>(kSeeds[job.seed_index]), r.log.a_bar(), r.seconds);
      out.runs[job.label][job.seed_index] = std::move(r);
    });
    out.wall_seconds = seconds_since(t0);
    return out;
  }();
  return b;
}

double mean_a_bar(const std::vector<RunResult>& runs) {
  double s = 0.0;
  for (const auto& r : runs) s += r.log.a_bar();
  return s / static_cast<double>(runs.size());
}

Outcome budget_safety() {
  auto& b = benchmark();
  const std::size_t budget = budget_bytes(ExperimentConfig{});
  std::size_t exemplars = 0, over = 0, cost_mismatch = 0, roundtrip_fail = 0;
  for (const auto& [label, runs] : b.runs)
    for (const auto& r : runs) {
      const auto& cm = r.buffer.cost_model();
      for (auto c : r.buffer.classes()) {
        if (r.buffer.class_bytes(c) > budget) ++over;
        for (const auto& e : r.buffer.exemplars(c)) {
          ByteWriter w;
          write_exemplar(w, e, r.buffer.geometry());
          if (w.size() != cm.cost(e) || w.size() != oracle::record_bytes(e, cm.bytes_per_patch)) ++cost_mismatch;
          ++exemplars;
        }
      }
      if (!(deserialize(serialize(r.buffer)) == r.buffer)) ++roundtrip_fail;
    }
  return {over == 0 && cost_mismatch == 0 && roundtrip_fail == 0 && exemplars > 0,
          std::to_string(exemplars) + " exemplars, " + std::to_string(over) + " classes over " +
              std::to_string(budget) + " B, " + std::to_string(cost_mismatch) + " size/cost mismatches"};
}

Outcome more_exemplars() {
  auto& b = benchmark();
  const double quota = ExperimentConfig{}.quota;
  std::string detail;
  bool pass = true;
  for (const auto& r : b.runs.at("masked+mda")) {
    const auto s = stats(r.buffer);
    const bool applies = s.mean_preserved_ratio <= kMoreExemplarsRatioCap;
    const bool ok = !applies || s.mean_exemplars_per_class >= kMoreExemplarsFactor * quota;
    pass = pass && ok;
    detail += fmt("%.2f", s.mean_exemplars_per_class) + "/class at ratio " + fmt("%.3f", s.mean_preserved_ratio) +
              (applies ? "" : " (ratio above 0.45, not binding)") + "; ";
  }
  return {pass, detail + "need >= " + fmt("%.0f", kMoreExemplarsFactor * quota)};
}

Outcome end_to_end() {
  auto& b = benchmark();
  const double ours = mean_a_bar(b.runs.at("masked+mda"));
  const double raw = mean_a_bar(b.runs.at("raw"));
  const double no_mda = mean_a_bar(b.runs.at("masked"));
  double cpu = 0.0;
  for (const auto& [label, runs] : b.runs)
    for (const auto& r : runs) cpu += r.seconds;
  const bool beats_raw = ours >= raw;
  const bool near_no_mda = ours >= no_mda - kMdaSlack;
  const bool in_time = b.wall_seconds <= kEndToEndSecondsLimit;
  auto mark = [](bool ok) { return ok ? " ok" : " MISSED"; };
  return {beats_raw && near_no_mda && in_time,
          "A_bar masked+MDA " + fmt("%.4f", ours) + " vs raw " + fmt("%.4f", raw) + mark(beats_raw) +
              "; vs masked w/o MDA " + fmt("%.4f", no_mda) + " - 0.005" + mark(near_no_mda) + "; wall " +
              fmt("%.0f", b.wall_seconds) + " s <= 1200" + mark(in_time) + " (" +
              std::to_string(std::max(1u, std::thread::hardware_concurrency())) + " threads, " + fmt("%.0f", cpu) +
              " s of runs)"};
}

Outcome foreground_alignment() {
  auto& b = benchmark();
  double sum = 0.0;
  std::string detail;
  for (const auto& r : b.runs.at("masked+mda")) {
    sum += r.log.phases.front().fg_alignment;
    detail += fmt("%.3f", r.log.phases.front().fg_alignment) + " ";
  }
  const double mean = sum / static_cast<double>(kSeeds.size());
  return {mean >= kFgAlignmentFloor, "phase-1 foreground share " + fmt("%.3f", mean) + " (per seed " + detail +
                                         "), floor " + fmt("%.2f", kFgAlignmentFloor)};
}

struct Check {
  const char* name;
  const char* title;
  std::function<Outcome()> run;
};

}  // namespace

int main(int argc, char** argv) {
  set_log_level(LogLevel::Warning);
  const std::vector<Check> checks = {
      {"gradient", "analytic gradients match central differences", gradient_check},
      {"mask-oracle", "masks equal the naive reference implementation", mask_oracle},
      {"scale-invariance", "masks unchanged under attention scaling", scale_invariance},
      {"nesting", "preserved sets nest across threshold offsets", threshold_nesting},
      {"budget", "class budgets hold and record sizes equal costs", budget_safety},
      {"herding", "selection order equals brute-force cosine ranking", herding_oracle},
      {"more-exemplars", "masking stores at least twice the raw quota", more_exemplars},
      {"logit-nullity", "masked classifier rows get exactly zero gradient", masked_logit_nullity},
      {"end-to-end", "masking+MDA matches or beats raw and no-MDA replay", end_to_end},
      {"foreground", "phase-1 preserved patches fall on the foreground", foreground_alignment},
      {"reproducible", "identical config and seed give identical outputs", reproducibility},
      {"degenerate", "degenerate inputs behave as documented", degenerate_inputs},
  };
  std::set<std::string> only(argv + 1, argv + argc);
  int failed = 0;
  for (const auto& c : checks) {
    if (!only.empty() && !only.count(c.name)) continue;
    const auto t0 = Clock::now();
    Outcome o;
    try {
      o = c.run();
    } catch (const std::exception& e) {
      o = {false, std::string("exception: ") + e.what()};
    }
    failed += o.pass ? 0 : 1;
    std::printf("[%s] %-16s %s: %s (%.1f s)\n", o.pass ? "PASS" : "FAIL", c.name, c.title, o.detail.c_str(),
                seconds_since(t0));
    std::fflush(stdout);
  }
  return failed == 0 ? 0 : 1;
}
