#include "emask/trainer.hpp"

#include <algorithm>
#include <chrono>
#include <cmath>
#include <iomanip>
#include <limits>
#include <numeric>
#include <set>
#include <sstream>

#include "emask/augment.hpp"
#include "emask/error.hpp"
#include "emask/log.hpp"
#include "emask/rng.hpp"

namespace emask {

namespace {

// stream tags for derive_seed
constexpr std::uint64_t kSeedModel = 1, kSeedHead = 2, kSeedShuffle = 3, kSeedReplay = 4, kSeedMask = 5,
                        kSeedOrder = 6, kSeedDropout = 7;

std::string fixed(double v, int digits = 6) {
  std::ostringstream o;
  o << std::fixed << std::setprecision(digits) << v;
  return o.str();
}

TokenSequence drop_tokens(const TokenSequence& seq, double p, Rng& rng) {
  std::bernoulli_distribution drop(p);
  TokenSequence out;
  for (std::size_t i = 0; i < seq.n_text(); ++i) {
    if (!token::is_delimiter(seq.text_ids[i]) && drop(rng)) continue;
    out.text_ids.push_back(seq.text_ids[i]);
    out.text_positions.push_back(seq.text_positions[i]);
  }
  std::vector<std::size_t> keep;
  for (std::size_t k = 0; k < seq.n_image(); ++k)
    if (!drop(rng)) keep.push_back(k);
  if (keep.empty()) keep.push_back(std::uniform_int_distribution<std::size_t>(0, seq.n_image() - 1)(rng));
  out.patches = nk::Tensor({keep.size(), seq.patches.cols()});
  for (std::size_t r = 0; r < keep.size(); ++r) {
    out.image_positions.push_back(seq.image_positions[keep[r]]);
    const auto src = seq.patches.row_span(keep[r]);
    std::copy(src.begin(), src.end(), out.patches.row_span(r).begin());
  }
  return out;
}

}  // namespace

PhaseSchedule::PhaseSchedule(std::vector<std::vector<std::uint32_t>> phases) : phases_(std::move(phases)) {
  if (phases_.empty()) throw ConfigError("schedule needs at least one phase");
  std::set<std::uint32_t> seen;
  for (const auto& p : phases_) {
    if (p.empty()) throw ContractError("schedule phase with zero new classes");
    if (p.size() != phases_.front().size()) throw ConfigError("schedule phases must be equal sized");
    for (auto c : p)
      if (!seen.insert(c).second) throw ConfigError("class " + std::to_string(c) + " appears in two phases");
  }
}

PhaseSchedule PhaseSchedule::uniform(int n_classes, int n_phases, std::uint64_t order_seed) {
  if (n_phases < 1) throw ConfigError("n_phases must be >= 1");
  if (n_classes < 1 || n_classes % n_phases != 0)
    throw ConfigError("n_classes (" + std::to_string(n_classes) + ") must be divisible by n_phases (" +
                      std::to_string(n_phases) + ")");
  std::vector<std::uint32_t> order(static_cast<std::size_t>(n_classes));
  std::iota(order.begin(), order.end(), 0u);
  if (order_seed != 0) {
    Rng rng = make_rng(order_seed, {kSeedOrder});
    std::shuffle(order.begin(), order.end(), rng);
  }
  const std::size_t per = order.size() / static_cast<std::size_t>(n_phases);
  std::vector<std::vector<std::uint32_t>> phases;
  for (int l = 0; l < n_phases; ++l)
    phases.emplace_back(order.begin() + static_cast<std::ptrdiff_t>(l * per),
                        order.begin() + static_cast<std::ptrdiff_t>((l + 1) * per));
  return PhaseSchedule(std::move(phases));
}

const std::vector<std::uint32_t>& PhaseSchedule::new_classes(int phase) const {
  if (phase < 0 || phase >= n_phases()) throw ContractError("schedule has no phase " + std::to_string(phase));
  return phases_[static_cast<std::size_t>(phase)];
}

std::vector<std::uint32_t> PhaseSchedule::old_classes(int phase) const {
  new_classes(phase);
  std::vector<std::uint32_t> out;
  for (int l = 0; l < phase; ++l) out.insert(out.end(), phases_[l].begin(), phases_[l].end());
  return out;
}

std::vector<std::uint32_t> PhaseSchedule::seen_classes(int phase) const {
  auto out = old_classes(phase);
  const auto& n = new_classes(phase);
  out.insert(out.end(), n.begin(), n.end());
  return out;
}

std::vector<std::uint32_t> PhaseSchedule::all_classes() const {
  std::vector<std::uint32_t> out;
  for (const auto& p : phases_) out.insert(out.end(), p.begin(), p.end());
  return out;
}

void TrainConfig::validate() const {
  if (epochs_per_phase < 1) throw ConfigError("epochs_per_phase must be >= 1");
  if (batch_size < 1) throw ConfigError("batch_size must be >= 1");
  if (!(replay_fraction >= 0.0 && replay_fraction <= 1.0)) throw ConfigError("replay_fraction must be in [0, 1]");
  if (!(warmup_fraction >= 0.0 && warmup_fraction < 1.0)) throw ConfigError("warmup_fraction must be in [0, 1)");
  if (!(token_dropout >= 0.0 && token_dropout < 1.0)) throw ConfigError("token_dropout must be in [0, 1)");
  for (double lr : {lr_ssf, lr_backbone_ft, lr_head_ft, lr_bootstrap})
    if (!(lr >= 0.0) || !std::isfinite(lr)) throw ConfigError("learning rates must be finite and >= 0");
  if (!(weight_decay >= 0.0)) throw ConfigError("weight_decay must be >= 0");
}

std::string to_string(ExemplarMethod m) {
  switch (m) {
    case ExemplarMethod::None: return "none";
    case ExemplarMethod::Raw: return "raw";
    case ExemplarMethod::Masked: return "masked";
    case ExemplarMethod::CimLike: return "cim";
  }
  return "?";
}

ExemplarMethod parse_exemplar_method(const std::string& s) {
  if (s == "none") return ExemplarMethod::None;
  if (s == "raw") return ExemplarMethod::Raw;
  if (s == "masked") return ExemplarMethod::Masked;
  if (s == "cim") return ExemplarMethod::CimLike;
  throw ConfigError("unknown exemplar method '" + s + "' (expected none|raw|masked|cim)");
}

void ExperimentConfig::validate() const {
  model.validate();
  train.validate();
  masking.validate();
  if (regime == Regime::SSF && !model.ssf_enabled) throw ConfigError("SSF regime requires ssf_enabled = true");
  if (method != ExemplarMethod::None && quota < 1) throw ConfigError("quota must be >= 1");
  if (n_phases < 1) throw ConfigError("n_phases must be >= 1");
}

std::size_t budget_bytes(const ExperimentConfig& cfg) {
  const PatchGeometry g = cfg.model.geometry();
  const CostModel cm = CostModel::for_geometry(g);
  return static_cast<std::size_t>(cfg.quota) *
         cm.raw_cost(static_cast<std::size_t>(g.n_patches()), static_cast<std::size_t>(cfg.model.max_text_len));
}

std::vector<std::uint8_t> logit_mask(std::size_t rows_old, std::size_t rows_total, SampleOrigin origin) {
  if (rows_old > rows_total) throw ContractError("logit_mask: more old rows than rows");
  std::vector<std::uint8_t> m(rows_total, 0);
  for (std::size_t j = 0; j < rows_total; ++j) {
    const bool old = j < rows_old;
    m[j] = origin == SampleOrigin::New ? old : !old;
  }
  return m;
}

double masked_logit_ce(const nk::Tensor& logits, std::size_t label_row, std::span<const std::uint8_t> masked) {
  nk::Graph g;
  const nk::Var z = g.constant(logits);
  return g.value(g.masked_cross_entropy(z, label_row, {masked.begin(), masked.end()}))[0];
}

double MetricsLog::a_bar() const {
  if (phases.empty()) return 0.0;
  return a_bar_sum() / static_cast<double>(phases.size());
}

double MetricsLog::a_bar_sum() const {
  double s = 0.0;
  for (const auto& p : phases) s += p.accuracy;
  return s;
}

void MetricsLog::write_csv(std::ostream& out, bool wall_clock) const {
  out << "phase,seen_classes,A_l,A_bar_running,exemplars_per_class_mean,preserved_ratio_mean,buffer_bytes,seconds\n";
  for (const auto& p : phases) {
    out << p.phase << ',' << p.seen_classes << ',' << fixed(p.accuracy) << ',' << fixed(p.a_bar_running) << ','
        << fixed(p.exemplars_per_class_mean, 4) << ',' << fixed(p.preserved_ratio_mean) << ',' << p.buffer_bytes
        << ',' << fixed(wall_clock ? p.seconds : 0.0, 3) << '\n';
  }
}

void MetricsLog::write_diagnostics_csv(std::ostream& out) const {
  out << "phase,old_class_accuracy,new_class_accuracy,mean_loss,fg_alignment\n";
  for (const auto& p : phases)
    out << p.phase << ',' << fixed(p.old_class_accuracy) << ',' << fixed(p.new_class_accuracy) << ','
        << fixed(p.mean_loss) << ',' << fixed(p.fg_alignment) << '\n';
}

void LabelTable::add(std::span<const std::uint32_t> labels) {
  for (auto l : labels) {
    if (std::find(labels_.begin(), labels_.end(), l) != labels_.end())
      throw ContractError("class " + std::to_string(l) + " already has a classifier row");
    labels_.push_back(l);
  }
}

std::size_t LabelTable::row(std::uint32_t label) const {
  auto it = std::find(labels_.begin(), labels_.end(), label);
  if (it == labels_.end()) throw ContractError("class " + std::to_string(label) + " has no classifier row");
  return static_cast<std::size_t>(it - labels_.begin());
}

EvalResult evaluate(Model& model, const LabelTable& table, std::span<const MultimodalSample> test,
                    std::span<const std::uint32_t> classes) {
  EvalResult r;
  for (const auto& s : test) {
    if (std::find(classes.begin(), classes.end(), s.label) == classes.end()) continue;
    const ForwardOutput f = model.forward(model.embed(s));
    const auto& z = f.logits.values();
    const std::size_t best = static_cast<std::size_t>(std::max_element(z.begin(), z.end()) - z.begin());
    r.correct += best == table.row(s.label) ? 1 : 0;
    ++r.total;
  }
  r.accuracy = r.total ? static_cast<double>(r.correct) / static_cast<double>(r.total) : 0.0;
  return r;
}

Experiment::Experiment(const ExperimentConfig& cfg, const Dataset& data)
    : Experiment(cfg, data, Model(cfg.model, derive_seed(cfg.train.seed, {kSeedModel}))) {}

Experiment::Experiment(const ExperimentConfig& cfg, const Dataset& data, Model initial)
    : cfg_(cfg), data_(&data) {
  if (!cfg_.masking.seed) cfg_.masking.seed = derive_seed(cfg_.train.seed, {kSeedMask});
  cfg_.validate();
  if (data.spec.image_size != cfg_.model.image_size || data.spec.patch_size != cfg_.model.patch_size)
    throw ConfigError("dataset geometry does not match the model");
  if (static_cast<std::size_t>(cfg_.model.vocab_size) < data.vocab.size())
    throw ConfigError("model vocab_size " + std::to_string(cfg_.model.vocab_size) + " < dataset vocabulary " +
                      std::to_string(data.vocab.size()));
  if (data.spec.max_text_len > cfg_.model.max_text_len)
    throw ConfigError("dataset max_text_len exceeds the model's");

  state_.schedule = PhaseSchedule::uniform(data.spec.n_classes, cfg_.n_phases,
                                           cfg_.shuffle_classes ? derive_seed(cfg_.train.seed, {kSeedOrder}) : 0);
  if (!(initial.config() == cfg_.model)) throw ConfigError("initial model config does not match the experiment");
  if (initial.n_classes() != 0) throw ContractError("initial model must have an empty classifier");
  state_.model = std::move(initial);
  const PatchGeometry g = cfg_.model.geometry();
  std::size_t budget = budget_bytes(cfg_);
  if (cfg_.budget_mode == BudgetMode::GlobalPool) budget *= static_cast<std::size_t>(data.spec.n_classes);
  state_.buffer = MemoryBuffer(CostModel::for_geometry(g), g, budget, cfg_.budget_mode);
}

double Experiment::train_phase(int phase, PhaseMetrics& m) {
  const auto& new_classes = state_.schedule.new_classes(phase);
  Model& model = state_.model;
  Rng head_rng = make_rng(cfg_.train.seed, {kSeedHead, static_cast<std::uint64_t>(phase)});
  const std::size_t rows_old = state_.labels.size();
  state_.labels.add(new_classes);
  model.extend_classifier(static_cast<int>(new_classes.size()), head_rng);
  const std::size_t rows_total = state_.labels.size();

  std::vector<const MultimodalSample*> d_new;
  for (const auto& s : data_->train)
    if (std::find(new_classes.begin(), new_classes.end(), s.label) != new_classes.end()) d_new.push_back(&s);
  if (d_new.empty()) throw ContractError("phase " + std::to_string(phase + 1) + " has no training samples");

  const TrainConfig& tc = cfg_.train;
  std::vector<ParamGroup> groups;
  if (phase == 0 && tc.lr_bootstrap > 0.0) {
    std::vector<nk::Parameter*> all = model.parameters();
    for (auto* p : all) p->trainable = true;
    groups.push_back({all, tc.lr_bootstrap});
  } else {
    ParamGroup body, head;
    for (auto* p : model.trainable_params(cfg_.regime)) (p->kind == nk::ParamKind::Head ? head : body).params.push_back(p);
    body.lr = cfg_.regime == Regime::SSF ? tc.lr_ssf : tc.lr_backbone_ft;
    head.lr = cfg_.regime == Regime::SSF ? tc.lr_ssf : tc.lr_head_ft;
    groups = {body, head};
  }
  AdamWOptions opt_options;
  opt_options.weight_decay = tc.weight_decay;
  AdamW opt(groups, opt_options);

  const bool replay = cfg_.method != ExemplarMethod::None && !state_.buffer.empty();
  const std::size_t bs = static_cast<std::size_t>(tc.batch_size);
  std::size_t n_replay = replay ? static_cast<std::size_t>(std::llround(static_cast<double>(bs) * tc.replay_fraction)) : 0;
  if (n_replay >= bs) n_replay = bs - 1;
  const std::size_t n_new = bs - n_replay;
  const std::size_t batches = (d_new.size() + n_new - 1) / n_new;
  const std::size_t total_steps = batches * static_cast<std::size_t>(tc.epochs_per_phase);

  const auto mask_new = logit_mask(rows_old, rows_total, SampleOrigin::New);
  const auto mask_exemplar = logit_mask(rows_old, rows_total, SampleOrigin::Exemplar);

  double loss_sum = 0.0;
  std::size_t loss_count = 0;
  std::size_t step = 0;
  for (int epoch = 0; epoch < tc.epochs_per_phase; ++epoch) {
    Rng shuffle_rng = make_rng(tc.seed, {kSeedShuffle, static_cast<std::uint64_t>(phase),
                                         static_cast<std::uint64_t>(epoch)});
    std::vector<const MultimodalSample*> order = d_new;
    std::shuffle(order.begin(), order.end(), shuffle_rng);
    for (std::size_t b = 0; b < batches; ++b, ++step) {
      Rng replay_rng = make_rng(tc.seed, {kSeedReplay, static_cast<std::uint64_t>(phase), step});
      const std::size_t lo = b * n_new;
      const std::size_t hi = std::min(order.size(), lo + n_new);
      std::vector<AugmentedSample> replayed;
      if (n_replay > 0) replayed = replay_batch(state_.buffer, n_replay, replay_rng, cfg_.mda);
      const double inv = 1.0 / static_cast<double>((hi - lo) + replayed.size());

      opt.zero_grad();
      auto accumulate = [&](const TokenSequence& seq, std::size_t row, const std::vector<std::uint8_t>& mask) {
        nk::Graph g;
        const ForwardNodes nodes = model.build(g, seq);
        const nk::Var loss = g.masked_cross_entropy(nodes.logits, row, mask);
        g.backward(g.scale(loss, inv));
        loss_sum += g.value(loss)[0];
        ++loss_count;
      };
      for (std::size_t i = lo; i < hi; ++i) {
        TokenSequence seq = model.embed(*order[i]);
        if (tc.token_dropout > 0.0) {
          Rng drop_rng = make_rng(tc.seed, {kSeedDropout, static_cast<std::uint64_t>(phase), step, i});
          seq = drop_tokens(seq, tc.token_dropout, drop_rng);
        }
        accumulate(seq, state_.labels.row(order[i]->label), mask_new);
      }
      for (const auto& a : replayed)
        accumulate(model.embed(a.composite), state_.labels.row(a.label), mask_exemplar);
      opt.step(warmup_linear_decay(step, total_steps, tc.warmup_fraction));
    }
  }
  m.mean_loss = loss_count ? loss_sum / static_cast<double>(loss_count) : 0.0;
  return m.mean_loss;
}

void Experiment::build_exemplars(int phase, PhaseMetrics& m) {
  if (cfg_.method == ExemplarMethod::None) return;
  const auto& new_classes = state_.schedule.new_classes(phase);
  Model& model = state_.model;
  const PatchGeometry g = cfg_.model.geometry();
  MemoryBuffer& buffer = state_.buffer;
  buffer.register_classes(new_classes);

  MaskingConfig attention_cfg = cfg_.masking;
  attention_cfg.reference = Reference::Attention;

  double fg_sum = 0.0;
  std::size_t fg_count = 0;
  for (std::uint32_t c : new_classes) {
    std::vector<const MultimodalSample*> samples;
    for (const auto& s : data_->train)
      if (s.label == c) samples.push_back(&s);
    std::vector<Candidate> candidates;
    candidates.reserve(samples.size());
    const std::size_t row = state_.labels.row(c);
    for (const MultimodalSample* s : samples) {
      Candidate cand;
      switch (cfg_.method) {
        case ExemplarMethod::Raw:
          cand.exemplar = raw_exemplar(*s, g);
          break;
        case ExemplarMethod::Masked:
          cand.exemplar = mask_exemplar(*s, model, cfg_.masking, row).exemplar;
          break;
        case ExemplarMethod::CimLike:
          cand.exemplar = downsample_exemplar(*s, mask_exemplar(*s, model, attention_cfg, row).masks, g);
          break;
        case ExemplarMethod::None:
          break;
      }
      {
        const ForwardOutput fo = model.forward(model.embed(cand.exemplar));
        const auto f = fo.cls_feature.values();
        cand.feature.assign(f.begin(), f.end());
      }
      candidates.push_back(std::move(cand));
    }
    std::vector<double> mean(candidates.front().feature.size(), 0.0);
    for (const auto& cand : candidates)
      for (std::size_t j = 0; j < mean.size(); ++j) mean[j] += cand.feature[j];
    for (double& v : mean) v /= static_cast<double>(candidates.size());

    const auto chosen = select_exemplars(candidates, mean, buffer.budget_for(c), buffer.cost_model());
    for (std::size_t idx : chosen) {
      const MaskedExemplar& e = candidates[idx].exemplar;
      std::size_t kept = 0, fg = 0;
      for (const auto& p : e.image) {
        if (p.half_res) continue;
        ++kept;
        fg += samples[idx]->fg_patch_mask[p.position] ? 1 : 0;
      }
      if (kept > 0) {
        fg_sum += static_cast<double>(fg) / static_cast<double>(kept);
        ++fg_count;
      }
      buffer.insert(e);
    }
  }
  m.fg_alignment = fg_count ? fg_sum / static_cast<double>(fg_count) : 0.0;
}

PhaseMetrics Experiment::run_phase() {
  if (done_ >= state_.schedule.n_phases()) throw ContractError("every phase has already run");
  const auto t0 = std::chrono::steady_clock::now();
  const int phase = done_;
  PhaseMetrics m;
  m.phase = phase + 1;

  train_phase(phase, m);
  build_exemplars(phase, m);

  const auto seen = state_.schedule.seen_classes(phase);
  const auto old = state_.schedule.old_classes(phase);
  const auto& fresh = state_.schedule.new_classes(phase);
  m.seen_classes = static_cast<int>(seen.size());
  m.accuracy = evaluate(state_.model, state_.labels, data_->test, seen).accuracy;
  m.old_class_accuracy = old.empty() ? 0.0 : evaluate(state_.model, state_.labels, data_->test, old).accuracy;
  m.new_class_accuracy = evaluate(state_.model, state_.labels, data_->test, fresh).accuracy;

  const BufferStats bs = stats(state_.buffer);
  m.exemplars_per_class_mean = bs.mean_exemplars_per_class;
  m.preserved_ratio_mean = bs.mean_preserved_ratio;
  m.buffer_bytes = bs.total_bytes;

  log_.phases.push_back(m);
  log_.phases.back().a_bar_running = log_.a_bar();
  m.a_bar_running = log_.phases.back().a_bar_running;
  m.seconds = std::chrono::duration<double>(std::chrono::steady_clock::now() - t0).count();
  log_.phases.back().seconds = m.seconds;
  ++done_;
  log_info("phase " + std::to_string(m.phase) + "/" + std::to_string(state_.schedule.n_phases()) +
           " A=" + fixed(m.accuracy, 4) + " loss=" + fixed(m.mean_loss, 4) + " exemplars/class=" +
           fixed(m.exemplars_per_class_mean, 2) + " (" + fixed(m.seconds, 1) + "s)");
  return m;
}

MetricsLog Experiment::run(const PhaseCallback& on_phase) {
  while (done_ < state_.schedule.n_phases()) {
    const PhaseMetrics m = run_phase();
    if (on_phase) on_phase(m, state_);
  }
  return log_;
}

MetricsLog run_experiment(const ExperimentConfig& cfg, const Dataset& data, const PhaseCallback& on_phase) {
  Experiment e(cfg, data);
  return e.run(on_phase);
}

MetricsLog run_experiment(const ExperimentConfig& cfg, const Dataset& data, Model initial,
                          const PhaseCallback& on_phase) {
  Experiment e(cfg, data, std::move(initial));
  return e.run(on_phase);
}

}  // namespace emask
