#pragma once

// Phase-wise class-incremental training: one evolving model, a byte-budgeted
// exemplar buffer rebuilt at the end of every phase, and per-phase metrics.

#include <cstdint>
#include <functional>
#include <ostream>
#include <string>
#include <vector>

#include "emask/buffer.hpp"
#include "emask/datagen.hpp"
#include "emask/masking.hpp"
#include "emask/model.hpp"
#include "emask/optimizer.hpp"

namespace emask {

/// Disjoint, equal-sized class groups, one per phase.
class PhaseSchedule {
 public:
  PhaseSchedule() = default;
  explicit PhaseSchedule(std::vector<std::vector<std::uint32_t>> phases);

  /// Classes 0..n_classes-1 split into `n_phases` groups, in an order
  /// shuffled by `order_seed` (identity order when it is 0).
  static PhaseSchedule uniform(int n_classes, int n_phases, std::uint64_t order_seed = 0);

  int n_phases() const noexcept { return static_cast<int>(phases_.size()); }
  const std::vector<std::uint32_t>& new_classes(int phase) const;
  /// Classes of phases before `phase` (0-based).
  std::vector<std::uint32_t> old_classes(int phase) const;
  std::vector<std::uint32_t> seen_classes(int phase) const;
  std::vector<std::uint32_t> all_classes() const;
  const std::vector<std::vector<std::uint32_t>>& phases() const noexcept { return phases_; }

 private:
  std::vector<std::vector<std::uint32_t>> phases_;
};

struct TrainConfig {
  int epochs_per_phase = 30;
  double lr_ssf = 1e-3;
  double lr_backbone_ft = 1e-5;
  double lr_head_ft = 1e-3;
  /// First phase trains every parameter at this rate (the backbone starts
  /// from random weights). Zero disables the bootstrap.
  double lr_bootstrap = 1e-3;
  double weight_decay = 2e-2;
  double warmup_fraction = 0.10;
  int batch_size = 16;
  double replay_fraction = 0.5;
  /// Each non-delimiter text token and each image patch of a new-class
  /// training sample is dropped with this probability (one patch always stays).
  double token_dropout = 0.0;
  std::uint64_t seed = 0;

  void validate() const;
};

enum class ExemplarMethod : std::uint8_t { None, Raw, Masked, CimLike };
std::string to_string(ExemplarMethod m);
ExemplarMethod parse_exemplar_method(const std::string& s);

struct ExperimentConfig {
  ModelConfig model;
  TrainConfig train;
  MaskingConfig masking;
  Regime regime = Regime::SSF;
  ExemplarMethod method = ExemplarMethod::Masked;
  bool mda = true;
  /// Per-class budget expressed as a number of raw full-length samples.
  int quota = 5;
  BudgetMode budget_mode = BudgetMode::PerClass;
  int n_phases = 5;
  /// Shuffle the class order by the seed.
  bool shuffle_classes = true;

  void validate() const;
};

/// Per-class byte budget: quota raw samples at full text length.
std::size_t budget_bytes(const ExperimentConfig& cfg);

enum class SampleOrigin : std::uint8_t { New, Exemplar };

/// Masking vector over classifier rows: old rows for new samples, new rows
/// for exemplars. `rows_old` rows come first in classifier order.
std::vector<std::uint8_t> logit_mask(std::size_t rows_old, std::size_t rows_total, SampleOrigin origin);

/// Masked cross-entropy of a 1 x C logit tensor (no graph).
double masked_logit_ce(const nk::Tensor& logits, std::size_t label_row, std::span<const std::uint8_t> masked);

struct PhaseMetrics {
  int phase = 0;  // 1-based
  int seen_classes = 0;
  double accuracy = 0.0;
  double a_bar_running = 0.0;
  double exemplars_per_class_mean = 0.0;
  double preserved_ratio_mean = 0.0;
  std::size_t buffer_bytes = 0;
  double seconds = 0.0;
  // diagnostics
  double old_class_accuracy = 0.0;  // 0 in phase 1
  double new_class_accuracy = 0.0;
  double mean_loss = 0.0;
  double fg_alignment = 0.0;        // preserved full-res patches that are foreground
};

struct MetricsLog {
  std::vector<PhaseMetrics> phases;

  /// (1/L) * sum A^l
  double a_bar() const;
  /// sum A^l
  double a_bar_sum() const;
  /// Writes the metrics CSV; `seconds` is written as 0 unless `wall_clock`.
  void write_csv(std::ostream& out, bool wall_clock = false) const;
  void write_diagnostics_csv(std::ostream& out) const;
};

/// Maps class ids to classifier rows in arrival order.
class LabelTable {
 public:
  void add(std::span<const std::uint32_t> labels);
  std::size_t row(std::uint32_t label) const;
  std::size_t size() const noexcept { return labels_.size(); }
  const std::vector<std::uint32_t>& labels() const noexcept { return labels_; }

 private:
  std::vector<std::uint32_t> labels_;
};

/// Top-1 accuracy over all classifier rows (every seen class competes).
struct EvalResult {
  double accuracy = 0.0;
  std::size_t correct = 0;
  std::size_t total = 0;
};
EvalResult evaluate(Model& model, const LabelTable& table, std::span<const MultimodalSample> test,
                    std::span<const std::uint32_t> classes);

struct ExperimentState {
  Model model;
  MemoryBuffer buffer;
  LabelTable labels;
  PhaseSchedule schedule;
};

using PhaseCallback = std::function<void(const PhaseMetrics&, const ExperimentState&)>;

class Experiment {
 public:
  Experiment(const ExperimentConfig& cfg, const Dataset& data);
  /// Starts from `initial` instead of a freshly initialized model.
  Experiment(const ExperimentConfig& cfg, const Dataset& data, Model initial);

  const ExperimentConfig& config() const noexcept { return cfg_; }
  const ExperimentState& state() const noexcept { return state_; }
  ExperimentState& state() noexcept { return state_; }
  int phases_done() const noexcept { return done_; }

  /// Runs the next phase: extend head, train, rebuild buffer, evaluate.
  PhaseMetrics run_phase();
  MetricsLog run(const PhaseCallback& on_phase = {});

 private:
  double train_phase(int phase, PhaseMetrics& m);
  void build_exemplars(int phase, PhaseMetrics& m);

  ExperimentConfig cfg_;
  const Dataset* data_;
  ExperimentState state_;
  MetricsLog log_;
  int done_ = 0;
};

MetricsLog run_experiment(const ExperimentConfig& cfg, const Dataset& data, const PhaseCallback& on_phase = {});
MetricsLog run_experiment(const ExperimentConfig& cfg, const Dataset& data, Model initial,
                          const PhaseCallback& on_phase = {});

}  // namespace emask
