#pragma once

#include <cstdint>
#include <optional>
#include <ostream>
#include <string>
#include <vector>

#include "emask/cli/config.hpp"

namespace emask::cli {

inline constexpr int kExitOk = 0;
inline constexpr int kExitRuntime = 1;
inline constexpr int kExitConfig = 2;

struct SeedResult {
  std::uint64_t seed = 0;
  MetricsLog log;
};

/// Runs every seed of `cfg` (up to `threads` at once) and writes
///   <out>/config.ini, aggregate.csv, summary.txt
///   <out>/seed_<s>/metrics.csv, diagnostics.csv, timing.csv, buffer.bin, buffer_stats.csv
/// `config_text` is echoed verbatim; the fully expanded config is used when empty.
std::vector<SeedResult> run_seeds(const RunConfig& cfg, const Dataset& data, const std::string& out_dir,
                                  int threads, const std::string& config_text = {});

struct AggregateRow {
  int phase = 0;
  int seen_classes = 0;
  double a_l_mean = 0, a_l_std = 0;
  double a_bar_mean = 0, a_bar_std = 0;
  double exemplars_mean = 0, preserved_ratio_mean = 0, buffer_bytes_mean = 0;
};

/// Mean and sample standard deviation across seeds, per phase.
std::vector<AggregateRow> aggregate(const std::vector<SeedResult>& results);
void write_aggregate_csv(std::ostream& out, const std::vector<AggregateRow>& rows);

enum class SweepAxis { Threshold, Reference, Memory, Order };
SweepAxis parse_sweep_axis(const std::string& s);
std::string to_string(SweepAxis a);

struct SweepCell {
  std::string value;  // label in grid.csv
  RunConfig config;
};

std::vector<SweepCell> sweep_cells(SweepAxis axis, const RunConfig& base);

struct SweepRow {
  std::string axis, value;
  double a_bar_mean = 0, a_bar_std = 0;
  double preserved_ratio_mean = 0;
  double exemplars_per_class_mean = 0;
  std::size_t n_seeds = 0;
};

/// Runs every cell; each cell directory gets its own full config.ini so the
/// row can be rerun alone. Writes <out>/grid.csv.
std::vector<SweepRow> run_sweep(SweepAxis axis, const RunConfig& base, const Dataset& data,
                                const std::string& out_dir, int threads);
void write_grid_csv(std::ostream& out, const std::vector<SweepRow>& rows);

/// Textual view of one stored exemplar: patch grid ('#' kept, 'o' half
/// resolution, '.' discarded), kept text tokens with positions, byte costs.
void render_exemplar(std::ostream& out, const MaskedExemplar& e, const PatchGeometry& g, const CostModel& cm,
                     const Vocabulary* vocab = nullptr);
/// Binary PGM of the patch mask at image resolution (255 kept, 128 half, 0 discarded).
std::string patch_mask_pgm(const MaskedExemplar& e, const PatchGeometry& g);

int cmd_gen_data(const RunConfig& cfg, const std::string& out_dir, std::ostream& log);
int cmd_inspect_buffer(const std::string& buffer_path, std::optional<std::size_t> index,
                       const std::optional<std::string>& pgm_path, const std::optional<std::string>& data_dir,
                       std::ostream& out);
/// Reads a run directory (seed_* subdirectories) or a sweep directory
/// (grid.csv) and writes SVG charts plus report.md into `out_dir`.
int cmd_report(const std::string& in_dir, const std::string& out_dir, std::ostream& out);

}  // namespace emask::cli
