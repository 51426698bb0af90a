#include "emask/cli/commands.hpp"

#include <algorithm>
#include <atomic>
#include <cmath>
#include <exception>
#include <filesystem>
#include <fstream>
#include <iomanip>
#include <map>
#include <mutex>
#include <sstream>
#include <thread>

#include "emask/cli/svg.hpp"
#include "emask/log.hpp"

namespace fs = std::filesystem;

namespace emask::cli {

namespace {

std::string fixed(double v, int digits = 6) {
  std::ostringstream o;
  o << std::fixed << std::setprecision(digits) << v;
  return o.str();
}

void write_text(const fs::path& path, const std::string& text) {
  std::ofstream out(path, std::ios::binary | std::ios::trunc);
  if (!out) throw LoadError("cannot write " + path.string());
  out << text;
}

std::string read_text(const fs::path& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw LoadError("cannot open " + path.string());
  std::ostringstream ss;
  ss << in.rdbuf();
  return ss.str();
}

void make_dirs(const fs::path& p) {
  std::error_code ec;
  fs::create_directories(p, ec);
  if (ec) throw LoadError("cannot create directory " + p.string() + ": " + ec.message());
}

// Runs job(i) for i in [0, n) on up to `threads` workers; rethrows the first failure.
template <class Job>
void parallel_for(std::size_t n, int threads, Job job) {
  const std::size_t workers = std::min<std::size_t>(n, static_cast<std::size_t>(std::max(1, threads)));
  if (workers <= 1) {
    for (std::size_t i = 0; i < n; ++i) job(i);
    return;
  }
  std::atomic<std::size_t> next{0};
  std::exception_ptr failure;
  std::mutex m;
  std::vector<std::thread> pool;
  for (std::size_t w = 0; w < workers; ++w)
    pool.emplace_back([&] {
      for (std::size_t i; (i = next++) < n;) {
        try {
          job(i);
        } catch (...) {
          std::lock_guard lock(m);
          if (!failure) failure = std::current_exception();
          next = n;
        }
      }
    });
  for (auto& t : pool) t.join();
  if (failure) std::rethrow_exception(failure);
}

std::pair<double, double> mean_std(const std::vector<double>& v) {
  if (v.empty()) return {0.0, 0.0};
  double mean = 0.0;
  for (double x : v) mean += x;
  mean /= static_cast<double>(v.size());
  if (v.size() < 2) return {mean, 0.0};
  double ss = 0.0;
  for (double x : v) ss += (x - mean) * (x - mean);
  return {mean, std::sqrt(ss / static_cast<double>(v.size() - 1))};
}

std::vector<std::vector<std::string>> read_csv(const fs::path& path) {
  std::istringstream in(read_text(path));
  std::vector<std::vector<std::string>> rows;
  for (std::string line; std::getline(in, line);) {
    if (line.empty()) continue;
    std::vector<std::string> cells;
    std::stringstream ss(line);
    for (std::string cell; std::getline(ss, cell, ',');) cells.push_back(cell);
    rows.push_back(std::move(cells));
  }
  return rows;
}

std::size_t column(const std::vector<std::string>& header, const std::string& name, const fs::path& path) {
  auto it = std::find(header.begin(), header.end(), name);
  if (it == header.end()) throw LoadError(path.string() + ": missing column '" + name + "'");
  return static_cast<std::size_t>(it - header.begin());
}

}  // namespace

std::vector<SeedResult> run_seeds(const RunConfig& cfg, const Dataset& data, const std::string& out_dir,
                                  int threads, const std::string& config_text) {
  const fs::path root(out_dir);
  make_dirs(root);
  write_text(root / "config.ini", config_text.empty() ? to_ini(cfg).render() : config_text);

  std::vector<SeedResult> results(cfg.seeds.size());
  parallel_for(cfg.seeds.size(), threads, [&](std::size_t i) {
    const std::uint64_t seed = cfg.seeds[i];
    ExperimentConfig x = cfg.experiment;
    x.train.seed = seed;
    x.model.image_size = data.spec.image_size;
    x.model.patch_size = data.spec.patch_size;
    x.model.max_text_len = std::max(x.model.max_text_len, data.spec.max_text_len);
    Experiment experiment(x, data);
    MetricsLog log = experiment.run();

    const fs::path dir = root / ("seed_" + std::to_string(seed));
    make_dirs(dir);
    std::ostringstream metrics, diagnostics, timing, buffer_stats;
    log.write_csv(metrics, cfg.wall_clock);
    log.write_diagnostics_csv(diagnostics);
    timing << "phase,seconds\n";
    for (const auto& p : log.phases) timing << p.phase << ',' << fixed(p.seconds, 3) << '\n';
    write_stats_csv(buffer_stats, stats(experiment.state().buffer));
    write_text(dir / "metrics.csv", metrics.str());
    write_text(dir / "diagnostics.csv", diagnostics.str());
    write_text(dir / "timing.csv", timing.str());
    write_text(dir / "buffer_stats.csv", buffer_stats.str());
    save_buffer(experiment.state().buffer, (dir / "buffer.bin").string());
    results[i] = {seed, std::move(log)};
  });

  const auto rows = aggregate(results);
  std::ostringstream agg;
  write_aggregate_csv(agg, rows);
  write_text(root / "aggregate.csv", agg.str());

  std::vector<double> a_bar, a_sum;
  for (const auto& r : results) {
    a_bar.push_back(r.log.a_bar());
    a_sum.push_back(r.log.a_bar_sum());
  }
  const auto [m, s] = mean_std(a_bar);
  const auto [ms, ss] = mean_std(a_sum);
  std::ostringstream summary;
  summary << "seeds = " << format_seed_list(cfg.seeds) << "\n"
          << "method = " << to_string(cfg.experiment.method) << "\n"
          << "mda = " << (cfg.experiment.mda ? "true" : "false") << "\n"
          << "A_bar_mean = " << fixed(m) << "\n"
          << "A_bar_std = " << fixed(s) << "\n"
          << "A_bar_sum_mean = " << fixed(ms) << "\n"
          << "A_bar_sum_std = " << fixed(ss) << "\n";
  for (const auto& r : results)
    summary << "seed " << r.seed << ": A_bar = " << fixed(r.log.a_bar()) << ", A_bar_sum = " << fixed(r.log.a_bar_sum())
            << "\n";
  write_text(root / "summary.txt", summary.str());
  return results;
}

std::vector<AggregateRow> aggregate(const std::vector<SeedResult>& results) {
  std::vector<AggregateRow> rows;
  if (results.empty()) return rows;
  const std::size_t n_phases = results.front().log.phases.size();
  for (std::size_t p = 0; p < n_phases; ++p) {
    std::vector<double> a, ab, ex, pr, bb;
    for (const auto& r : results) {
      if (r.log.phases.size() != n_phases) throw ContractError("aggregate: seeds ran different phase counts");
      const auto& m = r.log.phases[p];
      a.push_back(m.accuracy);
      ab.push_back(m.a_bar_running);
      ex.push_back(m.exemplars_per_class_mean);
      pr.push_back(m.preserved_ratio_mean);
      bb.push_back(static_cast<double>(m.buffer_bytes));
    }
    AggregateRow row;
    row.phase = results.front().log.phases[p].phase;
    row.seen_classes = results.front().log.phases[p].seen_classes;
    std::tie(row.a_l_mean, row.a_l_std) = mean_std(a);
    std::tie(row.a_bar_mean, row.a_bar_std) = mean_std(ab);
    row.exemplars_mean = mean_std(ex).first;
    row.preserved_ratio_mean = mean_std(pr).first;
    row.buffer_bytes_mean = mean_std(bb).first;
    rows.push_back(row);
  }
  return rows;
}

void write_aggregate_csv(std::ostream& out, const std::vector<AggregateRow>& rows) {
  out << "phase,seen_classes,A_l_mean,A_l_std,A_bar_running_mean,A_bar_running_std,exemplars_per_class_mean,"
         "preserved_ratio_mean,buffer_bytes_mean\n";
  for (const auto& r : rows)
    out << r.phase << ',' << r.seen_classes << ',' << fixed(r.a_l_mean) << ',' << fixed(r.a_l_std) << ','
        << fixed(r.a_bar_mean) << ',' << fixed(r.a_bar_std) << ',' << fixed(r.exemplars_mean, 4) << ','
        << fixed(r.preserved_ratio_mean) << ',' << fixed(r.buffer_bytes_mean, 1) << '\n';
}

SweepAxis parse_sweep_axis(const std::string& s) {
  if (s == "threshold") return SweepAxis::Threshold;
  if (s == "reference") return SweepAxis::Reference;
  if (s == "memory") return SweepAxis::Memory;
  if (s == "order") return SweepAxis::Order;
  throw ConfigError("unknown sweep axis '" + s + "' (expected threshold|reference|memory|order)");
}

std::string to_string(SweepAxis a) {
  switch (a) {
    case SweepAxis::Threshold: return "threshold";
    case SweepAxis::Reference: return "reference";
    case SweepAxis::Memory: return "memory";
    case SweepAxis::Order: return "order";
  }
  return "?";
}

std::vector<SweepCell> sweep_cells(SweepAxis axis, const RunConfig& base) {
  std::vector<SweepCell> cells;
  switch (axis) {
    case SweepAxis::Threshold:
      for (double k : {-0.5, -0.25, 0.0, 0.25, 0.5}) {
        RunConfig c = base;
        c.experiment.masking.fixed_thresholds.reset();
        c.experiment.masking.threshold_offset = k;
        std::ostringstream v;
        v << k;
        cells.push_back({v.str(), c});
      }
      break;
    case SweepAxis::Reference:
      for (Reference r : {Reference::Attention, Reference::Entropy, Reference::Cam, Reference::GradCam,
                          Reference::Random}) {
        RunConfig c = base;
        c.experiment.masking.reference = r;
        cells.push_back({to_string(r), c});
      }
      break;
    case SweepAxis::Memory:
      for (int q : {2, 5, 10, 20}) {
        RunConfig c = base;
        c.experiment.quota = q;
        cells.push_back({std::to_string(q), c});
      }
      break;
    case SweepAxis::Order:
      for (FirstModality f : {FirstModality::Image, FirstModality::Text})
        for (CrossStrategy s : {CrossStrategy::Complementary, CrossStrategy::Relevant}) {
          RunConfig c = base;
          c.experiment.masking.first_modality = f;
          c.experiment.masking.cross_strategy = s;
          cells.push_back({to_string(f) + "-" + to_string(s), c});
        }
      break;
  }
  return cells;
}

std::vector<SweepRow> run_sweep(SweepAxis axis, const RunConfig& base, const Dataset& data,
                                const std::string& out_dir, int threads) {
  const auto cells = sweep_cells(axis, base);
  std::vector<SweepRow> rows(cells.size());
  // seeds inside a cell run serially; cells fan out
  parallel_for(cells.size(), threads, [&](std::size_t i) {
    const fs::path dir = fs::path(out_dir) / (to_string(axis) + "_" + cells[i].value);
    const auto results = run_seeds(cells[i].config, data, dir.string(), 1);
    std::vector<double> a_bar, pr, ex;
    for (const auto& r : results) {
      a_bar.push_back(r.log.a_bar());
      pr.push_back(r.log.phases.back().preserved_ratio_mean);
      ex.push_back(r.log.phases.back().exemplars_per_class_mean);
    }
    SweepRow& row = rows[i];
    row.axis = to_string(axis);
    row.value = cells[i].value;
    std::tie(row.a_bar_mean, row.a_bar_std) = mean_std(a_bar);
    row.preserved_ratio_mean = mean_std(pr).first;
    row.exemplars_per_class_mean = mean_std(ex).first;
    row.n_seeds = results.size();
  });
  std::ostringstream grid;
  write_grid_csv(grid, rows);
  write_text(fs::path(out_dir) / "grid.csv", grid.str());
  return rows;
}

void write_grid_csv(std::ostream& out, const std::vector<SweepRow>& rows) {
  out << "axis,value,A_bar_mean,A_bar_std,preserved_ratio_mean,exemplars_per_class_mean,n_seeds\n";
  for (const auto& r : rows)
    out << r.axis << ',' << r.value << ',' << fixed(r.a_bar_mean) << ',' << fixed(r.a_bar_std) << ','
        << fixed(r.preserved_ratio_mean) << ',' << fixed(r.exemplars_per_class_mean, 4) << ',' << r.n_seeds << '\n';
}

void render_exemplar(std::ostream& out, const MaskedExemplar& e, const PatchGeometry& g, const CostModel& cm,
                     const Vocabulary* vocab) {
  std::vector<char> cells(static_cast<std::size_t>(g.n_patches()), '.');
  std::size_t full = 0, half = 0;
  for (const auto& p : e.image) {
    cells.at(p.position) = p.half_res ? 'o' : '#';
    (p.half_res ? half : full) += 1;
  }
  out << "label " << e.label << (e.dense ? "  (dense)" : "") << "\n";
  out << "image " << full << "/" << e.source_image_tokens << " patches kept";
  if (half) out << ", " << half << " at half resolution";
  out << "\n";
  for (int r = 0; r < g.grid(); ++r) {
    out << "  ";
    for (int c = 0; c < g.grid(); ++c) out << cells[static_cast<std::size_t>(r * g.grid() + c)];
    out << "\n";
  }
  out << "text " << e.text.size() << "/" << e.source_text_tokens << " tokens kept\n";
  for (const auto& t : e.text) {
    out << "  [" << t.position << "] " << t.id;
    if (vocab && t.id < vocab->size()) out << " " << vocab->word(t.id);
    out << "\n";
  }
  out << "preserved ratio " << fixed(e.preserved_ratio(), 4) << "\n";

  const std::size_t pos = e.dense ? 0 : cm.bytes_per_position_index;
  const std::size_t full_bytes = full * (pos + cm.bytes_per_patch);
  const std::size_t half_bytes = half * (pos + cm.bytes_per_patch / 4);
  const std::size_t text_bytes = e.text.size() * (pos + cm.bytes_per_text_token);
  ByteWriter w;
  write_exemplar(w, e, g);
  out << "cost\n"
      << "  header            " << cm.exemplar_header_bytes << "\n"
      << "  image full  " << full << " x " << pos + cm.bytes_per_patch << " = " << full_bytes << "\n";
  if (half) out << "  image half  " << half << " x " << pos + cm.bytes_per_patch / 4 << " = " << half_bytes << "\n";
  out << "  text        " << e.text.size() << " x " << pos + cm.bytes_per_text_token << " = " << text_bytes << "\n"
      << "  total             " << cm.exemplar_header_bytes + full_bytes + half_bytes + text_bytes << "\n"
      << "  serialized        " << w.size() << (w.size() == cm.cost(e) ? "" : "  (MISMATCH)") << "\n";
}

std::string patch_mask_pgm(const MaskedExemplar& e, const PatchGeometry& g) {
  std::vector<std::uint8_t> level(static_cast<std::size_t>(g.n_patches()), 0);
  for (const auto& p : e.image) level.at(p.position) = p.half_res ? 128 : 255;
  std::string out = "P5\n" + std::to_string(g.image_size) + " " + std::to_string(g.image_size) + "\n255\n";
  for (int y = 0; y < g.image_size; ++y)
    for (int x = 0; x < g.image_size; ++x)
      out.push_back(static_cast<char>(level[static_cast<std::size_t>((y / g.patch_size) * g.grid() + x / g.patch_size)]));
  return out;
}

int cmd_gen_data(const RunConfig& cfg, const std::string& out_dir, std::ostream& log) {
  const Dataset ds = generate(cfg.spec);
  save_dataset(ds, out_dir);
  log << "wrote " << ds.train.size() << " train and " << ds.test.size() << " test samples (" << cfg.spec.n_classes
      << " classes, vocabulary " << ds.vocab.size() << ") to " << out_dir << "\n";
  return kExitOk;
}

int cmd_inspect_buffer(const std::string& buffer_path, std::optional<std::size_t> index,
                       const std::optional<std::string>& pgm_path, const std::optional<std::string>& data_dir,
                       std::ostream& out) {
  const MemoryBuffer buffer = load_buffer(buffer_path);
  std::optional<Dataset> data;
  if (data_dir) data = load_dataset(*data_dir);
  std::vector<const MaskedExemplar*> flat;
  for (auto c : buffer.classes())
    for (const auto& e : buffer.exemplars(c)) flat.push_back(&e);

  if (!index) {
    out << "buffer " << buffer_path << "\n"
        << "  mode " << (buffer.mode() == BudgetMode::PerClass ? "per_class" : "global") << ", budget "
        << buffer.budget_bytes() << " bytes, total " << buffer.total_bytes() << " bytes\n";
    for (auto c : buffer.classes())
      out << "  class " << c << ": " << buffer.exemplars(c).size() << " exemplars, " << buffer.class_bytes(c) << "/"
          << buffer.budget_for(c) << " bytes\n";
    out << "valid indices: [0, " << flat.size() << ")\n";
    return kExitOk;
  }
  if (*index >= flat.size()) {
    throw InputError("exemplar index " + std::to_string(*index) + " out of range; valid range is [0, " +
                     std::to_string(flat.size()) + ")");
  }
  render_exemplar(out, *flat[*index], buffer.geometry(), buffer.cost_model(), data ? &data->vocab : nullptr);
  if (pgm_path) {
    write_text(*pgm_path, patch_mask_pgm(*flat[*index], buffer.geometry()));
    out << "wrote patch mask to " << *pgm_path << "\n";
  }
  return kExitOk;
}

int cmd_report(const std::string& in_dir, const std::string& out_dir, std::ostream& out) {
  const fs::path in(in_dir), dst(out_dir);
  make_dirs(dst);
  std::ostringstream md;

  if (fs::exists(in / "grid.csv")) {
    const auto rows = read_csv(in / "grid.csv");
    if (rows.size() < 2) throw LoadError((in / "grid.csv").string() + ": no rows");
    const auto& h = rows.front();
    const auto ci = column(h, "value", in / "grid.csv"), ca = column(h, "A_bar_mean", in / "grid.csv"),
               cp = column(h, "preserved_ratio_mean", in / "grid.csv"),
               ce = column(h, "exemplars_per_class_mean", in / "grid.csv"), cx = column(h, "axis", in / "grid.csv");
    const std::string axis = rows[1][cx];
    Series s{"A_bar", {}, {}};
    bool numeric = true;
    for (std::size_t i = 1; i < rows.size(); ++i) {
      char* end = nullptr;
      std::strtod(rows[i][ci].c_str(), &end);
      numeric = numeric && end && *end == '\0';
    }
    md << "# Sweep: " << axis << "\n\n| value | A_bar | preserved ratio | exemplars/class |\n|---|---|---|---|\n";
    for (std::size_t i = 1; i < rows.size(); ++i) {
      s.x.push_back(numeric ? std::stod(rows[i][ci]) : static_cast<double>(i - 1));
      s.y.push_back(std::stod(rows[i][ca]));
      md << "| " << rows[i][ci] << " | " << rows[i][ca] << " | " << rows[i][cp] << " | " << rows[i][ce] << " |\n";
    }
    LineChart chart{"A_bar vs " + axis, numeric ? axis : axis + " (cell index)", "A_bar", {s}};
    const std::string name = "a_bar_vs_" + axis + ".svg";
    write_text(dst / name, render_svg(chart));
    md << "\n![](" << name << ")\n";
    out << "wrote " << (dst / name).string() << "\n";
  } else {
    std::vector<fs::path> seeds;
    for (const auto& entry : fs::directory_iterator(in))
      if (entry.is_directory() && entry.path().filename().string().rfind("seed_", 0) == 0 &&
          fs::exists(entry.path() / "metrics.csv"))
        seeds.push_back(entry.path());
    std::sort(seeds.begin(), seeds.end());
    if (seeds.empty()) throw LoadError(in_dir + ": neither grid.csv nor seed_*/metrics.csv found");
    LineChart acc{"A_l per phase", "phase", "A_l", {}};
    LineChart run{"A_bar (running) per phase", "phase", "A_bar", {}};
    md << "# Run report\n\n| seed | phase | A_l | A_bar | exemplars/class | preserved ratio |\n|---|---|---|---|---|---|\n";
    for (const auto& dir : seeds) {
      const auto rows = read_csv(dir / "metrics.csv");
      const auto& h = rows.front();
      const auto cp = column(h, "phase", dir / "metrics.csv"), ca = column(h, "A_l", dir / "metrics.csv"),
                 cb = column(h, "A_bar_running", dir / "metrics.csv"),
                 ce = column(h, "exemplars_per_class_mean", dir / "metrics.csv"),
                 cr = column(h, "preserved_ratio_mean", dir / "metrics.csv");
      Series sa{dir.filename().string(), {}, {}}, sb{dir.filename().string(), {}, {}};
      for (std::size_t i = 1; i < rows.size(); ++i) {
        const double p = std::stod(rows[i][cp]);
        sa.x.push_back(p);
        sa.y.push_back(std::stod(rows[i][ca]));
        sb.x.push_back(p);
        sb.y.push_back(std::stod(rows[i][cb]));
        md << "| " << dir.filename().string().substr(5) << " | " << rows[i][cp] << " | " << rows[i][ca] << " | "
           << rows[i][cb] << " | " << rows[i][ce] << " | " << rows[i][cr] << " |\n";
      }
      acc.series.push_back(std::move(sa));
      run.series.push_back(std::move(sb));
    }
    write_text(dst / "a_l_vs_phase.svg", render_svg(acc));
    write_text(dst / "a_bar_vs_phase.svg", render_svg(run));
    md << "\n![](a_l_vs_phase.svg)\n\n![](a_bar_vs_phase.svg)\n";
    out << "wrote " << (dst / "a_l_vs_phase.svg").string() << " and " << (dst / "a_bar_vs_phase.svg").string()
        << "\n";
  }
  write_text(dst / "report.md", md.str());
  return kExitOk;
}

}  // namespace emask::cli
