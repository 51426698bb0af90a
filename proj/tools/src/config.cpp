#include "emask/cli/config.hpp"

#include <charconv>
#include <filesystem>
#include <set>
#include <sstream>

namespace emask::cli {

namespace {

std::string fmt(double v) {
  char buf[64];
  auto r = std::to_chars(buf, buf + sizeof buf, v);
  return {buf, r.ptr};
}

std::string fmt(bool v) { return v ? "true" : "false"; }

// Typed access to one document; remembers consumed keys so leftovers can be
// reported as unknown.
class Reader {
 public:
  explicit Reader(const IniDocument& doc) : doc_(doc) {}

  const IniEntry* raw(const std::string& sec, const std::string& key) {
    used_.insert(sec + "." + key);
    return doc_.find(sec, key);
  }

  [[noreturn]] void fail(const std::string& sec, const std::string& key, const IniEntry* e,
                         const std::string& what) const {
    throw ConfigFileError(doc_.source(), e ? e->line : 0, "field '" + sec + "." + key + "': " + what);
  }

  const IniEntry& required(const std::string& sec, const std::string& key) {
    const IniEntry* e = raw(sec, key);
    if (!e) fail(sec, key, nullptr, "missing required field");
    return *e;
  }

  void integer(const std::string& sec, const std::string& key, int& out) {
    if (const IniEntry* e = raw(sec, key)) {
      long long v = 0;
      auto [p, ec] = std::from_chars(e->value.data(), e->value.data() + e->value.size(), v);
      if (ec != std::errc() || p != e->value.data() + e->value.size() || v < INT32_MIN || v > INT32_MAX)
        fail(sec, key, e, "expected an integer, got '" + e->value + "'");
      out = static_cast<int>(v);
    }
  }

  void unsigned64(const std::string& sec, const std::string& key, std::uint64_t& out) {
    if (const IniEntry* e = raw(sec, key)) out = parse_u64(sec, key, e, e->value);
  }

  std::uint64_t parse_u64(const std::string& sec, const std::string& key, const IniEntry* e, const std::string& s) const {
    std::uint64_t v = 0;
    auto [p, ec] = std::from_chars(s.data(), s.data() + s.size(), v);
    if (s.empty() || ec != std::errc() || p != s.data() + s.size())
      fail(sec, key, e, "expected a non-negative integer, got '" + s + "'");
    return v;
  }

  void real(const std::string& sec, const std::string& key, double& out) {
    if (const IniEntry* e = raw(sec, key)) out = parse_real(sec, key, e);
  }

  double parse_real(const std::string& sec, const std::string& key, const IniEntry* e) const {
    double v = 0;
    auto [p, ec] = std::from_chars(e->value.data(), e->value.data() + e->value.size(), v);
    if (ec != std::errc() || p != e->value.data() + e->value.size())
      fail(sec, key, e, "expected a number, got '" + e->value + "'");
    return v;
  }

  void boolean(const std::string& sec, const std::string& key, bool& out) {
    if (const IniEntry* e = raw(sec, key)) {
      if (e->value == "true" || e->value == "1" || e->value == "yes") out = true;
      else if (e->value == "false" || e->value == "0" || e->value == "no") out = false;
      else fail(sec, key, e, "expected true or false, got '" + e->value + "'");
    }
  }

  template <class T, class Parse>
  void choice(const std::string& sec, const std::string& key, T& out, Parse parse) {
    if (const IniEntry* e = raw(sec, key)) {
      try {
        out = parse(e->value);
      } catch (const ConfigError& err) {
        fail(sec, key, e, err.what());
      }
    }
  }

  void finish() const {
    static const std::set<std::string> known = {"dataset", "model", "train", "masking", "experiment"};
    for (const auto& name : doc_.section_order()) {
      if (!known.count(name)) throw ConfigFileError(doc_.source(), 0, "unknown section [" + name + "]");
      for (const auto& [key, entry] : doc_.sections().at(name))
        if (!used_.count(name + "." + key))
          throw ConfigFileError(doc_.source(), entry.line, "unknown field '" + name + "." + key + "'");
    }
  }

 private:
  const IniDocument& doc_;
  std::set<std::string> used_;
};

BudgetMode parse_budget_mode(const std::string& s) {
  if (s == "per_class") return BudgetMode::PerClass;
  if (s == "global") return BudgetMode::GlobalPool;
  throw ConfigError("unknown budget mode '" + s + "' (expected per_class|global)");
}

Regime parse_regime(const std::string& s) {
  if (s == "ssf") return Regime::SSF;
  if (s == "ft") return Regime::FT;
  throw ConfigError("unknown regime '" + s + "' (expected ssf|ft)");
}

}  // namespace

std::vector<std::uint64_t> parse_seed_list(const std::string& text) {
  std::vector<std::uint64_t> out;
  std::stringstream ss(text);
  for (std::string item; std::getline(ss, item, ',');) {
    const auto b = item.find_first_not_of(' ');
    const auto e = item.find_last_not_of(' ');
    if (b == std::string::npos) throw ConfigError("empty entry in seed list '" + text + "'");
    item = item.substr(b, e - b + 1);
    std::uint64_t v = 0;
    auto [p, ec] = std::from_chars(item.data(), item.data() + item.size(), v);
    if (ec != std::errc() || p != item.data() + item.size()) throw ConfigError("invalid seed '" + item + "'");
    out.push_back(v);
  }
  if (out.empty()) throw ConfigError("seed list is empty");
  return out;
}

std::string format_seed_list(const std::vector<std::uint64_t>& seeds) {
  std::string out;
  for (auto s : seeds) out += (out.empty() ? "" : ",") + std::to_string(s);
  return out;
}

RunConfig parse_run_config(const IniDocument& doc, bool require_experiment) {
  RunConfig c;
  Reader r(doc);

  if (const IniEntry* e = r.raw("dataset", "path")) c.dataset_path = e->value;
  r.integer("dataset", "n_classes", c.spec.n_classes);
  r.integer("dataset", "train_per_class", c.spec.train_per_class);
  r.integer("dataset", "test_per_class", c.spec.test_per_class);
  r.integer("dataset", "image_size", c.spec.image_size);
  r.integer("dataset", "patch_size", c.spec.patch_size);
  r.integer("dataset", "max_text_len", c.spec.max_text_len);
  r.real("dataset", "distractor_probability", c.spec.distractor_probability);
  r.unsigned64("dataset", "seed", c.spec.seed);

  ModelConfig& m = c.experiment.model;
  r.integer("model", "d_model", m.d_model);
  r.integer("model", "n_heads", m.n_heads);
  r.integer("model", "n_blocks", m.n_blocks);
  r.integer("model", "vocab_size", m.vocab_size);
  r.integer("model", "mlp_ratio", m.mlp_ratio);
  r.boolean("model", "ssf_enabled", m.ssf_enabled);
  r.integer("model", "attention_source_layer", m.attention_source_layer);

  TrainConfig& t = c.experiment.train;
  r.integer("train", "epochs_per_phase", t.epochs_per_phase);
  r.real("train", "lr_ssf", t.lr_ssf);
  r.real("train", "lr_backbone_ft", t.lr_backbone_ft);
  r.real("train", "lr_head_ft", t.lr_head_ft);
  r.real("train", "lr_bootstrap", t.lr_bootstrap);
  r.real("train", "weight_decay", t.weight_decay);
  r.real("train", "warmup_fraction", t.warmup_fraction);
  r.integer("train", "batch_size", t.batch_size);
  r.real("train", "replay_fraction", t.replay_fraction);
  r.real("train", "token_dropout", t.token_dropout);

  MaskingConfig& k = c.experiment.masking;
  r.choice("masking", "reference", k.reference, parse_reference);
  r.real("masking", "threshold_offset", k.threshold_offset);
  const IniEntry* fi = r.raw("masking", "fixed_image_threshold");
  const IniEntry* ft = r.raw("masking", "fixed_text_threshold");
  if ((fi == nullptr) != (ft == nullptr))
    r.fail("masking", fi ? "fixed_text_threshold" : "fixed_image_threshold", fi ? fi : ft,
           "fixed thresholds must be given for both modalities");
  if (fi) {
    if (doc.find("masking", "threshold_offset"))
      r.fail("masking", "threshold_offset", doc.find("masking", "threshold_offset"),
             "mutually exclusive with fixed thresholds");
    k.fixed_thresholds = FixedThresholds{r.parse_real("masking", "fixed_image_threshold", fi),
                                         r.parse_real("masking", "fixed_text_threshold", ft)};
  }
  r.choice("masking", "first_modality", k.first_modality, parse_first_modality);
  r.choice("masking", "cross_strategy", k.cross_strategy, parse_cross_strategy);
  r.boolean("masking", "keep_delimiters", k.keep_delimiters);
  r.boolean("masking", "entropy_prefers_focused", k.entropy_prefers_focused);
  if (const IniEntry* e = r.raw("masking", "seed")) k.seed = r.parse_u64("masking", "seed", e, e->value);

  ExperimentConfig& x = c.experiment;
  r.choice("experiment", "method", x.method, parse_exemplar_method);
  if (require_experiment) r.required("experiment", "method");
  r.boolean("experiment", "mda", x.mda);
  r.choice("experiment", "regime", x.regime, parse_regime);
  r.integer("experiment", "quota", x.quota);
  r.choice("experiment", "budget_mode", x.budget_mode, parse_budget_mode);
  r.integer("experiment", "n_phases", x.n_phases);
  r.boolean("experiment", "shuffle_classes", x.shuffle_classes);
  r.boolean("experiment", "wall_clock", c.wall_clock);
  const IniEntry* seeds = require_experiment ? &r.required("experiment", "seeds") : r.raw("experiment", "seeds");
  if (seeds) {
    try {
      c.seeds = parse_seed_list(seeds->value);
    } catch (const ConfigError& e) {
      r.fail("experiment", "seeds", seeds, e.what());
    }
  }
  r.finish();

  // Whole-config checks, reported against the section that owns them.
  auto check = [&](const char* section, auto&& fn) {
    try {
      fn();
    } catch (const ConfigError& e) {
      throw ConfigFileError(doc.source(), 0, std::string("[") + section + "] " + e.what());
    }
  };
  check("dataset", [&] { c.spec.validate(); });
  x.model.image_size = c.spec.image_size;
  x.model.patch_size = c.spec.patch_size;
  x.model.max_text_len = c.spec.max_text_len;
  check("model", [&] { x.model.validate(); });
  check("train", [&] { x.train.validate(); });
  check("experiment", [&] {
    ExperimentConfig probe = x;
    if (!probe.masking.seed) probe.masking.seed = 0;  // filled per run seed
    probe.validate();
  });
  return c;
}

RunConfig load_run_config(const std::string& path, bool require_experiment) {
  return parse_run_config(IniDocument::load(path), require_experiment);
}

IniDocument to_ini(const RunConfig& c) {
  IniDocument d;
  if (c.dataset_path) d.set("dataset", "path", *c.dataset_path);
  d.set("dataset", "n_classes", std::to_string(c.spec.n_classes));
  d.set("dataset", "train_per_class", std::to_string(c.spec.train_per_class));
  d.set("dataset", "test_per_class", std::to_string(c.spec.test_per_class));
  d.set("dataset", "image_size", std::to_string(c.spec.image_size));
  d.set("dataset", "patch_size", std::to_string(c.spec.patch_size));
  d.set("dataset", "max_text_len", std::to_string(c.spec.max_text_len));
  d.set("dataset", "distractor_probability", fmt(c.spec.distractor_probability));
  d.set("dataset", "seed", std::to_string(c.spec.seed));

  const ModelConfig& m = c.experiment.model;
  d.set("model", "d_model", std::to_string(m.d_model));
  d.set("model", "n_heads", std::to_string(m.n_heads));
  d.set("model", "n_blocks", std::to_string(m.n_blocks));
  d.set("model", "vocab_size", std::to_string(m.vocab_size));
  d.set("model", "mlp_ratio", std::to_string(m.mlp_ratio));
  d.set("model", "ssf_enabled", fmt(m.ssf_enabled));
  d.set("model", "attention_source_layer", std::to_string(m.attention_source_layer));

  const TrainConfig& t = c.experiment.train;
  d.set("train", "epochs_per_phase", std::to_string(t.epochs_per_phase));
  d.set("train", "lr_ssf", fmt(t.lr_ssf));
  d.set("train", "lr_backbone_ft", fmt(t.lr_backbone_ft));
  d.set("train", "lr_head_ft", fmt(t.lr_head_ft));
  d.set("train", "lr_bootstrap", fmt(t.lr_bootstrap));
  d.set("train", "weight_decay", fmt(t.weight_decay));
  d.set("train", "warmup_fraction", fmt(t.warmup_fraction));
  d.set("train", "batch_size", std::to_string(t.batch_size));
  d.set("train", "replay_fraction", fmt(t.replay_fraction));
  d.set("train", "token_dropout", fmt(t.token_dropout));

  const MaskingConfig& k = c.experiment.masking;
  d.set("masking", "reference", to_string(k.reference));
  if (k.fixed_thresholds) {
    d.set("masking", "fixed_image_threshold", fmt(k.fixed_thresholds->image));
    d.set("masking", "fixed_text_threshold", fmt(k.fixed_thresholds->text));
  } else {
    d.set("masking", "threshold_offset", fmt(k.threshold_offset));
  }
  d.set("masking", "first_modality", to_string(k.first_modality));
  d.set("masking", "cross_strategy", to_string(k.cross_strategy));
  d.set("masking", "keep_delimiters", fmt(k.keep_delimiters));
  d.set("masking", "entropy_prefers_focused", fmt(k.entropy_prefers_focused));
  if (k.seed) d.set("masking", "seed", std::to_string(*k.seed));

  const ExperimentConfig& x = c.experiment;
  d.set("experiment", "method", to_string(x.method));
  d.set("experiment", "mda", fmt(x.mda));
  d.set("experiment", "regime", x.regime == Regime::SSF ? "ssf" : "ft");
  d.set("experiment", "quota", std::to_string(x.quota));
  d.set("experiment", "budget_mode", x.budget_mode == BudgetMode::PerClass ? "per_class" : "global");
  d.set("experiment", "n_phases", std::to_string(x.n_phases));
  d.set("experiment", "shuffle_classes", fmt(x.shuffle_classes));
  d.set("experiment", "wall_clock", fmt(c.wall_clock));
  if (!c.seeds.empty()) d.set("experiment", "seeds", format_seed_list(c.seeds));
  return d;
}

Dataset resolve_dataset(const RunConfig& cfg) {
  if (cfg.dataset_path) {
    if (!std::filesystem::is_directory(*cfg.dataset_path))
      throw ConfigError("dataset.path '" + *cfg.dataset_path + "' is not a directory");
    return load_dataset(*cfg.dataset_path);
  }
  return generate(cfg.spec);
}

}  // namespace emask::cli
