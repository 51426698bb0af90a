#include "emask/masking.hpp"

#include <algorithm>
#include <cmath>
#include <numeric>

#include "emask/error.hpp"
#include "emask/rng.hpp"

namespace emask {

std::string to_string(Reference r) {
  switch (r) {
    case Reference::Attention: return "attention";
    case Reference::Entropy: return "entropy";
    case Reference::Cam: return "cam";
    case Reference::GradCam: return "gradcam";
    case Reference::Random: return "random";
    case Reference::RandomMatched: return "random_matched";
  }
  return "?";
}

std::string to_string(FirstModality m) { return m == FirstModality::Image ? "image" : "text"; }

std::string to_string(CrossStrategy s) {
  return s == CrossStrategy::Complementary ? "complementary" : "relevant";
}

Reference parse_reference(const std::string& s) {
  for (Reference r : {Reference::Attention, Reference::Entropy, Reference::Cam, Reference::GradCam,
                      Reference::Random, Reference::RandomMatched})
    if (s == to_string(r)) return r;
  throw ConfigError("unknown masking reference '" + s + "'");
}

FirstModality parse_first_modality(const std::string& s) {
  if (s == "image") return FirstModality::Image;
  if (s == "text") return FirstModality::Text;
  throw ConfigError("unknown first modality '" + s + "' (expected image|text)");
}

CrossStrategy parse_cross_strategy(const std::string& s) {
  if (s == "complementary") return CrossStrategy::Complementary;
  if (s == "relevant") return CrossStrategy::Relevant;
  throw ConfigError("unknown cross strategy '" + s + "' (expected complementary|relevant)");
}

void MaskingConfig::validate() const {
  if (fixed_thresholds && threshold_offset != 0.0)
    throw ConfigError("masking: fixed_thresholds and threshold_offset are mutually exclusive");
  if ((reference == Reference::Random || reference == Reference::RandomMatched) && !seed)
    throw ConfigError("masking: random reference requires a seed");
  if (!std::isfinite(threshold_offset)) throw ConfigError("masking: threshold_offset must be finite");
}

std::size_t MaskPair::kept_image() const noexcept {
  return static_cast<std::size_t>(std::count(image.begin(), image.end(), std::uint8_t{1}));
}

std::size_t MaskPair::kept_text() const noexcept {
  return static_cast<std::size_t>(std::count(text.begin(), text.end(), std::uint8_t{1}));
}

double MaskPair::preserved_ratio() const noexcept {
  const std::size_t total = image.size() + text.size();
  return total == 0 ? 0.0 : static_cast<double>(kept_image() + kept_text()) / static_cast<double>(total);
}

double image_threshold(std::span<const double> scores) {
  if (scores.empty()) throw ContractError("threshold of an empty score vector");
  if (std::all_of(scores.begin(), scores.end(), [&](double v) { return v == scores[0]; })) return scores[0];
  double s = 0.0;
  for (double v : scores) s += v;
  return s / static_cast<double>(scores.size());
}

double offset_threshold(std::span<const double> scores, double k) {
  const double mean = image_threshold(scores);
  if (k == 0.0) return mean;
  double var = 0.0;
  for (double v : scores) var += (v - mean) * (v - mean);
  var /= static_cast<double>(scores.size());
  return mean + k * std::sqrt(var);
}

std::vector<std::uint8_t> image_mask(std::span<const double> scores, double threshold) {
  std::vector<std::uint8_t> m(scores.size());
  for (std::size_t i = 0; i < scores.size(); ++i) m[i] = scores[i] >= threshold ? 1 : 0;
  return m;
}

namespace {

AggregatedAttention aggregate_rows(const nk::Tensor& cross, std::span<const std::uint8_t> first_mask,
                                   std::uint8_t select) {
  if (cross.rows() != first_mask.size())
    throw DimensionError("aggregate: cross-attention has " + std::to_string(cross.rows()) +
                         " rows but mask has " + std::to_string(first_mask.size()) + " entries");
  AggregatedAttention out;
  out.values.assign(cross.cols(), 0.0);
  std::size_t n = 0;
  for (std::size_t j = 0; j < first_mask.size(); ++j) {
    if (first_mask[j] != select) continue;
    ++n;
    for (std::size_t i = 0; i < cross.cols(); ++i) out.values[i] += cross(j, i);
  }
  if (n == 0) {
    out.values.clear();
    out.empty_selection = true;
    return out;
  }
  for (double& v : out.values) v /= static_cast<double>(n);
  return out;
}

std::vector<std::uint8_t> delimiter_flags(std::span<const std::uint16_t> ids, bool enabled) {
  std::vector<std::uint8_t> f(ids.size(), 0);
  if (enabled)
    for (std::size_t i = 0; i < ids.size(); ++i) f[i] = token::is_delimiter(ids[i]) ? 1 : 0;
  return f;
}

void force(std::vector<std::uint8_t>& mask, std::span<const std::uint8_t> forced) {
  for (std::size_t i = 0; i < mask.size() && i < forced.size(); ++i)
    if (forced[i]) mask[i] = 1;
}

// The top-scoring image token survives every threshold choice.
void keep_argmax(std::vector<std::uint8_t>& mask, std::span<const double> scores) {
  if (scores.empty()) return;
  const auto best = static_cast<std::size_t>(std::max_element(scores.begin(), scores.end()) - scores.begin());
  mask[best] = 1;
}

double pick_threshold(std::span<const double> scores, const MaskingConfig& cfg, bool image) {
  if (cfg.fixed_thresholds) return image ? cfg.fixed_thresholds->image : cfg.fixed_thresholds->text;
  return offset_threshold(scores, cfg.threshold_offset);
}

}  // namespace

AggregatedAttention aggregate_discarded_attention(const nk::Tensor& cross,
                                                  std::span<const std::uint8_t> first_mask) {
  return aggregate_rows(cross, first_mask, 0);
}

AggregatedAttention aggregate_preserved_attention(const nk::Tensor& cross,
                                                  std::span<const std::uint8_t> first_mask) {
  return aggregate_rows(cross, first_mask, 1);
}

double text_threshold(const AggregatedAttention& aggregated) {
  if (aggregated.empty_selection)
    throw ContractError("text_threshold: no discarded tokens to aggregate over");
  return image_threshold(aggregated.values);
}

std::vector<std::uint8_t> text_mask(const AggregatedAttention& aggregated, double threshold,
                                    std::span<const std::uint8_t> forced) {
  if (aggregated.empty_selection) return std::vector<std::uint8_t>(forced.size(), 1);
  if (aggregated.values.size() != forced.size())
    throw DimensionError("text_mask: score length does not match token count");
  auto m = image_mask(aggregated.values, threshold);
  force(m, forced);
  return m;
}

MaskPair attention_masks(const AttentionBundle& bundle, std::span<const std::uint16_t> text_ids,
                         const MaskingConfig& cfg) {
  if (bundle.n_image == 0) throw ContractError("attention_masks: sample has no image tokens");
  if (text_ids.size() != bundle.n_text)
    throw DimensionError("attention_masks: " + std::to_string(text_ids.size()) + " text ids for " +
                         std::to_string(bundle.n_text) + " text tokens");
  const auto delims = delimiter_flags(text_ids, cfg.keep_delimiters);
  const bool image_first = cfg.first_modality == FirstModality::Image;

  std::vector<double> first_scores = image_first ? bundle.cls_to_image() : bundle.cls_to_text();
  const nk::Tensor cross = image_first ? bundle.image_to_text() : bundle.text_to_image();
  const std::size_t n_second = image_first ? bundle.n_text : bundle.n_image;

  auto first_mask = [&](double tau) {
    std::vector<std::uint8_t> m;
    if (!first_scores.empty()) m = image_mask(first_scores, tau);
    if (image_first) {
      if (std::none_of(m.begin(), m.end(), [](auto v) { return v != 0; })) keep_argmax(m, first_scores);
    } else {
      force(m, delims);
    }
    return m;
  };

  MaskPair out;
  double first_tau = 0.0;
  if (!first_scores.empty()) first_tau = pick_threshold(first_scores, cfg, image_first);
  const std::vector<std::uint8_t> first = first_mask(first_tau);
  // With an offset, the second modality is scored against the mean partition
  // of the first one, so every offset thresholds the same score vector.
  const bool anchored = !cfg.fixed_thresholds && cfg.threshold_offset != 0.0 && !first_scores.empty();
  const std::vector<std::uint8_t> anchor = anchored ? first_mask(image_threshold(first_scores)) : first;

  std::vector<std::uint8_t> second;
  std::vector<double> second_scores;
  double second_tau = 0.0;
  if (n_second > 0) {
    const auto aggregate = [&](std::span<const std::uint8_t> m) {
      return cfg.cross_strategy == CrossStrategy::Complementary ? aggregate_discarded_attention(cross, m)
                                                                : aggregate_preserved_attention(cross, m);
    };
    AggregatedAttention agg = aggregate(first);
    if (anchored && !agg.empty_selection) agg = aggregate(anchor);
    if (agg.empty_selection) {
      second.assign(n_second, 1);
      out.fallback = true;
    } else {
      second_tau = pick_threshold(agg.values, cfg, !image_first);
      second = image_mask(agg.values, second_tau);
      second_scores = std::move(agg.values);
    }
    if (image_first) {
      force(second, delims);
    } else if (std::none_of(second.begin(), second.end(), [](auto v) { return v != 0; })) {
      keep_argmax(second, second_scores);
    }
  }

  if (image_first) {
    out.image = std::move(first);
    out.image_threshold = first_tau;
    out.image_scores = std::move(first_scores);
    out.text = std::move(second);
    out.text_threshold = second_tau;
    out.text_scores = std::move(second_scores);
  } else {
    out.text = std::move(first);
    out.text_threshold = first_tau;
    out.text_scores = std::move(first_scores);
    out.image = std::move(second);
    out.image_threshold = second_tau;
    out.image_scores = std::move(second_scores);
  }
  return out;
}

ReferenceScores reference_scores(const MultimodalSample& sample, Model& model, const MaskingConfig& cfg,
                                 std::size_t class_row) {
  const TokenSequence seq = model.embed(sample);
  const std::size_t nt = seq.n_text();
  const std::size_t ni = seq.n_image();
  ReferenceScores out;
  auto split = [&](const std::vector<double>& per_token) {
    out.text.assign(per_token.begin() + 1, per_token.begin() + 1 + static_cast<std::ptrdiff_t>(nt));
    out.image.assign(per_token.begin() + 1 + static_cast<std::ptrdiff_t>(nt), per_token.end());
  };

  switch (cfg.reference) {
    case Reference::Attention:
    case Reference::RandomMatched: {
      const ForwardOutput f = model.forward(seq);
      out.image = f.attention.cls_to_image();
      out.text = f.attention.cls_to_text();
      break;
    }
    case Reference::Entropy: {
      const ForwardOutput f = model.forward(seq);
      const nk::Tensor& a = f.attention.matrix;
      std::vector<double> score(a.rows());
      for (std::size_t r = 0; r < a.rows(); ++r) {
        double h = 0.0;
        for (double p : a.row_span(r))
          if (p > 0.0) h -= p * std::log(p);
        score[r] = cfg.entropy_prefers_focused ? -h : h;
      }
      split(score);
      break;
    }
    case Reference::Cam: {
      if (class_row >= model.n_classes()) throw ContractError("cam: class row out of range");
      nk::Graph g;
      const ForwardNodes nodes = model.build(g, seq);
      const nk::Tensor& f = g.value(nodes.final_tokens);
      const auto w = model.head().weight.value.row_span(class_row);
      std::vector<double> score(f.rows());
      for (std::size_t r = 0; r < f.rows(); ++r) {
        double s = 0.0;
        for (std::size_t d = 0; d < f.cols(); ++d) s += w[d] * f(r, d);
        score[r] = s;
      }
      split(score);
      break;
    }
    case Reference::GradCam: {
      if (class_row >= model.n_classes()) throw ContractError("gradcam: class row out of range");
      nk::Graph g(true);
      const ForwardNodes nodes = model.build(g, seq);
      const nk::Var target = g.sum(g.slice_cols(nodes.logits, class_row, 1));
      g.backward(target, false);
      const nk::Tensor& f = g.value(nodes.last_block_input);
      const nk::Tensor& df = g.grad(nodes.last_block_input);
      std::vector<double> score(f.rows(), 0.0);
      for (std::size_t r = 0; r < f.rows(); ++r) {
        double s = 0.0;
        if (!df.empty())
          for (std::size_t d = 0; d < f.cols(); ++d) s += df(r, d) * f(r, d);
        score[r] = std::max(0.0, s);
      }
      split(score);
      break;
    }
    case Reference::Random: {
      if (!cfg.seed) throw ConfigError("masking: random reference requires a seed");
      Rng rng = make_rng(*cfg.seed, {sample.id, sample.label, 0x72616e64ULL});
      std::uniform_real_distribution<double> u(0.0, 1.0);
      out.image.resize(ni);
      out.text.resize(nt);
      for (double& v : out.image) v = u(rng);
      for (double& v : out.text) v = u(rng);
      break;
    }
  }
  return out;
}

MaskPair score_masks(const ReferenceScores& scores, std::span<const std::uint16_t> text_ids,
                     const MaskingConfig& cfg) {
  if (scores.image.empty()) throw ContractError("score_masks: no image scores");
  if (text_ids.size() != scores.text.size()) throw DimensionError("score_masks: text length mismatch");
  MaskPair out;
  out.image_scores = scores.image;
  out.text_scores = scores.text;
  out.image_threshold = pick_threshold(scores.image, cfg, true);
  out.image = image_mask(scores.image, out.image_threshold);
  if (std::none_of(out.image.begin(), out.image.end(), [](auto v) { return v != 0; }))
    keep_argmax(out.image, scores.image);
  if (!scores.text.empty()) {
    out.text_threshold = pick_threshold(scores.text, cfg, false);
    out.text = image_mask(scores.text, out.text_threshold);
    force(out.text, delimiter_flags(text_ids, cfg.keep_delimiters));
  }
  return out;
}

MaskedExemplar apply_masks(const MultimodalSample& sample, const MaskPair& masks, const PatchGeometry& g) {
  if (masks.image.size() != static_cast<std::size_t>(g.n_patches()))
    throw DimensionError("apply_masks: image mask has " + std::to_string(masks.image.size()) +
                         " entries for " + std::to_string(g.n_patches()) + " patches");
  if (masks.text.size() != sample.caption.size())
    throw DimensionError("apply_masks: text mask has " + std::to_string(masks.text.size()) +
                         " entries for " + std::to_string(sample.caption.size()) + " tokens");
  if (masks.kept_image() == 0) throw ContractError("apply_masks: image mask keeps no token");

  MaskedExemplar e;
  e.label = sample.label;
  e.source_image_tokens = static_cast<std::uint16_t>(g.n_patches());
  e.source_text_tokens = static_cast<std::uint16_t>(sample.caption.size());
  for (int k = 0; k < g.n_patches(); ++k)
    if (masks.image[static_cast<std::size_t>(k)])
      e.image.push_back({static_cast<std::uint16_t>(k), false, extract_patch(sample.image, g, k)});
  for (std::size_t i = 0; i < sample.caption.size(); ++i)
    if (masks.text[i]) e.text.push_back({static_cast<std::uint16_t>(i), sample.caption[i]});
  return e;
}

namespace {

MaskPair random_matched(const MultimodalSample& sample, const MaskPair& reference, const MaskingConfig& cfg) {
  Rng rng = make_rng(*cfg.seed, {sample.id, sample.label, 0x6d617463ULL});
  MaskPair out;
  out.image.assign(reference.image.size(), 0);
  std::vector<std::size_t> order(reference.image.size());
  std::iota(order.begin(), order.end(), 0);
  std::shuffle(order.begin(), order.end(), rng);
  for (std::size_t i = 0; i < reference.kept_image(); ++i) out.image[order[i]] = 1;

  const auto delims = delimiter_flags(sample.caption, cfg.keep_delimiters);
  out.text = delims;
  std::size_t budget = reference.kept_text();
  std::vector<std::size_t> free;
  for (std::size_t i = 0; i < delims.size(); ++i) {
    if (delims[i]) budget = budget > 0 ? budget - 1 : 0;
    else free.push_back(i);
  }
  std::shuffle(free.begin(), free.end(), rng);
  for (std::size_t i = 0; i < budget && i < free.size(); ++i) out.text[free[i]] = 1;
  return out;
}

}  // namespace

MaskedSample mask_exemplar(const MultimodalSample& sample, Model& model, const MaskingConfig& cfg,
                           std::size_t class_row) {
  cfg.validate();
  MaskedSample out;
  if (cfg.reference == Reference::Attention || cfg.reference == Reference::RandomMatched) {
    const ForwardOutput f = model.forward(model.embed(sample));
    out.masks = attention_masks(f.attention, sample.caption, cfg);
    if (cfg.reference == Reference::RandomMatched) out.masks = random_matched(sample, out.masks, cfg);
  } else {
    out.masks = score_masks(reference_scores(sample, model, cfg, class_row), sample.caption, cfg);
  }
  out.exemplar = apply_masks(sample, out.masks, model.config().geometry());
  return out;
}

MaskedExemplar downsample_exemplar(const MultimodalSample& sample, const MaskPair& masks,
                                   const PatchGeometry& g) {
  if (masks.image.size() != static_cast<std::size_t>(g.n_patches()))
    throw DimensionError("downsample_exemplar: image mask length mismatch");
  MaskedExemplar e;
  e.label = sample.label;
  e.source_image_tokens = static_cast<std::uint16_t>(g.n_patches());
  e.source_text_tokens = static_cast<std::uint16_t>(sample.caption.size());
  for (int k = 0; k < g.n_patches(); ++k) {
    auto patch = extract_patch(sample.image, g, k);
    if (masks.image[static_cast<std::size_t>(k)])
      e.image.push_back({static_cast<std::uint16_t>(k), false, std::move(patch)});
    else
      e.image.push_back({static_cast<std::uint16_t>(k), true, downsample_patch(patch, g.patch_size)});
  }
  for (std::size_t i = 0; i < sample.caption.size(); ++i)
    e.text.push_back({static_cast<std::uint16_t>(i), sample.caption[i]});
  return e;
}

}  // namespace emask
