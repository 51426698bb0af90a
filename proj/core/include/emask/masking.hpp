#pragma once

// Attention-driven exemplar masking.
//
// Image tokens are kept when the CLS attention they receive is at least the
// mean over all image tokens. Text tokens are then scored by the attention
// the discarded image tokens pay to them, and kept when that score is at
// least its own mean. The result is stored sparsely as a MaskedExemplar.

#include <cstdint>
#include <optional>
#include <span>
#include <string>
#include <vector>

#include "emask/model.hpp"
#include "emask/sample.hpp"

namespace emask {

enum class Reference : std::uint8_t { Attention, Entropy, Cam, GradCam, Random, RandomMatched };
enum class FirstModality : std::uint8_t { Image, Text };
enum class CrossStrategy : std::uint8_t { Complementary, Relevant };

std::string to_string(Reference r);
std::string to_string(FirstModality m);
std::string to_string(CrossStrategy s);
Reference parse_reference(const std::string& s);
FirstModality parse_first_modality(const std::string& s);
CrossStrategy parse_cross_strategy(const std::string& s);

struct FixedThresholds {
  double image = 0.0;
  double text = 0.0;
};

struct MaskingConfig {
  Reference reference = Reference::Attention;
  /// Threshold = mean + offset * stddev of the score vector being masked.
  double threshold_offset = 0.0;
  std::optional<FixedThresholds> fixed_thresholds;
  FirstModality first_modality = FirstModality::Image;
  CrossStrategy cross_strategy = CrossStrategy::Complementary;
  bool keep_delimiters = true;
  /// Required by the random references.
  std::optional<std::uint64_t> seed;
  /// Entropy reference: keep low-entropy (focused) tokens when true.
  bool entropy_prefers_focused = true;

  void validate() const;
};

struct MaskPair {
  std::vector<std::uint8_t> image;
  std::vector<std::uint8_t> text;
  double image_threshold = 0.0;
  double text_threshold = 0.0;
  std::vector<double> image_scores;
  std::vector<double> text_scores;
  /// The first-masked modality kept everything, so the second one fell back to all-ones.
  bool fallback = false;

  std::size_t kept_image() const noexcept;
  std::size_t kept_text() const noexcept;
  double preserved_ratio() const noexcept;
};

/// Cross-attention aggregated over a subset of first-modality tokens.
/// `empty_selection` is the sentinel for "no token in the subset".
struct AggregatedAttention {
  std::vector<double> values;
  bool empty_selection = false;
};

/// Arithmetic mean; exact when every entry is equal.
double image_threshold(std::span<const double> scores);
/// mean + k * population stddev.
double offset_threshold(std::span<const double> scores, double k);
/// m(i) = 1 iff scores(i) >= threshold.
std::vector<std::uint8_t> image_mask(std::span<const double> scores, double threshold);

/// Mean over discarded (mask == 0) rows of `cross` (rows = first modality).
AggregatedAttention aggregate_discarded_attention(const nk::Tensor& cross,
                                                  std::span<const std::uint8_t> first_mask);
/// Mean over preserved (mask == 1) rows of `cross`.
AggregatedAttention aggregate_preserved_attention(const nk::Tensor& cross,
                                                  std::span<const std::uint8_t> first_mask);
double text_threshold(const AggregatedAttention& aggregated);
/// Threshold comparison with forced delimiters; the sentinel maps to all-ones.
std::vector<std::uint8_t> text_mask(const AggregatedAttention& aggregated, double threshold,
                                    std::span<const std::uint8_t> forced);

/// Masks from an attention bundle only (reference = attention).
/// `text_ids` marks delimiter positions when keep_delimiters is set.
MaskPair attention_masks(const AttentionBundle& bundle, std::span<const std::uint16_t> text_ids,
                         const MaskingConfig& cfg);

struct ReferenceScores {
  std::vector<double> image;
  std::vector<double> text;
};

/// Per-token scores for one of the non-attention references (and the
/// attention reference's first-stage CLS scores). `class_row` is the
/// classifier row of the sample's class.
ReferenceScores reference_scores(const MultimodalSample& sample, Model& model, const MaskingConfig& cfg,
                                 std::size_t class_row);

/// Masks from independent per-modality scores; each modality thresholded at
/// its own mean (+ offset) or the fixed thresholds.
MaskPair score_masks(const ReferenceScores& scores, std::span<const std::uint16_t> text_ids,
                     const MaskingConfig& cfg);

MaskedExemplar apply_masks(const MultimodalSample& sample, const MaskPair& masks, const PatchGeometry& g);

struct MaskedSample {
  MaskedExemplar exemplar;
  MaskPair masks;
};

MaskedSample mask_exemplar(const MultimodalSample& sample, Model& model, const MaskingConfig& cfg,
                           std::size_t class_row);

/// CIM-style compression: attention-preserved patches at full resolution,
/// the rest 2x downsampled per side; all text kept.
MaskedExemplar downsample_exemplar(const MultimodalSample& sample, const MaskPair& masks,
                                   const PatchGeometry& g);

}  // namespace emask
