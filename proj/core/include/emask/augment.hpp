#pragma once

// Within-class modality interchange over stored exemplars.

#include <cstdint>
#include <vector>

#include "emask/buffer.hpp"
#include "emask/rng.hpp"

namespace emask {

enum class SwappedModality : std::uint8_t { None, Text, Image };

struct AugmentedSample {
  /// Image tokens and text tokens of the composite, label shared by both parents.
  MaskedExemplar composite;
  std::uint32_t label = 0;
  std::size_t base_id = 0;     // exemplar A (index within its class)
  std::size_t partner_id = 0;  // exemplar B
  /// Modality taken from B; the other one comes from A.
  SwappedModality swapped = SwappedModality::None;
};

/// Composite of (A, B, modality) from class `label`'s exemplars.
AugmentedSample compose(const MemoryBuffer& buffer, std::uint32_t label, std::size_t base_id,
                        std::size_t partner_id, SwappedModality swapped);

/// A uniform, B uniform (possibly A), then a fair coin picks which modality comes from B.
AugmentedSample mda_sample(std::uint32_t label, const MemoryBuffer& buffer, Rng& rng);

/// Classes drawn uniformly over populated classes; with `mda` false each draw
/// is a stored exemplar verbatim. Empty buffer gives an empty batch.
std::vector<AugmentedSample> replay_batch(const MemoryBuffer& buffer, std::size_t batch_size, Rng& rng,
                                          bool mda = true);

}  // namespace emask
