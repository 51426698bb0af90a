#include "emask/augment.hpp"

#include "emask/error.hpp"

namespace emask {

namespace {
std::size_t uniform_index(std::size_t n, Rng& rng) {
  return std::uniform_int_distribution<std::size_t>(0, n - 1)(rng);
}
}  // namespace

AugmentedSample compose(const MemoryBuffer& buffer, std::uint32_t label, std::size_t base_id,
                        std::size_t partner_id, SwappedModality swapped) {
  const auto& pool = buffer.exemplars(label);
  if (base_id >= pool.size() || partner_id >= pool.size())
    throw ContractError("compose: exemplar index out of range for class " + std::to_string(label));
  const MaskedExemplar& a = pool[base_id];
  const MaskedExemplar& b = pool[partner_id];
  if (a.label != label || b.label != label) throw ContractError("compose: parent label mismatch");

  AugmentedSample out;
  out.label = label;
  out.base_id = base_id;
  out.partner_id = partner_id;
  out.swapped = swapped;
  const MaskedExemplar& image_src = swapped == SwappedModality::Image ? b : a;
  const MaskedExemplar& text_src = swapped == SwappedModality::Text ? b : a;
  out.composite.label = label;
  out.composite.dense = image_src.dense && text_src.dense;
  out.composite.image = image_src.image;
  out.composite.text = text_src.text;
  out.composite.source_image_tokens = image_src.source_image_tokens;
  out.composite.source_text_tokens = text_src.source_text_tokens;
  return out;
}

AugmentedSample mda_sample(std::uint32_t label, const MemoryBuffer& buffer, Rng& rng) {
  const auto& pool = buffer.exemplars(label);
  if (pool.empty()) throw ContractError("mda_sample: class " + std::to_string(label) + " has no exemplars");
  const std::size_t a = uniform_index(pool.size(), rng);
  const std::size_t b = uniform_index(pool.size(), rng);
  const bool swap_text = std::bernoulli_distribution(0.5)(rng);
  return compose(buffer, label, a, b, swap_text ? SwappedModality::Text : SwappedModality::Image);
}

std::vector<AugmentedSample> replay_batch(const MemoryBuffer& buffer, std::size_t batch_size, Rng& rng,
                                          bool mda) {
  std::vector<AugmentedSample> out;
  const auto classes = buffer.populated_classes();
  if (classes.empty()) return out;
  out.reserve(batch_size);
  for (std::size_t i = 0; i < batch_size; ++i) {
    const std::uint32_t label = classes[uniform_index(classes.size(), rng)];
    if (mda) {
      out.push_back(mda_sample(label, buffer, rng));
    } else {
      const std::size_t a = uniform_index(buffer.exemplars(label).size(), rng);
      out.push_back(compose(buffer, label, a, a, SwappedModality::None));
    }
  }
  return out;
}

}  // namespace emask
