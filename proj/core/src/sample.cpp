#include "emask/sample.hpp"

#include "emask/error.hpp"

namespace emask {

std::vector<std::uint8_t> extract_patch(std::span<const std::uint8_t> image, const PatchGeometry& g,
                                        int index) {
  if (index < 0 || index >= g.n_patches()) throw InputError("extract_patch: index out of range");
  const int pr = index / g.grid();
  const int pc = index % g.grid();
  std::vector<std::uint8_t> out;
  out.reserve(static_cast<std::size_t>(g.patch_bytes()));
  for (int y = 0; y < g.patch_size; ++y) {
    const std::size_t row = static_cast<std::size_t>(pr * g.patch_size + y);
    const std::size_t base = (row * static_cast<std::size_t>(g.image_size) +
                              static_cast<std::size_t>(pc * g.patch_size)) * 3;
    out.insert(out.end(), image.begin() + static_cast<std::ptrdiff_t>(base),
               image.begin() + static_cast<std::ptrdiff_t>(base + static_cast<std::size_t>(g.patch_size) * 3));
  }
  return out;
}

std::vector<std::uint8_t> downsample_patch(std::span<const std::uint8_t> patch, int patch_size) {
  const int half = patch_size / 2;
  std::vector<std::uint8_t> out(static_cast<std::size_t>(half * half * 3));
  auto at = [&](int y, int x, int c) {
    return static_cast<int>(patch[static_cast<std::size_t>((y * patch_size + x) * 3 + c)]);
  };
  for (int y = 0; y < half; ++y)
    for (int x = 0; x < half; ++x)
      for (int c = 0; c < 3; ++c) {
        const int s = at(2 * y, 2 * x, c) + at(2 * y, 2 * x + 1, c) + at(2 * y + 1, 2 * x, c) +
                      at(2 * y + 1, 2 * x + 1, c);
        out[static_cast<std::size_t>((y * half + x) * 3 + c)] = static_cast<std::uint8_t>((s + 2) / 4);
      }
  return out;
}

std::vector<std::uint8_t> upsample_patch(std::span<const std::uint8_t> half, int patch_size) {
  const int h = patch_size / 2;
  std::vector<std::uint8_t> out(static_cast<std::size_t>(patch_size * patch_size * 3));
  for (int y = 0; y < patch_size; ++y)
    for (int x = 0; x < patch_size; ++x)
      for (int c = 0; c < 3; ++c)
        out[static_cast<std::size_t>((y * patch_size + x) * 3 + c)] =
            half[static_cast<std::size_t>(((y / 2) * h + x / 2) * 3 + c)];
  return out;
}

double MaskedExemplar::preserved_ratio() const noexcept {
  const double total = static_cast<double>(source_image_tokens) + static_cast<double>(source_text_tokens);
  if (total == 0.0) return 0.0;
  return static_cast<double>(kept_full_image() + text.size()) / total;
}

std::size_t MaskedExemplar::kept_full_image() const noexcept {
  std::size_t n = 0;
  for (const auto& p : image) n += p.half_res ? 0 : 1;
  return n;
}

MaskedExemplar raw_exemplar(const MultimodalSample& s, const PatchGeometry& g) {
  MaskedExemplar e;
  e.label = s.label;
  e.dense = true;
  e.source_image_tokens = static_cast<std::uint16_t>(g.n_patches());
  e.source_text_tokens = static_cast<std::uint16_t>(s.caption.size());
  for (int k = 0; k < g.n_patches(); ++k)
    e.image.push_back({static_cast<std::uint16_t>(k), false, extract_patch(s.image, g, k)});
  for (std::size_t i = 0; i < s.caption.size(); ++i)
    e.text.push_back({static_cast<std::uint16_t>(i), s.caption[i]});
  return e;
}

}  // namespace emask
