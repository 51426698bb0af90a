#pragma once

// Sample and exemplar records shared by the generator, model, masking and buffer.

#include <cstdint>
#include <span>
#include <vector>

namespace emask {

namespace token {
inline constexpr std::uint16_t kPad = 0;
inline constexpr std::uint16_t kCls = 1;
inline constexpr std::uint16_t kSep = 2;
inline constexpr std::uint16_t kUnk = 3;
inline constexpr std::uint16_t kFirstWord = 4;

constexpr bool is_delimiter(std::uint16_t id) noexcept { return id == kCls || id == kSep; }
}  // namespace token

/// Square RGB image cut into a grid of square patches, row-major patch order.
struct PatchGeometry {
  int image_size = 64;
  int patch_size = 16;

  int grid() const noexcept { return image_size / patch_size; }
  int n_patches() const noexcept { return grid() * grid(); }
  int patch_bytes() const noexcept { return patch_size * patch_size * 3; }
  int half_patch_bytes() const noexcept { return patch_bytes() / 4; }

  friend bool operator==(const PatchGeometry&, const PatchGeometry&) = default;
};

struct MultimodalSample {
  std::uint32_t label = 0;
  std::uint32_t id = 0;
  std::vector<std::uint8_t> image;        // HWC RGB, image_size^2 * 3 bytes
  std::vector<std::uint16_t> caption;     // word ids followed by [SEP]
  std::vector<std::uint8_t> fg_patch_mask;  // one entry per patch, 1 = overlaps the class shape

  friend bool operator==(const MultimodalSample&, const MultimodalSample&) = default;
};

/// Pixels of patch `index` in (y, x, channel) order.
std::vector<std::uint8_t> extract_patch(std::span<const std::uint8_t> image, const PatchGeometry& g,
                                        int index);
/// 2x2 box-filter downsample of a full patch (patch_bytes -> patch_bytes / 4).
std::vector<std::uint8_t> downsample_patch(std::span<const std::uint8_t> patch, int patch_size);
/// Nearest-neighbour upsample of a half-resolution patch back to full size.
std::vector<std::uint8_t> upsample_patch(std::span<const std::uint8_t> half, int patch_size);

struct StoredPatch {
  std::uint16_t position = 0;
  bool half_res = false;
  std::vector<std::uint8_t> pixels;

  friend bool operator==(const StoredPatch&, const StoredPatch&) = default;
};

struct StoredToken {
  std::uint16_t position = 0;
  std::uint16_t id = 0;

  friend bool operator==(const StoredToken&, const StoredToken&) = default;
};

/// Preserved tokens of one exemplar with their original positions.
/// Discarded tokens are absent. `dense` exemplars keep every token and are
/// stored without position indices.
struct MaskedExemplar {
  std::uint32_t label = 0;
  bool dense = false;
  std::vector<StoredPatch> image;  // sorted by position
  std::vector<StoredToken> text;   // sorted by position
  std::uint16_t source_image_tokens = 0;
  std::uint16_t source_text_tokens = 0;

  /// Full-resolution image tokens plus text tokens over the source token count.
  double preserved_ratio() const noexcept;
  std::size_t kept_full_image() const noexcept;

  friend bool operator==(const MaskedExemplar&, const MaskedExemplar&) = default;
};

/// Exemplar keeping every token of `s` in the dense (index-free) layout.
MaskedExemplar raw_exemplar(const MultimodalSample& s, const PatchGeometry& g);

}  // namespace emask
