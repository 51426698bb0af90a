#include "emask/datagen.hpp"

#include <algorithm>
#include <array>
#include <cmath>
#include <sstream>
#include <unordered_set>

#include "emask/error.hpp"
#include "emask/rng.hpp"

namespace emask {

namespace {

struct Rgb {
  int r, g, b;
};

const std::array<Rgb, 4> kClassColors = {{{220, 35, 35}, {35, 190, 60}, {40, 70, 225}, {235, 215, 30}}};

struct Background {
  Rgb base;
  int noise;
  int pattern;  // 0 speckle, 1 horizontal waves, 2 brick grid, 3 blades
  std::vector<std::string> words;
};

const std::vector<Background>& backgrounds() {
  static const std::vector<Background> b = {
      {{86, 104, 74}, 18, 3, {"grass", "lawn", "meadow"}},
      {{176, 160, 126}, 14, 0, {"sand", "beach", "desert"}},
      {{78, 96, 118}, 10, 1, {"water", "lake", "sea"}},
      {{214, 214, 220}, 8, 0, {"snow", "ice", "frost"}},
      {{132, 96, 86}, 10, 2, {"bricks", "wall", "pavement"}},
  };
  return b;
}

struct Distractor {
  Rgb color;
  int kind;  // 0 blob, 1 stick, 2 ellipse, 3 box
  std::string word;
};

const std::vector<Distractor>& distractors() {
  static const std::vector<Distractor> d = {
      {{118, 118, 118}, 0, "rock"},
      {{112, 82, 52}, 1, "stick"},
      {{188, 188, 196}, 2, "cloud"},
      {{96, 72, 48}, 3, "crate"},
  };
  return d;
}

const std::vector<std::string> kShapes = {"circle", "square", "triangle", "cross", "ring"};
const std::vector<std::string> kColors = {"red", "green", "blue", "yellow"};
const std::vector<std::string> kSynonymWords = {"a",     "the",   "there", "is",     "photo", "of",   "on",
                                                "over",  "atop",  "near",  "beside", "by",    "next", "to",
                                                "with",  "small", "some",  "an",     "image", "shows"};

bool inside_shape(int shape, double dx, double dy, double r) {
  const double d = std::sqrt(dx * dx + dy * dy);
  switch (shape) {
    case 0:
      return d <= r;
    case 1:
      return std::abs(dx) <= 0.85 * r && std::abs(dy) <= 0.85 * r;
    case 2: {
      // upward triangle: apex at -r, base at +0.8r
      if (dy < -r || dy > 0.8 * r) return false;
      const double half_width = (dy + r) / 1.8;
      return std::abs(dx) <= half_width;
    }
    case 3:
      return (std::abs(dx) <= r / 3.0 && std::abs(dy) <= r) || (std::abs(dy) <= r / 3.0 && std::abs(dx) <= r);
    case 4:
      return d <= r && d >= 0.55 * r;
    default:
      return false;
  }
}

bool inside_distractor(int kind, double dx, double dy, double r) {
  switch (kind) {
    case 0:
      return dx * dx + dy * dy <= r * r;
    case 1:
      return std::abs(dx - dy) <= 1.5 && std::abs(dx + dy) <= 2.0 * r;
    case 2:
      return (dx * dx) / (1.8 * r * 1.8 * r) + (dy * dy) / (r * r * 0.6) <= 1.0;
    case 3:
      return std::abs(dx) <= r && std::abs(dy) <= 0.7 * r;
    default:
      return false;
  }
}

std::uint8_t clamp8(int v) { return static_cast<std::uint8_t>(std::clamp(v, 0, 255)); }

}  // namespace

void SyntheticSpec::validate() const {
  const int max_classes = static_cast<int>(kShapes.size() * kColors.size());
  if (n_classes < 1 || n_classes > max_classes)
    throw ConfigError("n_classes must be in [1, " + std::to_string(max_classes) + "]");
  if (train_per_class < 1) throw ConfigError("train_per_class must be >= 1");
  if (test_per_class < 0) throw ConfigError("test_per_class must be >= 0");
  if (patch_size < 2 || patch_size % 2 != 0) throw ConfigError("patch_size must be even and >= 2");
  if (image_size < 32 || image_size % patch_size != 0)
    throw ConfigError("image_size must be >= 32 and a multiple of patch_size");
  if (max_text_len < 16) throw ConfigError("max_text_len must be >= 16");
  if (!(distractor_probability >= 0.0 && distractor_probability <= 1.0))
    throw ConfigError("distractor_probability must be in [0, 1]");
}

Vocabulary::Vocabulary() {
  words_ = {"[PAD]", "[CLS]", "[SEP]", "[UNK]"};
  auto add = [&](const std::string& w) {
    if (std::find(words_.begin(), words_.end(), w) == words_.end()) words_.push_back(w);
  };
  for (const auto& w : kColors) add(w);
  for (const auto& w : kShapes) add(w);
  for (const auto& b : backgrounds())
    for (const auto& w : b.words) add(w);
  for (const auto& d : distractors()) add(d.word);
  for (const auto& w : kSynonymWords) add(w);
}

Vocabulary::Vocabulary(std::vector<std::string> words) : words_(std::move(words)) {
  if (words_.size() < token::kFirstWord) throw InputError("vocabulary is missing the special tokens");
  if (words_.size() > 0xFFFF) throw InputError("vocabulary too large");
}

const std::string& Vocabulary::word(std::uint16_t id) const {
  if (id >= words_.size()) throw InputError("token id " + std::to_string(id) + " outside vocabulary");
  return words_[id];
}

std::uint16_t Vocabulary::id(const std::string& word) const {
  auto it = std::find(words_.begin(), words_.end(), word);
  if (it == words_.end()) return token::kUnk;
  return static_cast<std::uint16_t>(it - words_.begin());
}

std::vector<std::uint16_t> Vocabulary::tokenize(const std::string& text) const {
  std::istringstream in(text);
  std::vector<std::uint16_t> out;
  for (std::string w; in >> w;) out.push_back(id(w));
  return out;
}

std::string Vocabulary::detokenize(const std::vector<std::uint16_t>& ids) const {
  std::string out;
  for (auto t : ids) {
    if (!out.empty()) out += ' ';
    out += t < words_.size() ? words_[t] : std::string("[?]");
  }
  return out;
}

const std::vector<std::string>& shape_names() { return kShapes; }
const std::vector<std::string>& color_names() { return kColors; }

const std::vector<std::string>& background_names() {
  static const std::vector<std::string> names = [] {
    std::vector<std::string> n;
    for (const auto& b : backgrounds()) n.push_back(b.words.front());
    return n;
  }();
  return names;
}

const std::vector<std::string>& distractor_names() {
  static const std::vector<std::string> names = [] {
    std::vector<std::string> n;
    for (const auto& d : distractors()) n.push_back(d.word);
    return n;
  }();
  return names;
}

std::pair<std::string, std::string> class_words(std::uint32_t label) {
  const std::size_t n = kColors.size();
  if (label >= kShapes.size() * n) throw InputError("label " + std::to_string(label) + " has no class words");
  return {kColors[label % n], kShapes[label / n]};
}

MultimodalSample render_sample(const SyntheticSpec& spec, const Vocabulary& vocab, std::uint32_t label,
                               std::uint32_t index, int split) {
  Rng rng = make_rng(spec.seed, {0xDA7A, static_cast<std::uint64_t>(split), label, index});
  auto uni = [&](double lo, double hi) { return std::uniform_real_distribution<double>(lo, hi)(rng); };
  auto pick = [&](std::size_t n) { return std::uniform_int_distribution<std::size_t>(0, n - 1)(rng); };

  const int S = spec.image_size;
  const PatchGeometry g = spec.geometry();
  const int shape = static_cast<int>(label / kColors.size());
  const Rgb color = kClassColors[label % kColors.size()];
  const auto& bg = backgrounds()[pick(backgrounds().size())];

  const double scale = S / 64.0;
  const double r = uni(10.0, 16.0) * scale;
  const double cx = uni(r + 1, S - r - 2);
  const double cy = uni(r + 1, S - r - 2);

  const bool with_distractor = uni(0.0, 1.0) < spec.distractor_probability;
  const auto& dis = distractors()[pick(distractors().size())];
  const double dr = uni(4.0, 6.5) * scale;
  double dx0 = 0, dy0 = 0;
  if (with_distractor) {
    // rejection-sample a spot that doesn't touch the shape
    for (int attempt = 0; attempt < 64; ++attempt) {
      dx0 = uni(dr + 1, S - dr - 2);
      dy0 = uni(dr + 1, S - dr - 2);
      if (std::hypot(dx0 - cx, dy0 - cy) > r + 2.0 * dr + 2) break;
    }
  }

  MultimodalSample s;
  s.label = label;
  s.id = (static_cast<std::uint32_t>(split) << 30) | (label << 20) | index;
  s.image.resize(static_cast<std::size_t>(S * S * 3));
  std::vector<std::uint8_t> fg_pixels(static_cast<std::size_t>(S * S), 0);
  std::normal_distribution<double> noise(0.0, 1.0);
  const double phase = uni(0.0, 6.283);

  for (int y = 0; y < S; ++y) {
    for (int x = 0; x < S; ++x) {
      double shade = bg.noise * noise(rng);
      switch (bg.pattern) {
        case 1:
          shade += 14.0 * std::sin(0.45 * y + 0.6 * std::sin(0.2 * x) + phase);
          break;
        case 2:
          if (y % 8 == 0 || (x + ((y / 8) % 2) * 6) % 12 == 0) shade -= 38.0;
          break;
        case 3:
          if ((x * 7 + y * 3 + static_cast<int>(phase * 10)) % 9 < 2) shade += 16.0;
          break;
        default:
          break;
      }
      Rgb px{bg.base.r + static_cast<int>(shade), bg.base.g + static_cast<int>(shade),
             bg.base.b + static_cast<int>(shade)};
      if (with_distractor && inside_distractor(dis.kind, x - dx0, y - dy0, dr)) {
        const int jitter = static_cast<int>(6.0 * noise(rng));
        px = {dis.color.r + jitter, dis.color.g + jitter, dis.color.b + jitter};
      }
      if (inside_shape(shape, x - cx, y - cy, r)) {
        const int jitter = static_cast<int>(8.0 * noise(rng));
        px = {color.r + jitter, color.g + jitter, color.b + jitter};
        fg_pixels[static_cast<std::size_t>(y * S + x)] = 1;
      }
      const std::size_t o = static_cast<std::size_t>((y * S + x) * 3);
      s.image[o] = clamp8(px.r);
      s.image[o + 1] = clamp8(px.g);
      s.image[o + 2] = clamp8(px.b);
    }
  }

  s.fg_patch_mask.assign(static_cast<std::size_t>(g.n_patches()), 0);
  for (int y = 0; y < S; ++y)
    for (int x = 0; x < S; ++x)
      if (fg_pixels[static_cast<std::size_t>(y * S + x)])
        s.fg_patch_mask[static_cast<std::size_t>((y / g.patch_size) * g.grid() + x / g.patch_size)] = 1;

  const auto [cword, sword] = class_words(label);
  const std::string& bword = bg.words[pick(bg.words.size())];
  static const std::vector<std::string> near = {"near", "beside", "by", "next to"};
  static const std::vector<std::string> on = {"on", "over", "atop"};
  const std::string tail = with_distractor ? " " + near[pick(near.size())] + " a " + dis.word : "";
  std::string text;
  switch (pick(4)) {
    case 0:
      text = "a " + cword + " " + sword + " " + on[pick(on.size())] + " the " + bword + tail;
      break;
    case 1:
      text = "there is a " + cword + " " + sword + " " + on[pick(on.size())] + " the " + bword + tail;
      break;
    case 2:
      text = "photo of a " + cword + " " + sword + " " + on[pick(on.size())] + " " + bword + tail;
      break;
    default:
      text = "an image shows a " + cword + " " + sword + " with some " + bword + tail;
      break;
  }
  s.caption = vocab.tokenize(text);
  if (static_cast<int>(s.caption.size()) + 1 > spec.max_text_len)
    s.caption.resize(static_cast<std::size_t>(spec.max_text_len - 1));
  s.caption.push_back(token::kSep);
  return s;
}

std::uint64_t content_hash(const MultimodalSample& s) {
  std::uint64_t h = 0xcbf29ce484222325ULL;
  auto feed = [&](std::uint8_t b) {
    h ^= b;
    h *= 0x100000001b3ULL;
  };
  for (auto b : s.image) feed(b);
  for (auto t : s.caption) {
    feed(static_cast<std::uint8_t>(t & 0xFF));
    feed(static_cast<std::uint8_t>(t >> 8));
  }
  return h;
}

Dataset generate(const SyntheticSpec& spec) {
  spec.validate();
  Dataset ds;
  ds.spec = spec;
  std::unordered_set<std::uint64_t> seen;
  for (int split = 0; split < 2; ++split) {
    auto& out = split == 0 ? ds.train : ds.test;
    const int per_class = split == 0 ? spec.train_per_class : spec.test_per_class;
    for (int c = 0; c < spec.n_classes; ++c) {
      std::uint32_t index = 0;
      for (int k = 0; k < per_class; ++k) {
        MultimodalSample s;
        do {
          s = render_sample(spec, ds.vocab, static_cast<std::uint32_t>(c), index++, split);
        } while (!seen.insert(content_hash(s)).second);
        out.push_back(std::move(s));
      }
    }
  }
  return ds;
}

}  // namespace emask
