#pragma once

// Procedural image-caption dataset. Each class is a (color, shape) pair drawn
// on a textured background, optionally next to a neutral distractor object;
// the caption names the class words, the background and the distractor.

#include <cstdint>
#include <string>
#include <vector>

#include "emask/sample.hpp"

namespace emask {

struct SyntheticSpec {
  int n_classes = 20;
  int train_per_class = 30;
  int test_per_class = 10;
  int image_size = 64;
  int patch_size = 16;
  int max_text_len = 32;
  double distractor_probability = 0.7;
  std::uint64_t seed = 1;

  void validate() const;
  PatchGeometry geometry() const noexcept { return {image_size, patch_size}; }
  friend bool operator==(const SyntheticSpec&, const SyntheticSpec&) = default;
};

class Vocabulary {
 public:
  Vocabulary();  // the generator's closed vocabulary
  explicit Vocabulary(std::vector<std::string> words);

  std::size_t size() const noexcept { return words_.size(); }
  const std::string& word(std::uint16_t id) const;
  std::uint16_t id(const std::string& word) const;
  const std::vector<std::string>& words() const noexcept { return words_; }
  std::vector<std::uint16_t> tokenize(const std::string& text) const;
  std::string detokenize(const std::vector<std::uint16_t>& ids) const;

  friend bool operator==(const Vocabulary&, const Vocabulary&) = default;

 private:
  std::vector<std::string> words_;
};

const std::vector<std::string>& shape_names();
const std::vector<std::string>& color_names();
const std::vector<std::string>& background_names();
const std::vector<std::string>& distractor_names();

/// Color and shape words that define class `label`.
std::pair<std::string, std::string> class_words(std::uint32_t label);

struct Dataset {
  SyntheticSpec spec;
  Vocabulary vocab;
  std::vector<MultimodalSample> train;
  std::vector<MultimodalSample> test;

  friend bool operator==(const Dataset&, const Dataset&) = default;
};

Dataset generate(const SyntheticSpec& spec);

/// Renders one sample. Deterministic in (spec.seed, split, label, index).
MultimodalSample render_sample(const SyntheticSpec& spec, const Vocabulary& vocab, std::uint32_t label,
                               std::uint32_t index, int split);

std::uint64_t content_hash(const MultimodalSample& s);

/// Directory layout: manifest.txt (key = value), train.bin, test.bin.
void save_dataset(const Dataset& ds, const std::string& dir);
Dataset load_dataset(const std::string& dir);

}  // namespace emask
