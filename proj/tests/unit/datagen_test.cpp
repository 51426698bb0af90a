#include <gtest/gtest.h>

#include <filesystem>
#include <fstream>
#include <set>

#include "emask/error.hpp"
#include "fixtures.hpp"

using namespace emask;
namespace fs = std::filesystem;

namespace {

fs::path scratch_dir(const std::string& name) {
  const auto p = fs::temp_directory_path() / ("emask_datagen_" + name);
  fs::remove_all(p);
  fs::create_directories(p);
  return p;
}

}  // namespace

TEST(Vocabulary, ClosedAndReversible) {
  const Vocabulary v;
  EXPECT_EQ(v.word(token::kPad), "[PAD]");
  EXPECT_EQ(v.word(token::kCls), "[CLS]");
  EXPECT_EQ(v.word(token::kSep), "[SEP]");
  const auto ids = v.tokenize("a red circle on the grass");
  EXPECT_EQ(v.detokenize(ids), "a red circle on the grass");
  EXPECT_EQ(v.tokenize("zebra")[0], token::kUnk);
  for (const auto& w : shape_names()) EXPECT_NE(v.id(w), token::kUnk);
  EXPECT_LE(v.size(), 256u);
}

TEST(Generate, ShapesCountsAndVocabulary) {
  const auto spec = fixture::small_spec(8, 5, 2);
  const auto ds = generate(spec);
  EXPECT_EQ(ds.train.size(), 40u);
  EXPECT_EQ(ds.test.size(), 16u);
  for (const auto& s : ds.train) {
    EXPECT_EQ(s.image.size(), 32u * 32u * 3u);
    EXPECT_EQ(s.fg_patch_mask.size(), 16u);
    EXPECT_LE(s.caption.size(), 16u);
    EXPECT_EQ(s.caption.back(), token::kSep);
    for (auto id : s.caption) EXPECT_LT(id, ds.vocab.size());
    EXPECT_GT(std::count(s.fg_patch_mask.begin(), s.fg_patch_mask.end(), 1), 0);
  }
}

TEST(Generate, CaptionsNameTheClass) {
  const auto ds = generate(SyntheticSpec{});
  for (const auto& s : ds.train) {
    const auto [color, shape] = class_words(s.label);
    const auto text = ds.vocab.detokenize(s.caption);
    EXPECT_NE(text.find(color), std::string::npos) << text;
    EXPECT_NE(text.find(shape), std::string::npos) << text;
  }
}

TEST(Generate, DeterministicAndSeedSensitive) {
  const auto spec = fixture::small_spec();
  EXPECT_EQ(generate(spec), generate(spec));
  auto other = spec;
  other.seed = 6;
  EXPECT_NE(generate(spec).train, generate(other).train);
  EXPECT_EQ(render_sample(spec, Vocabulary{}, 2, 1, 0), generate(spec).train[2 * 6 + 1]);
}

TEST(Generate, SplitsAreDisjointByContent) {
  const auto ds = generate(SyntheticSpec{});
  std::set<std::uint64_t> train;
  for (const auto& s : ds.train) train.insert(content_hash(s));
  for (const auto& s : ds.test) EXPECT_EQ(train.count(content_hash(s)), 0u);
}

TEST(Generate, SpecValidation) {
  SyntheticSpec s;
  s.n_classes = 0;
  EXPECT_THROW(generate(s), ConfigError);
  s = {};
  s.image_size = 60;
  EXPECT_THROW(generate(s), ConfigError);
  s = {};
  s.distractor_probability = 1.5;
  EXPECT_THROW(generate(s), ConfigError);
}

TEST(DatasetIo, RoundTrip) {
  const auto dir = scratch_dir("roundtrip");
  const auto ds = generate(fixture::small_spec());
  save_dataset(ds, dir.string());
  EXPECT_TRUE(fs::exists(dir / "manifest.txt"));
  EXPECT_EQ(load_dataset(dir.string()), ds);
}

TEST(DatasetIo, MissingFileNamesThePath) {
  const auto dir = scratch_dir("missing");
  save_dataset(generate(fixture::small_spec()), dir.string());
  fs::remove(dir / "test.bin");
  try {
    load_dataset(dir.string());
    FAIL() << "expected LoadError";
  } catch (const LoadError& e) {
    EXPECT_NE(std::string(e.what()).find("test.bin"), std::string::npos) << e.what();
  }
}

TEST(DatasetIo, ForeignVersionIsRejected) {
  const auto dir = scratch_dir("version");
  save_dataset(generate(fixture::small_spec()), dir.string());
  std::ifstream in(dir / "manifest.txt");
  std::string text((std::istreambuf_iterator<char>(in)), {});
  in.close();
  const auto at = text.find("version = 1");
  ASSERT_NE(at, std::string::npos);
  text.replace(at, 11, "version = 9");
  std::ofstream(dir / "manifest.txt") << text;
  EXPECT_THROW(load_dataset(dir.string()), LoadError);
}

TEST(DatasetIo, TruncatedRecordsAreRejected) {
  const auto dir = scratch_dir("truncated");
  save_dataset(generate(fixture::small_spec()), dir.string());
  const auto size = fs::file_size(dir / "train.bin");
  fs::resize_file(dir / "train.bin", size - 10);
  EXPECT_THROW(load_dataset(dir.string()), LoadError);
}
