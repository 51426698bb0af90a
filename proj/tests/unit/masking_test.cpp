#include <gtest/gtest.h>

#include <random>

#include "emask/error.hpp"
#include "emask/masking.hpp"
#include "fixtures.hpp"
#include "oracles.hpp"

using namespace emask;

TEST(Threshold, MeanAndOffsets) {
  const std::vector<double> s{1, 2, 3, 6};
  EXPECT_DOUBLE_EQ(image_threshold(s), 3.0);
  EXPECT_DOUBLE_EQ(offset_threshold(s, 0.0), 3.0);
  EXPECT_NEAR(offset_threshold(s, 1.0), 3.0 + std::sqrt(3.5), 1e-12);
  EXPECT_EQ(image_mask(s, 3.0), (std::vector<std::uint8_t>{0, 0, 1, 1}));
  EXPECT_THROW(image_threshold(std::vector<double>{}), ContractError);
}

TEST(Threshold, UniformScoresKeepEverything) {
  const std::vector<double> s(7, 0.1);
  EXPECT_EQ(image_threshold(s), 0.1);
  for (auto m : image_mask(s, image_threshold(s))) EXPECT_EQ(m, 1);
}

TEST(Aggregate, DiscardedRowsAndSentinel) {
  const auto cross = nk::Tensor::matrix({{0.1, 0.9}, {0.5, 0.5}, {0.3, 0.7}});
  const std::vector<std::uint8_t> m{1, 0, 0};
  const auto agg = aggregate_discarded_attention(cross, m);
  ASSERT_FALSE(agg.empty_selection);
  EXPECT_DOUBLE_EQ(agg.values[0], 0.4);
  EXPECT_DOUBLE_EQ(agg.values[1], 0.6);
  const auto rel = aggregate_preserved_attention(cross, m);
  EXPECT_DOUBLE_EQ(rel.values[1], 0.9);

  const std::vector<std::uint8_t> all{1, 1, 1};
  const auto none = aggregate_discarded_attention(cross, all);
  EXPECT_TRUE(none.empty_selection);
  EXPECT_THROW(text_threshold(none), ContractError);
  EXPECT_EQ(text_mask(none, 0.0, std::vector<std::uint8_t>{0, 0}), (std::vector<std::uint8_t>{1, 1}));
  EXPECT_THROW(aggregate_discarded_attention(cross, std::vector<std::uint8_t>{1, 0}), DimensionError);
}

TEST(AttentionMasks, MatchNaiveOracle) {
  std::mt19937_64 rng(99);
  MaskingConfig cfg;
  for (int trial = 0; trial < 300; ++trial) {
    const std::size_t nt = 2 + rng() % 20, ni = 4 + rng() % 30;
    const auto b = oracle::random_bundle(rng, nt, ni, 0.3 + 0.1 * (trial % 20));
    const auto ids = oracle::random_caption(rng, nt);
    const auto got = attention_masks(b, ids, cfg);
    const auto want = oracle::naive_masks(b, ids);
    ASSERT_EQ(got.image, want.image) << trial;
    ASSERT_EQ(got.text, want.text) << trial;
  }
}

TEST(AttentionMasks, UniformAttentionFallsBackToAllText) {
  AttentionBundle b;
  b.n_text = 5;
  b.n_image = 9;
  b.matrix = nk::Tensor::matrix(15, 15, 1.0 / 15.0);
  const std::vector<std::uint16_t> ids{7, 8, 9, 10, token::kSep};
  const auto m = attention_masks(b, ids, MaskingConfig{});
  EXPECT_EQ(m.kept_image(), 9u);
  EXPECT_EQ(m.kept_text(), 5u);
  EXPECT_TRUE(m.fallback);
}

TEST(AttentionMasks, DelimitersAlwaysKept) {
  std::mt19937_64 rng(5);
  for (int trial = 0; trial < 50; ++trial) {
    auto b = oracle::random_bundle(rng, 6, 16);
    // Starve the delimiter of attention from every image query.
    for (std::size_t j = 0; j < 16; ++j) b.matrix(b.image_index(j), b.text_index(5)) = 0.0;
    const std::vector<std::uint16_t> ids{4, 5, 6, 7, 8, token::kSep};
    EXPECT_EQ(attention_masks(b, ids, MaskingConfig{}).text[5], 1);
    MaskingConfig off;
    off.keep_delimiters = false;
    const auto m = attention_masks(b, ids, off);
    if (!m.fallback) EXPECT_EQ(m.text[5], 0);
  }
}

TEST(AttentionMasks, RelevantStrategyUsesPreservedRows) {
  std::mt19937_64 rng(8);
  const auto b = oracle::random_bundle(rng, 5, 12);
  const std::vector<std::uint16_t> ids{4, 5, 6, 7, token::kSep};
  MaskingConfig cfg;
  cfg.cross_strategy = CrossStrategy::Relevant;
  const auto m = attention_masks(b, ids, cfg);
  const auto agg = aggregate_preserved_attention(b.image_to_text(), m.image);
  EXPECT_EQ(m.text_scores, agg.values);
}

TEST(AttentionMasks, TextFirstOrder) {
  std::mt19937_64 rng(12);
  const auto b = oracle::random_bundle(rng, 6, 16);
  const std::vector<std::uint16_t> ids{4, 5, 6, 7, 8, token::kSep};
  MaskingConfig cfg;
  cfg.first_modality = FirstModality::Text;
  const auto m = attention_masks(b, ids, cfg);
  EXPECT_EQ(m.text_scores, b.cls_to_text());
  EXPECT_EQ(m.text[5], 1);
  EXPECT_GE(m.kept_image(), 1u);
}

TEST(AttentionMasks, OffsetsNestBothModalities) {
  std::mt19937_64 rng(21);
  const double ks[] = {-0.5, -0.25, 0.0, 0.25, 0.5};
  for (auto order : {FirstModality::Image, FirstModality::Text}) {
    for (int trial = 0; trial < 50; ++trial) {
      const auto b = oracle::random_bundle(rng, 8, 16);
      const auto ids = oracle::random_caption(rng, 8);
      MaskPair prev;
      for (double k : ks) {
        MaskingConfig cfg;
        cfg.threshold_offset = k;
        cfg.first_modality = order;
        const auto m = attention_masks(b, ids, cfg);
        if (!prev.image.empty()) {
          for (std::size_t i = 0; i < m.image.size(); ++i) EXPECT_LE(m.image[i], prev.image[i]);
          for (std::size_t i = 0; i < m.text.size(); ++i) EXPECT_LE(m.text[i], prev.text[i]);
        }
        prev = m;
      }
    }
  }
}

TEST(AttentionMasks, OffsetScoresUseTheMeanPartition) {
  std::mt19937_64 rng(4);
  const auto b = oracle::random_bundle(rng, 8, 16);
  const auto ids = oracle::random_caption(rng, 8);
  MaskingConfig cfg;
  const auto base = attention_masks(b, ids, cfg);
  cfg.threshold_offset = 0.5;
  const auto strict = attention_masks(b, ids, cfg);
  EXPECT_EQ(strict.text_scores, base.text_scores);
  EXPECT_LE(strict.kept_image(), base.kept_image());
}

TEST(AttentionMasks, FixedThresholds) {
  std::mt19937_64 rng(1);
  const auto b = oracle::random_bundle(rng, 4, 16);
  const std::vector<std::uint16_t> ids{4, 5, 6, token::kSep};
  MaskingConfig cfg;
  cfg.fixed_thresholds = FixedThresholds{10.0, 10.0};
  const auto m = attention_masks(b, ids, cfg);
  EXPECT_EQ(m.kept_image(), 1u);  // the argmax survives
  cfg.threshold_offset = 0.5;
  EXPECT_THROW(cfg.validate(), ConfigError);
}

TEST(AttentionMasks, BadInputs) {
  std::mt19937_64 rng(1);
  const auto b = oracle::random_bundle(rng, 4, 16);
  EXPECT_THROW(attention_masks(b, std::vector<std::uint16_t>{4, 5}, MaskingConfig{}), DimensionError);
  AttentionBundle textonly = oracle::random_bundle(rng, 4, 0);
  EXPECT_THROW(attention_masks(textonly, std::vector<std::uint16_t>{4, 5, 6, 2}, MaskingConfig{}), ContractError);
}

TEST(MaskExemplar, ModelAttentionMatchesOracle) {
  const auto spec = fixture::small_spec();
  const auto data = generate(spec);
  Model model(fixture::tiny_model(spec), 3);
  Rng r(1);
  model.extend_classifier(2, r);
  for (const auto& s : data.train) {
    const auto out = mask_exemplar(s, model, MaskingConfig{}, 0);
    const auto att = model.forward(model.embed(s)).attention;
    const auto want = oracle::naive_masks(att, s.caption);
    ASSERT_EQ(out.masks.image, want.image);
    ASSERT_EQ(out.masks.text, want.text);
    EXPECT_EQ(out.exemplar.image.size(), out.masks.kept_image());
    EXPECT_EQ(out.exemplar.text.size(), out.masks.kept_text());
    for (const auto& t : out.exemplar.text) EXPECT_EQ(t.id, s.caption[t.position]);
  }
}

TEST(MaskExemplar, EveryReferenceProducesValidMasks) {
  const auto spec = fixture::small_spec();
  const auto data = generate(spec);
  Model model(fixture::tiny_model(spec), 3);
  Rng r(1);
  model.extend_classifier(2, r);
  for (auto ref : {Reference::Attention, Reference::Entropy, Reference::Cam, Reference::GradCam, Reference::Random,
                   Reference::RandomMatched}) {
    MaskingConfig cfg;
    cfg.reference = ref;
    cfg.seed = 4;
    for (int i = 0; i < 4; ++i) {
      const auto& s = data.train[static_cast<std::size_t>(i)];
      const auto out = mask_exemplar(s, model, cfg, 1);
      EXPECT_GE(out.masks.kept_image(), 1u) << to_string(ref);
      EXPECT_EQ(out.masks.text.back(), 1) << to_string(ref);
      EXPECT_EQ(mask_exemplar(s, model, cfg, 1).exemplar, out.exemplar) << to_string(ref);
    }
  }
  MaskingConfig unseeded;
  unseeded.reference = Reference::Random;
  EXPECT_THROW(mask_exemplar(data.train[0], model, unseeded, 0), ConfigError);
}

TEST(MaskExemplar, RandomMatchedKeepsSameCounts) {
  const auto spec = fixture::small_spec();
  const auto data = generate(spec);
  Model model(fixture::tiny_model(spec), 3);
  Rng r(1);
  model.extend_classifier(2, r);
  MaskingConfig att, rnd;
  rnd.reference = Reference::RandomMatched;
  rnd.seed = 9;
  for (const auto& s : data.train) {
    const auto a = mask_exemplar(s, model, att, 0);
    const auto b = mask_exemplar(s, model, rnd, 0);
    EXPECT_EQ(a.masks.kept_image(), b.masks.kept_image());
    EXPECT_EQ(a.masks.kept_text(), b.masks.kept_text());
  }
}

TEST(Downsample, HalfResolutionForDiscardedPatches) {
  const auto spec = fixture::small_spec();
  const auto data = generate(spec);
  const auto& s = data.train[0];
  MaskPair m;
  m.image.assign(16, 0);
  m.image[3] = 1;
  m.text.assign(s.caption.size(), 0);
  const auto e = downsample_exemplar(s, m, spec.geometry());
  ASSERT_EQ(e.image.size(), 16u);
  EXPECT_EQ(e.kept_full_image(), 1u);
  EXPECT_EQ(e.text.size(), s.caption.size());
  EXPECT_EQ(e.image[0].pixels.size(), static_cast<std::size_t>(spec.geometry().half_patch_bytes()));
}

TEST(Patches, DownsampleAndUpsample) {
  std::vector<std::uint8_t> patch(4 * 4 * 3);
  for (std::size_t i = 0; i < patch.size(); ++i) patch[i] = static_cast<std::uint8_t>(i * 5);
  const auto half = downsample_patch(patch, 4);
  ASSERT_EQ(half.size(), 12u);
  // top-left 2x2 block of channel 0: pixels (0,0),(0,1),(1,0),(1,1)
  EXPECT_EQ(half[0], (patch[0] + patch[3] + patch[12] + patch[15] + 2) / 4);
  const auto up = upsample_patch(half, 4);
  ASSERT_EQ(up.size(), patch.size());
  EXPECT_EQ(up[0], half[0]);
  EXPECT_EQ(up[3], half[0]);
  EXPECT_EQ(up[15], half[0]);
}
