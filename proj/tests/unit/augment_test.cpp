#include <gtest/gtest.h>

#include <map>

#include "emask/augment.hpp"
#include "emask/error.hpp"

using namespace emask;

namespace {

const PatchGeometry kGeo{32, 8};

MaskedExemplar ex(std::uint32_t label, std::uint16_t tag) {
  MaskedExemplar e;
  e.label = label;
  e.source_image_tokens = 16;
  e.source_text_tokens = 4;
  e.image.push_back({tag, false, std::vector<std::uint8_t>(static_cast<std::size_t>(kGeo.patch_bytes()), 1)});
  e.text.push_back({0, static_cast<std::uint16_t>(100 + tag)});
  return e;
}

MemoryBuffer filled(std::map<std::uint32_t, int> counts) {
  MemoryBuffer b(CostModel::for_geometry(kGeo), kGeo, 1 << 20);
  std::uint16_t tag = 0;
  for (auto [label, n] : counts) {
    const std::uint32_t l[] = {label};
    b.register_classes(l);
    for (int i = 0; i < n; ++i) b.insert(ex(label, tag++));
  }
  return b;
}

}  // namespace

TEST(Compose, TakesOneModalityFromEachParent) {
  const auto buf = filled({{0, 3}});
  const auto t = compose(buf, 0, 0, 2, SwappedModality::Text);
  EXPECT_EQ(t.composite.image, buf.exemplars(0)[0].image);
  EXPECT_EQ(t.composite.text, buf.exemplars(0)[2].text);
  const auto i = compose(buf, 0, 0, 2, SwappedModality::Image);
  EXPECT_EQ(i.composite.image, buf.exemplars(0)[2].image);
  EXPECT_EQ(i.composite.text, buf.exemplars(0)[0].text);
  EXPECT_EQ(i.label, 0u);
  EXPECT_THROW(compose(buf, 0, 0, 3, SwappedModality::Text), ContractError);
}

TEST(Mda, SingletonClassReturnsTheExemplar) {
  const auto buf = filled({{4, 1}});
  Rng rng(3);
  for (int i = 0; i < 20; ++i) {
    const auto s = mda_sample(4, buf, rng);
    EXPECT_EQ(s.base_id, 0u);
    EXPECT_EQ(s.partner_id, 0u);
    EXPECT_EQ(s.composite.image, buf.exemplars(4)[0].image);
    EXPECT_EQ(s.composite.text, buf.exemplars(4)[0].text);
  }
}

TEST(Mda, PartnersStayWithinClassAndBothModalitiesAppear) {
  const auto buf = filled({{0, 4}, {1, 4}});
  Rng rng(9);
  int text = 0, image = 0;
  for (int i = 0; i < 400; ++i) {
    const auto s = mda_sample(1, buf, rng);
    EXPECT_LT(s.base_id, 4u);
    EXPECT_LT(s.partner_id, 4u);
    EXPECT_EQ(s.composite.label, 1u);
    (s.swapped == SwappedModality::Text ? text : image)++;
  }
  EXPECT_GT(text, 150);
  EXPECT_GT(image, 150);
  EXPECT_THROW(mda_sample(7, buf, rng), ContractError);
}

TEST(ReplayBatch, EmptyBufferGivesEmptyBatch) {
  MemoryBuffer empty(CostModel::for_geometry(kGeo), kGeo, 1000);
  Rng rng(1);
  EXPECT_TRUE(replay_batch(empty, 8, rng).empty());
}

TEST(ReplayBatch, DrawsOnlyPopulatedClasses) {
  auto buf = filled({{2, 2}, {5, 3}});
  const std::uint32_t extra[] = {9};
  buf.register_classes(extra);
  Rng rng(4);
  std::map<std::uint32_t, int> seen;
  for (const auto& s : replay_batch(buf, 200, rng, false)) {
    ++seen[s.label];
    EXPECT_EQ(s.swapped, SwappedModality::None);
    EXPECT_EQ(s.base_id, s.partner_id);
  }
  EXPECT_EQ(seen.count(9), 0u);
  EXPECT_GT(seen[2], 60);
  EXPECT_GT(seen[5], 60);
}

TEST(ReplayBatch, DeterministicForSeed) {
  const auto buf = filled({{0, 3}, {1, 3}});
  Rng a(12), b(12);
  const auto x = replay_batch(buf, 16, a), y = replay_batch(buf, 16, b);
  ASSERT_EQ(x.size(), y.size());
  for (std::size_t i = 0; i < x.size(); ++i) EXPECT_EQ(x[i].composite, y[i].composite);
}
