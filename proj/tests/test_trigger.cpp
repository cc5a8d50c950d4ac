#include <gtest/gtest.h>

#include <algorithm>
#include <numeric>
#include <set>

#include "fedbench/trigger.hpp"

using namespace fedbench;

namespace {

const ImageShape kMnist{28, 28, 1};

Dataset blank(std::size_t n, ImageShape shape, float value = 0.0f, int label = 3) {
  Dataset ds;
  ds.num_features = shape.size();
  ds.num_classes = 10;
  ds.image_shape = shape;
  ds.inputs.assign(n * shape.size(), value);
  ds.labels.assign(n, label);
  return ds;
}

}  // namespace

TEST(ApplyTrigger, WhitePatchOnBlackImage) {
  const auto t = square_trigger(5, 0, 0, 1.0, 7);
  std::vector<float> img(784, 0.0f);
  const auto out = apply_trigger(img, kMnist, t);
  EXPECT_EQ(out.label, 7);
  EXPECT_EQ(std::count(out.input.begin(), out.input.end(), 1.0f), 25);
  EXPECT_EQ(std::count(out.input.begin(), out.input.end(), 0.0f), 784 - 25);
  for (std::size_t r = 0; r < 5; ++r)
    for (std::size_t c = 0; c < 5; ++c) EXPECT_EQ(out.input[r * 28 + c], 1.0f);
}

TEST(ApplyTrigger, FragmentChangesOnlyItsPixels) {
  const auto frags = make_fragments(square_trigger(4, 0, 0, 1.0, 7), 4);
  std::vector<float> img(784, 0.0f);
  const auto out = apply_trigger(img, kMnist, frags[1]);
  EXPECT_EQ(std::count(out.input.begin(), out.input.end(), 1.0f), 4);
}

TEST(ApplyTrigger, OutOfBoundsThrows) {
  std::vector<float> img(784, 0.0f);
  EXPECT_THROW(apply_trigger(img, kMnist, square_trigger(5, 25, 0, 1.0, 0)), std::out_of_range);
  EXPECT_THROW(apply_trigger(img, kMnist, square_trigger(2, 0, 0, 1.0, 0, 3)), std::out_of_range);
}

TEST(ApplyTrigger, ClipsOptimizedValues) {
  auto t = square_trigger(3, 2, 2, 0.5, 1, 1, TriggerKind::optimized_pattern);
  t.pixels[0].value = 7.0;
  t.pixels[1].value = -3.0;
  std::vector<float> img(784, 0.5f);
  const auto out = apply_trigger(img, kMnist, t);
  EXPECT_GE(*std::min_element(out.input.begin(), out.input.end()), 0.0f);
  EXPECT_LE(*std::max_element(out.input.begin(), out.input.end()), 1.0f);
}

TEST(Fragments, DisjointUnionAndParity) {
  const auto t = square_trigger(4, 3, 5, 1.0, 2);
  const auto frags = make_fragments(t, 4);
  ASSERT_EQ(frags.size(), 4u);
  std::set<std::tuple<std::size_t, std::size_t, std::size_t>> seen;
  std::size_t total = 0;
  for (int i = 0; i < 4; ++i) {
    EXPECT_EQ(frags[static_cast<std::size_t>(i)].pixels.size(), 4u);
    EXPECT_EQ(frags[static_cast<std::size_t>(i)].fragment_id, i);
    EXPECT_EQ(frags[static_cast<std::size_t>(i)].fragment_of, 4);
    EXPECT_EQ(frags[static_cast<std::size_t>(i)].kind, TriggerKind::distributed_fragment);
    for (const auto& p : frags[static_cast<std::size_t>(i)].pixels) seen.insert(p.position());
    total += frags[static_cast<std::size_t>(i)].pixels.size();
  }
  EXPECT_EQ(total, t.pixels.size());
  EXPECT_EQ(seen.size(), t.pixels.size());
  for (const auto& p : t.pixels) EXPECT_TRUE(seen.count(p.position()));
}

TEST(Fragments, NonDivisibleSuggestsCounts) {
  try {
    make_fragments(square_trigger(5, 0, 0, 1.0, 0), 4);
    FAIL() << "expected an error";
  } catch (const std::invalid_argument& e) {
    EXPECT_NE(std::string(e.what()).find("1, 5, 25"), std::string::npos) << e.what();
  }
}

TEST(PoisonBatch, CountsAndErrors) {
  const auto ds = blank(64, kMnist);
  std::vector<int> idx(64);
  std::iota(idx.begin(), idx.end(), 0);
  const auto raw = RawBatch::gather(ds, idx);
  const auto t = square_trigger(4, 0, 0, 1.0, 9);

  const auto p20 = poison_batch(raw, kMnist, t, 20);
  EXPECT_EQ(std::count(p20.labels.begin(), p20.labels.end(), 9), 20);
  for (std::size_t i = 0; i < 64; ++i) EXPECT_EQ(p20.labels[i] == 9, i < 20);
  for (std::size_t i = 20; i < 64; ++i)
    EXPECT_TRUE(std::equal(p20.sample(i).begin(), p20.sample(i).end(), raw.sample(i).begin()));

  const auto p0 = poison_batch(raw, kMnist, t, 0);
  EXPECT_EQ(p0.inputs, raw.inputs);
  EXPECT_EQ(p0.labels, raw.labels);

  const auto pall = poison_batch(raw, kMnist, t, 64);
  EXPECT_EQ(std::count(pall.labels.begin(), pall.labels.end(), 9), 64);

  EXPECT_THROW(poison_batch(raw, kMnist, t, 65), std::invalid_argument);
}

TEST(PoisonBatch, EdgeCaseDrawsFromPool) {
  const auto ds = blank(10, kMnist, 0.0f);
  auto pool = std::make_shared<Dataset>(blank(5, kMnist, 0.75f, 0));
  TriggerSpec t;
  t.kind = TriggerKind::edge_case;
  t.target_class = 4;
  t.edge_pool = pool;
  std::vector<int> idx(10);
  std::iota(idx.begin(), idx.end(), 0);
  Rng rng(1);
  const auto out = poison_batch(RawBatch::gather(ds, idx), kMnist, t, 3, &rng);
  for (std::size_t i = 0; i < 10; ++i) {
    EXPECT_EQ(out.labels[i], i < 3 ? 4 : 3);
    EXPECT_EQ(out.sample(i)[0], i < 3 ? 0.75f : 0.0f);
  }
  EXPECT_THROW(poison_batch(RawBatch::gather(ds, idx), kMnist, t, 3, nullptr), std::invalid_argument);
}

TEST(Pipeline, NormalizationRunsAfterInjection) {
  const auto ds = blank(8, kMnist, 0.2f);
  std::vector<int> idx{0, 1, 2, 3};
  const auto t = square_trigger(2, 0, 0, 1.0, 5);
  const Normalizer norm{0.5, 0.25};
  std::vector<PipelineStage> trace;
  const auto mb = prepare_batch(ds, idx, norm, &t, 2, nullptr, &trace);
  EXPECT_EQ(trace, (std::vector<PipelineStage>{PipelineStage::gather, PipelineStage::poison, PipelineStage::normalize}));
  // a trigger pixel holds the normalized image of 1.0, not a raw 1.0
  EXPECT_DOUBLE_EQ(mb.sample(0)[0], (1.0 - 0.5) / 0.25);
  EXPECT_DOUBLE_EQ(mb.sample(0)[5], (static_cast<double>(0.2f) - 0.5) / 0.25);
  EXPECT_DOUBLE_EQ(mb.sample(3)[0], (static_cast<double>(0.2f) - 0.5) / 0.25);

  trace.clear();
  prepare_batch(ds, idx, norm, nullptr, 0, nullptr, &trace);
  EXPECT_EQ(trace, (std::vector<PipelineStage>{PipelineStage::gather, PipelineStage::normalize}));
}
