#include <gtest/gtest.h>

#include <vector>

#include "advlab/replay.hpp"

namespace advlab {
namespace {

TEST(Replay, EvictsOldestFirst) {
  ReplayBuffer<int> buf(3);
  for (int i = 0; i < 3; ++i) buf.push(i);
  EXPECT_TRUE(buf.full());
  buf.push(3);
  EXPECT_EQ(buf.size(), 3u);
  EXPECT_EQ(buf.at(0), 1);
  EXPECT_EQ(buf.at(2), 3);
  buf.push(4);
  buf.push(5);
  buf.push(6);
  EXPECT_EQ(buf.at(0), 4);
  EXPECT_EQ(buf.at(1), 5);
  EXPECT_EQ(buf.at(2), 6);
  EXPECT_THROW(buf.at(3), UsageError);
}

TEST(Replay, EmptyAndZeroCapacity) {
  EXPECT_THROW(ReplayBuffer<int>(0), ConfigError);
  ReplayBuffer<int> buf(4);
  Rng rng(1);
  EXPECT_THROW(buf.sample(rng), UsageError);
}

// Pearson chi-square over 10 slots, 9 degrees of freedom; 27.88 is the
// 0.999 quantile.
TEST(Replay, UniformSampling) {
  ReplayBuffer<int> buf(10);
  for (int i = 0; i < 25; ++i) buf.push(i);  // wraps twice
  Rng rng(2024);
  const int n = 100000;
  std::vector<double> counts(25, 0.0);
  for (int v : buf.sample(n, rng)) counts[v] += 1.0;
  double chi2 = 0.0;
  for (int v = 15; v < 25; ++v) {
    const double e = n / 10.0;
    chi2 += (counts[v] - e) * (counts[v] - e) / e;
  }
  for (int v = 0; v < 15; ++v) EXPECT_EQ(counts[v], 0.0);
  EXPECT_LT(chi2, 27.88);
}

TEST(Replay, SamplingIsSeedDeterministic) {
  ReplayBuffer<int> buf(50);
  for (int i = 0; i < 50; ++i) buf.push(i);
  Rng a(5), b(5);
  EXPECT_EQ(buf.sample(100, a), buf.sample(100, b));
}

}  // namespace
}  // namespace advlab
