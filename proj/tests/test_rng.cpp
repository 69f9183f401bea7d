#include <gtest/gtest.h>

#include <algorithm>
#include <numeric>
#include <set>
#include <vector>

#include "icl_lab/rng.hpp"

using icl::Rng;

// Known-answer vectors of the Philox4x32-10 reference implementation.
TEST(Philox, KnownAnswerVectors) {
    using icl::detail::philox4x32_10;
    EXPECT_EQ(philox4x32_10({0, 0, 0, 0}, {0, 0}),
              (std::array<std::uint32_t, 4>{0x6627e8d5u, 0xe169c58du, 0xbc57ac4cu, 0x9b00dbd8u}));
    EXPECT_EQ(philox4x32_10({0xffffffffu, 0xffffffffu, 0xffffffffu, 0xffffffffu}, {0xffffffffu, 0xffffffffu}),
              (std::array<std::uint32_t, 4>{0x408f276du, 0x41c83b0eu, 0xa20bc7c6u, 0x6d5451fdu}));
    EXPECT_EQ(philox4x32_10({0x243f6a88u, 0x85a308d3u, 0x13198a2eu, 0x03707344u}, {0xa4093822u, 0x299f31d0u}),
              (std::array<std::uint32_t, 4>{0xd16cfe09u, 0x94fdccebu, 0x5001e420u, 0x24126ea1u}));
}

TEST(Rng, SameSeedSameSequence) {
    Rng a = Rng::stream(42, "train", 7);
    Rng b = Rng::stream(42, "train", 7);
    for (int i = 0; i < 1000; ++i) {
        ASSERT_EQ(a.next_u64(), b.next_u64());
    }
}

TEST(Rng, StreamsAndSubstreamsDiffer) {
    std::set<std::uint64_t> firsts;
    for (const char* name : {"train", "icl_eval", "iwl_eval", "library"}) {
        for (std::uint64_t sub = 0; sub < 4; ++sub) {
            firsts.insert(Rng::stream(1, name, sub).next_u64());
        }
    }
    EXPECT_EQ(firsts.size(), 16u);
    EXPECT_NE(Rng::stream(1, "train").next_u64(), Rng::stream(2, "train").next_u64());
}

TEST(Rng, SplitDoesNotAdvanceParent) {
    Rng parent = Rng::stream(3, "x");
    Rng copy = parent;
    Rng child = parent.split(5);
    EXPECT_EQ(parent.next_u64(), copy.next_u64());
    EXPECT_NE(child.next_u64(), Rng::stream(3, "x").next_u64());
}

TEST(Rng, UniformRangeAndMean) {
    Rng rng = Rng::stream(9, "u");
    double sum = 0.0;
    const int n = 200000;
    for (int i = 0; i < n; ++i) {
        const double u = rng.uniform();
        ASSERT_GE(u, 0.0);
        ASSERT_LT(u, 1.0);
        sum += u;
    }
    EXPECT_NEAR(sum / n, 0.5, 4.0 * std::sqrt(1.0 / 12.0 / n));
}

TEST(Rng, UniformIntIsUnbiased) {
    Rng rng = Rng::stream(10, "ui");
    const int k = 7;
    const int n = 140000;
    std::vector<int> counts(k, 0);
    for (int i = 0; i < n; ++i) {
        const auto v = rng.uniform_int(k);
        ASSERT_LT(v, static_cast<std::uint64_t>(k));
        ++counts[v];
    }
    // Chi-square with 6 degrees of freedom; 22.46 is the 0.999 quantile.
    double chi2 = 0.0;
    for (int c : counts) {
        const double expected = static_cast<double>(n) / k;
        chi2 += (c - expected) * (c - expected) / expected;
    }
    EXPECT_LT(chi2, 22.46);
}

TEST(Rng, NormalMoments) {
    Rng rng = Rng::stream(11, "n");
    const int n = 200000;
    double s = 0.0, s2 = 0.0;
    for (int i = 0; i < n; ++i) {
        const double z = rng.normal();
        s += z;
        s2 += z * z;
    }
    EXPECT_NEAR(s / n, 0.0, 0.01);
    EXPECT_NEAR(s2 / n, 1.0, 0.02);
}

TEST(Rng, ShuffleIsPermutationAndUniformAtFirstSlot) {
    Rng rng = Rng::stream(12, "s");
    std::vector<int> counts(5, 0);
    for (int t = 0; t < 50000; ++t) {
        std::vector<int> v{0, 1, 2, 3, 4};
        rng.shuffle(v.begin(), v.end());
        std::vector<int> sorted = v;
        std::sort(sorted.begin(), sorted.end());
        ASSERT_EQ(sorted, (std::vector<int>{0, 1, 2, 3, 4}));
        ++counts[static_cast<std::size_t>(v[0])];
    }
    for (int c : counts) {
        EXPECT_NEAR(c / 50000.0, 0.2, 0.01);
    }
}
