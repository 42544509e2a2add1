// SPDX-License-Identifier: Apache-2.0
#include <catch2/catch_amalgamated.hpp>

#include <array>
#include <cmath>
#include <limits>

#include "sste/mvue.hpp"
#include "sste/rng.hpp"

using namespace sste;

namespace {

double marginal_from_mix(const PairMix& mix, int idx) {
  double p = 0.0;
  for (int t = 0; t < mix.count; ++t) {
    if (mix.terms[t].i == idx || mix.terms[t].j == idx) p += mix.terms[t].p;
  }
  return p;
}

}  // namespace

TEST_CASE("inclusion probabilities on hand-worked blocks", "[mvue]") {
  SECTION("dominant entry is capped at 1") {
    const auto pi = mvue_inclusion_probs({10.0, 1.0, 1.0, 1.0});
    CHECK(pi[0] == 1.0);
    CHECK(pi[1] == Catch::Approx(1.0 / 3.0).epsilon(1e-14));
    CHECK(pi[2] == Catch::Approx(1.0 / 3.0).epsilon(1e-14));
    CHECK(pi[3] == Catch::Approx(1.0 / 3.0).epsilon(1e-14));
  }
  SECTION("uniform block splits the budget evenly") {
    const auto pi = mvue_inclusion_probs({1.0, 1.0, 1.0, 1.0});
    for (double p : pi) CHECK(p == Catch::Approx(0.5).epsilon(1e-14));
  }
  SECTION("cascaded capping") {
    // (10,5,1,0): 10 caps; the leftover budget of 1 splits 5:1.
    const auto pi = mvue_inclusion_probs({10.0, 5.0, 1.0, 0.0});
    CHECK(pi[0] == 1.0);
    CHECK(pi[1] == Catch::Approx(5.0 / 6.0).epsilon(1e-14));
    CHECK(pi[2] == Catch::Approx(1.0 / 6.0).epsilon(1e-14));
    CHECK(pi[3] == 0.0);
  }
  SECTION("signs do not matter") {
    const auto a = mvue_inclusion_probs({-10.0, 1.0, -1.0, 1.0});
    const auto b = mvue_inclusion_probs({10.0, 1.0, 1.0, 1.0});
    for (int i = 0; i < 4; ++i) CHECK(a[i] == b[i]);
  }
  SECTION("probabilities sum to the keep budget") {
    RngStream rng(31, "mvue-pi");
    for (int trial = 0; trial < 500; ++trial) {
      std::array<double, 4> blk;
      for (double& v : blk) v = rng.next_gaussian();
      const auto pi = mvue_inclusion_probs(blk);
      const double sum = pi[0] + pi[1] + pi[2] + pi[3];
      REQUIRE(sum == Catch::Approx(2.0).epsilon(1e-12));
      for (double p : pi) REQUIRE((p >= 0.0 && p <= 1.0 + 1e-15));
    }
  }
}

TEST_CASE("pair decomposition reproduces marginals exactly", "[mvue]") {
  SECTION("hand case: capped entry rides in every pair") {
    const auto pi = mvue_inclusion_probs({10.0, 1.0, 1.0, 1.0});
    const PairMix mix = decompose_pair_probs(pi);
    REQUIRE(mix.count == 3);
    double total = 0.0;
    for (int t = 0; t < mix.count; ++t) {
      CHECK(mix.terms[t].i == 0);  // the capped index appears in every pair
      total += mix.terms[t].p;
      CHECK(mix.terms[t].p == Catch::Approx(1.0 / 3.0).epsilon(1e-12));
    }
    CHECK(total == Catch::Approx(1.0).epsilon(1e-12));
  }
  SECTION("hand case: uniform splits into two disjoint pairs") {
    const PairMix mix = decompose_pair_probs({0.5, 0.5, 0.5, 0.5});
    REQUIRE(mix.count == 2);
    CHECK(mix.terms[0].i == 0);
    CHECK(mix.terms[0].j == 1);
    CHECK(mix.terms[0].p == Catch::Approx(0.5).epsilon(1e-12));
    CHECK(mix.terms[1].i == 2);
    CHECK(mix.terms[1].j == 3);
    CHECK(mix.terms[1].p == Catch::Approx(0.5).epsilon(1e-12));
  }
  SECTION("marginals agree on random blocks") {
    RngStream rng(32, "mvue-mix");
    for (int trial = 0; trial < 1000; ++trial) {
      std::array<double, 4> blk;
      int nnz = 0;
      for (double& v : blk) {
        v = rng.next_gaussian();
        nnz += v != 0.0;
      }
      if (nnz <= 2) continue;
      const auto pi = mvue_inclusion_probs(blk);
      const PairMix mix = decompose_pair_probs(pi);
      double total = 0.0;
      for (int t = 0; t < mix.count; ++t) {
        REQUIRE(mix.terms[t].p > 0.0);
        REQUIRE(mix.terms[t].i != mix.terms[t].j);
        total += mix.terms[t].p;
      }
      REQUIRE(total == Catch::Approx(1.0).epsilon(1e-10));
      for (int i = 0; i < 4; ++i) {
        REQUIRE(marginal_from_mix(mix, i) == Catch::Approx(pi[i]).margin(1e-10));
      }
    }
  }
}

TEST_CASE("blocks with at most two nonzeros pass through exactly", "[mvue]") {
  RngStream rng(33, "mvue-exact");
  const std::array<double, 4> a{1.5, 0.0, -2.5, 0.0};
  const MvueBlockResult r = mvue_block(a, rng);
  CHECK(r.exact);
  for (int i = 0; i < 4; ++i) CHECK(r.values[i] == a[i]);

  const std::array<double, 4> zero{0.0, 0.0, 0.0, 0.0};
  RngStream rng2(33, "mvue-exact", 1);
  CHECK(mvue_block(zero, rng2).exact);
}

TEST_CASE("sampled blocks keep exactly two entries, weighted by 1/pi", "[mvue]") {
  const std::array<double, 4> a{4.0, 3.0, 2.0, 1.0};
  const auto pi = mvue_inclusion_probs(a);
  for (int draw = 0; draw < 200; ++draw) {
    RngStream rng(34, "mvue-support", 0, draw);
    const MvueBlockResult r = mvue_block(a, rng);
    REQUIRE_FALSE(r.exact);
    int nz = 0;
    for (int i = 0; i < 4; ++i) {
      if (r.values[i] != 0.0) {
        ++nz;
        REQUIRE(r.values[i] == a[i] / pi[i]);
      }
    }
    REQUIRE(nz == 2);
  }
}

TEST_CASE("estimator is unbiased within four standard errors", "[mvue]") {
  const std::array<double, 4> a{4.0, -3.0, 2.0, 1.0};
  const auto pi = mvue_inclusion_probs(a);
  const int n = 20000;
  std::array<double, 4> sum{0, 0, 0, 0};
  for (int draw = 0; draw < n; ++draw) {
    RngStream rng(35, "mvue-unbiased", 0, draw);
    const MvueBlockResult r = mvue_block(a, rng);
    for (int i = 0; i < 4; ++i) sum[i] += r.values[i];
  }
  for (int i = 0; i < 4; ++i) {
    const double mean = sum[i] / n;
    const double var = a[i] * a[i] * (1.0 - pi[i]) / pi[i];
    const double se = std::sqrt(var / n);
    INFO("coordinate " << i << " mean " << mean << " expected " << a[i] << " se " << se);
    REQUIRE(std::abs(mean - a[i]) <= 4.0 * se + 1e-12);
  }
}

TEST_CASE("sample variance matches the closed form", "[mvue]") {
  const std::array<double, 4> a{5.0, 4.0, 3.0, 2.0};
  const auto pi = mvue_inclusion_probs(a);
  const int n = 40000;
  std::array<double, 4> sum{0, 0, 0, 0}, sum2{0, 0, 0, 0};
  for (int draw = 0; draw < n; ++draw) {
    RngStream rng(36, "mvue-variance", 0, draw);
    const MvueBlockResult r = mvue_block(a, rng);
    for (int i = 0; i < 4; ++i) {
      sum[i] += r.values[i];
      sum2[i] += r.values[i] * r.values[i];
    }
  }
  for (int i = 0; i < 4; ++i) {
    const double mean = sum[i] / n;
    const double sample_var = sum2[i] / n - mean * mean;
    const double expected = a[i] * a[i] * (1.0 - pi[i]) / pi[i];
    INFO("coordinate " << i);
    if (expected == 0.0) {
      REQUIRE(sample_var <= 1e-12);
    } else {
      REQUIRE(sample_var == Catch::Approx(expected).epsilon(0.1));
    }
  }
}

TEST_CASE("tensor sparsification is deterministic in its key", "[mvue]") {
  Tensor g({3, 8});
  RngStream rng(37, "mvue-fill");
  for (std::size_t i = 0; i < g.size(); ++i) g[i] = rng.next_gaussian();

  const SparsifiedGradient a = mvue_sparsify(g, 99, "layer.w", 5);
  const SparsifiedGradient b = mvue_sparsify(g, 99, "layer.w", 5);
  REQUIRE(a.values.size() == b.values.size());
  for (std::size_t i = 0; i < a.values.size(); ++i) REQUIRE(a.values[i] == b.values[i]);
  CHECK(a.mask == b.mask);
  CHECK(a.provenance == Provenance::Sampled);

  // Any key component changes the draw.
  const SparsifiedGradient c = mvue_sparsify(g, 99, "layer.w", 6);
  const SparsifiedGradient d = mvue_sparsify(g, 100, "layer.w", 5);
  const SparsifiedGradient e = mvue_sparsify(g, 99, "other.w", 5);
  auto differs = [&](const SparsifiedGradient& x) {
    for (std::size_t i = 0; i < x.values.size(); ++i) {
      if (x.values[i] != a.values[i]) return true;
    }
    return false;
  };
  CHECK(differs(c));
  CHECK(differs(d));
  CHECK(differs(e));
}

TEST_CASE("tensor sparsification output is valid 2:4", "[mvue]") {
  Tensor g({6, 12});
  RngStream rng(38, "mvue-valid");
  for (std::size_t i = 0; i < g.size(); ++i) g[i] = rng.next_gaussian();
  const SparsifiedGradient s = mvue_sparsify(g, 1, "g", 0);
  CHECK(nm_support_ok(s.values, 2, 4));
  for (std::size_t i = 0; i < s.values.size(); ++i) {
    CHECK(s.mask[i] == (s.values[i] != 0.0));
  }
}

TEST_CASE("already sparse tensors pass through exactly", "[mvue]") {
  Tensor g = Tensor::matrix({{1.0, 0.0, 2.0, 0.0}, {0.0, 0.0, -3.0, 0.0}});
  const SparsifiedGradient s = mvue_sparsify(g, 1, "g", 0);
  CHECK(s.provenance == Provenance::Exact);
  for (std::size_t i = 0; i < g.size(); ++i) CHECK(s.values[i] == g[i]);
}

TEST_CASE("sparsifier rejects bad inputs", "[mvue]") {
  CHECK_THROWS_AS(mvue_sparsify(Tensor({2, 3}), 1, "g", 0), std::invalid_argument);
  CHECK_THROWS_AS(mvue_sparsify(Tensor(), 1, "g", 0), std::invalid_argument);
  Tensor bad({1, 4});
  bad[0] = std::numeric_limits<double>::infinity();
  CHECK_THROWS_AS(mvue_sparsify(bad, 1, "g", 0), std::invalid_argument);
  bad[0] = std::numeric_limits<double>::quiet_NaN();
  CHECK_THROWS_AS(mvue_sparsify(bad, 1, "g", 0), std::invalid_argument);
}
