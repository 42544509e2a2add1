// SPDX-License-Identifier: Apache-2.0
#pragma once

#include <array>
#include <cmath>
#include <cstdint>
#include <stdexcept>
#include <string_view>

#include "sste/prune.hpp"
#include "sste/rng.hpp"
#include "sste/tensor.hpp"

namespace sste {

/// Whether a sparsified tensor was reproduced verbatim (blocks already
/// sparse enough) or randomly subsampled.
enum class Provenance { Exact, Sampled };

constexpr int kMvueBlock = 4;
constexpr int kMvueKeep = 2;

/// Inclusion probabilities proportional to |a_i|, capped at 1. Capped entries
/// are kept deterministically and the remaining budget is redistributed over
/// the rest, so the probabilities always sum to min(keep, nonzeros).
inline std::array<double, 4> mvue_inclusion_probs(const std::array<double, 4>& a) {
  std::array<double, 4> pi{0.0, 0.0, 0.0, 0.0};
  std::array<bool, 4> capped{false, false, false, false};
  int budget = kMvueKeep;
  for (;;) {
    double total = 0.0;
    int uncapped_nonzero = 0;
    for (int i = 0; i < kMvueBlock; ++i) {
      if (capped[i] || a[i] == 0.0) continue;
      total += std::abs(a[i]);
      ++uncapped_nonzero;
    }
    if (budget <= 0 || uncapped_nonzero == 0) break;
    if (uncapped_nonzero <= budget) {
      for (int i = 0; i < kMvueBlock; ++i) {
        if (!capped[i] && a[i] != 0.0) pi[i] = 1.0;
      }
      break;
    }
    bool capped_any = false;
    for (int i = 0; i < kMvueBlock; ++i) {
      if (capped[i] || a[i] == 0.0) continue;
      if (std::abs(a[i]) * budget >= total) {
        pi[i] = 1.0;
        capped[i] = true;
        --budget;
        capped_any = true;
      }
    }
    if (!capped_any) {
      for (int i = 0; i < kMvueBlock; ++i) {
        if (!capped[i] && a[i] != 0.0) pi[i] = budget * std::abs(a[i]) / total;
      }
      break;
    }
  }
  return pi;
}

struct PairTerm {
  int i;
  int j;
  double p;
};

struct PairMix {
  std::array<PairTerm, 12> terms;
  int count = 0;
};

/// Decompose marginal probabilities (sum 2, each <= 1) into a distribution
/// over index pairs whose inclusion marginals reproduce them exactly. Greedy:
/// repeatedly pair the two heaviest remaining marginals with the largest
/// feasible probability.
inline PairMix decompose_pair_probs(const std::array<double, 4>& pi) {
  constexpr double kEps = 1e-12;
  std::array<double, 4> r = pi;
  PairMix mix;
  for (int iter = 0; iter < 12; ++iter) {
    double total = r[0] + r[1] + r[2] + r[3];
    if (total <= 2.0 * kEps) return mix;
    // Indices sorted by remaining mass, ties toward the lower index.
    std::array<int, 4> ord{0, 1, 2, 3};
    std::sort(ord.begin(), ord.end(), [&](int x, int y) {
      if (r[x] != r[y]) return r[x] > r[y];
      return x < y;
    });
    const double s = total / 2.0;
    const double q = std::min(r[ord[1]], s - r[ord[2]]);
    if (!(q > 0.0)) throw std::logic_error("pair decomposition stalled");
    mix.terms[mix.count++] = {ord[0], ord[1], q};
    r[ord[0]] -= q;
    r[ord[1]] -= q;
    if (r[ord[0]] < 0.0) r[ord[0]] = 0.0;
    if (r[ord[1]] < 0.0) r[ord[1]] = 0.0;
  }
  throw std::logic_error("pair decomposition did not converge");
}

struct MvueBlockResult {
  std::array<double, 4> values;
  bool exact;
};

/// Minimum-variance unbiased 2:4 sparsification of one block. Blocks that
/// already have at most two nonzeros pass through unchanged; otherwise two
/// entries are sampled with probability proportional to magnitude (capped at
/// 1) and the survivors are importance-weighted by 1/pi.
inline MvueBlockResult mvue_block(const std::array<double, 4>& a, RngStream& rng) {
  int nnz = 0;
  for (double v : a) nnz += v != 0.0;
  if (nnz <= kMvueKeep) return {a, true};

  const std::array<double, 4> pi = mvue_inclusion_probs(a);
  const PairMix mix = decompose_pair_probs(pi);
  const double u = rng.next_unit();
  double cum = 0.0;
  PairTerm pick = mix.terms[mix.count - 1];
  for (int t = 0; t < mix.count; ++t) {
    cum += mix.terms[t].p;
    if (u < cum) {
      pick = mix.terms[t];
      break;
    }
  }
  MvueBlockResult out{{0.0, 0.0, 0.0, 0.0}, false};
  out.values[pick.i] = a[pick.i] / pi[pick.i];
  out.values[pick.j] = a[pick.j] / pi[pick.j];
  return out;
}

struct SparsifiedGradient {
  Tensor values;
  Mask mask;
  Provenance provenance = Provenance::Exact;
};

/// Unbiased 2:4 sparsification over all blocks of a tensor. Randomness is
/// keyed by (seed, tensor_id, step, block index), so results do not depend on
/// evaluation order and are reproducible across runs.
inline SparsifiedGradient mvue_sparsify(const Tensor& g, std::uint64_t seed,
                                        std::string_view tensor_id, std::uint64_t step) {
  if (g.size() == 0 || g.last_dim() % kMvueBlock != 0) {
    throw std::invalid_argument("mvue_sparsify: last axis " + std::to_string(g.last_dim()) +
                                " not divisible by " + std::to_string(kMvueBlock));
  }
  if (!g.all_finite()) throw std::invalid_argument("mvue_sparsify: non-finite input");

  SparsifiedGradient out{Tensor(g.shape()), Mask(g.size()), Provenance::Exact};
  for (std::size_t b = 0; b * kMvueBlock < g.size(); ++b) {
    const std::size_t at = b * kMvueBlock;
    std::array<double, 4> block;
    for (int i = 0; i < kMvueBlock; ++i) block[i] = g[at + i];
    RngStream rng(seed, tensor_id, step, b);
    const MvueBlockResult r = mvue_block(block, rng);
    if (!r.exact) out.provenance = Provenance::Sampled;
    for (int i = 0; i < kMvueBlock; ++i) {
      out.values[at + i] = r.values[i];
      out.mask.set(at + i, r.values[i] != 0.0);
    }
  }
  return out;
}

}  // namespace sste
