#pragma once

#include "poseforge/core.hpp"

#include <algorithm>
#include <cmath>
#include <vector>

namespace poseforge {

/// Single deterministic dot-product kernel: fixed four-lane accumulation,
/// identical on every call site. Every cosine comparison in the pipeline and
/// in its test oracles goes through here, so a ranking can never flip because
/// two code paths summed in different orders.
inline float dot_product(const float* a, const float* b, int n) {
  float s0 = 0.f, s1 = 0.f, s2 = 0.f, s3 = 0.f;
  int i = 0;
  for (; i + 4 <= n; i += 4) {
    s0 += a[i] * b[i];
    s1 += a[i + 1] * b[i + 1];
    s2 += a[i + 2] * b[i + 2];
    s3 += a[i + 3] * b[i + 3];
  }
  for (; i < n; ++i) s0 += a[i] * b[i];
  return ((s0 + s1) + (s2 + s3));
}

inline float vector_norm(const float* a, int n) {
  return std::sqrt(dot_product(a, a, n));
}

inline float cosine_similarity(const float* a, const float* b, int n) {
  const float na = vector_norm(a, n);
  const float nb = vector_norm(b, n);
  if (na <= 0.f || nb <= 0.f) throw ZeroVectorError("cosine of a zero vector");
  return dot_product(a, b, n) / (na * nb);
}

/// One target-to-query match. similarity is the cosine of the fused
/// descriptors.
struct Correspondence {
  int target_idx = -1;
  int query_idx = -1;
  float similarity = 0.f;
};

/// For each target point, the k most cosine-similar query points. Output is
/// grouped by ascending target index; within a group similarity is
/// non-increasing with ties broken toward the smaller query index. Row norms
/// are hoisted out of the pair loop, which leaves every similarity value
/// bit-identical to cosine_similarity on the raw rows.
inline std::vector<Correspondence> topk_correspondences(
    const FeatureCloud& target, const FeatureCloud& query, int k) {
  if (target.dim() != query.dim()) {
    throw DimMismatchError("descriptor dimensions differ");
  }
  const int nt = target.size(), nq = query.size(), d = target.dim();
  if (k < 1 || k > nq) throw Error("k must be in [1, query size]");

  std::vector<float> tnorm(static_cast<size_t>(nt)), qnorm(static_cast<size_t>(nq));
  for (int i = 0; i < nt; ++i) {
    tnorm[size_t(i)] = vector_norm(target.descriptors.row(i).data(), d);
    if (tnorm[size_t(i)] <= 0.f) {
      throw ZeroVectorError("target descriptor has zero norm");
    }
  }
  for (int i = 0; i < nq; ++i) {
    qnorm[size_t(i)] = vector_norm(query.descriptors.row(i).data(), d);
    if (qnorm[size_t(i)] <= 0.f) {
      throw ZeroVectorError("query descriptor has zero norm");
    }
  }

  std::vector<Correspondence> out;
  out.reserve(size_t(nt) * size_t(k));
  std::vector<std::pair<float, int>> sims(static_cast<size_t>(nq));
  auto better = [](const std::pair<float, int>& a,
                   const std::pair<float, int>& b) {
    return a.first != b.first ? a.first > b.first : a.second < b.second;
  };
  for (int t = 0; t < nt; ++t) {
    const float* trow = target.descriptors.row(t).data();
    for (int q = 0; q < nq; ++q) {
      const float sim = dot_product(trow, query.descriptors.row(q).data(), d) /
                        (tnorm[size_t(t)] * qnorm[size_t(q)]);
      sims[size_t(q)] = {sim, q};
    }
    std::nth_element(sims.begin(), sims.begin() + (k - 1), sims.end(), better);
    std::sort(sims.begin(), sims.begin() + k, better);
    for (int i = 0; i < k; ++i) {
      out.push_back({t, sims[size_t(i)].second, sims[size_t(i)].first});
    }
  }
  return out;
}

}  // namespace poseforge
