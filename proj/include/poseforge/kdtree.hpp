#pragma once

#include "poseforge/core.hpp"

#include <algorithm>
#include <cmath>
#include <limits>
#include <numeric>
#include <vector>

namespace poseforge {

/// Static kd-tree over a point matrix. Splits on the axis of largest extent at
/// the median; ties on query distance break toward the smaller point index so
/// lookups are independent of build order details.
class KdTree3 {
 public:
  KdTree3() = default;

  explicit KdTree3(const PointMatrix& points) : pts_(points) {
    const int n = static_cast<int>(pts_.rows());
    order_.resize(size_t(n));
    std::iota(order_.begin(), order_.end(), 0);
    nodes_.reserve(size_t(2 * n / kLeafSize + 2));
    if (n > 0) root_ = build(0, n);
  }

  int size() const { return static_cast<int>(pts_.rows()); }

  /// Index of the nearest point and its squared distance. Tree must be
  /// non-empty.
  std::pair<int, float> nearest(const Eigen::Vector3f& q) const {
    Best best{-1, std::numeric_limits<float>::infinity()};
    search(root_, q, best);
    return {best.index, best.dist2};
  }

  /// Indices of all points within `radius` of q, ascending.
  std::vector<int> radius_indices(const Eigen::Vector3f& q,
                                  float radius) const {
    std::vector<int> out;
    if (root_ >= 0) radius_search(root_, q, radius * radius, out);
    std::sort(out.begin(), out.end());
    return out;
  }

  const PointMatrix& points() const { return pts_; }

 private:
  static constexpr int kLeafSize = 8;

  struct Node {
    float split = 0;
    int axis = -1;  // -1 marks a leaf
    int left = -1, right = -1;
    int begin = 0, end = 0;  // leaf range into order_
  };

  struct Best {
    int index;
    float dist2;
  };

  int build(int begin, int end) {
    Node node;
    if (end - begin <= kLeafSize) {
      node.begin = begin;
      node.end = end;
      // Ascending leaf order keeps equal-distance resolution index-based.
      std::sort(order_.begin() + begin, order_.begin() + end);
      nodes_.push_back(node);
      return static_cast<int>(nodes_.size()) - 1;
    }
    Eigen::Vector3f lo = pts_.row(order_[size_t(begin)]);
    Eigen::Vector3f hi = lo;
    for (int i = begin + 1; i < end; ++i) {
      const Eigen::Vector3f p = pts_.row(order_[size_t(i)]);
      lo = lo.cwiseMin(p);
      hi = hi.cwiseMax(p);
    }
    int axis = 0;
    (hi - lo).maxCoeff(&axis);
    const int mid = begin + (end - begin) / 2;
    std::nth_element(order_.begin() + begin, order_.begin() + mid,
                     order_.begin() + end, [&](int a, int b) {
                       const float pa = pts_(a, axis), pb = pts_(b, axis);
                       return pa != pb ? pa < pb : a < b;
                     });
    node.axis = axis;
    node.split = pts_(order_[size_t(mid)], axis);
    const int self = static_cast<int>(nodes_.size());
    nodes_.push_back(node);
    const int left = build(begin, mid);
    const int right = build(mid, end);
    nodes_[size_t(self)].left = left;
    nodes_[size_t(self)].right = right;
    return self;
  }

  void search(int ni, const Eigen::Vector3f& q, Best& best) const {
    const Node& node = nodes_[size_t(ni)];
    if (node.axis < 0) {
      for (int i = node.begin; i < node.end; ++i) {
        const int idx = order_[size_t(i)];
        const float d2 = (pts_.row(idx).transpose() - q).squaredNorm();
        if (d2 < best.dist2 || (d2 == best.dist2 && idx < best.index)) {
          best = {idx, d2};
        }
      }
      return;
    }
    const float delta = q[node.axis] - node.split;
    const int first = delta < 0 ? node.left : node.right;
    const int second = delta < 0 ? node.right : node.left;
    search(first, q, best);
    if (delta * delta <= best.dist2) search(second, q, best);
  }

  void radius_search(int ni, const Eigen::Vector3f& q, float r2,
                     std::vector<int>& out) const {
    const Node& node = nodes_[size_t(ni)];
    if (node.axis < 0) {
      for (int i = node.begin; i < node.end; ++i) {
        const int idx = order_[size_t(i)];
        if ((pts_.row(idx).transpose() - q).squaredNorm() <= r2) {
          out.push_back(idx);
        }
      }
      return;
    }
    const float delta = q[node.axis] - node.split;
    const int first = delta < 0 ? node.left : node.right;
    const int second = delta < 0 ? node.right : node.left;
    radius_search(first, q, r2, out);
    if (delta * delta <= r2) radius_search(second, q, r2, out);
  }

  PointMatrix pts_;
  std::vector<int> order_;
  std::vector<Node> nodes_;
  int root_ = -1;
};

}  // namespace poseforge
