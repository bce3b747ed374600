#pragma once

// Bipartite matching between predictions and ground truths. The task has a
// single active object per record, so matching usually degenerates to an
// argmin over predictions, but the general K-to-m assignment is implemented
// so multi-target inputs work unchanged.

#include "kad/geometry.hpp"
#include "kad/tensor.hpp"

#include <cmath>
#include <limits>
#include <stdexcept>
#include <utility>
#include <vector>

namespace kad {

struct MatchCost {
  double lambda = 5.0;
};

struct Assignment {
  // (prediction index, ground-truth index); one pair per ground truth.
  std::vector<std::pair<int, int>> pairs;
  double total_cost = 0.0;
};

// L_match(i) = -score_i + lambda * (giou_loss + l1). May be negative.
inline double match_cost(double score, const BoxN& pred, const BoxN& gt,
                         const MatchCost& params) {
  if (!(score >= 0.0 && score <= 1.0)) {
    throw std::invalid_argument("match_cost: score outside [0,1]");
  }
  if (!std::isfinite(params.lambda)) {
    throw std::invalid_argument("match_cost: non-finite lambda");
  }
  return -score + params.lambda * (giou_loss(pred, gt) + box_l1(pred, gt));
}

namespace detail {
inline void check_cost_matrix(const Tensor<double>& cost) {
  if (cost.ndim() != 2 || cost.rows() < 1 || cost.cols() < 1) {
    throw std::invalid_argument("assignment: cost matrix must be non-empty 2D");
  }
  if (!cost.all_finite()) {
    throw std::invalid_argument("assignment: cost matrix has non-finite entries");
  }
}
}  // namespace detail

// Minimum-cost assignment of K ground truths (columns) to m predictions
// (rows), m >= K. Shortest-augmenting-path Hungarian with potentials,
// O(K * m^2). Deterministic.
inline Assignment hungarian_assign(const Tensor<double>& cost) {
  detail::check_cost_matrix(cost);
  const int m = cost.rows();  // predictions
  const int K = cost.cols();  // ground truths
  if (m < K) {
    throw std::invalid_argument("hungarian_assign: infeasible, fewer predictions (" +
                                std::to_string(m) + ") than ground truths (" +
                                std::to_string(K) + ")");
  }
  constexpr double kInf = std::numeric_limits<double>::infinity();
  // 1-indexed potentials; rows of the internal problem are ground truths.
  std::vector<double> u(K + 1, 0.0), v(m + 1, 0.0);
  std::vector<int> p(m + 1, 0), way(m + 1, 0);
  for (int i = 1; i <= K; ++i) {
    p[0] = i;
    int j0 = 0;
    std::vector<double> minv(m + 1, kInf);
    std::vector<bool> used(m + 1, false);
    do {
      used[j0] = true;
      const int i0 = p[j0];
      double delta = kInf;
      int j1 = -1;
      for (int j = 1; j <= m; ++j) {
        if (used[j]) continue;
        const double cur = cost.at(j - 1, i0 - 1) - u[i0] - v[j];
        if (cur < minv[j]) {
          minv[j] = cur;
          way[j] = j0;
        }
        if (minv[j] < delta) {
          delta = minv[j];
          j1 = j;
        }
      }
      for (int j = 0; j <= m; ++j) {
        if (used[j]) {
          u[p[j]] += delta;
          v[j] -= delta;
        } else {
          minv[j] -= delta;
        }
      }
      j0 = j1;
    } while (p[j0] != 0);
    do {
      const int j1 = way[j0];
      p[j0] = p[j1];
      j0 = j1;
    } while (j0 != 0);
  }
  Assignment result;
  result.pairs.resize(K);
  for (int j = 1; j <= m; ++j) {
    if (p[j] != 0) {
      result.pairs[p[j] - 1] = {j - 1, p[j] - 1};
      result.total_cost += cost.at(j - 1, p[j] - 1);
    }
  }
  return result;
}

// Exact minimum by enumerating all injections from ground truths to
// predictions. Test oracle; factorial, hence the size cap.
inline Assignment brute_force_assign(const Tensor<double>& cost) {
  detail::check_cost_matrix(cost);
  const int m = cost.rows();
  const int K = cost.cols();
  if (m > 8) {
    throw std::invalid_argument("brute_force_assign: m > 8 not supported");
  }
  if (m < K) {
    throw std::invalid_argument("brute_force_assign: infeasible, m < K");
  }
  Assignment best;
  best.total_cost = std::numeric_limits<double>::infinity();
  std::vector<int> chosen(K, -1);
  std::vector<bool> used(m, false);
  double running = 0.0;
  auto recurse = [&](auto&& self, int gt) -> void {
    if (gt == K) {
      if (running < best.total_cost) {
        best.total_cost = running;
        best.pairs.clear();
        for (int g = 0; g < K; ++g) best.pairs.emplace_back(chosen[g], g);
      }
      return;
    }
    for (int pred = 0; pred < m; ++pred) {
      if (used[pred]) continue;
      used[pred] = true;
      chosen[gt] = pred;
      running += cost.at(pred, gt);
      self(self, gt + 1);
      running -= cost.at(pred, gt);
      used[pred] = false;
    }
  };
  recurse(recurse, 0);
  return best;
}

}  // namespace kad
