#pragma once

// Objectives: the detection loss shared by both branches (teacher form is the
// matched form with no unmatched set), the attention/embedding distillation
// losses, and the total objective combining them. Loss values are reported in
// double so the logged decomposition is exact regardless of the training
// scalar type.

#include "kad/autodiff.hpp"
#include "kad/geometry.hpp"
#include "kad/model.hpp"

#include <array>
#include <cmath>
#include <stdexcept>
#include <string>

namespace kad {

struct LossWeights {
  double lambda = 5.0;  // box-vs-score balance inside the detection losses
  double alpha = 0.2;   // distillation weight in the total objective
  double eta = 1.0;     // attention-vs-embedding balance inside L_distill

  void check() const {
    for (double v : {lambda, alpha, eta}) {
      if (!std::isfinite(v) || v < 0.0) {
        throw std::invalid_argument("LossWeights: weights must be finite and >= 0");
      }
    }
  }
};

enum class DistillMode { off, emb, emb_attn };

inline const char* to_string(DistillMode m) {
  switch (m) {
    case DistillMode::off: return "off";
    case DistillMode::emb: return "emb";
    default: return "emb+attn";
  }
}

inline DistillMode distill_mode_from_string(const std::string& s) {
  if (s == "off") return DistillMode::off;
  if (s == "emb") return DistillMode::emb;
  if (s == "emb+attn" || s == "emb_attn" || s == "emb&attn") return DistillMode::emb_attn;
  throw std::invalid_argument("unknown distill mode: " + s);
}

struct LossReport {
  double l_v = 0, l_k = 0, l_emb = 0, l_attn = 0, l_distill = 0, total = 0;
};

// ---------------------------------------------------------------------------
// Differentiable pieces
// ---------------------------------------------------------------------------

// Mean binary cross-entropy of probabilities against a constant target.
// Probabilities are clamped to [eps, 1-eps] to keep the value finite;
// clamped entries get zero gradient.
template <typename T>
ad::Var<T> bce_mean(const ad::Var<T>& probs, T target, T eps = static_cast<T>(1e-7)) {
  const std::int64_t n = probs.value().numel();
  if (n == 0) throw std::invalid_argument("bce_mean: empty input");
  T total = T(0);
  for (std::int64_t i = 0; i < n; ++i) {
    const T p = std::min(std::max(probs.value()[i], eps), T(1) - eps);
    total += -(target * std::log(p) + (T(1) - target) * std::log(T(1) - p));
  }
  total /= static_cast<T>(n);
  auto pp = probs.node();
  return ad::detail::make_op<T>(
      Tensor<T>({1}, {total}), {pp},
      [pp, target, eps, n](const Tensor<T>& g, ad::GradStore<T>& gs) {
        Tensor<T>& dp = gs.buffer(pp);
        for (std::int64_t i = 0; i < n; ++i) {
          const T raw = pp->value[i];
          if (raw <= eps || raw >= T(1) - eps) continue;
          dp[i] += g[0] * (raw - target) / (raw * (T(1) - raw)) / static_cast<T>(n);
        }
      });
}

// giou_loss + box_l1 of a predicted (cx, cy, w, h) row against a fixed
// ground-truth box. Geometry and its analytic gradient run in double.
template <typename T>
ad::Var<T> box_regression_loss(const ad::Var<T>& box, const BoxN& gt) {
  if (box.value().numel() != 4) {
    throw std::invalid_argument("box_regression_loss: expected 4 coordinates");
  }
  const BoxN pred{static_cast<double>(box.value()[0]), static_cast<double>(box.value()[1]),
                  static_cast<double>(box.value()[2]), static_cast<double>(box.value()[3])};
  std::array<double, 4> dg_pred{}, dg_gt{}, dl_pred{}, dl_gt{};
  const double loss =
      giou_loss_grad_center(pred, gt, dg_pred, dg_gt) + box_l1_grad(pred, gt, dl_pred, dl_gt);
  auto pb = box.node();
  std::array<double, 4> grad{};
  for (int i = 0; i < 4; ++i) grad[i] = dg_pred[i] + dl_pred[i];
  return ad::detail::make_op<T>(
      Tensor<T>({1}, {static_cast<T>(loss)}), {pb},
      [pb, grad](const Tensor<T>& g, ad::GradStore<T>& gs) {
        Tensor<T>& db = gs.buffer(pb);
        for (int i = 0; i < 4; ++i) db[i] += g[0] * static_cast<T>(grad[i]);
      });
}

// KL(target || approx) for two rows on the simplex. The target side is
// typically detached (teacher); gradients flow to whichever side requires
// them. Rows whose mass deviates from 1 by more than 1e-4 violate the
// attention contract and are rejected.
template <typename T>
ad::Var<T> kl_divergence_row(const ad::Var<T>& target, const ad::Var<T>& approx) {
  ad::detail::check_same_shape(target.value(), approx.value(), "kl_divergence_row");
  const std::int64_t n = target.value().numel();
  auto check_simplex = [n](const Tensor<T>& row, const char* side) {
    T sum = T(0);
    for (std::int64_t i = 0; i < n; ++i) {
      if (row[i] < T(0)) {
        throw std::invalid_argument(std::string("kl_divergence_row: negative mass in ") +
                                    side + " row");
      }
      sum += row[i];
    }
    if (std::abs(static_cast<double>(sum) - 1.0) > 1e-4) {
      throw std::invalid_argument(std::string("kl_divergence_row: ") + side +
                                  " row mass deviates from 1 by more than 1e-4 (sum=" +
                                  std::to_string(static_cast<double>(sum)) + ")");
    }
  };
  check_simplex(target.value(), "target");
  check_simplex(approx.value(), "approx");

  const T floor = static_cast<T>(1e-30);
  T value = T(0);
  for (std::int64_t i = 0; i < n; ++i) {
    const T t = target.value()[i];
    if (t <= T(0)) continue;
    const T s = std::max(approx.value()[i], floor);
    value += t * (std::log(t) - std::log(s));
  }
  auto pt = target.node(), ps = approx.node();
  return ad::detail::make_op<T>(
      Tensor<T>({1}, {value}), {pt, ps},
      [pt, ps, n, floor](const Tensor<T>& g, ad::GradStore<T>& gs) {
        if (ps->requires_grad) {
          Tensor<T>& dst = gs.buffer(ps);
          for (std::int64_t i = 0; i < n; ++i) {
            const T t = pt->value[i];
            if (t <= T(0)) continue;
            const T s = std::max(ps->value[i], floor);
            dst[i] += -g[0] * t / s;
          }
        }
        if (pt->requires_grad) {
          Tensor<T>& dt = gs.buffer(pt);
          for (std::int64_t i = 0; i < n; ++i) {
            const T t = pt->value[i];
            if (t <= T(0)) continue;
            const T s = std::max(ps->value[i], floor);
            dt[i] += g[0] * (std::log(t) - std::log(s) + T(1));
          }
        }
      });
}

// 1 - cosine similarity of two embedding rows.
template <typename T>
ad::Var<T> cosine_loss(const ad::Var<T>& a, const ad::Var<T>& b) {
  ad::detail::check_same_shape(a.value(), b.value(), "cosine_loss");
  const std::int64_t n = a.value().numel();
  double dot = 0, na2 = 0, nb2 = 0;
  for (std::int64_t i = 0; i < n; ++i) {
    const double av = static_cast<double>(a.value()[i]);
    const double bv = static_cast<double>(b.value()[i]);
    dot += av * bv;
    na2 += av * av;
    nb2 += bv * bv;
  }
  const double na = std::sqrt(na2), nb = std::sqrt(nb2);
  if (na <= 1e-12 || nb <= 1e-12) {
    throw std::invalid_argument("cosine_loss: degenerate embedding with zero norm");
  }
  const double cos = dot / (na * nb);
  auto pa = a.node(), pb = b.node();
  return ad::detail::make_op<T>(
      Tensor<T>({1}, {static_cast<T>(1.0 - cos)}), {pa, pb},
      [pa, pb, n, dot, na, nb, cos](const Tensor<T>& g, ad::GradStore<T>& gs) {
        // d(1-cos)/da = -(b/(na*nb) - cos*a/na^2); same with roles swapped.
        if (pa->requires_grad) {
          Tensor<T>& da = gs.buffer(pa);
          for (std::int64_t i = 0; i < n; ++i) {
            const double av = static_cast<double>(pa->value[i]);
            const double bv = static_cast<double>(pb->value[i]);
            da[i] += g[0] * static_cast<T>(-(bv / (na * nb) - cos * av / (na * na)));
          }
        }
        if (pb->requires_grad) {
          Tensor<T>& db = gs.buffer(pb);
          for (std::int64_t i = 0; i < n; ++i) {
            const double av = static_cast<double>(pa->value[i]);
            const double bv = static_cast<double>(pb->value[i]);
            db[i] += g[0] * static_cast<T>(-(av / (na * nb) - cos * bv / (nb * nb)));
          }
        }
      });
}

// ---------------------------------------------------------------------------
// Spec-level losses
// ---------------------------------------------------------------------------

// Detection loss (Eq. 1 for the student, Eq. 3 for the teacher):
//   BCE(1, s_i) + lambda * (giou_loss(b, b_i) + ||b - b_i||_1)
// plus, when negative supervision is enabled and an unmatched set is given,
// the mean BCE of unmatched scores against 0. The teacher invocation passes
// an undefined unmatched set and reduces exactly to Eq. 3.
template <typename T>
ad::Var<T> detection_loss(const ad::Var<T>& matched_score, const ad::Var<T>& matched_box,
                          const BoxN& gt, const ad::Var<T>& unmatched_scores,
                          double lambda, bool negative_supervision = true) {
  if (matched_score.value().numel() != 1) {
    throw std::invalid_argument("detection_loss: matched score must be scalar");
  }
  auto loss = ad::add(bce_mean(matched_score, T(1)),
                      ad::scale(box_regression_loss(matched_box, gt), static_cast<T>(lambda)));
  if (negative_supervision && unmatched_scores.defined() &&
      unmatched_scores.value().numel() > 0) {
    loss = ad::add(loss, bce_mean(unmatched_scores, T(0)));
  }
  return loss;
}

namespace detail {
template <typename T>
void check_trace_pair(const DecoderTrace<T>& teacher, const DecoderTrace<T>& student,
                      int matched_index, const char* op) {
  if (teacher.layers() != student.layers()) {
    throw std::invalid_argument(std::string(op) + ": layer count mismatch");
  }
  if (teacher.layers() == 0) {
    throw std::invalid_argument(std::string(op) + ": empty traces");
  }
  if (teacher.feat_h != student.feat_h || teacher.feat_w != student.feat_w) {
    throw std::invalid_argument(std::string(op) + ": spatial size mismatch");
  }
  if (matched_index < 0 || matched_index >= student.k()) {
    throw std::out_of_range(std::string(op) + ": matched index out of range");
  }
}
}  // namespace detail

// L_attn = sum_l KL(A_t^l || A_{s,i}^l). Teacher rows are targets and carry
// no gradient.
template <typename T>
ad::Var<T> attn_distill_loss(const DecoderTrace<T>& teacher, const DecoderTrace<T>& student,
                             int matched_index) {
  detail::check_trace_pair(teacher, student, matched_index, "attn_distill_loss");
  ad::Var<T> total;
  for (int l = 0; l < teacher.layers(); ++l) {
    auto t_row = ad::detach(ad::slice_rows(teacher.attention[l], 0, 1));
    auto s_row = ad::slice_rows(student.attention[l], matched_index, 1);
    auto kl = kl_divergence_row(t_row, s_row);
    total = total.defined() ? ad::add(total, kl) : kl;
  }
  return total;
}

// L_emb = sum_l (1 - cos(O_t^l, O_{s,i}^l)). Teacher embeddings detached.
template <typename T>
ad::Var<T> emb_distill_loss(const DecoderTrace<T>& teacher, const DecoderTrace<T>& student,
                            int matched_index) {
  detail::check_trace_pair(teacher, student, matched_index, "emb_distill_loss");
  ad::Var<T> total;
  for (int l = 0; l < teacher.layers(); ++l) {
    auto t_row = ad::detach(ad::slice_rows(teacher.embeddings[l], 0, 1));
    auto s_row = ad::slice_rows(student.embeddings[l], matched_index, 1);
    auto cl = cosine_loss(t_row, s_row);
    total = total.defined() ? ad::add(total, cl) : cl;
  }
  return total;
}

// Eq. 5: L = L_v + L_k + alpha * L_distill with L_distill = L_emb + eta * L_attn.
// The distill mode zeroes the disabled components so the reported breakdown
// reflects the configuration exactly and the report invariants always hold.
inline LossReport total_objective(double l_v, double l_k, double l_emb, double l_attn,
                                  const LossWeights& w,
                                  DistillMode mode = DistillMode::emb_attn) {
  w.check();
  for (double v : {l_v, l_k, l_emb, l_attn}) {
    if (!std::isfinite(v)) {
      throw std::invalid_argument("total_objective: non-finite loss component");
    }
  }
  LossReport r;
  r.l_v = l_v;
  r.l_k = l_k;
  r.l_emb = mode == DistillMode::off ? 0.0 : l_emb;
  r.l_attn = mode == DistillMode::emb_attn ? l_attn : 0.0;
  r.l_distill = r.l_emb + w.eta * r.l_attn;
  r.total = r.l_v + r.l_k + w.alpha * r.l_distill;
  return r;
}

}  // namespace kad
