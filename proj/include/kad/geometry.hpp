#pragma once

// Normalized bounding boxes and the IoU / GIoU / L1 primitives behind every
// matching cost and regression loss. All geometry runs in double; analytic
// gradients are provided for the differentiable losses and are checked
// against central finite differences in the test suite.

#include <algorithm>
#include <array>
#include <cmath>
#include <stdexcept>
#include <string>

namespace kad {

// Center-parameterized normalized box: fractions of image width/height.
struct BoxN {
  double cx = 0.5, cy = 0.5, w = 1.0, h = 1.0;
};

// Corner form used for area arithmetic. Corners may exceed [0,1]; only the
// ordering invariants x1<=x2, y1<=y2 are required.
struct BoxCorners {
  double x1 = 0, y1 = 0, x2 = 1, y2 = 1;
};

constexpr double kMinBoxSide = 1e-8;

inline void validate(const BoxN& b) {
  if (!(b.w > kMinBoxSide) || !(b.h > kMinBoxSide)) {
    throw std::invalid_argument("invalid box: nonpositive or degenerate size w=" +
                                std::to_string(b.w) + " h=" + std::to_string(b.h));
  }
  if (!(b.cx >= 0.0 && b.cx <= 1.0 && b.cy >= 0.0 && b.cy <= 1.0) ||
      !(b.w <= 1.0 && b.h <= 1.0)) {
    throw std::invalid_argument("invalid box: coordinates outside normalized range");
  }
}

inline void validate(const BoxCorners& c) {
  if (!(c.x1 <= c.x2) || !(c.y1 <= c.y2)) {
    throw std::invalid_argument("invalid corners: x1<=x2, y1<=y2 required");
  }
}

inline BoxN make_box(double cx, double cy, double w, double h) {
  BoxN b{cx, cy, w, h};
  validate(b);
  return b;
}

// Pure algebraic conversion; round-trips exactly, no clamping.
inline BoxCorners box_convert(const BoxN& b) {
  validate(b);
  return {b.cx - b.w / 2, b.cy - b.h / 2, b.cx + b.w / 2, b.cy + b.h / 2};
}

inline BoxN box_convert(const BoxCorners& c) {
  validate(c);
  BoxN b{(c.x1 + c.x2) / 2, (c.y1 + c.y2) / 2, c.x2 - c.x1, c.y2 - c.y1};
  if (!(b.w > kMinBoxSide) || !(b.h > kMinBoxSide)) {
    throw std::invalid_argument("invalid box: corner form has degenerate size");
  }
  return b;
}

// Corners clamped to the image; rendering and exports use this form.
inline BoxCorners corners_clamped(const BoxN& b) {
  BoxCorners c = box_convert(b);
  c.x1 = std::clamp(c.x1, 0.0, 1.0);
  c.y1 = std::clamp(c.y1, 0.0, 1.0);
  c.x2 = std::clamp(c.x2, 0.0, 1.0);
  c.y2 = std::clamp(c.y2, 0.0, 1.0);
  return c;
}

inline double iou(const BoxCorners& a, const BoxCorners& b) {
  validate(a);
  validate(b);
  const double iw = std::min(a.x2, b.x2) - std::max(a.x1, b.x1);
  const double ih = std::min(a.y2, b.y2) - std::max(a.y1, b.y1);
  if (iw <= 0.0 || ih <= 0.0) return 0.0;
  const double inter = iw * ih;
  const double area_a = (a.x2 - a.x1) * (a.y2 - a.y1);
  const double area_b = (b.x2 - b.x1) * (b.y2 - b.y1);
  return inter / (area_a + area_b - inter);
}

inline double iou(const BoxN& a, const BoxN& b) {
  return iou(box_convert(a), box_convert(b));
}

// 1 - GIoU, in [0, 2]. GIoU = IoU - |C \ (A u B)| / |C| with C the smallest
// enclosing box. |C| > 0 for valid boxes, so the penalty is always defined.
inline double giou_loss(const BoxCorners& a, const BoxCorners& b) {
  validate(a);
  validate(b);
  const double iw = std::max(0.0, std::min(a.x2, b.x2) - std::max(a.x1, b.x1));
  const double ih = std::max(0.0, std::min(a.y2, b.y2) - std::max(a.y1, b.y1));
  const double inter = iw * ih;
  const double area_a = (a.x2 - a.x1) * (a.y2 - a.y1);
  const double area_b = (b.x2 - b.x1) * (b.y2 - b.y1);
  const double uni = area_a + area_b - inter;
  const double cw = std::max(a.x2, b.x2) - std::min(a.x1, b.x1);
  const double ch = std::max(a.y2, b.y2) - std::min(a.y1, b.y1);
  const double enclose = cw * ch;
  const double giou = inter / uni - (enclose - uni) / enclose;
  return 1.0 - giou;
}

inline double giou_loss(const BoxN& a, const BoxN& b) {
  return giou_loss(box_convert(a), box_convert(b));
}

// L1 distance in (cx, cy, w, h) space.
inline double box_l1(const BoxN& a, const BoxN& b) {
  validate(a);
  validate(b);
  return std::abs(a.cx - b.cx) + std::abs(a.cy - b.cy) + std::abs(a.w - b.w) +
         std::abs(a.h - b.h);
}

// ---------------------------------------------------------------------------
// Analytic gradients
// ---------------------------------------------------------------------------

// d(giou_loss)/d corners of a and b. Subgradients at min/max ties follow the
// first argument; finite-difference checks avoid tie configurations.
inline double giou_loss_grad(const BoxCorners& a, const BoxCorners& b,
                             std::array<double, 4>& da, std::array<double, 4>& db) {
  validate(a);
  validate(b);
  const double iw_raw = std::min(a.x2, b.x2) - std::max(a.x1, b.x1);
  const double ih_raw = std::min(a.y2, b.y2) - std::max(a.y1, b.y1);
  const bool overlap = iw_raw > 0.0 && ih_raw > 0.0;
  const double iw = std::max(0.0, iw_raw);
  const double ih = std::max(0.0, ih_raw);
  const double inter = iw * ih;
  const double aw = a.x2 - a.x1, ah = a.y2 - a.y1;
  const double bw = b.x2 - b.x1, bh = b.y2 - b.y1;
  const double area_a = aw * ah, area_b = bw * bh;
  const double uni = area_a + area_b - inter;
  const double cw = std::max(a.x2, b.x2) - std::min(a.x1, b.x1);
  const double ch = std::max(a.y2, b.y2) - std::min(a.y1, b.y1);
  const double enclose = cw * ch;

  // Partials of the primitive areas w.r.t. each coordinate.
  // Order within arrays: x1, y1, x2, y2.
  std::array<double, 4> dA_a{-ah, -aw, ah, aw};
  std::array<double, 4> dB_b{-bh, -bw, bh, bw};

  std::array<double, 4> dI_a{0, 0, 0, 0}, dI_b{0, 0, 0, 0};
  if (overlap) {
    const double diw_ax1 = (a.x1 >= b.x1) ? -1.0 : 0.0;
    const double diw_ax2 = (a.x2 <= b.x2) ? 1.0 : 0.0;
    const double dih_ay1 = (a.y1 >= b.y1) ? -1.0 : 0.0;
    const double dih_ay2 = (a.y2 <= b.y2) ? 1.0 : 0.0;
    dI_a = {diw_ax1 * ih, dih_ay1 * iw, diw_ax2 * ih, dih_ay2 * iw};
    const double diw_bx1 = (b.x1 > a.x1) ? -1.0 : 0.0;
    const double diw_bx2 = (b.x2 < a.x2) ? 1.0 : 0.0;
    const double dih_by1 = (b.y1 > a.y1) ? -1.0 : 0.0;
    const double dih_by2 = (b.y2 < a.y2) ? 1.0 : 0.0;
    dI_b = {diw_bx1 * ih, dih_by1 * iw, diw_bx2 * ih, dih_by2 * iw};
  }

  const double dcw_ax1 = (a.x1 <= b.x1) ? -1.0 : 0.0;
  const double dcw_ax2 = (a.x2 >= b.x2) ? 1.0 : 0.0;
  const double dch_ay1 = (a.y1 <= b.y1) ? -1.0 : 0.0;
  const double dch_ay2 = (a.y2 >= b.y2) ? 1.0 : 0.0;
  std::array<double, 4> dC_a{dcw_ax1 * ch, dch_ay1 * cw, dcw_ax2 * ch, dch_ay2 * cw};
  const double dcw_bx1 = (b.x1 < a.x1) ? -1.0 : 0.0;
  const double dcw_bx2 = (b.x2 > a.x2) ? 1.0 : 0.0;
  const double dch_by1 = (b.y1 < a.y1) ? -1.0 : 0.0;
  const double dch_by2 = (b.y2 > a.y2) ? 1.0 : 0.0;
  std::array<double, 4> dC_b{dcw_bx1 * ch, dch_by1 * cw, dcw_bx2 * ch, dch_by2 * cw};

  // GIoU = I/U - 1 + U/C; loss = 1 - GIoU.
  // dGIoU = (dI*U - I*dU)/U^2 + (dU*C - U*dC)/C^2, with dU = dA + dB - dI.
  const double u2 = uni * uni, c2 = enclose * enclose;
  for (int i = 0; i < 4; ++i) {
    const double dU_a = dA_a[i] - dI_a[i];
    const double dgiou_a =
        (dI_a[i] * uni - inter * dU_a) / u2 + (dU_a * enclose - uni * dC_a[i]) / c2;
    da[i] = -dgiou_a;
    const double dU_b = dB_b[i] - dI_b[i];
    const double dgiou_b =
        (dI_b[i] * uni - inter * dU_b) / u2 + (dU_b * enclose - uni * dC_b[i]) / c2;
    db[i] = -dgiou_b;
  }
  const double giou = inter / uni - (enclose - uni) / enclose;
  return 1.0 - giou;
}

// Same loss with boxes in center form; gradients w.r.t. (cx, cy, w, h).
inline double giou_loss_grad_center(const BoxN& a, const BoxN& b,
                                    std::array<double, 4>& da,
                                    std::array<double, 4>& db) {
  std::array<double, 4> dca{}, dcb{};
  const double loss = giou_loss_grad(box_convert(a), box_convert(b), dca, dcb);
  // x1 = cx - w/2, x2 = cx + w/2 (same for y/h).
  da = {dca[0] + dca[2], dca[1] + dca[3], (dca[2] - dca[0]) / 2, (dca[3] - dca[1]) / 2};
  db = {dcb[0] + dcb[2], dcb[1] + dcb[3], (dcb[2] - dcb[0]) / 2, (dcb[3] - dcb[1]) / 2};
  return loss;
}

// box_l1 with sign subgradients in (cx, cy, w, h) space.
inline double box_l1_grad(const BoxN& a, const BoxN& b, std::array<double, 4>& da,
                          std::array<double, 4>& db) {
  validate(a);
  validate(b);
  const std::array<double, 4> diff{a.cx - b.cx, a.cy - b.cy, a.w - b.w, a.h - b.h};
  double loss = 0.0;
  for (int i = 0; i < 4; ++i) {
    loss += std::abs(diff[i]);
    const double s = diff[i] > 0.0 ? 1.0 : (diff[i] < 0.0 ? -1.0 : 0.0);
    da[i] = s;
    db[i] = -s;
  }
  return loss;
}

}  // namespace kad
