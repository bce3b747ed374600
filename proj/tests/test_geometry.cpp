#include "kad/geometry.hpp"
#include "kad/random.hpp"

#include <gtest/gtest.h>

#include <array>
#include <cmath>

using namespace kad;

namespace {

BoxN random_box(Rng& rng) {
  const double w = rng.uniform(0.05, 0.9);
  const double h = rng.uniform(0.05, 0.9);
  return make_box(rng.uniform(), rng.uniform(), w, h);
}

}  // namespace

TEST(BoxConvert, FullImageBox) {
  const BoxCorners c = box_convert(BoxN{0.5, 0.5, 1, 1});
  EXPECT_DOUBLE_EQ(c.x1, 0.0);
  EXPECT_DOUBLE_EQ(c.y1, 0.0);
  EXPECT_DOUBLE_EQ(c.x2, 1.0);
  EXPECT_DOUBLE_EQ(c.y2, 1.0);
}

TEST(BoxConvert, CenteredHalfBox) {
  const BoxCorners c = box_convert(BoxN{0.5, 0.5, 0.5, 0.5});
  EXPECT_DOUBLE_EQ(c.x1, 0.25);
  EXPECT_DOUBLE_EQ(c.y1, 0.25);
  EXPECT_DOUBLE_EQ(c.x2, 0.75);
  EXPECT_DOUBLE_EQ(c.y2, 0.75);
}

TEST(BoxConvert, RoundTripsWithin1em12) {
  Rng rng(42);
  for (int i = 0; i < 1000; ++i) {
    const BoxN b = random_box(rng);
    const BoxN back = box_convert(box_convert(b));
    EXPECT_NEAR(back.cx, b.cx, 1e-12);
    EXPECT_NEAR(back.cy, b.cy, 1e-12);
    EXPECT_NEAR(back.w, b.w, 1e-12);
    EXPECT_NEAR(back.h, b.h, 1e-12);
  }
}

TEST(BoxConvert, RejectsDegenerateSize) {
  EXPECT_THROW(box_convert(BoxN{0.5, 0.5, 0.0, 0.5}), std::invalid_argument);
  EXPECT_THROW(box_convert(BoxN{0.5, 0.5, 0.5, -0.1}), std::invalid_argument);
  EXPECT_THROW(make_box(0.5, 0.5, 1e-9, 0.5), std::invalid_argument);
}

TEST(Iou, IdenticalBoxesIsOne) {
  const BoxCorners a{0.1, 0.2, 0.6, 0.9};
  EXPECT_DOUBLE_EQ(iou(a, a), 1.0);
}

TEST(Iou, DisjointBoxesIsZero) {
  EXPECT_DOUBLE_EQ(iou(BoxCorners{0, 0, 0.1, 0.1}, BoxCorners{0.9, 0.9, 1, 1}), 0.0);
}

TEST(Iou, QuarterOverlap) {
  // Unclamped corner inputs; intersection 0.25, union 1.75.
  const double v = iou(BoxCorners{0, 0, 1, 1}, BoxCorners{0.5, 0.5, 1.5, 1.5});
  EXPECT_NEAR(v, 0.25 / 1.75, 1e-12);
}

TEST(Iou, SymmetricAndBounded) {
  Rng rng(7);
  for (int i = 0; i < 500; ++i) {
    const BoxCorners a = box_convert(random_box(rng));
    const BoxCorners b = box_convert(random_box(rng));
    const double ab = iou(a, b);
    EXPECT_DOUBLE_EQ(ab, iou(b, a));
    EXPECT_GE(ab, 0.0);
    EXPECT_LE(ab, 1.0);
  }
}

TEST(Iou, InvariantUnderJointTranslation) {
  Rng rng(11);
  for (int i = 0; i < 200; ++i) {
    BoxCorners a = box_convert(random_box(rng));
    BoxCorners b = box_convert(random_box(rng));
    const double base = iou(a, b);
    const double dx = rng.uniform(-0.3, 0.3), dy = rng.uniform(-0.3, 0.3);
    a.x1 += dx; a.x2 += dx; a.y1 += dy; a.y2 += dy;
    b.x1 += dx; b.x2 += dx; b.y1 += dy; b.y2 += dy;
    EXPECT_NEAR(iou(a, b), base, 1e-12);
  }
}

TEST(GiouLoss, IdenticalBoxesIsExactlyZero) {
  const BoxCorners a{0.2, 0.1, 0.8, 0.7};
  EXPECT_EQ(giou_loss(a, a), 0.0);
}

TEST(GiouLoss, QuarterOverlapValue) {
  const double v = giou_loss(BoxCorners{0, 0, 1, 1}, BoxCorners{0.5, 0.5, 1.5, 1.5});
  EXPECT_NEAR(v, 1.0 - (1.0 / 7.0 - 0.5 / 2.25), 1e-12);
}

TEST(GiouLoss, ApproachesTwoForFarSeparatedTinyBoxes) {
  double prev = 0.0;
  for (double sep : {10.0, 100.0, 1000.0}) {
    const double eps = 1e-3;
    const double v =
        giou_loss(BoxCorners{0, 0, eps, eps}, BoxCorners{sep, sep, sep + eps, sep + eps});
    EXPECT_GT(v, prev);
    EXPECT_LE(v, 2.0);
    prev = v;
  }
  EXPECT_GT(prev, 1.99);
}

TEST(GiouLoss, SymmetryBoundsAndIouDomination) {
  Rng rng(13);
  for (int i = 0; i < 500; ++i) {
    const BoxCorners a = box_convert(random_box(rng));
    const BoxCorners b = box_convert(random_box(rng));
    const double loss = giou_loss(a, b);
    EXPECT_DOUBLE_EQ(loss, giou_loss(b, a));
    EXPECT_GE(loss, 0.0);
    EXPECT_LE(loss, 2.0);
    // GIoU <= IoU: the enclosing-box penalty is nonnegative.
    EXPECT_LE(1.0 - loss, iou(a, b) + 1e-15);
  }
}

TEST(BoxL1, IdenticalBoxesIsZero) {
  const BoxN a{0.5, 0.5, 0.2, 0.2};
  EXPECT_DOUBLE_EQ(box_l1(a, a), 0.0);
}

TEST(BoxL1, SingleCoordinateShift) {
  EXPECT_NEAR(box_l1(BoxN{0.5, 0.5, 0.2, 0.2}, BoxN{0.6, 0.5, 0.2, 0.2}), 0.1, 1e-12);
}

TEST(BoxL1, SymmetricOverRandomPairs) {
  Rng rng(21);
  for (int i = 0; i < 1000; ++i) {
    const BoxN a = random_box(rng);
    const BoxN b = random_box(rng);
    EXPECT_DOUBLE_EQ(box_l1(a, b), box_l1(b, a));
    EXPECT_GE(box_l1(a, b), 0.0);
  }
}

namespace {

// Central-difference derivative of giou_loss w.r.t. one corner coordinate.
double fd_giou(BoxCorners a, BoxCorners b, int which, int coord, double step) {
  auto bump = [&](double delta) {
    BoxCorners aa = a, bb = b;
    double* target = nullptr;
    BoxCorners& box = which == 0 ? aa : bb;
    switch (coord) {
      case 0: target = &box.x1; break;
      case 1: target = &box.y1; break;
      case 2: target = &box.x2; break;
      default: target = &box.y2; break;
    }
    *target += delta;
    return giou_loss(aa, bb);
  };
  return (bump(step) - bump(-step)) / (2 * step);
}

bool near_tie(const BoxCorners& a, const BoxCorners& b, double margin) {
  return std::abs(a.x1 - b.x1) < margin || std::abs(a.x2 - b.x2) < margin ||
         std::abs(a.y1 - b.y1) < margin || std::abs(a.y2 - b.y2) < margin;
}

}  // namespace

TEST(GiouLoss, AnalyticGradientMatchesFiniteDifferences) {
  Rng rng(33);
  const double step = 1e-6;
  int checked = 0;
  while (checked < 20) {
    const BoxCorners a = box_convert(random_box(rng));
    const BoxCorners b = box_convert(random_box(rng));
    // Min/max ties are kinks; FD there measures the average of two branches.
    if (near_tie(a, b, 1e-3)) continue;
    std::array<double, 4> da{}, db{};
    giou_loss_grad(a, b, da, db);
    for (int coord = 0; coord < 4; ++coord) {
      const double fd_a = fd_giou(a, b, 0, coord, step);
      const double fd_b = fd_giou(a, b, 1, coord, step);
      const double denom_a = std::max({std::abs(da[coord]), std::abs(fd_a), 1e-4});
      const double denom_b = std::max({std::abs(db[coord]), std::abs(fd_b), 1e-4});
      EXPECT_LT(std::abs(da[coord] - fd_a) / denom_a, 1e-5)
          << "coord " << coord << " of first box";
      EXPECT_LT(std::abs(db[coord] - fd_b) / denom_b, 1e-5)
          << "coord " << coord << " of second box";
    }
    ++checked;
  }
}

TEST(GiouLoss, CenterFormGradientMatchesFiniteDifferences) {
  Rng rng(35);
  const double step = 1e-6;
  int checked = 0;
  while (checked < 20) {
    const BoxN a = random_box(rng);
    const BoxN b = random_box(rng);
    if (near_tie(box_convert(a), box_convert(b), 1e-3)) continue;
    std::array<double, 4> da{}, db{};
    giou_loss_grad_center(a, b, da, db);
    auto eval = [&](int which, int coord, double delta) {
      BoxN aa = a, bb = b;
      double* fields_a[4] = {&aa.cx, &aa.cy, &aa.w, &aa.h};
      double* fields_b[4] = {&bb.cx, &bb.cy, &bb.w, &bb.h};
      *(which == 0 ? fields_a[coord] : fields_b[coord]) += delta;
      return giou_loss(box_convert(aa), box_convert(bb));
    };
    for (int coord = 0; coord < 4; ++coord) {
      const double fd_a = (eval(0, coord, step) - eval(0, coord, -step)) / (2 * step);
      const double fd_b = (eval(1, coord, step) - eval(1, coord, -step)) / (2 * step);
      EXPECT_LT(std::abs(da[coord] - fd_a) / std::max({std::abs(fd_a), 1e-4}), 1e-5);
      EXPECT_LT(std::abs(db[coord] - fd_b) / std::max({std::abs(fd_b), 1e-4}), 1e-5);
    }
    ++checked;
  }
}
