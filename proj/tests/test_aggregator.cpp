#include "kad/aggregator.hpp"
#include "kad/random.hpp"

#include <gtest/gtest.h>

using namespace kad;
using ad::Var;

namespace {

struct Fixture {
  ParamStore<double> store;
  AggregatorConfig cfg;
  Rng rng{77};
  std::unique_ptr<Aggregator<double>> agg;

  explicit Fixture(int d_t = 6, int d_v = 5, int d = 8,
                   FusionMode mode = FusionMode::attentive) {
    cfg.d_t = d_t;
    cfg.d_v = d_v;
    cfg.d = d;
    cfg.mode = mode;
    agg = std::make_unique<Aggregator<double>>(cfg, store, rng);
  }
};

Tensor<double> randn(Rng& rng, std::vector<int> shape) {
  Tensor<double> t(std::move(shape));
  for (std::int64_t i = 0; i < t.numel(); ++i) t[i] = rng.normal();
  return t;
}

Tensor<double> permuted_rows(const Tensor<double>& m, const std::vector<int>& perm) {
  Tensor<double> out({m.rows(), m.cols()});
  for (int r = 0; r < m.rows(); ++r) {
    for (int c = 0; c < m.cols(); ++c) out.at(r, c) = m.at(perm[r], c);
  }
  return out;
}

}  // namespace

TEST(AttentiveFuse, SingleRowMaxIsIdentity) {
  Fixture f;
  Rng rng(1);
  Tensor<double> row = randn(rng, {1, f.cfg.d_t});
  auto out = f.agg->fuse_text(Var<double>::constant(row), FusionMode::max);
  ASSERT_EQ(out.value().shape(), (std::vector<int>{1, f.cfg.d_t}));
  for (int c = 0; c < f.cfg.d_t; ++c) EXPECT_DOUBLE_EQ(out.value()[c], row[c]);
}

TEST(AttentiveFuse, AvgOfTwoRows) {
  Fixture f(2, 2, 4);
  Tensor<double> rows({2, 2}, {1.0, 3.0, 3.0, 1.0});
  auto out = f.agg->fuse_text(Var<double>::constant(rows), FusionMode::avg);
  EXPECT_DOUBLE_EQ(out.value()[0], 2.0);
  EXPECT_DOUBLE_EQ(out.value()[1], 2.0);
}

TEST(AttentiveFuse, MaxModeIsExactColumnMax) {
  Fixture f;
  Rng rng(3);
  Tensor<double> rows = randn(rng, {7, f.cfg.d_t});
  auto out = f.agg->fuse_text(Var<double>::constant(rows), FusionMode::max);
  for (int c = 0; c < f.cfg.d_t; ++c) {
    double mx = rows.at(0, c);
    for (int r = 1; r < 7; ++r) mx = std::max(mx, rows.at(r, c));
    EXPECT_DOUBLE_EQ(out.value()[c], mx);
  }
}

TEST(AttentiveFuse, PermutationInvariantInAllModes) {
  Fixture f;
  Rng rng(5);
  const int n = 6;
  Tensor<double> rows = randn(rng, {n, f.cfg.d_t});
  std::vector<int> perm{3, 0, 5, 1, 4, 2};
  Tensor<double> shuffled = permuted_rows(rows, perm);
  for (FusionMode mode : {FusionMode::attentive, FusionMode::max, FusionMode::avg}) {
    auto a = f.agg->fuse_text(Var<double>::constant(rows), mode);
    auto b = f.agg->fuse_text(Var<double>::constant(shuffled), mode);
    for (int c = 0; c < f.cfg.d_t; ++c) {
      EXPECT_NEAR(a.value()[c], b.value()[c], 1e-9) << to_string(mode) << " dim " << c;
    }
  }
}

TEST(AttentiveFuse, EmptyInputRejected) {
  Fixture f;
  Tensor<double> empty({0, f.cfg.d_t});
  EXPECT_THROW(f.agg->fuse_text(Var<double>::constant(empty), FusionMode::max),
               std::invalid_argument);
}

TEST(BuildOracleQuery, OutputDimensionFixedAcrossSubsets) {
  Fixture f;
  Rng rng(9);
  PriorBundle<double> bundle;
  bundle.text_embeddings = randn(rng, {3, f.cfg.d_t});
  bundle.image_embeddings = randn(rng, {4, f.cfg.d_v});
  bundle.gt_box = BoxN{0.4, 0.6, 0.2, 0.3};
  bundle.category = "carrot";
  for (bool sem : {false, true}) {
    for (bool vis : {false, true}) {
      for (bool spa : {false, true}) {
        PriorFlags flags{sem, vis, spa};
        if (!flags.any()) continue;
        auto q = f.agg->build_oracle_query(bundle, flags);
        EXPECT_EQ(q.vector.value().shape(), (std::vector<int>{1, f.cfg.d}));
        EXPECT_TRUE(q.vector.value().all_finite());
        EXPECT_EQ(q.provenance.semantic, sem);
      }
    }
  }
}

TEST(BuildOracleQuery, AllDisabledIsConfigurationError) {
  Fixture f;
  PriorBundle<double> bundle;
  bundle.text_embeddings = Tensor<double>({1, f.cfg.d_t});
  bundle.gt_box = BoxN{0.5, 0.5, 0.5, 0.5};
  EXPECT_THROW(f.agg->build_oracle_query(bundle, PriorFlags{false, false, false}),
               std::invalid_argument);
}

TEST(BuildOracleQuery, DeterministicAndIgnoresDisabledContent) {
  Fixture f;
  Rng rng(11);
  PriorBundle<double> bundle;
  bundle.text_embeddings = randn(rng, {3, f.cfg.d_t});
  bundle.image_embeddings = randn(rng, {2, f.cfg.d_v});
  bundle.gt_box = BoxN{0.3, 0.3, 0.25, 0.25};
  const PriorFlags spatial_only{false, false, true};
  auto q1 = f.agg->build_oracle_query(bundle, spatial_only);
  auto q2 = f.agg->build_oracle_query(bundle, spatial_only);
  for (int c = 0; c < f.cfg.d; ++c) {
    // Bitwise identical: same inputs, same parameters, no randomness.
    EXPECT_EQ(q1.vector.value()[c], q2.vector.value()[c]);
  }
  // Garbage in the disabled priors must not change the output.
  PriorBundle<double> mutated = bundle;
  mutated.text_embeddings = randn(rng, {5, f.cfg.d_t});
  mutated.image_embeddings = randn(rng, {9, f.cfg.d_v});
  auto q3 = f.agg->build_oracle_query(mutated, spatial_only);
  for (int c = 0; c < f.cfg.d; ++c) EXPECT_EQ(q1.vector.value()[c], q3.vector.value()[c]);
}

TEST(BuildOracleQuery, SpatialOnlyEqualsProjectionOfBoxOnly) {
  // With semantic/visual zero-filled, the query is the normalized projection
  // of [0; 0; b] alone.
  Fixture f;
  PriorBundle<double> bundle;
  bundle.gt_box = BoxN{0.4, 0.6, 0.2, 0.3};
  auto q = f.agg->build_oracle_query(bundle, PriorFlags{false, false, true});
  const auto* w = f.store.find("aggregator.proj.w");
  const auto* b = f.store.find("aggregator.proj.b");
  ASSERT_NE(w, nullptr);
  ASSERT_NE(b, nullptr);
  const int base = f.cfg.d_t + f.cfg.d_v;
  const double box[4] = {0.4, 0.6, 0.2, 0.3};
  std::vector<double> projected(f.cfg.d);
  double mean = 0;
  for (int c = 0; c < f.cfg.d; ++c) {
    projected[c] = b->var.value()[c];
    for (int i = 0; i < 4; ++i) projected[c] += box[i] * w->var.value().at(base + i, c);
    mean += projected[c];
  }
  mean /= f.cfg.d;
  double var = 0;
  for (int c = 0; c < f.cfg.d; ++c) var += (projected[c] - mean) * (projected[c] - mean);
  var /= f.cfg.d;
  // Output layer norm starts at gain 1, bias 0.
  for (int c = 0; c < f.cfg.d; ++c) {
    const double expected = (projected[c] - mean) / std::sqrt(var + 1e-5);
    EXPECT_NEAR(q.vector.value()[c], expected, 1e-9);
  }
}

TEST(BuildOracleQuery, PaperDimsProduceConfiguredWidth) {
  // d_t = d_v = 510: projection input width 510+510+4 = 1024, output width d.
  ParamStore<double> store;
  AggregatorConfig cfg;
  cfg.d_t = 510;
  cfg.d_v = 510;
  cfg.d = 64;
  Rng rng(13);
  Aggregator<double> agg(cfg, store, rng);
  EXPECT_EQ(store.find("aggregator.proj.w")->var.value().shape(),
            (std::vector<int>{1024, 64}));
  PriorBundle<double> bundle;
  bundle.text_embeddings = randn(rng, {10, 510});
  bundle.image_embeddings = randn(rng, {100, 510});
  bundle.gt_box = BoxN{0.5, 0.5, 0.4, 0.4};
  auto q = agg.build_oracle_query(bundle, PriorFlags{true, true, true});
  EXPECT_EQ(q.vector.value().shape(), (std::vector<int>{1, 64}));
}

TEST(BuildOracleQuery, RejectsDimensionMismatch) {
  Fixture f;
  Rng rng(15);
  PriorBundle<double> bundle;
  bundle.text_embeddings = randn(rng, {3, f.cfg.d_t + 1});
  bundle.gt_box = BoxN{0.5, 0.5, 0.5, 0.5};
  EXPECT_THROW(f.agg->build_oracle_query(bundle, PriorFlags{true, false, false}),
               std::invalid_argument);
}

TEST(BuildOracleQuery, GradientsReachFusionAndProjection) {
  Fixture f;
  Rng rng(17);
  PriorBundle<double> bundle;
  bundle.text_embeddings = randn(rng, {4, f.cfg.d_t});
  bundle.image_embeddings = randn(rng, {3, f.cfg.d_v});
  bundle.gt_box = BoxN{0.5, 0.5, 0.4, 0.4};
  auto q = f.agg->build_oracle_query(bundle, PriorFlags{true, true, true});
  auto loss = ad::sum_all(ad::mul(q.vector, q.vector));
  auto gs = ad::backward(loss);
  for (const char* name : {"aggregator.proj.w", "aggregator.text_attn.wq",
                           "aggregator.visual_attn.wv"}) {
    const auto* e = f.store.find(name);
    ASSERT_NE(e, nullptr) << name;
    ASSERT_TRUE(gs.has(e->var)) << name;
    double norm = 0;
    const auto& g = gs.grad(e->var);
    for (std::int64_t i = 0; i < g.numel(); ++i) norm += g[i] * g[i];
    EXPECT_GT(norm, 0.0) << name;
  }
}
