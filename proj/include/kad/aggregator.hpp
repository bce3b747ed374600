#pragma once

// Knowledge aggregation: attentive fusion of semantic/visual prior
// embeddings and construction of the single oracle query
// Q_t = proj([T; V; b]) consumed by the teacher decoder. Disabled priors are
// zero-filled so one projection parameter set covers every ablation subset.

#include "kad/autodiff.hpp"
#include "kad/geometry.hpp"
#include "kad/params.hpp"
#include "kad/random.hpp"
#include "kad/tensor.hpp"

#include <cmath>
#include <stdexcept>
#include <string>

namespace kad {

enum class FusionMode { attentive, max, avg };

inline const char* to_string(FusionMode m) {
  switch (m) {
    case FusionMode::attentive: return "attentive";
    case FusionMode::max: return "max";
    default: return "avg";
  }
}

inline FusionMode fusion_mode_from_string(const std::string& s) {
  if (s == "attentive") return FusionMode::attentive;
  if (s == "max") return FusionMode::max;
  if (s == "avg") return FusionMode::avg;
  throw std::invalid_argument("unknown fusion mode: " + s);
}

// Which priors feed the oracle query (Table 5 rows map onto subsets).
struct PriorFlags {
  bool semantic = true;
  bool visual = true;
  bool spatial = true;

  bool any() const { return semantic || visual || spatial; }
  bool needs_cache() const { return semantic || visual; }
};

// Per-category raw material: text embeddings [p, d_t], image embeddings
// [q, d_v] (q may be 0), and the record's ground-truth box.
template <typename T>
struct PriorBundle {
  Tensor<T> text_embeddings;
  Tensor<T> image_embeddings;
  BoxN gt_box;
  std::string category;
};

template <typename T>
struct OracleQuery {
  ad::Var<T> vector;  // [1, d]
  PriorFlags provenance;
};

struct AggregatorConfig {
  int d_t = 510;
  int d_v = 510;
  int d = 128;  // detector query dimension
  FusionMode mode = FusionMode::attentive;
};

template <typename T>
class Aggregator {
public:
  struct SelfAttn {
    ad::Var<T> wq, wk, wv;
  };

  Aggregator(const AggregatorConfig& cfg, ParamStore<T>& store, Rng& rng)
      : cfg_(cfg) {
    if (cfg.d_t < 1 || cfg.d_v < 1 || cfg.d < 1) {
      throw std::invalid_argument("aggregator: dimensions must be >= 1");
    }
    auto linear_init = [&rng](int fan_in, int fan_out, Tensor<T>& w) {
      const double s = std::sqrt(2.0 / double(fan_in + fan_out));
      for (std::int64_t i = 0; i < w.numel(); ++i) w[i] = static_cast<T>(s * rng.normal());
    };
    auto make_attn = [&](const std::string& prefix, int dim) {
      SelfAttn a;
      Tensor<T> wq({dim, dim}), wk({dim, dim}), wv({dim, dim});
      linear_init(dim, dim, wq);
      linear_init(dim, dim, wk);
      linear_init(dim, dim, wv);
      a.wq = store.add(prefix + ".wq", std::move(wq), ParamGroup::transformer);
      a.wk = store.add(prefix + ".wk", std::move(wk), ParamGroup::transformer);
      a.wv = store.add(prefix + ".wv", std::move(wv), ParamGroup::transformer);
      return a;
    };
    text_attn_ = make_attn("aggregator.text_attn", cfg.d_t);
    visual_attn_ = make_attn("aggregator.visual_attn", cfg.d_v);
    const int concat_dim = cfg.d_t + cfg.d_v + 4;
    Tensor<T> pw({concat_dim, cfg.d});
    linear_init(concat_dim, cfg.d, pw);
    proj_w_ = store.add("aggregator.proj.w", std::move(pw), ParamGroup::transformer);
    proj_b_ = store.add("aggregator.proj.b", Tensor<T>({1, cfg.d}), ParamGroup::transformer);
    ln_g_ = store.add("aggregator.oracle_ln.g", Tensor<T>::full({1, cfg.d}, T(1)),
                      ParamGroup::transformer);
    ln_b_ = store.add("aggregator.oracle_ln.b", Tensor<T>({1, cfg.d}),
                      ParamGroup::transformer);
  }

  const AggregatorConfig& config() const { return cfg_; }

  // Pool n rows down to one. Attentive mode: one single-head scaled
  // dot-product self-attention layer with a residual connection (no
  // normalization), then per-dimension max-pool. All modes are permutation
  // invariant in the rows.
  ad::Var<T> attentive_fuse(const ad::Var<T>& embeddings, FusionMode mode,
                            const SelfAttn* attn) const {
    const int n = embeddings.value().rows();
    if (n == 0) {
      throw std::invalid_argument("attentive_fuse: empty input");
    }
    switch (mode) {
      case FusionMode::avg:
        return ad::mean_rows(embeddings);
      case FusionMode::max:
        return ad::max_rows(embeddings);
      case FusionMode::attentive: {
        if (!attn) throw std::invalid_argument("attentive_fuse: missing attention weights");
        const int dim = embeddings.value().cols();
        auto q = ad::matmul(embeddings, attn->wq);
        auto k = ad::matmul(embeddings, attn->wk);
        auto v = ad::matmul(embeddings, attn->wv);
        auto scores = ad::scale(ad::matmul_nt(q, k), static_cast<T>(1.0 / std::sqrt(double(dim))));
        auto ctx = ad::matmul(ad::softmax_rows(scores), v);
        return ad::max_rows(ad::add(embeddings, ctx));
      }
    }
    throw std::logic_error("attentive_fuse: unreachable");
  }

  ad::Var<T> fuse_text(const ad::Var<T>& rows, FusionMode mode) const {
    return attentive_fuse(rows, mode, &text_attn_);
  }
  ad::Var<T> fuse_visual(const ad::Var<T>& rows, FusionMode mode) const {
    return attentive_fuse(rows, mode, &visual_attn_);
  }

  OracleQuery<T> build_oracle_query(const PriorBundle<T>& bundle,
                                    const PriorFlags& enabled) const {
    if (!enabled.any()) {
      throw std::invalid_argument("build_oracle_query: all priors disabled");
    }
    if (enabled.semantic) {
      if (bundle.text_embeddings.rows() < 1 || bundle.text_embeddings.cols() != cfg_.d_t) {
        throw std::invalid_argument("build_oracle_query: text embeddings must be [p>=1, " +
                                    std::to_string(cfg_.d_t) + "]");
      }
      if (!bundle.text_embeddings.all_finite()) {
        throw std::invalid_argument("build_oracle_query: non-finite text embeddings");
      }
    }
    if (enabled.visual && bundle.image_embeddings.rows() > 0) {
      if (bundle.image_embeddings.cols() != cfg_.d_v) {
        throw std::invalid_argument("build_oracle_query: image embeddings must be [q, " +
                                    std::to_string(cfg_.d_v) + "]");
      }
      if (!bundle.image_embeddings.all_finite()) {
        throw std::invalid_argument("build_oracle_query: non-finite image embeddings");
      }
    }

    // Fused parts are scaled to unit norm so the providers' embedding
    // magnitudes cannot drown the 4-dim spatial prior in the concatenation;
    // the projected query is layer-normalized to the decoder's stream scale.
    ad::Var<T> text_part;
    if (enabled.semantic) {
      text_part = ad::l2_normalize_rows(
          fuse_text(ad::Var<T>::constant(bundle.text_embeddings), cfg_.mode));
    } else {
      text_part = ad::Var<T>::constant(Tensor<T>({1, cfg_.d_t}));
    }
    ad::Var<T> visual_part;
    if (enabled.visual && bundle.image_embeddings.rows() > 0) {
      visual_part = ad::l2_normalize_rows(
          fuse_visual(ad::Var<T>::constant(bundle.image_embeddings), cfg_.mode));
    } else {
      visual_part = ad::Var<T>::constant(Tensor<T>({1, cfg_.d_v}));
    }
    Tensor<T> box({1, 4});
    if (enabled.spatial) {
      validate(bundle.gt_box);
      box[0] = static_cast<T>(bundle.gt_box.cx);
      box[1] = static_cast<T>(bundle.gt_box.cy);
      box[2] = static_cast<T>(bundle.gt_box.w);
      box[3] = static_cast<T>(bundle.gt_box.h);
    }
    auto concat = ad::concat_cols<T>({text_part, visual_part, ad::Var<T>::constant(box)});
    OracleQuery<T> q;
    q.vector = ad::layer_norm_rows(ad::add_rows(ad::matmul(concat, proj_w_), proj_b_),
                                   ln_g_, ln_b_);
    q.provenance = enabled;
    instrument::oracle_query_builds().fetch_add(1, std::memory_order_relaxed);
    return q;
  }

private:
  AggregatorConfig cfg_;
  SelfAttn text_attn_;
  SelfAttn visual_attn_;
  ad::Var<T> proj_w_, proj_b_;
  ad::Var<T> ln_g_, ln_b_;
};

}  // namespace kad
