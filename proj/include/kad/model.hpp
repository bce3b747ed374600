#pragma once

// The shared detection network: convolutional backbone + transformer encoder
// producing region features E, a decoder driven either by m learnable queries
// (student) or by one oracle query (teacher), and detection heads. Decoder
// and head parameters are single storage used by both branches; per-layer
// embeddings and head-averaged cross-attention maps are captured for
// distillation and visualization.

#include "kad/aggregator.hpp"
#include "kad/autodiff.hpp"
#include "kad/geometry.hpp"
#include "kad/params.hpp"
#include "kad/random.hpp"
#include "kad/tensor.hpp"

#include <cmath>
#include <stdexcept>
#include <string>
#include <utility>
#include <vector>

namespace kad {

struct ModelConfig {
  int d = 128;            // query/feature dimension
  int num_queries = 25;   // m, student learnable queries
  int decoder_layers = 3;
  int encoder_layers = 2;
  int heads = 4;
  int image_size = 96;
  // Backbone: conv(3->c0, stride 1) then one stride-2 conv per remaining
  // entry, final stride-2 conv to d. Output stride is 2^(channels+1 blocks).
  std::vector<int> backbone_channels = {16, 32, 64};

  int stride() const { return 1 << static_cast<int>(backbone_channels.size()); }
  int feat_size() const { return image_size / stride(); }
  int ffn_dim() const { return 2 * d; }

  void check() const {
    if (d < 1 || num_queries < 1 || decoder_layers < 1 || encoder_layers < 1) {
      throw std::invalid_argument("ModelConfig: dimensions and layer counts must be >= 1");
    }
    if (heads < 1 || d % heads != 0) {
      throw std::invalid_argument("ModelConfig: d must be divisible by head count");
    }
    if (d % 4 != 0) {
      throw std::invalid_argument("ModelConfig: d must be divisible by 4 (2D sine encoding)");
    }
    if (backbone_channels.empty()) {
      throw std::invalid_argument("ModelConfig: backbone needs at least one block");
    }
    if (image_size % stride() != 0 || feat_size() < 1) {
      throw std::invalid_argument("ModelConfig: image size must be a multiple of stride " +
                                  std::to_string(stride()));
    }
  }
};

template <typename T>
struct EncodedFeatures {
  ad::Var<T> features;  // [h*w, d]
  int h = 0, w = 0;
};

enum class QueryKind { student, teacher };

template <typename T>
struct QuerySet {
  ad::Var<T> vectors;  // [k, d]
  QueryKind kind = QueryKind::student;
};

template <typename T>
struct DecoderTrace {
  std::vector<ad::Var<T>> embeddings;  // per layer: [k, d]
  std::vector<ad::Var<T>> attention;   // per layer: [k, h*w], head-averaged
  int feat_h = 0, feat_w = 0;

  int layers() const { return static_cast<int>(embeddings.size()); }
  int k() const { return embeddings.empty() ? 0 : embeddings.front().value().rows(); }
};

template <typename T>
struct DetectionSet {
  ad::Var<T> scores;  // [k], post-sigmoid
  ad::Var<T> boxes;   // [k, 4], (cx, cy, w, h) in (0,1)

  int size() const { return static_cast<int>(scores.value().numel()); }
  double score(int i) const { return static_cast<double>(scores.value()[i]); }
  BoxN box(int i) const {
    return BoxN{static_cast<double>(boxes.value().at(i, 0)),
                static_cast<double>(boxes.value().at(i, 1)),
                static_cast<double>(boxes.value().at(i, 2)),
                static_cast<double>(boxes.value().at(i, 3))};
  }
};

// Fixed 2D sine positional encoding, [h*w, d]: first half encodes x,
// second half y.
template <typename T>
Tensor<T> sine_position_encoding(int h, int w, int d) {
  Tensor<T> pe({h * w, d});
  const int half = d / 2;
  const double two_pi = 6.283185307179586476925286766559;
  auto fill = [&](int row, int offset, double pos) {
    for (int i = 0; i < half / 2; ++i) {
      const double freq = std::pow(10000.0, 2.0 * i / half);
      pe.at(row, offset + 2 * i) = static_cast<T>(std::sin(pos / freq));
      pe.at(row, offset + 2 * i + 1) = static_cast<T>(std::cos(pos / freq));
    }
  };
  for (int y = 0; y < h; ++y) {
    for (int x = 0; x < w; ++x) {
      const int row = y * w + x;
      fill(row, 0, (x + 0.5) / w * two_pi);
      fill(row, half, (y + 0.5) / h * two_pi);
    }
  }
  return pe;
}

template <typename T>
class Model {
public:
  Model(const ModelConfig& cfg, ParamStore<T>& store, Rng& rng) : cfg_(cfg) {
    cfg_.check();

    auto linear = [&](const std::string& name, int fan_in, int fan_out) {
      Tensor<T> w({fan_in, fan_out});
      const double s = std::sqrt(2.0 / double(fan_in + fan_out));
      for (std::int64_t i = 0; i < w.numel(); ++i) w[i] = static_cast<T>(s * rng.normal());
      return store.add(name, std::move(w), ParamGroup::transformer);
    };
    auto bias = [&](const std::string& name, int n, T init = T(0)) {
      return store.add(name, Tensor<T>::full({1, n}, init), ParamGroup::transformer);
    };
    auto make_attn = [&](const std::string& p) {
      Attn a;
      a.wq = linear(p + ".wq", cfg_.d, cfg_.d);
      a.bq = bias(p + ".bq", cfg_.d);
      a.wk = linear(p + ".wk", cfg_.d, cfg_.d);
      a.bk = bias(p + ".bk", cfg_.d);
      a.wv = linear(p + ".wv", cfg_.d, cfg_.d);
      a.bv = bias(p + ".bv", cfg_.d);
      a.wo = linear(p + ".wo", cfg_.d, cfg_.d);
      a.bo = bias(p + ".bo", cfg_.d);
      return a;
    };
    auto make_ln = [&](const std::string& p) {
      LayerNorm ln;
      ln.g = store.add(p + ".g", Tensor<T>::full({1, cfg_.d}, T(1)), ParamGroup::transformer);
      ln.b = bias(p + ".b", cfg_.d);
      return ln;
    };
    auto make_ffn = [&](const std::string& p) {
      Ffn f;
      f.w1 = linear(p + ".w1", cfg_.d, cfg_.ffn_dim());
      f.b1 = bias(p + ".b1", cfg_.ffn_dim());
      f.w2 = linear(p + ".w2", cfg_.ffn_dim(), cfg_.d);
      f.b2 = bias(p + ".b2", cfg_.d);
      return f;
    };

    // Backbone.
    int in_ch = 3;
    std::vector<int> channels = cfg_.backbone_channels;
    channels.push_back(cfg_.d);
    for (std::size_t i = 0; i < channels.size(); ++i) {
      const int out_ch = channels[i];
      Tensor<T> w({out_ch, in_ch * 9});
      const double s = std::sqrt(2.0 / double(in_ch * 9));
      for (std::int64_t j = 0; j < w.numel(); ++j) w[j] = static_cast<T>(s * rng.normal());
      Conv conv;
      conv.w = store.add("backbone.conv" + std::to_string(i) + ".w", std::move(w),
                         ParamGroup::backbone);
      conv.b = store.add("backbone.conv" + std::to_string(i) + ".b", Tensor<T>({out_ch}),
                         ParamGroup::backbone);
      conv.stride = (i == 0) ? 1 : 2;
      convs_.push_back(conv);
      in_ch = out_ch;
    }

    for (int l = 0; l < cfg_.encoder_layers; ++l) {
      const std::string p = "encoder." + std::to_string(l);
      enc_.push_back({make_attn(p + ".self"), make_ln(p + ".ln1"), make_ffn(p + ".ffn"),
                      make_ln(p + ".ln2")});
    }
    enc_final_ln_ = make_ln("encoder.final_ln");
    for (int l = 0; l < cfg_.decoder_layers; ++l) {
      const std::string p = "decoder." + std::to_string(l);
      DecLayer layer;
      layer.self = make_attn(p + ".self");
      layer.ln1 = make_ln(p + ".ln1");
      layer.cross = make_attn(p + ".cross");
      layer.ln2 = make_ln(p + ".ln2");
      layer.ffn = make_ffn(p + ".ffn");
      layer.ln3 = make_ln(p + ".ln3");
      dec_.push_back(layer);
    }
    dec_final_ln_ = make_ln("decoder.final_ln");

    {
      Tensor<T> q({cfg_.num_queries, cfg_.d});
      for (std::int64_t i = 0; i < q.numel(); ++i) q[i] = static_cast<T>(rng.normal());
      queries_ = store.add("queries", std::move(q), ParamGroup::transformer);
    }
    score_w_ = linear("heads.score.w", cfg_.d, 1);
    // Bias the initial confidence low; most queries are background.
    score_b_ = store.add("heads.score.b", Tensor<T>::full({1, 1}, T(-2)),
                         ParamGroup::transformer);
    box_w1_ = linear("heads.box.w1", cfg_.d, cfg_.d);
    box_b1_ = bias("heads.box.b1", cfg_.d);
    box_w2_ = linear("heads.box.w2", cfg_.d, 4);
    box_b2_ = bias("heads.box.b2", 4);

    const int fs = cfg_.feat_size();
    pos_ = sine_position_encoding<T>(fs, fs, cfg_.d);
  }

  const ModelConfig& config() const { return cfg_; }

  EncodedFeatures<T> encode(const Tensor<T>& image) const {
    const auto& s = image.shape();
    if (s.size() != 3 || s[0] != 3 || s[1] != cfg_.image_size || s[2] != cfg_.image_size) {
      throw std::invalid_argument("encode: expected image [3," +
                                  std::to_string(cfg_.image_size) + "," +
                                  std::to_string(cfg_.image_size) + "], got " +
                                  image.shape_str());
    }
    ad::Var<T> x = ad::Var<T>::constant(image);
    for (std::size_t i = 0; i < convs_.size(); ++i) {
      x = ad::conv2d(x, convs_[i].w, convs_[i].b, 3, convs_[i].stride, 1);
      if (i + 1 < convs_.size()) x = ad::relu(x);
    }
    const int fs = cfg_.feat_size();
    // [d, fs, fs] -> [fs*fs, d] token layout. Pre-norm layers; the fixed
    // sine encoding rides on the attention projections, not on the content.
    auto tokens = ad::transpose(ad::reshape(x, {cfg_.d, fs * fs}));
    const auto pos = ad::Var<T>::constant(pos_);
    for (const auto& layer : enc_) {
      auto normed = ad::layer_norm_rows(tokens, layer.ln1.g, layer.ln1.b);
      auto [sa, ignored] = attention(layer.self, normed, normed, pos, pos, false);
      tokens = ad::add(tokens, sa);
      tokens = ad::add(tokens, ffn(layer.ffn, ad::layer_norm_rows(tokens, layer.ln2.g,
                                                                  layer.ln2.b)));
    }
    tokens = ad::layer_norm_rows(tokens, enc_final_ln_.g, enc_final_ln_.b);
    return {tokens, fs, fs};
  }

  QuerySet<T> student_queries() const { return {queries_, QueryKind::student}; }

  std::pair<DecoderTrace<T>, DetectionSet<T>> decode(const EncodedFeatures<T>& feats,
                                                     const QuerySet<T>& queries) const {
    if (queries.vectors.value().cols() != cfg_.d) {
      throw std::invalid_argument("decode: query dimension " +
                                  std::to_string(queries.vectors.value().cols()) +
                                  " does not match d=" + std::to_string(cfg_.d));
    }
    const int k = queries.vectors.value().rows();
    if (queries.kind == QueryKind::teacher && k != 1) {
      throw std::invalid_argument("decode: teacher query set must have k=1");
    }
    if (queries.kind == QueryKind::student && k != cfg_.num_queries) {
      throw std::invalid_argument("decode: student query set must have k=m");
    }
    if (feats.features.value().cols() != cfg_.d ||
        feats.features.value().rows() != feats.h * feats.w) {
      throw std::invalid_argument("decode: encoded features shape mismatch");
    }

    DecoderTrace<T> trace;
    trace.feat_h = feats.h;
    trace.feat_w = feats.w;
    // Pre-norm decoder. The query vectors (learnable set or oracle) seed the
    // state and are re-injected into every layer's attention addressing.
    const ad::Var<T> q_pos = queries.vectors;
    const auto feat_pos = ad::Var<T>::constant(pos_);
    ad::Var<T> q = queries.vectors;
    for (const auto& layer : dec_) {
      auto n1 = ad::layer_norm_rows(q, layer.ln1.g, layer.ln1.b);
      auto [sa, ignored] = attention(layer.self, n1, n1, q_pos, q_pos, false);
      q = ad::add(q, sa);
      auto n2 = ad::layer_norm_rows(q, layer.ln2.g, layer.ln2.b);
      auto [ca, attn_map] = attention(layer.cross, n2, feats.features, q_pos, feat_pos, true);
      q = ad::add(q, ca);
      q = ad::add(q, ffn(layer.ffn, ad::layer_norm_rows(q, layer.ln3.g, layer.ln3.b)));
      trace.embeddings.push_back(q);
      trace.attention.push_back(attn_map);
    }
    q = ad::layer_norm_rows(q, dec_final_ln_.g, dec_final_ln_.b);

    DetectionSet<T> det;
    const T eps = static_cast<T>(1e-7);
    auto score_col = ad::sigmoid(ad::add_rows(ad::matmul(q, score_w_), score_b_));
    det.scores = ad::reshape(ad::clamp(score_col, eps, T(1) - eps), {k});
    auto hidden = ad::relu(ad::add_rows(ad::matmul(q, box_w1_), box_b1_));
    auto box_raw = ad::sigmoid(ad::add_rows(ad::matmul(hidden, box_w2_), box_b2_));
    det.boxes = ad::clamp(box_raw, static_cast<T>(1e-6), T(1) - static_cast<T>(1e-6));
    return {std::move(trace), std::move(det)};
  }

  std::pair<DetectionSet<T>, DecoderTrace<T>> run_student(const Tensor<T>& image) const {
    auto feats = encode(image);
    auto [trace, det] = decode(feats, student_queries());
    return {std::move(det), std::move(trace)};
  }

  std::pair<DetectionSet<T>, DecoderTrace<T>> run_teacher(const EncodedFeatures<T>& feats,
                                                          const OracleQuery<T>& oracle) const {
    if (oracle.vector.value().rows() != 1 || oracle.vector.value().cols() != cfg_.d) {
      throw std::invalid_argument("run_teacher: oracle query must be [1," +
                                  std::to_string(cfg_.d) + "], got " +
                                  oracle.vector.value().shape_str());
    }
    auto [trace, det] = decode(feats, QuerySet<T>{oracle.vector, QueryKind::teacher});
    return {std::move(det), std::move(trace)};
  }

  // Names of the parameters shared between the teacher and student branches.
  std::vector<std::string> decoder_and_head_param_names() const {
    std::vector<std::string> names;
    auto attn_names = [&](const std::string& p) {
      for (const char* s : {".wq", ".bq", ".wk", ".bk", ".wv", ".bv", ".wo", ".bo"}) {
        names.push_back(p + s);
      }
    };
    for (int l = 0; l < cfg_.decoder_layers; ++l) {
      const std::string p = "decoder." + std::to_string(l);
      attn_names(p + ".self");
      attn_names(p + ".cross");
      for (const char* s : {".ln1.g", ".ln1.b", ".ln2.g", ".ln2.b", ".ln3.g", ".ln3.b"}) {
        names.push_back(p + s);
      }
      for (const char* s : {".ffn.w1", ".ffn.b1", ".ffn.w2", ".ffn.b2"}) {
        names.push_back(p + s);
      }
    }
    for (const char* s : {"decoder.final_ln.g", "decoder.final_ln.b", "heads.score.w",
                          "heads.score.b", "heads.box.w1", "heads.box.b1", "heads.box.w2",
                          "heads.box.b2"}) {
      names.emplace_back(s);
    }
    return names;
  }

private:
  struct Attn {
    ad::Var<T> wq, bq, wk, bk, wv, bv, wo, bo;
  };
  struct LayerNorm {
    ad::Var<T> g, b;
  };
  struct Ffn {
    ad::Var<T> w1, b1, w2, b2;
  };
  struct EncLayer {
    Attn self;
    LayerNorm ln1;
    Ffn ffn;
    LayerNorm ln2;
  };
  struct DecLayer {
    Attn self;
    LayerNorm ln1;
    Attn cross;
    LayerNorm ln2;
    Ffn ffn;
    LayerNorm ln3;
  };
  struct Conv {
    ad::Var<T> w, b;
    int stride = 1;
  };

  // Multi-head attention of q_in [k,d] over kv_in [S,d]. Positional terms
  // (fixed sine encodings for feature tokens, the query vectors themselves
  // for the decoder) are re-injected at every layer, on the value side too:
  // attended context then carries the coordinates of where it came from,
  // which is what lets the box head regress locations at this scale.
  // Returns the output and, when requested, the head-averaged attention
  // distribution [k,S].
  std::pair<ad::Var<T>, ad::Var<T>> attention(const Attn& p, const ad::Var<T>& q_in,
                                              const ad::Var<T>& kv_in,
                                              const ad::Var<T>& q_pos,
                                              const ad::Var<T>& k_pos,
                                              bool need_attn) const {
    const int dk = cfg_.d / cfg_.heads;
    const ad::Var<T> q_src = q_pos.defined() ? ad::add(q_in, q_pos) : q_in;
    const ad::Var<T> k_src = k_pos.defined() ? ad::add(kv_in, k_pos) : kv_in;
    auto q = ad::add_rows(ad::matmul(q_src, p.wq), p.bq);
    auto k = ad::add_rows(ad::matmul(k_src, p.wk), p.bk);
    auto v = ad::add_rows(ad::matmul(k_src, p.wv), p.bv);
    const T inv_sqrt_dk = static_cast<T>(1.0 / std::sqrt(double(dk)));
    std::vector<ad::Var<T>> ctx_parts;
    ad::Var<T> attn_sum;
    for (int h = 0; h < cfg_.heads; ++h) {
      auto qh = ad::slice_cols(q, h * dk, dk);
      auto kh = ad::slice_cols(k, h * dk, dk);
      auto vh = ad::slice_cols(v, h * dk, dk);
      auto probs = ad::softmax_rows(ad::scale(ad::matmul_nt(qh, kh), inv_sqrt_dk));
      ctx_parts.push_back(ad::matmul(probs, vh));
      if (need_attn) {
        attn_sum = attn_sum.defined() ? ad::add(attn_sum, probs) : probs;
      }
    }
    auto out = ad::add_rows(ad::matmul(ad::concat_cols(ctx_parts), p.wo), p.bo);
    ad::Var<T> attn_avg;
    if (need_attn) {
      attn_avg = ad::scale(attn_sum, static_cast<T>(1.0 / cfg_.heads));
    }
    return {out, attn_avg};
  }

  ad::Var<T> ffn(const Ffn& p, const ad::Var<T>& x) const {
    auto h = ad::relu(ad::add_rows(ad::matmul(x, p.w1), p.b1));
    return ad::add_rows(ad::matmul(h, p.w2), p.b2);
  }

  ModelConfig cfg_;
  std::vector<Conv> convs_;
  std::vector<EncLayer> enc_;
  LayerNorm enc_final_ln_;
  std::vector<DecLayer> dec_;
  LayerNorm dec_final_ln_;
  ad::Var<T> queries_;
  ad::Var<T> score_w_, score_b_;
  ad::Var<T> box_w1_, box_b1_, box_w2_, box_b2_;
  Tensor<T> pos_;
};

// Reshape one query's attention rows back to [h, w] heatmaps, one per layer.
// Values are preserved exactly.
template <typename T>
std::vector<Tensor<T>> attention_export(const DecoderTrace<T>& trace, int query_index) {
  if (query_index < 0 || query_index >= trace.k()) {
    throw std::out_of_range("attention_export: query index " + std::to_string(query_index) +
                            " out of range for k=" + std::to_string(trace.k()));
  }
  std::vector<Tensor<T>> maps;
  for (const auto& layer_attn : trace.attention) {
    const int s = trace.feat_h * trace.feat_w;
    Tensor<T> map({trace.feat_h, trace.feat_w});
    for (int i = 0; i < s; ++i) {
      map[i] = layer_attn.value().at(query_index, i);
    }
    maps.push_back(std::move(map));
  }
  return maps;
}

}  // namespace kad
