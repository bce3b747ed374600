#pragma once

// Training/evaluation orchestration: the two-branch training step (one encode
// per image shared by student and teacher), bipartite matching, the combined
// objective, AdamW with per-group learning rates and cosine warm restarts,
// COCO-style AP evaluation, checkpointing, and student-only inference.

#include "kad/aggregator.hpp"
#include "kad/checkpoint.hpp"
#include "kad/data.hpp"
#include "kad/image.hpp"
#include "kad/losses.hpp"
#include "kad/matching.hpp"
#include "kad/model.hpp"
#include "kad/priors.hpp"

#include <json.hpp>

#include <algorithm>
#include <atomic>
#include <chrono>
#include <cmath>
#include <filesystem>
#include <fstream>
#include <map>
#include <memory>
#include <numeric>
#include <optional>
#include <stdexcept>
#include <string>
#include <thread>
#include <vector>

namespace kad {

struct EngineError : std::runtime_error {
  using std::runtime_error::runtime_error;
};

// ---------------------------------------------------------------------------
// Run configuration
// ---------------------------------------------------------------------------

struct RunConfig {
  ModelConfig model;
  int d_t = 510;  // prior embedding dims (must match the cache when priors on)
  int d_v = 510;
  FusionMode fusion = FusionMode::attentive;
  LossWeights weights;  // lambda=5.0, alpha=0.2, eta=1.0 paper defaults
  PriorFlags priors;
  DistillMode distill = DistillMode::emb_attn;
  bool negative_supervision = true;

  double lr_transformer = 1e-4;  // paper initial transformer learning rate
  double lr_backbone = 1e-5;     // paper backbone learning rate
  double weight_decay = 1e-4;
  double lr_min_factor = 0.01;       // cosine floor as a fraction of the base lr
  int warmup_steps = 0;              // linear ramp before the cosine schedule
  int restart_period_epochs = 10;    // warm-restart cycle length
  int epochs = 50;                   // paper schedule length
  int batch_size = 4;                // paper batch size
  int eval_every_epochs = 1;         // 0: only final evaluation
  int threads = 0;                   // 0: hardware concurrency
  std::uint64_t seed = 0;

  std::string dataset_dir;      // root containing train/ and val/
  std::string prior_cache_dir;  // required when semantic or visual priors on
  std::string out_dir;

  void check() const {
    model.check();
    weights.check();
    if (distill != DistillMode::off && !priors.any()) {
      throw std::invalid_argument(
          "RunConfig: distillation requires at least one enabled prior");
    }
    if (batch_size < 1 || epochs < 0 || restart_period_epochs < 1) {
      throw std::invalid_argument("RunConfig: bad schedule settings");
    }
    if (lr_transformer <= 0 || lr_backbone <= 0 || lr_min_factor < 0 || lr_min_factor > 1) {
      throw std::invalid_argument("RunConfig: bad learning rates");
    }
    if (d_t < 1 || d_v < 1) throw std::invalid_argument("RunConfig: bad prior dims");
  }

  AggregatorConfig aggregator_config() const {
    AggregatorConfig a;
    a.d_t = d_t;
    a.d_v = d_v;
    a.d = model.d;
    a.mode = fusion;
    return a;
  }

  nlohmann::json to_json() const {
    nlohmann::json j;
    j["d"] = model.d;
    j["num_queries"] = model.num_queries;
    j["decoder_layers"] = model.decoder_layers;
    j["encoder_layers"] = model.encoder_layers;
    j["heads"] = model.heads;
    j["image_size"] = model.image_size;
    j["backbone_channels"] = model.backbone_channels;
    j["d_t"] = d_t;
    j["d_v"] = d_v;
    j["fusion"] = to_string(fusion);
    j["lambda"] = weights.lambda;
    j["alpha"] = weights.alpha;
    j["eta"] = weights.eta;
    nlohmann::json p = nlohmann::json::array();
    if (priors.semantic) p.push_back("semantic");
    if (priors.visual) p.push_back("visual");
    if (priors.spatial) p.push_back("spatial");
    j["priors"] = p;
    j["distill"] = to_string(distill);
    j["negative_supervision"] = negative_supervision;
    j["lr_transformer"] = lr_transformer;
    j["lr_backbone"] = lr_backbone;
    j["weight_decay"] = weight_decay;
    j["lr_min_factor"] = lr_min_factor;
    j["warmup_steps"] = warmup_steps;
    j["restart_period_epochs"] = restart_period_epochs;
    j["epochs"] = epochs;
    j["batch_size"] = batch_size;
    j["eval_every_epochs"] = eval_every_epochs;
    j["threads"] = threads;
    j["seed"] = seed;
    j["dataset_dir"] = dataset_dir;
    j["prior_cache_dir"] = prior_cache_dir;
    j["out_dir"] = out_dir;
    return j;
  }

  static RunConfig from_json(const nlohmann::json& j) {
    RunConfig c;
    c.model.d = j.value("d", c.model.d);
    c.model.num_queries = j.value("num_queries", c.model.num_queries);
    c.model.decoder_layers = j.value("decoder_layers", c.model.decoder_layers);
    c.model.encoder_layers = j.value("encoder_layers", c.model.encoder_layers);
    c.model.heads = j.value("heads", c.model.heads);
    c.model.image_size = j.value("image_size", c.model.image_size);
    c.model.backbone_channels = j.value("backbone_channels", c.model.backbone_channels);
    c.d_t = j.value("d_t", c.d_t);
    c.d_v = j.value("d_v", c.d_v);
    if (j.contains("fusion")) c.fusion = fusion_mode_from_string(j["fusion"]);
    c.weights.lambda = j.value("lambda", c.weights.lambda);
    c.weights.alpha = j.value("alpha", c.weights.alpha);
    c.weights.eta = j.value("eta", c.weights.eta);
    if (j.contains("priors")) {
      c.priors = PriorFlags{false, false, false};
      for (const auto& p : j["priors"]) {
        const std::string s = p.get<std::string>();
        if (s == "semantic") c.priors.semantic = true;
        else if (s == "visual") c.priors.visual = true;
        else if (s == "spatial") c.priors.spatial = true;
        else throw std::invalid_argument("RunConfig: unknown prior '" + s + "'");
      }
    }
    if (j.contains("distill")) c.distill = distill_mode_from_string(j["distill"]);
    c.negative_supervision = j.value("negative_supervision", c.negative_supervision);
    c.lr_transformer = j.value("lr_transformer", c.lr_transformer);
    c.lr_backbone = j.value("lr_backbone", c.lr_backbone);
    c.weight_decay = j.value("weight_decay", c.weight_decay);
    c.lr_min_factor = j.value("lr_min_factor", c.lr_min_factor);
    c.warmup_steps = j.value("warmup_steps", c.warmup_steps);
    c.restart_period_epochs = j.value("restart_period_epochs", c.restart_period_epochs);
    c.epochs = j.value("epochs", c.epochs);
    c.batch_size = j.value("batch_size", c.batch_size);
    c.eval_every_epochs = j.value("eval_every_epochs", c.eval_every_epochs);
    c.threads = j.value("threads", c.threads);
    c.seed = j.value("seed", c.seed);
    c.dataset_dir = j.value("dataset_dir", c.dataset_dir);
    c.prior_cache_dir = j.value("prior_cache_dir", c.prior_cache_dir);
    c.out_dir = j.value("out_dir", c.out_dir);
    return c;
  }
};

// ---------------------------------------------------------------------------
// Optimizer and schedule
// ---------------------------------------------------------------------------

// Decoupled weight decay Adam; two parameter groups (backbone vs the rest).
class AdamW {
public:
  explicit AdamW(const ParamStore<float>& store, double weight_decay)
      : weight_decay_(weight_decay) {
    for (const auto& e : store.entries()) {
      states_.push_back({e.var.value().zeros_like(), e.var.value().zeros_like()});
    }
  }

  void step(ParamStore<float>& store, const std::vector<Tensor<float>>& grads,
            double lr_backbone, double lr_transformer) {
    ++t_;
    const double bc1 = 1.0 - std::pow(beta1_, t_);
    const double bc2 = 1.0 - std::pow(beta2_, t_);
    auto& entries = store.entries();
    for (std::size_t p = 0; p < entries.size(); ++p) {
      const double lr =
          entries[p].group == ParamGroup::backbone ? lr_backbone : lr_transformer;
      Tensor<float>& w = entries[p].var.mutable_value();
      Tensor<float>& m = states_[p].m;
      Tensor<float>& v = states_[p].v;
      const Tensor<float>& g = grads[p];
      for (std::int64_t i = 0; i < w.numel(); ++i) {
        m[i] = static_cast<float>(beta1_ * m[i] + (1.0 - beta1_) * g[i]);
        v[i] = static_cast<float>(beta2_ * v[i] + (1.0 - beta2_) * double(g[i]) * g[i]);
        const double mhat = m[i] / bc1;
        const double vhat = v[i] / bc2;
        double update = mhat / (std::sqrt(vhat) + eps_);
        update += weight_decay_ * w[i];
        w[i] = static_cast<float>(w[i] - lr * update);
      }
    }
  }

  int step_count() const { return t_; }

private:
  struct State {
    Tensor<float> m, v;
  };
  std::vector<State> states_;
  double weight_decay_;
  double beta1_ = 0.9, beta2_ = 0.999, eps_ = 1e-8;
  int t_ = 0;
};

// Cosine annealing with warm restarts (fixed cycle length), optionally
// preceded by a linear warmup ramp.
inline double cosine_warm_restart_lr(std::int64_t step, std::int64_t steps_per_cycle,
                                     double base_lr, double min_factor,
                                     std::int64_t warmup_steps = 0) {
  if (warmup_steps > 0 && step < warmup_steps) {
    return base_lr * double(step + 1) / double(warmup_steps);
  }
  if (steps_per_cycle <= 0) return base_lr;
  const std::int64_t t = (step - warmup_steps) % steps_per_cycle;
  const double lr_min = base_lr * min_factor;
  const double cosine = 0.5 * (1.0 + std::cos(3.14159265358979323846 * double(t) /
                                              double(steps_per_cycle)));
  return lr_min + (base_lr - lr_min) * cosine;
}

// ---------------------------------------------------------------------------
// COCO-style AP
// ---------------------------------------------------------------------------

struct ScoredBox {
  double score = 0;
  BoxN box;
};

struct EvalResult {
  double ap = 0, ap50 = 0, ap75 = 0;
  std::array<double, 10> per_threshold{};  // IoU 0.50:0.05:0.95
  nlohmann::json per_image = nlohmann::json::array();
};

// 101-point interpolated AP over IoU thresholds 0.50:0.05:0.95. One ground
// truth per image; predictions are pooled and ranked by score; at each
// threshold the highest-ranked prediction above it takes the ground truth,
// later duplicates count as false positives.
inline EvalResult evaluate_ap(const std::vector<std::vector<ScoredBox>>& preds_per_image,
                              const std::vector<BoxN>& gts) {
  if (preds_per_image.size() != gts.size()) {
    throw std::invalid_argument("evaluate_ap: predictions/ground truth size mismatch");
  }
  const int n_images = static_cast<int>(gts.size());
  if (n_images == 0) throw std::invalid_argument("evaluate_ap: empty dataset");

  struct Ranked {
    double score;
    double iou;
    int image;
    int index;
  };
  std::vector<Ranked> ranked;
  for (int im = 0; im < n_images; ++im) {
    const BoxCorners gt = box_convert(gts[im]);
    int idx = 0;
    for (const auto& p : preds_per_image[im]) {
      ranked.push_back({p.score, iou(box_convert(p.box), gt), im, idx++});
    }
  }
  std::sort(ranked.begin(), ranked.end(), [](const Ranked& a, const Ranked& b) {
    if (a.score != b.score) return a.score > b.score;
    if (a.image != b.image) return a.image < b.image;
    return a.index < b.index;
  });

  auto ap_at = [&](double threshold) {
    std::vector<char> gt_taken(n_images, 0);
    std::vector<double> precision, recall;
    precision.reserve(ranked.size());
    recall.reserve(ranked.size());
    int tp = 0, fp = 0;
    for (const auto& r : ranked) {
      if (r.iou >= threshold && !gt_taken[r.image]) {
        gt_taken[r.image] = 1;
        ++tp;
      } else {
        ++fp;
      }
      precision.push_back(double(tp) / double(tp + fp));
      recall.push_back(double(tp) / double(n_images));
    }
    // Precision envelope from the right, then 101-point interpolation.
    for (int i = static_cast<int>(precision.size()) - 2; i >= 0; --i) {
      precision[i] = std::max(precision[i], precision[i + 1]);
    }
    double sum = 0;
    std::size_t j = 0;
    for (int k = 0; k <= 100; ++k) {
      const double r = k / 100.0;
      while (j < recall.size() && recall[j] < r) ++j;
      sum += j < precision.size() ? precision[j] : 0.0;
    }
    return sum / 101.0;
  };

  EvalResult result;
  double ap_sum = 0;
  for (int k = 0; k < 10; ++k) {
    const double t = 0.5 + 0.05 * k;
    const double ap = ap_at(t);
    result.per_threshold[k] = ap;
    ap_sum += ap;
    if (k == 0) result.ap50 = ap;
    if (k == 5) result.ap75 = ap;
  }
  result.ap = ap_sum / 10.0;
  return result;
}

// ---------------------------------------------------------------------------
// Engine: shared state for train/eval/infer
// ---------------------------------------------------------------------------

namespace detail {

inline int effective_threads(int configured) {
  if (configured > 0) return configured;
  const unsigned hw = std::thread::hardware_concurrency();
  return hw == 0 ? 1 : static_cast<int>(hw);
}

// Per-category prior embeddings converted once to the training scalar type.
struct BundleTable {
  std::map<std::string, PriorBundle<float>> base;

  static BundleTable from_cache(const PriorCache& cache) {
    BundleTable t;
    for (const auto& [name, entry] : cache.categories) {
      t.base.emplace(name, bundle_for<float>(cache, name, BoxN{0.5, 0.5, 0.5, 0.5}));
    }
    return t;
  }

  PriorBundle<float> bundle(const std::string& category, const BoxN& gt) const {
    auto it = base.find(category);
    if (it == base.end()) {
      throw EngineError("no prior bundle for category '" + category + "'");
    }
    PriorBundle<float> b = it->second;
    b.gt_box = gt;
    return b;
  }

  // Spatial-only runs need no cache; the zero-width bundle is never read.
  PriorBundle<float> empty_bundle(const std::string& category, const BoxN& gt, int d_t,
                                  int d_v) const {
    PriorBundle<float> b;
    b.category = category;
    b.gt_box = gt;
    b.text_embeddings = Tensor<float>({1, d_t});
    b.image_embeddings = Tensor<float>({0, d_v});
    return b;
  }
};

}  // namespace detail

struct TrainResult {
  std::filesystem::path checkpoint_dir;
  std::filesystem::path log_path;
  nlohmann::json metric_history = nlohmann::json::array();
  LossReport first_report;
  LossReport final_report;
  std::int64_t steps = 0;
};

class Engine {
public:
  explicit Engine(const RunConfig& cfg) : cfg_(cfg) {
    cfg_.check();
    Rng init_rng(mix_seed(cfg_.seed, "init"));
    model_ = std::make_unique<Model<float>>(cfg_.model, store_, init_rng);
    aggregator_ =
        std::make_unique<Aggregator<float>>(cfg_.aggregator_config(), store_, init_rng);
  }

  ParamStore<float>& store() { return store_; }
  Model<float>& model() { return *model_; }
  Aggregator<float>& aggregator() { return *aggregator_; }
  const RunConfig& config() const { return cfg_; }

  void load(const std::filesystem::path& checkpoint_dir) {
    load_checkpoint(checkpoint_dir, store_);
  }

  // -------------------------------------------------------------------------
  // Training
  // -------------------------------------------------------------------------

  TrainResult train() {
    const auto root = std::filesystem::path(cfg_.dataset_dir);
    auto train_records = load_dataset(root / "train" / "annotations.json", root / "train");
    std::vector<SceneRecord> val_records;
    if (std::filesystem::exists(root / "val" / "annotations.json")) {
      val_records = load_dataset(root / "val" / "annotations.json", root / "val");
    }
    if (train_records.empty()) throw EngineError("training set is empty");

    detail::BundleTable bundles;
    if (cfg_.priors.needs_cache()) {
      if (cfg_.prior_cache_dir.empty()) {
        throw EngineError("semantic/visual priors enabled but no prior cache configured");
      }
      const PriorCache cache = read_prior_cache(cfg_.prior_cache_dir);
      if (cache.d_t != cfg_.d_t || cache.d_v != cfg_.d_v) {
        throw EngineError("prior cache dims [" + std::to_string(cache.d_t) + "," +
                          std::to_string(cache.d_v) + "] do not match config [" +
                          std::to_string(cfg_.d_t) + "," + std::to_string(cfg_.d_v) + "]");
      }
      bundles = detail::BundleTable::from_cache(cache);
      // Configuration errors surface before training starts.
      for (const auto& r : train_records) {
        if (!bundles.base.count(r.category)) {
          throw EngineError("prior cache is missing category '" + r.category +
                            "' required by the training set");
        }
      }
    }

    // Images cached in memory; desk-scale datasets are small.
    std::vector<Tensor<float>> images;
    images.reserve(train_records.size());
    for (const auto& r : train_records) images.push_back(r.load_image());

    const std::filesystem::path out_dir(cfg_.out_dir.empty() ? "kad_run" : cfg_.out_dir);
    std::filesystem::create_directories(out_dir);
    std::ofstream log(out_dir / "train_log.jsonl", std::ios::trunc);
    if (!log) throw EngineError("cannot open training log under " + out_dir.string());

    AdamW opt(store_, cfg_.weight_decay);
    const std::int64_t steps_per_epoch =
        (static_cast<std::int64_t>(train_records.size()) + cfg_.batch_size - 1) /
        cfg_.batch_size;
    const std::int64_t steps_per_cycle = steps_per_epoch * cfg_.restart_period_epochs;

    TrainResult result;
    result.checkpoint_dir = out_dir / "checkpoint";
    result.log_path = out_dir / "train_log.jsonl";

    Rng shuffle_rng(mix_seed(cfg_.seed, "shuffle"));
    std::vector<int> order(train_records.size());
    std::iota(order.begin(), order.end(), 0);

    std::int64_t global_step = 0;
    for (int epoch = 0; epoch < cfg_.epochs; ++epoch) {
      shuffle_rng.shuffle(order);
      for (std::int64_t bstart = 0; bstart < static_cast<std::int64_t>(order.size());
           bstart += cfg_.batch_size) {
        const int bsize = static_cast<int>(
            std::min<std::int64_t>(cfg_.batch_size, order.size() - bstart));
        std::vector<SampleOutcome> outcomes(bsize);
        auto work = [&](int s) {
          const int rec_idx = order[bstart + s];
          try {
            outcomes[s] = run_sample(train_records[rec_idx], images[rec_idx], bundles);
          } catch (const std::exception& e) {
            outcomes[s].error = e.what();
          }
          outcomes[s].record_index = rec_idx;
        };
        const int workers = std::min(detail::effective_threads(cfg_.threads), bsize);
        if (workers <= 1) {
          for (int s = 0; s < bsize; ++s) work(s);
        } else {
          std::vector<std::thread> pool;
          std::atomic<int> next{0};
          for (int w = 0; w < workers; ++w) {
            pool.emplace_back([&] {
              for (;;) {
                const int s = next.fetch_add(1);
                if (s >= bsize) return;
                work(s);
              }
            });
          }
          for (auto& t : pool) t.join();
        }

        // Fold sample gradients in sample order: deterministic for any
        // worker count.
        std::vector<Tensor<float>> grads;
        grads.reserve(store_.entries().size());
        for (const auto& e : store_.entries()) grads.push_back(e.var.value().zeros_like());
        for (int s = 0; s < bsize; ++s) {
          if (!outcomes[s].error.empty()) {
            dump_nan_batch(out_dir, epoch, global_step, outcomes);
            throw EngineError("sample failed at step " + std::to_string(global_step) +
                              " (" + outcomes[s].error + "); batch dumped to " +
                              (out_dir / "nan_dump.json").string());
          }
        }
        double lv = 0, lk = 0, le = 0, la = 0;
        for (int s = 0; s < bsize; ++s) {
          const SampleOutcome& o = outcomes[s];
          lv += o.l_v;
          lk += o.l_k;
          le += o.l_emb;
          la += o.l_attn;
          for (std::size_t p = 0; p < store_.entries().size(); ++p) {
            const Tensor<float>* g = o.grads.find(store_.entries()[p].var.node());
            if (g) axpy(*g, grads[p], 1.0f / bsize);
          }
        }
        lv /= bsize;
        lk /= bsize;
        le /= bsize;
        la /= bsize;

        const LossReport report =
            total_objective(lv, lk, le, la, cfg_.weights, cfg_.distill);
        if (!std::isfinite(report.total)) {
          dump_nan_batch(out_dir, epoch, global_step, outcomes);
          throw EngineError("non-finite loss at step " + std::to_string(global_step) +
                            "; batch dumped to " + (out_dir / "nan_dump.json").string());
        }

        const double lr_t =
            cosine_warm_restart_lr(global_step, steps_per_cycle, cfg_.lr_transformer,
                                   cfg_.lr_min_factor, cfg_.warmup_steps);
        const double lr_b =
            cosine_warm_restart_lr(global_step, steps_per_cycle, cfg_.lr_backbone,
                                   cfg_.lr_min_factor, cfg_.warmup_steps);
        opt.step(store_, grads, lr_b, lr_t);

        nlohmann::json line{{"step", global_step}, {"epoch", epoch},
                            {"l_v", report.l_v},   {"l_k", report.l_k},
                            {"l_emb", report.l_emb}, {"l_attn", report.l_attn},
                            {"l_distill", report.l_distill}, {"total", report.total},
                            {"lr", lr_t}};
        log << line.dump() << "\n";
        if (global_step == 0) result.first_report = report;
        result.final_report = report;
        ++global_step;
      }

      nlohmann::json epoch_entry{{"epoch", epoch}};
      const bool eval_now =
          !val_records.empty() && cfg_.eval_every_epochs > 0 &&
          ((epoch + 1) % cfg_.eval_every_epochs == 0 || epoch + 1 == cfg_.epochs);
      if (eval_now) {
        const EvalResult ev = evaluate_student(val_records);
        epoch_entry["ap"] = ev.ap;
        epoch_entry["ap50"] = ev.ap50;
        epoch_entry["ap75"] = ev.ap75;
      }
      result.metric_history.push_back(epoch_entry);
      save(result.checkpoint_dir, epoch, result.metric_history);
    }
    if (cfg_.epochs == 0) {
      save(result.checkpoint_dir, -1, result.metric_history);
    }
    log.flush();
    result.steps = global_step;
    return result;
  }

  // -------------------------------------------------------------------------
  // Evaluation
  // -------------------------------------------------------------------------

  std::vector<ScoredBox> predict_student(const Tensor<float>& image) const {
    ad::NoGrad guard;
    auto [det, trace] = model_->run_student(image);
    std::vector<ScoredBox> out;
    out.reserve(det.size());
    for (int i = 0; i < det.size(); ++i) out.push_back({det.score(i), det.box(i)});
    return out;
  }

  EvalResult evaluate_student(const std::vector<SceneRecord>& records) const {
    std::vector<std::vector<ScoredBox>> preds(records.size());
    std::vector<BoxN> gts(records.size());
    const int workers =
        std::min<int>(detail::effective_threads(cfg_.threads), static_cast<int>(records.size()));
    std::atomic<std::size_t> next{0};
    auto work = [&] {
      for (;;) {
        const std::size_t i = next.fetch_add(1);
        if (i >= records.size()) return;
        preds[i] = predict_student(records[i].load_image());
        gts[i] = records[i].gt_box;
      }
    };
    if (workers <= 1) {
      work();
    } else {
      std::vector<std::thread> pool;
      for (int w = 0; w < workers; ++w) pool.emplace_back(work);
      for (auto& t : pool) t.join();
    }
    return evaluate_ap(preds, gts);
  }

  // Teacher-branch evaluation: builds the oracle query per record (the
  // teacher is a training-time construct, so the ground-truth box is in
  // scope here by design).
  EvalResult evaluate_teacher(const std::vector<SceneRecord>& records,
                              const detail::BundleTable& bundles) const {
    std::vector<std::vector<ScoredBox>> preds(records.size());
    std::vector<BoxN> gts(records.size());
    for (std::size_t i = 0; i < records.size(); ++i) {
      ad::NoGrad guard;
      const SceneRecord& rec = records[i];
      auto feats = model_->encode(rec.load_image());
      const PriorBundle<float> bundle =
          cfg_.priors.needs_cache()
              ? bundles.bundle(rec.category, rec.gt_box)
              : bundles.empty_bundle(rec.category, rec.gt_box, cfg_.d_t, cfg_.d_v);
      auto oracle = aggregator_->build_oracle_query(bundle, cfg_.priors);
      auto [det, trace] = model_->run_teacher(feats, oracle);
      preds[i] = {{det.score(0), det.box(0)}};
      gts[i] = rec.gt_box;
    }
    return evaluate_ap(preds, gts);
  }

  EvalResult evaluate_teacher(const std::vector<SceneRecord>& records) const {
    detail::BundleTable bundles;
    if (cfg_.priors.needs_cache()) {
      bundles = detail::BundleTable::from_cache(read_prior_cache(cfg_.prior_cache_dir));
    }
    return evaluate_teacher(records, bundles);
  }

  // -------------------------------------------------------------------------
  // Inference (student only; never touches the prior cache or the oracle)
  // -------------------------------------------------------------------------

  struct Inference {
    double score = 0;
    BoxN box;
    int query_index = 0;
    std::vector<std::filesystem::path> heatmap_files;
  };

  Inference infer_active(const Tensor<float>& image,
                         const std::optional<std::filesystem::path>& attn_dump = {}) const {
    ad::NoGrad guard;
    auto [det, trace] = model_->run_student(image);
    int best = 0;
    for (int i = 1; i < det.size(); ++i) {
      if (det.score(i) > det.score(best)) best = i;
    }
    Inference out;
    out.score = det.score(best);
    out.box = det.box(best);
    out.query_index = best;
    if (attn_dump) {
      std::filesystem::create_directories(*attn_dump);
      const auto maps = attention_export(trace, best);
      for (std::size_t l = 0; l < maps.size(); ++l) {
        const auto pgm = *attn_dump / ("attn_layer" + std::to_string(l) + ".pgm");
        const auto raw = *attn_dump / ("attn_layer" + std::to_string(l) + ".f32");
        write_pgm_normalized(pgm, maps[l]);
        Tensor<float> row({1, static_cast<int>(maps[l].numel())});
        for (std::int64_t i = 0; i < maps[l].numel(); ++i) row[i] = maps[l][i];
        write_f32_blob(raw, row);
        out.heatmap_files.push_back(pgm);
        out.heatmap_files.push_back(raw);
      }
    }
    return out;
  }

  void save(const std::filesystem::path& dir, int epoch,
            const nlohmann::json& metric_history) const {
    nlohmann::json meta;
    meta["config"] = cfg_.to_json();
    meta["epoch"] = epoch;
    meta["seed"] = cfg_.seed;
    meta["metric_history"] = metric_history;
    save_checkpoint(dir, store_, meta);
  }

  // ---------------------------------------------------------------------------
  // One training sample: encode once, both branches, matching, all losses.
  // ---------------------------------------------------------------------------

  struct SampleOutcome {
    ad::GradStore<float> grads;
    double l_v = 0, l_k = 0, l_emb = 0, l_attn = 0;
    int record_index = -1;
    int matched_index = -1;
    std::string error;  // non-empty: the sample failed (NaN guard path)
  };

  SampleOutcome run_sample(const SceneRecord& rec, const Tensor<float>& image,
                           const detail::BundleTable& bundles) const {
    SampleOutcome out;
    auto feats = model_->encode(image);
    auto [s_trace, s_det] = model_->decode(feats, model_->student_queries());

    // Matching on detached values; gradients flow only through the losses
    // evaluated at the chosen index.
    const int m = s_det.size();
    Tensor<double> cost({m, 1});
    const MatchCost mc{cfg_.weights.lambda};
    for (int i = 0; i < m; ++i) {
      cost.at(i, 0) = match_cost(s_det.score(i), s_det.box(i), rec.gt_box, mc);
    }
    const Assignment assignment = hungarian_assign(cost);
    const int matched = assignment.pairs[0].first;
    out.matched_index = matched;

    auto scores_row = ad::reshape(s_det.scores, {1, m});
    auto matched_score = ad::slice_cols(scores_row, matched, 1);
    auto matched_box = ad::slice_rows(s_det.boxes, matched, 1);
    ad::Var<float> unmatched;
    if (m > 1 && cfg_.negative_supervision) {
      std::vector<ad::Var<float>> parts;
      if (matched > 0) parts.push_back(ad::slice_cols(scores_row, 0, matched));
      if (matched + 1 < m) {
        parts.push_back(ad::slice_cols(scores_row, matched + 1, m - matched - 1));
      }
      unmatched = parts.size() == 1 ? parts[0] : ad::concat_cols(parts);
    }
    auto l_v = detection_loss(matched_score, matched_box, rec.gt_box, unmatched,
                              cfg_.weights.lambda, cfg_.negative_supervision);
    ad::Var<float> total = l_v;

    ad::Var<float> l_k, l_emb, l_attn;
    if (cfg_.priors.any()) {
      const PriorBundle<float> bundle =
          cfg_.priors.needs_cache()
              ? bundles.bundle(rec.category, rec.gt_box)
              : bundles.empty_bundle(rec.category, rec.gt_box, cfg_.d_t, cfg_.d_v);
      auto oracle = aggregator_->build_oracle_query(bundle, cfg_.priors);
      auto [t_det, t_trace] = model_->run_teacher(feats, oracle);
      auto t_score = ad::reshape(t_det.scores, {1, 1});
      auto t_box = ad::slice_rows(t_det.boxes, 0, 1);
      l_k = detection_loss(t_score, t_box, rec.gt_box, ad::Var<float>(),
                           cfg_.weights.lambda);
      total = ad::add(total, l_k);
      if (cfg_.distill != DistillMode::off) {
        l_emb = emb_distill_loss(t_trace, s_trace, matched);
        ad::Var<float> distill = l_emb;
        if (cfg_.distill == DistillMode::emb_attn) {
          l_attn = attn_distill_loss(t_trace, s_trace, matched);
          distill = ad::add(distill, ad::scale(l_attn, static_cast<float>(cfg_.weights.eta)));
        }
        total = ad::add(total, ad::scale(distill, static_cast<float>(cfg_.weights.alpha)));
      }
    }

    out.grads = ad::backward(total);
    out.l_v = l_v.item();
    out.l_k = l_k.defined() ? l_k.item() : 0.0;
    out.l_emb = l_emb.defined() ? l_emb.item() : 0.0;
    out.l_attn = l_attn.defined() ? l_attn.item() : 0.0;
    return out;
  }

private:
  void dump_nan_batch(const std::filesystem::path& out_dir, int epoch, std::int64_t step,
                      const std::vector<SampleOutcome>& outcomes) const {
    nlohmann::json dump;
    dump["epoch"] = epoch;
    dump["step"] = step;
    nlohmann::json samples = nlohmann::json::array();
    for (const auto& o : outcomes) {
      samples.push_back({{"record_index", o.record_index},
                         {"matched_index", o.matched_index},
                         {"l_v", o.l_v},
                         {"l_k", o.l_k},
                         {"l_emb", o.l_emb},
                         {"l_attn", o.l_attn},
                         {"error", o.error}});
    }
    dump["samples"] = samples;
    write_file_bytes(out_dir / "nan_dump.json", dump.dump(2) + "\n");
  }

  RunConfig cfg_;
  ParamStore<float> store_;
  std::unique_ptr<Model<float>> model_;
  std::unique_ptr<Aggregator<float>> aggregator_;
};

// Convenience entry points mirroring the CLI surface.

inline TrainResult train(const RunConfig& cfg) {
  Engine engine(cfg);
  return engine.train();
}

inline EvalResult evaluate_ap(const std::filesystem::path& checkpoint_dir,
                              const std::filesystem::path& data_dir) {
  // Accept either a split directory or a dataset root with val/.
  std::filesystem::path ann = data_dir / "annotations.json";
  std::filesystem::path root = data_dir;
  if (!std::filesystem::exists(ann)) {
    ann = data_dir / "val" / "annotations.json";
    root = data_dir / "val";
  }
  const auto records = load_dataset(ann, root);
  nlohmann::json meta = nlohmann::json::parse(read_file_bytes(checkpoint_dir / "checkpoint.json"));
  RunConfig cfg = RunConfig::from_json(meta.at("config"));
  Engine engine(cfg);
  engine.load(checkpoint_dir);
  return engine.evaluate_student(records);
}

}  // namespace kad
