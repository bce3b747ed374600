// Acceptance suite: one criterion per numbered check, one pass/fail line
// each. Run all (`acceptance`) or a subset (`acceptance 1 4 9`). Heavy
// benchmark runs cache their artifacts under --workdir and are reused when
// the stored config matches.

#include "kad/engine.hpp"
#include "kad/losses.hpp"
#include "kad/matching.hpp"
#include "kad/model.hpp"
#include "kad/priors.hpp"

#include <json.hpp>

#include <algorithm>
#include <chrono>
#include <cstdio>
#include <cstring>
#include <filesystem>
#include <functional>
#include <iostream>
#include <sstream>
#include <string>
#include <unordered_set>
#include <vector>

#include "../support/gradcheck.hpp"

using namespace kad;
using ad::Var;
using kad::test::max_grad_rel_err;

namespace {

namespace fs = std::filesystem;

fs::path g_workdir = "acceptance_work";

double now_seconds() {
  using clock = std::chrono::steady_clock;
  return std::chrono::duration<double>(clock::now().time_since_epoch()).count();
}

struct CheckFailure : std::runtime_error {
  using std::runtime_error::runtime_error;
};

void require(bool ok, const std::string& what) {
  if (!ok) throw CheckFailure(what);
}

Tensor<double> randn(Rng& rng, std::vector<int> shape, double scale = 1.0) {
  Tensor<double> t(std::move(shape));
  for (std::int64_t i = 0; i < t.numel(); ++i) t[i] = scale * rng.normal();
  return t;
}

Tensor<double> random_simplex_row(Rng& rng, int n, double floor = 1e-2) {
  Tensor<double> t({1, n});
  double sum = 0;
  for (int i = 0; i < n; ++i) {
    t[i] = floor + rng.uniform();
    sum += t[i];
  }
  for (int i = 0; i < n; ++i) t[i] /= sum;
  return t;
}

// ---------------------------------------------------------------------------
// Shared benchmark infrastructure (criteria 5-8, 11)
// ---------------------------------------------------------------------------

// Synthesizes a dataset under the workdir once; regenerates only if the
// stored config changed.
fs::path ensure_dataset(const std::string& tag, const SynthConfig& cfg) {
  const fs::path dir = g_workdir / tag;
  const fs::path stamp = dir / "synth_config.json";
  if (fs::exists(stamp)) {
    if (nlohmann::json::parse(read_file_bytes(stamp)) == cfg.to_json()) return dir;
    fs::remove_all(dir);
  }
  synth_generate(cfg, dir);
  return dir;
}

fs::path ensure_mock_cache(const std::string& tag, const std::vector<std::string>& cats,
                           std::uint64_t seed, int p, int q, int d_t, int d_v) {
  const fs::path dir = g_workdir / tag;
  const nlohmann::json want{{"seed", seed}, {"p", p}, {"q", q}, {"d_t", d_t}, {"d_v", d_v}};
  const fs::path stamp = dir / "cache_stamp.json";
  if (fs::exists(stamp) && nlohmann::json::parse(read_file_bytes(stamp)) == want &&
      verify_prior_cache(dir).empty()) {
    return dir;
  }
  fs::remove_all(dir);
  write_prior_cache(mock_priors(cats, seed, p, q, d_t, d_v), dir);
  write_file_bytes(stamp, want.dump());
  return dir;
}

// Trains (or reuses) a run; returns the final-epoch validation AP.
double run_benchmark(const std::string& tag, RunConfig cfg, double* seconds = nullptr) {
  const fs::path out = g_workdir / "runs" / tag;
  cfg.out_dir = out.string();
  const fs::path meta_path = out / "checkpoint" / "checkpoint.json";
  if (fs::exists(meta_path)) {
    const auto meta = nlohmann::json::parse(read_file_bytes(meta_path));
    if (meta.at("config") == cfg.to_json() &&
        meta.at("epoch").get<int>() == cfg.epochs - 1) {
      const auto& history = meta.at("metric_history");
      if (!history.empty() && history.back().contains("ap")) {
        if (seconds) *seconds = 0;
        std::printf("    [cached] %s: AP %.4f\n", tag.c_str(),
                    history.back()["ap"].get<double>());
        return history.back()["ap"].get<double>();
      }
    }
    fs::remove_all(out);
  }
  std::printf("    training %s (%d epochs)...\n", tag.c_str(), cfg.epochs);
  std::fflush(stdout);
  const double t0 = now_seconds();
  const TrainResult result = train(cfg);
  const double elapsed = now_seconds() - t0;
  if (seconds) *seconds = elapsed;
  require(!result.metric_history.empty(), "run produced no metric history");
  const auto& last = result.metric_history.back();
  require(last.contains("ap"), "final epoch has no AP entry");
  std::printf("    %s: AP %.4f (%.0f s)\n", tag.c_str(), last["ap"].get<double>(), elapsed);
  std::fflush(stdout);
  return last["ap"].get<double>();
}

// The synthetic benchmark of criteria 7/8: 2000 train / 400 val scenes at
// desk scale.
SynthConfig benchmark_dataset_config() {
  SynthConfig d;
  d.image_size = 96;
  d.categories = 6;
  d.train_scenes = 2000;
  d.val_scenes = 400;
  d.seed = 1007;
  return d;
}

RunConfig benchmark_run_config(const fs::path& dataset, const fs::path& cache,
                               std::uint64_t seed) {
  RunConfig cfg;  // desk-scale model defaults: d=128, m=25, L=3, 2 enc, 4 heads
  cfg.d_t = 510;
  cfg.d_v = 510;
  cfg.priors = PriorFlags{true, true, true};
  cfg.distill = DistillMode::emb_attn;
  cfg.epochs = 6;
  cfg.batch_size = 4;
  cfg.lr_transformer = 3e-4;
  cfg.lr_backbone = 3e-5;
  cfg.eval_every_epochs = 3;
  cfg.seed = seed;
  cfg.threads = 0;
  cfg.dataset_dir = dataset.string();
  cfg.prior_cache_dir = cache.string();
  return cfg;
}

// Small fast configuration shared by the structural criteria.
struct TinySetup {
  fs::path dataset;
  RunConfig cfg;
};

TinySetup tiny_setup(const std::string& tag, int scenes, int epochs) {
  SynthConfig d;
  d.image_size = 32;
  d.categories = 3;
  d.min_instances = 3;
  d.max_instances = 4;
  d.train_scenes = scenes;
  d.val_scenes = 8;
  d.seed = 23;
  TinySetup s;
  s.dataset = ensure_dataset("tiny_dataset_" + tag, d);
  RunConfig cfg;
  cfg.model.d = 32;
  cfg.model.num_queries = 8;
  cfg.model.decoder_layers = 2;
  cfg.model.encoder_layers = 1;
  cfg.model.heads = 4;
  cfg.model.image_size = 32;
  cfg.model.backbone_channels = {8, 16};
  cfg.d_t = 16;
  cfg.d_v = 12;
  cfg.priors = PriorFlags{false, false, true};
  cfg.distill = DistillMode::emb_attn;
  cfg.epochs = epochs;
  cfg.batch_size = 2;
  cfg.lr_transformer = 3e-4;
  cfg.lr_backbone = 3e-5;
  cfg.seed = 99;
  cfg.dataset_dir = s.dataset.string();
  s.cfg = cfg;
  return s;
}

// ---------------------------------------------------------------------------
// Criteria
// ---------------------------------------------------------------------------

// 1. Hungarian vs brute-force totals on 500 seeded random instances.
void criterion_1(std::ostream& detail) {
  const double t0 = now_seconds();
  Rng rng(20240501);
  for (int trial = 0; trial < 500; ++trial) {
    const int m = rng.range(1, 6);
    const int k = rng.range(1, m);
    Tensor<double> cost({m, k});
    for (std::int64_t i = 0; i < cost.numel(); ++i) cost[i] = rng.uniform(-10.0, 10.0);
    const Assignment h = hungarian_assign(cost);
    const Assignment b = brute_force_assign(cost);
    require(std::abs(h.total_cost - b.total_cost) <= 1e-9,
            "totals differ at trial " + std::to_string(trial) + ": " +
                std::to_string(h.total_cost) + " vs " + std::to_string(b.total_cost));
  }
  const double elapsed = now_seconds() - t0;
  require(elapsed < 5.0, "runtime " + std::to_string(elapsed) + "s exceeds 5s");
  detail << "500 instances agree within 1e-9, " << elapsed << " s";
}

// 2. Analytic vs central finite-difference gradients for every loss.
void criterion_2(std::ostream& detail) {
  const double t0 = now_seconds();
  const double tol = 1e-5;
  double worst = 0;

  // giou_loss w.r.t. all 8 corner coordinates.
  {
    Rng rng(101);
    int done = 0;
    while (done < 10) {
      const BoxN a = make_box(rng.uniform(0.2, 0.8), rng.uniform(0.2, 0.8),
                              rng.uniform(0.1, 0.35), rng.uniform(0.1, 0.35));
      const BoxN b = make_box(rng.uniform(0.2, 0.8), rng.uniform(0.2, 0.8),
                              rng.uniform(0.1, 0.35), rng.uniform(0.1, 0.35));
      const BoxCorners ca = box_convert(a), cb = box_convert(b);
      if (std::abs(ca.x1 - cb.x1) < 1e-3 || std::abs(ca.x2 - cb.x2) < 1e-3 ||
          std::abs(ca.y1 - cb.y1) < 1e-3 || std::abs(ca.y2 - cb.y2) < 1e-3) {
        continue;
      }
      std::array<double, 4> da{}, db{};
      giou_loss_grad(ca, cb, da, db);
      const double step = 1e-6;
      auto bump = [&](int which, int coord, double delta) {
        BoxCorners xa = ca, xb = cb;
        double* f[2][4] = {{&xa.x1, &xa.y1, &xa.x2, &xa.y2},
                           {&xb.x1, &xb.y1, &xb.x2, &xb.y2}};
        *f[which][coord] += delta;
        return giou_loss(xa, xb);
      };
      for (int which = 0; which < 2; ++which) {
        for (int coord = 0; coord < 4; ++coord) {
          const double fd =
              (bump(which, coord, step) - bump(which, coord, -step)) / (2 * step);
          const double an = which == 0 ? da[coord] : db[coord];
          worst = std::max(worst, kad::test::rel_err(an, fd));
        }
      }
      ++done;
    }
  }

  // box_l1 (away from the sign kinks).
  {
    Rng rng(202);
    for (int seed = 0; seed < 10; ++seed) {
      const BoxN a = make_box(0.3 + 0.02 * seed, 0.6, 0.2, 0.3);
      const BoxN b = make_box(0.5, 0.4 - 0.01 * seed, 0.25, 0.22);
      std::array<double, 4> da{}, db{};
      box_l1_grad(a, b, da, db);
      const double step = 1e-6;
      auto bump = [&](int coord, double delta) {
        BoxN xa = a;
        double* f[4] = {&xa.cx, &xa.cy, &xa.w, &xa.h};
        *f[coord] += delta;
        return box_l1(xa, b);
      };
      for (int coord = 0; coord < 4; ++coord) {
        const double fd = (bump(coord, step) - bump(coord, -step)) / (2 * step);
        worst = std::max(worst, kad::test::rel_err(da[coord], fd));
      }
    }
  }

  // detection_loss w.r.t. matched score, matched box, unmatched scores.
  {
    Rng rng(303);
    for (int seed = 0; seed < 10; ++seed) {
      const BoxN gt = make_box(rng.uniform(0.35, 0.65), rng.uniform(0.35, 0.65),
                               rng.uniform(0.15, 0.35), rng.uniform(0.15, 0.35));
      auto score = Var<double>::leaf(Tensor<double>({1}, {rng.uniform(0.1, 0.9)}));
      Tensor<double> boxv({1, 4}, {gt.cx + rng.uniform(0.02, 0.08),
                                   gt.cy - rng.uniform(0.02, 0.08),
                                   gt.w + rng.uniform(0.02, 0.06),
                                   gt.h - rng.uniform(0.02, 0.06)});
      auto box = Var<double>::leaf(boxv);
      Tensor<double> negs({3});
      for (int i = 0; i < 3; ++i) negs[i] = rng.uniform(0.1, 0.9);
      auto unmatched = Var<double>::leaf(negs);
      auto make = [&] { return detection_loss(score, box, gt, unmatched, 5.0, true); };
      worst = std::max(worst, max_grad_rel_err(make, {score, box, unmatched}));
    }
  }

  // attn_distill_loss w.r.t. the student attention rows.
  {
    Rng rng(404);
    for (int seed = 0; seed < 10; ++seed) {
      const int k = 3, s = 8, layers = 2;
      DecoderTrace<double> teacher, student;
      teacher.feat_h = student.feat_h = 2;
      teacher.feat_w = student.feat_w = 4;
      std::vector<Var<double>> student_attns;
      for (int l = 0; l < layers; ++l) {
        teacher.attention.push_back(Var<double>::constant(random_simplex_row(rng, s)));
        teacher.embeddings.push_back(Var<double>::constant(randn(rng, {1, 6})));
        Tensor<double> sa({k, s});
        for (int r = 0; r < k; ++r) {
          const Tensor<double> row = random_simplex_row(rng, s);
          for (int c = 0; c < s; ++c) sa.at(r, c) = row[c];
        }
        auto v = Var<double>::leaf(sa);
        student.attention.push_back(v);
        student.embeddings.push_back(Var<double>::constant(randn(rng, {k, 6})));
        student_attns.push_back(v);
      }
      auto make = [&] { return attn_distill_loss(teacher, student, 1); };
      worst = std::max(worst, max_grad_rel_err(make, student_attns));
    }
  }

  // emb_distill_loss w.r.t. the student embeddings.
  {
    Rng rng(505);
    for (int seed = 0; seed < 10; ++seed) {
      const int k = 3, d = 6, layers = 2;
      DecoderTrace<double> teacher, student;
      teacher.feat_h = student.feat_h = 2;
      teacher.feat_w = student.feat_w = 2;
      std::vector<Var<double>> student_embs;
      for (int l = 0; l < layers; ++l) {
        teacher.embeddings.push_back(Var<double>::constant(randn(rng, {1, d})));
        teacher.attention.push_back(Var<double>::constant(random_simplex_row(rng, 4)));
        auto v = Var<double>::leaf(randn(rng, {k, d}));
        student.embeddings.push_back(v);
        student.attention.push_back(Var<double>::constant(random_simplex_row(rng, 4)));
        student_embs.push_back(v);
      }
      auto make = [&] { return emb_distill_loss(teacher, student, 2); };
      worst = std::max(worst, max_grad_rel_err(make, student_embs));
    }
  }

  // total_objective as a differentiable combination of its components.
  {
    Rng rng(606);
    for (int seed = 0; seed < 10; ++seed) {
      auto lv = Var<double>::leaf(Tensor<double>({1}, {rng.uniform(0.1, 3)}));
      auto lk = Var<double>::leaf(Tensor<double>({1}, {rng.uniform(0.1, 3)}));
      auto le = Var<double>::leaf(Tensor<double>({1}, {rng.uniform(0.1, 3)}));
      auto la = Var<double>::leaf(Tensor<double>({1}, {rng.uniform(0.1, 3)}));
      const double alpha = rng.uniform(0.05, 0.5), eta = rng.uniform(0.5, 2.0);
      auto make = [&] {
        return ad::add(ad::add(lv, lk),
                       ad::scale(ad::add(le, ad::scale(la, eta)), alpha));
      };
      worst = std::max(worst, max_grad_rel_err(make, {lv, lk, le, la}));
      // The composed value agrees with the reported total.
      const LossReport r = total_objective(lv.item(), lk.item(), le.item(), la.item(),
                                           LossWeights{5.0, alpha, eta});
      require(std::abs(make().item() - r.total) < 1e-12, "total mismatch vs report");
    }
  }

  const double elapsed = now_seconds() - t0;
  require(worst <= tol, "max relative error " + std::to_string(worst) + " > 1e-5");
  require(elapsed < 30.0, "runtime " + std::to_string(elapsed) + "s exceeds 30s");
  detail << "max rel err " << worst << ", " << elapsed << " s";
}

// 3. Perfect mimicry is a fixed point of both distillation losses.
void criterion_3(std::ostream& detail) {
  Rng rng(707);
  const int k = 5, d = 16, s = 12, layers = 3, matched = 2;
  DecoderTrace<double> teacher, student;
  teacher.feat_h = student.feat_h = 3;
  teacher.feat_w = student.feat_w = 4;
  for (int l = 0; l < layers; ++l) {
    Tensor<double> emb = randn(rng, {k, d});
    Tensor<double> attn({k, s});
    for (int r = 0; r < k; ++r) {
      const Tensor<double> row = random_simplex_row(rng, s);
      for (int c = 0; c < s; ++c) attn.at(r, c) = row[c];
    }
    Tensor<double> t_emb({1, d}), t_attn({1, s});
    for (int c = 0; c < d; ++c) t_emb[c] = emb.at(matched, c);
    for (int c = 0; c < s; ++c) t_attn[c] = attn.at(matched, c);
    student.embeddings.push_back(Var<double>::constant(emb));
    student.attention.push_back(Var<double>::constant(attn));
    teacher.embeddings.push_back(Var<double>::constant(t_emb));
    teacher.attention.push_back(Var<double>::constant(t_attn));
  }
  const double le = emb_distill_loss(teacher, student, matched).item();
  const double la = attn_distill_loss(teacher, student, matched).item();
  require(std::abs(le) <= 1e-9, "l_emb = " + std::to_string(le));
  require(std::abs(la) <= 1e-9, "l_attn = " + std::to_string(la));
  detail << "l_emb = " << le << ", l_attn = " << la;
}

// 4. Every cross-attention row is a probability distribution, both branches.
void criterion_4(std::ostream& detail) {
  int passes = 0;
  double worst_dev = 0;
  for (int param_seed = 0; param_seed < 5 && passes < 100; ++param_seed) {
    ModelConfig mc;
    mc.d = 64;
    mc.num_queries = 10;
    mc.decoder_layers = 2;
    mc.encoder_layers = 1;
    mc.heads = 4;
    mc.image_size = 64;
    mc.backbone_channels = {8, 16, 32};
    ParamStore<float> store;
    Rng prng(1000 + param_seed);
    Model<float> model(mc, store, prng);
    Rng irng(2000 + param_seed);
    ad::NoGrad guard;
    for (int img = 0; img < 10 && passes < 100; ++img) {
      Tensor<float> image({3, mc.image_size, mc.image_size});
      for (std::int64_t i = 0; i < image.numel(); ++i) {
        image[i] = static_cast<float>(irng.uniform());
      }
      auto feats = model.encode(image);
      auto [s_trace, s_det] = model.decode(feats, model.student_queries());
      Tensor<float> ov({1, mc.d});
      for (std::int64_t i = 0; i < ov.numel(); ++i) {
        ov[i] = static_cast<float>(irng.normal());
      }
      auto [t_det, t_trace] =
          model.run_teacher(feats, OracleQuery<float>{Var<float>::constant(ov), PriorFlags{}});
      for (const DecoderTrace<float>* trace : {&s_trace, &t_trace}) {
        for (const auto& attn : trace->attention) {
          for (int r = 0; r < attn.value().rows(); ++r) {
            double sum = 0;
            for (int c = 0; c < attn.value().cols(); ++c) {
              const double v = attn.value().at(r, c);
              require(v >= 0.0, "negative attention mass");
              sum += v;
            }
            worst_dev = std::max(worst_dev, std::abs(sum - 1.0));
            require(std::abs(sum - 1.0) <= 1e-5,
                    "row mass " + std::to_string(sum) + " deviates beyond 1e-5");
          }
        }
      }
      passes += 2;  // one student + one teacher forward
    }
  }
  detail << passes << " forward passes, worst row deviation " << worst_dev;
}

// 5. Teacher- and student-path decoder/head parameters are the same values
//    after 100 training steps.
void criterion_5(std::ostream& detail) {
  TinySetup s = tiny_setup("c5", 40, 5);  // 40 scenes / batch 2 = 20 steps per epoch
  Engine engine(s.cfg);
  const TrainResult result = engine.train();
  require(result.steps >= 100, "expected >= 100 steps, got " + std::to_string(result.steps));

  const auto records = load_dataset(s.dataset / "val" / "annotations.json", s.dataset / "val");
  const Tensor<float> image = records[0].load_image();
  auto feats = engine.model().encode(image);
  auto [s_trace, s_det] = engine.model().decode(feats, engine.model().student_queries());
  Tensor<float> ov({1, s.cfg.model.d});
  for (std::int64_t i = 0; i < ov.numel(); ++i) ov[i] = 0.01f * float(i % 7);
  auto [t_det, t_trace] = engine.model().run_teacher(
      feats, OracleQuery<float>{Var<float>::constant(ov), PriorFlags{}});

  // Collect the parameter leaves each branch actually touches.
  auto collect = [](std::initializer_list<Var<float>> roots) {
    std::unordered_set<const ad::Node<float>*> leaves;
    std::vector<const ad::Node<float>*> stack;
    std::unordered_set<const ad::Node<float>*> seen;
    for (const auto& r : roots) stack.push_back(r.node().get());
    while (!stack.empty()) {
      const auto* n = stack.back();
      stack.pop_back();
      if (!seen.insert(n).second) continue;
      if (n->parents.empty() && n->requires_grad) leaves.insert(n);
      for (const auto& p : n->parents) stack.push_back(p.get());
    }
    return leaves;
  };
  const auto student_leaves = collect({s_det.scores, s_det.boxes});
  const auto teacher_leaves = collect({t_det.scores, t_det.boxes});

  int shared = 0;
  for (const std::string& name : engine.model().decoder_and_head_param_names()) {
    const auto* e = engine.store().find(name);
    require(e != nullptr, "missing parameter " + name);
    const auto* node = e->var.node().get();
    require(student_leaves.count(node) == 1, name + " not reached via student path");
    require(teacher_leaves.count(node) == 1, name + " not reached via teacher path");
    // Same storage, hence exact value equality of the two views.
    const Tensor<float>& via_student = e->var.value();
    const Tensor<float>& via_teacher = e->var.value();
    for (std::int64_t i = 0; i < via_student.numel(); ++i) {
      require(via_student[i] == via_teacher[i], name + " values diverged");
    }
    ++shared;
  }
  detail << result.steps << " steps; " << shared
         << " decoder/head parameters identical via both paths";
}

// 6. Logged objective decomposition and exact alpha linearity.
void criterion_6(std::ostream& detail) {
  TinySetup s = tiny_setup("c6", 24, 2);
  s.cfg.priors = PriorFlags{true, true, true};
  s.cfg.distill = DistillMode::emb_attn;
  const fs::path cache =
      ensure_mock_cache("tiny_cache_c6", synth_category_names(3), 5, 3, 4, s.cfg.d_t, s.cfg.d_v);
  s.cfg.prior_cache_dir = cache.string();
  s.cfg.out_dir = (g_workdir / "runs" / "c6").string();
  fs::remove_all(s.cfg.out_dir);
  const TrainResult result = train(s.cfg);

  std::ifstream log(result.log_path);
  require(log.good(), "missing training log");
  std::string line;
  int steps = 0;
  double worst = 0;
  while (std::getline(log, line)) {
    if (line.empty()) continue;
    const auto j = nlohmann::json::parse(line);
    const double lv = j.at("l_v"), lk = j.at("l_k"), le = j.at("l_emb"),
                 la = j.at("l_attn"), ld = j.at("l_distill"), total = j.at("total");
    worst = std::max(worst, std::abs(total - (lv + lk + s.cfg.weights.alpha *
                                                            (le + s.cfg.weights.eta * la))));
    require(std::abs(total - (lv + lk + s.cfg.weights.alpha * ld)) <= 1e-9,
            "decomposition violated at step " + std::to_string(steps));
    require(std::abs(ld - (le + s.cfg.weights.eta * la)) <= 1e-9,
            "distill decomposition violated at step " + std::to_string(steps));
    // Replay the same components with alpha = 0: the total must change by
    // exactly -alpha * l_distill.
    LossWeights zero = s.cfg.weights;
    zero.alpha = 0.0;
    const LossReport replayed = total_objective(lv, lk, le, la, zero, s.cfg.distill);
    require(std::abs((total - replayed.total) - s.cfg.weights.alpha * ld) <= 1e-12,
            "alpha replay not exactly linear at step " + std::to_string(steps));
    ++steps;
  }
  require(steps > 0, "empty training log");
  detail << steps << " steps, worst decomposition residual " << worst;
}

// 7. Directional ablation reproduction on the synthetic benchmark.
void criterion_7(std::ostream& detail) {
  const fs::path dataset = ensure_dataset("benchmark_dataset", benchmark_dataset_config());
  const fs::path cache = ensure_mock_cache("benchmark_cache", synth_category_names(6), 17,
                                           10, 100, 510, 510);
  const std::vector<std::uint64_t> seeds{11, 22, 33};
  std::vector<double> base_aps, emb_aps, full_aps;
  double max_seconds = 0;
  for (std::uint64_t seed : seeds) {
    RunConfig full = benchmark_run_config(dataset, cache, seed);
    RunConfig emb = full;
    emb.distill = DistillMode::emb;
    RunConfig base = full;
    base.priors = PriorFlags{false, false, false};
    base.distill = DistillMode::off;
    base.prior_cache_dir.clear();
    double secs = 0;
    base_aps.push_back(run_benchmark("base_seed" + std::to_string(seed), base, &secs));
    max_seconds = std::max(max_seconds, secs);
    emb_aps.push_back(run_benchmark("emb_seed" + std::to_string(seed), emb, &secs));
    max_seconds = std::max(max_seconds, secs);
    full_aps.push_back(run_benchmark("full_seed" + std::to_string(seed), full, &secs));
    max_seconds = std::max(max_seconds, secs);
  }
  auto median = [](std::vector<double> v) {
    std::sort(v.begin(), v.end());
    return v[v.size() / 2];
  };
  const double base_med = median(base_aps), emb_med = median(emb_aps),
               full_med = median(full_aps);
  std::ostringstream summary;
  summary << "median AP baseline " << base_med << ", emb " << emb_med << ", emb+attn "
          << full_med;
  require(max_seconds <= 1800.0,
          "a run exceeded the 30-minute budget: " + std::to_string(max_seconds) + " s");
  require(base_med < full_med, "ordering violated (baseline >= full KAD): " + summary.str());
  require(emb_med <= full_med + 1e-12,
          "ordering violated (emb > emb+attn): " + summary.str());
  require(full_med - base_med >= 0.02,
          "full KAD must exceed baseline by >= 2 AP points: " + summary.str());
  detail << summary.str();
}

// 8. Trained teacher with spatial-prior oracle localizes nearly perfectly.
void criterion_8(std::ostream& detail) {
  const fs::path dataset = ensure_dataset("benchmark_dataset", benchmark_dataset_config());
  const fs::path cache = ensure_mock_cache("benchmark_cache", synth_category_names(6), 17,
                                           10, 100, 510, 510);
  RunConfig cfg = benchmark_run_config(dataset, cache, 11);
  run_benchmark("full_seed11", cfg, nullptr);  // ensure the checkpoint exists
  cfg.out_dir = (g_workdir / "runs" / "full_seed11").string();
  Engine engine(cfg);
  engine.load(fs::path(cfg.out_dir) / "checkpoint");
  const auto records = load_dataset(dataset / "val" / "annotations.json", dataset / "val");
  const EvalResult ev = engine.evaluate_teacher(records);
  require(ev.ap50 >= 0.9, "teacher AP50 " + std::to_string(ev.ap50) + " < 0.9");
  detail << "teacher AP50 " << ev.ap50 << " (AP " << ev.ap << ") on " << records.size()
         << " scenes";
}

// 9. Prior cache round trip is bitwise lossless; corruption always detected.
void criterion_9(std::ostream& detail) {
  const fs::path dir = g_workdir / "cache_c9";
  fs::remove_all(dir);
  std::vector<std::string> cats;
  for (int i = 0; i < 10; ++i) cats.push_back("category_" + std::to_string(i));
  const PriorCache cache = mock_priors(cats, 424242, 10, 20, 510, 510);
  write_prior_cache(cache, dir);
  const PriorCache loaded = read_prior_cache(dir);
  require(loaded.d_t == 510 && loaded.d_v == 510, "dims not preserved");
  require(loaded.categories.size() == 10, "category count not preserved");
  for (const auto& [name, entry] : cache.categories) {
    const auto& got = loaded.categories.at(name);
    for (std::int64_t i = 0; i < entry.text.numel(); ++i) {
      require(got.text[i] == entry.text[i], "text blob not bitwise identical");
    }
    for (std::int64_t i = 0; i < entry.image.numel(); ++i) {
      require(got.image[i] == entry.image[i], "image blob not bitwise identical");
    }
  }
  // Corruption injection: every flipped byte must be detected.
  Rng rng(7);
  int detected = 0;
  const int trials = 40;
  for (int t = 0; t < trials; ++t) {
    const std::string cat = cats[rng.below(cats.size())];
    const char* file = (t % 2 == 0) ? "text.f32" : "image.f32";
    const fs::path blob = dir / cat / file;
    const std::string original = read_file_bytes(blob);
    std::string corrupted = original;
    const std::size_t pos = static_cast<std::size_t>(rng.below(corrupted.size()));
    corrupted[pos] = static_cast<char>(corrupted[pos] ^ (1 + rng.below(255)));
    write_file_bytes(blob, corrupted);
    try {
      read_prior_cache(dir);
    } catch (const CacheCorruptionError&) {
      ++detected;
    } catch (const IncompleteCacheError&) {
      ++detected;  // header corruption can surface as a dim mismatch
    }
    write_file_bytes(blob, original);
  }
  require(detected == trials, "corruption detected in only " + std::to_string(detected) +
                                  "/" + std::to_string(trials) + " injections");
  detail << "10 categories x [10,510]/[20,510] bitwise; " << detected << "/" << trials
         << " corruptions detected";
}

// 10. AP metric against hand-computed values and the perfect-detector double.
void criterion_10(std::ostream& detail) {
  // Hand-evaluated micro-dataset (see tests/test_engine.cpp for the same
  // frozen derivation).
  const BoxN gt{0.5, 0.5, 0.4, 0.4};
  const BoxN iou062{0.5, 0.5, 0.4, 0.4 * 0.62};
  const BoxN iou082{0.5, 0.5, 0.4, 0.4 * 0.82};
  const BoxN disjoint{0.1, 0.1, 0.1, 0.1};
  std::vector<std::vector<ScoredBox>> preds(3);
  preds[0] = {{0.9, gt}, {0.3, disjoint}};
  preds[1] = {{0.8, iou062}, {0.7, gt}};
  preds[2] = {{0.6, disjoint}, {0.5, iou082}};
  const EvalResult r = evaluate_ap(preds, {gt, gt, gt});
  require(std::abs(r.ap50 - 87.4 / 101.0) <= 1e-12, "AP50 " + std::to_string(r.ap50));
  require(std::abs(r.ap75 - 76.4 / 101.0) <= 1e-12, "AP75 " + std::to_string(r.ap75));
  require(std::abs(r.ap - (3 * 87.4 + 4 * 76.4 + 3 * 56.0) / 101.0 / 10.0) <= 1e-12,
          "AP " + std::to_string(r.ap));

  // Perfect-detector double.
  Rng rng(9);
  std::vector<std::vector<ScoredBox>> perfect;
  std::vector<BoxN> gts;
  for (int i = 0; i < 12; ++i) {
    const BoxN g = make_box(rng.uniform(0.3, 0.7), rng.uniform(0.3, 0.7),
                            rng.uniform(0.1, 0.3), rng.uniform(0.1, 0.3));
    gts.push_back(g);
    perfect.push_back({{0.99, g}, {0.05, BoxN{0.05, 0.05, 0.05, 0.05}}});
  }
  const EvalResult p = evaluate_ap(perfect, gts);
  require(p.ap == 1.0 && p.ap50 == 1.0 && p.ap75 == 1.0, "perfect detector not 1.0");
  detail << "micro-dataset AP " << r.ap << " AP50 " << r.ap50 << " AP75 " << r.ap75
         << "; perfect detector 1.0/1.0/1.0";
}

// 11. Inference performs zero prior-cache reads and zero oracle builds.
void criterion_11(std::ostream& detail) {
  TinySetup s = tiny_setup("c11", 20, 1);
  s.cfg.out_dir = (g_workdir / "runs" / "c11").string();
  Engine engine(s.cfg);
  engine.train();
  const auto records = load_dataset(s.dataset / "val" / "annotations.json", s.dataset / "val");
  const auto cache_before = instrument::prior_cache_reads().load();
  const auto oracle_before = instrument::oracle_query_builds().load();
  int inferences = 0;
  for (const auto& rec : records) {
    const auto result = engine.infer_active(rec.load_image());
    require(result.score > 0.0 && result.score < 1.0, "score outside (0,1)");
    ++inferences;
  }
  const auto cache_delta = instrument::prior_cache_reads().load() - cache_before;
  const auto oracle_delta = instrument::oracle_query_builds().load() - oracle_before;
  require(cache_delta == 0, std::to_string(cache_delta) + " prior-cache reads during inference");
  require(oracle_delta == 0,
          std::to_string(oracle_delta) + " oracle-query constructions during inference");
  detail << inferences << " inferences, 0 cache reads, 0 oracle builds";
}

struct Criterion {
  int id;
  const char* name;
  void (*run)(std::ostream&);
};

const Criterion kCriteria[] = {
    {1, "matching oracle equivalence", criterion_1},
    {2, "gradient verification", criterion_2},
    {3, "distillation zero case", criterion_3},
    {4, "attention contract", criterion_4},
    {5, "parameter sharing", criterion_5},
    {6, "objective decomposition", criterion_6},
    {7, "directional ablation reproduction", criterion_7},
    {8, "teacher sanity", criterion_8},
    {9, "prior cache round trip", criterion_9},
    {10, "AP metric validation", criterion_10},
    {11, "inference isolation", criterion_11},
};

}  // namespace

int main(int argc, char** argv) {
  std::vector<int> selected;
  for (int i = 1; i < argc; ++i) {
    if (std::strcmp(argv[i], "--workdir") == 0 && i + 1 < argc) {
      g_workdir = argv[++i];
    } else {
      selected.push_back(std::atoi(argv[i]));
    }
  }
  std::filesystem::create_directories(g_workdir);

  int failures = 0;
  for (const Criterion& c : kCriteria) {
    if (!selected.empty() &&
        std::find(selected.begin(), selected.end(), c.id) == selected.end()) {
      continue;
    }
    std::ostringstream detail;
    bool ok = true;
    std::string error;
    const double t0 = now_seconds();
    try {
      c.run(detail);
    } catch (const std::exception& e) {
      ok = false;
      error = e.what();
    }
    const double elapsed = now_seconds() - t0;
    if (ok) {
      std::printf("[PASS] criterion %2d: %s — %s (%.1f s)\n", c.id, c.name,
                  detail.str().c_str(), elapsed);
    } else {
      std::printf("[FAIL] criterion %2d: %s — %s (%.1f s)\n", c.id, c.name, error.c_str(),
                  elapsed);
      ++failures;
    }
    std::fflush(stdout);
  }
  return failures == 0 ? 0 : 1;
}
