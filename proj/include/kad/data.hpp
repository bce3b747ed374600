#pragma once

// Dataset supply. The synthetic generator reproduces the hard cases the task
// is about at desk scale: every scene contains one "active" instance (marked
// by a small hand glyph and a subtle appearance shift) plus at least one
// same-category distractor. Annotations are COCO JSON with an extra
// per-annotation `active` flag; that file format is also the ingestion path
// for converted real datasets.

#include "kad/blob.hpp"
#include "kad/geometry.hpp"
#include "kad/image.hpp"
#include "kad/random.hpp"
#include "kad/tensor.hpp"

#include <json.hpp>

#include <array>
#include <atomic>
#include <cmath>
#include <cstdio>
#include <filesystem>
#include <map>
#include <optional>
#include <stdexcept>
#include <string>
#include <thread>
#include <vector>

namespace kad {

struct DataError : std::runtime_error {
  using std::runtime_error::runtime_error;
};

struct SynthConfig {
  int image_size = 96;
  int categories = 6;
  int min_instances = 4;
  int max_instances = 7;
  int same_category_distractors = 1;  // >= 1: the Figure-1 regime
  bool hand_marker = true;
  double perturbation = 0.18;  // active-appearance shift, the difficulty knob
  int train_scenes = 2000;
  int val_scenes = 400;
  std::uint64_t seed = 7;

  void check() const {
    if (image_size < 16) throw std::invalid_argument("synth: image_size too small");
    if (categories < 1) throw std::invalid_argument("synth: need >= 1 category");
    if (min_instances < 2 || max_instances < min_instances) {
      throw std::invalid_argument("synth: bad instance range");
    }
    if (same_category_distractors < 1) {
      throw std::invalid_argument("synth: need >= 1 same-category distractor");
    }
    if (train_scenes < 0 || val_scenes < 0) {
      throw std::invalid_argument("synth: negative split size");
    }
  }

  static SynthConfig from_json(const nlohmann::json& j) {
    SynthConfig c;
    c.image_size = j.value("image_size", c.image_size);
    c.categories = j.value("categories", c.categories);
    c.min_instances = j.value("min_instances", c.min_instances);
    c.max_instances = j.value("max_instances", c.max_instances);
    c.same_category_distractors =
        j.value("same_category_distractors", c.same_category_distractors);
    c.hand_marker = j.value("hand_marker", c.hand_marker);
    c.perturbation = j.value("perturbation", c.perturbation);
    c.train_scenes = j.value("train_scenes", c.train_scenes);
    c.val_scenes = j.value("val_scenes", c.val_scenes);
    c.seed = j.value("seed", c.seed);
    return c;
  }

  nlohmann::json to_json() const {
    return {{"image_size", image_size},
            {"categories", categories},
            {"min_instances", min_instances},
            {"max_instances", max_instances},
            {"same_category_distractors", same_category_distractors},
            {"hand_marker", hand_marker},
            {"perturbation", perturbation},
            {"train_scenes", train_scenes},
            {"val_scenes", val_scenes},
            {"seed", seed}};
  }
};

// One training/eval record: exactly one active object.
struct SceneRecord {
  std::filesystem::path image_path;
  int image_id = 0;
  int width = 0, height = 0;
  BoxN gt_box;
  std::string category;
  std::vector<BoxN> distractor_boxes;  // same-category non-active instances

  Tensor<float> load_image() const {
    if (!std::filesystem::exists(image_path)) {
      throw DataError("missing image file: " + image_path.string());
    }
    return read_ppm(image_path);
  }
};

// ---------------------------------------------------------------------------
// Category palette
// ---------------------------------------------------------------------------

namespace detail {

struct Palette {
  const char* color_name;
  std::array<float, 3> rgb;
};

inline const std::array<Palette, 8>& palette() {
  static const std::array<Palette, 8> p{{{"red", {0.85f, 0.22f, 0.20f}},
                                         {"green", {0.22f, 0.78f, 0.28f}},
                                         {"blue", {0.25f, 0.38f, 0.90f}},
                                         {"yellow", {0.85f, 0.80f, 0.22f}},
                                         {"magenta", {0.80f, 0.26f, 0.78f}},
                                         {"cyan", {0.22f, 0.78f, 0.80f}},
                                         {"orange", {0.90f, 0.55f, 0.16f}},
                                         {"white", {0.86f, 0.86f, 0.86f}}}};
  return p;
}

inline const std::array<const char*, 6>& shape_names() {
  static const std::array<const char*, 6> s{"square", "disc",  "triangle",
                                            "diamond", "ring", "cross"};
  return s;
}

inline bool inside_shape(int shape, double dx, double dy, double r) {
  switch (shape % 6) {
    case 0: return std::abs(dx) <= r && std::abs(dy) <= r;
    case 1: return dx * dx + dy * dy <= r * r;
    case 2: return dy >= -r && dy <= r && std::abs(dx) <= (dy + r) * 0.5;
    case 3: return std::abs(dx) + std::abs(dy) <= r;
    case 4: {
      const double d2 = dx * dx + dy * dy;
      return d2 <= r * r && d2 >= 0.25 * r * r;
    }
    default:
      return (std::abs(dx) <= r / 3.0 || std::abs(dy) <= r / 3.0) && std::abs(dx) <= r &&
             std::abs(dy) <= r;
  }
}

}  // namespace detail

// Deterministic category naming shared by the generator and the priors CLI.
inline std::vector<std::string> synth_category_names(int n) {
  std::vector<std::string> names;
  for (int i = 0; i < n; ++i) {
    const auto& pal = detail::palette()[i % detail::palette().size()];
    const char* shape = detail::shape_names()[i % detail::shape_names().size()];
    std::string name = std::string(pal.color_name) + "_" + shape;
    if (i >= 24) name += "_" + std::to_string(i);  // palette combinations exhausted
    names.push_back(std::move(name));
  }
  return names;
}

// ---------------------------------------------------------------------------
// Scene synthesis
// ---------------------------------------------------------------------------

namespace detail {

struct Instance {
  int category = 0;
  double cx = 0, cy = 0, r = 0;  // pixels
  float brightness = 1.0f;
  bool active = false;
};

struct Scene {
  std::vector<Instance> instances;
  int active_index = -1;
  int marker_corner = 0;
};

inline double instance_iou(const Instance& a, const Instance& b) {
  const BoxCorners ca{a.cx - a.r, a.cy - a.r, a.cx + a.r, a.cy + a.r};
  const BoxCorners cb{b.cx - b.r, b.cy - b.r, b.cx + b.r, b.cy + b.r};
  return iou(ca, cb);
}

inline std::optional<Scene> compose_scene(const SynthConfig& cfg, Rng& rng) {
  const int s = cfg.image_size;
  Scene scene;
  const int n_instances = rng.range(cfg.min_instances, cfg.max_instances);
  const int active_cat = rng.range(0, cfg.categories - 1);

  std::vector<int> cats;
  cats.push_back(active_cat);
  for (int i = 0; i < cfg.same_category_distractors; ++i) cats.push_back(active_cat);
  while (static_cast<int>(cats.size()) < n_instances) {
    cats.push_back(rng.range(0, cfg.categories - 1));
  }
  rng.shuffle(cats);

  for (int idx = 0; idx < static_cast<int>(cats.size()); ++idx) {
    bool placed = false;
    for (int attempt = 0; attempt < 200 && !placed; ++attempt) {
      Instance inst;
      inst.category = cats[idx];
      inst.r = rng.uniform(0.08, 0.15) * s;
      inst.cx = rng.uniform(inst.r + 2.0, s - inst.r - 2.0);
      inst.cy = rng.uniform(inst.r + 2.0, s - inst.r - 2.0);
      inst.brightness = static_cast<float>(rng.uniform(0.85, 1.15));
      bool clash = false;
      for (const auto& other : scene.instances) {
        if (instance_iou(inst, other) > 0.05) {
          clash = true;
          break;
        }
      }
      if (!clash) {
        scene.instances.push_back(inst);
        placed = true;
      }
    }
    if (!placed) return std::nullopt;
  }

  // The active instance is one of the active-category instances.
  std::vector<int> candidates;
  for (int i = 0; i < static_cast<int>(scene.instances.size()); ++i) {
    if (scene.instances[i].category == active_cat) candidates.push_back(i);
  }
  scene.active_index = candidates[rng.below(candidates.size())];
  scene.instances[scene.active_index].active = true;
  scene.marker_corner = rng.range(0, 3);
  return scene;
}

inline Tensor<float> render_scene(const SynthConfig& cfg, const Scene& scene, Rng& rng) {
  const int s = cfg.image_size;
  Tensor<float> img({3, s, s});
  for (int y = 0; y < s; ++y) {
    for (int x = 0; x < s; ++x) {
      const float noise = static_cast<float>(rng.uniform(-0.02, 0.02));
      for (int c = 0; c < 3; ++c) {
        img[(static_cast<std::int64_t>(c) * s + y) * s + x] = 0.18f + noise;
      }
    }
  }
  for (const auto& inst : scene.instances) {
    const auto& base = palette()[inst.category % palette().size()].rgb;
    const int shape = inst.category % static_cast<int>(shape_names().size());
    float gain = inst.brightness;
    if (inst.active) gain *= 1.0f + static_cast<float>(cfg.perturbation);
    const int x0 = std::max(0, static_cast<int>(inst.cx - inst.r));
    const int x1 = std::min(s - 1, static_cast<int>(inst.cx + inst.r));
    const int y0 = std::max(0, static_cast<int>(inst.cy - inst.r));
    const int y1 = std::min(s - 1, static_cast<int>(inst.cy + inst.r));
    for (int y = y0; y <= y1; ++y) {
      for (int x = x0; x <= x1; ++x) {
        if (!inside_shape(shape, x + 0.5 - inst.cx, y + 0.5 - inst.cy, inst.r)) continue;
        for (int c = 0; c < 3; ++c) {
          const float v = std::min(1.0f, base[c] * gain);
          img[(static_cast<std::int64_t>(c) * s + y) * s + x] = v;
        }
      }
    }
  }
  if (cfg.hand_marker && scene.active_index >= 0) {
    // A small skin-toned blob overlapping one corner of the active box.
    const Instance& a = scene.instances[scene.active_index];
    const double sx = (scene.marker_corner % 2 == 0) ? -1.0 : 1.0;
    const double sy = (scene.marker_corner / 2 == 0) ? -1.0 : 1.0;
    const double mx = a.cx + sx * a.r;
    const double my = a.cy + sy * a.r;
    const double mr = std::max(2.5, 0.035 * s);
    const std::array<float, 3> skin{0.93f, 0.78f, 0.58f};
    const int x0 = std::max(0, static_cast<int>(mx - mr));
    const int x1 = std::min(s - 1, static_cast<int>(mx + mr));
    const int y0 = std::max(0, static_cast<int>(my - mr));
    const int y1 = std::min(s - 1, static_cast<int>(my + mr));
    for (int y = y0; y <= y1; ++y) {
      for (int x = x0; x <= x1; ++x) {
        const double dx = x + 0.5 - mx, dy = y + 0.5 - my;
        if (dx * dx + dy * dy > mr * mr) continue;
        for (int c = 0; c < 3; ++c) {
          img[(static_cast<std::int64_t>(c) * s + y) * s + x] = skin[c];
        }
      }
    }
  }
  return img;
}

}  // namespace detail

struct SynthSummary {
  int written = 0;
  int skipped = 0;
};

// Renders one split into out_dir/images/*.ppm + out_dir/annotations.json.
// Fully deterministic per (config, split_tag); scenes render in parallel, the
// annotation file is written once at the end.
inline SynthSummary synth_generate_split(const SynthConfig& cfg, int scene_count,
                                         const std::string& split_tag,
                                         const std::filesystem::path& out_dir) {
  cfg.check();
  std::filesystem::create_directories(out_dir / "images");
  const std::uint64_t split_seed = mix_seed(cfg.seed, "synth:" + split_tag);

  struct Rendered {
    bool ok = false;
    detail::Scene scene;
  };
  std::vector<Rendered> scenes(scene_count);

  auto render_one = [&](int i) {
    Rng rng(mix_seed(split_seed, std::to_string(i)));
    for (int attempt = 0; attempt < 20; ++attempt) {
      auto composed = detail::compose_scene(cfg, rng);
      if (!composed) continue;
      Tensor<float> img = detail::render_scene(cfg, *composed, rng);
      char name[32];
      std::snprintf(name, sizeof(name), "scene_%05d.ppm", i);
      write_ppm(out_dir / "images" / name, img);
      scenes[i].ok = true;
      scenes[i].scene = std::move(*composed);
      return;
    }
  };

  const unsigned workers = std::min(2u, std::max(1u, std::thread::hardware_concurrency()));
  if (scene_count > 0) {
    std::vector<std::thread> pool;
    std::atomic<int> next{0};
    for (unsigned w = 0; w < workers; ++w) {
      pool.emplace_back([&] {
        for (;;) {
          const int i = next.fetch_add(1);
          if (i >= scene_count) return;
          render_one(i);
        }
      });
    }
    for (auto& t : pool) t.join();
  }

  const std::vector<std::string> names = synth_category_names(cfg.categories);
  nlohmann::json root;
  root["bbox_mode"] = "xywh";
  nlohmann::json cats = nlohmann::json::array();
  for (int i = 0; i < cfg.categories; ++i) {
    cats.push_back({{"id", i + 1}, {"name", names[i]}});
  }
  root["categories"] = cats;
  nlohmann::json images = nlohmann::json::array();
  nlohmann::json annotations = nlohmann::json::array();
  SynthSummary summary;
  int ann_id = 1;
  for (int i = 0; i < scene_count; ++i) {
    if (!scenes[i].ok) {
      ++summary.skipped;
      continue;
    }
    char name[32];
    std::snprintf(name, sizeof(name), "scene_%05d.ppm", i);
    images.push_back({{"id", i + 1},
                      {"file_name", std::string("images/") + name},
                      {"width", cfg.image_size},
                      {"height", cfg.image_size}});
    for (const auto& inst : scenes[i].scene.instances) {
      const double x = inst.cx - inst.r, y = inst.cy - inst.r, side = 2 * inst.r;
      annotations.push_back({{"id", ann_id++},
                             {"image_id", i + 1},
                             {"category_id", inst.category + 1},
                             {"bbox", {x, y, side, side}},
                             {"area", side * side},
                             {"active", inst.active ? 1 : 0}});
    }
    ++summary.written;
  }
  root["images"] = images;
  root["annotations"] = annotations;
  write_file_bytes(out_dir / "annotations.json", root.dump(2) + "\n");
  return summary;
}

// train/ and val/ splits under the dataset root.
inline SynthSummary synth_generate(const SynthConfig& cfg, const std::filesystem::path& out) {
  cfg.check();
  SynthSummary total;
  const SynthSummary train = synth_generate_split(cfg, cfg.train_scenes, "train", out / "train");
  const SynthSummary val = synth_generate_split(cfg, cfg.val_scenes, "val", out / "val");
  total.written = train.written + val.written;
  total.skipped = train.skipped + val.skipped;
  write_file_bytes(out / "synth_config.json", cfg.to_json().dump(2) + "\n");
  return total;
}

// ---------------------------------------------------------------------------
// COCO-format ingestion
// ---------------------------------------------------------------------------

// Pixel corners -> normalized center form.
inline BoxN box_from_pixel_corners(double x1, double y1, double x2, double y2, int img_w,
                                   int img_h) {
  if (img_w <= 0 || img_h <= 0) throw DataError("box conversion: bad image size");
  const BoxCorners c{std::clamp(x1 / img_w, 0.0, 1.0), std::clamp(y1 / img_h, 0.0, 1.0),
                     std::clamp(x2 / img_w, 0.0, 1.0), std::clamp(y2 / img_h, 0.0, 1.0)};
  return box_convert(c);
}

inline BoxN box_from_coco_xywh(double x, double y, double w, double h, int img_w, int img_h) {
  return box_from_pixel_corners(x, y, x + w, y + h, img_w, img_h);
}

// Loads COCO-format annotations (+ per-annotation `active` flag) into scene
// records, one per active object; images with several active annotations
// split into several records.
inline std::vector<SceneRecord> load_dataset(const std::filesystem::path& annotation_path,
                                             const std::filesystem::path& images_root) {
  if (!std::filesystem::exists(annotation_path)) {
    throw DataError("missing annotation file: " + annotation_path.string());
  }
  nlohmann::json root;
  try {
    root = nlohmann::json::parse(read_file_bytes(annotation_path));
  } catch (const nlohmann::json::exception& e) {
    throw DataError("unparseable annotation file " + annotation_path.string() + ": " +
                    e.what());
  }
  const std::string bbox_mode = root.value("bbox_mode", std::string("xywh"));
  if (bbox_mode != "xywh" && bbox_mode != "xyxy") {
    throw DataError("unsupported bbox_mode: " + bbox_mode);
  }

  std::map<int, std::string> category_names;
  for (const auto& c : root.value("categories", nlohmann::json::array())) {
    category_names[c.at("id").get<int>()] = c.at("name").get<std::string>();
  }

  struct ImageInfo {
    std::filesystem::path path;
    int width = 0, height = 0;
  };
  std::map<int, ImageInfo> images;
  for (const auto& im : root.at("images")) {
    ImageInfo info;
    info.path = images_root / im.at("file_name").get<std::string>();
    info.width = im.at("width").get<int>();
    info.height = im.at("height").get<int>();
    images[im.at("id").get<int>()] = info;
  }

  struct Ann {
    int category = 0;
    BoxN box;
    int active = -1;  // -1: flag absent
  };
  std::map<int, std::vector<Ann>> by_image;
  for (const auto& a : root.at("annotations")) {
    const int image_id = a.at("image_id").get<int>();
    const auto img_it = images.find(image_id);
    if (img_it == images.end()) {
      throw DataError("annotation references unknown image id " + std::to_string(image_id));
    }
    const auto& bbox = a.at("bbox");
    Ann ann;
    ann.category = a.at("category_id").get<int>();
    if (bbox_mode == "xywh") {
      ann.box = box_from_coco_xywh(bbox.at(0).get<double>(), bbox.at(1).get<double>(),
                                   bbox.at(2).get<double>(), bbox.at(3).get<double>(),
                                   img_it->second.width, img_it->second.height);
    } else {
      ann.box = box_from_pixel_corners(bbox.at(0).get<double>(), bbox.at(1).get<double>(),
                                       bbox.at(2).get<double>(), bbox.at(3).get<double>(),
                                       img_it->second.width, img_it->second.height);
    }
    if (a.contains("active")) ann.active = a.at("active").get<int>();
    by_image[image_id].push_back(ann);
  }

  std::vector<SceneRecord> records;
  for (const auto& [image_id, anns] : by_image) {
    const ImageInfo& info = images.at(image_id);
    if (!std::filesystem::exists(info.path)) {
      throw DataError("missing image file: " + info.path.string());
    }
    std::vector<int> active_indices;
    for (int i = 0; i < static_cast<int>(anns.size()); ++i) {
      if (anns[i].active == 1) active_indices.push_back(i);
    }
    if (active_indices.empty()) {
      if (anns.size() == 1) {
        active_indices.push_back(0);  // unambiguous
      } else {
        throw DataError("image id " + std::to_string(image_id) +
                        " has multiple annotations and no active flag");
      }
    }
    for (int ai : active_indices) {
      SceneRecord rec;
      rec.image_path = info.path;
      rec.image_id = image_id;
      rec.width = info.width;
      rec.height = info.height;
      rec.gt_box = anns[ai].box;
      auto it = category_names.find(anns[ai].category);
      rec.category = it != category_names.end() ? it->second
                                                : "category_" + std::to_string(anns[ai].category);
      for (int i = 0; i < static_cast<int>(anns.size()); ++i) {
        if (i != ai && anns[i].category == anns[ai].category) {
          rec.distractor_boxes.push_back(anns[i].box);
        }
      }
      records.push_back(std::move(rec));
    }
  }
  return records;
}

}  // namespace kad
