#include "kad/data.hpp"

#include <gtest/gtest.h>

#include <fstream>
#include <set>

#include "support/tempdir.hpp"

using namespace kad;
using kad::test::TempDir;

namespace {

SynthConfig tiny_config() {
  SynthConfig cfg;
  cfg.image_size = 64;
  cfg.categories = 4;
  cfg.train_scenes = 12;
  cfg.val_scenes = 4;
  cfg.seed = 31;
  return cfg;
}

}  // namespace

TEST(SynthGenerate, DeterministicByteForByte) {
  TempDir a("synth_a"), b("synth_b");
  const SynthConfig cfg = tiny_config();
  const auto sa = synth_generate(cfg, a.path());
  const auto sb = synth_generate(cfg, b.path());
  EXPECT_EQ(sa.written, sb.written);
  for (const char* split : {"train", "val"}) {
    const std::string ann_a = read_file_bytes(a.path() / split / "annotations.json");
    const std::string ann_b = read_file_bytes(b.path() / split / "annotations.json");
    EXPECT_EQ(ann_a, ann_b) << split;
    // Spot-check an image byte-for-byte as well.
    const std::string img_a = read_file_bytes(a.path() / split / "images" / "scene_00000.ppm");
    const std::string img_b = read_file_bytes(b.path() / split / "images" / "scene_00000.ppm");
    EXPECT_EQ(img_a, img_b) << split;
  }
}

TEST(SynthGenerate, EverySceneHasSameCategoryDistractor) {
  TempDir dir("synth_distractor");
  SynthConfig cfg = tiny_config();
  cfg.train_scenes = 30;
  cfg.val_scenes = 0;
  synth_generate(cfg, dir.path());
  const auto records =
      load_dataset(dir.path() / "train" / "annotations.json", dir.path() / "train");
  ASSERT_EQ(static_cast<int>(records.size()), 30);
  for (const auto& rec : records) {
    EXPECT_GE(rec.distractor_boxes.size(), 1u)
        << "active instance must never be the only one of its category";
    EXPECT_NO_THROW(validate(rec.gt_box));
  }
}

TEST(SynthGenerate, RoundTripsThroughLoader) {
  TempDir dir("synth_roundtrip");
  const SynthConfig cfg = tiny_config();
  synth_generate(cfg, dir.path());
  const auto records =
      load_dataset(dir.path() / "train" / "annotations.json", dir.path() / "train");
  ASSERT_EQ(static_cast<int>(records.size()), cfg.train_scenes);
  const auto name_list = synth_category_names(cfg.categories);
  const std::set<std::string> names(name_list.begin(), name_list.end());
  for (const auto& rec : records) {
    EXPECT_TRUE(names.count(rec.category)) << rec.category;
    EXPECT_EQ(rec.width, cfg.image_size);
    const Tensor<float> img = rec.load_image();
    EXPECT_EQ(img.shape(), (std::vector<int>{3, cfg.image_size, cfg.image_size}));
    EXPECT_TRUE(img.all_finite());
  }
}

TEST(SynthGenerate, MarkerTogglesChangePixelsOnly) {
  TempDir with("synth_marker"), without("synth_nomarker");
  SynthConfig cfg = tiny_config();
  cfg.train_scenes = 3;
  cfg.val_scenes = 0;
  synth_generate(cfg, with.path());
  cfg.hand_marker = false;
  synth_generate(cfg, without.path());
  // Same layout and annotations; images differ by the marker pixels.
  EXPECT_EQ(read_file_bytes(with.path() / "train" / "annotations.json"),
            read_file_bytes(without.path() / "train" / "annotations.json"));
  EXPECT_NE(read_file_bytes(with.path() / "train" / "images" / "scene_00000.ppm"),
            read_file_bytes(without.path() / "train" / "images" / "scene_00000.ppm"));
}

TEST(BoxConversion, PixelCornersToNormalizedCenter) {
  const BoxN b = box_from_pixel_corners(32, 32, 64, 64, 128, 128);
  EXPECT_DOUBLE_EQ(b.cx, 0.375);
  EXPECT_DOUBLE_EQ(b.cy, 0.375);
  EXPECT_DOUBLE_EQ(b.w, 0.25);
  EXPECT_DOUBLE_EQ(b.h, 0.25);
}

TEST(BoxConversion, CocoXywhToNormalizedCenter) {
  const BoxN b = box_from_coco_xywh(32, 32, 64, 64, 128, 128);
  EXPECT_DOUBLE_EQ(b.cx, 0.5);
  EXPECT_DOUBLE_EQ(b.w, 0.5);
}

TEST(LoadDataset, XyxyModeUsesCornerConversion) {
  TempDir dir("load_xyxy");
  std::filesystem::create_directories(dir.path() / "images");
  write_ppm(dir.path() / "images" / "img.ppm", Tensor<float>({3, 128, 128}));
  nlohmann::json root{
      {"bbox_mode", "xyxy"},
      {"categories", {{{"id", 1}, {"name", "carrot"}}}},
      {"images", {{{"id", 1}, {"file_name", "images/img.ppm"}, {"width", 128}, {"height", 128}}}},
      {"annotations",
       {{{"id", 1}, {"image_id", 1}, {"category_id", 1}, {"bbox", {32, 32, 64, 64}}, {"active", 1}}}}};
  write_file_bytes(dir.path() / "annotations.json", root.dump());
  const auto records = load_dataset(dir.path() / "annotations.json", dir.path());
  ASSERT_EQ(records.size(), 1u);
  EXPECT_DOUBLE_EQ(records[0].gt_box.cx, 0.375);
  EXPECT_DOUBLE_EQ(records[0].gt_box.w, 0.25);
  EXPECT_EQ(records[0].category, "carrot");
}

TEST(LoadDataset, SingleUnflaggedAnnotationIsActive) {
  TempDir dir("load_single");
  std::filesystem::create_directories(dir.path() / "images");
  write_ppm(dir.path() / "images" / "img.ppm", Tensor<float>({3, 64, 64}));
  nlohmann::json root{
      {"categories", {{{"id", 1}, {"name", "cup"}}}},
      {"images", {{{"id", 1}, {"file_name", "images/img.ppm"}, {"width", 64}, {"height", 64}}}},
      {"annotations",
       {{{"id", 1}, {"image_id", 1}, {"category_id", 1}, {"bbox", {8, 8, 16, 16}}}}}};
  write_file_bytes(dir.path() / "annotations.json", root.dump());
  const auto records = load_dataset(dir.path() / "annotations.json", dir.path());
  ASSERT_EQ(records.size(), 1u);
  EXPECT_EQ(records[0].category, "cup");
}

TEST(LoadDataset, MultipleUnflaggedAnnotationsAreAmbiguous) {
  TempDir dir("load_ambiguous");
  std::filesystem::create_directories(dir.path() / "images");
  write_ppm(dir.path() / "images" / "img.ppm", Tensor<float>({3, 64, 64}));
  nlohmann::json root{
      {"categories", {{{"id", 1}, {"name", "cup"}}}},
      {"images", {{{"id", 1}, {"file_name", "images/img.ppm"}, {"width", 64}, {"height", 64}}}},
      {"annotations",
       {{{"id", 1}, {"image_id", 1}, {"category_id", 1}, {"bbox", {8, 8, 16, 16}}},
        {{"id", 2}, {"image_id", 1}, {"category_id", 1}, {"bbox", {32, 32, 16, 16}}}}}};
  write_file_bytes(dir.path() / "annotations.json", root.dump());
  EXPECT_THROW(load_dataset(dir.path() / "annotations.json", dir.path()), DataError);
}

TEST(LoadDataset, MultiActiveImageSplitsIntoRecords) {
  TempDir dir("load_multi");
  std::filesystem::create_directories(dir.path() / "images");
  write_ppm(dir.path() / "images" / "img.ppm", Tensor<float>({3, 64, 64}));
  nlohmann::json root{
      {"categories", {{{"id", 1}, {"name", "cup"}}}},
      {"images", {{{"id", 1}, {"file_name", "images/img.ppm"}, {"width", 64}, {"height", 64}}}},
      {"annotations",
       {{{"id", 1}, {"image_id", 1}, {"category_id", 1}, {"bbox", {8, 8, 16, 16}}, {"active", 1}},
        {{"id", 2}, {"image_id", 1}, {"category_id", 1}, {"bbox", {32, 32, 16, 16}}, {"active", 1}},
        {{"id", 3}, {"image_id", 1}, {"category_id", 1}, {"bbox", {8, 40, 12, 12}}, {"active", 0}}}}};
  write_file_bytes(dir.path() / "annotations.json", root.dump());
  const auto records = load_dataset(dir.path() / "annotations.json", dir.path());
  ASSERT_EQ(records.size(), 2u);
  // Each record sees the other active + the inactive one as distractors.
  EXPECT_EQ(records[0].distractor_boxes.size(), 2u);
}

TEST(LoadDataset, MissingImageFileNamesTheFile) {
  TempDir dir("load_missing");
  nlohmann::json root{
      {"categories", {{{"id", 1}, {"name", "cup"}}}},
      {"images",
       {{{"id", 1}, {"file_name", "images/nope.ppm"}, {"width", 64}, {"height", 64}}}},
      {"annotations",
       {{{"id", 1}, {"image_id", 1}, {"category_id", 1}, {"bbox", {8, 8, 16, 16}}, {"active", 1}}}}};
  write_file_bytes(dir.path() / "annotations.json", root.dump());
  try {
    load_dataset(dir.path() / "annotations.json", dir.path());
    FAIL() << "expected DataError";
  } catch (const DataError& e) {
    EXPECT_NE(std::string(e.what()).find("nope.ppm"), std::string::npos) << e.what();
  }
}

TEST(PpmIo, RoundTripsQuantizedPixels) {
  TempDir dir("ppm");
  Rng rng(3);
  Tensor<float> img({3, 9, 7});
  for (std::int64_t i = 0; i < img.numel(); ++i) {
    img[i] = static_cast<float>(rng.below(256)) / 255.0f;  // representable exactly
  }
  write_ppm(dir.path() / "x.ppm", img);
  const Tensor<float> back = read_ppm(dir.path() / "x.ppm");
  ASSERT_EQ(back.shape(), img.shape());
  for (std::int64_t i = 0; i < img.numel(); ++i) ASSERT_FLOAT_EQ(back[i], img[i]);
}

TEST(SynthGenerate, GenerationIsFastEnough) {
  // 2000/400 at (desk) scale must stay under 2 minutes; a 200-scene slice at
  // the same image size finishing well under a proportional budget checks the
  // generator is nowhere near that limit.
  TempDir dir("synth_speed");
  SynthConfig cfg;
  cfg.image_size = 96;
  cfg.train_scenes = 200;
  cfg.val_scenes = 0;
  cfg.seed = 5;
  const auto t0 = std::chrono::steady_clock::now();
  const auto summary = synth_generate(cfg, dir.path());
  const double sec = std::chrono::duration<double>(std::chrono::steady_clock::now() - t0).count();
  EXPECT_EQ(summary.written, 200);
  EXPECT_LT(sec, 12.0);  // 1/10th of the dataset in 1/10th of the budget
}
