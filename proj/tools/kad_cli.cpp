// kad: command-line front end for the active-object detection framework.
//
//   kad data synth   --config FILE --out DIR
//   kad priors mock  --categories FILE --out DIR --seed N --dims 510,510 [--p N] [--q N]
//   kad priors generate --categories FILE --out DIR --p 10 --images-per-desc 10
//                       (--providers FILE | --mock-providers) [--seed N]
//   kad priors verify DIR
//   kad train  --config FILE
//   kad eval   --checkpoint DIR --data DIR
//   kad infer  --checkpoint DIR --image FILE [--attn-dump DIR]

#include "kad/data.hpp"
#include "kad/engine.hpp"
#include "kad/priors.hpp"
#include "kad/providers_http.hpp"

#include <CLI11.hpp>
#include <json.hpp>

#include <cstdio>
#include <filesystem>
#include <fstream>
#include <iostream>
#include <string>
#include <vector>

namespace {

using kad::json;

std::vector<std::string> read_category_file(const std::string& path) {
  std::ifstream in(path);
  if (!in) throw std::runtime_error("cannot open category file: " + path);
  std::vector<std::string> cats;
  std::string line;
  while (std::getline(in, line)) {
    while (!line.empty() && (line.back() == '\r' || line.back() == ' ')) line.pop_back();
    if (!line.empty() && line[0] != '#') cats.push_back(line);
  }
  if (cats.empty()) throw std::runtime_error("category file is empty: " + path);
  return cats;
}

json read_json_file(const std::string& path) {
  std::ifstream in(path);
  if (!in) throw std::runtime_error("cannot open file: " + path);
  return json::parse(in);
}

std::pair<int, int> parse_dims(const std::string& dims) {
  const auto comma = dims.find(',');
  if (comma == std::string::npos) {
    throw std::runtime_error("--dims expects 'd_t,d_v', got '" + dims + "'");
  }
  return {std::stoi(dims.substr(0, comma)), std::stoi(dims.substr(comma + 1))};
}

kad::ProviderRole role_from_json(const json& j) {
  kad::ProviderRole r;
  r.endpoint = j.value("endpoint", r.endpoint);
  r.credential_env = j.value("credential_env", r.credential_env);
  r.model_id = j.value("model_id", r.model_id);
  r.timeout_s = j.value("timeout_s", r.timeout_s);
  r.retries = j.value("retries", r.retries);
  return r;
}

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"KAD active-object detection: synthetic data, priors, training, inference"};
  app.require_subcommand(1);

  // ---- data synth ----
  auto* data_cmd = app.add_subcommand("data", "dataset tooling");
  data_cmd->require_subcommand(1);
  auto* synth_cmd = data_cmd->add_subcommand("synth", "generate a synthetic dataset");
  std::string synth_config_path, synth_out;
  synth_cmd->add_option("--config", synth_config_path, "SynthConfig JSON file");
  synth_cmd->add_option("--out", synth_out, "output dataset directory")->required();

  // ---- priors ----
  auto* priors_cmd = app.add_subcommand("priors", "prior-knowledge cache tooling");
  priors_cmd->require_subcommand(1);

  auto* mock_cmd = priors_cmd->add_subcommand("mock", "build a deterministic mock cache");
  std::string mock_categories, mock_out, mock_dims = "510,510";
  std::uint64_t mock_seed = 0;
  int mock_p = 10, mock_q = 100;
  mock_cmd->add_option("--categories", mock_categories, "file with one category per line")
      ->required();
  mock_cmd->add_option("--out", mock_out, "cache directory")->required();
  mock_cmd->add_option("--seed", mock_seed, "generator seed");
  mock_cmd->add_option("--dims", mock_dims, "d_t,d_v (default 510,510)");
  mock_cmd->add_option("--p", mock_p, "text embeddings per category (default 10)");
  mock_cmd->add_option("--q", mock_q, "image embeddings per category (default 100)");

  auto* gen_cmd = priors_cmd->add_subcommand("generate", "collect priors via providers");
  std::string gen_categories, gen_out, gen_providers;
  int gen_p = 10, gen_images_per_desc = 10;
  bool gen_mock_providers = false;
  std::uint64_t gen_seed = 0;
  gen_cmd->add_option("--categories", gen_categories, "file with one category per line")
      ->required();
  gen_cmd->add_option("--out", gen_out, "cache directory")->required();
  gen_cmd->add_option("--p", gen_p, "descriptions per category (default 10)");
  gen_cmd->add_option("--images-per-desc", gen_images_per_desc,
                      "generated images per description (default 10)");
  gen_cmd->add_option("--providers", gen_providers,
                      "provider config JSON: {text:{endpoint,...},image:{...},embedding:{...}}");
  gen_cmd->add_flag("--mock-providers", gen_mock_providers,
                    "use deterministic in-process providers");
  gen_cmd->add_option("--seed", gen_seed, "seed for mock providers");

  auto* verify_cmd = priors_cmd->add_subcommand("verify", "verify cache integrity");
  std::string verify_dir;
  verify_cmd->add_option("dir", verify_dir, "cache directory")->required();

  // ---- train / eval / infer ----
  auto* train_cmd = app.add_subcommand("train", "train a detector");
  std::string train_config_path;
  train_cmd->add_option("--config", train_config_path, "RunConfig JSON file")->required();

  auto* eval_cmd = app.add_subcommand("eval", "evaluate a checkpoint");
  std::string eval_checkpoint, eval_data;
  eval_cmd->add_option("--checkpoint", eval_checkpoint, "checkpoint directory")->required();
  eval_cmd->add_option("--data", eval_data, "split dir or dataset root with val/")->required();

  auto* infer_cmd = app.add_subcommand("infer", "detect the active object in one image");
  std::string infer_checkpoint, infer_image, infer_dump;
  infer_cmd->add_option("--checkpoint", infer_checkpoint, "checkpoint directory")->required();
  infer_cmd->add_option("--image", infer_image, "input PPM image")->required();
  infer_cmd->add_option("--attn-dump", infer_dump, "directory for attention heatmaps");

  CLI11_PARSE(app, argc, argv);

  try {
    if (synth_cmd->parsed()) {
      kad::SynthConfig cfg;
      if (!synth_config_path.empty()) {
        cfg = kad::SynthConfig::from_json(read_json_file(synth_config_path));
      }
      const auto summary = kad::synth_generate(cfg, synth_out);
      std::printf("wrote %d scenes (%d skipped) under %s\n", summary.written,
                  summary.skipped, synth_out.c_str());
      std::printf("categories:");
      for (const auto& name : kad::synth_category_names(cfg.categories)) {
        std::printf(" %s", name.c_str());
      }
      std::printf("\n");
      return 0;
    }

    if (mock_cmd->parsed()) {
      const auto [d_t, d_v] = parse_dims(mock_dims);
      const auto cache = kad::mock_priors(read_category_file(mock_categories), mock_seed,
                                          mock_p, mock_q, d_t, d_v);
      const auto manifest = kad::write_prior_cache(cache, mock_out);
      std::printf("mock cache: %zu categories, dims [%d,%d], manifest %s\n",
                  cache.categories.size(), d_t, d_v, manifest.c_str());
      return 0;
    }

    if (gen_cmd->parsed()) {
      const auto categories = read_category_file(gen_categories);
      kad::ProviderConfig pcfg;
      std::unique_ptr<kad::TextProvider> text;
      std::unique_ptr<kad::ImageProvider> image;
      std::unique_ptr<kad::EmbeddingProvider> embedding;
      if (gen_mock_providers) {
        text = std::make_unique<kad::MockTextProvider>();
        image = std::make_unique<kad::MockImageProvider>();
        embedding = std::make_unique<kad::MockEmbeddingProvider>(gen_seed, 510, 510);
      } else {
        if (gen_providers.empty()) {
          throw std::runtime_error("either --providers FILE or --mock-providers is required");
        }
        const json p = read_json_file(gen_providers);
        pcfg.text = role_from_json(p.at("text"));
        pcfg.image = role_from_json(p.at("image"));
        pcfg.embedding = role_from_json(p.at("embedding"));
        pcfg.parallelism = p.value("parallelism", pcfg.parallelism);
        pcfg.temperature = p.value("temperature", pcfg.temperature);
        text = std::make_unique<kad::HttpTextProvider>(pcfg.text, pcfg.temperature);
        image = std::make_unique<kad::HttpImageProvider>(pcfg.image);
        embedding = std::make_unique<kad::HttpEmbeddingProvider>(pcfg.embedding);
      }
      const auto cache = kad::generate_priors(categories, pcfg, gen_p, gen_images_per_desc,
                                              *text, *image, *embedding);
      const auto manifest = kad::write_prior_cache(cache, gen_out);
      std::printf("cache: %zu/%zu categories ok, manifest %s\n", cache.categories.size(),
                  categories.size(), manifest.c_str());
      if (!cache.provenance.at("errors").empty()) {
        for (const auto& [cat, err] : cache.provenance.at("errors").items()) {
          std::fprintf(stderr, "  failed %s: %s\n", cat.c_str(),
                       err.get<std::string>().c_str());
        }
        return 1;
      }
      return 0;
    }

    if (verify_cmd->parsed()) {
      const auto issues = kad::verify_prior_cache(verify_dir);
      if (issues.empty()) {
        std::printf("cache ok: %s\n", verify_dir.c_str());
        return 0;
      }
      for (const auto& issue : issues) std::fprintf(stderr, "issue: %s\n", issue.c_str());
      return 1;
    }

    if (train_cmd->parsed()) {
      const auto cfg = kad::RunConfig::from_json(read_json_file(train_config_path));
      const auto result = kad::train(cfg);
      std::printf("trained %lld steps; checkpoint %s\n",
                  static_cast<long long>(result.steps), result.checkpoint_dir.c_str());
      if (!result.metric_history.empty()) {
        const auto& last = result.metric_history.back();
        if (last.contains("ap")) {
          std::printf("final val AP %.4f AP50 %.4f AP75 %.4f\n", last["ap"].get<double>(),
                      last["ap50"].get<double>(), last["ap75"].get<double>());
        }
      }
      return 0;
    }

    if (eval_cmd->parsed()) {
      const auto result = kad::evaluate_ap(std::filesystem::path(eval_checkpoint),
                                           std::filesystem::path(eval_data));
      std::printf("AP %.4f  AP50 %.4f  AP75 %.4f\n", result.ap, result.ap50, result.ap75);
      return 0;
    }

    if (infer_cmd->parsed()) {
      const auto meta = json::parse(
          kad::read_file_bytes(std::filesystem::path(infer_checkpoint) / "checkpoint.json"));
      kad::Engine engine(kad::RunConfig::from_json(meta.at("config")));
      engine.load(infer_checkpoint);
      const kad::Tensor<float> image = kad::read_ppm(infer_image);
      std::optional<std::filesystem::path> dump;
      if (!infer_dump.empty()) dump = infer_dump;
      const auto result = engine.infer_active(image, dump);
      std::printf("active object: score %.4f box cx=%.4f cy=%.4f w=%.4f h=%.4f (query %d)\n",
                  result.score, result.box.cx, result.box.cy, result.box.w, result.box.h,
                  result.query_index);
      for (const auto& f : result.heatmap_files) {
        std::printf("  wrote %s\n", f.c_str());
      }
      return 0;
    }
  } catch (const std::exception& e) {
    std::fprintf(stderr, "error: %s\n", e.what());
    return 1;
  }
  return 2;
}
