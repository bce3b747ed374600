#pragma once

// The knowledge-collection pipeline: description generation, image
// generation and embedding extraction through pluggable providers, a
// deterministic mock provider for desk-scale runs, and a bit-exact on-disk
// cache (per-category `text.f32`/`image.f32` blobs plus a manifest with
// dimensions, counts, provider identity and SHA-256 checksums).

#include "kad/aggregator.hpp"
#include "kad/blob.hpp"
#include "kad/instrument.hpp"
#include "kad/random.hpp"
#include "kad/sha256.hpp"
#include "kad/tensor.hpp"

#include <json.hpp>

#include <atomic>
#include <filesystem>
#include <fstream>
#include <map>
#include <memory>
#include <mutex>
#include <stdexcept>
#include <string>
#include <thread>
#include <vector>

namespace kad {

using json = nlohmann::json;

struct ProviderError : std::runtime_error {
  using std::runtime_error::runtime_error;
};
struct CacheCorruptionError : std::runtime_error {
  using std::runtime_error::runtime_error;
};
struct IncompleteCacheError : std::runtime_error {
  using std::runtime_error::runtime_error;
};

// ---------------------------------------------------------------------------
// Provider interfaces
// ---------------------------------------------------------------------------

struct ProviderRole {
  std::string endpoint;        // e.g. http://127.0.0.1:8080
  std::string credential_env;  // env var holding the bearer token, may be empty
  std::string model_id;
  double timeout_s = 30.0;
  int retries = 2;

  void check() const {
    if (timeout_s <= 0) throw std::invalid_argument("provider: timeout must be > 0");
    if (retries < 0) throw std::invalid_argument("provider: retries must be >= 0");
  }
};

struct ProviderConfig {
  ProviderRole text;
  ProviderRole image;
  ProviderRole embedding;
  int parallelism = 4;
  double temperature = 0.7;

  void check() const {
    text.check();
    image.check();
    embedding.check();
    if (parallelism < 1) throw std::invalid_argument("provider: parallelism must be >= 1");
  }
};

// The paper's prompt template; p substitutes the description count.
inline std::string interaction_prompt(const std::string& category, int p) {
  return "describe " + std::to_string(p) + " interaction descriptions of " + category +
         " undergoing state change (including tools)";
}

class TextProvider {
public:
  virtual ~TextProvider() = default;
  virtual std::vector<std::string> describe(const std::string& category, int p) = 0;
  virtual std::string identity() const = 0;
};

class ImageProvider {
public:
  virtual ~ImageProvider() = default;
  // Returns opaque image payloads (whatever the backend emits, e.g. base64)
  // destined for the embedding provider.
  virtual std::vector<std::string> generate(const std::string& prompt, int n,
                                            std::uint64_t seed) = 0;
  virtual std::string identity() const = 0;
};

class EmbeddingProvider {
public:
  virtual ~EmbeddingProvider() = default;
  virtual Tensor<float> embed_texts(const std::vector<std::string>& texts) = 0;
  virtual Tensor<float> embed_images(const std::vector<std::string>& payloads) = 0;
  virtual std::string identity() const = 0;
};

// ---------------------------------------------------------------------------
// Cache
// ---------------------------------------------------------------------------

struct PriorCacheEntry {
  Tensor<float> text;   // [p, d_t]
  Tensor<float> image;  // [q, d_v], q may be 0
};

struct PriorCache {
  int d_t = 0, d_v = 0;
  std::map<std::string, PriorCacheEntry> categories;  // ordered, deterministic manifest
  json provenance = json::object();

  bool has(const std::string& category) const { return categories.count(category) > 0; }
};

// Bundle for one training record: the category's cached embeddings plus the
// record's ground-truth box (spatial prior).
template <typename T>
PriorBundle<T> bundle_for(const PriorCache& cache, const std::string& category,
                          const BoxN& gt_box) {
  auto it = cache.categories.find(category);
  if (it == cache.categories.end()) {
    throw std::invalid_argument("prior cache has no entry for category '" + category + "'");
  }
  PriorBundle<T> b;
  b.category = category;
  b.gt_box = gt_box;
  b.text_embeddings = Tensor<T>({it->second.text.rows(), it->second.text.cols()});
  for (std::int64_t i = 0; i < b.text_embeddings.numel(); ++i) {
    b.text_embeddings[i] = static_cast<T>(it->second.text[i]);
  }
  b.image_embeddings = Tensor<T>({it->second.image.rows(), it->second.image.cols()});
  for (std::int64_t i = 0; i < b.image_embeddings.numel(); ++i) {
    b.image_embeddings[i] = static_cast<T>(it->second.image[i]);
  }
  return b;
}

namespace detail {
inline std::string sanitize_dir_name(const std::string& name) {
  std::string out;
  for (char c : name) {
    out.push_back(std::isalnum(static_cast<unsigned char>(c)) || c == '-' || c == '_'
                      ? c
                      : '_');
  }
  return out.empty() ? std::string("_") : out;
}
}  // namespace detail

// Writes blobs atomically, manifest last. Returns the manifest path.
inline std::filesystem::path write_prior_cache(const PriorCache& cache,
                                               const std::filesystem::path& root) {
  std::filesystem::create_directories(root);
  json manifest;
  manifest["format_version"] = 1;
  manifest["d_t"] = cache.d_t;
  manifest["d_v"] = cache.d_v;
  manifest["provenance"] = cache.provenance;
  json cats = json::array();
  std::size_t index = 0;
  for (const auto& [name, entry] : cache.categories) {
    std::string dir = detail::sanitize_dir_name(name);
    // Sanitation can collide; suffix with the ordinal when it does.
    if (manifest.contains("_dirs") && manifest["_dirs"].contains(dir)) {
      dir += "_" + std::to_string(index);
    }
    manifest["_dirs"][dir] = true;
    const std::filesystem::path cat_dir = root / dir;
    std::filesystem::create_directories(cat_dir);
    const std::string text_bytes = encode_f32_blob(entry.text);
    const std::string image_bytes = encode_f32_blob(entry.image);
    write_file_bytes(cat_dir / "text.f32", text_bytes);
    write_file_bytes(cat_dir / "image.f32", image_bytes);
    json c;
    c["name"] = name;
    c["dir"] = dir;
    c["p"] = entry.text.rows();
    c["q"] = entry.image.rows();
    c["text_sha256"] = Sha256::hex(text_bytes.data(), text_bytes.size());
    c["image_sha256"] = Sha256::hex(image_bytes.data(), image_bytes.size());
    cats.push_back(c);
    ++index;
  }
  manifest.erase("_dirs");
  manifest["categories"] = cats;
  const std::filesystem::path manifest_path = root / "manifest.json";
  write_file_bytes(manifest_path, manifest.dump(2) + "\n");
  return manifest_path;
}

// Reads and fully verifies a cache: checksums and manifest/blob agreement.
inline PriorCache read_prior_cache(const std::filesystem::path& root) {
  instrument::prior_cache_reads().fetch_add(1, std::memory_order_relaxed);
  const std::filesystem::path manifest_path = root / "manifest.json";
  if (!std::filesystem::exists(manifest_path)) {
    throw IncompleteCacheError("prior cache manifest missing: " + manifest_path.string());
  }
  json manifest;
  try {
    manifest = json::parse(read_file_bytes(manifest_path));
  } catch (const json::exception& e) {
    throw CacheCorruptionError("unparseable manifest " + manifest_path.string() + ": " +
                               e.what());
  }
  PriorCache cache;
  cache.d_t = manifest.at("d_t").get<int>();
  cache.d_v = manifest.at("d_v").get<int>();
  cache.provenance = manifest.value("provenance", json::object());
  for (const auto& c : manifest.at("categories")) {
    const std::string name = c.at("name").get<std::string>();
    const std::filesystem::path dir = root / c.at("dir").get<std::string>();
    PriorCacheEntry entry;
    auto load_blob = [&](const char* file, const std::string& expected_sha, int expected_rows,
                         int expected_dim) {
      const std::filesystem::path path = dir / file;
      if (!std::filesystem::exists(path)) {
        throw IncompleteCacheError("prior cache blob missing: " + path.string());
      }
      const std::string bytes = read_file_bytes(path);
      const std::string sha = Sha256::hex(bytes.data(), bytes.size());
      if (sha != expected_sha) {
        throw CacheCorruptionError("checksum mismatch for " + path.string() +
                                   " (expected " + expected_sha + ", got " + sha + ")");
      }
      Tensor<float> t;
      try {
        t = decode_f32_blob(bytes, path.string());
      } catch (const BlobError& e) {
        throw CacheCorruptionError(e.what());
      }
      if (t.rows() != expected_rows || (t.rows() > 0 && t.cols() != expected_dim)) {
        throw IncompleteCacheError("manifest disagrees with blob " + path.string() +
                                   ": manifest says [" + std::to_string(expected_rows) + "," +
                                   std::to_string(expected_dim) + "], blob is " +
                                   t.shape_str());
      }
      return t;
    };
    entry.text = load_blob("text.f32", c.at("text_sha256").get<std::string>(),
                           c.at("p").get<int>(), cache.d_t);
    entry.image = load_blob("image.f32", c.at("image_sha256").get<std::string>(),
                            c.at("q").get<int>(), cache.d_v);
    cache.categories.emplace(name, std::move(entry));
  }
  return cache;
}

// Non-throwing integrity check; returns human-readable issues, empty if ok.
inline std::vector<std::string> verify_prior_cache(const std::filesystem::path& root) {
  std::vector<std::string> issues;
  try {
    read_prior_cache(root);
  } catch (const std::exception& e) {
    issues.emplace_back(e.what());
  }
  return issues;
}

// ---------------------------------------------------------------------------
// Mock priors
// ---------------------------------------------------------------------------

// Deterministic stand-in for the GPT/diffusion/CLIP stack: every category
// gets a distinct mean vector so the priors carry category signal. Pure
// function of its arguments.
inline PriorCache mock_priors(const std::vector<std::string>& categories, std::uint64_t seed,
                              int p, int q, int d_t, int d_v) {
  if (p < 1 || d_t < 1 || d_v < 1 || q < 0) {
    throw std::invalid_argument("mock_priors: need p >= 1, q >= 0, dims >= 1");
  }
  PriorCache cache;
  cache.d_t = d_t;
  cache.d_v = d_v;
  cache.provenance = {{"provider", "mock"},
                      {"seed", seed},
                      {"p", p},
                      {"q", q}};
  for (const std::string& cat : categories) {
    PriorCacheEntry entry;
    auto fill = [&](Tensor<float>& m, int rows, int dim, const char* tag) {
      m = Tensor<float>({rows, dim});
      Rng mean_rng(mix_seed(seed, std::string(tag) + ".mean." + cat));
      std::vector<float> mean(dim);
      for (int j = 0; j < dim; ++j) mean[j] = static_cast<float>(mean_rng.normal());
      Rng row_rng(mix_seed(seed, std::string(tag) + ".rows." + cat));
      for (int r = 0; r < rows; ++r) {
        for (int j = 0; j < dim; ++j) {
          m.at(r, j) = mean[j] + 0.35f * static_cast<float>(row_rng.normal());
        }
      }
    };
    fill(entry.text, p, d_t, "text");
    fill(entry.image, q, d_v, "image");
    cache.categories.emplace(cat, std::move(entry));
  }
  return cache;
}

// ---------------------------------------------------------------------------
// Provider-backed generation
// ---------------------------------------------------------------------------

// Collects descriptions, generated images and embeddings for each category.
// Categories fan out over a bounded worker pool; a provider failure after
// retries records the error and omits that category (a partial cache is
// valid). Results are deterministic given deterministic providers.
inline PriorCache generate_priors(const std::vector<std::string>& categories,
                                  const ProviderConfig& config, int p,
                                  int images_per_description, TextProvider& text,
                                  ImageProvider& image, EmbeddingProvider& embedding) {
  config.check();
  if (p < 1 || images_per_description < 0) {
    throw std::invalid_argument("generate_priors: need p >= 1, images_per_description >= 0");
  }
  PriorCache cache;
  cache.provenance = {{"text_provider", text.identity()},
                      {"image_provider", image.identity()},
                      {"embedding_provider", embedding.identity()},
                      {"temperature", config.temperature},
                      {"p", p},
                      {"images_per_description", images_per_description},
                      {"errors", json::object()}};

  struct Slot {
    bool ok = false;
    std::string error;
    PriorCacheEntry entry;
  };
  std::vector<Slot> slots(categories.size());

  auto work = [&](std::size_t idx) {
    const std::string& cat = categories[idx];
    try {
      std::vector<std::string> descriptions = text.describe(cat, p);
      if (static_cast<int>(descriptions.size()) < p) {
        throw ProviderError("text provider returned " +
                            std::to_string(descriptions.size()) + " descriptions, need " +
                            std::to_string(p));
      }
      descriptions.resize(p);
      std::vector<std::string> payloads;
      if (images_per_description > 0) {
        payloads.reserve(static_cast<std::size_t>(p) * images_per_description);
        for (std::size_t d = 0; d < descriptions.size(); ++d) {
          const std::uint64_t img_seed = mix_seed(fnv1a(cat), descriptions[d]);
          auto batch = image.generate(descriptions[d], images_per_description, img_seed);
          if (static_cast<int>(batch.size()) != images_per_description) {
            throw ProviderError("image provider returned wrong count for '" + cat + "'");
          }
          for (auto& b : batch) payloads.push_back(std::move(b));
        }
      }
      Slot s;
      s.entry.text = embedding.embed_texts(descriptions);
      s.entry.image = payloads.empty() ? Tensor<float>({0, 0})
                                       : embedding.embed_images(payloads);
      s.ok = true;
      slots[idx] = std::move(s);
    } catch (const std::exception& e) {
      slots[idx].ok = false;
      slots[idx].error = e.what();
    }
  };

  const std::size_t workers =
      std::min<std::size_t>(static_cast<std::size_t>(config.parallelism), categories.size());
  if (workers <= 1) {
    for (std::size_t i = 0; i < categories.size(); ++i) work(i);
  } else {
    std::vector<std::thread> pool;
    std::atomic<std::size_t> next{0};
    for (std::size_t w = 0; w < workers; ++w) {
      pool.emplace_back([&] {
        for (;;) {
          const std::size_t i = next.fetch_add(1);
          if (i >= categories.size()) return;
          work(i);
        }
      });
    }
    for (auto& t : pool) t.join();
  }

  for (std::size_t i = 0; i < categories.size(); ++i) {
    if (!slots[i].ok) {
      cache.provenance["errors"][categories[i]] = slots[i].error;
      continue;
    }
    PriorCacheEntry& e = slots[i].entry;
    if (cache.categories.empty() && cache.d_t == 0) {
      cache.d_t = e.text.cols();
      cache.d_v = e.image.rows() > 0 ? e.image.cols() : 0;
    }
    if (e.text.cols() != cache.d_t ||
        (e.image.rows() > 0 && cache.d_v > 0 && e.image.cols() != cache.d_v)) {
      cache.provenance["errors"][categories[i]] = "inconsistent embedding dimensions";
      continue;
    }
    if (cache.d_v == 0 && e.image.rows() > 0) cache.d_v = e.image.cols();
    cache.categories.emplace(categories[i], std::move(e));
  }
  // A text-only cache still needs a declared image dimension for the blobs.
  if (cache.d_v == 0) cache.d_v = 1;
  return cache;
}

}  // namespace kad
