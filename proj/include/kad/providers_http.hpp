#pragma once

// HTTP adapters for the three provider roles. JSON request/response bodies;
// the exact schemas are adapter-specific and isolated here so the
// GPT/diffusion/CLIP stack stays replaceable. Credentials come from the
// environment variable named in the role config and are sent as a bearer
// token.

#include "kad/priors.hpp"

#include <httplib.h>
#include <json.hpp>

#include <chrono>
#include <cstdlib>
#include <stdexcept>
#include <string>
#include <thread>
#include <vector>

namespace kad {

namespace detail {

class HttpProviderBase {
public:
  explicit HttpProviderBase(const ProviderRole& role) : role_(role) {
    role_.check();
    if (role_.endpoint.empty()) {
      throw std::invalid_argument("http provider: endpoint not configured");
    }
    if (!role_.credential_env.empty()) {
      const char* v = std::getenv(role_.credential_env.c_str());
      if (!v || !*v) {
        throw std::invalid_argument("http provider: credential environment variable " +
                                    role_.credential_env + " is not set");
      }
      token_ = v;
    }
  }

  const ProviderRole& role() const { return role_; }

protected:
  json post(const std::string& path, const json& body) const {
    std::string last_error;
    for (int attempt = 0; attempt <= role_.retries; ++attempt) {
      if (attempt > 0) {
        std::this_thread::sleep_for(std::chrono::milliseconds(50 * attempt));
      }
      httplib::Client client(role_.endpoint);
      client.set_connection_timeout(std::chrono::duration<double>(role_.timeout_s));
      client.set_read_timeout(std::chrono::duration<double>(role_.timeout_s));
      httplib::Headers headers;
      if (!token_.empty()) headers.emplace("Authorization", "Bearer " + token_);
      auto res = client.Post(path, headers, body.dump(), "application/json");
      if (!res) {
        last_error = "transport error: " + httplib::to_string(res.error());
        continue;
      }
      if (res->status != 200) {
        last_error = "HTTP " + std::to_string(res->status) + ": " + res->body;
        continue;
      }
      try {
        return json::parse(res->body);
      } catch (const json::exception& e) {
        last_error = std::string("unparseable response: ") + e.what();
      }
    }
    throw ProviderError("provider " + role_.endpoint + path + " failed after " +
                        std::to_string(role_.retries + 1) + " attempts: " + last_error);
  }

private:
  ProviderRole role_;
  std::string token_;
};

}  // namespace detail

class HttpTextProvider : public TextProvider, private detail::HttpProviderBase {
public:
  HttpTextProvider(const ProviderRole& role, double temperature)
      : HttpProviderBase(role), temperature_(temperature) {}

  std::vector<std::string> describe(const std::string& category, int p) override {
    json req{{"model", role().model_id},
             {"prompt", interaction_prompt(category, p)},
             {"n", p},
             {"temperature", temperature_}};
    const json res = post("/v1/descriptions", req);
    std::vector<std::string> out;
    for (const auto& d : res.at("descriptions")) out.push_back(d.get<std::string>());
    return out;
  }

  std::string identity() const override {
    return "http:" + role().endpoint + "#" + role().model_id;
  }

private:
  double temperature_;
};

class HttpImageProvider : public ImageProvider, private detail::HttpProviderBase {
public:
  explicit HttpImageProvider(const ProviderRole& role) : HttpProviderBase(role) {}

  std::vector<std::string> generate(const std::string& prompt, int n,
                                    std::uint64_t seed) override {
    json req{{"model", role().model_id}, {"prompt", prompt}, {"n", n}, {"seed", seed}};
    const json res = post("/v1/images", req);
    std::vector<std::string> out;
    for (const auto& img : res.at("images")) out.push_back(img.get<std::string>());
    return out;
  }

  std::string identity() const override {
    return "http:" + role().endpoint + "#" + role().model_id;
  }
};

class HttpEmbeddingProvider : public EmbeddingProvider, private detail::HttpProviderBase {
public:
  explicit HttpEmbeddingProvider(const ProviderRole& role) : HttpProviderBase(role) {}

  Tensor<float> embed_texts(const std::vector<std::string>& texts) override {
    return embed(texts, "text");
  }
  Tensor<float> embed_images(const std::vector<std::string>& payloads) override {
    return embed(payloads, "image");
  }

  std::string identity() const override {
    return "http:" + role().endpoint + "#" + role().model_id;
  }

private:
  Tensor<float> embed(const std::vector<std::string>& inputs, const char* kind) {
    json req{{"model", role().model_id}, {"kind", kind}, {"inputs", inputs}};
    const json res = post("/v1/embeddings", req);
    const auto& rows = res.at("embeddings");
    if (rows.empty()) throw ProviderError("embedding provider returned no rows");
    const int n = static_cast<int>(rows.size());
    const int dim = static_cast<int>(rows.front().size());
    Tensor<float> out({n, dim});
    for (int r = 0; r < n; ++r) {
      const auto& row = rows.at(r);
      if (static_cast<int>(row.size()) != dim) {
        throw ProviderError("embedding provider returned ragged rows");
      }
      for (int c = 0; c < dim; ++c) out.at(r, c) = row.at(c).get<float>();
    }
    return out;
  }
};

// Deterministic in-process providers, the desk-scale replacement for the
// paper's GPT-4 / diffusion / CLIP stack. Embeddings follow the same
// category-mean construction as mock_priors.
class MockTextProvider : public TextProvider {
public:
  std::vector<std::string> describe(const std::string& category, int p) override {
    std::vector<std::string> out;
    out.reserve(p);
    static const char* interactions[] = {
        "being cut with a knife", "being broken by hand",    "being crushed in a press",
        "being heated on a stove", "being peeled with a peeler", "being split with an axe",
        "being ground in a mill",  "being bent with pliers",  "being sanded with sandpaper",
        "being dissolved in water"};
    for (int i = 0; i < p; ++i) {
      out.push_back(category + " is " + interactions[i % 10]);
    }
    return out;
  }
  std::string identity() const override { return "mock-text"; }
};

class MockImageProvider : public ImageProvider {
public:
  std::vector<std::string> generate(const std::string& prompt, int n,
                                    std::uint64_t seed) override {
    std::vector<std::string> out;
    for (int i = 0; i < n; ++i) {
      out.push_back("img:" + std::to_string(mix_seed(seed, prompt) + i));
    }
    return out;
  }
  std::string identity() const override { return "mock-image"; }
};

class MockEmbeddingProvider : public EmbeddingProvider {
public:
  MockEmbeddingProvider(std::uint64_t seed, int d_t, int d_v)
      : seed_(seed), d_t_(d_t), d_v_(d_v) {}

  Tensor<float> embed_texts(const std::vector<std::string>& texts) override {
    return embed(texts, d_t_, "text-embed");
  }
  Tensor<float> embed_images(const std::vector<std::string>& payloads) override {
    return embed(payloads, d_v_, "image-embed");
  }
  std::string identity() const override { return "mock-embed"; }

private:
  Tensor<float> embed(const std::vector<std::string>& inputs, int dim, const char* tag) {
    Tensor<float> out({static_cast<int>(inputs.size()), dim});
    for (std::size_t r = 0; r < inputs.size(); ++r) {
      Rng rng(mix_seed(seed_, std::string(tag) + ":" + inputs[r]));
      for (int c = 0; c < dim; ++c) out.at(static_cast<int>(r), c) = static_cast<float>(rng.normal());
    }
    return out;
  }

  std::uint64_t seed_;
  int d_t_, d_v_;
};

}  // namespace kad
