#pragma once

// Frozen text encoder. Prompts are tokenized on non-alphanumeric boundaries
// and every token owns a fixed embedding row: a unit vector drawn from an
// isotropic gaussian seeded by the token's 64-bit hash. No learned state, so
// the same prompt encodes to the same matrix on every platform. An external
// JSON table (prompt_text -> rows) can replace the hash-keyed table.

#include <cctype>
#include <cmath>
#include <filesystem>
#include <fstream>
#include <map>
#include <string>
#include <vector>

#include <nlohmann/json.hpp>

#include "propl/rng.hpp"
#include "propl/tensor.hpp"

namespace propl {

inline std::vector<std::string> tokenize_prompt(const std::string& text) {
  std::vector<std::string> toks;
  std::string cur;
  for (unsigned char ch : text) {
    if (std::isalnum(ch)) {
      cur.push_back(static_cast<char>(std::tolower(ch)));
    } else if (!cur.empty()) {
      toks.push_back(cur);
      cur.clear();
    }
  }
  if (!cur.empty()) toks.push_back(cur);
  return toks;
}

// Embedding row for one token: D gaussian draws seeded by the token hash,
// scaled to unit L2 norm.
template <typename S>
std::vector<S> token_embedding(const std::string& token, int dim) {
  Rng rng(fnv1a64(token));
  std::vector<double> row(static_cast<std::size_t>(dim));
  double norm2 = 0.0;
  for (auto& x : row) {
    x = rng.normal();
    norm2 += x * x;
  }
  const double inv = 1.0 / std::sqrt(norm2);
  std::vector<S> out(row.size());
  for (std::size_t i = 0; i < row.size(); ++i)
    out[i] = static_cast<S>(row[i] * inv);
  return out;
}

template <typename S>
struct PromptFeatures {
  TokenMat<S> t;  // (L x D)
  int L = 0;
  int D = 0;
};

// Optional externally supplied embeddings, keyed by the exact prompt text.
struct PromptTable {
  std::map<std::string, std::vector<std::vector<double>>> rows;
  bool empty() const { return rows.empty(); }
};

inline PromptTable load_prompt_table(const std::filesystem::path& path) {
  std::ifstream f(path);
  require(f.good(), "cannot open prompt embedding file: " + path.string());
  nlohmann::json j = nlohmann::json::parse(f);
  require(j.is_object(), "prompt embedding file must map prompt text to rows");
  PromptTable t;
  for (auto it = j.begin(); it != j.end(); ++it) {
    std::vector<std::vector<double>> rows;
    if (it.value().is_array() && !it.value().empty() && it.value().at(0).is_number()) {
      rows.push_back(it.value().get<std::vector<double>>());  // single row
    } else {
      rows = it.value().get<std::vector<std::vector<double>>>();
    }
    require(!rows.empty(), "empty embedding for prompt: " + it.key());
    for (const auto& r : rows)
      require(r.size() == rows.front().size(),
              "ragged embedding rows for prompt: " + it.key());
    t.rows[it.key()] = std::move(rows);
  }
  return t;
}

template <typename S>
PromptFeatures<S> encode_prompt(const std::string& prompt_text, int embed_width,
                                const PromptTable* external = nullptr) {
  require(embed_width >= 1, "embed width must be positive");
  PromptFeatures<S> pf;
  if (external != nullptr && !external->empty()) {
    auto it = external->rows.find(prompt_text);
    require(it != external->rows.end(),
            "prompt not found in external embedding table: \"" + prompt_text + "\"");
    const auto& rows = it->second;
    require(static_cast<int>(rows.front().size()) == embed_width,
            "external embedding width " + std::to_string(rows.front().size()) +
                " does not match configured width " + std::to_string(embed_width));
    pf.L = static_cast<int>(rows.size());
    pf.D = embed_width;
    pf.t = TokenMat<S>(pf.L, pf.D);
    for (int r = 0; r < pf.L; ++r)
      for (int c = 0; c < pf.D; ++c)
        pf.t.at(r, c) = static_cast<S>(rows[static_cast<std::size_t>(r)][static_cast<std::size_t>(c)]);
    return pf;
  }
  const auto toks = tokenize_prompt(prompt_text);
  require(!toks.empty(), "prompt produced no tokens: \"" + prompt_text + "\"");
  pf.L = static_cast<int>(toks.size());
  pf.D = embed_width;
  pf.t = TokenMat<S>(pf.L, pf.D);
  for (int r = 0; r < pf.L; ++r) {
    const auto row = token_embedding<S>(toks[static_cast<std::size_t>(r)], embed_width);
    for (int c = 0; c < pf.D; ++c) pf.t.at(r, c) = row[static_cast<std::size_t>(c)];
  }
  return pf;
}

}  // namespace propl
