// Copyright 2026 The SSM Authors. All Rights Reserved.
//
// Licensed under the Apache License, Version 2.0 (the "License");
// you may not use this file except in compliance with the License.
// You may obtain a copy of the License at
//
//     http://www.apache.org/licenses/LICENSE-2.0
//
// Unless required by applicable law or agreed to in writing, software
// distributed under the License is distributed on an "AS IS" BASIS,
// WITHOUT WARRANTIES OR CONDITIONS OF ANY KIND, either express or implied.
// See the License for the specific language governing permissions and
// limitations under the License.

#pragma once

#include <cctype>
#include <cstdint>
#include <filesystem>
#include <fstream>
#include <memory>
#include <string>
#include <string_view>
#include <utility>
#include <vector>

#include "ssm/facs.hpp"
#include "ssm/numerics/ops.hpp"
#include "ssm/numerics/rng.hpp"

namespace ssm::tsp {

enum class Task { expression, au };

/// How expression labels are phrased in prompt templates.
enum class DescriptionStyle { compound, standalone, words };

inline std::string to_string(DescriptionStyle s) {
  switch (s) {
    case DescriptionStyle::compound: return "compound";
    case DescriptionStyle::standalone: return "standalone";
    case DescriptionStyle::words: return "words";
  }
  return "compound";
}

inline DescriptionStyle parse_style(std::string_view s) {
  if (s == "compound") return DescriptionStyle::compound;
  if (s == "standalone") return DescriptionStyle::standalone;
  if (s == "words") return DescriptionStyle::words;
  throw ConfigError("unknown description style '" + std::string(s) + "'");
}

struct TokenizerConfig {
  std::size_t vocab_size = 8192;
  std::size_t max_tokens = 77;
};

struct TokenSequence {
  std::vector<std::uint32_t> token_ids;
  std::string source_text;
  std::string warning;  // set when the text was truncated
};

/// Lowercases, splits on anything that is not a letter or digit, and maps
/// each word through FNV-1a modulo the vocabulary size.
inline TokenSequence tokenize(std::string_view text, const TokenizerConfig& config = {}) {
  if (text.empty()) throw InvalidArgument("cannot tokenize empty text");
  TokenSequence seq;
  seq.source_text = std::string(text);
  std::string word;
  std::size_t dropped = 0;
  auto flush = [&] {
    if (word.empty()) return;
    if (seq.token_ids.size() < config.max_tokens) {
      seq.token_ids.push_back(static_cast<std::uint32_t>(fnv1a64(word) % config.vocab_size));
    } else {
      ++dropped;
    }
    word.clear();
  };
  for (char ch : text) {
    const auto c = static_cast<unsigned char>(ch);
    if (std::isalnum(c)) {
      word.push_back(static_cast<char>(std::tolower(c)));
    } else {
      flush();
    }
  }
  flush();
  if (seq.token_ids.empty()) throw InvalidArgument("text contains no tokens: '" + seq.source_text + "'");
  if (dropped) {
    seq.warning = "truncated " + std::to_string(dropped) + " tokens beyond max_tokens=" +
                  std::to_string(config.max_tokens);
  }
  return seq;
}

/// Prompt template text for an expression label in the requested style.
inline std::string description_variant(const facs::FacsTable& table, std::string_view label,
                                       DescriptionStyle style) {
  const facs::ExpressionDef& e = table.expression(label);
  switch (style) {
    case DescriptionStyle::compound: return e.compound_description;
    case DescriptionStyle::standalone: return e.standalone_description;
    case DescriptionStyle::words: return e.word_description;
  }
  return e.compound_description;
}

/// Frozen token embedding table; row `id` is a seeded Gaussian draw, so the
/// table never has to be materialized.
class TokenEmbedding {
 public:
  TokenEmbedding(std::uint64_t seed, std::size_t dim) : seed_(seed), dim_(dim) {}

  std::size_t dim() const noexcept { return dim_; }

  Tensor embed(const TokenSequence& seq) const {
    Tensor out = Tensor::matrix(seq.token_ids.size(), dim_);
    for (std::size_t i = 0; i < seq.token_ids.size(); ++i) {
      Rng rng(splitmix64(seed_ ^ (0x7F4A7C15ULL + seq.token_ids[i])));
      for (std::size_t j = 0; j < dim_; ++j) out(i, j) = rng.normal();
    }
    return out;
  }

 private:
  std::uint64_t seed_;
  std::size_t dim_;
};

/// One class prompt: optional learnable context rows followed by the frozen
/// embedding of a fixed template.
struct PromptSpec {
  std::string label;
  Task task = Task::expression;
  TokenSequence template_tokens;
  Tensor template_embedding;    // l x d_tok, frozen
  Parameter* context = nullptr;  // c x d_tok, shared by all prompts of a task; null when c == 0
};

/// (c + l) x d_tok prompt sequence: context rows first, then the template.
inline Var compose_prompt(Tape& tape, const PromptSpec& spec) {
  Var tmpl = tape.constant(spec.template_embedding);
  if (spec.context == nullptr || spec.context->value.rows() == 0) return tmpl;
  return concat_rows({tape.param(*spec.context), tmpl});
}

/// Frozen text encoder: maps a prompt to a d-dimensional class embedding.
class TextEncoderProvider {
 public:
  virtual ~TextEncoderProvider() = default;
  virtual std::string kind() const = 0;
  virtual std::size_t dim() const = 0;
  virtual std::size_t token_dim() const = 0;
  /// 1 x d embedding, differentiable with respect to the prompt context only.
  virtual Var encode(Tape& tape, const PromptSpec& spec) const = 0;
};

/// Seeded stand-in for a pretrained text encoder:
/// tanh(A * meanpool(prompt) + b) with A, b fixed at construction.
class SurrogateTextEncoder final : public TextEncoderProvider {
 public:
  SurrogateTextEncoder(std::uint64_t seed, std::size_t token_dim, std::size_t dim) : token_dim_(token_dim), dim_(dim) {
    Rng rng(seed, "text-encoder");
    projection_ = rng.normal_matrix(dim, token_dim, 1.0 / std::sqrt(static_cast<double>(token_dim)));
    bias_ = rng.normal_matrix(1, dim, 0.05);
  }

  std::string kind() const override { return "seeded-surrogate"; }
  std::size_t dim() const override { return dim_; }
  std::size_t token_dim() const override { return token_dim_; }

  Var encode(Tape& tape, const PromptSpec& spec) const override {
    Var pooled = mean_rows(compose_prompt(tape, spec));
    Var pre = add_row(matmul_nt(pooled, tape.constant(projection_)), tape.constant(bias_));
    return ssm::tanh(pre);
  }

  const Tensor& projection() const noexcept { return projection_; }
  const Tensor& bias() const noexcept { return bias_; }

 private:
  std::size_t token_dim_;
  std::size_t dim_;
  Tensor projection_;
  Tensor bias_;
};

// ---------------------------------------------------------------------------
// Precomputed embedding files: "SSMEMB1", u32 class count, u32 d, then
// row-major little-endian f64 rows. Class names live in a sidecar text
// file, one per line in row order.

inline constexpr std::string_view kEmbeddingMagic = "SSMEMB1";

inline void write_embeddings(const std::filesystem::path& path, const std::filesystem::path& names_path,
                             const std::vector<std::string>& names, const Tensor& rows) {
  if (rows.rows() != names.size()) throw InvalidArgument("embedding rows and names differ in count");
  std::ofstream out(path, std::ios::binary);
  if (!out) throw IoError("cannot write " + path.string());
  out.write(kEmbeddingMagic.data(), static_cast<std::streamsize>(kEmbeddingMagic.size()));
  const auto count = static_cast<std::uint32_t>(rows.rows());
  const auto dim = static_cast<std::uint32_t>(rows.cols());
  out.write(reinterpret_cast<const char*>(&count), sizeof count);
  out.write(reinterpret_cast<const char*>(&dim), sizeof dim);
  out.write(reinterpret_cast<const char*>(rows.data()), static_cast<std::streamsize>(rows.size() * sizeof(double)));
  std::ofstream names_out(names_path);
  if (!names_out) throw IoError("cannot write " + names_path.string());
  for (const auto& n : names) names_out << n << '\n';
  if (!out || !names_out) throw IoError("failed writing embeddings");
}

/// Encoder backed by externally computed per-class embeddings. The prompt
/// context is ignored, so no gradient reaches it.
class FileTextEncoder final : public TextEncoderProvider {
 public:
  FileTextEncoder(const std::filesystem::path& path, const std::filesystem::path& names_path,
                  std::size_t token_dim)
      : token_dim_(token_dim) {
    std::ifstream in(path, std::ios::binary);
    if (!in) throw IoError("cannot open embeddings " + path.string());
    std::string magic(kEmbeddingMagic.size(), '\0');
    in.read(magic.data(), static_cast<std::streamsize>(magic.size()));
    if (magic != kEmbeddingMagic) throw IoError(path.string() + " is not an SSMEMB1 file");
    std::uint32_t count = 0, dim = 0;
    in.read(reinterpret_cast<char*>(&count), sizeof count);
    in.read(reinterpret_cast<char*>(&dim), sizeof dim);
    if (!in || dim == 0) throw IoError(path.string() + ": truncated header");
    rows_ = Tensor::matrix(count, dim);
    in.read(reinterpret_cast<char*>(rows_.data()), static_cast<std::streamsize>(rows_.size() * sizeof(double)));
    if (!in) throw IoError(path.string() + ": truncated body");
    std::ifstream names_in(names_path);
    if (!names_in) throw IoError("cannot open class names " + names_path.string());
    for (std::string line; std::getline(names_in, line);) {
      if (!line.empty() && line.back() == '\r') line.pop_back();
      if (!line.empty()) names_.push_back(line);
    }
    if (names_.size() != count) throw IoError("class name count does not match embedding rows");
  }

  std::string kind() const override { return "file-backed"; }
  std::size_t dim() const override { return rows_.cols(); }
  std::size_t token_dim() const override { return token_dim_; }
  const std::vector<std::string>& names() const noexcept { return names_; }
  const Tensor& rows() const noexcept { return rows_; }

  Var encode(Tape& tape, const PromptSpec& spec) const override {
    for (std::size_t i = 0; i < names_.size(); ++i) {
      if (names_[i] == spec.label) {
        Tensor row = Tensor::matrix(1, rows_.cols());
        std::copy_n(rows_.data() + i * rows_.cols(), rows_.cols(), row.data());
        return tape.constant(std::move(row));
      }
    }
    throw LookupError("no precomputed embedding for class '" + spec.label + "'");
  }

 private:
  std::size_t token_dim_;
  Tensor rows_;
  std::vector<std::string> names_;
};

/// Stacks the encoded prompts into a C x d prototype matrix.
inline Var encode_prototypes(Tape& tape, const std::vector<PromptSpec>& specs, const TextEncoderProvider& provider) {
  if (specs.empty()) throw InvalidArgument("encode_prototypes: no prompts");
  std::vector<Var> rows;
  rows.reserve(specs.size());
  for (const auto& s : specs) {
    if (s.template_embedding.cols() != provider.token_dim() ||
        (s.context && s.context->value.cols() != provider.token_dim())) {
      throw ConfigError("prompt '" + s.label + "' token width does not match the text encoder (" +
                        std::to_string(provider.token_dim()) + ")");
    }
    rows.push_back(provider.encode(tape, s));
  }
  return concat_rows(rows);
}

struct TspConfig {
  std::size_t context_length = 8;
  std::size_t token_dim = 64;
  DescriptionStyle style = DescriptionStyle::compound;
  double context_std = 0.02;
  TokenizerConfig tokenizer{};
};

/// Prompt sets for both tasks: separate learnable contexts per task, frozen
/// FACS-derived templates, one shared frozen text encoder.
class PromptBank {
 public:
  PromptBank(const facs::FacsTable& table, const std::vector<std::string>& expressions, const std::vector<int>& aus,
             std::shared_ptr<const TextEncoderProvider> encoder, const TspConfig& config, std::uint64_t seed)
      : PromptBank(table, expressions, aus, std::move(encoder), config, seed, derive_seed(seed, "token-embedding")) {}

  /// `context_seed` initializes the learnable contexts; `embedding_seed`
  /// fixes the frozen token table.
  PromptBank(const facs::FacsTable& table, const std::vector<std::string>& expressions, const std::vector<int>& aus,
             std::shared_ptr<const TextEncoderProvider> encoder, const TspConfig& config, std::uint64_t context_seed,
             std::uint64_t embedding_seed)
      : encoder_(std::move(encoder)), config_(config) {
    if (encoder_->token_dim() != config.token_dim) {
      throw ConfigError("text encoder token width " + std::to_string(encoder_->token_dim()) +
                        " does not match token_dim " + std::to_string(config.token_dim));
    }
    Rng rng(context_seed, "prompt-context");
    exp_context_ = Parameter("tsp.context.exp", rng.normal_matrix(config.context_length, config.token_dim, config.context_std),
                             ParamGroup::head);
    au_context_ = Parameter("tsp.context.au", rng.normal_matrix(config.context_length, config.token_dim, config.context_std),
                            ParamGroup::head);
    const TokenEmbedding embedding(embedding_seed, config.token_dim);
    auto make = [&](std::string label, Task task, const std::string& text, Parameter* ctx) {
      PromptSpec s;
      s.label = std::move(label);
      s.task = task;
      s.template_tokens = tokenize(text, config.tokenizer);
      s.template_embedding = embedding.embed(s.template_tokens);
      s.context = config.context_length ? ctx : nullptr;
      return s;
    };
    for (const auto& name : expressions) {
      exp_specs_.push_back(make(name, Task::expression, description_variant(table, name, config.style), &exp_context_));
    }
    for (int id : aus) {
      au_specs_.push_back(make("AU" + std::to_string(id), Task::au, table.au(id).description, &au_context_));
    }
  }

  PromptBank(const PromptBank&) = delete;
  PromptBank& operator=(const PromptBank&) = delete;

  /// K x d expression prototypes.
  Var expression_prototypes(Tape& tape) const { return encode_prototypes(tape, exp_specs_, *encoder_); }
  /// M x d AU prototypes.
  Var au_prototypes(Tape& tape) const { return encode_prototypes(tape, au_specs_, *encoder_); }

  std::vector<Parameter*> parameters() {
    if (config_.context_length == 0) return {};
    return {&exp_context_, &au_context_};
  }

  const std::vector<PromptSpec>& expression_prompts() const noexcept { return exp_specs_; }
  const std::vector<PromptSpec>& au_prompts() const noexcept { return au_specs_; }
  const TextEncoderProvider& encoder() const noexcept { return *encoder_; }
  const TspConfig& config() const noexcept { return config_; }

 private:
  std::shared_ptr<const TextEncoderProvider> encoder_;
  TspConfig config_;
  Parameter exp_context_;
  Parameter au_context_;
  std::vector<PromptSpec> exp_specs_;
  std::vector<PromptSpec> au_specs_;
};

}  // namespace ssm::tsp
