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

#include <gtest/gtest.h>

#include <filesystem>

#include "ssm/numerics/grad_check.hpp"
#include "ssm/tsp.hpp"

namespace ssm::tsp {
namespace {

const facs::FacsTable& table() {
  static const facs::FacsTable t = facs::builtin_facs_table();
  return t;
}

std::shared_ptr<const TextEncoderProvider> surrogate(std::uint64_t seed = 9) {
  return std::make_shared<SurrogateTextEncoder>(seed, 64, 64);
}

TEST(Tokenize, TwoWordsStable) {
  const auto a = tokenize("cheek raiser");
  const auto b = tokenize("cheek raiser");
  ASSERT_EQ(a.token_ids.size(), 2u);
  EXPECT_EQ(a.token_ids, b.token_ids);
  EXPECT_EQ(a.token_ids[0], fnv1a64("cheek") % 8192);
  EXPECT_TRUE(a.warning.empty());
}

TEST(Tokenize, EmptyInputRejected) {
  EXPECT_THROW(tokenize(""), InvalidArgument);
  EXPECT_THROW(tokenize(" ,, "), InvalidArgument);
}

TEST(Tokenize, CaseFolding) { EXPECT_EQ(tokenize("lip corner puller").token_ids, tokenize("Lip corner puller").token_ids); }

TEST(Tokenize, PunctuationSplits) { EXPECT_EQ(tokenize("brow,lowerer").token_ids, tokenize("brow lowerer").token_ids); }

TEST(Tokenize, TruncationRecordsWarning) {
  std::string text;
  for (int i = 0; i < 80; ++i) text += "w" + std::to_string(i) + " ";
  const auto seq = tokenize(text);
  EXPECT_EQ(seq.token_ids.size(), 77u);
  EXPECT_FALSE(seq.warning.empty());
  for (auto id : seq.token_ids) EXPECT_LT(id, 8192u);
}

TEST(DescriptionVariant, ThreeStyles) {
  EXPECT_EQ(description_variant(table(), "Happiness", DescriptionStyle::compound), "cheek raiser, lip corner puller");
  EXPECT_EQ(description_variant(table(), "Happiness", DescriptionStyle::words), "happiness");
  EXPECT_EQ(description_variant(table(), "Happiness", DescriptionStyle::standalone), "a facial expression of happiness");
  EXPECT_THROW(description_variant(table(), "Joy", DescriptionStyle::words), LookupError);
  EXPECT_EQ(parse_style("standalone"), DescriptionStyle::standalone);
  EXPECT_THROW(parse_style("poetic"), ConfigError);
}

PromptSpec spec_with(Parameter* ctx, const std::string& text, const std::string& label = "x") {
  const TokenEmbedding emb(1, 64);
  PromptSpec s;
  s.label = label;
  s.template_tokens = tokenize(text);
  s.template_embedding = emb.embed(s.template_tokens);
  s.context = ctx;
  return s;
}

TEST(ComposePrompt, ContextThenTemplate) {
  Rng rng(1);
  Parameter ctx("ctx", rng.normal_matrix(8, 64, 0.02), ParamGroup::head);
  const PromptSpec s = spec_with(&ctx, "inner brow raiser outer");
  Tape tape;
  Var seq = compose_prompt(tape, s);
  ASSERT_EQ(seq.rows(), 12u);
  for (std::size_t c = 0; c < 64; ++c) {
    EXPECT_EQ(seq.value()(0, c), ctx.value(0, c));
    EXPECT_EQ(seq.value()(8, c), s.template_embedding(0, c));
  }
}

TEST(ComposePrompt, NoContextIsTemplateExactly) {
  const PromptSpec s = spec_with(nullptr, "lips part");
  Tape tape;
  EXPECT_TRUE(bitwise_equal(compose_prompt(tape, s).value(), s.template_embedding));
}

TEST(ComposePrompt, SharedTemplateDiffersOnlyInContextRows) {
  Rng rng(2);
  Parameter c1("c1", rng.normal_matrix(4, 64, 0.02), ParamGroup::head);
  Parameter c2("c2", rng.normal_matrix(4, 64, 0.02), ParamGroup::head);
  Tape tape;
  const Tensor a = compose_prompt(tape, spec_with(&c1, "jaw drop")).value();
  const Tensor b = compose_prompt(tape, spec_with(&c2, "jaw drop")).value();
  for (std::size_t r = 0; r < a.rows(); ++r) {
    bool same = true;
    for (std::size_t c = 0; c < 64; ++c) same = same && a(r, c) == b(r, c);
    EXPECT_EQ(same, r >= 4) << r;
  }
}

TEST(PromptBank, ShapesAndDeterminism) {
  TspConfig cfg;
  PromptBank bank(table(), facs::basic_expressions(), facs::bp4d_aus(), surrogate(), cfg, 5);
  PromptBank again(table(), facs::basic_expressions(), facs::bp4d_aus(), surrogate(), cfg, 5);
  Tape tape;
  const Tensor t_exp = bank.expression_prototypes(tape).value();
  const Tensor t_au = bank.au_prototypes(tape).value();
  EXPECT_EQ(t_exp.rows(), 7u);
  EXPECT_EQ(t_exp.cols(), 64u);
  EXPECT_EQ(t_au.rows(), 12u);
  EXPECT_TRUE(bitwise_equal(t_exp, bank.expression_prototypes(tape).value()));
  EXPECT_TRUE(bitwise_equal(t_exp, again.expression_prototypes(tape).value()));
  EXPECT_EQ(bank.parameters().size(), 2u);
}

TEST(PromptBank, PromptLengthIsContextPlusTemplate) {
  TspConfig cfg;
  PromptBank bank(table(), facs::basic_expressions(), facs::bp4d_aus(), surrogate(), cfg, 5);
  const PromptSpec& happy = bank.expression_prompts()[0];
  Tape tape;
  EXPECT_EQ(compose_prompt(tape, happy).rows(), 8u + happy.template_tokens.token_ids.size());
}

TEST(PromptBank, StyleChangesTemplates) {
  TspConfig words;
  words.style = DescriptionStyle::words;
  PromptBank bank(table(), facs::basic_expressions(), facs::bp4d_aus(), surrogate(), words, 5);
  EXPECT_EQ(bank.expression_prompts()[0].template_tokens.source_text, "happiness");
  EXPECT_EQ(bank.au_prompts()[0].template_tokens.source_text, "inner brow raiser");
}

TEST(PromptBank, TokenWidthMismatchIsConfigError) {
  TspConfig cfg;
  cfg.token_dim = 32;
  EXPECT_THROW(PromptBank(table(), facs::basic_expressions(), facs::bp4d_aus(), surrogate(), cfg, 5), ConfigError);
}

TEST(Prototypes, ContextGradientsMatchFiniteDifferences) {
  for (std::uint64_t seed = 1; seed <= 10; ++seed) {
    TspConfig cfg;
    cfg.context_length = 3;
    cfg.token_dim = 8;
    auto enc = std::make_shared<SurrogateTextEncoder>(seed, 8, 6);
    PromptBank bank(table(), {"Happiness", "Sadness", "Neutral"}, {1, 4, 6}, enc, cfg, seed);
    Rng rng(seed, "target");
    const Tensor w_exp = rng.normal_matrix(3, 6, 1.0), w_au = rng.normal_matrix(3, 6, 1.0);
    auto f = [&](Tape& t) {
      Var a = sum_all(mul(bank.expression_prototypes(t), t.constant(w_exp)));
      Var b = sum_all(mul(bank.au_prototypes(t), t.constant(w_au)));
      return add(a, b);
    };
    const auto report = grad_check(f, bank.parameters());
    EXPECT_TRUE(report.passed()) << seed << " " << report.worst_parameter << " " << report.max_rel_error;
  }
}

TEST(Prototypes, TemplateAndEncoderReceiveNoGradient) {
  TspConfig cfg;
  auto enc = std::make_shared<SurrogateTextEncoder>(4, 64, 64);
  const Tensor projection_before = enc->projection();
  PromptBank bank(table(), facs::basic_expressions(), facs::bp4d_aus(), enc, cfg, 5);
  const Tensor template_before = bank.expression_prompts()[0].template_embedding;
  Tape tape;
  Var loss = sum_all(bank.expression_prototypes(tape));
  tape.backward(loss);
  double ctx_norm = 0.0;
  for (double g : bank.parameters()[0]->grad.values()) ctx_norm += g * g;
  EXPECT_GT(ctx_norm, 0.0);
  EXPECT_TRUE(bitwise_equal(enc->projection(), projection_before));
  EXPECT_TRUE(bitwise_equal(bank.expression_prompts()[0].template_embedding, template_before));
  // The AU context never appears in the expression prototypes.
  for (double g : bank.parameters()[1]->grad.values()) EXPECT_EQ(g, 0.0);
}

TEST(FileEncoder, RoundTripAndLookup) {
  const auto dir = std::filesystem::temp_directory_path() / "ssm_tsp_test";
  std::filesystem::create_directories(dir);
  Rng rng(8);
  const Tensor rows = rng.normal_matrix(2, 5, 1.0);
  write_embeddings(dir / "emb.bin", dir / "emb.txt", {"Happiness", "AU1"}, rows);
  const FileTextEncoder enc(dir / "emb.bin", dir / "emb.txt", 64);
  EXPECT_EQ(enc.kind(), "file-backed");
  EXPECT_EQ(enc.dim(), 5u);
  Tape tape;
  PromptSpec s = spec_with(nullptr, "anything", "AU1");
  const Tensor got = enc.encode(tape, s).value();
  for (std::size_t c = 0; c < 5; ++c) EXPECT_EQ(got(0, c), rows(1, c));
  s.label = "AU2";
  EXPECT_THROW(enc.encode(tape, s), LookupError);
  EXPECT_THROW(FileTextEncoder(dir / "missing.bin", dir / "emb.txt", 64), IoError);
  std::filesystem::remove_all(dir);
}

}  // namespace
}  // namespace ssm::tsp
