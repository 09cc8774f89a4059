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

#include <fstream>
#include <sstream>

#include "ssm/facs.hpp"
#include "ssm/numerics/rng.hpp"

namespace ssm::facs {
namespace {

std::string read_file(const std::string& path) {
  std::ifstream in(path, std::ios::binary);
  std::ostringstream s;
  s << in.rdbuf();
  return s.str();
}

std::size_t column_of(const std::vector<int>& aus, int id) {
  return static_cast<std::size_t>(std::find(aus.begin(), aus.end(), id) - aus.begin());
}

TEST(BuiltinTable, ContainsSeventeenAusAndElevenExpressions) {
  const FacsTable t = builtin_facs_table();
  std::vector<int> ids;
  for (const auto& a : t.action_units()) ids.push_back(a.au_id);
  EXPECT_EQ(ids, (std::vector<int>{1, 2, 4, 5, 6, 7, 9, 10, 12, 14, 15, 17, 20, 23, 24, 25, 26}));
  ASSERT_EQ(t.expressions().size(), 11u);
  for (std::size_t i = 0; i < 11; ++i) EXPECT_EQ(t.expressions()[i].name, extended_expressions()[i]);
}

TEST(BuiltinTable, HappinessEntry) {
  const FacsTable t = builtin_facs_table();
  const auto& e = t.expression("Happiness");
  EXPECT_EQ(e.au_combination, (std::vector<int>{6, 12}));
  EXPECT_EQ(e.compound_description, "cheek raiser, lip corner puller");
}

TEST(BuiltinTable, NeutralEntry) {
  const FacsTable t = builtin_facs_table();
  const auto& e = t.expression("Neutral");
  EXPECT_TRUE(e.au_combination.empty());
  EXPECT_EQ(e.compound_description, "relaxed facial muscles, no significant action units");
}

TEST(BuiltinTable, FearCombination) {
  const FacsTable t = builtin_facs_table();
  EXPECT_EQ(t.expression("Fear").au_combination, (std::vector<int>{1, 2, 4, 5, 7, 20, 26}));
}

TEST(BuiltinTable, CompoundIsCommaJoinOfAuDescriptions) {
  const FacsTable t = builtin_facs_table();
  for (const auto& e : t.expressions()) {
    if (e.name == "Neutral") continue;
    std::string joined;
    for (std::size_t i = 0; i < e.au_combination.size(); ++i) {
      joined += (i ? ", " : "") + t.au(e.au_combination[i]).description;
    }
    if (e.name == "Disappointment") {
      // The reference text qualifies AU15 as "slight"; kept verbatim.
      EXPECT_EQ(e.compound_description, "inner brow raiser, brow lowerer, slight lip corner depressor, lips part");
      continue;
    }
    EXPECT_EQ(e.compound_description, joined) << e.name;
  }
}

TEST(BuiltinTable, ByteIdenticalToGoldenFixture) {
  EXPECT_EQ(to_tsv(builtin_facs_table()), read_file(std::string(SSM_FIXTURE_DIR) + "/facs_table.tsv"));
}

TEST(BuiltinTable, LookupErrorsNameTheKey) {
  const FacsTable t = builtin_facs_table();
  try {
    (void)t.expression("Boredom");
    FAIL();
  } catch (const LookupError& e) {
    EXPECT_NE(std::string(e.what()).find("Boredom"), std::string::npos);
  }
  EXPECT_THROW((void)t.au(3), LookupError);
}

TEST(TableValidation, RejectsDuplicatesEmptyDescriptionsAndDanglingIds) {
  EXPECT_THROW(FacsTable({{1, "a"}, {1, "b"}}, {}), ConfigError);
  EXPECT_THROW(FacsTable({{1, ""}}, {}), ConfigError);
  EXPECT_THROW(FacsTable({{1, "a"}}, {{"X", {2}, "", "", ""}}), LookupError);
}

TEST(TableFile, RoundTripsThroughText) {
  const FacsTable t = builtin_facs_table();
  const FacsTable back = parse_tsv(to_tsv(t));
  EXPECT_EQ(to_tsv(back), to_tsv(t));
  EXPECT_EQ(back.expression("Fear").au_combination, t.expression("Fear").au_combination);
}

TEST(TableFile, LoadsFixtureFromDisk) {
  const FacsTable t = load_table_file(std::string(SSM_FIXTURE_DIR) + "/facs_table.tsv");
  EXPECT_EQ(t.au(25).description, "lips part");
}

TEST(TableFile, MalformedLinesReportLineNumber) {
  try {
    (void)parse_tsv("# header\nAU\t1\tinner brow raiser\nAU\tone\tx\n");
    FAIL();
  } catch (const ConfigError& e) {
    EXPECT_NE(std::string(e.what()).find("line 3"), std::string::npos) << e.what();
  }
  EXPECT_THROW((void)parse_tsv("BOGUS\tx\n"), ConfigError);
  EXPECT_THROW((void)parse_tsv("EXPR\tX\tNone\n"), ConfigError);
}

TEST(TableFile, AlternativePriorOverridesCombination) {
  const FacsTable t = parse_tsv("AU\t6\tcheek raiser\nAU\t12\tlip corner puller\nEXPR\tHappiness\t12\tlip corner puller\tx\ty\n");
  const PriorMatrix p = build_prior_matrix(t, {"Happiness"}, {6, 12});
  EXPECT_EQ(p.P(0, 0), 0.0);
  EXPECT_EQ(p.P(0, 1), 1.0);
}

TEST(PriorMatrix, MatchesGoldenSevenByTwelve) {
  const PriorMatrix p = build_prior_matrix(builtin_facs_table(), basic_expressions(), bp4d_aus());
  std::istringstream golden(read_file(std::string(SSM_FIXTURE_DIR) + "/prior_basic_bp4d.tsv"));
  std::string line;
  std::size_t row = 0;
  while (std::getline(golden, line)) {
    if (line.empty() || line[0] == '#') continue;
    std::istringstream fields(line);
    std::string name;
    fields >> name;
    ASSERT_LT(row, p.expr_order.size());
    EXPECT_EQ(name, p.expr_order[row]);
    for (std::size_t m = 0; m < 12; ++m) {
      int v = -1;
      fields >> v;
      EXPECT_EQ(p.P(row, m), static_cast<double>(v)) << name << " column " << m;
    }
    ++row;
  }
  EXPECT_EQ(row, 7u);
}

TEST(PriorMatrix, HappinessOnesAtSixAndTwelve) {
  const auto& aus = bp4d_aus();
  const PriorMatrix p = build_prior_matrix(builtin_facs_table(), {"Happiness"}, aus);
  for (std::size_t m = 0; m < aus.size(); ++m) EXPECT_EQ(p.P(0, m), (aus[m] == 6 || aus[m] == 12) ? 1.0 : 0.0);
}

TEST(PriorMatrix, AngerDropsAuFiveOutsideSet) {
  const auto& aus = bp4d_aus();
  const PriorMatrix p = build_prior_matrix(builtin_facs_table(), {"Anger"}, aus);
  for (std::size_t m = 0; m < aus.size(); ++m) {
    EXPECT_EQ(p.P(0, m), (aus[m] == 4 || aus[m] == 7 || aus[m] == 23) ? 1.0 : 0.0);
  }
}

TEST(PriorMatrix, SurpriseOverEightAuSet) {
  const auto& aus = disfa_aus();
  const PriorMatrix p = build_prior_matrix(builtin_facs_table(), {"Surprise"}, aus);
  for (std::size_t m = 0; m < aus.size(); ++m) {
    EXPECT_EQ(p.P(0, m), (aus[m] == 1 || aus[m] == 2 || aus[m] == 26) ? 1.0 : 0.0);
  }
}

TEST(PriorMatrix, UnknownKeysRaiseLookupError) {
  EXPECT_THROW(build_prior_matrix(builtin_facs_table(), {"Joy"}, bp4d_aus()), LookupError);
  EXPECT_THROW(build_prior_matrix(builtin_facs_table(), {"Happiness"}, {6, 99}), LookupError);
}

TEST(PriorMatrix, ColumnPermutationEquivariance) {
  const FacsTable t = builtin_facs_table();
  Rng rng(3);
  const PriorMatrix base = build_prior_matrix(t, extended_expressions(), bp4d_aus());
  for (int trial = 0; trial < 20; ++trial) {
    std::vector<int> perm = bp4d_aus();
    rng.shuffle(perm);
    const PriorMatrix p = build_prior_matrix(t, extended_expressions(), perm);
    for (std::size_t k = 0; k < p.P.rows(); ++k)
      for (std::size_t m = 0; m < perm.size(); ++m)
        EXPECT_EQ(p.P(k, m), base.P(k, column_of(bp4d_aus(), perm[m])));
  }
}

TEST(NormalizeRows, ExamplesFromTheTable) {
  const auto& aus = bp4d_aus();
  const Tensor w = normalize_rows(build_prior_matrix(builtin_facs_table(), basic_expressions(), aus));
  EXPECT_EQ(w(0, column_of(aus, 6)), 0.5);
  EXPECT_EQ(w(0, column_of(aus, 12)), 0.5);
  for (std::size_t m = 0; m < aus.size(); ++m) EXPECT_EQ(w(2, m), 0.0);  // Neutral
  for (int id : {1, 2, 4, 7}) EXPECT_EQ(w(6, column_of(aus, id)), 0.25);
}

TEST(NormalizeRows, RowsSumToOneOrZero) {
  const FacsTable t = builtin_facs_table();
  for (const auto* aus : {&bp4d_aus(), &disfa_aus()}) {
    const Tensor w = normalize_rows(build_prior_matrix(t, extended_expressions(), *aus));
    for (std::size_t k = 0; k < w.rows(); ++k) {
      double s = 0.0;
      for (double v : w.row_span(k)) {
        EXPECT_GE(v, 0.0);
        s += v;
      }
      EXPECT_TRUE(s == 0.0 || std::abs(s - 1.0) < 1e-15) << k;
    }
  }
}

}  // namespace
}  // namespace ssm::facs
