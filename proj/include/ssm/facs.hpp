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

#include <algorithm>
#include <cctype>
#include <filesystem>
#include <fstream>
#include <set>
#include <sstream>
#include <string>
#include <string_view>
#include <vector>

#include "ssm/error.hpp"
#include "ssm/numerics/tensor.hpp"

namespace ssm::facs {

struct ActionUnitDef {
  int au_id = 0;
  std::string description;
};

struct ExpressionDef {
  std::string name;
  std::vector<int> au_combination;
  std::string compound_description;
  std::string standalone_description;
  std::string word_description;
};

/// AU descriptions and expression/AU correspondences.
class FacsTable {
 public:
  FacsTable() = default;
  FacsTable(std::vector<ActionUnitDef> aus, std::vector<ExpressionDef> expressions)
      : aus_(std::move(aus)), expressions_(std::move(expressions)) {
    validate();
  }

  const std::vector<ActionUnitDef>& action_units() const noexcept { return aus_; }
  const std::vector<ExpressionDef>& expressions() const noexcept { return expressions_; }

  bool has_au(int id) const {
    return std::any_of(aus_.begin(), aus_.end(), [id](const ActionUnitDef& a) { return a.au_id == id; });
  }

  const ActionUnitDef& au(int id) const {
    for (const auto& a : aus_)
      if (a.au_id == id) return a;
    throw LookupError("unknown action unit AU" + std::to_string(id));
  }

  const ExpressionDef& expression(std::string_view name) const {
    for (const auto& e : expressions_)
      if (e.name == name) return e;
    throw LookupError("unknown expression '" + std::string(name) + "'");
  }

 private:
  void validate() const {
    std::set<int> ids;
    for (const auto& a : aus_) {
      if (!ids.insert(a.au_id).second) throw ConfigError("duplicate AU id " + std::to_string(a.au_id));
      if (a.description.empty()) throw ConfigError("AU" + std::to_string(a.au_id) + " has an empty description");
    }
    std::set<std::string> names;
    for (const auto& e : expressions_) {
      if (!names.insert(e.name).second) throw ConfigError("duplicate expression " + e.name);
      for (int id : e.au_combination) {
        if (!ids.count(id)) throw LookupError("expression " + e.name + " references unknown AU" + std::to_string(id));
      }
    }
  }

  std::vector<ActionUnitDef> aus_;
  std::vector<ExpressionDef> expressions_;
};

inline const std::vector<int>& bp4d_aus() {
  static const std::vector<int> v{1, 2, 4, 6, 7, 10, 12, 14, 15, 17, 23, 24};
  return v;
}
inline const std::vector<int>& disfa_aus() {
  static const std::vector<int> v{1, 2, 4, 6, 9, 12, 25, 26};
  return v;
}
/// Seven-class label space (DFEW / FERV39K style).
inline const std::vector<std::string>& basic_expressions() {
  static const std::vector<std::string> v{"Happiness", "Sadness", "Neutral", "Anger",
                                          "Surprise",  "Disgust", "Fear"};
  return v;
}
/// Eleven-class label space (MAFW style).
inline const std::vector<std::string>& extended_expressions() {
  static const std::vector<std::string> v{"Happiness", "Sadness", "Neutral", "Anger",   "Surprise",      "Disgust",
                                          "Fear",      "Contempt", "Anxiety", "Helplessness", "Disappointment"};
  return v;
}

namespace detail {

inline std::string lowercase(std::string s) {
  for (char& c : s) c = static_cast<char>(std::tolower(static_cast<unsigned char>(c)));
  return s;
}

inline ExpressionDef expression(std::string name, std::vector<int> aus, std::string compound) {
  std::string word = lowercase(name);
  return ExpressionDef{std::move(name), std::move(aus), std::move(compound), "a facial expression of " + word, word};
}

}  // namespace detail

/// The built-in AU/expression description table.
inline FacsTable builtin_facs_table() {
  std::vector<ActionUnitDef> aus{
      {1, "inner brow raiser"},  {2, "outer brow raiser"},    {4, "brow lowerer"},  {5, "upper lid raiser"},
      {6, "cheek raiser"},       {7, "lid tightener"},        {9, "nose wrinkler"}, {10, "upper lip raiser"},
      {12, "lip corner puller"}, {14, "dimpler"},             {15, "lip corner depressor"},
      {17, "chin raiser"},       {20, "lip stretcher"},       {23, "lip tightener"}, {24, "lip pressor"},
      {25, "lips part"},         {26, "jaw drop"},
  };
  using detail::expression;
  std::vector<ExpressionDef> expressions{
      expression("Happiness", {6, 12}, "cheek raiser, lip corner puller"),
      expression("Sadness", {1, 4, 15}, "inner brow raiser, brow lowerer, lip corner depressor"),
      expression("Neutral", {}, "relaxed facial muscles, no significant action units"),
      expression("Anger", {4, 5, 7, 23}, "brow lowerer, upper lid raiser, lid tightener, lip tightener"),
      expression("Surprise", {1, 2, 5, 26}, "inner brow raiser, outer brow raiser, upper lid raiser, jaw drop"),
      expression("Disgust", {9, 10, 15}, "nose wrinkler, upper lip raiser, lip corner depressor"),
      expression("Fear", {1, 2, 4, 5, 7, 20, 26},
                 "inner brow raiser, outer brow raiser, brow lowerer, upper lid raiser, lid tightener, lip "
                 "stretcher, jaw drop"),
      expression("Contempt", {12, 14}, "lip corner puller, dimpler"),
      expression("Anxiety", {1, 4, 20, 25}, "inner brow raiser, brow lowerer, lip stretcher, lips part"),
      expression("Helplessness", {1, 4, 15, 26}, "inner brow raiser, brow lowerer, lip corner depressor, jaw drop"),
      expression("Disappointment", {1, 4, 15, 25},
                 "inner brow raiser, brow lowerer, slight lip corner depressor, lips part"),
  };
  return FacsTable(std::move(aus), std::move(expressions));
}

// ---------------------------------------------------------------------------
// Plain-text table format. One record per line, tab-separated:
//   AU    <id>    <description>
//   EXPR  <name>  <ids joined by '+', or None>  <compound>  <standalone>  <words>
// Blank lines and lines starting with '#' are ignored.

inline std::string to_tsv(const FacsTable& table) {
  std::ostringstream out;
  out << "# kind\tlabel\tcombination\tcompound\tstandalone\twords\n";
  for (const auto& a : table.action_units()) out << "AU\t" << a.au_id << '\t' << a.description << '\n';
  for (const auto& e : table.expressions()) {
    out << "EXPR\t" << e.name << '\t';
    if (e.au_combination.empty()) {
      out << "None";
    } else {
      for (std::size_t i = 0; i < e.au_combination.size(); ++i) out << (i ? "+" : "") << e.au_combination[i];
    }
    out << '\t' << e.compound_description << '\t' << e.standalone_description << '\t' << e.word_description << '\n';
  }
  return out.str();
}

inline FacsTable parse_tsv(std::string_view text) {
  std::vector<ActionUnitDef> aus;
  std::vector<ExpressionDef> expressions;
  std::istringstream in{std::string(text)};
  std::string line;
  std::size_t lineno = 0;
  while (std::getline(in, line)) {
    ++lineno;
    if (!line.empty() && line.back() == '\r') line.pop_back();
    if (line.empty() || line.front() == '#') continue;
    std::vector<std::string> fields;
    std::size_t start = 0;
    for (std::size_t pos; (pos = line.find('\t', start)) != std::string::npos; start = pos + 1)
      fields.push_back(line.substr(start, pos - start));
    fields.push_back(line.substr(start));
    auto fail = [lineno](const std::string& what) {
      return ConfigError("FACS table line " + std::to_string(lineno) + ": " + what);
    };
    try {
      if (fields[0] == "AU") {
        if (fields.size() != 3) throw fail("AU record needs 3 fields");
        aus.push_back({std::stoi(fields[1]), fields[2]});
      } else if (fields[0] == "EXPR") {
        if (fields.size() != 6) throw fail("EXPR record needs 6 fields");
        ExpressionDef e;
        e.name = fields[1];
        if (fields[2] != "None") {
          std::istringstream ids(fields[2]);
          for (std::string tok; std::getline(ids, tok, '+');) e.au_combination.push_back(std::stoi(tok));
        }
        e.compound_description = fields[3];
        e.standalone_description = fields[4];
        e.word_description = fields[5];
        expressions.push_back(std::move(e));
      } else {
        throw fail("unknown record kind '" + fields[0] + "'");
      }
    } catch (const std::invalid_argument&) {
      throw fail("malformed AU id");
    } catch (const std::out_of_range&) {
      throw fail("AU id out of range");
    }
  }
  return FacsTable(std::move(aus), std::move(expressions));
}

inline FacsTable load_table_file(const std::filesystem::path& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw IoError("cannot open FACS table " + path.string());
  std::ostringstream buf;
  buf << in.rdbuf();
  return parse_tsv(buf.str());
}

// ---------------------------------------------------------------------------

/// Binary expression x AU correspondence restricted to a dataset's AU list.
struct PriorMatrix {
  Tensor P;  // K x M, entries in {0, 1}
  std::vector<std::string> expr_order;
  std::vector<int> au_order;
};

inline PriorMatrix build_prior_matrix(const FacsTable& table, const std::vector<std::string>& expr_list,
                                      const std::vector<int>& au_list) {
  for (int id : au_list) (void)table.au(id);
  PriorMatrix prior{Tensor::matrix(expr_list.size(), au_list.size()), expr_list, au_list};
  for (std::size_t k = 0; k < expr_list.size(); ++k) {
    const ExpressionDef& e = table.expression(expr_list[k]);
    for (std::size_t m = 0; m < au_list.size(); ++m) {
      const bool active = std::find(e.au_combination.begin(), e.au_combination.end(), au_list[m]) !=
                          e.au_combination.end();
      prior.P(k, m) = active ? 1.0 : 0.0;
    }
  }
  return prior;
}

/// Row-normalized prior. All-zero rows (Neutral) stay all-zero.
inline Tensor normalize_rows(const PriorMatrix& prior) {
  Tensor w = prior.P;
  for (std::size_t k = 0; k < w.rows(); ++k) {
    double s = 0.0;
    for (double v : w.row_span(k)) s += v;
    if (s == 0.0) continue;
    for (double& v : w.row_span(k)) v /= s;
  }
  return w;
}

}  // namespace ssm::facs
