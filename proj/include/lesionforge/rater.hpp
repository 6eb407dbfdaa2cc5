#pragma once

// Per-rater confusion matrices and rates, and Fleiss' kappa over rater
// groups, from a study export. Positive class is "real" (label 1).

#include <cstdint>
#include <iomanip>
#include <map>
#include <optional>
#include <set>
#include <sstream>
#include <string>
#include <vector>

#include <json.hpp>

#include "lesionforge/error.hpp"

namespace lesionforge {

struct ConfusionMatrix {
  std::uint64_t tp = 0, fp = 0, fn = 0, tn = 0;

  std::uint64_t total() const { return tp + fp + fn + tn; }
  bool operator==(const ConfusionMatrix&) const = default;
};

/// num/den kept as integers; an empty denominator is undefined.
struct Rate {
  std::uint64_t num = 0;
  std::uint64_t den = 0;

  bool defined() const { return den != 0; }
  std::optional<double> value() const {
    if (!den) return std::nullopt;
    return static_cast<double>(num) / static_cast<double>(den);
  }
  /// Thousandths, cut rather than rounded (0.6666 -> 666).
  std::optional<std::uint64_t> thousandths() const {
    if (!den) return std::nullopt;
    return num * 1000 / den;
  }
  std::string text() const {
    if (!den) return "undef";
    const std::uint64_t t = *thousandths();
    char buf[32];
    std::snprintf(buf, sizeof buf, "%llu.%03llu", static_cast<unsigned long long>(t / 1000), static_cast<unsigned long long>(t % 1000));
    return buf;
  }
  nlohmann::json to_json() const { return den ? nlohmann::json(static_cast<double>(*thousandths()) / 1000.0) : nlohmann::json(nullptr); }
};

struct RaterMetrics {
  Rate accuracy, tpr, tnr, fpr;
};

inline RaterMetrics rater_metrics(const ConfusionMatrix& cm) {
  return {{cm.tp + cm.tn, cm.total()}, {cm.tp, cm.tp + cm.fn}, {cm.tn, cm.fp + cm.tn}, {cm.fp, cm.fp + cm.tn}};
}

/// One (rater, item) answer as exported by the study service.
struct RatingRow {
  std::string participant;
  std::string role;
  std::string item;
  int truth = 0;  // 1 real, 0 fake
  int label = 0;
};

namespace detail {

inline int parse_class(const nlohmann::json& v, const std::string& what) {
  if (v.is_number_integer() && (v.get<int>() == 0 || v.get<int>() == 1)) return v.get<int>();
  if (v.is_string()) {
    const std::string s = v.get<std::string>();
    if (s == "1" || s == "real") return 1;
    if (s == "0" || s == "fake") return 0;
  }
  throw ArgumentError(what + " must be 0/1 or fake/real, got " + v.dump());
}

inline std::vector<std::string> split_csv(const std::string& line) {
  std::vector<std::string> out;
  std::string cell;
  std::istringstream in(line);
  while (std::getline(in, cell, ',')) out.push_back(cell);
  if (!line.empty() && line.back() == ',') out.emplace_back();
  return out;
}

}  // namespace detail

/// Reads an export as JSON lines or as CSV with a header naming at least
/// participant, role, item, truth and label.
inline std::vector<RatingRow> parse_ratings(const std::string& text) {
  std::vector<RatingRow> rows;
  std::istringstream in(text);
  std::string line;
  std::size_t first = text.find_first_not_of(" \t\r\n");
  if (first == std::string::npos) return rows;
  std::size_t lineno = 0;
  if (text[first] == '{') {
    while (std::getline(in, line)) {
      ++lineno;
      if (line.find_first_not_of(" \t\r") == std::string::npos) continue;
      try {
        const auto j = nlohmann::json::parse(line);
        rows.push_back({j.at("participant").get<std::string>(), j.at("role").get<std::string>(), j.at("item").get<std::string>(),
                        detail::parse_class(j.at("truth"), "truth"), detail::parse_class(j.at("label"), "label")});
      } catch (const nlohmann::json::exception& e) {
        throw ArgumentError("ratings line " + std::to_string(lineno) + ": " + e.what());
      }
    }
    return rows;
  }
  std::getline(in, line);
  if (!line.empty() && line.back() == '\r') line.pop_back();
  const auto header = detail::split_csv(line);
  std::map<std::string, std::size_t> col;
  for (std::size_t i = 0; i < header.size(); ++i) col[header[i]] = i;
  for (const char* need : {"participant", "role", "item", "truth", "label"})
    if (!col.count(need)) throw ArgumentError(std::string("ratings CSV lacks a '") + need + "' column");
  lineno = 1;
  while (std::getline(in, line)) {
    ++lineno;
    if (!line.empty() && line.back() == '\r') line.pop_back();
    if (line.empty()) continue;
    const auto cells = detail::split_csv(line);
    if (cells.size() != header.size()) throw ArgumentError("ratings line " + std::to_string(lineno) + " has " + std::to_string(cells.size()) + " fields");
    rows.push_back({cells[col["participant"]], cells[col["role"]], cells[col["item"]], detail::parse_class(cells[col["truth"]], "truth"),
                    detail::parse_class(cells[col["label"]], "label")});
  }
  return rows;
}

/// Confusion matrix of one rater's (item, label) answers against `truth`.
inline ConfusionMatrix confusion(const std::vector<std::pair<std::string, int>>& answers, const std::map<std::string, int>& truth) {
  ConfusionMatrix cm;
  for (const auto& [item, label] : answers) {
    auto it = truth.find(item);
    if (it == truth.end()) throw ArgumentError("no truth for item " + item);
    const bool real = it->second == 1, said_real = label == 1;
    if (real && said_real) ++cm.tp;
    else if (!real && said_real) ++cm.fp;
    else if (real) ++cm.fn;
    else ++cm.tn;
  }
  return cm;
}

// ---------------------------------------------------------------------------
// Fleiss' kappa

/// Items x categories rating counts; every row sums to the same n >= 2.
struct RatingsTable {
  std::vector<std::vector<std::uint64_t>> counts;

  std::size_t items() const { return counts.size(); }
  std::size_t categories() const { return counts.empty() ? 0 : counts[0].size(); }

  std::uint64_t raters() const {
    if (counts.empty()) throw ArgumentError("ratings table has no items");
    std::uint64_t n = 0;
    for (auto c : counts[0]) n += c;
    for (const auto& row : counts) {
      if (row.size() != counts[0].size()) throw ShapeError("ratings table rows differ in category count");
      std::uint64_t s = 0;
      for (auto c : row) s += c;
      if (s != n) throw ArgumentError("ratings table rows must all sum to the number of raters");
    }
    if (n < 2) throw ArgumentError("Fleiss' kappa needs at least 2 ratings per item");
    return n;
  }

  bool operator==(const RatingsTable&) const = default;
};

struct KappaResult {
  std::optional<double> kappa;  // empty when chance agreement is 1
  std::size_t n_items = 0;
  std::uint64_t n_raters = 0;
  std::vector<double> proportions;

  nlohmann::json to_json() const {
    return {{"kappa", kappa ? nlohmann::json(*kappa) : nlohmann::json(nullptr)},
            {"items", n_items},
            {"raters", n_raters},
            {"proportions", proportions}};
  }
};

/// Evaluated as one ratio of integers,
///   kappa = (A*D - C*B) / (B*(D - C)),
/// with A = sum n_ij^2 - N n, B = N n (n-1), C = sum_j c_j^2, D = (N n)^2,
/// so the only rounding is the final division.
inline KappaResult fleiss_kappa(const RatingsTable& table) {
  const std::uint64_t n = table.raters();
  const std::size_t N = table.items(), k = table.categories();
  using Wide = __int128;
  Wide sum_sq = 0;
  std::vector<Wide> col(k, 0);
  for (const auto& row : table.counts)
    for (std::size_t j = 0; j < k; ++j) {
      sum_sq += Wide(row[j]) * row[j];
      col[j] += row[j];
    }
  const Wide total = Wide(N) * n;
  const Wide A = sum_sq - total, B = total * (n - 1), D = total * total;
  Wide C = 0;
  for (Wide c : col) C += c * c;

  KappaResult r;
  r.n_items = N;
  r.n_raters = n;
  for (Wide c : col) r.proportions.push_back(static_cast<double>(c) / static_cast<double>(total));
  if (C == D) return r;
  const Wide num = A * D - C * B, den = B * (D - C);
  const Wide exact = Wide(1) << 53;  // both sides convert without rounding
  if (num < exact && -num < exact && den < exact) r.kappa = static_cast<double>(num) / static_cast<double>(den);
  else r.kappa = static_cast<double>(static_cast<long double>(num) / static_cast<long double>(den));
  return r;
}

// ---------------------------------------------------------------------------
// Reports

struct RaterSummary {
  std::string participant;
  std::string role;
  std::string name;  // role plus rank within the role, e.g. "ED2"
  ConfusionMatrix cm;
  RaterMetrics metrics;
};

enum class ItemSubset { kReal, kFake, kAll };
inline const char* to_string(ItemSubset s) { return s == ItemSubset::kReal ? "real" : s == ItemSubset::kFake ? "fake" : "all"; }

struct KappaCell {
  KappaResult result;
  std::size_t dropped = 0;  // items not rated by every rater of the group
};

struct KappaGrid {
  std::vector<std::string> groups;
  std::map<std::string, std::map<std::string, KappaCell>> cells;  // group -> subset -> cell
  std::vector<std::string> skipped;                               // groups with fewer than 2 raters
};

inline std::vector<RaterSummary> rater_summaries(const std::vector<RatingRow>& rows) {
  std::vector<std::string> order;
  std::map<std::string, std::string> role;
  std::map<std::string, std::vector<std::pair<std::string, int>>> answers;
  std::map<std::string, int> truth;
  for (const auto& r : rows) {
    if (!role.count(r.participant)) {
      order.push_back(r.participant);
      role[r.participant] = r.role;
    } else if (role[r.participant] != r.role) {
      throw ArgumentError("participant " + r.participant + " appears with two roles");
    }
    auto [it, fresh] = truth.emplace(r.item, r.truth);
    if (!fresh && it->second != r.truth) throw ArgumentError("item " + r.item + " has conflicting truth values");
    answers[r.participant].emplace_back(r.item, r.label);
  }
  std::map<std::string, int> rank;
  std::vector<RaterSummary> out;
  for (const auto& p : order) {
    const ConfusionMatrix cm = confusion(answers[p], truth);
    out.push_back({p, role[p], role[p] + std::to_string(++rank[role[p]]), cm, rater_metrics(cm)});
  }
  return out;
}

/// Table for raters `who` over items of `subset`; items that any of them did
/// not rate are dropped and counted.
inline std::pair<RatingsTable, std::size_t> ratings_table(const std::vector<RatingRow>& rows, const std::vector<std::string>& who,
                                                          ItemSubset subset) {
  const std::set<std::string> members(who.begin(), who.end());
  std::map<std::string, std::map<std::string, int>> by_item;  // item -> rater -> label
  std::vector<std::string> items;
  for (const auto& r : rows) {
    if (subset == ItemSubset::kReal && r.truth != 1) continue;
    if (subset == ItemSubset::kFake && r.truth != 0) continue;
    if (!by_item.count(r.item)) items.push_back(r.item);
    auto& slot = by_item[r.item];
    if (members.count(r.participant)) slot[r.participant] = r.label;
  }
  std::sort(items.begin(), items.end());
  RatingsTable t;
  std::size_t dropped = 0;
  for (const auto& item : items) {
    const auto& got = by_item[item];
    if (got.size() != members.size()) {
      ++dropped;
      continue;
    }
    std::vector<std::uint64_t> row(2, 0);  // columns: fake, real
    for (const auto& [rater, label] : got) ++row[label];
    t.counts.push_back(row);
  }
  return {t, dropped};
}

/// Kappa over {each group, All} x {real, fake, all}. `groups` maps a group
/// name to rater ids; empty means one group per role.
inline KappaGrid kappa_report(const std::vector<RatingRow>& rows, std::map<std::string, std::vector<std::string>> groups = {}) {
  const bool automatic = groups.empty();
  std::vector<std::string> everyone;
  if (automatic) {
    std::map<std::string, std::set<std::string>> seen;
    for (const auto& r : rows)
      if (seen[r.role].insert(r.participant).second) groups[r.role].push_back(r.participant);
  }
  {
    std::set<std::string> seen;
    for (const auto& r : rows)
      if (seen.insert(r.participant).second) everyone.push_back(r.participant);
  }
  KappaGrid grid;
  auto add = [&](const std::string& name, const std::vector<std::string>& who) {
    if (who.size() < 2) {
      if (!automatic) throw ArgumentError("group " + name + " has fewer than 2 raters");
      grid.skipped.push_back(name);
      return;
    }
    grid.groups.push_back(name);
    for (auto subset : {ItemSubset::kReal, ItemSubset::kFake, ItemSubset::kAll}) {
      auto [table, dropped] = ratings_table(rows, who, subset);
      KappaCell cell;
      cell.dropped = dropped;
      if (table.items()) cell.result = fleiss_kappa(table);
      else cell.result.n_raters = who.size();
      grid.cells[name][to_string(subset)] = cell;
    }
  };
  for (const auto& [name, who] : groups) add(name, who);
  if (automatic && !groups.count("All")) add("All", everyone);
  return grid;
}

struct RaterReport {
  std::vector<RaterSummary> raters;
  KappaGrid kappa;
  Rate fake_called_real;  // pooled over raters
  Rate real_called_fake;

  nlohmann::json to_json() const {
    nlohmann::json rs = nlohmann::json::array();
    for (const auto& r : raters)
      rs.push_back({{"participant", r.participant},
                    {"role", r.role},
                    {"name", r.name},
                    {"tp", r.cm.tp},
                    {"fp", r.cm.fp},
                    {"fn", r.cm.fn},
                    {"tn", r.cm.tn},
                    {"accuracy", r.metrics.accuracy.to_json()},
                    {"tpr", r.metrics.tpr.to_json()},
                    {"tnr", r.metrics.tnr.to_json()},
                    {"fpr", r.metrics.fpr.to_json()}});
    nlohmann::json cells = nlohmann::json::object();
    for (const auto& g : kappa.groups)
      for (const auto& [subset, cell] : kappa.cells.at(g)) {
        auto j = cell.result.to_json();
        j["dropped"] = cell.dropped;
        cells[g][subset] = j;
      }
    auto pooled = [](const Rate& r) {
      return nlohmann::json{{"count", r.num}, {"of", r.den}, {"rate", r.value() ? nlohmann::json(*r.value()) : nlohmann::json(nullptr)}};
    };
    return {{"raters", rs},
            {"kappa", {{"groups", kappa.groups}, {"cells", cells}, {"skipped_groups", kappa.skipped}}},
            {"pooled", {{"fake_called_real", pooled(fake_called_real)}, {"real_called_fake", pooled(real_called_fake)}}}};
  }

  /// Two plain-text tables: per-rater counts and rates, then kappa by group.
  std::string to_text() const {
    std::ostringstream os;
    auto cellw = [&](const std::string& s) { os << std::setw(9) << s; };
    os << std::left << std::setw(9) << "" << std::right;
    for (const auto& r : raters) cellw(r.name);
    os << '\n';
    auto row = [&](const char* label, auto get) {
      os << std::left << std::setw(9) << label << std::right;
      for (const auto& r : raters) cellw(get(r));
      os << '\n';
    };
    row("TP", [](const RaterSummary& r) { return std::to_string(r.cm.tp); });
    row("FP", [](const RaterSummary& r) { return std::to_string(r.cm.fp); });
    row("FN", [](const RaterSummary& r) { return std::to_string(r.cm.fn); });
    row("TN", [](const RaterSummary& r) { return std::to_string(r.cm.tn); });
    row("ACC", [](const RaterSummary& r) { return r.metrics.accuracy.text(); });
    row("TPR", [](const RaterSummary& r) { return r.metrics.tpr.text(); });
    row("TNR", [](const RaterSummary& r) { return r.metrics.tnr.text(); });
    os << '\n' << std::left << std::setw(16) << "Fleiss' kappa" << std::right;
    for (const auto& g : kappa.groups) os << std::setw(10) << g;
    os << '\n';
    for (const char* subset : {"real", "fake", "all"}) {
      os << std::left << std::setw(16) << (std::string(subset) + " items") << std::right;
      for (const auto& g : kappa.groups) {
        const auto& k = kappa.cells.at(g).at(subset).result.kappa;
        std::ostringstream v;
        if (k) v << std::fixed << std::setprecision(4) << *k;
        else v << "undef";
        os << std::setw(10) << v.str();
      }
      os << '\n';
    }
    os << "\nfakes called real: " << fake_called_real.num << "/" << fake_called_real.den;
    os << "\nreals called fake: " << real_called_fake.num << "/" << real_called_fake.den << '\n';
    return os.str();
  }
};

inline RaterReport rater_report(const std::vector<RatingRow>& rows) {
  RaterReport rep;
  rep.raters = rater_summaries(rows);
  rep.kappa = kappa_report(rows);
  for (const auto& r : rep.raters) {
    rep.fake_called_real.num += r.cm.fp;
    rep.fake_called_real.den += r.cm.fp + r.cm.tn;
    rep.real_called_fake.num += r.cm.fn;
    rep.real_called_fake.den += r.cm.tp + r.cm.fn;
  }
  return rep;
}

}  // namespace lesionforge
