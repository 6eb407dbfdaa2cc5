#include <gtest/gtest.h>

#include <random>

#include "lesionforge/random.hpp"
#include "lesionforge/rater.hpp"
#include "oracles.hpp"

using namespace lesionforge;

namespace {

RatingsTable table_from_labels(const std::vector<std::vector<int>>& labels, int categories) {
  RatingsTable t;
  for (const auto& item : labels) {
    std::vector<std::uint64_t> row(categories, 0);
    for (int l : item) ++row[l];
    t.counts.push_back(row);
  }
  return t;
}

std::vector<std::vector<int>> random_labels(Rng& rng, std::size_t items, std::size_t raters, int categories) {
  std::vector<std::vector<int>> labels(items, std::vector<int>(raters));
  for (auto& item : labels)
    for (int& l : item) l = static_cast<int>(rng() % categories);
  return labels;
}

}  // namespace

TEST(RaterMetrics, PublishedColumnsReproduce) {
  for (const auto& c : oracle::voter_columns()) {
    const ConfusionMatrix cm{c.tp, c.fp, c.fn, c.tn};
    EXPECT_EQ(cm.tp + cm.fn, 50u) << c.name;
    EXPECT_EQ(cm.fp + cm.tn, 30u) << c.name;
    const auto m = rater_metrics(cm);
    EXPECT_NEAR(*m.accuracy.thousandths() / 1000.0, c.acc, 0.0005) << c.name;
    EXPECT_NEAR(*m.tpr.thousandths() / 1000.0, c.tpr, 0.0005) << c.name;
    EXPECT_NEAR(*m.tnr.thousandths() / 1000.0, c.tnr, 0.0005) << c.name;
  }
  const auto dle3 = rater_metrics({36, 9, 14, 21});
  EXPECT_EQ(dle3.accuracy.text(), "0.712");
  EXPECT_EQ(dle3.tpr.text(), "0.720");
  EXPECT_EQ(dle3.tnr.text(), "0.700");
  EXPECT_EQ(rater_metrics({50, 26, 0, 4}).tnr.text(), "0.133");
  EXPECT_DOUBLE_EQ(*rater_metrics({50, 26, 0, 4}).fpr.value(), 26.0 / 30.0);
}

TEST(RaterMetrics, UndefinedRatesAreMarked) {
  const auto m = rater_metrics({10, 0, 5, 0});
  EXPECT_FALSE(m.tnr.defined());
  EXPECT_FALSE(m.fpr.value().has_value());
  EXPECT_EQ(m.tnr.text(), "undef");
  EXPECT_TRUE(m.tnr.to_json().is_null());
  EXPECT_FALSE(rater_metrics({}).accuracy.defined());
}

TEST(Confusion, Examples) {
  std::map<std::string, int> truth;
  std::vector<std::pair<std::string, int>> answers, correct;
  for (int i = 0; i < 50; ++i) {
    truth["r" + std::to_string(i)] = 1;
    answers.emplace_back("r" + std::to_string(i), 1);
    correct.emplace_back("r" + std::to_string(i), 1);
  }
  for (int i = 0; i < 30; ++i) {
    truth["f" + std::to_string(i)] = 0;
    answers.emplace_back("f" + std::to_string(i), i < 26 ? 1 : 0);
    correct.emplace_back("f" + std::to_string(i), 0);
  }
  EXPECT_EQ(confusion(answers, truth), (ConfusionMatrix{50, 26, 0, 4}));
  EXPECT_EQ(confusion(correct, truth), (ConfusionMatrix{50, 0, 0, 30}));
  EXPECT_EQ(confusion({}, truth), ConfusionMatrix{});
  EXPECT_THROW(confusion({{"x", 1}}, truth), ArgumentError);
}

TEST(FleissKappa, HandDerivedCases) {
  EXPECT_EQ(*fleiss_kappa({{{2, 0}, {0, 2}}}).kappa, 1.0);
  // (R,R), (R,F), (F,F): P = 2/3, Pe = 1/2
  EXPECT_EQ(*fleiss_kappa({{{0, 2}, {1, 1}, {2, 0}}}).kappa, 1.0 / 3.0);
  EXPECT_EQ(*fleiss_kappa({{{1, 1}, {1, 1}, {1, 1}}}).kappa, -1.0);
  const auto all_one = fleiss_kappa({{{3, 0}, {3, 0}}});
  EXPECT_FALSE(all_one.kappa.has_value());
  EXPECT_TRUE(all_one.to_json()["kappa"].is_null());
  EXPECT_EQ(all_one.proportions, (std::vector<double>{1.0, 0.0}));

  EXPECT_THROW(fleiss_kappa({{{2, 0}, {1, 0}}}), ArgumentError);
  EXPECT_THROW(fleiss_kappa({{{1, 0}, {0, 1}}}), ArgumentError);
  EXPECT_THROW(fleiss_kappa({}), ArgumentError);
}

TEST(FleissKappa, AgreesWithPairCountingOracle) {
  Rng rng = make_rng(21);
  for (int t = 0; t < 100; ++t) {
    const std::size_t items = 1 + rng() % 80, raters = 2 + rng() % 7;
    const int cats = 2 + static_cast<int>(rng() % 3);
    auto labels = random_labels(rng, items, raters, cats);
    const auto r = fleiss_kappa(table_from_labels(labels, cats));
    if (!r.kappa) continue;
    EXPECT_NEAR(*r.kappa, oracle::fleiss_kappa_pairs(labels, cats), 1e-12) << t;
    EXPECT_LE(*r.kappa, 1.0);
  }
}

TEST(FleissKappa, InvariantUnderCategorySwap) {
  Rng rng = make_rng(5);
  for (int t = 0; t < 50; ++t) {
    auto table = table_from_labels(random_labels(rng, 40, 8, 2), 2);
    auto swapped = table;
    for (auto& row : swapped.counts) std::swap(row[0], row[1]);
    const auto a = fleiss_kappa(table), b = fleiss_kappa(swapped);
    ASSERT_EQ(a.kappa.has_value(), b.kappa.has_value());
    if (a.kappa) EXPECT_EQ(*a.kappa, *b.kappa);
  }
}

TEST(KappaReport, UnanimousGroupGivesOne) {
  std::vector<RatingRow> rows;
  for (const char* p : {"a", "b", "c"})
    for (int i = 0; i < 10; ++i) {
      const bool real = i < 6;
      // items alternate in what everybody answers, so both categories occur
      rows.push_back({p, "ED", "i" + std::to_string(i), real ? 1 : 0, i % 2});
    }
  for (const char* p : {"d", "e"})
    for (int i = 0; i < 10; ++i) rows.push_back({p, "DLE", "i" + std::to_string(i), i < 6 ? 1 : 0, static_cast<int>((i * 7 + p[0]) % 2)});
  const auto grid = kappa_report(rows);
  for (const char* subset : {"real", "fake", "all"}) EXPECT_EQ(*grid.cells.at("ED").at(subset).result.kappa, 1.0) << subset;
  EXPECT_EQ(grid.groups, (std::vector<std::string>{"DLE", "ED", "All"}));
}

TEST(KappaReport, AllItemsTableIsRealPlusFake) {
  std::vector<RatingRow> rows;
  Rng rng = make_rng(8);
  for (int p = 0; p < 5; ++p)
    for (int i = 0; i < 80; ++i) rows.push_back({"p" + std::to_string(p), "DLE", "i" + std::to_string(100 + i), i < 50, static_cast<int>(rng() % 2)});
  std::vector<std::string> who = {"p0", "p1", "p2", "p3", "p4"};
  auto all = ratings_table(rows, who, ItemSubset::kAll).first;
  auto real = ratings_table(rows, who, ItemSubset::kReal).first, fake = ratings_table(rows, who, ItemSubset::kFake).first;
  auto joined = real.counts;
  joined.insert(joined.end(), fake.counts.begin(), fake.counts.end());
  EXPECT_EQ(all.counts, joined);  // real items sort before fake ones here
}

TEST(KappaReport, RandomExportMatchesOracle) {
  Rng rng = make_rng(30);
  const std::vector<std::string> roles = {"DLE", "DLE", "DLE", "DLE", "DLE", "ED", "ED", "ED"};
  std::vector<RatingRow> rows;
  std::vector<std::vector<int>> labels(80, std::vector<int>(8));  // item x rater
  for (std::size_t p = 0; p < 8; ++p)
    for (std::size_t i = 0; i < 80; ++i) {
      labels[i][p] = static_cast<int>(rng() % 2);
      rows.push_back({"p" + std::to_string(p), roles[p], "i" + std::to_string(100 + i), i < 50 ? 1 : 0, labels[i][p]});
    }
  const auto grid = kappa_report(rows);
  auto expect = [&](const std::string& group, std::size_t r0, std::size_t r1, const std::string& subset, std::size_t i0, std::size_t i1) {
    std::vector<std::vector<int>> sub;
    for (std::size_t i = i0; i < i1; ++i) sub.emplace_back(labels[i].begin() + r0, labels[i].begin() + r1);
    EXPECT_NEAR(*grid.cells.at(group).at(subset).result.kappa, oracle::fleiss_kappa_pairs(sub, 2), 1e-12) << group << " " << subset;
    EXPECT_EQ(grid.cells.at(group).at(subset).dropped, 0u);
  };
  for (auto [g, r0, r1] : {std::tuple{"DLE", 0, 5}, {"ED", 5, 8}, {"All", 0, 8}}) {
    expect(g, r0, r1, "real", 0, 50);
    expect(g, r0, r1, "fake", 50, 80);
    expect(g, r0, r1, "all", 0, 80);
  }
}

TEST(KappaReport, GroupsAndDrops) {
  auto rows = oracle::rows_for("a", "ED", 30, 10);
  auto b = oracle::rows_for("b", "ED", 25, 12, 3);
  b.pop_back();  // b skipped one fake item
  rows.insert(rows.end(), b.begin(), b.end());
  auto c = oracle::rows_for("c", "other", 20, 5);
  rows.insert(rows.end(), c.begin(), c.end());
  const auto grid = kappa_report(rows);
  EXPECT_EQ(grid.skipped, (std::vector<std::string>{"other"}));
  EXPECT_EQ(grid.cells.at("ED").at("fake").dropped, 1u);
  EXPECT_EQ(grid.cells.at("ED").at("all").result.n_items, 79u);
  EXPECT_THROW(kappa_report(rows, {{"solo", {"a"}}}), ArgumentError);
  EXPECT_NO_THROW(kappa_report(rows, {{"pair", {"a", "c"}}}));
}

TEST(RaterReport, PublishedColumnsEndToEnd) {
  std::vector<RatingRow> rows;
  std::size_t shift = 0;
  for (const auto& c : oracle::voter_columns()) {
    const std::string role = std::string(c.name).substr(0, std::string(c.name).size() - 1);
    auto r = oracle::rows_for(std::string("id-") + c.name, role, c.tp, c.fp, shift += 7);
    rows.insert(rows.end(), r.begin(), r.end());
  }
  const auto rep = rater_report(rows);
  ASSERT_EQ(rep.raters.size(), 8u);
  for (std::size_t i = 0; i < 8; ++i) {
    const auto& c = oracle::voter_columns()[i];
    EXPECT_EQ(rep.raters[i].name, c.name);
    EXPECT_EQ(rep.raters[i].cm, (ConfusionMatrix{c.tp, c.fp, c.fn, c.tn}));
  }
  EXPECT_EQ(rep.fake_called_real.num, 127u);
  EXPECT_EQ(rep.fake_called_real.den, 240u);
  EXPECT_EQ(rep.real_called_fake.num, 141u);
  EXPECT_EQ(rep.real_called_fake.den, 400u);
  const auto text = rep.to_text();
  EXPECT_NE(text.find("DLE1"), std::string::npos);
  EXPECT_NE(text.find("0.712"), std::string::npos);
  EXPECT_EQ(rep.to_json().dump(), rater_report(rows).to_json().dump());
  EXPECT_EQ(rep.to_json()["raters"][0]["tnr"], 0.133);
}

TEST(ParseRatings, CsvAndJsonLinesAgree) {
  const std::string csv = "participant,role,item,truth,label,revisions\np1,ED,a,1,0,2\np1,ED,b,fake,real,0\n";
  const std::string jsonl = R"({"participant":"p1","role":"ED","item":"a","truth":1,"label":0})" "\n"
                            R"({"participant":"p1","role":"ED","item":"b","truth":"fake","label":1})" "\n";
  const auto a = parse_ratings(csv), b = parse_ratings(jsonl);
  ASSERT_EQ(a.size(), 2u);
  ASSERT_EQ(b.size(), 2u);
  for (std::size_t i = 0; i < 2; ++i) {
    EXPECT_EQ(a[i].item, b[i].item);
    EXPECT_EQ(a[i].truth, b[i].truth);
    EXPECT_EQ(a[i].label, b[i].label);
  }
  EXPECT_EQ(a[1].label, 1);
  EXPECT_TRUE(parse_ratings("").empty());
  EXPECT_THROW(parse_ratings("participant,item,truth,label\n"), ArgumentError);
  EXPECT_THROW(parse_ratings("participant,role,item,truth,label\np,ED,a,2,0\n"), ArgumentError);
  EXPECT_THROW(parse_ratings(R"({"participant":"p"})"), ArgumentError);
}
