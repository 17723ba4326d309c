#include <algorithm>
#include <cmath>
#include <cstdio>
#include <fstream>
#include <random>
#include <sstream>

#include "doctest.h"
#include "json.hpp"
#include "kse/common.hpp"
#include "kse/metrics.hpp"

using kse::Error;
using namespace kse::metrics;

namespace {

CaseOutcome single_edit_case(double p_target, double p_old) {
  CaseOutcome c;
  c.edit.push_back({p_target, p_old});
  return c;
}

// Independent recount with integer arithmetic over the flattened pairs,
// assuming one object per case (inner mean degenerates to the pair itself).
double fraction_oracle(const std::vector<CaseOutcome>& outcomes, char which) {
  long hits = 0, total = 0;
  for (const auto& c : outcomes) {
    const std::vector<std::vector<ProbPair>>* groups = nullptr;
    if (which == 'e') {
      for (const auto& p : c.edit) {
        hits += p.p_target > p.p_old;
        ++total;
      }
      continue;
    }
    groups = which == 'g' ? &c.paraphrase : &c.neighborhood;
    for (const auto& g : *groups)
      for (const auto& p : g) {
        hits += which == 'g' ? p.p_target > p.p_old : p.p_target < p.p_old;
        ++total;
      }
  }
  return 100.0 * static_cast<double>(hits) / static_cast<double>(total);
}

std::vector<CaseOutcome> random_outcomes(std::mt19937_64& rng, std::size_t n_cases) {
  std::uniform_real_distribution<double> prob(0.0, 1.0);
  std::uniform_int_distribution<std::size_t> howmany(1, 3);
  std::vector<CaseOutcome> out;
  for (std::size_t i = 0; i < n_cases; ++i) {
    CaseOutcome c;
    c.case_id = "case-" + std::to_string(i);
    c.edit.push_back({prob(rng), prob(rng)});
    c.paraphrase.resize(1);
    c.neighborhood.resize(1);
    for (std::size_t k = howmany(rng); k-- > 0;)
      c.paraphrase[0].push_back({prob(rng), prob(rng)});
    for (std::size_t k = howmany(rng); k-- > 0;)
      c.neighborhood[0].push_back({prob(rng), prob(rng)});
    out.push_back(std::move(c));
  }
  return out;
}

}  // namespace

TEST_CASE("efficacy counts strict wins on the edit prompt") {
  std::vector<CaseOutcome> outcomes = {single_edit_case(0.6, 0.2),
                                       single_edit_case(0.1, 0.3),
                                       single_edit_case(0.5, 0.4)};
  CHECK(efficacy(outcomes) == doctest::Approx(66.67).epsilon(1e-4));

  outcomes = {single_edit_case(0.6, 0.2), single_edit_case(0.9, 0.1)};
  CHECK(efficacy(outcomes) == 100.0);
}

TEST_CASE("ties count as failures in every metric") {
  std::vector<CaseOutcome> outcomes = {single_edit_case(0.4, 0.4)};
  outcomes[0].paraphrase = {{{0.3, 0.3}}};
  outcomes[0].neighborhood = {{{0.3, 0.3}}};
  CHECK(efficacy(outcomes) == 0.0);
  CHECK(generalization(outcomes) == 0.0);
  CHECK(locality(outcomes) == 0.0);
}

TEST_CASE("generalization averages within a case before averaging cases") {
  CaseOutcome c;
  c.edit.push_back({0.9, 0.1});
  c.paraphrase = {{{0.6, 0.2}, {0.1, 0.3}}};  // one of two satisfied
  CHECK(generalization({c}) == 50.0);

  // A second case with a single winning paraphrase: (50 + 100) / 2.
  CaseOutcome c2;
  c2.edit.push_back({0.9, 0.1});
  c2.paraphrase = {{{0.8, 0.2}}};
  CHECK(generalization({c, c2}) == 75.0);
}

TEST_CASE("locality uses the reversed inequality") {
  // Unedited model: the correct neighborhood answer stays dominant.
  CaseOutcome c;
  c.edit.push_back({0.1, 0.9});
  c.neighborhood = {{{0.001, 0.95}, {0.002, 0.9}}};
  CHECK(locality({c}) == 100.0);

  c.neighborhood = {{{0.95, 0.001}}};
  CHECK(locality({c}) == 0.0);
}

TEST_CASE("cases without the required prompts are excluded") {
  CaseOutcome with;
  with.case_id = "with";
  with.edit.push_back({0.9, 0.1});
  with.paraphrase = {{{0.9, 0.1}}};
  CaseOutcome without;
  without.case_id = "without";
  without.edit.push_back({0.1, 0.9});
  CHECK(generalization({with, without}) == 100.0);
  CHECK_THROWS_AS(generalization({without}), Error);
  CHECK_THROWS_AS(efficacy({}), Error);
}

TEST_CASE("score is the harmonic mean with zero poisoning") {
  CHECK(score(90.0, 60.0, 45.0) == doctest::Approx(60.0).epsilon(1e-12));
  CHECK(score(95.90, 91.68, 54.14) == doctest::Approx(75.36).epsilon(2e-4));
  // Published rounding for the same triple sits within half a point.
  CHECK(std::abs(score(95.90, 91.68, 54.14) - 75.28) < 0.5);
  CHECK(score(100.0, 50.0, 0.0) == 0.0);

  std::mt19937_64 rng(11);
  std::uniform_real_distribution<double> dist(1e-3, 100.0);
  for (int i = 0; i < 200; ++i) {
    const double x = dist(rng);
    CHECK(score(x, x, x) == doctest::Approx(x).epsilon(1e-12));
  }
}

TEST_CASE("aggregate_set is the arithmetic mean and permutation invariant") {
  CHECK(aggregate_set({100.0, 0.0}) == 50.0);
  CHECK(aggregate_set({37.5}) == 37.5);
  CHECK(aggregate_set({10.0, 20.0, 60.0}) == 30.0);
  CHECK_THROWS_AS(aggregate_set({}), Error);

  std::mt19937_64 rng(5);
  std::uniform_real_distribution<double> dist(0.0, 100.0);
  std::vector<double> scores(7);
  for (double& s : scores) s = dist(rng);
  const double base = aggregate_set(scores);
  for (int i = 0; i < 20; ++i) {
    std::shuffle(scores.begin(), scores.end(), rng);
    CHECK(aggregate_set(scores) == doctest::Approx(base).epsilon(1e-12));
  }
}

TEST_CASE("ci95 matches the closed form") {
  CHECK(ci95(std::vector<int>(50, 1)) == 0.0);
  CHECK(ci95(std::vector<int>(50, 0)) == 0.0);

  std::vector<int> half(10000, 0);
  for (std::size_t i = 0; i < 5000; ++i) half[i] = 1;
  CHECK(ci95(half) == doctest::Approx(0.98).epsilon(1e-9));

  std::vector<int> fixture(400, 0);
  for (std::size_t i = 0; i < 360; ++i) fixture[i] = 1;
  CHECK(ci95(fixture) == doctest::Approx(2.94).epsilon(1e-9));
  CHECK_THROWS_AS(ci95({}), Error);
}

TEST_CASE("metrics agree with an independent recount on random outcomes") {
  std::mt19937_64 rng(17);
  for (int round = 0; round < 5; ++round) {
    auto outcomes = random_outcomes(rng, 40);
    CHECK(efficacy(outcomes) ==
          doctest::Approx(fraction_oracle(outcomes, 'e')).epsilon(1e-12));
    // Inner and outer means only coincide with the flat recount when every
    // case has one comparison group, which random_outcomes guarantees per
    // object; recount per case instead for the grouped metrics.
    double gs_expected = 0.0, ls_expected = 0.0;
    for (const auto& c : outcomes) {
      gs_expected += fraction_oracle({c}, 'g');
      ls_expected += fraction_oracle({c}, 'l');
    }
    gs_expected /= static_cast<double>(outcomes.size());
    ls_expected /= static_cast<double>(outcomes.size());
    CHECK(generalization(outcomes) == doctest::Approx(gs_expected).epsilon(1e-12));
    CHECK(locality(outcomes) == doctest::Approx(ls_expected).epsilon(1e-12));
  }
}

TEST_CASE("comparison metrics are invariant under monotone transforms") {
  std::mt19937_64 rng(23);
  auto outcomes = random_outcomes(rng, 30);
  const double es = efficacy(outcomes);
  const double gs = generalization(outcomes);
  const double ls = locality(outcomes);

  auto transform = [](std::vector<CaseOutcome> o, auto f) {
    for (auto& c : o) {
      for (auto& p : c.edit) p = {f(p.p_target), f(p.p_old)};
      for (auto& g : c.paraphrase)
        for (auto& p : g) p = {f(p.p_target), f(p.p_old)};
      for (auto& g : c.neighborhood)
        for (auto& p : g) p = {f(p.p_target), f(p.p_old)};
    }
    return o;
  };

  auto squared = transform(outcomes, [](double x) { return x * x; });
  CHECK(efficacy(squared) == es);
  CHECK(generalization(squared) == gs);
  CHECK(locality(squared) == ls);

  auto affine = transform(outcomes, [](double x) { return 0.5 + x / 3.0; });
  CHECK(efficacy(affine) == es);
  CHECK(generalization(affine) == gs);
  CHECK(locality(affine) == ls);
}

TEST_CASE("summarize bundles metrics, score, and interval half-widths") {
  std::mt19937_64 rng(31);
  auto outcomes = random_outcomes(rng, 50);
  MetricsRecord rec = summarize(outcomes);
  CHECK(rec.n_cases == 50);
  CHECK(rec.es == efficacy(outcomes));
  CHECK(rec.gs == generalization(outcomes));
  CHECK(rec.ls == locality(outcomes));
  CHECK(rec.score == score(rec.es, rec.gs, rec.ls));
  CHECK(!rec.degenerate_score);
  CHECK(rec.es_ci > 0.0);
  CHECK(rec.es_ci == doctest::Approx(1.96 * std::sqrt(rec.es / 100.0 *
                                                      (1.0 - rec.es / 100.0) / 50.0) *
                                     100.0)
                         .epsilon(1e-9));

  // All-failure edits zero out ES and flag the score.
  for (auto& c : outcomes) c.edit = {{0.0, 0.5}};
  rec = summarize(outcomes);
  CHECK(rec.es == 0.0);
  CHECK(rec.score == 0.0);
  CHECK(rec.degenerate_score);
}

TEST_CASE("report emission is deterministic and parseable") {
  MetricsRecord rec;
  rec.es = 95.9;
  rec.gs = 91.68;
  rec.ls = 54.14;
  rec.score = score(rec.es, rec.gs, rec.ls);
  rec.n_cases = 60;
  rec.es_ci = 1.23456;
  rec.gs_ci = 2.0;
  rec.ls_ci = 3.5;
  std::vector<ReportRow> rows = {{"setke", 3, rec}, {"concat", 3, rec}};

  const std::string csv_path = "/tmp/kse_metrics_report.csv";
  write_report_csv(rows, csv_path);
  std::ifstream in(csv_path);
  std::stringstream buf;
  buf << in.rdbuf();
  const std::string csv = buf.str();
  CHECK(csv.find("editor,overlap_n,metric,value,ci95,n_cases\n") == 0);
  CHECK(csv.find("setke,3,ES,95.9000,1.2346,60\n") != std::string::npos);
  CHECK(csv.find("setke,3,S,75.3662,,60\n") != std::string::npos);
  CHECK(csv.find("concat,3,LS,54.1400,3.5000,60\n") != std::string::npos);

  write_report_csv(rows, csv_path + ".again");
  std::ifstream again(csv_path + ".again");
  std::stringstream buf2;
  buf2 << again.rdbuf();
  CHECK(buf2.str() == csv);

  const std::string json_path = "/tmp/kse_metrics_report.json";
  write_report_json(rows, json_path);
  std::ifstream jin(json_path);
  nlohmann::json arr = nlohmann::json::parse(jin);
  REQUIRE(arr.is_array());
  REQUIRE(arr.size() == 8);
  CHECK(arr[0]["editor"] == "setke");
  CHECK(arr[0]["metric"] == "ES");
  CHECK(arr[0]["value"] == doctest::Approx(95.9));
  CHECK(arr[3]["metric"] == "S");
  CHECK(arr[3]["ci95"].is_null());
  CHECK(arr[4]["editor"] == "concat");
}
