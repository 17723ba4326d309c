#pragma once

#include <cstddef>
#include <string>
#include <vector>

#include "kse/keo_data.hpp"
#include "kse/toy_lm.hpp"

namespace kse::metrics {

// One comparison pair: the probability the edit tried to promote against the
// probability it tried to displace, under the same prompt.
struct ProbPair {
  double p_target = 0.0;  // P[o*]
  double p_old = 0.0;     // P[o]
};

// Comparands for one edited instance. The outer index is the object slot;
// paraphrase and neighborhood hold one pair per (object, prompt).
struct CaseOutcome {
  std::string case_id;
  std::vector<ProbPair> edit;                       // per object
  std::vector<std::vector<ProbPair>> paraphrase;    // [object][prompt]
  std::vector<std::vector<ProbPair>> neighborhood;  // [object][prompt]
};

struct MetricsRecord {
  double es = 0.0;  // percentages
  double gs = 0.0;
  double ls = 0.0;
  double score = 0.0;
  std::size_t n_cases = 0;
  double es_ci = 0.0;  // 95% half-widths in percentage points
  double gs_ci = 0.0;
  double ls_ci = 0.0;
  bool degenerate_score = false;  // some component was zero
};

// Per-case mean of strict comparisons, then mean over cases, as percentages.
// Efficacy counts P[o*] > P[o] on the edit prompt; generalization does the
// same over paraphrase prompts; locality counts the reversed inequality
// P[o*] < P[o] over neighborhood prompts. Cases without prompts of the
// required kind are excluded with a warning; ties count as failures.
double efficacy(const std::vector<CaseOutcome>& outcomes);
double generalization(const std::vector<CaseOutcome>& outcomes);
double locality(const std::vector<CaseOutcome>& outcomes);

// Harmonic mean of the three percentages; returns 0 when any input is 0.
double score(double es, double gs, double ls);

// Arithmetic mean over per-object scores.
double aggregate_set(const std::vector<double>& per_object);

// Normal-approximation half-width 1.96 * sqrt(p(1-p)/n) in percentage points.
double ci95(const std::vector<int>& binaries);

// All of the above over one outcome batch, with CIs computed from the
// flattened per-comparison binaries of each metric.
MetricsRecord summarize(const std::vector<CaseOutcome>& outcomes);

// Teacher-forced sequence probabilities of target vs current object for every
// prompt family of each instance, measured on (typically edited) model.
// Object j is paired with target j; objects beyond the target count are
// left uncompared.
std::vector<CaseOutcome> measure_outcomes(const lm::ToyLM& model,
                                          const std::vector<keo::KSEInstance>& instances);

struct ReportRow {
  std::string editor;
  std::size_t overlap_n = 0;
  MetricsRecord record;
};

// Long-format report: one row per (editor, overlap N, metric) with value,
// CI half-width, and case count. The score row carries an empty CI.
void write_report_csv(const std::vector<ReportRow>& rows, const std::string& path);
void write_report_json(const std::vector<ReportRow>& rows, const std::string& path);

}  // namespace kse::metrics
