#include "kse/metrics.hpp"

#include <algorithm>
#include <cmath>
#include <cstdio>
#include <fstream>

#include "json.hpp"
#include "kse/common.hpp"

namespace kse::metrics {

using ordered_json = nlohmann::ordered_json;

namespace {

enum class Kind { edit, paraphrase, neighborhood };

const char* kind_name(Kind k) {
  switch (k) {
    case Kind::edit: return "edit";
    case Kind::paraphrase: return "paraphrase";
    default: return "neighborhood";
  }
}

bool pair_success(const ProbPair& p, Kind kind) {
  return kind == Kind::neighborhood ? p.p_target < p.p_old : p.p_target > p.p_old;
}

// Inner mean per case, outer mean over cases; flat collects every
// per-comparison binary for the CI.
double mean_metric(const std::vector<CaseOutcome>& outcomes, Kind kind,
                   std::vector<int>* flat) {
  require(!outcomes.empty(), "metrics: no cases");
  double outer = 0.0;
  std::size_t included = 0;
  for (const auto& c : outcomes) {
    std::vector<double> per_object;
    if (kind == Kind::edit) {
      for (const auto& p : c.edit) {
        per_object.push_back(pair_success(p, kind) ? 100.0 : 0.0);
        if (flat) flat->push_back(pair_success(p, kind));
      }
    } else {
      const auto& groups = kind == Kind::paraphrase ? c.paraphrase : c.neighborhood;
      for (const auto& group : groups) {
        for (const auto& p : group) {
          per_object.push_back(pair_success(p, kind) ? 100.0 : 0.0);
          if (flat) flat->push_back(pair_success(p, kind));
        }
      }
    }
    if (per_object.empty()) {
      log_warn("metrics: case " + c.case_id + " has no " +
               std::string(kind_name(kind)) + " comparisons; excluded");
      continue;
    }
    outer += aggregate_set(per_object);
    ++included;
  }
  require(included > 0, "metrics: every case lacked " +
                            std::string(kind_name(kind)) + " comparisons");
  return outer / static_cast<double>(included);
}

}  // namespace

double efficacy(const std::vector<CaseOutcome>& outcomes) {
  return mean_metric(outcomes, Kind::edit, nullptr);
}

double generalization(const std::vector<CaseOutcome>& outcomes) {
  return mean_metric(outcomes, Kind::paraphrase, nullptr);
}

double locality(const std::vector<CaseOutcome>& outcomes) {
  return mean_metric(outcomes, Kind::neighborhood, nullptr);
}

double score(double es, double gs, double ls) {
  require(es >= 0 && gs >= 0 && ls >= 0, "score: negative metric");
  if (es == 0.0 || gs == 0.0 || ls == 0.0) return 0.0;
  return 3.0 / (1.0 / es + 1.0 / gs + 1.0 / ls);
}

double aggregate_set(const std::vector<double>& per_object) {
  require(!per_object.empty(), "aggregate_set: empty score list");
  double s = 0.0;
  for (double v : per_object) s += v;
  return s / static_cast<double>(per_object.size());
}

double ci95(const std::vector<int>& binaries) {
  require(!binaries.empty(), "ci95: no outcomes");
  const double n = static_cast<double>(binaries.size());
  double p = 0.0;
  for (int b : binaries) p += b != 0;
  p /= n;
  return 1.96 * std::sqrt(p * (1.0 - p) / n) * 100.0;
}

MetricsRecord summarize(const std::vector<CaseOutcome>& outcomes) {
  MetricsRecord rec;
  rec.n_cases = outcomes.size();
  std::vector<int> es_flat, gs_flat, ls_flat;
  rec.es = mean_metric(outcomes, Kind::edit, &es_flat);
  rec.gs = mean_metric(outcomes, Kind::paraphrase, &gs_flat);
  rec.ls = mean_metric(outcomes, Kind::neighborhood, &ls_flat);
  rec.score = score(rec.es, rec.gs, rec.ls);
  rec.degenerate_score = rec.es == 0.0 || rec.gs == 0.0 || rec.ls == 0.0;
  rec.es_ci = ci95(es_flat);
  rec.gs_ci = ci95(gs_flat);
  rec.ls_ci = ci95(ls_flat);
  return rec;
}

std::vector<CaseOutcome> measure_outcomes(const lm::ToyLM& model,
                                          const std::vector<keo::KSEInstance>& instances) {
  std::vector<CaseOutcome> out;
  out.reserve(instances.size());
  for (const auto& inst : instances) {
    keo::validate_instance(inst);
    CaseOutcome c;
    c.case_id = inst.case_id;
    const std::size_t n_pairs = std::min(inst.targets.size(), inst.objects.size());

    auto seq_prob = [&](const lm::TokenSeq& prompt, const std::string& word) {
      return std::exp(lm::sequence_logprob(model, prompt, model.tokenizer.encode(word)));
    };

    const lm::TokenSeq edit_toks =
        model.tokenizer.encode_with_bos(keo::render_prompt(inst.edit_prompt, inst.subject));
    std::vector<lm::TokenSeq> para_toks;
    for (const auto& p : inst.paraphrase_prompts)
      para_toks.push_back(
          model.tokenizer.encode_with_bos(keo::render_prompt(p, inst.subject)));

    c.paraphrase.resize(n_pairs);
    c.neighborhood.resize(n_pairs);
    for (std::size_t j = 0; j < n_pairs; ++j) {
      const std::string& target = inst.targets[j];
      const std::string& old = inst.objects[j];
      c.edit.push_back({seq_prob(edit_toks, target), seq_prob(edit_toks, old)});
      for (const auto& toks : para_toks)
        c.paraphrase[j].push_back({seq_prob(toks, target), seq_prob(toks, old)});
      for (const auto& n : inst.neighborhood_prompts) {
        const lm::TokenSeq toks = model.tokenizer.encode_with_bos(n.prompt);
        c.neighborhood[j].push_back({seq_prob(toks, target), seq_prob(toks, n.answer)});
      }
    }
    out.push_back(std::move(c));
  }
  return out;
}

namespace {

std::string fmt4(double v) {
  char buf[32];
  std::snprintf(buf, sizeof buf, "%.4f", v);
  return buf;
}

struct MetricCell {
  const char* name;
  double value;
  double ci;
  bool has_ci;
};

std::vector<MetricCell> cells(const MetricsRecord& r) {
  return {{"ES", r.es, r.es_ci, true},
          {"GS", r.gs, r.gs_ci, true},
          {"LS", r.ls, r.ls_ci, true},
          {"S", r.score, 0.0, false}};
}

}  // namespace

void write_report_csv(const std::vector<ReportRow>& rows, const std::string& path) {
  std::ofstream out(path);
  require(out.good(), "write_report_csv: cannot open " + path);
  out << "editor,overlap_n,metric,value,ci95,n_cases\n";
  for (const auto& row : rows)
    for (const auto& cell : cells(row.record))
      out << row.editor << ',' << row.overlap_n << ',' << cell.name << ','
          << fmt4(cell.value) << ',' << (cell.has_ci ? fmt4(cell.ci) : "") << ','
          << row.record.n_cases << '\n';
  require(out.good(), "write_report_csv: write failed for " + path);
}

void write_report_json(const std::vector<ReportRow>& rows, const std::string& path) {
  ordered_json arr = ordered_json::array();
  for (const auto& row : rows)
    for (const auto& cell : cells(row.record)) {
      ordered_json j;
      j["editor"] = row.editor;
      j["overlap_n"] = row.overlap_n;
      j["metric"] = cell.name;
      j["value"] = cell.value;
      if (cell.has_ci)
        j["ci95"] = cell.ci;
      else
        j["ci95"] = nullptr;
      j["n_cases"] = row.record.n_cases;
      arr.push_back(std::move(j));
    }
  std::ofstream out(path);
  require(out.good(), "write_report_json: cannot open " + path);
  out << arr.dump(2) << '\n';
  require(out.good(), "write_report_json: write failed for " + path);
}

}  // namespace kse::metrics
