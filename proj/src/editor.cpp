#include "kse/editor.hpp"

#include <algorithm>
#include <cmath>
#include <cstring>
#include <limits>
#include <random>

#include "kse/common.hpp"

namespace kse::editor {

using lm::TokenSeq;
using lm::ToyLM;
using num::Matrix;
using num::Vector;

void validate_layers(const ToyLM& model, const std::vector<std::size_t>& layers) {
  require(!layers.empty(), "editor: empty critical layer set");
  for (std::size_t i = 0; i < layers.size(); ++i) {
    require(layers[i] < model.config.n_layers, "editor: critical layer out of range");
    if (i) require(layers[i] == layers[i - 1] + 1, "editor: critical layers not contiguous");
  }
}

// ---------------------------------------------------------------------------
// Objective construction

namespace {

std::size_t subject_last_token(const ToyLM& model, const TokenSeq& prompt,
                               const std::string& subject) {
  const TokenSeq needle = model.tokenizer.encode(subject);
  auto pos = lm::find_subsequence_last(prompt, needle);
  require(pos.has_value(), "editor: subject not found in prompt");
  return *pos;
}

}  // namespace

EditObjective build_objective(const ToyLM& model, const keo::KSEInstance& inst,
                              double kl_weight_base, const std::string& separator) {
  keo::validate_instance(inst);
  EditObjective obj;
  obj.case_id = inst.case_id;
  obj.targets = inst.targets;
  for (const auto& t : inst.targets) obj.target_tokens.push_back(model.tokenizer.encode(t));
  obj.kl_weight = kl_weight_base * static_cast<double>(inst.targets.size());

  const std::string rendered = keo::render_prompt(inst.edit_prompt, inst.subject);
  obj.edit_prompt = model.tokenizer.encode_with_bos(rendered);
  obj.injection_pos = subject_last_token(model, obj.edit_prompt, inst.subject);

  // Rank current objects by pre-edit probability to fix the slot order.
  std::vector<std::pair<double, std::size_t>> ranked;
  for (std::size_t k = 0; k < inst.objects.size(); ++k) {
    const TokenSeq obj_tokens = model.tokenizer.encode(inst.objects[k]);
    ranked.emplace_back(lm::sequence_logprob(model, obj.edit_prompt, obj_tokens), k);
  }
  std::stable_sort(ranked.begin(), ranked.end(), [](const auto& a, const auto& b) {
    if (a.first != b.first) return a.first > b.first;
    return a.second < b.second;
  });

  const std::size_t sep_token = model.tokenizer.id(separator);
  TokenSeq context = obj.edit_prompt;
  for (std::size_t k = 0; k < inst.objects.size(); ++k) {
    obj.slot_contexts.push_back(context);
    obj.slot_objects.push_back(inst.objects[ranked[k].second]);
    const TokenSeq obj_tokens = model.tokenizer.encode(obj.slot_objects.back());
    context.insert(context.end(), obj_tokens.begin(), obj_tokens.end());
    context.push_back(sep_token);
  }

  obj.essence_prompt = model.tokenizer.encode_with_bos(inst.subject + " is a");
  obj.essence_injection_pos = subject_last_token(model, obj.essence_prompt, inst.subject);
  obj.essence_reference =
      lm::forward(model, obj.essence_prompt).log_probs_at(obj.essence_prompt.size() - 1);
  return obj;
}

// ---------------------------------------------------------------------------
// Causal tracing

TraceResult causal_trace(const ToyLM& model, const TokenSeq& prompt,
                         std::pair<std::size_t, std::size_t> subject_span,
                         std::size_t target, double noise_scale, std::uint64_t seed) {
  const std::size_t T = prompt.size();
  require(subject_span.first <= subject_span.second && subject_span.second < T,
          "causal_trace: subject span out of range");
  require(target < model.config.vocab_size, "causal_trace: target out of range");

  const std::size_t L = model.config.n_layers;
  const std::size_t D = model.config.d_model;
  const std::size_t last = T - 1;

  lm::ForwardTrace clean = lm::forward(model, prompt);
  TraceResult out;
  out.p_clean = std::exp(clean.log_probs_at(last)[target]);

  // Noise amplitude follows the spread of the embedding table.
  double mean = 0.0, sq = 0.0;
  for (double v : model.wte.data) mean += v;
  mean /= static_cast<double>(model.wte.data.size());
  for (double v : model.wte.data) sq += (v - mean) * (v - mean);
  const double emb_std = std::sqrt(sq / static_cast<double>(model.wte.data.size()));

  std::mt19937_64 rng = substream(seed, "causal-noise");
  std::normal_distribution<double> noise(0.0, 1.0);
  lm::Hooks corrupt;
  for (std::size_t p = subject_span.first; p <= subject_span.second; ++p) {
    Vector delta(D);
    for (std::size_t j = 0; j < D; ++j) delta[j] = noise_scale * emb_std * noise(rng);
    corrupt.embedding_deltas.push_back({p, std::move(delta)});
  }

  lm::ForwardTrace corrupted = lm::forward(model, prompt, corrupt);
  out.p_corrupted = std::exp(corrupted.log_probs_at(last)[target]);
  out.degenerate = out.p_corrupted >= out.p_clean;
  if (out.degenerate)
    log_warn("causal_trace: corruption did not reduce the target probability");

  out.scores = Matrix(L, T);
  for (std::size_t l = 0; l < L; ++l) {
    for (std::size_t p = 0; p < T; ++p) {
      lm::Hooks hooks = corrupt;
      Vector state(D);
      std::memcpy(state.data.data(), clean.residual_out[l].row(p), D * sizeof(double));
      hooks.residual_overrides.push_back({l, p, std::move(state)});
      lm::ForwardTrace restored = lm::forward(model, prompt, hooks);
      out.scores.at(l, p) =
          std::exp(restored.log_probs_at(last)[target]) - out.p_corrupted;
    }
  }
  return out;
}

std::vector<std::size_t> locate_layers(const ToyLM& model,
                                       const std::vector<ProbeFact>& probes,
                                       LocateStrategy strategy,
                                       const std::vector<std::size_t>& config_layers,
                                       double noise_scale, std::uint64_t seed) {
  validate_layers(model, config_layers);
  if (strategy == LocateStrategy::config) return config_layers;

  require(!probes.empty(), "locate_layers: trace strategy needs probe facts");
  const std::size_t L = model.config.n_layers;
  std::vector<double> layer_score(L, 0.0);
  std::size_t usable = 0;
  for (std::size_t i = 0; i < probes.size(); ++i) {
    const auto& probe = probes[i];
    TraceResult trace = causal_trace(model, probe.prompt, probe.subject_span,
                                     probe.target, noise_scale, seed + i);
    if (trace.degenerate) continue;
    ++usable;
    for (std::size_t l = 0; l < L; ++l)
      layer_score[l] += trace.scores.at(l, probe.subject_span.second);
  }

  constexpr double kNoiseFloor = 1e-3;
  double best = -std::numeric_limits<double>::infinity();
  std::size_t peak = 0;
  for (std::size_t l = 0; l < L; ++l) {
    const double s = usable ? layer_score[l] / static_cast<double>(usable) : 0.0;
    if (s > best) {
      best = s;
      peak = l;
    }
  }
  if (usable == 0 || best <= kNoiseFloor) {
    log_warn("locate_layers: no layer above the noise floor; using configured layers");
    return config_layers;
  }

  // A short band biased below the peak, clipped to the model depth.
  std::size_t lo = peak >= 3 ? peak - 3 : 0;
  std::size_t hi = std::min(L - 1, peak + 1);
  while (hi - lo + 1 > 5) ++lo;
  while (hi - lo + 1 < std::min<std::size_t>(3, L)) {
    if (hi + 1 < L)
      ++hi;
    else if (lo > 0)
      --lo;
    else
      break;
  }
  std::vector<std::size_t> band;
  for (std::size_t l = lo; l <= hi; ++l) band.push_back(l);
  return band;
}

// ---------------------------------------------------------------------------
// Loss and residual optimization

Matrix slot_probabilities(const ToyLM& model, const EditObjective& obj,
                          std::size_t layer, const Vector& delta) {
  const std::size_t M = obj.targets.size();
  const std::size_t N = obj.slot_contexts.size();
  require(N >= 1, "slot_probabilities: objective has no slots");
  if (M == 0) return Matrix();
  Matrix probs(M, N);

  bool single_token = true;
  for (const auto& t : obj.target_tokens) single_token = single_token && t.size() == 1;

  for (std::size_t k = 0; k < N; ++k) {
    lm::Hooks hooks;
    hooks.injections.push_back({layer, obj.injection_pos, delta});
    if (single_token) {
      lm::ForwardTrace trace = lm::forward(model, obj.slot_contexts[k], hooks);
      std::vector<double> lp = trace.log_probs_at(obj.slot_contexts[k].size() - 1);
      for (std::size_t j = 0; j < M; ++j)
        probs.at(j, k) = std::exp(lp[obj.target_tokens[j][0]]);
    } else {
      for (std::size_t j = 0; j < M; ++j)
        probs.at(j, k) = std::exp(lm::sequence_logprob(model, obj.slot_contexts[k],
                                                       obj.target_tokens[j], hooks));
    }
  }
  return probs;
}

namespace {

void validate_assignment(const EditObjective& obj, const match::Assignment& assignment) {
  const std::size_t N = obj.slot_contexts.size();
  require(assignment.perm.size() == N, "setke_loss: assignment size mismatch");
  std::vector<char> seen(N, 0);
  for (std::size_t c : assignment.perm) {
    require(c < N, "setke_loss: assignment column out of range");
    require(!seen[c], "setke_loss: assignment is not a bijection");
    seen[c] = 1;
  }
  require(obj.targets.size() <= N, "setke_loss: more targets than slots");
}

lm::DeltaLossSpec edit_spec(const EditObjective& obj, const match::Assignment& assignment) {
  lm::DeltaLossSpec spec;
  for (std::size_t j = 0; j < obj.targets.size(); ++j)
    spec.nll_terms.push_back({obj.slot_contexts[assignment.perm[j]], obj.target_tokens[j],
                              obj.injection_pos, 1.0});
  return spec;
}

lm::DeltaLossSpec const_spec(const EditObjective& obj) {
  lm::DeltaLossSpec spec;
  spec.kl_terms.push_back(
      {obj.essence_prompt, obj.essence_injection_pos, obj.kl_weight, obj.essence_reference});
  return spec;
}

match::Assignment identity_assignment(const Matrix& cost) {
  match::Assignment a;
  a.perm.resize(cost.rows);
  for (std::size_t i = 0; i < cost.rows; ++i) {
    a.perm[i] = i;
    a.total_cost += cost.at(i, i);
  }
  return a;
}

}  // namespace

SetkeLoss setke_loss(const ToyLM& model, const EditObjective& obj, std::size_t layer,
                     const Vector& delta, const match::Assignment& assignment,
                     bool want_grad) {
  validate_assignment(obj, assignment);
  SetkeLoss out;
  const lm::DeltaLossSpec edit = edit_spec(obj, assignment);
  const lm::DeltaLossSpec constraint = const_spec(obj);
  if (want_grad) {
    out.grad = Vector(model.config.d_model);
    if (!edit.nll_terms.empty()) {
      Vector g = lm::grad_wrt_delta(model, edit, layer, delta, &out.edit_term);
      for (std::size_t i = 0; i < g.dim(); ++i) out.grad[i] += g[i];
    }
    Vector g = lm::grad_wrt_delta(model, constraint, layer, delta, &out.const_term);
    for (std::size_t i = 0; i < g.dim(); ++i) out.grad[i] += g[i];
  } else {
    if (!edit.nll_terms.empty()) out.edit_term = lm::delta_loss(model, edit, layer, delta);
    out.const_term = lm::delta_loss(model, constraint, layer, delta);
  }
  out.total = out.edit_term + out.const_term;
  return out;
}

DeltaResult optimize_delta(const ToyLM& model, const EditObjective& obj,
                           const EditPlan& plan) {
  validate_layers(model, plan.critical_layers);
  const std::size_t layer = plan.critical_layers.back();
  const std::size_t D = model.config.d_model;
  const std::size_t M = obj.targets.size();

  DeltaResult result;
  result.delta = Vector(D);

  Vector delta(D);
  Vector m1(D), m2(D);
  constexpr double kBeta1 = 0.9, kBeta2 = 0.999, kEps = 1e-8;

  double best_loss = std::numeric_limits<double>::infinity();
  Vector best_delta = delta;
  match::Assignment best_assignment;
  bool have_best = false;

  auto evaluate_assignment = [&](const Vector& d) {
    Matrix probs = slot_probabilities(model, obj, layer, d);
    match::MatchProblem problem = match::make_match_problem(obj.targets, probs);
    match::Assignment a = plan.match_mode == MatchMode::hungarian
                              ? match::hungarian_solve(problem.cost)
                              : identity_assignment(problem.cost);
    return std::make_pair(std::move(probs), std::move(a));
  };

  for (std::size_t step = 0; step < plan.max_steps; ++step) {
    auto [probs, assignment] = evaluate_assignment(delta);

    bool all_matched = true;
    for (std::size_t j = 0; j < M; ++j)
      all_matched = all_matched && probs.at(j, assignment.perm[j]) >= plan.early_stop_prob;
    if (all_matched) {
      SetkeLoss loss = setke_loss(model, obj, layer, delta, assignment, false);
      result.delta = delta;
      result.assignment = assignment;
      result.steps = step;
      result.early_stopped = true;
      result.final_loss = loss.total;
      if (!result.best_loss_trajectory.empty() &&
          loss.total > result.best_loss_trajectory.back())
        result.best_loss_trajectory.push_back(result.best_loss_trajectory.back());
      else
        result.best_loss_trajectory.push_back(loss.total);
      return result;
    }

    SetkeLoss loss;
    try {
      loss = setke_loss(model, obj, layer, delta, assignment, true);
    } catch (const Error& e) {
      fail("optimize_delta(" + obj.case_id + "): " + e.what());
    }
    if (loss.total < best_loss) {
      best_loss = loss.total;
      best_delta = delta;
      best_assignment = assignment;
      have_best = true;
    }
    result.best_loss_trajectory.push_back(best_loss);
    result.steps = step + 1;

    const double t = static_cast<double>(step + 1);
    const double c1 = 1.0 - std::pow(kBeta1, t);
    const double c2 = 1.0 - std::pow(kBeta2, t);
    for (std::size_t i = 0; i < D; ++i) {
      m1[i] = kBeta1 * m1[i] + (1.0 - kBeta1) * loss.grad[i];
      m2[i] = kBeta2 * m2[i] + (1.0 - kBeta2) * loss.grad[i] * loss.grad[i];
      delta[i] -= plan.lr * (m1[i] / c1) / (std::sqrt(m2[i] / c2) + kEps);
    }
  }

  auto [probs, assignment] = evaluate_assignment(delta);
  SetkeLoss loss = setke_loss(model, obj, layer, delta, assignment, false);
  if (!have_best || loss.total < best_loss) {
    best_loss = loss.total;
    best_delta = delta;
    best_assignment = assignment;
  }
  result.delta = best_delta;
  result.assignment = best_assignment;
  result.final_loss = best_loss;
  result.best_loss_trajectory.push_back(best_loss);
  return result;
}

Vector spread_residual(const Vector& delta, const std::vector<std::size_t>& critical_layers,
                       std::size_t layer) {
  require(!critical_layers.empty(), "spread_residual: empty critical layer set");
  const bool member =
      std::find(critical_layers.begin(), critical_layers.end(), layer) !=
      critical_layers.end();
  require(member, "spread_residual: layer outside the critical set");
  const double denom = static_cast<double>(critical_layers.back() - layer + 1);
  Vector r(delta.dim());
  for (std::size_t i = 0; i < delta.dim(); ++i) r[i] = delta[i] / denom;
  return r;
}

// ---------------------------------------------------------------------------
// Keys, covariance, and the weight update

std::vector<Matrix> sample_covariances(const ToyLM& model,
                                       const std::vector<std::size_t>& layers,
                                       const std::vector<TokenSeq>& sample_prompts,
                                       double covariance_scale) {
  require(!layers.empty(), "sample_covariances: no layers requested");
  for (std::size_t l : layers)
    require(l < model.config.n_layers, "sample_covariances: layer out of range");
  require(!sample_prompts.empty(), "sample_covariances: no sample prompts");
  require(covariance_scale > 0.0, "sample_covariances: scale must be positive");

  const std::size_t F = model.config.d_ffn;
  std::vector<Matrix> cov(layers.size(), Matrix(F, F));
  std::size_t count = 0;
  for (const auto& prompt : sample_prompts) {
    lm::ForwardTrace trace = lm::forward(model, prompt);
    for (std::size_t t = 1; t < prompt.size(); ++t) {
      ++count;
      for (std::size_t li = 0; li < layers.size(); ++li) {
        const double* k = trace.ffn_inner[layers[li]].row(t);
        Matrix& c = cov[li];
        for (std::size_t a = 0; a < F; ++a) {
          if (k[a] == 0.0) continue;
          double* row = c.row(a);
          for (std::size_t b = 0; b < F; ++b) row[b] += k[a] * k[b];
        }
      }
    }
  }
  require(count > 0, "sample_covariances: sample prompts carry no scorable positions");
  const double s = covariance_scale / static_cast<double>(count);
  for (auto& c : cov)
    for (double& v : c.data) v *= s;
  return cov;
}

KeyCov compute_keys_and_covariance(const ToyLM& model, std::size_t layer,
                                   const std::vector<TokenSeq>& edit_prompts,
                                   const std::vector<std::size_t>& injection_positions,
                                   const std::vector<TokenSeq>& sample_prompts,
                                   double covariance_scale) {
  require(!edit_prompts.empty(), "compute_keys_and_covariance: no edit prompts");
  require(edit_prompts.size() == injection_positions.size(),
          "compute_keys_and_covariance: prompt and position counts differ");
  require(sample_prompts.size() >= model.config.d_ffn / 4,
          "compute_keys_and_covariance: too few covariance sample prompts");

  const std::size_t F = model.config.d_ffn;
  std::vector<std::vector<double>> columns;
  KeyCov out;
  std::size_t deduped = 0;
  for (std::size_t i = 0; i < edit_prompts.size(); ++i) {
    require(injection_positions[i] < edit_prompts[i].size(),
            "compute_keys_and_covariance: injection position out of range");
    lm::ForwardTrace trace = lm::forward(model, edit_prompts[i]);
    const double* k = trace.ffn_inner[layer].row(injection_positions[i]);
    std::vector<double> col(k, k + F);
    bool duplicate = false;
    for (const auto& kept : columns)
      duplicate = duplicate || std::equal(kept.begin(), kept.end(), col.begin());
    if (duplicate) {
      ++deduped;
      continue;
    }
    columns.push_back(std::move(col));
    out.kept.push_back(i);
  }
  if (deduped)
    log_warn("compute_keys_and_covariance: deduplicated " + std::to_string(deduped) +
             " identical key column(s)");

  out.keys = Matrix(F, columns.size());
  for (std::size_t c = 0; c < columns.size(); ++c)
    for (std::size_t a = 0; a < F; ++a) out.keys.at(a, c) = columns[c][a];
  out.covariance =
      sample_covariances(model, {layer}, sample_prompts, covariance_scale)[0];
  return out;
}

namespace {

std::vector<TokenSeq> draw_covariance_prompts(const ToyLM& model,
                                              const EditorConfig& config) {
  require(!config.sample_sentences.empty(), "apply_edit: no covariance sample sentences");
  require(config.covariance_samples >= 1, "apply_edit: covariance sample count is zero");
  std::mt19937_64 rng = substream(config.seed, "covariance-samples");
  std::uniform_int_distribution<std::size_t> pick(0, config.sample_sentences.size() - 1);
  std::vector<TokenSeq> prompts;
  for (std::size_t i = 0; i < config.covariance_samples; ++i)
    prompts.push_back(
        model.tokenizer.encode_with_bos(config.sample_sentences[pick(rng)]));
  return prompts;
}

}  // namespace

EditReport apply_edit(ToyLM& model, const std::vector<keo::KSEInstance>& instances,
                      const EditorConfig& config) {
  EditReport report;
  if (instances.empty()) return report;
  validate_layers(model, config.critical_layers);
  const std::size_t L = config.critical_layers.back();
  const std::size_t D = model.config.d_model;
  const std::size_t F = model.config.d_ffn;

  std::vector<Matrix> snapshot;
  for (std::size_t l : config.critical_layers) snapshot.push_back(model.layers[l].w_proj);

  try {
    std::vector<TokenSeq> cov_prompts = draw_covariance_prompts(model, config);
    require(cov_prompts.size() >= F / 4, "apply_edit: too few covariance sample prompts");
    std::vector<Matrix> covariances =
        sample_covariances(model, config.critical_layers, cov_prompts,
                           config.covariance_scale);

    EditPlan plan;
    plan.critical_layers = config.critical_layers;
    plan.lr = config.lr;
    plan.max_steps = config.max_steps;
    plan.early_stop_prob = config.early_stop_prob;
    plan.match_mode = config.match_mode;

    std::vector<EditObjective> objectives;
    std::vector<Vector> z;  // target FFN output at layer L per instance
    const Vector zero(D);
    for (const auto& inst : instances) {
      EditObjective obj = build_objective(model, inst, config.kl_weight_base,
                                          config.separator);
      DeltaResult opt = optimize_delta(model, obj, plan);

      lm::ForwardTrace trace = lm::forward(model, obj.edit_prompt);
      Vector zi(D);
      std::memcpy(zi.data.data(), trace.ffn_out[L].row(obj.injection_pos),
                  D * sizeof(double));
      for (std::size_t i = 0; i < D; ++i) zi[i] += opt.delta[i];
      z.push_back(std::move(zi));

      InstanceReport ir;
      ir.case_id = inst.case_id;
      ir.targets = inst.targets;
      ir.delta_norm = num::norm2(opt.delta);
      ir.opt_steps = opt.steps;
      ir.early_stopped = opt.early_stopped;
      Matrix pre = slot_probabilities(model, obj, L, zero);
      for (std::size_t j = 0; j < inst.targets.size(); ++j) {
        ir.matched_slots.push_back(opt.assignment.perm[j]);
        ir.pre_probs.push_back(pre.at(j, opt.assignment.perm[j]));
      }
      report.instances.push_back(std::move(ir));
      objectives.push_back(std::move(obj));
    }

    for (std::size_t li = 0; li < config.critical_layers.size(); ++li) {
      const std::size_t l = config.critical_layers[li];
      const std::size_t B = objectives.size();

      Matrix keys(F, B);
      Matrix residuals(D, B);
      for (std::size_t i = 0; i < B; ++i) {
        lm::ForwardTrace trace = lm::forward(model, objectives[i].edit_prompt);
        const double* k = trace.ffn_inner[l].row(objectives[i].injection_pos);
        for (std::size_t a = 0; a < F; ++a) keys.at(a, i) = k[a];
        const double* h = trace.ffn_out[L].row(objectives[i].injection_pos);
        Vector remaining(D);
        for (std::size_t a = 0; a < D; ++a) remaining[a] = z[i][a] - h[a];
        Vector r = spread_residual(remaining, config.critical_layers, l);
        for (std::size_t a = 0; a < D; ++a) residuals.at(a, i) = r[a];
      }

      // Drop duplicate key columns; their residuals are redundant copies.
      std::vector<std::size_t> kept;
      for (std::size_t i = 0; i < B; ++i) {
        bool duplicate = false;
        for (std::size_t j : kept) {
          bool same = true;
          for (std::size_t a = 0; a < F && same; ++a)
            same = keys.at(a, i) == keys.at(a, j);
          duplicate = duplicate || same;
        }
        if (!duplicate) kept.push_back(i);
      }
      if (kept.size() < B)
        log_warn("apply_edit: layer " + std::to_string(l) + " deduplicated " +
                 std::to_string(B - kept.size()) + " identical key column(s)");
      Matrix K(F, kept.size());
      Matrix R(D, kept.size());
      for (std::size_t c = 0; c < kept.size(); ++c) {
        for (std::size_t a = 0; a < F; ++a) K.at(a, c) = keys.at(a, kept[c]);
        for (std::size_t a = 0; a < D; ++a) R.at(a, c) = residuals.at(a, kept[c]);
      }

      Matrix delta_w = num::solve_regularized(R, K, covariances[li]);
      LayerReport layer_report;
      layer_report.layer = l;
      layer_report.solve_residual = num::solve_residual(delta_w, R, K, covariances[li]);
      layer_report.delta_fro = num::frobenius_norm(delta_w);
      layer_report.keys_kept = kept.size();
      layer_report.keys_deduped = B - kept.size();
      report.layers.push_back(layer_report);

      Matrix& w = model.layers[l].w_proj;
      for (std::size_t a = 0; a < F; ++a)
        for (std::size_t b = 0; b < D; ++b) w.at(a, b) += delta_w.at(b, a);
    }

    for (std::size_t i = 0; i < objectives.size(); ++i) {
      Matrix post = slot_probabilities(model, objectives[i], L, zero);
      InstanceReport& ir = report.instances[i];
      for (std::size_t j = 0; j < ir.targets.size(); ++j)
        ir.post_probs.push_back(post.at(j, ir.matched_slots[j]));
    }
  } catch (...) {
    for (std::size_t i = 0; i < config.critical_layers.size(); ++i)
      model.layers[config.critical_layers[i]].w_proj = snapshot[i];
    throw;
  }
  return report;
}

}  // namespace kse::editor
