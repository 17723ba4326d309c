#pragma once

#include <cstdint>
#include <string>
#include <utility>
#include <vector>

#include "kse/keo_data.hpp"
#include "kse/matching.hpp"
#include "kse/numerics.hpp"
#include "kse/toy_lm.hpp"

namespace kse::editor {

// Tokenized edit request for one instance. Slot k's context is the edit
// prompt followed by the top-(k-1) current objects in pre-edit probability
// order, joined by the separator token, so the residual is optimized against
// the same enumeration format the model was trained on.
struct EditObjective {
  std::string case_id;
  lm::TokenSeq edit_prompt;                 // rendered t_r(s), with BOS
  std::size_t injection_pos = 0;            // subject-last token in edit_prompt
  std::vector<std::string> targets;         // O*, size M <= N
  std::vector<lm::TokenSeq> target_tokens;  // parallel to targets
  std::vector<lm::TokenSeq> slot_contexts;  // N contexts sharing the prompt prefix
  std::vector<std::string> slot_objects;    // pre-edit objects in rank order
  lm::TokenSeq essence_prompt;              // "{subject} is a"
  std::size_t essence_injection_pos = 0;
  std::vector<double> essence_reference;    // log probs under the unedited model
  double kl_weight = 0.0;                   // effective weight, already scaled
};

enum class MatchMode { hungarian, identity };

struct EditPlan {
  std::vector<std::size_t> critical_layers;  // contiguous, ascending
  double lr = 0.5;
  std::size_t max_steps = 25;
  double early_stop_prob = 0.9;
  MatchMode match_mode = MatchMode::hungarian;
};

// Everything apply_edit needs beyond the instances themselves. The sample
// sentences feed covariance estimation; kl_weight_base is multiplied by the
// target count per instance.
struct EditorConfig {
  std::vector<std::size_t> critical_layers;
  double lr = 0.5;
  std::size_t max_steps = 25;
  double early_stop_prob = 0.9;
  MatchMode match_mode = MatchMode::hungarian;
  double kl_weight_base = 0.0625;
  double covariance_scale = 1.0;
  std::size_t covariance_samples = 256;
  std::string separator = ",";
  std::vector<std::string> sample_sentences;
  std::uint64_t seed = 0;
};

void validate_layers(const lm::ToyLM& model, const std::vector<std::size_t>& layers);

EditObjective build_objective(const lm::ToyLM& model, const keo::KSEInstance& inst,
                              double kl_weight_base, const std::string& separator = ",");

// Causal tracing: corrupt the subject embeddings with seeded Gaussian noise,
// then measure how much restoring each clean hidden state recovers the
// target probability.
struct TraceResult {
  num::Matrix scores;  // layers x positions, P_restored - P_corrupted
  double p_clean = 0.0;
  double p_corrupted = 0.0;
  bool degenerate = false;  // corruption failed to reduce the target probability
};

TraceResult causal_trace(const lm::ToyLM& model, const lm::TokenSeq& prompt,
                         std::pair<std::size_t, std::size_t> subject_span,
                         std::size_t target, double noise_scale, std::uint64_t seed);

struct ProbeFact {
  lm::TokenSeq prompt;
  std::pair<std::size_t, std::size_t> subject_span;  // inclusive token range
  std::size_t target = 0;
};

enum class LocateStrategy { config, trace };

// Trace strategy averages restoration at the subject-last position over the
// probes and returns a short contiguous band around the peak layer; it falls
// back to config_layers with a warning when no layer rises above noise.
std::vector<std::size_t> locate_layers(const lm::ToyLM& model,
                                       const std::vector<ProbeFact>& probes,
                                       LocateStrategy strategy,
                                       const std::vector<std::size_t>& config_layers,
                                       double noise_scale = 3.0, std::uint64_t seed = 0);

// P_k(y_j) grid (targets x slots): sequence probability of target j in slot
// k's context, with delta injected at the edit layer.
num::Matrix slot_probabilities(const lm::ToyLM& model, const EditObjective& obj,
                               std::size_t layer, const num::Vector& delta);

struct SetkeLoss {
  double total = 0.0;
  double edit_term = 0.0;
  double const_term = 0.0;
  num::Vector grad;
};

// Matched negative log likelihood plus the weighted essence KL constraint.
SetkeLoss setke_loss(const lm::ToyLM& model, const EditObjective& obj, std::size_t layer,
                     const num::Vector& delta, const match::Assignment& assignment,
                     bool want_grad = true);

struct DeltaResult {
  num::Vector delta;
  match::Assignment assignment;  // from the final evaluation
  std::size_t steps = 0;
  bool early_stopped = false;
  double final_loss = 0.0;
  std::vector<double> best_loss_trajectory;  // non-increasing
};

// Adam over delta, re-solving the assignment from fresh slot probabilities
// every step; returns the delta with the lowest observed total loss.
DeltaResult optimize_delta(const lm::ToyLM& model, const EditObjective& obj,
                           const EditPlan& plan);

// delta / (L - layer + 1) over the contiguous critical set ending at L.
num::Vector spread_residual(const num::Vector& delta,
                            const std::vector<std::size_t>& critical_layers,
                            std::size_t layer);

struct KeyCov {
  num::Matrix keys;        // d_ffn x n_kept
  num::Matrix covariance;  // d_ffn x d_ffn
  std::vector<std::size_t> kept;  // original edit-prompt index per kept column
};

// Keys are FFN inner activations at each prompt's injection position;
// bit-identical key columns are deduplicated with a warning. The covariance
// averages outer products over every non-BOS position of the sample prompts.
KeyCov compute_keys_and_covariance(const lm::ToyLM& model, std::size_t layer,
                                   const std::vector<lm::TokenSeq>& edit_prompts,
                                   const std::vector<std::size_t>& injection_positions,
                                   const std::vector<lm::TokenSeq>& sample_prompts,
                                   double covariance_scale);

// One forward per sample prompt, accumulating each requested layer's scaled
// second-moment matrix in a single pass.
std::vector<num::Matrix> sample_covariances(const lm::ToyLM& model,
                                            const std::vector<std::size_t>& layers,
                                            const std::vector<lm::TokenSeq>& sample_prompts,
                                            double covariance_scale);

struct InstanceReport {
  std::string case_id;
  std::vector<std::string> targets;
  std::vector<std::size_t> matched_slots;  // slot index per target
  std::vector<double> pre_probs;           // at the matched slot, before editing
  std::vector<double> post_probs;          // at the matched slot, after editing
  double delta_norm = 0.0;
  std::size_t opt_steps = 0;
  bool early_stopped = false;
};

struct LayerReport {
  std::size_t layer = 0;
  double solve_residual = 0.0;
  double delta_fro = 0.0;
  std::size_t keys_kept = 0;
  std::size_t keys_deduped = 0;
};

struct EditReport {
  std::vector<InstanceReport> instances;
  std::vector<LayerReport> layers;
};

// The full pipeline over one batch: optimize one residual per instance at the
// last critical layer, then walk the critical layers in ascending order,
// each time re-measuring the remaining gap to z = v + delta under the
// weights edited so far and closing 1/(L - l + 1) of it. Any failure
// restores the pre-edit weights.
EditReport apply_edit(lm::ToyLM& model, const std::vector<keo::KSEInstance>& instances,
                      const EditorConfig& config);

}  // namespace kse::editor
