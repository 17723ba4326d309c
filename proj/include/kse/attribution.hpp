#pragma once

#include <cstdint>
#include <functional>
#include <string>
#include <vector>

#include "kse/numerics.hpp"
#include "kse/toy_lm.hpp"

namespace kse::attr {

// Integrated-gradients scores for every FFN inner neuron, measured at the
// prompt's final position along the straight path from zero activations to
// the clean ones.
struct AttributionMap {
  num::Matrix scores;       // n_layers x d_ffn
  std::size_t ig_steps = 0;
  std::string baseline = "zero";
};

struct Neuron {
  std::size_t layer = 0;
  std::size_t index = 0;
  auto operator<=>(const Neuron&) const = default;
};
using NeuronSet = std::vector<Neuron>;  // sorted, no duplicates

// Midpoint-rule integrated gradients on the segment from the origin to x:
// out_i = x_i * mean_t grad(alpha_t)_i with alpha_t = (t - 0.5) / m.
// grad(alpha) must return dF/dx evaluated at alpha * x.
num::Vector ig_midpoint(const std::function<num::Vector(double)>& grad,
                        const num::Vector& x, std::size_t m);

// Attribution of P(target | prompt) to each inner neuron. All layers' inner
// vectors at the final position are scaled jointly, so the scores sum to
// approximately P(clean) - P(all inner vectors zeroed).
AttributionMap integrated_gradients(const lm::ToyLM& model, const std::string& prompt,
                                    const std::string& target, std::size_t m = 300);

// Raw inner activations at the prompt's final position, in the same layout
// as AttributionMap.scores. Exported alongside attributions so heatmaps of
// either quantity are explicit about which one they show.
num::Matrix inner_activations(const lm::ToyLM& model, const std::string& prompt);

// P(target | prompt) with every layer's final-position inner vector pinned
// to alpha times its clean value. alpha = 1 reproduces the clean probability;
// alpha = 0 is the attribution baseline.
double pinned_target_prob(const lm::ToyLM& model, const std::string& prompt,
                          const std::string& target, double alpha);

// Neurons scoring at least tau * max(scores). Empty (with a warning) when no
// score is positive; tau must lie in (0, 1].
NeuronSet select_knowledge_neurons(const AttributionMap& map, double tau = 0.2);

// Jaccard index |a ∩ b| / |a ∪ b|; 0 when both sets are empty.
double neuron_overlap(const NeuronSet& a, const NeuronSet& b);

// CSV with a layer,neuron,score row per grid cell, full precision.
void write_heatmap_csv(const num::Matrix& scores, const std::string& path);
void write_heatmap_csv(const AttributionMap& map, const std::string& path);
num::Matrix read_heatmap_csv(const std::string& path);

std::string neuron_set_to_json(const NeuronSet& set);
NeuronSet neuron_set_from_json(const std::string& text);

}  // namespace kse::attr
