#include "kse/attribution.hpp"

#include <algorithm>
#include <cmath>
#include <cstdio>
#include <fstream>
#include <sstream>

#include "kse/common.hpp"
#include "json.hpp"

namespace kse::attr {

num::Vector ig_midpoint(const std::function<num::Vector(double)>& grad,
                        const num::Vector& x, std::size_t m) {
  require(m >= 1, "attribution: ig steps must be at least 1");
  num::Vector acc(x.dim(), 0.0);
  for (std::size_t t = 1; t <= m; ++t) {
    double alpha = (static_cast<double>(t) - 0.5) / static_cast<double>(m);
    num::Vector g = grad(alpha);
    require(g.dim() == x.dim(), "attribution: gradient dimension mismatch");
    require(g.all_finite(), "attribution: non-finite gradient");
    for (std::size_t i = 0; i < x.dim(); ++i) acc[i] += g[i];
  }
  num::Vector out(x.dim(), 0.0);
  for (std::size_t i = 0; i < x.dim(); ++i)
    out[i] = x[i] * acc[i] / static_cast<double>(m);
  return out;
}

namespace {

struct PromptState {
  lm::TokenSeq tokens;
  std::size_t pos = 0;
  std::vector<num::Vector> inner;  // clean per-layer inner vectors at pos
};

PromptState prompt_state(const lm::ToyLM& model, const std::string& prompt) {
  PromptState st;
  st.tokens = model.tokenizer.encode_with_bos(prompt);
  st.pos = st.tokens.size() - 1;
  lm::ForwardTrace trace = lm::forward(model, st.tokens);
  st.inner.reserve(model.config.n_layers);
  for (std::size_t l = 0; l < model.config.n_layers; ++l) {
    num::Vector v(model.config.d_ffn, 0.0);
    const double* row = trace.ffn_inner[l].row(st.pos);
    std::copy(row, row + model.config.d_ffn, v.data.begin());
    st.inner.push_back(std::move(v));
  }
  return st;
}

lm::Hooks pin_all_layers(const PromptState& st, double alpha) {
  lm::Hooks hooks;
  hooks.inner_pins.reserve(st.inner.size());
  for (std::size_t l = 0; l < st.inner.size(); ++l) {
    lm::InnerPin pin;
    pin.layer = l;
    pin.pos = st.pos;
    pin.values = num::Vector(st.inner[l].dim(), 0.0);
    for (std::size_t i = 0; i < pin.values.dim(); ++i)
      pin.values[i] = alpha * st.inner[l][i];
    hooks.inner_pins.push_back(std::move(pin));
  }
  return hooks;
}

}  // namespace

AttributionMap integrated_gradients(const lm::ToyLM& model, const std::string& prompt,
                                    const std::string& target, std::size_t m) {
  require(model.tokenizer.contains(target), "attribution: unknown target word");
  std::size_t target_id = model.tokenizer.id(target);
  PromptState st = prompt_state(model, prompt);

  std::size_t d_ffn = model.config.d_ffn;
  num::Vector x(model.config.n_layers * d_ffn, 0.0);
  for (std::size_t l = 0; l < model.config.n_layers; ++l)
    for (std::size_t i = 0; i < d_ffn; ++i) x[l * d_ffn + i] = st.inner[l][i];

  auto grad = [&](double alpha) {
    lm::Hooks hooks = pin_all_layers(st, alpha);
    lm::ForwardTrace trace = lm::forward(model, st.tokens, hooks);
    std::vector<double> lp = trace.log_probs_at(st.pos);
    double p_target = std::exp(lp[target_id]);
    num::Matrix d_logits(st.tokens.size(), model.config.vocab_size, 0.0);
    for (std::size_t v = 0; v < model.config.vocab_size; ++v) {
      double indicator = v == target_id ? 1.0 : 0.0;
      d_logits.at(st.pos, v) = p_target * (indicator - std::exp(lp[v]));
    }
    lm::ActivationGrads grads =
        lm::backward_activations(model, st.tokens, hooks, d_logits);
    num::Vector flat(x.dim(), 0.0);
    for (std::size_t l = 0; l < grads.d_inner_pins.size(); ++l)
      for (std::size_t i = 0; i < d_ffn; ++i)
        flat[l * d_ffn + i] = grads.d_inner_pins[l][i];
    return flat;
  };

  num::Vector scores = ig_midpoint(grad, x, m);
  AttributionMap map;
  map.ig_steps = m;
  map.scores = num::Matrix(model.config.n_layers, d_ffn, 0.0);
  for (std::size_t l = 0; l < model.config.n_layers; ++l)
    for (std::size_t i = 0; i < d_ffn; ++i)
      map.scores.at(l, i) = scores[l * d_ffn + i];
  return map;
}

num::Matrix inner_activations(const lm::ToyLM& model, const std::string& prompt) {
  PromptState st = prompt_state(model, prompt);
  num::Matrix out(model.config.n_layers, model.config.d_ffn, 0.0);
  for (std::size_t l = 0; l < st.inner.size(); ++l)
    for (std::size_t i = 0; i < st.inner[l].dim(); ++i)
      out.at(l, i) = st.inner[l][i];
  return out;
}

double pinned_target_prob(const lm::ToyLM& model, const std::string& prompt,
                          const std::string& target, double alpha) {
  require(model.tokenizer.contains(target), "attribution: unknown target word");
  PromptState st = prompt_state(model, prompt);
  lm::Hooks hooks = pin_all_layers(st, alpha);
  lm::ForwardTrace trace = lm::forward(model, st.tokens, hooks);
  return std::exp(trace.log_probs_at(st.pos)[model.tokenizer.id(target)]);
}

NeuronSet select_knowledge_neurons(const AttributionMap& map, double tau) {
  require(tau > 0.0 && tau <= 1.0, "attribution: tau must lie in (0, 1]");
  double max_score = 0.0;
  for (double s : map.scores.data) max_score = std::max(max_score, s);
  if (max_score <= 0.0) {
    log_warn("attribution: no positive scores; empty neuron set");
    return {};
  }
  NeuronSet set;
  for (std::size_t l = 0; l < map.scores.rows; ++l)
    for (std::size_t i = 0; i < map.scores.cols; ++i)
      if (map.scores.at(l, i) >= tau * max_score) set.push_back({l, i});
  return set;
}

double neuron_overlap(const NeuronSet& a, const NeuronSet& b) {
  if (a.empty() && b.empty()) return 0.0;
  std::size_t inter = 0;
  auto ia = a.begin();
  auto ib = b.begin();
  while (ia != a.end() && ib != b.end()) {
    if (*ia < *ib) ++ia;
    else if (*ib < *ia) ++ib;
    else { ++inter; ++ia; ++ib; }
  }
  std::size_t uni = a.size() + b.size() - inter;
  return static_cast<double>(inter) / static_cast<double>(uni);
}

void write_heatmap_csv(const num::Matrix& scores, const std::string& path) {
  std::ofstream out(path);
  require(out.good(), "attribution: cannot open " + path);
  out << "layer,neuron,score\n";
  char buf[64];
  for (std::size_t l = 0; l < scores.rows; ++l)
    for (std::size_t i = 0; i < scores.cols; ++i) {
      std::snprintf(buf, sizeof buf, "%.17g", scores.at(l, i));
      out << l << ',' << i << ',' << buf << '\n';
    }
  require(out.good(), "attribution: write failed for " + path);
}

void write_heatmap_csv(const AttributionMap& map, const std::string& path) {
  write_heatmap_csv(map.scores, path);
}

num::Matrix read_heatmap_csv(const std::string& path) {
  std::ifstream in(path);
  require(in.good(), "attribution: cannot open " + path);
  std::string line;
  require(static_cast<bool>(std::getline(in, line)), "attribution: empty file " + path);
  require(line == "layer,neuron,score", "attribution: bad header in " + path);
  struct Cell { std::size_t layer, neuron; double score; };
  std::vector<Cell> cells;
  std::size_t max_layer = 0, max_neuron = 0;
  while (std::getline(in, line)) {
    if (line.empty()) continue;
    Cell c{};
    std::size_t p1 = line.find(',');
    std::size_t p2 = line.find(',', p1 + 1);
    require(p1 != std::string::npos && p2 != std::string::npos,
            "attribution: bad row in " + path);
    c.layer = std::stoull(line.substr(0, p1));
    c.neuron = std::stoull(line.substr(p1 + 1, p2 - p1 - 1));
    c.score = std::strtod(line.c_str() + p2 + 1, nullptr);
    max_layer = std::max(max_layer, c.layer);
    max_neuron = std::max(max_neuron, c.neuron);
    cells.push_back(c);
  }
  if (cells.empty()) return {};
  num::Matrix out(max_layer + 1, max_neuron + 1, 0.0);
  for (const Cell& c : cells) out.at(c.layer, c.neuron) = c.score;
  return out;
}

std::string neuron_set_to_json(const NeuronSet& set) {
  nlohmann::json arr = nlohmann::json::array();
  for (const Neuron& n : set) arr.push_back({n.layer, n.index});
  return arr.dump();
}

NeuronSet neuron_set_from_json(const std::string& text) {
  nlohmann::json arr = nlohmann::json::parse(text);
  require(arr.is_array(), "attribution: neuron set must be a JSON array");
  NeuronSet set;
  for (const auto& item : arr) {
    require(item.is_array() && item.size() == 2,
            "attribution: neuron entries must be [layer, neuron]");
    set.push_back({item[0].get<std::size_t>(), item[1].get<std::size_t>()});
  }
  require(std::is_sorted(set.begin(), set.end()),
          "attribution: neuron set must be sorted");
  return set;
}

}  // namespace kse::attr
