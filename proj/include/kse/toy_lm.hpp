#pragma once

#include <cstdint>
#include <optional>
#include <string>
#include <unordered_map>
#include <vector>

#include "kse/numerics.hpp"

namespace kse::lm {

using TokenSeq = std::vector<std::size_t>;

// Word-level tokenizer over a closed vocabulary. Sentences are split on
// whitespace; every distinct word becomes one token. Encoding unknown words
// is an error, so corpora must be built before models.
struct Tokenizer {
  std::vector<std::string> vocab;
  std::unordered_map<std::string, std::size_t> index;

  static constexpr const char* kBos = "<s>";

  static Tokenizer build(const std::vector<std::string>& sentences);

  std::size_t id(const std::string& word) const;
  bool contains(const std::string& word) const;
  TokenSeq encode(const std::string& text) const;          // no BOS
  TokenSeq encode_with_bos(const std::string& text) const; // BOS prepended
  std::string decode(const TokenSeq& tokens) const;
};

// Index of the last token of the needle's final occurrence inside haystack,
// or nullopt when absent.
std::optional<std::size_t> find_subsequence_last(const TokenSeq& haystack,
                                                 const TokenSeq& needle);

struct ModelConfig {
  std::size_t vocab_size = 0;  // filled from the tokenizer when 0
  std::size_t d_model = 64;
  std::size_t n_layers = 8;
  std::size_t n_heads = 4;
  std::size_t d_ffn = 256;
  std::size_t max_seq_len = 64;
  std::uint64_t seed = 42;
};

struct LayerWeights {
  num::Matrix ln1_g, ln1_b;
  num::Matrix w_qkv, b_qkv;      // d_model x 3*d_model
  num::Matrix w_att_proj, b_att_proj;
  num::Matrix ln2_g, ln2_b;
  num::Matrix w_fc, b_fc;        // d_model x d_ffn
  num::Matrix w_proj, b_proj;    // d_ffn x d_model
};

// Pre-norm decoder-only transformer with learned positional embeddings and a
// tied output head, all in doubles so runs are reproducible bit-for-bit.
struct ToyLM {
  ModelConfig config;
  Tokenizer tokenizer;
  num::Matrix wte;  // vocab x d_model
  num::Matrix wpe;  // max_seq_len x d_model
  std::vector<LayerWeights> layers;
  num::Matrix lnf_g, lnf_b;

  // Module-path addressing, e.g. "transformer.h.3.mlp.c_proj" or
  // "transformer.wte". Returns nullptr for unknown names.
  num::Matrix* tensor_by_name(const std::string& name);
  const num::Matrix* tensor_by_name(const std::string& name) const;
  std::vector<std::string> tensor_names() const;
};

std::string mlp_proj_name(std::size_t layer);
std::string mlp_fc_name(std::size_t layer);

ToyLM init_model(ModelConfig cfg, Tokenizer tokenizer);

// Forward-pass interventions. All positions are indices into the token
// sequence; all layers are block indices in [0, n_layers).
struct Injection {          // added to the FFN block output before the residual add
  std::size_t layer = 0, pos = 0;
  num::Vector delta;
};
struct ResidualOverride {   // replaces the residual stream right after the block
  std::size_t layer = 0, pos = 0;
  num::Vector state;
};
struct EmbeddingDelta {     // added to token+position embedding
  std::size_t pos = 0;
  num::Vector delta;
};
struct InnerPin {           // replaces the post-activation FFN inner vector
  std::size_t layer = 0, pos = 0;
  num::Vector values;
};

struct Hooks {
  std::vector<Injection> injections;
  std::vector<ResidualOverride> residual_overrides;
  std::vector<EmbeddingDelta> embedding_deltas;
  std::vector<InnerPin> inner_pins;
  bool empty() const {
    return injections.empty() && residual_overrides.empty() &&
           embedding_deltas.empty() && inner_pins.empty();
  }
};

struct ForwardTrace {
  std::size_t n_tokens = 0;
  num::Matrix logits;                    // T x vocab
  std::vector<num::Matrix> ffn_out;      // per layer, T x d_model, after injections
  std::vector<num::Matrix> ffn_inner;    // per layer, T x d_ffn, after pins
  std::vector<num::Matrix> residual_out; // per layer, T x d_model, after overrides

  std::vector<double> log_probs_at(std::size_t pos) const;  // log softmax row
  num::Distribution next_token_distribution(std::size_t pos) const;
};

ForwardTrace forward(const ToyLM& model, const TokenSeq& tokens,
                     const Hooks& hooks = {});

// Teacher-forced log probability of the continuation after the prompt.
// length_normalized divides by the continuation length.
double sequence_logprob(const ToyLM& model, const TokenSeq& prompt,
                        const TokenSeq& continuation, const Hooks& hooks = {},
                        bool length_normalized = false);

TokenSeq greedy_decode(const ToyLM& model, TokenSeq prompt, std::size_t n_new);

// One scored term of a residual-injection loss: weight * (-log P) of the
// continuation after the prompt, with delta injected at injection_pos.
struct NllTerm {
  TokenSeq prompt;
  TokenSeq continuation;
  std::size_t injection_pos = 0;
  double weight = 1.0;
};

// weight * KL(model-with-delta || reference) over the next-token distribution
// at the prompt's final position.
struct KlTerm {
  TokenSeq prompt;
  std::size_t injection_pos = 0;
  double weight = 1.0;
  std::vector<double> reference_log_probs;
};

struct DeltaLossSpec {
  std::vector<NllTerm> nll_terms;
  std::vector<KlTerm> kl_terms;
  double l2_weight = 0.0;  // adds l2_weight * ||delta||^2
};

// Loss value at the given delta, injected at (layer, per-term position).
double delta_loss(const ToyLM& model, const DeltaLossSpec& spec,
                  std::size_t layer, const num::Vector& delta);

// dL/d(delta) via reverse-mode differentiation. loss_out, when given,
// receives the loss value from the same passes.
num::Vector grad_wrt_delta(const ToyLM& model, const DeltaLossSpec& spec,
                           std::size_t layer, const num::Vector& delta,
                           double* loss_out = nullptr);

// Gradient of an arbitrary scalar with caller-supplied dS/dlogits, plus the
// gradients at every pinned inner vector (ordered as hooks.inner_pins).
struct ActivationGrads {
  num::Vector d_injection;              // for hooks.injections[0] when present
  std::vector<num::Vector> d_inner_pins;
};
ActivationGrads backward_activations(const ToyLM& model, const TokenSeq& tokens,
                                     const Hooks& hooks,
                                     const num::Matrix& d_logits);

// Summed NLL loss over the terms (no injections), with weight-space
// gradients restricted to the FFN projection matrices of the given layers.
struct ProjGrads {
  double loss = 0.0;
  std::vector<num::Matrix> w_proj;  // parallel to the layers argument
  std::vector<num::Matrix> b_proj;
};
ProjGrads nll_proj_grads(const ToyLM& model, const std::vector<NllTerm>& terms,
                         const std::vector<std::size_t>& layers);

struct TrainOptions {
  std::size_t epochs = 40;
  double lr = 1e-3;
  std::size_t batch_size = 32;
  double grad_clip = 1.0;
  // Stddev of Gaussian noise added to token embeddings during training, in
  // units of the embedding RMS. Smooths the learned readout so hidden states
  // near the data manifold decode gracefully instead of falling off a cliff.
  double emb_noise = 0.0;
};

ToyLM train_toy(const ModelConfig& cfg, const std::vector<std::string>& corpus,
                std::size_t epochs, double lr);
ToyLM train_toy(const ModelConfig& cfg, const std::vector<std::string>& corpus,
                const TrainOptions& opts);

void save_checkpoint(const ToyLM& model, const std::string& path);
ToyLM load_checkpoint(const std::string& path);

}  // namespace kse::lm
