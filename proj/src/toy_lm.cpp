#include "kse/toy_lm.hpp"

#include <algorithm>
#include <cmath>
#include <cstdio>
#include <cstring>
#include <fstream>
#include <numeric>
#include <sstream>

#include "json.hpp"
#include "kse/common.hpp"

namespace kse::lm {

using num::Matrix;
using num::Vector;

// ---------------------------------------------------------------------------
// Tokenizer

Tokenizer Tokenizer::build(const std::vector<std::string>& sentences) {
  std::vector<std::string> words;
  for (const auto& s : sentences) {
    std::istringstream in(s);
    std::string w;
    while (in >> w) words.push_back(w);
  }
  std::sort(words.begin(), words.end());
  words.erase(std::unique(words.begin(), words.end()), words.end());

  Tokenizer t;
  t.vocab.push_back(kBos);
  for (auto& w : words)
    if (w != kBos) t.vocab.push_back(std::move(w));
  for (std::size_t i = 0; i < t.vocab.size(); ++i) t.index[t.vocab[i]] = i;
  return t;
}

std::size_t Tokenizer::id(const std::string& word) const {
  auto it = index.find(word);
  if (it == index.end()) fail("tokenizer: unknown word '" + word + "'");
  return it->second;
}

bool Tokenizer::contains(const std::string& word) const {
  return index.count(word) != 0;
}

TokenSeq Tokenizer::encode(const std::string& text) const {
  TokenSeq out;
  std::istringstream in(text);
  std::string w;
  while (in >> w) out.push_back(id(w));
  return out;
}

TokenSeq Tokenizer::encode_with_bos(const std::string& text) const {
  TokenSeq out{id(kBos)};
  TokenSeq body = encode(text);
  out.insert(out.end(), body.begin(), body.end());
  return out;
}

std::string Tokenizer::decode(const TokenSeq& tokens) const {
  std::string out;
  for (std::size_t i = 0; i < tokens.size(); ++i) {
    require(tokens[i] < vocab.size(), "tokenizer: token id out of range");
    if (i) out += ' ';
    out += vocab[tokens[i]];
  }
  return out;
}

std::optional<std::size_t> find_subsequence_last(const TokenSeq& haystack,
                                                 const TokenSeq& needle) {
  if (needle.empty() || needle.size() > haystack.size()) return std::nullopt;
  for (std::size_t start = haystack.size() - needle.size() + 1; start-- > 0;) {
    bool hit = true;
    for (std::size_t j = 0; j < needle.size(); ++j) {
      if (haystack[start + j] != needle[j]) {
        hit = false;
        break;
      }
    }
    if (hit) return start + needle.size() - 1;
  }
  return std::nullopt;
}

// ---------------------------------------------------------------------------
// Model construction and addressing

std::string mlp_proj_name(std::size_t layer) {
  return "transformer.h." + std::to_string(layer) + ".mlp.c_proj";
}
std::string mlp_fc_name(std::size_t layer) {
  return "transformer.h." + std::to_string(layer) + ".mlp.c_fc";
}

namespace {

void fill_normal(Matrix& m, std::mt19937_64& rng, double stddev) {
  std::normal_distribution<double> dist(0.0, stddev);
  for (double& v : m.data) v = dist(rng);
}

struct NamedTensor {
  std::string name;
  Matrix* tensor;
};

std::vector<NamedTensor> named_tensors(ToyLM& m) {
  std::vector<NamedTensor> out;
  out.push_back({"transformer.wte", &m.wte});
  out.push_back({"transformer.wpe", &m.wpe});
  for (std::size_t l = 0; l < m.layers.size(); ++l) {
    const std::string p = "transformer.h." + std::to_string(l) + ".";
    LayerWeights& lw = m.layers[l];
    out.push_back({p + "ln_1.weight", &lw.ln1_g});
    out.push_back({p + "ln_1.bias", &lw.ln1_b});
    out.push_back({p + "attn.c_attn.weight", &lw.w_qkv});
    out.push_back({p + "attn.c_attn.bias", &lw.b_qkv});
    out.push_back({p + "attn.c_proj.weight", &lw.w_att_proj});
    out.push_back({p + "attn.c_proj.bias", &lw.b_att_proj});
    out.push_back({p + "ln_2.weight", &lw.ln2_g});
    out.push_back({p + "ln_2.bias", &lw.ln2_b});
    out.push_back({p + "mlp.c_fc.weight", &lw.w_fc});
    out.push_back({p + "mlp.c_fc.bias", &lw.b_fc});
    out.push_back({p + "mlp.c_proj.weight", &lw.w_proj});
    out.push_back({p + "mlp.c_proj.bias", &lw.b_proj});
  }
  out.push_back({"transformer.ln_f.weight", &m.lnf_g});
  out.push_back({"transformer.ln_f.bias", &m.lnf_b});
  return out;
}

}  // namespace

num::Matrix* ToyLM::tensor_by_name(const std::string& name) {
  for (auto& nt : named_tensors(*this)) {
    if (nt.name == name) return nt.tensor;
    // A bare module address refers to its weight matrix.
    if (nt.name == name + ".weight") return nt.tensor;
  }
  return nullptr;
}

const num::Matrix* ToyLM::tensor_by_name(const std::string& name) const {
  return const_cast<ToyLM*>(this)->tensor_by_name(name);
}

std::vector<std::string> ToyLM::tensor_names() const {
  std::vector<std::string> out;
  for (auto& nt : named_tensors(const_cast<ToyLM&>(*this))) out.push_back(nt.name);
  return out;
}

ToyLM init_model(ModelConfig cfg, Tokenizer tokenizer) {
  if (cfg.vocab_size == 0) cfg.vocab_size = tokenizer.vocab.size();
  require(cfg.vocab_size == tokenizer.vocab.size(),
          "init_model: config vocab size does not match tokenizer");
  require(cfg.d_model >= 1 && cfg.n_layers >= 1 && cfg.n_heads >= 1 &&
              cfg.d_ffn >= 1 && cfg.max_seq_len >= 1,
          "init_model: all counts must be >= 1");
  require(cfg.d_model % cfg.n_heads == 0,
          "init_model: d_model must be divisible by n_heads");

  ToyLM m;
  m.config = cfg;
  m.tokenizer = std::move(tokenizer);
  const std::size_t D = cfg.d_model, F = cfg.d_ffn;
  m.wte = Matrix(cfg.vocab_size, D);
  m.wpe = Matrix(cfg.max_seq_len, D);
  m.layers.resize(cfg.n_layers);
  for (auto& lw : m.layers) {
    lw.ln1_g = Matrix(1, D);
    lw.ln1_b = Matrix(1, D);
    lw.w_qkv = Matrix(D, 3 * D);
    lw.b_qkv = Matrix(1, 3 * D);
    lw.w_att_proj = Matrix(D, D);
    lw.b_att_proj = Matrix(1, D);
    lw.ln2_g = Matrix(1, D);
    lw.ln2_b = Matrix(1, D);
    lw.w_fc = Matrix(D, F);
    lw.b_fc = Matrix(1, F);
    lw.w_proj = Matrix(F, D);
    lw.b_proj = Matrix(1, D);
  }
  m.lnf_g = Matrix(1, D);
  m.lnf_b = Matrix(1, D);

  const double base = 0.02;
  const double resid = base / std::sqrt(2.0 * static_cast<double>(cfg.n_layers));
  for (auto& nt : named_tensors(m)) {
    const std::string& n = nt.name;
    if (n.find("ln_") != std::string::npos) {
      double v = n.ends_with(".weight") ? 1.0 : 0.0;
      std::fill(nt.tensor->data.begin(), nt.tensor->data.end(), v);
    } else if (n.ends_with(".bias")) {
      std::fill(nt.tensor->data.begin(), nt.tensor->data.end(), 0.0);
    } else {
      std::mt19937_64 rng = substream(cfg.seed, n);
      bool is_resid = n.ends_with("attn.c_proj.weight") || n.ends_with("mlp.c_proj.weight");
      fill_normal(*nt.tensor, rng, is_resid ? resid : base);
    }
  }
  return m;
}

// ---------------------------------------------------------------------------
// Forward pass with caches

namespace {

constexpr double kLnEps = 1e-5;

double gelu(double x) { return 0.5 * x * (1.0 + std::erf(x / std::sqrt(2.0))); }

double gelu_deriv(double x) {
  const double cdf = 0.5 * (1.0 + std::erf(x / std::sqrt(2.0)));
  const double pdf = std::exp(-0.5 * x * x) / std::sqrt(2.0 * M_PI);
  return cdf + x * pdf;
}

struct LnCache {
  std::vector<double> mean, rstd;
};

// y = (x - mean)/std * g + b, row-wise.
Matrix layer_norm(const Matrix& x, const Matrix& g, const Matrix& b, LnCache& cache) {
  const std::size_t T = x.rows, D = x.cols;
  Matrix y(T, D);
  cache.mean.resize(T);
  cache.rstd.resize(T);
  for (std::size_t t = 0; t < T; ++t) {
    const double* xr = x.row(t);
    double mu = 0.0;
    for (std::size_t j = 0; j < D; ++j) mu += xr[j];
    mu /= static_cast<double>(D);
    double var = 0.0;
    for (std::size_t j = 0; j < D; ++j) var += (xr[j] - mu) * (xr[j] - mu);
    var /= static_cast<double>(D);
    const double rstd = 1.0 / std::sqrt(var + kLnEps);
    cache.mean[t] = mu;
    cache.rstd[t] = rstd;
    double* yr = y.row(t);
    for (std::size_t j = 0; j < D; ++j)
      yr[j] = (xr[j] - mu) * rstd * g.data[j] + b.data[j];
  }
  return y;
}

// dx for the row-wise layer norm; accumulates dg/db when given.
Matrix layer_norm_backward(const Matrix& x, const LnCache& cache, const Matrix& g,
                           const Matrix& dy, Matrix* dg, Matrix* db) {
  const std::size_t T = x.rows, D = x.cols;
  Matrix dx(T, D);
  for (std::size_t t = 0; t < T; ++t) {
    const double* xr = x.row(t);
    const double* dyr = dy.row(t);
    double* dxr = dx.row(t);
    const double mu = cache.mean[t], rstd = cache.rstd[t];
    double mean_dxhat = 0.0, mean_dxhat_xhat = 0.0;
    for (std::size_t j = 0; j < D; ++j) {
      const double xhat = (xr[j] - mu) * rstd;
      const double dxhat = dyr[j] * g.data[j];
      mean_dxhat += dxhat;
      mean_dxhat_xhat += dxhat * xhat;
      if (dg) dg->data[j] += dyr[j] * xhat;
      if (db) db->data[j] += dyr[j];
    }
    mean_dxhat /= static_cast<double>(D);
    mean_dxhat_xhat /= static_cast<double>(D);
    for (std::size_t j = 0; j < D; ++j) {
      const double xhat = (xr[j] - mu) * rstd;
      const double dxhat = dyr[j] * g.data[j];
      dxr[j] = rstd * (dxhat - mean_dxhat - xhat * mean_dxhat_xhat);
    }
  }
  return dx;
}

// x @ w + b with a broadcast bias row.
Matrix affine(const Matrix& x, const Matrix& w, const Matrix& b) {
  Matrix y = num::matmul(x, w);
  for (std::size_t t = 0; t < y.rows; ++t) {
    double* yr = y.row(t);
    for (std::size_t j = 0; j < y.cols; ++j) yr[j] += b.data[j];
  }
  return y;
}

struct LayerCache {
  Matrix x_in;
  LnCache ln1;
  Matrix ln1_out;
  Matrix qkv;
  std::vector<Matrix> att_probs;  // per head, T x T (zero above diagonal)
  Matrix ctx;
  Matrix x_mid;
  LnCache ln2;
  Matrix ln2_out;
  Matrix inner_pre;
  Matrix inner;     // post-activation, post-pin
  Matrix ffn_out;   // post-projection, post-injection
  Matrix x_out;     // post-residual, post-override
};

struct FullCache {
  Matrix x0;
  std::vector<LayerCache> layers;
  LnCache lnf;
  Matrix lnf_out;
  Matrix logits;
};

void validate_hooks(const ToyLM& m, const Hooks& hooks, std::size_t T) {
  const std::size_t L = m.config.n_layers;
  for (const auto& h : hooks.injections) {
    require(h.layer < L, "forward: injection layer out of range");
    require(h.pos < T, "forward: injection position out of range");
    require(h.delta.dim() == m.config.d_model, "forward: injection width mismatch");
  }
  for (const auto& h : hooks.residual_overrides) {
    require(h.layer < L, "forward: override layer out of range");
    require(h.pos < T, "forward: override position out of range");
    require(h.state.dim() == m.config.d_model, "forward: override width mismatch");
  }
  for (const auto& h : hooks.embedding_deltas) {
    require(h.pos < T, "forward: embedding delta position out of range");
    require(h.delta.dim() == m.config.d_model, "forward: embedding delta width mismatch");
  }
  for (const auto& h : hooks.inner_pins) {
    require(h.layer < L, "forward: pin layer out of range");
    require(h.pos < T, "forward: pin position out of range");
    require(h.values.dim() == m.config.d_ffn, "forward: pin width mismatch");
  }
}

FullCache run_forward(const ToyLM& m, const TokenSeq& tokens, const Hooks& hooks) {
  const std::size_t T = tokens.size();
  require(T >= 1, "forward: empty token sequence");
  require(T <= m.config.max_seq_len, "forward: sequence longer than max_seq_len");
  for (std::size_t tok : tokens)
    require(tok < m.config.vocab_size, "forward: token id out of range");
  validate_hooks(m, hooks, T);

  const std::size_t D = m.config.d_model, F = m.config.d_ffn;
  const std::size_t H = m.config.n_heads, dh = D / H;
  const double att_scale = 1.0 / std::sqrt(static_cast<double>(dh));

  FullCache c;
  c.x0 = Matrix(T, D);
  for (std::size_t t = 0; t < T; ++t) {
    const double* te = m.wte.row(tokens[t]);
    const double* pe = m.wpe.row(t);
    double* xr = c.x0.row(t);
    for (std::size_t j = 0; j < D; ++j) xr[j] = te[j] + pe[j];
  }
  for (const auto& h : hooks.embedding_deltas) {
    double* xr = c.x0.row(h.pos);
    for (std::size_t j = 0; j < D; ++j) xr[j] += h.delta[j];
  }

  Matrix x = c.x0;
  c.layers.resize(m.config.n_layers);
  for (std::size_t l = 0; l < m.config.n_layers; ++l) {
    const LayerWeights& lw = m.layers[l];
    LayerCache& lc = c.layers[l];
    lc.x_in = x;

    lc.ln1_out = layer_norm(x, lw.ln1_g, lw.ln1_b, lc.ln1);
    lc.qkv = affine(lc.ln1_out, lw.w_qkv, lw.b_qkv);

    lc.ctx = Matrix(T, D);
    lc.att_probs.assign(H, Matrix(T, T));
    for (std::size_t h = 0; h < H; ++h) {
      const std::size_t qo = h * dh, ko = D + h * dh, vo = 2 * D + h * dh;
      Matrix& probs = lc.att_probs[h];
      for (std::size_t i = 0; i < T; ++i) {
        const double* qi = lc.qkv.row(i) + qo;
        double maxs = -std::numeric_limits<double>::infinity();
        std::vector<double> s(i + 1);
        for (std::size_t j = 0; j <= i; ++j) {
          const double* kj = lc.qkv.row(j) + ko;
          double acc = 0.0;
          for (std::size_t d = 0; d < dh; ++d) acc += qi[d] * kj[d];
          s[j] = acc * att_scale;
          maxs = std::max(maxs, s[j]);
        }
        double denom = 0.0;
        for (std::size_t j = 0; j <= i; ++j) {
          s[j] = std::exp(s[j] - maxs);
          denom += s[j];
        }
        double* pr = probs.row(i);
        for (std::size_t j = 0; j <= i; ++j) pr[j] = s[j] / denom;
        double* ci = lc.ctx.row(i) + qo;
        for (std::size_t j = 0; j <= i; ++j) {
          const double* vj = lc.qkv.row(j) + vo;
          const double p = pr[j];
          for (std::size_t d = 0; d < dh; ++d) ci[d] += p * vj[d];
        }
      }
    }
    Matrix att_out = affine(lc.ctx, lw.w_att_proj, lw.b_att_proj);
    lc.x_mid = num::add(x, att_out);

    lc.ln2_out = layer_norm(lc.x_mid, lw.ln2_g, lw.ln2_b, lc.ln2);
    lc.inner_pre = affine(lc.ln2_out, lw.w_fc, lw.b_fc);
    lc.inner = lc.inner_pre;
    for (double& v : lc.inner.data) v = gelu(v);
    for (const auto& pin : hooks.inner_pins) {
      if (pin.layer != l) continue;
      double* row = lc.inner.row(pin.pos);
      for (std::size_t j = 0; j < F; ++j) row[j] = pin.values[j];
    }

    lc.ffn_out = affine(lc.inner, lw.w_proj, lw.b_proj);
    for (const auto& inj : hooks.injections) {
      if (inj.layer != l) continue;
      double* row = lc.ffn_out.row(inj.pos);
      for (std::size_t j = 0; j < D; ++j) row[j] += inj.delta[j];
    }

    lc.x_out = num::add(lc.x_mid, lc.ffn_out);
    for (const auto& ov : hooks.residual_overrides) {
      if (ov.layer != l) continue;
      double* row = lc.x_out.row(ov.pos);
      for (std::size_t j = 0; j < D; ++j) row[j] = ov.state[j];
    }
    x = lc.x_out;
  }

  c.lnf_out = layer_norm(x, m.lnf_g, m.lnf_b, c.lnf);
  c.logits = num::matmul_nt(c.lnf_out, m.wte);
  return c;
}

// Weight-shaped gradient accumulator.
struct WeightGrads {
  Matrix wte, wpe;
  std::vector<LayerWeights> layers;
  Matrix lnf_g, lnf_b;
};

WeightGrads zero_grads(const ToyLM& m) {
  WeightGrads g;
  g.wte = Matrix(m.wte.rows, m.wte.cols);
  g.wpe = Matrix(m.wpe.rows, m.wpe.cols);
  g.layers.resize(m.layers.size());
  for (std::size_t l = 0; l < m.layers.size(); ++l) {
    const LayerWeights& lw = m.layers[l];
    LayerWeights& gl = g.layers[l];
    gl.ln1_g = Matrix(1, lw.ln1_g.cols);
    gl.ln1_b = Matrix(1, lw.ln1_b.cols);
    gl.w_qkv = Matrix(lw.w_qkv.rows, lw.w_qkv.cols);
    gl.b_qkv = Matrix(1, lw.b_qkv.cols);
    gl.w_att_proj = Matrix(lw.w_att_proj.rows, lw.w_att_proj.cols);
    gl.b_att_proj = Matrix(1, lw.b_att_proj.cols);
    gl.ln2_g = Matrix(1, lw.ln2_g.cols);
    gl.ln2_b = Matrix(1, lw.ln2_b.cols);
    gl.w_fc = Matrix(lw.w_fc.rows, lw.w_fc.cols);
    gl.b_fc = Matrix(1, lw.b_fc.cols);
    gl.w_proj = Matrix(lw.w_proj.rows, lw.w_proj.cols);
    gl.b_proj = Matrix(1, lw.b_proj.cols);
  }
  g.lnf_g = Matrix(1, m.lnf_g.cols);
  g.lnf_b = Matrix(1, m.lnf_b.cols);
  return g;
}

void add_colsum(Matrix& bias_grad, const Matrix& d) {
  for (std::size_t t = 0; t < d.rows; ++t) {
    const double* dr = d.row(t);
    for (std::size_t j = 0; j < d.cols; ++j) bias_grad.data[j] += dr[j];
  }
}

void accumulate(Matrix& dst, const Matrix& src) {
  for (std::size_t i = 0; i < dst.data.size(); ++i) dst.data[i] += src.data[i];
}

// Reverse pass from dS/dlogits. Accumulates weight gradients into wg when
// given, and captures hook gradients into d_inj / d_pins when given.
void run_backward(const ToyLM& m, const TokenSeq& tokens, const Hooks& hooks,
                  const FullCache& c, const Matrix& d_logits, WeightGrads* wg,
                  std::vector<Vector>* d_inj, std::vector<Vector>* d_pins) {
  const std::size_t T = tokens.size();
  const std::size_t D = m.config.d_model, F = m.config.d_ffn;
  const std::size_t H = m.config.n_heads, dh = D / H;
  const double att_scale = 1.0 / std::sqrt(static_cast<double>(dh));

  if (d_inj) d_inj->assign(hooks.injections.size(), Vector(D));
  if (d_pins) d_pins->assign(hooks.inner_pins.size(), Vector(F));

  // Tied head: logits = lnf_out @ wte^T.
  Matrix d_lnf_out = num::matmul(d_logits, m.wte);
  if (wg) accumulate(wg->wte, num::matmul_tn(d_logits, c.lnf_out));

  const Matrix& x_last = m.layers.empty() ? c.x0 : c.layers.back().x_out;
  Matrix d_x = layer_norm_backward(x_last, c.lnf, m.lnf_g, d_lnf_out,
                                   wg ? &wg->lnf_g : nullptr,
                                   wg ? &wg->lnf_b : nullptr);

  for (std::size_t li = m.config.n_layers; li-- > 0;) {
    const LayerWeights& lw = m.layers[li];
    const LayerCache& lc = c.layers[li];
    LayerWeights* gl = wg ? &wg->layers[li] : nullptr;

    // Overridden rows were constants; nothing flows upstream through them.
    for (const auto& ov : hooks.residual_overrides) {
      if (ov.layer != li) continue;
      double* row = d_x.row(ov.pos);
      std::fill(row, row + D, 0.0);
    }

    // x_out = x_mid + ffn_out
    Matrix d_ffn_out = d_x;
    for (std::size_t idx = 0; idx < hooks.injections.size(); ++idx) {
      const auto& inj = hooks.injections[idx];
      if (inj.layer != li || !d_inj) continue;
      const double* row = d_ffn_out.row(inj.pos);
      for (std::size_t j = 0; j < D; ++j) (*d_inj)[idx][j] += row[j];
    }

    // ffn_out = inner @ w_proj + b_proj
    Matrix d_inner = num::matmul_nt(d_ffn_out, lw.w_proj);
    if (gl) {
      accumulate(gl->w_proj, num::matmul_tn(lc.inner, d_ffn_out));
      add_colsum(gl->b_proj, d_ffn_out);
    }
    for (std::size_t idx = 0; idx < hooks.inner_pins.size(); ++idx) {
      const auto& pin = hooks.inner_pins[idx];
      if (pin.layer != li) continue;
      double* row = d_inner.row(pin.pos);
      if (d_pins)
        for (std::size_t j = 0; j < F; ++j) (*d_pins)[idx][j] += row[j];
      std::fill(row, row + F, 0.0);
    }

    // inner = gelu(inner_pre) on non-pinned rows
    Matrix d_inner_pre = d_inner;
    for (std::size_t i = 0; i < d_inner_pre.data.size(); ++i)
      d_inner_pre.data[i] *= gelu_deriv(lc.inner_pre.data[i]);

    // inner_pre = ln2_out @ w_fc + b_fc
    Matrix d_ln2_out = num::matmul_nt(d_inner_pre, lw.w_fc);
    if (gl) {
      accumulate(gl->w_fc, num::matmul_tn(lc.ln2_out, d_inner_pre));
      add_colsum(gl->b_fc, d_inner_pre);
    }
    Matrix d_x_mid = layer_norm_backward(lc.x_mid, lc.ln2, lw.ln2_g, d_ln2_out,
                                         gl ? &gl->ln2_g : nullptr,
                                         gl ? &gl->ln2_b : nullptr);
    accumulate(d_x_mid, d_x);  // residual path

    // x_mid = x_in + att_out; att_out = ctx @ w_att_proj + b
    Matrix d_att_out = d_x_mid;
    Matrix d_ctx = num::matmul_nt(d_att_out, lw.w_att_proj);
    if (gl) {
      accumulate(gl->w_att_proj, num::matmul_tn(lc.ctx, d_att_out));
      add_colsum(gl->b_att_proj, d_att_out);
    }

    Matrix d_qkv(T, 3 * D);
    for (std::size_t h = 0; h < H; ++h) {
      const std::size_t qo = h * dh, ko = D + h * dh, vo = 2 * D + h * dh;
      const Matrix& probs = lc.att_probs[h];
      for (std::size_t i = 0; i < T; ++i) {
        const double* dci = d_ctx.row(i) + qo;
        const double* pr = probs.row(i);
        // d_probs and softmax backward over the causal support j <= i
        std::vector<double> dp(i + 1);
        double dot = 0.0;
        for (std::size_t j = 0; j <= i; ++j) {
          const double* vj = lc.qkv.row(j) + vo;
          double acc = 0.0;
          for (std::size_t d = 0; d < dh; ++d) acc += dci[d] * vj[d];
          dp[j] = acc;
          dot += acc * pr[j];
          // d_v accumulation
          double* dvj = d_qkv.row(j) + vo;
          for (std::size_t d = 0; d < dh; ++d) dvj[d] += pr[j] * dci[d];
        }
        const double* qi = lc.qkv.row(i) + qo;
        double* dqi = d_qkv.row(i) + qo;
        for (std::size_t j = 0; j <= i; ++j) {
          const double ds = pr[j] * (dp[j] - dot) * att_scale;
          const double* kj = lc.qkv.row(j) + ko;
          double* dkj = d_qkv.row(j) + ko;
          for (std::size_t d = 0; d < dh; ++d) {
            dqi[d] += ds * kj[d];
            dkj[d] += ds * qi[d];
          }
        }
      }
    }

    // qkv = ln1_out @ w_qkv + b_qkv
    Matrix d_ln1_out = num::matmul_nt(d_qkv, lw.w_qkv);
    if (gl) {
      accumulate(gl->w_qkv, num::matmul_tn(lc.ln1_out, d_qkv));
      add_colsum(gl->b_qkv, d_qkv);
    }
    Matrix d_x_in = layer_norm_backward(lc.x_in, lc.ln1, lw.ln1_g, d_ln1_out,
                                        gl ? &gl->ln1_g : nullptr,
                                        gl ? &gl->ln1_b : nullptr);
    accumulate(d_x_in, d_x_mid);  // residual path
    d_x = std::move(d_x_in);
  }

  if (wg) {
    for (std::size_t t = 0; t < T; ++t) {
      const double* dr = d_x.row(t);
      double* te = wg->wte.row(tokens[t]);
      double* pe = wg->wpe.row(t);
      for (std::size_t j = 0; j < D; ++j) {
        te[j] += dr[j];
        pe[j] += dr[j];
      }
    }
  }
}

std::vector<double> log_softmax_row(const Matrix& logits, std::size_t pos) {
  const std::size_t V = logits.cols;
  const double* z = logits.row(pos);
  double mx = z[0];
  for (std::size_t j = 1; j < V; ++j) mx = std::max(mx, z[j]);
  double denom = 0.0;
  for (std::size_t j = 0; j < V; ++j) denom += std::exp(z[j] - mx);
  const double lse = mx + std::log(denom);
  std::vector<double> lp(V);
  for (std::size_t j = 0; j < V; ++j) lp[j] = z[j] - lse;
  return lp;
}

}  // namespace

// ---------------------------------------------------------------------------
// Public forward API

std::vector<double> ForwardTrace::log_probs_at(std::size_t pos) const {
  require(pos < n_tokens, "log_probs_at: position out of range");
  return log_softmax_row(logits, pos);
}

num::Distribution ForwardTrace::next_token_distribution(std::size_t pos) const {
  std::vector<double> lp = log_probs_at(pos);
  std::vector<double> p(lp.size());
  double sum = 0.0;
  for (std::size_t j = 0; j < lp.size(); ++j) {
    p[j] = std::exp(lp[j]);
    sum += p[j];
  }
  for (double& v : p) v /= sum;
  return num::Distribution(p);
}

ForwardTrace forward(const ToyLM& m, const TokenSeq& tokens, const Hooks& hooks) {
  FullCache c = run_forward(m, tokens, hooks);
  ForwardTrace t;
  t.n_tokens = tokens.size();
  t.logits = std::move(c.logits);
  t.ffn_out.reserve(c.layers.size());
  t.ffn_inner.reserve(c.layers.size());
  t.residual_out.reserve(c.layers.size());
  for (auto& lc : c.layers) {
    t.ffn_out.push_back(std::move(lc.ffn_out));
    t.ffn_inner.push_back(std::move(lc.inner));
    t.residual_out.push_back(std::move(lc.x_out));
  }
  return t;
}

double sequence_logprob(const ToyLM& m, const TokenSeq& prompt,
                        const TokenSeq& continuation, const Hooks& hooks,
                        bool length_normalized) {
  require(!prompt.empty(), "sequence_logprob: empty prompt");
  require(!continuation.empty(), "sequence_logprob: empty continuation");
  TokenSeq all = prompt;
  all.insert(all.end(), continuation.begin(), continuation.end());
  FullCache c = run_forward(m, all, hooks);
  double total = 0.0;
  for (std::size_t j = 0; j < continuation.size(); ++j) {
    std::vector<double> lp = log_softmax_row(c.logits, prompt.size() - 1 + j);
    total += lp[continuation[j]];
  }
  if (length_normalized) total /= static_cast<double>(continuation.size());
  return total;
}

TokenSeq greedy_decode(const ToyLM& m, TokenSeq prompt, std::size_t n_new) {
  require(!prompt.empty(), "greedy_decode: empty prompt");
  TokenSeq out;
  for (std::size_t step = 0; step < n_new; ++step) {
    if (prompt.size() >= m.config.max_seq_len) break;
    FullCache c = run_forward(m, prompt, {});
    const double* z = c.logits.row(prompt.size() - 1);
    std::size_t best = 0;
    for (std::size_t j = 1; j < m.config.vocab_size; ++j)
      if (z[j] > z[best]) best = j;
    out.push_back(best);
    prompt.push_back(best);
  }
  return out;
}

// ---------------------------------------------------------------------------
// Residual-injection losses

namespace {

constexpr double kProbFloor = 1e-12;

struct TermPass {
  double loss = 0.0;
  Vector d_delta;
};

// One NLL term: forward, then backward with dLoss/dlogits rows filled from
// the log-softmax gradient at each scored position.
TermPass nll_term_pass(const ToyLM& m, const NllTerm& term, std::size_t layer,
                       const Vector& delta, bool want_grad) {
  require(!term.continuation.empty(), "delta loss: empty continuation");
  Hooks hooks;
  hooks.injections.push_back({layer, term.injection_pos, delta});
  TokenSeq all = term.prompt;
  all.insert(all.end(), term.continuation.begin(), term.continuation.end());
  FullCache c = run_forward(m, all, hooks);

  TermPass out;
  const std::size_t V = m.config.vocab_size;
  Matrix d_logits(all.size(), V);
  const double log_floor = std::log(kProbFloor);
  for (std::size_t j = 0; j < term.continuation.size(); ++j) {
    const std::size_t pos = term.prompt.size() - 1 + j;
    std::vector<double> lp = log_softmax_row(c.logits, pos);
    const std::size_t target = term.continuation[j];
    double p_t = std::exp(lp[target]);
    if (lp[target] < log_floor)
      log_warn("delta loss: matched probability at floor");
    // -log(p + floor): bounded near zero probability, gradients stay alive.
    out.loss += -std::log(p_t + kProbFloor) * term.weight;
    if (want_grad) {
      // d(-log(p_t + floor))/dz_v = s * (p_v - 1{v == target}), s = p_t/(p_t + floor)
      double scale = term.weight * p_t / (p_t + kProbFloor);
      double* dr = d_logits.row(pos);
      for (std::size_t v = 0; v < V; ++v) dr[v] += scale * std::exp(lp[v]);
      dr[target] -= scale;
    }
  }
  if (want_grad) {
    std::vector<Vector> d_inj;
    run_backward(m, all, hooks, c, d_logits, nullptr, &d_inj, nullptr);
    out.d_delta = d_inj[0];
  }
  return out;
}

// One KL term against a frozen reference distribution at the final position.
TermPass kl_term_pass(const ToyLM& m, const KlTerm& term, std::size_t layer,
                      const Vector& delta, bool want_grad) {
  require(term.reference_log_probs.size() == m.config.vocab_size,
          "delta loss: reference distribution width mismatch");
  Hooks hooks;
  hooks.injections.push_back({layer, term.injection_pos, delta});
  FullCache c = run_forward(m, term.prompt, hooks);

  const std::size_t V = m.config.vocab_size;
  const std::size_t pos = term.prompt.size() - 1;
  std::vector<double> lp = log_softmax_row(c.logits, pos);
  double kl = 0.0;
  for (std::size_t v = 0; v < V; ++v)
    kl += std::exp(lp[v]) * (lp[v] - term.reference_log_probs[v]);

  TermPass out;
  out.loss = term.weight * kl;
  if (want_grad) {
    // dKL/dz_v = p_v * ((log p_v - log q_v) - KL)
    Matrix d_logits(term.prompt.size(), V);
    double* dr = d_logits.row(pos);
    for (std::size_t v = 0; v < V; ++v)
      dr[v] = term.weight * std::exp(lp[v]) *
              ((lp[v] - term.reference_log_probs[v]) - kl);
    std::vector<Vector> d_inj;
    run_backward(m, term.prompt, hooks, c, d_logits, nullptr, &d_inj, nullptr);
    out.d_delta = d_inj[0];
  }
  return out;
}

double spec_loss(const ToyLM& m, const DeltaLossSpec& spec, std::size_t layer,
                 const Vector& delta, Vector* grad) {
  require(layer < m.config.n_layers, "delta loss: layer out of range");
  require(delta.dim() == m.config.d_model, "delta loss: delta width mismatch");
  double total = 0.0;
  if (grad) *grad = Vector(m.config.d_model);
  for (const auto& term : spec.nll_terms) {
    TermPass p = nll_term_pass(m, term, layer, delta, grad != nullptr);
    total += p.loss;
    if (grad)
      for (std::size_t j = 0; j < grad->dim(); ++j) (*grad)[j] += p.d_delta[j];
  }
  for (const auto& term : spec.kl_terms) {
    TermPass p = kl_term_pass(m, term, layer, delta, grad != nullptr);
    total += p.loss;
    if (grad)
      for (std::size_t j = 0; j < grad->dim(); ++j) (*grad)[j] += p.d_delta[j];
  }
  if (spec.l2_weight != 0.0) {
    for (std::size_t j = 0; j < delta.dim(); ++j) {
      total += spec.l2_weight * delta[j] * delta[j];
      if (grad) (*grad)[j] += 2.0 * spec.l2_weight * delta[j];
    }
  }
  require(std::isfinite(total), "delta loss: non-finite loss");
  return total;
}

}  // namespace

double delta_loss(const ToyLM& m, const DeltaLossSpec& spec, std::size_t layer,
                  const Vector& delta) {
  return spec_loss(m, spec, layer, delta, nullptr);
}

Vector grad_wrt_delta(const ToyLM& m, const DeltaLossSpec& spec, std::size_t layer,
                      const Vector& delta, double* loss_out) {
  Vector grad;
  double loss = spec_loss(m, spec, layer, delta, &grad);
  if (loss_out) *loss_out = loss;
  return grad;
}

ProjGrads nll_proj_grads(const ToyLM& m, const std::vector<NllTerm>& terms,
                         const std::vector<std::size_t>& layers) {
  for (std::size_t l : layers)
    require(l < m.config.n_layers, "proj grads: layer out of range");
  WeightGrads wg = zero_grads(m);
  ProjGrads out;
  const double log_floor = std::log(kProbFloor);
  for (const auto& term : terms) {
    require(!term.continuation.empty(), "proj grads: empty continuation");
    TokenSeq all = term.prompt;
    all.insert(all.end(), term.continuation.begin(), term.continuation.end());
    FullCache c = run_forward(m, all, {});
    Matrix d_logits(all.size(), m.config.vocab_size);
    for (std::size_t j = 0; j < term.continuation.size(); ++j) {
      const std::size_t pos = term.prompt.size() - 1 + j;
      std::vector<double> lp = log_softmax_row(c.logits, pos);
      const std::size_t target = term.continuation[j];
      double p_t = std::exp(lp[target]);
      if (lp[target] < log_floor)
        log_warn("proj grads: target probability at floor");
      out.loss += -std::log(p_t + kProbFloor) * term.weight;
      double scale = term.weight * p_t / (p_t + kProbFloor);
      double* dr = d_logits.row(pos);
      for (std::size_t v = 0; v < m.config.vocab_size; ++v)
        dr[v] += scale * std::exp(lp[v]);
      dr[target] -= scale;
    }
    run_backward(m, all, {}, c, d_logits, &wg, nullptr, nullptr);
  }
  for (std::size_t l : layers) {
    out.w_proj.push_back(wg.layers[l].w_proj);
    out.b_proj.push_back(wg.layers[l].b_proj);
  }
  return out;
}

ActivationGrads backward_activations(const ToyLM& m, const TokenSeq& tokens,
                                     const Hooks& hooks, const Matrix& d_logits) {
  require(d_logits.rows == tokens.size() && d_logits.cols == m.config.vocab_size,
          "backward_activations: d_logits shape mismatch");
  FullCache c = run_forward(m, tokens, hooks);
  std::vector<Vector> d_inj, d_pins;
  run_backward(m, tokens, hooks, c, d_logits, nullptr, &d_inj, &d_pins);
  ActivationGrads out;
  out.d_injection = d_inj.empty() ? Vector(m.config.d_model) : d_inj[0];
  out.d_inner_pins = std::move(d_pins);
  return out;
}

// ---------------------------------------------------------------------------
// Training

namespace {

struct AdamState {
  std::vector<Matrix*> params;
  std::vector<Matrix> m1, m2;
  std::size_t step = 0;

  explicit AdamState(std::vector<Matrix*> p) : params(std::move(p)) {
    for (Matrix* w : params) {
      m1.emplace_back(w->rows, w->cols);
      m2.emplace_back(w->rows, w->cols);
    }
  }

  void update(const std::vector<const Matrix*>& grads, double lr) {
    ++step;
    const double b1 = 0.9, b2 = 0.999, eps = 1e-8;
    const double bc1 = 1.0 - std::pow(b1, static_cast<double>(step));
    const double bc2 = 1.0 - std::pow(b2, static_cast<double>(step));
    for (std::size_t i = 0; i < params.size(); ++i) {
      Matrix& w = *params[i];
      const Matrix& g = *grads[i];
      for (std::size_t j = 0; j < w.data.size(); ++j) {
        m1[i].data[j] = b1 * m1[i].data[j] + (1.0 - b1) * g.data[j];
        m2[i].data[j] = b2 * m2[i].data[j] + (1.0 - b2) * g.data[j] * g.data[j];
        const double mhat = m1[i].data[j] / bc1;
        const double vhat = m2[i].data[j] / bc2;
        w.data[j] -= lr * mhat / (std::sqrt(vhat) + eps);
      }
    }
  }
};

std::vector<Matrix*> model_params(ToyLM& m) {
  std::vector<Matrix*> out;
  for (auto& nt : named_tensors(m)) out.push_back(nt.tensor);
  return out;
}

std::vector<const Matrix*> grad_params(WeightGrads& g) {
  std::vector<const Matrix*> out;
  out.push_back(&g.wte);
  out.push_back(&g.wpe);
  for (auto& gl : g.layers) {
    out.push_back(&gl.ln1_g);
    out.push_back(&gl.ln1_b);
    out.push_back(&gl.w_qkv);
    out.push_back(&gl.b_qkv);
    out.push_back(&gl.w_att_proj);
    out.push_back(&gl.b_att_proj);
    out.push_back(&gl.ln2_g);
    out.push_back(&gl.ln2_b);
    out.push_back(&gl.w_fc);
    out.push_back(&gl.b_fc);
    out.push_back(&gl.w_proj);
    out.push_back(&gl.b_proj);
  }
  out.push_back(&g.lnf_g);
  out.push_back(&g.lnf_b);
  return out;
}

void scale_grads(WeightGrads& g, double s) {
  for (const Matrix* mp : grad_params(g))
    for (double& v : const_cast<Matrix*>(mp)->data) v *= s;
}

double grad_global_norm(WeightGrads& g) {
  double sq = 0.0;
  for (const Matrix* mp : grad_params(g))
    for (double v : mp->data) sq += v * v;
  return std::sqrt(sq);
}

}  // namespace

ToyLM train_toy(const ModelConfig& cfg, const std::vector<std::string>& corpus,
                std::size_t epochs, double lr) {
  TrainOptions opts;
  opts.epochs = epochs;
  opts.lr = lr;
  return train_toy(cfg, corpus, opts);
}

ToyLM train_toy(const ModelConfig& cfg, const std::vector<std::string>& corpus,
                const TrainOptions& opts) {
  require(!corpus.empty(), "train_toy: empty corpus");
  Tokenizer tok = Tokenizer::build(corpus);
  ToyLM model = init_model(cfg, tok);

  std::vector<TokenSeq> sequences;
  sequences.reserve(corpus.size());
  for (const auto& s : corpus) {
    TokenSeq seq = model.tokenizer.encode_with_bos(s);
    require(seq.size() >= 2, "train_toy: sentence with no predictable token: " + s);
    require(seq.size() <= cfg.max_seq_len, "train_toy: sentence exceeds max_seq_len: " + s);
    sequences.push_back(std::move(seq));
  }

  AdamState adam(model_params(model));
  std::vector<std::size_t> order(sequences.size());
  std::iota(order.begin(), order.end(), 0);

  for (std::size_t epoch = 0; epoch < opts.epochs; ++epoch) {
    std::mt19937_64 rng =
        substream(model.config.seed, "train-shuffle-" + std::to_string(epoch));
    std::shuffle(order.begin(), order.end(), rng);
    std::mt19937_64 noise_rng =
        substream(model.config.seed, "train-noise-" + std::to_string(epoch));
    double noise_std = 0.0;
    if (opts.emb_noise > 0.0) {
      double sq = 0.0;
      for (double v : model.wte.data) sq += v * v;
      noise_std = opts.emb_noise * std::sqrt(sq / model.wte.data.size());
    }

    for (std::size_t start = 0; start < order.size(); start += opts.batch_size) {
      const std::size_t end = std::min(order.size(), start + opts.batch_size);
      WeightGrads grads = zero_grads(model);
      double batch_loss = 0.0;
      std::size_t batch_tokens = 0;

      for (std::size_t oi = start; oi < end; ++oi) {
        const TokenSeq& seq = sequences[order[oi]];
        const std::size_t T = seq.size();
        Hooks hooks;
        if (noise_std > 0.0) {
          std::normal_distribution<double> nd(0.0, noise_std);
          for (std::size_t t = 0; t < T; ++t) {
            num::Vector dlt(model.config.d_model);
            for (std::size_t a = 0; a < model.config.d_model; ++a) dlt[a] = nd(noise_rng);
            hooks.embedding_deltas.push_back({t, std::move(dlt)});
          }
        }
        FullCache c = run_forward(model, seq, hooks);
        Matrix d_logits(T, model.config.vocab_size);
        for (std::size_t t = 0; t + 1 < T; ++t) {
          std::vector<double> lp = log_softmax_row(c.logits, t);
          batch_loss += -lp[seq[t + 1]];
          double* dr = d_logits.row(t);
          for (std::size_t v = 0; v < model.config.vocab_size; ++v)
            dr[v] = std::exp(lp[v]);
          dr[seq[t + 1]] -= 1.0;
        }
        batch_tokens += T - 1;
        run_backward(model, seq, hooks, c, d_logits, &grads, nullptr, nullptr);
      }

      require(std::isfinite(batch_loss), "train_toy: divergent loss");
      scale_grads(grads, 1.0 / static_cast<double>(batch_tokens));
      const double gnorm = grad_global_norm(grads);
      if (opts.grad_clip > 0.0 && gnorm > opts.grad_clip)
        scale_grads(grads, opts.grad_clip / gnorm);
      auto gp = grad_params(grads);
      adam.update(gp, opts.lr);
    }
  }
  return model;
}

// ---------------------------------------------------------------------------
// Checkpoints

namespace {
constexpr char kMagic[8] = {'K', 'S', 'E', 'L', 'M', 'v', '1', '\n'};
}

void save_checkpoint(const ToyLM& model, const std::string& path) {
  nlohmann::json header;
  header["config"] = {{"vocab_size", model.config.vocab_size},
                      {"d_model", model.config.d_model},
                      {"n_layers", model.config.n_layers},
                      {"n_heads", model.config.n_heads},
                      {"d_ffn", model.config.d_ffn},
                      {"max_seq_len", model.config.max_seq_len},
                      {"seed", model.config.seed}};
  header["vocab"] = model.tokenizer.vocab;
  nlohmann::json tensors = nlohmann::json::array();
  auto named = named_tensors(const_cast<ToyLM&>(model));
  for (const auto& nt : named)
    tensors.push_back({{"name", nt.name}, {"rows", nt.tensor->rows}, {"cols", nt.tensor->cols}});
  header["tensors"] = tensors;

  const std::string hs = header.dump();
  std::ofstream out(path, std::ios::binary);
  require(out.good(), "save_checkpoint: cannot open " + path);
  out.write(kMagic, sizeof(kMagic));
  const std::uint64_t hlen = hs.size();
  out.write(reinterpret_cast<const char*>(&hlen), sizeof(hlen));
  out.write(hs.data(), static_cast<std::streamsize>(hs.size()));
  for (const auto& nt : named)
    out.write(reinterpret_cast<const char*>(nt.tensor->data.data()),
              static_cast<std::streamsize>(nt.tensor->data.size() * sizeof(double)));
  require(out.good(), "save_checkpoint: write failed for " + path);
}

ToyLM load_checkpoint(const std::string& path) {
  std::ifstream in(path, std::ios::binary);
  require(in.good(), "load_checkpoint: cannot open " + path);
  char magic[8];
  in.read(magic, sizeof(magic));
  require(in.good() && std::memcmp(magic, kMagic, sizeof(magic)) == 0,
          "load_checkpoint: bad magic in " + path);
  std::uint64_t hlen = 0;
  in.read(reinterpret_cast<char*>(&hlen), sizeof(hlen));
  std::string hs(hlen, '\0');
  in.read(hs.data(), static_cast<std::streamsize>(hlen));
  require(in.good(), "load_checkpoint: truncated header in " + path);
  nlohmann::json header = nlohmann::json::parse(hs);

  ModelConfig cfg;
  cfg.vocab_size = header["config"]["vocab_size"].get<std::size_t>();
  cfg.d_model = header["config"]["d_model"].get<std::size_t>();
  cfg.n_layers = header["config"]["n_layers"].get<std::size_t>();
  cfg.n_heads = header["config"]["n_heads"].get<std::size_t>();
  cfg.d_ffn = header["config"]["d_ffn"].get<std::size_t>();
  cfg.max_seq_len = header["config"]["max_seq_len"].get<std::size_t>();
  cfg.seed = header["config"]["seed"].get<std::uint64_t>();

  Tokenizer tok;
  tok.vocab = header["vocab"].get<std::vector<std::string>>();
  for (std::size_t i = 0; i < tok.vocab.size(); ++i) tok.index[tok.vocab[i]] = i;

  ToyLM model = init_model(cfg, std::move(tok));
  auto named = named_tensors(model);
  const auto& tensors = header["tensors"];
  require(tensors.size() == named.size(),
          "load_checkpoint: tensor directory size mismatch");
  for (std::size_t i = 0; i < named.size(); ++i) {
    require(tensors[i]["name"].get<std::string>() == named[i].name,
            "load_checkpoint: unexpected tensor " + tensors[i]["name"].get<std::string>());
    require(tensors[i]["rows"].get<std::size_t>() == named[i].tensor->rows &&
                tensors[i]["cols"].get<std::size_t>() == named[i].tensor->cols,
            "load_checkpoint: tensor shape mismatch for " + named[i].name);
    in.read(reinterpret_cast<char*>(named[i].tensor->data.data()),
            static_cast<std::streamsize>(named[i].tensor->data.size() * sizeof(double)));
  }
  require(in.good(), "load_checkpoint: truncated tensor data in " + path);
  return model;
}

}  // namespace kse::lm
