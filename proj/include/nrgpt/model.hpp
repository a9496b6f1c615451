#pragma once

// Full language model: embeddings, T recurrent steps of the energy dynamics
// (or the parallel-transformer baseline), tied unembedding, loss, generation,
// and the multiply-add accounting that mirrors the implementation exactly.

#include <vector>

#include "nrgpt/config.hpp"
#include "nrgpt/dynamics.hpp"

namespace nrgpt {

enum class ModelKind { NrgptFF1, NrgptFF2W, NrgptDamRelu, BaselineParallel };

inline const char* to_string(ModelKind k) {
  switch (k) {
    case ModelKind::NrgptFF1: return "nrgpt_ff1";
    case ModelKind::NrgptFF2W: return "nrgpt_ff2w";
    case ModelKind::NrgptDamRelu: return "nrgpt_dam_relu";
    default: return "gpt_rec_parallel";
  }
}

inline ModelKind model_kind_from(const std::string& s) {
  if (s == "nrgpt_ff1") return ModelKind::NrgptFF1;
  if (s == "nrgpt_ff2w") return ModelKind::NrgptFF2W;
  if (s == "nrgpt_dam_relu") return ModelKind::NrgptDamRelu;
  if (s == "gpt_rec_parallel") return ModelKind::BaselineParallel;
  throw ConfigError("unknown model: " + s);
}

struct ModelConfig {
  ModelKind kind = ModelKind::NrgptFF1;
  int vocab_size = 0;
  int context = 64;
  int embed_dim = 32;
  int heads = 1;
  int steps = 6;  // T: recurrence replaces depth
  NormKind norm_kind = NormKind::RmsNorm;
  RateMode rate_mode = RateMode::Identity;
  bool rate_per_step = false;
  int rate_inner_dim = 0;   // D' for the U factor, 0 -> D
  int hidden_multiple = 0;  // 0 -> variant default (ff1: 8, others: 4)
  Act sigma = Act::Gelu;
  double beta = 0.0;  // 0 -> 1/sqrt(D/H)
  bool include_self = false;
  double dropout = 0.0;
  double norm_eps = 1e-5;
  uint64_t seed = 1337;

  int hidden() const {
    int mult = hidden_multiple;
    if (mult == 0) mult = (kind == ModelKind::NrgptFF1) ? 8 : 4;
    return mult * embed_dim;
  }

  void validate() const {
    if (vocab_size <= 0) throw ConfigError("vocab_size must be positive");
    if (context <= 0 || embed_dim <= 0 || heads <= 0) throw ConfigError("bad dimensions");
    if (embed_dim % heads != 0) throw ConfigError("heads must divide embed_dim");
    if (steps < 1) throw ConfigError("steps must be >= 1");
    if (dropout < 0.0 || dropout >= 1.0) throw ConfigError("dropout must lie in [0, 1)");
    if (rate_mode == RateMode::ScalarGamma && norm_kind == NormKind::None)
      throw ConfigError("scalar_gamma rate requires a normalization with gamma (norm_kind != none)");
    if (kind == ModelKind::NrgptDamRelu && sigma != Act::Relu)
      throw ConfigError("nrgpt_dam_relu requires sigma = relu");
  }

  KvConfig to_kv() const {
    KvConfig c;
    c.set("model", to_string(kind));
    c.set_int("vocab_size", vocab_size);
    c.set_int("context", context);
    c.set_int("embed_dim", embed_dim);
    c.set_int("heads", heads);
    c.set_int("steps", steps);
    c.set("norm", to_string(norm_kind));
    c.set("rate", to_string(rate_mode));
    c.set_bool("rate_per_step", rate_per_step);
    c.set_int("rate_inner_dim", rate_inner_dim);
    c.set_int("hidden_multiple", hidden_multiple);
    c.set("sigma", sigma == Act::Relu ? "relu" : "gelu");
    c.set_double("beta", beta);
    c.set_bool("include_self", include_self);
    c.set_double("dropout", dropout);
    c.set_double("norm_eps", norm_eps);
    c.set_int("seed", static_cast<long long>(seed));
    return c;
  }

  static ModelConfig from_kv(const KvConfig& c) {
    ModelConfig m;
    m.kind = model_kind_from(c.get_str("model", "nrgpt_ff1"));
    m.vocab_size = static_cast<int>(c.get_int("vocab_size", 0));
    m.context = static_cast<int>(c.get_int("context", 64));
    m.embed_dim = static_cast<int>(c.get_int("embed_dim", 32));
    m.heads = static_cast<int>(c.get_int("heads", 1));
    m.steps = static_cast<int>(c.get_int("steps", 6));
    m.norm_kind = norm_kind_from(c.get_str("norm", "rmsnorm"));
    m.rate_mode = rate_mode_from(c.get_str("rate", "identity"));
    m.rate_per_step = c.get_bool("rate_per_step", false);
    m.rate_inner_dim = static_cast<int>(c.get_int("rate_inner_dim", 0));
    m.hidden_multiple = static_cast<int>(c.get_int("hidden_multiple", 0));
    const std::string act = c.get_str("sigma", m.kind == ModelKind::NrgptDamRelu ? "relu" : "gelu");
    if (act != "relu" && act != "gelu") throw ConfigError("sigma must be relu or gelu");
    m.sigma = act == "relu" ? Act::Relu : Act::Gelu;
    m.beta = c.get_double("beta", 0.0);
    m.include_self = c.get_bool("include_self", false);
    m.dropout = c.get_double("dropout", 0.0);
    m.norm_eps = c.get_double("norm_eps", 1e-5);
    m.seed = static_cast<uint64_t>(c.get_int("seed", 1337));
    m.validate();
    return m;
  }
};

// ---------------------------------------------------------------------------
// Weights. leafed() shares every buffer but registers it on a tape, so each
// training thread can build its own graph against the same storage.
// ---------------------------------------------------------------------------

struct Weights {
  Tensor tok_emb;  // [V, D]; also the unembedding (tied storage)
  Tensor pos_emb;  // [N, D]
  EnergyParams energy;
  BaselineBlock baseline;
  InferenceRate rate;
  NormParams core_norm;
  NormParams final_norm;
};

using ParamRef = std::pair<std::string, Tensor*>;

inline std::vector<ParamRef> parameters(Weights& w, const ModelConfig& cfg) {
  std::vector<ParamRef> out;
  out.emplace_back("tok_emb", &w.tok_emb);
  out.emplace_back("pos_emb", &w.pos_emb);
  if (cfg.kind == ModelKind::BaselineParallel) {
    for (int h = 0; h < cfg.heads; ++h) {
      const std::string i = std::to_string(h);
      out.emplace_back("base.Wk" + i, &w.baseline.Wk[static_cast<size_t>(h)]);
      out.emplace_back("base.Wq" + i, &w.baseline.Wq[static_cast<size_t>(h)]);
      out.emplace_back("base.Wv" + i, &w.baseline.Wv[static_cast<size_t>(h)]);
      out.emplace_back("base.Wp" + i, &w.baseline.Wp[static_cast<size_t>(h)]);
    }
    out.emplace_back("base.W1", &w.baseline.W1);
    out.emplace_back("base.W2", &w.baseline.W2);
  } else {
    for (int h = 0; h < cfg.heads; ++h)
      out.emplace_back("att.J" + std::to_string(h), &w.energy.at.J[static_cast<size_t>(h)]);
    out.emplace_back("att.alpha", &w.energy.at.alpha);
    out.emplace_back("ff.W1", &w.energy.ff.W1);
    if (cfg.kind == ModelKind::NrgptFF2W) out.emplace_back("ff.W2", &w.energy.ff.W2);
    const int slots = w.rate.slots();
    for (int s = 0; s < slots; ++s) {
      const std::string i = std::to_string(s);
      switch (cfg.rate_mode) {
        case RateMode::ScalarGamma: out.emplace_back("rate.c" + i, &w.rate.c_raw[static_cast<size_t>(s)]); break;
        case RateMode::LearnableSymAsym:
          out.emplace_back("rate.U" + i, &w.rate.U[static_cast<size_t>(s)]);
          out.emplace_back("rate.V" + i, &w.rate.V[static_cast<size_t>(s)]);
          break;
        case RateMode::Unconstrained: out.emplace_back("rate.M" + i, &w.rate.M[static_cast<size_t>(s)]); break;
        default: break;
      }
    }
  }
  if (cfg.norm_kind != NormKind::None) {
    out.emplace_back("norm.gamma", &w.core_norm.gamma);
    if (cfg.norm_kind == NormKind::LayerNorm) out.emplace_back("norm.shift", &w.core_norm.shift);
    out.emplace_back("final_norm.gamma", &w.final_norm.gamma);
    if (cfg.norm_kind == NormKind::LayerNorm) out.emplace_back("final_norm.shift", &w.final_norm.shift);
  }
  return out;
}

// ---------------------------------------------------------------------------
// Model
// ---------------------------------------------------------------------------

class Model {
 public:
  ModelConfig cfg;
  Weights w;

  Model() = default;

  explicit Model(const ModelConfig& config) : cfg(config) {
    cfg.validate();
    Rng rng(cfg.seed);
    const int v = cfg.vocab_size, n = cfg.context, d = cfg.embed_dim, h = cfg.heads;
    const int m = cfg.hidden();
    const int dprime = cfg.rate_inner_dim > 0 ? cfg.rate_inner_dim : d;
    // GPT-2 style init, with embeddings and block weights shrunk by T^{-1/4}
    // when running without normalization.
    const double scale = cfg.norm_kind == NormKind::None
                             ? std::pow(static_cast<double>(cfg.steps), -0.25)
                             : 1.0;
    const double wstd = 0.02 * scale;
    w.tok_emb = randn({v, d}, rng, wstd);
    w.pos_emb = randn({n, d}, rng, wstd);

    if (cfg.kind == ModelKind::BaselineParallel) {
      const int y = d / h;
      for (int i = 0; i < h; ++i) {
        w.baseline.Wk.push_back(randn({y, d}, rng, wstd));
        w.baseline.Wq.push_back(randn({y, d}, rng, wstd));
        w.baseline.Wv.push_back(randn({y, d}, rng, wstd));
        w.baseline.Wp.push_back(randn({y, d}, rng, wstd));
      }
      w.baseline.W1 = randn({m, d}, rng, wstd);
      w.baseline.W2 = randn({m, d}, rng, wstd);
      w.baseline.sigma = cfg.sigma;
      w.baseline.beta = cfg.beta;
      w.baseline.include_self = cfg.include_self;
    } else {
      for (int i = 0; i < h; ++i) w.energy.at.J.push_back(randn({d, d}, rng, wstd));
      w.energy.at.alpha = Tensor::full({h}, 1.0 / h);
      w.energy.at.beta = cfg.beta;
      w.energy.at.include_self = cfg.include_self;
      w.energy.ff.variant = cfg.kind == ModelKind::NrgptFF1    ? FFVariant::FF1
                            : cfg.kind == ModelKind::NrgptFF2W ? FFVariant::FF2W
                                                               : FFVariant::DamRelu;
      w.energy.ff.sigma = cfg.kind == ModelKind::NrgptDamRelu ? Act::Relu : cfg.sigma;
      w.energy.ff.W1 = randn({m, d}, rng, wstd);
      if (cfg.kind == ModelKind::NrgptFF2W) w.energy.ff.W2 = randn({m, d}, rng, wstd);

      w.rate.mode = cfg.rate_mode;
      w.rate.per_step = cfg.rate_per_step;
      const int slots = cfg.rate_per_step ? cfg.steps : 1;
      switch (cfg.rate_mode) {
        case RateMode::ScalarGamma:
          w.rate.softplus_c = true;  // keeps the learnable c positive
          for (int s = 0; s < slots; ++s)
            w.rate.c_raw.push_back(Tensor::scalar(std::log(std::exp(1.0) - 1.0)));  // softplus^-1(1)
          break;
        case RateMode::LearnableSymAsym:
          for (int s = 0; s < slots; ++s) {
            Tensor u = Tensor::zeros({dprime, d});
            for (int i = 0; i < std::min(dprime, d); ++i) u.at2(i, i) = 1.0;
            w.rate.U.push_back(u);  // U^T U = I at init
            w.rate.V.push_back(randn({d, d}, rng, 0.02));
          }
          break;
        case RateMode::Unconstrained:
          for (int s = 0; s < slots; ++s) {
            Tensor eta = Tensor::zeros({d, d});
            for (int i = 0; i < d; ++i) eta.at2(i, i) = 1.0;
            w.rate.M.push_back(eta);
          }
          break;
        default:
          break;
      }
    }

    if (cfg.norm_kind != NormKind::None) {
      w.core_norm.kind = cfg.norm_kind;
      w.core_norm.gamma = Tensor::full({d}, 1.0);
      w.core_norm.shift = Tensor::zeros({d});
      w.core_norm.epsilon = cfg.norm_eps;
      w.final_norm.kind = cfg.norm_kind;
      w.final_norm.gamma = Tensor::full({d}, 1.0);
      w.final_norm.shift = Tensor::zeros({d});
      w.final_norm.epsilon = cfg.norm_eps;
    } else {
      w.core_norm = NormParams::none();
      w.final_norm = NormParams::none();
    }
  }

  std::vector<ParamRef> parameters() { return nrgpt::parameters(w, cfg); }

  int64_t parameter_count() {
    int64_t n = 0;
    for (auto& [name, t] : parameters()) n += static_cast<int64_t>(t->numel());
    return n;
  }

  // Copy of the weight set with every parameter registered on `tape`.
  Weights leafed(Tape& tape) {
    Weights out = w;
    for (auto& [name, t] : nrgpt::parameters(out, cfg)) *t = tape.leaf(*t);
    return out;
  }

  // logits [n, V]. With a tape, pass the leafed weights; dropout (training
  // only) applies to the embedding sum and nowhere else.
  Tensor forward(const std::vector<int>& ids, const Weights& weights, Rng* dropout_rng = nullptr) const {
    const int n = static_cast<int>(ids.size());
    if (n == 0) throw ContractError("forward: empty input");
    if (n > cfg.context) throw ContractError("forward: sequence longer than context");
    for (int id : ids)
      if (id < 0 || id >= cfg.vocab_size) throw ContractError("forward: token id out of range");

    std::vector<int> pos(static_cast<size_t>(n));
    for (int i = 0; i < n; ++i) pos[static_cast<size_t>(i)] = i;
    Tensor x = add(embed_rows(ids, weights.tok_emb), embed_rows(pos, weights.pos_emb));

    if (dropout_rng && cfg.dropout > 0.0) {
      Tensor mask = Tensor::zeros(x.shape);
      const double keep = 1.0 - cfg.dropout;
      for (size_t i = 0; i < mask.numel(); ++i)
        mask.at(i) = dropout_rng->uniform() < keep ? 1.0 / keep : 0.0;
      x = mul(x, mask);
    }

    if (cfg.kind == ModelKind::BaselineParallel) {
      for (int t = 0; t < cfg.steps; ++t)
        x = baseline_parallel_step(x, weights.baseline, weights.core_norm, t);
    } else {
      x = unroll(x, cfg.steps, weights.energy, weights.rate, weights.core_norm);
    }
    Tensor h = norm_rows(x, weights.final_norm);
    return matmul_nt(h, weights.tok_emb);  // tied unembedding
  }

  Tensor forward(const std::vector<int>& ids) const { return forward(ids, w); }

  // Greedy argmax or temperature sampling from the last position.
  std::vector<int> generate(const std::vector<int>& prompt, int max_new, double temperature,
                            bool greedy, Rng& rng) const {
    if (prompt.empty()) throw ContractError("generate: empty prompt");
    std::vector<int> out = prompt;
    for (int i = 0; i < max_new; ++i) {
      const int start = std::max(0, static_cast<int>(out.size()) - cfg.context);
      std::vector<int> ctx(out.begin() + start, out.end());
      Tensor logits = forward(ctx, w);
      const int last = logits.rows() - 1;
      int pick = 0;
      if (greedy || temperature < 1e-12) {
        double best = logits.at2(last, 0);
        for (int v = 1; v < cfg.vocab_size; ++v)
          if (logits.at2(last, v) > best) {
            best = logits.at2(last, v);
            pick = v;
          }
      } else {
        std::vector<double> p(static_cast<size_t>(cfg.vocab_size));
        double m = -std::numeric_limits<double>::infinity();
        for (int v = 0; v < cfg.vocab_size; ++v) m = std::max(m, logits.at2(last, v) / temperature);
        double z = 0.0;
        for (int v = 0; v < cfg.vocab_size; ++v) {
          p[static_cast<size_t>(v)] = std::exp(logits.at2(last, v) / temperature - m);
          z += p[static_cast<size_t>(v)];
        }
        double u = rng.uniform() * z, acc = 0.0;
        pick = cfg.vocab_size - 1;
        for (int v = 0; v < cfg.vocab_size; ++v) {
          acc += p[static_cast<size_t>(v)];
          if (u < acc) {
            pick = v;
            break;
          }
        }
      }
      out.push_back(pick);
    }
    return out;
  }
};

// ---------------------------------------------------------------------------
// Multiply-add accounting. These formulas mirror the gemm calls made by the
// forward pass one for one; the instrumented counter must agree exactly.
// ---------------------------------------------------------------------------

struct FlopEstimate {
  uint64_t att_step = 0, ff_step = 0, rate_step = 0;  // per unroll step
  uint64_t step_total = 0, unembed = 0, forward_total = 0;
  uint64_t base_att_step = 0, base_ff_step = 0, base_step_total = 0, base_forward_total = 0;

  double att_ratio() const { return static_cast<double>(att_step) / static_cast<double>(base_att_step); }
  double ff_ratio() const { return static_cast<double>(ff_step) / static_cast<double>(base_ff_step); }
  double forward_ratio() const {
    return static_cast<double>(forward_total) / static_cast<double>(base_forward_total);
  }
};

inline FlopEstimate estimate_flops(const ModelConfig& cfg) {
  const uint64_t n = static_cast<uint64_t>(cfg.context);
  const uint64_t d = static_cast<uint64_t>(cfg.embed_dim);
  const uint64_t h = static_cast<uint64_t>(cfg.heads);
  const uint64_t m = static_cast<uint64_t>(cfg.hidden());
  const uint64_t v = static_cast<uint64_t>(cfg.vocab_size);
  const uint64_t t = static_cast<uint64_t>(cfg.steps);
  const uint64_t dprime = cfg.rate_inner_dim > 0 ? static_cast<uint64_t>(cfg.rate_inner_dim) : d;

  FlopEstimate e;
  // NRGPT attention per head: g.J (n d d), scores (n n d), SM.g (n n d), s.J (n d d)
  e.att_step = h * (2 * n * d * d + 2 * n * n * d);
  switch (cfg.kind) {
    case ModelKind::NrgptFF2W: e.ff_step = 4 * n * d * m; break;
    case ModelKind::BaselineParallel:
    case ModelKind::NrgptFF1:
    case ModelKind::NrgptDamRelu: e.ff_step = 2 * n * d * m; break;
  }
  switch (cfg.rate_mode) {
    case RateMode::LearnableSymAsym: e.rate_step = dprime * d * d + n * d * d; break;
    case RateMode::Unconstrained: e.rate_step = n * d * d; break;
    default: e.rate_step = 0; break;
  }
  e.unembed = n * d * v;

  // Equal-width baseline: per head K,Q,V (3 n y d), scores (n n y), SM.V (n n y),
  // head proj (n y d); FF at the standard 4x hidden.
  const uint64_t y = d / h;
  e.base_att_step = h * (4 * n * y * d + 2 * n * n * y);
  e.base_ff_step = 2 * n * d * (4 * d);
  e.base_step_total = e.base_att_step + e.base_ff_step;
  e.base_forward_total = t * e.base_step_total + e.unembed;

  if (cfg.kind == ModelKind::BaselineParallel) {
    e.att_step = e.base_att_step;
    e.ff_step = 2 * n * d * m;
    e.rate_step = 0;
  }
  e.step_total = e.att_step + e.ff_step + e.rate_step;
  e.forward_total = t * e.step_total + e.unembed;
  return e;
}

}  // namespace nrgpt
