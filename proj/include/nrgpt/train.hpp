#pragma once

// AdamW, warmup schedules, the training loop with gradient accumulation and
// deterministic batch parallelism, plus the distinct-n diversity metric.

#include <chrono>
#include <filesystem>
#include <fstream>
#include <iomanip>
#include <set>
#include <string>
#include <vector>

#include "nrgpt/checkpoint.hpp"
#include "nrgpt/listops.hpp"
#include "nrgpt/model.hpp"

namespace nrgpt {

// ---------------------------------------------------------------------------
// Learning-rate schedule: linear warmup 0 -> max_lr, then cosine or geometric
// decay to min_lr at max_iters, and min_lr beyond.
// ---------------------------------------------------------------------------

struct Schedule {
  enum class Kind { Cosine, Exponential, Constant };
  Kind kind = Kind::Cosine;
  double max_lr = 1e-3;
  double min_lr = 1e-4;
  int warmup_iters = 100;
  int max_iters = 5000;

  void validate() const {
    if (!(0.0 < min_lr && min_lr <= max_lr)) throw ConfigError("need 0 < min_lr <= max_lr");
    if (warmup_iters >= max_iters) throw ConfigError("need warmup_iters < max_iters");
  }

  double at(int iter) const {
    if (iter < 0) throw ContractError("lr_at: negative iter");
    if (warmup_iters > 0 && iter <= warmup_iters)
      return max_lr * static_cast<double>(iter) / warmup_iters;
    if (iter >= max_iters) return min_lr;
    if (kind == Kind::Constant) return max_lr;
    const double progress = static_cast<double>(iter - warmup_iters) / (max_iters - warmup_iters);
    if (kind == Kind::Cosine)
      return min_lr + 0.5 * (max_lr - min_lr) * (1.0 + std::cos(3.14159265358979323846 * progress));
    return max_lr * std::pow(min_lr / max_lr, progress);
  }

  static Kind kind_from(const std::string& s) {
    if (s == "cosine") return Kind::Cosine;
    if (s == "exponential") return Kind::Exponential;
    if (s == "constant") return Kind::Constant;
    throw ConfigError("unknown schedule: " + s);
  }
  const char* kind_str() const {
    switch (kind) {
      case Kind::Cosine: return "cosine";
      case Kind::Exponential: return "exponential";
      default: return "constant";
    }
  }
};

// inverse of lr_at for the warmup edge is exact: at(warmup_iters) == max_lr

// ---------------------------------------------------------------------------
// AdamW. Decoupled decay applies to matrices only; gamma / shift / alpha and
// the step-size scalars are left undecayed.
// ---------------------------------------------------------------------------

struct AdamConfig {
  double beta1 = 0.9;
  double beta2 = 0.99;
  double eps = 1e-8;
  double weight_decay = 0.0;
  double grad_clip = 1.0;  // global norm; <= 0 disables
};

inline void adamw_step(const std::vector<ParamRef>& params, const std::vector<Tensor>& grads,
                       OptimState& state, const AdamConfig& cfg, double lr) {
  if (grads.size() != params.size()) throw ContractError("adamw_step: grads/params mismatch");
  for (const auto& g : grads)
    if (!all_finite(g)) throw DivergedError(static_cast<int>(state.step), "NaN gradient");

  double scale_factor = 1.0;
  if (cfg.grad_clip > 0.0) {
    double sq = 0.0;
    for (const auto& g : grads)
      for (size_t i = 0; i < g.numel(); ++i) sq += g.at(i) * g.at(i);
    const double norm = std::sqrt(sq);
    if (norm > cfg.grad_clip) scale_factor = cfg.grad_clip / norm;
  }

  state.step += 1;
  const double bc1 = 1.0 - std::pow(cfg.beta1, static_cast<double>(state.step));
  const double bc2 = 1.0 - std::pow(cfg.beta2, static_cast<double>(state.step));
  for (size_t p = 0; p < params.size(); ++p) {
    Tensor& w = *params[p].second;
    const Tensor& g = grads[p];
    Tensor& m = state.m[p];
    Tensor& v = state.v[p];
    const bool decay = cfg.weight_decay > 0.0 && w.rank() >= 2;
    for (size_t i = 0; i < w.numel(); ++i) {
      const double gi = g.at(i) * scale_factor;
      m.at(i) = cfg.beta1 * m.at(i) + (1.0 - cfg.beta1) * gi;
      v.at(i) = cfg.beta2 * v.at(i) + (1.0 - cfg.beta2) * gi * gi;
      const double mhat = m.at(i) / bc1;
      const double vhat = v.at(i) / bc2;
      double next = w.at(i) - lr * mhat / (std::sqrt(vhat) + cfg.eps);
      if (decay) next -= lr * cfg.weight_decay * w.at(i);
      w.at(i) = next;
    }
  }
}

// ---------------------------------------------------------------------------
// distinct-n: unique n-grams over whitespace words / total n-grams.
// ---------------------------------------------------------------------------

inline double distinct_n(const std::string& text, int n) {
  if (n < 1 || n > 2) throw ContractError("distinct_n: n must be 1 or 2");
  std::vector<std::string> words;
  std::string cur;
  for (char c : text) {
    if (c == ' ' || c == '\t' || c == '\n' || c == '\r') {
      if (!cur.empty()) words.push_back(cur);
      cur.clear();
    } else {
      cur += c;
    }
  }
  if (!cur.empty()) words.push_back(cur);
  if (static_cast<int>(words.size()) < n) return 0.0;
  std::set<std::string> unique;
  const int total = static_cast<int>(words.size()) - n + 1;
  for (int i = 0; i < total; ++i) {
    std::string gram = words[static_cast<size_t>(i)];
    for (int k = 1; k < n; ++k) gram += " " + words[static_cast<size_t>(i + k)];
    unique.insert(gram);
  }
  return static_cast<double>(unique.size()) / total;
}

// ---------------------------------------------------------------------------
// Batching. A Batcher maps (seed, iter) to a batch deterministically, which
// makes checkpoint resume exact by construction.
// ---------------------------------------------------------------------------

struct Batch {
  std::vector<std::vector<int>> inputs;
  std::vector<std::vector<int>> targets;
};

class Batcher {
 public:
  virtual ~Batcher() = default;
  virtual Batch make(uint64_t seed, uint64_t tick, int batch_size, bool val) const = 0;
};

// Whole sequences (no padding; each sample keeps its own length). Targets are
// the inputs shifted by one, with the trailing EOS predicted as well.
class SampleBatcher final : public Batcher {
 public:
  SampleBatcher(std::vector<std::vector<int>> train, std::vector<std::vector<int>> val)
      : train_(std::move(train)), val_(std::move(val)) {
    if (train_.empty() || val_.empty()) throw ContractError("SampleBatcher: empty split");
  }

  Batch make(uint64_t seed, uint64_t tick, int batch_size, bool val) const override {
    const auto& pool = val ? val_ : train_;
    Rng rng = Rng::stream(seed ^ (val ? 0x76616cull : 0ull), tick);
    Batch b;
    for (int i = 0; i < batch_size; ++i) {
      const auto& ids = pool[rng.below(pool.size())];
      b.inputs.emplace_back(ids.begin(), ids.end() - 1);
      b.targets.emplace_back(ids.begin() + 1, ids.end());
    }
    return b;
  }

  const std::vector<std::vector<int>>& val_samples() const { return val_; }

 private:
  std::vector<std::vector<int>> train_, val_;
};

// Random fixed-length windows over a token stream (char-level text).
class StreamBatcher final : public Batcher {
 public:
  StreamBatcher(std::vector<int> train, std::vector<int> val, int context)
      : train_(std::move(train)), val_(std::move(val)), context_(context) {
    if (static_cast<int>(train_.size()) <= context_ + 1 || static_cast<int>(val_.size()) <= context_ + 1)
      throw ContractError("StreamBatcher: stream shorter than context");
  }

  Batch make(uint64_t seed, uint64_t tick, int batch_size, bool val) const override {
    const auto& pool = val ? val_ : train_;
    Rng rng = Rng::stream(seed ^ (val ? 0x76616cull : 0ull), tick);
    Batch b;
    for (int i = 0; i < batch_size; ++i) {
      const uint64_t o = rng.below(pool.size() - static_cast<size_t>(context_) - 1);
      b.inputs.emplace_back(pool.begin() + static_cast<long>(o), pool.begin() + static_cast<long>(o) + context_);
      b.targets.emplace_back(pool.begin() + static_cast<long>(o) + 1,
                             pool.begin() + static_cast<long>(o) + context_ + 1);
    }
    return b;
  }

 private:
  std::vector<int> train_, val_;
  int context_;
};

// ---------------------------------------------------------------------------
// Training loop
// ---------------------------------------------------------------------------

struct TrainConfig {
  int batch_size = 32;
  int grad_accum = 1;
  int max_iters = 5000;
  int eval_interval = 250;
  int eval_iters = 200;
  int log_interval = 50;
  int accuracy_samples = 500;   // ListOps answer accuracy per eval; 0 disables
  double target_accuracy = -1;    // stop once val accuracy reaches this
  double target_train_loss = -1;  // stop once train loss falls below this
  int ignore_id = -1;             // target id excluded from the loss (-1: none)
  Schedule schedule;
  AdamConfig adam;
  uint64_t seed = 1337;
  int threads = 0;
  std::string out_dir;  // metrics.csv + checkpoints, empty = no files

  KvConfig to_kv() const {
    KvConfig c;
    c.set_int("batch_size", batch_size);
    c.set_int("grad_accum", grad_accum);
    c.set_int("max_iters", max_iters);
    c.set_int("eval_interval", eval_interval);
    c.set_int("eval_iters", eval_iters);
    c.set_int("log_interval", log_interval);
    c.set_int("accuracy_samples", accuracy_samples);
    c.set_double("target_accuracy", target_accuracy);
    c.set_double("target_train_loss", target_train_loss);
    c.set_int("ignore_id", ignore_id);
    c.set("schedule", schedule.kind_str());
    c.set_double("max_lr", schedule.max_lr);
    c.set_double("min_lr", schedule.min_lr);
    c.set_int("warmup_iters", schedule.warmup_iters);
    c.set_double("beta1", adam.beta1);
    c.set_double("beta2", adam.beta2);
    c.set_double("adam_eps", adam.eps);
    c.set_double("weight_decay", adam.weight_decay);
    c.set_double("grad_clip", adam.grad_clip);
    c.set_int("train_seed", static_cast<long long>(seed));
    c.set_int("threads", threads);
    return c;
  }

  static TrainConfig from_kv(const KvConfig& c) {
    TrainConfig t;
    t.batch_size = static_cast<int>(c.get_int("batch_size", t.batch_size));
    t.grad_accum = static_cast<int>(c.get_int("grad_accum", t.grad_accum));
    t.max_iters = static_cast<int>(c.get_int("max_iters", t.max_iters));
    t.eval_interval = static_cast<int>(c.get_int("eval_interval", t.eval_interval));
    t.eval_iters = static_cast<int>(c.get_int("eval_iters", t.eval_iters));
    t.log_interval = static_cast<int>(c.get_int("log_interval", t.log_interval));
    t.accuracy_samples = static_cast<int>(c.get_int("accuracy_samples", t.accuracy_samples));
    t.target_accuracy = c.get_double("target_accuracy", t.target_accuracy);
    t.target_train_loss = c.get_double("target_train_loss", t.target_train_loss);
    t.ignore_id = static_cast<int>(c.get_int("ignore_id", t.ignore_id));
    t.schedule.kind = Schedule::kind_from(c.get_str("schedule", "cosine"));
    t.schedule.max_lr = c.get_double("max_lr", t.schedule.max_lr);
    t.schedule.min_lr = c.get_double("min_lr", t.schedule.min_lr);
    t.schedule.warmup_iters = static_cast<int>(c.get_int("warmup_iters", t.schedule.warmup_iters));
    t.schedule.max_iters = t.max_iters;
    t.adam.beta1 = c.get_double("beta1", t.adam.beta1);
    t.adam.beta2 = c.get_double("beta2", t.adam.beta2);
    t.adam.eps = c.get_double("adam_eps", t.adam.eps);
    t.adam.weight_decay = c.get_double("weight_decay", t.adam.weight_decay);
    t.adam.grad_clip = c.get_double("grad_clip", t.adam.grad_clip);
    t.seed = static_cast<uint64_t>(c.get_int("train_seed", 1337));
    t.threads = static_cast<int>(c.get_int("threads", 0));
    t.schedule.validate();
    return t;
  }
};

struct TrainResult {
  double best_val_loss = std::numeric_limits<double>::infinity();
  double best_val_accuracy = 0.0;
  double final_train_loss = 0.0;
  int iters_run = 0;
  std::string best_checkpoint;
};

namespace detail {

// Mean loss over one micro-batch plus per-parameter gradient sums, computed
// with one tape per sequence and reduced in sequence order.
inline double batch_grads(Model& model, const Batch& batch, int threads, int ignore_id,
                          std::vector<Tensor>& grad_accum, Rng* drop_base, uint64_t drop_tick) {
  const int bsz = static_cast<int>(batch.inputs.size());
  std::vector<std::vector<Tensor>> slot(static_cast<size_t>(bsz));
  std::vector<double> losses(static_cast<size_t>(bsz), 0.0);
  parallel_for(bsz, threads, [&](int b) {
    Tape tape;
    Weights wl = model.leafed(tape);
    Rng drop = drop_base ? Rng::stream(model.cfg.seed ^ 0x64726f70ull, drop_tick * 4096 + static_cast<uint64_t>(b))
                         : Rng(0);
    Tensor logits = model.forward(batch.inputs[static_cast<size_t>(b)], wl,
                                  drop_base ? &drop : nullptr);
    Tensor loss = cross_entropy_mean(logits, batch.targets[static_cast<size_t>(b)], ignore_id);
    losses[static_cast<size_t>(b)] = loss.item();
    tape.backward(loss);
    auto lp = nrgpt::parameters(wl, model.cfg);
    auto& grads = slot[static_cast<size_t>(b)];
    grads.reserve(lp.size());
    for (auto& [name, t] : lp) grads.push_back(tape.grad(*t));
  });
  double mean_loss = 0.0;
  for (int b = 0; b < bsz; ++b) {
    mean_loss += losses[static_cast<size_t>(b)] / bsz;
    for (size_t p = 0; p < grad_accum.size(); ++p) {
      const Tensor& g = slot[static_cast<size_t>(b)][p];
      for (size_t i = 0; i < g.numel(); ++i) grad_accum[p].at(i) += g.at(i) / bsz;
    }
  }
  return mean_loss;
}

inline double eval_loss(Model& model, const Batcher& data, const TrainConfig& cfg) {
  double total = 0.0;
  int count = 0;
  for (int it = 0; it < cfg.eval_iters; ++it) {
    Batch batch = data.make(cfg.seed, static_cast<uint64_t>(it), cfg.batch_size, true);
    std::vector<double> losses(batch.inputs.size(), 0.0);
    parallel_for(static_cast<int>(batch.inputs.size()), resolve_threads(cfg.threads), [&](int b) {
      Tensor logits = model.forward(batch.inputs[static_cast<size_t>(b)], model.w);
      losses[static_cast<size_t>(b)] =
          cross_entropy_mean(logits, batch.targets[static_cast<size_t>(b)], cfg.ignore_id).item();
    });
    for (double l : losses) {
      total += l;
      ++count;
    }
  }
  return total / count;
}

}  // namespace detail

// Metrics CSV rows: iter,split,loss,accuracy,lr,wall_ms (accuracy blank when
// not measured). Checkpoints <out>/ckpt_last and <out>/ckpt_best.
inline TrainResult train_loop(Model& model, const Batcher& data, TrainConfig cfg,
                              const std::vector<std::vector<int>>* accuracy_samples = nullptr,
                              const std::string& resume_from = "") {
  cfg.schedule.validate();
  const int threads = resolve_threads(cfg.threads);
  auto params = model.parameters();
  OptimState opt = OptimState::init(params);
  int start_iter = 0;
  Rng master(cfg.seed);

  if (!resume_from.empty()) {
    CheckpointMeta meta;
    Model loaded = load_checkpoint(resume_from, &opt, &meta);
    if (loaded.cfg.to_kv().entries() != model.cfg.to_kv().entries())
      throw ConfigError("resume: checkpoint config does not match");
    auto lp = loaded.parameters();
    for (size_t i = 0; i < params.size(); ++i)
      std::copy(lp[i].second->data->begin(), lp[i].second->data->end(), params[i].second->data->begin());
    start_iter = static_cast<int>(meta.iteration);
    master.set_state(meta.rng_state);
  }

  std::ofstream metrics;
  if (!cfg.out_dir.empty()) {
    std::filesystem::create_directories(cfg.out_dir);
    const bool fresh = start_iter == 0;
    metrics.open(cfg.out_dir + "/metrics.csv", fresh ? std::ios::trunc : std::ios::app);
    if (fresh) metrics << "iter,split,loss,accuracy,lr,wall_ms\n";
  }

  TrainResult res;
  std::vector<Tensor> grad_accum;
  grad_accum.reserve(params.size());
  for (auto& [name, t] : params) grad_accum.push_back(Tensor::zeros(t->shape));

  const auto t0 = std::chrono::steady_clock::now();
  auto wall_ms = [&] {
    return std::chrono::duration<double, std::milli>(std::chrono::steady_clock::now() - t0).count();
  };

  auto save = [&](const std::string& name, int iter) {
    if (cfg.out_dir.empty()) return std::string();
    CheckpointMeta meta;
    meta.iteration = iter;
    meta.rng_state = master.state();
    const std::string prefix = cfg.out_dir + "/" + name;
    save_checkpoint(prefix, model, &opt, meta);
    return prefix;
  };

  double last_train_loss = 0.0;
  for (int iter = start_iter; iter < cfg.max_iters; ++iter) {
    const double lr = cfg.schedule.at(iter);
    for (auto& g : grad_accum) std::fill(g.data->begin(), g.data->end(), 0.0);
    double loss = 0.0;
    for (int a = 0; a < cfg.grad_accum; ++a) {
      const uint64_t tick = static_cast<uint64_t>(iter) * static_cast<uint64_t>(cfg.grad_accum) + a;
      Batch batch = data.make(cfg.seed, tick, cfg.batch_size, false);
      loss += detail::batch_grads(model, batch, threads, cfg.ignore_id, grad_accum,
                                  model.cfg.dropout > 0.0 ? &master : nullptr, tick) /
              cfg.grad_accum;
    }
    if (cfg.grad_accum > 1)
      for (auto& g : grad_accum)
        for (size_t i = 0; i < g.numel(); ++i) g.at(i) /= cfg.grad_accum;
    adamw_step(params, grad_accum, opt, cfg.adam, lr);
    last_train_loss = loss;
    res.iters_run = iter + 1;
    if (cfg.target_train_loss > 0.0 && loss < cfg.target_train_loss) {
      res.final_train_loss = loss;
      save("ckpt_last", iter + 1);
      if (res.best_checkpoint.empty()) res.best_checkpoint = save("ckpt_best", iter + 1);
      return res;
    }

    if (metrics.is_open() && (iter % cfg.log_interval == 0 || iter + 1 == cfg.max_iters))
      metrics << iter << ",train," << std::setprecision(10) << loss << ",," << lr << ','
              << wall_ms() << "\n" << std::flush;

    const bool last = iter + 1 == cfg.max_iters;
    if ((iter + 1) % cfg.eval_interval == 0 || last) {
      const double vl = detail::eval_loss(model, data, cfg);
      double acc = -1.0;
      if (accuracy_samples && cfg.accuracy_samples > 0)
        acc = listops::answer_accuracy(model, *accuracy_samples, cfg.accuracy_samples, threads);
      if (metrics.is_open()) {
        metrics << iter << ",val," << std::setprecision(10) << vl << ',';
        if (acc >= 0.0) metrics << acc;
        metrics << ',' << lr << ',' << wall_ms() << "\n" << std::flush;
      }
      save("ckpt_last", iter + 1);
      if (vl < res.best_val_loss) {
        res.best_val_loss = vl;
        res.best_checkpoint = save("ckpt_best", iter + 1);
      }
      if (acc > res.best_val_accuracy) res.best_val_accuracy = acc;
      if (cfg.target_accuracy > 0.0 && acc >= cfg.target_accuracy) break;
    }
  }
  res.final_train_loss = last_train_loss;
  if (res.best_checkpoint.empty()) res.best_checkpoint = save("ckpt_best", res.iters_run);
  return res;
}

}  // namespace nrgpt
