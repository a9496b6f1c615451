// nrgpt command-line tool: data generation, training, evaluation, energy
// tracing, gradient checking, and FLOP reports.
//
// Exit codes: 0 success, 1 usage/config error, 2 numerical divergence,
// 3 oracle/verification failure.

#include <CLI11.hpp>

#include <cstdio>
#include <filesystem>
#include <fstream>
#include <iostream>

#include "nrgpt/gradcheck.hpp"
#include "nrgpt/textdata.hpp"
#include "nrgpt/train.hpp"

namespace fs = std::filesystem;
using namespace nrgpt;

namespace {

struct CommonOpts {
  int threads = 0;
};

// Flag overrides are collected as config keys so that precedence is simply
// defaults < config file < flags, and the resolved map is the audit record.
struct KvFlag {
  CLI::Option* opt = nullptr;
  std::string key;
  std::string* value;
};

class KvFlags {
 public:
  void add(CLI::App* cmd, const std::string& flag, const std::string& key, const std::string& help) {
    storage_.push_back(std::make_unique<std::string>());
    KvFlag f;
    f.value = storage_.back().get();
    f.key = key;
    f.opt = cmd->add_option(flag, *f.value, help);
    flags_.push_back(f);
  }
  void apply(KvConfig& cfg) const {
    for (const auto& f : flags_)
      if (f.opt->count() > 0) cfg.set(f.key, *f.value);
  }

 private:
  std::vector<KvFlag> flags_;
  std::vector<std::unique_ptr<std::string>> storage_;
};

std::vector<int> parse_id_list(const std::string& s) {
  std::vector<int> out;
  std::string cur;
  for (char c : s) {
    if (c == ',') {
      if (!cur.empty()) out.push_back(std::stoi(cur));
      cur.clear();
    } else {
      cur += c;
    }
  }
  if (!cur.empty()) out.push_back(std::stoi(cur));
  return out;
}

KvConfig parse_override_line(const std::string& line) {
  KvConfig cfg;
  std::istringstream ss(line);
  std::string tok;
  while (ss >> tok) {
    const auto eq = tok.find('=');
    if (eq == std::string::npos) throw ConfigError("sweep override needs key=value, got: " + tok);
    cfg.set(tok.substr(0, eq), tok.substr(eq + 1));
  }
  return cfg;
}

// ---------------------------------------------------------------------------
// gen-data
// ---------------------------------------------------------------------------

int cmd_gen_data(const std::string& out_dir, const listops::GenConfig& base, double val_fraction) {
  fs::create_directories(out_dir);
  listops::GenConfig gc = base;
  gc.validate();
  const int val_count = std::max(1, static_cast<int>(gc.count * val_fraction));
  const int train_count = gc.count;

  listops::GenConfig train_cfg = gc;
  train_cfg.count = train_count;
  auto train = listops::generate_dataset(train_cfg, 0);
  listops::GenConfig val_cfg = gc;
  val_cfg.count = val_count;
  auto val = listops::generate_dataset(val_cfg, static_cast<uint64_t>(train_count));

  listops::write_text(out_dir + "/train.txt", train);
  listops::write_text(out_dir + "/val.txt", val);
  listops::write_shard(out_dir + "/train.bin", train);
  listops::write_shard(out_dir + "/val.bin", val);
  listops::write_vocab(out_dir + "/vocab.json");

  KvConfig snap;
  snap.set_int("samples", gc.count);
  snap.set_int("val_samples", val_count);
  snap.set_int("max_depth", gc.max_depth);
  snap.set_int("arity_min", gc.arity_min);
  snap.set_int("arity_max", gc.arity_max);
  snap.set_int("max_tokens", gc.max_tokens);
  snap.set_int("seed", static_cast<long long>(gc.seed));
  snap.write_file(out_dir + "/gen_config.txt");

  std::printf("wrote %d train / %d val samples to %s (vocab %d)\n", train_count, val_count,
              out_dir.c_str(), listops::kVocabSize);
  return 0;
}

// ---------------------------------------------------------------------------
// train
// ---------------------------------------------------------------------------

struct LoadedData {
  std::unique_ptr<Batcher> batcher;
  std::vector<std::vector<int>> accuracy_samples;  // listops only
  int vocab_size = 0;
  bool is_listops = false;
};

LoadedData load_data(const std::string& data_dir, const std::string& text_path, int context) {
  LoadedData d;
  if (!data_dir.empty()) {
    auto train = listops::read_shard(data_dir + "/train.bin");
    auto val = listops::read_shard(data_dir + "/val.bin");
    d.accuracy_samples = val;
    d.batcher = std::make_unique<SampleBatcher>(std::move(train), std::move(val));
    d.vocab_size = listops::kVocabSize;
    d.is_listops = true;
  } else if (!text_path.empty()) {
    auto corpus = textdata::load_char_corpus(text_path);
    d.vocab_size = corpus.vocab_size();
    d.batcher = std::make_unique<StreamBatcher>(std::move(corpus.train_ids), std::move(corpus.val_ids), context);
  } else {
    throw ConfigError("train/eval needs --data DIR or --text FILE");
  }
  return d;
}

int run_one_training(KvConfig merged, const std::string& out_dir, const std::string& data_dir,
                     const std::string& text_path, const std::string& resume, int threads) {
  merged.set("model", merged.get_str("model", "nrgpt_ff1"));
  ModelConfig probe = [&] {
    KvConfig tmp = merged;
    tmp.set_int("vocab_size", 1);  // placeholder until data decides
    return ModelConfig::from_kv(tmp);
  }();
  LoadedData data = load_data(data_dir, text_path, probe.context);
  merged.set_int("vocab_size", data.vocab_size);
  if (data.is_listops && !merged.has("ignore_id")) merged.set_int("ignore_id", listops::kPad);
  ModelConfig mc = ModelConfig::from_kv(merged);

  TrainConfig tc = TrainConfig::from_kv(merged);
  tc.threads = threads > 0 ? threads : tc.threads;
  tc.out_dir = out_dir;

  Model model(mc);
  fs::create_directories(out_dir);
  KvConfig resolved = mc.to_kv();
  resolved.merge(tc.to_kv());
  if (!data_dir.empty()) resolved.set("data", data_dir);
  if (!text_path.empty()) resolved.set("text", text_path);
  resolved.write_file(out_dir + "/config_resolved.txt");

  std::printf("model %s  params %lld  vocab %d  context %d  T %d\n", to_string(mc.kind),
              static_cast<long long>(model.parameter_count()), mc.vocab_size, mc.context, mc.steps);
  TrainResult res = train_loop(model, *data.batcher, tc,
                               data.is_listops ? &data.accuracy_samples : nullptr, resume);
  std::printf("done: iters %d  best val loss %.6f  best val accuracy %.4f\n", res.iters_run,
              res.best_val_loss, res.best_val_accuracy);
  return 0;
}

// ---------------------------------------------------------------------------
// trace-energy
// ---------------------------------------------------------------------------

int cmd_trace_energy(const std::string& ckpt, const std::string& out_path, int steps,
                     const std::string& eta_override, const std::string& data_dir, int index,
                     int tokens, const std::string& expr, const std::string& ids_csv) {
  Model model = load_checkpoint(ckpt);
  if (model.cfg.kind == ModelKind::BaselineParallel)
    throw ConfigError("trace-energy requires an NRGPT checkpoint");

  std::vector<int> ids;
  if (!ids_csv.empty()) {
    ids = parse_id_list(ids_csv);
  } else if (!expr.empty()) {
    ids = listops::tokenize(expr);
  } else if (!data_dir.empty()) {
    auto val = listops::read_shard(data_dir + "/val.bin");
    if (val.empty()) throw IoError("empty val shard");
    for (size_t k = static_cast<size_t>(index); ids.size() < static_cast<size_t>(tokens); ++k)
      for (int id : val[k % val.size()]) ids.push_back(id);
    ids.resize(static_cast<size_t>(tokens));
  } else {
    throw ConfigError("trace-energy needs --ids, --expr, or --data");
  }
  if (static_cast<int>(ids.size()) > model.cfg.context)
    throw ConfigError("input longer than model context");
  for (int id : ids)
    if (id < 0 || id >= model.cfg.vocab_size) throw ShapeError("token id out of checkpoint vocab");

  InferenceRate rate = model.w.rate;
  if (eta_override == "identity")
    rate = InferenceRate::identity();
  else if (eta_override != "none")
    throw ConfigError("--eta-override must be none or identity");

  std::vector<int> pos(ids.size());
  for (size_t i = 0; i < ids.size(); ++i) pos[i] = static_cast<int>(i);
  Tensor x0 = add(embed_rows(ids, model.w.tok_emb), embed_rows(pos, model.w.pos_emb));

  Trajectory traj;
  unroll(x0, steps, model.w.energy, rate, model.w.core_norm, &traj);
  std::ofstream out(out_path, std::ios::trunc);
  if (!out) throw IoError("cannot write " + out_path);
  traj.to_csv(out);
  std::printf("wrote %d tokens x %d steps to %s\n", traj.tokens, traj.steps(), out_path.c_str());
  return 0;
}

// ---------------------------------------------------------------------------
// eval
// ---------------------------------------------------------------------------

int cmd_eval(const std::string& ckpt, const std::string& data_dir, const std::string& text_path,
             int eval_iters, int batch_size, int samples, int gen_chars, double temperature,
             const std::string& prompt, int threads) {
  Model model = load_checkpoint(ckpt);
  LoadedData data = load_data(data_dir, text_path, model.cfg.context);
  if (data.vocab_size != model.cfg.vocab_size)
    throw ConfigError("checkpoint vocab does not match the dataset");

  double total = 0.0;
  int count = 0;
  for (int it = 0; it < eval_iters; ++it) {
    Batch b = data.batcher->make(model.cfg.seed, static_cast<uint64_t>(it), batch_size, true);
    std::vector<double> losses(b.inputs.size(), 0.0);
    parallel_for(static_cast<int>(b.inputs.size()), resolve_threads(threads), [&](int i) {
      Tensor logits = model.forward(b.inputs[static_cast<size_t>(i)], model.w);
      losses[static_cast<size_t>(i)] =
          cross_entropy_mean(logits, b.targets[static_cast<size_t>(i)], listops::kPad).item();
    });
    for (double l : losses) {
      total += l;
      ++count;
    }
  }
  std::printf("val_loss %.6f over %d sequences\n", total / count, count);

  if (data.is_listops) {
    const double acc =
        listops::answer_accuracy(model, data.accuracy_samples, samples, resolve_threads(threads));
    std::printf("answer_accuracy %.4f over %d samples\n", acc,
                samples > 0 ? std::min<int>(samples, static_cast<int>(data.accuracy_samples.size()))
                            : static_cast<int>(data.accuracy_samples.size()));
  } else if (gen_chars > 0) {
    auto corpus = textdata::load_char_corpus(text_path);
    std::vector<int> p = corpus.encode(prompt.empty() ? "\n" : prompt);
    Rng rng(model.cfg.seed + 1);
    auto out_ids = model.generate(p, gen_chars, temperature, temperature <= 0.0, rng);
    const std::string text = corpus.decode(out_ids);
    std::printf("generated %d chars; distinct-1 %.4f  distinct-2 %.4f\n---\n%s\n---\n", gen_chars,
                distinct_n(text, 1), distinct_n(text, 2), text.c_str());
  }
  return 0;
}

// ---------------------------------------------------------------------------
// flops
// ---------------------------------------------------------------------------

uint64_t instrumented_forward_macs(Model& model) {
  std::vector<int> ids(static_cast<size_t>(model.cfg.context));
  for (size_t i = 0; i < ids.size(); ++i)
    ids[i] = static_cast<int>(i % static_cast<size_t>(model.cfg.vocab_size));
  flops::reset();
  model.forward(ids, model.w);
  return flops::count();
}

int cmd_flops(ModelConfig cfg, bool check, bool grid) {
  auto print_row = [](const ModelConfig& c) {
    FlopEstimate e = estimate_flops(c);
    std::printf("%-14s D=%-4d H=%-3d N=%-4d T=%-3d | att %12llu ff %12llu step %12llu fwd %14llu | att/base %.3f ff/base %.3f fwd/base %.3f\n",
                to_string(c.kind), c.embed_dim, c.heads, c.context, c.steps,
                static_cast<unsigned long long>(e.att_step), static_cast<unsigned long long>(e.ff_step),
                static_cast<unsigned long long>(e.step_total), static_cast<unsigned long long>(e.forward_total),
                e.att_ratio(), e.ff_ratio(), e.forward_ratio());
  };

  if (grid) {
    for (ModelKind k : {ModelKind::NrgptFF1, ModelKind::NrgptFF2W, ModelKind::BaselineParallel})
      for (int d : {64, 256, 768})
        for (int h : {1, 4}) {
          ModelConfig c = cfg;
          c.kind = k;
          c.embed_dim = d;
          c.heads = h;
          c.hidden_multiple = 0;
          print_row(c);
        }
  } else {
    print_row(cfg);
  }

  if (check) {
    ModelConfig c = cfg;
    c.vocab_size = c.vocab_size > 0 ? c.vocab_size : 50;
    Model model(c);
    const uint64_t measured = instrumented_forward_macs(model);
    const FlopEstimate e = estimate_flops(c);
    std::printf("instrumented %llu  symbolic %llu\n", static_cast<unsigned long long>(measured),
                static_cast<unsigned long long>(e.forward_total));
    if (measured != e.forward_total) {
      std::fprintf(stderr, "FLOP accounting mismatch\n");
      return 3;
    }
  }
  return 0;
}

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"NRGPT: GPT-style language model whose forward pass is energy descent"};
  app.require_subcommand(1);
  int threads = 0;
  app.add_option("--threads", threads, "worker thread cap (default: NRGPT_THREADS or hardware)");

  // gen-data
  auto* gen = app.add_subcommand("gen-data", "generate a ListOps dataset");
  listops::GenConfig gc;
  double val_fraction = 0.1;
  std::string gen_out = "data/listops";
  gen->add_option("--samples", gc.count, "training sample count");
  gen->add_option("--max-depth", gc.max_depth, "max nesting depth");
  gen->add_option("--arity-min", gc.arity_min, "min operator arity");
  gen->add_option("--arity-max", gc.arity_max, "max operator arity");
  gen->add_option("--max-tokens", gc.max_tokens, "resample expressions longer than this");
  gen->add_option("--seed", gc.seed, "rng seed");
  gen->add_option("--val-fraction", val_fraction, "validation fraction");
  gen->add_option("--out", gen_out, "output directory");

  // train
  auto* train = app.add_subcommand("train", "train a model");
  std::string tr_config, tr_data, tr_text, tr_out = "runs/run", tr_resume, tr_sweep;
  train->add_option("--config", tr_config, "key=value config file");
  train->add_option("--data", tr_data, "ListOps dataset directory (from gen-data)");
  train->add_option("--text", tr_text, "char-level corpus file");
  train->add_option("--out", tr_out, "output directory");
  train->add_option("--resume", tr_resume, "checkpoint prefix to resume from");
  train->add_option("--sweep", tr_sweep, "sweep spec: one override line per run");
  KvFlags tr_flags;
  tr_flags.add(train, "--model", "model", "nrgpt_ff1 | nrgpt_ff2w | nrgpt_dam_relu | gpt_rec_parallel");
  tr_flags.add(train, "--context", "context", "context length");
  tr_flags.add(train, "--embed-dim", "embed_dim", "embedding dimension");
  tr_flags.add(train, "--heads", "heads", "attention heads");
  tr_flags.add(train, "--steps", "steps", "recurrent steps T");
  tr_flags.add(train, "--norm", "norm", "layernorm | rmsnorm | none");
  tr_flags.add(train, "--eta", "rate", "identity | scalar_gamma | learnable_sym_asym | unconstrained");
  tr_flags.add(train, "--rate-per-step", "rate_per_step", "distinct eta per step (true/false)");
  tr_flags.add(train, "--hidden-multiple", "hidden_multiple", "FF hidden width multiple of D");
  tr_flags.add(train, "--sigma", "sigma", "relu | gelu");
  tr_flags.add(train, "--include-self", "include_self", "allow B<=A attention (ablation)");
  tr_flags.add(train, "--dropout", "dropout", "embedding dropout fraction");
  tr_flags.add(train, "--seed", "seed", "model init seed");
  tr_flags.add(train, "--batch-size", "batch_size", "minibatch size");
  tr_flags.add(train, "--grad-accum", "grad_accum", "gradient accumulation steps");
  tr_flags.add(train, "--max-iters", "max_iters", "optimizer steps");
  tr_flags.add(train, "--eval-interval", "eval_interval", "evaluate every k iters");
  tr_flags.add(train, "--eval-iters", "eval_iters", "validation batches per eval");
  tr_flags.add(train, "--log-interval", "log_interval", "train metrics row every k iters");
  tr_flags.add(train, "--schedule", "schedule", "cosine | exponential | constant");
  tr_flags.add(train, "--max-lr", "max_lr", "peak learning rate");
  tr_flags.add(train, "--min-lr", "min_lr", "final learning rate");
  tr_flags.add(train, "--warmup", "warmup_iters", "warmup iterations");
  tr_flags.add(train, "--weight-decay", "weight_decay", "decoupled weight decay");
  tr_flags.add(train, "--grad-clip", "grad_clip", "global gradient-norm clip (<=0 off)");
  tr_flags.add(train, "--train-seed", "train_seed", "data order seed");
  tr_flags.add(train, "--target-accuracy", "target_accuracy", "stop when val accuracy reaches this");
  tr_flags.add(train, "--accuracy-samples", "accuracy_samples", "answer-accuracy sample count per eval");

  // eval
  auto* ev = app.add_subcommand("eval", "evaluate a checkpoint");
  std::string ev_ckpt, ev_data, ev_text, ev_prompt;
  int ev_iters = 50, ev_batch = 32, ev_samples = 2000, ev_gen = 0;
  double ev_temp = 0.8;
  ev->add_option("--ckpt", ev_ckpt, "checkpoint prefix")->required();
  ev->add_option("--data", ev_data, "ListOps dataset directory");
  ev->add_option("--text", ev_text, "char corpus file");
  ev->add_option("--eval-iters", ev_iters, "validation batches");
  ev->add_option("--batch-size", ev_batch, "batch size");
  ev->add_option("--samples", ev_samples, "accuracy sample cap");
  ev->add_option("--generate", ev_gen, "generate this many chars (char models)");
  ev->add_option("--temperature", ev_temp, "sampling temperature (<=0: greedy)");
  ev->add_option("--prompt", ev_prompt, "generation prompt");

  // trace-energy
  auto* tr_en = app.add_subcommand("trace-energy", "record per-token energy trajectories");
  std::string te_ckpt, te_out = "trajectory.csv", te_eta = "none", te_data, te_expr, te_ids;
  int te_steps = 30, te_index = 0, te_tokens = 64;
  tr_en->add_option("--ckpt", te_ckpt, "checkpoint prefix")->required();
  tr_en->add_option("--out", te_out, "trajectory CSV path");
  tr_en->add_option("--steps", te_steps, "unroll steps");
  tr_en->add_option("--eta-override", te_eta, "none | identity");
  tr_en->add_option("--data", te_data, "take input tokens from this dataset's val split");
  tr_en->add_option("--index", te_index, "first val sample index");
  tr_en->add_option("--tokens", te_tokens, "input length when using --data");
  tr_en->add_option("--expr", te_expr, "trace this ListOps text instead");
  tr_en->add_option("--ids", te_ids, "comma-separated token ids");

  // gradcheck
  auto* gch = app.add_subcommand("gradcheck", "analytic vs autodiff vs finite differences");
  GradCheckOptions gopt;
  gch->add_option("--trials", gopt.trials, "random configs to test");
  gch->add_option("--seed", gopt.seed, "rng seed");
  gch->add_flag("--inject-ff-sign-flip", gopt.inject_ff_sign_flip,
                "corrupt the FF analytic gradient (checker self-test)");

  // flops
  auto* fl = app.add_subcommand("flops", "multiply-add counts and ratios vs the baseline");
  KvFlags fl_flags;
  bool fl_check = false, fl_grid = false;
  KvConfig fl_cfg;
  fl_flags.add(fl, "--model", "model", "model kind");
  fl_flags.add(fl, "--context", "context", "context length");
  fl_flags.add(fl, "--embed-dim", "embed_dim", "embedding dimension");
  fl_flags.add(fl, "--heads", "heads", "attention heads");
  fl_flags.add(fl, "--steps", "steps", "recurrent steps");
  fl_flags.add(fl, "--hidden-multiple", "hidden_multiple", "FF hidden multiple");
  fl_flags.add(fl, "--eta", "rate", "inference-rate mode");
  fl->add_flag("--check", fl_check, "verify against the instrumented counter");
  fl->add_flag("--grid", fl_grid, "print a config grid");

  try {
    app.parse(argc, argv);
  } catch (const CLI::ParseError& e) {
    const int code = app.exit(e);
    return code == 0 ? 0 : 1;
  }

  set_blas_threads(1);  // determinism; parallelism comes from worker threads
  try {
    if (gen->parsed()) return cmd_gen_data(gen_out, gc, val_fraction);

    if (train->parsed()) {
      KvConfig merged;
      if (!tr_config.empty()) merged.merge(KvConfig::from_file(tr_config));
      tr_flags.apply(merged);
      if (tr_sweep.empty())
        return run_one_training(merged, tr_out, tr_data, tr_text, tr_resume, threads);
      std::ifstream sw(tr_sweep);
      if (!sw) throw IoError("cannot open sweep file: " + tr_sweep);
      std::ofstream summary(tr_out + "_sweep_summary.csv", std::ios::trunc);
      summary << "run,overrides,best_val_loss,best_val_accuracy,iters\n";
      std::string line;
      int run_idx = 0;
      while (std::getline(sw, line)) {
        if (line.empty() || line[0] == '#') continue;
        KvConfig cfg = merged;
        cfg.merge(parse_override_line(line));
        char name[32];
        std::snprintf(name, sizeof(name), "run_%03d", run_idx);
        const std::string out_dir = tr_out + "/" + name;
        std::printf("== sweep %s: %s\n", name, line.c_str());
        run_one_training(cfg, out_dir, tr_data, tr_text, "", threads);
        // summary rows come from each run's metrics file
        TrainConfig probe = TrainConfig::from_kv(cfg);
        (void)probe;
        std::ifstream metrics(out_dir + "/metrics.csv");
        double best_loss = std::numeric_limits<double>::infinity(), best_acc = 0.0;
        int iters = 0;
        std::string row;
        std::getline(metrics, row);
        while (std::getline(metrics, row)) {
          std::istringstream rs(row);
          std::string iter_s, split, loss_s, acc_s, lr_s, ms_s;
          std::getline(rs, iter_s, ',');
          std::getline(rs, split, ',');
          std::getline(rs, loss_s, ',');
          std::getline(rs, acc_s, ',');
          std::getline(rs, lr_s, ',');
          std::getline(rs, ms_s, ',');
          iters = std::max(iters, std::stoi(iter_s) + 1);
          if (split == "val") {
            best_loss = std::min(best_loss, std::stod(loss_s));
            if (!acc_s.empty()) best_acc = std::max(best_acc, std::stod(acc_s));
          }
        }
        summary << name << ",\"" << line << "\"," << std::setprecision(10) << best_loss << ','
                << best_acc << ',' << iters << "\n" << std::flush;
        ++run_idx;
      }
      return 0;
    }

    if (ev->parsed())
      return cmd_eval(ev_ckpt, ev_data, ev_text, ev_iters, ev_batch, ev_samples, ev_gen, ev_temp,
                      ev_prompt, threads);

    if (tr_en->parsed())
      return cmd_trace_energy(te_ckpt, te_out, te_steps, te_eta, te_data, te_index, te_tokens,
                              te_expr, te_ids);

    if (gch->parsed()) {
      GradCheckReport rep = run_gradcheck(gopt);
      std::printf("gradcheck: %d trials, %d failures (worst analytic rel %.3e, worst fd rel %.3e)\n",
                  rep.trials_run, rep.failures, rep.worst_analytic_rel, rep.worst_fd_rel);
      for (const auto& m : rep.messages) std::printf("  FAIL %s\n", m.c_str());
      return rep.ok() ? 0 : 3;
    }

    if (fl->parsed()) {
      fl_flags.apply(fl_cfg);
      fl_cfg.set_int("vocab_size", fl_cfg.get_int("vocab_size", 50));
      return cmd_flops(ModelConfig::from_kv(fl_cfg), fl_check, fl_grid);
    }
  } catch (const DivergedError& e) {
    std::fprintf(stderr, "error: %s\n", e.what());
    return 2;
  } catch (const std::exception& e) {
    std::fprintf(stderr, "error: %s\n", e.what());
    return 1;
  }
  return 1;
}
