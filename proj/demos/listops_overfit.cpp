// Minimal training demo: memorize a handful of ListOps samples and decode
// one of them back.

#include <cstdio>

#include "nrgpt/train.hpp"

using namespace nrgpt;

int main() {
  set_blas_threads(1);
  listops::GenConfig gc;
  gc.count = 24;
  gc.max_depth = 2;
  gc.seed = 3;
  gc.max_tokens = 40;
  auto samples = listops::generate_dataset(gc);
  std::vector<std::vector<int>> ids;
  for (auto& s : samples) ids.push_back(s.token_ids);

  ModelConfig mc;
  mc.kind = ModelKind::NrgptFF2W;
  mc.vocab_size = listops::kVocabSize;
  mc.context = 48;
  mc.embed_dim = 24;
  mc.heads = 1;
  mc.steps = 4;
  mc.seed = 9;
  Model model(mc);
  std::printf("training %lld parameters on %d samples\n",
              static_cast<long long>(model.parameter_count()), gc.count);

  SampleBatcher data(ids, ids);
  TrainConfig tc;
  tc.batch_size = 12;
  tc.max_iters = 1200;
  tc.eval_interval = 400;
  tc.eval_iters = 2;
  tc.log_interval = 200;
  tc.accuracy_samples = 24;
  tc.target_train_loss = 0.05;
  tc.schedule.max_lr = 3e-3;
  tc.schedule.min_lr = 3e-4;
  tc.schedule.warmup_iters = 20;
  tc.schedule.max_iters = tc.max_iters;
  tc.ignore_id = listops::kPad;
  tc.threads = 2;
  TrainResult res = train_loop(model, data, tc, &ids);
  std::printf("train loss %.4f after %d iters; answer accuracy %.3f\n", res.final_train_loss,
              res.iters_run, listops::answer_accuracy(model, ids, 0, 2));

  const auto& s = samples[0];
  auto eq = std::find(s.token_ids.begin(), s.token_ids.end(), listops::kEquals);
  std::vector<int> prefix(s.token_ids.begin(), eq + 1);
  Rng rng(1);
  auto out = model.generate(prefix, 1, 0.0, true, rng);
  std::printf("%s -> %s (truth %d)\n", s.expr.c_str(), listops::symbol_of(out.back()).c_str(),
              s.answer);
  return 0;
}
