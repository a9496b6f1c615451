// Unrolls a small randomly initialized model and prints how per-token
// energies settle, then dumps the full trajectory CSV.

#include <cstdio>
#include <fstream>

#include "nrgpt/model.hpp"

using namespace nrgpt;

int main() {
  set_blas_threads(1);
  ModelConfig cfg;
  cfg.kind = ModelKind::NrgptFF1;
  cfg.vocab_size = 32;
  cfg.context = 16;
  cfg.embed_dim = 24;
  cfg.heads = 2;
  cfg.steps = 30;
  cfg.norm_kind = NormKind::RmsNorm;
  cfg.rate_mode = RateMode::Identity;
  cfg.seed = 11;
  Model model(cfg);

  std::vector<int> ids, pos;
  Rng rng(5);
  for (int i = 0; i < cfg.context; ++i) {
    ids.push_back(static_cast<int>(rng.below(static_cast<uint64_t>(cfg.vocab_size))));
    pos.push_back(i);
  }
  Tensor x0 = add(embed_rows(ids, model.w.tok_emb), embed_rows(pos, model.w.pos_emb));

  Trajectory traj;
  unroll(x0, cfg.steps, model.w.energy, model.w.rate, model.w.core_norm, &traj);

  std::printf("token   E(0)          E(%d)        dg at end\n", cfg.steps);
  for (int a = 0; a < traj.tokens; a += 3)
    std::printf("%5d  %12.6f  %12.6f  %10.3e\n", a, traj.e_total[traj.idx(0, a)],
                traj.e_total[traj.idx(cfg.steps, a)], traj.dg_norm[traj.idx(cfg.steps, a)]);

  std::ofstream out("energy_trace_demo.csv");
  traj.to_csv(out);
  std::printf("full trajectory written to energy_trace_demo.csv\n");
  return 0;
}
