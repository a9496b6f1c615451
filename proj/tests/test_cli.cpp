#include <catch2/catch_amalgamated.hpp>

#include <cstdlib>
#include <filesystem>
#include <fstream>

#include "nrgpt/config.hpp"

namespace fs = std::filesystem;

namespace {

int run(const std::string& args) {
  const std::string cmd = std::string(NRGPT_CLI_PATH) + " " + args + " > /dev/null 2>&1";
  const int status = std::system(cmd.c_str());
  return WEXITSTATUS(status);
}

std::string slurp(const std::string& path) {
  std::ifstream in(path, std::ios::binary);
  REQUIRE(in.good());
  return std::string((std::istreambuf_iterator<char>(in)), std::istreambuf_iterator<char>());
}

fs::path tmp(const std::string& name) { return fs::temp_directory_path() / name; }

}  // namespace

TEST_CASE("gen-data is byte-deterministic") {
  const auto a = tmp("nrgpt_cli_gen_a"), b = tmp("nrgpt_cli_gen_b");
  fs::remove_all(a);
  fs::remove_all(b);
  REQUIRE(run("gen-data --samples 100 --seed 7 --out " + a.string()) == 0);
  REQUIRE(run("gen-data --samples 100 --seed 7 --out " + b.string()) == 0);
  for (const char* f : {"train.txt", "val.txt", "train.bin", "val.bin", "vocab.json"})
    CHECK(slurp((a / f).string()) == slurp((b / f).string()));

  // different seed, different bytes
  const auto c = tmp("nrgpt_cli_gen_c");
  fs::remove_all(c);
  REQUIRE(run("gen-data --samples 100 --seed 8 --out " + c.string()) == 0);
  CHECK(slurp((a / "train.txt").string()) != slurp((c / "train.txt").string()));
}

TEST_CASE("usage errors exit 1") {
  CHECK(run("no-such-command") == 1);
  CHECK(run("train") == 1);                        // no data source
  CHECK(run("trace-energy --ckpt /nonexistent --out /tmp/x.csv --ids 1,2") == 1);
}

TEST_CASE("gradcheck passes clean and catches an injected sign flip") {
  CHECK(run("gradcheck --trials 12 --seed 5") == 0);
  const std::string out = tmp("nrgpt_gradcheck_out.txt").string();
  const std::string cmd = std::string(NRGPT_CLI_PATH) +
                          " gradcheck --trials 6 --seed 5 --inject-ff-sign-flip > " + out + " 2>&1";
  CHECK(WEXITSTATUS(std::system(cmd.c_str())) == 3);
  const std::string text = slurp(out);
  CHECK(text.find("analytic") != std::string::npos);  // failure names the op
}

TEST_CASE("flops table and instrumented check") {
  CHECK(run("flops --model nrgpt_ff2w --embed-dim 24 --heads 2 --context 12 --steps 2 --check") == 0);
  CHECK(run("flops --grid --context 32 --steps 4") == 0);
}

TEST_CASE("train smoke: tiny run writes a parseable resolved config and metrics") {
  const auto data = tmp("nrgpt_cli_data");
  const auto out = tmp("nrgpt_cli_run");
  fs::remove_all(data);
  fs::remove_all(out);
  REQUIRE(run("gen-data --samples 60 --seed 3 --max-depth 1 --out " + data.string()) == 0);
  REQUIRE(run("train --model nrgpt_ff1 --data " + data.string() + " --out " + out.string() +
              " --embed-dim 8 --steps 2 --context 48 --max-iters 3 --batch-size 4"
              " --eval-interval 2 --eval-iters 1 --accuracy-samples 10 --warmup 1 --log-interval 1") == 0);

  nrgpt::KvConfig resolved = nrgpt::KvConfig::from_file((out / "config_resolved.txt").string());
  CHECK(resolved.get_str("model", "") == "nrgpt_ff1");
  CHECK(resolved.get_int("embed_dim", 0) == 8);
  CHECK(resolved.get_int("vocab_size", 0) == 29);

  std::ifstream metrics((out / "metrics.csv").string());
  std::string header;
  std::getline(metrics, header);
  CHECK(header == "iter,split,loss,accuracy,lr,wall_ms");
  int rows = 0;
  std::string line;
  while (std::getline(metrics, line)) ++rows;
  CHECK(rows >= 3);

  // checkpoints exist and eval runs against them
  CHECK(fs::exists(out / "ckpt_last.manifest.json"));
  CHECK(fs::exists(out / "ckpt_best.weights.bin"));
  CHECK(run("eval --ckpt " + (out / "ckpt_best").string() + " --data " + data.string() +
            " --eval-iters 1 --batch-size 4 --samples 10") == 0);
}

TEST_CASE("train smoke: baseline model trains on the same shards") {
  const auto data = tmp("nrgpt_cli_data2");
  const auto out = tmp("nrgpt_cli_run2");
  fs::remove_all(data);
  fs::remove_all(out);
  REQUIRE(run("gen-data --samples 40 --seed 4 --max-depth 1 --out " + data.string()) == 0);
  CHECK(run("train --model gpt_rec_parallel --data " + data.string() + " --out " + out.string() +
            " --embed-dim 8 --steps 2 --context 48 --max-iters 2 --batch-size 4"
            " --eval-interval 2 --eval-iters 1 --accuracy-samples 5 --warmup 1") == 0);
  CHECK(run("train --model nrgpt_ff1 --eta identity --data " + data.string() + " --out " +
            (out / "eta_identity").string() +
            " --embed-dim 8 --steps 2 --context 48 --max-iters 2 --batch-size 4"
            " --eval-interval 2 --eval-iters 1 --accuracy-samples 5 --warmup 1") == 0);
}

TEST_CASE("trace-energy on a fresh checkpoint") {
  const auto data = tmp("nrgpt_cli_data3");
  const auto out = tmp("nrgpt_cli_run3");
  fs::remove_all(data);
  fs::remove_all(out);
  REQUIRE(run("gen-data --samples 40 --seed 5 --max-depth 2 --out " + data.string()) == 0);
  REQUIRE(run("train --model nrgpt_ff2w --data " + data.string() + " --out " + out.string() +
              " --embed-dim 8 --steps 2 --context 80 --max-iters 2 --batch-size 4"
              " --eval-interval 2 --eval-iters 1 --accuracy-samples 0 --warmup 1") == 0);
  const std::string csv = (out / "traj.csv").string();
  REQUIRE(run("trace-energy --ckpt " + (out / "ckpt_last").string() + " --data " + data.string() +
              " --tokens 64 --steps 30 --eta-override identity --out " + csv) == 0);

  std::ifstream in(csv);
  std::string header;
  std::getline(in, header);
  CHECK(header == "step,token,E_total,E_AT,E_FF,grad_norm,dg_norm,dx_norm");
  int rows = 0;
  std::string line;
  while (std::getline(in, line)) ++rows;
  CHECK(rows == 64 * 31);  // 64 tokens x (30 steps + initial state)
}
