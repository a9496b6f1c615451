#pragma once

// Checkpoint file pair: <name>.manifest.json plus <name>.weights.bin holding
// little-endian float64 payloads at the offsets the manifest declares.
// Reload reproduces bit-identical forward outputs.

#include <array>
#include <bit>
#include <cstdint>
#include <fstream>
#include <map>
#include <optional>
#include <string>
#include <vector>

#include <json.hpp>

#include "nrgpt/model.hpp"

namespace nrgpt {

static_assert(std::endian::native == std::endian::little,
              "checkpoint payload is little-endian float64");

struct OptimState {
  int64_t step = 0;
  std::vector<Tensor> m, v;  // aligned with the parameter registry

  static OptimState init(const std::vector<ParamRef>& params) {
    OptimState s;
    for (const auto& [name, t] : params) {
      s.m.push_back(Tensor::zeros(t->shape));
      s.v.push_back(Tensor::zeros(t->shape));
    }
    return s;
  }
};

struct CheckpointMeta {
  int64_t iteration = 0;
  std::array<uint64_t, 4> rng_state{};
  bool has_optimizer = false;
};

namespace detail {

struct ManifestEntry {
  std::string name;
  std::vector<int> shape;
  uint64_t offset;
};

inline void append_tensor(std::vector<ManifestEntry>& entries, std::ofstream& bin, uint64_t& offset,
                          const std::string& name, const Tensor& t) {
  entries.push_back({name, t.shape, offset});
  const uint64_t bytes = static_cast<uint64_t>(t.numel()) * sizeof(double);
  bin.write(reinterpret_cast<const char*>(t.raw()), static_cast<std::streamsize>(bytes));
  offset += bytes;
}

}  // namespace detail

inline void save_checkpoint(const std::string& prefix, Model& model, const OptimState* opt,
                            const CheckpointMeta& meta) {
  std::ofstream bin(prefix + ".weights.bin", std::ios::binary | std::ios::trunc);
  if (!bin) throw IoError("cannot write " + prefix + ".weights.bin");

  std::vector<detail::ManifestEntry> entries;
  uint64_t offset = 0;
  auto params = model.parameters();
  for (const auto& [name, t] : params) detail::append_tensor(entries, bin, offset, name, *t);
  if (opt) {
    for (size_t i = 0; i < params.size(); ++i) {
      detail::append_tensor(entries, bin, offset, "opt.m." + params[i].first, opt->m[i]);
      detail::append_tensor(entries, bin, offset, "opt.v." + params[i].first, opt->v[i]);
    }
  }
  bin.close();

  nlohmann::json j;
  j["format"] = "nrgpt-checkpoint-v1";
  j["iteration"] = meta.iteration;
  j["rng_state"] = {std::to_string(meta.rng_state[0]), std::to_string(meta.rng_state[1]),
                    std::to_string(meta.rng_state[2]), std::to_string(meta.rng_state[3])};
  nlohmann::json cfg = nlohmann::json::object();
  const KvConfig cfg_kv = model.cfg.to_kv();
  for (const auto& [k, v] : cfg_kv.entries()) cfg[k] = v;
  j["config"] = cfg;
  if (opt) j["optimizer"] = {{"step", opt->step}};
  nlohmann::json tens = nlohmann::json::array();
  for (const auto& e : entries)
    tens.push_back({{"name", e.name}, {"dtype", "f64"}, {"shape", e.shape}, {"offset", e.offset}});
  j["tensors"] = tens;
  j["payload_bytes"] = offset;

  std::ofstream mf(prefix + ".manifest.json", std::ios::trunc);
  if (!mf) throw IoError("cannot write " + prefix + ".manifest.json");
  mf << j.dump(2) << "\n";
}

inline Model load_checkpoint(const std::string& prefix, OptimState* opt_out = nullptr,
                             CheckpointMeta* meta_out = nullptr) {
  std::ifstream mf(prefix + ".manifest.json");
  if (!mf) throw IoError("cannot open " + prefix + ".manifest.json");
  nlohmann::json j = nlohmann::json::parse(mf);
  if (j.value("format", "") != "nrgpt-checkpoint-v1") throw IoError("unknown checkpoint format");

  KvConfig kv;
  for (auto it = j["config"].begin(); it != j["config"].end(); ++it)
    kv.set(it.key(), it.value().get<std::string>());
  Model model(ModelConfig::from_kv(kv));

  std::ifstream bin(prefix + ".weights.bin", std::ios::binary | std::ios::ate);
  if (!bin) throw IoError("cannot open " + prefix + ".weights.bin");
  const uint64_t file_size = static_cast<uint64_t>(bin.tellg());

  auto read_into = [&](const nlohmann::json& entry, Tensor& t) {
    const auto shape = entry["shape"].get<std::vector<int>>();
    if (shape != t.shape)
      throw IoError("checkpoint tensor '" + entry["name"].get<std::string>() + "' shape mismatch");
    const uint64_t offset = entry["offset"].get<uint64_t>();
    const uint64_t bytes = static_cast<uint64_t>(t.numel()) * sizeof(double);
    if (offset + bytes > file_size) throw IoError("checkpoint payload truncated");
    bin.seekg(static_cast<std::streamoff>(offset));
    bin.read(reinterpret_cast<char*>(t.raw()), static_cast<std::streamsize>(bytes));
  };

  auto params = model.parameters();
  std::map<std::string, const nlohmann::json*> by_name;
  for (const auto& e : j["tensors"]) by_name[e["name"].get<std::string>()] = &e;
  for (auto& [name, t] : params) {
    auto it = by_name.find(name);
    if (it == by_name.end()) throw IoError("checkpoint missing tensor: " + name);
    read_into(*it->second, *t);
  }
  if (opt_out) {
    *opt_out = OptimState::init(params);
    if (j.contains("optimizer")) {
      opt_out->step = j["optimizer"]["step"].get<int64_t>();
      for (size_t i = 0; i < params.size(); ++i) {
        auto im = by_name.find("opt.m." + params[i].first);
        auto iv = by_name.find("opt.v." + params[i].first);
        if (im == by_name.end() || iv == by_name.end())
          throw IoError("checkpoint missing optimizer state for " + params[i].first);
        read_into(*im->second, opt_out->m[i]);
        read_into(*iv->second, opt_out->v[i]);
      }
    }
  }
  if (meta_out) {
    meta_out->iteration = j["iteration"].get<int64_t>();
    meta_out->has_optimizer = j.contains("optimizer");
    const auto rng = j["rng_state"];
    for (size_t i = 0; i < 4; ++i)
      meta_out->rng_state[i] = std::stoull(rng[i].get<std::string>());
  }
  return model;
}

}  // namespace nrgpt
