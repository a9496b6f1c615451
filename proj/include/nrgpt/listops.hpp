#pragma once

// Nested MAX / MEDIAN / SUM-mod-20 expressions over integers 0..19:
// generator, recursive evaluator, closed-vocabulary tokenizer, dataset files,
// and answer accuracy for a trained model.

#include <algorithm>
#include <fstream>
#include <string>
#include <vector>

#include <json.hpp>

#include "nrgpt/model.hpp"

namespace nrgpt::listops {

// Vocabulary: MAX MEDIAN SUM ( ) , = 0..19 PAD EOS  -> 29 ids.
constexpr int kMax = 0;
constexpr int kMedian = 1;
constexpr int kSum = 2;
constexpr int kOpen = 3;
constexpr int kClose = 4;
constexpr int kComma = 5;
constexpr int kEquals = 6;
constexpr int kDigitBase = 7;  // value v in 0..19 -> id 7+v
constexpr int kPad = 27;
constexpr int kEos = 28;
constexpr int kVocabSize = 29;

inline std::string symbol_of(int id) {
  switch (id) {
    case kMax: return "MAX";
    case kMedian: return "MEDIAN";
    case kSum: return "SUM";
    case kOpen: return "(";
    case kClose: return ")";
    case kComma: return ",";
    case kEquals: return "=";
    case kPad: return "<pad>";
    case kEos: return "<eos>";
    default:
      if (id >= kDigitBase && id < kDigitBase + 20) return std::to_string(id - kDigitBase);
      throw VocabError("unknown id " + std::to_string(id));
  }
}

inline std::vector<int> tokenize(const std::string& text) {
  std::vector<int> out;
  size_t i = 0;
  while (i < text.size()) {
    const char c = text[i];
    if (c == '(') { out.push_back(kOpen); ++i; }
    else if (c == ')') { out.push_back(kClose); ++i; }
    else if (c == ',') { out.push_back(kComma); ++i; }
    else if (c == '=') { out.push_back(kEquals); ++i; }
    else if (text.compare(i, 3, "MAX") == 0) { out.push_back(kMax); i += 3; }
    else if (text.compare(i, 6, "MEDIAN") == 0) { out.push_back(kMedian); i += 6; }
    else if (text.compare(i, 3, "SUM") == 0) { out.push_back(kSum); i += 3; }
    else if (c >= '0' && c <= '9') {
      size_t j = i;
      int value = 0;
      while (j < text.size() && text[j] >= '0' && text[j] <= '9') {
        value = value * 10 + (text[j] - '0');
        ++j;
      }
      if (value > 19) throw VocabError("literal out of range at position " + std::to_string(i));
      out.push_back(kDigitBase + value);
      i = j;
    } else {
      throw VocabError(std::string("unknown symbol '") + c + "' at position " + std::to_string(i));
    }
  }
  return out;
}

inline std::string detokenize(const std::vector<int>& ids) {
  std::string out;
  for (int id : ids) out += symbol_of(id);
  return out;
}

// ---------------------------------------------------------------------------
// Recursive-descent evaluator. SUM reduces modulo 20; MEDIAN requires odd
// arity and returns the middle element of the sorted argument list.
// ---------------------------------------------------------------------------

struct ParseError : std::runtime_error {
  size_t position;
  ParseError(size_t pos, const std::string& msg)
      : std::runtime_error("parse error at " + std::to_string(pos) + ": " + msg), position(pos) {}
};

namespace detail {

struct Parser {
  const std::string& s;
  size_t i = 0;

  int value() {
    if (i >= s.size()) throw ParseError(i, "unexpected end of input");
    if (s[i] >= '0' && s[i] <= '9') return literal();
    return call();
  }

  int literal() {
    size_t start = i;
    int v = 0;
    while (i < s.size() && s[i] >= '0' && s[i] <= '9') v = v * 10 + (s[i++] - '0');
    if (v > 19) throw ParseError(start, "literal out of range 0..19");
    return v;
  }

  int call() {
    size_t start = i;
    std::string op;
    while (i < s.size() && s[i] >= 'A' && s[i] <= 'Z') op += s[i++];
    if (op != "MAX" && op != "MEDIAN" && op != "SUM") throw ParseError(start, "unknown operator '" + op + "'");
    expect('(');
    std::vector<int> args;
    args.push_back(value());
    while (i < s.size() && s[i] == ',') {
      ++i;
      args.push_back(value());
    }
    expect(')');
    if (op == "MAX") return *std::max_element(args.begin(), args.end());
    if (op == "SUM") {
      int acc = 0;
      for (int a : args) acc = (acc + a) % 20;
      return acc;
    }
    if (args.size() % 2 == 0) throw ParseError(start, "MEDIAN needs odd arity");
    std::sort(args.begin(), args.end());
    return args[args.size() / 2];
  }

  void expect(char c) {
    if (i >= s.size() || s[i] != c)
      throw ParseError(i, std::string("expected '") + c + "'");
    ++i;
  }
};

}  // namespace detail

inline int evaluate(const std::string& expr) {
  detail::Parser p{expr};
  const int v = p.value();
  if (p.i != expr.size()) throw ParseError(p.i, "trailing input");
  return v;
}

// ---------------------------------------------------------------------------
// Generator
// ---------------------------------------------------------------------------

struct ListOpsSample {
  std::string expr;
  int answer = 0;
  std::vector<int> token_ids;  // expr = answer <eos>
  int depth = 0;
};

struct GenConfig {
  int max_depth = 3;
  int arity_min = 2;
  int arity_max = 5;
  uint64_t seed = 7;
  int count = 1000;
  double val_fraction = 0.1;
  int max_tokens = 60;  // expressions longer than this are resampled

  void validate() const {
    if (arity_min < 2 || arity_max < arity_min) throw ConfigError("arity range must be >= 2");
    if (max_depth < 0) throw ConfigError("max_depth must be >= 0");
    if (max_tokens < 8) throw ConfigError("max_tokens too small");
  }
};

namespace detail {

inline std::string gen_node(const GenConfig& cfg, Rng& rng, int depth, int* max_seen) {
  *max_seen = std::max(*max_seen, depth);
  static const char* ops[] = {"MAX", "MEDIAN", "SUM"};
  const int op = static_cast<int>(rng.below(3));
  int arity = cfg.arity_min + static_cast<int>(rng.below(static_cast<uint64_t>(cfg.arity_max - cfg.arity_min + 1)));
  if (op == 1 && arity % 2 == 0) arity += arity < cfg.arity_max ? 1 : -1;  // MEDIAN arity stays odd
  std::string out = ops[op];
  out += '(';
  for (int i = 0; i < arity; ++i) {
    if (i) out += ',';
    const bool subtree = depth + 1 < cfg.max_depth && rng.uniform() < 0.5;
    if (subtree)
      out += gen_node(cfg, rng, depth + 1, max_seen);
    else
      out += std::to_string(rng.below(20));
  }
  out += ')';
  return out;
}

}  // namespace detail

// One sample from its own (seed, index)-derived stream, so generation order
// and parallelism cannot change the data.
inline ListOpsSample gen_expression(const GenConfig& cfg, uint64_t index) {
  cfg.validate();
  Rng rng = Rng::stream(cfg.seed, index);
  for (int attempt = 0; attempt < 1000; ++attempt) {
    int depth = 0;
    const std::string expr = detail::gen_node(cfg, rng, 0, &depth);
    ListOpsSample s;
    s.expr = expr;
    s.depth = depth + 1;
    s.answer = evaluate(expr);
    s.token_ids = tokenize(expr + "=" + std::to_string(s.answer));
    s.token_ids.push_back(kEos);
    if (static_cast<int>(s.token_ids.size()) <= cfg.max_tokens) return s;
  }
  throw ContractError("gen_expression: could not fit max_tokens; loosen the config");
}

inline std::vector<ListOpsSample> generate_dataset(const GenConfig& cfg, uint64_t index_offset = 0) {
  std::vector<ListOpsSample> out(static_cast<size_t>(cfg.count));
  for (int i = 0; i < cfg.count; ++i)
    out[static_cast<size_t>(i)] = gen_expression(cfg, index_offset + static_cast<uint64_t>(i));
  return out;
}

// ---------------------------------------------------------------------------
// Dataset files: plain text (one expr=answer per line), a binary id shard
// with a sample-boundary index, and the vocabulary manifest.
// ---------------------------------------------------------------------------

inline void write_text(const std::string& path, const std::vector<ListOpsSample>& samples) {
  std::ofstream out(path, std::ios::trunc);
  if (!out) throw IoError("cannot write " + path);
  for (const auto& s : samples) out << s.expr << '=' << s.answer << '\n';
}

inline void write_shard(const std::string& path, const std::vector<ListOpsSample>& samples) {
  std::ofstream out(path, std::ios::binary | std::ios::trunc);
  if (!out) throw IoError("cannot write " + path);
  const char magic[8] = {'N', 'R', 'L', 'O', 'P', 'S', '0', '1'};
  out.write(magic, 8);
  const uint64_t count = samples.size();
  out.write(reinterpret_cast<const char*>(&count), 8);
  uint64_t offset = 0;
  for (const auto& s : samples) {
    out.write(reinterpret_cast<const char*>(&offset), 8);
    offset += s.token_ids.size();
  }
  out.write(reinterpret_cast<const char*>(&offset), 8);
  for (const auto& s : samples)
    for (int id : s.token_ids) {
      const int32_t v = id;
      out.write(reinterpret_cast<const char*>(&v), 4);
    }
}

inline std::vector<std::vector<int>> read_shard(const std::string& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw IoError("cannot open " + path);
  char magic[8];
  in.read(magic, 8);
  if (std::string(magic, 8) != "NRLOPS01") throw IoError("bad shard magic in " + path);
  uint64_t count = 0;
  in.read(reinterpret_cast<char*>(&count), 8);
  std::vector<uint64_t> offsets(count + 1);
  in.read(reinterpret_cast<char*>(offsets.data()), static_cast<std::streamsize>(8 * (count + 1)));
  std::vector<std::vector<int>> out(count);
  for (uint64_t i = 0; i < count; ++i) {
    const uint64_t len = offsets[i + 1] - offsets[i];
    out[i].resize(len);
    for (uint64_t k = 0; k < len; ++k) {
      int32_t v = 0;
      in.read(reinterpret_cast<char*>(&v), 4);
      out[i][k] = v;
    }
  }
  if (!in) throw IoError("truncated shard " + path);
  return out;
}

inline void write_vocab(const std::string& path) {
  nlohmann::json j;
  for (int id = 0; id < kVocabSize; ++id) j[symbol_of(id)] = id;
  std::ofstream out(path, std::ios::trunc);
  if (!out) throw IoError("cannot write " + path);
  out << j.dump(2) << "\n";
}

// ---------------------------------------------------------------------------
// Answer accuracy: greedy-decode the single answer token right after '='.
// ---------------------------------------------------------------------------

// Predictor form: next_token(prefix) returns the greedy next id. A sample is
// correct iff the decoded answer token matches the ground truth after '='.
template <typename NextToken>
double answer_accuracy_with(NextToken&& next_token, const std::vector<std::vector<int>>& samples,
                            int limit = 0, int threads = 1) {
  const int n = limit > 0 ? std::min<int>(limit, static_cast<int>(samples.size()))
                          : static_cast<int>(samples.size());
  if (n == 0) return 0.0;
  std::vector<int> correct(static_cast<size_t>(n), 0);
  parallel_for(n, threads, [&](int i) {
    const auto& ids = samples[static_cast<size_t>(i)];
    auto eq = std::find(ids.begin(), ids.end(), kEquals);
    if (eq == ids.end() || eq + 1 == ids.end()) throw ContractError("sample has no answer span");
    const int truth = *(eq + 1);
    std::vector<int> prefix(ids.begin(), eq + 1);
    correct[static_cast<size_t>(i)] = next_token(prefix) == truth ? 1 : 0;
  });
  int total = 0;
  for (int c : correct) total += c;
  return static_cast<double>(total) / n;
}

inline double answer_accuracy(const Model& model, const std::vector<std::vector<int>>& samples,
                              int limit = 0, int threads = 1) {
  return answer_accuracy_with(
      [&](const std::vector<int>& prefix) {
        Tensor logits = model.forward(prefix);
        const int last = logits.rows() - 1;
        int best = 0;
        for (int v = 1; v < logits.cols(); ++v)
          if (logits.at2(last, v) > logits.at2(last, best)) best = v;
        return best;
      },
      samples, limit, threads);
}

}  // namespace nrgpt::listops
