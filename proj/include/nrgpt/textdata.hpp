#pragma once

// Character-level text corpus: byte vocabulary built from the file, id
// stream, and a deterministic train/val split by position.

#include <fstream>
#include <map>
#include <string>
#include <vector>

#include <json.hpp>

#include "nrgpt/common.hpp"

namespace nrgpt::textdata {

struct CharCorpus {
  std::vector<char> id_to_char;
  std::map<char, int> char_to_id;
  std::vector<int> train_ids, val_ids;

  int vocab_size() const { return static_cast<int>(id_to_char.size()); }

  std::vector<int> encode(const std::string& s) const {
    std::vector<int> out;
    out.reserve(s.size());
    for (char c : s) {
      auto it = char_to_id.find(c);
      if (it == char_to_id.end()) throw VocabError(std::string("character not in corpus vocab: ") + c);
      out.push_back(it->second);
    }
    return out;
  }

  std::string decode(const std::vector<int>& ids) const {
    std::string out;
    out.reserve(ids.size());
    for (int id : ids) {
      if (id < 0 || id >= vocab_size()) throw VocabError("char id out of range");
      out += id_to_char[static_cast<size_t>(id)];
    }
    return out;
  }
};

inline CharCorpus load_char_corpus(const std::string& path, double val_fraction = 0.1) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw IoError("cannot open corpus: " + path);
  std::string text((std::istreambuf_iterator<char>(in)), std::istreambuf_iterator<char>());
  if (text.size() < 1000) throw IoError("corpus too small: " + path);

  CharCorpus c;
  bool seen[256] = {false};
  for (char ch : text) seen[static_cast<unsigned char>(ch)] = true;
  for (int b = 0; b < 256; ++b)
    if (seen[b]) {
      c.char_to_id[static_cast<char>(b)] = static_cast<int>(c.id_to_char.size());
      c.id_to_char.push_back(static_cast<char>(b));
    }

  const size_t split = static_cast<size_t>(static_cast<double>(text.size()) * (1.0 - val_fraction));
  c.train_ids.reserve(split);
  c.val_ids.reserve(text.size() - split);
  for (size_t i = 0; i < text.size(); ++i) {
    const int id = c.char_to_id[text[i]];
    (i < split ? c.train_ids : c.val_ids).push_back(id);
  }
  return c;
}

inline void write_char_vocab(const std::string& path, const CharCorpus& c) {
  nlohmann::json j;
  for (int id = 0; id < c.vocab_size(); ++id)
    j[std::to_string(static_cast<int>(static_cast<unsigned char>(c.id_to_char[static_cast<size_t>(id)])))] = id;
  std::ofstream out(path, std::ios::trunc);
  if (!out) throw IoError("cannot write " + path);
  out << j.dump(2) << "\n";
}

}  // namespace nrgpt::textdata
