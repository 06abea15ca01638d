#include "mitr/vocab.hpp"

#include "mitr/error.hpp"

namespace mitr {

Vocabulary::Vocabulary() {
  for (const char* w : {"<pad>", "<bos>", "<end>", "<unk>"}) {
    insert(w);
  }
}

Vocabulary::Vocabulary(std::span<const std::string> words) : Vocabulary() {
  for (const auto& w : words) {
    if (!contains(w)) {
      insert(w);
    }
  }
}

void Vocabulary::insert(const std::string& w) {
  index_.emplace(w, static_cast<int>(words_.size()));
  words_.push_back(w);
}

const std::string& Vocabulary::word(int id) const {
  if (id < 0 || static_cast<std::size_t>(id) >= words_.size()) {
    throw DataError("vocabulary: id " + std::to_string(id) + " out of range");
  }
  return words_[static_cast<std::size_t>(id)];
}

int Vocabulary::id(const std::string& word) const {
  auto it = index_.find(word);
  return it == index_.end() ? kUnk : it->second;
}

std::vector<int> Vocabulary::encode(std::span<const std::string> tokens) const {
  std::vector<int> out;
  out.reserve(tokens.size());
  for (const auto& t : tokens) {
    out.push_back(id(t));
  }
  return out;
}

std::vector<std::string> Vocabulary::decode(std::span<const int> ids) const {
  std::vector<std::string> out;
  for (int id : ids) {
    if (id == kEnd) {
      break;
    }
    if (id == kBos || id == kPad) {
      continue;
    }
    out.push_back(word(id));
  }
  return out;
}

}  // namespace mitr
