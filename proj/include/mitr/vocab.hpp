#pragma once

#include <span>
#include <string>
#include <unordered_map>
#include <vector>

namespace mitr {

class Vocabulary {
 public:
  static constexpr int kPad = 0;
  static constexpr int kBos = 1;
  static constexpr int kEnd = 2;
  static constexpr int kUnk = 3;

  // Specials only.
  Vocabulary();
  // Specials followed by `words` (duplicates and specials are skipped).
  explicit Vocabulary(std::span<const std::string> words);

  std::size_t size() const { return words_.size(); }
  const std::string& word(int id) const;
  int id(const std::string& word) const;  // kUnk if absent
  bool contains(const std::string& word) const { return index_.count(word) != 0; }
  const std::vector<std::string>& words() const { return words_; }

  std::vector<int> encode(std::span<const std::string> tokens) const;
  // Stops at the first END; skips BOS/PAD.
  std::vector<std::string> decode(std::span<const int> ids) const;

  friend bool operator==(const Vocabulary& a, const Vocabulary& b) { return a.words_ == b.words_; }

 private:
  void insert(const std::string& w);

  std::vector<std::string> words_;
  std::unordered_map<std::string, int> index_;
};

}  // namespace mitr
