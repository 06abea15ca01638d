#pragma once

// Caption evaluation metrics over lowercase whitespace tokens.

#include <cstddef>
#include <span>
#include <string>
#include <string_view>
#include <vector>

namespace mitr {

using Tokens = std::vector<std::string>;

// Lowercase, drop punctuation, split on whitespace.
Tokens tokenize(std::string_view text);

// Sentence BLEU-n: geometric mean of clipped 1..n-gram precisions times the
// brevity penalty (closest reference length). No smoothing: a zero precision
// at any order gives 0. Empty candidates score 0.
double bleu_n(const Tokens& candidate, std::span<const Tokens> references, int n);

// Corpus BLEU-n: clipped counts and lengths pooled over all candidates.
double corpus_bleu(std::span<const Tokens> candidates,
                   std::span<const std::vector<Tokens>> references, int n);

inline constexpr double kRougeBeta = 1.2;

// LCS F-measure with beta = 1.2, maximum over references.
double rouge_l(const Tokens& candidate, std::span<const Tokens> references);

std::size_t lcs_length(const Tokens& a, const Tokens& b);

struct CiderResult {
  std::vector<double> scores;  // one per candidate, in input order
  double mean = 0.0;
  bool degenerate_idf = false;  // fewer than two reference sets
};

// CIDEr: for n = 1..4, cosine similarity of TF-IDF n-gram vectors between the
// candidate and each of its references, averaged over references, then over
// n, times 10. Document frequencies count reference sets.
CiderResult cider(std::span<const Tokens> candidates,
                  std::span<const std::vector<Tokens>> references);

}  // namespace mitr
