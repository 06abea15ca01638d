#include "mitr/metrics.hpp"

#include <algorithm>
#include <cctype>
#include <cmath>
#include <limits>
#include <map>
#include <set>

#include "mitr/error.hpp"

namespace mitr {

namespace {

using NgramCounts = std::map<std::vector<std::string>, double>;

NgramCounts count_ngrams(const Tokens& tokens, int n) {
  NgramCounts counts;
  const auto len = static_cast<std::size_t>(n);
  if (tokens.size() < len) {
    return counts;
  }
  for (std::size_t i = 0; i + len <= tokens.size(); ++i) {
    counts[std::vector<std::string>(tokens.begin() + static_cast<std::ptrdiff_t>(i),
                                    tokens.begin() + static_cast<std::ptrdiff_t>(i + len))] += 1.0;
  }
  return counts;
}

struct BleuStats {
  std::vector<double> matched;
  std::vector<double> total;
  double cand_len = 0.0;
  double ref_len = 0.0;
};

void check_order(int n) {
  if (n < 1 || n > 4) {
    throw UsageError("bleu: order must be in 1..4, got " + std::to_string(n));
  }
}

void accumulate_bleu(BleuStats& s, const Tokens& cand, std::span<const Tokens> refs, int n) {
  if (refs.empty()) {
    throw DataError("bleu: candidate has no reference");
  }
  for (int order = 1; order <= n; ++order) {
    const NgramCounts c = count_ngrams(cand, order);
    NgramCounts max_ref;
    for (const Tokens& r : refs) {
      for (const auto& [g, cnt] : count_ngrams(r, order)) {
        double& m = max_ref[g];
        m = std::max(m, cnt);
      }
    }
    for (const auto& [g, cnt] : c) {
      auto it = max_ref.find(g);
      s.matched[static_cast<std::size_t>(order - 1)] += it == max_ref.end() ? 0.0 : std::min(cnt, it->second);
      s.total[static_cast<std::size_t>(order - 1)] += cnt;
    }
  }
  // Closest reference length; ties go to the shorter reference.
  const auto c_len = static_cast<double>(cand.size());
  double best = static_cast<double>(refs[0].size());
  for (const Tokens& r : refs) {
    const auto len = static_cast<double>(r.size());
    const double d = std::abs(len - c_len);
    const double bd = std::abs(best - c_len);
    if (d < bd || (d == bd && len < best)) {
      best = len;
    }
  }
  s.cand_len += c_len;
  s.ref_len += best;
}

double finish_bleu(const BleuStats& s, int n) {
  if (s.cand_len == 0.0) {
    return 0.0;
  }
  double log_sum = 0.0;
  for (int order = 0; order < n; ++order) {
    const double m = s.matched[static_cast<std::size_t>(order)];
    const double t = s.total[static_cast<std::size_t>(order)];
    if (m == 0.0 || t == 0.0) {
      return 0.0;
    }
    log_sum += std::log(m / t);
  }
  const double bp = s.cand_len >= s.ref_len ? 1.0 : std::exp(1.0 - s.ref_len / s.cand_len);
  return bp * std::exp(log_sum / n);
}

}  // namespace

Tokens tokenize(std::string_view text) {
  Tokens out;
  std::string cur;
  for (char ch : text) {
    const auto c = static_cast<unsigned char>(ch);
    if (std::isspace(c)) {
      if (!cur.empty()) {
        out.push_back(std::move(cur));
        cur.clear();
      }
    } else if (!std::ispunct(c)) {
      cur.push_back(static_cast<char>(std::tolower(c)));
    }
  }
  if (!cur.empty()) {
    out.push_back(std::move(cur));
  }
  return out;
}

double bleu_n(const Tokens& candidate, std::span<const Tokens> references, int n) {
  check_order(n);
  BleuStats s{std::vector<double>(4, 0.0), std::vector<double>(4, 0.0)};
  accumulate_bleu(s, candidate, references, n);
  return finish_bleu(s, n);
}

double corpus_bleu(std::span<const Tokens> candidates,
                   std::span<const std::vector<Tokens>> references, int n) {
  check_order(n);
  if (candidates.size() != references.size()) {
    throw DataError("corpus_bleu: candidate and reference counts differ");
  }
  BleuStats s{std::vector<double>(4, 0.0), std::vector<double>(4, 0.0)};
  for (std::size_t i = 0; i < candidates.size(); ++i) {
    accumulate_bleu(s, candidates[i], references[i], n);
  }
  return finish_bleu(s, n);
}

std::size_t lcs_length(const Tokens& a, const Tokens& b) {
  std::vector<std::size_t> prev(b.size() + 1, 0), cur(b.size() + 1, 0);
  for (std::size_t i = 1; i <= a.size(); ++i) {
    for (std::size_t j = 1; j <= b.size(); ++j) {
      cur[j] = a[i - 1] == b[j - 1] ? prev[j - 1] + 1 : std::max(prev[j], cur[j - 1]);
    }
    std::swap(prev, cur);
  }
  return prev[b.size()];
}

double rouge_l(const Tokens& candidate, std::span<const Tokens> references) {
  if (references.empty()) {
    throw DataError("rouge_l: candidate has no reference");
  }
  if (candidate.empty()) {
    return 0.0;
  }
  double best = 0.0;
  const double beta2 = kRougeBeta * kRougeBeta;
  for (const Tokens& ref : references) {
    if (ref.empty()) {
      continue;
    }
    const auto lcs = static_cast<double>(lcs_length(candidate, ref));
    if (lcs == 0.0) {
      continue;
    }
    const double p = lcs / static_cast<double>(candidate.size());
    const double r = lcs / static_cast<double>(ref.size());
    best = std::max(best, (1.0 + beta2) * p * r / (r + beta2 * p));
  }
  return best;
}

CiderResult cider(std::span<const Tokens> candidates,
                  std::span<const std::vector<Tokens>> references) {
  if (candidates.size() != references.size()) {
    throw DataError("cider: candidate and reference counts differ");
  }
  CiderResult result;
  result.scores.assign(candidates.size(), 0.0);
  if (candidates.empty()) {
    return result;
  }
  result.degenerate_idf = references.size() < 2;

  // Document frequency of every n-gram over reference sets.
  std::vector<NgramCounts> df(4);
  for (const auto& refs : references) {
    if (refs.empty()) {
      throw DataError("cider: candidate has no reference");
    }
    for (int n = 1; n <= 4; ++n) {
      std::set<std::vector<std::string>> seen;
      for (const Tokens& r : refs) {
        for (const auto& kv : count_ngrams(r, n)) {
          seen.insert(kv.first);
        }
      }
      for (const auto& g : seen) {
        df[static_cast<std::size_t>(n - 1)][g] += 1.0;
      }
    }
  }
  const double log_docs = std::log(static_cast<double>(references.size()));

  auto tfidf = [&](const Tokens& tokens, int n, double& norm) {
    NgramCounts vec = count_ngrams(tokens, n);
    const NgramCounts& table = df[static_cast<std::size_t>(n - 1)];
    norm = 0.0;
    for (auto& [g, v] : vec) {
      auto it = table.find(g);
      const double d = it == table.end() ? 1.0 : std::max(1.0, it->second);
      v *= log_docs - std::log(d);
      norm += v * v;
    }
    norm = std::sqrt(norm);
    return vec;
  };

  double total = 0.0;
  for (std::size_t c = 0; c < candidates.size(); ++c) {
    double score = 0.0;
    for (int n = 1; n <= 4; ++n) {
      double cn = 0.0;
      const NgramCounts cv = tfidf(candidates[c], n, cn);
      double per_ref = 0.0;
      for (const Tokens& r : references[c]) {
        double rn = 0.0;
        const NgramCounts rv = tfidf(r, n, rn);
        if (cn == 0.0 || rn == 0.0) {
          continue;
        }
        double dot = 0.0;
        for (const auto& [g, v] : cv) {
          auto it = rv.find(g);
          if (it != rv.end()) {
            dot += v * it->second;
          }
        }
        per_ref += dot / (cn * rn);
      }
      score += per_ref / static_cast<double>(references[c].size());
    }
    result.scores[c] = 10.0 * score / 4.0;
    total += result.scores[c];
  }
  result.mean = total / static_cast<double>(candidates.size());
  return result;
}

}  // namespace mitr
