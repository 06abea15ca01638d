#include <doctest.h>

#include <cmath>

#include "mitr/error.hpp"
#include "mitr/metrics.hpp"

using namespace mitr;

namespace {

Tokens T(const char* s) { return tokenize(s); }

double rouge_f(double lcs, double cand_len, double ref_len) {
  const double p = lcs / cand_len, r = lcs / ref_len, b2 = 1.2 * 1.2;
  return (1 + b2) * p * r / (r + b2 * p);
}

bool near(double a, double b) { return std::abs(a - b) <= 1e-9; }

}  // namespace

TEST_CASE("tokenize lowercases and strips punctuation") {
  CHECK(tokenize("A Dog, running!  fast.") == Tokens{"a", "dog", "running", "fast"});
}

TEST_CASE("bleu fixtures") {
  const std::vector<Tokens> same{T("a man rides a horse")};
  CHECK(bleu_n(T("a man rides a horse"), same, 4) == 1.0);
  CHECK(bleu_n(T("a man rides a horse"), same, 1) == 1.0);

  const std::vector<Tokens> abd{T("a b d")};
  CHECK(near(bleu_n(T("a b c"), abd, 1), 2.0 / 3.0));

  const std::vector<Tokens> abcd{T("a b c d")};
  CHECK(near(bleu_n(T("a b"), abcd, 1), std::exp(1.0 - 4.0 / 2.0)));

  const std::vector<Tokens> mat{T("the cat is on the mat")};
  CHECK(near(bleu_n(T("the cat sat on the mat"), mat, 2), std::sqrt(5.0 / 6.0 * 3.0 / 5.0)));

  const std::vector<Tokens> the_cat{T("the cat")};
  CHECK(near(bleu_n(T("the the the the"), the_cat, 1), 0.25));

  const std::vector<Tokens> abce{T("a b c e")};
  CHECK(bleu_n(T("a b c d"), abce, 4) == 0.0);
}

TEST_CASE("bleu: closest reference length, ties to the shorter") {
  const std::vector<Tokens> refs{T("a b c"), T("a b x y z")};
  CHECK(near(bleu_n(T("a b"), refs, 1), std::exp(1.0 - 3.0 / 2.0)));
  const std::vector<Tokens> tie{T("a b c d"), T("a b")};
  CHECK(bleu_n(T("a b c"), tie, 1) == 1.0);
  const std::vector<Tokens> tie_long{T("a b c d e f"), T("a b")};
  CHECK(near(bleu_n(T("a b c d"), tie_long, 1), 1.0));
}

TEST_CASE("bleu: invariant to reference order, errors and empties") {
  const std::vector<Tokens> r1{T("a cat sits on a mat"), T("there is a cat on the mat")};
  const std::vector<Tokens> r2{r1[1], r1[0]};
  const Tokens c = T("the cat sits on the mat");
  for (int n = 1; n <= 4; ++n) CHECK(bleu_n(c, r1, n) == bleu_n(c, r2, n));
  CHECK(bleu_n(Tokens{}, r1, 1) == 0.0);
  CHECK_THROWS_AS(bleu_n(c, r1, 5), UsageError);
  CHECK_THROWS_AS(bleu_n(c, r1, 0), UsageError);
}

TEST_CASE("corpus bleu pools counts") {
  const std::vector<Tokens> cands{T("a b c"), T("x y")};
  const std::vector<std::vector<Tokens>> refs{{T("a b d")}, {T("x y z w")}};
  // unigram matches 2 + 2 over 5, c = 5, r = 3 + 4 = 7.
  CHECK(near(corpus_bleu(cands, refs, 1), std::exp(1.0 - 7.0 / 5.0) * 4.0 / 5.0));
  // bigram matches 1 + 1 over 2 + 1.
  CHECK(near(corpus_bleu(cands, refs, 2), std::exp(1.0 - 7.0 / 5.0) * std::sqrt(4.0 / 5.0 * 2.0 / 3.0)));
}

TEST_CASE("rouge-l fixtures") {
  const std::vector<Tokens> same{T("a dog on the grass")};
  CHECK(rouge_l(T("a dog on the grass"), same) == 1.0);
  const std::vector<Tokens> disjoint{T("x y z")};
  CHECK(rouge_l(T("a b c"), disjoint) == 0.0);
  const std::vector<Tokens> acd{T("a c d")};
  CHECK(near(rouge_l(T("a b c d"), acd), rouge_f(3, 4, 3)));
  const std::vector<Tokens> two{T("c b a"), T("a x c")};
  CHECK(near(rouge_l(T("a b c"), two), rouge_f(2, 3, 3)));
  const std::vector<Tokens> longer{T("a b c d e f")};
  CHECK(near(rouge_l(T("a b"), longer), rouge_f(2, 2, 6)));
  CHECK(rouge_l(Tokens{}, longer) == 0.0);
  CHECK(lcs_length(T("a b c b d a b"), T("b d c a b a")) == 4);
}

TEST_CASE("cider: identical captions on a two-image corpus") {
  const std::vector<Tokens> cands{T("a b"), T("c d")};
  const std::vector<std::vector<Tokens>> refs{{T("a b")}, {T("c d")}};
  const CiderResult r = cider(cands, refs);
  // idf = log 2 for every n-gram; orders 1 and 2 have cosine 1, 3 and 4 have no n-grams.
  CHECK(near(r.scores[0], 5.0));
  CHECK(near(r.scores[1], 5.0));
  CHECK(near(r.mean, 5.0));
  CHECK_FALSE(r.degenerate_idf);
}

TEST_CASE("cider: disjoint vocabulary scores zero") {
  const std::vector<Tokens> cands{T("p q r"), T("c d")};
  const std::vector<std::vector<Tokens>> refs{{T("a b")}, {T("c d")}};
  CHECK(cider(cands, refs).scores[0] == 0.0);
}

TEST_CASE("cider: hand-computed partial overlap") {
  const std::vector<Tokens> cands{T("a b"), T("c d")};
  const std::vector<std::vector<Tokens>> refs{{T("a b"), T("a c")}, {T("c d")}};
  const CiderResult r = cider(cands, refs);
  // "c" occurs in both reference sets (idf 0); a, b, d have idf log 2.
  const double n1 = (1.0 + 1.0 / std::sqrt(2.0)) / 2.0;
  const double n2 = (1.0 + 0.0) / 2.0;
  CHECK(near(r.scores[0], 10.0 * (n1 + n2) / 4.0));
  CHECK(near(r.scores[1], 5.0));
}

TEST_CASE("cider: uniform corpus has zero idf everywhere") {
  const std::vector<Tokens> cands{T("a b"), T("a b")};
  const std::vector<std::vector<Tokens>> refs{{T("a b")}, {T("a b")}};
  const CiderResult r = cider(cands, refs);
  CHECK(r.scores[0] == 0.0);
  CHECK(r.scores[1] == 0.0);
}

TEST_CASE("cider: order invariance and single-document warning") {
  const std::vector<Tokens> c1{T("a man on a horse"), T("two dogs in snow"), T("a red car")};
  const std::vector<std::vector<Tokens>> r1{
      {T("a man rides a horse"), T("a person on a horse")}, {T("dogs play in the snow")}, {T("a red car parked")}};
  const std::vector<Tokens> c2{c1[2], c1[0], c1[1]};
  const std::vector<std::vector<Tokens>> r2{r1[2], r1[0], r1[1]};
  const auto a = cider(c1, r1), b = cider(c2, r2);
  CHECK(a.scores[0] == b.scores[1]);
  CHECK(a.scores[1] == b.scores[2]);
  CHECK(a.scores[2] == b.scores[0]);
  for (double s : a.scores) CHECK((s >= 0.0 && s <= 10.0));

  const std::vector<Tokens> one{T("a b")};
  const std::vector<std::vector<Tokens>> one_ref{{T("a b")}};
  const auto d = cider(one, one_ref);
  CHECK(d.degenerate_idf);
  CHECK(d.scores[0] == 0.0);
}
