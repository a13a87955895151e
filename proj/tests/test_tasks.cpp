#include <gtest/gtest.h>

#include <cmath>
#include <numeric>
#include <set>
#include <sstream>

#include "ehtune/error.hpp"
#include "ehtune/rng.hpp"
#include "ehtune/tasks.hpp"
#include "oracles.hpp"

using namespace ehtune;
using namespace ehtune::tasks;
using namespace oracle;

namespace {

template <typename F>
ErrorKind kind_of(F&& fn) {
  try {
    fn();
  } catch (const Error& e) {
    return e.kind();
  }
  ADD_FAILURE() << "expected an ehtune::Error";
  return ErrorKind::Io;
}

}  // namespace

// ---- hand cases ----------------------------------------------------------------

TEST(Metrics, MccHandCases) {
  // TP=2, TN=1, FP=1, FN=1
  std::vector<int> p{1, 1, 0, 1, 0}, y{1, 1, 0, 0, 1};
  EXPECT_NEAR(mcc(p, y), 1.0 / 6.0, 1e-15);
  std::vector<int> labels{0, 1, 1, 0};
  EXPECT_EQ(mcc(labels, labels), 1.0);
  std::vector<int> flipped{1, 0, 0, 1};
  EXPECT_EQ(mcc(flipped, labels), -1.0);
  std::vector<int> majority(4, 1);
  EXPECT_EQ(mcc(majority, labels), 0.0);
  std::vector<int> empty;
  EXPECT_EQ(kind_of([&] { mcc(empty, empty); }), ErrorKind::Contract);
}

TEST(Metrics, F1HandCases) {
  // P = 0.5, R = 1
  std::vector<int> p{1, 1, 0, 0}, y{1, 0, 0, 0};
  EXPECT_NEAR(f1(p, y), 2.0 / 3.0, 1e-15);
  EXPECT_EQ(f1(y, y), 1.0);
  std::vector<int> none(4, 0);
  EXPECT_EQ(f1(none, y), 0.0);
  std::vector<int> empty;
  EXPECT_EQ(kind_of([&] { f1(empty, empty); }), ErrorKind::Contract);
}

TEST(Metrics, CorrelationHandCases) {
  std::vector<double> x{1, 2, 3}, y{1, 3, 2};
  EXPECT_NEAR(spearman(x, y), 0.5, 1e-15);
  std::vector<double> affine{3, 5, 7}, neg{-1, -2, -3};
  EXPECT_NEAR(pearson(x, affine), 1.0, 1e-15);
  EXPECT_NEAR(spearman(x, affine), 1.0, 1e-15);
  EXPECT_NEAR(pearson(x, neg), -1.0, 1e-15);
  EXPECT_NEAR(spearman(x, neg), -1.0, 1e-15);
  std::vector<double> flat{2, 2, 2};
  EXPECT_EQ(kind_of([&] { pearson(x, flat); }), ErrorKind::Contract);
  EXPECT_EQ(kind_of([&] { spearman(flat, x); }), ErrorKind::Contract);
}

TEST(Metrics, FractionalRanksAverageTies) {
  std::vector<double> x{10, 20, 10, 30, 20, 20};
  EXPECT_EQ(fractional_ranks(x), (std::vector<double>{1.5, 4, 1.5, 6, 4, 4}));
}

TEST(Metrics, AccuracyAndMajorityFloor) {
  std::vector<int> y;
  for (int i = 0; i < 1000; ++i) y.push_back(i % 2);
  std::vector<int> majority(1000, 0);
  EXPECT_EQ(accuracy(majority, y), 0.5);
  EXPECT_EQ(mcc(majority, y), 0.0);
}

// ---- 1,000 random vectors --------------------------------------------------------

TEST(Metrics, AgreeWithBruteForceOraclesOnRandomVectors) {
  Rng rng(2024);
  for (int trial = 0; trial < 1000; ++trial) {
    const int n = 2 + static_cast<int>(rng.uniform_int(60));
    std::vector<int> p(static_cast<std::size_t>(n)), y(static_cast<std::size_t>(n));
    const double bias = rng.uniform();
    for (int i = 0; i < n; ++i) {
      y[i] = rng.bernoulli(0.5);
      p[i] = rng.bernoulli(bias) ? y[i] : rng.bernoulli(0.5);
    }
    const Counts c = count_confusion(p, y);
    EXPECT_EQ(mcc(p, y), oracle_mcc(c)) << trial;
    EXPECT_EQ(f1(p, y), oracle_f1(c)) << trial;

    std::vector<double> x(static_cast<std::size_t>(n)), z(static_cast<std::size_t>(n));
    const bool ties = trial % 2 == 0;
    for (int i = 0; i < n; ++i) {
      x[i] = ties ? static_cast<double>(rng.uniform_int(5)) : rng.normal();
      z[i] = ties ? static_cast<double>(rng.uniform_int(5)) + 0.5 * x[i] : rng.normal() + x[i];
    }
    const auto var = [](const std::vector<double>& v) {
      for (double e : v)
        if (e != v[0]) return true;
      return false;
    };
    if (!var(x) || !var(z)) continue;
    EXPECT_NEAR(pearson(x, z), static_cast<double>(oracle_pearson(x, z)), 1e-9) << trial;
    EXPECT_EQ(fractional_ranks(x), oracle_ranks(x)) << trial;
    EXPECT_NEAR(spearman(x, z), static_cast<double>(oracle_pearson(oracle_ranks(x), oracle_ranks(z))), 1e-9) << trial;
  }
}

TEST(Metrics, MccEqualsPearsonOfBinaryVectors) {
  Rng rng(7);
  for (int trial = 0; trial < 200; ++trial) {
    std::vector<int> p, y;
    std::vector<double> pd, yd;
    for (int i = 0; i < 40; ++i) {
      y.push_back(rng.bernoulli(0.5));
      p.push_back(rng.bernoulli(0.7) ? y.back() : 1 - y.back());
      pd.push_back(p.back());
      yd.push_back(y.back());
    }
    EXPECT_NEAR(mcc(p, y), static_cast<double>(oracle_pearson(pd, yd)), 1e-12);
  }
}

// ---- generators ------------------------------------------------------------------

TEST(Grammar, DistributionsAreNormalized) {
  Grammar g;
  const auto t = g.transition();
  for (int i = 0; i < g.n_topics; ++i) {
    double s = 0.0;
    for (int j = 0; j < g.n_topics; ++j) s += t[i * g.n_topics + j];
    EXPECT_NEAR(s, 1.0, 1e-12);
  }
  for (int k = 0; k < g.n_topics; ++k) {
    const auto e = g.emission(k);
    double s = 0.0;
    for (int v = 0; v < model::kFirstContentToken; ++v) EXPECT_EQ(e[v], 0.0);
    for (double p : e) s += p;
    EXPECT_NEAR(s, 1.0, 1e-12);
  }
  // pi T = pi
  const auto pi = g.stationary_topics();
  for (int j = 0; j < g.n_topics; ++j) {
    double s = 0.0;
    for (int i = 0; i < g.n_topics; ++i) s += pi[i] * t[i * g.n_topics + j];
    EXPECT_NEAR(s, pi[j], 1e-12);
  }
}

TEST(Corpus, DeterministicAndInVocabulary) {
  Grammar g;
  Corpus a = generate_corpus(g, 5, 200, 32, 20), b = generate_corpus(g, 5, 200, 32, 20);
  EXPECT_EQ(a.sequences, b.sequences);
  EXPECT_NE(a.sequences, generate_corpus(g, 6, 200, 32, 20).sequences);
  EXPECT_EQ(a.train_size, 180);
  for (const auto& s : a.sequences) {
    ASSERT_EQ(s.size(), 32u);
    EXPECT_EQ(s[0], model::kClsToken);
    for (int t : s) {
      EXPECT_GE(t, 0);
      EXPECT_LT(t, 64);
      EXPECT_NE(t, model::kMaskToken);
    }
  }
}

TEST(Corpus, FirstTokenMatchesStationaryUnigramChiSquare) {
  // The chain starts in its stationary distribution, so the first content
  // token of each sequence is an independent draw from the stationary unigram.
  Grammar g;
  const int n = 100000;
  Corpus c = generate_corpus(g, 11, n, 4, 1);
  std::vector<double> counts(64, 0.0);
  for (const auto& s : c.sequences) counts[static_cast<std::size_t>(s[1])] += 1.0;
  const auto p = g.stationary_unigram();
  double chi2 = 0.0;
  for (int v = model::kFirstContentToken; v < 64; ++v) {
    const double e = p[v] * n;
    chi2 += (counts[v] - e) * (counts[v] - e) / e;
  }
  // 60 degrees of freedom; the 0.999 quantile is 99.6.
  EXPECT_LT(chi2, 99.6);
}

TEST(Corpus, AllPositionUnigramCloseToStationary) {
  Grammar g;
  Corpus c = generate_corpus(g, 12, 4000, 32, 1);
  std::vector<double> counts(64, 0.0);
  double total = 0.0;
  for (const auto& s : c.sequences)
    for (int t : s)
      if (t >= model::kFirstContentToken) {
        counts[static_cast<std::size_t>(t)] += 1.0;
        total += 1.0;
      }
  const auto p = g.stationary_unigram();
  double tv = 0.0;
  for (int v = 0; v < 64; ++v) tv += std::abs(counts[v] / total - p[v]);
  EXPECT_LT(0.5 * tv, 0.03);
}

TEST(Corpus, RejectsBadArguments) {
  Grammar g;
  EXPECT_EQ(kind_of([&] { generate_corpus(g, 1, 0, 32, 0); }), ErrorKind::Config);
  EXPECT_EQ(kind_of([&] { generate_corpus(g, 1, 10, 32, 10); }), ErrorKind::Config);
}

TEST(Tasks, SizesMetricsAndDeterminism) {
  struct Want {
    const char* name;
    std::size_t train;
    Metric metric;
    TaskKind kind;
  };
  for (const Want& w : {Want{"topic-pair", 250, Metric::Accuracy, TaskKind::Classification},
                        Want{"topic-pair-large", 10000, Metric::Accuracy, TaskKind::Classification},
                        Want{"parity", 2000, Metric::Mcc, TaskKind::Classification},
                        Want{"similarity", 2000, Metric::Spearman, TaskKind::Regression}}) {
    SCOPED_TRACE(w.name);
    Task t = make_task(w.name, 3);
    EXPECT_EQ(t.train.size(), w.train);
    EXPECT_EQ(t.dev.size(), 1000u);
    EXPECT_EQ(t.metric, w.metric);
    EXPECT_EQ(t.kind, w.kind);
    Task again = make_task(w.name, 3);
    ASSERT_EQ(again.train.size(), t.train.size());
    for (std::size_t i = 0; i < t.train.size(); ++i) {
      EXPECT_EQ(again.train[i].tokens, t.train[i].tokens);
      EXPECT_EQ(again.train[i].label, t.train[i].label);
      EXPECT_EQ(again.train[i].target, t.train[i].target);
    }
    for (const auto& split : {t.train, t.dev})
      for (const auto& ex : split) {
        EXPECT_EQ(static_cast<int>(ex.tokens.size()), t.seq_len);
        EXPECT_EQ(ex.tokens[0], model::kClsToken);
        for (int tok : ex.tokens) EXPECT_LT(tok, 64);
      }
  }
  EXPECT_EQ(kind_of([] { make_task("mnli", 1); }), ErrorKind::Config);
}

TEST(Tasks, TrainAndDevAreDisjoint) {
  for (const auto& name : builtin_task_names()) {
    Task t = make_task(name, 4);
    std::set<std::vector<int>> train;
    for (const auto& ex : t.train) train.insert(ex.tokens);
    for (const auto& ex : t.dev) EXPECT_EQ(train.count(ex.tokens), 0u) << name;
  }
}

TEST(Tasks, ClassificationIsBalanced) {
  for (const char* name : {"topic-pair", "topic-pair-large", "parity"}) {
    Task t = make_task(name, 5);
    for (const auto* split : {&t.train, &t.dev}) {
      double pos = 0.0;
      for (const auto& ex : *split) pos += ex.label;
      const double frac = pos / static_cast<double>(split->size());
      EXPECT_GE(frac, 0.45) << name;
      EXPECT_LE(frac, 0.55) << name;
    }
  }
}

TEST(Tasks, TopicPairLabelsFollowLatentTopics) {
  Task t = make_task("topic-pair", 6);
  for (const auto& ex : t.train) {
    ASSERT_EQ(ex.latent.size(), 2u);
    EXPECT_EQ(ex.label, ex.latent[0] == ex.latent[1] ? 1 : 0);
    EXPECT_EQ(ex.tokens[8], model::kSepToken);
  }
}

TEST(Tasks, ParityLabelIsBigramCountParity) {
  std::vector<int> hand{model::kClsToken, kParityFirst, kParitySecond, 5, kParityFirst, kParitySecond,
                        kParityFirst,     kParitySecond, 7};
  EXPECT_EQ(count_bigram(hand, kParityFirst, kParitySecond), 3);
  EXPECT_EQ(count_bigram(hand, kParityFirst, kParitySecond) % 2, 1);
  Task t = make_task("parity", 7);
  std::set<int> seen_counts;
  for (const auto& ex : t.train) {
    const int c = count_bigram(ex.tokens, kParityFirst, kParitySecond);
    EXPECT_EQ(ex.label, c % 2);
    seen_counts.insert(c);
  }
  EXPECT_EQ(seen_counts, (std::set<int>{0, 1, 2}));
}

TEST(Tasks, SimilarityTargetIsPositionalOverlap) {
  Task t = make_task("similarity", 8);
  double lo = 1.0, hi = 0.0;
  for (const auto& ex : t.train) {
    int same = 0;
    for (int i = 0; i < 7; ++i) same += ex.tokens[1 + i] == ex.tokens[9 + i];
    EXPECT_FLOAT_EQ(ex.target, static_cast<float>(same) / 7.0f);
    EXPECT_NE(ex.latent[0], ex.latent[1]);
    lo = std::min(lo, static_cast<double>(ex.target));
    hi = std::max(hi, static_cast<double>(ex.target));
  }
  EXPECT_LT(lo, 0.2);
  EXPECT_EQ(hi, 1.0);
}

TEST(Tasks, JsonlRoundTrip) {
  for (const char* name : {"parity", "similarity"}) {
    Task t = make_task(name, 9);
    std::stringstream ss;
    export_jsonl(t.dev, t.kind, ss);
    auto back = import_jsonl(ss, t.kind);
    ASSERT_EQ(back.size(), t.dev.size());
    for (std::size_t i = 0; i < back.size(); ++i) {
      EXPECT_EQ(back[i].tokens, t.dev[i].tokens);
      EXPECT_EQ(back[i].label, t.dev[i].label);
      EXPECT_EQ(back[i].target, t.dev[i].target);
    }
  }
  std::stringstream bad("{\"tokens\": [1,2]}\n");
  EXPECT_EQ(kind_of([&] { import_jsonl(bad, TaskKind::Classification); }), ErrorKind::Io);
}
