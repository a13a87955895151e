#pragma once

#include <cstdint>
#include <iosfwd>
#include <string>
#include <vector>

#include "ehtune/backbone.hpp"

namespace ehtune::tasks {

// Topic HMM over the content tokens of a 64-token vocabulary. Each latent
// topic prefers a window of "home" tokens; topics are sticky with
// topic-dependent persistence, so the stationary topic distribution is not
// uniform.
struct Grammar {
  int vocab_size = 64;
  int n_topics = 8;
  int home_size = 10;
  int home_stride = 7;
  double home_mass = 0.55;

  int n_content() const { return vocab_size - model::kFirstContentToken; }
  // Row-stochastic topic transition matrix, n_topics x n_topics.
  std::vector<double> transition() const;
  // Emission distribution of one topic over the full vocabulary.
  std::vector<double> emission(int topic) const;
  // Stationary topic distribution (power iteration on transition()).
  std::vector<double> stationary_topics() const;
  // Stationary unigram distribution over the vocabulary.
  std::vector<double> stationary_unigram() const;
  bool in_home(int topic, int token) const;
};

struct Corpus {
  // Each sequence: [CLS] seg1 [SEP] seg2, content drawn from one HMM chain.
  std::vector<std::vector<int>> sequences;
  std::uint64_t seed = 0;
  int seq_len = 0;
  // Sequences at index >= train_size are the held-out MLM evaluation slice.
  int train_size = 0;
};

// Deterministic in (grammar, seed, n, seq_len). The last `heldout` sequences
// form the held-out slice.
Corpus generate_corpus(const Grammar& grammar, std::uint64_t seed, int n, int seq_len, int heldout);

enum class TaskKind { Classification, Regression };
enum class Metric { Accuracy, Mcc, F1, Pearson, Spearman };

const char* to_string(Metric m);

struct Example {
  std::vector<int> tokens;
  int label = 0;        // classification
  float target = 0.0f;  // regression
  std::vector<int> latent;  // generation-time ground truth (topics)
};

struct Task {
  std::string name;
  TaskKind kind = TaskKind::Classification;
  int n_classes = 2;  // 1 for regression
  Metric metric = Metric::Accuracy;
  int seq_len = 0;
  std::vector<Example> train;
  std::vector<Example> dev;
};

// Built-in tasks:
//   topic-pair        2-class, same latent topic?  250 train    accuracy
//   topic-pair-large  same generator              10000 train   accuracy
//   parity            parity of (a,b) bigram count 2000 train   MCC
//   similarity        positional overlap score     2000 train   Spearman
std::vector<std::string> builtin_task_names();
Task make_task(const std::string& name, std::uint64_t seed);

// The bigram counted by the parity task.
inline constexpr int kParityFirst = 10;
inline constexpr int kParitySecond = 20;
int count_bigram(const std::vector<int>& tokens, int first, int second);

// Line-delimited JSON, one {"tokens": [...], "label": x} per example.
void export_jsonl(const std::vector<Example>& examples, TaskKind kind, std::ostream& out);
std::vector<Example> import_jsonl(std::istream& in, TaskKind kind);

// ---- evaluation metrics ----------------------------------------------------

double accuracy(const std::vector<int>& preds, const std::vector<int>& labels);
// Binary MCC; 0 when any marginal of the confusion matrix is empty.
double mcc(const std::vector<int>& preds, const std::vector<int>& labels);
// Binary F1 of the positive class; 0 when precision + recall = 0.
double f1(const std::vector<int>& preds, const std::vector<int>& labels);
double pearson(const std::vector<double>& x, const std::vector<double>& y);
// Pearson correlation of fractional ranks (ties share their average rank).
double spearman(const std::vector<double>& x, const std::vector<double>& y);
std::vector<double> fractional_ranks(const std::vector<double>& x);

}  // namespace ehtune::tasks
