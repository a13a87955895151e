#include "ehtune/tasks.hpp"

#include <algorithm>
#include <cmath>
#include <functional>
#include <istream>
#include "json.hpp"
#include <ostream>
#include <unordered_set>

#include "ehtune/error.hpp"
#include "ehtune/rng.hpp"

namespace ehtune::tasks {

namespace {

int sample(const std::vector<double>& probs, Rng& rng) {
  const double u = rng.uniform();
  double acc = 0.0;
  for (std::size_t i = 0; i < probs.size(); ++i) {
    acc += probs[i];
    if (u < acc) return static_cast<int>(i);
  }
  // Rounding slack: last index with nonzero mass.
  for (std::size_t i = probs.size(); i-- > 0;) {
    if (probs[i] > 0.0) return static_cast<int>(i);
  }
  return 0;
}

struct Sampler {
  const Grammar& grammar;
  std::vector<double> trans;
  std::vector<std::vector<double>> emissions;
  std::vector<double> pi;

  explicit Sampler(const Grammar& g) : grammar(g), trans(g.transition()), pi(g.stationary_topics()) {
    for (int k = 0; k < g.n_topics; ++k) emissions.push_back(g.emission(k));
  }

  int next_topic(int t, Rng& rng) const {
    std::vector<double> row(trans.begin() + static_cast<std::ptrdiff_t>(t) * grammar.n_topics,
                            trans.begin() + static_cast<std::ptrdiff_t>(t + 1) * grammar.n_topics);
    return sample(row, rng);
  }
  int emit(int t, Rng& rng) const { return sample(emissions[static_cast<std::size_t>(t)], rng); }
};

}  // namespace

std::vector<double> Grammar::transition() const {
  const int k = n_topics;
  std::vector<double> t(static_cast<std::size_t>(k) * k, 0.0);
  for (int i = 0; i < k; ++i) {
    const double stay = 0.70 + 0.03 * i;
    const double move = 1.0 - stay;
    double* row = t.data() + static_cast<std::size_t>(i) * k;
    row[i] += stay;
    if (k == 1) {
      row[i] += move;
      continue;
    }
    row[(i + 1) % k] += move * 2.0 / 3.0;
    for (int j = 0; j < k; ++j) {
      if (j != i) row[j] += move / 3.0 / (k - 1);
    }
  }
  return t;
}

bool Grammar::in_home(int topic, int token) const {
  const int c = token - model::kFirstContentToken;
  if (c < 0 || c >= n_content()) return false;
  const int start = (topic * home_stride) % n_content();
  const int offset = ((c - start) % n_content() + n_content()) % n_content();
  return offset < home_size;
}

std::vector<double> Grammar::emission(int topic) const {
  std::vector<double> e(static_cast<std::size_t>(vocab_size), 0.0);
  for (int tok = model::kFirstContentToken; tok < vocab_size; ++tok) {
    e[static_cast<std::size_t>(tok)] = (1.0 - home_mass) / n_content() + (in_home(topic, tok) ? home_mass / home_size : 0.0);
  }
  return e;
}

std::vector<double> Grammar::stationary_topics() const {
  const auto t = transition();
  const int k = n_topics;
  std::vector<double> pi(static_cast<std::size_t>(k), 1.0 / k), next(static_cast<std::size_t>(k));
  for (int it = 0; it < 100000; ++it) {
    std::fill(next.begin(), next.end(), 0.0);
    for (int i = 0; i < k; ++i) {
      for (int j = 0; j < k; ++j) next[static_cast<std::size_t>(j)] += pi[static_cast<std::size_t>(i)] * t[static_cast<std::size_t>(i) * k + j];
    }
    double delta = 0.0;
    for (int i = 0; i < k; ++i) delta += std::abs(next[static_cast<std::size_t>(i)] - pi[static_cast<std::size_t>(i)]);
    pi.swap(next);
    if (delta < 1e-15) break;
  }
  return pi;
}

std::vector<double> Grammar::stationary_unigram() const {
  const auto pi = stationary_topics();
  std::vector<double> p(static_cast<std::size_t>(vocab_size), 0.0);
  for (int k = 0; k < n_topics; ++k) {
    const auto e = emission(k);
    for (int v = 0; v < vocab_size; ++v) p[static_cast<std::size_t>(v)] += pi[static_cast<std::size_t>(k)] * e[static_cast<std::size_t>(v)];
  }
  return p;
}

Corpus generate_corpus(const Grammar& grammar, std::uint64_t seed, int n, int seq_len, int heldout) {
  if (n < 1) fail(ErrorKind::Config, "corpus size must be >= 1");
  if (seq_len < 4) fail(ErrorKind::Config, "corpus seq_len must be >= 4");
  if (heldout < 0 || heldout >= n) fail(ErrorKind::Config, "held-out slice must be smaller than the corpus");
  Sampler s(grammar);
  Rng rng(derive_seed(seed, "corpus"));
  Corpus c;
  c.seed = seed;
  c.seq_len = seq_len;
  c.train_size = n - heldout;
  const int content = seq_len - 2;
  const int first = content / 2;
  c.sequences.reserve(static_cast<std::size_t>(n));
  for (int i = 0; i < n; ++i) {
    std::vector<int> seq;
    seq.reserve(static_cast<std::size_t>(seq_len));
    seq.push_back(model::kClsToken);
    int topic = sample(s.pi, rng);
    for (int j = 0; j < content; ++j) {
      if (j == first) seq.push_back(model::kSepToken);
      seq.push_back(s.emit(topic, rng));
      topic = s.next_topic(topic, rng);
    }
    c.sequences.push_back(std::move(seq));
  }
  return c;
}

const char* to_string(Metric m) {
  switch (m) {
    case Metric::Accuracy: return "accuracy";
    case Metric::Mcc: return "mcc";
    case Metric::F1: return "f1";
    case Metric::Pearson: return "pearson";
    case Metric::Spearman: return "spearman";
  }
  return "?";
}

int count_bigram(const std::vector<int>& tokens, int first, int second) {
  int n = 0;
  for (std::size_t i = 0; i + 1 < tokens.size(); ++i) {
    if (tokens[i] == first && tokens[i + 1] == second) ++n;
  }
  return n;
}

namespace {

constexpr int kSegment = 7;

std::vector<int> pure_segment(const Sampler& s, int topic, int len, Rng& rng) {
  std::vector<int> seg;
  for (int i = 0; i < len; ++i) seg.push_back(s.emit(topic, rng));
  return seg;
}

std::vector<int> pair_tokens(const std::vector<int>& a, const std::vector<int>& b) {
  std::vector<int> t{model::kClsToken};
  t.insert(t.end(), a.begin(), a.end());
  t.push_back(model::kSepToken);
  t.insert(t.end(), b.begin(), b.end());
  return t;
}

Example topic_pair_example(const Sampler& s, int label, Rng& rng) {
  const int k = s.grammar.n_topics;
  const int t1 = rng.uniform_int(k);
  int t2 = t1;
  if (label == 0) t2 = (t1 + 1 + rng.uniform_int(k - 1)) % k;
  Example ex;
  ex.tokens = pair_tokens(pure_segment(s, t1, kSegment, rng), pure_segment(s, t2, kSegment, rng));
  ex.label = label;
  ex.target = static_cast<float>(label);
  ex.latent = {t1, t2};
  return ex;
}

Example parity_example(const Sampler& s, int label, Rng& rng) {
  const int content = 2 * kSegment + 1;
  int topic = sample(s.pi, rng);
  std::vector<int> body;
  for (int i = 0; i < content; ++i) {
    body.push_back(s.emit(topic, rng));
    topic = s.next_topic(topic, rng);
  }
  // Remove accidental occurrences; the replacement is neither bigram token.
  for (std::size_t i = 0; i + 1 < body.size(); ++i) {
    if (body[i] == kParityFirst && body[i + 1] == kParitySecond) {
      int r;
      do {
        r = model::kFirstContentToken + rng.uniform_int(s.grammar.n_content());
      } while (r == kParityFirst || r == kParitySecond);
      body[i + 1] = r;
    }
  }
  const int count = label == 1 ? 1 : (rng.bernoulli(0.5) ? 0 : 2);
  // Plant `count` non-overlapping occurrences.
  std::vector<int> starts;
  while (static_cast<int>(starts.size()) < count) {
    const int p = rng.uniform_int(content - 1);
    bool clash = false;
    for (int q : starts) clash = clash || std::abs(q - p) < 2;
    if (!clash) starts.push_back(p);
  }
  for (int p : starts) {
    body[static_cast<std::size_t>(p)] = kParityFirst;
    body[static_cast<std::size_t>(p) + 1] = kParitySecond;
  }
  Example ex;
  ex.tokens.push_back(model::kClsToken);
  ex.tokens.insert(ex.tokens.end(), body.begin(), body.end());
  ex.label = count_bigram(ex.tokens, kParityFirst, kParitySecond) % 2;
  ex.target = static_cast<float>(ex.label);
  return ex;
}

Example similarity_example(const Sampler& s, Rng& rng) {
  const int k = s.grammar.n_topics;
  const int topic = rng.uniform_int(k);
  const int other = (topic + 1 + rng.uniform_int(k - 1)) % k;
  std::vector<int> a = pure_segment(s, topic, kSegment, rng);
  std::vector<int> b = a;
  const double p = rng.uniform();
  for (auto& tok : b) {
    if (rng.bernoulli(p)) tok = s.emit(other, rng);
  }
  int same = 0;
  for (int i = 0; i < kSegment; ++i) same += a[static_cast<std::size_t>(i)] == b[static_cast<std::size_t>(i)];
  Example ex;
  ex.tokens = pair_tokens(a, b);
  ex.target = static_cast<float>(same) / kSegment;
  ex.latent = {topic, other};
  return ex;
}

struct TokensHash {
  std::size_t operator()(const std::vector<int>& v) const {
    std::size_t h = 1469598103934665603ULL;
    for (int x : v) {
      h ^= static_cast<std::size_t>(x) + 0x9e3779b97f4a7c15ULL + (h << 6) + (h >> 2);
    }
    return h;
  }
};

template <typename Gen>
void fill_split(std::vector<Example>& out, int n, bool balanced, Rng& rng, Gen gen,
                std::unordered_set<std::vector<int>, TokensHash>* exclude) {
  while (static_cast<int>(out.size()) < n) {
    const int label = balanced ? static_cast<int>(out.size() % 2) : 0;
    Example ex = gen(label, rng);
    if (exclude && exclude->count(ex.tokens)) continue;
    out.push_back(std::move(ex));
  }
  // Shuffle so that labels are not interleaved.
  for (std::size_t i = out.size(); i > 1; --i) {
    std::swap(out[i - 1], out[static_cast<std::size_t>(rng.uniform_int(static_cast<int>(i)))]);
  }
}

}  // namespace

std::vector<std::string> builtin_task_names() { return {"topic-pair", "topic-pair-large", "parity", "similarity"}; }

Task make_task(const std::string& name, std::uint64_t seed) {
  Grammar grammar;
  Sampler s(grammar);
  Rng rng(derive_seed(seed, "task." + name));
  Task task;
  task.name = name;
  int n_train = 0;
  const int n_dev = 1000;
  std::function<Example(int, Rng&)> gen;
  if (name == "topic-pair" || name == "topic-pair-large") {
    n_train = name == "topic-pair" ? 250 : 10000;
    task.metric = Metric::Accuracy;
    gen = [&s](int label, Rng& r) { return topic_pair_example(s, label, r); };
  } else if (name == "parity") {
    n_train = 2000;
    task.metric = Metric::Mcc;
    gen = [&s](int label, Rng& r) { return parity_example(s, label, r); };
  } else if (name == "similarity") {
    n_train = 2000;
    task.kind = TaskKind::Regression;
    task.n_classes = 1;
    task.metric = Metric::Spearman;
    gen = [&s](int, Rng& r) { return similarity_example(s, r); };
  } else {
    std::string valid;
    for (const auto& n : builtin_task_names()) valid += (valid.empty() ? "" : ", ") + n;
    fail(ErrorKind::Config, "unknown task '" + name + "' (valid: " + valid + ")");
  }
  const bool balanced = task.kind == TaskKind::Classification;
  fill_split(task.train, n_train, balanced, rng, gen, nullptr);
  std::unordered_set<std::vector<int>, TokensHash> seen;
  for (const auto& ex : task.train) seen.insert(ex.tokens);
  fill_split(task.dev, n_dev, balanced, rng, gen, &seen);
  task.seq_len = static_cast<int>(task.train.front().tokens.size());
  return task;
}

void export_jsonl(const std::vector<Example>& examples, TaskKind kind, std::ostream& out) {
  for (const auto& ex : examples) {
    nlohmann::json j;
    j["tokens"] = ex.tokens;
    if (kind == TaskKind::Classification) j["label"] = ex.label;
    else j["label"] = ex.target;
    out << j.dump() << '\n';
  }
}

std::vector<Example> import_jsonl(std::istream& in, TaskKind kind) {
  std::vector<Example> out;
  std::string line;
  int lineno = 0;
  while (std::getline(in, line)) {
    ++lineno;
    if (line.empty()) continue;
    try {
      auto j = nlohmann::json::parse(line);
      Example ex;
      ex.tokens = j.at("tokens").get<std::vector<int>>();
      if (kind == TaskKind::Classification) {
        ex.label = j.at("label").get<int>();
        ex.target = static_cast<float>(ex.label);
      } else {
        ex.target = j.at("label").get<float>();
      }
      out.push_back(std::move(ex));
    } catch (const nlohmann::json::exception& e) {
      fail(ErrorKind::Io, "task jsonl line " + std::to_string(lineno) + ": " + e.what());
    }
  }
  return out;
}

// ---- metrics ---------------------------------------------------------------

namespace {

void check_binary(const std::vector<int>& preds, const std::vector<int>& labels, const char* what) {
  if (preds.empty()) fail(ErrorKind::Contract, std::string(what) + ": empty input");
  if (preds.size() != labels.size()) fail(ErrorKind::Contract, std::string(what) + ": length mismatch");
  for (std::size_t i = 0; i < preds.size(); ++i) {
    if ((preds[i] != 0 && preds[i] != 1) || (labels[i] != 0 && labels[i] != 1)) {
      fail(ErrorKind::Contract, std::string(what) + ": labels must be binary");
    }
  }
}

struct Confusion {
  double tp = 0, tn = 0, fp = 0, fn = 0;
};

Confusion confusion(const std::vector<int>& preds, const std::vector<int>& labels) {
  Confusion c;
  for (std::size_t i = 0; i < preds.size(); ++i) {
    if (preds[i] == 1 && labels[i] == 1) c.tp += 1;
    else if (preds[i] == 0 && labels[i] == 0) c.tn += 1;
    else if (preds[i] == 1) c.fp += 1;
    else c.fn += 1;
  }
  return c;
}

}  // namespace

double accuracy(const std::vector<int>& preds, const std::vector<int>& labels) {
  if (preds.empty()) fail(ErrorKind::Contract, "accuracy: empty input");
  if (preds.size() != labels.size()) fail(ErrorKind::Contract, "accuracy: length mismatch");
  std::size_t hit = 0;
  for (std::size_t i = 0; i < preds.size(); ++i) hit += preds[i] == labels[i];
  return static_cast<double>(hit) / static_cast<double>(preds.size());
}

double mcc(const std::vector<int>& preds, const std::vector<int>& labels) {
  check_binary(preds, labels, "mcc");
  const Confusion c = confusion(preds, labels);
  const double denom = (c.tp + c.fp) * (c.tp + c.fn) * (c.tn + c.fp) * (c.tn + c.fn);
  if (denom == 0.0) return 0.0;
  return (c.tp * c.tn - c.fp * c.fn) / std::sqrt(denom);
}

double f1(const std::vector<int>& preds, const std::vector<int>& labels) {
  check_binary(preds, labels, "f1");
  const Confusion c = confusion(preds, labels);
  // 2PR / (P + R) reduces to a single correctly rounded division.
  if (c.tp == 0.0) return 0.0;
  return 2.0 * c.tp / (2.0 * c.tp + c.fp + c.fn);
}

double pearson(const std::vector<double>& x, const std::vector<double>& y) {
  if (x.size() != y.size()) fail(ErrorKind::Contract, "pearson: length mismatch");
  if (x.size() < 2) fail(ErrorKind::Contract, "pearson: need at least 2 points");
  const double n = static_cast<double>(x.size());
  double mx = 0, my = 0;
  for (std::size_t i = 0; i < x.size(); ++i) {
    mx += x[i];
    my += y[i];
  }
  mx /= n;
  my /= n;
  double sxy = 0, sxx = 0, syy = 0;
  for (std::size_t i = 0; i < x.size(); ++i) {
    sxy += (x[i] - mx) * (y[i] - my);
    sxx += (x[i] - mx) * (x[i] - mx);
    syy += (y[i] - my) * (y[i] - my);
  }
  if (sxx == 0.0 || syy == 0.0) fail(ErrorKind::Contract, "pearson: zero variance input");
  return sxy / std::sqrt(sxx * syy);
}

std::vector<double> fractional_ranks(const std::vector<double>& x) {
  std::vector<std::size_t> order(x.size());
  for (std::size_t i = 0; i < order.size(); ++i) order[i] = i;
  std::stable_sort(order.begin(), order.end(), [&x](std::size_t a, std::size_t b) { return x[a] < x[b]; });
  std::vector<double> ranks(x.size());
  std::size_t i = 0;
  while (i < order.size()) {
    std::size_t j = i;
    while (j + 1 < order.size() && x[order[j + 1]] == x[order[i]]) ++j;
    const double avg = (static_cast<double>(i) + static_cast<double>(j)) / 2.0 + 1.0;
    for (std::size_t k = i; k <= j; ++k) ranks[order[k]] = avg;
    i = j + 1;
  }
  return ranks;
}

double spearman(const std::vector<double>& x, const std::vector<double>& y) {
  if (x.size() != y.size()) fail(ErrorKind::Contract, "spearman: length mismatch");
  return pearson(fractional_ranks(x), fractional_ranks(y));
}

}  // namespace ehtune::tasks
