#pragma once

#include <cmath>
#include <numeric>
#include <vector>

namespace oracle {

// Brute-force oracles, written independently of the library code.

struct Counts {
  long tp = 0, tn = 0, fp = 0, fn = 0;
};

inline Counts count_confusion(const std::vector<int>& p, const std::vector<int>& y) {
  Counts c;
  for (std::size_t i = 0; i < p.size(); ++i) {
    c.tp += p[i] && y[i];
    c.tn += !p[i] && !y[i];
    c.fp += p[i] && !y[i];
    c.fn += !p[i] && y[i];
  }
  return c;
}

inline double oracle_mcc(const Counts& c) {
  const double d = static_cast<double>(c.tp + c.fp) * static_cast<double>(c.tp + c.fn) *
                   static_cast<double>(c.tn + c.fp) * static_cast<double>(c.tn + c.fn);
  if (d == 0.0) return 0.0;
  return (static_cast<double>(c.tp) * static_cast<double>(c.tn) - static_cast<double>(c.fp) * static_cast<double>(c.fn)) /
         std::sqrt(d);
}

inline double oracle_f1(const Counts& c) {
  // P = pn/pd, R = rn/rd as integer fractions; F1 = 2PR/(P+R) reduced exactly.
  const long pn = c.tp, pd = c.tp + c.fp, rn = c.tp, rd = c.tp + c.fn;
  if (pn == 0 || rn == 0) return 0.0;
  long num = 2 * pn * rn, den = pn * rd + rn * pd;
  const long g = std::gcd(num, den);
  return static_cast<double>(num / g) / static_cast<double>(den / g);
}

inline long double oracle_pearson(const std::vector<double>& x, const std::vector<double>& y) {
  const long double n = static_cast<long double>(x.size());
  long double sx = 0, sy = 0;
  for (std::size_t i = 0; i < x.size(); ++i) {
    sx += x[i];
    sy += y[i];
  }
  long double num = 0, dx = 0, dy = 0;
  for (std::size_t i = 0; i < x.size(); ++i) {
    const long double a = x[i] - sx / n, b = y[i] - sy / n;
    num += a * b;
    dx += a * a;
    dy += b * b;
  }
  return num / std::sqrt(dx * dy);
}

// Rank by counting: (#smaller) + (#equal + 1) / 2. Quadratic but obviously right.
inline std::vector<double> oracle_ranks(const std::vector<double>& x) {
  std::vector<double> r(x.size());
  for (std::size_t i = 0; i < x.size(); ++i) {
    double less = 0, equal = 0;
    for (double v : x) {
      less += v < x[i];
      equal += v == x[i];
    }
    r[i] = less + (equal + 1.0) / 2.0;
  }
  return r;
}

}  // namespace oracle
