#pragma once

// Reference implementations in binary128 arithmetic. Written from the
// textbook definitions, deliberately without sharing code or tricks
// (max-shifting, compensated sums) with the library under test.

#include <quadmath.h>

#include <algorithm>
#include <cstdint>
#include <numeric>
#include <vector>

namespace oracle {

using quad = __float128;

inline std::vector<quad> widen(const std::vector<double>& v) {
  return std::vector<quad>(v.begin(), v.end());
}

inline double narrow(quad q) { return static_cast<double>(q); }

inline std::vector<double> narrow(const std::vector<quad>& v) {
  return std::vector<double>(v.begin(), v.end());
}

inline quad sum(const std::vector<quad>& v) {
  quad s = 0;
  for (quad x : v) s += x;
  return s;
}

// exp(x_i) / sum_j exp(x_j); the logits in tests stay well inside the
// binary128 exponent range, so no shift is needed.
inline std::vector<quad> softmax(const std::vector<double>& logits) {
  std::vector<quad> e;
  e.reserve(logits.size());
  for (double x : logits) e.push_back(expq(static_cast<quad>(x)));
  quad z = sum(e);
  for (quad& x : e) x /= z;
  return e;
}

inline quad std_dev(const std::vector<double>& p) {
  const quad n = p.size();
  const quad mean = sum(widen(p)) / n;
  quad acc = 0;
  for (double x : p) acc += (x - mean) * (x - mean);
  return sqrtq(acc / n);
}

inline quad entropy_bits(const std::vector<double>& p) {
  quad h = 0;
  for (double x : p) {
    if (x > 0) h -= static_cast<quad>(x) * log2q(static_cast<quad>(x));
  }
  return h;
}

// Linear interpolation between closest ranks at h = (n - 1) q.
inline quad quantile(std::vector<quad> sorted, quad q) {
  std::sort(sorted.begin(), sorted.end());
  quad h = (sorted.size() - 1) * q;
  auto lo = static_cast<std::size_t>(floorq(h));
  std::size_t hi = std::min(lo + 1, sorted.size() - 1);
  return sorted[lo] + (h - lo) * (sorted[hi] - sorted[lo]);
}

inline quad iqr(const std::vector<double>& p) {
  auto w = widen(p);
  return quantile(w, 0.75Q) - quantile(w, 0.25Q);
}

inline quad kl_bits(const std::vector<quad>& p, const std::vector<quad>& m) {
  quad d = 0;
  for (std::size_t i = 0; i < p.size(); ++i) {
    if (p[i] > 0) d += p[i] * log2q(p[i] / m[i]);
  }
  return d;
}

inline quad js_bits(const std::vector<double>& p, const std::vector<double>& q) {
  auto a = widen(p);
  auto b = widen(q);
  std::vector<quad> m(a.size());
  for (std::size_t i = 0; i < a.size(); ++i) m[i] = (a[i] + b[i]) / 2;
  return (kl_bits(a, m) + kl_bits(b, m)) / 2;
}

// softmax(s / t) where -inf entries are excluded outright.
inline std::vector<quad> tempered(const std::vector<double>& scores, double t) {
  std::vector<quad> e(scores.size(), 0);
  quad z = 0;
  for (std::size_t i = 0; i < scores.size(); ++i) {
    if (scores[i] == -__builtin_inf()) continue;
    e[i] = expq(static_cast<quad>(scores[i]) / t);
    z += e[i];
  }
  for (quad& x : e) x /= z;
  return e;
}

// Indices sorted by probability descending, ties by ascending index; keep
// the shortest prefix whose mass reaches p.
inline std::vector<quad> nucleus(const std::vector<double>& probs, double p) {
  std::vector<std::size_t> order(probs.size());
  std::iota(order.begin(), order.end(), 0);
  std::stable_sort(order.begin(), order.end(),
                   [&](std::size_t a, std::size_t b) { return probs[a] > probs[b]; });
  std::vector<quad> out(probs.size(), 0);
  quad mass = 0;
  for (std::size_t idx : order) {
    if (mass >= p) break;
    out[idx] = probs[idx];
    mass += probs[idx];
  }
  for (quad& x : out) x /= mass;
  return out;
}

// Fraction of the size-k subsets of n samples (the first c correct) that
// contain at least one correct sample, by enumerating bitmasks.
inline double pass_at_k_enumerated(int n, int c, int k) {
  std::uint64_t hits = 0;
  std::uint64_t total = 0;
  const std::uint32_t correct_mask = (1u << c) - 1u;
  for (std::uint32_t s = 0; s < (1u << n); ++s) {
    if (__builtin_popcount(s) != k) continue;
    ++total;
    if (s & correct_mask) ++hits;
  }
  return static_cast<double>(hits) / static_cast<double>(total);
}

}  // namespace oracle
