#pragma once

// Flat parameter vectors, seeded random streams, and fixed-order reductions.

#include <algorithm>
#include <bit>
#include <cmath>
#include <cstddef>
#include <cstdint>
#include <numbers>
#include <numeric>
#include <random>
#include <span>
#include <stdexcept>
#include <string>
#include <utility>
#include <vector>

namespace fedbench {

struct LayoutEntry {
  std::string name;
  std::vector<std::size_t> shape;

  std::size_t size() const {
    return std::accumulate(shape.begin(), shape.end(), std::size_t{1},
                           std::multiplies<>());
  }
  bool operator==(const LayoutEntry&) const = default;
};

using Layout = std::vector<LayoutEntry>;

inline std::size_t layout_size(const Layout& layout) {
  std::size_t n = 0;
  for (const auto& e : layout) n += e.size();
  return n;
}

/// Model parameters (or a parameter delta) as one flat double array.
///
/// `layout` describes how the flat array maps onto named tensors; an empty
/// layout means "untyped vector" and is what the aggregation tests use.
class ParamVector {
 public:
  ParamVector() = default;
  explicit ParamVector(std::vector<double> values) : values_(std::move(values)) {}
  ParamVector(std::vector<double> values, Layout layout)
      : values_(std::move(values)), layout_(std::move(layout)) {
    if (layout_size(layout_) != values_.size()) {
      throw std::invalid_argument("ParamVector: layout describes " +
                                  std::to_string(layout_size(layout_)) +
                                  " values but " + std::to_string(values_.size()) +
                                  " were given");
    }
  }
  ParamVector(std::initializer_list<double> values) : values_(values) {}

  static ParamVector zeros(std::size_t n) { return ParamVector(std::vector<double>(n, 0.0)); }
  static ParamVector zeros_like(const ParamVector& other) {
    ParamVector p;
    p.values_.assign(other.size(), 0.0);
    p.layout_ = other.layout_;
    return p;
  }

  std::size_t size() const { return values_.size(); }
  bool empty() const { return values_.empty(); }

  double& operator[](std::size_t i) { return values_[i]; }
  double operator[](std::size_t i) const { return values_[i]; }

  std::span<double> values() { return values_; }
  std::span<const double> values() const { return values_; }
  std::vector<double>& raw() { return values_; }
  const std::vector<double>& raw() const { return values_; }

  const Layout& layout() const { return layout_; }
  void set_layout(Layout layout) {
    if (!layout.empty() && layout_size(layout) != values_.size())
      throw std::invalid_argument("ParamVector: layout size mismatch");
    layout_ = std::move(layout);
  }

  /// Split into one vector per layout entry.
  std::vector<std::vector<double>> unflatten() const {
    std::vector<std::vector<double>> out;
    std::size_t off = 0;
    for (const auto& e : layout_) {
      out.emplace_back(values_.begin() + off, values_.begin() + off + e.size());
      off += e.size();
    }
    return out;
  }

  static ParamVector flatten(const std::vector<std::vector<double>>& tensors, Layout layout) {
    if (tensors.size() != layout.size())
      throw std::invalid_argument("flatten: tensor count does not match layout");
    std::vector<double> flat;
    for (std::size_t i = 0; i < tensors.size(); ++i) {
      if (tensors[i].size() != layout[i].size())
        throw std::invalid_argument("flatten: tensor '" + layout[i].name + "' has wrong size");
      flat.insert(flat.end(), tensors[i].begin(), tensors[i].end());
    }
    return ParamVector(std::move(flat), std::move(layout));
  }

  ParamVector& operator+=(const ParamVector& o) {
    check_same_size(o);
    for (std::size_t i = 0; i < values_.size(); ++i) values_[i] += o.values_[i];
    return *this;
  }
  ParamVector& operator-=(const ParamVector& o) {
    check_same_size(o);
    for (std::size_t i = 0; i < values_.size(); ++i) values_[i] -= o.values_[i];
    return *this;
  }
  ParamVector& operator*=(double c) {
    for (auto& v : values_) v *= c;
    return *this;
  }

  friend ParamVector operator+(ParamVector a, const ParamVector& b) { return a += b; }
  friend ParamVector operator-(ParamVector a, const ParamVector& b) { return a -= b; }
  friend ParamVector operator*(ParamVector a, double c) { return a *= c; }
  friend ParamVector operator*(double c, ParamVector a) { return a *= c; }

  /// Bitwise equality of the values (layout ignored).
  bool same_bits(const ParamVector& o) const {
    if (o.size() != size()) return false;
    for (std::size_t i = 0; i < size(); ++i)
      if (std::bit_cast<std::uint64_t>(values_[i]) != std::bit_cast<std::uint64_t>(o.values_[i]))
        return false;
    return true;
  }

  bool operator==(const ParamVector& o) const { return values_ == o.values_; }

  void check_same_size(const ParamVector& o) const {
    if (o.size() != size())
      throw std::invalid_argument("ParamVector: length mismatch (" + std::to_string(size()) +
                                  " vs " + std::to_string(o.size()) + ")");
  }

 private:
  std::vector<double> values_;
  Layout layout_;
};

inline double dot(const ParamVector& a, const ParamVector& b) {
  a.check_same_size(b);
  double s = 0.0;
  for (std::size_t i = 0; i < a.size(); ++i) s += a[i] * b[i];
  return s;
}

inline double l2_norm(const ParamVector& v) {
  if (v.empty()) throw std::invalid_argument("l2_norm: empty vector");
  // Scaled accumulation avoids overflow for very large updates.
  double scale = 0.0;
  for (double x : v.values()) scale = std::max(scale, std::abs(x));
  if (scale == 0.0) return 0.0;
  if (!std::isfinite(scale)) return scale;
  double s = 0.0;
  for (double x : v.values()) {
    const double y = x / scale;
    s += y * y;
  }
  return scale * std::sqrt(s);
}

inline double squared_distance(std::span<const double> a, std::span<const double> b) {
  double s = 0.0;
  for (std::size_t i = 0; i < a.size(); ++i) {
    const double d = a[i] - b[i];
    s += d * d;
  }
  return s;
}

struct CosineResult {
  double value = 0.0;
  bool zero_input = false;  // one side had zero norm; value forced to 0
};

inline CosineResult cosine_sim_checked(const ParamVector& a, const ParamVector& b) {
  a.check_same_size(b);
  if (a.empty()) throw std::invalid_argument("cosine_sim: empty vector");
  const double na = l2_norm(a);
  const double nb = l2_norm(b);
  if (na == 0.0 || nb == 0.0) return {0.0, true};
  double c = 0.0;
  for (std::size_t i = 0; i < a.size(); ++i) c += (a[i] / na) * (b[i] / nb);
  return {std::clamp(c, -1.0, 1.0), false};
}

inline double cosine_sim(const ParamVector& a, const ParamVector& b) {
  return cosine_sim_checked(a, b).value;
}

/// Element-wise sum in a pinned order.
///
/// `ids` gives the owner of each vector; the sum is always taken in
/// ascending-id order regardless of input order, so the result is
/// bit-identical however the inputs were collected.
inline ParamVector fixed_order_sum(std::span<const ParamVector* const> vs,
                                   std::span<const int> ids = {}) {
  if (vs.empty()) throw std::invalid_argument("fixed_order_sum: empty input");
  if (!ids.empty() && ids.size() != vs.size())
    throw std::invalid_argument("fixed_order_sum: ids/vectors length mismatch");
  std::vector<std::size_t> order(vs.size());
  std::iota(order.begin(), order.end(), std::size_t{0});
  if (!ids.empty())
    std::stable_sort(order.begin(), order.end(),
                     [&](std::size_t x, std::size_t y) { return ids[x] < ids[y]; });
  ParamVector out = ParamVector::zeros_like(*vs[order.front()]);
  for (std::size_t k : order) out += *vs[k];
  return out;
}

inline ParamVector fixed_order_sum(const std::vector<ParamVector>& vs) {
  std::vector<const ParamVector*> ptrs;
  for (const auto& v : vs) ptrs.push_back(&v);
  return fixed_order_sum(std::span<const ParamVector* const>(ptrs));
}

// ---------------------------------------------------------------------------
// Deterministic random streams

enum class StreamTag : std::uint32_t {
  init = 0,
  shuffle = 1,
  noise = 2,
  dirichlet = 3,
  selection = 4,
  data = 5,
  ldp = 6,
  trigger = 7,
  truncate = 8,
  poison = 9,
};

struct SeedSpec {
  std::uint64_t master_seed = 0;
  std::uint64_t round = 0;
  std::uint64_t client_id = 0;
  StreamTag stream_tag = StreamTag::init;
};

/// splitmix64 finalizer.
constexpr std::uint64_t mix64(std::uint64_t z) {
  z += 0x9e3779b97f4a7c15ULL;
  z = (z ^ (z >> 30)) * 0xbf58476d1ce4e5b9ULL;
  z = (z ^ (z >> 27)) * 0x94d049bb133111ebULL;
  return z ^ (z >> 31);
}

/// seed = mix(mix(mix(mix(master) ^ round) ^ client) ^ tag); each step is a
/// full-avalanche splitmix64 finalization.
constexpr std::uint64_t derive_seed(const SeedSpec& s) {
  std::uint64_t h = mix64(s.master_seed);
  h = mix64(h ^ s.round);
  h = mix64(h ^ (s.client_id + 0x632be59bd9b4e019ULL));
  h = mix64(h ^ (static_cast<std::uint64_t>(s.stream_tag) + 0x8cb92ba72f3d8dd7ULL));
  return h;
}

/// Portable random stream. Only the engine (mt19937_64) comes from the
/// standard library; distributions are implemented here because the
/// standard ones are not specified bit-for-bit across implementations.
class Rng {
 public:
  explicit Rng(std::uint64_t seed) : engine_(seed) {}

  std::uint64_t next_u64() { return engine_(); }

  /// Uniform in [0, 1) with 53 random bits.
  double uniform() { return static_cast<double>(engine_() >> 11) * 0x1.0p-53; }

  double uniform(double lo, double hi) { return lo + (hi - lo) * uniform(); }

  /// Uniform integer in [0, n), unbiased.
  std::uint64_t below(std::uint64_t n) {
    if (n == 0) throw std::invalid_argument("Rng::below: n == 0");
    const std::uint64_t limit = ~std::uint64_t{0} - (~std::uint64_t{0} % n);
    std::uint64_t x;
    do {
      x = engine_();
    } while (x >= limit);
    return x % n;
  }

  /// Standard normal via Box-Muller; the spare value is cached.
  double normal() {
    if (has_spare_) {
      has_spare_ = false;
      return spare_;
    }
    double u1;
    do {
      u1 = uniform();
    } while (u1 <= 0.0);
    const double u2 = uniform();
    const double r = std::sqrt(-2.0 * std::log(u1));
    const double t = 2.0 * std::numbers::pi * u2;
    spare_ = r * std::sin(t);
    has_spare_ = true;
    return r * std::cos(t);
  }

  double normal(double mean, double stddev) { return mean + stddev * normal(); }

  /// log of a Gamma(shape, 1) draw (Marsaglia-Tsang). Working in log space
  /// keeps tiny shapes from underflowing to exactly zero.
  double log_gamma_draw(double shape) {
    if (shape <= 0.0) throw std::invalid_argument("gamma: shape must be positive");
    if (shape < 1.0) {
      // G(a) = G(a + 1) * U^(1/a)
      double u;
      do {
        u = uniform();
      } while (u <= 0.0);
      return log_gamma_draw(shape + 1.0) + std::log(u) / shape;
    }
    const double d = shape - 1.0 / 3.0;
    const double c = 1.0 / std::sqrt(9.0 * d);
    for (;;) {
      double x, v;
      do {
        x = normal();
        v = 1.0 + c * x;
      } while (v <= 0.0);
      v = v * v * v;
      const double u = uniform();
      if (u < 1.0 - 0.0331 * x * x * x * x) return std::log(d * v);
      if (u > 0.0 && std::log(u) < 0.5 * x * x + d * (1.0 - v + std::log(v)))
        return std::log(d * v);
    }
  }

  /// Symmetric Dirichlet(alpha) over k categories.
  std::vector<double> dirichlet(std::size_t k, double alpha) {
    std::vector<double> logs(k);
    for (auto& l : logs) l = log_gamma_draw(alpha);
    const double m = *std::max_element(logs.begin(), logs.end());
    double s = 0.0;
    for (auto& l : logs) {
      l = std::exp(l - m);
      s += l;
    }
    for (auto& l : logs) l /= s;
    return logs;
  }

  template <typename T>
  void shuffle(std::vector<T>& v) {
    for (std::size_t i = v.size(); i > 1; --i) {
      const std::size_t j = below(i);
      std::swap(v[i - 1], v[j]);
    }
  }

  /// k distinct elements of `pool` in draw order (partial Fisher-Yates).
  std::vector<int> sample_without_replacement(std::vector<int> pool, std::size_t k) {
    if (k > pool.size()) throw std::invalid_argument("sample_without_replacement: k > pool");
    for (std::size_t i = 0; i < k; ++i) {
      const std::size_t j = i + below(pool.size() - i);
      std::swap(pool[i], pool[j]);
    }
    pool.resize(k);
    return pool;
  }

 private:
  std::mt19937_64 engine_;
  double spare_ = 0.0;
  bool has_spare_ = false;
};

inline Rng derive_rng(const SeedSpec& s) { return Rng(derive_seed(s)); }

}  // namespace fedbench
