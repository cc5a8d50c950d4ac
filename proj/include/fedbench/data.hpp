#pragma once

// Datasets, IDX/CSV ingestion, the synthetic generator, and client partitioning.

#include <algorithm>
#include <array>
#include <cmath>
#include <cstdint>
#include <fstream>
#include <map>
#include <optional>
#include <sstream>
#include <stdexcept>
#include <string>
#include <vector>

#include "fedbench/params.hpp"

namespace fedbench {

struct ImageShape {
  std::size_t height = 1;
  std::size_t width = 1;
  std::size_t channels = 1;

  std::size_t size() const { return height * width * channels; }
  std::size_t index(std::size_t row, std::size_t col, std::size_t ch) const {
    return (row * width + col) * channels + ch;
  }
  bool operator==(const ImageShape&) const = default;
};

/// Samples in raw input space: every feature lies in [0, 1].
struct Dataset {
  std::vector<float> inputs;  // row-major, size() * num_features
  std::vector<int> labels;
  std::size_t num_features = 0;
  int num_classes = 0;
  std::optional<ImageShape> image_shape;

  std::size_t size() const { return labels.size(); }
  bool empty() const { return labels.empty(); }
  std::span<const float> sample(std::size_t i) const {
    return {inputs.data() + i * num_features, num_features};
  }

  /// Copy of the rows named by `indices`, in that order.
  Dataset subset(std::span<const int> indices) const {
    Dataset out;
    out.num_features = num_features;
    out.num_classes = num_classes;
    out.image_shape = image_shape;
    out.inputs.reserve(indices.size() * num_features);
    out.labels.reserve(indices.size());
    for (int i : indices) {
      auto s = sample(static_cast<std::size_t>(i));
      out.inputs.insert(out.inputs.end(), s.begin(), s.end());
      out.labels.push_back(labels[static_cast<std::size_t>(i)]);
    }
    return out;
  }

  std::vector<std::size_t> class_counts() const {
    std::vector<std::size_t> c(static_cast<std::size_t>(std::max(num_classes, 0)), 0);
    for (int l : labels) ++c[static_cast<std::size_t>(l)];
    return c;
  }

  /// Throws if any value leaves [0, 1] or any label leaves [0, C).
  void validate() const {
    if (inputs.size() != labels.size() * num_features)
      throw std::invalid_argument("Dataset: inputs/labels size mismatch");
    for (float v : inputs)
      if (!(v >= 0.0f && v <= 1.0f)) throw std::invalid_argument("Dataset: input outside [0,1]");
    for (int l : labels)
      if (l < 0 || l >= num_classes) throw std::invalid_argument("Dataset: label out of range");
  }
};

// ---------------------------------------------------------------------------
// IDX

enum class IdxErrorKind { io, bad_magic, truncated, count_mismatch, bad_label };

class IdxError : public std::runtime_error {
 public:
  IdxError(IdxErrorKind kind, const std::string& what) : std::runtime_error(what), kind_(kind) {}
  IdxErrorKind kind() const { return kind_; }

 private:
  IdxErrorKind kind_;
};

namespace detail {

inline std::vector<unsigned char> read_file(const std::string& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw IdxError(IdxErrorKind::io, "cannot open '" + path + "'");
  return {std::istreambuf_iterator<char>(in), std::istreambuf_iterator<char>()};
}

inline std::uint32_t read_be32(const std::vector<unsigned char>& buf, std::size_t off) {
  return (std::uint32_t{buf[off]} << 24) | (std::uint32_t{buf[off + 1]} << 16) |
         (std::uint32_t{buf[off + 2]} << 8) | std::uint32_t{buf[off + 3]};
}

inline void write_be32(std::ostream& out, std::uint32_t v) {
  const char b[4] = {static_cast<char>(v >> 24), static_cast<char>(v >> 16),
                     static_cast<char>(v >> 8), static_cast<char>(v)};
  out.write(b, 4);
}

}  // namespace detail

inline constexpr std::uint32_t kIdxImagesMagic = 2051;
inline constexpr std::uint32_t kIdxLabelsMagic = 2049;

inline Dataset load_mnist_idx(const std::string& images_path, const std::string& labels_path,
                              int num_classes = 10) {
  const auto img = detail::read_file(images_path);
  const auto lab = detail::read_file(labels_path);

  if (img.size() < 16)
    throw IdxError(IdxErrorKind::truncated, images_path + ": truncated header (expected 16 bytes, got " +
                                                std::to_string(img.size()) + ")");
  if (const auto m = detail::read_be32(img, 0); m != kIdxImagesMagic)
    throw IdxError(IdxErrorKind::bad_magic, images_path + ": bad magic number " + std::to_string(m) +
                                                " (expected 2051)");
  if (lab.size() < 8)
    throw IdxError(IdxErrorKind::truncated, labels_path + ": truncated header (expected 8 bytes, got " +
                                                std::to_string(lab.size()) + ")");
  if (const auto m = detail::read_be32(lab, 0); m != kIdxLabelsMagic)
    throw IdxError(IdxErrorKind::bad_magic, labels_path + ": bad magic number " + std::to_string(m) +
                                                " (expected 2049)");

  const std::size_t n = detail::read_be32(img, 4);
  const std::size_t rows = detail::read_be32(img, 8);
  const std::size_t cols = detail::read_be32(img, 12);
  const std::size_t n_labels = detail::read_be32(lab, 4);

  const std::size_t img_expected = 16 + n * rows * cols;
  if (img.size() < img_expected)
    throw IdxError(IdxErrorKind::truncated, images_path + ": truncated, expected " +
                                                std::to_string(img_expected) + " bytes, got " +
                                                std::to_string(img.size()));
  if (lab.size() < 8 + n_labels)
    throw IdxError(IdxErrorKind::truncated, labels_path + ": truncated, expected " +
                                                std::to_string(8 + n_labels) + " bytes, got " +
                                                std::to_string(lab.size()));
  if (n != n_labels)
    throw IdxError(IdxErrorKind::count_mismatch, "image count " + std::to_string(n) +
                                                     " does not match label count " +
                                                     std::to_string(n_labels));

  Dataset ds;
  ds.num_features = rows * cols;
  ds.num_classes = num_classes;
  ds.image_shape = ImageShape{rows, cols, 1};
  ds.inputs.resize(n * rows * cols);
  for (std::size_t i = 0; i < ds.inputs.size(); ++i)
    ds.inputs[i] = static_cast<float>(img[16 + i]) / 255.0f;
  ds.labels.resize(n);
  for (std::size_t i = 0; i < n; ++i) {
    const int l = lab[8 + i];
    if (l >= num_classes)
      throw IdxError(IdxErrorKind::bad_label, labels_path + ": label " + std::to_string(l) +
                                                  " at index " + std::to_string(i) + " out of range");
    ds.labels[i] = l;
  }
  return ds;
}

/// Writes `ds` as an IDX pair; values are quantized to bytes (round(v*255)).
inline void save_mnist_idx(const Dataset& ds, const std::string& images_path,
                           const std::string& labels_path) {
  const ImageShape shape = ds.image_shape.value_or(ImageShape{1, ds.num_features, 1});
  std::ofstream img(images_path, std::ios::binary);
  std::ofstream lab(labels_path, std::ios::binary);
  if (!img || !lab) throw IdxError(IdxErrorKind::io, "cannot write IDX files");
  detail::write_be32(img, kIdxImagesMagic);
  detail::write_be32(img, static_cast<std::uint32_t>(ds.size()));
  detail::write_be32(img, static_cast<std::uint32_t>(shape.height));
  detail::write_be32(img, static_cast<std::uint32_t>(shape.width * shape.channels));
  for (float v : ds.inputs) img.put(static_cast<char>(std::lround(std::clamp(v, 0.0f, 1.0f) * 255.0f)));
  detail::write_be32(lab, kIdxLabelsMagic);
  detail::write_be32(lab, static_cast<std::uint32_t>(ds.size()));
  for (int l : ds.labels) lab.put(static_cast<char>(l));
}

/// CSV with header `label,f0,...,f{D-1}`; features must lie in [0,1].
inline Dataset load_csv_dataset(const std::string& path, int num_classes,
                                std::optional<ImageShape> shape = std::nullopt) {
  std::ifstream in(path);
  if (!in) throw std::runtime_error("cannot open '" + path + "'");
  std::string line;
  if (!std::getline(in, line)) throw std::runtime_error(path + ": empty CSV");
  const auto cols = static_cast<std::size_t>(std::count(line.begin(), line.end(), ',') + 1);
  if (line.rfind("label", 0) != 0 || cols < 2)
    throw std::runtime_error(path + ": header must be 'label,f0,...'");
  Dataset ds;
  ds.num_features = cols - 1;
  ds.num_classes = num_classes;
  ds.image_shape = shape;
  std::size_t lineno = 1;
  while (std::getline(in, line)) {
    ++lineno;
    if (line.empty()) continue;
    std::stringstream ss(line);
    std::string cell;
    std::size_t c = 0;
    while (std::getline(ss, cell, ',')) {
      if (c == 0) {
        ds.labels.push_back(std::stoi(cell));
      } else {
        const float v = std::stof(cell);
        if (!(v >= 0.0f && v <= 1.0f))
          throw std::runtime_error(path + ":" + std::to_string(lineno) + ": feature outside [0,1]");
        ds.inputs.push_back(v);
      }
      ++c;
    }
    if (c != cols) throw std::runtime_error(path + ":" + std::to_string(lineno) + ": wrong column count");
  }
  return ds;
}

// ---------------------------------------------------------------------------
// Synthetic clusters

struct SyntheticSpec {
  std::size_t n_samples = 1000;
  std::size_t n_features = 20;
  int n_classes = 4;
  double cluster_spread = 0.05;
  std::uint64_t seed = 0;
  std::optional<ImageShape> image_shape;  // defaults to a square if n_features is one
};

/// Class centers: each class gets a distinct binary code c in {0,1}^D and
/// sits at 0.25 + 0.5 c, so any two centers are at least 0.5 apart.
inline std::vector<std::vector<double>> synthetic_centers(std::size_t n_features, int n_classes,
                                                          std::uint64_t seed) {
  Rng rng(derive_seed({seed, 0, 0, StreamTag::data}));
  const std::size_t min_hamming = std::max<std::size_t>(1, std::min<std::size_t>(3, n_features / 4));
  std::vector<std::vector<int>> codes;
  for (int attempts = 0; codes.size() < static_cast<std::size_t>(n_classes); ++attempts) {
    std::vector<int> code(n_features);
    for (auto& b : code) b = static_cast<int>(rng.below(2));
    const bool relax = attempts > 10000;
    bool ok = true;
    for (const auto& other : codes) {
      std::size_t h = 0;
      for (std::size_t j = 0; j < n_features; ++j) h += code[j] != other[j];
      if (h < (relax ? 1 : min_hamming)) ok = false;
    }
    if (ok) codes.push_back(std::move(code));
    if (attempts > 100000) throw std::invalid_argument("gen_synthetic: too many classes for feature count");
  }
  std::vector<std::vector<double>> centers;
  for (const auto& code : codes) {
    std::vector<double> c(n_features);
    for (std::size_t j = 0; j < n_features; ++j) c[j] = 0.25 + 0.5 * code[j];
    centers.push_back(std::move(c));
  }
  return centers;
}

inline std::optional<ImageShape> default_image_shape(std::size_t n_features) {
  const auto side = static_cast<std::size_t>(std::llround(std::sqrt(static_cast<double>(n_features))));
  if (side * side == n_features) return ImageShape{side, side, 1};
  return ImageShape{1, n_features, 1};
}

/// Balanced Gaussian clusters; sample i belongs to class (i mod C) before a
/// seeded shuffle of the sample order. `stream` separates train and test draws.
inline Dataset gen_synthetic(const SyntheticSpec& spec, std::uint64_t stream = 0) {
  if (spec.n_classes < 2) throw std::invalid_argument("gen_synthetic: n_classes must be >= 2");
  if (spec.n_samples == 0 || spec.n_features == 0)
    throw std::invalid_argument("gen_synthetic: n_samples and n_features must be positive");
  if (spec.cluster_spread < 0.0) throw std::invalid_argument("gen_synthetic: negative spread");
  if (spec.image_shape && spec.image_shape->size() != spec.n_features)
    throw std::invalid_argument("gen_synthetic: image_shape does not match n_features");

  const auto centers = synthetic_centers(spec.n_features, spec.n_classes, spec.seed);
  Rng rng(derive_seed({spec.seed, stream, 1, StreamTag::data}));
  std::vector<int> order(spec.n_samples);
  for (std::size_t i = 0; i < spec.n_samples; ++i) order[i] = static_cast<int>(i % spec.n_classes);
  rng.shuffle(order);

  Dataset ds;
  ds.num_features = spec.n_features;
  ds.num_classes = spec.n_classes;
  ds.image_shape = spec.image_shape ? spec.image_shape : default_image_shape(spec.n_features);
  ds.labels = order;
  ds.inputs.resize(spec.n_samples * spec.n_features);
  for (std::size_t i = 0; i < spec.n_samples; ++i) {
    const auto& c = centers[static_cast<std::size_t>(order[i])];
    for (std::size_t j = 0; j < spec.n_features; ++j) {
      const double v = spec.cluster_spread == 0.0 ? c[j] : c[j] + spec.cluster_spread * rng.normal();
      ds.inputs[i * spec.n_features + j] = static_cast<float>(std::clamp(v, 0.0, 1.0));
    }
  }
  return ds;
}

/// Out-of-distribution pool for edge-case attacks on synthetic data: one
/// cluster at the cube center (equidistant from every class code) with three
/// times the class spread. Labels are set to `target_class`.
inline Dataset gen_synthetic_edge_pool(const SyntheticSpec& spec, std::size_t n, int target_class,
                                       std::uint64_t stream = 7) {
  Rng rng(derive_seed({spec.seed, stream, 2, StreamTag::data}));
  const double spread = 3.0 * std::max(spec.cluster_spread, 0.01);
  Dataset ds;
  ds.num_features = spec.n_features;
  ds.num_classes = spec.n_classes;
  ds.image_shape = spec.image_shape ? spec.image_shape : default_image_shape(spec.n_features);
  ds.labels.assign(n, target_class);
  ds.inputs.resize(n * spec.n_features);
  for (auto& v : ds.inputs) v = static_cast<float>(std::clamp(0.5 + spread * rng.normal(), 0.0, 1.0));
  return ds;
}

// ---------------------------------------------------------------------------
// Partitioning

struct PartitionMap {
  std::vector<std::vector<int>> assignments;  // per client, sample indices
  std::optional<double> alpha;                // nullopt means uniform

  std::size_t num_clients() const { return assignments.size(); }
  std::size_t total() const {
    std::size_t n = 0;
    for (const auto& a : assignments) n += a.size();
    return n;
  }
  bool operator==(const PartitionMap&) const = default;
};

namespace detail {

inline std::vector<std::vector<int>> indices_by_class(const Dataset& ds) {
  std::vector<std::vector<int>> by_class(static_cast<std::size_t>(ds.num_classes));
  for (std::size_t i = 0; i < ds.size(); ++i)
    by_class[static_cast<std::size_t>(ds.labels[i])].push_back(static_cast<int>(i));
  return by_class;
}

/// Largest-remainder apportionment of `total` by `shares`; ties on the
/// remainder go to the lower index.
inline std::vector<std::size_t> largest_remainder(std::span<const double> shares, std::size_t total) {
  const std::size_t k = shares.size();
  std::vector<std::size_t> counts(k);
  std::vector<double> rem(k);
  std::size_t assigned = 0;
  for (std::size_t i = 0; i < k; ++i) {
    const double q = shares[i] * static_cast<double>(total);
    counts[i] = static_cast<std::size_t>(std::floor(q));
    rem[i] = q - std::floor(q);
    assigned += counts[i];
  }
  // Floating error can push the floor sum over the total; trim from the end.
  for (std::size_t i = k; assigned > total && i-- > 0;) {
    const std::size_t take = std::min(counts[i], assigned - total);
    counts[i] -= take;
    assigned -= take;
  }
  std::vector<std::size_t> order(k);
  std::iota(order.begin(), order.end(), std::size_t{0});
  std::stable_sort(order.begin(), order.end(), [&](std::size_t a, std::size_t b) { return rem[a] > rem[b]; });
  for (std::size_t r = 0; assigned < total; r = (r + 1) % k) {
    ++counts[order[r]];
    ++assigned;
  }
  return counts;
}

/// Gives every empty client one sample taken from the currently largest
/// client (ties: lower id).
inline void fill_empty_clients(std::vector<std::vector<int>>& assignments) {
  for (auto& a : assignments) {
    if (!a.empty()) continue;
    auto donor = std::max_element(assignments.begin(), assignments.end(),
                                  [](const auto& x, const auto& y) { return x.size() < y.size(); });
    if (donor->size() <= 1) throw std::invalid_argument("partition: more clients than samples");
    a.push_back(donor->back());
    donor->pop_back();
  }
}

}  // namespace detail

inline PartitionMap partition_dirichlet(const Dataset& ds, std::size_t n_clients, double alpha,
                                        std::uint64_t seed, bool allow_empty = false) {
  if (n_clients < 1) throw std::invalid_argument("partition_dirichlet: n_clients must be >= 1");
  if (!(alpha > 0.0)) throw std::invalid_argument("partition_dirichlet: alpha must be > 0");
  PartitionMap pm;
  pm.alpha = alpha;
  pm.assignments.resize(n_clients);
  auto by_class = detail::indices_by_class(ds);
  for (std::size_t c = 0; c < by_class.size(); ++c) {
    Rng rng(derive_seed({seed, c, 0, StreamTag::dirichlet}));
    auto& idx = by_class[c];
    rng.shuffle(idx);
    const auto shares = rng.dirichlet(n_clients, alpha);
    const auto counts = detail::largest_remainder(shares, idx.size());
    std::size_t off = 0;
    for (std::size_t k = 0; k < n_clients; ++k) {
      pm.assignments[k].insert(pm.assignments[k].end(), idx.begin() + off, idx.begin() + off + counts[k]);
      off += counts[k];
    }
  }
  if (!allow_empty) detail::fill_empty_clients(pm.assignments);
  return pm;
}

inline PartitionMap partition_uniform(const Dataset& ds, std::size_t n_clients, std::uint64_t seed,
                                      bool allow_empty = false) {
  if (n_clients < 1) throw std::invalid_argument("partition_uniform: n_clients must be >= 1");
  PartitionMap pm;
  pm.assignments.resize(n_clients);
  auto by_class = detail::indices_by_class(ds);
  std::size_t start = 0;  // rotate the first receiver so totals stay balanced
  for (std::size_t c = 0; c < by_class.size(); ++c) {
    Rng rng(derive_seed({seed, c, 1, StreamTag::dirichlet}));
    auto& idx = by_class[c];
    rng.shuffle(idx);
    for (std::size_t i = 0; i < idx.size(); ++i) pm.assignments[(start + i) % n_clients].push_back(idx[i]);
    start = (start + idx.size()) % n_clients;
  }
  if (!allow_empty) detail::fill_empty_clients(pm.assignments);
  return pm;
}

/// Caps every client at `max_per_client` samples by dropping a seeded
/// uniform subset; the kept indices retain their original order.
inline PartitionMap truncate_partition(PartitionMap pm, std::size_t max_per_client, std::uint64_t seed) {
  if (max_per_client == 0) return pm;
  for (std::size_t k = 0; k < pm.assignments.size(); ++k) {
    auto& a = pm.assignments[k];
    if (a.size() <= max_per_client) continue;
    Rng rng(derive_seed({seed, 0, k, StreamTag::truncate}));
    std::vector<int> pos(a.size());
    std::iota(pos.begin(), pos.end(), 0);
    auto keep = rng.sample_without_replacement(pos, max_per_client);
    std::sort(keep.begin(), keep.end());
    std::vector<int> kept;
    for (int p : keep) kept.push_back(a[static_cast<std::size_t>(p)]);
    a = std::move(kept);
  }
  return pm;
}

}  // namespace fedbench
