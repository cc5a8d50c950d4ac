#pragma once

// Model checkpoints: round_<n>.bin holds the flat parameters as
// little-endian float32; round_<n>.layout is a text description
// ("<name> <d0>x<d1>..." per tensor). Engine state needed for an exact
// resume (including the float64 global model) goes to a separate sidecar.

#include <bit>
#include <cstring>
#include <filesystem>
#include <fstream>
#include <sstream>
#include <stdexcept>
#include <string>
#include <vector>

#include "fedbench/params.hpp"

namespace fedbench {

class CheckpointError : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

namespace detail {

inline void write_f64_le(std::ostream& out, std::span<const double> v) {
  std::vector<unsigned char> buf(v.size() * 8);
  for (std::size_t i = 0; i < v.size(); ++i) {
    const auto bits = std::bit_cast<std::uint64_t>(v[i]);
    for (int b = 0; b < 8; ++b) buf[i * 8 + b] = static_cast<unsigned char>(bits >> (8 * b));
  }
  out.write(reinterpret_cast<const char*>(buf.data()), static_cast<std::streamsize>(buf.size()));
}

inline std::vector<double> read_f64_le(const std::filesystem::path& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw CheckpointError("cannot open checkpoint '" + path.string() + "'");
  std::vector<unsigned char> buf((std::istreambuf_iterator<char>(in)), std::istreambuf_iterator<char>());
  if (buf.size() % 8 != 0)
    throw CheckpointError("checkpoint '" + path.string() + "' has " + std::to_string(buf.size()) +
                          " bytes, not a multiple of 8");
  std::vector<double> v(buf.size() / 8);
  for (std::size_t i = 0; i < v.size(); ++i) {
    std::uint64_t bits = 0;
    for (int b = 0; b < 8; ++b) bits |= static_cast<std::uint64_t>(buf[i * 8 + b]) << (8 * b);
    v[i] = std::bit_cast<double>(bits);
  }
  return v;
}

inline void write_f32_le(std::ostream& out, std::span<const double> v) {
  std::vector<unsigned char> buf(v.size() * 4);
  for (std::size_t i = 0; i < v.size(); ++i) {
    const auto bits = std::bit_cast<std::uint32_t>(static_cast<float>(v[i]));
    for (int b = 0; b < 4; ++b) buf[i * 4 + b] = static_cast<unsigned char>(bits >> (8 * b));
  }
  out.write(reinterpret_cast<const char*>(buf.data()), static_cast<std::streamsize>(buf.size()));
}

inline std::vector<double> read_f32_le(const std::filesystem::path& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw CheckpointError("cannot open checkpoint '" + path.string() + "'");
  std::vector<unsigned char> buf((std::istreambuf_iterator<char>(in)), std::istreambuf_iterator<char>());
  if (buf.size() % 4 != 0)
    throw CheckpointError("checkpoint '" + path.string() + "' has " + std::to_string(buf.size()) +
                          " bytes, not a multiple of 4");
  std::vector<double> v(buf.size() / 4);
  for (std::size_t i = 0; i < v.size(); ++i) {
    std::uint32_t bits = 0;
    for (int b = 0; b < 4; ++b) bits |= static_cast<std::uint32_t>(buf[i * 4 + b]) << (8 * b);
    v[i] = static_cast<double>(std::bit_cast<float>(bits));
  }
  return v;
}

}  // namespace detail

inline std::string layout_text(const Layout& layout) {
  std::ostringstream out;
  out << "dtype float32-le\n";
  for (const auto& e : layout) {
    out << e.name << ' ';
    for (std::size_t i = 0; i < e.shape.size(); ++i) out << (i ? "x" : "") << e.shape[i];
    out << '\n';
  }
  return out.str();
}

inline void save_params(const std::filesystem::path& bin_path, const ParamVector& p) {
  {
    std::ofstream out(bin_path, std::ios::binary | std::ios::trunc);
    if (!out) throw CheckpointError("cannot write checkpoint '" + bin_path.string() + "'");
    detail::write_f32_le(out, p.values());
  }
  auto layout_path = bin_path;
  layout_path.replace_extension(".layout");
  std::ofstream out(layout_path, std::ios::trunc);
  out << layout_text(p.layout());
}

/// Loads parameters; when `expected` is non-empty the stored size and, if a
/// .layout file is present, its text must match.
inline ParamVector load_params(const std::filesystem::path& bin_path, const Layout& expected = {}) {
  auto values = detail::read_f32_le(bin_path);
  if (expected.empty()) return ParamVector(std::move(values));
  if (values.size() != layout_size(expected))
    throw CheckpointError("checkpoint '" + bin_path.string() + "' holds " + std::to_string(values.size()) +
                          " values, the model needs " + std::to_string(layout_size(expected)));
  auto layout_path = bin_path;
  layout_path.replace_extension(".layout");
  if (std::filesystem::exists(layout_path)) {
    std::ifstream in(layout_path);
    std::stringstream ss;
    ss << in.rdbuf();
    if (ss.str() != layout_text(expected))
      throw CheckpointError("checkpoint layout '" + layout_path.string() + "' does not match the model");
  }
  return ParamVector(std::move(values), expected);
}

inline std::filesystem::path checkpoint_path(const std::filesystem::path& run_dir, int round) {
  return run_dir / "checkpoints" / ("round_" + std::to_string(round) + ".bin");
}

}  // namespace fedbench
