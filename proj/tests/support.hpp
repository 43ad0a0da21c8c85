#pragma once

#include <filesystem>
#include <random>
#include <string>

#include "xlt/xlt.hpp"

namespace xlt::testing {

inline Tensor random_tensor(Shape shape, Rng& rng, double lo = -1.0, double hi = 1.0) {
  Tensor t(std::move(shape));
  std::uniform_real_distribution<double> u(lo, hi);
  for (auto& v : t.data) v = u(rng);
  return t;
}

/// Scalar read-out sum(x * R) through a fixed random projection, so every
/// output coordinate carries a distinct weight in the checked gradient.
inline Var project(Tape& tape, Var x, std::uint64_t seed) {
  Rng rng(seed);
  const auto& v = x.value();
  Tensor r = random_tensor({v.cols(), 1}, rng);
  return sum(matmul(x, tape.constant(std::move(r))));
}

/// Fresh scratch directory under the system temp dir.
inline std::filesystem::path temp_dir(const std::string& name) {
  auto dir = std::filesystem::temp_directory_path() / ("xlt-test-" + name);
  std::filesystem::remove_all(dir);
  std::filesystem::create_directories(dir);
  return dir;
}

inline EncoderConfig tiny_config(std::size_t vocab_size) {
  EncoderConfig cfg;
  cfg.num_layers = 2;
  cfg.hidden_size = 8;
  cfg.num_heads = 2;
  cfg.ff_size = 16;
  cfg.max_len = 12;
  cfg.vocab_size = vocab_size;
  cfg.dropout_rate = 0.1;
  return cfg;
}

}  // namespace xlt::testing
