#pragma once

#include <cmath>
#include <cstdint>
#include <filesystem>
#include <random>
#include <string>
#include <vector>

#include "m2m/core/grid.hpp"
#include "m2m/core/rng.hpp"
#include "m2m/diffusion/diffusion.hpp"

namespace m2m::test {

inline std::string fixture(const std::string& name) { return std::string(M2M_FIXTURES_DIR) + "/" + name; }

inline std::filesystem::path scratch_dir(const std::string& name) {
  auto p = std::filesystem::temp_directory_path() / ("m2m_test_" + name);
  std::filesystem::remove_all(p);
  std::filesystem::create_directories(p);
  return p;
}

inline Pianoroll random_roll(Dims d, double density, std::uint64_t seed) {
  Rng rng = make_rng(seed, 7);
  std::bernoulli_distribution on(density);
  Pianoroll r(d);
  for (auto& c : r.cells()) c = on(rng) ? 1 : 0;
  return r;
}

inline Mixture random_mixture(int t, int p, double density, std::uint64_t seed) {
  Rng rng = make_rng(seed, 8);
  std::bernoulli_distribution on(density);
  Mixture m(t, p);
  for (auto& c : m.cells()) c = on(rng) ? 1 : 0;
  return m;
}

inline RealGrid random_grid(Dims d, std::uint64_t seed) {
  Rng rng = make_rng(seed, 9);
  RealGrid g(d);
  for (double& v : g.values) v = standard_normal(rng);
  return g;
}

/// Always predicts zero noise.
struct ZeroPredictor : diffusion::NoisePredictor {
  std::vector<RealGrid> predict(std::span<const RealGrid> in, int) const override {
    std::vector<RealGrid> out;
    for (const auto& g : in) out.emplace_back(g.dims);
    return out;
  }
};

/// Returns a fixed grid regardless of input.
struct ConstantPredictor : diffusion::NoisePredictor {
  RealGrid value;
  explicit ConstantPredictor(RealGrid v) : value(std::move(v)) {}
  std::vector<RealGrid> predict(std::span<const RealGrid> in, int) const override {
    return std::vector<RealGrid>(in.size(), value);
  }
};

/// Knows the clean signal, so it can report the exact noise present in y_t.
struct TrueNoisePredictor : diffusion::NoisePredictor {
  RealGrid y0;  // already masked
  const diffusion::NoiseSchedule* sched;
  TrueNoisePredictor(RealGrid clean, const diffusion::NoiseSchedule& s) : y0(std::move(clean)), sched(&s) {}
  std::vector<RealGrid> predict(std::span<const RealGrid> in, int t) const override {
    const double ab = sched->alpha_bar[static_cast<std::size_t>(t)];
    std::vector<RealGrid> out;
    for (const auto& g : in) {
      RealGrid e(g.dims);
      for (std::size_t k = 0; k < g.values.size(); ++k) {
        e.values[k] = (g.values[k] - std::sqrt(ab) * y0.values[k]) / std::sqrt(1.0 - ab);
      }
      out.push_back(std::move(e));
    }
    return out;
  }
};

/// Per-cell probability sigmoid(k * y1), trained flag configurable.
struct SigmoidDecoder : diffusion::ProbabilityDecoder {
  double gain = 4.0;
  bool is_trained = true;
  std::vector<RealGrid> probabilities(std::span<const RealGrid> y1) const override {
    std::vector<RealGrid> out;
    for (const auto& g : y1) {
      RealGrid p(g.dims);
      for (std::size_t k = 0; k < g.values.size(); ++k) p.values[k] = 1.0 / (1.0 + std::exp(-gain * g.values[k]));
      out.push_back(std::move(p));
    }
    return out;
  }
  bool trained() const override { return is_trained; }
};

}  // namespace m2m::test
