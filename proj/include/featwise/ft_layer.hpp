#pragma once

// Feature-wise transformation layer.
//
// Each insertion point carries two unconstrained vectors theta_gamma and
// theta_beta of the block's channel width. A forward pass draws
//   gamma = 1 + softplus(theta_gamma) * eps_gamma
//   beta  =     softplus(theta_beta)  * eps_beta,   eps ~ N(0, 1)
// and modulates activations per channel: z_hat = gamma * z + beta. Writing the
// draw this way keeps gamma and beta differentiable in theta.

#include <algorithm>
#include <cstddef>
#include <iomanip>
#include <numeric>
#include <span>
#include <sstream>
#include <string>
#include <vector>

#include "featwise/errors.hpp"
#include "featwise/params.hpp"
#include "featwise/rng.hpp"
#include "featwise/tensor.hpp"

namespace featwise {

inline constexpr double kDefaultFtGamma = 0.3;
inline constexpr double kDefaultFtBeta = 0.5;

struct FtLayerParams {
  Tensor theta_gamma;
  Tensor theta_beta;
};

struct FtParams {
  std::vector<FtLayerParams> layers;

  std::size_t layer_count() const { return layers.size(); }
  std::size_t scalar_count() const {
    std::size_t n = 0;
    for (const auto& l : layers) n += l.theta_gamma.numel() + l.theta_beta.numel();
    return n;
  }
};

inline std::string ft_gamma_name(std::size_t block) { return "ft.block" + std::to_string(block) + ".theta_gamma"; }
inline std::string ft_beta_name(std::size_t block) { return "ft.block" + std::to_string(block) + ".theta_beta"; }

inline FtParams init_ft_params(std::span<const std::size_t> channels, double init_gamma = kDefaultFtGamma,
                               double init_beta = kDefaultFtBeta) {
  FtParams ft;
  for (std::size_t c : channels) {
    if (c == 0) throw DimensionError("init_ft_params: channel widths must be positive");
    ft.layers.push_back({Tensor::full({c}, init_gamma), Tensor::full({c}, init_beta)});
  }
  return ft;
}

inline std::size_t ft_param_count(std::span<const std::size_t> channels) {
  return std::accumulate(channels.begin(), channels.end(), std::size_t{0}) * 2;
}

// Stores `ft` under `ft.block{i}.theta_{gamma|beta}`.
inline void register_ft(const FtParams& ft, ParamStore& store) {
  for (std::size_t i = 0; i < ft.layers.size(); ++i) {
    store.add(ft_gamma_name(i), ft.layers[i].theta_gamma);
    store.add(ft_beta_name(i), ft.layers[i].theta_beta);
  }
}

inline bool has_ft(const ParamStore& store) { return store.contains(ft_gamma_name(0)); }

// Reads back the layers written by register_ft; empty when none are present.
inline FtParams ft_from_store(const ParamStore& store) {
  FtParams ft;
  for (std::size_t i = 0; store.contains(ft_gamma_name(i)); ++i) {
    ft.layers.push_back({store.get(ft_gamma_name(i)), store.get(ft_beta_name(i))});
  }
  return ft;
}

struct Modulation {
  Tensor gamma;
  Tensor beta;
  Tensor eps_gamma;
  Tensor eps_beta;
};

// Builds a modulation from explicit standard-normal draws.
inline Modulation modulation_from_noise(const Tensor& theta_gamma, const Tensor& theta_beta, const Tensor& eps_gamma,
                                        const Tensor& eps_beta) {
  if (theta_gamma.shape() != theta_beta.shape() || theta_gamma.rank() != 1) {
    throw DimensionError("sample_modulation: theta shapes " + shape_str(theta_gamma.shape()) + " and " +
                         shape_str(theta_beta.shape()) + " must be equal vectors");
  }
  Modulation m;
  m.eps_gamma = eps_gamma;
  m.eps_beta = eps_beta;
  m.gamma = softplus(theta_gamma) * eps_gamma + 1.0;
  m.beta = softplus(theta_beta) * eps_beta;
  return m;
}

// Draws C gamma noises then C beta noises from `rng`.
inline Modulation sample_modulation(const Tensor& theta_gamma, const Tensor& theta_beta, Rng& rng) {
  const std::size_t c = theta_gamma.numel();
  std::vector<double> eg(c), eb(c);
  for (double& v : eg) v = rng.normal();
  for (double& v : eb) v = rng.normal();
  return modulation_from_noise(theta_gamma, theta_beta, Tensor::vector(std::move(eg)), Tensor::vector(std::move(eb)));
}

inline Tensor modulate(const Tensor& z, const Modulation& m) {
  if (z.rank() != 2 || z.dim(1) != m.gamma.numel()) {
    throw DimensionError("modulate: activations " + shape_str(z.shape()) + " do not match " +
                         std::to_string(m.gamma.numel()) + " channels");
  }
  return z * m.gamma + m.beta;
}

// ---------------------------------------------------------------------------
// Quartile summaries of the learned standard deviations.

// Linear interpolation between order statistics at position (n - 1) * p.
inline double quantile_sorted(std::span<const double> sorted, double p) {
  if (sorted.empty()) throw ContractError("quantile: empty input");
  const double h = (static_cast<double>(sorted.size()) - 1.0) * p;
  const auto lo = static_cast<std::size_t>(std::floor(h));
  const std::size_t hi = std::min(lo + 1, sorted.size() - 1);
  return sorted[lo] + (h - static_cast<double>(lo)) * (sorted[hi] - sorted[lo]);
}

struct Quartiles {
  double q1 = 0.0;
  double median = 0.0;
  double q3 = 0.0;
};

inline Quartiles quartiles_of(std::vector<double> values) {
  std::sort(values.begin(), values.end());
  return {quantile_sorted(values, 0.25), quantile_sorted(values, 0.5), quantile_sorted(values, 0.75)};
}

struct QuartileRow {
  std::size_t layer = 0;
  Quartiles gamma;
  Quartiles beta;
};

inline std::vector<QuartileRow> quartile_stats(const FtParams& ft) {
  std::vector<QuartileRow> rows;
  for (std::size_t i = 0; i < ft.layers.size(); ++i) {
    auto transformed = [](const Tensor& theta) {
      std::vector<double> v;
      v.reserve(theta.numel());
      for (double x : theta.values()) v.push_back(detail::softplus_value(x));
      return v;
    };
    rows.push_back({i, quartiles_of(transformed(ft.layers[i].theta_gamma)),
                    quartiles_of(transformed(ft.layers[i].theta_beta))});
  }
  return rows;
}

inline std::string quartiles_to_csv(const std::vector<QuartileRow>& rows) {
  std::ostringstream os;
  os << "layer,gamma_q1,gamma_med,gamma_q3,beta_q1,beta_med,beta_q3\n";
  os << std::fixed << std::setprecision(6);
  for (const auto& r : rows) {
    os << r.layer << ',' << r.gamma.q1 << ',' << r.gamma.median << ',' << r.gamma.q3 << ',' << r.beta.q1 << ','
       << r.beta.median << ',' << r.beta.q3 << '\n';
  }
  return os.str();
}

}  // namespace featwise
