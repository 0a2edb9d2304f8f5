#pragma once

// Dense feature encoder: per block affine -> batch norm -> (FT) -> ReLU.
//
// Parameters live in a ParamStore as enc.block{i}.{weight,bias,bn_scale,bn_shift}
// so that the same function evaluates either the persistent parameters or a
// graph-attached, one-step-updated copy of them.

#include <cmath>
#include <cstddef>
#include <string>
#include <vector>

#include "featwise/errors.hpp"
#include "featwise/ft_layer.hpp"
#include "featwise/params.hpp"
#include "featwise/rng.hpp"
#include "featwise/tensor.hpp"

namespace featwise {

inline constexpr double kBatchNormEps = 1e-5;

enum class EncodeMode { train, eval };

struct EncoderConfig {
  std::size_t input_dim = 0;
  std::vector<std::size_t> widths;
  std::vector<bool> ft_blocks;  // one flag per block

  std::size_t block_count() const { return widths.size(); }
  std::size_t output_dim() const { return widths.empty() ? input_dim : widths.back(); }

  void validate() const {
    if (input_dim == 0) throw ConfigError("encoder: input_dim must be positive");
    if (widths.empty()) throw ConfigError("encoder: at least one block is required");
    for (std::size_t w : widths) {
      if (w == 0) throw ConfigError("encoder: block widths must be positive");
    }
    if (ft_blocks.size() != widths.size()) {
      throw ConfigError("encoder: ft_blocks has " + std::to_string(ft_blocks.size()) + " flags for " +
                        std::to_string(widths.size()) + " blocks");
    }
  }
};

// Config with FT flagged on every block.
inline EncoderConfig make_encoder_config(std::size_t input_dim, std::vector<std::size_t> widths) {
  EncoderConfig cfg{input_dim, std::move(widths), {}};
  cfg.ft_blocks.assign(cfg.widths.size(), true);
  return cfg;
}

inline std::string enc_name(std::size_t block, const char* field) {
  return "enc.block" + std::to_string(block) + "." + field;
}

inline ParamStore build_encoder(const EncoderConfig& cfg, Rng& rng) {
  cfg.validate();
  ParamStore params;
  std::size_t fan_in = cfg.input_dim;
  for (std::size_t i = 0; i < cfg.block_count(); ++i) {
    const std::size_t fan_out = cfg.widths[i];
    const double limit = std::sqrt(6.0 / static_cast<double>(fan_in + fan_out));
    std::vector<double> w(fan_in * fan_out);
    for (double& v : w) v = rng.uniform(-limit, limit);
    params.add(enc_name(i, "weight"), Tensor::matrix(fan_in, fan_out, std::move(w)));
    params.add(enc_name(i, "bias"), Tensor::zeros({fan_out}));
    params.add(enc_name(i, "bn_scale"), Tensor::full({fan_out}, 1.0));
    params.add(enc_name(i, "bn_shift"), Tensor::zeros({fan_out}));
    fan_in = fan_out;
  }
  return params;
}

// Standardizes each column with the statistics of the current batch.
inline Tensor batch_norm(const Tensor& x, const Tensor& scale_param, const Tensor& shift_param) {
  if (x.rank() != 2) throw DimensionError("batch_norm: expected (B, C), got " + shape_str(x.shape()));
  const std::size_t rows = x.dim(0), cols = x.dim(1);
  if (rows < 2) throw ContractError("batch_norm: batch size must be at least 2");
  if (scale_param.numel() != cols || shift_param.numel() != cols) {
    throw DimensionError("batch_norm: scale/shift width does not match " + std::to_string(cols) + " channels");
  }
  const double inv_rows = 1.0 / static_cast<double>(rows);
  const Tensor mu = scale(sum_to(x, {1, cols}), inv_rows);
  const Tensor centered = x - mu;
  const Tensor var = scale(sum_to(square(centered), {1, cols}), inv_rows);
  const Tensor normalized = centered / sqrt(var + kBatchNormEps);
  return normalized * scale_param + shift_param;
}

// Embeds `batch` (B, input_dim). In eval mode, or when `ft` is null, the FT
// layers are bypassed and `rng` is never touched.
inline Tensor encode(const EncoderConfig& cfg, const ParamStore& params, const FtParams* ft, const Tensor& batch,
                     EncodeMode mode, Rng& rng) {
  if (batch.rank() != 2 || batch.dim(1) != cfg.input_dim) {
    throw DimensionError("encode: batch " + shape_str(batch.shape()) + " does not match input width " +
                         std::to_string(cfg.input_dim));
  }
  const bool apply_ft = mode == EncodeMode::train && ft != nullptr;
  Tensor h = batch;
  for (std::size_t i = 0; i < cfg.block_count(); ++i) {
    h = matmul(h, params.get(enc_name(i, "weight"))) + params.get(enc_name(i, "bias"));
    h = batch_norm(h, params.get(enc_name(i, "bn_scale")), params.get(enc_name(i, "bn_shift")));
    if (apply_ft && cfg.ft_blocks[i]) {
      if (i >= ft->layers.size()) throw ConfigError("encode: no FT parameters for block " + std::to_string(i));
      h = modulate(h, sample_modulation(ft->layers[i].theta_gamma, ft->layers[i].theta_beta, rng));
    }
    h = relu(h);
  }
  return h;
}

}  // namespace featwise
