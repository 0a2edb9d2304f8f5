#pragma once

// Training procedures: supervised encoder pre-training, plain episodic training
// with or without fixed FT layers, and the learning-to-learn loop that tunes the
// FT hyper-parameters through a differentiated inner update.
//
// One learning-to-learn iteration:
//   1. theta' = theta - alpha * grad_theta L(pseudo-seen episode; FT on)
//      recorded with create_graph, so theta' depends on theta_f.
//   2. L_pu = L(pseudo-unseen episode; theta', FT off).
//   3. theta_f -= alpha * grad_theta_f (L_pu + w * sum(theta_f^2)).
// theta' is kept as the new model parameters.

#include <cmath>
#include <cstddef>
#include <cstdint>
#include <functional>
#include <iomanip>
#include <map>
#include <optional>
#include <ostream>
#include <span>
#include <string>
#include <string_view>
#include <vector>

#include "featwise/encoder.hpp"
#include "featwise/errors.hpp"
#include "featwise/ft_layer.hpp"
#include "featwise/metric_heads.hpp"
#include "featwise/params.hpp"
#include "featwise/rng.hpp"
#include "featwise/task.hpp"
#include "featwise/tensor.hpp"

namespace featwise {

enum class TrainMode { baseline, ft, lft };
enum class OptimizerKind { sgd, adam };

inline std::string_view mode_name(TrainMode m) {
  switch (m) {
    case TrainMode::baseline: return "baseline";
    case TrainMode::ft: return "ft";
    case TrainMode::lft: return "lft";
  }
  return "baseline";
}

inline TrainMode parse_mode(std::string_view s) {
  if (s == "baseline") return TrainMode::baseline;
  if (s == "ft") return TrainMode::ft;
  if (s == "lft") return TrainMode::lft;
  throw ConfigError("unknown training mode '" + std::string(s) + "'");
}

inline std::string_view optimizer_name(OptimizerKind k) { return k == OptimizerKind::adam ? "adam" : "sgd"; }

inline OptimizerKind parse_optimizer(std::string_view s) {
  if (s == "sgd") return OptimizerKind::sgd;
  if (s == "adam") return OptimizerKind::adam;
  throw ConfigError("unknown optimizer '" + std::string(s) + "'");
}

struct TrainConfig {
  TrainMode mode = TrainMode::baseline;
  HeadKind head = HeadKind::proto;
  double alpha = 0.001;
  std::size_t iterations = 40000;
  std::size_t inner_steps = 1;
  double ft_reg_weight = 1e-8;
  double ft_init_gamma = kDefaultFtGamma;
  double ft_init_beta = kDefaultFtBeta;
  std::size_t way = 5;
  std::size_t shot = 5;
  std::size_t query = 16;
  std::uint64_t seed = 0;
  OptimizerKind optimizer = OptimizerKind::sgd;
  std::vector<std::size_t> encoder_widths{32, 32};
  std::vector<bool> ft_blocks{true, true};

  void validate() const {
    if (!(alpha > 0.0)) throw ConfigError("alpha must be positive");
    if (inner_steps == 0) throw ConfigError("inner_steps must be at least 1");
    if (ft_reg_weight < 0.0) throw ConfigError("ft_reg_weight must be non-negative");
    if (way < 2) throw ConfigError("way must be at least 2");
    if (shot == 0 || query == 0) throw ConfigError("shot and query must be positive");
    if (encoder_widths.empty()) throw ConfigError("encoder_widths must list at least one block");
    if (ft_blocks.size() != encoder_widths.size()) {
      throw ConfigError("ft_blocks must have one flag per encoder block");
    }
  }

  EncoderConfig encoder_config(std::size_t input_dim) const { return {input_dim, encoder_widths, ft_blocks}; }
};

// Encoder, optional relation head and optional FT hyper-parameters in one store.
struct ModelState {
  EncoderConfig encoder;
  HeadKind head = HeadKind::proto;
  ParamStore params;

  bool has_ft() const { return featwise::has_ft(params); }
  FtParams ft() const { return ft_from_store(params); }

  bool is_ft_name(const std::string& name) const { return name.starts_with("ft."); }

  // Names of the encoder and head tensors (everything except FT).
  std::vector<std::string> model_param_names() const {
    std::vector<std::string> out;
    for (const auto& [name, t] : params)
      if (!is_ft_name(name)) out.push_back(name);
    return out;
  }

  std::vector<std::string> ft_param_names() const { return params.names_with_prefix("ft."); }

  // Copy without FT hyper-parameters.
  ModelState without_ft() const {
    ModelState out{encoder, head, {}};
    for (const auto& [name, t] : params)
      if (!is_ft_name(name)) out.params.add(name, t);
    return out;
  }
};

inline ModelState make_model(const EncoderConfig& enc, HeadKind head, bool with_ft, double ft_gamma, double ft_beta,
                             Rng& rng) {
  enc.validate();
  ModelState m{enc, head, build_encoder(enc, rng)};
  if (head == HeadKind::relation) {
    for (const auto& [name, t] : build_relation_head(enc.output_dim(), enc.output_dim(), rng)) m.params.add(name, t);
  }
  if (with_ft) register_ft(init_ft_params(enc.widths, ft_gamma, ft_beta), m.params);
  return m;
}

inline ModelState make_model(const TrainConfig& cfg, std::size_t input_dim, Rng& rng) {
  cfg.validate();
  return make_model(cfg.encoder_config(input_dim), cfg.head, cfg.mode != TrainMode::baseline, cfg.ft_init_gamma,
                    cfg.ft_init_beta, rng);
}

// Episode loss of `params` (same layout as model.params, possibly graph-attached).
// Support and query are encoded in one pass and share batch statistics and
// the FT draw.
inline Tensor episode_objective(const ModelState& model, const ParamStore& params, const Episode& ep, EncodeMode mode,
                                bool use_ft, Rng& rng) {
  const FtParams ft = use_ft ? ft_from_store(params) : FtParams{};
  if (use_ft && ft.layers.empty()) throw ConfigError("FT requested but the model has no FT parameters");
  const Tensor emb = encode(model.encoder, params, use_ft ? &ft : nullptr, ep.joint_x(), mode, rng);
  const std::size_t s = ep.support_rows();
  const Tensor support = slice(emb, 0, 0, s);
  const Tensor query = slice(emb, 0, s, s + ep.query_rows());
  return episode_loss(head_logits(model.head, support, ep.support_y, query, params), ep.query_y);
}

// Embeddings of an episode with FT removed; `params` default to model.params.
inline Tensor embed_eval(const ModelState& model, const Tensor& batch) {
  NoGradGuard no_grad;
  Rng unused(0);
  return encode(model.encoder, model.params, nullptr, batch, EncodeMode::eval, unused);
}

struct InnerResult {
  ParamStore updated;  // theta - alpha * grad for encoder/head tensors; FT entries unchanged
  ParamStore grads;    // gradient per encoder/head tensor
  double loss = 0.0;
};

// One vanilla gradient step on the episode loss. If `params` are already on a
// graph that graph is reused, otherwise a fresh one is created. With
// `create_graph` the updated tensors stay attached, so they remain
// differentiable with respect to anything upstream (notably theta_f).
inline InnerResult inner_update(const ModelState& model, const ParamStore& params, const Episode& ep, bool ft_enabled,
                                double alpha, bool create_graph, Rng& rng) {
  std::shared_ptr<Graph> graph;
  for (const auto& [name, t] : params) {
    if (t.attached()) {
      graph = t.graph();
      break;
    }
  }
  ParamStore attached;
  if (graph) {
    attached = params;
  } else {
    graph = Graph::create();
    attached = attach_all(params, *graph);
  }

  const Tensor loss = episode_objective(model, attached, ep, EncodeMode::train, ft_enabled, rng);
  if (!std::isfinite(loss.item())) throw NumericError("inner_update: non-finite episode loss");

  std::vector<std::string> names;
  std::vector<Tensor> wrt;
  for (const auto& [name, t] : attached) {
    if (model.is_ft_name(name)) continue;
    names.push_back(name);
    wrt.push_back(t);
  }
  const std::vector<Tensor> grads = backward(loss, wrt, create_graph);

  InnerResult out;
  out.loss = loss.item();
  RecordingGuard recording(create_graph);
  for (const auto& [name, t] : attached) {
    if (model.is_ft_name(name)) out.updated.add(name, create_graph ? t : t.detach());
  }
  for (std::size_t i = 0; i < names.size(); ++i) {
    const Tensor base = create_graph ? wrt[i] : wrt[i].detach();
    out.updated.add(names[i], base - scale(grads[i], alpha));
    out.grads.add(names[i], grads[i].detach());
  }
  return out;
}

inline InnerResult inner_update(const ModelState& model, const Episode& ep, bool ft_enabled, double alpha,
                                bool create_graph, Rng& rng) {
  return inner_update(model, model.params, ep, ft_enabled, alpha, create_graph, rng);
}

// Loss on an episode with FT removed. Deterministic given the episode.
inline Tensor pseudo_unseen_loss(const ModelState& model, const ParamStore& params, const Episode& ep) {
  Rng unused(0);
  return episode_objective(model, params, ep, EncodeMode::eval, false, unused);
}

inline Tensor pseudo_unseen_loss(const ModelState& model, const Episode& ep) {
  return pseudo_unseen_loss(model, model.params, ep);
}

// ---------------------------------------------------------------------------
// Optimizers for persistent parameters

class AdamState {
 public:
  Tensor step(const std::string& name, const Tensor& param, const Tensor& grad, double lr) {
    Slot& s = slots_[name];
    if (s.m.empty()) {
      s.m.assign(param.numel(), 0.0);
      s.v.assign(param.numel(), 0.0);
    }
    ++s.t;
    const double c1 = 1.0 - std::pow(kBeta1, static_cast<double>(s.t));
    const double c2 = 1.0 - std::pow(kBeta2, static_cast<double>(s.t));
    std::vector<double> out(param.numel());
    for (std::size_t i = 0; i < out.size(); ++i) {
      const double g = grad[i];
      s.m[i] = kBeta1 * s.m[i] + (1.0 - kBeta1) * g;
      s.v[i] = kBeta2 * s.v[i] + (1.0 - kBeta2) * g * g;
      out[i] = param[i] - lr * (s.m[i] / c1) / (std::sqrt(s.v[i] / c2) + kEps);
    }
    return Tensor(param.shape(), std::move(out));
  }

 private:
  static constexpr double kBeta1 = 0.9;
  static constexpr double kBeta2 = 0.999;
  static constexpr double kEps = 1e-8;
  struct Slot {
    std::vector<double> m, v;
    std::size_t t = 0;
  };
  std::map<std::string, Slot> slots_;
};

inline Tensor sgd_step(const Tensor& param, const Tensor& grad, double lr) {
  NoGradGuard no_grad;
  return param.detach() - scale(grad.detach(), lr);
}

// ---------------------------------------------------------------------------
// Learning-to-learn step

struct MetaGradient {
  ParamStore updated;     // encoder/head after the inner step(s), attached
  ParamStore ft_grad;     // d(total)/d(theta_f)
  ParamStore inner_grad;  // first inner-step gradient of encoder/head
  double loss_ps = 0.0;
  double loss_pu = 0.0;
  double total = 0.0;     // loss_pu + regularizer
};

inline Tensor ft_l2(const ParamStore& params, const std::vector<std::string>& ft_names) {
  Tensor acc = Tensor::scalar(0.0);
  for (const auto& n : ft_names) acc = acc + sum(square(params.get(n)));
  return acc;
}

// Second-order gradient of the pseudo-unseen objective with respect to theta_f.
inline MetaGradient lft_meta_gradient(const ModelState& model, const Episode& pseudo_seen, const Episode& pseudo_unseen,
                                      const TrainConfig& cfg, Rng& rng) {
  if (!model.has_ft()) throw ConfigError("learning-to-learn step needs FT parameters");
  auto graph = Graph::create();
  const ParamStore attached = attach_all(model.params, *graph);
  const std::vector<std::string> ft_names = model.ft_param_names();

  MetaGradient out;
  ParamStore current = attached;
  for (std::size_t s = 0; s < cfg.inner_steps; ++s) {
    InnerResult r = inner_update(model, current, pseudo_seen, true, cfg.alpha, true, rng);
    if (s == 0) {
      out.loss_ps = r.loss;
      out.inner_grad = std::move(r.grads);
    }
    current = std::move(r.updated);
  }
  const Tensor lpu = pseudo_unseen_loss(model, current, pseudo_unseen);
  const Tensor total = lpu + scale(ft_l2(attached, ft_names), cfg.ft_reg_weight);
  std::vector<Tensor> wrt;
  for (const auto& n : ft_names) wrt.push_back(attached.get(n));
  const std::vector<Tensor> grads = backward(total, wrt, false);
  for (std::size_t i = 0; i < ft_names.size(); ++i) {
    if (!std::all_of(grads[i].values().begin(), grads[i].values().end(), [](double v) { return std::isfinite(v); })) {
      throw NumericError("learning-to-learn step: non-finite meta-gradient");
    }
    out.ft_grad.add(ft_names[i], grads[i]);
  }
  out.loss_pu = lpu.item();
  out.total = total.item();
  out.updated = std::move(current);
  return out;
}

// Value of the pseudo-unseen objective as a function of the model's current
// theta_f, computed with first-order gradients only. Used as the reference
// function for finite-difference checks of the meta-gradient.
inline double lft_objective(const ModelState& model, const Episode& pseudo_seen, const Episode& pseudo_unseen,
                            const TrainConfig& cfg, Rng& rng) {
  ParamStore current = model.params.detached();
  for (std::size_t s = 0; s < cfg.inner_steps; ++s) {
    current = inner_update(model, current, pseudo_seen, true, cfg.alpha, false, rng).updated;
  }
  NoGradGuard no_grad;
  double reg = 0.0;
  for (const auto& n : model.ft_param_names())
    for (double v : model.params.get(n).values()) reg += v * v;
  return pseudo_unseen_loss(model, current, pseudo_unseen).item() + cfg.ft_reg_weight * reg;
}

struct StepLosses {
  double loss_ps = 0.0;
  std::optional<double> loss_pu;
};

// Applies one learning-to-learn iteration to `model` in place.
inline StepLosses lft_train_step(ModelState& model, const Episode& pseudo_seen, const Episode& pseudo_unseen,
                                 const TrainConfig& cfg, Rng& rng, AdamState* adam = nullptr) {
  MetaGradient meta = lft_meta_gradient(model, pseudo_seen, pseudo_unseen, cfg, rng);
  ParamStore next;
  for (const auto& [name, t] : model.params) {
    if (model.is_ft_name(name)) {
      const Tensor& g = meta.ft_grad.get(name);
      next.add(name, adam ? adam->step(name, t, g, cfg.alpha) : sgd_step(t, g, cfg.alpha));
    } else if (adam) {
      next.add(name, adam->step(name, t, meta.inner_grad.get(name), cfg.alpha));
    } else {
      next.add(name, meta.updated.get(name).detach());
    }
  }
  model.params = std::move(next);
  return {meta.loss_ps, meta.loss_pu};
}

// ---------------------------------------------------------------------------
// Training loop

struct TrainLogRow {
  std::size_t iter = 0;
  TrainMode mode = TrainMode::baseline;
  double loss_ps = 0.0;
  std::optional<double> loss_pu;
  std::string pseudo_seen_domain;
  std::string pseudo_unseen_domain;
};

inline void write_log_header(std::ostream& os) { os << "iter,mode,loss_ps,loss_pu\n"; }

inline void write_log_row(std::ostream& os, const TrainLogRow& row) {
  os << row.iter << ',' << mode_name(row.mode) << ',' << std::fixed << std::setprecision(6) << row.loss_ps << ',';
  if (row.loss_pu) os << *row.loss_pu;
  os << '\n';
  os.unsetf(std::ios::floatfield);
}

struct TrainOptions {
  std::ostream* log = nullptr;   // CSV log, flushed every 100 iterations
  std::ostream* warn = nullptr;  // warnings
};

struct TrainResult {
  ModelState model;
  std::vector<TrainLogRow> log;
};

// Runs cfg.iterations iterations of cfg.mode starting from `init`. Every
// random choice of iteration t comes from substreams of (cfg.seed, "train", t).
inline TrainResult train_loop(const TrainConfig& cfg, std::span<const Domain> seen, const ModelState& init,
                              const TrainOptions& opts = {}) {
  cfg.validate();
  if (seen.empty()) throw ConfigError("training needs at least one seen domain");
  if (cfg.mode != TrainMode::baseline && !init.has_ft()) {
    throw ConfigError(std::string("mode ") + std::string(mode_name(cfg.mode)) + " needs FT parameters");
  }
  if (cfg.mode == TrainMode::lft && seen.size() == 1 && opts.warn) {
    *opts.warn << "warning: learning-to-learn with a single seen domain; pseudo-seen and pseudo-unseen episodes "
                  "come from the same domain\n";
  }

  TrainResult result{init, {}};
  ModelState& model = result.model;
  std::optional<AdamState> adam;
  if (cfg.optimizer == OptimizerKind::adam) adam.emplace();
  if (opts.log) write_log_header(*opts.log);

  const Rng root(cfg.seed);
  for (std::size_t t = 0; t < cfg.iterations; ++t) {
    const Rng iter_rng = root.substream("train", t);
    Rng domain_rng = iter_rng.substream("domain");
    Rng episode_rng = iter_rng.substream("episode");
    Rng noise_rng = iter_rng.substream("noise");

    TrainLogRow row;
    row.iter = t;
    row.mode = cfg.mode;
    if (cfg.mode == TrainMode::lft) {
      const std::size_t ps = domain_rng.below(seen.size());
      std::size_t pu = ps;
      if (seen.size() > 1) {
        pu = domain_rng.below(seen.size() - 1);
        if (pu >= ps) ++pu;
      }
      const Episode seen_ep = sample_episode(seen[ps], cfg.way, cfg.shot, cfg.query, episode_rng);
      const Episode unseen_ep = sample_episode(seen[pu], cfg.way, cfg.shot, cfg.query, episode_rng);
      const StepLosses losses = lft_train_step(model, seen_ep, unseen_ep, cfg, noise_rng, adam ? &*adam : nullptr);
      row.loss_ps = losses.loss_ps;
      row.loss_pu = losses.loss_pu;
      row.pseudo_seen_domain = seen[ps].name;
      row.pseudo_unseen_domain = seen[pu].name;
    } else {
      const std::size_t d = domain_rng.below(seen.size());
      const Episode ep = sample_episode(seen[d], cfg.way, cfg.shot, cfg.query, episode_rng);
      const InnerResult r = inner_update(model, ep, cfg.mode == TrainMode::ft, cfg.alpha, false, noise_rng);
      ParamStore next;
      for (const auto& [name, p] : model.params) {
        if (model.is_ft_name(name)) {
          next.add(name, p);
        } else {
          next.add(name, adam ? adam->step(name, p, r.grads.get(name), cfg.alpha) : r.updated.get(name));
        }
      }
      model.params = std::move(next);
      row.loss_ps = r.loss;
      row.pseudo_seen_domain = seen[d].name;
    }
    if (opts.log) {
      write_log_row(*opts.log, row);
      if ((t + 1) % 100 == 0) opts.log->flush();
    }
    result.log.push_back(std::move(row));
  }
  if (opts.log) opts.log->flush();
  return result;
}

// ---------------------------------------------------------------------------
// Pre-training

struct PretrainOptions {
  std::size_t epochs = 10;
  std::size_t batch_size = 64;
  double alpha = 0.05;
  OptimizerKind optimizer = OptimizerKind::sgd;
};

struct PretrainResult {
  ParamStore encoder;               // enc.* tensors after training
  std::vector<double> epoch_losses;  // mean batch loss per epoch
  std::size_t head_classes = 0;      // width of the discarded linear head
};

// Supervised cross-entropy training of the encoder with a temporary linear
// classifier over every train-split class of `domain`. FT is not applied.
inline PretrainResult pretrain_encoder(const EncoderConfig& cfg, const ParamStore& encoder, const Domain& domain,
                                       const PretrainOptions& opts, Rng& rng) {
  if (opts.batch_size < 2) throw ContractError("pretrain: batch_size must be at least 2");
  cfg.validate();
  if (domain.dim != cfg.input_dim) throw DimensionError("pretrain: domain width does not match the encoder input");
  const std::vector<std::uint32_t> ids = domain.class_ids(Split::train);
  if (ids.empty()) throw CapacityError("pretrain: domain has no train-split classes");

  struct Item {
    std::uint32_t class_id;
    std::size_t label;
    std::size_t index;
  };
  std::vector<Item> items;
  for (std::size_t k = 0; k < ids.size(); ++k) {
    for (std::size_t i = 0; i < domain.classes.at(ids[k]).count; ++i) items.push_back({ids[k], k, i});
  }
  if (items.size() < 2) throw CapacityError("pretrain: need at least two samples");

  const std::size_t width = cfg.output_dim(), classes = ids.size();
  ParamStore params;
  for (const auto& name : encoder.names_with_prefix("enc.")) params.add(name, encoder.get(name).detach());
  {
    const double limit = std::sqrt(6.0 / static_cast<double>(width + classes));
    std::vector<double> w(width * classes);
    for (double& v : w) v = rng.uniform(-limit, limit);
    params.add("pretrain.weight", Tensor::matrix(width, classes, std::move(w)));
    params.add("pretrain.bias", Tensor::zeros({classes}));
  }

  PretrainResult result;
  result.head_classes = classes;
  std::optional<AdamState> adam;
  if (opts.optimizer == OptimizerKind::adam) adam.emplace();
  Rng unused(0);
  for (std::size_t epoch = 0; epoch < opts.epochs; ++epoch) {
    rng.shuffle(items);
    double loss_sum = 0.0;
    std::size_t batches = 0;
    for (std::size_t start = 0; start + 2 <= items.size(); start += opts.batch_size) {
      const std::size_t end = std::min(items.size(), start + opts.batch_size);
      if (end - start < 2) break;
      std::vector<double> x;
      Labels y;
      for (std::size_t i = start; i < end; ++i) {
        const auto v = domain.sample(items[i].class_id, items[i].index);
        x.insert(x.end(), v.begin(), v.end());
        y.push_back(items[i].label);
      }
      auto graph = Graph::create();
      const ParamStore attached = attach_all(params, *graph);
      const Tensor emb = encode(cfg, attached, nullptr, Tensor::matrix(end - start, domain.dim, std::move(x)),
                                EncodeMode::train, unused);
      const Tensor logits = matmul(emb, attached.get("pretrain.weight")) + attached.get("pretrain.bias");
      const Tensor loss = episode_loss(logits, y);
      std::vector<Tensor> wrt;
      for (const auto& [name, t] : attached) wrt.push_back(t);
      const std::vector<Tensor> grads = backward(loss, wrt, false);
      ParamStore next;
      std::size_t i = 0;
      for (const auto& [name, t] : params) {
        next.add(name, adam ? adam->step(name, t, grads[i], opts.alpha) : sgd_step(t, grads[i], opts.alpha));
        ++i;
      }
      params = std::move(next);
      loss_sum += loss.item();
      ++batches;
    }
    result.epoch_losses.push_back(batches ? loss_sum / static_cast<double>(batches) : 0.0);
  }
  for (const auto& name : params.names_with_prefix("enc.")) result.encoder.add(name, params.get(name));
  return result;
}

// Replaces the encoder tensors of `model` with `encoder`.
inline void load_encoder(ModelState& model, const ParamStore& encoder) {
  for (const auto& name : encoder.names_with_prefix("enc.")) model.params.set(name, encoder.get(name).detach());
}

}  // namespace featwise
