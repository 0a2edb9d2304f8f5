#pragma once

// Evaluation protocol and analysis emissions.

#include <Eigen/Dense>

#include <array>
#include <cmath>
#include <cstddef>
#include <cstdint>
#include <iomanip>
#include <optional>
#include <sstream>
#include <string>
#include <vector>

#include "featwise/encoder.hpp"
#include "featwise/errors.hpp"
#include "featwise/meta_trainer.hpp"
#include "featwise/metric_heads.hpp"
#include "featwise/rng.hpp"
#include "featwise/task.hpp"

namespace featwise {

inline constexpr std::size_t kDefaultTrials = 1000;
inline constexpr std::size_t kDefaultQuery = 16;

struct EvalReport {
  std::string domain;
  std::size_t way = 0;
  std::size_t shot = 0;
  std::size_t query = 0;
  std::size_t trials = 0;
  std::vector<double> accuracies;
  double mean = 0.0;
  double ci95 = 0.0;
};

// Mean and 1.96 * sample std / sqrt(n) of `accuracies`.
inline void summarize(EvalReport& report) {
  const auto n = static_cast<double>(report.accuracies.size());
  if (report.accuracies.empty()) throw ContractError("evaluate: no trials");
  double s = 0.0;
  for (double a : report.accuracies) s += a;
  report.mean = s / n;
  double ss = 0.0;
  for (double a : report.accuracies) ss += (a - report.mean) * (a - report.mean);
  const double sd = report.accuracies.size() > 1 ? std::sqrt(ss / (n - 1.0)) : 0.0;
  report.ci95 = 1.96 * sd / std::sqrt(n);
  report.trials = report.accuracies.size();
}

// Fraction of queries classified correctly; FT is never applied.
inline double episode_accuracy(const ModelState& model, const Episode& ep) {
  NoGradGuard no_grad;
  const Tensor emb = embed_eval(model, ep.joint_x());
  const std::size_t s = ep.support_rows();
  const Labels pred = predict_episode(model.head, slice(emb, 0, 0, s), ep.support_y,
                                      slice(emb, 0, s, s + ep.query_rows()), model.params);
  std::size_t correct = 0;
  for (std::size_t i = 0; i < pred.size(); ++i) correct += pred[i] == ep.query_y[i];
  return static_cast<double>(correct) / static_cast<double>(pred.size());
}

// Episode of trial `trial`; its stream depends only on (seed, trial).
inline Episode eval_episode(const Domain& domain, std::size_t way, std::size_t shot, std::size_t query,
                            std::uint64_t seed, std::size_t trial, std::optional<Split> split = std::nullopt) {
  Rng rng = Rng(seed).substream("eval-trial", trial);
  return sample_episode(domain, way, shot, query, rng, split);
}

inline EvalReport evaluate_trials(const ModelState& model, const Domain& domain, std::size_t way, std::size_t shot,
                                  std::span<const std::size_t> trial_ids, std::uint64_t seed,
                                  std::size_t query = kDefaultQuery, std::optional<Split> split = std::nullopt) {
  EvalReport report{domain.name, way, shot, query, trial_ids.size(), {}, 0.0, 0.0};
  report.accuracies.reserve(trial_ids.size());
  for (std::size_t t : trial_ids) {
    report.accuracies.push_back(episode_accuracy(model, eval_episode(domain, way, shot, query, seed, t, split)));
  }
  summarize(report);
  return report;
}

inline EvalReport evaluate(const ModelState& model, const Domain& domain, std::size_t way, std::size_t shot,
                           std::size_t trials = kDefaultTrials, std::uint64_t seed = 0,
                           std::size_t query = kDefaultQuery, std::optional<Split> split = std::nullopt) {
  std::vector<std::size_t> ids(trials);
  std::iota(ids.begin(), ids.end(), std::size_t{0});
  return evaluate_trials(model, domain, way, shot, ids, seed, query, split);
}

// Evaluation seed used for domain `index` of a cross-domain run.
inline std::uint64_t cross_domain_seed(std::uint64_t seed, std::size_t index) {
  return derive_seed(seed, "cross-domain", index);
}

inline std::vector<EvalReport> cross_domain_matrix(const ModelState& model, std::span<const Domain> domains,
                                                   std::size_t way, std::size_t shot,
                                                   std::size_t trials = kDefaultTrials, std::uint64_t seed = 0,
                                                   std::size_t query = kDefaultQuery) {
  std::vector<EvalReport> out;
  for (std::size_t i = 0; i < domains.size(); ++i) {
    out.push_back(evaluate(model, domains[i], way, shot, trials, cross_domain_seed(seed, i), query));
  }
  return out;
}

inline std::string eval_report_csv(const EvalReport& report) {
  std::ostringstream os;
  os << "trial,accuracy\n" << std::fixed << std::setprecision(6);
  for (std::size_t i = 0; i < report.accuracies.size(); ++i) os << i << ',' << report.accuracies[i] << '\n';
  os << "# mean=" << report.mean << " ci95=" << report.ci95 << '\n';
  return os.str();
}

inline std::string cross_domain_csv(const std::vector<EvalReport>& reports) {
  std::ostringstream os;
  os << "domain,way,shot,query,trials,mean,ci95\n" << std::fixed << std::setprecision(6);
  for (const auto& r : reports) {
    os << r.domain << ',' << r.way << ',' << r.shot << ',' << r.query << ',' << r.trials << ',' << r.mean << ','
       << r.ci95 << '\n';
  }
  return os.str();
}

// ---------------------------------------------------------------------------
// 2-D projection of embeddings

struct PcaResult {
  std::vector<std::array<double, 2>> coords;
  double explained_variance = 0.0;  // variance captured by the retained components
  double total_variance = 0.0;
};

// Principal-component projection onto the top two eigenvectors of the sample
// covariance. Each eigenvector's largest-magnitude entry is made positive.
inline PcaResult pca_2d(const std::vector<std::vector<double>>& points) {
  if (points.size() < 3) throw ContractError("projection: need at least 3 points");
  const std::size_t n = points.size(), d = points.front().size();
  Eigen::MatrixXd x(n, d);
  for (std::size_t i = 0; i < n; ++i) {
    if (points[i].size() != d) throw DimensionError("projection: ragged input");
    for (std::size_t j = 0; j < d; ++j) x(i, j) = points[i][j];
  }
  const Eigen::RowVectorXd mu = x.colwise().mean();
  x.rowwise() -= mu;
  const Eigen::MatrixXd cov = (x.transpose() * x) / static_cast<double>(n - 1);
  Eigen::SelfAdjointEigenSolver<Eigen::MatrixXd> solver(cov);
  if (solver.info() != Eigen::Success) throw NumericError("projection: eigendecomposition failed");
  const Eigen::VectorXd& evals = solver.eigenvalues();  // ascending
  const std::size_t keep = std::min<std::size_t>(2, d);
  Eigen::MatrixXd basis(d, keep);
  PcaResult out;
  for (std::size_t c = 0; c < keep; ++c) {
    Eigen::VectorXd v = solver.eigenvectors().col(static_cast<Eigen::Index>(d - 1 - c));
    Eigen::Index arg = 0;
    v.cwiseAbs().maxCoeff(&arg);
    if (v(arg) < 0) v = -v;
    basis.col(static_cast<Eigen::Index>(c)) = v;
    out.explained_variance += evals(static_cast<Eigen::Index>(d - 1 - c));
  }
  out.total_variance = cov.trace();
  const Eigen::MatrixXd proj = x * basis;
  out.coords.resize(n);
  for (std::size_t i = 0; i < n; ++i) {
    out.coords[i] = {proj(static_cast<Eigen::Index>(i), 0),
                     keep > 1 ? proj(static_cast<Eigen::Index>(i), 1) : 0.0};
  }
  return out;
}

struct ProjectionRow {
  std::string domain;
  std::uint32_t class_id = 0;
  double pc1 = 0.0;
  double pc2 = 0.0;
};

struct FeatureProjection {
  std::vector<ProjectionRow> rows;
  double explained_variance = 0.0;
  double total_variance = 0.0;
};

// Encodes `samples_per_domain` items of each domain (eval mode, one batch per
// domain) and projects the pooled embeddings. Every domain draws its items
// from the same stream, so identical domains select identical items.
inline FeatureProjection feature_projection(const ModelState& model, std::span<const Domain> domains,
                                            std::size_t samples_per_domain, std::uint64_t seed) {
  if (samples_per_domain < 2) throw ContractError("projection: need at least 2 samples per domain");
  std::vector<std::vector<double>> pooled;
  FeatureProjection out;
  for (const Domain& domain : domains) {
    std::vector<std::pair<std::uint32_t, std::size_t>> items;
    for (const auto& [id, c] : domain.classes)
      for (std::size_t i = 0; i < c.count; ++i) items.emplace_back(id, i);
    if (items.size() < samples_per_domain) {
      throw CapacityError("projection: domain '" + domain.name + "' has " + std::to_string(items.size()) +
                          " samples, needs " + std::to_string(samples_per_domain));
    }
    Rng rng = Rng(seed).substream("projection");
    const std::vector<std::size_t> pick = rng.choose(items.size(), samples_per_domain);
    std::vector<double> x;
    for (std::size_t p : pick) {
      const auto v = domain.sample(items[p].first, items[p].second);
      x.insert(x.end(), v.begin(), v.end());
      out.rows.push_back({domain.name, items[p].first, 0.0, 0.0});
    }
    const Tensor emb = embed_eval(model, Tensor::matrix(samples_per_domain, domain.dim, std::move(x)));
    for (std::size_t r = 0; r < emb.dim(0); ++r) {
      const auto v = emb.values().subspan(r * emb.dim(1), emb.dim(1));
      pooled.emplace_back(v.begin(), v.end());
    }
  }
  const PcaResult pca = pca_2d(pooled);
  for (std::size_t i = 0; i < out.rows.size(); ++i) {
    out.rows[i].pc1 = pca.coords[i][0];
    out.rows[i].pc2 = pca.coords[i][1];
  }
  out.explained_variance = pca.explained_variance;
  out.total_variance = pca.total_variance;
  return out;
}

inline std::string projection_csv(const FeatureProjection& p) {
  std::ostringstream os;
  os << "domain,class_id,pc1,pc2\n" << std::fixed << std::setprecision(6);
  for (const auto& r : p.rows) os << r.domain << ',' << r.class_id << ',' << r.pc1 << ',' << r.pc2 << '\n';
  return os.str();
}

inline void emit_feature_projection(const ModelState& model, std::span<const Domain> domains,
                                    std::size_t samples_per_domain, const std::filesystem::path& out_path,
                                    std::uint64_t seed) {
  detail::write_file(out_path, projection_csv(feature_projection(model, domains, samples_per_domain, seed)));
}

}  // namespace featwise
