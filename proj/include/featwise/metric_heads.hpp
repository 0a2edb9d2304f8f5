#pragma once

// Metric functions mapping (support embeddings, support labels, query
// embeddings) to per-query class logits, and the episode cross-entropy.

#include <algorithm>
#include <cmath>
#include <cstddef>
#include <string>
#include <string_view>
#include <vector>

#include "featwise/errors.hpp"
#include "featwise/params.hpp"
#include "featwise/rng.hpp"
#include "featwise/tensor.hpp"

namespace featwise {

using Labels = std::vector<std::size_t>;

enum class HeadKind { proto, matching, relation };

inline std::string_view head_name(HeadKind kind) {
  switch (kind) {
    case HeadKind::proto: return "proto";
    case HeadKind::matching: return "matching";
    case HeadKind::relation: return "relation";
  }
  return "proto";
}

inline HeadKind parse_head(std::string_view name) {
  if (name == "proto") return HeadKind::proto;
  if (name == "matching") return HeadKind::matching;
  if (name == "relation") return HeadKind::relation;
  throw ConfigError("unknown head kind '" + std::string(name) + "'");
}

inline constexpr double kCosineNormEps = 1e-8;
inline constexpr double kMatchingLogFloor = 1e-12;

namespace detail {

// Number of classes in `labels`; every class in 0..way-1 must occur.
inline std::size_t class_count(const Labels& labels) {
  if (labels.empty()) throw ContractError("support set is empty");
  std::size_t way = 0;
  for (std::size_t y : labels) way = std::max(way, y + 1);
  std::vector<char> seen(way, 0);
  for (std::size_t y : labels) seen[y] = 1;
  for (std::size_t k = 0; k < way; ++k) {
    if (!seen[k]) throw ContractError("class " + std::to_string(k) + " is missing from the support set");
  }
  return way;
}

inline void check_embeddings(const Tensor& support, const Labels& labels, const Tensor& query) {
  if (support.rank() != 2 || query.rank() != 2 || support.dim(1) != query.dim(1)) {
    throw DimensionError("metric head: support " + shape_str(support.shape()) + " and query " +
                         shape_str(query.shape()) + " must be matrices of equal width");
  }
  if (support.dim(0) != labels.size()) {
    throw DimensionError("metric head: " + std::to_string(labels.size()) + " labels for " +
                         std::to_string(support.dim(0)) + " support rows");
  }
}

// (way, S) matrix whose product with the support embeddings gives class means.
inline Tensor averaging_matrix(const Labels& labels, std::size_t way) {
  std::vector<double> counts(way, 0.0);
  for (std::size_t y : labels) counts[y] += 1.0;
  std::vector<double> a(way * labels.size(), 0.0);
  for (std::size_t j = 0; j < labels.size(); ++j) a[labels[j] * labels.size() + j] = 1.0 / counts[labels[j]];
  return Tensor::matrix(way, labels.size(), std::move(a));
}

inline Tensor one_hot(const Labels& labels, std::size_t way) {
  std::vector<double> y(labels.size() * way, 0.0);
  for (std::size_t i = 0; i < labels.size(); ++i) y[i * way + labels[i]] = 1.0;
  return Tensor::matrix(labels.size(), way, std::move(y));
}

inline Tensor row_normalize(const Tensor& x) {
  const Tensor norms = sqrt(sum_to(square(x), {x.dim(0), 1}) + kCosineNormEps * kCosineNormEps);
  return x / norms;
}

}  // namespace detail

inline Tensor class_prototypes(const Tensor& support, const Labels& labels) {
  return matmul(detail::averaging_matrix(labels, detail::class_count(labels)), support);
}

// Row-wise log-sum-exp with a detached max shift.
inline Tensor logsumexp_rows(const Tensor& logits) {
  const Tensor shift = max(logits).detach();
  return log(sum_to(exp(logits - shift), {logits.dim(0), 1})) + shift;
}

inline Tensor softmax_rows(const Tensor& logits) {
  const Tensor e = exp(logits - max(logits).detach());
  return e / sum_to(e, {logits.dim(0), 1});
}

// Negative squared euclidean distance to each class prototype.
inline Tensor proto_logits(const Tensor& support, const Labels& labels, const Tensor& query) {
  detail::check_embeddings(support, labels, query);
  const Tensor protos = class_prototypes(support, labels);
  const std::size_t q = query.dim(0), way = protos.dim(0);
  const Tensor qq = sum_to(square(query), {q, 1});
  const Tensor pp = transpose(sum_to(square(protos), {way, 1}));
  const Tensor cross = matmul(query, transpose(protos));
  return scale(cross, 2.0) - qq - pp;
}

// Cosine attention over support items, summed per class, in log space.
inline Tensor matching_logits(const Tensor& support, const Labels& labels, const Tensor& query) {
  detail::check_embeddings(support, labels, query);
  const std::size_t way = detail::class_count(labels);
  const Tensor cosine = matmul(detail::row_normalize(query), transpose(detail::row_normalize(support)));
  const Tensor attention = softmax_rows(cosine);
  const Tensor class_mass = matmul(attention, detail::one_hot(labels, way));
  return log(class_mass + kMatchingLogFloor);
}

inline std::string rel_name(const char* field) { return std::string("head.rel.") + field; }

inline ParamStore build_relation_head(std::size_t embedding_dim, std::size_t hidden, Rng& rng) {
  if (hidden == 0) throw ConfigError("relation head: hidden width must be positive");
  if (embedding_dim == 0) throw ConfigError("relation head: embedding width must be positive");
  auto uniform_matrix = [&rng](std::size_t rows, std::size_t cols) {
    const double limit = std::sqrt(6.0 / static_cast<double>(rows + cols));
    std::vector<double> w(rows * cols);
    for (double& v : w) v = rng.uniform(-limit, limit);
    return Tensor::matrix(rows, cols, std::move(w));
  };
  ParamStore head;
  head.add(rel_name("w1"), uniform_matrix(2 * embedding_dim, hidden));
  head.add(rel_name("b1"), Tensor::zeros({hidden}));
  head.add(rel_name("w2"), uniform_matrix(hidden, 1));
  head.add(rel_name("b2"), Tensor::zeros({1}));
  return head;
}

// Perceptron score of every (query, class prototype) pair.
inline Tensor relation_logits(const Tensor& support, const Labels& labels, const Tensor& query,
                              const ParamStore& params) {
  detail::check_embeddings(support, labels, query);
  const Tensor& w1 = params.get(rel_name("w1"));
  if (w1.dim(1) == 0) throw ConfigError("relation head: hidden width must be positive");
  if (w1.dim(0) != 2 * query.dim(1)) {
    throw DimensionError("relation head: expects embeddings of width " + std::to_string(w1.dim(0) / 2) + ", got " +
                         std::to_string(query.dim(1)));
  }
  const Tensor protos = class_prototypes(support, labels);
  const std::size_t q = query.dim(0), way = protos.dim(0);
  std::vector<std::size_t> query_rows, proto_rows;
  query_rows.reserve(q * way);
  proto_rows.reserve(q * way);
  for (std::size_t i = 0; i < q; ++i) {
    for (std::size_t k = 0; k < way; ++k) {
      query_rows.push_back(i);
      proto_rows.push_back(k);
    }
  }
  const Tensor pairs = concat({gather_rows(query, query_rows), gather_rows(protos, proto_rows)}, 1);
  const Tensor hidden = relu(matmul(pairs, w1) + params.get(rel_name("b1")));
  const Tensor scores = matmul(hidden, params.get(rel_name("w2"))) + params.get(rel_name("b2"));
  return reshape(scores, {q, way});
}

inline Tensor head_logits(HeadKind kind, const Tensor& support, const Labels& labels, const Tensor& query,
                          const ParamStore& params) {
  switch (kind) {
    case HeadKind::proto: return proto_logits(support, labels, query);
    case HeadKind::matching: return matching_logits(support, labels, query);
    case HeadKind::relation: return relation_logits(support, labels, query, params);
  }
  throw ConfigError("unknown head kind");
}

// Row-wise argmax; ties go to the lowest class index.
inline Labels argmax_rows(const Tensor& logits) {
  if (logits.rank() != 2) throw DimensionError("argmax_rows: expected a matrix");
  const std::size_t rows = logits.dim(0), cols = logits.dim(1);
  Labels out(rows);
  for (std::size_t i = 0; i < rows; ++i) {
    std::size_t best = 0;
    for (std::size_t k = 1; k < cols; ++k)
      if (logits.at(i, k) > logits.at(i, best)) best = k;
    out[i] = best;
  }
  return out;
}

inline Labels predict_episode(HeadKind kind, const Tensor& support, const Labels& labels, const Tensor& query,
                              const ParamStore& params) {
  NoGradGuard no_grad;
  return argmax_rows(head_logits(kind, support, labels, query, params));
}

// Mean softmax cross-entropy of the queries.
inline Tensor episode_loss(const Tensor& logits, const Labels& query_labels) {
  if (logits.rank() != 2 || logits.dim(0) != query_labels.size()) {
    throw DimensionError("episode_loss: logits " + shape_str(logits.shape()) + " for " +
                         std::to_string(query_labels.size()) + " labels");
  }
  const std::size_t way = logits.dim(1);
  for (std::size_t y : query_labels) {
    if (y >= way) {
      throw ContractError("episode_loss: label " + std::to_string(y) + " out of range for " + std::to_string(way) +
                          " classes");
    }
  }
  const Tensor picked = sum_to(logits * detail::one_hot(query_labels, way), {logits.dim(0), 1});
  return mean(logsumexp_rows(logits) - picked);
}

}  // namespace featwise
