#include <gtest/gtest.h>

#include <cmath>

#include "test_support.hpp"

using namespace featwise;
using featwise::testing::max_rel_err;
using featwise::testing::random_tensor;

TEST(ProtoHead, WorkedExample) {
  const Tensor support = Tensor::from_rows({{0}, {2}, {4}, {6}});
  const Labels labels{0, 0, 1, 1};
  const Tensor query = Tensor::from_rows({{2}});
  const Tensor logits = proto_logits(support, labels, query);
  EXPECT_NEAR(logits[0], -1.0, 1e-12);
  EXPECT_NEAR(logits[1], -9.0, 1e-12);
  const Tensor p = softmax_rows(logits);
  EXPECT_NEAR(p[0], 1.0 / (1.0 + std::exp(-8.0)), 1e-12);
  EXPECT_NEAR(p[0], 0.99966, 1e-5);
  EXPECT_EQ(predict_episode(HeadKind::proto, support, labels, query, {}), Labels{0});
}

TEST(ProtoHead, EquidistantQueryIsUniform) {
  const Tensor support = Tensor::from_rows({{1, 0}, {-1, 0}, {0, 1}, {0, -1}});
  const Labels labels{0, 1, 2, 3};
  const Tensor p = softmax_rows(proto_logits(support, labels, Tensor::from_rows({{0, 0}})));
  for (std::size_t k = 0; k < 4; ++k) EXPECT_NEAR(p[k], 0.25, 1e-12);
}

TEST(ProtoHead, SupportOrderInvariant) {
  Rng rng(4);
  const Tensor support = random_tensor({6, 3}, rng), query = random_tensor({4, 3}, rng);
  const Labels labels{0, 1, 2, 0, 1, 2};
  const std::vector<std::size_t> perm{4, 2, 0, 5, 1, 3};
  Labels plabels;
  for (std::size_t i : perm) plabels.push_back(labels[i]);
  const Tensor a = proto_logits(support, labels, query);
  const Tensor b = proto_logits(gather_rows(support, perm), plabels, query);
  for (std::size_t i = 0; i < a.numel(); ++i) EXPECT_NEAR(a[i], b[i], 1e-12);
}

TEST(ProtoHead, MissingClassIsContractError) {
  const Tensor support = Tensor::from_rows({{0}, {1}});
  EXPECT_THROW((void)proto_logits(support, Labels{0, 2}, Tensor::from_rows({{0}})), ContractError);
}

TEST(MatchingHead, WorkedExample) {
  const Tensor support = Tensor::from_rows({{1, 0}, {0, 1}});
  const Tensor p = softmax_rows(matching_logits(support, {0, 1}, Tensor::from_rows({{1, 0}})));
  const double e = std::exp(1.0);
  EXPECT_NEAR(p[0], e / (e + 1.0), 1e-9);
  EXPECT_NEAR(p[0], 0.731, 1e-3);
  EXPECT_NEAR(p[1], 1.0 / (e + 1.0), 1e-9);
}

TEST(MatchingHead, IdenticalSupportsGiveUniformScores) {
  const Tensor support = Tensor::from_rows({{1, 2}, {1, 2}, {1, 2}});
  const Tensor p = softmax_rows(matching_logits(support, {0, 1, 2}, Tensor::from_rows({{0.3, -4}})));
  for (std::size_t k = 0; k < 3; ++k) EXPECT_NEAR(p[k], 1.0 / 3.0, 1e-12);
}

TEST(MatchingHead, QueryScaleInvariant) {
  Rng rng(2);
  const Tensor support = random_tensor({6, 4}, rng), query = random_tensor({3, 4}, rng);
  const Labels labels{0, 0, 1, 1, 2, 2};
  const Tensor a = matching_logits(support, labels, query);
  const Tensor b = matching_logits(support, labels, query * 7.5);
  for (std::size_t i = 0; i < a.numel(); ++i) EXPECT_NEAR(a[i], b[i], 1e-9);
}

TEST(RelationHead, ZeroWeightsGiveUniform) {
  Rng rng(1);
  ParamStore head = build_relation_head(3, 4, rng);
  for (const auto& n : head.names()) head.set(n, Tensor::zeros(head.get(n).shape()));
  const Tensor s = random_tensor({10, 3}, rng), q = random_tensor({6, 3}, rng);
  const Tensor p = softmax_rows(relation_logits(s, {0, 1, 2, 3, 4, 0, 1, 2, 3, 4}, q, head));
  for (std::size_t i = 0; i < p.numel(); ++i) EXPECT_NEAR(p[i], 0.2, 1e-15);
}

TEST(RelationHead, ShapeAndNames) {
  Rng rng(1);
  const ParamStore head = build_relation_head(8, 8, rng);
  EXPECT_EQ(head.names(), (std::vector<std::string>{"head.rel.b1", "head.rel.b2", "head.rel.w1", "head.rel.w2"}));
  Labels labels;
  for (std::size_t k = 0; k < 5; ++k)
    for (int j = 0; j < 5; ++j) labels.push_back(k);
  const Tensor logits = relation_logits(random_tensor({25, 8}, rng), labels, random_tensor({80, 8}, rng), head);
  EXPECT_EQ(logits.shape(), (Shape{80, 5}));
  EXPECT_THROW((void)build_relation_head(8, 0, rng), ConfigError);
}

TEST(RelationHead, GradientsMatchFiniteDifferences) {
  Rng rng(5);
  const ParamStore head = build_relation_head(3, 5, rng);
  const Tensor s = random_tensor({6, 3}, rng), q = random_tensor({4, 3}, rng);
  const Labels sl{0, 0, 1, 1, 2, 2}, ql{0, 1, 2, 1};
  auto f = [&](const ParamStore& p) { return episode_loss(relation_logits(s, sl, q, p), ql); };
  auto graph = Graph::create();
  const ParamStore att = attach_all(head, *graph);
  std::vector<Tensor> wrt;
  for (const auto& [n, t] : att) wrt.push_back(t);
  const auto grads = backward(f(att), wrt);
  const ParamStore fd = finite_difference_grad([&](const ParamStore& p) { return f(p).item(); }, head, 1e-5);
  std::size_t i = 0;
  for (const auto& [n, t] : head) EXPECT_LT(max_rel_err(grads[i++], fd.get(n), featwise::testing::kFdFloor), 1e-5) << n;
}

TEST(HeadKindTest, ParseRoundTrip) {
  for (HeadKind k : {HeadKind::proto, HeadKind::matching, HeadKind::relation}) EXPECT_EQ(parse_head(head_name(k)), k);
  EXPECT_THROW((void)parse_head("gnn"), ConfigError);
}

TEST(Predict, TiesGoToLowestIndex) {
  EXPECT_EQ(argmax_rows(Tensor::full({3, 4}, 0.5)), (Labels{0, 0, 0}));
  EXPECT_EQ(argmax_rows(Tensor::from_rows({{1, 3, 3}})), Labels{1});
}

TEST(EpisodeLossTest, UniformLogits) {
  EXPECT_NEAR(episode_loss(Tensor::zeros({7, 5}), {0, 1, 2, 3, 4, 0, 1}).item(), std::log(5.0), 1e-12);
  for (std::size_t n = 2; n <= 20; ++n) {
    EXPECT_NEAR(episode_loss(Tensor::full({3, n}, 1.5), {0, 1, n - 1}).item(), std::log(static_cast<double>(n)),
                1e-12);
  }
}

TEST(EpisodeLossTest, SaturatedAndHandComputed) {
  EXPECT_LT(episode_loss(Tensor::from_rows({{50, 0, 0}}), {0}).item(), 1e-20);
  const double expected = -std::log(std::exp(1.0) / (std::exp(1.0) + 1.0));
  EXPECT_NEAR(episode_loss(Tensor::from_rows({{1, 0}}), {0}).item(), expected, 1e-14);
  EXPECT_NEAR(expected, 0.31326, 1e-5);
}

TEST(EpisodeLossTest, LargeLogitsStayFinite) {
  const double v = episode_loss(Tensor::from_rows({{1000, -1000}, {-1000, 1000}}), {1, 1}).item();
  EXPECT_NEAR(v, 1000.0, 1e-9);
}

TEST(EpisodeLossTest, LabelOutOfRange) {
  EXPECT_THROW((void)episode_loss(Tensor::zeros({1, 3}), {3}), ContractError);
}

// First-order gradients of every head with FT active and the noise pinned by
// a fixed stream.
TEST(EpisodeLossTest, EndToEndGradientsAllHeads) {
  const Domain d = generate_synthetic_domain(featwise::testing::small_domain_spec(1));
  for (HeadKind head : {HeadKind::proto, HeadKind::matching, HeadKind::relation}) {
    Rng rng(9);
    const ModelState model = make_model(make_encoder_config(d.dim, {6, 5}), head, true, 0.3, 0.5, rng);
    Rng er(1);
    const Episode ep = sample_episode(d, 3, 2, 3, er);
    auto f = [&](const ParamStore& p) {
      Rng noise(44);
      return episode_objective(model, p, ep, EncodeMode::train, true, noise);
    };
    auto graph = Graph::create();
    const ParamStore att = attach_all(model.params, *graph);
    std::vector<Tensor> wrt;
    for (const auto& [n, t] : att) wrt.push_back(t);
    const auto grads = backward(f(att), wrt);
    const ParamStore fd = finite_difference_grad([&](const ParamStore& p) { return f(p).item(); }, model.params, 1e-5);
    std::size_t i = 0;
    for (const auto& [n, t] : model.params) {
      EXPECT_LT(max_rel_err(grads[i++], fd.get(n), featwise::testing::kFdFloor), 1e-5) << head_name(head) << ' ' << n;
    }
  }
}
