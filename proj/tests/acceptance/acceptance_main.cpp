// Acceptance suite. Prints one PASS/FAIL line per criterion and exits non-zero
// if any criterion fails. Pass criterion numbers as arguments to run a subset.

#include <algorithm>
#include <array>
#include <chrono>
#include <cmath>
#include <cstdio>
#include <functional>
#include <iostream>
#include <set>
#include <sstream>
#include <string>
#include <vector>

#include "../test_support.hpp"

using namespace featwise;
using featwise::testing::rel_err;

namespace {

// Tolerances and budgets.
constexpr double kGradRelTol = 1e-5;        // criterion 2
constexpr double kGradFdEps = 1e-5;         // criterion 2
constexpr double kMetaRelTol = 1e-4;        // criterion 3
constexpr double kMetaFdEps = 1e-4;         // criterion 3
// Relative errors are measured against max(|a|, |b|, floor). A central
// difference on an O(1) loss carries rounding noise near 1e-16 / eps (about
// 2e-10 here), so gradients below the floor (most of them exactly zero, such
// as biases feeding batch norm) are compared absolutely.
constexpr double kGradFloor = 1e-4;
constexpr double kMetaFloor = 1e-6;
constexpr double kFtStdTol = 0.01;          // criterion 4, relative
constexpr double kChanceLow = 0.15, kChanceHigh = 0.25;  // criterion 5
constexpr double kLnWayTol = 0.3;           // criterion 5
constexpr double kMinLftGain = 0.02;        // criterion 6

struct Outcome {
  bool pass = false;
  std::string detail;
};

using Clock = std::chrono::steady_clock;

double seconds_since(Clock::time_point t0) { return std::chrono::duration<double>(Clock::now() - t0).count(); }

std::string fmt(const char* f, double v) {
  char buf[64];
  std::snprintf(buf, sizeof buf, f, v);
  return buf;
}

ParamStore grad_store(const ParamStore& params, const std::function<Tensor(const ParamStore&)>& f) {
  auto graph = Graph::create();
  const ParamStore att = attach_all(params, *graph);
  std::vector<Tensor> wrt;
  for (const auto& [n, t] : att) wrt.push_back(t);
  const auto grads = backward(f(att), wrt);
  ParamStore out;
  std::size_t i = 0;
  for (const auto& [n, t] : params) out.add(n, grads[i++]);
  return out;
}

double worst_rel(const ParamStore& a, const ParamStore& b, double floor) {
  double worst = 0.0;
  for (const auto& [n, t] : a)
    for (std::size_t i = 0; i < t.numel(); ++i) worst = std::max(worst, rel_err(t[i], b.get(n)[i], floor));
  return worst;
}

SyntheticDomainSpec acceptance_domain(std::uint64_t master_seed, std::uint64_t domain_seed) {
  SyntheticDomainSpec s;
  s.master_seed = master_seed;
  s.domain_seed = domain_seed;
  s.num_classes = 20;
  s.observed_dim = 16;
  s.per_class = 50;
  s.name = "m" + std::to_string(master_seed) + "d" + std::to_string(domain_seed);
  return s;
}

// ---------------------------------------------------------------------------

Outcome hyper_parameter_count() {
  const auto t0 = Clock::now();
  const std::array<std::size_t, 4> widths{64, 128, 256, 512};
  const std::size_t n = ft_param_count(widths);
  const double ms = seconds_since(t0) * 1e3;
  return {n == 1920 && ms < 1.0, "count=" + std::to_string(n) + " (expected 1920), " + fmt("%.4f ms", ms)};
}

Outcome first_order_gradients() {
  const auto t0 = Clock::now();
  double worst = 0.0;
  for (std::uint64_t seed = 0; seed < 10; ++seed) {
    SyntheticDomainSpec spec = acceptance_domain(seed, seed + 1);
    spec.num_classes = 5;
    spec.per_class = 10;
    spec.observed_dim = 8;
    spec.latent_dim = 4;
    const Domain d = generate_synthetic_domain(spec);
    for (HeadKind head : {HeadKind::proto, HeadKind::matching, HeadKind::relation}) {
      Rng init(seed);
      const ModelState model = make_model(make_encoder_config(d.dim, {8, 6}), head, true, 0.3, 0.5, init);
      Rng er(seed + 100);
      const Episode ep = sample_episode(d, 3, 2, 3, er);
      auto f = [&](const ParamStore& p) {
        Rng noise(seed + 200);
        return episode_objective(model, p, ep, EncodeMode::train, true, noise);
      };
      const ParamStore g = grad_store(model.params, f);
      const ParamStore fd =
          finite_difference_grad([&](const ParamStore& p) { return f(p).item(); }, model.params, kGradFdEps);
      worst = std::max(worst, worst_rel(g, fd, kGradFloor));
    }
  }
  const double s = seconds_since(t0);
  return {worst < kGradRelTol && s < 30.0,
          "max rel err " + fmt("%.3e", worst) + " (< " + fmt("%.0e", kGradRelTol) + "), " + fmt("%.1f s", s)};
}

Outcome meta_gradient_oracle() {
  const auto t0 = Clock::now();
  double worst = 0.0;
  bool step_consistent = true;
  for (std::uint64_t seed = 0; seed < 10; ++seed) {
    const Domain seen = generate_synthetic_domain(acceptance_domain(seed, 1));
    const Domain other = generate_synthetic_domain(acceptance_domain(seed, 2));
    TrainConfig cfg;
    cfg.mode = TrainMode::lft;
    cfg.encoder_widths = {16, 8};
    cfg.ft_blocks = {true, true};
    cfg.way = 2;
    cfg.shot = 2;
    cfg.query = 4;
    cfg.seed = seed;
    Rng init(seed);
    const ModelState model = make_model(cfg, seen.dim, init);
    Rng er(seed + 7);
    const Episode ps = sample_episode(seen, cfg.way, cfg.shot, cfg.query, er);
    const Episode pu = sample_episode(other, cfg.way, cfg.shot, cfg.query, er);

    Rng noise_a(seed + 11), noise_b(seed + 11);
    const MetaGradient meta = lft_meta_gradient(model, ps, pu, cfg, noise_a);
    ModelState stepped = model;
    (void)lft_train_step(stepped, ps, pu, cfg, noise_b);
    ParamStore theta;
    for (const auto& n : model.ft_param_names()) {
      theta.add(n, model.params.get(n));
      const Tensor expected = sgd_step(model.params.get(n), meta.ft_grad.get(n), cfg.alpha);
      step_consistent = step_consistent && stepped.params.get(n).identical(expected);
    }
    const ParamStore fd = finite_difference_grad(
        [&](const ParamStore& ft) {
          ModelState m = model;
          for (const auto& [n, t] : ft) m.params.set(n, t);
          Rng noise(seed + 11);
          return lft_objective(m, ps, pu, cfg, noise);
        },
        theta, kMetaFdEps);
    worst = std::max(worst, worst_rel(meta.ft_grad, fd, kMetaFloor));
  }
  const double s = seconds_since(t0);
  return {worst < kMetaRelTol && step_consistent && s < 60.0,
          "max rel err " + fmt("%.3e", worst) + " (< " + fmt("%.0e", kMetaRelTol) + ") over 48 theta_f scalars x 10 seeds, " +
              (step_consistent ? "step applies the gradient, " : "STEP MISMATCH, ") + fmt("%.1f s", s)};
}

Outcome ft_distribution() {
  const auto t0 = Clock::now();
  const std::size_t draws = 200000;
  Rng rng(derive_seed(0, "acceptance-ft"));
  const Tensor tg = Tensor::full({1}, kDefaultFtGamma), tb = Tensor::full({1}, kDefaultFtBeta);
  double sg = 0, sg2 = 0, sb = 0, sb2 = 0;
  for (std::size_t i = 0; i < draws; ++i) {
    const Modulation m = sample_modulation(tg, tb, rng);
    sg += m.gamma[0];
    sg2 += m.gamma[0] * m.gamma[0];
    sb += m.beta[0];
    sb2 += m.beta[0] * m.beta[0];
  }
  const double n = static_cast<double>(draws);
  const double mg = sg / n, mb = sb / n;
  const double sdg = std::sqrt((sg2 - n * mg * mg) / (n - 1)), sdb = std::sqrt((sb2 - n * mb * mb) / (n - 1));
  // ln(1 + e^x) in extended precision.
  const double ref_g = static_cast<double>(std::log1p(std::exp(0.3L)));
  const double ref_b = static_cast<double>(std::log1p(std::exp(0.5L)));
  const bool ok = std::abs(sdg / ref_g - 1) < kFtStdTol && std::abs(sdb / ref_b - 1) < kFtStdTol &&
                  std::abs(mg - 1) < 4 * ref_g / std::sqrt(n) && std::abs(mb) < 4 * ref_b / std::sqrt(n);
  const double s = seconds_since(t0);
  return {ok && s < 5.0, "std(gamma)=" + fmt("%.5f", sdg) + " vs " + fmt("%.5f", ref_g) + ", std(beta)=" +
                             fmt("%.5f", sdb) + " vs " + fmt("%.5f", ref_b) + ", mean(gamma)=" + fmt("%.5f", mg) +
                             ", mean(beta)=" + fmt("%.5f", mb) + ", " + fmt("%.2f s", s)};
}

// The untrained model sees a domain whose classes share one distribution, so
// the labels carry no information and the expected accuracy is exactly 1/5.
Outcome chance_level() {
  const auto t0 = Clock::now();
  const Domain d = featwise::testing::structureless_domain(20, 50, 16, 5);
  TrainConfig cfg;
  Rng init(5);
  const ModelState model = make_model(cfg, d.dim, init);
  const EvalReport r = evaluate(model, d, 5, 5, 1000, 17);
  Rng er(23);
  double loss = 0.0;
  for (int i = 0; i < 100; ++i) loss += pseudo_unseen_loss(model, sample_episode(d, 5, 5, 16, er)).item();
  loss /= 100.0;
  const double s = seconds_since(t0);
  const bool ok = r.mean >= kChanceLow && r.mean <= kChanceHigh && std::abs(loss - std::log(5.0)) <= kLnWayTol;
  return {ok && s < 60.0, "accuracy " + fmt("%.4f", r.mean) + " in [0.15, 0.25], loss " + fmt("%.4f", loss) +
                              " vs ln 5 = 1.6094 +- 0.3, " + fmt("%.1f s", s)};
}

struct ModeScores {
  double acc[3] = {0, 0, 0};
  double max_seconds = 0.0;
};

// Leave-one-out over five warped copies of the same latent classes.
Outcome cross_domain_direction() {
  const auto t0 = Clock::now();
  constexpr std::size_t kSeeds = 5, kDomains = 5;
  ModeScores total;
  std::ostringstream per_seed;
  double per_seed_mode_seconds[kSeeds][3] = {};
  for (std::size_t s = 0; s < kSeeds; ++s) {
    std::vector<Domain> domains;
    for (std::size_t d = 0; d < kDomains; ++d) {
      domains.push_back(generate_synthetic_domain(acceptance_domain(s, 1000 * (s + 1) + d)));
    }
    double seed_acc[3] = {0, 0, 0};
    for (std::size_t held = 0; held < kDomains; ++held) {
      std::vector<Domain> seen;
      for (std::size_t d = 0; d < kDomains; ++d)
        if (d != held) seen.push_back(domains[d]);
      TrainConfig cfg;
      cfg.iterations = 2000;
      cfg.seed = derive_seed(s, "fold", held);
      const Rng root(cfg.seed);
      Rng init_rng = root.substream("init");
      cfg.mode = TrainMode::lft;
      ModelState init = make_model(cfg, seen.front().dim, init_rng);
      Rng pre_rng = root.substream("pretrain");
      const PretrainResult pre = pretrain_encoder(init.encoder, init.params, merge_domains(seen, "pool"), {}, pre_rng);
      load_encoder(init, pre.encoder);
      for (TrainMode mode : {TrainMode::baseline, TrainMode::ft, TrainMode::lft}) {
        const auto m0 = Clock::now();
        cfg.mode = mode;
        const ModelState start = mode == TrainMode::baseline ? init.without_ft() : init;
        const TrainResult r = train_loop(cfg, seen, start);
        const double acc = evaluate(r.model, domains[held], 5, 5, kDefaultTrials, derive_seed(s, "eval", held)).mean;
        seed_acc[static_cast<int>(mode)] += acc / kDomains;
        per_seed_mode_seconds[s][static_cast<int>(mode)] += seconds_since(m0);
      }
    }
    per_seed << " seed" << s << "[" << fmt("%.4f", seed_acc[0]) << "/" << fmt("%.4f", seed_acc[1]) << "/"
             << fmt("%.4f", seed_acc[2]) << "]";
    for (int m = 0; m < 3; ++m) {
      total.acc[m] += seed_acc[m] / kSeeds;
      total.max_seconds = std::max(total.max_seconds, per_seed_mode_seconds[s][m]);
    }
  }
  const double base = total.acc[0], ft = total.acc[1], lft = total.acc[2];
  const bool ok = lft >= ft && ft >= base && lft - base >= kMinLftGain && total.max_seconds < 900.0;
  return {ok, "baseline " + fmt("%.4f", base) + ", ft " + fmt("%.4f", ft) + ", lft " + fmt("%.4f", lft) +
                  " (need lft >= ft >= baseline and lft - baseline >= 0.02);" + per_seed.str() +
                  "; slowest mode/seed " + fmt("%.0f s", total.max_seconds) + ", total " +
                  fmt("%.0f s", seconds_since(t0))};
}

Outcome determinism_and_persistence() {
  const auto t0 = Clock::now();
  std::vector<Domain> seen;
  for (std::uint64_t d = 1; d <= 3; ++d) seen.push_back(generate_synthetic_domain(acceptance_domain(0, d)));
  TrainConfig cfg;
  cfg.mode = TrainMode::lft;
  cfg.iterations = 100;
  cfg.seed = 99;
  auto run = [&] {
    Rng init = Rng(cfg.seed).substream("init");
    return train_loop(cfg, seen, make_model(cfg, seen.front().dim, init)).model;
  };
  const ModelState a = run(), b = run();
  const std::string text = config_to_text(cfg);
  const std::string bytes_a = encode_checkpoint(a.params, text), bytes_b = encode_checkpoint(b.params, text);
  featwise::testing::TempDir dir("acceptance");
  save_checkpoint(a, text, dir / "a.ftcp");
  const LoadedCheckpoint back = load_checkpoint(dir / "a.ftcp");
  const bool round_trip = back.model.params.identical(a.params) && back.config_text == text;
  const Domain held = generate_synthetic_domain(acceptance_domain(0, 4));
  const EvalReport live = evaluate(a, held, 5, 5, 200, 3);
  const EvalReport loaded = evaluate(back.model, held, 5, 5, 200, 3);
  const bool same_eval = live.accuracies == loaded.accuracies && live.mean == loaded.mean && live.ci95 == loaded.ci95;
  const double s = seconds_since(t0);
  return {bytes_a == bytes_b && round_trip && same_eval && s < 60.0,
          std::string("checkpoints ") + (bytes_a == bytes_b ? "identical" : "DIFFER") + ", round trip " +
              (round_trip ? "bit-exact" : "MISMATCH") + ", reload eval " + (same_eval ? "identical" : "DIFFERS") +
              ", " + fmt("%.1f s", s)};
}

Outcome eval_removes_ft() {
  const auto t0 = Clock::now();
  const Domain d = generate_synthetic_domain(acceptance_domain(1, 1));
  TrainConfig cfg;
  cfg.mode = TrainMode::lft;
  Rng init(3);
  ModelState model = make_model(cfg, d.dim, init);
  const EvalReport base = evaluate(model, d, 5, 5, 200, 8);
  Rng perturb(4);
  bool same = true;
  for (int trial = 0; trial < 5; ++trial) {
    for (const auto& n : model.ft_param_names()) {
      std::vector<double> v(model.params.get(n).numel());
      for (double& x : v) x = perturb.normal(0.0, 20.0);
      model.params.set(n, Tensor::vector(std::move(v)));
    }
    // Advance an unrelated generator between runs; evaluation must not read
    // any state outside its own seed.
    for (int i = 0; i < 1000; ++i) (void)perturb.next_u64();
    const EvalReport r = evaluate(model, d, 5, 5, 200, 8);
    same = same && r.accuracies == base.accuracies;
    Rng a(trial), b(trial + 1000);
    const Episode ep = eval_episode(d, 5, 5, 16, 8, trial);
    same = same && episode_objective(model, model.params, ep, EncodeMode::eval, true, a).item() ==
                       episode_objective(model, model.params, ep, EncodeMode::eval, true, b).item();
  }
  same = same && evaluate(model.without_ft(), d, 5, 5, 200, 8).accuracies == base.accuracies;
  const double s = seconds_since(t0);
  return {same && s < 10.0, std::string(same ? "zero difference" : "DIFFERENCE FOUND") +
                                " across 5 theta_f perturbations and FT removal, " + fmt("%.1f s", s)};
}

Outcome variable_ways() {
  const auto t0 = Clock::now();
  double acc2 = 0, acc5 = 0, acc10 = 0;
  for (std::uint64_t seed = 0; seed < 3; ++seed) {
    std::vector<Domain> seen;
    for (std::uint64_t d = 1; d <= 4; ++d) seen.push_back(generate_synthetic_domain(acceptance_domain(seed, d)));
    const Domain held = generate_synthetic_domain(acceptance_domain(seed, 5));
    TrainConfig cfg;
    cfg.mode = TrainMode::lft;
    cfg.iterations = 2000;
    cfg.seed = derive_seed(seed, "ways");
    const Rng root(cfg.seed);
    Rng init_rng = root.substream("init");
    ModelState model = make_model(cfg, held.dim, init_rng);
    Rng pre_rng = root.substream("pretrain");
    load_encoder(model, pretrain_encoder(model.encoder, model.params, merge_domains(seen, "pool"), {}, pre_rng).encoder);
    model = train_loop(cfg, seen, model).model;
    acc2 += evaluate(model, held, 2, 5, kDefaultTrials, seed).mean / 3;
    acc5 += evaluate(model, held, 5, 5, kDefaultTrials, seed).mean / 3;
    acc10 += evaluate(model, held, 10, 5, kDefaultTrials, seed).mean / 3;
  }
  const double s = seconds_since(t0);
  return {acc2 > acc5 && acc5 > acc10 && s < 300.0, "2-way " + fmt("%.4f", acc2) + " > 5-way " + fmt("%.4f", acc5) +
                                                        " > 10-way " + fmt("%.4f", acc10) + ", " + fmt("%.0f s", s)};
}

struct Criterion {
  int id;
  const char* name;
  Outcome (*run)();
};

const Criterion kCriteria[] = {
    {1, "hyper-parameter dimensionality", hyper_parameter_count},
    {2, "first-order gradients vs finite differences", first_order_gradients},
    {3, "meta-gradient vs finite differences", meta_gradient_oracle},
    {4, "FT sampling distribution", ft_distribution},
    {5, "chance-level sanity", chance_level},
    {6, "cross-domain direction (baseline <= ft <= lft)", cross_domain_direction},
    {7, "determinism and persistence", determinism_and_persistence},
    {8, "evaluation bypasses FT", eval_removes_ft},
    {9, "variable test-time ways", variable_ways},
};

}  // namespace

int main(int argc, char** argv) {
  std::set<int> selected;
  for (int i = 1; i < argc; ++i) selected.insert(std::atoi(argv[i]));
  int failures = 0;
  for (const Criterion& c : kCriteria) {
    if (!selected.empty() && !selected.count(c.id)) continue;
    Outcome o;
    try {
      o = c.run();
    } catch (const std::exception& e) {
      o = {false, std::string("exception: ") + e.what()};
    }
    failures += !o.pass;
    std::cout << "criterion " << c.id << ": " << (o.pass ? "PASS" : "FAIL") << "  " << c.name << "  -- " << o.detail
              << std::endl;
  }
  std::cout << (failures ? std::to_string(failures) + " criterion(s) failed" : std::string("all criteria passed"))
            << std::endl;
  return failures ? 1 : 0;
}
