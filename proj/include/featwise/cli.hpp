#pragma once

// Command-line surface. run_cli returns 0 on success, 1 on usage errors and 2
// on runtime errors; messages go to the supplied error stream.

#include <CLI11.hpp>

#include <exception>
#include <filesystem>
#include <fstream>
#include <iostream>
#include <optional>
#include <ostream>
#include <string>
#include <vector>

#include "featwise/checkpoint.hpp"
#include "featwise/config.hpp"
#include "featwise/errors.hpp"
#include "featwise/ft_layer.hpp"
#include "featwise/harness.hpp"
#include "featwise/meta_trainer.hpp"
#include "featwise/task.hpp"

namespace featwise {

namespace cli_detail {

inline void emit(const std::string& text, const std::string& out_path, std::ostream& out) {
  if (out_path.empty()) {
    out << text;
  } else {
    detail::write_file(out_path, text);
  }
}

inline std::vector<Domain> load_domains(const std::vector<std::string>& paths) {
  std::vector<Domain> out;
  for (const auto& p : paths) out.push_back(load_domain(p));
  return out;
}

inline TrainConfig load_config(const std::string& path) {
  if (path.empty()) return TrainConfig{};
  return parse_config(detail::read_file(path));
}

}  // namespace cli_detail

inline int run_cli(const std::vector<std::string>& args, std::ostream& out = std::cout, std::ostream& err = std::cerr) {
  CLI::App app{"Few-shot classification with feature-wise transformation layers", "featwise"};
  app.require_subcommand(1);

  std::string config_path, out_path;
  std::uint64_t seed = 0;
  auto add_common = [&](CLI::App* sub) {
    sub->add_option("--config", config_path, "Configuration file (key = value lines)");
    sub->add_option("--seed", seed, "Seed for every random choice");
    sub->add_option("--out", out_path, "Output path");
  };

  // gen-domain
  SyntheticDomainSpec gen;
  std::size_t gen_latent = 0;
  auto* gen_cmd = app.add_subcommand("gen-domain", "Generate a synthetic domain");
  add_common(gen_cmd);
  gen_cmd->add_option("--classes", gen.num_classes, "Number of classes");
  gen_cmd->add_option("--dim", gen.observed_dim, "Observed feature width");
  gen_cmd->add_option("--per-class", gen.per_class, "Samples per class");
  gen_cmd->add_option("--latent", gen_latent, "Latent width (default min(8, dim))");
  gen_cmd->add_option("--noise", gen.noise, "Latent noise standard deviation");
  gen_cmd->add_option("--warp", gen.warp, "Domain warp strength");
  gen_cmd->add_option("--master-seed", gen.master_seed, "Seed of the class prototypes shared across domains");
  gen_cmd->add_option("--name", gen.name, "Domain name");

  // split
  std::string data_path;
  std::vector<double> fractions{0.6, 0.2, 0.2};
  auto* split_cmd = app.add_subcommand("split", "Partition a domain's classes into train/val/test files");
  add_common(split_cmd);
  split_cmd->add_option("--data", data_path, "Dataset file")->required();
  split_cmd->add_option("--fractions", fractions, "train,val,test fractions")->delimiter(',')->expected(3);

  // pretrain
  std::vector<std::string> pretrain_data;
  PretrainOptions pre;
  auto* pre_cmd = app.add_subcommand("pretrain", "Pre-train the encoder with a temporary linear classifier");
  add_common(pre_cmd);
  pre_cmd->add_option("--data", pretrain_data, "Dataset file(s), pooled by class id")->required()->delimiter(',');
  pre_cmd->add_option("--epochs", pre.epochs, "Training epochs");
  pre_cmd->add_option("--batch", pre.batch_size, "Mini-batch size");
  pre_cmd->add_option("--lr", pre.alpha, "Learning rate");

  // train
  std::vector<std::string> seen_paths;
  std::string init_path, log_path, mode_override;
  std::optional<std::size_t> iterations_override;
  std::optional<double> alpha_override;
  auto* train_cmd = app.add_subcommand("train", "Episodic training (baseline, ft or lft)");
  add_common(train_cmd);
  train_cmd->add_option("--seen", seen_paths, "Seen domain files")->required()->delimiter(',');
  train_cmd->add_option("--init", init_path, "Checkpoint whose matching tensors initialize the model");
  train_cmd->add_option("--mode", mode_override, "Override the configured mode");
  train_cmd->add_option("--iterations", iterations_override, "Override the configured iteration count");
  train_cmd->add_option("--alpha", alpha_override, "Override the configured learning rate");
  train_cmd->add_option("--log", log_path, "Training log CSV");

  // eval / cross-eval
  std::string ckpt_path, domain_path;
  std::vector<std::string> domain_paths;
  std::size_t way = 5, shot = 5, trials = kDefaultTrials, query = kDefaultQuery;
  auto* eval_cmd = app.add_subcommand("eval", "Evaluate a checkpoint on one domain");
  add_common(eval_cmd);
  eval_cmd->add_option("--ckpt", ckpt_path, "Checkpoint")->required();
  eval_cmd->add_option("--domain", domain_path, "Domain file")->required();
  eval_cmd->add_option("--way", way, "Classes per episode");
  eval_cmd->add_option("--shot", shot, "Support items per class");
  eval_cmd->add_option("--query", query, "Query items per class");
  eval_cmd->add_option("--trials", trials, "Number of evaluation episodes");

  auto* cross_cmd = app.add_subcommand("cross-eval", "Evaluate a checkpoint on several domains");
  add_common(cross_cmd);
  cross_cmd->add_option("--ckpt", ckpt_path, "Checkpoint")->required();
  cross_cmd->add_option("--domain,--domains", domain_paths, "Domain files")->required()->delimiter(',');
  cross_cmd->add_option("--way", way, "Classes per episode");
  cross_cmd->add_option("--shot", shot, "Support items per class");
  cross_cmd->add_option("--query", query, "Query items per class");
  cross_cmd->add_option("--trials", trials, "Number of evaluation episodes");

  // stats
  auto* stats_ft_cmd = app.add_subcommand("stats-ft", "Quartiles of softplus(theta) per FT layer");
  add_common(stats_ft_cmd);
  stats_ft_cmd->add_option("--ckpt", ckpt_path, "Checkpoint")->required();

  std::size_t samples = 100;
  auto* proj_cmd = app.add_subcommand("stats-projection", "2-D PCA projection of embeddings per domain");
  add_common(proj_cmd);
  proj_cmd->add_option("--ckpt", ckpt_path, "Checkpoint")->required();
  proj_cmd->add_option("--domain,--domains", domain_paths, "Domain files")->required()->delimiter(',');
  proj_cmd->add_option("--samples", samples, "Samples per domain");

  std::vector<std::string> argv_store(args.rbegin(), args.rend());
  try {
    app.parse(argv_store);
  } catch (const CLI::CallForHelp& e) {
    return app.exit(e, out, err);
  } catch (const CLI::CallForAllHelp& e) {
    return app.exit(e, out, err);
  } catch (const CLI::ParseError& e) {
    app.exit(e, err, err);
    return 1;
  }

  try {
    if (gen_cmd->parsed()) {
      if (out_path.empty()) throw ConfigError("gen-domain: --out is required");
      gen.domain_seed = seed;
      gen.latent_dim = gen_latent ? gen_latent : std::min<std::size_t>(8, gen.observed_dim);
      if (gen.name.empty()) gen.name = std::filesystem::path(out_path).stem().string();
      save_domain(generate_synthetic_domain(gen), out_path);
    } else if (split_cmd->parsed()) {
      if (out_path.empty()) throw ConfigError("split: --out prefix is required");
      const Domain d = load_domain(data_path);
      Rng rng(seed);
      const Domain tagged = split_classes(d, {fractions[0], fractions[1], fractions[2]}, rng);
      const auto ext = std::filesystem::path(data_path).extension().string();
      for (Split s : {Split::train, Split::val, Split::test}) {
        const std::string name = out_path + "_" + std::string(split_name(s));
        const Domain part = domain_subset(tagged, s, std::filesystem::path(name).stem().string());
        if (part.classes.empty()) continue;
        save_domain(part, name + (ext.empty() ? ".fsds" : ext));
      }
    } else if (pre_cmd->parsed()) {
      if (out_path.empty()) throw ConfigError("pretrain: --out is required");
      TrainConfig cfg = cli_detail::load_config(config_path);
      if (!seed) seed = cfg.seed;
      const std::vector<Domain> ds = cli_detail::load_domains(pretrain_data);
      const Domain pool = merge_domains(ds, "pretrain");
      Rng rng(seed);
      Rng init_rng = rng.substream("init");
      ModelState model = make_model(cfg, pool.dim, init_rng);
      Rng pre_rng = rng.substream("pretrain");
      const PretrainResult r = pretrain_encoder(model.encoder, model.params, pool, pre, pre_rng);
      load_encoder(model, r.encoder);
      for (std::size_t e = 0; e < r.epoch_losses.size(); ++e) {
        err << "epoch " << e << " loss " << r.epoch_losses[e] << '\n';
      }
      save_checkpoint(model, config_to_text(cfg), out_path);
    } else if (train_cmd->parsed()) {
      if (out_path.empty()) throw ConfigError("train: --out is required");
      TrainConfig cfg = cli_detail::load_config(config_path);
      if (train_cmd->count("--seed")) cfg.seed = seed;
      if (!mode_override.empty()) cfg.mode = parse_mode(mode_override);
      if (iterations_override) cfg.iterations = *iterations_override;
      if (alpha_override) cfg.alpha = *alpha_override;
      cfg.validate();
      const std::vector<Domain> seen = cli_detail::load_domains(seen_paths);
      Rng init_rng = Rng(cfg.seed).substream("init");
      ModelState model = make_model(cfg, seen.front().dim, init_rng);
      if (!init_path.empty()) {
        const LoadedCheckpoint init = load_checkpoint(init_path);
        for (const auto& [name, t] : init.model.params) {
          if (model.is_ft_name(name) || !model.params.contains(name)) continue;
          model.params.set(name, t);
        }
      }
      std::ofstream log_file;
      TrainOptions opts;
      opts.warn = &err;
      if (!log_path.empty()) {
        log_file.open(log_path);
        if (!log_file) throw IoError("cannot write '" + log_path + "'");
        opts.log = &log_file;
      }
      const TrainResult r = train_loop(cfg, seen, model, opts);
      save_checkpoint(r.model, config_to_text(cfg), out_path);
    } else if (eval_cmd->parsed()) {
      const LoadedCheckpoint ck = load_checkpoint(ckpt_path);
      const Domain d = load_domain(domain_path);
      const EvalReport report = evaluate(ck.model, d, way, shot, trials, seed, query);
      cli_detail::emit(eval_report_csv(report), out_path, out);
    } else if (cross_cmd->parsed()) {
      const LoadedCheckpoint ck = load_checkpoint(ckpt_path);
      const std::vector<Domain> ds = cli_detail::load_domains(domain_paths);
      cli_detail::emit(cross_domain_csv(cross_domain_matrix(ck.model, ds, way, shot, trials, seed, query)), out_path,
                       out);
    } else if (stats_ft_cmd->parsed()) {
      const LoadedCheckpoint ck = load_checkpoint(ckpt_path);
      if (!ck.model.has_ft()) throw ConfigError("stats-ft: checkpoint has no FT parameters");
      cli_detail::emit(quartiles_to_csv(quartile_stats(ck.model.ft())), out_path, out);
    } else if (proj_cmd->parsed()) {
      const LoadedCheckpoint ck = load_checkpoint(ckpt_path);
      const std::vector<Domain> ds = cli_detail::load_domains(domain_paths);
      cli_detail::emit(projection_csv(feature_projection(ck.model, ds, samples, seed)), out_path, out);
    }
  } catch (const std::exception& e) {
    err << "error: " << e.what() << '\n';
    return 2;
  }
  return 0;
}

inline int run_cli(int argc, const char* const* argv, std::ostream& out = std::cout, std::ostream& err = std::cerr) {
  std::vector<std::string> args;
  for (int i = 1; i < argc; ++i) args.emplace_back(argv[i]);
  return run_cli(args, out, err);
}

}  // namespace featwise
