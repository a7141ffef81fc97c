#pragma once

// Command-line front end.  Subcommands: table1, kappa-curves, theorem-check,
// gradcheck, train, eval, compare.  Exit codes: 0 success, 1 validation
// error, 2 numerical failure, 3 a check command found a violation.
//
// The whole app lives in run_cli() so tests can drive it in-process and
// assert on exit codes and output.

#include "dsf/common.hpp"
#include "dsf/experiments.hpp"
#include "dsf/train.hpp"

#include <CLI11.hpp>

#include <algorithm>
#include <cstdint>
#include <filesystem>
#include <fstream>
#include <iostream>
#include <optional>
#include <string>
#include <vector>

namespace dsf {

namespace detail {

// Writes `body(stream)` either to <out_dir>/<name> (echoing the path) or to
// `fallback` when no output directory was given.
template <typename Body>
void emit(const std::string& out_dir, const char* name, std::ostream& fallback,
          Body&& body) {
  if (out_dir.empty()) {
    body(fallback);
    return;
  }
  namespace fs = std::filesystem;
  fs::create_directories(out_dir);
  const std::string path = (fs::path(out_dir) / name).string();
  std::ofstream file(path);
  if (!file) throw std::runtime_error("cannot open for writing: " + path);
  body(file);
  fallback << path << '\n';
}

}  // namespace detail

inline int run_cli(std::vector<std::string> args, std::ostream& out = std::cout,
                   std::ostream& err = std::cerr) {
  CLI::App app{"divergence-based similarity experiments"};
  app.require_subcommand(1);

  std::string config_path, out_dir, format_name = "text";
  std::optional<std::uint64_t> seed;
  app.add_option("--config", config_path, "JSON config file")->configurable(false);
  app.add_option("--seed", seed, "root seed override");
  app.add_option("--out", out_dir, "output directory");
  app.add_option("--format", format_name, "output format")
      ->check(CLI::IsMember({"text", "csv", "json"}));

  auto* table1 = app.add_subcommand(
      "table1", "optimal-case InfoNCE loss grid over temperatures and negative counts");

  int curve_p = 128;
  double curve_lambda = 0.95;
  auto* kappa_curves = app.add_subcommand(
      "kappa-curves", "raw vs stabilized concentration estimate over the resultant length");
  kappa_curves->add_option("--p", curve_p, "feature dimension");
  kappa_curves->add_option("--lambda", curve_lambda, "resultant scaling factor");

  int trials = 100;
  auto* theorem = app.add_subcommand(
      "theorem-check",
      "randomized equivalence of divergence and cosine InfoNCE at matched concentration");
  theorem->add_option("--trials", trials, "number of randomized trials");

  auto* gradcheck = app.add_subcommand(
      "gradcheck", "finite-difference audit of every loss gradient");

  auto* train = app.add_subcommand("train", "train one configuration and evaluate it");
  std::string resume_path;
  train->add_option("--resume", resume_path, "checkpoint.json to resume from");

  auto* eval = app.add_subcommand("eval", "kNN + linear probe on stored embedding tables");
  std::string train_csv, test_csv;
  int eval_k = 0;
  int probe_epochs = 300;
  double probe_lr = 1.0;
  eval->add_option("--train-csv", train_csv, "training embeddings")->required();
  eval->add_option("--test-csv", test_csv, "test embeddings")->required();
  eval->add_option("--k", eval_k, "kNN neighbour count (0 = automatic)");
  eval->add_option("--probe-epochs", probe_epochs, "probe training epochs");
  eval->add_option("--probe-lr", probe_lr, "probe learning rate");

  auto* compare = app.add_subcommand(
      "compare", "train all methods under one view budget and tabulate accuracies");

  for (auto* sub : {table1, kappa_curves, theorem, gradcheck, train, eval, compare}) {
    sub->fallthrough();
  }

  try {
    std::reverse(args.begin(), args.end());
    app.parse(std::move(args));

    if (table1->parsed()) {
      const auto format = parse_format(format_name);
      const char* name = format == OutputFormat::json ? "table1.json"
                         : format == OutputFormat::csv ? "table1.csv"
                                                       : "table1.txt";
      detail::emit(out_dir, name, out,
                   [&](std::ostream& s) { write_floor_table(reference_floor_grid(), format, s); });
      return 0;
    }

    if (kappa_curves->parsed()) {
      detail::emit(out_dir, "kappa_curves.csv", out,
                   [&](std::ostream& s) { write_kappa_curves(curve_p, curve_lambda, s); });
      return 0;
    }

    if (theorem->parsed()) {
      const auto report = theorem_trial_report(seed.value_or(1), trials);
      detail::emit(out_dir, "theorem_check.json", out,
                   [&](std::ostream& s) { s << report.dump(2) << '\n'; });
      return report.at("pass").get<bool>() ? 0 : 3;
    }

    if (gradcheck->parsed()) {
      const auto report = gradcheck_report(seed.value_or(1));
      detail::emit(out_dir, "gradcheck.json", out,
                   [&](std::ostream& s) { s << report.dump(2) << '\n'; });
      return report.at("pass").get<bool>() ? 0 : 3;
    }

    if (train->parsed()) {
      ExperimentConfig cfg = config_path.empty()
                                 ? config_from_json(nlohmann::json::object())
                                 : load_config(config_path);
      if (seed) cfg.seed = *seed;
      if (!out_dir.empty()) cfg.out_dir = out_dir;
      nlohmann::json checkpoint;
      const nlohmann::json* resume = nullptr;
      if (!resume_path.empty()) {
        checkpoint = parse_json_file(resume_path);
        resume = &checkpoint;
      }
      const auto result = run_training(cfg, resume);
      out << result.dump(2) << '\n';
      return 0;
    }

    if (eval->parsed()) {
      const auto result = run_eval(train_csv, test_csv, eval_k, probe_epochs, probe_lr);
      detail::emit(out_dir, "eval.json", out,
                   [&](std::ostream& s) { s << result.dump(2) << '\n'; });
      return 0;
    }

    if (compare->parsed()) {
      CompareSpec spec = config_path.empty()
                             ? CompareSpec::defaults()
                             : compare_from_json(parse_json_file(config_path));
      if (seed) spec.seeds = {*seed};
      if (out_dir.empty()) {
        throw ValidationError("out_dir", "compare needs --out for its CSV tables");
      }
      const auto result = run_comparison(spec, out_dir, &out);
      out << result.dump(2) << '\n';
      return 0;
    }
  } catch (const CLI::ParseError& e) {
    const int code = app.exit(e, out, err);
    return code == 0 ? 0 : 1;
  } catch (const ValidationError& e) {
    err << "validation error [" << e.field() << "]: " << e.what() << '\n';
    return 1;
  } catch (const std::invalid_argument& e) {
    err << "validation error: " << e.what() << '\n';
    return 1;
  } catch (const std::domain_error& e) {
    err << "validation error: " << e.what() << '\n';
    return 1;
  } catch (const ConvergenceError& e) {
    err << "numerical failure: " << e.what() << '\n';
    return 2;
  } catch (const TrainingDivergedError& e) {
    err << "numerical failure: " << e.what() << '\n';
    return 2;
  } catch (const std::exception& e) {
    err << "error: " << e.what() << '\n';
    return 2;
  }
  return 0;
}

}  // namespace dsf
