#pragma once

// Experiment configuration: JSON file with dataset / encoder / augmentation
// / loss / optimizer / eval sections, plus the comparison-suite config that
// runs several methods under a fixed view budget.  Parsing reports the
// offending field on type errors and the byte offset on syntax errors.

#include "dsf/common.hpp"
#include "dsf/dataset.hpp"
#include "dsf/encoder.hpp"
#include "dsf/vmf.hpp"

#include <json.hpp>

#include <cstdint>
#include <fstream>
#include <string>
#include <vector>

namespace dsf {

struct LossSpec {
  std::string method = "dsf";  // cosine | loss_avg | fea_avg | dsf
  double temperature = 1.0;
  std::string negatives = "in_batch";  // in_batch | queue
  int queue_capacity = 4096;
  StabilizationPolicy stabilization;

  void validate() const {
    if (method != "cosine" && method != "loss_avg" && method != "fea_avg" && method != "dsf") {
      throw ValidationError("loss.method", "must be cosine, loss_avg, fea_avg, or dsf");
    }
    if (!(temperature > 0.0)) throw ValidationError("loss.temperature", "must be > 0");
    if (negatives != "in_batch" && negatives != "queue") {
      throw ValidationError("loss.negatives", "must be in_batch or queue");
    }
    if (negatives == "queue" && queue_capacity < 1) {
      throw ValidationError("loss.queue_capacity", "must be >= 1");
    }
    stabilization.validate();
  }
};

struct OptimizerSpec {
  double learning_rate = 0.5;
  double momentum = 0.9;
  int batch_size = 64;
  int epochs = 30;

  void validate() const {
    if (!(learning_rate >= 0.0)) throw ValidationError("optimizer.learning_rate", "must be >= 0");
    if (!(momentum >= 0.0) || !(momentum < 1.0)) {
      throw ValidationError("optimizer.momentum", "must lie in [0, 1)");
    }
    if (batch_size < 1) throw ValidationError("optimizer.batch_size", "must be >= 1");
    if (epochs < 1) throw ValidationError("optimizer.epochs", "must be >= 1");
  }
};

struct EvalSpec {
  int knn_k = 0;  // 0 = automatic: min(200, train count / 10)
  int probe_epochs = 300;
  double probe_lr = 1.0;

  void validate() const {
    if (knn_k < 0) throw ValidationError("eval.knn_k", "must be >= 0 (0 = automatic)");
    if (probe_epochs < 1) throw ValidationError("eval.probe_epochs", "must be >= 1");
    if (!(probe_lr > 0.0)) throw ValidationError("eval.probe_lr", "must be > 0");
  }
};

struct ExperimentConfig {
  std::uint64_t seed = 1;
  std::string out_dir;
  DatasetSpec dataset;
  EncoderSpec encoder;
  AugmentationSpec augmentation;
  LossSpec loss;
  OptimizerSpec optimizer;
  EvalSpec eval;

  // Fixed comparison budget: views touched per step, B * 2m.
  int views_budget() const { return optimizer.batch_size * 2 * augmentation.views_per_group; }

  void validate() const {
    dataset.validate();
    encoder.validate();
    augmentation.validate();
    loss.validate();
    optimizer.validate();
    eval.validate();
    if (encoder.input_dim != dataset.input_dim) {
      throw ValidationError("encoder.input_dim", "must match dataset.input_dim");
    }
    if (loss.method == "cosine" && augmentation.views_per_group != 1) {
      throw ValidationError("augmentation.views_per_group",
                            "plain cosine contrast is the single-view case; use m = 1");
    }
    if (optimizer.batch_size < 2) {
      throw ValidationError("optimizer.batch_size",
                            "training needs >= 2 (in-batch negatives and queue warm-up)");
    }
    const long train_n = dataset.n - std::lround(dataset.n * dataset.test_fraction);
    if (optimizer.batch_size > train_n) {
      throw ValidationError("optimizer.batch_size", "exceeds the training split");
    }
    if (eval.knn_k > train_n) throw ValidationError("eval.knn_k", "exceeds the training split");
  }
};

namespace detail {

template <typename T>
T json_field(const nlohmann::json& j, const std::string& section, const char* name,
             const T& fallback) {
  if (!j.contains(name)) return fallback;
  try {
    return j.at(name).get<T>();
  } catch (const nlohmann::json::exception&) {
    throw ValidationError(section + "." + name, "wrong type");
  }
}

inline const nlohmann::json& json_section(const nlohmann::json& j, const char* name,
                                          const nlohmann::json& empty) {
  if (!j.contains(name)) return empty;
  if (!j.at(name).is_object()) throw ValidationError(name, "must be an object");
  return j.at(name);
}

}  // namespace detail

inline ExperimentConfig config_from_json(const nlohmann::json& j) {
  using detail::json_field;
  static const nlohmann::json empty = nlohmann::json::object();
  ExperimentConfig c;
  c.seed = json_field<std::uint64_t>(j, "", "seed", c.seed);
  c.out_dir = json_field<std::string>(j, "", "out_dir", c.out_dir);

  const auto& d = detail::json_section(j, "dataset", empty);
  c.dataset.n = json_field(d, "dataset", "n", c.dataset.n);
  c.dataset.input_dim = json_field(d, "dataset", "input_dim", c.dataset.input_dim);
  c.dataset.num_classes = json_field(d, "dataset", "num_classes", c.dataset.num_classes);
  c.dataset.class_kappa = json_field(d, "dataset", "class_kappa", c.dataset.class_kappa);
  c.dataset.min_angle_deg = json_field(d, "dataset", "min_angle_deg", c.dataset.min_angle_deg);
  c.dataset.test_fraction = json_field(d, "dataset", "test_fraction", c.dataset.test_fraction);

  const auto& e = detail::json_section(j, "encoder", empty);
  c.encoder.input_dim = json_field(e, "encoder", "input_dim", c.dataset.input_dim);
  c.encoder.hidden = json_field(e, "encoder", "hidden", c.encoder.hidden);
  c.encoder.output_dim = json_field(e, "encoder", "output_dim", c.encoder.output_dim);
  c.encoder.activation = json_field(e, "encoder", "activation", c.encoder.activation);

  const auto& a = detail::json_section(j, "augmentation", empty);
  c.augmentation.noise_kappa = json_field(a, "augmentation", "noise_kappa",
                                          c.augmentation.noise_kappa);
  c.augmentation.views_per_group = json_field(a, "augmentation", "views_per_group",
                                              c.augmentation.views_per_group);
  c.augmentation.dropout_prob = json_field(a, "augmentation", "dropout_prob",
                                           c.augmentation.dropout_prob);

  const auto& l = detail::json_section(j, "loss", empty);
  c.loss.method = json_field(l, "loss", "method", c.loss.method);
  c.loss.temperature = json_field(l, "loss", "temperature", c.loss.temperature);
  c.loss.negatives = json_field(l, "loss", "negatives", c.loss.negatives);
  c.loss.queue_capacity = json_field(l, "loss", "queue_capacity", c.loss.queue_capacity);
  const auto& s = detail::json_section(l, "stabilization", empty);
  c.loss.stabilization.lambda_r =
      json_field(s, "loss.stabilization", "lambda_r", c.loss.stabilization.lambda_r);
  c.loss.stabilization.scale_r_bar =
      json_field(s, "loss.stabilization", "scale_r_bar", c.loss.stabilization.scale_r_bar);
  c.loss.stabilization.normalize_by_dim = json_field(s, "loss.stabilization", "normalize_by_dim",
                                                     c.loss.stabilization.normalize_by_dim);
  c.loss.stabilization.r_bar_floor =
      json_field(s, "loss.stabilization", "r_bar_floor", c.loss.stabilization.r_bar_floor);

  const auto& o = detail::json_section(j, "optimizer", empty);
  c.optimizer.learning_rate = json_field(o, "optimizer", "learning_rate",
                                         c.optimizer.learning_rate);
  c.optimizer.momentum = json_field(o, "optimizer", "momentum", c.optimizer.momentum);
  c.optimizer.batch_size = json_field(o, "optimizer", "batch_size", c.optimizer.batch_size);
  c.optimizer.epochs = json_field(o, "optimizer", "epochs", c.optimizer.epochs);

  const auto& v = detail::json_section(j, "eval", empty);
  c.eval.knn_k = json_field(v, "eval", "knn_k", c.eval.knn_k);
  c.eval.probe_epochs = json_field(v, "eval", "probe_epochs", c.eval.probe_epochs);
  c.eval.probe_lr = json_field(v, "eval", "probe_lr", c.eval.probe_lr);

  c.validate();
  return c;
}

inline nlohmann::json config_to_json(const ExperimentConfig& c) {
  nlohmann::json j;
  j["seed"] = c.seed;
  j["out_dir"] = c.out_dir;
  j["dataset"] = {{"n", c.dataset.n},
                  {"input_dim", c.dataset.input_dim},
                  {"num_classes", c.dataset.num_classes},
                  {"class_kappa", c.dataset.class_kappa},
                  {"min_angle_deg", c.dataset.min_angle_deg},
                  {"test_fraction", c.dataset.test_fraction}};
  j["encoder"] = {{"input_dim", c.encoder.input_dim},
                  {"hidden", c.encoder.hidden},
                  {"output_dim", c.encoder.output_dim},
                  {"activation", c.encoder.activation}};
  j["augmentation"] = {{"noise_kappa", c.augmentation.noise_kappa},
                       {"views_per_group", c.augmentation.views_per_group},
                       {"dropout_prob", c.augmentation.dropout_prob}};
  j["loss"] = {{"method", c.loss.method},
               {"temperature", c.loss.temperature},
               {"negatives", c.loss.negatives},
               {"queue_capacity", c.loss.queue_capacity},
               {"stabilization",
                {{"lambda_r", c.loss.stabilization.lambda_r},
                 {"scale_r_bar", c.loss.stabilization.scale_r_bar},
                 {"normalize_by_dim", c.loss.stabilization.normalize_by_dim},
                 {"r_bar_floor", c.loss.stabilization.r_bar_floor}}}};
  j["optimizer"] = {{"learning_rate", c.optimizer.learning_rate},
                    {"momentum", c.optimizer.momentum},
                    {"batch_size", c.optimizer.batch_size},
                    {"epochs", c.optimizer.epochs}};
  j["eval"] = {{"knn_k", c.eval.knn_k},
               {"probe_epochs", c.eval.probe_epochs},
               {"probe_lr", c.eval.probe_lr}};
  return j;
}

inline nlohmann::json parse_json_file(const std::string& path) {
  std::ifstream in(path);
  if (!in) throw ValidationError("config", "cannot open: " + path);
  try {
    return nlohmann::json::parse(in);
  } catch (const nlohmann::json::parse_error& err) {
    throw ValidationError("config", std::string("parse error in ") + path + ": " + err.what());
  }
}

inline ExperimentConfig load_config(const std::string& path) {
  return config_from_json(parse_json_file(path));
}

// One row of a comparison suite: a method at a view count and batch size.
struct CompareRun {
  std::string method;
  int views_per_group = 1;
  int batch_size = 64;
};

struct CompareSpec {
  ExperimentConfig base;
  int budget = 256;  // required B * 2m for every run
  std::vector<std::uint64_t> seeds = {1, 2, 3, 4, 5};
  std::vector<CompareRun> runs;

  // The default suite: single-view cosine, the two multi-view baselines, and
  // the divergence loss across a view sweep, all at the same budget.
  static CompareSpec defaults() {
    CompareSpec s;
    s.budget = s.base.views_budget();  // 64 * 2 * 2 = 256
    s.runs = {{"cosine", 1, 128}, {"loss_avg", 2, 64}, {"fea_avg", 2, 64},
              {"dsf", 1, 128},    {"dsf", 2, 64},      {"dsf", 4, 32}};
    return s;
  }

  ExperimentConfig config_for(const CompareRun& run, std::uint64_t seed) const {
    ExperimentConfig c = base;
    c.loss.method = run.method;
    c.augmentation.views_per_group = run.views_per_group;
    c.optimizer.batch_size = run.batch_size;
    c.seed = seed;
    c.validate();
    return c;
  }

  void validate() const {
    base.validate();
    if (runs.empty()) throw ValidationError("runs", "comparison needs at least one run");
    if (seeds.empty()) throw ValidationError("seeds", "comparison needs at least one seed");
    for (std::size_t i = 0; i < runs.size(); ++i) {
      const std::string field = "runs[" + std::to_string(i) + "]";
      const int views = runs[i].batch_size * 2 * runs[i].views_per_group;
      if (views != budget) {
        throw ValidationError(field, "budget parity violated: batch_size * 2m = " +
                                         std::to_string(views) + ", expected " +
                                         std::to_string(budget));
      }
      config_for(runs[i], seeds.front());  // full per-run validation
    }
  }
};

inline CompareSpec compare_from_json(const nlohmann::json& j) {
  using detail::json_field;
  static const nlohmann::json empty = nlohmann::json::object();
  CompareSpec s = CompareSpec::defaults();
  if (j.contains("base")) s.base = config_from_json(j.at("base"));
  s.budget = json_field(j, "", "budget", s.base.views_budget());
  s.seeds = json_field(j, "", "seeds", s.seeds);
  if (j.contains("runs")) {
    if (!j.at("runs").is_array()) throw ValidationError("runs", "must be an array");
    s.runs.clear();
    int idx = 0;
    for (const auto& r : j.at("runs")) {
      const std::string section = "runs[" + std::to_string(idx++) + "]";
      CompareRun run;
      run.method = json_field<std::string>(r, section, "method", "");
      run.views_per_group = json_field(r, section, "views_per_group", 1);
      run.batch_size = json_field(r, section, "batch_size", 0);
      s.runs.push_back(run);
    }
  }
  s.validate();
  return s;
}

}  // namespace dsf
