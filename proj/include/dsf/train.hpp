#pragma once

// Minibatch training loop: sample instances, augment into view groups,
// encode, apply the configured contrastive loss, and take a momentum SGD
// step.  Everything downstream of the config and seed is deterministic, and
// the whole state (encoder, velocity, queue, RNG stream) round-trips through
// a JSON checkpoint so a resumed run reproduces the uninterrupted one
// bitwise.

#include "dsf/common.hpp"
#include "dsf/config.hpp"
#include "dsf/dataset.hpp"
#include "dsf/encoder.hpp"
#include "dsf/eval.hpp"
#include "dsf/loss.hpp"
#include "dsf/serialize.hpp"

#include <json.hpp>

#include <chrono>
#include <cmath>
#include <cstdint>
#include <deque>
#include <limits>
#include <ostream>
#include <random>
#include <sstream>
#include <string>
#include <utility>
#include <vector>

namespace dsf {

struct TrainingDivergedError : std::runtime_error {
  using std::runtime_error::runtime_error;
};

// FIFO store of retired group-2 views (and their vMF summaries) that serves
// as the negative pool when the config asks for queue negatives.
class NegativeQueue {
 public:
  NegativeQueue() = default;
  explicit NegativeQueue(int capacity) : capacity_(capacity) {
    if (capacity < 1) throw ValidationError("loss.queue_capacity", "must be >= 1");
  }

  int capacity() const { return capacity_; }
  long size() const { return static_cast<long>(entries_.size()); }
  bool empty() const { return entries_.empty(); }
  const std::deque<QueueEntry<double>>& entries() const { return entries_; }

  void push(QueueEntry<double> e) {
    if (static_cast<long>(entries_.size()) == capacity_) entries_.pop_front();
    entries_.push_back(std::move(e));
  }

  bool has_any_dist() const {
    for (const auto& e : entries_) {
      if (e.has_dist) return true;
    }
    return false;
  }

  // Snapshot for the loss ops, oldest entry first.
  NegativeSet<double> as_negative_set() const {
    return NegativeSet<double>::queue(
        std::vector<QueueEntry<double>>(entries_.begin(), entries_.end()));
  }

 private:
  int capacity_ = 1;
  std::deque<QueueEntry<double>> entries_;
};

struct MetricsRecord {
  long step = 0;   // 1-based global step
  int epoch = 0;   // 0-based epoch the step belongs to
  double loss = 0.0;
  double margin_pos = 0.0;
  double margin_neg = 0.0;
  double margin = 0.0;
  double mean_kappa = std::numeric_limits<double>::quiet_NaN();
  int skipped_instances = 0;
  double wall_ms = 0.0;
};

inline nlohmann::json metrics_to_json(const MetricsRecord& r) {
  nlohmann::json j;
  j["step"] = r.step;
  j["epoch"] = r.epoch;
  j["loss"] = r.loss;
  j["margin_pos"] = r.margin_pos;
  j["margin_neg"] = r.margin_neg;
  j["margin"] = r.margin;
  if (std::isnan(r.mean_kappa)) {
    j["mean_kappa"] = nullptr;
  } else {
    j["mean_kappa"] = r.mean_kappa;
  }
  j["skipped_instances"] = r.skipped_instances;
  j["wall_ms"] = r.wall_ms;
  return j;
}

struct TrainState {
  MlpEncoder encoder;
  MlpEncoder::Gradients velocity;
  long step = 0;
  NegativeQueue queue;
  std::mt19937_64 rng;
};

class Trainer {
 public:
  explicit Trainer(ExperimentConfig config) : config_(std::move(config)) {
    config_.validate();
    data_ = generate_dataset(config_.dataset, derive_seed(config_.seed, "dataset"));
    state_.encoder = MlpEncoder(config_.encoder, derive_seed(config_.seed, "encoder"));
    zero_velocity();
    state_.queue = NegativeQueue(config_.loss.queue_capacity);
    state_.rng.seed(derive_seed(config_.seed, "train-stream"));
  }

  Trainer(ExperimentConfig config, const nlohmann::json& checkpoint)
      : Trainer(std::move(config)) {
    load_checkpoint(checkpoint);
  }

  const ExperimentConfig& config() const { return config_; }
  const SyntheticDataset& data() const { return data_; }
  const TrainState& state() const { return state_; }
  TrainState& state() { return state_; }

  long train_count() const { return data_.train_count(); }
  long steps_per_epoch() const {
    const long b = config_.optimizer.batch_size;
    return (train_count() + b - 1) / b;
  }
  long total_steps() const { return steps_per_epoch() * config_.optimizer.epochs; }
  bool done() const { return state_.step >= total_steps(); }

  // One optimization step: returns the step's metrics.  Throws
  // TrainingDivergedError when the loss goes non-finite.
  MetricsRecord step() {
    const auto t0 = std::chrono::steady_clock::now();
    const int b = config_.optimizer.batch_size;
    const int m = config_.augmentation.views_per_group;
    const long n = train_count();

    // Indices with replacement and per-instance view seeds, both from the
    // state RNG stream.  Raw modulo keeps the draw identical across standard
    // libraries (std::uniform_int_distribution is not portable); the bias at
    // desk scale (n << 2^64) is negligible.
    std::vector<long> idx(b);
    std::vector<std::uint64_t> view_seed(b);
    for (int i = 0; i < b; ++i) {
      idx[i] = static_cast<long>(state_.rng() % static_cast<std::uint64_t>(n));
      view_seed[i] = state_.rng();
    }

    Eigen::MatrixXd raw(static_cast<long>(b) * 2 * m, config_.dataset.input_dim);
    for (int i = 0; i < b; ++i) {
      raw.middleRows(static_cast<long>(i) * 2 * m, 2 * m) =
          make_views(Eigen::VectorXd(data_.points.row(idx[i]).transpose()),
                     config_.augmentation, view_seed[i]);
    }

    const MlpEncoder::Trace trace = state_.encoder.forward(raw);
    // Encoder rows are already unit, so the batch wraps them directly and
    // loss gradients line up bitwise with the trace.
    const MultiViewBatch<double> batch{trace.z, b, m};

    const LossOutput<double> out = compute_loss(batch);
    if (!std::isfinite(out.loss) || !out.grad_features.allFinite()) {
      throw TrainingDivergedError("training diverged at step " +
                                  std::to_string(state_.step + 1) + ": non-finite loss");
    }

    const MlpEncoder::Gradients grads = state_.encoder.backward(trace, out.grad_features);
    const double lr = config_.optimizer.learning_rate;
    const double mom = config_.optimizer.momentum;
    for (std::size_t k = 0; k < grads.w.size(); ++k) {
      state_.velocity.w[k] = mom * state_.velocity.w[k] + grads.w[k];
      state_.velocity.b[k] = mom * state_.velocity.b[k] + grads.b[k];
      state_.encoder.weights[k] -= lr * state_.velocity.w[k];
      state_.encoder.biases[k] -= lr * state_.velocity.b[k];
    }

    if (config_.loss.negatives == "queue") retire_to_queue(batch);
    ++state_.step;

    MetricsRecord rec;
    rec.step = state_.step;
    rec.epoch = static_cast<int>((state_.step - 1) / steps_per_epoch());
    rec.loss = out.loss;
    rec.margin_pos = out.margin_pos;
    rec.margin_neg = out.margin_neg;
    rec.margin = out.margin;
    rec.mean_kappa = out.mean_kappa;
    rec.skipped_instances = out.skipped_instances;
    rec.wall_ms = std::chrono::duration<double, std::milli>(
                      std::chrono::steady_clock::now() - t0)
                      .count();
    return rec;
  }

  // Runs to completion (resume-aware), optionally streaming one JSON line
  // per step.
  std::vector<MetricsRecord> run(std::ostream* jsonl = nullptr) {
    std::vector<MetricsRecord> records;
    records.reserve(static_cast<std::size_t>(total_steps() - state_.step));
    while (!done()) {
      records.push_back(step());
      if (jsonl != nullptr) *jsonl << metrics_to_json(records.back()).dump() << '\n';
    }
    return records;
  }

  // Embeddings of the raw dataset rows under the current encoder.  The train
  // split is the dataset prefix; round-robin labels keep it class-balanced.
  EmbeddingTable embed_split(const std::string& split) const {
    const long n_train = train_count();
    const bool is_train = split == "train";
    if (!is_train && split != "test") {
      throw std::invalid_argument("embed_split: split must be train or test");
    }
    const long start = is_train ? 0 : n_train;
    const long count = is_train ? n_train : data_.points.rows() - n_train;
    const Eigen::MatrixXd emb = state_.encoder.embed(data_.points.middleRows(start, count));
    std::vector<int> labels(data_.labels.begin() + start,
                            data_.labels.begin() + start + count);
    return EmbeddingTable::create(emb, std::move(labels), split);
  }

  nlohmann::json checkpoint() const {
    nlohmann::json j;
    j["step"] = state_.step;
    j["encoder"] = encoder_to_json(state_.encoder);
    nlohmann::json vw = nlohmann::json::array();
    nlohmann::json vb = nlohmann::json::array();
    for (const auto& mtx : state_.velocity.w) vw.push_back(matrix_to_json(mtx));
    for (const auto& vec : state_.velocity.b) vb.push_back(matrix_to_json(vec));
    j["velocity"] = {{"w", std::move(vw)}, {"b", std::move(vb)}};
    nlohmann::json entries = nlohmann::json::array();
    for (const auto& e : state_.queue.entries()) {
      nlohmann::json je;
      je["views"] = matrix_to_json(e.views);
      je["dist"] = e.has_dist ? vmf_to_json(e.dist) : nlohmann::json(nullptr);
      entries.push_back(std::move(je));
    }
    j["queue"] = {{"capacity", state_.queue.capacity()}, {"entries", std::move(entries)}};
    std::ostringstream rng_state;
    rng_state << state_.rng;
    j["rng"] = rng_state.str();
    return j;
  }

 private:
  void zero_velocity() {
    state_.velocity.w.clear();
    state_.velocity.b.clear();
    for (std::size_t k = 0; k < state_.encoder.weights.size(); ++k) {
      state_.velocity.w.push_back(
          Eigen::MatrixXd::Zero(state_.encoder.weights[k].rows(),
                                state_.encoder.weights[k].cols()));
      state_.velocity.b.push_back(Eigen::VectorXd::Zero(state_.encoder.biases[k].size()));
    }
  }

  void load_checkpoint(const nlohmann::json& j) {
    try {
      state_.step = j.at("step").get<long>();
      state_.encoder = encoder_from_json(j.at("encoder"));
      const auto& v = j.at("velocity");
      if (v.at("w").size() != state_.velocity.w.size()) {
        throw ValidationError("checkpoint.velocity", "layer count disagrees with config");
      }
      for (std::size_t k = 0; k < state_.velocity.w.size(); ++k) {
        state_.velocity.w[k] = matrix_from_json(v.at("w").at(k), "checkpoint.velocity");
        state_.velocity.b[k] = vector_from_json(v.at("b").at(k), "checkpoint.velocity");
      }
      state_.queue = NegativeQueue(j.at("queue").at("capacity").get<int>());
      for (const auto& je : j.at("queue").at("entries")) {
        QueueEntry<double> e;
        e.views = matrix_from_json(je.at("views"), "checkpoint.queue");
        if (!je.at("dist").is_null()) {
          e.dist = vmf_from_json(je.at("dist"));
          e.has_dist = true;
        }
        state_.queue.push(std::move(e));
      }
      std::istringstream rng_state(j.at("rng").get<std::string>());
      rng_state >> state_.rng;
      if (rng_state.fail()) throw ValidationError("checkpoint.rng", "unreadable stream state");
    } catch (const nlohmann::json::exception& err) {
      throw ValidationError("checkpoint", std::string("malformed: ") + err.what());
    }
    if (state_.step > total_steps()) {
      throw ValidationError("checkpoint.step", "beyond the configured schedule");
    }
    if (state_.encoder.spec().input_dim != config_.encoder.input_dim ||
        state_.encoder.spec().output_dim != config_.encoder.output_dim) {
      throw ValidationError("checkpoint.encoder", "shape disagrees with config");
    }
  }

  LossOutput<double> compute_loss(const MultiViewBatch<double>& batch) {
    const TemperatureSetting temp{config_.loss.temperature};
    const bool want_queue = config_.loss.negatives == "queue";
    const std::string& method = config_.loss.method;

    NegativeSet<double> negs = NegativeSet<double>::in_batch();
    if (want_queue) {
      // Warm-up: until the queue has something usable the step falls back to
      // in-batch negatives.
      const bool usable =
          method == "dsf" ? state_.queue.has_any_dist() : !state_.queue.empty();
      if (usable) negs = state_.queue.as_negative_set();
    }

    if (method == "dsf") {
      return divergence_loss(batch, negs, config_.loss.stabilization, temp);
    }
    if (method == "fea_avg") return mean_feature_loss(batch, negs, temp);
    // cosine is the single-view (m = 1) case of the pairwise loss.
    return pairwise_cosine_loss(batch, negs, temp);
  }

  // After the step, every instance's group-2 views retire to the queue as
  // detached negatives, with their vMF summary when estimation succeeds.
  void retire_to_queue(const MultiViewBatch<double>& batch) {
    for (int i = 0; i < batch.batch_size; ++i) {
      QueueEntry<double> e;
      e.views = batch.group(i, 1);
      try {
        e.dist = estimate(batch.group(i, 1), config_.loss.stabilization);
        e.has_dist = true;
      } catch (const DegenerateDirectionError&) {
        e.has_dist = false;
      }
      state_.queue.push(std::move(e));
    }
  }

  ExperimentConfig config_;
  SyntheticDataset data_;
  TrainState state_;
};

}  // namespace dsf
