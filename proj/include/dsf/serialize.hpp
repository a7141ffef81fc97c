#pragma once

// JSON round-trips for the pieces that go into checkpoints: dense matrices,
// fitted distributions, encoder weights.  Doubles survive a round-trip
// bitwise (the writer emits shortest-round-trip decimals), which is what
// makes resume-from-checkpoint exact.

#include "dsf/common.hpp"
#include "dsf/encoder.hpp"
#include "dsf/vmf.hpp"

#include <json.hpp>

#include <vector>

namespace dsf {

inline nlohmann::json matrix_to_json(const Eigen::Ref<const Eigen::MatrixXd>& m) {
  nlohmann::json rows = nlohmann::json::array();
  for (Eigen::Index i = 0; i < m.rows(); ++i) {
    nlohmann::json row = nlohmann::json::array();
    for (Eigen::Index j = 0; j < m.cols(); ++j) row.push_back(m(i, j));
    rows.push_back(std::move(row));
  }
  return rows;
}

inline Eigen::MatrixXd matrix_from_json(const nlohmann::json& j, const char* field) {
  if (!j.is_array() || j.empty()) throw ValidationError(field, "expected a non-empty array");
  const bool nested = j.front().is_array();
  const Eigen::Index rows = static_cast<Eigen::Index>(j.size());
  const Eigen::Index cols =
      nested ? static_cast<Eigen::Index>(j.front().size()) : Eigen::Index{1};
  Eigen::MatrixXd m(rows, nested ? cols : 1);
  for (Eigen::Index i = 0; i < rows; ++i) {
    const auto& row = j.at(static_cast<std::size_t>(i));
    if (nested) {
      if (!row.is_array() || static_cast<Eigen::Index>(row.size()) != cols) {
        throw ValidationError(field, "ragged matrix rows");
      }
      for (Eigen::Index k = 0; k < cols; ++k) {
        m(i, k) = row.at(static_cast<std::size_t>(k)).get<double>();
      }
    } else {
      m(i, 0) = row.get<double>();
    }
  }
  return m;
}

inline Eigen::VectorXd vector_from_json(const nlohmann::json& j, const char* field) {
  const Eigen::MatrixXd m = matrix_from_json(j, field);
  if (m.cols() != 1) throw ValidationError(field, "expected a flat array");
  return m.col(0);
}

inline nlohmann::json vmf_to_json(const VmfDistribution<double>& d) {
  nlohmann::json j;
  j["mu"] = matrix_to_json(d.mu);
  j["kappa"] = d.kappa;
  j["dim"] = d.dim;
  return j;
}

inline VmfDistribution<double> vmf_from_json(const nlohmann::json& j) {
  VmfDistribution<double> d;
  d.mu = vector_from_json(j.at("mu"), "vmf.mu");
  d.kappa = j.at("kappa").get<double>();
  d.dim = j.at("dim").get<int>();
  if (d.mu.size() != d.dim) throw ValidationError("vmf.mu", "length disagrees with dim");
  return d;
}

inline nlohmann::json encoder_to_json(const MlpEncoder& enc) {
  nlohmann::json j;
  j["spec"] = {{"input_dim", enc.spec().input_dim},
               {"hidden", enc.spec().hidden},
               {"output_dim", enc.spec().output_dim},
               {"activation", enc.spec().activation}};
  nlohmann::json w = nlohmann::json::array();
  nlohmann::json b = nlohmann::json::array();
  for (const auto& m : enc.weights) w.push_back(matrix_to_json(m));
  for (const auto& v : enc.biases) b.push_back(matrix_to_json(v));
  j["weights"] = std::move(w);
  j["biases"] = std::move(b);
  return j;
}

inline MlpEncoder encoder_from_json(const nlohmann::json& j) {
  EncoderSpec spec;
  const auto& s = j.at("spec");
  spec.input_dim = s.at("input_dim").get<int>();
  spec.hidden = s.at("hidden").get<std::vector<int>>();
  spec.output_dim = s.at("output_dim").get<int>();
  spec.activation = s.at("activation").get<std::string>();
  MlpEncoder enc(spec, 0);
  const auto& w = j.at("weights");
  const auto& b = j.at("biases");
  if (w.size() != enc.weights.size() || b.size() != enc.biases.size()) {
    throw ValidationError("encoder.weights", "layer count disagrees with spec");
  }
  for (std::size_t k = 0; k < enc.weights.size(); ++k) {
    Eigen::MatrixXd wk = matrix_from_json(w.at(k), "encoder.weights");
    Eigen::VectorXd bk = vector_from_json(b.at(k), "encoder.biases");
    if (wk.rows() != enc.weights[k].rows() || wk.cols() != enc.weights[k].cols() ||
        bk.size() != enc.biases[k].size()) {
      throw ValidationError("encoder.weights", "layer shape disagrees with spec");
    }
    enc.weights[k] = std::move(wk);
    enc.biases[k] = std::move(bk);
  }
  return enc;
}

}  // namespace dsf
