#pragma once

// Frozen-embedding evaluation: cosine kNN classification and a multinomial
// logistic-regression probe, plus the CSV interchange format for embedding
// tables ("label, p floats" per row).

#include "dsf/common.hpp"

#include <algorithm>
#include <cmath>
#include <fstream>
#include <numeric>
#include <sstream>
#include <string>
#include <vector>

namespace dsf {

struct EmbeddingTable {
  Eigen::MatrixXd embeddings;  // N x p, unit rows
  std::vector<int> labels;
  std::string split;  // "train" or "test"

  long count() const { return embeddings.rows(); }

  static EmbeddingTable create(Eigen::MatrixXd emb, std::vector<int> labels,
                               std::string split) {
    if (emb.rows() != static_cast<long>(labels.size())) {
      throw std::invalid_argument("embedding table: label count mismatch");
    }
    if (emb.rows() == 0) throw std::invalid_argument("embedding table: empty");
    for (long i = 0; i < emb.rows(); ++i) {
      const double n = emb.row(i).norm();
      if (!(n > 1e-12) || !std::isfinite(n)) {
        throw std::invalid_argument("embedding table: row with degenerate norm");
      }
      emb.row(i) /= n;
      if (labels[i] < 0) throw std::invalid_argument("embedding table: negative label");
    }
    return EmbeddingTable{std::move(emb), std::move(labels), std::move(split)};
  }
};

inline int default_knn_k(long train_count) {
  return static_cast<int>(std::min<long>(200, std::max<long>(1, train_count / 10)));
}

// Majority vote among the k nearest training rows by cosine similarity.
// Deterministic tie-breaks: equal similarities prefer the smaller training
// index, equal vote counts prefer the smaller class id.
inline double knn_eval(const EmbeddingTable& train, const EmbeddingTable& test, int k) {
  if (train.count() == 0 || test.count() == 0) {
    throw std::invalid_argument("knn_eval: empty table");
  }
  if (train.embeddings.cols() != test.embeddings.cols()) {
    throw std::invalid_argument("knn_eval: dimension mismatch");
  }
  if (k < 1 || k > train.count()) {
    throw std::invalid_argument("knn_eval: k must lie in [1, train count]");
  }
  const int num_classes = 1 + *std::max_element(train.labels.begin(), train.labels.end());

  long correct = 0;
  std::vector<long> order(train.count());
  std::vector<int> votes(num_classes);
  for (long t = 0; t < test.count(); ++t) {
    const Eigen::VectorXd sims = train.embeddings * test.embeddings.row(t).transpose();
    std::iota(order.begin(), order.end(), 0l);
    std::partial_sort(order.begin(), order.begin() + k, order.end(), [&](long a, long b) {
      if (sims(a) != sims(b)) return sims(a) > sims(b);
      return a < b;
    });
    std::fill(votes.begin(), votes.end(), 0);
    for (int j = 0; j < k; ++j) ++votes[train.labels[order[j]]];
    const int winner = static_cast<int>(
        std::max_element(votes.begin(), votes.end()) - votes.begin());
    if (winner == test.labels[t]) ++correct;
  }
  return static_cast<double>(correct) / static_cast<double>(test.count());
}

// Multinomial logistic regression on frozen embeddings, trained by
// full-batch gradient descent from zero initialization (hence deterministic
// with no seed).  Returns test accuracy; argmax ties resolve to the smaller
// class id.
inline double linear_probe(const EmbeddingTable& train, const EmbeddingTable& test,
                           int epochs, double lr) {
  if (train.count() == 0 || test.count() == 0) {
    throw std::invalid_argument("linear_probe: empty table");
  }
  if (train.embeddings.cols() != test.embeddings.cols()) {
    throw std::invalid_argument("linear_probe: dimension mismatch");
  }
  if (epochs < 1 || !(lr > 0.0)) {
    throw std::invalid_argument("linear_probe: need epochs >= 1 and lr > 0");
  }
  const long n = train.count();
  const long p = train.embeddings.cols();
  const int num_classes =
      1 + std::max(*std::max_element(train.labels.begin(), train.labels.end()),
                   *std::max_element(test.labels.begin(), test.labels.end()));

  Eigen::MatrixXd w = Eigen::MatrixXd::Zero(num_classes, p);
  Eigen::VectorXd bias = Eigen::VectorXd::Zero(num_classes);
  Eigen::MatrixXd onehot = Eigen::MatrixXd::Zero(n, num_classes);
  for (long i = 0; i < n; ++i) onehot(i, train.labels[i]) = 1.0;

  for (int e = 0; e < epochs; ++e) {
    Eigen::MatrixXd logits =
        (train.embeddings * w.transpose()).rowwise() + bias.transpose();
    logits.colwise() -= logits.rowwise().maxCoeff();
    Eigen::MatrixXd prob = logits.array().exp();
    prob.array().colwise() /= prob.rowwise().sum().array();
    if (!prob.allFinite()) {
      throw ConvergenceError("linear_probe: training produced non-finite values", e, 0.0);
    }
    const Eigen::MatrixXd resid = (prob - onehot) / static_cast<double>(n);
    w -= lr * (resid.transpose() * train.embeddings);
    bias -= lr * resid.colwise().sum().transpose();
  }

  long correct = 0;
  const Eigen::MatrixXd logits =
      (test.embeddings * w.transpose()).rowwise() + bias.transpose();
  for (long t = 0; t < test.count(); ++t) {
    int arg = 0;
    logits.row(t).maxCoeff(&arg);  // first maximum = smallest class id
    if (arg == test.labels[t]) ++correct;
  }
  return static_cast<double>(correct) / static_cast<double>(test.count());
}

inline void write_embeddings_csv(const std::string& path, const EmbeddingTable& table) {
  std::ofstream out(path);
  if (!out) throw std::runtime_error("cannot open for writing: " + path);
  out.precision(17);
  for (long i = 0; i < table.count(); ++i) {
    out << table.labels[i];
    for (long j = 0; j < table.embeddings.cols(); ++j) out << ',' << table.embeddings(i, j);
    out << '\n';
  }
}

inline EmbeddingTable read_embeddings_csv(const std::string& path, std::string split) {
  std::ifstream in(path);
  if (!in) throw ValidationError("embeddings", "cannot open: " + path);
  std::vector<int> labels;
  std::vector<std::vector<double>> rows;
  std::string line;
  long lineno = 0;
  while (std::getline(in, line)) {
    ++lineno;
    if (line.empty()) continue;
    std::stringstream ss(line);
    std::string cell;
    std::vector<double> row;
    bool first = true;
    while (std::getline(ss, cell, ',')) {
      try {
        if (first) {
          labels.push_back(std::stoi(cell));
          first = false;
        } else {
          row.push_back(std::stod(cell));
        }
      } catch (const std::exception&) {
        throw ValidationError("embeddings",
                              "unparseable value at " + path + ":" + std::to_string(lineno));
      }
    }
    if (first || row.empty() || (!rows.empty() && row.size() != rows.front().size())) {
      throw ValidationError("embeddings",
                            "malformed row at " + path + ":" + std::to_string(lineno));
    }
    rows.push_back(std::move(row));
  }
  if (rows.empty()) throw ValidationError("embeddings", "no rows in " + path);
  Eigen::MatrixXd emb(rows.size(), rows.front().size());
  for (std::size_t i = 0; i < rows.size(); ++i) {
    for (std::size_t j = 0; j < rows[i].size(); ++j) emb(i, j) = rows[i][j];
  }
  return EmbeddingTable::create(std::move(emb), std::move(labels), std::move(split));
}

}  // namespace dsf
