#pragma once

// Desk-scale synthetic data: a balanced vMF mixture on the input sphere with
// class centers kept apart by a minimum angle, plus the stochastic view
// augmentation (sphere noise around the input direction and coordinate
// dropout) that turns one instance into a group of views.

#include "dsf/common.hpp"
#include "dsf/vmf.hpp"

#include <cmath>
#include <cstdint>
#include <random>
#include <string>
#include <vector>

namespace dsf {

struct DatasetSpec {
  int n = 5000;
  int input_dim = 16;
  int num_classes = 10;
  double class_kappa = 30.0;      // concentration of each class cluster
  double min_angle_deg = 25.0;    // minimum pairwise angle between centers
  double test_fraction = 0.2;

  void validate() const {
    if (n < 4) throw ValidationError("dataset.n", "need at least 4 points");
    if (input_dim < 2) throw ValidationError("dataset.input_dim", "must be >= 2");
    if (num_classes < 2) throw ValidationError("dataset.num_classes", "must be >= 2");
    if (!(class_kappa > 0.0)) throw ValidationError("dataset.class_kappa", "must be > 0");
    if (!(min_angle_deg > 0.0) || !(min_angle_deg < 180.0)) {
      throw ValidationError("dataset.min_angle_deg", "must lie in (0, 180)");
    }
    if (!(test_fraction > 0.0) || !(test_fraction < 0.9)) {
      throw ValidationError("dataset.test_fraction", "must lie in (0, 0.9)");
    }
  }
};

struct SyntheticDataset {
  Eigen::MatrixXd points;   // n x input_dim, unit rows
  std::vector<int> labels;  // class id per row, round-robin over classes
  Eigen::MatrixXd centers;  // num_classes x input_dim
  DatasetSpec spec;

  long train_count() const {
    return points.rows() - static_cast<long>(std::lround(points.rows() * spec.test_fraction));
  }
};

// Rejection-samples class centers until all pairwise angles clear the
// minimum; labels cycle through the classes so every prefix of the dataset
// stays balanced (the train/test split takes a prefix).
inline SyntheticDataset generate_dataset(const DatasetSpec& spec, std::uint64_t seed) {
  spec.validate();
  const double cos_min = std::cos(spec.min_angle_deg * M_PI / 180.0);

  SyntheticDataset out;
  out.spec = spec;
  out.centers.resize(spec.num_classes, spec.input_dim);
  std::uint64_t center_seed = derive_seed(seed, "dataset-centers");
  int placed = 0;
  for (int attempt = 0; placed < spec.num_classes; ++attempt) {
    if (attempt > 2000 * spec.num_classes) {
      throw ValidationError("dataset.min_angle_deg",
                            "could not place this many centers at the requested separation");
    }
    const Eigen::RowVectorXd cand = sample_uniform_sphere(1, spec.input_dim, center_seed++);
    bool ok = true;
    for (int j = 0; j < placed && ok; ++j) ok = cand.dot(out.centers.row(j)) < cos_min;
    if (ok) out.centers.row(placed++) = cand;
  }

  out.points.resize(spec.n, spec.input_dim);
  out.labels.resize(spec.n);
  for (int i = 0; i < spec.n; ++i) out.labels[i] = i % spec.num_classes;
  for (int c = 0; c < spec.num_classes; ++c) {
    const int count = (spec.n - c + spec.num_classes - 1) / spec.num_classes;
    if (count == 0) continue;
    const auto cluster = make_vmf(Eigen::VectorXd(out.centers.row(c).transpose()),
                                  spec.class_kappa);
    const Eigen::MatrixXd draws =
        sample(cluster, count, derive_seed(seed, "dataset-class-" + std::to_string(c)));
    for (int k = 0; k < count; ++k) out.points.row(c + k * spec.num_classes) = draws.row(k);
  }
  return out;
}

struct AugmentationSpec {
  double noise_kappa = 80.0;  // vMF concentration of the view noise (inf = no noise)
  int views_per_group = 2;    // m; an instance yields 2m views
  double dropout_prob = 0.1;  // per-coordinate zeroing probability

  void validate() const {
    if (views_per_group < 1) throw ValidationError("augmentation.views_per_group", "must be >= 1");
    if (!(noise_kappa > 0.0)) throw ValidationError("augmentation.noise_kappa", "must be > 0");
    if (!(dropout_prob >= 0.0) || !(dropout_prob < 1.0)) {
      throw ValidationError("augmentation.dropout_prob", "must lie in [0, 1)");
    }
  }
};

// 2m stochastic views of one input: vMF noise around the input direction,
// then coordinate dropout with renormalization.  A dropout draw that would
// zero (nearly) the whole vector falls back to its undropped view so the
// output always has a direction.
inline Eigen::MatrixXd make_views(const Eigen::VectorXd& x, const AugmentationSpec& spec,
                                  std::uint64_t seed) {
  spec.validate();
  const double norm = x.norm();
  if (!(norm > 1e-12)) throw std::invalid_argument("make_views: input has near-zero norm");
  const Eigen::VectorXd dir = x / norm;
  const int total = 2 * spec.views_per_group;

  Eigen::MatrixXd views(total, x.size());
  if (std::isinf(spec.noise_kappa)) {
    views.rowwise() = dir.transpose();
  } else {
    views = sample(make_vmf(dir, spec.noise_kappa), total, derive_seed(seed, "view-noise"));
  }

  if (spec.dropout_prob > 0.0) {
    std::mt19937_64 rng(derive_seed(seed, "view-dropout"));
    std::bernoulli_distribution drop(spec.dropout_prob);
    Eigen::VectorXd masked(x.size());
    for (int v = 0; v < total; ++v) {
      for (int j = 0; j < x.size(); ++j) masked(j) = drop(rng) ? 0.0 : views(v, j);
      const double mn = masked.norm();
      if (mn > 1e-9) views.row(v) = masked.transpose() / mn;
    }
  }
  return views;
}

}  // namespace dsf
