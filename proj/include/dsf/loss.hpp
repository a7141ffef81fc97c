#pragma once

// Multi-view contrastive losses over groups of embeddings on S^{p-1}.
//
// Each training instance contributes 2m views, split into two groups of m.
// The divergence loss summarizes each group as a vMF distribution and scores
// pairs by the negative KL divergence; the two baselines score pairs by
// cosine similarity, either averaged over view pairs or taken between
// unnormalized group means.  All losses share the InfoNCE contrast and
// return analytic gradients with respect to every feature row, projected
// onto the tangent space of the sphere (callers renormalize features, so the
// tangent gradient is exactly the gradient of loss-after-renormalization).

#include "dsf/bessel.hpp"
#include "dsf/common.hpp"
#include "dsf/vmf.hpp"

#include <algorithm>
#include <cmath>
#include <limits>
#include <optional>
#include <stdexcept>
#include <utility>
#include <vector>

namespace dsf {

// Features for B instances with 2m views each, stored as unit rows in
// instance-major order: row (i*2 + g)*m + l is view l of group g of
// instance i.
template <typename Scalar = double>
struct MultiViewBatch {
  MatrixX<Scalar> features;
  int batch_size = 0;      // B
  int views_per_group = 0; // m

  int dim() const { return static_cast<int>(features.cols()); }
  int rows_per_instance() const { return 2 * views_per_group; }

  auto group(int instance, int g) const {
    return features.middleRows((instance * 2 + g) * views_per_group, views_per_group);
  }
  int group_start(int instance, int g) const { return (instance * 2 + g) * views_per_group; }

  // Rows are renormalized here; a near-zero row has no direction and is
  // rejected.
  static MultiViewBatch from_features(MatrixX<Scalar> f, int batch_size, int views_per_group) {
    if (batch_size < 1) throw std::invalid_argument("batch: need at least one instance");
    if (views_per_group < 1) throw std::invalid_argument("batch: need at least one view per group");
    if (f.cols() < 2) throw std::invalid_argument("batch: feature dimension must be >= 2");
    if (f.rows() != static_cast<long>(batch_size) * 2 * views_per_group) {
      throw std::invalid_argument("batch: feature rows must equal batch_size * 2m");
    }
    for (long i = 0; i < f.rows(); ++i) {
      const Scalar n = f.row(i).norm();
      if (!(n > Scalar(1e-12)) || !std::isfinite(n)) {
        throw std::invalid_argument("batch: feature row has near-zero or non-finite norm");
      }
      f.row(i) /= n;
    }
    return MultiViewBatch{std::move(f), batch_size, views_per_group};
  }
};

// One retired instance: its detached group-2 views, plus the vMF summary of
// those views when it exists (estimation can degenerate).
template <typename Scalar = double>
struct QueueEntry {
  MatrixX<Scalar> views;  // m x p unit rows
  VmfDistribution<Scalar> dist;
  bool has_dist = false;
};

// Where the InfoNCE negatives come from: the other instances of the current
// batch (gradients flow into them) or a queue of detached past entries.
template <typename Scalar = double>
struct NegativeSet {
  enum class Source { InBatch, Queue };
  Source source = Source::InBatch;
  std::vector<QueueEntry<Scalar>> entries;  // used only in Queue mode

  static NegativeSet in_batch() { return NegativeSet{Source::InBatch, {}}; }
  static NegativeSet queue(std::vector<QueueEntry<Scalar>> e) {
    return NegativeSet{Source::Queue, std::move(e)};
  }
};

struct TemperatureSetting {
  double tau = 1.0;
  void validate() const {
    if (!(tau > 0.0) || !std::isfinite(tau)) {
      throw ValidationError("loss.temperature", "must be finite and > 0");
    }
  }
};

template <typename Scalar = double>
struct LossOutput {
  Scalar loss = Scalar(0);
  MatrixX<Scalar> grad_features;  // same shape as the batch, tangent rows
  // Mean temperature-scaled similarity of positive pairs, of negatives, and
  // their gap.
  Scalar margin_pos = Scalar(0);
  Scalar margin_neg = Scalar(0);
  Scalar margin = Scalar(0);
  // Mean estimated concentration (divergence loss only, NaN otherwise).
  Scalar mean_kappa = std::numeric_limits<Scalar>::quiet_NaN();
  int skipped_instances = 0;
  int negatives_per_anchor = 0;
};

// Cosine similarity of two unit vectors (their dot product).
template <typename DerivedA, typename DerivedB>
typename DerivedA::Scalar sim_cos(const Eigen::MatrixBase<DerivedA>& x,
                                  const Eigen::MatrixBase<DerivedB>& y) {
  if (x.size() != y.size()) throw std::invalid_argument("sim_cos: dimension mismatch");
  return (x.transpose() * y.derived())(0);
}

// Distribution similarity: negative KL divergence, so larger is closer.
template <typename Scalar>
Scalar sim_div(const VmfDistribution<Scalar>& a, const VmfDistribution<Scalar>& b) {
  return -kl_divergence(a, b);
}

namespace detail {

// InfoNCE value and softmax weights over {positive} + negatives, all in
// one stable pass.  With u = s / tau,
//   L = -log( e^{u+} / (e^{u+} + sum_j e^{u_j}) ),
//   dL/du+ = w+ - 1,  dL/du_j = w_j,  where w are the softmax weights.
template <typename Scalar>
struct ContrastParts {
  Scalar loss;
  Scalar w_pos;
  VectorX<Scalar> w_neg;
};

template <typename Scalar>
ContrastParts<Scalar> contrast_parts(Scalar sim_pos, const VectorX<Scalar>& sim_neg,
                                     Scalar tau) {
  if (sim_neg.size() == 0) throw std::invalid_argument("info_nce: need at least one negative");
  if (!std::isfinite(sim_pos) || !sim_neg.allFinite()) {
    throw std::invalid_argument("info_nce: similarities must be finite");
  }
  const Scalar u_pos = sim_pos / tau;
  const VectorX<Scalar> u = sim_neg / tau;
  const Scalar m = std::max(u_pos, u.maxCoeff());
  ContrastParts<Scalar> out;
  out.w_neg = (u.array() - m).exp();
  const Scalar neg_mass = out.w_neg.sum();
  const Scalar e_pos = std::exp(u_pos - m);
  const Scalar z = e_pos + neg_mass;
  out.w_pos = e_pos / z;
  out.w_neg /= z;
  // When the positive dominates, log1p keeps losses below machine epsilon
  // from flushing to zero.
  out.loss = m == u_pos ? std::log1p(neg_mass) : std::log(z) + (m - u_pos);
  return out;
}

}  // namespace detail

// InfoNCE loss for one anchor given the raw (untempered) similarities.
template <typename Scalar>
Scalar info_nce(Scalar sim_pos, const VectorX<Scalar>& sim_neg, TemperatureSetting temp) {
  temp.validate();
  return detail::contrast_parts(sim_pos, sim_neg, Scalar(temp.tau)).loss;
}

namespace detail {

// Accumulates margin statistics (all post-temperature).
template <typename Scalar>
struct MarginTally {
  Scalar pos_sum = Scalar(0);
  long pos_n = 0;
  Scalar neg_sum = Scalar(0);
  long neg_n = 0;

  void add_pos(Scalar s) { pos_sum += s; ++pos_n; }
  void add_neg(Scalar s) { neg_sum += s; ++neg_n; }
  void write(LossOutput<Scalar>& out) const {
    out.margin_pos = pos_n ? pos_sum / Scalar(pos_n) : Scalar(0);
    out.margin_neg = neg_n ? neg_sum / Scalar(neg_n) : Scalar(0);
    out.margin = out.margin_pos - out.margin_neg;
  }
};

// A view group's vMF summary with everything the gradient needs cached:
// Bessel ratio, its derivative, log I at kappa, and slots that accumulate
// dLoss/dmu and dLoss/dkappa.
template <typename Scalar>
struct GroupNode {
  VmfEstimate<Scalar> est;
  Scalar ratio = Scalar(0);        // A_p(kappa)
  Scalar ratio_dk = Scalar(0);     // A_p'(kappa)
  Scalar log_i = Scalar(0);        // log I_{p/2-1}(kappa)
  VectorX<Scalar> g_mu;
  Scalar g_kappa = Scalar(0);

  static std::optional<GroupNode> build(const Eigen::Ref<const MatrixX<Scalar>>& views,
                                        const StabilizationPolicy& policy) {
    GroupNode n;
    try {
      n.est = estimate_with_gradient(views, policy);
    } catch (const DegenerateDirectionError&) {
      return std::nullopt;
    }
    const int p = n.est.dist.dim;
    const Scalar nu = Scalar(0.5) * p - Scalar(1);
    n.ratio = bessel_ratio(p, n.est.dist.kappa);
    n.ratio_dk = bessel_ratio_dkappa(p, n.est.dist.kappa);
    n.log_i = log_bessel_i(nu, n.est.dist.kappa);
    n.g_mu = VectorX<Scalar>::Zero(p);
    return n;
  }
};

// KL(q || t) from cached pieces.
template <typename Scalar>
Scalar node_kl(const GroupNode<Scalar>& q, Scalar t_kappa, Scalar t_log_i, Scalar cosine,
               Scalar nu) {
  const Scalar t1 =
      nu > Scalar(0) ? nu * (std::log(q.est.dist.kappa) - std::log(t_kappa)) : Scalar(0);
  return t1 + (t_log_i - q.log_i) +
         q.ratio * (q.est.dist.kappa - t_kappa * cosine);
}

// Adds coef * dKL(q||t)/d(q params) into q's slots, and the target-side
// derivative into t's slots when t is differentiable.  The query-side kappa
// derivative collapses to A'(k_q) (k_q - k_t c) because the normalizer and
// alignment terms cancel through d log I / dk = A + nu/kappa.
template <typename Scalar>
void accumulate_kl_grad(GroupNode<Scalar>& q, const VectorX<Scalar>& t_mu, Scalar t_kappa,
                        Scalar t_ratio, Scalar cosine, Scalar coef,
                        GroupNode<Scalar>* t_slots) {
  q.g_kappa += coef * q.ratio_dk * (q.est.dist.kappa - t_kappa * cosine);
  q.g_mu -= coef * q.ratio * t_kappa * t_mu;
  if (t_slots != nullptr) {
    t_slots->g_kappa += coef * (t_ratio - q.ratio * cosine);
    t_slots->g_mu -= coef * q.ratio * t_kappa * q.est.dist.mu;
  }
}

// Converts a group's accumulated (g_mu, g_kappa) into the gradient shared by
// each of its m feature rows: through mu = zbar/|zbar| (tangent projection
// divided by the resultant length), through kappa(|zbar|), and through
// zbar = mean of rows.
template <typename Scalar>
VectorX<Scalar> group_row_grad(const GroupNode<Scalar>& node, int m) {
  const VectorX<Scalar>& mu = node.est.dist.mu;
  const Scalar r = node.est.dist.r_bar_raw;
  VectorX<Scalar> g_zbar = (node.g_mu - mu * mu.dot(node.g_mu)) / r;
  g_zbar += node.g_kappa * node.est.dkappa_drbar * mu;
  return g_zbar / Scalar(m);
}

// Projects every gradient row onto the tangent space at its feature row.
template <typename Scalar>
void project_tangent(const MatrixX<Scalar>& features, MatrixX<Scalar>& grads) {
  for (long i = 0; i < features.rows(); ++i) {
    grads.row(i) -= features.row(i) * features.row(i).dot(grads.row(i));
  }
}

template <typename Scalar>
void check_negative_source(const MultiViewBatch<Scalar>& batch,
                           const NegativeSet<Scalar>& negatives) {
  if (negatives.source == NegativeSet<Scalar>::Source::InBatch && batch.batch_size < 2) {
    throw std::invalid_argument("negatives: in-batch mode needs at least two instances");
  }
  if (negatives.source == NegativeSet<Scalar>::Source::Queue && negatives.entries.empty()) {
    throw std::invalid_argument("negatives: queue mode needs at least one entry");
  }
  for (const auto& e : negatives.entries) {
    if (e.views.cols() != batch.dim()) {
      throw std::invalid_argument("negatives: queue entry dimension mismatch");
    }
  }
}

}  // namespace detail

// Divergence-based contrastive loss.  Each instance's two view groups are
// summarized as vMF distributions; the anchor is group 1's distribution, the
// positive is the instance's own group 2, and the negatives are other
// instances' group-2 distributions (or queue entries).  Similarity is
// -KL(anchor || target).  Instances whose estimation degenerates are skipped
// and counted.
template <typename Scalar>
LossOutput<Scalar> divergence_loss(const MultiViewBatch<Scalar>& batch,
                                   const NegativeSet<Scalar>& negatives,
                                   const StabilizationPolicy& policy,
                                   TemperatureSetting temp) {
  temp.validate();
  policy.validate();
  detail::check_negative_source(batch, negatives);
  const int b = batch.batch_size;
  const int p = batch.dim();
  const Scalar nu = Scalar(0.5) * p - Scalar(1);
  const bool in_batch = negatives.source == NegativeSet<Scalar>::Source::InBatch;

  // Summarize every group once; an instance with either group degenerate is
  // dropped from this step.
  std::vector<std::optional<detail::GroupNode<Scalar>>> query(b), key(b);
  std::vector<int> live;
  for (int i = 0; i < b; ++i) {
    query[i] = detail::GroupNode<Scalar>::build(batch.group(i, 0), policy);
    key[i] = detail::GroupNode<Scalar>::build(batch.group(i, 1), policy);
    if (query[i] && key[i]) live.push_back(i);
  }
  if (live.empty()) {
    throw DegenerateDirectionError("divergence_loss: every instance degenerated");
  }
  if (in_batch && live.size() < 2) {
    throw std::invalid_argument(
        "divergence_loss: in-batch negatives need two non-degenerate instances");
  }

  std::vector<const VmfDistribution<Scalar>*> queue_dists;
  std::vector<Scalar> queue_log_i, queue_ratio;
  if (!in_batch) {
    for (const auto& e : negatives.entries) {
      if (!e.has_dist) continue;
      if (e.dist.dim != p) throw std::invalid_argument("negatives: queue dimension mismatch");
      queue_dists.push_back(&e.dist);
      queue_log_i.push_back(log_bessel_i(nu, e.dist.kappa));
      queue_ratio.push_back(bessel_ratio(p, e.dist.kappa));
    }
    if (queue_dists.empty()) {
      throw std::invalid_argument("divergence_loss: queue holds no usable distributions");
    }
  }

  LossOutput<Scalar> out;
  out.grad_features = MatrixX<Scalar>::Zero(batch.features.rows(), p);
  out.skipped_instances = b - static_cast<int>(live.size());
  out.negatives_per_anchor =
      in_batch ? static_cast<int>(live.size()) - 1 : static_cast<int>(queue_dists.size());
  detail::MarginTally<Scalar> tally;
  const Scalar inv_n = Scalar(1) / Scalar(live.size());
  const Scalar tau = Scalar(temp.tau);

  Scalar kappa_sum = Scalar(0);
  for (int i : live) kappa_sum += query[i]->est.dist.kappa + key[i]->est.dist.kappa;
  out.mean_kappa = kappa_sum / Scalar(2 * live.size());

  for (int i : live) {
    auto& q = *query[i];
    auto& own_key = *key[i];
    const Scalar c_pos = q.est.dist.mu.dot(own_key.est.dist.mu);
    const Scalar s_pos =
        -detail::node_kl(q, own_key.est.dist.kappa, own_key.log_i, c_pos, nu);

    const int n_neg = out.negatives_per_anchor;
    VectorX<Scalar> s_neg(n_neg);
    VectorX<Scalar> cosines(n_neg);
    std::vector<int> neg_instance(in_batch ? n_neg : 0);
    int jj = 0;
    if (in_batch) {
      for (int j : live) {
        if (j == i) continue;
        const auto& t = *key[j];
        cosines(jj) = q.est.dist.mu.dot(t.est.dist.mu);
        s_neg(jj) = -detail::node_kl(q, t.est.dist.kappa, t.log_i, cosines(jj), nu);
        neg_instance[jj] = j;
        ++jj;
      }
    } else {
      for (int k = 0; k < n_neg; ++k) {
        cosines(k) = q.est.dist.mu.dot(queue_dists[k]->mu);
        s_neg(k) = -detail::node_kl(q, queue_dists[k]->kappa, queue_log_i[k], cosines(k), nu);
      }
    }

    const auto parts = detail::contrast_parts(s_pos, s_neg, tau);
    out.loss += parts.loss * inv_n;
    tally.add_pos(s_pos / tau);
    for (int k = 0; k < n_neg; ++k) tally.add_neg(s_neg(k) / tau);

    // dL/d(sim) = (w - [is positive]) / tau, and sim = -KL, so the KL
    // coefficient flips sign.
    const Scalar coef_pos = -inv_n * (parts.w_pos - Scalar(1)) / tau;
    detail::accumulate_kl_grad(q, own_key.est.dist.mu, own_key.est.dist.kappa, own_key.ratio,
                               c_pos, coef_pos, &own_key);
    for (int k = 0; k < n_neg; ++k) {
      const Scalar coef = -inv_n * parts.w_neg(k) / tau;
      if (in_batch) {
        auto& t = *key[neg_instance[k]];
        detail::accumulate_kl_grad(q, t.est.dist.mu, t.est.dist.kappa, t.ratio, cosines(k),
                                   coef, &t);
      } else {
        detail::accumulate_kl_grad(q, queue_dists[k]->mu, queue_dists[k]->kappa,
                                   queue_ratio[k], cosines(k), coef,
                                   static_cast<detail::GroupNode<Scalar>*>(nullptr));
      }
    }
  }

  const int m = batch.views_per_group;
  for (int i : live) {
    out.grad_features.middleRows(batch.group_start(i, 0), m).rowwise() +=
        detail::group_row_grad(*query[i], m).transpose();
    out.grad_features.middleRows(batch.group_start(i, 1), m).rowwise() +=
        detail::group_row_grad(*key[i], m).transpose();
  }
  detail::project_tangent(batch.features, out.grad_features);
  tally.write(out);
  return out;
}

// Baseline: InfoNCE per view pair (l, l') across the two groups, averaged
// over the m^2 pairs and the batch.  Negatives for pair (l, l') are the
// other instances' group-2 view l' (or every view of every queue entry).
template <typename Scalar>
LossOutput<Scalar> pairwise_cosine_loss(const MultiViewBatch<Scalar>& batch,
                                        const NegativeSet<Scalar>& negatives,
                                        TemperatureSetting temp) {
  temp.validate();
  detail::check_negative_source(batch, negatives);
  const int b = batch.batch_size;
  const int m = batch.views_per_group;
  const int p = batch.dim();
  const bool in_batch = negatives.source == NegativeSet<Scalar>::Source::InBatch;

  MatrixX<Scalar> queue_rows;
  if (!in_batch) {
    long total = 0;
    for (const auto& e : negatives.entries) total += e.views.rows();
    queue_rows.resize(total, p);
    long at = 0;
    for (const auto& e : negatives.entries) {
      queue_rows.middleRows(at, e.views.rows()) = e.views;
      at += e.views.rows();
    }
  }
  const int n_neg = in_batch ? b - 1 : static_cast<int>(queue_rows.rows());
  if (n_neg < 1) throw std::invalid_argument("pairwise_cosine_loss: no negatives available");

  LossOutput<Scalar> out;
  out.grad_features = MatrixX<Scalar>::Zero(batch.features.rows(), p);
  out.negatives_per_anchor = n_neg;
  detail::MarginTally<Scalar> tally;
  const Scalar tau = Scalar(temp.tau);
  const Scalar inv_pairs = Scalar(1) / (Scalar(b) * Scalar(m) * Scalar(m));

  VectorX<Scalar> s_neg(n_neg);
  for (int i = 0; i < b; ++i) {
    for (int l = 0; l < m; ++l) {
      const int r_q = batch.group_start(i, 0) + l;
      const auto zq = batch.features.row(r_q);
      for (int lp = 0; lp < m; ++lp) {
        const int r_pos = batch.group_start(i, 1) + lp;
        const Scalar s_pos = zq.dot(batch.features.row(r_pos));
        if (in_batch) {
          int jj = 0;
          for (int j = 0; j < b; ++j) {
            if (j == i) continue;
            s_neg(jj++) = zq.dot(batch.features.row(batch.group_start(j, 1) + lp));
          }
        } else {
          s_neg = queue_rows * zq.transpose();
        }

        const auto parts = detail::contrast_parts(s_pos, s_neg, tau);
        out.loss += parts.loss * inv_pairs;
        tally.add_pos(s_pos / tau);
        for (int k = 0; k < n_neg; ++k) tally.add_neg(s_neg(k) / tau);

        const Scalar c_pos = inv_pairs * (parts.w_pos - Scalar(1)) / tau;
        out.grad_features.row(r_q) += c_pos * batch.features.row(r_pos);
        out.grad_features.row(r_pos) += c_pos * zq;
        if (in_batch) {
          int jj = 0;
          for (int j = 0; j < b; ++j) {
            if (j == i) continue;
            const int r_t = batch.group_start(j, 1) + lp;
            const Scalar c = inv_pairs * parts.w_neg(jj++) / tau;
            out.grad_features.row(r_q) += c * batch.features.row(r_t);
            out.grad_features.row(r_t) += c * zq;
          }
        } else {
          out.grad_features.row(r_q) +=
              (queue_rows.transpose() * parts.w_neg).transpose() * (inv_pairs / tau);
        }
      }
    }
  }
  detail::project_tangent(batch.features, out.grad_features);
  tally.write(out);
  return out;
}

// Baseline: InfoNCE between unnormalized group means.  The anchor is the
// mean of group 1, the positive the instance's own group-2 mean, negatives
// the other instances' group-2 means (or queue entry means).
template <typename Scalar>
LossOutput<Scalar> mean_feature_loss(const MultiViewBatch<Scalar>& batch,
                                     const NegativeSet<Scalar>& negatives,
                                     TemperatureSetting temp) {
  temp.validate();
  detail::check_negative_source(batch, negatives);
  const int b = batch.batch_size;
  const int m = batch.views_per_group;
  const int p = batch.dim();
  const bool in_batch = negatives.source == NegativeSet<Scalar>::Source::InBatch;

  MatrixX<Scalar> a(b, p), bb(b, p);
  for (int i = 0; i < b; ++i) {
    a.row(i) = batch.group(i, 0).colwise().mean();
    bb.row(i) = batch.group(i, 1).colwise().mean();
  }
  MatrixX<Scalar> queue_means;
  if (!in_batch) {
    queue_means.resize(negatives.entries.size(), p);
    for (std::size_t k = 0; k < negatives.entries.size(); ++k) {
      queue_means.row(k) = negatives.entries[k].views.colwise().mean();
    }
  }
  const int n_neg = in_batch ? b - 1 : static_cast<int>(queue_means.rows());
  if (n_neg < 1) throw std::invalid_argument("mean_feature_loss: no negatives available");

  LossOutput<Scalar> out;
  out.grad_features = MatrixX<Scalar>::Zero(batch.features.rows(), p);
  out.negatives_per_anchor = n_neg;
  detail::MarginTally<Scalar> tally;
  const Scalar tau = Scalar(temp.tau);
  const Scalar inv_b = Scalar(1) / Scalar(b);

  MatrixX<Scalar> g_a = MatrixX<Scalar>::Zero(b, p);
  MatrixX<Scalar> g_b = MatrixX<Scalar>::Zero(b, p);
  VectorX<Scalar> s_neg(n_neg);
  for (int i = 0; i < b; ++i) {
    const Scalar s_pos = a.row(i).dot(bb.row(i));
    std::vector<int> neg_instance(in_batch ? n_neg : 0);
    if (in_batch) {
      int jj = 0;
      for (int j = 0; j < b; ++j) {
        if (j == i) continue;
        neg_instance[jj] = j;
        s_neg(jj++) = a.row(i).dot(bb.row(j));
      }
    } else {
      s_neg = queue_means * a.row(i).transpose();
    }

    const auto parts = detail::contrast_parts(s_pos, s_neg, tau);
    out.loss += parts.loss * inv_b;
    tally.add_pos(s_pos / tau);
    for (int k = 0; k < n_neg; ++k) tally.add_neg(s_neg(k) / tau);

    const Scalar c_pos = inv_b * (parts.w_pos - Scalar(1)) / tau;
    g_a.row(i) += c_pos * bb.row(i);
    g_b.row(i) += c_pos * a.row(i);
    for (int k = 0; k < n_neg; ++k) {
      const Scalar c = inv_b * parts.w_neg(k) / tau;
      if (in_batch) {
        g_a.row(i) += c * bb.row(neg_instance[k]);
        g_b.row(neg_instance[k]) += c * a.row(i);
      } else {
        g_a.row(i) += c * queue_means.row(k);
      }
    }
  }
  for (int i = 0; i < b; ++i) {
    const Scalar inv_m = Scalar(1) / Scalar(m);
    out.grad_features.middleRows(batch.group_start(i, 0), m).rowwise() +=
        g_a.row(i) * inv_m;
    out.grad_features.middleRows(batch.group_start(i, 1), m).rowwise() +=
        g_b.row(i) * inv_m;
  }
  detail::project_tangent(batch.features, out.grad_features);
  tally.write(out);
  return out;
}

// The concentration at which the divergence similarity reproduces tempered
// cosine contrast: the unique root of kappa * A_p(kappa) = 1/tau.
template <typename Scalar>
Scalar solve_concentration_for_temperature(int p, Scalar tau) {
  if (p < 2) throw std::domain_error("solve_concentration: dimension must be >= 2");
  if (!(tau > Scalar(0)) || !std::isfinite(tau)) {
    throw std::domain_error("solve_concentration: tau must be finite and > 0");
  }
  const Scalar target = Scalar(1) / tau;
  // g(k) = k A_p(k) is strictly increasing: ~k^2/p near zero and
  // ~k - (p-1)/2 for large k.  Seed from whichever regime is closer.
  Scalar kappa = std::max(std::sqrt(target * Scalar(p)), target + Scalar(0.5) * (p - 1));
  for (int iter = 0; iter < 100; ++iter) {
    const Scalar ratio = bessel_ratio(p, kappa);
    const Scalar g = kappa * ratio - target;
    if (std::abs(g) < Scalar(1e-12) * std::max(Scalar(1), target)) return kappa;
    const Scalar slope = ratio + kappa * bessel_ratio_dkappa(p, kappa);
    Scalar next = kappa - g / slope;
    if (!(next > Scalar(0))) next = Scalar(0.5) * kappa;
    kappa = next;
  }
  throw ConvergenceError("solve_concentration_for_temperature: no convergence",
                         static_cast<double>(kappa), 0.0);
}

// Checks the single-view equivalence: with every embedding wrapped in a vMF
// distribution of the shared concentration solving kappa A_p(kappa) = 1/tau,
// the divergence InfoNCE (at unit temperature -- the 1/tau factor lives
// inside kappa) equals the cosine InfoNCE at temperature tau.
template <typename Scalar = double>
struct EquivalenceReport {
  Scalar kappa_hat = Scalar(0);
  Scalar loss_divergence = Scalar(0);
  Scalar loss_cosine = Scalar(0);
  Scalar abs_diff = Scalar(0);
};

template <typename Scalar>
EquivalenceReport<Scalar> equivalence_report(const VectorX<Scalar>& z_query,
                                             const VectorX<Scalar>& z_pos,
                                             const MatrixX<Scalar>& z_negs, Scalar tau) {
  const int p = static_cast<int>(z_query.size());
  if (z_pos.size() != p || z_negs.cols() != p) {
    throw std::invalid_argument("equivalence_report: dimension mismatch");
  }
  if (z_negs.rows() < 1) throw std::invalid_argument("equivalence_report: need negatives");
  EquivalenceReport<Scalar> rep;
  rep.kappa_hat = solve_concentration_for_temperature(p, tau);

  VectorX<Scalar> cos_negs(z_negs.rows());
  for (long k = 0; k < z_negs.rows(); ++k) cos_negs(k) = z_query.dot(z_negs.row(k));
  rep.loss_cosine = info_nce(z_query.dot(z_pos), cos_negs, TemperatureSetting{double(tau)});

  const auto dq = make_vmf(z_query, rep.kappa_hat);
  VectorX<Scalar> div_negs(z_negs.rows());
  for (long k = 0; k < z_negs.rows(); ++k) {
    div_negs(k) = sim_div(dq, make_vmf(VectorX<Scalar>(z_negs.row(k).transpose()),
                                       rep.kappa_hat));
  }
  rep.loss_divergence =
      info_nce(sim_div(dq, make_vmf(z_pos, rep.kappa_hat)), div_negs, TemperatureSetting{1.0});
  rep.abs_diff = std::abs(rep.loss_divergence - rep.loss_cosine);
  return rep;
}

// Worst-case InfoNCE floor for cosine contrast: with K negatives and unit
// similarities bounded by 1, the loss cannot drop below
// log(1 + K exp(-2/tau)) no matter how well separated the embeddings are.
struct UniformityFloorTable {
  std::vector<double> taus;
  std::vector<long> ks;
  MatrixX<double> values;  // rows follow taus, columns follow ks
};

inline UniformityFloorTable cosine_loss_floor_table(std::vector<double> taus,
                                                    std::vector<long> ks) {
  UniformityFloorTable t;
  t.values.resize(static_cast<long>(taus.size()), static_cast<long>(ks.size()));
  for (std::size_t r = 0; r < taus.size(); ++r) {
    if (!(taus[r] > 0.0)) throw std::domain_error("loss floor: tau must be > 0");
    for (std::size_t c = 0; c < ks.size(); ++c) {
      if (ks[c] < 1) throw std::domain_error("loss floor: K must be >= 1");
      t.values(r, c) = std::log1p(double(ks[c]) * std::exp(-2.0 / taus[r]));
    }
  }
  t.taus = std::move(taus);
  t.ks = std::move(ks);
  return t;
}

}  // namespace dsf
