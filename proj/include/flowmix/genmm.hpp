#ifndef FLOWMIX_GENMM_HPP
#define FLOWMIX_GENMM_HPP

#include <chrono>

#include "flowmix/dataset.hpp"
#include "flowmix/em.hpp"
#include "flowmix/flow.hpp"

namespace flowmix {

enum class InterpSelection { argmax_gamma, random_prior };

/// Mixture of K independent flow generators over a shared standard-normal
/// latent; mixture weights pi live on the simplex.
class GenMMModel {
 public:
  std::size_t dim = 0;
  std::vector<double> pi;
  std::vector<FlowNetwork> generators;

  static GenMMModel create(std::size_t k, std::size_t dim,
                           const FlowBuildOptions& opt, std::uint64_t seed);

  std::size_t K() const { return generators.size(); }
  GenMMModel clone() const;
  void validate() const;

  /// [n x K]; entry (i,k) = log p_k(x_i). Component columns are evaluated
  /// independently (in parallel when OpenMP is on).
  Matrix component_log_likelihood(const Matrix& x) const;

  /// Softmax over active components of log pi_k + l_k (l_k / dim first when
  /// dim_scaling); frozen components get exactly 0.
  Responsibilities responsibilities(const Matrix& x, bool dim_scaling) const;

  /// -(1/(n*dim)) sum_i log sum_k pi_k p_k(x_i), via log-sum-exp.
  double evaluate_nll(const Matrix& x) const;

  /// log sum_k pi_k p_k(x_i) per row; -inf where every active component
  /// scores zero.
  std::vector<double> log_likelihood_rows(const Matrix& x) const;

  Matrix sample(std::size_t n, Rng& rng) const;

  /// Row j = g_{k'}(a_j z_start + (1-a_j) z_end) with a_j descending from 1
  /// to 0; k* per endpoint by argmax responsibility (or drawn from the
  /// prior), k' = the nearer endpoint's choice (start wins the midpoint).
  Matrix interpolate(const std::vector<double>& x_start,
                     const std::vector<double>& x_end, std::size_t steps,
                     InterpSelection selection, Rng& rng,
                     bool dim_scaling) const;

  std::vector<ad::Tensor> trainable_params() const;
  std::vector<std::size_t> active_components() const;
};

/// Batch objective of the M-step: sum_i sum_k gamma_ik (log pi_k + log
/// p_k(x_i)), built on the given graph so gradients reach every generator.
/// gamma is treated as a constant.
ad::Tensor genmm_q_objective(ad::Graph& g, const GenMMModel& model,
                             const Matrix& gamma, const Matrix& x);

/// Alternating two-model EM: responsibilities come from a frozen older copy
/// of the parameters which is refreshed every em_update_gap epochs; the
/// prior is replaced by the epoch mean of the responsibilities every
/// prior_update_gap epochs. One gradient ascent step per batch.
class GenMMTrainer {
 public:
  GenMMTrainer(GenMMModel& model, const Dataset& data, const EMConfig& cfg);

  /// Runs a single epoch and appends its log row. On numerical failure the
  /// model is rolled back to the last epoch boundary and the error rethrown.
  void run_epoch();
  /// Runs the configured number of epochs.
  TrainingLog train();

  const TrainingLog& log() const { return log_; }
  const GenMMModel& old_model() const { return old_; }
  std::size_t epochs_done() const { return epoch_; }

 private:
  void epoch_end();

  GenMMModel& model_;
  const Dataset& data_;
  EMConfig cfg_;
  GenMMModel old_;
  GenMMModel stable_;
  Optimizer opt_;
  BatchIterator batches_;
  TrainingLog log_;
  std::size_t epoch_ = 0;
  bool scaling_;
  std::vector<double> gamma_sum_;
  std::size_t gamma_count_ = 0;
  std::chrono::steady_clock::time_point t0_;
};

} // namespace flowmix

#endif
