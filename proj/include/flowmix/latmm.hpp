#ifndef FLOWMIX_LATMM_HPP
#define FLOWMIX_LATMM_HPP

#include <chrono>

#include "flowmix/dataset.hpp"
#include "flowmix/em.hpp"
#include "flowmix/flow.hpp"

namespace flowmix {

/// Guard against latent components collapsing onto single points. The
/// gamma-prior form is (1/K) Σ_k Σ_j [(a−1)·log σ⁻¹ − b·σ⁻¹] with the
/// normalizing constants dropped; l2 is −(λ/K) Σ (1−σ)².
struct RegularizerSpec {
  enum class Kind { gamma_prior, l2, none };
  Kind kind = Kind::gamma_prior;
  double a = 2.0;
  double b = 1.0;
  double lambda = 0.1;

  void validate() const;
};

/// One shared flow with a diagonal Gaussian-mixture latent. mu and log_sigma
/// are trainable rows; sigma stays above kSigmaFloor.
class LatMMModel {
 public:
  std::size_t dim = 0;
  std::vector<double> pi;
  std::vector<ad::Tensor> mu;        // K rows [1 x M]
  std::vector<ad::Tensor> log_sigma; // K rows [1 x M]
  FlowNetwork flow;

  static LatMMModel create(std::size_t k, std::size_t dim,
                           const FlowBuildOptions& opt, std::uint64_t seed);

  std::size_t K() const { return mu.size(); }
  /// Latent width; equals dim (splits keep total width, Proposition-style).
  std::size_t latent_dim() const { return dim; }
  LatMMModel clone() const;
  void validate() const;

  /// [n x K]; entry (i,k) = log N(z_i; mu_k, diag(sigma_k^2)).
  Matrix latent_component_log_density(const Matrix& z) const;

  /// z = f(x) once; softmax of log pi_k + log N(z; mu_k, sigma_k^2). The
  /// flow's logdet cancels in the posterior and is deliberately absent.
  Responsibilities responsibilities(const Matrix& x, bool dim_scaling) const;

  double evaluate_nll(const Matrix& x) const;

  /// log p(x_i) under the model, one value per row; -inf where every
  /// active component scores zero.
  std::vector<double> log_likelihood_rows(const Matrix& x) const;

  /// k ~ pi, z = mu_k + sigma_k ⊙ ε, x = g(z). K=1 skips the component draw
  /// so the stream matches the underlying Gaussian draws exactly.
  Matrix sample(std::size_t n, Rng& rng) const;

  Matrix interpolate(const std::vector<double>& x_start,
                     const std::vector<double>& x_end,
                     std::size_t steps) const;

  std::vector<ad::Tensor> trainable_params() const;
  std::vector<std::size_t> active_components() const;
  void enforce_sigma_floor();
};

/// Σ_i [logdet_i + Σ_k γ_ik (log pi_k + log N(f(x_i); mu_k, sigma_k²))],
/// differentiable wrt the flow, mu, and log_sigma. gamma is constant.
ad::Tensor latmm_q_objective(ad::Graph& g, const LatMMModel& model,
                             const Matrix& gamma, const Matrix& x);

ad::Tensor latmm_regularizer(ad::Graph& g, const LatMMModel& model,
                             const RegularizerSpec& spec);

/// Same EM shape as the GenMM trainer; the per-batch objective is
/// (1/n_b)·Q plus the regularizer, and the sigma floor is applied after
/// every ascent step.
class LatMMTrainer {
 public:
  LatMMTrainer(LatMMModel& model, const Dataset& data, const EMConfig& cfg,
               const RegularizerSpec& reg = {});

  void run_epoch();
  TrainingLog train();

  const TrainingLog& log() const { return log_; }
  const LatMMModel& old_model() const { return old_; }
  std::size_t epochs_done() const { return epoch_; }

 private:
  void epoch_end();

  LatMMModel& model_;
  const Dataset& data_;
  EMConfig cfg_;
  RegularizerSpec reg_;
  LatMMModel old_;
  LatMMModel stable_;
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
