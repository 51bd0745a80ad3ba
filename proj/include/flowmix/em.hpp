#ifndef FLOWMIX_EM_HPP
#define FLOWMIX_EM_HPP

#include <cstdint>
#include <string>
#include <vector>

#include "flowmix/autodiff.hpp"
#include "flowmix/matrix.hpp"

namespace flowmix {

/// Components whose prior mass falls below this are frozen: excluded from
/// responsibility normalization and from gradient updates, but kept in the
/// model so K never changes.
inline constexpr double kPriorFreeze = 1e-6;

inline constexpr double kSigmaFloor = 1e-4;

struct EMConfig {
  std::size_t epochs = 100;
  std::size_t batch_size = 64;
  double learning_rate = 0.01;
  std::size_t em_update_gap = 5;    // epochs between old-parameter refreshes
  std::size_t prior_update_gap = 5; // epochs between prior updates

  enum class DimScaling { automatic, on, off };
  DimScaling dim_scaling = DimScaling::automatic;

  bool use_adam = false;
  double adam_beta1 = 0.9;
  double adam_beta2 = 0.999;
  double adam_eps = 1e-8;

  std::uint64_t seed = 0;

  void validate() const;
  /// automatic resolves to on for dimensions above 16.
  bool dim_scaling_active(std::size_t dim) const;
};

/// Posterior component weights, one row per sample, rows on the simplex.
struct Responsibilities {
  Matrix gamma;
  std::vector<double> column_means() const;
};

struct TrainingLogRow {
  std::size_t epoch = 0; // 1-based
  double nll_nat_per_dim = 0.0;
  std::vector<double> pi;
  double wall_seconds = 0.0;
};

struct TrainingLog {
  std::vector<TrainingLogRow> rows;
  std::string to_csv() const;
  void write_csv(const std::string& path) const;
};

/// Gradient ascent on a fixed parameter list; applies accumulated gradients
/// and clears them. The adaptive variant follows the usual first/second
/// moment recipe with bias correction.
class Optimizer {
 public:
  Optimizer(std::vector<ad::Tensor> params, const EMConfig& cfg);
  void ascend();

 private:
  std::vector<ad::Tensor> params_;
  double lr_;
  bool adam_;
  double b1_, b2_, eps_;
  std::size_t t_ = 0;
  std::vector<std::vector<double>> m_, v_;
};

/// New prior = column means of accumulated responsibilities. Checks the
/// simplex within 1e-12 and matching length.
void update_prior(std::vector<double>& pi, const std::vector<double>& mean_gamma);

/// Softmax of per-row scores (log prior + log-likelihood, already combined)
/// over the active components listed in `active`; inactive columns get 0.
/// A row whose best active score is -inf throws DegenerateSample.
Matrix softmax_rows(const Matrix& scores, const std::vector<std::size_t>& active);

double log_sum_exp(const double* v, std::size_t n);

} // namespace flowmix

#endif
