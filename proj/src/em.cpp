#include "flowmix/em.hpp"

#include <cmath>
#include <fstream>

#include "flowmix/errors.hpp"
#include "flowmix/textio.hpp"

namespace flowmix {

void EMConfig::validate() const {
  if (epochs < 1) throw ConfigError("epochs must be at least 1");
  if (batch_size < 1) throw ConfigError("batch size must be at least 1");
  if (!(learning_rate > 0.0)) throw ConfigError("learning rate must be positive");
  if (em_update_gap < 1) throw ConfigError("em update gap must be at least 1");
  if (prior_update_gap < 1)
    throw ConfigError("prior update gap must be at least 1");
}

bool EMConfig::dim_scaling_active(std::size_t dim) const {
  switch (dim_scaling) {
    case DimScaling::on: return true;
    case DimScaling::off: return false;
    case DimScaling::automatic: return dim > 16;
  }
  return false;
}

std::vector<double> Responsibilities::column_means() const {
  std::vector<double> mean(gamma.cols, 0.0);
  for (std::size_t i = 0; i < gamma.rows; ++i)
    for (std::size_t k = 0; k < gamma.cols; ++k) mean[k] += gamma.at(i, k);
  for (auto& v : mean) v /= double(gamma.rows);
  return mean;
}

std::string TrainingLog::to_csv() const {
  std::size_t k = rows.empty() ? 0 : rows.front().pi.size();
  std::string out = "epoch,nll_nat_per_dim";
  for (std::size_t i = 1; i <= k; ++i) out += ",pi_" + std::to_string(i);
  out += ",wall_seconds\n";
  char wall[32];
  for (const auto& r : rows) {
    out += std::to_string(r.epoch);
    out += ',';
    out += fmt_g17(r.nll_nat_per_dim);
    for (double p : r.pi) {
      out += ',';
      out += fmt_g17(p);
    }
    std::snprintf(wall, sizeof(wall), ",%.3f", r.wall_seconds);
    out += wall;
    out += '\n';
  }
  return out;
}

void TrainingLog::write_csv(const std::string& path) const {
  std::ofstream f(path);
  if (!f) throw IoError("cannot write " + path);
  f << to_csv();
  if (!f) throw IoError("failed writing " + path);
}

Optimizer::Optimizer(std::vector<ad::Tensor> params, const EMConfig& cfg)
    : params_(std::move(params)),
      lr_(cfg.learning_rate),
      adam_(cfg.use_adam),
      b1_(cfg.adam_beta1),
      b2_(cfg.adam_beta2),
      eps_(cfg.adam_eps) {
  if (adam_) {
    m_.resize(params_.size());
    v_.resize(params_.size());
    for (std::size_t i = 0; i < params_.size(); ++i) {
      m_[i].assign(params_[i]->size(), 0.0);
      v_[i].assign(params_[i]->size(), 0.0);
    }
  }
}

void Optimizer::ascend() {
  ++t_;
  for (std::size_t i = 0; i < params_.size(); ++i) {
    auto& p = *params_[i];
    p.ensure_grad();
    if (!adam_) {
      for (std::size_t j = 0; j < p.size(); ++j)
        p.values[j] += lr_ * p.grad[j];
    } else {
      double c1 = 1.0 - std::pow(b1_, double(t_));
      double c2 = 1.0 - std::pow(b2_, double(t_));
      for (std::size_t j = 0; j < p.size(); ++j) {
        double gr = p.grad[j];
        m_[i][j] = b1_ * m_[i][j] + (1.0 - b1_) * gr;
        v_[i][j] = b2_ * v_[i][j] + (1.0 - b2_) * gr * gr;
        p.values[j] += lr_ * (m_[i][j] / c1) / (std::sqrt(v_[i][j] / c2) + eps_);
      }
    }
    p.zero_grad();
  }
}

void update_prior(std::vector<double>& pi, const std::vector<double>& mean_gamma) {
  if (mean_gamma.size() != pi.size())
    throw ShapeError("update_prior: got " + std::to_string(mean_gamma.size()) +
                     " means for " + std::to_string(pi.size()) + " components");
  double sum = 0.0;
  for (double v : mean_gamma) {
    if (v < 0.0) throw DomainError("update_prior: negative responsibility mean");
    sum += v;
  }
  if (std::fabs(sum - 1.0) > 1e-12)
    throw DomainError("update_prior: responsibility means sum to " +
                      fmt_g17(sum));
  pi = mean_gamma;
}

double log_sum_exp(const double* v, std::size_t n) {
  double m = -std::numeric_limits<double>::infinity();
  for (std::size_t i = 0; i < n; ++i) m = std::max(m, v[i]);
  if (!std::isfinite(m)) return m; // all -inf (or a stray +inf propagates)
  double s = 0.0;
  for (std::size_t i = 0; i < n; ++i) s += std::exp(v[i] - m);
  return m + std::log(s);
}

Matrix softmax_rows(const Matrix& scores, const std::vector<std::size_t>& active) {
  if (active.empty())
    throw ConsistencyError("softmax_rows: no active components");
  Matrix out(scores.rows, scores.cols);
  for (std::size_t i = 0; i < scores.rows; ++i) {
    double m = -std::numeric_limits<double>::infinity();
    for (std::size_t k : active) m = std::max(m, scores.at(i, k));
    if (m == -std::numeric_limits<double>::infinity())
      throw DegenerateSample("sample " + std::to_string(i) +
                             ": zero likelihood under every active component");
    double denom = 0.0;
    for (std::size_t k : active) denom += std::exp(scores.at(i, k) - m);
    for (std::size_t k : active)
      out.at(i, k) = std::exp(scores.at(i, k) - m) / denom;
  }
  return out;
}

} // namespace flowmix
