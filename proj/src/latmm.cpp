#include "flowmix/latmm.hpp"

#include <cmath>
#include <numbers>

#include "flowmix/errors.hpp"
#include "flowmix/textio.hpp"

namespace flowmix {

using ad::Graph;
using ad::Tensor;

namespace {
constexpr double kLog2Pi = 1.8378770664093453;
}

void RegularizerSpec::validate() const {
  if (kind == Kind::gamma_prior) {
    if (!(a > 1.0))
      throw ConfigError("gamma prior: shape a must exceed 1, got " + fmt_g17(a));
    if (!(b > 0.0))
      throw ConfigError("gamma prior: rate b must be positive, got " + fmt_g17(b));
  }
  if (kind == Kind::l2 && lambda < 0.0)
    throw ConfigError("l2 regularizer: lambda must be non-negative");
}

LatMMModel LatMMModel::create(std::size_t k, std::size_t dim,
                              const FlowBuildOptions& opt, std::uint64_t seed) {
  if (k < 1) throw ConfigError("LatMM needs at least one component");
  LatMMModel m;
  m.dim = dim;
  m.pi.assign(k, 1.0 / double(k));
  Rng rng(derive_seed(seed, 0));
  m.flow = build_flow(dim, opt, rng);
  Rng lat(derive_seed(seed, 1));
  for (std::size_t i = 0; i < k; ++i) {
    std::vector<double> mean(dim);
    for (auto& v : mean) v = std::sqrt(0.5) * lat.gaussian();
    m.mu.push_back(ad::from_values(1, dim, std::move(mean), true));
    m.log_sigma.push_back(ad::make_leaf(1, dim, 0.0));
  }
  return m;
}

LatMMModel LatMMModel::clone() const {
  LatMMModel c;
  c.dim = dim;
  c.pi = pi;
  c.flow = flow.clone();
  for (const auto& t : mu) c.mu.push_back(ad::clone_detached(t));
  for (const auto& t : log_sigma) c.log_sigma.push_back(ad::clone_detached(t));
  return c;
}

void LatMMModel::validate() const {
  if (mu.empty()) throw ConsistencyError("LatMM has no components");
  if (pi.size() != mu.size() || log_sigma.size() != mu.size())
    throw ConsistencyError("LatMM component arrays disagree in length");
  double sum = 0.0;
  for (double p : pi) {
    if (p < 0.0) throw DomainError("LatMM prior has a negative entry");
    sum += p;
  }
  if (std::fabs(sum - 1.0) > 1e-12)
    throw DomainError("LatMM prior sums to " + fmt_g17(sum));
  for (std::size_t k = 0; k < K(); ++k) {
    if (mu[k]->cols != latent_dim() || log_sigma[k]->cols != latent_dim())
      throw ConsistencyError("LatMM latent parameter width mismatch");
    for (double ls : log_sigma[k]->values)
      if (std::exp(ls) < kSigmaFloor * (1.0 - 1e-12))
        throw DomainError("LatMM sigma below the floor");
  }
  if (flow.dim != 0 && flow.dim != dim)
    throw ConsistencyError("LatMM flow dimension mismatch");
}

std::vector<std::size_t> LatMMModel::active_components() const {
  std::vector<std::size_t> a;
  for (std::size_t k = 0; k < pi.size(); ++k)
    if (pi[k] >= kPriorFreeze) a.push_back(k);
  return a;
}

Matrix LatMMModel::latent_component_log_density(const Matrix& z) const {
  std::size_t m = latent_dim();
  if (z.cols != m)
    throw ShapeError("latent density: expected width " + std::to_string(m));
  Matrix out(z.rows, K());
  long kk = long(K());
#pragma omp parallel for schedule(static)
  for (long k = 0; k < kk; ++k) {
    const auto& mk = mu[std::size_t(k)]->values;
    const auto& lsk = log_sigma[std::size_t(k)]->values;
    double base = -0.5 * double(m) * kLog2Pi;
    for (double ls : lsk) base -= ls;
    for (std::size_t i = 0; i < z.rows; ++i) {
      double quad = 0.0;
      for (std::size_t j = 0; j < m; ++j) {
        double d = z.at(i, j) - mk[j];
        quad += d * d * std::exp(-2.0 * lsk[j]);
      }
      out.at(i, std::size_t(k)) = base - 0.5 * quad;
    }
  }
  return out;
}

Responsibilities LatMMModel::responsibilities(const Matrix& x,
                                              bool dim_scaling) const {
  auto active = active_components();
  Matrix dens = latent_component_log_density(flow.infer_values(x).first);
  Matrix scores(x.rows, K());
  double inv_dim = dim_scaling ? 1.0 / double(dim) : 1.0;
  for (std::size_t i = 0; i < x.rows; ++i)
    for (std::size_t k : active)
      scores.at(i, k) = std::log(pi[k]) + dens.at(i, k) * inv_dim;
  return {softmax_rows(scores, active)};
}

std::vector<double> LatMMModel::log_likelihood_rows(const Matrix& x) const {
  auto [z, ld] = flow.infer_values(x);
  Matrix dens = latent_component_log_density(z);
  std::vector<double> out(x.rows);
  std::vector<double> scores;
  for (std::size_t i = 0; i < x.rows; ++i) {
    scores.clear();
    for (std::size_t k = 0; k < K(); ++k)
      if (pi[k] > 0.0) scores.push_back(std::log(pi[k]) + dens.at(i, k));
    out[i] = log_sum_exp(scores.data(), scores.size()) + ld[i];
  }
  return out;
}

double LatMMModel::evaluate_nll(const Matrix& x) const {
  if (x.rows == 0) throw EmptyDataset("evaluate_nll: no samples");
  double total = 0.0;
  for (double v : log_likelihood_rows(x)) total += v;
  return -total / (double(x.rows) * double(dim));
}

Matrix LatMMModel::sample(std::size_t n, Rng& rng) const {
  if (n < 1) throw DomainError("sample: count must be at least 1");
  std::size_t m = latent_dim();
  Matrix z(n, m);
  for (std::size_t i = 0; i < n; ++i) {
    std::size_t k = K() == 1 ? 0 : rng.categorical(pi);
    for (std::size_t j = 0; j < m; ++j)
      z.at(i, j) = mu[k]->values[j] +
                   std::exp(log_sigma[k]->values[j]) * rng.gaussian();
  }
  return flow.generate(z);
}

Matrix LatMMModel::interpolate(const std::vector<double>& x_start,
                               const std::vector<double>& x_end,
                               std::size_t steps) const {
  if (steps < 2) throw DomainError("interpolate: need at least 2 steps");
  if (x_start.size() != dim || x_end.size() != dim)
    throw ShapeError("interpolate: endpoint width mismatch");
  Matrix ends(2, dim);
  for (std::size_t j = 0; j < dim; ++j) {
    ends.at(0, j) = x_start[j];
    ends.at(1, j) = x_end[j];
  }
  Matrix z = flow.infer_values(ends).first;
  Matrix zs(steps, dim);
  for (std::size_t j = 0; j < steps; ++j) {
    double alpha = 1.0 - double(j) / double(steps - 1);
    for (std::size_t c = 0; c < dim; ++c)
      zs.at(j, c) = alpha * z.at(0, c) + (1.0 - alpha) * z.at(1, c);
  }
  return flow.generate(zs);
}

std::vector<Tensor> LatMMModel::trainable_params() const {
  std::vector<Tensor> out = flow.params();
  for (const auto& t : mu) out.push_back(t);
  for (const auto& t : log_sigma) out.push_back(t);
  return out;
}

void LatMMModel::enforce_sigma_floor() {
  double floor_ls = std::log(kSigmaFloor);
  for (auto& ls : log_sigma)
    for (auto& v : ls->values) v = std::max(v, floor_ls);
}

ad::Tensor latmm_q_objective(Graph& g, const LatMMModel& model,
                             const Matrix& gamma, const Matrix& x) {
  if (gamma.rows != x.rows || gamma.cols != model.K())
    throw ShapeError("q_objective: gamma shape mismatch");
  auto [z, ld] = model.flow.infer(g, ad::from_matrix(x));
  std::size_t m = model.latent_dim();
  Tensor q = g.sum(ld);
  for (std::size_t k : model.active_components()) {
    std::vector<double> col(x.rows);
    for (std::size_t i = 0; i < x.rows; ++i) col[i] = gamma.at(i, k);
    Tensor gcol = ad::from_values(x.rows, 1, std::move(col));

    Tensor diff = g.sub_row(z, model.mu[k]);
    Tensor w = g.exp(g.mul_scalar(model.log_sigma[k], -2.0));
    Tensor quad = g.row_sums(g.mul_row(g.square(diff), w));
    Tensor ls_sum = g.sum(model.log_sigma[k]);
    // per-row log N(z; mu_k, sigma_k^2)
    Tensor dens = g.add_scalar(
        g.add_row(g.mul_scalar(quad, -0.5), g.neg(ls_sum)),
        -0.5 * double(m) * kLog2Pi + std::log(model.pi[k]));
    q = g.add(q, g.sum(g.mul(dens, gcol)));
  }
  return q;
}

ad::Tensor latmm_regularizer(Graph& g, const LatMMModel& model,
                             const RegularizerSpec& spec) {
  spec.validate();
  Tensor acc = ad::scalar(0.0);
  switch (spec.kind) {
    case RegularizerSpec::Kind::none:
      return acc;
    case RegularizerSpec::Kind::gamma_prior:
      for (std::size_t k = 0; k < model.K(); ++k) {
        const Tensor& ls = model.log_sigma[k];
        Tensor t = g.add(g.mul_scalar(ls, -(spec.a - 1.0)),
                         g.mul_scalar(g.exp(g.neg(ls)), -spec.b));
        acc = g.add(acc, g.sum(t));
      }
      return g.mul_scalar(acc, 1.0 / double(model.K()));
    case RegularizerSpec::Kind::l2:
      for (std::size_t k = 0; k < model.K(); ++k) {
        Tensor pen = g.square(g.sub_from(1.0, g.exp(model.log_sigma[k])));
        acc = g.add(acc, g.sum(pen));
      }
      return g.mul_scalar(acc, -spec.lambda / double(model.K()));
  }
  throw ConfigError("unknown regularizer kind");
}

LatMMTrainer::LatMMTrainer(LatMMModel& model, const Dataset& data,
                           const EMConfig& cfg, const RegularizerSpec& reg)
    : model_(model),
      data_(data),
      cfg_(cfg),
      reg_(reg),
      old_(model.clone()),
      stable_(model.clone()),
      opt_(model.trainable_params(), cfg),
      batches_(data.size(), cfg.batch_size, cfg.seed),
      scaling_(cfg.dim_scaling_active(model.dim)),
      t0_(std::chrono::steady_clock::now()) {
  cfg_.validate();
  reg_.validate();
  model_.validate();
  if (data_.dim() != model_.dim)
    throw ShapeError("training data width " + std::to_string(data_.dim()) +
                     " vs model dimension " + std::to_string(model_.dim));
  gamma_sum_.assign(model_.K(), 0.0);
}

void LatMMTrainer::run_epoch() {
  try {
    batches_.start_epoch(epoch_);
    std::vector<std::size_t> idx;
    while (batches_.next(idx)) {
      Matrix bx = gather_rows(data_.samples, idx);
      Responsibilities r = old_.responsibilities(bx, scaling_);
      for (std::size_t i = 0; i < r.gamma.rows; ++i)
        for (std::size_t k = 0; k < r.gamma.cols; ++k)
          gamma_sum_[k] += r.gamma.at(i, k);
      gamma_count_ += bx.rows;

      Graph g;
      Tensor q = latmm_q_objective(g, model_, r.gamma, bx);
      Tensor obj = g.mul_scalar(q, 1.0 / double(bx.rows));
      if (reg_.kind != RegularizerSpec::Kind::none)
        obj = g.add(obj, latmm_regularizer(g, model_, reg_));
      g.backward(obj);
      opt_.ascend();
      model_.enforce_sigma_floor();
    }
    epoch_end();
  } catch (const NumericalOverflow& e) {
    model_ = stable_.clone();
    old_ = stable_.clone();
    throw NumericalOverflow("epoch " + std::to_string(log_.rows.size() + 1) +
                            ": " + std::string(e.what()) +
                            "; model rolled back to last stable epoch");
  }
}

void LatMMTrainer::epoch_end() {
  ++epoch_;
  if (epoch_ % cfg_.prior_update_gap == 0 && gamma_count_ > 0) {
    std::vector<double> mean(gamma_sum_);
    for (auto& v : mean) v /= double(gamma_count_);
    double s = 0.0;
    for (double v : mean) s += v;
    for (auto& v : mean) v /= s;
    update_prior(model_.pi, mean);
    gamma_sum_.assign(model_.K(), 0.0);
    gamma_count_ = 0;
  }
  if (epoch_ % cfg_.em_update_gap == 0) old_ = model_.clone();

  double nll = model_.evaluate_nll(data_.samples);
  if (!std::isfinite(nll)) throw NumericalOverflow("non-finite dataset NLL");
  stable_ = model_.clone();
  TrainingLogRow row;
  row.epoch = epoch_;
  row.nll_nat_per_dim = nll;
  row.pi = model_.pi;
  row.wall_seconds =
      std::chrono::duration<double>(std::chrono::steady_clock::now() - t0_)
          .count();
  log_.rows.push_back(row);
}

TrainingLog LatMMTrainer::train() {
  for (std::size_t e = 0; e < cfg_.epochs; ++e) run_epoch();
  return log_;
}

} // namespace flowmix
