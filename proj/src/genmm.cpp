#include "flowmix/genmm.hpp"

#include <cmath>
#include <exception>

#include "flowmix/errors.hpp"
#include "flowmix/kernels.hpp"
#include "flowmix/textio.hpp"

namespace flowmix {

using ad::Graph;
using ad::Tensor;

GenMMModel GenMMModel::create(std::size_t k, std::size_t dim,
                              const FlowBuildOptions& opt, std::uint64_t seed) {
  if (k < 1) throw ConfigError("GenMM needs at least one component");
  GenMMModel m;
  m.dim = dim;
  m.pi.assign(k, 1.0 / double(k));
  m.generators.reserve(k);
  for (std::size_t i = 0; i < k; ++i) {
    Rng rng(derive_seed(seed, i));
    m.generators.push_back(build_flow(dim, opt, rng));
  }
  return m;
}

GenMMModel GenMMModel::clone() const {
  GenMMModel c;
  c.dim = dim;
  c.pi = pi;
  c.generators.reserve(generators.size());
  for (const auto& g : generators) c.generators.push_back(g.clone());
  return c;
}

void GenMMModel::validate() const {
  if (generators.empty()) throw ConsistencyError("GenMM has no generators");
  if (pi.size() != generators.size())
    throw ConsistencyError("GenMM prior length " + std::to_string(pi.size()) +
                           " vs " + std::to_string(generators.size()) +
                           " generators");
  double sum = 0.0;
  for (double p : pi) {
    if (p < 0.0) throw DomainError("GenMM prior has a negative entry");
    sum += p;
  }
  if (std::fabs(sum - 1.0) > 1e-12)
    throw DomainError("GenMM prior sums to " + fmt_g17(sum));
  for (const auto& g : generators)
    if (g.dim != dim)
      throw ConsistencyError("generator dimension mismatch");
}

std::vector<std::size_t> GenMMModel::active_components() const {
  std::vector<std::size_t> a;
  for (std::size_t k = 0; k < pi.size(); ++k)
    if (pi[k] >= kPriorFreeze) a.push_back(k);
  return a;
}

Matrix GenMMModel::component_log_likelihood(const Matrix& x) const {
  if (x.cols != dim)
    throw ShapeError("component log-likelihood: expected width " +
                     std::to_string(dim) + ", got " + std::to_string(x.cols));
  for (double v : x.data)
    if (!std::isfinite(v))
      throw DomainError("component log-likelihood: non-finite input");
  Matrix out(x.rows, K());
  std::vector<std::exception_ptr> errs(K());
  long kk = long(K());
#pragma omp parallel for schedule(static)
  for (long k = 0; k < kk; ++k) {
    try {
      auto col = generators[std::size_t(k)].log_prob_values(x);
      for (std::size_t i = 0; i < x.rows; ++i)
        out.at(i, std::size_t(k)) = col[i];
    } catch (...) {
      errs[std::size_t(k)] = std::current_exception();
    }
  }
  for (std::size_t k = 0; k < K(); ++k)
    if (errs[k]) {
      try {
        std::rethrow_exception(errs[k]);
      } catch (const Error& e) {
        throw NumericalOverflow("component " + std::to_string(k) + ": " +
                                e.what());
      }
    }
  return out;
}

Responsibilities GenMMModel::responsibilities(const Matrix& x,
                                              bool dim_scaling) const {
  auto active = active_components();
  Matrix ll = component_log_likelihood(x);
  Matrix scores(x.rows, K());
  double inv_dim = dim_scaling ? 1.0 / double(dim) : 1.0;
  for (std::size_t i = 0; i < x.rows; ++i)
    for (std::size_t k : active)
      scores.at(i, k) = std::log(pi[k]) + ll.at(i, k) * inv_dim;
  return {softmax_rows(scores, active)};
}

std::vector<double> GenMMModel::log_likelihood_rows(const Matrix& x) const {
  Matrix ll = component_log_likelihood(x);
  std::vector<double> out(x.rows);
  std::vector<double> scores;
  for (std::size_t i = 0; i < x.rows; ++i) {
    scores.clear();
    for (std::size_t k = 0; k < K(); ++k)
      if (pi[k] > 0.0) scores.push_back(std::log(pi[k]) + ll.at(i, k));
    out[i] = log_sum_exp(scores.data(), scores.size());
  }
  return out;
}

double GenMMModel::evaluate_nll(const Matrix& x) const {
  if (x.rows == 0) throw EmptyDataset("evaluate_nll: no samples");
  double total = 0.0;
  for (double v : log_likelihood_rows(x)) total += v;
  return -total / (double(x.rows) * double(dim));
}

Matrix GenMMModel::sample(std::size_t n, Rng& rng) const {
  if (n < 1) throw DomainError("sample: count must be at least 1");
  Matrix out(n, dim);
  for (std::size_t i = 0; i < n; ++i) {
    std::size_t k = K() == 1 ? 0 : rng.categorical(pi);
    Matrix z(1, dim);
    for (auto& v : z.data) v = rng.gaussian();
    Matrix x = generators[k].generate(z);
    for (std::size_t j = 0; j < dim; ++j) out.at(i, j) = x.at(0, j);
  }
  return out;
}

namespace {

std::size_t argmax_row(const Matrix& m, std::size_t i) {
  std::size_t best = 0;
  for (std::size_t k = 1; k < m.cols; ++k)
    if (m.at(i, k) > m.at(i, best)) best = k; // ties keep the lowest index
  return best;
}

} // namespace

Matrix GenMMModel::interpolate(const std::vector<double>& x_start,
                               const std::vector<double>& x_end,
                               std::size_t steps, InterpSelection selection,
                               Rng& rng, bool dim_scaling) const {
  if (steps < 2) throw DomainError("interpolate: need at least 2 steps");
  if (x_start.size() != dim || x_end.size() != dim)
    throw ShapeError("interpolate: endpoint width mismatch");
  Matrix ends(2, dim);
  for (std::size_t j = 0; j < dim; ++j) {
    ends.at(0, j) = x_start[j];
    ends.at(1, j) = x_end[j];
  }
  std::size_t k_start, k_end;
  if (selection == InterpSelection::argmax_gamma) {
    Responsibilities r = responsibilities(ends, dim_scaling);
    k_start = argmax_row(r.gamma, 0);
    k_end = argmax_row(r.gamma, 1);
  } else {
    k_start = rng.categorical(pi);
    k_end = rng.categorical(pi);
  }
  auto [z_start, ld0] = generators[k_start].infer_values(
      Matrix(1, dim, std::vector<double>(x_start)));
  auto [z_end, ld1] = generators[k_end].infer_values(
      Matrix(1, dim, std::vector<double>(x_end)));

  Matrix out(steps, dim);
  for (std::size_t j = 0; j < steps; ++j) {
    double alpha = 1.0 - double(j) / double(steps - 1);
    Matrix z(1, dim);
    for (std::size_t c = 0; c < dim; ++c)
      z.at(0, c) = alpha * z_start.at(0, c) + (1.0 - alpha) * z_end.at(0, c);
    std::size_t gen = alpha >= 0.5 ? k_start : k_end;
    Matrix x = generators[gen].generate(z);
    for (std::size_t c = 0; c < dim; ++c) out.at(j, c) = x.at(0, c);
  }
  return out;
}

std::vector<Tensor> GenMMModel::trainable_params() const {
  std::vector<Tensor> out;
  for (const auto& g : generators)
    for (auto& p : g.params()) out.push_back(p);
  return out;
}

ad::Tensor genmm_q_objective(Graph& g, const GenMMModel& model,
                             const Matrix& gamma, const Matrix& x) {
  if (gamma.rows != x.rows || gamma.cols != model.K())
    throw ShapeError("q_objective: gamma is " + std::to_string(gamma.rows) +
                     "x" + std::to_string(gamma.cols) + " for a batch of " +
                     std::to_string(x.rows) + " and K=" +
                     std::to_string(model.K()));
  Tensor xs = ad::from_matrix(x);
  Tensor q = ad::scalar(0.0);
  for (std::size_t k : model.active_components()) {
    std::vector<double> col(x.rows);
    for (std::size_t i = 0; i < x.rows; ++i) col[i] = gamma.at(i, k);
    Tensor gcol = ad::from_values(x.rows, 1, std::move(col));
    Tensor lp = model.generators[k].log_prob(g, xs);
    Tensor term = g.add_scalar(lp, std::log(model.pi[k]));
    q = g.add(q, g.sum(g.mul(term, gcol)));
  }
  return q;
}

GenMMTrainer::GenMMTrainer(GenMMModel& model, const Dataset& data,
                           const EMConfig& cfg)
    : model_(model),
      data_(data),
      cfg_(cfg),
      old_(model.clone()),
      stable_(model.clone()),
      opt_(model.trainable_params(), cfg),
      batches_(data.size(), cfg.batch_size, cfg.seed),
      scaling_(cfg.dim_scaling_active(model.dim)),
      t0_(std::chrono::steady_clock::now()) {
  cfg_.validate();
  model_.validate();
  if (data_.dim() != model_.dim)
    throw ShapeError("training data width " + std::to_string(data_.dim()) +
                     " vs model dimension " + std::to_string(model_.dim));
  gamma_sum_.assign(model_.K(), 0.0);
}

void GenMMTrainer::run_epoch() {
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
      Tensor q = genmm_q_objective(g, model_, r.gamma, bx);
      g.backward(g.mul_scalar(q, 1.0 / double(bx.rows)));
      opt_.ascend();
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

void GenMMTrainer::epoch_end() {
  ++epoch_;
  if (epoch_ % cfg_.prior_update_gap == 0 && gamma_count_ > 0) {
    std::vector<double> mean(gamma_sum_);
    for (auto& v : mean) v /= double(gamma_count_);
    // kill rounding drift so the simplex check stays exact
    double s = 0.0;
    for (double v : mean) s += v;
    for (auto& v : mean) v /= s;
    update_prior(model_.pi, mean);
    gamma_sum_.assign(model_.K(), 0.0);
    gamma_count_ = 0;
  }
  if (epoch_ % cfg_.em_update_gap == 0) old_ = model_.clone();

  double nll = model_.evaluate_nll(data_.samples);
  if (!std::isfinite(nll))
    throw NumericalOverflow("non-finite dataset NLL");
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

TrainingLog GenMMTrainer::train() {
  for (std::size_t e = 0; e < cfg_.epochs; ++e) run_epoch();
  return log_;
}

} // namespace flowmix
