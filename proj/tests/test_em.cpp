#define DOCTEST_CONFIG_IMPLEMENT_WITH_MAIN
#include <doctest.h>

#include <cmath>
#include <fstream>
#include <iterator>
#include <limits>

#include "flowmix/em.hpp"
#include "flowmix/errors.hpp"
#include "flowmix/rng.hpp"
#include "helpers.hpp"

using namespace flowmix;

static constexpr double kInf = std::numeric_limits<double>::infinity();

TEST_CASE("config validation rejects degenerate settings") {
  EMConfig ok;
  CHECK_NOTHROW(ok.validate());

  EMConfig c = ok;
  c.epochs = 0;
  CHECK_THROWS_AS(c.validate(), ConfigError);
  c = ok;
  c.batch_size = 0;
  CHECK_THROWS_AS(c.validate(), ConfigError);
  c = ok;
  c.learning_rate = 0.0;
  CHECK_THROWS_AS(c.validate(), ConfigError);
  c = ok;
  c.learning_rate = -1.0;
  CHECK_THROWS_AS(c.validate(), ConfigError);
  c = ok;
  c.em_update_gap = 0;
  CHECK_THROWS_AS(c.validate(), ConfigError);
  c = ok;
  c.prior_update_gap = 0;
  CHECK_THROWS_AS(c.validate(), ConfigError);
}

TEST_CASE("dimension scaling resolves by mode and width") {
  EMConfig c;
  c.dim_scaling = EMConfig::DimScaling::automatic;
  CHECK_FALSE(c.dim_scaling_active(2));
  CHECK_FALSE(c.dim_scaling_active(16));
  CHECK(c.dim_scaling_active(17));
  CHECK(c.dim_scaling_active(784));
  c.dim_scaling = EMConfig::DimScaling::on;
  CHECK(c.dim_scaling_active(2));
  c.dim_scaling = EMConfig::DimScaling::off;
  CHECK_FALSE(c.dim_scaling_active(784));
}

TEST_CASE("softmax over one component is the constant 1") {
  Matrix s(3, 1);
  s.at(0, 0) = -5.0;
  s.at(1, 0) = 2.0;
  s.at(2, 0) = -1e6;
  Matrix g = softmax_rows(s, {0});
  for (std::size_t i = 0; i < 3; ++i) CHECK(g.at(i, 0) == 1.0);
}

TEST_CASE("equal likelihoods reduce the posterior to the prior") {
  // scores = log pi + same log-likelihood per column
  Matrix s(1, 2);
  s.at(0, 0) = std::log(0.8) - 3.7;
  s.at(0, 1) = std::log(0.2) - 3.7;
  Matrix g = softmax_rows(s, {0, 1});
  CHECK(g.at(0, 0) == doctest::Approx(0.8).epsilon(1e-12));
  CHECK(g.at(0, 1) == doctest::Approx(0.2).epsilon(1e-12));
}

TEST_CASE("unit log-likelihood gap gives the logistic posterior") {
  Matrix s(1, 2);
  s.at(0, 0) = std::log(0.5) + (-1.0);
  s.at(0, 1) = std::log(0.5) + (-2.0);
  Matrix g = softmax_rows(s, {0, 1});
  CHECK(g.at(0, 0) == doctest::Approx(1.0 / (1.0 + std::exp(-1.0))).epsilon(1e-12));
  CHECK(g.at(0, 0) + g.at(0, 1) == doctest::Approx(1.0).epsilon(1e-13));
}

TEST_CASE("softmax rows stay on the simplex and respect monotonicity") {
  Rng rng(77);
  Matrix s(40, 5);
  for (auto& v : s.data) v = rng.uniform(-300.0, 300.0);
  std::vector<std::size_t> active{0, 1, 2, 3, 4};
  Matrix g = softmax_rows(s, active);
  for (std::size_t i = 0; i < s.rows; ++i) {
    double sum = 0.0;
    for (std::size_t k = 0; k < s.cols; ++k) {
      CHECK(g.at(i, k) >= 0.0);
      CHECK(g.at(i, k) <= 1.0);
      sum += g.at(i, k);
    }
    CHECK(sum == doctest::Approx(1.0).epsilon(1e-12));
  }
  // bumping one score strictly increases its share
  Matrix s2 = s;
  s2.at(7, 2) += 0.5;
  Matrix g2 = softmax_rows(s2, active);
  CHECK(g2.at(7, 2) > g.at(7, 2));
}

TEST_CASE("inactive components receive exactly zero mass") {
  Matrix s(2, 3);
  s.at(0, 0) = 1.0;
  s.at(0, 1) = 200.0; // frozen, must not matter
  s.at(0, 2) = 1.0;
  s.at(1, 0) = -4.0;
  s.at(1, 1) = 0.0;
  s.at(1, 2) = -4.0;
  Matrix g = softmax_rows(s, {0, 2});
  for (std::size_t i = 0; i < 2; ++i) {
    CHECK(g.at(i, 1) == 0.0);
    CHECK(g.at(i, 0) == doctest::Approx(0.5).epsilon(1e-12));
    CHECK(g.at(i, 2) == doctest::Approx(0.5).epsilon(1e-12));
  }
}

TEST_CASE("softmax failure modes") {
  Matrix s(1, 2);
  s.at(0, 0) = -kInf;
  s.at(0, 1) = -kInf;
  CHECK_THROWS_AS(softmax_rows(s, {0, 1}), DegenerateSample);
  CHECK_THROWS_AS(softmax_rows(s, {}), ConsistencyError);
  // a -inf column is fine as long as one active score is finite
  s.at(0, 1) = -2.0;
  Matrix g = softmax_rows(s, {0, 1});
  CHECK(g.at(0, 0) == 0.0);
  CHECK(g.at(0, 1) == 1.0);
}

TEST_CASE("log-sum-exp is shift stable and exact on equal entries") {
  std::vector<double> big{-1e5, -1e5 + 1.0, -1e5 - 2.0};
  double direct = std::log(std::exp(0.0) + std::exp(1.0) + std::exp(-2.0)) - 1e5;
  CHECK(log_sum_exp(big.data(), big.size()) == doctest::Approx(direct).epsilon(1e-14));

  std::vector<double> eq(8, -3.25);
  CHECK(log_sum_exp(eq.data(), eq.size()) ==
        doctest::Approx(-3.25 + std::log(8.0)).epsilon(1e-15));

  std::vector<double> none{-kInf, -kInf};
  CHECK(log_sum_exp(none.data(), none.size()) == -kInf);
}

TEST_CASE("prior update replaces pi with the responsibility means") {
  std::vector<double> pi{0.5, 0.5};

  // rows {[1,0],[0,1],[1,0]}
  std::vector<double> mean{2.0 / 3.0, 1.0 / 3.0};
  update_prior(pi, mean);
  CHECK(pi[0] == doctest::Approx(2.0 / 3.0));
  CHECK(pi[1] == doctest::Approx(1.0 / 3.0));

  std::vector<double> fixed{0.5, 0.5};
  update_prior(pi, fixed);
  CHECK(pi[0] == 0.5);
  CHECK(pi[1] == 0.5);
}

TEST_CASE("prior update matches a direct column-mean oracle") {
  Rng rng(11);
  Matrix gamma(50, 4);
  for (std::size_t i = 0; i < gamma.rows; ++i) {
    double row = 0.0;
    for (std::size_t k = 0; k < 4; ++k) {
      gamma.at(i, k) = rng.uniform(0.01, 1.0);
      row += gamma.at(i, k);
    }
    for (std::size_t k = 0; k < 4; ++k) gamma.at(i, k) /= row;
  }
  Responsibilities r{gamma};
  std::vector<double> mean = r.column_means();
  double drift = 0.0;
  for (double v : mean) drift += v;
  for (auto& v : mean) v /= drift; // kill accumulated rounding before the check

  std::vector<double> oracle(4, 0.0);
  for (std::size_t k = 0; k < 4; ++k) {
    for (std::size_t i = 0; i < gamma.rows; ++i) oracle[k] += gamma.at(i, k);
    oracle[k] /= double(gamma.rows);
  }

  std::vector<double> pi(4, 0.25);
  update_prior(pi, mean);
  double sum = 0.0;
  for (std::size_t k = 0; k < 4; ++k) {
    CHECK(pi[k] == doctest::Approx(oracle[k]).epsilon(1e-12));
    sum += pi[k];
  }
  CHECK(std::fabs(sum - 1.0) <= 1e-12);
}

TEST_CASE("prior update failure modes") {
  std::vector<double> pi{0.5, 0.5};
  std::vector<double> short_mean{1.0};
  CHECK_THROWS_AS(update_prior(pi, short_mean), ShapeError);
  std::vector<double> off{0.6, 0.6};
  CHECK_THROWS_AS(update_prior(pi, off), DomainError);
  std::vector<double> neg{1.2, -0.2};
  CHECK_THROWS_AS(update_prior(pi, neg), DomainError);
  CHECK(pi[0] == 0.5); // untouched on failure
}

TEST_CASE("training log renders the documented csv schema") {
  TrainingLog log;
  TrainingLogRow r1;
  r1.epoch = 1;
  r1.nll_nat_per_dim = 1.25;
  r1.pi = {0.75, 0.25};
  r1.wall_seconds = 0.011;
  TrainingLogRow r2;
  r2.epoch = 2;
  r2.nll_nat_per_dim = 1.0 / 3.0;
  r2.pi = {0.5, 0.5};
  r2.wall_seconds = 1.2349;
  log.rows = {r1, r2};

  std::string csv = log.to_csv();
  CHECK(csv ==
        "epoch,nll_nat_per_dim,pi_1,pi_2,wall_seconds\n"
        "1,1.25,0.75,0.25,0.011\n"
        "2,0.33333333333333331,0.5,0.5,1.235\n");

  testutil::TempFile f("log.csv");
  log.write_csv(f.path());
  std::ifstream in(f.path());
  std::string on_disk((std::istreambuf_iterator<char>(in)),
                      std::istreambuf_iterator<char>());
  CHECK(on_disk == csv);
}

TEST_CASE("plain ascent steps along the gradient and clears it") {
  auto p = ad::make_leaf(1, 2);
  p->values = {1.0, 2.0};
  EMConfig cfg;
  cfg.learning_rate = 0.1;
  Optimizer opt({p}, cfg);

  p->ensure_grad();
  p->grad = {0.5, -1.0};
  opt.ascend();
  CHECK(p->values[0] == doctest::Approx(1.05).epsilon(1e-15));
  CHECK(p->values[1] == doctest::Approx(1.9).epsilon(1e-15));
  CHECK(p->grad[0] == 0.0);
  CHECK(p->grad[1] == 0.0);

  p->grad = {0.5, -1.0};
  opt.ascend();
  CHECK(p->values[0] == doctest::Approx(1.10).epsilon(1e-15));
}

TEST_CASE("adaptive ascent first step moves by about lr in the gradient sign") {
  auto p = ad::make_leaf(1, 2);
  p->values = {0.0, 0.0};
  EMConfig cfg;
  cfg.learning_rate = 0.01;
  cfg.use_adam = true;
  Optimizer opt({p}, cfg);

  p->ensure_grad();
  p->grad = {3.0, -0.004};
  opt.ascend();
  // bias-corrected first step: lr * g / (|g| + eps)
  CHECK(p->values[0] == doctest::Approx(0.01).epsilon(1e-5));
  CHECK(p->values[1] == doctest::Approx(-0.01).epsilon(1e-4));
}
