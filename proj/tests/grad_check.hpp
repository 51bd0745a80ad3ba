#ifndef FLOWMIX_TEST_GRAD_CHECK_HPP
#define FLOWMIX_TEST_GRAD_CHECK_HPP

#include <doctest.h>

#include <functional>
#include <vector>

#include "flowmix/autodiff.hpp"
#include "flowmix/rng.hpp"
#include "helpers.hpp"

namespace testutil {

inline flowmix::ad::Tensor random_leaf(std::size_t rows, std::size_t cols,
                                       std::uint64_t seed, double lo = -1.5,
                                       double hi = 1.5) {
  flowmix::Rng rng(seed);
  std::vector<double> v(rows * cols);
  for (auto& x : v) x = rng.uniform(lo, hi);
  return flowmix::ad::from_values(rows, cols, std::move(v), true);
}

/// Backprops a scalar-valued forward function once and compares every leaf
/// gradient against central differences of the same function.
inline void check_grads(
    const std::function<flowmix::ad::Tensor(
        flowmix::ad::Graph&, const std::vector<flowmix::ad::Tensor>&)>& fwd,
    const std::vector<flowmix::ad::Tensor>& leaves, double tol = 5e-6) {
  using flowmix::ad::Graph;
  using flowmix::ad::Tensor;
  Graph g;
  Tensor loss = fwd(g, leaves);
  REQUIRE(loss->rows == 1);
  REQUIRE(loss->cols == 1);
  g.backward(loss);
  for (std::size_t li = 0; li < leaves.size(); ++li) {
    const Tensor& p = leaves[li];
    auto f = [&](const std::vector<double>& x) {
      std::vector<double> keep = p->values;
      p->values = x;
      Graph gf(false);
      double v = fwd(gf, leaves)->values[0];
      p->values = keep;
      return v;
    };
    auto fd = fd_gradient(f, p->values);
    REQUIRE(p->grad.size() == fd.size());
    for (std::size_t i = 0; i < fd.size(); ++i) {
      CAPTURE(li);
      CAPTURE(i);
      CHECK(p->grad[i] == doctest::Approx(fd[i]).epsilon(tol).scale(1.0));
    }
    p->zero_grad();
  }
}

} // namespace testutil

#endif
