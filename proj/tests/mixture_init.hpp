#ifndef FLOWMIX_TEST_MIXTURE_INIT_HPP
#define FLOWMIX_TEST_MIXTURE_INIT_HPP

#include <algorithm>
#include <cstddef>
#include <vector>

#include "flowmix/genmm.hpp"
#include "flowmix/matrix.hpp"
#include "flowmix/rng.hpp"

namespace testutil {

/// Farthest-point selection of k distinct data rows, seeded by one random
/// draw. Standard mixture-initialization practice; symmetric near-identity
/// starts leave EM stuck on the saddle where every component learns the
/// same density.
inline std::vector<std::size_t> farthest_rows(const flowmix::Matrix& x,
                                              std::size_t k,
                                              flowmix::Rng& rng) {
  std::vector<std::size_t> chosen{rng.bounded(x.rows)};
  while (chosen.size() < k) {
    std::size_t best = 0;
    double best_d = -1.0;
    for (std::size_t i = 0; i < x.rows; ++i) {
      double dmin = 1e300;
      for (std::size_t c : chosen) {
        double d = 0.0;
        for (std::size_t j = 0; j < x.cols; ++j) {
          double r = x.at(i, j) - x.at(c, j);
          d += r * r;
        }
        dmin = std::min(dmin, d);
      }
      if (dmin > best_d) {
        best_d = dmin;
        best = i;
      }
    }
    chosen.push_back(best);
  }
  return chosen;
}

/// Centres each generator's leading actnorm on its own data row so the
/// components start distinct and responsibilities can specialize.
inline void anchor_generators(flowmix::GenMMModel& m, const flowmix::Matrix& x,
                              flowmix::Rng& rng) {
  auto rows = farthest_rows(x, m.K(), rng);
  for (std::size_t k = 0; k < m.K(); ++k) {
    auto& gen = m.generators[k];
    if (gen.layers.empty()) continue;
    auto* an = dynamic_cast<flowmix::ActnormLayer*>(gen.layers.front().get());
    if (!an) continue;
    for (std::size_t j = 0; j < m.dim; ++j)
      an->shift->values[j] = -x.at(rows[k], j);
  }
}

} // namespace testutil

#endif
