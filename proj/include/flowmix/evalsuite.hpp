#ifndef FLOWMIX_EVALSUITE_HPP
#define FLOWMIX_EVALSUITE_HPP

#include <cstdint>
#include <functional>
#include <optional>
#include <string>
#include <utility>
#include <vector>

#include "flowmix/dataset.hpp"
#include "flowmix/em.hpp"
#include "flowmix/matrix.hpp"

namespace flowmix {

/// Two-sample comparison of generated vs real rows. onenn_accuracy near 0.5
/// means the pools are indistinguishable to a nearest-neighbour classifier;
/// mmd2 near 0 means the kernel mean embeddings agree. Both sides must hold
/// at least 2 rows.
struct TwoSampleReport {
  double mmd2 = 0.0;
  double onenn_accuracy = 0.0;
  std::size_t size_a = 0;
  std::size_t size_b = 0;
  double bandwidth = 0.0; // kernel width actually used
};

/// Unbiased U-statistic estimate of MMD^2 with the Gaussian kernel
/// exp(-|a-b|^2 / (2 h^2)). Without an explicit bandwidth, h is the median
/// pairwise distance of the pooled rows; an h that resolves to 0 falls back
/// to 1 with a stderr warning. Every term is summed in sorted order, so the
/// result is exactly symmetric in (a, b) and invariant under row
/// permutations. The unbiased estimate may be negative.
double mmd_gaussian(const Matrix& a, const Matrix& b,
                    std::optional<double> bandwidth = std::nullopt,
                    double* bandwidth_used = nullptr);

/// Leave-one-out 1-NN accuracy on the pooled two-sample problem: each pooled
/// row is assigned the set label of its nearest other row (Euclidean,
/// distance ties to the lower pooled index; pool order is a-rows then
/// b-rows). Unequal sides are equalized first by seeded subsampling of the
/// larger set. Identical pools score 0, separated pools 1, exchangeable
/// pools about 0.5.
double one_nn_two_sample(const Matrix& a, const Matrix& b,
                         std::uint64_t seed = 0);

TwoSampleReport two_sample_report(
    const Matrix& a, const Matrix& b,
    std::optional<double> bandwidth = std::nullopt, std::uint64_t seed = 0);

using KeyValues = std::vector<std::pair<std::string, std::string>>;

/// CSV with "# key=value" comments recording the run setup (seed, bandwidth,
/// sizes, callers may append more) followed by metric,value rows.
void write_two_sample_csv(const std::string& path, const TwoSampleReport& r,
                          std::uint64_t seed, const KeyValues& extra = {});

/// One entry of an NLL-vs-K sweep; error is empty when training succeeded.
struct KSweepEntry {
  std::size_t k = 0;
  TrainingLog log; // per-epoch training NLL
  double heldout_nll = 0.0;
  std::string error;
};

/// Splits data once into train/held-out, then calls train_one(k, train,
/// heldout) for every requested K. train_one returns the training log and
/// the trained model's held-out NLL. A K whose training throws is recorded
/// with the error message and the sweep moves on.
std::vector<KSweepEntry> nll_vs_k(
    const std::function<std::pair<TrainingLog, double>(
        std::size_t k, const Dataset& train, const Dataset& heldout)>&
        train_one,
    const Dataset& data, const std::vector<std::size_t>& ks,
    double heldout_fraction, std::uint64_t seed);

/// Layout: "# key=value" header comments (plus one "# error ..." line per
/// failed K), then k,epoch,train_nll_nat_per_dim,heldout_nll_nat_per_dim
/// rows where only each K's final epoch row carries the held-out column.
void write_nll_vs_k_csv(const std::string& path,
                        const std::vector<KSweepEntry>& entries,
                        const KeyValues& header = {});

} // namespace flowmix

#endif
