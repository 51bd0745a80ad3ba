#ifndef FLOWMIX_DATASET_HPP
#define FLOWMIX_DATASET_HPP

#include <cstdint>
#include <optional>
#include <string>
#include <vector>

#include "flowmix/matrix.hpp"

namespace flowmix {

/// Immutable once built. samples is [n x N]; labels, when present, are dense
/// codes in [0, label_names.size()) assigned by first appearance.
struct Dataset {
  Matrix samples;
  std::optional<std::vector<int>> labels;
  std::vector<std::string> label_names;
  std::string name;
  std::vector<std::string> preprocessing_record;

  std::size_t size() const { return samples.rows; }
  std::size_t dim() const { return samples.cols; }
  std::size_t num_classes() const { return label_names.size(); }
};

/// label_column: std::nullopt = no labels; negative counts from the end.
/// Blank lines and lines starting with '#' are skipped.
Dataset load_csv(const std::string& path,
                 std::optional<int> label_column = std::nullopt);

/// IDX image files (big-endian, magic 0x00000803 / labels 0x00000801).
/// Pixels are scaled to [0,1]. downsample_to > 0 mean-pools the square image
/// grid down to that side length (source side must be a multiple).
Dataset load_idx(const std::string& images_path,
                 const std::string& labels_path = "",
                 std::size_t downsample_to = 0);

struct Mode {
  std::vector<double> mean;
  double stddev = 1.0;
  double weight = 1.0;
};

/// Gaussian mixture draws; label = mode index.
Dataset synth_multimodal(const std::vector<Mode>& modes, std::size_t n,
                         std::uint64_t seed);

/// K modes spread evenly on a circle of the given radius in the first two
/// coordinates (any extra coordinates centre at zero), equal weights.
std::vector<Mode> ring_modes(std::size_t k, double radius, double stddev,
                             std::size_t dim = 2, double phase = 0.0);

enum class PreprocessKind { none, standardize, dequantize };

struct PreprocessSpec {
  PreprocessKind kind = PreprocessKind::none;
  double scale = 1.0;      // dequantize noise is uniform in [0, scale)
  std::uint64_t seed = 0;  // dequantize noise stream
};

/// Returns a transformed copy; the applied step (with its statistics) is
/// appended to preprocessing_record.
Dataset preprocess(const Dataset& d, const PreprocessSpec& spec);

Dataset subset(const Dataset& d, const std::vector<std::size_t>& indices);

/// Shuffled split; second element holds round(test_fraction * n) samples.
std::pair<Dataset, Dataset> train_test_split(const Dataset& d,
                                             double test_fraction,
                                             std::uint64_t seed);

Matrix gather_rows(const Matrix& m, const std::vector<std::size_t>& indices);

void write_csv(const std::string& path, const Matrix& m,
               const std::vector<std::string>& header = {});

/// Seeded epoch shuffling; every epoch visits each sample exactly once in
/// ceil(n / batch) batches, the last one possibly short.
class BatchIterator {
 public:
  BatchIterator(std::size_t n, std::size_t batch_size, std::uint64_t seed);

  void start_epoch(std::size_t epoch);
  /// False once the epoch is exhausted.
  bool next(std::vector<std::size_t>& indices);
  std::size_t batches_per_epoch() const;
  std::size_t batch_size() const { return batch_; }

 private:
  std::size_t n_;
  std::size_t batch_;
  std::uint64_t seed_;
  std::vector<std::size_t> order_;
  std::size_t cursor_ = 0;
};

} // namespace flowmix

#endif
