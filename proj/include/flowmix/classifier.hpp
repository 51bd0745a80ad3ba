#ifndef FLOWMIX_CLASSIFIER_HPP
#define FLOWMIX_CLASSIFIER_HPP

#include <string>
#include <vector>

#include "flowmix/dataset.hpp"
#include "flowmix/genmm.hpp"
#include "flowmix/latmm.hpp"
#include "flowmix/serialize.hpp"

namespace flowmix {

/// Shared recipe for every per-class density model. Each class trains an
/// independent model of this shape on its own samples; the per-class seed is
/// em.seed + a hash of the class id, so results do not depend on the order
/// classes are trained in.
struct ClassifierConfig {
  ModelKind kind = ModelKind::genmm; // genmm or latmm
  std::size_t k = 1;
  FlowBuildOptions flow;
  EMConfig em;
  RegularizerSpec reg; // latmm only

  /// Adds log empirical class frequency to each class score. Off by
  /// default: plain argmax over class likelihoods.
  bool use_class_prior = false;

  /// Worker threads for per-class training (classes are independent); the
  /// result is identical for any thread count.
  std::size_t threads = 1;

  void validate() const;
};

/// Per-class training seed: base + FNV-1a hash of the id (wrapping).
std::uint64_t class_seed(std::uint64_t base_seed, const std::string& class_id);

struct AccuracyReport {
  double accuracy = 0.0;
  std::size_t n = 0;
  std::size_t n_unseen = 0; // labels missing from the bundle, counted wrong
};

/// One density model per class; prediction is argmax class log-likelihood
/// with ties to the lower class index. Read-only use is thread-safe.
class ClassifierBundle {
 public:
  ClassifierConfig cfg;
  std::size_t dim = 0;
  std::vector<std::string> class_ids;
  std::vector<std::size_t> class_counts; // training rows per class
  std::vector<GenMMModel> gen_models;    // populated when kind == genmm
  std::vector<LatMMModel> lat_models;    // populated when kind == latmm

  /// Partitions by label and trains one model per class. A class with fewer
  /// samples than the batch size trains with a reduced batch size (warning
  /// on stderr).
  static ClassifierBundle fit(const Dataset& data,
                              const ClassifierConfig& cfg);

  /// fit, advancing every class one epoch at a time and recording test
  /// accuracy after each shared epoch. The returned bundle is identical to
  /// fit's (per-class training streams do not interact).
  static ClassifierBundle fit_with_curve(const Dataset& data,
                                         const ClassifierConfig& cfg,
                                         const Dataset& test,
                                         std::vector<AccuracyReport>& curve);

  std::size_t num_classes() const { return class_ids.size(); }
  /// Position of the id, or num_classes() when absent.
  std::size_t class_index(const std::string& id) const;

  /// Trains the new class's model only; existing models are untouched.
  void add_class(const std::string& class_id, const Matrix& class_samples);

  /// [n x Y] log p(x_i | class y) (+ log class prior when enabled).
  Matrix class_log_likelihood(const Matrix& x) const;

  /// Argmax class per row, ties to the lower index. A row every class
  /// scores at -inf throws Unscorable.
  std::vector<std::size_t> predict_indices(const Matrix& x) const;

  /// Single-sample convenience: (class id, per-class log-likelihoods).
  std::pair<std::string, std::vector<double>> predict(
      const std::vector<double>& x) const;

  /// Fraction of test rows predicted correctly; test labels are matched to
  /// bundle classes by name, and labels the bundle has never seen count as
  /// errors (reported in n_unseen).
  AccuracyReport evaluate_accuracy(const Dataset& test) const;

  void validate() const;
};

/// Directory layout: classifier.manifest + class_<i>.nnmm per class.
/// Rewriting an unchanged bundle reproduces every file byte for byte.
void save_classifier(const std::string& dir, const ClassifierBundle& b);
ClassifierBundle load_classifier(const std::string& dir);

} // namespace flowmix

#endif
