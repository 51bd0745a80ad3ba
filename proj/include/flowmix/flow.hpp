#ifndef FLOWMIX_FLOW_HPP
#define FLOWMIX_FLOW_HPP

#include <memory>
#include <utility>
#include <vector>

#include "flowmix/autodiff.hpp"
#include "flowmix/matrix.hpp"
#include "flowmix/rng.hpp"

namespace flowmix {

Matrix to_matrix(const ad::Tensor& t);

enum class LayerKind { actnorm, permutation, coupling };

/// One invertible block. infer runs x→z and returns the transformed batch
/// plus a per-row log|det| contribution (null when the layer is volume
/// preserving); generate runs z→x on values only.
class Layer {
 public:
  virtual ~Layer() = default;
  virtual LayerKind kind() const = 0;
  virtual std::size_t dim() const = 0;
  virtual std::pair<ad::Tensor, ad::Tensor> infer(ad::Graph& g,
                                                  const ad::Tensor& h) const = 0;
  virtual ad::Tensor generate(ad::Graph& g, const ad::Tensor& h) const = 0;
  virtual std::vector<ad::Tensor> params() const { return {}; }
  virtual std::unique_ptr<Layer> clone() const = 0;
};

/// Element-wise affine map z = scale ⊙ x + shift with strictly positive
/// scale. The trainable parameter is log(scale), so positivity holds by
/// construction and the per-row log|det| is exactly the sum of the stored
/// log-scales.
class ActnormLayer final : public Layer {
 public:
  explicit ActnormLayer(std::size_t dim);
  ActnormLayer(ad::Tensor log_scale, ad::Tensor shift);

  LayerKind kind() const override { return LayerKind::actnorm; }
  std::size_t dim() const override { return log_scale->cols; }
  std::pair<ad::Tensor, ad::Tensor> infer(ad::Graph& g,
                                          const ad::Tensor& h) const override;
  ad::Tensor generate(ad::Graph& g, const ad::Tensor& h) const override;
  std::vector<ad::Tensor> params() const override { return {log_scale, shift}; }
  std::unique_ptr<Layer> clone() const override;

  /// The positive per-element scale, exp of the stored parameter.
  std::vector<double> scale() const;

  ad::Tensor log_scale;
  ad::Tensor shift;
};

/// Fixed index bijection; log|det| = 0.
class PermutationLayer final : public Layer {
 public:
  explicit PermutationLayer(std::vector<std::size_t> perm);
  /// Half-swap: the trailing ceil(d/2) coordinates move to the front.
  static PermutationLayer half_swap(std::size_t dim);

  LayerKind kind() const override { return LayerKind::permutation; }
  std::size_t dim() const override { return perm.size(); }
  std::pair<ad::Tensor, ad::Tensor> infer(ad::Graph& g,
                                          const ad::Tensor& h) const override;
  ad::Tensor generate(ad::Graph& g, const ad::Tensor& h) const override;
  std::unique_ptr<Layer> clone() const override;

  std::vector<std::size_t> perm;
  std::vector<std::size_t> inverse;
};

/// Affine coupling: the leading split_index coordinates pass through and
/// drive a small dense net (shared tanh trunk, two heads) producing a
/// log-scale (clamped to ±scale_clamp, then exponentiated) and a shift for
/// the remaining coordinates.
class CouplingLayer final : public Layer {
 public:
  CouplingLayer(std::size_t dim, std::size_t hidden, double scale_clamp,
                Rng& rng);

  LayerKind kind() const override { return LayerKind::coupling; }
  std::size_t dim() const override { return dim_; }
  std::pair<ad::Tensor, ad::Tensor> infer(ad::Graph& g,
                                          const ad::Tensor& h) const override;
  ad::Tensor generate(ad::Graph& g, const ad::Tensor& h) const override;
  std::vector<ad::Tensor> params() const override;
  std::unique_ptr<Layer> clone() const override;

  std::size_t split_index() const { return split_; }
  std::size_t hidden() const { return b1->cols; }
  double scale_clamp() const { return clamp_; }

  // trunk then scale/shift heads; exposed for persistence
  ad::Tensor w1, b1, w2, b2, w_scale, b_scale, w_shift, b_shift;

 private:
  // conditioner outputs (log_scale_clamped, shift) for the pass-through part
  std::pair<ad::Tensor, ad::Tensor> conditioner(ad::Graph& g,
                                                const ad::Tensor& ha) const;
  std::size_t dim_;
  std::size_t split_;
  double clamp_;
};

struct InferResult {
  ad::Tensor z;      // [n x dim]
  ad::Tensor logdet; // [n x 1]
};

/// An ordered invertible stack mapping data x to latent z (infer) and back
/// (generate). split_after lists layer indices after which the trailing half
/// of the active coordinates is frozen; frozen segments join the final z as
/// [active | last split | ... | first split] and are scored as standard
/// normal like everything else.
class FlowNetwork {
 public:
  FlowNetwork() = default;
  FlowNetwork(FlowNetwork&&) = default;
  FlowNetwork& operator=(FlowNetwork&&) = default;
  FlowNetwork(const FlowNetwork&) = delete;
  FlowNetwork& operator=(const FlowNetwork&) = delete;

  FlowNetwork clone() const;

  InferResult infer(ad::Graph& g, const ad::Tensor& x) const;
  /// −(N/2)·log 2π − ½‖z‖² + log|det|, one value per row.
  ad::Tensor log_prob(ad::Graph& g, const ad::Tensor& x) const;
  Matrix generate(const Matrix& z) const;
  Matrix sample(std::size_t n, Rng& rng) const;

  /// Value-only convenience: z plus per-row log|det|, no tape.
  std::pair<Matrix, std::vector<double>> infer_values(const Matrix& x) const;
  std::vector<double> log_prob_values(const Matrix& x) const;

  std::vector<ad::Tensor> params() const;

  std::size_t dim = 0;
  std::vector<std::unique_ptr<Layer>> layers;
  std::vector<std::size_t> split_after;

 private:
  // widths of frozen segments in split order, plus the final active width
  std::vector<std::size_t> segment_widths() const;
};

struct FlowBuildOptions {
  std::size_t depth = 4;    // coupling blocks
  std::size_t hidden = 0;   // 0 = max(2*active_dim, 16)
  double scale_clamp = 5.0;
  std::vector<std::size_t> split_after_blocks; // 0-based block indices
};

/// Stacks depth blocks of actnorm → half-swap permutation → coupling, started
/// at the identity (unit scales, zero shifts, near-zero coupling nets).
FlowNetwork build_flow(std::size_t dim, const FlowBuildOptions& opt, Rng& rng);

/// Column permutation realizing a 2x2 space-to-depth reshape of a flattened
/// height x width grid; both sides must be even.
std::vector<std::size_t> squeeze_permutation(std::size_t height,
                                             std::size_t width);

} // namespace flowmix

#endif
