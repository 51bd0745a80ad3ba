#ifndef FLOWMIX_AUTODIFF_HPP
#define FLOWMIX_AUTODIFF_HPP

#include <cstddef>
#include <functional>
#include <memory>
#include <vector>

#include "flowmix/matrix.hpp"

namespace flowmix::ad {

/// All tensors are dense row-major 2-D blocks of doubles; a scalar is 1x1.
/// Gradients live beside the values and are allocated lazily. Leaf tensors
/// (trainable parameters) keep their accumulated gradient across backward
/// passes until the optimizer clears it; intermediate gradients are consumed
/// and zeroed as the tape unwinds, so two backward calls through the same
/// graph double the leaf gradients and nothing else.
struct TensorData {
  std::size_t rows = 0;
  std::size_t cols = 0;
  std::vector<double> values;
  std::vector<double> grad;
  bool requires_grad = false;
  bool is_leaf = false;

  std::size_t size() const { return rows * cols; }
  double* data() { return values.data(); }
  const double* data() const { return values.data(); }
  void ensure_grad();
  void zero_grad();
};

using Tensor = std::shared_ptr<TensorData>;

Tensor make_tensor(std::size_t rows, std::size_t cols, double fill = 0.0);
Tensor make_leaf(std::size_t rows, std::size_t cols, double fill = 0.0);
Tensor from_values(std::size_t rows, std::size_t cols, std::vector<double> v,
                   bool leaf = false);
Tensor from_matrix(const Matrix& m);
Tensor scalar(double v);
Tensor clone_detached(const Tensor& t);

/// Records an op tape while grad is enabled and replays it in reverse on
/// backward(). Ops validate shapes eagerly and throw ShapeError/DomainError.
class Graph {
 public:
  explicit Graph(bool grad_enabled = true) : grad_enabled_(grad_enabled) {}

  bool grad_enabled() const { return grad_enabled_; }
  std::size_t tape_size() const { return tape_.size(); }

  Tensor add(const Tensor& a, const Tensor& b);
  Tensor sub(const Tensor& a, const Tensor& b);
  Tensor mul(const Tensor& a, const Tensor& b);
  Tensor div(const Tensor& a, const Tensor& b);
  Tensor add_scalar(const Tensor& a, double s);
  Tensor mul_scalar(const Tensor& a, double s);
  Tensor sub_from(double s, const Tensor& a);

  Tensor exp(const Tensor& a);
  Tensor log(const Tensor& a);
  Tensor tanh(const Tensor& a);
  Tensor abs(const Tensor& a);
  Tensor square(const Tensor& a);
  Tensor neg(const Tensor& a);
  Tensor clamp(const Tensor& a, double lo, double hi);

  Tensor matmul(const Tensor& a, const Tensor& b);
  Tensor add_row(const Tensor& a, const Tensor& row);
  Tensor sub_row(const Tensor& a, const Tensor& row);
  Tensor mul_row(const Tensor& a, const Tensor& row);

  Tensor slice_cols(const Tensor& a, std::size_t start, std::size_t count);
  Tensor concat_cols(const Tensor& a, const Tensor& b);
  Tensor permute_cols(const Tensor& a, const std::vector<std::size_t>& perm);

  Tensor sum(const Tensor& a);
  Tensor row_sums(const Tensor& a);
  Tensor col_sums(const Tensor& a);

  /// Seeds d(loss)/d(loss) = 1 and unwinds the tape. loss must be 1x1.
  void backward(const Tensor& loss);

 private:
  struct Node {
    Tensor out;
    std::function<void()> back;
  };
  std::vector<Node> tape_;
  bool grad_enabled_;

  bool track(const Tensor& a) const;
  bool track(const Tensor& a, const Tensor& b) const;
  void record(const Tensor& out, std::function<void()> back);
};

} // namespace flowmix::ad

#endif
