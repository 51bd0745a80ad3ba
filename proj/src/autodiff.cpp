#include "flowmix/autodiff.hpp"

#include <cmath>
#include <sstream>
#include <utility>

#include "flowmix/errors.hpp"
#include "flowmix/kernels.hpp"

namespace flowmix::ad {

namespace K = flowmix::kernels;

void TensorData::ensure_grad() {
  if (grad.size() != values.size()) grad.assign(values.size(), 0.0);
}

void TensorData::zero_grad() {
  if (!grad.empty()) std::fill(grad.begin(), grad.end(), 0.0);
}

Tensor make_tensor(std::size_t rows, std::size_t cols, double fill) {
  auto t = std::make_shared<TensorData>();
  t->rows = rows;
  t->cols = cols;
  t->values.assign(rows * cols, fill);
  return t;
}

Tensor make_leaf(std::size_t rows, std::size_t cols, double fill) {
  auto t = make_tensor(rows, cols, fill);
  t->requires_grad = true;
  t->is_leaf = true;
  return t;
}

Tensor from_values(std::size_t rows, std::size_t cols, std::vector<double> v,
                   bool leaf) {
  if (v.size() != rows * cols)
    throw ShapeError("from_values: got " + std::to_string(v.size()) +
                     " values for a " + std::to_string(rows) + "x" +
                     std::to_string(cols) + " tensor");
  auto t = std::make_shared<TensorData>();
  t->rows = rows;
  t->cols = cols;
  t->values = std::move(v);
  t->requires_grad = leaf;
  t->is_leaf = leaf;
  return t;
}

Tensor from_matrix(const Matrix& m) {
  return from_values(m.rows, m.cols, m.data, false);
}

Tensor scalar(double v) { return make_tensor(1, 1, v); }

Tensor clone_detached(const Tensor& t) {
  auto c = std::make_shared<TensorData>();
  c->rows = t->rows;
  c->cols = t->cols;
  c->values = t->values;
  c->requires_grad = t->requires_grad;
  c->is_leaf = t->is_leaf;
  return c;
}

namespace {

std::string shape_str(const Tensor& t) {
  return std::to_string(t->rows) + "x" + std::to_string(t->cols);
}

void require_same_shape(const char* op, const Tensor& a, const Tensor& b) {
  if (a->rows != b->rows || a->cols != b->cols)
    throw ShapeError(std::string(op) + ": shape mismatch " + shape_str(a) +
                     " vs " + shape_str(b));
}

void require_row(const char* op, const Tensor& a, const Tensor& row) {
  if (row->rows != 1 || row->cols != a->cols)
    throw ShapeError(std::string(op) + ": broadcast row must be 1x" +
                     std::to_string(a->cols) + ", got " + shape_str(row));
}

Tensor like(const Tensor& a) { return make_tensor(a->rows, a->cols); }

} // namespace

bool Graph::track(const Tensor& a) const {
  return grad_enabled_ && a->requires_grad;
}

bool Graph::track(const Tensor& a, const Tensor& b) const {
  return grad_enabled_ && (a->requires_grad || b->requires_grad);
}

void Graph::record(const Tensor& out, std::function<void()> back) {
  out->requires_grad = true;
  tape_.push_back({out, std::move(back)});
}

Tensor Graph::add(const Tensor& a, const Tensor& b) {
  require_same_shape("add", a, b);
  Tensor y = like(a);
  K::zip_binary(K::Binary::add, a->data(), b->data(), y->data(), y->size());
  if (track(a, b))
    record(y, [a, b, y] {
      if (a->requires_grad) {
        a->ensure_grad();
        K::acc_add(a->grad.data(), y->grad.data(), y->size());
      }
      if (b->requires_grad) {
        b->ensure_grad();
        K::acc_add(b->grad.data(), y->grad.data(), y->size());
      }
    });
  return y;
}

Tensor Graph::sub(const Tensor& a, const Tensor& b) {
  require_same_shape("sub", a, b);
  Tensor y = like(a);
  K::zip_binary(K::Binary::sub, a->data(), b->data(), y->data(), y->size());
  if (track(a, b))
    record(y, [a, b, y] {
      if (a->requires_grad) {
        a->ensure_grad();
        K::acc_add(a->grad.data(), y->grad.data(), y->size());
      }
      if (b->requires_grad) {
        b->ensure_grad();
        K::acc_scaled(b->grad.data(), -1.0, y->grad.data(), y->size());
      }
    });
  return y;
}

Tensor Graph::mul(const Tensor& a, const Tensor& b) {
  require_same_shape("mul", a, b);
  Tensor y = like(a);
  K::zip_binary(K::Binary::mul, a->data(), b->data(), y->data(), y->size());
  if (track(a, b))
    record(y, [a, b, y] {
      if (a->requires_grad) {
        a->ensure_grad();
        K::acc_mul(a->grad.data(), y->grad.data(), b->data(), y->size());
      }
      if (b->requires_grad) {
        b->ensure_grad();
        K::acc_mul(b->grad.data(), y->grad.data(), a->data(), y->size());
      }
    });
  return y;
}

Tensor Graph::div(const Tensor& a, const Tensor& b) {
  require_same_shape("div", a, b);
  for (std::size_t i = 0; i < b->size(); ++i)
    if (std::fabs(b->values[i]) < 1e-30)
      throw DegenerateScale("div: divisor magnitude below 1e-30 at index " +
                            std::to_string(i));
  Tensor y = like(a);
  K::zip_binary(K::Binary::div, a->data(), b->data(), y->data(), y->size());
  if (track(a, b))
    record(y, [a, b, y] {
      if (a->requires_grad) {
        a->ensure_grad();
        for (std::size_t i = 0; i < y->size(); ++i)
          a->grad[i] += y->grad[i] / b->values[i];
      }
      if (b->requires_grad) {
        b->ensure_grad();
        for (std::size_t i = 0; i < y->size(); ++i)
          b->grad[i] -= y->grad[i] * y->values[i] / b->values[i];
      }
    });
  return y;
}

Tensor Graph::add_scalar(const Tensor& a, double s) {
  Tensor y = like(a);
  K::zip_scalar(K::Binary::add, a->data(), s, y->data(), y->size());
  if (track(a))
    record(y, [a, y] {
      a->ensure_grad();
      K::acc_add(a->grad.data(), y->grad.data(), y->size());
    });
  return y;
}

Tensor Graph::mul_scalar(const Tensor& a, double s) {
  Tensor y = like(a);
  K::zip_scalar(K::Binary::mul, a->data(), s, y->data(), y->size());
  if (track(a))
    record(y, [a, y, s] {
      a->ensure_grad();
      K::acc_scaled(a->grad.data(), s, y->grad.data(), y->size());
    });
  return y;
}

Tensor Graph::sub_from(double s, const Tensor& a) {
  Tensor y = like(a);
  K::zip_scalar_left(K::Binary::sub, s, a->data(), y->data(), y->size());
  if (track(a))
    record(y, [a, y] {
      a->ensure_grad();
      K::acc_scaled(a->grad.data(), -1.0, y->grad.data(), y->size());
    });
  return y;
}

Tensor Graph::exp(const Tensor& a) {
  Tensor y = like(a);
  K::map_unary(K::Unary::exp, a->data(), y->data(), y->size());
  if (track(a))
    record(y, [a, y] {
      a->ensure_grad();
      K::acc_mul(a->grad.data(), y->grad.data(), y->data(), y->size());
    });
  return y;
}

Tensor Graph::log(const Tensor& a) {
  for (std::size_t i = 0; i < a->size(); ++i)
    if (!(a->values[i] > 0.0))
      throw DomainError("log: non-positive argument at index " +
                        std::to_string(i));
  Tensor y = like(a);
  K::map_unary(K::Unary::log, a->data(), y->data(), y->size());
  if (track(a))
    record(y, [a, y] {
      a->ensure_grad();
      for (std::size_t i = 0; i < y->size(); ++i)
        a->grad[i] += y->grad[i] / a->values[i];
    });
  return y;
}

Tensor Graph::tanh(const Tensor& a) {
  Tensor y = like(a);
  K::map_unary(K::Unary::tanh, a->data(), y->data(), y->size());
  if (track(a))
    record(y, [a, y] {
      a->ensure_grad();
      for (std::size_t i = 0; i < y->size(); ++i)
        a->grad[i] += y->grad[i] * (1.0 - y->values[i] * y->values[i]);
    });
  return y;
}

Tensor Graph::abs(const Tensor& a) {
  Tensor y = like(a);
  K::map_unary(K::Unary::abs, a->data(), y->data(), y->size());
  if (track(a))
    record(y, [a, y] {
      a->ensure_grad();
      for (std::size_t i = 0; i < y->size(); ++i) {
        double v = a->values[i];
        double s = v > 0.0 ? 1.0 : (v < 0.0 ? -1.0 : 0.0);
        a->grad[i] += y->grad[i] * s;
      }
    });
  return y;
}

Tensor Graph::square(const Tensor& a) {
  Tensor y = like(a);
  K::map_unary(K::Unary::square, a->data(), y->data(), y->size());
  if (track(a))
    record(y, [a, y] {
      a->ensure_grad();
      for (std::size_t i = 0; i < y->size(); ++i)
        a->grad[i] += 2.0 * y->grad[i] * a->values[i];
    });
  return y;
}

Tensor Graph::neg(const Tensor& a) {
  Tensor y = like(a);
  K::map_unary(K::Unary::neg, a->data(), y->data(), y->size());
  if (track(a))
    record(y, [a, y] {
      a->ensure_grad();
      K::acc_scaled(a->grad.data(), -1.0, y->grad.data(), y->size());
    });
  return y;
}

Tensor Graph::clamp(const Tensor& a, double lo, double hi) {
  if (!(lo <= hi)) throw DomainError("clamp: lo must not exceed hi");
  Tensor y = like(a);
  K::map_clamp(a->data(), y->data(), y->size(), lo, hi);
  if (track(a))
    record(y, [a, y, lo, hi] {
      a->ensure_grad();
      // straight-through inside the (inclusive) bounds, zero outside
      for (std::size_t i = 0; i < y->size(); ++i) {
        double v = a->values[i];
        if (v >= lo && v <= hi) a->grad[i] += y->grad[i];
      }
    });
  return y;
}

Tensor Graph::matmul(const Tensor& a, const Tensor& b) {
  if (a->cols != b->rows)
    throw ShapeError("matmul: inner dims disagree, " + shape_str(a) + " * " +
                     shape_str(b));
  Tensor y = make_tensor(a->rows, b->cols);
  K::matmul(a->data(), b->data(), y->data(), a->rows, a->cols, b->cols, false);
  if (track(a, b))
    record(y, [a, b, y] {
      // build each increment in scratch, then add it in one pass: repeated
      // backward calls then accumulate bit-identical contributions
      if (a->requires_grad) {
        a->ensure_grad();
        std::vector<double> s(a->size(), 0.0);
        K::matmul_a_bt(y->grad.data(), b->data(), s.data(), y->rows, a->cols,
                       y->cols);
        K::acc_add(a->grad.data(), s.data(), a->size());
      }
      if (b->requires_grad) {
        b->ensure_grad();
        std::vector<double> s(b->size(), 0.0);
        K::matmul_at_b(a->data(), y->grad.data(), s.data(), a->rows, a->cols,
                       y->cols);
        K::acc_add(b->grad.data(), s.data(), b->size());
      }
    });
  return y;
}

Tensor Graph::add_row(const Tensor& a, const Tensor& row) {
  require_row("add_row", a, row);
  Tensor y = like(a);
  K::add_row_bcast(a->data(), row->data(), y->data(), a->rows, a->cols);
  if (track(a, row))
    record(y, [a, row, y] {
      if (a->requires_grad) {
        a->ensure_grad();
        K::acc_add(a->grad.data(), y->grad.data(), y->size());
      }
      if (row->requires_grad) {
        row->ensure_grad();
        K::col_sum(y->grad.data(), row->grad.data(), y->rows, y->cols, true);
      }
    });
  return y;
}

Tensor Graph::sub_row(const Tensor& a, const Tensor& row) {
  require_row("sub_row", a, row);
  Tensor y = like(a);
  for (std::size_t i = 0; i < a->rows; ++i)
    for (std::size_t j = 0; j < a->cols; ++j)
      y->values[i * a->cols + j] =
          a->values[i * a->cols + j] - row->values[j];
  if (track(a, row))
    record(y, [a, row, y] {
      if (a->requires_grad) {
        a->ensure_grad();
        K::acc_add(a->grad.data(), y->grad.data(), y->size());
      }
      if (row->requires_grad) {
        row->ensure_grad();
        std::vector<double> s(y->cols, 0.0);
        K::col_sum(y->grad.data(), s.data(), y->rows, y->cols, false);
        K::acc_scaled(row->grad.data(), -1.0, s.data(), y->cols);
      }
    });
  return y;
}

Tensor Graph::mul_row(const Tensor& a, const Tensor& row) {
  require_row("mul_row", a, row);
  Tensor y = like(a);
  K::mul_row_bcast(a->data(), row->data(), y->data(), a->rows, a->cols);
  if (track(a, row))
    record(y, [a, row, y] {
      if (a->requires_grad) {
        a->ensure_grad();
        for (std::size_t i = 0; i < y->rows; ++i)
          for (std::size_t j = 0; j < y->cols; ++j)
            a->grad[i * y->cols + j] +=
                y->grad[i * y->cols + j] * row->values[j];
      }
      if (row->requires_grad) {
        row->ensure_grad();
        std::vector<double> s(y->cols, 0.0);
        for (std::size_t i = 0; i < y->rows; ++i)
          for (std::size_t j = 0; j < y->cols; ++j)
            s[j] += y->grad[i * y->cols + j] * a->values[i * y->cols + j];
        K::acc_add(row->grad.data(), s.data(), y->cols);
      }
    });
  return y;
}

Tensor Graph::slice_cols(const Tensor& a, std::size_t start, std::size_t count) {
  if (start + count > a->cols)
    throw ShapeError("slice_cols: [" + std::to_string(start) + ", " +
                     std::to_string(start + count) + ") exceeds " +
                     std::to_string(a->cols) + " columns");
  Tensor y = make_tensor(a->rows, count);
  for (std::size_t i = 0; i < a->rows; ++i)
    for (std::size_t j = 0; j < count; ++j)
      y->values[i * count + j] = a->values[i * a->cols + start + j];
  if (track(a))
    record(y, [a, y, start, count] {
      a->ensure_grad();
      for (std::size_t i = 0; i < y->rows; ++i)
        for (std::size_t j = 0; j < count; ++j)
          a->grad[i * a->cols + start + j] += y->grad[i * count + j];
    });
  return y;
}

Tensor Graph::concat_cols(const Tensor& a, const Tensor& b) {
  if (a->rows != b->rows)
    throw ShapeError("concat_cols: row counts disagree, " + shape_str(a) +
                     " vs " + shape_str(b));
  std::size_t cols = a->cols + b->cols;
  Tensor y = make_tensor(a->rows, cols);
  for (std::size_t i = 0; i < a->rows; ++i) {
    for (std::size_t j = 0; j < a->cols; ++j)
      y->values[i * cols + j] = a->values[i * a->cols + j];
    for (std::size_t j = 0; j < b->cols; ++j)
      y->values[i * cols + a->cols + j] = b->values[i * b->cols + j];
  }
  if (track(a, b))
    record(y, [a, b, y, cols] {
      if (a->requires_grad) {
        a->ensure_grad();
        for (std::size_t i = 0; i < y->rows; ++i)
          for (std::size_t j = 0; j < a->cols; ++j)
            a->grad[i * a->cols + j] += y->grad[i * cols + j];
      }
      if (b->requires_grad) {
        b->ensure_grad();
        for (std::size_t i = 0; i < y->rows; ++i)
          for (std::size_t j = 0; j < b->cols; ++j)
            b->grad[i * b->cols + j] += y->grad[i * cols + a->cols + j];
      }
    });
  return y;
}

Tensor Graph::permute_cols(const Tensor& a, const std::vector<std::size_t>& perm) {
  if (perm.size() != a->cols)
    throw ShapeError("permute_cols: permutation length " +
                     std::to_string(perm.size()) + " vs " +
                     std::to_string(a->cols) + " columns");
  std::vector<bool> seen(a->cols, false);
  for (std::size_t p : perm) {
    if (p >= a->cols || seen[p])
      throw DomainError("permute_cols: not a permutation");
    seen[p] = true;
  }
  Tensor y = like(a);
  for (std::size_t i = 0; i < a->rows; ++i)
    for (std::size_t j = 0; j < a->cols; ++j)
      y->values[i * a->cols + j] = a->values[i * a->cols + perm[j]];
  if (track(a))
    record(y, [a, y, perm] {
      a->ensure_grad();
      for (std::size_t i = 0; i < y->rows; ++i)
        for (std::size_t j = 0; j < y->cols; ++j)
          a->grad[i * y->cols + perm[j]] += y->grad[i * y->cols + j];
    });
  return y;
}

Tensor Graph::sum(const Tensor& a) {
  Tensor y = scalar(K::reduce_sum(a->data(), a->size()));
  if (track(a))
    record(y, [a, y] {
      a->ensure_grad();
      double g = y->grad[0];
      for (std::size_t i = 0; i < a->size(); ++i) a->grad[i] += g;
    });
  return y;
}

Tensor Graph::row_sums(const Tensor& a) {
  Tensor y = make_tensor(a->rows, 1);
  K::row_sum(a->data(), y->data(), a->rows, a->cols, false);
  if (track(a))
    record(y, [a, y] {
      a->ensure_grad();
      for (std::size_t i = 0; i < a->rows; ++i)
        for (std::size_t j = 0; j < a->cols; ++j)
          a->grad[i * a->cols + j] += y->grad[i];
    });
  return y;
}

Tensor Graph::col_sums(const Tensor& a) {
  Tensor y = make_tensor(1, a->cols);
  K::col_sum(a->data(), y->data(), a->rows, a->cols, false);
  if (track(a))
    record(y, [a, y] {
      a->ensure_grad();
      for (std::size_t i = 0; i < a->rows; ++i)
        for (std::size_t j = 0; j < a->cols; ++j)
          a->grad[i * a->cols + j] += y->grad[j];
    });
  return y;
}

void Graph::backward(const Tensor& loss) {
  if (loss->rows != 1 || loss->cols != 1)
    throw ShapeError("backward: loss must be a scalar, got " + shape_str(loss));
  if (!grad_enabled_)
    throw DomainError("backward: graph was built with gradients disabled");
  if (!loss->requires_grad)
    throw DomainError("backward: loss does not depend on any parameter");
  for (auto& node : tape_) node.out->ensure_grad();
  loss->grad[0] += 1.0;
  for (auto it = tape_.rbegin(); it != tape_.rend(); ++it) {
    it->back();
    if (!it->out->is_leaf) it->out->zero_grad();
  }
}

} // namespace flowmix::ad
