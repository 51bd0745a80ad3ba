#include "flowmix/flow.hpp"

#include <cmath>
#include <numbers>
#include <string>

#include "flowmix/errors.hpp"

namespace flowmix {

using ad::Graph;
using ad::Tensor;

namespace {

bool all_finite(const std::vector<double>& v) {
  for (double x : v)
    if (!std::isfinite(x)) return false;
  return true;
}

void require_finite_input(const char* who, const Tensor& t) {
  if (!all_finite(t->values))
    throw DomainError(std::string(who) + ": input contains non-finite values");
}

void require_width(const char* who, const Tensor& t, std::size_t want) {
  if (t->cols != want)
    throw ShapeError(std::string(who) + ": expected " + std::to_string(want) +
                     " columns, got " + std::to_string(t->cols));
}

Tensor init_weight(std::size_t rows, std::size_t cols, Rng& rng) {
  std::vector<double> v(rows * cols);
  for (auto& x : v) x = rng.uniform(-0.05, 0.05);
  return ad::from_values(rows, cols, std::move(v), true);
}

} // namespace

Matrix to_matrix(const Tensor& t) {
  Matrix m;
  m.rows = t->rows;
  m.cols = t->cols;
  m.data = t->values;
  return m;
}

// ---------------------------------------------------------------- actnorm

ActnormLayer::ActnormLayer(std::size_t dim)
    : log_scale(ad::make_leaf(1, dim, 0.0)), shift(ad::make_leaf(1, dim, 0.0)) {}

ActnormLayer::ActnormLayer(Tensor ls, Tensor sh)
    : log_scale(std::move(ls)), shift(std::move(sh)) {
  if (log_scale->rows != 1 || shift->rows != 1 ||
      log_scale->cols != shift->cols)
    throw ShapeError("actnorm: scale and shift must be equal-length rows");
}

std::pair<Tensor, Tensor> ActnormLayer::infer(Graph& g, const Tensor& h) const {
  require_width("actnorm", h, dim());
  Tensor y = g.add_row(g.mul_row(h, g.exp(log_scale)), shift);
  // every row contributes the same Σ log(scale); a ones-column times the
  // scalar sum keeps that exact and differentiable
  Tensor ones = ad::make_tensor(h->rows, 1, 1.0);
  Tensor ld = g.matmul(ones, g.sum(log_scale));
  return {y, ld};
}

Tensor ActnormLayer::generate(Graph& g, const Tensor& h) const {
  require_width("actnorm", h, dim());
  for (double v : log_scale->values)
    if (std::exp(v) == 0.0 || !std::isfinite(std::exp(-v)))
      throw DegenerateScale("actnorm: scale underflow");
  return g.mul_row(g.sub_row(h, shift), g.exp(g.neg(log_scale)));
}

std::vector<double> ActnormLayer::scale() const {
  std::vector<double> s(log_scale->values.size());
  for (std::size_t i = 0; i < s.size(); ++i)
    s[i] = std::exp(log_scale->values[i]);
  return s;
}

std::unique_ptr<Layer> ActnormLayer::clone() const {
  return std::make_unique<ActnormLayer>(ad::clone_detached(log_scale),
                                        ad::clone_detached(shift));
}

// ------------------------------------------------------------ permutation

PermutationLayer::PermutationLayer(std::vector<std::size_t> p)
    : perm(std::move(p)), inverse(perm.size()) {
  std::vector<bool> seen(perm.size(), false);
  for (std::size_t j = 0; j < perm.size(); ++j) {
    if (perm[j] >= perm.size() || seen[perm[j]])
      throw DomainError("permutation layer: indices are not a bijection");
    seen[perm[j]] = true;
    inverse[perm[j]] = j;
  }
}

PermutationLayer PermutationLayer::half_swap(std::size_t dim) {
  std::size_t s = dim / 2;
  std::vector<std::size_t> p(dim);
  for (std::size_t j = 0; j < dim; ++j) p[j] = (j + s) % dim;
  return PermutationLayer(std::move(p));
}

std::pair<Tensor, Tensor> PermutationLayer::infer(Graph& g,
                                                  const Tensor& h) const {
  require_width("permutation", h, dim());
  return {g.permute_cols(h, perm), nullptr};
}

Tensor PermutationLayer::generate(Graph& g, const Tensor& h) const {
  require_width("permutation", h, dim());
  return g.permute_cols(h, inverse);
}

std::unique_ptr<Layer> PermutationLayer::clone() const {
  return std::make_unique<PermutationLayer>(perm);
}

// --------------------------------------------------------------- coupling

CouplingLayer::CouplingLayer(std::size_t dim, std::size_t hidden,
                             double scale_clamp, Rng& rng)
    : dim_(dim), split_(dim / 2), clamp_(scale_clamp) {
  if (dim < 2) throw ShapeError("coupling layer needs at least 2 dimensions");
  if (hidden == 0) throw ShapeError("coupling layer needs a hidden width");
  if (!(scale_clamp > 0))
    throw DomainError("coupling layer: scale clamp must be positive");
  std::size_t out = dim_ - split_;
  w1 = init_weight(split_, hidden, rng);
  b1 = ad::make_leaf(1, hidden, 0.0);
  w2 = init_weight(hidden, hidden, rng);
  b2 = ad::make_leaf(1, hidden, 0.0);
  w_scale = init_weight(hidden, out, rng);
  b_scale = ad::make_leaf(1, out, 0.0);
  w_shift = init_weight(hidden, out, rng);
  b_shift = ad::make_leaf(1, out, 0.0);
}

std::pair<Tensor, Tensor> CouplingLayer::conditioner(Graph& g,
                                                     const Tensor& ha) const {
  Tensor t1 = g.tanh(g.add_row(g.matmul(ha, w1), b1));
  Tensor t2 = g.tanh(g.add_row(g.matmul(t1, w2), b2));
  Tensor log_ma =
      g.clamp(g.add_row(g.matmul(t2, w_scale), b_scale), -clamp_, clamp_);
  Tensor mb = g.add_row(g.matmul(t2, w_shift), b_shift);
  return {log_ma, mb};
}

std::pair<Tensor, Tensor> CouplingLayer::infer(Graph& g, const Tensor& h) const {
  require_width("coupling", h, dim_);
  Tensor ha = g.slice_cols(h, 0, split_);
  Tensor hb = g.slice_cols(h, split_, dim_ - split_);
  auto [log_ma, mb] = conditioner(g, ha);
  Tensor out_b = g.add(g.mul(hb, g.exp(log_ma)), mb);
  return {g.concat_cols(ha, out_b), g.row_sums(log_ma)};
}

Tensor CouplingLayer::generate(Graph& g, const Tensor& h) const {
  require_width("coupling", h, dim_);
  Tensor ha = g.slice_cols(h, 0, split_);
  Tensor hb = g.slice_cols(h, split_, dim_ - split_);
  auto [log_ma, mb] = conditioner(g, ha);
  Tensor xb = g.div(g.sub(hb, mb), g.exp(log_ma));
  return g.concat_cols(ha, xb);
}

std::vector<Tensor> CouplingLayer::params() const {
  return {w1, b1, w2, b2, w_scale, b_scale, w_shift, b_shift};
}

std::unique_ptr<Layer> CouplingLayer::clone() const {
  Rng dummy(0);
  auto c = std::make_unique<CouplingLayer>(dim_, b1->cols, clamp_, dummy);
  c->w1 = ad::clone_detached(w1);
  c->b1 = ad::clone_detached(b1);
  c->w2 = ad::clone_detached(w2);
  c->b2 = ad::clone_detached(b2);
  c->w_scale = ad::clone_detached(w_scale);
  c->b_scale = ad::clone_detached(b_scale);
  c->w_shift = ad::clone_detached(w_shift);
  c->b_shift = ad::clone_detached(b_shift);
  return c;
}

// ----------------------------------------------------------- flow network

FlowNetwork FlowNetwork::clone() const {
  FlowNetwork c;
  c.dim = dim;
  c.split_after = split_after;
  c.layers.reserve(layers.size());
  for (const auto& l : layers) c.layers.push_back(l->clone());
  return c;
}

std::vector<std::size_t> FlowNetwork::segment_widths() const {
  std::vector<std::size_t> widths;
  std::size_t active = dim;
  for (std::size_t i = 0; i < layers.size(); ++i) {
    for (std::size_t sp : split_after)
      if (sp == i) {
        std::size_t frozen = active / 2;
        widths.push_back(frozen);
        active -= frozen;
      }
  }
  widths.push_back(active);
  return widths;
}

InferResult FlowNetwork::infer(Graph& g, const Tensor& x) const {
  require_width("flow infer", x, dim);
  require_finite_input("flow infer", x);
  Tensor h = x;
  Tensor ld = ad::make_tensor(x->rows, 1, 0.0);
  std::vector<Tensor> frozen;
  for (std::size_t i = 0; i < layers.size(); ++i) {
    auto [next, contrib] = layers[i]->infer(g, h);
    h = next;
    if (contrib) ld = g.add(ld, contrib);
    for (std::size_t sp : split_after)
      if (sp == i) {
        std::size_t cut = h->cols - h->cols / 2;
        frozen.push_back(g.slice_cols(h, cut, h->cols - cut));
        h = g.slice_cols(h, 0, cut);
      }
  }
  Tensor z = h;
  for (auto it = frozen.rbegin(); it != frozen.rend(); ++it)
    z = g.concat_cols(z, *it);
  if (!all_finite(z->values) || !all_finite(ld->values))
    throw NumericalOverflow("flow infer: non-finite intermediate state");
  return {z, ld};
}

Tensor FlowNetwork::log_prob(Graph& g, const Tensor& x) const {
  auto [z, ld] = infer(g, x);
  Tensor quad = g.mul_scalar(g.row_sums(g.square(z)), -0.5);
  double norm = -0.5 * double(dim) * std::log(2.0 * std::numbers::pi);
  return g.add(g.add_scalar(quad, norm), ld);
}

Matrix FlowNetwork::generate(const Matrix& zmat) const {
  Graph g(false);
  Tensor z = ad::from_matrix(zmat);
  require_width("flow generate", z, dim);
  require_finite_input("flow generate", z);

  auto widths = segment_widths();
  std::size_t active_width = widths.back();
  widths.pop_back(); // now frozen-segment widths in split order
  Tensor h = g.slice_cols(z, 0, active_width);
  // z carries [active | last split | ... | first split]
  std::vector<Tensor> frozen(widths.size());
  std::size_t off = active_width;
  for (std::size_t s = widths.size(); s-- > 0;) {
    frozen[s] = g.slice_cols(z, off, widths[s]);
    off += widths[s];
  }

  std::size_t next_seg = widths.size();
  for (std::size_t i = layers.size(); i-- > 0;) {
    for (std::size_t sp : split_after)
      if (sp == i) {
        --next_seg;
        h = g.concat_cols(h, frozen[next_seg]);
      }
    h = layers[i]->generate(g, h);
  }
  Matrix out = to_matrix(h);
  if (!all_finite(out.data))
    throw NumericalOverflow("flow generate: non-finite intermediate state");
  return out;
}

Matrix FlowNetwork::sample(std::size_t n, Rng& rng) const {
  if (n < 1) throw DomainError("sample: count must be at least 1");
  Matrix z(n, dim);
  for (auto& v : z.data) v = rng.gaussian();
  return generate(z);
}

std::pair<Matrix, std::vector<double>> FlowNetwork::infer_values(
    const Matrix& x) const {
  Graph g(false);
  auto [z, ld] = infer(g, ad::from_matrix(x));
  return {to_matrix(z), ld->values};
}

std::vector<double> FlowNetwork::log_prob_values(const Matrix& x) const {
  Graph g(false);
  return log_prob(g, ad::from_matrix(x))->values;
}

std::vector<Tensor> FlowNetwork::params() const {
  std::vector<Tensor> out;
  for (const auto& l : layers)
    for (auto& p : l->params()) out.push_back(p);
  return out;
}

FlowNetwork build_flow(std::size_t dim, const FlowBuildOptions& opt, Rng& rng) {
  if (dim < 1) throw ShapeError("build_flow: dimension must be at least 1");
  FlowNetwork net;
  net.dim = dim;
  std::size_t active = dim;
  for (std::size_t b = 0; b < opt.depth; ++b) {
    net.layers.push_back(std::make_unique<ActnormLayer>(active));
    if (active >= 2) {
      net.layers.push_back(std::make_unique<PermutationLayer>(
          PermutationLayer::half_swap(active)));
      std::size_t hidden =
          opt.hidden ? opt.hidden : std::max<std::size_t>(2 * active, 16);
      net.layers.push_back(std::make_unique<CouplingLayer>(
          active, hidden, opt.scale_clamp, rng));
    }
    for (std::size_t sb : opt.split_after_blocks)
      if (sb == b && active >= 4) {
        net.split_after.push_back(net.layers.size() - 1);
        active -= active / 2;
      }
  }
  return net;
}

std::vector<std::size_t> squeeze_permutation(std::size_t height,
                                             std::size_t width) {
  if (height % 2 != 0 || width % 2 != 0)
    throw DomainError("squeeze: grid sides must be even");
  std::vector<std::size_t> perm;
  perm.reserve(height * width);
  for (std::size_t dy = 0; dy < 2; ++dy)
    for (std::size_t dx = 0; dx < 2; ++dx)
      for (std::size_t y = 0; y < height; y += 2)
        for (std::size_t x = 0; x < width; x += 2)
          perm.push_back((y + dy) * width + (x + dx));
  return perm;
}

} // namespace flowmix
