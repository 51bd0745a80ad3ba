#include "flowmix/dataset.hpp"

#include <cmath>
#include <fstream>
#include <map>

#include "flowmix/errors.hpp"
#include "flowmix/rng.hpp"
#include "flowmix/textio.hpp"

namespace flowmix {

namespace {

void require_finite(const Matrix& m, const std::string& who) {
  for (double v : m.data)
    if (!std::isfinite(v))
      throw FormatError(who + ": non-finite value in samples");
}

std::uint32_t read_u32_be(std::ifstream& in, const std::string& path) {
  unsigned char b[4];
  if (!in.read(reinterpret_cast<char*>(b), 4))
    throw FormatError(path + ": truncated file");
  return (std::uint32_t(b[0]) << 24) | (std::uint32_t(b[1]) << 16) |
         (std::uint32_t(b[2]) << 8) | std::uint32_t(b[3]);
}

} // namespace

Dataset load_csv(const std::string& path, std::optional<int> label_column) {
  std::ifstream in(path);
  if (!in) throw IoError("cannot open " + path);

  Dataset d;
  d.name = path;
  std::map<std::string, int> label_codes;

  std::string line;
  std::size_t lineno = 0;
  std::size_t expected_cells = 0;
  std::size_t label_idx = 0;
  bool have_label = label_column.has_value();
  bool first_content_row = true;

  while (std::getline(in, line)) {
    ++lineno;
    std::string stripped = trim(line);
    if (stripped.empty() || stripped[0] == '#') continue;
    auto cells = split(line, ',');
    for (auto& c : cells) c = trim(c);

    if (first_content_row) {
      expected_cells = cells.size();
      if (have_label) {
        int lc = *label_column;
        long resolved = lc >= 0 ? lc : long(cells.size()) + lc;
        if (resolved < 0 || resolved >= long(cells.size()))
          throw FormatError("line " + std::to_string(lineno) +
                            ": label column " + std::to_string(lc) +
                            " out of range for " +
                            std::to_string(cells.size()) + " cells");
        label_idx = std::size_t(resolved);
      }
      // a header is a first row whose feature cells are not all numeric
      bool header = false;
      for (std::size_t j = 0; j < cells.size(); ++j) {
        if (have_label && j == label_idx) continue;
        double tmp;
        if (!parse_double_strict(cells[j], tmp)) header = true;
      }
      first_content_row = false;
      if (header) continue;
    }

    if (cells.size() != expected_cells)
      throw FormatError("line " + std::to_string(lineno) + ": expected " +
                        std::to_string(expected_cells) + " cells, got " +
                        std::to_string(cells.size()));

    for (std::size_t j = 0; j < cells.size(); ++j) {
      if (have_label && j == label_idx) {
        auto [it, fresh] =
            label_codes.try_emplace(cells[j], int(d.label_names.size()));
        if (fresh) d.label_names.push_back(cells[j]);
        if (!d.labels) d.labels.emplace();
        d.labels->push_back(it->second);
        continue;
      }
      double v;
      if (!parse_double_strict(cells[j], v))
        throw ParseError("line " + std::to_string(lineno) + ", column " +
                         std::to_string(j + 1) + ": not a number: '" +
                         cells[j] + "'");
      d.samples.data.push_back(v);
    }
    ++d.samples.rows;
  }
  if (d.samples.rows == 0) throw EmptyDataset(path + ": no data rows");
  d.samples.cols = expected_cells - (have_label ? 1 : 0);
  require_finite(d.samples, path);
  return d;
}

Dataset load_idx(const std::string& images_path, const std::string& labels_path,
                 std::size_t downsample_to) {
  std::ifstream in(images_path, std::ios::binary);
  if (!in) throw IoError("cannot open " + images_path);
  std::uint32_t magic = read_u32_be(in, images_path);
  if (magic != 0x00000803u)
    throw FormatError(images_path + ": bad IDX image magic");
  std::uint32_t n = read_u32_be(in, images_path);
  std::uint32_t rows = read_u32_be(in, images_path);
  std::uint32_t cols = read_u32_be(in, images_path);
  std::vector<unsigned char> pixels(std::size_t(n) * rows * cols);
  if (!in.read(reinterpret_cast<char*>(pixels.data()),
               std::streamsize(pixels.size())))
    throw FormatError(images_path + ": truncated pixel data");

  Dataset d;
  d.name = images_path;
  std::size_t out_rows = rows, out_cols = cols;
  if (downsample_to > 0) {
    if (rows != cols)
      throw DomainError(images_path + ": downsampling needs square images");
    if (rows % downsample_to != 0)
      throw DomainError(images_path + ": image side " + std::to_string(rows) +
                        " is not a multiple of " +
                        std::to_string(downsample_to));
    out_rows = out_cols = downsample_to;
    d.preprocessing_record.push_back(
        "downsample mean-pool " + std::to_string(rows) + "x" +
        std::to_string(cols) + " -> " + std::to_string(out_rows) + "x" +
        std::to_string(out_cols));
  }
  std::size_t factor = rows / out_rows;
  d.samples = Matrix(n, out_rows * out_cols);
  for (std::size_t i = 0; i < n; ++i) {
    const unsigned char* img = pixels.data() + i * rows * cols;
    for (std::size_t oy = 0; oy < out_rows; ++oy)
      for (std::size_t ox = 0; ox < out_cols; ++ox) {
        double acc = 0.0;
        for (std::size_t dy = 0; dy < factor; ++dy)
          for (std::size_t dx = 0; dx < factor; ++dx)
            acc += img[(oy * factor + dy) * cols + (ox * factor + dx)];
        d.samples.at(i, oy * out_cols + ox) =
            acc / (255.0 * double(factor * factor));
      }
  }

  if (!labels_path.empty()) {
    std::ifstream lin(labels_path, std::ios::binary);
    if (!lin) throw IoError("cannot open " + labels_path);
    if (read_u32_be(lin, labels_path) != 0x00000801u)
      throw FormatError(labels_path + ": bad IDX label magic");
    std::uint32_t ln = read_u32_be(lin, labels_path);
    if (ln != n)
      throw ConsistencyError(labels_path + ": " + std::to_string(ln) +
                             " labels for " + std::to_string(n) + " images");
    std::vector<unsigned char> raw(ln);
    if (!lin.read(reinterpret_cast<char*>(raw.data()), std::streamsize(ln)))
      throw FormatError(labels_path + ": truncated label data");
    d.labels.emplace(raw.begin(), raw.end());
    int top = 0;
    for (int v : *d.labels) top = std::max(top, v);
    for (int v = 0; v <= top; ++v) d.label_names.push_back(std::to_string(v));
  }
  return d;
}

Dataset synth_multimodal(const std::vector<Mode>& modes, std::size_t n,
                         std::uint64_t seed) {
  if (modes.empty()) throw DomainError("synth_multimodal: no modes");
  std::size_t dim = modes[0].mean.size();
  double wsum = 0.0;
  std::vector<double> weights;
  for (const auto& m : modes) {
    if (m.mean.size() != dim)
      throw ShapeError("synth_multimodal: mode means differ in length");
    if (m.weight < 0.0)
      throw DomainError("synth_multimodal: negative mode weight");
    wsum += m.weight;
    weights.push_back(m.weight);
  }
  if (std::fabs(wsum - 1.0) > 1e-9)
    throw DomainError("synth_multimodal: weights must sum to 1, got " +
                      fmt_g17(wsum));

  Dataset d;
  d.name = "synthetic";
  d.samples = Matrix(n, dim);
  d.labels.emplace();
  d.labels->reserve(n);
  for (std::size_t k = 0; k < modes.size(); ++k)
    d.label_names.push_back("mode" + std::to_string(k));
  Rng rng(seed);
  for (std::size_t i = 0; i < n; ++i) {
    std::size_t k = rng.categorical(weights);
    d.labels->push_back(int(k));
    for (std::size_t j = 0; j < dim; ++j)
      d.samples.at(i, j) = modes[k].mean[j] + modes[k].stddev * rng.gaussian();
  }
  return d;
}

std::vector<Mode> ring_modes(std::size_t k, double radius, double stddev,
                             std::size_t dim, double phase) {
  if (k == 0) throw DomainError("ring_modes: need at least one mode");
  if (dim < 2) throw DomainError("ring_modes: dimension must be at least 2");
  std::vector<Mode> modes(k);
  for (std::size_t i = 0; i < k; ++i) {
    double a = phase + 2.0 * 3.141592653589793 * double(i) / double(k);
    modes[i].mean.assign(dim, 0.0);
    modes[i].mean[0] = radius * std::cos(a);
    modes[i].mean[1] = radius * std::sin(a);
    modes[i].stddev = stddev;
    modes[i].weight = 1.0 / double(k);
  }
  return modes;
}

Dataset preprocess(const Dataset& d, const PreprocessSpec& spec) {
  Dataset out = d;
  switch (spec.kind) {
    case PreprocessKind::none:
      return out;
    case PreprocessKind::standardize: {
      std::size_t n = d.size(), m = d.dim();
      if (n == 0) throw EmptyDataset("standardize: empty dataset");
      std::vector<double> mean(m, 0.0), sd(m, 0.0);
      for (std::size_t i = 0; i < n; ++i)
        for (std::size_t j = 0; j < m; ++j) mean[j] += d.samples.at(i, j);
      for (auto& v : mean) v /= double(n);
      for (std::size_t i = 0; i < n; ++i)
        for (std::size_t j = 0; j < m; ++j) {
          double c = d.samples.at(i, j) - mean[j];
          sd[j] += c * c;
        }
      for (std::size_t j = 0; j < m; ++j) {
        sd[j] = std::sqrt(sd[j] / double(n));
        if (sd[j] == 0.0) {
          sd[j] = 1e-8;
          out.preprocessing_record.push_back(
              "warning: zero-variance feature " + std::to_string(j) +
              " widened to 1e-8");
        }
      }
      for (std::size_t i = 0; i < n; ++i)
        for (std::size_t j = 0; j < m; ++j)
          out.samples.at(i, j) = (d.samples.at(i, j) - mean[j]) / sd[j];
      out.preprocessing_record.push_back("standardize means=" + join_g17(mean) +
                                         " stds=" + join_g17(sd));
      return out;
    }
    case PreprocessKind::dequantize: {
      if (!(spec.scale > 0.0))
        throw DomainError("dequantize: scale must be positive");
      Rng rng(spec.seed);
      for (auto& v : out.samples.data) v += rng.uniform(0.0, spec.scale);
      out.preprocessing_record.push_back(
          "dequantize scale=" + fmt_g17(spec.scale) +
          " seed=" + std::to_string(spec.seed));
      return out;
    }
  }
  throw ConfigError("preprocess: unknown kind");
}

Matrix gather_rows(const Matrix& m, const std::vector<std::size_t>& indices) {
  Matrix out(indices.size(), m.cols);
  for (std::size_t i = 0; i < indices.size(); ++i) {
    if (indices[i] >= m.rows)
      throw ShapeError("gather_rows: index " + std::to_string(indices[i]) +
                       " out of range");
    for (std::size_t j = 0; j < m.cols; ++j)
      out.at(i, j) = m.at(indices[i], j);
  }
  return out;
}

Dataset subset(const Dataset& d, const std::vector<std::size_t>& indices) {
  Dataset out;
  out.samples = gather_rows(d.samples, indices);
  if (d.labels) {
    out.labels.emplace();
    for (std::size_t i : indices) out.labels->push_back((*d.labels)[i]);
  }
  out.label_names = d.label_names;
  out.name = d.name;
  out.preprocessing_record = d.preprocessing_record;
  return out;
}

std::pair<Dataset, Dataset> train_test_split(const Dataset& d,
                                             double test_fraction,
                                             std::uint64_t seed) {
  if (!(test_fraction >= 0.0 && test_fraction < 1.0))
    throw DomainError("train_test_split: fraction must lie in [0, 1)");
  std::size_t n = d.size();
  std::vector<std::size_t> order(n);
  for (std::size_t i = 0; i < n; ++i) order[i] = i;
  Rng rng(seed);
  rng.shuffle(order);
  std::size_t n_test = std::size_t(std::llround(test_fraction * double(n)));
  std::vector<std::size_t> test(order.end() - long(n_test), order.end());
  std::vector<std::size_t> train(order.begin(), order.end() - long(n_test));
  return {subset(d, train), subset(d, test)};
}

void write_csv(const std::string& path, const Matrix& m,
               const std::vector<std::string>& header) {
  std::ofstream out(path);
  if (!out) throw IoError("cannot write " + path);
  if (!header.empty()) {
    for (std::size_t j = 0; j < header.size(); ++j) {
      if (j) out << ',';
      out << header[j];
    }
    out << '\n';
  }
  for (std::size_t i = 0; i < m.rows; ++i) {
    for (std::size_t j = 0; j < m.cols; ++j) {
      if (j) out << ',';
      out << fmt_g17(m.at(i, j));
    }
    out << '\n';
  }
  if (!out) throw IoError("failed writing " + path);
}

BatchIterator::BatchIterator(std::size_t n, std::size_t batch_size,
                             std::uint64_t seed)
    : n_(n), batch_(batch_size), seed_(seed) {
  if (n == 0) throw EmptyDataset("batch iterator over zero samples");
  if (batch_ == 0) throw DomainError("batch size must be positive");
  start_epoch(0);
}

void BatchIterator::start_epoch(std::size_t epoch) {
  order_.resize(n_);
  for (std::size_t i = 0; i < n_; ++i) order_[i] = i;
  Rng rng(derive_seed(seed_, epoch));
  rng.shuffle(order_);
  cursor_ = 0;
}

bool BatchIterator::next(std::vector<std::size_t>& indices) {
  if (cursor_ >= n_) return false;
  std::size_t take = std::min(batch_, n_ - cursor_);
  indices.assign(order_.begin() + long(cursor_),
                 order_.begin() + long(cursor_ + take));
  cursor_ += take;
  return true;
}

std::size_t BatchIterator::batches_per_epoch() const {
  return (n_ + batch_ - 1) / batch_;
}

} // namespace flowmix
