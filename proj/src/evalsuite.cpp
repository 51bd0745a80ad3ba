#include "flowmix/evalsuite.hpp"

#include <algorithm>
#include <cmath>
#include <cstdio>
#include <fstream>
#include <limits>

#include "flowmix/errors.hpp"
#include "flowmix/rng.hpp"
#include "flowmix/textio.hpp"

namespace flowmix {

namespace {

void require_two_sample_input(const Matrix& a, const Matrix& b,
                              const char* what) {
  if (a.cols != b.cols)
    throw ShapeError(std::string(what) + ": row widths differ (" +
                     std::to_string(a.cols) + " vs " + std::to_string(b.cols) +
                     ")");
  if (a.cols == 0) throw ShapeError(std::string(what) + ": zero-width rows");
  for (double v : a.data)
    if (!std::isfinite(v))
      throw DomainError(std::string(what) + ": non-finite value in first set");
  for (double v : b.data)
    if (!std::isfinite(v))
      throw DomainError(std::string(what) + ": non-finite value in second set");
}

double sqdist(const double* a, const double* b, std::size_t d) {
  double s = 0.0;
  for (std::size_t j = 0; j < d; ++j) {
    double t = a[j] - b[j];
    s += t * t;
  }
  return s;
}

/// Sorting before accumulation makes the sum a pure function of the value
/// multiset: exact under argument swaps and row permutations.
double sorted_sum(std::vector<double>& v) {
  std::sort(v.begin(), v.end());
  double s = 0.0;
  for (double x : v) s += x;
  return s;
}

double median_pooled_distance(const Matrix& a, const Matrix& b) {
  std::size_t m = a.rows, n = b.rows, p = m + n, d = a.cols;
  auto row = [&](std::size_t i) {
    return i < m ? &a.data[i * d] : &b.data[(i - m) * d];
  };
  std::vector<double> dist;
  dist.reserve(p * (p - 1) / 2);
  for (std::size_t i = 0; i < p; ++i)
    for (std::size_t j = i + 1; j < p; ++j)
      dist.push_back(std::sqrt(sqdist(row(i), row(j), d)));
  std::sort(dist.begin(), dist.end());
  std::size_t c = dist.size();
  if (c == 0) return 0.0;
  return c % 2 == 1 ? dist[c / 2] : (dist[c / 2 - 1] + dist[c / 2]) / 2.0;
}

/// Gaussian kernel values for one ordered pair list, filled in parallel then
/// reduced by sorted_sum so thread count cannot change the result.
double kernel_term(const Matrix& x, const Matrix& y, bool same_set,
                   double inv_two_h2) {
  std::vector<double> vals;
  if (same_set) {
    std::size_t m = x.rows;
    vals.resize(m * (m - 1) / 2);
#pragma omp parallel for schedule(static)
    for (std::size_t i = 0; i < m; ++i) {
      // slot base for row i within the packed upper triangle
      std::size_t base = i * m - i * (i + 1) / 2 - i;
      for (std::size_t j = i + 1; j < m; ++j)
        vals[base + j - 1] =
            std::exp(-sqdist(&x.data[i * x.cols], &x.data[j * x.cols],
                             x.cols) *
                     inv_two_h2);
    }
    // each unordered pair appears twice in the U-statistic
    return 2.0 * sorted_sum(vals) / (double(m) * double(m - 1));
  }
  std::size_t m = x.rows, n = y.rows;
  vals.resize(m * n);
#pragma omp parallel for schedule(static)
  for (std::size_t i = 0; i < m; ++i)
    for (std::size_t j = 0; j < n; ++j)
      vals[i * n + j] = std::exp(
          -sqdist(&x.data[i * x.cols], &y.data[j * y.cols], x.cols) *
          inv_two_h2);
  return 2.0 * sorted_sum(vals) / (double(m) * double(n));
}

std::vector<std::size_t> subsample_indices(std::size_t from, std::size_t take,
                                           std::uint64_t seed) {
  std::vector<std::size_t> idx(from);
  for (std::size_t i = 0; i < from; ++i) idx[i] = i;
  Rng rng(derive_seed(seed, 0x6e6e)); // dedicated stream for equalization
  rng.shuffle(idx);
  idx.resize(take);
  std::sort(idx.begin(), idx.end()); // keep original relative order
  return idx;
}

void append_kv_comments(std::string& out, const KeyValues& kvs) {
  for (const auto& [k, v] : kvs) out += "# " + k + "=" + v + "\n";
}

void write_text_file(const std::string& path, const std::string& body) {
  std::ofstream os(path, std::ios::binary | std::ios::trunc);
  if (!os) throw IoError("cannot write \"" + path + "\"");
  os << body;
  os.flush();
  if (!os) throw IoError("write to \"" + path + "\" failed");
}

std::string one_line(std::string s) {
  for (char& c : s)
    if (c == '\n' || c == '\r') c = ' ';
  return s;
}

} // namespace

double mmd_gaussian(const Matrix& a, const Matrix& b,
                    std::optional<double> bandwidth, double* bandwidth_used) {
  require_two_sample_input(a, b, "mmd");
  if (a.rows < 2 || b.rows < 2)
    throw InsufficientSamples("mmd: need at least 2 rows per side, got " +
                              std::to_string(a.rows) + " and " +
                              std::to_string(b.rows));
  double h = bandwidth ? *bandwidth : median_pooled_distance(a, b);
  if (h < 0.0 || !std::isfinite(h))
    throw DomainError("mmd: bandwidth must be non-negative and finite");
  if (h == 0.0) {
    std::fprintf(stderr,
                 "flowmix: warning: mmd bandwidth resolved to 0, using 1\n");
    h = 1.0;
  }
  if (bandwidth_used) *bandwidth_used = h;
  double inv_two_h2 = 1.0 / (2.0 * h * h);
  double within_a = kernel_term(a, a, true, inv_two_h2);
  double within_b = kernel_term(b, b, true, inv_two_h2);
  double cross = kernel_term(a, b, false, inv_two_h2);
  return within_a + within_b - cross;
}

double one_nn_two_sample(const Matrix& a, const Matrix& b,
                         std::uint64_t seed) {
  require_two_sample_input(a, b, "1-nn");
  std::size_t s = std::min(a.rows, b.rows);
  if (s < 2)
    throw InsufficientSamples("1-nn: need at least 2 rows per side, got " +
                              std::to_string(a.rows) + " and " +
                              std::to_string(b.rows));
  std::size_t d = a.cols;

  // pool = selected a-rows then selected b-rows
  Matrix pool(2 * s, d);
  auto copy_side = [&](const Matrix& src, std::size_t dst_base) {
    if (src.rows == s) {
      std::copy(src.data.begin(), src.data.end(),
                pool.data.begin() + dst_base * d);
    } else {
      auto idx = subsample_indices(src.rows, s, seed);
      for (std::size_t i = 0; i < s; ++i)
        std::copy(&src.data[idx[i] * d], &src.data[idx[i] * d] + d,
                  pool.data.begin() + (dst_base + i) * d);
    }
  };
  copy_side(a, 0);
  copy_side(b, s);

  std::size_t p = 2 * s;
  std::vector<unsigned char> own(p, 0);
#pragma omp parallel for schedule(static)
  for (std::size_t i = 0; i < p; ++i) {
    double best = std::numeric_limits<double>::infinity();
    std::size_t arg = p;
    for (std::size_t j = 0; j < p; ++j) {
      if (j == i) continue;
      double dd = sqdist(&pool.data[i * d], &pool.data[j * d], d);
      if (dd < best) { // strict: ties keep the lower index
        best = dd;
        arg = j;
      }
    }
    own[i] = (arg < s) == (i < s) ? 1 : 0;
  }
  std::size_t correct = 0;
  for (unsigned char c : own) correct += c;
  return double(correct) / double(p);
}

TwoSampleReport two_sample_report(const Matrix& a, const Matrix& b,
                                  std::optional<double> bandwidth,
                                  std::uint64_t seed) {
  TwoSampleReport r;
  r.size_a = a.rows;
  r.size_b = b.rows;
  r.mmd2 = mmd_gaussian(a, b, bandwidth, &r.bandwidth);
  r.onenn_accuracy = one_nn_two_sample(a, b, seed);
  return r;
}

void write_two_sample_csv(const std::string& path, const TwoSampleReport& r,
                          std::uint64_t seed, const KeyValues& extra) {
  std::string out;
  KeyValues kvs = {{"seed", std::to_string(seed)},
                   {"bandwidth", fmt_g17(r.bandwidth)},
                   {"size_a", std::to_string(r.size_a)},
                   {"size_b", std::to_string(r.size_b)}};
  kvs.insert(kvs.end(), extra.begin(), extra.end());
  append_kv_comments(out, kvs);
  out += "metric,value\n";
  out += "mmd2," + fmt_g17(r.mmd2) + "\n";
  out += "onenn_accuracy," + fmt_g17(r.onenn_accuracy) + "\n";
  write_text_file(path, out);
}

std::vector<KSweepEntry> nll_vs_k(
    const std::function<std::pair<TrainingLog, double>(
        std::size_t k, const Dataset& train, const Dataset& heldout)>&
        train_one,
    const Dataset& data, const std::vector<std::size_t>& ks,
    double heldout_fraction, std::uint64_t seed) {
  if (!(heldout_fraction > 0.0 && heldout_fraction < 1.0))
    throw ConfigError("nll_vs_k: heldout fraction must lie in (0, 1)");
  if (ks.empty()) throw ConfigError("nll_vs_k: no K values requested");
  auto [train, heldout] = train_test_split(data, heldout_fraction, seed);
  if (train.size() == 0 || heldout.size() == 0)
    throw InsufficientSamples("nll_vs_k: split left an empty side");

  std::vector<KSweepEntry> entries;
  entries.reserve(ks.size());
  for (std::size_t k : ks) {
    KSweepEntry e;
    e.k = k;
    try {
      auto [log, nll] = train_one(k, train, heldout);
      e.log = std::move(log);
      e.heldout_nll = nll;
    } catch (const std::exception& ex) {
      e.heldout_nll = std::numeric_limits<double>::quiet_NaN();
      e.error = ex.what();
    }
    entries.push_back(std::move(e));
  }
  return entries;
}

void write_nll_vs_k_csv(const std::string& path,
                        const std::vector<KSweepEntry>& entries,
                        const KeyValues& header) {
  std::string out;
  append_kv_comments(out, header);
  for (const auto& e : entries)
    if (!e.error.empty())
      out += "# error k=" + std::to_string(e.k) + ": " + one_line(e.error) +
             "\n";
  out += "k,epoch,train_nll_nat_per_dim,heldout_nll_nat_per_dim\n";
  for (const auto& e : entries) {
    for (std::size_t i = 0; i < e.log.rows.size(); ++i) {
      const auto& row = e.log.rows[i];
      bool last = i + 1 == e.log.rows.size();
      out += std::to_string(e.k) + "," + std::to_string(row.epoch) + "," +
             fmt_g17(row.nll_nat_per_dim) + ",";
      if (last) out += fmt_g17(e.heldout_nll);
      out += "\n";
    }
  }
  write_text_file(path, out);
}

} // namespace flowmix
