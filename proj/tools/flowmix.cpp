/// flowmix command line: train mixture-of-flows density models, draw samples,
/// interpolate between inputs, run max-likelihood classification, and compute
/// evaluation reports.
///
/// Exit codes partition the failure causes:
///   0  success
///   2  configuration / usage errors
///   3  data errors (missing or malformed datasets, mismatched dimensions)
///   4  numerical failures (training aborts keep the rolled-back checkpoint)
///   5  model persistence errors (bad magic, version, truncation)
///
/// Every command is deterministic given --seed: re-running reproduces outputs
/// byte for byte, except for the wall_seconds column of training logs.

#include <algorithm>
#include <cctype>
#include <cmath>
#include <cstdint>
#include <cstdlib>
#include <fstream>
#include <functional>
#include <iostream>
#include <optional>
#include <string>
#include <utility>
#include <vector>

#include <CLI11.hpp>

#include "flowmix/classifier.hpp"
#include "flowmix/dataset.hpp"
#include "flowmix/em.hpp"
#include "flowmix/errors.hpp"
#include "flowmix/evalsuite.hpp"
#include "flowmix/flow.hpp"
#include "flowmix/genmm.hpp"
#include "flowmix/latmm.hpp"
#include "flowmix/rng.hpp"
#include "flowmix/runconfig.hpp"
#include "flowmix/serialize.hpp"
#include "flowmix/textio.hpp"

namespace {

using namespace flowmix;

/// Thrown to unwind out of a subcommand with a specific process exit code.
struct ExitWith {
  int code;
  std::string message;
};

[[noreturn]] void fail(int code, const std::string& msg) {
  throw ExitWith{code, msg};
}

/// Runs fn and converts any library error into the given exit code.
template <typename Fn>
auto phase(int code, Fn&& fn) -> decltype(fn()) {
  try {
    return fn();
  } catch (const ExitWith&) {
    throw;
  } catch (const Error& e) {
    throw ExitWith{code, e.what()};
  }
}

/// Runs fn and maps each library error class onto the exit-code partition:
/// usage conflicts 2, data problems 3, persistence 5, anything numerical 4.
template <typename Fn>
auto mapped(Fn&& fn) -> decltype(fn()) {
  try {
    return fn();
  } catch (const ExitWith&) {
    throw;
  } catch (const ConfigError& e) {
    throw ExitWith{2, e.what()};
  } catch (const ConflictError& e) {
    throw ExitWith{2, e.what()};
  } catch (const ShapeError& e) {
    throw ExitWith{3, e.what()};
  } catch (const ConsistencyError& e) {
    throw ExitWith{3, e.what()};
  } catch (const EmptyDataset& e) {
    throw ExitWith{3, e.what()};
  } catch (const InsufficientSamples& e) {
    throw ExitWith{3, e.what()};
  } catch (const DomainError& e) {
    throw ExitWith{3, e.what()};
  } catch (const FormatError& e) {
    throw ExitWith{3, e.what()};
  } catch (const ParseError& e) {
    throw ExitWith{3, e.what()};
  } catch (const IoError& e) {
    throw ExitWith{3, e.what()};
  } catch (const PersistenceError& e) {
    throw ExitWith{5, e.what()};
  } catch (const Error& e) {
    throw ExitWith{4, e.what()};
  }
}

std::size_t strict_size(const std::string& what, const std::string& v) {
  bool digits = !v.empty() && std::all_of(v.begin(), v.end(), [](unsigned char c) {
                  return std::isdigit(c) != 0;
                });
  if (!digits) fail(2, what + ": not a non-negative integer: '" + v + "'");
  try {
    return std::size_t(std::stoull(v));
  } catch (const std::exception&) {
    fail(2, what + ": integer out of range: '" + v + "'");
  }
}

// ---------------------------------------------------------------------------
// Shared flag groups
// ---------------------------------------------------------------------------

/// The full training schema: a config file plus one override flag per key.
/// Path keys (data/out/log/label_column) are file-only here; commands attach
/// their own flags for those and merge explicitly.
struct ConfigArgs {
  std::string config_path;
  RunConfig flags;
  std::vector<CLI::Option*> opts;
  std::vector<std::function<void(RunConfig&, const RunConfig&)>> copy;

  void attach(CLI::App* cmd) {
    cmd->add_option("--config", config_path,
                    "key=value config file; explicit flags override it");
    auto reg = [&](CLI::Option* o,
                   std::function<void(RunConfig&, const RunConfig&)> f) {
      opts.push_back(o);
      copy.push_back(std::move(f));
    };
    reg(cmd->add_option("--model", flags.model, "model kind: genmm | latmm"),
        [](RunConfig& d, const RunConfig& s) { d.model = s.model; });
    reg(cmd->add_option("--k", flags.k, "number of mixture components"),
        [](RunConfig& d, const RunConfig& s) { d.k = s.k; });
    reg(cmd->add_option("--depth", flags.depth, "coupling blocks per flow"),
        [](RunConfig& d, const RunConfig& s) { d.depth = s.depth; });
    reg(cmd->add_option("--hidden", flags.hidden,
                        "coupling hidden width (0 = automatic)"),
        [](RunConfig& d, const RunConfig& s) { d.hidden = s.hidden; });
    reg(cmd->add_option("--scale-clamp", flags.scale_clamp,
                        "coupling log-scale clamp"),
        [](RunConfig& d, const RunConfig& s) { d.scale_clamp = s.scale_clamp; });
    reg(cmd->add_option("--split-after", flags.split_after,
                        "comma-separated block indices that split channels"),
        [](RunConfig& d, const RunConfig& s) { d.split_after = s.split_after; });
    reg(cmd->add_option("--epochs", flags.epochs, "training epochs"),
        [](RunConfig& d, const RunConfig& s) { d.epochs = s.epochs; });
    reg(cmd->add_option("--batch-size", flags.batch_size, "batch size"),
        [](RunConfig& d, const RunConfig& s) { d.batch_size = s.batch_size; });
    reg(cmd->add_option("--learning-rate", flags.learning_rate,
                        "gradient ascent step size"),
        [](RunConfig& d, const RunConfig& s) {
          d.learning_rate = s.learning_rate;
        });
    reg(cmd->add_option("--em-update-gap", flags.em_update_gap,
                        "epochs between responsibility-model refreshes"),
        [](RunConfig& d, const RunConfig& s) {
          d.em_update_gap = s.em_update_gap;
        });
    reg(cmd->add_option("--prior-update-gap", flags.prior_update_gap,
                        "epochs between mixture-weight updates"),
        [](RunConfig& d, const RunConfig& s) {
          d.prior_update_gap = s.prior_update_gap;
        });
    reg(cmd->add_option("--dim-scaling", flags.dim_scaling,
                        "divide log-likelihoods by dim in the E-step: "
                        "auto | on | off"),
        [](RunConfig& d, const RunConfig& s) { d.dim_scaling = s.dim_scaling; });
    reg(cmd->add_flag("--adam", flags.use_adam, "use adaptive moments"),
        [](RunConfig& d, const RunConfig& s) { d.use_adam = s.use_adam; });
    reg(cmd->add_option("--adam-beta1", flags.adam_beta1, "adam beta1"),
        [](RunConfig& d, const RunConfig& s) { d.adam_beta1 = s.adam_beta1; });
    reg(cmd->add_option("--adam-beta2", flags.adam_beta2, "adam beta2"),
        [](RunConfig& d, const RunConfig& s) { d.adam_beta2 = s.adam_beta2; });
    reg(cmd->add_option("--adam-eps", flags.adam_eps, "adam epsilon"),
        [](RunConfig& d, const RunConfig& s) { d.adam_eps = s.adam_eps; });
    reg(cmd->add_option("--regularizer", flags.regularizer,
                        "latent scale regularizer: gamma_prior | l2 | none"),
        [](RunConfig& d, const RunConfig& s) { d.regularizer = s.regularizer; });
    reg(cmd->add_option("--reg-a", flags.reg_a, "gamma prior shape"),
        [](RunConfig& d, const RunConfig& s) { d.reg_a = s.reg_a; });
    reg(cmd->add_option("--reg-b", flags.reg_b, "gamma prior rate"),
        [](RunConfig& d, const RunConfig& s) { d.reg_b = s.reg_b; });
    reg(cmd->add_option("--reg-lambda", flags.reg_lambda, "l2 strength"),
        [](RunConfig& d, const RunConfig& s) { d.reg_lambda = s.reg_lambda; });
    reg(cmd->add_option("--seed", flags.seed, "master random seed"),
        [](RunConfig& d, const RunConfig& s) { d.seed = s.seed; });
  }

  RunConfig resolve() const {
    return phase(2, [&] {
      RunConfig rc;
      if (!config_path.empty()) rc.apply_file(config_path);
      for (std::size_t i = 0; i < opts.size(); ++i)
        if (opts[i]->count() > 0) copy[i](rc, flags);
      rc.validate();
      return rc;
    });
  }
};

/// Input data selection: exactly one of a CSV file, an IDX image file, or an
/// inline synthetic ring spec.
struct DataArgs {
  std::string csv;
  std::string label_column;
  std::string idx_images;
  std::string idx_labels;
  std::size_t idx_downsample = 0;
  std::size_t synth_ring = 0;
  std::size_t synth_n = 1024;
  double synth_radius = 5.0;
  double synth_std = 0.5;
  std::size_t synth_dim = 2;
  std::uint64_t synth_seed = 0;
  std::string preprocess_kind = "none";
  double preprocess_scale = 1.0;
  std::uint64_t preprocess_seed = 0;
  CLI::Option* csv_opt = nullptr;
  CLI::Option* label_opt = nullptr;

  void attach(CLI::App* cmd, const std::string& data_flag = "--data") {
    csv_opt = cmd->add_option(data_flag, csv, "CSV dataset path");
    label_opt = cmd->add_option("--label-column", label_column,
                                "label column index in the CSV "
                                "(negative = from the end)");
    cmd->add_option("--idx-images", idx_images, "IDX image file");
    cmd->add_option("--idx-labels", idx_labels, "IDX label file");
    cmd->add_option("--idx-downsample", idx_downsample,
                    "mean-pool IDX images to this side length");
    cmd->add_option("--synth-ring", synth_ring,
                    "synthesize this many Gaussian modes on a ring");
    cmd->add_option("--synth-n", synth_n, "synthetic sample count");
    cmd->add_option("--synth-radius", synth_radius, "ring radius");
    cmd->add_option("--synth-std", synth_std, "per-mode standard deviation");
    cmd->add_option("--synth-dim", synth_dim, "synthetic dimensionality");
    cmd->add_option("--synth-seed", synth_seed, "synthetic data seed");
    cmd->add_option("--preprocess", preprocess_kind,
                    "none | standardize | dequantize");
    cmd->add_option("--preprocess-scale", preprocess_scale,
                    "dequantize noise is uniform in [0, scale)");
    cmd->add_option("--preprocess-seed", preprocess_seed,
                    "dequantize noise seed");
  }

  /// Folds the config-file data path in: flags beat the file.
  void merge(const RunConfig& rc) {
    if (csv_opt->count() == 0 && csv.empty()) csv = rc.data;
    if (label_opt->count() == 0 && label_column.empty())
      label_column = rc.label_column;
  }

  PreprocessSpec preprocess_spec() const {
    PreprocessSpec spec;
    if (preprocess_kind == "none") spec.kind = PreprocessKind::none;
    else if (preprocess_kind == "standardize")
      spec.kind = PreprocessKind::standardize;
    else if (preprocess_kind == "dequantize")
      spec.kind = PreprocessKind::dequantize;
    else
      fail(2, "--preprocess: expected none/standardize/dequantize, got '" +
                  preprocess_kind + "'");
    spec.scale = preprocess_scale;
    spec.seed = preprocess_seed;
    return spec;
  }

  Dataset load() const {
    int sources =
        int(!csv.empty()) + int(!idx_images.empty()) + int(synth_ring > 0);
    if (sources == 0)
      fail(2, "no input data: pass --data, --idx-images, or --synth-ring");
    if (sources > 1)
      fail(2, "pass exactly one of --data, --idx-images, --synth-ring");
    PreprocessSpec spec = preprocess_spec();
    std::optional<int> label;
    if (!label_column.empty()) {
      RunConfig tmp;
      tmp.label_column = label_column;
      label = phase(2, [&] { return tmp.label_column_value(); });
    }
    return mapped([&] {
      Dataset d;
      if (!csv.empty()) d = load_csv(csv, label);
      else if (!idx_images.empty())
        d = load_idx(idx_images, idx_labels, idx_downsample);
      else
        d = synth_multimodal(
            ring_modes(synth_ring, synth_radius, synth_std, synth_dim),
            synth_n, synth_seed);
      if (spec.kind != PreprocessKind::none) d = preprocess(d, spec);
      return d;
    });
  }

  void echo(KeyValues& kvs) const {
    if (!csv.empty()) {
      kvs.emplace_back("data", csv);
      if (!label_column.empty()) kvs.emplace_back("label_column", label_column);
    } else if (!idx_images.empty()) {
      kvs.emplace_back("idx_images", idx_images);
      if (!idx_labels.empty()) kvs.emplace_back("idx_labels", idx_labels);
      if (idx_downsample)
        kvs.emplace_back("idx_downsample", std::to_string(idx_downsample));
    } else if (synth_ring) {
      kvs.emplace_back("synth_ring", std::to_string(synth_ring));
      kvs.emplace_back("synth_n", std::to_string(synth_n));
      kvs.emplace_back("synth_radius", fmt_g17(synth_radius));
      kvs.emplace_back("synth_std", fmt_g17(synth_std));
      kvs.emplace_back("synth_dim", std::to_string(synth_dim));
      kvs.emplace_back("synth_seed", std::to_string(synth_seed));
    }
    if (preprocess_kind != "none") {
      kvs.emplace_back("preprocess", preprocess_kind);
      kvs.emplace_back("preprocess_scale", fmt_g17(preprocess_scale));
      kvs.emplace_back("preprocess_seed", std::to_string(preprocess_seed));
    }
  }
};

// ---------------------------------------------------------------------------
// Output writers
// ---------------------------------------------------------------------------

std::ofstream open_out(const std::string& path) {
  std::ofstream os(path);
  if (!os) throw IoError("cannot write " + path);
  return os;
}

void finish_out(std::ofstream& os, const std::string& path) {
  os.flush();
  if (!os) throw IoError("write failed: " + path);
}

void write_matrix_csv(const std::string& path, const Matrix& m,
                      const KeyValues& kvs) {
  auto os = open_out(path);
  write_comment_header(os, kvs);
  for (std::size_t j = 0; j < m.cols; ++j)
    os << (j ? "," : "") << "x" << j;
  os << "\n";
  for (std::size_t i = 0; i < m.rows; ++i) {
    auto row = m.row(i);
    for (std::size_t j = 0; j < m.cols; ++j)
      os << (j ? "," : "") << fmt_g17(row[j]);
    os << "\n";
  }
  finish_out(os, path);
}

struct GridShape {
  std::size_t cols, rows;
};

GridShape grid_shape(std::size_t n, std::size_t forced_cols) {
  std::size_t cols = forced_cols;
  if (cols == 0) {
    cols = 1;
    while (cols * cols < n) ++cols;
  }
  return {cols, (n + cols - 1) / cols};
}

/// Plain ASCII PGM (P2) contact sheet; one square tile per matrix row,
/// values clamped to [0,1] and scaled to 0..255.
void write_pgm_grid(const std::string& path, const Matrix& m, std::size_t side,
                    std::size_t forced_cols, const KeyValues& kvs) {
  GridShape g = grid_shape(m.rows, forced_cols);
  std::size_t w = g.cols * side, h = g.rows * side;
  auto os = open_out(path);
  os << "P2\n";
  write_comment_header(os, kvs);
  os << w << " " << h << "\n255\n";
  for (std::size_t y = 0; y < h; ++y) {
    for (std::size_t x = 0; x < w; ++x) {
      std::size_t img = (y / side) * g.cols + x / side;
      int p = 0;
      if (img < m.rows) {
        double v = m.at(img, (y % side) * side + x % side);
        p = int(std::lround(std::clamp(v, 0.0, 1.0) * 255.0));
      }
      os << (x ? " " : "") << p;
    }
    os << "\n";
  }
  finish_out(os, path);
}

/// SVG contact sheet with one 8x8-pixel rect per image pixel.
void write_svg_grid(const std::string& path, const Matrix& m, std::size_t side,
                    std::size_t forced_cols, const KeyValues& kvs) {
  constexpr std::size_t cell = 8, gap = 4;
  GridShape g = grid_shape(m.rows, forced_cols);
  std::size_t w = g.cols * (side * cell + gap) + gap;
  std::size_t h = g.rows * (side * cell + gap) + gap;
  auto os = open_out(path);
  os << "<svg xmlns=\"http://www.w3.org/2000/svg\" width=\"" << w
     << "\" height=\"" << h << "\">\n";
  for (const auto& [key, value] : kvs)
    os << "<!-- " << key << "=" << value << " -->\n";
  os << "<rect width=\"" << w << "\" height=\"" << h
     << "\" fill=\"#404040\"/>\n";
  for (std::size_t img = 0; img < m.rows; ++img) {
    std::size_t ox = gap + (img % g.cols) * (side * cell + gap);
    std::size_t oy = gap + (img / g.cols) * (side * cell + gap);
    for (std::size_t r = 0; r < side; ++r)
      for (std::size_t c = 0; c < side; ++c) {
        double v = m.at(img, r * side + c);
        int p = int(std::lround(std::clamp(v, 0.0, 1.0) * 255.0));
        os << "<rect x=\"" << ox + c * cell << "\" y=\"" << oy + r * cell
           << "\" width=\"" << cell << "\" height=\"" << cell
           << "\" fill=\"rgb(" << p << "," << p << "," << p << ")\"/>\n";
      }
  }
  os << "</svg>\n";
  finish_out(os, path);
}

void write_training_log(const std::string& path, const TrainingLog& log,
                        const KeyValues& kvs) {
  auto os = open_out(path);
  write_comment_header(os, kvs);
  os << log.to_csv();
  finish_out(os, path);
}

void write_metrics_csv(const std::string& path, const KeyValues& kvs,
                       const KeyValues& metrics) {
  auto os = open_out(path);
  write_comment_header(os, kvs);
  os << "metric,value\n";
  for (const auto& [key, value] : metrics) os << key << "," << value << "\n";
  finish_out(os, path);
}

/// Writes samples either as CSV or, when side > 0, as a PGM contact sheet
/// (plus an optional SVG one). side*side must equal the sample width.
void write_rows(const std::string& out, const Matrix& m, std::size_t side,
                std::size_t forced_cols, const std::string& svg,
                const KeyValues& kvs) {
  if (side > 0 && side * side != m.cols)
    fail(2, "--image-side " + std::to_string(side) +
                " does not match the sample width " + std::to_string(m.cols));
  phase(5, [&] {
    if (side > 0) {
      write_pgm_grid(out, m, side, forced_cols, kvs);
      if (!svg.empty()) write_svg_grid(svg, m, side, forced_cols, kvs);
    } else {
      write_matrix_csv(out, m, kvs);
      if (!svg.empty())
        fail(2, "--svg requires --image-side");
    }
    return 0;
  });
}

// ---------------------------------------------------------------------------
// Model loading
// ---------------------------------------------------------------------------

struct AnyModel {
  ModelKind kind = ModelKind::flow;
  FlowNetwork flow;
  GenMMModel gen;
  LatMMModel lat;

  static AnyModel load(const std::string& path) {
    return phase(5, [&] {
      AnyModel m;
      m.kind = peek_model_kind(path);
      switch (m.kind) {
        case ModelKind::flow: m.flow = load_flow(path); break;
        case ModelKind::genmm: m.gen = load_genmm(path); break;
        case ModelKind::latmm: m.lat = load_latmm(path); break;
      }
      return m;
    });
  }

  std::size_t dim() const {
    switch (kind) {
      case ModelKind::flow: return flow.dim;
      case ModelKind::genmm: return gen.dim;
      default: return lat.dim;
    }
  }

  Matrix sample(std::size_t n, Rng& rng) const {
    switch (kind) {
      case ModelKind::flow: return flow.sample(n, rng);
      case ModelKind::genmm: return gen.sample(n, rng);
      default: return lat.sample(n, rng);
    }
  }

  double evaluate_nll(const Matrix& x) const {
    if (kind == ModelKind::genmm) return gen.evaluate_nll(x);
    if (kind == ModelKind::latmm) return lat.evaluate_nll(x);
    fail(2, "this command needs a genmm or latmm model file");
  }
};

// ---------------------------------------------------------------------------
// train
// ---------------------------------------------------------------------------

struct TrainCmd {
  ConfigArgs cfg;
  DataArgs din;
  std::string out, log;
  CLI::Option *out_opt = nullptr, *log_opt = nullptr;

  void attach(CLI::App* cmd) {
    cfg.attach(cmd);
    din.attach(cmd);
    out_opt = cmd->add_option("--out", out, "model file to write");
    log_opt = cmd->add_option("--log", log, "training log CSV to write");
    cmd->callback([this] { run(); });
  }

  template <typename Trainer, typename SaveFn>
  void drive(Trainer& tr, const SaveFn& save_model, const RunConfig& rc,
             const KeyValues& kvs) {
    try {
      tr.train();
    } catch (const Error& e) {
      // The trainer already rolled the model back to its last stable epoch;
      // keep that checkpoint and the completed log rows on disk.
      try {
        save_model();
        if (!rc.log.empty()) write_training_log(rc.log, tr.log(), kvs);
      } catch (...) {
      }
      fail(4, std::string(e.what()) + " (checkpoint kept at " + rc.out + ")");
    }
    phase(5, [&] {
      save_model();
      if (!rc.log.empty()) write_training_log(rc.log, tr.log(), kvs);
      return 0;
    });
  }

  void run() {
    RunConfig rc = cfg.resolve();
    din.merge(rc);
    if (out_opt->count() > 0) rc.out = out;
    if (log_opt->count() > 0) rc.log = log;
    if (rc.out.empty())
      fail(2, "train requires --out (or out= in the config file)");
    Dataset data = din.load();
    KeyValues kvs{{"command", "train"}};
    {
      KeyValues eff = rc.effective();
      kvs.insert(kvs.end(), eff.begin(), eff.end());
    }
    din.echo(kvs);

    double final_nll = 0.0;
    if (rc.model_kind() == ModelKind::genmm) {
      GenMMModel model = phase(2, [&] {
        return GenMMModel::create(rc.k, data.dim(), rc.flow_options(), rc.seed);
      });
      GenMMTrainer tr(model, data, rc.em_config());
      drive(tr, [&] { save_genmm(rc.out, model); }, rc, kvs);
      final_nll = tr.log().rows.empty() ? model.evaluate_nll(data.samples)
                                        : tr.log().rows.back().nll_nat_per_dim;
    } else {
      LatMMModel model = phase(2, [&] {
        return LatMMModel::create(rc.k, data.dim(), rc.flow_options(), rc.seed);
      });
      LatMMTrainer tr(model, data, rc.em_config(), rc.regularizer_spec());
      drive(tr, [&] { save_latmm(rc.out, model); }, rc, kvs);
      final_nll = tr.log().rows.empty() ? model.evaluate_nll(data.samples)
                                        : tr.log().rows.back().nll_nat_per_dim;
    }
    std::cout << "nll_per_dim=" << fmt_g17(final_nll) << "\n";
  }
};

// ---------------------------------------------------------------------------
// sample
// ---------------------------------------------------------------------------

struct SampleCmd {
  std::string model_file, out, svg;
  std::size_t count = 0, image_side = 0;
  std::uint64_t seed = 0;

  void attach(CLI::App* cmd) {
    cmd->add_option("--model-file", model_file, "trained model file")
        ->required();
    cmd->add_option("--count", count, "number of samples")->required();
    cmd->add_option("--out", out, "output path")->required();
    cmd->add_option("--seed", seed, "sampling seed");
    cmd->add_option("--image-side", image_side,
                    "treat samples as side x side images and write PGM");
    cmd->add_option("--svg", svg, "also write an SVG contact sheet here");
    cmd->callback([this] { run(); });
  }

  void run() {
    if (count == 0) fail(2, "--count must be at least 1");
    AnyModel m = AnyModel::load(model_file);
    Rng rng(seed);
    Matrix s = mapped([&] { return m.sample(count, rng); });
    KeyValues kvs{{"command", "sample"},
                  {"model_file", model_file},
                  {"model", model_kind_name(m.kind)},
                  {"count", std::to_string(count)},
                  {"seed", std::to_string(seed)}};
    if (image_side)
      kvs.emplace_back("image_side", std::to_string(image_side));
    write_rows(out, s, image_side, 0, svg, kvs);
  }
};

// ---------------------------------------------------------------------------
// interpolate
// ---------------------------------------------------------------------------

struct InterpolateCmd {
  std::string model_file, out, svg, selection = "argmax";
  DataArgs din;
  std::size_t start_row = 0, end_row = 0, steps = 8, image_side = 0;
  std::uint64_t seed = 0;

  void attach(CLI::App* cmd) {
    cmd->add_option("--model-file", model_file, "trained model file")
        ->required();
    din.attach(cmd);
    cmd->add_option("--start-row", start_row, "endpoint row in the data")
        ->required();
    cmd->add_option("--end-row", end_row, "endpoint row in the data")
        ->required();
    cmd->add_option("--steps", steps, "grid size including both endpoints");
    cmd->add_option("--selection", selection,
                    "generator choice per endpoint: argmax | random "
                    "(latmm ignores this)");
    cmd->add_option("--seed", seed, "seed for random selection");
    cmd->add_option("--out", out, "output path")->required();
    cmd->add_option("--image-side", image_side,
                    "treat rows as side x side images and write PGM");
    cmd->add_option("--svg", svg, "also write an SVG contact sheet here");
    cmd->callback([this] { run(); });
  }

  void run() {
    if (steps < 2) fail(2, "--steps must be at least 2 (the two endpoints)");
    InterpSelection sel;
    if (selection == "argmax") sel = InterpSelection::argmax_gamma;
    else if (selection == "random") sel = InterpSelection::random_prior;
    else fail(2, "--selection: expected argmax or random, got '" + selection + "'");
    AnyModel m = AnyModel::load(model_file);
    if (m.kind == ModelKind::flow)
      fail(2, "interpolation needs a genmm or latmm model file");
    Dataset data = din.load();
    if (start_row >= data.size() || end_row >= data.size())
      fail(2, "row " + std::to_string(std::max(start_row, end_row)) +
                  " out of range for " + std::to_string(data.size()) +
                  " data rows");
    if (data.dim() != m.dim())
      fail(3, "data dimension " + std::to_string(data.dim()) +
                  " does not match model dimension " + std::to_string(m.dim()));
    auto row_vec = [&](std::size_t i) {
      auto r = data.samples.row(i);
      return std::vector<double>(r.begin(), r.end());
    };
    std::vector<double> xs = row_vec(start_row), xe = row_vec(end_row);
    Matrix path = mapped([&] {
      if (m.kind == ModelKind::genmm) {
        Rng rng(seed);
        bool scaling = EMConfig{}.dim_scaling_active(m.dim());
        return m.gen.interpolate(xs, xe, steps, sel, rng, scaling);
      }
      return m.lat.interpolate(xs, xe, steps);
    });
    KeyValues kvs{{"command", "interpolate"},
                  {"model_file", model_file},
                  {"model", model_kind_name(m.kind)},
                  {"start_row", std::to_string(start_row)},
                  {"end_row", std::to_string(end_row)},
                  {"steps", std::to_string(steps)},
                  {"selection", selection},
                  {"seed", std::to_string(seed)}};
    din.echo(kvs);
    // one row of tiles so the morph reads left to right
    write_rows(out, path, image_side, steps, svg, kvs);
  }
};

// ---------------------------------------------------------------------------
// classify
// ---------------------------------------------------------------------------

std::size_t resolve_threads(std::size_t flag_value) {
  // 0 = auto: one worker per class, capped at 64 (training clamps to the
  // actual class count anyway)
  std::size_t t = flag_value == 0 ? 64 : flag_value;
  if (const char* env = std::getenv("FLOWMIX_THREADS")) {
    std::string s = trim(env);
    if (!s.empty()) {
      std::size_t cap = strict_size("FLOWMIX_THREADS", s);
      t = std::min(t, std::max<std::size_t>(cap, 1));
    }
  }
  return t;
}

ClassifierConfig classifier_config(const RunConfig& rc, bool use_prior,
                                   std::size_t threads_flag) {
  ClassifierConfig cc;
  cc.kind = rc.model_kind();
  cc.k = rc.k;
  cc.flow = rc.flow_options();
  cc.em = rc.em_config();
  cc.reg = rc.regularizer_spec();
  cc.use_class_prior = use_prior;
  cc.threads = resolve_threads(threads_flag);
  return cc;
}

struct ClassifyFitCmd {
  ConfigArgs cfg;
  DataArgs din;
  std::string out_dir, test_data, test_label_column, curve_out;
  std::size_t threads = 0;
  bool use_class_prior = false;

  void attach(CLI::App* cmd) {
    cfg.attach(cmd);
    din.attach(cmd);
    cmd->add_option("--out-dir", out_dir, "bundle directory to write")
        ->required();
    cmd->add_option("--threads", threads,
                    "parallel per-class training workers "
                    "(0 = one per class; FLOWMIX_THREADS caps this)");
    cmd->add_flag("--use-class-prior", use_class_prior,
                  "add empirical class log-priors at prediction time");
    cmd->add_option("--test-data", test_data,
                    "labeled CSV scored after every epoch");
    cmd->add_option("--test-label-column", test_label_column,
                    "label column of --test-data");
    cmd->add_option("--curve-out", curve_out,
                    "per-epoch accuracy CSV (needs --test-data)");
    cmd->callback([this] { run(); });
  }

  void run() {
    RunConfig rc = cfg.resolve();
    din.merge(rc);
    ClassifierConfig cc = phase(2, [&] {
      auto c = classifier_config(rc, use_class_prior, threads);
      c.validate();
      return c;
    });
    if (!curve_out.empty() && test_data.empty())
      fail(2, "--curve-out needs --test-data");
    Dataset data = din.load();
    KeyValues kvs{{"command", "classify fit"}};
    {
      KeyValues eff = rc.effective();
      kvs.insert(kvs.end(), eff.begin(), eff.end());
    }
    din.echo(kvs);

    ClassifierBundle bundle;
    if (!test_data.empty()) {
      DataArgs tin;
      tin.csv = test_data;
      tin.label_column = test_label_column;
      Dataset test = mapped([&] {
        RunConfig tmp;
        tmp.label_column = tin.label_column;
        return load_csv(tin.csv, tmp.label_column_value());
      });
      std::vector<AccuracyReport> curve;
      bundle = mapped(
          [&] { return ClassifierBundle::fit_with_curve(data, cc, test, curve); });
      if (!curve_out.empty())
        phase(5, [&] {
          auto os = open_out(curve_out);
          write_comment_header(os, kvs);
          os << "epoch,accuracy,n,n_unseen\n";
          for (std::size_t e = 0; e < curve.size(); ++e)
            os << e + 1 << "," << fmt_g17(curve[e].accuracy) << ","
               << curve[e].n << "," << curve[e].n_unseen << "\n";
          finish_out(os, curve_out);
          return 0;
        });
    } else {
      bundle = mapped([&] { return ClassifierBundle::fit(data, cc); });
    }
    phase(5, [&] {
      save_classifier(out_dir, bundle);
      return 0;
    });
    std::cout << "classes=" << bundle.num_classes() << "\n";
  }
};

struct ClassifyPredictCmd {
  std::string bundle_dir, out;
  DataArgs din;

  void attach(CLI::App* cmd) {
    cmd->add_option("--bundle", bundle_dir, "classifier bundle directory")
        ->required();
    din.attach(cmd);
    cmd->add_option("--out", out, "prediction CSV to write")->required();
    cmd->callback([this] { run(); });
  }

  void run() {
    ClassifierBundle b =
        phase(5, [&] { return load_classifier(bundle_dir); });
    Dataset data = din.load();
    Matrix ll = mapped([&] { return b.class_log_likelihood(data.samples); });
    std::vector<std::size_t> pred =
        mapped([&] { return b.predict_indices(data.samples); });
    KeyValues kvs{{"command", "classify predict"}, {"bundle", bundle_dir}};
    din.echo(kvs);
    phase(5, [&] {
      auto os = open_out(out);
      write_comment_header(os, kvs);
      os << "sample_index,predicted_class";
      for (const auto& id : b.class_ids) os << ",loglik_" << id;
      os << "\n";
      for (std::size_t i = 0; i < data.size(); ++i) {
        os << i << "," << b.class_ids[pred[i]];
        for (std::size_t c = 0; c < b.num_classes(); ++c)
          os << "," << fmt_g17(ll.at(i, c));
        os << "\n";
      }
      finish_out(os, out);
      return 0;
    });
  }
};

struct ClassifyAddClassCmd {
  std::string bundle_dir, class_id;
  DataArgs din;

  void attach(CLI::App* cmd) {
    cmd->add_option("--bundle", bundle_dir, "classifier bundle directory")
        ->required();
    cmd->add_option("--class-id", class_id, "fresh class identifier")
        ->required();
    din.attach(cmd);
    cmd->callback([this] { run(); });
  }

  void run() {
    ClassifierBundle b =
        phase(5, [&] { return load_classifier(bundle_dir); });
    Dataset data = din.load();
    mapped([&] {
      b.add_class(class_id, data.samples);
      return 0;
    });
    phase(5, [&] {
      save_classifier(bundle_dir, b);
      return 0;
    });
    std::cout << "classes=" << b.num_classes() << "\n";
  }
};

struct ClassifyAccuracyCmd {
  std::string bundle_dir, out;
  DataArgs din;

  void attach(CLI::App* cmd) {
    cmd->add_option("--bundle", bundle_dir, "classifier bundle directory")
        ->required();
    din.attach(cmd);
    cmd->add_option("--out", out, "optional metrics CSV");
    cmd->callback([this] { run(); });
  }

  void run() {
    ClassifierBundle b =
        phase(5, [&] { return load_classifier(bundle_dir); });
    Dataset data = din.load();
    AccuracyReport rep = mapped([&] { return b.evaluate_accuracy(data); });
    std::cout << "accuracy=" << fmt_g17(rep.accuracy) << "\n"
              << "n=" << rep.n << "\n"
              << "n_unseen=" << rep.n_unseen << "\n";
    if (!out.empty()) {
      KeyValues kvs{{"command", "classify accuracy"}, {"bundle", bundle_dir}};
      din.echo(kvs);
      phase(5, [&] {
        write_metrics_csv(out, kvs,
                          {{"accuracy", fmt_g17(rep.accuracy)},
                           {"n", std::to_string(rep.n)},
                           {"n_unseen", std::to_string(rep.n_unseen)}});
        return 0;
      });
    }
  }
};

// ---------------------------------------------------------------------------
// eval
// ---------------------------------------------------------------------------

struct EvalNllCmd {
  std::string model_file, out;
  DataArgs din;

  void attach(CLI::App* cmd) {
    cmd->add_option("--model-file", model_file, "trained model file")
        ->required();
    din.attach(cmd);
    cmd->add_option("--out", out, "optional metrics CSV");
    cmd->callback([this] { run(); });
  }

  void run() {
    AnyModel m = AnyModel::load(model_file);
    Dataset data = din.load();
    double nll = mapped([&] { return m.evaluate_nll(data.samples); });
    std::cout << "nll_per_dim=" << fmt_g17(nll) << "\n";
    if (!out.empty()) {
      KeyValues kvs{{"command", "eval nll"},
                    {"model_file", model_file},
                    {"model", model_kind_name(m.kind)}};
      din.echo(kvs);
      phase(5, [&] {
        write_metrics_csv(out, kvs, {{"nll_nat_per_dim", fmt_g17(nll)}});
        return 0;
      });
    }
  }
};

struct EvalTwoSampleCmd {
  bool do_mmd = false; // else 1-NN
  std::string data_a, data_b, out;
  double bandwidth = 0.0;
  std::uint64_t seed = 0;
  CLI::Option* bw_opt = nullptr;

  void attach(CLI::App* cmd, bool mmd) {
    do_mmd = mmd;
    cmd->add_option("--data-a", data_a, "first CSV sample set")->required();
    cmd->add_option("--data-b", data_b, "second CSV sample set")->required();
    if (mmd)
      bw_opt = cmd->add_option("--bandwidth", bandwidth,
                               "Gaussian kernel width (default: median "
                               "pooled pairwise distance)");
    else
      cmd->add_option("--seed", seed, "subsampling seed for unequal sides");
    cmd->add_option("--out", out, "optional metrics CSV");
    cmd->callback([this] { run(); });
  }

  void run() {
    if (do_mmd && bw_opt->count() > 0 &&
        (!std::isfinite(bandwidth) || bandwidth < 0))
      fail(2, "--bandwidth must be a finite non-negative number");
    Dataset a = mapped([&] { return load_csv(data_a); });
    Dataset b = mapped([&] { return load_csv(data_b); });
    KeyValues kvs{{"command", do_mmd ? "eval mmd" : "eval onenn"},
                  {"data_a", data_a},
                  {"data_b", data_b}};
    KeyValues metrics;
    if (do_mmd) {
      std::optional<double> bw;
      if (bw_opt->count() > 0) bw = bandwidth;
      double used = 0.0;
      double mmd2 =
          mapped([&] { return mmd_gaussian(a.samples, b.samples, bw, &used); });
      std::cout << "mmd2=" << fmt_g17(mmd2) << "\n"
                << "bandwidth=" << fmt_g17(used) << "\n";
      metrics = {{"mmd2", fmt_g17(mmd2)}, {"bandwidth", fmt_g17(used)}};
    } else {
      double acc = mapped(
          [&] { return one_nn_two_sample(a.samples, b.samples, seed); });
      std::cout << "onenn_accuracy=" << fmt_g17(acc) << "\n";
      kvs.emplace_back("seed", std::to_string(seed));
      metrics = {{"onenn_accuracy", fmt_g17(acc)}};
    }
    if (!out.empty())
      phase(5, [&] {
        write_metrics_csv(out, kvs, metrics);
        return 0;
      });
  }
};

struct EvalNllVsKCmd {
  ConfigArgs cfg;
  DataArgs din;
  std::string k_list, out;
  double heldout_fraction = 0.2;

  void attach(CLI::App* cmd) {
    cfg.attach(cmd);
    din.attach(cmd);
    cmd->add_option("--k-list", k_list, "comma-separated component counts")
        ->required();
    cmd->add_option("--heldout-fraction", heldout_fraction,
                    "fraction of the data scored instead of trained on");
    cmd->add_option("--out", out, "sweep CSV to write")->required();
    cmd->callback([this] { run(); });
  }

  void run() {
    RunConfig rc = cfg.resolve();
    din.merge(rc);
    std::vector<std::size_t> ks;
    for (const auto& tok : split(k_list, ',')) {
      std::string t = trim(tok);
      if (t.empty()) continue;
      std::size_t k = strict_size("--k-list", t);
      if (k == 0) fail(2, "--k-list: component counts must be at least 1");
      ks.push_back(k);
    }
    if (ks.empty()) fail(2, "--k-list: no component counts given");
    Dataset data = din.load();
    EMConfig em = phase(2, [&] { return rc.em_config(); });
    RegularizerSpec reg = phase(2, [&] { return rc.regularizer_spec(); });
    ModelKind kind = phase(2, [&] { return rc.model_kind(); });
    FlowBuildOptions flow = phase(2, [&] { return rc.flow_options(); });

    auto factory = [&](std::size_t k, const Dataset& train,
                       const Dataset& held) -> std::pair<TrainingLog, double> {
      if (kind == ModelKind::genmm) {
        GenMMModel model = GenMMModel::create(k, train.dim(), flow, rc.seed);
        GenMMTrainer tr(model, train, em);
        TrainingLog log = tr.train();
        return {log, model.evaluate_nll(held.samples)};
      }
      LatMMModel model = LatMMModel::create(k, train.dim(), flow, rc.seed);
      LatMMTrainer tr(model, train, em, reg);
      TrainingLog log = tr.train();
      return {log, model.evaluate_nll(held.samples)};
    };
    std::vector<KSweepEntry> entries = mapped([&] {
      return nll_vs_k(factory, data, ks, heldout_fraction, rc.seed);
    });

    KeyValues kvs{{"command", "eval nll-vs-k"},
                  {"k_list", k_list},
                  {"heldout_fraction", fmt_g17(heldout_fraction)}};
    {
      KeyValues eff = rc.effective();
      kvs.insert(kvs.end(), eff.begin(), eff.end());
    }
    din.echo(kvs);
    phase(5, [&] {
      write_nll_vs_k_csv(out, entries, kvs);
      return 0;
    });
    for (const auto& e : entries) {
      if (e.error.empty())
        std::cout << "k=" << e.k << " heldout_nll=" << fmt_g17(e.heldout_nll)
                  << "\n";
      else
        std::cerr << "flowmix: warning: k=" << e.k << " failed: " << e.error
                  << "\n";
    }
  }
};

} // namespace

int main(int argc, char** argv) {
  CLI::App app{
      "flowmix: density mixtures built from invertible flows.\n"
      "Train by EM, sample, interpolate, classify by per-class likelihood,\n"
      "and compare sample sets with kernel and nearest-neighbour tests."};
  app.require_subcommand(1);

  TrainCmd train;
  train.attach(app.add_subcommand("train", "fit a model and write it out"));

  SampleCmd sample;
  sample.attach(app.add_subcommand("sample", "draw samples from a model"));

  InterpolateCmd interpolate;
  interpolate.attach(app.add_subcommand(
      "interpolate", "morph between two data rows through the latent space"));

  auto* classify = app.add_subcommand(
      "classify", "one density model per class, argmax likelihood");
  classify->require_subcommand(1);
  ClassifyFitCmd cls_fit;
  cls_fit.attach(classify->add_subcommand("fit", "train one model per class"));
  ClassifyPredictCmd cls_predict;
  cls_predict.attach(
      classify->add_subcommand("predict", "write per-sample predictions"));
  ClassifyAddClassCmd cls_add;
  cls_add.attach(classify->add_subcommand(
      "add-class", "train and insert one new class in place"));
  ClassifyAccuracyCmd cls_acc;
  cls_acc.attach(
      classify->add_subcommand("accuracy", "score a labeled dataset"));

  auto* eval = app.add_subcommand("eval", "evaluation reports");
  eval->require_subcommand(1);
  EvalNllCmd eval_nll;
  eval_nll.attach(
      eval->add_subcommand("nll", "negative log-likelihood per dimension"));
  EvalTwoSampleCmd eval_mmd;
  eval_mmd.attach(eval->add_subcommand(
                      "mmd", "squared maximum mean discrepancy of two CSVs"),
                  true);
  EvalTwoSampleCmd eval_onenn;
  eval_onenn.attach(
      eval->add_subcommand("onenn",
                           "leave-one-out 1-NN two-sample accuracy"),
      false);
  EvalNllVsKCmd eval_sweep;
  eval_sweep.attach(eval->add_subcommand(
      "nll-vs-k", "held-out NLL across component counts"));

  try {
    app.parse(argc, argv);
  } catch (const ExitWith& x) {
    if (!x.message.empty())
      std::cerr << "flowmix: error: " << x.message << "\n";
    return x.code;
  } catch (const CLI::ParseError& e) {
    if (e.get_exit_code() == 0) return app.exit(e);
    std::cerr << "flowmix: error: " << e.what() << "\n";
    return 2;
  } catch (const Error& e) {
    std::cerr << "flowmix: error: " << e.what() << "\n";
    return 1;
  }
  return 0;
}
