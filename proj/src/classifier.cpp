#include "flowmix/classifier.hpp"

#include <algorithm>
#include <atomic>
#include <cmath>
#include <cstdio>
#include <filesystem>
#include <fstream>
#include <mutex>
#include <sstream>
#include <thread>

#include "flowmix/errors.hpp"
#include "flowmix/textio.hpp"

namespace flowmix {

namespace {

std::uint64_t fnv1a64(const std::string& s) {
  std::uint64_t h = 1469598103934665603ull;
  for (unsigned char c : s) {
    h ^= c;
    h *= 1099511628211ull;
  }
  return h;
}

/// Runs fn(0..jobs) on up to `threads` workers; the jobs are independent,
/// so any schedule produces the same models. The first exception wins.
void run_parallel(std::size_t threads, std::size_t jobs,
                  const std::function<void(std::size_t)>& fn) {
  threads = std::min(std::max<std::size_t>(threads, 1), jobs);
  if (threads <= 1) {
    for (std::size_t i = 0; i < jobs; ++i) fn(i);
    return;
  }
  std::atomic<std::size_t> next{0};
  std::mutex err_mu;
  std::exception_ptr first_error;
  std::vector<std::thread> pool;
  pool.reserve(threads);
  for (std::size_t t = 0; t < threads; ++t)
    pool.emplace_back([&] {
      while (true) {
        std::size_t i = next.fetch_add(1);
        if (i >= jobs) break;
        try {
          fn(i);
        } catch (...) {
          std::lock_guard<std::mutex> lock(err_mu);
          if (!first_error) first_error = std::current_exception();
        }
      }
    });
  for (auto& th : pool) th.join();
  if (first_error) std::rethrow_exception(first_error);
}

EMConfig class_em_config(const ClassifierConfig& cfg, const std::string& id,
                         std::size_t n_samples) {
  EMConfig em = cfg.em;
  em.seed = class_seed(cfg.em.seed, id);
  if (n_samples < em.batch_size) {
    std::fprintf(stderr,
                 "flowmix: warning: class \"%s\" has %zu samples; batch size "
                 "reduced from %zu\n",
                 id.c_str(), n_samples, em.batch_size);
    em.batch_size = n_samples;
  }
  return em;
}

Dataset class_dataset(const std::string& id, Matrix samples) {
  Dataset d;
  d.samples = std::move(samples);
  d.name = "class " + id;
  return d;
}

std::string dim_scaling_name(EMConfig::DimScaling s) {
  switch (s) {
    case EMConfig::DimScaling::automatic: return "auto";
    case EMConfig::DimScaling::on: return "on";
    case EMConfig::DimScaling::off: return "off";
  }
  throw DomainError("unknown dim-scaling mode");
}

EMConfig::DimScaling dim_scaling_from(const std::string& s) {
  if (s == "auto") return EMConfig::DimScaling::automatic;
  if (s == "on") return EMConfig::DimScaling::on;
  if (s == "off") return EMConfig::DimScaling::off;
  throw PersistenceError("bundle manifest: bad dim_scaling \"" + s + "\"");
}

std::string reg_kind_name(RegularizerSpec::Kind k) {
  switch (k) {
    case RegularizerSpec::Kind::gamma_prior: return "gamma_prior";
    case RegularizerSpec::Kind::l2: return "l2";
    case RegularizerSpec::Kind::none: return "none";
  }
  throw DomainError("unknown regularizer kind");
}

RegularizerSpec::Kind reg_kind_from(const std::string& s) {
  if (s == "gamma_prior") return RegularizerSpec::Kind::gamma_prior;
  if (s == "l2") return RegularizerSpec::Kind::l2;
  if (s == "none") return RegularizerSpec::Kind::none;
  throw PersistenceError("bundle manifest: bad regularizer \"" + s + "\"");
}

std::string model_file(std::size_t index) {
  return "class_" + std::to_string(index) + ".nnmm";
}

} // namespace

std::uint64_t class_seed(std::uint64_t base_seed, const std::string& class_id) {
  return base_seed + fnv1a64(class_id);
}

void ClassifierConfig::validate() const {
  if (kind != ModelKind::genmm && kind != ModelKind::latmm)
    throw ConfigError("classifier: model kind must be genmm or latmm");
  if (k < 1) throw ConfigError("classifier: k must be at least 1");
  em.validate();
  reg.validate();
}

std::size_t ClassifierBundle::class_index(const std::string& id) const {
  for (std::size_t i = 0; i < class_ids.size(); ++i)
    if (class_ids[i] == id) return i;
  return class_ids.size();
}

namespace {

/// Trains the model for one class in place (exactly one of gen/lat is used).
void train_class(const ClassifierConfig& cfg, const std::string& id,
                 const Matrix& samples, GenMMModel* gen, LatMMModel* lat) {
  std::uint64_t seed = class_seed(cfg.em.seed, id);
  EMConfig em = class_em_config(cfg, id, samples.rows);
  Dataset d = class_dataset(id, samples);
  if (cfg.kind == ModelKind::genmm) {
    *gen = GenMMModel::create(cfg.k, samples.cols, cfg.flow, seed);
    GenMMTrainer trainer(*gen, d, em);
    trainer.train();
  } else {
    *lat = LatMMModel::create(cfg.k, samples.cols, cfg.flow, seed);
    LatMMTrainer trainer(*lat, d, em, cfg.reg);
    trainer.train();
  }
}

struct Partition {
  std::vector<std::string> ids;
  std::vector<Matrix> samples;
};

Partition partition_by_label(const Dataset& data) {
  if (!data.labels)
    throw ConsistencyError("classifier fit needs a labeled dataset");
  if (data.size() == 0) throw EmptyDataset("classifier fit: no samples");
  std::size_t y = data.num_classes();
  if (y == 0)
    throw ConsistencyError("classifier fit: labels carry no class names");
  std::vector<std::vector<std::size_t>> by_class(y);
  for (std::size_t i = 0; i < data.size(); ++i) {
    int c = (*data.labels)[i];
    by_class[static_cast<std::size_t>(c)].push_back(i);
  }
  Partition p;
  for (std::size_t c = 0; c < y; ++c) {
    if (by_class[c].empty())
      throw InsufficientSamples("class \"" + data.label_names[c] +
                                "\" has no samples");
    p.ids.push_back(data.label_names[c]);
    p.samples.push_back(gather_rows(data.samples, by_class[c]));
  }
  return p;
}

ClassifierBundle empty_bundle(const Dataset& data,
                              const ClassifierConfig& cfg) {
  cfg.validate();
  ClassifierBundle b;
  b.cfg = cfg;
  b.dim = data.dim();
  return b;
}

} // namespace

ClassifierBundle ClassifierBundle::fit(const Dataset& data,
                                       const ClassifierConfig& cfg) {
  ClassifierBundle b = empty_bundle(data, cfg);
  Partition p = partition_by_label(data);
  std::size_t y = p.ids.size();
  b.class_ids = p.ids;
  for (const auto& s : p.samples) b.class_counts.push_back(s.rows);
  if (cfg.kind == ModelKind::genmm)
    b.gen_models.resize(y);
  else
    b.lat_models.resize(y);
  run_parallel(cfg.threads, y, [&](std::size_t c) {
    train_class(cfg, p.ids[c], p.samples[c],
                cfg.kind == ModelKind::genmm ? &b.gen_models[c] : nullptr,
                cfg.kind == ModelKind::latmm ? &b.lat_models[c] : nullptr);
  });
  return b;
}

ClassifierBundle ClassifierBundle::fit_with_curve(
    const Dataset& data, const ClassifierConfig& cfg, const Dataset& test,
    std::vector<AccuracyReport>& curve) {
  ClassifierBundle b = empty_bundle(data, cfg);
  Partition p = partition_by_label(data);
  std::size_t y = p.ids.size();
  b.class_ids = p.ids;
  std::vector<Dataset> datasets;
  std::vector<EMConfig> ems;
  for (std::size_t c = 0; c < y; ++c) {
    b.class_counts.push_back(p.samples[c].rows);
    ems.push_back(class_em_config(cfg, p.ids[c], p.samples[c].rows));
    datasets.push_back(class_dataset(p.ids[c], std::move(p.samples[c])));
  }

  curve.clear();
  // models sit in their final vectors before trainers take references
  if (cfg.kind == ModelKind::genmm) {
    b.gen_models.reserve(y);
    for (std::size_t c = 0; c < y; ++c)
      b.gen_models.push_back(GenMMModel::create(
          cfg.k, b.dim, cfg.flow, class_seed(cfg.em.seed, p.ids[c])));
    std::vector<GenMMTrainer> trainers;
    trainers.reserve(y);
    for (std::size_t c = 0; c < y; ++c)
      trainers.emplace_back(b.gen_models[c], datasets[c], ems[c]);
    for (std::size_t e = 0; e < cfg.em.epochs; ++e) {
      for (auto& t : trainers) t.run_epoch();
      curve.push_back(b.evaluate_accuracy(test));
    }
  } else {
    b.lat_models.reserve(y);
    for (std::size_t c = 0; c < y; ++c)
      b.lat_models.push_back(LatMMModel::create(
          cfg.k, b.dim, cfg.flow, class_seed(cfg.em.seed, p.ids[c])));
    std::vector<LatMMTrainer> trainers;
    trainers.reserve(y);
    for (std::size_t c = 0; c < y; ++c)
      trainers.emplace_back(b.lat_models[c], datasets[c], ems[c], cfg.reg);
    for (std::size_t e = 0; e < cfg.em.epochs; ++e) {
      for (auto& t : trainers) t.run_epoch();
      curve.push_back(b.evaluate_accuracy(test));
    }
  }
  return b;
}

void ClassifierBundle::add_class(const std::string& class_id,
                                 const Matrix& class_samples) {
  if (class_index(class_id) != num_classes())
    throw ConflictError("class \"" + class_id + "\" already present");
  if (class_samples.rows == 0)
    throw EmptyDataset("add_class: class \"" + class_id + "\" has no samples");
  if (num_classes() == 0) {
    dim = class_samples.cols;
  } else if (class_samples.cols != dim) {
    throw ShapeError("add_class: expected width " + std::to_string(dim) +
                     ", got " + std::to_string(class_samples.cols));
  }
  if (cfg.kind == ModelKind::genmm) {
    GenMMModel m;
    train_class(cfg, class_id, class_samples, &m, nullptr);
    gen_models.push_back(std::move(m));
  } else {
    LatMMModel m;
    train_class(cfg, class_id, class_samples, nullptr, &m);
    lat_models.push_back(std::move(m));
  }
  class_ids.push_back(class_id);
  class_counts.push_back(class_samples.rows);
}

Matrix ClassifierBundle::class_log_likelihood(const Matrix& x) const {
  std::size_t y = num_classes();
  if (y == 0) throw ConsistencyError("classifier bundle holds no classes");
  if (x.cols != dim)
    throw ShapeError("classifier: expected width " + std::to_string(dim) +
                     ", got " + std::to_string(x.cols));
  double total = 0.0;
  for (std::size_t c : class_counts) total += double(c);
  Matrix out(x.rows, y);
  for (std::size_t c = 0; c < y; ++c) {
    std::vector<double> rows = cfg.kind == ModelKind::genmm
                                   ? gen_models[c].log_likelihood_rows(x)
                                   : lat_models[c].log_likelihood_rows(x);
    double prior =
        cfg.use_class_prior ? std::log(double(class_counts[c]) / total) : 0.0;
    for (std::size_t i = 0; i < x.rows; ++i) out.at(i, c) = rows[i] + prior;
  }
  return out;
}

std::vector<std::size_t> ClassifierBundle::predict_indices(
    const Matrix& x) const {
  Matrix ll = class_log_likelihood(x);
  std::vector<std::size_t> out(x.rows);
  for (std::size_t i = 0; i < x.rows; ++i) {
    std::size_t best = 0;
    for (std::size_t c = 1; c < ll.cols; ++c)
      if (ll.at(i, c) > ll.at(i, best)) best = c; // ties keep the lower index
    if (std::isinf(ll.at(i, best)) && ll.at(i, best) < 0)
      throw Unscorable("sample " + std::to_string(i) +
                       ": every class scores it at zero likelihood");
    out[i] = best;
  }
  return out;
}

std::pair<std::string, std::vector<double>> ClassifierBundle::predict(
    const std::vector<double>& x) const {
  Matrix m(1, x.size(), x);
  std::size_t idx = predict_indices(m)[0];
  Matrix ll = class_log_likelihood(m);
  return {class_ids[idx], ll.data};
}

AccuracyReport ClassifierBundle::evaluate_accuracy(const Dataset& test) const {
  if (!test.labels)
    throw ConsistencyError("evaluate_accuracy needs a labeled test set");
  if (test.size() == 0) throw EmptyDataset("evaluate_accuracy: no samples");
  // map the test set's label codes onto bundle class positions by name
  std::vector<std::size_t> code_map(test.num_classes());
  for (std::size_t c = 0; c < test.num_classes(); ++c)
    code_map[c] = class_index(test.label_names[c]);

  std::vector<std::size_t> pred = predict_indices(test.samples);
  AccuracyReport r;
  r.n = test.size();
  std::size_t correct = 0;
  for (std::size_t i = 0; i < test.size(); ++i) {
    std::size_t want = code_map[std::size_t((*test.labels)[i])];
    if (want == num_classes()) {
      ++r.n_unseen; // label unknown to the bundle: always an error
    } else if (pred[i] == want) {
      ++correct;
    }
  }
  if (r.n_unseen > 0)
    std::fprintf(stderr,
                 "flowmix: warning: %zu test samples carry labels the "
                 "classifier was never trained on\n",
                 r.n_unseen);
  r.accuracy = double(correct) / double(r.n);
  return r;
}

void ClassifierBundle::validate() const {
  cfg.validate();
  std::size_t y = num_classes();
  if (class_counts.size() != y)
    throw ConsistencyError("bundle: per-class counts disagree with class ids");
  const std::size_t models =
      cfg.kind == ModelKind::genmm ? gen_models.size() : lat_models.size();
  if (models != y)
    throw ConsistencyError("bundle: model list disagrees with class ids");
  for (std::size_t i = 0; i < y; ++i)
    for (std::size_t j = i + 1; j < y; ++j)
      if (class_ids[i] == class_ids[j])
        throw ConflictError("bundle: duplicate class id \"" + class_ids[i] +
                            "\"");
  for (std::size_t i = 0; i < y; ++i) {
    if (cfg.kind == ModelKind::genmm) {
      gen_models[i].validate();
      if (gen_models[i].dim != dim)
        throw ConsistencyError("bundle: class model width mismatch");
    } else {
      lat_models[i].validate();
      if (lat_models[i].dim != dim)
        throw ConsistencyError("bundle: class model width mismatch");
    }
  }
}

void save_classifier(const std::string& dir, const ClassifierBundle& b) {
  b.validate();
  std::error_code ec;
  std::filesystem::create_directories(dir, ec);
  if (ec) throw IoError("cannot create directory \"" + dir + "\"");

  std::string manifest;
  manifest += "flowmix-classifier 1\n";
  manifest += "kind " + model_kind_name(b.cfg.kind) + "\n";
  manifest += "dim " + std::to_string(b.dim) + "\n";
  manifest += "k " + std::to_string(b.cfg.k) + "\n";
  manifest += "depth " + std::to_string(b.cfg.flow.depth) + "\n";
  manifest += "hidden " + std::to_string(b.cfg.flow.hidden) + "\n";
  manifest += "scale_clamp " + fmt_g17(b.cfg.flow.scale_clamp) + "\n";
  manifest += "split_after";
  for (std::size_t s : b.cfg.flow.split_after_blocks)
    manifest += " " + std::to_string(s);
  manifest += "\n";
  manifest += "epochs " + std::to_string(b.cfg.em.epochs) + "\n";
  manifest += "batch_size " + std::to_string(b.cfg.em.batch_size) + "\n";
  manifest += "learning_rate " + fmt_g17(b.cfg.em.learning_rate) + "\n";
  manifest += "em_update_gap " + std::to_string(b.cfg.em.em_update_gap) + "\n";
  manifest +=
      "prior_update_gap " + std::to_string(b.cfg.em.prior_update_gap) + "\n";
  manifest += "dim_scaling " + dim_scaling_name(b.cfg.em.dim_scaling) + "\n";
  manifest += "use_adam " + std::to_string(b.cfg.em.use_adam ? 1 : 0) + "\n";
  manifest += "adam_beta1 " + fmt_g17(b.cfg.em.adam_beta1) + "\n";
  manifest += "adam_beta2 " + fmt_g17(b.cfg.em.adam_beta2) + "\n";
  manifest += "adam_eps " + fmt_g17(b.cfg.em.adam_eps) + "\n";
  manifest += "seed " + std::to_string(b.cfg.em.seed) + "\n";
  manifest += "threads " + std::to_string(b.cfg.threads) + "\n";
  manifest += "regularizer " + reg_kind_name(b.cfg.reg.kind) + " " +
              fmt_g17(b.cfg.reg.a) + " " + fmt_g17(b.cfg.reg.b) + " " +
              fmt_g17(b.cfg.reg.lambda) + "\n";
  manifest +=
      "use_class_prior " + std::to_string(b.cfg.use_class_prior ? 1 : 0) + "\n";
  manifest += "classes " + std::to_string(b.num_classes()) + "\n";
  for (std::size_t c = 0; c < b.num_classes(); ++c)
    manifest += "class " + std::to_string(c) + " " +
                std::to_string(b.class_counts[c]) + " " + b.class_ids[c] +
                "\n";

  std::string mpath = dir + "/classifier.manifest";
  std::ofstream os(mpath, std::ios::binary | std::ios::trunc);
  if (!os) throw IoError("cannot write \"" + mpath + "\"");
  os << manifest;
  os.flush();
  if (!os) throw IoError("write to \"" + mpath + "\" failed");

  for (std::size_t c = 0; c < b.num_classes(); ++c) {
    std::string path = dir + "/" + model_file(c);
    if (b.cfg.kind == ModelKind::genmm)
      save_genmm(path, b.gen_models[c]);
    else
      save_latmm(path, b.lat_models[c]);
  }
}

namespace {

class ManifestReader {
 public:
  explicit ManifestReader(const std::string& path) : is_(path) {
    if (!is_) throw IoError("cannot read \"" + path + "\"");
  }

  /// Next line split into tokens; the first must equal `key`.
  std::vector<std::string> expect(const std::string& key) {
    std::string line;
    if (!std::getline(is_, line))
      throw PersistenceError("bundle manifest ends early (wanted \"" + key +
                             "\")");
    std::istringstream ls(line);
    std::vector<std::string> toks;
    std::string t;
    while (ls >> t) toks.push_back(t);
    if (toks.empty() || toks[0] != key)
      throw PersistenceError("bundle manifest: expected \"" + key + "\", got \"" +
                             line + "\"");
    return toks;
  }

  std::string raw_line() {
    std::string line;
    if (!std::getline(is_, line))
      throw PersistenceError("bundle manifest ends early");
    return line;
  }

 private:
  std::ifstream is_;
};

std::size_t to_count(const std::string& s, const char* what) {
  try {
    std::size_t pos = 0;
    unsigned long long v = std::stoull(s, &pos);
    if (pos != s.size()) throw std::invalid_argument(s);
    return static_cast<std::size_t>(v);
  } catch (const std::exception&) {
    throw PersistenceError(std::string("bundle manifest: bad ") + what +
                           " \"" + s + "\"");
  }
}

double to_f64(const std::string& s, const char* what) {
  double v;
  if (!parse_double_strict(s, v))
    throw PersistenceError(std::string("bundle manifest: bad ") + what +
                           " \"" + s + "\"");
  return v;
}

std::string one_token(const std::vector<std::string>& toks, const char* what) {
  if (toks.size() != 2)
    throw PersistenceError(std::string("bundle manifest: malformed ") + what +
                           " line");
  return toks[1];
}

} // namespace

ClassifierBundle load_classifier(const std::string& dir) {
  ManifestReader r(dir + "/classifier.manifest");
  auto head = r.expect("flowmix-classifier");
  if (head.size() != 2 || head[1] != "1")
    throw PersistenceError("unsupported classifier bundle version");

  ClassifierBundle b;
  std::string kind = one_token(r.expect("kind"), "kind");
  if (kind == "genmm")
    b.cfg.kind = ModelKind::genmm;
  else if (kind == "latmm")
    b.cfg.kind = ModelKind::latmm;
  else
    throw PersistenceError("bundle manifest: bad kind \"" + kind + "\"");
  b.dim = to_count(one_token(r.expect("dim"), "dim"), "dim");
  b.cfg.k = to_count(one_token(r.expect("k"), "k"), "k");
  b.cfg.flow.depth =
      to_count(one_token(r.expect("depth"), "depth"), "depth");
  b.cfg.flow.hidden =
      to_count(one_token(r.expect("hidden"), "hidden"), "hidden");
  b.cfg.flow.scale_clamp =
      to_f64(one_token(r.expect("scale_clamp"), "scale_clamp"), "scale_clamp");
  auto split = r.expect("split_after");
  for (std::size_t i = 1; i < split.size(); ++i)
    b.cfg.flow.split_after_blocks.push_back(
        to_count(split[i], "split_after"));
  b.cfg.em.epochs = to_count(one_token(r.expect("epochs"), "epochs"), "epochs");
  b.cfg.em.batch_size =
      to_count(one_token(r.expect("batch_size"), "batch_size"), "batch_size");
  b.cfg.em.learning_rate = to_f64(
      one_token(r.expect("learning_rate"), "learning_rate"), "learning_rate");
  b.cfg.em.em_update_gap = to_count(
      one_token(r.expect("em_update_gap"), "em_update_gap"), "em_update_gap");
  b.cfg.em.prior_update_gap =
      to_count(one_token(r.expect("prior_update_gap"), "prior_update_gap"),
               "prior_update_gap");
  b.cfg.em.dim_scaling =
      dim_scaling_from(one_token(r.expect("dim_scaling"), "dim_scaling"));
  b.cfg.em.use_adam =
      to_count(one_token(r.expect("use_adam"), "use_adam"), "use_adam") != 0;
  b.cfg.em.adam_beta1 =
      to_f64(one_token(r.expect("adam_beta1"), "adam_beta1"), "adam_beta1");
  b.cfg.em.adam_beta2 =
      to_f64(one_token(r.expect("adam_beta2"), "adam_beta2"), "adam_beta2");
  b.cfg.em.adam_eps =
      to_f64(one_token(r.expect("adam_eps"), "adam_eps"), "adam_eps");
  b.cfg.em.seed = [&] {
    std::string s = one_token(r.expect("seed"), "seed");
    try {
      return std::uint64_t(std::stoull(s));
    } catch (const std::exception&) {
      throw PersistenceError("bundle manifest: bad seed \"" + s + "\"");
    }
  }();
  b.cfg.threads =
      to_count(one_token(r.expect("threads"), "threads"), "threads");
  auto reg = r.expect("regularizer");
  if (reg.size() != 5)
    throw PersistenceError("bundle manifest: malformed regularizer line");
  b.cfg.reg.kind = reg_kind_from(reg[1]);
  b.cfg.reg.a = to_f64(reg[2], "regularizer a");
  b.cfg.reg.b = to_f64(reg[3], "regularizer b");
  b.cfg.reg.lambda = to_f64(reg[4], "regularizer lambda");
  b.cfg.use_class_prior =
      to_count(one_token(r.expect("use_class_prior"), "use_class_prior"),
               "use_class_prior") != 0;
  std::size_t y =
      to_count(one_token(r.expect("classes"), "classes"), "classes");

  for (std::size_t c = 0; c < y; ++c) {
    std::string line = r.raw_line();
    // "class <idx> <count> <id with possible spaces>"
    std::istringstream ls(line);
    std::string tag, idx_s, count_s;
    if (!(ls >> tag >> idx_s >> count_s) || tag != "class")
      throw PersistenceError("bundle manifest: malformed class line \"" +
                             line + "\"");
    if (to_count(idx_s, "class index") != c)
      throw PersistenceError("bundle manifest: class lines out of order");
    b.class_counts.push_back(to_count(count_s, "class count"));
    std::string id;
    std::getline(ls, id);
    if (!id.empty() && id[0] == ' ') id.erase(0, 1);
    if (id.empty())
      throw PersistenceError("bundle manifest: class " + std::to_string(c) +
                             " has an empty id");
    b.class_ids.push_back(id);
  }

  for (std::size_t c = 0; c < y; ++c) {
    std::string path = dir + "/" + model_file(c);
    if (b.cfg.kind == ModelKind::genmm)
      b.gen_models.push_back(load_genmm(path));
    else
      b.lat_models.push_back(load_latmm(path));
  }
  b.validate();
  return b;
}

} // namespace flowmix
