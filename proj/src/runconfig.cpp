#include "flowmix/runconfig.hpp"

#include <algorithm>
#include <cctype>
#include <fstream>

#include "flowmix/errors.hpp"
#include "flowmix/textio.hpp"

namespace flowmix {

namespace {

std::size_t to_size(const std::string& key, const std::string& v) {
  bool digits = !v.empty() && std::all_of(v.begin(), v.end(), [](unsigned char c) {
                  return std::isdigit(c) != 0;
                });
  if (!digits)
    throw ConfigError(key + ": not a non-negative integer: '" + v + "'");
  try {
    return std::size_t(std::stoull(v));
  } catch (const std::exception&) {
    throw ConfigError(key + ": integer out of range: '" + v + "'");
  }
}

std::uint64_t to_u64(const std::string& key, const std::string& v) {
  return std::uint64_t(to_size(key, v));
}

double to_double(const std::string& key, const std::string& v) {
  double out = 0.0;
  if (!parse_double_strict(v, out))
    throw ConfigError(key + ": not a number: '" + v + "'");
  return out;
}

bool to_bool(const std::string& key, const std::string& v) {
  if (v == "1" || v == "true") return true;
  if (v == "0" || v == "false") return false;
  throw ConfigError(key + ": expected 0/1/true/false, got '" + v + "'");
}

} // namespace

void RunConfig::set(const std::string& key, const std::string& value) {
  if (key == "model") model = value;
  else if (key == "k") k = to_size(key, value);
  else if (key == "depth") depth = to_size(key, value);
  else if (key == "hidden") hidden = to_size(key, value);
  else if (key == "scale_clamp") scale_clamp = to_double(key, value);
  else if (key == "split_after") split_after = value;
  else if (key == "epochs") epochs = to_size(key, value);
  else if (key == "batch_size") batch_size = to_size(key, value);
  else if (key == "learning_rate") learning_rate = to_double(key, value);
  else if (key == "em_update_gap") em_update_gap = to_size(key, value);
  else if (key == "prior_update_gap") prior_update_gap = to_size(key, value);
  else if (key == "dim_scaling") dim_scaling = value;
  else if (key == "use_adam") use_adam = to_bool(key, value);
  else if (key == "adam_beta1") adam_beta1 = to_double(key, value);
  else if (key == "adam_beta2") adam_beta2 = to_double(key, value);
  else if (key == "adam_eps") adam_eps = to_double(key, value);
  else if (key == "regularizer") regularizer = value;
  else if (key == "reg_a") reg_a = to_double(key, value);
  else if (key == "reg_b") reg_b = to_double(key, value);
  else if (key == "reg_lambda") reg_lambda = to_double(key, value);
  else if (key == "seed") seed = to_u64(key, value);
  else if (key == "data") data = value;
  else if (key == "out") out = value;
  else if (key == "log") log = value;
  else if (key == "label_column") label_column = value;
  else throw ConfigError("unknown config key '" + key + "'");
}

void RunConfig::apply_file(const std::string& path) {
  std::ifstream in(path);
  if (!in) throw IoError("cannot open " + path);
  std::string line;
  std::size_t lineno = 0;
  while (std::getline(in, line)) {
    ++lineno;
    std::string s = trim(line);
    if (s.empty() || s[0] == '#') continue;
    auto eq = s.find('=');
    if (eq == std::string::npos)
      throw ConfigError(path + ":" + std::to_string(lineno) +
                        ": expected key=value, got '" + s + "'");
    std::string key = trim(s.substr(0, eq));
    std::string value = trim(s.substr(eq + 1));
    if (key.empty())
      throw ConfigError(path + ":" + std::to_string(lineno) + ": empty key");
    try {
      set(key, value);
    } catch (const ConfigError& e) {
      throw ConfigError(path + ":" + std::to_string(lineno) + ": " + e.what());
    }
  }
}

ModelKind RunConfig::model_kind() const {
  if (model == "genmm") return ModelKind::genmm;
  if (model == "latmm") return ModelKind::latmm;
  throw ConfigError("model: expected genmm or latmm, got '" + model + "'");
}

FlowBuildOptions RunConfig::flow_options() const {
  FlowBuildOptions opt;
  opt.depth = depth;
  opt.hidden = hidden;
  opt.scale_clamp = scale_clamp;
  for (const auto& tok : split(split_after, ',')) {
    std::string t = trim(tok);
    if (t.empty()) continue;
    opt.split_after_blocks.push_back(to_size("split_after", t));
  }
  return opt;
}

EMConfig RunConfig::em_config() const {
  EMConfig c;
  c.epochs = epochs;
  c.batch_size = batch_size;
  c.learning_rate = learning_rate;
  c.em_update_gap = em_update_gap;
  c.prior_update_gap = prior_update_gap;
  if (dim_scaling == "auto") c.dim_scaling = EMConfig::DimScaling::automatic;
  else if (dim_scaling == "on") c.dim_scaling = EMConfig::DimScaling::on;
  else if (dim_scaling == "off") c.dim_scaling = EMConfig::DimScaling::off;
  else
    throw ConfigError("dim_scaling: expected auto/on/off, got '" + dim_scaling +
                      "'");
  c.use_adam = use_adam;
  c.adam_beta1 = adam_beta1;
  c.adam_beta2 = adam_beta2;
  c.adam_eps = adam_eps;
  c.seed = seed;
  c.validate();
  return c;
}

RegularizerSpec RunConfig::regularizer_spec() const {
  RegularizerSpec r;
  if (regularizer == "gamma_prior") r.kind = RegularizerSpec::Kind::gamma_prior;
  else if (regularizer == "l2") r.kind = RegularizerSpec::Kind::l2;
  else if (regularizer == "none") r.kind = RegularizerSpec::Kind::none;
  else
    throw ConfigError("regularizer: expected gamma_prior/l2/none, got '" +
                      regularizer + "'");
  r.a = reg_a;
  r.b = reg_b;
  r.lambda = reg_lambda;
  r.validate();
  return r;
}

std::optional<int> RunConfig::label_column_value() const {
  if (label_column.empty()) return std::nullopt;
  std::string v = label_column;
  std::size_t start = v[0] == '-' ? 1 : 0;
  bool digits = v.size() > start &&
                std::all_of(v.begin() + long(start), v.end(),
                            [](unsigned char c) { return std::isdigit(c) != 0; });
  if (!digits)
    throw ConfigError("label_column: not an integer: '" + v + "'");
  try {
    return std::stoi(v);
  } catch (const std::exception&) {
    throw ConfigError("label_column: integer out of range: '" + v + "'");
  }
}

void RunConfig::validate() const {
  if (k < 1) throw ConfigError("k must be at least 1");
  model_kind();
  flow_options();
  em_config();
  regularizer_spec();
  label_column_value();
}

KeyValues RunConfig::effective() const {
  auto b = [](bool v) { return v ? std::string("1") : std::string("0"); };
  return {
      {"model", model},
      {"k", std::to_string(k)},
      {"depth", std::to_string(depth)},
      {"hidden", std::to_string(hidden)},
      {"scale_clamp", fmt_g17(scale_clamp)},
      {"split_after", split_after},
      {"epochs", std::to_string(epochs)},
      {"batch_size", std::to_string(batch_size)},
      {"learning_rate", fmt_g17(learning_rate)},
      {"em_update_gap", std::to_string(em_update_gap)},
      {"prior_update_gap", std::to_string(prior_update_gap)},
      {"dim_scaling", dim_scaling},
      {"use_adam", b(use_adam)},
      {"adam_beta1", fmt_g17(adam_beta1)},
      {"adam_beta2", fmt_g17(adam_beta2)},
      {"adam_eps", fmt_g17(adam_eps)},
      {"regularizer", regularizer},
      {"reg_a", fmt_g17(reg_a)},
      {"reg_b", fmt_g17(reg_b)},
      {"reg_lambda", fmt_g17(reg_lambda)},
      {"seed", std::to_string(seed)},
      {"data", data},
      {"out", out},
      {"log", log},
      {"label_column", label_column},
  };
}

void write_comment_header(std::ostream& os, const KeyValues& kvs) {
  for (const auto& [key, value] : kvs) os << "# " << key << "=" << value << "\n";
}

} // namespace flowmix
