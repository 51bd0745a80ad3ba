#include "flowmix/serialize.hpp"

#include <cstdint>
#include <cstring>
#include <fstream>
#include <istream>
#include <ostream>
#include <sstream>

#include "flowmix/errors.hpp"
#include "flowmix/textio.hpp"

namespace flowmix {

namespace {

constexpr char kMagic[4] = {'N', 'N', 'M', 'M'};

void write_f64(std::ostream& os, double v) {
  std::uint64_t u;
  std::memcpy(&u, &v, sizeof u);
  unsigned char b[8];
  for (int i = 0; i < 8; ++i) b[i] = static_cast<unsigned char>(u >> (8 * i));
  os.write(reinterpret_cast<const char*>(b), 8);
}

double read_f64(std::istream& is) {
  unsigned char b[8];
  is.read(reinterpret_cast<char*>(b), 8);
  if (is.gcount() != 8)
    throw PersistenceError("model file truncated inside the parameter block");
  std::uint64_t u = 0;
  for (int i = 0; i < 8; ++i) u |= std::uint64_t(b[i]) << (8 * i);
  double v;
  std::memcpy(&v, &u, sizeof v);
  return v;
}

void write_header(std::ostream& os, ModelKind kind) {
  os.write(kMagic, 4);
  os.put(static_cast<char>(kFormatVersion));
  os.put('\n');
  os << model_kind_name(kind) << '\n';
}

/// Consumes magic + version + kind line; returns the declared kind.
ModelKind read_header(std::istream& is) {
  char magic[4] = {};
  is.read(magic, 4);
  if (is.gcount() != 4 || std::memcmp(magic, kMagic, 4) != 0) {
    std::string got(magic, magic + std::max<std::streamsize>(is.gcount(), 0));
    throw PersistenceError("bad magic: expected \"NNMM\", got \"" + got + "\"");
  }
  int version = is.get();
  if (version == std::char_traits<char>::eof())
    throw PersistenceError("model file ends after magic");
  if (version != kFormatVersion)
    throw PersistenceError("unsupported format version " +
                           std::to_string(version) + " (supported: " +
                           std::to_string(int(kFormatVersion)) + ")");
  if (is.get() != '\n')
    throw PersistenceError("missing newline after version byte");
  std::string kind;
  if (!std::getline(is, kind))
    throw PersistenceError("model file ends before the kind line");
  if (kind == "flow") return ModelKind::flow;
  if (kind == "genmm") return ModelKind::genmm;
  if (kind == "latmm") return ModelKind::latmm;
  throw PersistenceError("unknown model kind \"" + kind + "\"");
}

void expect_kind(std::istream& is, ModelKind want) {
  ModelKind got = read_header(is);
  if (got != want)
    throw PersistenceError("expected a " + model_kind_name(want) +
                           " payload, found " + model_kind_name(got));
}

/// Manifest line as whitespace-separated tokens; the blank terminator line
/// yields an empty vector.
std::vector<std::string> next_tokens(std::istream& is) {
  std::string line;
  if (!std::getline(is, line))
    throw PersistenceError("model file ends inside the manifest");
  std::istringstream ls(line);
  std::vector<std::string> toks;
  std::string t;
  while (ls >> t) toks.push_back(t);
  return toks;
}

std::size_t parse_count(const std::string& tok, const char* what) {
  try {
    std::size_t pos = 0;
    unsigned long long v = std::stoull(tok, &pos);
    if (pos != tok.size()) throw std::invalid_argument(tok);
    return static_cast<std::size_t>(v);
  } catch (const std::exception&) {
    throw PersistenceError(std::string("manifest: bad ") + what + " \"" + tok +
                           "\"");
  }
}

double parse_f64_token(const std::string& tok, const char* what) {
  double v;
  if (!parse_double_strict(tok, v))
    throw PersistenceError(std::string("manifest: bad ") + what + " \"" + tok +
                           "\"");
  return v;
}

void expect_blank(std::istream& is) {
  auto toks = next_tokens(is);
  if (!toks.empty())
    throw PersistenceError("manifest: expected blank terminator, got \"" +
                           toks[0] + " ...\"");
}

void write_params(std::ostream& os, const FlowNetwork& net) {
  for (const auto& p : net.params())
    for (double v : p->values) write_f64(os, v);
}

void read_params(std::istream& is, FlowNetwork& net) {
  for (const auto& p : net.params())
    for (double& v : p->values) v = read_f64(is);
}

std::vector<double> parse_f64_list(const std::vector<std::string>& toks,
                                   std::size_t from, std::size_t expect,
                                   const char* what) {
  if (toks.size() - from != expect)
    throw PersistenceError(std::string("manifest: ") + what + " lists " +
                           std::to_string(toks.size() - from) +
                           " values, expected " + std::to_string(expect));
  std::vector<double> out;
  out.reserve(expect);
  for (std::size_t i = from; i < toks.size(); ++i)
    out.push_back(parse_f64_token(toks[i], what));
  return out;
}

/// k / dim / pi preamble shared by both mixture containers.
struct MixtureHead {
  std::size_t dim = 0;
  std::size_t k = 0;
  std::vector<double> pi;
};

void write_mixture_head(std::ostream& os, std::size_t dim, std::size_t k,
                        const std::vector<double>& pi) {
  os << "dim " << dim << '\n';
  os << "k " << k << '\n';
  os << "pi";
  for (double p : pi) os << ' ' << fmt_g17(p);
  os << '\n';
}

MixtureHead read_mixture_head(std::istream& is) {
  MixtureHead h;
  auto dim_toks = next_tokens(is);
  if (dim_toks.size() != 2 || dim_toks[0] != "dim")
    throw PersistenceError("manifest: expected \"dim <n>\"");
  h.dim = parse_count(dim_toks[1], "dim");
  auto k_toks = next_tokens(is);
  if (k_toks.size() != 2 || k_toks[0] != "k")
    throw PersistenceError("manifest: expected \"k <n>\"");
  h.k = parse_count(k_toks[1], "k");
  if (h.k < 1) throw PersistenceError("manifest: k must be at least 1");
  auto pi_toks = next_tokens(is);
  if (pi_toks.empty() || pi_toks[0] != "pi")
    throw PersistenceError("manifest: expected \"pi <weights>\"");
  h.pi = parse_f64_list(pi_toks, 1, h.k, "pi");
  return h;
}

template <typename Model>
Model checked(Model m) {
  try {
    m.validate();
  } catch (const Error& e) {
    throw PersistenceError(std::string("loaded model fails validation: ") +
                           e.what());
  }
  return m;
}

void open_failed(const std::string& verb, const std::string& path) {
  throw IoError("cannot " + verb + " \"" + path + "\"");
}

template <typename Fn>
void save_to_path(const std::string& path, Fn&& fn) {
  std::ofstream os(path, std::ios::binary | std::ios::trunc);
  if (!os) open_failed("write", path);
  fn(os);
  os.flush();
  if (!os) throw IoError("write to \"" + path + "\" failed");
}

template <typename Fn>
auto load_from_path(const std::string& path, Fn&& fn) {
  std::ifstream is(path, std::ios::binary);
  if (!is) open_failed("read", path);
  auto m = fn(is);
  // a clean payload consumes the whole file
  if (is.peek() != std::char_traits<char>::eof())
    throw PersistenceError("trailing bytes after the model payload in \"" +
                           path + "\"");
  return m;
}

} // namespace

std::string model_kind_name(ModelKind k) {
  switch (k) {
    case ModelKind::flow: return "flow";
    case ModelKind::genmm: return "genmm";
    case ModelKind::latmm: return "latmm";
  }
  throw DomainError("unknown ModelKind");
}

void save_flow(std::ostream& os, const FlowNetwork& net) {
  write_header(os, ModelKind::flow);
  os << "dim " << net.dim << '\n';
  os << "split_after";
  for (std::size_t s : net.split_after) os << ' ' << s;
  os << '\n';
  os << "layers " << net.layers.size() << '\n';
  for (const auto& l : net.layers) {
    switch (l->kind()) {
      case LayerKind::actnorm:
        os << "actnorm " << l->dim() << '\n';
        break;
      case LayerKind::permutation: {
        const auto& p = static_cast<const PermutationLayer&>(*l);
        os << "permutation " << p.dim();
        for (std::size_t j : p.perm) os << ' ' << j;
        os << '\n';
        break;
      }
      case LayerKind::coupling: {
        const auto& c = static_cast<const CouplingLayer&>(*l);
        os << "coupling " << c.dim() << ' ' << c.hidden() << ' '
           << fmt_g17(c.scale_clamp()) << '\n';
        break;
      }
    }
  }
  os << '\n';
  write_params(os, net);
}

FlowNetwork load_flow(std::istream& is) {
  expect_kind(is, ModelKind::flow);
  FlowNetwork net;

  auto dim_toks = next_tokens(is);
  if (dim_toks.size() != 2 || dim_toks[0] != "dim")
    throw PersistenceError("flow manifest: expected \"dim <n>\"");
  net.dim = parse_count(dim_toks[1], "dim");
  if (net.dim < 1) throw PersistenceError("flow manifest: dim must be >= 1");

  auto split_toks = next_tokens(is);
  if (split_toks.empty() || split_toks[0] != "split_after")
    throw PersistenceError("flow manifest: expected \"split_after ...\"");
  for (std::size_t i = 1; i < split_toks.size(); ++i)
    net.split_after.push_back(parse_count(split_toks[i], "split index"));

  auto layer_toks = next_tokens(is);
  if (layer_toks.size() != 2 || layer_toks[0] != "layers")
    throw PersistenceError("flow manifest: expected \"layers <n>\"");
  std::size_t n_layers = parse_count(layer_toks[1], "layer count");

  // replay the split bookkeeping to confirm each stored layer width matches
  // the active width at its position
  std::size_t active = net.dim;
  for (std::size_t i = 0; i < n_layers; ++i) {
    auto toks = next_tokens(is);
    if (toks.empty())
      throw PersistenceError("flow manifest: blank line inside the layer list");
    std::size_t ldim =
        toks.size() >= 2 ? parse_count(toks[1], "layer dim") : 0;
    if (ldim != active)
      throw PersistenceError(
          "flow manifest: layer " + std::to_string(i) + " has width " +
          std::to_string(ldim) + ", expected " + std::to_string(active));
    if (toks[0] == "actnorm") {
      if (toks.size() != 2)
        throw PersistenceError("flow manifest: malformed actnorm line");
      net.layers.push_back(std::make_unique<ActnormLayer>(ldim));
    } else if (toks[0] == "permutation") {
      std::vector<std::size_t> perm;
      for (std::size_t j = 2; j < toks.size(); ++j)
        perm.push_back(parse_count(toks[j], "permutation index"));
      if (perm.size() != ldim)
        throw PersistenceError("flow manifest: permutation length mismatch");
      try {
        net.layers.push_back(std::make_unique<PermutationLayer>(perm));
      } catch (const Error& e) {
        throw PersistenceError(std::string("flow manifest: ") + e.what());
      }
    } else if (toks[0] == "coupling") {
      if (toks.size() != 4)
        throw PersistenceError("flow manifest: malformed coupling line");
      std::size_t hidden = parse_count(toks[2], "hidden width");
      double clamp = parse_f64_token(toks[3], "scale clamp");
      try {
        Rng scratch(0); // placeholder init, overwritten by the blob below
        net.layers.push_back(
            std::make_unique<CouplingLayer>(ldim, hidden, clamp, scratch));
      } catch (const Error& e) {
        throw PersistenceError(std::string("flow manifest: ") + e.what());
      }
    } else {
      throw PersistenceError("flow manifest: unknown layer kind \"" + toks[0] +
                             "\"");
    }
    for (std::size_t sp : net.split_after)
      if (sp == i) active -= active / 2;
  }
  expect_blank(is);
  read_params(is, net);
  return net;
}

void save_genmm(std::ostream& os, const GenMMModel& m) {
  write_header(os, ModelKind::genmm);
  write_mixture_head(os, m.dim, m.K(), m.pi);
  os << '\n';
  for (const auto& g : m.generators) save_flow(os, g);
}

GenMMModel load_genmm(std::istream& is) {
  expect_kind(is, ModelKind::genmm);
  MixtureHead h = read_mixture_head(is);
  expect_blank(is);
  GenMMModel m;
  m.dim = h.dim;
  m.pi = h.pi;
  for (std::size_t k = 0; k < h.k; ++k) {
    FlowNetwork g = load_flow(is);
    if (g.dim != m.dim)
      throw PersistenceError("generator " + std::to_string(k) +
                             " width disagrees with the container");
    m.generators.push_back(std::move(g));
  }
  return checked(std::move(m));
}

void save_latmm(std::ostream& os, const LatMMModel& m) {
  write_header(os, ModelKind::latmm);
  write_mixture_head(os, m.dim, m.K(), m.pi);
  for (const auto& row : m.mu) {
    os << "mu";
    for (double v : row->values) os << ' ' << fmt_g17(v);
    os << '\n';
  }
  for (const auto& row : m.log_sigma) {
    os << "log_sigma";
    for (double v : row->values) os << ' ' << fmt_g17(v);
    os << '\n';
  }
  os << '\n';
  save_flow(os, m.flow);
}

LatMMModel load_latmm(std::istream& is) {
  expect_kind(is, ModelKind::latmm);
  MixtureHead h = read_mixture_head(is);
  LatMMModel m;
  m.dim = h.dim;
  m.pi = h.pi;
  for (std::size_t k = 0; k < h.k; ++k) {
    auto toks = next_tokens(is);
    if (toks.empty() || toks[0] != "mu")
      throw PersistenceError("latmm manifest: expected " + std::to_string(h.k) +
                             " \"mu\" rows");
    m.mu.push_back(
        ad::from_values(1, h.dim, parse_f64_list(toks, 1, h.dim, "mu"), true));
  }
  for (std::size_t k = 0; k < h.k; ++k) {
    auto toks = next_tokens(is);
    if (toks.empty() || toks[0] != "log_sigma")
      throw PersistenceError("latmm manifest: expected " + std::to_string(h.k) +
                             " \"log_sigma\" rows");
    m.log_sigma.push_back(ad::from_values(
        1, h.dim, parse_f64_list(toks, 1, h.dim, "log_sigma"), true));
  }
  expect_blank(is);
  m.flow = load_flow(is);
  if (m.flow.dim != m.dim)
    throw PersistenceError("latmm flow width disagrees with the container");
  return checked(std::move(m));
}

void save_flow(const std::string& path, const FlowNetwork& net) {
  save_to_path(path, [&](std::ostream& os) { save_flow(os, net); });
}

FlowNetwork load_flow(const std::string& path) {
  return load_from_path(path, [](std::istream& is) { return load_flow(is); });
}

void save_genmm(const std::string& path, const GenMMModel& m) {
  save_to_path(path, [&](std::ostream& os) { save_genmm(os, m); });
}

GenMMModel load_genmm(const std::string& path) {
  return load_from_path(path, [](std::istream& is) { return load_genmm(is); });
}

void save_latmm(const std::string& path, const LatMMModel& m) {
  save_to_path(path, [&](std::ostream& os) { save_latmm(os, m); });
}

LatMMModel load_latmm(const std::string& path) {
  return load_from_path(path,
                        [](std::istream& is) { return load_latmm(is); });
}

ModelKind peek_model_kind(const std::string& path) {
  std::ifstream is(path, std::ios::binary);
  if (!is) open_failed("read", path);
  return read_header(is);
}

} // namespace flowmix
