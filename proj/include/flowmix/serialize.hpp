#ifndef FLOWMIX_SERIALIZE_HPP
#define FLOWMIX_SERIALIZE_HPP

#include <iosfwd>
#include <string>

#include "flowmix/flow.hpp"
#include "flowmix/genmm.hpp"
#include "flowmix/latmm.hpp"

namespace flowmix {

/// On-disk layout shared by every model file:
///   "NNMM" magic, one raw format-version byte, newline,
///   text manifest (structure, hyper-parameters, small arrays as %.17g),
///   one blank line,
///   all parameter tensors packed as little-endian float64 in manifest order.
/// Mixture containers embed complete flow blobs (magic included) back to
/// back after their own manifest, so every payload is self-delimiting.
/// Save -> load -> save reproduces the file byte for byte.
inline constexpr unsigned char kFormatVersion = 1;

enum class ModelKind { flow, genmm, latmm };

std::string model_kind_name(ModelKind k);

void save_flow(std::ostream& os, const FlowNetwork& net);
FlowNetwork load_flow(std::istream& is);

void save_genmm(std::ostream& os, const GenMMModel& m);
GenMMModel load_genmm(std::istream& is);

void save_latmm(std::ostream& os, const LatMMModel& m);
LatMMModel load_latmm(std::istream& is);

void save_flow(const std::string& path, const FlowNetwork& net);
FlowNetwork load_flow(const std::string& path);
void save_genmm(const std::string& path, const GenMMModel& m);
GenMMModel load_genmm(const std::string& path);
void save_latmm(const std::string& path, const LatMMModel& m);
LatMMModel load_latmm(const std::string& path);

/// Reads only the header; IoError if unreadable, PersistenceError if the
/// magic, version, or kind line is wrong.
ModelKind peek_model_kind(const std::string& path);

} // namespace flowmix

#endif
