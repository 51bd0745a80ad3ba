#ifndef FLOWMIX_RUNCONFIG_HPP
#define FLOWMIX_RUNCONFIG_HPP

#include <cstdint>
#include <optional>
#include <ostream>
#include <string>
#include <utility>
#include <vector>

#include "flowmix/em.hpp"
#include "flowmix/flow.hpp"
#include "flowmix/latmm.hpp"
#include "flowmix/serialize.hpp"

namespace flowmix {

using KeyValues = std::vector<std::pair<std::string, std::string>>;

/// Flat key=value settings for a CLI run. Values arrive from a config file
/// (one `key = value` per line, '#' comments allowed) and from command-line
/// flags, flags taking precedence. Every key is schema-checked: unknown keys
/// and malformed values raise ConfigError.
struct RunConfig {
  // model architecture
  std::string model = "genmm"; // genmm | latmm
  std::size_t k = 1;
  std::size_t depth = 4;
  std::size_t hidden = 0; // 0 = automatic hidden width
  double scale_clamp = 5.0;
  std::string split_after; // comma-separated 0-based block indices

  // training
  std::size_t epochs = 100;
  std::size_t batch_size = 64;
  double learning_rate = 0.01;
  std::size_t em_update_gap = 5;
  std::size_t prior_update_gap = 5;
  std::string dim_scaling = "auto"; // auto | on | off
  bool use_adam = false;
  double adam_beta1 = 0.9;
  double adam_beta2 = 0.999;
  double adam_eps = 1e-8;

  // latent regularizer (latmm only)
  std::string regularizer = "gamma_prior"; // gamma_prior | l2 | none
  double reg_a = 2.0;
  double reg_b = 1.0;
  double reg_lambda = 0.1;

  std::uint64_t seed = 0;

  // paths ("" = not set; commands require the ones they use)
  std::string data;
  std::string out;
  std::string log;
  std::string label_column; // "" = unlabeled, else an integer (negative =
                            // counted from the end)

  /// Assigns one key. Throws ConfigError for unknown keys or values that do
  /// not parse as the key's type.
  void set(const std::string& key, const std::string& value);

  /// Applies every assignment in the file on top of the current values.
  /// Errors are reported as "path:line: ...".
  void apply_file(const std::string& path);

  /// Range/enum checks across all fields. Throws ConfigError.
  void validate() const;

  ModelKind model_kind() const;
  FlowBuildOptions flow_options() const;
  EMConfig em_config() const;
  RegularizerSpec regularizer_spec() const;
  std::optional<int> label_column_value() const;

  /// Every key with its canonical textual value, in schema order. This is
  /// what gets echoed into output file headers.
  KeyValues effective() const;
};

/// One "# key=value" line per entry.
void write_comment_header(std::ostream& os, const KeyValues& kvs);

} // namespace flowmix

#endif
