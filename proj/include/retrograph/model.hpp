#pragma once

#include <Eigen/Core>

#include <cstdint>
#include <filesystem>
#include <map>
#include <string>
#include <vector>

#include "retrograph/reaction.hpp"

namespace retrograph {

inline constexpr std::uint32_t kCheckpointVersion = 1;
inline constexpr int kNumReactionTypes = 10;

// Row counts of the atom feature tables.
inline constexpr int kElementRows = 87;  ///< Atomic numbers 0 (wildcard) .. 86.
inline constexpr int kChargeRows = 7;    ///< Formal charge clipped to [-3, 3].
inline constexpr int kHydrogenRows = 5;  ///< Total H clipped at 4.
inline constexpr int kDegreeRows = 9;    ///< Total degree clipped at 8.

struct ModelConfig {
  int d = 128;
  int d_k = 16;
  int n_head = 8;
  int layers = 4;
  int k_r = 4;       ///< Max hop of the local bias item.
  int k_b = 6;       ///< Bond senses used by the local bias item.
  int k = kDefaultMaxHydrogenChange;
  int vocab_size = 1;
  int max_gates = 2;
  std::uint64_t seed = 1;
  bool type_known = false;
  bool separate_encoders = false;  ///< One encoder per task (no joint learning).
  bool mask_local = false;
  bool mask_global = false;
  bool rcp_positive_only = false;  ///< Bond/hydrogen losses over reaction-center entries only.
  double tau_contrastive = 0.5;

  int hydrogen_classes() const noexcept { return 2 * k + 1; }
  /// Throws ConfigError on inconsistent dimensions.
  void validate() const;
  std::string to_text() const;
  static ModelConfig from_text(const std::string& text);
  bool operator==(const ModelConfig&) const = default;
};

/// Named parameter tensors. Values are kept at float32-representable
/// doubles so the float32 checkpoint round-trips bitwise.
struct ModelParams {
  ModelConfig config;
  std::map<std::string, Eigen::MatrixXd> tensors;
  /// Last recorded task weights of the adaptive loss (empty if untrained).
  std::vector<double> task_weights;

  const Eigen::MatrixXd& at(const std::string& name) const;
  Eigen::MatrixXd& at(const std::string& name);
  bool has(const std::string& name) const { return tensors.count(name) != 0; }
  std::size_t parameter_count() const;
};

/// Encoder prefixes present for a configuration: "enc", or one per task.
std::vector<std::string> encoder_prefixes(const ModelConfig& config);

ModelParams init_params(const ModelConfig& config);

/// Rounds every tensor entry to the nearest float32 value.
void round_to_float(ModelParams& params);

void save_checkpoint(const ModelParams& params, const std::filesystem::path& path);
std::string serialize_checkpoint(const ModelParams& params);
/// Throws VersionError, ChecksumError (corrupt or truncated) or FormatError.
ModelParams deserialize_checkpoint(const std::string& bytes);
/// When `expected` is given, a differing k_r raises ConfigError.
ModelParams load_checkpoint(const std::filesystem::path& path, const ModelConfig* expected = nullptr);

/// Parameters plus the leaving-group vocabulary they were trained against.
struct Model {
  ModelParams params;
  LeavingGroupVocab vocab;
};

/// Writes `path` (checkpoint) and `path`.vocab.
void save_model(const Model& model, const std::filesystem::path& path);
Model load_model(const std::filesystem::path& path, const ModelConfig* expected = nullptr);

}  // namespace retrograph
