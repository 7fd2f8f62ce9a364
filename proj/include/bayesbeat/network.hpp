#pragma once

#include <cstdint>
#include <filesystem>
#include <map>
#include <stdexcept>
#include <string>
#include <string_view>
#include <vector>

#include "bayesbeat/bayes.hpp"

namespace bayesbeat {

/// One convolutional stage: variational conv -> [batchnorm] -> softplus -> [maxpool].
struct ConvStage {
  std::size_t channels = 16;
  std::size_t kernel = 5;   // odd; "same" padding of kernel / 2
  std::size_t pool = 0;     // window == stride; 0 = no pooling
  bool batchnorm = false;

  friend bool operator==(const ConvStage&, const ConvStage&) = default;
};

struct NetworkConfig {
  std::vector<ConvStage> stages;
  std::size_t input_length = 800;
  std::size_t hidden = 64;  // width of the variational hidden dense layer
  std::size_t classes = 2;
  bool variational_bias = true;
  double rho_init = -5.0;
  double bn_momentum = 0.1;
  double bn_eps = 1e-5;
  double variance_floor = 1e-10;
  /// Strict configs must follow the nine-stage layout (pooling on stages 1-3,
  /// batchnorm on stages 4-9) and land in the 162K-198K parameter budget.
  bool strict = true;

  /// The nine-stage default: 24-24-48 (kernel 7, pool 2) then
  /// 48-56-72-80-96-96 (kernel 5, batchnorm), hidden dense 64, 2 logits.
  static NetworkConfig bayesbeat();
  /// Small non-strict config for tests and smoke runs.
  static NetworkConfig tiny(std::size_t stages, std::size_t channels, std::size_t input_length);

  /// Throws std::invalid_argument naming the violated constraint.
  void validate() const;
  /// Trainable point parameters: posterior means, deterministic biases and
  /// batchnorm gamma/beta (rho and running statistics excluded).
  std::size_t parameter_count() const;

  /// Canonical `key=value` text, one per line; from_text(to_text()) == *this.
  std::string to_text() const;
  static NetworkConfig from_text(std::string_view text);
  /// Applies `key=value` overrides understood by to_text().
  void apply(const std::map<std::string, std::string>& kv);

  friend bool operator==(const NetworkConfig&, const NetworkConfig&) = default;
};

static constexpr std::size_t kNoIndex = static_cast<std::size_t>(-1);

/// Role of a stored parameter tensor.
enum class ParamKind { mu, rho, gamma, beta };

template <class T>
struct NetworkForward {
  BasicVar<T> logits;    // [B, classes]
  BasicVar<T> kl;        // scalar; sum of the layers' prior terms for this draw (0 in mean-only mode)
  BasicVar<T> features;  // [B, hidden]: input of the final classifier layer
};

/// The variational 1-D CNN. Parameters are stored flat (in a fixed order) so
/// optimisers and checkpoints can treat them uniformly.
template <class T>
class BasicNetwork {
 public:
  struct Param {
    std::string name;
    ParamKind kind;
    BasicTensor<T> value;
  };

  /// Deterministic initialisation from `seed`. Validates `config`.
  static BasicNetwork build(const NetworkConfig& config, std::uint64_t seed);

  const NetworkConfig& config() const { return config_; }
  std::uint64_t seed() const { return seed_; }
  /// Same quantity as NetworkConfig::parameter_count(), counted from storage.
  std::size_t parameter_count() const;

  std::vector<Param>& params() { return params_; }
  const std::vector<Param>& params() const { return params_; }
  std::vector<BatchNormState<T>>& norm_states() { return norm_states_; }
  const std::vector<BatchNormState<T>>& norm_states() const { return norm_states_; }

  /// Records every parameter on `tape` (as leaves when trainable), aligned
  /// with params().
  std::vector<BasicVar<T>> bind(BasicTape<T>& tape, bool trainable) const;

  /// input [B, 1, input_length]. Batchnorm in train mode updates running stats.
  NetworkForward<T> forward(const std::vector<BasicVar<T>>& bound, BasicVar<T> input, SamplingMode mode,
                            const NoiseSource& noise, NormMode norm);

  /// Convenience: eval-mode pass without gradients; returns logits.
  BasicTensor<T> logits(const BasicTensor<T>& input, SamplingMode mode, const NoiseSource& noise);
  /// Mean-only, eval-mode features feeding the final classifier layer.
  BasicTensor<T> penultimate_features(const BasicTensor<T>& input);

  /// Serialisation hooks used by the checkpoint format.
  static BasicNetwork from_parts(NetworkConfig config, std::uint64_t seed, std::vector<Param> params,
                                 std::vector<BatchNormState<T>> norm_states);

 private:
  struct LayerIndex {
    std::size_t w_mu = kNoIndex, w_rho = kNoIndex, b_mu = kNoIndex, b_rho = kNoIndex;
    std::size_t gamma = kNoIndex, beta = kNoIndex, norm = kNoIndex;
  };

  void index_layers();
  VariationalVars<T> layer_vars(const LayerIndex& li, const std::vector<BasicVar<T>>& bound) const;

  NetworkConfig config_;
  std::uint64_t seed_ = 0;
  std::vector<Param> params_;
  std::vector<BatchNormState<T>> norm_states_;
  std::vector<LayerIndex> conv_index_;
  LayerIndex hidden_index_;
  LayerIndex out_index_;
};

using Network = BasicNetwork<float>;

extern template class BasicNetwork<float>;
extern template class BasicNetwork<double>;

/// Raised when a checkpoint file is malformed or fails its CRC.
class CheckpointError : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

/// Optional metadata stored alongside the weights.
struct CheckpointMeta {
  std::map<std::string, std::string> values;
};

/// Binary layout: "BBKT", u32 version, u32-length config text, u32 record
/// count, per tensor record (u32-length name, u32-length dtype "f32", u32
/// rank, u64 dims, little-endian payload), CRC-32 of everything before it.
void save_checkpoint(const Network& net, const std::filesystem::path& path, const CheckpointMeta& meta = {});
Network load_checkpoint(const std::filesystem::path& path, CheckpointMeta* meta = nullptr);

/// In-memory form of the same bytes (used for best-model snapshots).
std::string encode_checkpoint(const Network& net, const CheckpointMeta& meta = {});
Network decode_checkpoint(std::string_view bytes, CheckpointMeta* meta = nullptr);

}  // namespace bayesbeat
