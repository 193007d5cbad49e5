#pragma once

#include <cstdint>
#include <filesystem>
#include <string>
#include <utility>
#include <vector>

#include "kinedec/rng.hpp"
#include "kinedec/tensor.hpp"

namespace kinedec::model {

using tensor::Tensor;

struct ModelConfig {
  int64_t in_channels_eeg = 32;
  int64_t in_channels_emg = 0;  // 0 disables the EMG path
  int64_t window_samples = 250;
  int64_t large_kernel = 65;
  std::vector<int64_t> branch_kernels = {7, 15, 31};
  int64_t branch_features = 8;
  int64_t pool_k = 4;
  int64_t pool_s = 4;
  int64_t se_reduction = 8;
  int64_t se_reduction_emg = 1;
  int64_t embed_dim = 128;  // D = heads * head_dim
  int64_t heads = 4;
  int64_t head_dim = 32;
  int64_t out_dim = 6;  // 6 regression targets or 5 state logits
  double dropout = 0.25;

  void validate() const;
  bool fusion() const { return in_channels_emg > 0; }
  // Feature count after the parallel branches concatenate.
  int64_t features() const {
    return branch_features * static_cast<int64_t>(branch_kernels.size());
  }
  // Temporal length after pooling.
  int64_t pooled_samples() const { return (window_samples - pool_k) / pool_s + 1; }
};

// JSON round trip for configs; unknown keys are rejected, missing keys keep
// their defaults.
std::string config_to_json(const ModelConfig& cfg);
ModelConfig config_from_json(const std::string& text);

enum class Modality { EEG, EMG };

struct AttentionResult {
  Tensor output;  // [B, T', D]
  Tensor probs;   // [B, heads, T', T'], rows sum to 1
};

struct DecoderOutput {
  Tensor output;           // [B, out_dim]
  Tensor latent;           // [B, D] normalized pooled tokens, the critic input
  Tensor attention_probs;  // [B, heads, T', T']
};

class Model {
 public:
  Model(ModelConfig config, uint64_t seed);

  const ModelConfig& config() const { return config_; }

  // [B, C, T] -> [B, F, C, T']: shared per-channel temporal convolutions
  // (one large-kernel stem, then parallel branches that concatenate on the
  // feature axis), average pooling, dropout.
  Tensor multi_conv_block(const Tensor& x, Modality m, bool training = false,
                          Rng* rng = nullptr) const;
  // [B, C, F, T] -> same shape, each channel scaled by its squeeze-excitation
  // gate in (0, 1).
  Tensor se_block(const Tensor& x, Modality m) const;
  // [B, C, F, T'] (+ optional EMG [B, C', F, T']) -> [B, T', D] tokens via a
  // shared affine projection of the flattened channel-feature slices plus a
  // learned positional encoding.
  Tensor embed(const Tensor& eeg, const Tensor* emg = nullptr) const;
  // Multi-head scaled dot-product self-attention with output projection,
  // residual connection, and layer norm.
  AttentionResult self_attention_block(const Tensor& z) const;
  // Mean over tokens, layer norm, two affine layers (hidden D/2, ELU).
  // When latent is non-null it receives the normalized pooled vector.
  Tensor fc_head(const Tensor& z, bool training = false, Rng* rng = nullptr,
                 Tensor* latent = nullptr) const;

  // x_emg is required exactly when the config enables fusion. rng is required
  // when training with dropout > 0.
  DecoderOutput forward(const Tensor& x_eeg, const Tensor* x_emg = nullptr,
                        bool training = false, Rng* rng = nullptr) const;

  std::vector<std::pair<std::string, Tensor>>& parameters() { return params_; }
  const std::vector<std::pair<std::string, Tensor>>& parameters() const { return params_; }
  const Tensor& param(const std::string& name) const;
  Tensor& mutable_param(const std::string& name);

  void save(const std::filesystem::path& path) const;
  static Model load(const std::filesystem::path& path);

 private:
  explicit Model(ModelConfig config);
  void register_parameters();
  void init_parameters(uint64_t seed);
  Tensor apply_dropout(const Tensor& x, bool training, Rng* rng) const;

  ModelConfig config_;
  std::vector<std::pair<std::string, Tensor>> params_;
};

}  // namespace kinedec::model
