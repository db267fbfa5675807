#pragma once

#include <array>
#include <cstdint>
#include <stdexcept>
#include <string>
#include <vector>

#include "json.hpp"

namespace promptpix {

class ConfigError : public std::invalid_argument {
 public:
  using std::invalid_argument::invalid_argument;
};

// Prompting variants of the architecture ablation. Each names the set of
// prompt components that is present in addition to the trainable decoder.
enum class PromptVariant {
  DecoderOnly,   // no prompting
  SharedTune,    // one tuning layer shared by all adapters of a stage
  PerBlockUp,    // one up-projection per adapter instead of a shared one
  NoSuperpixel,  // adapters + attention prompt, no superpixel features
  NoAttention,   // superpixel features + adapters, no attention prompt
  Full,          // superpixel features + adapters + attention prompt
};

inline constexpr std::array<PromptVariant, 6> kAllVariants = {
    PromptVariant::DecoderOnly, PromptVariant::SharedTune,  PromptVariant::PerBlockUp,
    PromptVariant::NoSuperpixel, PromptVariant::NoAttention, PromptVariant::Full};

std::string to_string(PromptVariant v);
PromptVariant parse_variant(const std::string& name);

struct VariantTraits {
  bool prompts = false;
  bool superpixel = false;
  bool attention = false;
  bool shared_tune = false;
  bool per_block_up = false;
};
VariantTraits traits(PromptVariant v);

inline constexpr int kStages = 4;

struct BackboneConfig {
  std::array<int, kStages> stage_depths{2, 2, 2, 2};
  std::array<int, kStages> stage_widths{16, 32, 64, 128};
  std::array<int, kStages> patch_strides{4, 2, 2, 2};
  std::array<int, kStages> stage_heads{1, 2, 4, 8};
  int mlp_ratio = 4;
  int decoder_width = 32;
  int attention_dim = 32;
  std::vector<int> tuned_stages{1, 2, 3, 4};
  int gamma = 4;
  PromptVariant ablation_variant = PromptVariant::Full;
  int superpixels = 16;
  int superpixel_iters = 5;
  double superpixel_temp = 0.05;
  double pos_scale = 1.0;
  std::uint64_t seed = 0;

  void validate() const;
  // Throws ConfigError when the image is not divisible by the stride product.
  void validate_image(int height, int width) const;
  int cumulative_stride(int stage) const;  // stage in 1..4
  int prompt_width(int stage) const;
  bool stage_tuned(int stage) const;
  int kernel_size(int stage) const;

  friend bool operator==(const BackboneConfig&, const BackboneConfig&) = default;
};

struct TrainConfig {
  double learning_rate = 5e-4;
  int batch_size = 4;
  int max_epochs = 50;
  double weight_decay = 1e-2;
  double beta1 = 0.9;
  double beta2 = 0.999;
  double adam_eps = 1e-8;
  std::uint64_t seed = 0;

  void validate() const;

  friend bool operator==(const TrainConfig&, const TrainConfig&) = default;
};

// Flat JSON object holding every field of both configs.
struct RunConfig {
  BackboneConfig backbone;
  TrainConfig train;

  friend bool operator==(const RunConfig&, const RunConfig&) = default;
};

nlohmann::json to_json(const RunConfig& cfg);
// Unknown keys and ill-typed values raise ConfigError naming the field.
RunConfig run_config_from_json(const nlohmann::json& j);
RunConfig load_run_config(const std::string& path);

}  // namespace promptpix
