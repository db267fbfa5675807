#include "promptpix/config.hpp"

#include <algorithm>
#include <fstream>
#include <functional>
#include <map>

namespace promptpix {

using nlohmann::json;

namespace {
struct FieldError : std::runtime_error {
  using std::runtime_error::runtime_error;
};
}  // namespace

std::string to_string(PromptVariant v) {
  switch (v) {
    case PromptVariant::DecoderOnly: return "decoder_only";
    case PromptVariant::SharedTune: return "shared_tune";
    case PromptVariant::PerBlockUp: return "per_block_up";
    case PromptVariant::NoSuperpixel: return "no_superpixel";
    case PromptVariant::NoAttention: return "no_attention";
    case PromptVariant::Full: return "full";
  }
  return "unknown";
}

PromptVariant parse_variant(const std::string& name) {
  for (PromptVariant v : kAllVariants) {
    if (to_string(v) == name) return v;
  }
  throw ConfigError("ablation_variant: unknown variant '" + name + "'");
}

VariantTraits traits(PromptVariant v) {
  switch (v) {
    case PromptVariant::DecoderOnly: return {};
    case PromptVariant::SharedTune: return {true, false, false, true, false};
    case PromptVariant::PerBlockUp: return {true, false, false, false, true};
    case PromptVariant::NoSuperpixel: return {true, false, true, false, false};
    case PromptVariant::NoAttention: return {true, true, false, false, false};
    case PromptVariant::Full: return {true, true, true, false, false};
  }
  return {};
}

void BackboneConfig::validate() const {
  for (int s = 0; s < kStages; ++s) {
    const std::string tag = " (stage " + std::to_string(s + 1) + ")";
    if (stage_depths[s] < 1) throw ConfigError("stage_depths: must be positive" + tag);
    if (stage_widths[s] < 1) throw ConfigError("stage_widths: must be positive" + tag);
    if (patch_strides[s] < 1) throw ConfigError("patch_strides: must be positive" + tag);
    if (stage_heads[s] < 1 || stage_widths[s] % stage_heads[s] != 0) {
      throw ConfigError("stage_heads: must divide the stage width" + tag);
    }
    if (gamma >= 1 && stage_widths[s] % gamma != 0) {
      throw ConfigError("gamma: " + std::to_string(gamma) + " does not divide stage width " + std::to_string(stage_widths[s]) + tag);
    }
  }
  if (gamma < 1) throw ConfigError("gamma: must be a positive integer");
  if (mlp_ratio < 1) throw ConfigError("mlp_ratio: must be positive");
  if (decoder_width < 1) throw ConfigError("decoder_width: must be positive");
  if (attention_dim < 1) throw ConfigError("attention_dim: must be positive");
  for (int s : tuned_stages) {
    if (s < 1 || s > kStages) throw ConfigError("tuned_stages: stage " + std::to_string(s) + " outside 1..4");
  }
  std::vector<int> sorted = tuned_stages;
  std::sort(sorted.begin(), sorted.end());
  if (std::adjacent_find(sorted.begin(), sorted.end()) != sorted.end()) throw ConfigError("tuned_stages: duplicate stage");
  if (superpixels < 1 || superpixels > 256) throw ConfigError("superpixels: must lie in 1..256");
  if (superpixel_iters < 1) throw ConfigError("superpixel_iters: must be positive");
  if (!(superpixel_temp > 0)) throw ConfigError("superpixel_temp: must be positive");
  if (!(pos_scale > 0)) throw ConfigError("pos_scale: must be positive");
}

void BackboneConfig::validate_image(int height, int width) const {
  const int total = cumulative_stride(kStages);
  if (height < 1 || width < 1 || height % total != 0 || width % total != 0) {
    throw ConfigError("image " + std::to_string(height) + "x" + std::to_string(width) +
                      " is not divisible by the cumulative stride " + std::to_string(total));
  }
}

int BackboneConfig::cumulative_stride(int stage) const {
  int p = 1;
  for (int s = 0; s < stage; ++s) p *= patch_strides[s];
  return p;
}

int BackboneConfig::prompt_width(int stage) const { return stage_widths[stage - 1] / gamma; }

bool BackboneConfig::stage_tuned(int stage) const {
  return traits(ablation_variant).prompts && std::find(tuned_stages.begin(), tuned_stages.end(), stage) != tuned_stages.end();
}

int BackboneConfig::kernel_size(int stage) const {
  const int s = patch_strides[stage - 1];
  return s == 1 ? 1 : 2 * s - 1;
}

void TrainConfig::validate() const {
  if (!(learning_rate >= 0)) throw ConfigError("learning_rate: must be non-negative");
  if (batch_size < 1) throw ConfigError("batch_size: must be at least 1");
  if (max_epochs < 0) throw ConfigError("max_epochs: must be non-negative");
  if (!(weight_decay >= 0)) throw ConfigError("weight_decay: must be non-negative");
  if (!(beta1 >= 0 && beta1 < 1)) throw ConfigError("beta1: must lie in [0, 1)");
  if (!(beta2 >= 0 && beta2 < 1)) throw ConfigError("beta2: must lie in [0, 1)");
  if (!(adam_eps > 0)) throw ConfigError("adam_eps: must be positive");
}

json to_json(const RunConfig& cfg) {
  const BackboneConfig& b = cfg.backbone;
  const TrainConfig& t = cfg.train;
  return json{
      {"stage_depths", b.stage_depths},
      {"stage_widths", b.stage_widths},
      {"patch_strides", b.patch_strides},
      {"stage_heads", b.stage_heads},
      {"mlp_ratio", b.mlp_ratio},
      {"decoder_width", b.decoder_width},
      {"attention_dim", b.attention_dim},
      {"tuned_stages", b.tuned_stages},
      {"gamma", b.gamma},
      {"ablation_variant", to_string(b.ablation_variant)},
      {"superpixels", b.superpixels},
      {"superpixel_iters", b.superpixel_iters},
      {"superpixel_temp", b.superpixel_temp},
      {"pos_scale", b.pos_scale},
      {"seed", b.seed},
      {"learning_rate", t.learning_rate},
      {"batch_size", t.batch_size},
      {"max_epochs", t.max_epochs},
      {"weight_decay", t.weight_decay},
      {"beta1", t.beta1},
      {"beta2", t.beta2},
      {"adam_eps", t.adam_eps},
  };
}

RunConfig run_config_from_json(const json& j) {
  if (!j.is_object()) throw ConfigError("config: top level must be a JSON object");
  RunConfig cfg;
  BackboneConfig& b = cfg.backbone;
  TrainConfig& t = cfg.train;
  using Setter = std::function<void(const json&)>;
  auto number = [](double& dst) -> Setter {
    return [&dst](const json& v) {
      if (!v.is_number()) throw FieldError("expected a number");
      dst = v.get<double>();
    };
  };
  auto integer = [](int& dst) -> Setter {
    return [&dst](const json& v) {
      if (!v.is_number_integer()) throw FieldError("expected an integer");
      dst = v.get<int>();
    };
  };
  auto quad = [](std::array<int, kStages>& dst) -> Setter {
    return [&dst](const json& v) {
      if (!v.is_array() || v.size() != kStages) throw FieldError("expected an array of 4 integers");
      for (std::size_t i = 0; i < kStages; ++i) {
        if (!v[i].is_number_integer()) throw FieldError("expected an array of 4 integers");
        dst[i] = v[i].get<int>();
      }
    };
  };
  const std::map<std::string, Setter> fields = {
      {"stage_depths", quad(b.stage_depths)},
      {"stage_widths", quad(b.stage_widths)},
      {"patch_strides", quad(b.patch_strides)},
      {"stage_heads", quad(b.stage_heads)},
      {"mlp_ratio", integer(b.mlp_ratio)},
      {"decoder_width", integer(b.decoder_width)},
      {"attention_dim", integer(b.attention_dim)},
      {"tuned_stages",
       [&b](const json& v) {
         if (!v.is_array()) throw FieldError("expected an array of stage numbers");
         b.tuned_stages.clear();
         for (const json& s : v) {
           if (!s.is_number_integer()) throw FieldError("expected an array of stage numbers");
           b.tuned_stages.push_back(s.get<int>());
         }
       }},
      {"gamma", integer(b.gamma)},
      {"ablation_variant",
       [&b](const json& v) {
         if (!v.is_string()) throw FieldError("expected a variant name");
         b.ablation_variant = parse_variant(v.get<std::string>());
       }},
      {"superpixels", integer(b.superpixels)},
      {"superpixel_iters", integer(b.superpixel_iters)},
      {"superpixel_temp", number(b.superpixel_temp)},
      {"pos_scale", number(b.pos_scale)},
      {"seed",
       [&b, &t](const json& v) {
         if (!v.is_number_unsigned() && !(v.is_number_integer() && v.get<long long>() >= 0)) {
           throw FieldError("expected a non-negative integer");
         }
         b.seed = v.get<std::uint64_t>();
         t.seed = b.seed;
       }},
      {"learning_rate", number(t.learning_rate)},
      {"batch_size", integer(t.batch_size)},
      {"max_epochs", integer(t.max_epochs)},
      {"weight_decay", number(t.weight_decay)},
      {"beta1", number(t.beta1)},
      {"beta2", number(t.beta2)},
      {"adam_eps", number(t.adam_eps)},
  };
  for (const auto& [key, value] : j.items()) {
    auto it = fields.find(key);
    if (it == fields.end()) throw ConfigError(key + ": unknown config field");
    try {
      it->second(value);
    } catch (const FieldError& e) {
      throw ConfigError(key + ": " + e.what());
    } catch (const json::exception& e) {
      throw ConfigError(key + ": " + e.what());
    }
  }
  b.validate();
  t.validate();
  return cfg;
}

RunConfig load_run_config(const std::string& path) {
  std::ifstream in(path);
  if (!in) throw std::runtime_error("cannot open config: " + path);
  json j;
  try {
    in >> j;
  } catch (const json::parse_error& e) {
    throw ConfigError(std::string("config: malformed JSON: ") + e.what());
  }
  return run_config_from_json(j);
}

}  // namespace promptpix
