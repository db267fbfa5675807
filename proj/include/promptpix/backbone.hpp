#pragma once

// Four-stage hierarchical transformer (overlapped patch embedding,
// pre-norm transformer blocks, all-MLP decoder) whose backbone weights are
// frozen. Prompts produced by the prompting module are added to each
// block's input tokens in the tuned stages.

#include "promptpix/config.hpp"
#include "promptpix/image.hpp"
#include "promptpix/prompting.hpp"
#include "promptpix/tensor.hpp"

#include <cstddef>
#include <map>
#include <string>
#include <utility>
#include <vector>

namespace promptpix {

struct Parameter {
  Matrix value;
  bool tunable = false;
};

struct ModelParams {
  BackboneConfig config;
  std::map<std::string, Parameter> tensors;

  const Parameter& at(const std::string& name) const;
  Parameter& at(const std::string& name);
  bool contains(const std::string& name) const { return tensors.count(name) != 0; }
};

ModelParams build_model(const BackboneConfig& cfg);

struct ParamPartition {
  std::vector<std::string> frozen;
  std::vector<std::string> tunable;
};

// Decoder and the prompt parameters of the listed stages are tunable,
// everything else is frozen.
ParamPartition partition(const ModelParams& params, const std::vector<int>& tuned_stages);

std::size_t count_params(const std::vector<Matrix>& tensors);
std::size_t count_params(const ModelParams& params, const std::vector<std::string>& names);
std::size_t count_tunable(const ModelParams& params);

// Stage number (1..4) that owns a prompt parameter, 0 for anything else.
int prompt_stage(const std::string& name);
bool is_decoder_param(const std::string& name);

// Parameters placed on a tape for one evaluation.
class BoundParams {
 public:
  BoundParams(Tape& tape, const ModelParams& params, bool track_tunable);

  const Tensor& operator[](const std::string& name) const;
  bool contains(const std::string& name) const { return tensors_.count(name) != 0; }
  const std::map<std::string, Tensor>& tensors() const { return tensors_; }
  Tape& tape() const { return *tape_; }
  // Swaps in another tensor of the same shape, e.g. a probe variable.
  void replace(const std::string& name, const Tensor& t);

  // Gradients of every tunable parameter, zero where none arrived.
  std::map<std::string, Matrix> tunable_grads(const ModelParams& params) const;

 private:
  Tape* tape_;
  std::map<std::string, Tensor> tensors_;
};

struct ForwardOptions {
  bool use_prompts = true;
};

struct ForwardTrace {
  std::vector<std::pair<int, int>> stage_grids;
  std::vector<PromptBundle> prompts;  // one per tuned stage, in stage order
};

// Logits of shape height x width.
Tensor forward(const BoundParams& params, const BackboneConfig& cfg, const ImageRGB& img, const ForwardOptions& opts = {},
               ForwardTrace* trace = nullptr);

// Sigmoid probability map, height x width.
Matrix predict(const ModelParams& params, const ImageRGB& img, const ForwardOptions& opts = {});

// Image to normalized n x 3 network input.
Matrix network_input(const ImageRGB& img);

}  // namespace promptpix
