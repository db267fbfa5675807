#pragma once

#include "promptpix/backbone.hpp"
#include "promptpix/config.hpp"
#include "promptpix/image.hpp"
#include "promptpix/tensor.hpp"

#include <cstdint>
#include <functional>
#include <map>
#include <stdexcept>
#include <string>
#include <vector>

namespace promptpix {

class TrainingError : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

// Class-balanced BCE on logits. With beta = background fraction,
//   loss = mean_p [ beta * y * softplus(-z) + (1 - beta) * (1 - y) * softplus(z) ].
Tensor bbce_loss(const Tensor& logits, const BinaryMask& mask);

struct AdamState {
  struct Moments {
    Matrix first;
    Matrix second;
  };
  std::map<std::string, Moments> moments;
  long step = 0;
};

// AdamW with bias correction and decoupled weight decay. Only tunable
// parameters are touched; gradients for frozen names are ignored.
void optimizer_step(ModelParams& params, const std::map<std::string, Matrix>& grads, AdamState& state, const TrainConfig& cfg);

// Mean BBCE over `batch` and the batch-averaged gradients of every tunable parameter.
struct BatchGradient {
  double loss = 0;
  std::map<std::string, Matrix> grads;
};
BatchGradient batch_gradient(const ModelParams& params, const std::vector<const Sample*>& batch);

struct TrainResult {
  std::vector<double> epoch_loss;
};

using EpochCallback = std::function<void(int epoch, double mean_loss)>;

// Seeded shuffle every epoch, fixed batch order, one optimizer step per batch.
TrainResult train(ModelParams& params, const std::vector<Sample>& dataset, const TrainConfig& cfg, const EpochCallback& on_epoch = {});

// Ellipse blobs over a flat textured background; the mask is the blob support.
std::vector<Sample> synth_dataset(int n, int height, int width, std::uint64_t seed);

}  // namespace promptpix
