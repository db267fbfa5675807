#include "promptpix/train.hpp"

#include "promptpix/ops.hpp"

#include <algorithm>
#include <cmath>
#include <cstdio>
#include <numbers>
#include <numeric>
#include <random>

namespace promptpix {

namespace {

double softplus(double x) { return std::max(x, 0.0) + std::log1p(std::exp(-std::abs(x))); }
double sigmoid(double x) { return x >= 0 ? 1.0 / (1.0 + std::exp(-x)) : std::exp(x) / (1.0 + std::exp(x)); }

}  // namespace

Tensor bbce_loss(const Tensor& logits, const BinaryMask& mask) {
  if (logits.rows() != mask.height || logits.cols() != mask.width) {
    throw DimensionError("bbce_loss: logits " + logits.shape_str() + " vs mask " + shape_string(mask.height, mask.width));
  }
  const Matrix& z = logits.value();
  const double n = static_cast<double>(z.size());
  const double beta = static_cast<double>(mask.pixels() - mask.foreground()) / n;
  double acc = 0;
  for (Index i = 0; i < z.size(); ++i) {
    const double zi = z.data()[i];
    acc += mask.data[static_cast<std::size_t>(i)] ? beta * softplus(-zi) : (1.0 - beta) * softplus(zi);
  }
  Matrix out(1, 1);
  out(0, 0) = acc / n;
  std::vector<std::uint8_t> y = mask.data;
  return logits.tape().record(std::move(out), {logits}, [logits, y = std::move(y), beta, n](Tape& tape, const Matrix& g, const Matrix&) {
    const Matrix& z = logits.value();
    Matrix dz(z.rows(), z.cols());
    for (Index i = 0; i < z.size(); ++i) {
      const double s = sigmoid(z.data()[i]);
      dz.data()[i] = (y[static_cast<std::size_t>(i)] ? beta * (s - 1.0) : (1.0 - beta) * s) / n;
    }
    tape.accumulate(logits, g(0, 0) * dz);
  });
}

void optimizer_step(ModelParams& params, const std::map<std::string, Matrix>& grads, AdamState& state, const TrainConfig& cfg) {
  ++state.step;
  const double bc1 = 1.0 - std::pow(cfg.beta1, static_cast<double>(state.step));
  const double bc2 = 1.0 - std::pow(cfg.beta2, static_cast<double>(state.step));
  for (const auto& [name, g] : grads) {
    Parameter& p = params.at(name);
    if (!p.tunable) continue;
    if (g.rows() != p.value.rows() || g.cols() != p.value.cols()) throw DimensionError("optimizer_step: gradient shape mismatch for " + name);
    auto [it, fresh] = state.moments.try_emplace(name);
    AdamState::Moments& m = it->second;
    if (fresh) {
      m.first = Matrix::Zero(g.rows(), g.cols());
      m.second = Matrix::Zero(g.rows(), g.cols());
    }
    m.first = cfg.beta1 * m.first + (1.0 - cfg.beta1) * g;
    m.second = cfg.beta2 * m.second + (1.0 - cfg.beta2) * g.cwiseProduct(g);
    p.value *= 1.0 - cfg.learning_rate * cfg.weight_decay;
    p.value.array() -= cfg.learning_rate * (m.first.array() / bc1) / ((m.second.array() / bc2).sqrt() + cfg.adam_eps);
  }
}

BatchGradient batch_gradient(const ModelParams& params, const std::vector<const Sample*>& batch) {
  if (batch.empty()) throw std::invalid_argument("batch_gradient: empty batch");
  BatchGradient out;
  for (const Sample* s : batch) {
    Tape tape;
    const BoundParams bound(tape, params, true);
    const Tensor loss = bbce_loss(forward(bound, params.config, s->image), s->mask);
    if (!std::isfinite(loss.item())) throw TrainingError("non-finite loss on sample " + s->name);
    tape.backward(loss);
    out.loss += loss.item();
    std::map<std::string, Matrix> g = bound.tunable_grads(params);
    if (out.grads.empty()) {
      out.grads = std::move(g);
    } else {
      for (auto& [name, m] : out.grads) m += g.at(name);
    }
  }
  const double inv = 1.0 / static_cast<double>(batch.size());
  out.loss *= inv;
  for (auto& [name, m] : out.grads) m *= inv;
  return out;
}

TrainResult train(ModelParams& params, const std::vector<Sample>& dataset, const TrainConfig& cfg, const EpochCallback& on_epoch) {
  if (dataset.empty()) throw TrainingError("train: empty dataset");
  cfg.validate();
  std::mt19937_64 rng(cfg.seed);
  std::vector<std::size_t> order(dataset.size());
  std::iota(order.begin(), order.end(), std::size_t{0});
  AdamState state;
  TrainResult result;
  for (int epoch = 0; epoch < cfg.max_epochs; ++epoch) {
    std::shuffle(order.begin(), order.end(), rng);
    double total = 0;
    for (std::size_t start = 0; start < order.size(); start += static_cast<std::size_t>(cfg.batch_size)) {
      const std::size_t stop = std::min(order.size(), start + static_cast<std::size_t>(cfg.batch_size));
      std::vector<const Sample*> batch;
      for (std::size_t i = start; i < stop; ++i) batch.push_back(&dataset[order[i]]);
      BatchGradient bg;
      try {
        bg = batch_gradient(params, batch);
      } catch (const TrainingError& e) {
        throw TrainingError("epoch " + std::to_string(epoch + 1) + ", step " + std::to_string(state.step + 1) + ": " + e.what());
      }
      total += bg.loss * static_cast<double>(batch.size());
      optimizer_step(params, bg.grads, state, cfg);
    }
    const double mean_loss = total / static_cast<double>(dataset.size());
    if (!std::isfinite(mean_loss)) throw TrainingError("epoch " + std::to_string(epoch + 1) + ": non-finite mean loss");
    result.epoch_loss.push_back(mean_loss);
    if (on_epoch) on_epoch(epoch + 1, mean_loss);
  }
  return result;
}

std::vector<Sample> synth_dataset(int n, int height, int width, std::uint64_t seed) {
  if (n < 1) throw std::invalid_argument("synth_dataset: need at least one sample");
  if (height < 4 || width < 4) throw std::invalid_argument("synth_dataset: image too small");
  std::mt19937_64 rng(seed);
  std::uniform_real_distribution<double> unit(0.0, 1.0);
  auto uniform = [&](double lo, double hi) { return lo + (hi - lo) * unit(rng); };
  std::normal_distribution<double> noise(0.0, 0.05);

  std::vector<Sample> out;
  out.reserve(static_cast<std::size_t>(n));
  while (static_cast<int>(out.size()) < n) {
    const double bg = uniform(0.1, 0.9);
    const double gap = uniform(0.3, 0.45);
    double fg = unit(rng) < 0.5 ? bg - gap : bg + gap;
    if (fg < 0.05 || fg > 0.95) fg = bg < 0.5 ? bg + gap : bg - gap;
    const double tint[3] = {uniform(-0.05, 0.05), uniform(-0.05, 0.05), uniform(-0.05, 0.05)};

    BinaryMask mask(height, width);
    const int blobs = 1 + static_cast<int>(unit(rng) * 3.0);
    for (int b = 0; b < blobs; ++b) {
      const double cy = uniform(0.15, 0.85) * height, cx = uniform(0.15, 0.85) * width;
      const double ry = uniform(0.1, 0.3) * height, rx = uniform(0.1, 0.3) * width;
      const double angle = uniform(0.0, std::numbers::pi);
      const double ca = std::cos(angle), sa = std::sin(angle);
      for (int r = 0; r < height; ++r) {
        for (int c = 0; c < width; ++c) {
          const double dy = r + 0.5 - cy, dx = c + 0.5 - cx;
          const double u = (dx * ca + dy * sa) / rx, v = (-dx * sa + dy * ca) / ry;
          if (u * u + v * v <= 1.0) mask.at(r, c) = 1;
        }
      }
    }
    const double frac = static_cast<double>(mask.foreground()) / static_cast<double>(mask.pixels());

    ImageRGB img(height, width);
    double sum_fg = 0, sum_bg = 0;
    for (std::size_t i = 0; i < mask.pixels(); ++i) {
      const double base = (mask.data[i] ? fg : bg) + noise(rng);
      double mean = 0;
      for (int ch = 0; ch < 3; ++ch) {
        const auto v = static_cast<std::uint8_t>(std::lround(255.0 * std::clamp(base + tint[ch], 0.0, 1.0)));
        img.data[3 * i + static_cast<std::size_t>(ch)] = v;
        mean += v / (3.0 * 255.0);
      }
      (mask.data[i] ? sum_fg : sum_bg) += mean;
    }
    if (frac < 0.05 || frac > 0.6) continue;
    const double fg_mean = sum_fg / static_cast<double>(mask.foreground());
    const double bg_mean = sum_bg / static_cast<double>(mask.pixels() - mask.foreground());
    if (std::abs(fg_mean - bg_mean) < 0.2) continue;

    char name[32];
    std::snprintf(name, sizeof name, "synth_%04d", static_cast<int>(out.size()));
    out.push_back(Sample{name, std::move(img), std::move(mask)});
  }
  return out;
}

}  // namespace promptpix
