#include "promptpix/backbone.hpp"

#include "promptpix/ops.hpp"
#include "promptpix/superpixel.hpp"

#include <algorithm>
#include <cmath>
#include <map>
#include <optional>
#include <random>
#include <stdexcept>
#include <tuple>

namespace promptpix {

namespace {

std::string stage_prefix(int s) { return "stage" + std::to_string(s) + "."; }

class Initializer {
 public:
  Initializer(std::uint64_t seed, std::uint64_t stream) {
    std::seed_seq seq{static_cast<std::uint32_t>(seed), static_cast<std::uint32_t>(seed >> 32),
                      static_cast<std::uint32_t>(stream)};
    rng_.seed(seq);
  }

  // Uniform in +-1/sqrt(fan_in), fan_in = rows.
  Matrix uniform(Index rows, Index cols) {
    const double bound = 1.0 / std::sqrt(static_cast<double>(rows));
    std::uniform_real_distribution<double> dist(-bound, bound);
    Matrix m(rows, cols);
    for (Index i = 0; i < m.size(); ++i) m.data()[i] = dist(rng_);
    return m;
  }

  Matrix uniform_bias(Index fan_in, Index cols) {
    const double bound = 1.0 / std::sqrt(static_cast<double>(fan_in));
    std::uniform_real_distribution<double> dist(-bound, bound);
    Matrix m(1, cols);
    for (Index i = 0; i < m.size(); ++i) m.data()[i] = dist(rng_);
    return m;
  }

 private:
  std::mt19937_64 rng_;
};

struct ParamSink {
  ModelParams& model;
  bool tunable;

  void add(const std::string& name, Matrix value) const {
    if (!model.tensors.emplace(name, Parameter{std::move(value), tunable}).second) {
      throw std::logic_error("duplicate parameter " + name);
    }
  }
};

void add_norm(const ParamSink& sink, const std::string& name, Index width) {
  sink.add(name + ".gamma", Matrix::Ones(1, width));
  sink.add(name + ".beta", Matrix::Zero(1, width));
}

void add_frozen_linear(const ParamSink& sink, Initializer& init, const std::string& name, Index in, Index out) {
  sink.add(name + ".weight", init.uniform(in, out));
  sink.add(name + ".bias", init.uniform_bias(in, out));
}

void add_linear(const ParamSink& sink, Initializer& init, const std::string& name, Index in, Index out) {
  sink.add(name + ".weight", init.uniform(in, out));
  sink.add(name + ".bias", Matrix::Zero(1, out));
}

void add_zero_linear(const ParamSink& sink, const std::string& name, Index in, Index out) {
  sink.add(name + ".weight", Matrix::Zero(in, out));
  sink.add(name + ".bias", Matrix::Zero(1, out));
}

const Matrix& cached_bilinear(int in_h, int in_w, int out_h, int out_w) {
  thread_local std::map<std::tuple<int, int, int, int>, Matrix> cache;
  auto key = std::tuple{in_h, in_w, out_h, out_w};
  auto it = cache.find(key);
  if (it == cache.end()) it = cache.emplace(key, bilinear_matrix(in_h, in_w, out_h, out_w)).first;
  return it->second;
}

LinearParams bound_linear(const BoundParams& p, const std::string& name) {
  return {p[name + ".weight"], p[name + ".bias"]};
}

Tensor norm(const BoundParams& p, const std::string& name, const Tensor& x) {
  return layer_norm(x, p[name + ".gamma"], p[name + ".beta"]);
}

Tensor self_attention(const BoundParams& p, const std::string& name, const Tensor& x, int heads) {
  const Tensor q = linear(x, p[name + ".query.weight"], p[name + ".query.bias"]);
  const Tensor k = linear(x, p[name + ".key.weight"], p[name + ".key.bias"]);
  const Tensor v = linear(x, p[name + ".value.weight"], p[name + ".value.bias"]);
  const Index dh = x.cols() / heads;
  const double scale = 1.0 / std::sqrt(static_cast<double>(dh));
  std::vector<Tensor> outs;
  outs.reserve(static_cast<std::size_t>(heads));
  for (int h = 0; h < heads; ++h) {
    const Tensor qh = heads == 1 ? q : slice_cols(q, h * dh, dh);
    const Tensor kh = heads == 1 ? k : slice_cols(k, h * dh, dh);
    const Tensor vh = heads == 1 ? v : slice_cols(v, h * dh, dh);
    outs.push_back(matmul(softmax_rows(scale * matmul(qh, transpose(kh))), vh));
  }
  const Tensor merged = heads == 1 ? outs.front() : concat_cols(outs);
  return linear(merged, p[name + ".proj.weight"], p[name + ".proj.bias"]);
}

Tensor transformer_block(const BoundParams& p, const std::string& name, const Tensor& x, int heads) {
  const Tensor a = x + self_attention(p, name + ".attn", norm(p, name + ".norm1", x), heads);
  const Tensor h = gelu(linear(norm(p, name + ".norm2", a), p[name + ".mlp.fc1.weight"], p[name + ".mlp.fc1.bias"]));
  return a + linear(h, p[name + ".mlp.fc2.weight"], p[name + ".mlp.fc2.bias"]);
}

AdapterParams bound_adapter(const BoundParams& p, const BackboneConfig& cfg, int s) {
  const std::string pre = stage_prefix(s) + "prompt.";
  const VariantTraits tr = traits(cfg.ablation_variant);
  const int depth = cfg.stage_depths[s - 1];
  AdapterParams a;
  a.blocks = depth;
  if (tr.shared_tune) {
    a.tune.push_back(bound_linear(p, pre + "tune"));
  } else {
    for (int b = 0; b < depth; ++b) a.tune.push_back(bound_linear(p, pre + "tune" + std::to_string(b)));
  }
  if (tr.per_block_up) {
    for (int b = 0; b < depth; ++b) a.up.push_back(bound_linear(p, pre + "up" + std::to_string(b)));
  } else {
    a.up.push_back(bound_linear(p, pre + "up"));
  }
  if (tr.attention) {
    a.attention = AttentionParams{p[pre + "attn.query"], p[pre + "attn.key"], p[pre + "attn.value"], bound_linear(p, pre + "attn.out")};
  }
  return a;
}

}  // namespace

const Parameter& ModelParams::at(const std::string& name) const {
  auto it = tensors.find(name);
  if (it == tensors.end()) throw std::out_of_range("no parameter named " + name);
  return it->second;
}

Parameter& ModelParams::at(const std::string& name) {
  auto it = tensors.find(name);
  if (it == tensors.end()) throw std::out_of_range("no parameter named " + name);
  return it->second;
}

ModelParams build_model(const BackboneConfig& cfg) {
  cfg.validate();
  ModelParams model;
  model.config = cfg;
  const ParamSink frozen{model, false};
  const ParamSink tunable{model, true};

  Initializer backbone_init(cfg.seed, 1);
  int in_ch = 3;
  for (int s = 1; s <= kStages; ++s) {
    const std::string pre = stage_prefix(s);
    const int width = cfg.stage_widths[s - 1];
    const int k = cfg.kernel_size(s);
    add_frozen_linear(frozen, backbone_init, pre + "patch_embed", static_cast<Index>(k) * k * in_ch, width);
    add_norm(frozen, pre + "patch_norm", width);
    for (int b = 0; b < cfg.stage_depths[s - 1]; ++b) {
      const std::string blk = pre + "block" + std::to_string(b);
      add_norm(frozen, blk + ".norm1", width);
      for (const char* proj : {"query", "key", "value", "proj"}) {
        add_frozen_linear(frozen, backbone_init, blk + ".attn." + proj, width, width);
      }
      add_norm(frozen, blk + ".norm2", width);
      add_frozen_linear(frozen, backbone_init, blk + ".mlp.fc1", width, width * cfg.mlp_ratio);
      add_frozen_linear(frozen, backbone_init, blk + ".mlp.fc2", width * cfg.mlp_ratio, width);
    }
    add_norm(frozen, pre + "norm", width);
    in_ch = width;
  }

  Initializer decoder_init(cfg.seed, 2);
  const int e = cfg.decoder_width;
  for (int s = 1; s <= kStages; ++s) {
    add_linear(tunable, decoder_init, "decoder.linear" + std::to_string(s), cfg.stage_widths[s - 1], e);
  }
  add_linear(tunable, decoder_init, "decoder.fuse", kStages * e, e);
  add_linear(tunable, decoder_init, "decoder.pred", e, 1);

  const VariantTraits tr = traits(cfg.ablation_variant);
  for (int s = 1; s <= kStages; ++s) {
    if (!cfg.stage_tuned(s)) continue;
    Initializer init(cfg.seed, 10 + static_cast<std::uint64_t>(s));
    const std::string pre = stage_prefix(s) + "prompt.";
    const int width = cfg.stage_widths[s - 1];
    const int c = prompt_width(width, cfg.gamma);
    const int depth = cfg.stage_depths[s - 1];
    add_linear(tunable, init, pre + "embed", width, c);
    if (tr.superpixel) add_linear(tunable, init, pre + "superpixel", cfg.stage_widths[0], c);
    if (tr.shared_tune) {
      add_linear(tunable, init, pre + "tune", c, c);
    } else {
      for (int b = 0; b < depth; ++b) add_linear(tunable, init, pre + "tune" + std::to_string(b), c, c);
    }
    if (tr.per_block_up) {
      for (int b = 0; b < depth; ++b) add_zero_linear(tunable, pre + "up" + std::to_string(b), c, width);
    } else {
      add_zero_linear(tunable, pre + "up", c, width);
    }
    if (tr.attention) {
      const int patch = cfg.cumulative_stride(s);
      const Index token_dim = 3 * static_cast<Index>(patch) * patch;
      tunable.add(pre + "attn.query", init.uniform(token_dim, cfg.attention_dim));
      tunable.add(pre + "attn.key", init.uniform(token_dim, cfg.attention_dim));
      tunable.add(pre + "attn.value", init.uniform(token_dim, cfg.attention_dim));
      add_zero_linear(tunable, pre + "attn.out", cfg.attention_dim, width);
    }
  }
  return model;
}

int prompt_stage(const std::string& name) {
  if (name.rfind("stage", 0) != 0 || name.size() < 14) return 0;
  if (name.compare(6, 8, ".prompt.") != 0) return 0;
  const int s = name[5] - '0';
  return s >= 1 && s <= kStages ? s : 0;
}

bool is_decoder_param(const std::string& name) { return name.rfind("decoder.", 0) == 0; }

ParamPartition partition(const ModelParams& params, const std::vector<int>& tuned_stages) {
  for (int s : tuned_stages) {
    if (s < 1 || s > kStages) throw ConfigError("tuned_stages: stage " + std::to_string(s) + " outside 1..4");
  }
  ParamPartition out;
  for (const auto& [name, p] : params.tensors) {
    const int s = prompt_stage(name);
    const bool tuned = is_decoder_param(name) ||
                       (s != 0 && std::find(tuned_stages.begin(), tuned_stages.end(), s) != tuned_stages.end());
    (tuned ? out.tunable : out.frozen).push_back(name);
  }
  return out;
}

std::size_t count_params(const std::vector<Matrix>& tensors) {
  std::size_t n = 0;
  for (const Matrix& m : tensors) n += static_cast<std::size_t>(m.size());
  return n;
}

std::size_t count_params(const ModelParams& params, const std::vector<std::string>& names) {
  std::size_t n = 0;
  for (const std::string& name : names) n += static_cast<std::size_t>(params.at(name).value.size());
  return n;
}

std::size_t count_tunable(const ModelParams& params) {
  std::size_t n = 0;
  for (const auto& [name, p] : params.tensors) {
    if (p.tunable) n += static_cast<std::size_t>(p.value.size());
  }
  return n;
}

BoundParams::BoundParams(Tape& tape, const ModelParams& params, bool track_tunable) : tape_(&tape) {
  for (const auto& [name, p] : params.tensors) tensors_.emplace(name, tape.leaf(p.value, track_tunable && p.tunable));
}

const Tensor& BoundParams::operator[](const std::string& name) const {
  auto it = tensors_.find(name);
  if (it == tensors_.end()) throw std::out_of_range("parameter not bound: " + name);
  return it->second;
}

void BoundParams::replace(const std::string& name, const Tensor& t) {
  auto it = tensors_.find(name);
  if (it == tensors_.end()) throw std::out_of_range("parameter not bound: " + name);
  if (t.rows() != it->second.rows() || t.cols() != it->second.cols()) {
    throw DimensionError("replace " + name + ": " + t.shape_str() + " vs " + it->second.shape_str());
  }
  it->second = t;
}

std::map<std::string, Matrix> BoundParams::tunable_grads(const ModelParams& params) const {
  std::map<std::string, Matrix> grads;
  for (const auto& [name, p] : params.tensors) {
    if (!p.tunable) continue;
    const Tensor& t = (*this)[name];
    grads.emplace(name, t.requires_grad() ? t.grad() : Matrix::Zero(p.value.rows(), p.value.cols()));
  }
  return grads;
}

Matrix network_input(const ImageRGB& img) { return (img.to_unit().array() - 0.5) / 0.25; }

Tensor forward(const BoundParams& p, const BackboneConfig& cfg, const ImageRGB& img, const ForwardOptions& opts,
               ForwardTrace* trace) {
  cfg.validate_image(img.height, img.width);
  Tape& tape = p.tape();
  const Tensor input = tape.constant(network_input(img));
  const bool prompting = opts.use_prompts && traits(cfg.ablation_variant).prompts;
  const VariantTraits tr = traits(cfg.ablation_variant);

  Tensor tokens = input;
  int grid_h = img.height, grid_w = img.width;
  std::vector<Tensor> stage_out;
  std::vector<std::pair<int, int>> grids;
  std::optional<Tensor> xsp_raw;

  for (int s = 1; s <= kStages; ++s) {
    const std::string pre = stage_prefix(s);
    const int stride = cfg.patch_strides[s - 1];
    const int k = cfg.kernel_size(s);
    const Tensor patches = im2col(tokens, grid_h, grid_w, k, stride, (k - 1) / 2);
    grid_h /= stride;
    grid_w /= stride;
    Tensor x = norm(p, pre + "patch_norm", linear(patches, p[pre + "patch_embed.weight"], p[pre + "patch_embed.bias"]));
    if (patches.rows() != static_cast<Index>(grid_h) * grid_w) throw DimensionError("patch embedding grid mismatch");

    if (s == 1 && prompting && tr.superpixel) {
      // Superpixel features: stage-1 embeddings spread back to full
      // resolution, pooled through the soft-SLIC association.
      Tape& t = tape;
      const PixelFeatures feats = build_xylab(img, cfg.pos_scale);
      const SoftSlicResult slic = iterate(t.constant(feats.matrix), img.height, img.width,
                                          std::min<int>(cfg.superpixels, static_cast<int>(img.pixels())),
                                          cfg.superpixel_iters, cfg.superpixel_temp);
      const Tensor full = matmul(t.constant(cached_bilinear(grid_h, grid_w, img.height, img.width)), x);
      xsp_raw = superpixelate(slic.assoc, full);
    }

    std::optional<PromptBundle> bundle;
    if (prompting && cfg.stage_tuned(s)) {
      const std::string pp = pre + "prompt.";
      const IEGPParams iegp(bound_linear(p, pp + "embed"), cfg.gamma, cfg.stage_widths[s - 1]);
      const Tensor x_pe = iegp_project(x, iegp);
      std::optional<Tensor> x_sp;
      if (tr.superpixel) x_sp = project_xsp(*xsp_raw, img.height, img.width, grid_h, grid_w, bound_linear(p, pp + "superpixel"));
      std::optional<Tensor> raw_tokens;
      if (tr.attention) {
        const int patch = cfg.cumulative_stride(s);
        raw_tokens = im2col(input, img.height, img.width, patch, patch, 0);
      }
      bundle = make_prompts(x_pe, x_sp, raw_tokens, bound_adapter(p, cfg, s));
    }

    for (int b = 0; b < cfg.stage_depths[s - 1]; ++b) {
      if (bundle) {
        const Tensor& pk = bundle->P_k.at(static_cast<std::size_t>(b));
        if (pk.rows() != x.rows() || pk.cols() != x.cols()) {
          throw DimensionError("prompt " + pk.shape_str() + " does not match stage " + std::to_string(s) + " tokens " + x.shape_str());
        }
        x = x + pk;
      }
      x = transformer_block(p, pre + "block" + std::to_string(b), x, cfg.stage_heads[s - 1]);
    }
    x = norm(p, pre + "norm", x);
    stage_out.push_back(x);
    grids.emplace_back(grid_h, grid_w);
    if (bundle && trace) trace->prompts.push_back(std::move(*bundle));
    tokens = x;
  }

  const auto [h1, w1] = grids.front();
  std::vector<Tensor> fused;
  for (int s = 1; s <= kStages; ++s) {
    const auto [gh, gw] = grids[static_cast<std::size_t>(s - 1)];
    Tensor f = linear(stage_out[static_cast<std::size_t>(s - 1)], p["decoder.linear" + std::to_string(s) + ".weight"],
                      p["decoder.linear" + std::to_string(s) + ".bias"]);
    if (gh != h1 || gw != w1) f = matmul(tape.constant(cached_bilinear(gh, gw, h1, w1)), f);
    fused.push_back(f);
  }
  const Tensor hidden = gelu(linear(concat_cols(fused), p["decoder.fuse.weight"], p["decoder.fuse.bias"]));
  const Tensor coarse = linear(hidden, p["decoder.pred.weight"], p["decoder.pred.bias"]);
  const Tensor full = matmul(tape.constant(cached_bilinear(h1, w1, img.height, img.width)), coarse);
  if (trace) trace->stage_grids = grids;
  return reshape(full, img.height, img.width);
}

Matrix predict(const ModelParams& params, const ImageRGB& img, const ForwardOptions& opts) {
  Tape tape;
  const BoundParams bound(tape, params, false);
  const Matrix logits = forward(bound, params.config, img, opts).value();
  return logits.unaryExpr([](double z) { return 1.0 / (1.0 + std::exp(-z)); });
}

}  // namespace promptpix
