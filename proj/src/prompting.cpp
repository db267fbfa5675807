#include "promptpix/prompting.hpp"

#include "promptpix/ops.hpp"

#include <algorithm>
#include <cmath>
#include <stdexcept>
#include <tuple>

namespace promptpix {

int prompt_width(int c_seg, int gamma) {
  if (gamma < 1 || c_seg < 1 || c_seg % gamma != 0) {
    throw ConfigError("gamma: " + std::to_string(gamma) + " does not divide embedding width " + std::to_string(c_seg));
  }
  return c_seg / gamma;
}

IEGPParams::IEGPParams(LinearParams p, int g, int c) : proj(std::move(p)), gamma(g), c_seg(c) {
  const int width = prompt_width(c_seg, gamma);
  if (proj.weight.rows() != c_seg || proj.weight.cols() != width || proj.bias.rows() != 1 || proj.bias.cols() != width) {
    throw DimensionError("IEGP projection must be " + shape_string(c_seg, width) + ", got " + proj.weight.shape_str());
  }
}

Matrix avg_pool_matrix(int height, int width, int grid_h, int grid_w) {
  if (grid_h < 1 || grid_w < 1 || height % grid_h != 0 || width % grid_w != 0) {
    throw DimensionError("avg_pool: " + shape_string(height, width) + " does not tile onto " + shape_string(grid_h, grid_w));
  }
  const int ph = height / grid_h, pw = width / grid_w;
  const double w = 1.0 / (ph * pw);
  Matrix pool = Matrix::Zero(static_cast<Index>(grid_h) * grid_w, static_cast<Index>(height) * width);
  for (int r = 0; r < height; ++r) {
    for (int c = 0; c < width; ++c) pool((r / ph) * grid_w + c / pw, static_cast<Index>(r) * width + c) = w;
  }
  return pool;
}

Matrix bilinear_matrix(int in_h, int in_w, int out_h, int out_w) {
  Matrix m = Matrix::Zero(static_cast<Index>(out_h) * out_w, static_cast<Index>(in_h) * in_w);
  auto taps = [](int out_i, int in_n, int out_n) {
    const double src = std::max(0.0, (out_i + 0.5) * in_n / out_n - 0.5);
    const int i0 = std::min(static_cast<int>(src), in_n - 1);
    const int i1 = std::min(i0 + 1, in_n - 1);
    const double f = src - i0;
    return std::tuple{i0, i1, f};
  };
  for (int y = 0; y < out_h; ++y) {
    const auto [y0, y1, fy] = taps(y, in_h, out_h);
    for (int x = 0; x < out_w; ++x) {
      const auto [x0, x1, fx] = taps(x, in_w, out_w);
      const Index row = static_cast<Index>(y) * out_w + x;
      m(row, y0 * in_w + x0) += (1 - fy) * (1 - fx);
      m(row, y0 * in_w + x1) += (1 - fy) * fx;
      m(row, y1 * in_w + x0) += fy * (1 - fx);
      m(row, y1 * in_w + x1) += fy * fx;
    }
  }
  return m;
}

Tensor iegp_project(const Tensor& frozen_patch_embed, const IEGPParams& params) {
  if (frozen_patch_embed.cols() != params.c_seg) {
    throw DimensionError("iegp_project: embedding " + frozen_patch_embed.shape_str() + " is not " + std::to_string(params.c_seg) + " wide");
  }
  return linear(frozen_patch_embed, params.proj.weight, params.proj.bias);
}

Tensor project_xsp(const Tensor& xsp_raw, int height, int width, int grid_h, int grid_w, const LinearParams& proj) {
  if (xsp_raw.rows() != static_cast<Index>(height) * width) {
    throw DimensionError("project_xsp: " + xsp_raw.shape_str() + " does not cover a " + shape_string(height, width) + " image");
  }
  const Tensor pooled = matmul(xsp_raw.tape().constant(avg_pool_matrix(height, width, grid_h, grid_w)), xsp_raw);
  return linear(pooled, proj.weight, proj.bias);
}

Tensor adapter_prompt(const Tensor& x_pe, const std::optional<Tensor>& x_sp, int block, const AdapterParams& params) {
  if (block < 0 || block >= params.blocks) {
    throw std::out_of_range("adapter_prompt: unknown block index " + std::to_string(block) + " (stage has " +
                            std::to_string(params.blocks) + " blocks)");
  }
  if (params.tune.empty() || params.up.empty()) throw std::logic_error("adapter_prompt: adapter has no layers");
  const LinearParams& tune = params.tune.size() == 1 ? params.tune.front() : params.tune.at(static_cast<std::size_t>(block));
  const LinearParams& up = params.up.size() == 1 ? params.up.front() : params.up.at(static_cast<std::size_t>(block));
  const Tensor in = x_sp ? x_pe + *x_sp : x_pe;
  return linear(gelu(linear(in, tune.weight, tune.bias)), up.weight, up.bias);
}

Tensor attention_prompt(const Tensor& input_tokens, const AttentionParams& params) {
  const Tensor q = matmul(input_tokens, params.query);
  const Tensor k = matmul(input_tokens, params.key);
  const Tensor v = matmul(input_tokens, params.value);
  const double scale = 1.0 / std::sqrt(static_cast<double>(q.cols()));
  const Tensor weights = softmax_rows(scale * matmul(q, transpose(k)));
  return linear(matmul(weights, v), params.out.weight, params.out.bias);
}

Tensor combine(const Tensor& p_i, const Tensor& p_j) {
  if (p_i.rows() != p_j.rows() || p_i.cols() != p_j.cols()) {
    throw DimensionError("combine: prompt shapes differ, " + p_i.shape_str() + " vs " + p_j.shape_str());
  }
  return p_i + p_j;
}

PromptBundle make_prompts(const Tensor& x_pe, const std::optional<Tensor>& x_sp, const std::optional<Tensor>& input_tokens,
                          const AdapterParams& params) {
  PromptBundle bundle;
  if (params.attention) {
    if (!input_tokens) throw std::invalid_argument("make_prompts: attention prompt needs input tokens");
    bundle.P_j = attention_prompt(*input_tokens, *params.attention);
  }
  for (int b = 0; b < params.blocks; ++b) {
    Tensor p_i = adapter_prompt(x_pe, x_sp, b, params);
    bundle.P_k.push_back(bundle.P_j ? combine(p_i, *bundle.P_j) : p_i);
    bundle.P_i.push_back(p_i);
  }
  return bundle;
}

}  // namespace promptpix
