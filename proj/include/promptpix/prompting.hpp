#pragma once

// Prompt generators. Everything here is trainable; the inputs they consume
// (patch embeddings, superpixel features, raw image patches) come from the
// frozen side of the model.
//
//   X_pe = L_pe(X_p)                                  width c = C_seg / gamma
//   P_i  = up(GELU(tune_i(X_pe + X_sp)))              per transformer block i
//   P_j  = softmax(q k^T / sqrt(d_h)) v, mapped to C_seg
//   P_k  = P_i + P_j                                  added to block input

#include "promptpix/config.hpp"
#include "promptpix/tensor.hpp"

#include <optional>
#include <vector>

namespace promptpix {

struct LinearParams {
  Tensor weight;  // in x out
  Tensor bias;    // 1 x out
};

// Width of the prompt space; throws ConfigError unless gamma divides c_seg.
int prompt_width(int c_seg, int gamma);

struct IEGPParams {
  LinearParams proj;  // C_seg x c
  int gamma = 4;
  int c_seg = 0;

  IEGPParams(LinearParams proj, int gamma, int c_seg);
  int width() const { return c_seg / gamma; }
};

struct AttentionParams {
  Tensor query;  // token_dim x d_h
  Tensor key;
  Tensor value;
  LinearParams out;  // d_h x C_seg
};

struct AdapterParams {
  // One entry per block, or a single entry shared by every block.
  std::vector<LinearParams> tune;  // c x c
  std::vector<LinearParams> up;    // c x C_seg
  std::optional<AttentionParams> attention;
  int blocks = 0;
};

struct PromptBundle {
  std::vector<Tensor> P_i;
  std::optional<Tensor> P_j;
  std::vector<Tensor> P_k;
};

// Pools (height*width) x d rows onto a grid_h x grid_w token grid.
Matrix avg_pool_matrix(int height, int width, int grid_h, int grid_w);
// Bilinear resampling (half-pixel centers, edge clamped), out_h*out_w x in_h*in_w.
Matrix bilinear_matrix(int in_h, int in_w, int out_h, int out_w);

Tensor iegp_project(const Tensor& frozen_patch_embed, const IEGPParams& params);

// Average-pools full-resolution superpixel features onto the stage grid and
// maps them to the prompt width.
Tensor project_xsp(const Tensor& xsp_raw, int height, int width, int grid_h, int grid_w, const LinearParams& proj);

// x_sp may be empty (no superpixel pathway).
Tensor adapter_prompt(const Tensor& x_pe, const std::optional<Tensor>& x_sp, int block, const AdapterParams& params);

Tensor attention_prompt(const Tensor& input_tokens, const AttentionParams& params);

Tensor combine(const Tensor& p_i, const Tensor& p_j);

PromptBundle make_prompts(const Tensor& x_pe, const std::optional<Tensor>& x_sp, const std::optional<Tensor>& input_tokens,
                          const AdapterParams& params);

}  // namespace promptpix
