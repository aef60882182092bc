#pragma once

#include <array>
#include <cstdint>
#include <functional>
#include <string>
#include <vector>

#include "bat/tensor.hpp"

namespace bat::model {

struct ModelConfig {
  int image_side = 64;
  int patch_side = 16;  // fixed; the stem downsamples x16
  int channels = 32;    // C
  int layers = 4;       // n encoder layers
  int heads = 4;
  int mlp_hidden = 64;  // default 2C
  bool bag = true;      // boundary-wise attention gates on/off (ablation)

  int grid_rows() const { return image_side / patch_side; }
  int grid_cols() const { return image_side / patch_side; }
  int seq_len() const { return grid_rows() * grid_cols(); }
  int head_dim() const { return channels / heads; }

  void validate() const;
  bool operator==(const ModelConfig&) const = default;
};

// Per-encoder-layer parameters: pre-norm MSA projections, MLP, and the
// boundary-attention-gate 1x1 projection.
struct LayerParams {
  Tensor wq, bq, wk, bk, wv, bv, wo, bo;  // (C,C) / (C)
  Tensor mlp_w1, mlp_b1, mlp_w2, mlp_b2;  // (C,H), (H), (H,C), (C)
  Tensor bag_w, bag_b;                    // (C), (1)
};

struct ParameterSet {
  std::array<Tensor, 4> stem_w;  // (out,in,3,3), channels 3->8->16->32->C
  std::array<Tensor, 4> stem_b;
  Tensor pos;  // (L,C) learnable positional embedding
  std::vector<LayerParams> layers;
  Tensor query_embedding;                          // (C), the boundary context prototype
  Tensor at_w1, at_b1, at_w3, at_b3, at_w6, at_b6; // dilated 3x3 convs, rates 1/3/6
  Tensor at_proj_w, at_proj_b;                     // (3C), (1)

  // Visits every tensor in the declared (checkpoint) order.
  void for_each(const std::function<void(const std::string&, Tensor&)>& fn);
  void for_each(const std::function<void(const std::string&, const Tensor&)>& fn) const;
  std::size_t scalar_count() const;
};

ParameterSet zero_params(const ModelConfig& cfg);
// Weights ~ N(0, 0.02^2), biases zero, positional embedding ~ N(0, 0.02^2).
ParameterSet init_params(const ModelConfig& cfg, std::uint64_t seed);

// Everything the backward pass needs from one forward evaluation.
struct LayerTrace {
  Tensor z_in;              // (L,C)
  Tensor xn;                // layernorm before MSA
  std::vector<double> inv_std1;
  Tensor q, k, vv;          // (L,C) projections of xn
  std::vector<Tensor> probs;  // per-head (L,L) attention rows
  Tensor concat;            // (L,C) heads reassembled
  Tensor attn_out;          // after output projection
  Tensor an;                // layernorm before MLP
  std::vector<double> inv_std2;
  Tensor h_pre, h_act;      // (L,H)
  Tensor v;                 // attn_out + mlp out
  Tensor m;                 // (L) gate map, empty when bag is off
  Tensor z_out;             // (L,C)
};

struct ForwardTrace {
  Tensor image;
  std::array<Tensor, 4> stem_out;  // post-tanh output of each stem block
  Tensor z0;                       // (L,C) sequence after positional add
  std::vector<LayerTrace> layers;
  Tensor qbag_m;    // (L), empty when bag is off
  Tensor qbag_out;  // (L,C)
  Tensor concat3;   // (gh,gw,3C) atrous branches
  Tensor logits;    // (gh,gw)
  Tensor up;        // (H,W) upsampled logits
  Tensor seg;       // (H,W) probabilities
};

struct ForwardResult {
  Tensor seg;                // (H,W) probabilities
  std::vector<Tensor> maps;  // n+1 attention maps of length L (empty when bag off)
};

// --- individual stages (exposed for direct testing) ---

// Four stride-2 3x3 conv blocks with tanh, total downsampling x16.
Tensor conv_stem(const Tensor& image, const ParameterSet& params, const ModelConfig& cfg);
// Row-major flatten of the feature grid plus the positional embedding.
Tensor sequentialize(const Tensor& feat, const Tensor& pos);
// Pre-norm multi-head self-attention with output projection.
Tensor msa(const Tensor& z, const LayerParams& lp, const ModelConfig& cfg);
// V = msa(Z) + mlp(norm(msa(Z))); M = sigmoid(V w + b); Z' = V + V (*) M.
std::pair<Tensor, Tensor> encoder_layer(const Tensor& z_prev, const LayerParams& lp, const ModelConfig& cfg);
// M_i = sigmoid(<Z_i, q> / sqrt(C)); Z' = Z + Z (*) M.
std::pair<Tensor, Tensor> query_bag(const Tensor& z, const Tensor& q, const ModelConfig& cfg);
// Parallel dilated 3x3 convs (rates 1,3,6), 1x1 projection, bilinear x16, sigmoid.
Tensor atrous_head(const Tensor& z, const ParameterSet& params, const ModelConfig& cfg);

ForwardResult forward(const Tensor& image, const ParameterSet& params, const ModelConfig& cfg);
ForwardResult forward(const Tensor& image, const ParameterSet& params, const ModelConfig& cfg, ForwardTrace& trace);

// Exact reverse-mode gradients of the loss whose derivative w.r.t. the
// segmentation map is d_seg and w.r.t. the i-th attention map is d_maps[i].
// Accumulates into grads (shapes from zero_params). Throws on non-finite
// gradients, naming the parameter.
void backward(const ForwardTrace& trace, const ParameterSet& params, const ModelConfig& cfg, const Tensor& d_seg,
              const std::vector<Tensor>& d_maps, ParameterSet& grads);

// Binary checkpoint: "BATCKPT1", 7 little-endian u32 config fields, then
// parameter tensors in declared order as little-endian f64.
void save_checkpoint(const std::string& path, const ParameterSet& params, const ModelConfig& cfg);
std::pair<ParameterSet, ModelConfig> load_checkpoint(const std::string& path);

}  // namespace bat::model
