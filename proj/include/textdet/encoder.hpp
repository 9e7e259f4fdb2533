#pragma once

// Image -> multi-scale features, encoder memory, and the fused stride-8 map
// used by segmentation. The backbone is a small strided conv stack with
// channel schedule {C/4, C/2, C, C, C}; the encoder runs dense multi-head
// self-attention over the flattened pyramid tokens.

#include <array>

#include "textdet/model_config.hpp"
#include "textdet/nn.hpp"

namespace textdet {

// Three feature maps at strides 8/16/32, each (C, h, w).
template <class T>
using FeaturePyramid = std::array<Var<T>, 3>;

// (C, h, w) -> row-major tokens (h*w, C)
template <class T>
inline Var<T> to_tokens(Graph<T>& g, Var<T> fmap) {
  const int C = fmap.shape()[0], h = fmap.shape()[1], w = fmap.shape()[2];
  return g.transpose2(g.reshape(fmap, {C, h * w}));
}

template <class T>
inline Var<T> from_tokens(Graph<T>& g, Var<T> tokens, int h, int w) {
  const int C = tokens.shape()[1];
  return g.reshape(g.transpose2(tokens), {C, h, w});
}

template <class T>
struct Backbone {
  std::array<Conv2d<T>, 5> convs;  // strides 2,4,8,16,32

  void init(Rng& rng, const ModelConfig& cfg) {
    const int C = cfg.dim;
    const int ch[6] = {cfg.in_channels, C / 4, C / 2, C, C, C};
    for (int i = 0; i < 5; ++i) convs[i].init(rng, ch[i], ch[i + 1], 3, 2, 1);
  }
  void reg(ParamSet<T>& ps, const std::string& prefix) {
    for (int i = 0; i < 5; ++i) convs[i].reg(ps, prefix + ".conv" + std::to_string(i));
  }

  // image (in_channels, H, W), H and W divisible by 32
  FeaturePyramid<T> operator()(Graph<T>& g, Var<T> image) {
    const int H = image.shape()[1], W = image.shape()[2];
    if (H % 32 != 0 || W % 32 != 0)
      throw validation_error("backbone: image dimensions must be divisible by 32");
    FeaturePyramid<T> pyr;
    Var<T> x = image;
    for (int i = 0; i < 5; ++i) {
      x = g.relu(convs[i](g, x));
      if (i >= 2) pyr[i - 2] = x;
    }
    return pyr;
  }
};

// Flattens pyramid levels into a token sequence with sinusoidal positional
// encodings plus a learned per-level embedding, then applies enc_layers of
// dense self-attention.
template <class T>
struct PyramidEncoder {
  Parameter<T> level_embed;  // (3, C)
  std::vector<EncoderLayer<T>> layers;
  int dim = 0;

  void init(Rng& rng, const ModelConfig& cfg) {
    dim = cfg.dim;
    level_embed.value = TensorData<T>({3, cfg.dim});
    for (auto& v : level_embed.value.v) v = static_cast<T>(rng.normal(0.0, 0.02));
    layers.resize(cfg.enc_layers);
    for (auto& l : layers) l.init(rng, cfg.dim, cfg.heads, cfg.dim * cfg.ffn_mult);
  }
  void reg(ParamSet<T>& ps, const std::string& prefix) {
    level_embed.name = prefix + ".level_embed";
    ps.add(level_embed);
    for (size_t i = 0; i < layers.size(); ++i)
      layers[i].reg(ps, prefix + ".layer" + std::to_string(i));
  }

  Var<T> embed_tokens(Graph<T>& g, const FeaturePyramid<T>& pyr) {
    std::vector<Var<T>> parts;
    Var<T> lvl = g.use(level_embed);
    for (int i = 0; i < 3; ++i) {
      const int h = pyr[i].shape()[1], w = pyr[i].shape()[2];
      Var<T> t = to_tokens(g, pyr[i]);
      t = g.add(t, g.constant(grid_pos_encoding<T>(h, w, dim)));
      t = g.add(t, g.reshape(g.slice0(lvl, i, 1), {dim}));
      parts.push_back(t);
    }
    return g.concat0(parts);
  }

  // exposed separately so permutation-equivariance can be tested directly
  Var<T> encode_tokens(Graph<T>& g, Var<T> tokens) {
    for (auto& l : layers) tokens = l(g, tokens);
    return tokens;
  }

  Var<T> operator()(Graph<T>& g, const FeaturePyramid<T>& pyr) {
    return encode_tokens(g, embed_tokens(g, pyr));
  }
};

// Top-down fusion to a single stride-8 map: 1x1 lateral projections and
// nearest-neighbor upsampling, fused = lat8 + up(lat16 + up(lat32)).
template <class T>
struct FpnFuse {
  Linear<T> lat8, lat16, lat32;

  void init(Rng& rng, const ModelConfig& cfg) {
    lat8.init(rng, cfg.dim, cfg.dim);
    lat16.init(rng, cfg.dim, cfg.dim);
    lat32.init(rng, cfg.dim, cfg.dim);
  }
  void reg(ParamSet<T>& ps, const std::string& prefix) {
    lat8.reg(ps, prefix + ".lat8");
    lat16.reg(ps, prefix + ".lat16");
    lat32.reg(ps, prefix + ".lat32");
  }

  Var<T> operator()(Graph<T>& g, const FeaturePyramid<T>& pyr) {
    auto lateral = [&](Linear<T>& lin, Var<T> fmap) {
      const int h = fmap.shape()[1], w = fmap.shape()[2];
      return from_tokens(g, lin(g, to_tokens(g, fmap)), h, w);
    };
    Var<T> top = lateral(lat32, pyr[2]);
    Var<T> mid = g.add(lateral(lat16, pyr[1]), g.upsample2x(top));
    return g.add(lateral(lat8, pyr[0]), g.upsample2x(mid));
  }
};

}  // namespace textdet
