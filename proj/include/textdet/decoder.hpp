#pragma once

// The multi-granularity decoder: per-group self-attention with non-shared
// parameters, one masked interactive self-attention over the concatenated
// group queries, shared cross-attention + FFN, and the per-group multi-task
// heads (class / box every layer, polygon on the last layer only).

#include <array>
#include <optional>
#include <vector>

#include "textdet/encoder.hpp"

namespace textdet {

// Binary attention pattern over the 4*n_q concatenated queries. For the
// factor kind, allowed[i][j] = 1 iff |group(i) - group(j)| <= factor with
// group(i) = floor(i / n_q). `disabled` tells the layer to skip the
// interactive step entirely; `bottom_up` permits attention only to the same
// or lower granularities (block-triangular pattern).
struct InteractionMask {
  enum class Kind { factor, bottom_up, disabled };
  Kind kind = Kind::factor;
  int n_q = 0;
  int factor = 1;  // meaningful for the factor kind
  AttnMask attn;   // (4*n_q, 4*n_q); empty when disabled

  bool enabled() const { return kind != Kind::disabled; }
};

namespace detail {
inline AttnMask group_mask(int n_q, const std::array<std::array<uint8_t, 4>, 4>& allow) {
  const int n = 4 * n_q;
  AttnMask m{n, n, std::vector<uint8_t>(static_cast<size_t>(n) * n)};
  for (int i = 0; i < n; ++i)
    for (int j = 0; j < n; ++j)
      m.allowed[static_cast<size_t>(i) * n + j] = allow[i / n_q][j / n_q];
  return m;
}
}  // namespace detail

inline InteractionMask build_interaction_mask(int n_q, int factor) {
  if (n_q < 1) throw validation_error("interaction mask: n_q must be >= 1");
  if (factor < 1 || factor > 3)
    throw validation_error("interaction mask: factor must be 1, 2 or 3");
  std::array<std::array<uint8_t, 4>, 4> allow{};
  for (int a = 0; a < 4; ++a)
    for (int b = 0; b < 4; ++b) allow[a][b] = std::abs(a - b) <= factor ? 1 : 0;
  InteractionMask m;
  m.kind = InteractionMask::Kind::factor;
  m.n_q = n_q;
  m.factor = factor;
  m.attn = detail::group_mask(n_q, allow);
  return m;
}

inline InteractionMask interaction_mask_disabled(int n_q) {
  InteractionMask m;
  m.kind = InteractionMask::Kind::disabled;
  m.n_q = n_q;
  return m;
}

inline InteractionMask interaction_mask_bottom_up(int n_q) {
  std::array<std::array<uint8_t, 4>, 4> allow{};
  for (int a = 0; a < 4; ++a)
    for (int b = 0; b < 4; ++b) allow[a][b] = b <= a ? 1 : 0;
  InteractionMask m;
  m.kind = InteractionMask::Kind::bottom_up;
  m.n_q = n_q;
  m.attn = detail::group_mask(n_q, allow);
  return m;
}

inline InteractionMask interaction_mask_from_string(const std::string& s, int n_q) {
  if (s == "disabled") return interaction_mask_disabled(n_q);
  if (s == "bottom_up") return interaction_mask_bottom_up(n_q);
  if (s == "1" || s == "2" || s == "3") return build_interaction_mask(n_q, s[0] - '0');
  throw validation_error("interaction mask: expected 1|2|3|disabled|bottom_up, got \"" + s + "\"");
}

template <class T>
struct DecoderLayer {
  std::array<MultiHeadAttention<T>, 4> self_attn;  // non-shared per group
  std::array<LayerNorm<T>, 4> self_norm;
  MultiHeadAttention<T> inter_attn;
  LayerNorm<T> inter_norm;
  MultiHeadAttention<T> cross_attn;
  LayerNorm<T> cross_norm;
  Linear<T> ffn1, ffn2;
  LayerNorm<T> ffn_norm;

  void init(Rng& rng, const ModelConfig& cfg) {
    for (int i = 0; i < 4; ++i) {
      self_attn[i].init(rng, cfg.dim, cfg.heads);
      self_norm[i].init(cfg.dim);
    }
    inter_attn.init(rng, cfg.dim, cfg.heads);
    inter_norm.init(cfg.dim);
    cross_attn.init(rng, cfg.dim, cfg.heads);
    cross_norm.init(cfg.dim);
    ffn1.init(rng, cfg.dim, cfg.dim * cfg.ffn_mult);
    ffn2.init(rng, cfg.dim * cfg.ffn_mult, cfg.dim);
    ffn_norm.init(cfg.dim);
  }
  void reg(ParamSet<T>& ps, const std::string& prefix) {
    static const char* gname[4] = {"word", "line", "para", "page"};
    for (int i = 0; i < 4; ++i) {
      self_attn[i].reg(ps, prefix + ".self_" + gname[i]);
      self_norm[i].reg(ps, prefix + ".self_norm_" + gname[i]);
    }
    inter_attn.reg(ps, prefix + ".inter");
    inter_norm.reg(ps, prefix + ".inter_norm");
    cross_attn.reg(ps, prefix + ".cross");
    cross_norm.reg(ps, prefix + ".cross_norm");
    ffn1.reg(ps, prefix + ".ffn1");
    ffn2.reg(ps, prefix + ".ffn2");
    ffn_norm.reg(ps, prefix + ".ffn_norm");
  }

  Var<T> group_self_attention(Graph<T>& g, int group, Var<T> q_g) {
    return self_norm[group](g, g.add(q_g, self_attn[group](g, q_g, q_g)));
  }

  Var<T> interactive_attention(Graph<T>& g, Var<T> q_all, const InteractionMask& mask) {
    if (!mask.enabled()) return q_all;
    return inter_norm(g, g.add(q_all, inter_attn(g, q_all, q_all, &mask.attn)));
  }

  Var<T> cross_attention_ffn(Graph<T>& g, Var<T> q_all, Var<T> memory) {
    q_all = cross_norm(g, g.add(q_all, cross_attn(g, q_all, memory)));
    return ffn_norm(g, g.add(q_all, ffn2(g, g.relu(ffn1(g, q_all)))));
  }

  Var<T> operator()(Graph<T>& g, Var<T> q_all, Var<T> memory, const InteractionMask& mask,
                    int n_q) {
    std::vector<Var<T>> groups;
    for (int gi = 0; gi < 4; ++gi)
      groups.push_back(group_self_attention(g, gi, g.slice0(q_all, gi * n_q, n_q)));
    q_all = g.concat0(groups);
    q_all = interactive_attention(g, q_all, mask);
    return cross_attention_ffn(g, q_all, memory);
  }
};

// Per-layer, per-group prediction tensors.
template <class T>
struct LayerOutput {
  std::array<Var<T>, 4> cls_logits;             // (N_q, vocab_g)
  std::array<Var<T>, 4> boxes;                  // (N_q, 4) sigmoid cxcywh
  std::array<std::optional<Var<T>>, 4> polys;   // (N_q, 2*K) sigmoid, last layer only
};

// Heads are shared across decoder layers, distinct per group.
template <class T>
struct DetectionHeads {
  std::array<Mlp<T>, 4> cls, box, poly;
  int poly_points = 16;

  void init(Rng& rng, const ModelConfig& cfg) {
    poly_points = cfg.poly_points;
    for (int gi = 0; gi < 4; ++gi) {
      cls[gi].init(rng, {cfg.dim, cfg.dim, cfg.dim, cfg.vocab(gi)});
      box[gi].init(rng, {cfg.dim, cfg.dim, cfg.dim, 4});
      poly[gi].init(rng, {cfg.dim, cfg.dim, cfg.dim, 2 * cfg.poly_points});
      // focal-style prior: start every class logit near p ~ 0.01
      auto& cb = cls[gi].layers.back().b.value.v;
      std::fill(cb.begin(), cb.end(), static_cast<T>(-std::log(99.0)));
    }
  }
  void reg(ParamSet<T>& ps, const std::string& prefix) {
    static const char* gname[4] = {"word", "line", "para", "page"};
    for (int gi = 0; gi < 4; ++gi) {
      cls[gi].reg(ps, prefix + ".cls_" + gname[gi]);
      box[gi].reg(ps, prefix + ".box_" + gname[gi]);
      poly[gi].reg(ps, prefix + ".poly_" + gname[gi]);
    }
  }

  LayerOutput<T> operator()(Graph<T>& g, Var<T> q_all, int n_q, bool with_poly) {
    LayerOutput<T> out;
    for (int gi = 0; gi < 4; ++gi) {
      Var<T> q_g = g.slice0(q_all, gi * n_q, n_q);
      out.cls_logits[gi] = cls[gi](g, q_g);
      out.boxes[gi] = g.sigmoid(box[gi](g, q_g));
      if (with_poly) out.polys[gi] = g.sigmoid(poly[gi](g, q_g));
    }
    return out;
  }
};

// Full detection branch: backbone -> encoder memory -> stacked decoder
// layers (same interaction mask at every layer) -> per-layer heads.
template <class T>
struct DetModel {
  ModelConfig cfg;
  Backbone<T> backbone;
  PyramidEncoder<T> encoder;
  std::array<Parameter<T>, 4> queries;  // (N_q, C) per group: word, line, para, page
  std::vector<DecoderLayer<T>> dec_layers;
  DetectionHeads<T> heads;

  void init(Rng& rng, const ModelConfig& c) {
    cfg = c;
    cfg.validate();
    backbone.init(rng, cfg);
    encoder.init(rng, cfg);
    static const char* gname[4] = {"word", "line", "para", "page"};
    for (int gi = 0; gi < 4; ++gi) {
      queries[gi].value = TensorData<T>({cfg.num_queries, cfg.dim});
      for (auto& v : queries[gi].value.v) v = static_cast<T>(rng.normal(0.0, 0.02));
      queries[gi].name = std::string("det.queries.") + gname[gi];
    }
    dec_layers.resize(cfg.dec_layers);
    for (auto& l : dec_layers) l.init(rng, cfg);
    heads.init(rng, cfg);
  }

  void reg(ParamSet<T>& ps) {
    backbone.reg(ps, "det.backbone");
    encoder.reg(ps, "det.encoder");
    for (auto& q : queries) ps.add(q);
    for (size_t i = 0; i < dec_layers.size(); ++i)
      dec_layers[i].reg(ps, "det.dec" + std::to_string(i));
    heads.reg(ps, "det.heads");
  }

  struct Forward {
    FeaturePyramid<T> pyramid;
    Var<T> memory;
    std::vector<LayerOutput<T>> layers;
  };

  Var<T> query_block(Graph<T>& g) {
    std::vector<Var<T>> qs;
    for (auto& q : queries) qs.push_back(g.use(q));
    return g.concat0(qs);
  }

  // decoder_forward on a precomputed memory (used by tests and by the full
  // forward below)
  std::vector<LayerOutput<T>> decode(Graph<T>& g, Var<T> memory, Var<T> q_all,
                                     const InteractionMask& mask) {
    std::vector<LayerOutput<T>> outs;
    for (size_t li = 0; li < dec_layers.size(); ++li) {
      q_all = dec_layers[li](g, q_all, memory, mask, cfg.num_queries);
      outs.push_back(heads(g, q_all, cfg.num_queries, li + 1 == dec_layers.size()));
    }
    return outs;
  }

  Forward forward(Graph<T>& g, const TensorData<T>& image, const InteractionMask& mask) {
    Forward f;
    f.pyramid = backbone(g, g.constant(image));
    f.memory = encoder(g, f.pyramid);
    f.layers = decode(g, f.memory, query_block(g), mask);
    return f;
  }
};

}  // namespace textdet
