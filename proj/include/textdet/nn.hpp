#pragma once

// Learnable building blocks on top of the tensor graph: linear layers,
// layer norm, multi-head attention, small MLPs, strided convolutions and
// the 2-D sinusoidal positional encodings shared by the encoder memory and
// the polygon prompt encoder.

#include <string>
#include <vector>

#include "textdet/tensor.hpp"

namespace textdet {

template <class T>
inline void init_uniform(TensorData<T>& t, Rng& rng, double bound) {
  for (auto& v : t.v) v = static_cast<T>(rng.uniform(-bound, bound));
}

template <class T>
struct Linear {
  Parameter<T> w;  // (out, in)
  Parameter<T> b;  // (out)
  bool has_bias = true;

  void init(Rng& rng, int in, int out, bool bias = true) {
    has_bias = bias;
    w.value = TensorData<T>({out, in});
    init_uniform(w.value, rng, std::sqrt(6.0 / (in + out)));
    if (bias) b.value = TensorData<T>({out});
  }
  void reg(ParamSet<T>& ps, const std::string& prefix) {
    w.name = prefix + ".w";
    ps.add(w);
    if (has_bias) {
      b.name = prefix + ".b";
      ps.add(b);
    }
  }
  Var<T> operator()(Graph<T>& g, Var<T> x) {
    Var<T> y = g.matmul(x, g.use(w), false, true);
    if (has_bias) y = g.add(y, g.use(b));
    return y;
  }
};

template <class T>
struct LayerNorm {
  Parameter<T> gain, bias;

  void init(int dim) {
    gain.value = TensorData<T>({dim});
    std::fill(gain.value.v.begin(), gain.value.v.end(), T(1));
    bias.value = TensorData<T>({dim});
  }
  void reg(ParamSet<T>& ps, const std::string& prefix) {
    gain.name = prefix + ".gain";
    bias.name = prefix + ".bias";
    ps.add(gain);
    ps.add(bias);
  }
  Var<T> operator()(Graph<T>& g, Var<T> x) {
    return g.layer_norm_lastdim(x, g.use(gain), g.use(bias));
  }
};

// MLP with ReLU between layers; `dims` = {in, hidden..., out}.
template <class T>
struct Mlp {
  std::vector<Linear<T>> layers;

  void init(Rng& rng, const std::vector<int>& dims) {
    layers.resize(dims.size() - 1);
    for (size_t i = 0; i + 1 < dims.size(); ++i) layers[i].init(rng, dims[i], dims[i + 1]);
  }
  void reg(ParamSet<T>& ps, const std::string& prefix) {
    for (size_t i = 0; i < layers.size(); ++i) layers[i].reg(ps, prefix + ".l" + std::to_string(i));
  }
  Var<T> operator()(Graph<T>& g, Var<T> x) {
    for (size_t i = 0; i < layers.size(); ++i) {
      x = layers[i](g, x);
      if (i + 1 < layers.size()) x = g.relu(x);
    }
    return x;
  }
};

template <class T>
struct MultiHeadAttention {
  Linear<T> wq, wk, wv, wo;
  int heads = 1;
  int dim = 0;

  void init(Rng& rng, int model_dim, int n_heads) {
    if (model_dim % n_heads != 0)
      throw std::invalid_argument("attention: model dim must divide by head count");
    dim = model_dim;
    heads = n_heads;
    wq.init(rng, model_dim, model_dim);
    wk.init(rng, model_dim, model_dim);
    wv.init(rng, model_dim, model_dim);
    wo.init(rng, model_dim, model_dim);
  }
  void reg(ParamSet<T>& ps, const std::string& prefix) {
    wq.reg(ps, prefix + ".wq");
    wk.reg(ps, prefix + ".wk");
    wv.reg(ps, prefix + ".wv");
    wo.reg(ps, prefix + ".wo");
  }

  // q_in: (n, C) queries, kv_in: (m, C) keys/values.
  Var<T> operator()(Graph<T>& g, Var<T> q_in, Var<T> kv_in, const AttnMask* mask = nullptr) {
    const int n = q_in.shape()[0];
    const int m = kv_in.shape()[0];
    const int dh = dim / heads;
    auto split = [&](Var<T> x, int len) {
      return g.permute3(g.reshape(x, {len, heads, dh}), 1, 0, 2);  // (H, len, dh)
    };
    Var<T> q = split(wq(g, q_in), n);
    Var<T> k = split(wk(g, kv_in), m);
    Var<T> v = split(wv(g, kv_in), m);
    Var<T> scores = g.muls(g.bmm(q, k, false, true), T(1.0 / std::sqrt(double(dh))));
    Var<T> attn = g.softmax_lastdim(scores, mask);
    Var<T> out = g.bmm(attn, v);                       // (H, n, dh)
    out = g.reshape(g.permute3(out, 1, 0, 2), {n, dim});
    return wo(g, out);
  }
};

// Post-norm transformer encoder layer: x = LN(x + MHA(x)); x = LN(x + FFN(x)).
template <class T>
struct EncoderLayer {
  MultiHeadAttention<T> attn;
  Linear<T> ffn1, ffn2;
  LayerNorm<T> norm1, norm2;

  void init(Rng& rng, int dim, int heads, int ffn_dim) {
    attn.init(rng, dim, heads);
    ffn1.init(rng, dim, ffn_dim);
    ffn2.init(rng, ffn_dim, dim);
    norm1.init(dim);
    norm2.init(dim);
  }
  void reg(ParamSet<T>& ps, const std::string& prefix) {
    attn.reg(ps, prefix + ".attn");
    ffn1.reg(ps, prefix + ".ffn1");
    ffn2.reg(ps, prefix + ".ffn2");
    norm1.reg(ps, prefix + ".norm1");
    norm2.reg(ps, prefix + ".norm2");
  }
  Var<T> operator()(Graph<T>& g, Var<T> x) {
    x = norm1(g, g.add(x, attn(g, x, x)));
    x = norm2(g, g.add(x, ffn2(g, g.relu(ffn1(g, x)))));
    return x;
  }
};

template <class T>
struct Conv2d {
  Parameter<T> w;  // (Cout, Cin*k*k)
  Parameter<T> b;  // (Cout)
  int k = 3, stride = 1, pad = 1;
  int in_ch = 0, out_ch = 0;

  void init(Rng& rng, int cin, int cout, int kernel, int stride_, int pad_) {
    in_ch = cin;
    out_ch = cout;
    k = kernel;
    stride = stride_;
    pad = pad_;
    w.value = TensorData<T>({cout, cin * kernel * kernel});
    init_uniform(w.value, rng, std::sqrt(6.0 / (cin * kernel * kernel)));
    b.value = TensorData<T>({cout});
  }
  void reg(ParamSet<T>& ps, const std::string& prefix) {
    w.name = prefix + ".w";
    b.name = prefix + ".b";
    ps.add(w);
    ps.add(b);
  }
  // x: (Cin, H, W) -> (Cout, Ho, Wo)
  Var<T> operator()(Graph<T>& g, Var<T> x) {
    const int H = x.shape()[1], W = x.shape()[2];
    const int Ho = (H + 2 * pad - k) / stride + 1;
    const int Wo = (W + 2 * pad - k) / stride + 1;
    Var<T> col = g.im2col(x, k, stride, pad);            // (Ho*Wo, Cin*k*k)
    Var<T> y = g.add(g.matmul(col, g.use(w), false, true), g.use(b));  // (Ho*Wo, Cout)
    return g.reshape(g.transpose2(y), {out_ch, Ho, Wo});
  }
};

// 2-D sinusoidal positional encoding of a normalized point: the first C/2
// channels encode y, the rest x, each as interleaved sin/cos over C/4
// geometric frequencies.
template <class T>
inline void write_pos_encoding(T* out, double x, double y, int C) {
  const int quarter = C / 4;
  const double two_pi = 2.0 * std::numbers::pi;
  for (int i = 0; i < quarter; ++i) {
    const double freq = std::pow(10000.0, -2.0 * i / (C / 2.0));
    out[2 * i] = static_cast<T>(std::sin(two_pi * y * freq));
    out[2 * i + 1] = static_cast<T>(std::cos(two_pi * y * freq));
    out[C / 2 + 2 * i] = static_cast<T>(std::sin(two_pi * x * freq));
    out[C / 2 + 2 * i + 1] = static_cast<T>(std::cos(two_pi * x * freq));
  }
}

// Per-cell encodings for an h x w grid, row-major: (h*w, C).
template <class T>
inline TensorData<T> grid_pos_encoding(int h, int w, int C) {
  if (C % 4 != 0) throw std::invalid_argument("positional encoding: dim must divide by 4");
  TensorData<T> out({h * w, C});
  for (int r = 0; r < h; ++r)
    for (int c = 0; c < w; ++c)
      write_pos_encoding(out.v.data() + (static_cast<size_t>(r) * w + c) * C, (c + 0.5) / w,
                         (r + 0.5) / h, C);
  return out;
}

}  // namespace textdet
