#include "textdet/encoder.hpp"

#include <doctest.h>

using namespace textdet;

namespace {

ModelConfig tiny_cfg() {
  ModelConfig c;
  c.dim = 32;
  c.heads = 4;
  c.enc_layers = 2;
  c.dec_layers = 1;
  c.num_queries = 4;
  return c;
}

TensorData<double> random_image(Rng& rng, int ch, int s) {
  TensorData<double> t({ch, s, s});
  for (auto& v : t.v) v = rng.uniform();
  return t;
}

}  // namespace

TEST_CASE("backbone level shapes and finiteness") {
  Rng rng(11);
  ModelConfig cfg = tiny_cfg();
  Backbone<double> bb;
  bb.init(rng, cfg);
  ParamSet<double> ps;
  bb.reg(ps, "bb");

  Graph<double> g;
  auto pyr = bb(g, g.constant(random_image(rng, 1, 64)));
  CHECK(pyr[0].shape() == std::vector<int>{32, 8, 8});
  CHECK(pyr[1].shape() == std::vector<int>{32, 4, 4});
  CHECK(pyr[2].shape() == std::vector<int>{32, 2, 2});

  // all-zero image: finite activations through the bias path
  auto zero_pyr = bb(g, g.constant(TensorData<double>({1, 64, 64})));
  for (int i = 0; i < 3; ++i)
    for (double v : zero_pyr[i].value().v) CHECK(std::isfinite(v));

  // single-pixel difference must reach the coarse level
  TensorData<double> img = random_image(rng, 1, 64);
  TensorData<double> img2 = img;
  img2.v[64 * 31 + 31] += 0.5;
  auto p1 = bb(g, g.constant(img));
  auto p2 = bb(g, g.constant(img2));
  double diff = 0;
  for (size_t i = 0; i < p1[2].value().v.size(); ++i)
    diff += std::abs(p1[2].value().v[i] - p2[2].value().v[i]);
  CHECK(diff > 0);

  Graph<double> g2;
  CHECK_THROWS_AS(bb(g2, g2.constant(random_image(rng, 1, 96 + 8))), validation_error);
}

TEST_CASE("encoder token count and identity at zero depth") {
  Rng rng(12);
  ModelConfig cfg = tiny_cfg();
  cfg.dim = 128;
  cfg.heads = 8;
  cfg.enc_layers = 0;
  Backbone<double> bb;
  bb.init(rng, cfg);
  PyramidEncoder<double> enc;
  enc.init(rng, cfg);

  Graph<double> g;
  auto pyr = bb(g, g.constant(random_image(rng, 1, 256)));
  auto tokens = enc.embed_tokens(g, pyr);
  CHECK(tokens.shape() == std::vector<int>{32 * 32 + 16 * 16 + 8 * 8, 128});
  CHECK(tokens.shape()[0] == 1344);
  // zero encoder layers: memory equals the embedded tokens
  auto memory = enc(g, pyr);
  CHECK(memory.value().v == tokens.value().v);
}

TEST_CASE("encoder permutation equivariance over tokens") {
  Rng rng(13);
  ModelConfig cfg = tiny_cfg();
  PyramidEncoder<double> enc;
  enc.init(rng, cfg);

  const int n = 12;
  TensorData<double> toks({n, cfg.dim});
  for (auto& v : toks.v) v = rng.normal(0, 0.5);
  std::vector<int> perm(n);
  for (int i = 0; i < n; ++i) perm[i] = (i * 5 + 3) % n;

  Graph<double> g;
  auto out = enc.encode_tokens(g, g.constant(toks));
  TensorData<double> permuted({n, cfg.dim});
  for (int i = 0; i < n; ++i)
    for (int c = 0; c < cfg.dim; ++c) permuted.v[i * cfg.dim + c] = toks.v[perm[i] * cfg.dim + c];
  auto out_p = enc.encode_tokens(g, g.constant(permuted));
  for (int i = 0; i < n; ++i)
    for (int c = 0; c < cfg.dim; ++c)
      CHECK(out_p.value().v[i * cfg.dim + c] ==
            doctest::Approx(out.value().v[perm[i] * cfg.dim + c]).epsilon(1e-12));
}

TEST_CASE("fpn fusion") {
  Rng rng(14);
  ModelConfig cfg = tiny_cfg();
  Backbone<double> bb;
  bb.init(rng, cfg);
  FpnFuse<double> fpn;
  fpn.init(rng, cfg);

  Graph<double> g;
  auto pyr = bb(g, g.constant(random_image(rng, 1, 64)));
  auto fused = fpn(g, pyr);
  CHECK(fused.shape() == std::vector<int>{cfg.dim, 8, 8});

  // constant pyramid -> spatially constant fused map
  FeaturePyramid<double> cpyr;
  for (int i = 0; i < 3; ++i) {
    TensorData<double> t({cfg.dim, 8 >> i, 8 >> i});
    for (int c = 0; c < cfg.dim; ++c)
      for (int64_t k = 0; k < t.numel() / cfg.dim; ++k) t.v[c * (t.numel() / cfg.dim) + k] = 0.1 * c;
    cpyr[i] = g.constant(t);
  }
  auto cf = fpn(g, cpyr);
  for (int c = 0; c < cfg.dim; ++c) {
    const double v0 = cf.value().v[c * 64];
    for (int k = 0; k < 64; ++k) CHECK(cf.value().v[c * 64 + k] == doctest::Approx(v0));
  }

  // zero laterals at strides 8/16: fused = projected top level, upsampled
  // twice (parameters are snapshot per graph, so build a fresh one)
  std::fill(fpn.lat8.w.value.v.begin(), fpn.lat8.w.value.v.end(), 0.0);
  std::fill(fpn.lat8.b.value.v.begin(), fpn.lat8.b.value.v.end(), 0.0);
  std::fill(fpn.lat16.w.value.v.begin(), fpn.lat16.w.value.v.end(), 0.0);
  std::fill(fpn.lat16.b.value.v.begin(), fpn.lat16.b.value.v.end(), 0.0);
  Graph<double> g2;
  auto pyr2 = bb(g2, g2.constant(random_image(rng, 1, 64)));
  auto only_top = fpn(g2, pyr2);
  auto top_proj = from_tokens(g2, fpn.lat32(g2, to_tokens(g2, pyr2[2])), 2, 2);
  auto expect = g2.upsample2x(g2.upsample2x(top_proj));
  for (size_t i = 0; i < expect.value().v.size(); ++i)
    CHECK(only_top.value().v[i] == doctest::Approx(expect.value().v[i]));
}
