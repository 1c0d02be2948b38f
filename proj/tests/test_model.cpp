#include <catch2/catch_amalgamated.hpp>

#include <cmath>
#include <cstring>
#include <vector>

#include "fd_check.hpp"
#include "propl/model.hpp"

using namespace propl;

namespace {

ArchConfig tiny_config() {
  ArchConfig a;
  a.C = {4, 8, 16, 32};
  a.embed_dim = 8;
  a.heads = 2;
  return a;
}

template <typename S>
Tensor<S> random_tensor(int h, int w, int c, Rng& rng, double scale = 1.0) {
  Tensor<S> t(h, w, c);
  for (auto& v : t.v) v = static_cast<S>(rng.normal() * scale);
  return t;
}

template <typename S>
TokenMat<S> random_tokens(int rows, int cols, Rng& rng) {
  TokenMat<S> t(rows, cols);
  for (auto& v : t.v) v = static_cast<S>(rng.normal());
  return t;
}

void fill_gaussian(AVec<double>& v, Rng& rng, double scale) {
  for (auto& x : v) x = rng.normal() * scale;
}

}  // namespace

// ---------------------------------------------------------------------------
// Layer forwards against independent direct-loop oracles.
// ---------------------------------------------------------------------------

TEST_CASE("conv2d forward equals direct convolution") {
  for (const auto& [k, stride, pad] : std::vector<std::array<int, 3>>{
           {3, 1, 1}, {4, 4, 0}, {2, 2, 0}, {1, 1, 0}, {3, 2, 1}}) {
    ParamStore<double> ps;
    Conv2d<double> conv(ps, "c", 3, 5, k, stride, pad);
    Rng rng(mix_seed({static_cast<std::uint64_t>(k), static_cast<std::uint64_t>(stride),
                      static_cast<std::uint64_t>(pad)}));
    fill_gaussian(ps.value, rng, 0.5);
    const auto x = random_tensor<double>(9, 8, 3, rng);
    Conv2dCache<double> cc;
    const auto out = conv.forward(ps.data(), x, cc);

    const double* W = ps.data() + conv.w_off;  // (ky*k+kx)*cin+ci rows, cout cols
    const double* b = ps.data() + conv.b_off;
    REQUIRE(out.h == conv.out_dim(x.h));
    REQUIRE(out.w == conv.out_dim(x.w));
    for (int oy = 0; oy < out.h; ++oy) {
      for (int ox = 0; ox < out.w; ++ox) {
        for (int co = 0; co < 5; ++co) {
          double acc = b[co];
          for (int ky = 0; ky < k; ++ky) {
            for (int kx = 0; kx < k; ++kx) {
              const int iy = oy * stride + ky - pad;
              const int ix = ox * stride + kx - pad;
              if (iy < 0 || iy >= x.h || ix < 0 || ix >= x.w) continue;
              for (int ci = 0; ci < 3; ++ci) {
                acc += x.at(iy, ix, ci) * W[((ky * k + kx) * 3 + ci) * 5 + co];
              }
            }
          }
          REQUIRE_THAT(out.at(oy, ox, co), Catch::Matchers::WithinAbs(acc, 1e-12));
        }
      }
    }
  }
}

TEST_CASE("depthwise conv forward equals direct convolution") {
  ParamStore<double> ps;
  DepthwiseConv<double> conv(ps, "dw", 4, 3);
  Rng rng(11);
  fill_gaussian(ps.value, rng, 0.5);
  const auto x = random_tensor<double>(6, 7, 4, rng);
  DepthwiseCache<double> cc;
  const auto out = conv.forward(ps.data(), x, cc);
  const double* W = ps.data() + conv.w_off;
  const double* b = ps.data() + conv.b_off;
  for (int y = 0; y < 6; ++y)
    for (int xx = 0; xx < 7; ++xx)
      for (int ci = 0; ci < 4; ++ci) {
        double acc = b[ci];
        for (int ky = 0; ky < 3; ++ky)
          for (int kx = 0; kx < 3; ++kx) {
            const int iy = y + ky - 1, ix = xx + kx - 1;
            if (iy < 0 || iy >= 6 || ix < 0 || ix >= 7) continue;
            acc += x.at(iy, ix, ci) * W[(ky * 3 + kx) * 4 + ci];
          }
        REQUIRE_THAT(out.at(y, xx, ci), Catch::Matchers::WithinAbs(acc, 1e-12));
      }
}

TEST_CASE("token conv forward equals direct loop") {
  ParamStore<double> ps;
  Conv1dTokens<double> conv(ps, "c1", 4, 3);
  Rng rng(13);
  fill_gaussian(ps.value, rng, 0.5);
  MatRM<double> t(5, 4);
  for (long i = 0; i < t.size(); ++i) t.data()[i] = rng.normal();
  Conv1dCache<double> cc;
  const MatRM<double> out = conv.forward(ps.data(), t, cc);
  const double* W = ps.data() + conv.w_off;  // (kt*d + di, dout)
  for (long l = 0; l < 5; ++l)
    for (int dout = 0; dout < 4; ++dout) {
      double acc = 0.0;
      for (int kt = 0; kt < 3; ++kt) {
        const long src = l + kt - 1;
        if (src < 0 || src >= 5) continue;
        for (int di = 0; di < 4; ++di)
          acc += t(src, di) * W[(kt * 4 + di) * 4 + dout];
      }
      REQUIRE_THAT(out(l, dout), Catch::Matchers::WithinAbs(acc, 1e-12));
    }
}

TEST_CASE("layernorm normalizes per token and applies affine") {
  ParamStore<double> ps;
  LayerNorm<double> ln(ps, "ln", 6);
  Rng rng(7);
  // non-trivial affine
  for (int i = 0; i < 6; ++i) {
    ps.value[static_cast<std::size_t>(ln.g_off) + i] = 0.5 + 0.1 * i;
    ps.value[static_cast<std::size_t>(ln.b_off) + i] = -0.2 * i;
  }
  const auto x = random_tensor<double>(3, 2, 6, rng, 2.0);
  LayerNormCache<double> cc;
  const auto out = ln.forward(ps.data(), x, cc);
  for (int y = 0; y < 3; ++y)
    for (int xx = 0; xx < 2; ++xx) {
      double mean = 0.0, var = 0.0;
      for (int c = 0; c < 6; ++c) mean += x.at(y, xx, c);
      mean /= 6.0;
      for (int c = 0; c < 6; ++c) {
        const double d = x.at(y, xx, c) - mean;
        var += d * d;
      }
      var /= 6.0;
      for (int c = 0; c < 6; ++c) {
        const double xh = (x.at(y, xx, c) - mean) / std::sqrt(var + 1e-5);
        const double expect = (0.5 + 0.1 * c) * xh + (-0.2 * c);
        REQUIRE_THAT(out.at(y, xx, c), Catch::Matchers::WithinAbs(expect, 1e-12));
      }
    }
}

TEST_CASE("gelu matches frozen reference values") {
  Gelu<double> g;
  GeluCache<double> cc;
  Tensor<double> x(1, 3, 1);
  x.v = {0.0, 1.0, -1.0};
  const auto out = g.forward(x, cc);
  CHECK_THAT(out.v[0], Catch::Matchers::WithinAbs(0.0, 1e-15));
  CHECK_THAT(out.v[1], Catch::Matchers::WithinAbs(0.8413447460685429, 1e-12));
  CHECK_THAT(out.v[2], Catch::Matchers::WithinAbs(-0.15865525393145707, 1e-12));
}

TEST_CASE("pixel shuffle follows the index formula, enumerated by hand") {
  // 2x2 input, r=2, c'=1: input channel ch*4 + oy*2 + ox at (sy,sx) lands at
  // output (2*sy+oy, 2*sx+ox). Encode each input slot uniquely as
  // 100*sy + 10*sx + slot and check all 16 output positions.
  Tensor<double> x(2, 2, 4);
  for (int sy = 0; sy < 2; ++sy)
    for (int sx = 0; sx < 2; ++sx)
      for (int slot = 0; slot < 4; ++slot)
        x.at(sy, sx, slot) = 100.0 * sy + 10.0 * sx + slot;
  const auto out = pixel_shuffle(x, 2);
  REQUIRE(out.h == 4);
  REQUIRE(out.w == 4);
  REQUIRE(out.c == 1);
  for (int y = 0; y < 4; ++y)
    for (int xx = 0; xx < 4; ++xx) {
      const double expect = 100.0 * (y / 2) + 10.0 * (xx / 2) + (y % 2) * 2 + (xx % 2);
      REQUIRE(out.at(y, xx, 0) == expect);
    }
}

TEST_CASE("pixel shuffle backward is the adjoint of forward") {
  Rng rng(3);
  const auto x = random_tensor<double>(3, 4, 8, rng);
  const auto y = random_tensor<double>(6, 8, 2, rng);
  const auto fx = pixel_shuffle(x, 2);
  const auto bty = pixel_shuffle_backward(y, 2);
  double lhs = 0.0, rhs = 0.0;
  for (std::size_t i = 0; i < fx.size(); ++i) lhs += fx.v[i] * y.v[i];
  for (std::size_t i = 0; i < x.size(); ++i) rhs += x.v[i] * bty.v[i];
  CHECK_THAT(lhs, Catch::Matchers::WithinRel(rhs, 1e-12));
}

TEST_CASE("single-key cross attention copies the projected value to every query") {
  ParamStore<double> ps;
  MultiHeadAttention<double> att(ps, "a", 8, 2);
  Rng rng(21);
  fill_gaussian(ps.value, rng, 0.4);
  MatRM<double> xq(5, 8), xkv(1, 8);
  for (long i = 0; i < xq.size(); ++i) xq.data()[i] = rng.normal();
  for (long i = 0; i < xkv.size(); ++i) xkv.data()[i] = rng.normal();
  AttentionCache<double> cc;
  const MatRM<double> out = att.forward(ps.data(), xq, xkv, cc);
  // with one key the softmax is 1, so out = ((xkv Wv) Wo) for every row
  MapConstMat<double> Wv(ps.data() + att.wv_off, 8, 8), Wo(ps.data() + att.wo_off, 8, 8);
  const MatRM<double> expect = (xkv * Wv) * Wo;
  for (long r = 0; r < out.rows(); ++r)
    for (long c = 0; c < out.cols(); ++c)
      REQUIRE_THAT(out(r, c), Catch::Matchers::WithinAbs(expect(0, c), 1e-12));
}

TEST_CASE("attention with heads not dividing width fails at construction") {
  ParamStore<double> ps;
  CHECK_THROWS_WITH(MultiHeadAttention<double>(ps, "a", 10, 3),
                    Catch::Matchers::ContainsSubstring("heads"));
}

// ---------------------------------------------------------------------------
// Prompt block contracts.
// ---------------------------------------------------------------------------

TEST_CASE("alpha 0 makes the prompt branch a bit-exact no-op") {
  for (std::uint64_t seed = 0; seed < 5; ++seed) {
    ParamStore<double> ps;
    PudBlock<double> blk(ps, "pud", 8, 6, 2, 3);
    Rng rng(mix_seed({seed, 77}));
    fill_gaussian(ps.value, rng, 0.3);
    ps.value[blk.alpha_off] = 0.0;
    // restore norm scales destroyed by the blanket fill
    for (const auto& e : ps.entries()) {
      if (e.name.ends_with(".g"))
        for (std::size_t i = 0; i < e.count; ++i) ps.value[e.offset + i] = 1.0;
    }
    const auto z = random_tensor<double>(4, 4, 8, rng);
    const auto t = random_tokens<double>(3, 6, rng);
    PudBlockCache<double> c1, c2;
    const auto full = blk.forward(ps.data(), z, t, PudMode::kFull, c1);
    const auto self_only = blk.forward(ps.data(), z, t, PudMode::kSelfOnly, c2);
    REQUIRE(full.same_shape(self_only));
    REQUIRE(std::memcmp(full.v.data(), self_only.v.data(),
                        full.size() * sizeof(double)) == 0);
  }
}

TEST_CASE("prompt block output shape equals input shape") {
  ParamStore<double> ps;
  PudBlock<double> blk(ps, "pud", 16, 8, 4, 3);
  Rng rng(5);
  fill_gaussian(ps.value, rng, 0.2);
  const auto z = random_tensor<double>(7, 7, 16, rng);
  const auto t = random_tokens<double>(8, 8, rng);
  PudBlockCache<double> cc;
  const auto out = blk.forward(ps.data(), z, t, PudMode::kFull, cc);
  CHECK(out.h == 7);
  CHECK(out.w == 7);
  CHECK(out.c == 16);
}

TEST_CASE("prompt block gradients match central finite differences") {
  // every parameter of the block, plus the feature input, at 64-bit precision
  ParamStore<double> ps;
  PudBlock<double> blk(ps, "pud", 6, 5, 2, 3);
  Rng rng(mix_seed({909, 1}));
  fill_gaussian(ps.value, rng, 0.3);
  for (const auto& e : ps.entries()) {
    if (e.name.ends_with(".g"))
      for (std::size_t i = 0; i < e.count; ++i) ps.value[e.offset + i] = 1.0 + 0.05 * static_cast<double>(i);
  }
  ps.value[blk.alpha_off] = 0.6;  // open the gate so the prompt path carries gradient

  auto z = random_tensor<double>(4, 4, 6, rng);
  const auto t = random_tokens<double>(3, 5, rng);
  const auto w = random_tensor<double>(4, 4, 6, rng);  // fixed loss weights

  auto eval = [&]() {
    PudBlockCache<double> cc;
    const auto out = blk.forward(ps.data(), z, t, PudMode::kFull, cc);
    double loss = 0.0;
    for (std::size_t i = 0; i < out.size(); ++i) loss += w.v[i] * out.v[i];
    return loss;
  };

  std::vector<double> grad(ps.size(), 0.0);
  PudBlockCache<double> cc;
  const auto out = blk.forward(ps.data(), z, t, PudMode::kFull, cc);
  (void)out;
  const auto gz = blk.backward(ps.data(), cc, w, grad.data());

  std::vector<std::size_t> all(ps.size());
  for (std::size_t i = 0; i < all.size(); ++i) all[i] = i;
  const auto worst = fd::check_indices(eval, ps.value, grad, all, 1e-5);
  INFO("worst param grad rel err " << worst.err << " at index " << worst.index);
  CHECK(worst.err < 1e-6);

  // input gradient via the same harness
  auto eval_z = [&]() {
    PudBlockCache<double> c2;
    const auto o = blk.forward(ps.data(), z, t, PudMode::kFull, c2);
    double loss = 0.0;
    for (std::size_t i = 0; i < o.size(); ++i) loss += w.v[i] * o.v[i];
    return loss;
  };
  std::vector<std::size_t> zidx(z.size());
  for (std::size_t i = 0; i < zidx.size(); ++i) zidx[i] = i;
  const auto worst_z = fd::check_indices(eval_z, z.v, gz.v, zidx, 1e-5);
  INFO("worst input grad rel err " << worst_z.err);
  CHECK(worst_z.err < 1e-6);
}

// ---------------------------------------------------------------------------
// Whole-network contracts.
// ---------------------------------------------------------------------------

TEST_CASE("encoder produces the documented stage shapes") {
  Model<float> m(ArchConfig{});  // default d=(4,8,16,32), C=(32,64,128,256)
  m.init_params(1);
  Rng rng(2);
  const auto img = random_tensor<float>(224, 224, 3, rng, 0.25);
  EncoderCache<float> cc;
  const auto f = m.encode(m.params.data(), img, cc);
  const int hs[4] = {56, 28, 14, 7};
  const int cs[4] = {32, 64, 128, 256};
  for (int k = 0; k < 4; ++k) {
    CHECK(f.v[static_cast<std::size_t>(k)].h == hs[k]);
    CHECK(f.v[static_cast<std::size_t>(k)].w == hs[k]);
    CHECK(f.v[static_cast<std::size_t>(k)].c == cs[k]);
  }
}

TEST_CASE("non-divisible input size is rejected before any compute") {
  Model<float> m(tiny_config());
  m.init_params(3);
  Rng rng(4);
  const auto img = random_tensor<float>(100, 100, 3, rng, 0.25);
  EncoderCache<float> cc;
  CHECK_THROWS_WITH(m.encode(m.params.data(), img, cc),
                    Catch::Matchers::ContainsSubstring("divisible"));
}

TEST_CASE("shape closure holds across a size sweep") {
  const auto cfg = tiny_config();
  Model<float> m(cfg);
  m.init_params(5);
  const auto pf = encode_prompt<float>("Segment the bright-ellipse in the ultrasound image.",
                                       cfg.embed_dim);
  for (const int hw : {32, 64, 96}) {
    Rng rng(static_cast<std::uint64_t>(hw));
    const auto img = random_tensor<float>(hw, hw, 3, rng, 0.25);
    ForwardCache<float> cc;
    const auto logits =
        m.forward_logits(m.params.data(), img, pf.t, Which::kSd, true, cc);
    CHECK(logits.h == hw);
    CHECK(logits.w == hw);
    CHECK(logits.c == 1);
    for (int k = 0; k < 4; ++k) {
      const auto& sh = cc.dec.vshape[static_cast<std::size_t>(k)];
      CHECK(sh[0] == hw / cfg.d[static_cast<std::size_t>(k)]);
      CHECK(sh[1] == hw / cfg.d[static_cast<std::size_t>(k)]);
      CHECK(sh[2] == cfg.C[static_cast<std::size_t>(k)]);
    }
  }
}

TEST_CASE("forward is deterministic and sigmoid outputs live in (0,1)") {
  const auto cfg = tiny_config();
  Model<float> m(cfg);
  m.init_params(6);
  Rng rng(7);
  const auto img = random_tensor<float>(32, 32, 3, rng, 0.25);
  const auto pf = encode_prompt<float>("Segment the dark-blob in the ultrasound image.",
                                       cfg.embed_dim);
  const auto p1 = m.forward(img, pf.t, Which::kSd);
  const auto p2 = m.forward(img, pf.t, Which::kSd);
  REQUIRE(std::memcmp(p1.v.data(), p2.v.data(), p1.size() * sizeof(float)) == 0);
  for (const float v : p1.v) {
    REQUIRE(v > 0.0f);
    REQUIRE(v < 1.0f);
  }
}

TEST_CASE("the two decoders give different outputs for the same input") {
  const auto cfg = tiny_config();
  Model<float> m(cfg);
  m.init_params(8);
  Rng rng(9);
  const auto img = random_tensor<float>(32, 32, 3, rng, 0.25);
  const auto pf = encode_prompt<float>("Segment the bright-ellipse in the ultrasound image.",
                                       cfg.embed_dim);
  const auto psd = m.forward(img, pf.t, Which::kSd);
  const auto ppd = m.forward(img, pf.t, Which::kPd);
  float maxdiff = 0.0f;
  for (std::size_t i = 0; i < psd.size(); ++i)
    maxdiff = std::max(maxdiff, std::abs(psd.v[i] - ppd.v[i]));
  CHECK(maxdiff > 1e-6f);
}

TEST_CASE("prompt ablation differs from the alpha-0 path") {
  // alpha = 0 keeps the self-attention half of each prompt block alive;
  // disabling prompts skips the block entirely, so outputs must differ.
  const auto cfg = tiny_config();
  Model<float> m(cfg);
  m.init_params(10);
  Rng rng(11);
  const auto img = random_tensor<float>(32, 32, 3, rng, 0.25);
  const auto pf = encode_prompt<float>("Segment the bright-ellipse in the ultrasound image.",
                                       cfg.embed_dim);
  const auto with_blocks = m.forward(img, pf.t, Which::kSd, true);   // alphas are 0 at init
  const auto without = m.forward(img, pf.t, Which::kSd, false);
  float maxdiff = 0.0f;
  for (std::size_t i = 0; i < with_blocks.size(); ++i)
    maxdiff = std::max(maxdiff, std::abs(with_blocks.v[i] - without.v[i]));
  CHECK(maxdiff > 0.0f);
}

TEST_CASE("changing the prompt changes the logits once gates are open") {
  const auto cfg = tiny_config();
  Model<float> m(cfg);
  m.init_params(12);
  for (const auto& e : m.params.entries()) {
    if (e.name.ends_with(".alpha")) m.params.value[e.offset] = 0.5f;
  }
  Rng rng(13);
  const auto img = random_tensor<float>(32, 32, 3, rng, 0.25);
  const auto pa = encode_prompt<float>("Segment the bright-ellipse in the ultrasound image.",
                                       cfg.embed_dim);
  const auto pb = encode_prompt<float>("Segment the dark-blob in the ultrasound image.",
                                       cfg.embed_dim);
  const auto oa = m.forward(img, pa.t, Which::kSd);
  const auto ob = m.forward(img, pb.t, Which::kSd);
  float maxdiff = 0.0f;
  for (std::size_t i = 0; i < oa.size(); ++i)
    maxdiff = std::max(maxdiff, std::abs(oa.v[i] - ob.v[i]));
  CHECK(maxdiff > 0.0f);
}

TEST_CASE("whole-network gradients match finite differences entry by entry") {
  const auto cfg = tiny_config();
  Model<double> m(cfg);
  m.init_params(14);
  for (const auto& e : m.params.entries()) {
    if (e.name.ends_with(".alpha")) m.params.value[e.offset] = 0.3;
  }
  Rng rng(15);
  const auto img = random_tensor<double>(32, 32, 3, rng, 0.25);
  const auto pf = encode_prompt<double>("Segment the bright-ellipse in the ultrasound image.",
                                        cfg.embed_dim);
  Tensor<double> w = random_tensor<double>(32, 32, 1, rng);

  for (const Which which : {Which::kSd, Which::kPd}) {
    auto eval = [&]() {
      ForwardCache<double> cc;
      const auto logits = m.forward_logits(m.params.value.data(), img, pf.t, which, true, cc);
      double loss = 0.0;
      for (std::size_t i = 0; i < logits.size(); ++i) loss += w.v[i] * logits.v[i];
      return loss;
    };
    std::vector<double> grad(m.params.size(), 0.0);
    ForwardCache<double> cc;
    m.forward_logits(m.params.value.data(), img, pf.t, which, true, cc);
    m.backward(m.params.value.data(), cc, w, grad.data());

    // probe the midpoint of every registered tensor: covers each layer kind
    std::vector<std::size_t> probes;
    for (const auto& e : m.params.entries()) probes.push_back(e.offset + e.count / 2);
    const auto worst =
        fd::check_indices_multi(eval, m.params.value, grad, probes, {1e-5, 1e-4});
    INFO("which=" << (which == Which::kSd ? "sd" : "pd") << " worst rel err "
                  << worst.err << " at param index " << worst.index);
    CHECK(worst.err < 1e-5);
  }
}

TEST_CASE("parameter count is a pure function of the architecture config") {
  Model<float> a(tiny_config()), b(tiny_config());
  CHECK(a.params.size() == b.params.size());
  auto cfg2 = tiny_config();
  cfg2.stage_depth = 2;
  Model<float> c(cfg2);
  CHECK(c.params.size() > a.params.size());
}
