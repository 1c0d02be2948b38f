#pragma once

// The segmentation network: a 4-stage convolutional encoder shared by two
// structurally identical decoders ("sd" is supervised directly, "pd" learns
// from pseudo labels). Each decoder stage ends in a prompt block that first
// self-attends over the spatial tokens and then cross-attends into the
// projected prompt, gated by a scalar alpha that starts at zero. All
// forward/backward entry points take the parameter vector explicitly so a
// finite-difference checker can evaluate the same graph at perturbed points.

#include <array>
#include <cmath>
#include <string>
#include <vector>

#include <nlohmann/json.hpp>

#include "propl/layers.hpp"
#include "propl/params.hpp"
#include "propl/prompt.hpp"
#include "propl/rng.hpp"
#include "propl/tensor.hpp"

namespace propl {

struct ArchConfig {
  std::array<int, 4> d{4, 8, 16, 32};      // per-stage downsample factors
  std::array<int, 4> C{32, 64, 128, 256};  // per-stage channel widths
  int in_channels = 3;
  int embed_dim = 64;  // prompt embedding width D
  int heads = 4;
  int prompt_conv_kernel = 3;
  int stage_depth = 1;  // conv blocks per encoder stage
};

inline void validate(const ArchConfig& a) {
  for (int k = 0; k < 3; ++k) {
    require(a.d[k] < a.d[k + 1], "arch: d must be strictly increasing");
    require(a.d[k + 1] % a.d[k] == 0 && a.d[k + 1] / a.d[k] >= 2,
            "arch: each stage must downsample by an integer factor >= 2");
    require(a.C[k] < a.C[k + 1], "arch: C must be strictly increasing");
  }
  require(a.d[0] >= 2, "arch: first stage must downsample");
  require(a.in_channels >= 1 && a.embed_dim >= 1 && a.heads >= 1, "arch: bad sizes");
  require(a.stage_depth >= 1, "arch: stage_depth must be >= 1");
  require(a.prompt_conv_kernel >= 1 && a.prompt_conv_kernel % 2 == 1,
          "arch: prompt conv kernel must be odd");
}

inline nlohmann::ordered_json arch_to_json(const ArchConfig& a) {
  return {{"d", a.d},
          {"C", a.C},
          {"in_channels", a.in_channels},
          {"embed_dim", a.embed_dim},
          {"heads", a.heads},
          {"prompt_conv_kernel", a.prompt_conv_kernel},
          {"stage_depth", a.stage_depth}};
}

inline ArchConfig arch_from_json(const nlohmann::json& j) {
  ArchConfig a;
  if (j.contains("d")) a.d = j.at("d").get<std::array<int, 4>>();
  if (j.contains("C")) a.C = j.at("C").get<std::array<int, 4>>();
  a.in_channels = j.value("in_channels", a.in_channels);
  a.embed_dim = j.value("embed_dim", a.embed_dim);
  a.heads = j.value("heads", a.heads);
  a.prompt_conv_kernel = j.value("prompt_conv_kernel", a.prompt_conv_kernel);
  a.stage_depth = j.value("stage_depth", a.stage_depth);
  validate(a);
  return a;
}

template <typename S>
struct MultiScaleFeatures {
  std::array<Tensor<S>, 4> v;
};

// Numerically stable logistic sigmoid.
template <typename S>
inline S stable_sigmoid(S x) {
  if (x >= S{0}) return S{1} / (S{1} + std::exp(-x));
  const S e = std::exp(x);
  return e / (S{1} + e);
}

// ---------------------------------------------------------------------------
// ConvNeXt-style residual block: depthwise 7x7 -> LN -> 1x1 expand (x4) ->
// GELU -> 1x1 contract, added back to the input.
// ---------------------------------------------------------------------------

template <typename S>
struct ConvBlockCache {
  DepthwiseCache<S> dw;
  LayerNormCache<S> ln;
  Conv2dCache<S> pw1, pw2;
  GeluCache<S> act;
};

template <typename S>
struct ConvBlock {
  int c = 0;
  DepthwiseConv<S> dw;
  LayerNorm<S> ln;
  Conv2d<S> pw1, pw2;
  Gelu<S> act;

  ConvBlock() = default;
  ConvBlock(ParamStore<S>& ps, const std::string& name, int c_)
      : c(c_),
        dw(ps, name + ".dw", c_, 7),
        ln(ps, name + ".ln", c_),
        pw1(ps, name + ".pw1", c_, 4 * c_, 1, 1, 0),
        pw2(ps, name + ".pw2", 4 * c_, c_, 1, 1, 0) {}

  Tensor<S> forward(const S* theta, const Tensor<S>& x, ConvBlockCache<S>& cc) const {
    Tensor<S> h = dw.forward(theta, x, cc.dw);
    h = ln.forward(theta, h, cc.ln);
    h = pw1.forward(theta, h, cc.pw1);
    h = act.forward(h, cc.act);
    h = pw2.forward(theta, h, cc.pw2);
    for (std::size_t i = 0; i < h.size(); ++i) h.v[i] += x.v[i];
    return h;
  }

  Tensor<S> backward(const S* theta, const ConvBlockCache<S>& cc,
                     const Tensor<S>& gout, S* gtheta) const {
    Tensor<S> g = pw2.backward(theta, cc.pw2, gout, gtheta);
    g = act.backward(cc.act, g);
    g = pw1.backward(theta, cc.pw1, g, gtheta);
    g = ln.backward(theta, cc.ln, g, gtheta);
    g = dw.backward(theta, cc.dw, g, gtheta);
    for (std::size_t i = 0; i < g.size(); ++i) g.v[i] += gout.v[i];
    return g;
  }
};

// ---------------------------------------------------------------------------
// Prompt block. Forward, per stage k with C = C_k channels:
//   z' = z + LN(MHSA(z))                  over h*w flattened tokens
//   tau = Conv1d(t) W                     (L x D) -> (L x D) -> (L x C)
//   out = z' + alpha * LN(MHCA(q=z', kv=tau))
// kSelfOnly stops after the first line; it exists so tests can compare the
// alpha = 0 path against a build with the cross-attention branch removed.
// ---------------------------------------------------------------------------

enum class PudMode { kFull, kSelfOnly };

template <typename S>
struct PudBlockCache {
  int h = 0, w = 0;
  AttentionCache<S> sa, ca;
  LayerNormCache<S> ln1c, ln2c;
  Conv1dCache<S> convc;
  LinearCache<S> projc;
  MatRM<S> zp;       // post-Eq.1 tokens, also the MHCA query input
  MatRM<S> ln2_out;  // needed for d(loss)/d(alpha)
  PudMode mode = PudMode::kFull;
};

template <typename S>
struct PudBlock {
  int c = 0;
  MultiHeadAttention<S> mhsa, mhca;
  LayerNorm<S> ln1, ln2;
  Conv1dTokens<S> conv;
  Linear<S> proj;
  std::size_t alpha_off = 0;

  PudBlock() = default;
  PudBlock(ParamStore<S>& ps, const std::string& name, int c_, int embed_dim,
           int heads, int conv_kernel)
      : c(c_),
        mhsa(ps, name + ".mhsa", c_, heads),
        mhca(ps, name + ".mhca", c_, heads),
        ln1(ps, name + ".ln1", c_),
        ln2(ps, name + ".ln2", c_),
        conv(ps, name + ".conv", embed_dim, conv_kernel),
        proj(ps, name + ".proj", embed_dim, c_) {
    alpha_off = ps.add(name + ".alpha", {1});  // gate starts closed
  }

  Tensor<S> forward(const S* theta, const Tensor<S>& z, const TokenMat<S>& t,
                    PudMode mode, PudBlockCache<S>& cc) const {
    require(z.c == c, "pud_block: channel mismatch");
    require(t.rows >= 1, "pud_block: empty prompt");
    cc.h = z.h;
    cc.w = z.w;
    cc.mode = mode;
    const MatRM<S> ztok = z.tokens();
    MatRM<S> sa_out = mhsa.forward(theta, ztok, ztok, cc.sa);
    MatRM<S> ln1_out;
    ln1.forward_rows(theta, sa_out, ln1_out, cc.ln1c);
    cc.zp = ztok + ln1_out;
    Tensor<S> out(z.h, z.w, c);
    if (mode == PudMode::kSelfOnly) {
      out.tokens() = cc.zp;
      return out;
    }
    const MatRM<S> tmat = t.mat();
    MatRM<S> tau_pre = conv.forward(theta, tmat, cc.convc);
    MatRM<S> tau = proj.forward(theta, tau_pre, cc.projc);
    MatRM<S> ca_out = mhca.forward(theta, cc.zp, tau, cc.ca);
    ln2.forward_rows(theta, ca_out, cc.ln2_out, cc.ln2c);
    const S alpha = theta[alpha_off];
    out.tokens() = cc.zp + alpha * cc.ln2_out;
    return out;
  }

  // The prompt matrix t is frozen, so its gradient is dropped.
  Tensor<S> backward(const S* theta, const PudBlockCache<S>& cc,
                     const Tensor<S>& gout, S* gtheta) const {
    MatRM<S> g_zp;
    if (cc.mode == PudMode::kSelfOnly) {
      g_zp = gout.tokens();
    } else {
      const MatRM<S> go = gout.tokens();
      const S alpha = theta[alpha_off];
      gtheta[alpha_off] += (go.array() * cc.ln2_out.array()).sum();
      MatRM<S> g_ln2 = alpha * go;
      MatRM<S> g_ca;
      ln2.backward_rows(theta, cc.ln2c, g_ln2, g_ca, gtheta);
      MatRM<S> g_q, g_tau;
      mhca.backward(theta, cc.ca, g_ca, g_q, g_tau, gtheta);
      MatRM<S> g_tau_pre = proj.backward(theta, cc.projc, g_tau, gtheta);
      conv.backward(theta, cc.convc, g_tau_pre, gtheta);  // d/dt discarded
      g_zp = go + g_q;
    }
    MatRM<S> g_sa;
    ln1.backward_rows(theta, cc.ln1c, g_zp, g_sa, gtheta);
    MatRM<S> g_xq, g_xkv;
    mhsa.backward(theta, cc.sa, g_sa, g_xq, g_xkv, gtheta);
    Tensor<S> gz(cc.h, cc.w, c);
    gz.tokens() = g_zp + g_xq + g_xkv;
    return gz;
  }
};

// ---------------------------------------------------------------------------
// Sub-pixel upsampling: 3x3 conv to r^2 * cout channels, then pixel shuffle.
// ---------------------------------------------------------------------------

template <typename S>
struct SubpixelCache {
  Conv2dCache<S> conv;
};

template <typename S>
struct SubpixelUp {
  Conv2d<S> conv;
  int r = 2;

  SubpixelUp() = default;
  SubpixelUp(ParamStore<S>& ps, const std::string& name, int cin, int cout, int r_)
      : conv(ps, name + ".conv", cin, cout * r_ * r_, 3, 1, 1), r(r_) {
    require(r_ >= 2, "subpixel_upsample: r must be >= 2 (use a no-op for r=1)");
  }

  Tensor<S> forward(const S* theta, const Tensor<S>& x, SubpixelCache<S>& cc) const {
    return pixel_shuffle(conv.forward(theta, x, cc.conv), r);
  }

  Tensor<S> backward(const S* theta, const SubpixelCache<S>& cc,
                     const Tensor<S>& gout, S* gtheta) const {
    return conv.backward(theta, cc.conv, pixel_shuffle_backward(gout, r), gtheta);
  }
};

// ---------------------------------------------------------------------------
// Encoder: patchify stem + LN, then per stage `stage_depth` conv blocks with
// LN + strided-conv downsampling between stages. encode() returns the output
// of each stage (v_1..v_4).
// ---------------------------------------------------------------------------

template <typename S>
struct EncoderCache {
  Conv2dCache<S> stem;
  LayerNormCache<S> stem_ln;
  std::vector<ConvBlockCache<S>> blocks;
  std::array<LayerNormCache<S>, 3> down_ln;
  std::array<Conv2dCache<S>, 3> down_conv;
};

template <typename S>
struct Encoder {
  ArchConfig cfg;
  Conv2d<S> stem;
  LayerNorm<S> stem_ln;
  std::vector<ConvBlock<S>> blocks;  // stage-major, cfg.stage_depth per stage
  std::array<LayerNorm<S>, 3> down_ln;
  std::array<Conv2d<S>, 3> down_conv;

  Encoder() = default;
  Encoder(ParamStore<S>& ps, const std::string& name, const ArchConfig& cfg_)
      : cfg(cfg_),
        stem(ps, name + ".stem", cfg_.in_channels, cfg_.C[0], cfg_.d[0], cfg_.d[0], 0),
        stem_ln(ps, name + ".stem_ln", cfg_.C[0]) {
    for (int s = 0; s < 4; ++s) {
      for (int b = 0; b < cfg.stage_depth; ++b) {
        blocks.emplace_back(ps, name + ".s" + std::to_string(s) + ".b" + std::to_string(b),
                            cfg.C[static_cast<std::size_t>(s)]);
      }
      if (s < 3) {
        const int rr = cfg.d[static_cast<std::size_t>(s) + 1] / cfg.d[static_cast<std::size_t>(s)];
        down_ln[static_cast<std::size_t>(s)] =
            LayerNorm<S>(ps, name + ".down" + std::to_string(s) + ".ln",
                         cfg.C[static_cast<std::size_t>(s)]);
        down_conv[static_cast<std::size_t>(s)] =
            Conv2d<S>(ps, name + ".down" + std::to_string(s) + ".conv",
                      cfg.C[static_cast<std::size_t>(s)],
                      cfg.C[static_cast<std::size_t>(s) + 1], rr, rr, 0);
      }
    }
  }

  MultiScaleFeatures<S> forward(const S* theta, const Tensor<S>& image,
                                EncoderCache<S>& cc) const {
    require(image.c == cfg.in_channels, "encode: channel mismatch");
    require(image.h % cfg.d[3] == 0 && image.w % cfg.d[3] == 0,
            "encode: input " + std::to_string(image.h) + "x" + std::to_string(image.w) +
                " is not divisible by " + std::to_string(cfg.d[3]));
    cc.blocks.resize(blocks.size());
    MultiScaleFeatures<S> f;
    Tensor<S> x = stem.forward(theta, image, cc.stem);
    x = stem_ln.forward(theta, x, cc.stem_ln);
    std::size_t bi = 0;
    for (int s = 0; s < 4; ++s) {
      for (int b = 0; b < cfg.stage_depth; ++b, ++bi) {
        x = blocks[bi].forward(theta, x, cc.blocks[bi]);
      }
      f.v[static_cast<std::size_t>(s)] = x;
      if (s < 3) {
        x = down_ln[static_cast<std::size_t>(s)].forward(theta, x,
                                                         cc.down_ln[static_cast<std::size_t>(s)]);
        x = down_conv[static_cast<std::size_t>(s)].forward(
            theta, x, cc.down_conv[static_cast<std::size_t>(s)]);
      }
    }
    return f;
  }

  // gfeats holds the gradient arriving at each v_k; returns d/d(image).
  Tensor<S> backward(const S* theta, const EncoderCache<S>& cc,
                     const MultiScaleFeatures<S>& gfeats, S* gtheta) const {
    Tensor<S> g = gfeats.v[3];
    std::size_t bi = blocks.size();
    for (int s = 3; s >= 0; --s) {
      for (int b = cfg.stage_depth - 1; b >= 0; --b) {
        --bi;
        g = blocks[bi].backward(theta, cc.blocks[bi], g, gtheta);
      }
      if (s > 0) {
        g = down_conv[static_cast<std::size_t>(s) - 1].backward(
            theta, cc.down_conv[static_cast<std::size_t>(s) - 1], g, gtheta);
        g = down_ln[static_cast<std::size_t>(s) - 1].backward(
            theta, cc.down_ln[static_cast<std::size_t>(s) - 1], g, gtheta);
        for (std::size_t i = 0; i < g.size(); ++i)
          g.v[i] += gfeats.v[static_cast<std::size_t>(s) - 1].v[i];
      }
    }
    g = stem_ln.backward(theta, cc.stem_ln, g, gtheta);
    return stem.backward(theta, cc.stem, g, gtheta);
  }
};

// ---------------------------------------------------------------------------
// Decoder: a bottleneck stage on v_4, then three stages that upsample 2x,
// fuse a conv-processed encoder skip, run a conv block, and finish with a
// prompt block; finally a 4x sub-pixel upsample and a 1x1 head.
// prompt_enabled = false skips every prompt block entirely.
// ---------------------------------------------------------------------------

template <typename S>
struct DecoderStageCache {
  SubpixelCache<S> up;
  Conv2dCache<S> skip, fuse;
  ConvBlockCache<S> block;
  PudBlockCache<S> pud;
};

template <typename S>
struct DecoderCache {
  ConvBlockCache<S> bott_block;
  PudBlockCache<S> bott_pud;
  std::array<DecoderStageCache<S>, 3> stages;  // k = 2, 1, 0 in that order
  SubpixelCache<S> final_up;
  Conv2dCache<S> head;
  bool prompt_enabled = true;
  std::array<std::array<int, 3>, 4> vshape{};  // (h, w, c) of each skip
};

template <typename S>
struct Decoder {
  ArchConfig cfg;
  ConvBlock<S> bott_block;
  PudBlock<S> bott_pud;
  struct Stage {
    int ck = 0;
    SubpixelUp<S> up;
    Conv2d<S> skip;
    Conv2d<S> fuse;
    ConvBlock<S> block;
    PudBlock<S> pud;
  };
  std::vector<Stage> stages;  // k = 2, 1, 0
  SubpixelUp<S> final_up;
  Conv2d<S> head;

  Decoder() = default;
  Decoder(ParamStore<S>& ps, const std::string& name, const ArchConfig& cfg_)
      : cfg(cfg_),
        bott_block(ps, name + ".bott.block", cfg_.C[3]),
        bott_pud(ps, name + ".bott.pud", cfg_.C[3], cfg_.embed_dim, cfg_.heads,
                 cfg_.prompt_conv_kernel) {
    for (int k = 2; k >= 0; --k) {
      const std::string sn = name + ".up" + std::to_string(k);
      const int ck = cfg.C[static_cast<std::size_t>(k)];
      const int cprev = cfg.C[static_cast<std::size_t>(k) + 1];
      const int rr = cfg.d[static_cast<std::size_t>(k) + 1] / cfg.d[static_cast<std::size_t>(k)];
      stages.push_back(Stage{
          ck,
          SubpixelUp<S>(ps, sn + ".up", cprev, ck, rr),
          Conv2d<S>(ps, sn + ".skip", ck, ck, 3, 1, 1),
          Conv2d<S>(ps, sn + ".fuse", 2 * ck, ck, 3, 1, 1),
          ConvBlock<S>(ps, sn + ".block", ck),
          PudBlock<S>(ps, sn + ".pud", ck, cfg.embed_dim, cfg.heads,
                      cfg.prompt_conv_kernel),
      });
    }
    final_up = SubpixelUp<S>(ps, name + ".final.up", cfg.C[0], cfg.C[0], cfg.d[0]);
    head = Conv2d<S>(ps, name + ".final.head", cfg.C[0], 1, 1, 1, 0);
  }

  Tensor<S> forward(const S* theta, const MultiScaleFeatures<S>& feats,
                    const TokenMat<S>& t, bool prompt_enabled, DecoderCache<S>& cc,
                    PudMode mode = PudMode::kFull) const {
    for (int k = 0; k < 4; ++k) {
      const auto& vk = feats.v[static_cast<std::size_t>(k)];
      require(vk.c == cfg.C[static_cast<std::size_t>(k)], "decode: feature width mismatch");
      cc.vshape[static_cast<std::size_t>(k)] = {vk.h, vk.w, vk.c};
    }
    cc.prompt_enabled = prompt_enabled;
    Tensor<S> u = bott_block.forward(theta, feats.v[3], cc.bott_block);
    if (prompt_enabled) u = bott_pud.forward(theta, u, t, mode, cc.bott_pud);
    for (std::size_t si = 0; si < stages.size(); ++si) {
      const Stage& st = stages[si];
      const std::size_t k = static_cast<std::size_t>(2 - static_cast<int>(si));
      DecoderStageCache<S>& sc = cc.stages[si];
      Tensor<S> upo = st.up.forward(theta, u, sc.up);
      Tensor<S> sk = st.skip.forward(theta, feats.v[k], sc.skip);
      require(upo.h == sk.h && upo.w == sk.w, "decode: skip size mismatch");
      Tensor<S> cat = concat_channels(upo, sk);
      u = st.fuse.forward(theta, cat, sc.fuse);
      u = st.block.forward(theta, u, sc.block);
      if (prompt_enabled) u = st.pud.forward(theta, u, t, mode, sc.pud);
    }
    Tensor<S> x = final_up.forward(theta, u, cc.final_up);
    return head.forward(theta, x, cc.head);  // (H, W, 1) logits
  }

  // Accumulates into gtheta and returns the gradients reaching each v_k.
  MultiScaleFeatures<S> backward(const S* theta, const DecoderCache<S>& cc,
                                 const Tensor<S>& g_logits, S* gtheta) const {
    MultiScaleFeatures<S> gf;
    for (int k = 0; k < 4; ++k) {
      const auto& sh = cc.vshape[static_cast<std::size_t>(k)];
      gf.v[static_cast<std::size_t>(k)] = Tensor<S>(sh[0], sh[1], sh[2]);
    }
    Tensor<S> g = head.backward(theta, cc.head, g_logits, gtheta);
    g = final_up.backward(theta, cc.final_up, g, gtheta);
    for (int si = static_cast<int>(stages.size()) - 1; si >= 0; --si) {
      const Stage& st = stages[static_cast<std::size_t>(si)];
      const std::size_t k = static_cast<std::size_t>(2 - si);
      const DecoderStageCache<S>& sc = cc.stages[static_cast<std::size_t>(si)];
      if (cc.prompt_enabled) g = st.pud.backward(theta, sc.pud, g, gtheta);
      g = st.block.backward(theta, sc.block, g, gtheta);
      Tensor<S> gcat = st.fuse.backward(theta, sc.fuse, g, gtheta);
      Tensor<S> g_up, g_sk;
      split_channels(gcat, st.ck, g_up, g_sk);
      Tensor<S> g_skip_in = st.skip.backward(theta, sc.skip, g_sk, gtheta);
      for (std::size_t i = 0; i < g_skip_in.size(); ++i)
        gf.v[k].v[i] += g_skip_in.v[i];
      g = st.up.backward(theta, sc.up, g_up, gtheta);
    }
    if (cc.prompt_enabled) g = bott_pud.backward(theta, cc.bott_pud, g, gtheta);
    g = bott_block.backward(theta, cc.bott_block, g, gtheta);
    for (std::size_t i = 0; i < g.size(); ++i) gf.v[3].v[i] += g.v[i];
    return gf;
  }
};

// ---------------------------------------------------------------------------
// Whole model.
// ---------------------------------------------------------------------------

enum class Which { kSd, kPd };

template <typename S>
struct ForwardCache {
  EncoderCache<S> enc;
  DecoderCache<S> dec;
  Which which = Which::kSd;
};

template <typename S>
struct Model {
  ArchConfig cfg;
  ParamStore<S> params;
  Encoder<S> encoder;
  Decoder<S> dec_sd, dec_pd;

  explicit Model(const ArchConfig& cfg_) : cfg(cfg_) {
    validate(cfg);
    encoder = Encoder<S>(params, "enc", cfg);
    dec_sd = Decoder<S>(params, "sd", cfg);
    dec_pd = Decoder<S>(params, "pd", cfg);
  }

  // Gaussian init with fan-in scaling for every weight matrix; biases and
  // gate scalars stay 0, norm scales stay 1. Each tensor gets its own stream
  // keyed by (seed, name), so values do not depend on registration order.
  void init_params(std::uint64_t seed) {
    const auto is_weight = [](const std::string& n) {
      for (const char* suffix : {".w", ".wq", ".wk", ".wv", ".wo"})
        if (n.ends_with(suffix)) return true;
      return false;
    };
    for (const auto& e : params.entries()) {
      if (!is_weight(e.name)) continue;
      const auto fan_out = static_cast<double>(e.shape.back());
      const double fan_in = static_cast<double>(e.count) / fan_out;
      const double sd = std::sqrt(2.0 / fan_in);
      Rng rng(mix_seed({seed, fnv1a64(e.name)}));
      S* p = params.data() + e.offset;
      for (std::size_t i = 0; i < e.count; ++i)
        p[i] = static_cast<S>(rng.normal() * sd);
    }
  }

  const Decoder<S>& decoder(Which w) const { return w == Which::kSd ? dec_sd : dec_pd; }

  MultiScaleFeatures<S> encode(const S* theta, const Tensor<S>& image,
                               EncoderCache<S>& cc) const {
    return encoder.forward(theta, image, cc);
  }

  Tensor<S> decode(const S* theta, const MultiScaleFeatures<S>& feats,
                   const TokenMat<S>& t, Which which, bool prompt_enabled,
                   DecoderCache<S>& cc, PudMode mode = PudMode::kFull) const {
    return decoder(which).forward(theta, feats, t, prompt_enabled, cc, mode);
  }

  Tensor<S> forward_logits(const S* theta, const Tensor<S>& image, const TokenMat<S>& t,
                           Which which, bool prompt_enabled, ForwardCache<S>& cc,
                           PudMode mode = PudMode::kFull) const {
    cc.which = which;
    const auto feats = encode(theta, image, cc.enc);
    return decode(theta, feats, t, which, prompt_enabled, cc.dec, mode);
  }

  // Backward through decoder and encoder given d(loss)/d(logits).
  void backward(const S* theta, const ForwardCache<S>& cc, const Tensor<S>& g_logits,
                S* gtheta) const {
    const auto gfeats = decoder(cc.which).backward(theta, cc.dec, g_logits, gtheta);
    encoder.backward(theta, cc.enc, gfeats, gtheta);
  }

  // Convenience: probabilities from the stored parameter vector.
  Tensor<S> forward(const Tensor<S>& image, const TokenMat<S>& t, Which which,
                    bool prompt_enabled = true, PudMode mode = PudMode::kFull) const {
    ForwardCache<S> cc;
    Tensor<S> logits =
        forward_logits(params.data(), image, t, which, prompt_enabled, cc, mode);
    Tensor<S> p(logits.h, logits.w, 1);
    for (std::size_t i = 0; i < logits.size(); ++i)
      p.v[i] = stable_sigmoid(logits.v[i]);
    return p;
  }
};

}  // namespace propl
