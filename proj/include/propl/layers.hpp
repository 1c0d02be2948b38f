#pragma once

// Network building blocks with explicit forward/backward passes. Parameters
// live in a ParamStore; each layer keeps only offsets. forward() fills a
// cache with whatever backward() needs; backward() accumulates parameter
// gradients into a caller-supplied flat buffer and returns the gradient with
// respect to the layer input. Loop orders are fixed, so results are
// bit-reproducible for a given binary.

#include <cmath>
#include <string>
#include <vector>

#include "propl/params.hpp"
#include "propl/tensor.hpp"

namespace propl {

// ---------------------------------------------------------------------------
// 2-D convolution via im2col + GEMM. Weight layout (k*k*cin, cout) with row
// index (ky*k + kx)*cin + ci, matching the column order produced by im2col.
// ---------------------------------------------------------------------------

template <typename S>
struct Conv2dCache {
  MatRM<S> col;          // (oh*ow, k*k*cin)
  int in_h = 0, in_w = 0;
};

template <typename S>
struct Conv2d {
  int cin = 0, cout = 0, k = 1, stride = 1, pad = 0;
  bool has_bias = true;
  std::size_t w_off = 0, b_off = 0;

  Conv2d() = default;
  Conv2d(ParamStore<S>& ps, const std::string& name, int cin_, int cout_,
         int k_, int stride_, int pad_, bool bias = true)
      : cin(cin_), cout(cout_), k(k_), stride(stride_), pad(pad_), has_bias(bias) {
    w_off = ps.add(name + ".w", {k, k, cin, cout});
    if (has_bias) b_off = ps.add(name + ".b", {cout});
  }

  int out_dim(int in) const { return (in + 2 * pad - k) / stride + 1; }

  void im2col(const Tensor<S>& x, MatRM<S>& col) const {
    const int oh = out_dim(x.h), ow = out_dim(x.w);
    col.resize(static_cast<long>(oh) * ow, static_cast<long>(k) * k * cin);
    for (int oy = 0; oy < oh; ++oy) {
      for (int ox = 0; ox < ow; ++ox) {
        S* row = col.data() + (static_cast<std::size_t>(oy) * ow + ox) * col.cols();
        for (int ky = 0; ky < k; ++ky) {
          const int iy = oy * stride + ky - pad;
          for (int kx = 0; kx < k; ++kx) {
            const int ix = ox * stride + kx - pad;
            S* dst = row + (static_cast<std::size_t>(ky) * k + kx) * cin;
            if (iy < 0 || iy >= x.h || ix < 0 || ix >= x.w) {
              for (int ci = 0; ci < cin; ++ci) dst[ci] = S{0};
            } else {
              const S* src = &x.v[(static_cast<std::size_t>(iy) * x.w + ix) * cin];
              for (int ci = 0; ci < cin; ++ci) dst[ci] = src[ci];
            }
          }
        }
      }
    }
  }

  Tensor<S> forward(const S* theta, const Tensor<S>& x, Conv2dCache<S>& cc) const {
    require(x.c == cin, "conv2d: channel mismatch");
    const int oh = out_dim(x.h), ow = out_dim(x.w);
    require(oh > 0 && ow > 0, "conv2d: input smaller than kernel");
    cc.in_h = x.h;
    cc.in_w = x.w;
    im2col(x, cc.col);
    Tensor<S> out(oh, ow, cout);
    MapConstMat<S> W(theta + w_off, static_cast<long>(k) * k * cin, cout);
    out.tokens().noalias() = cc.col * W;
    if (has_bias) {
      Eigen::Map<const Eigen::Matrix<S, 1, Eigen::Dynamic>> b(theta + b_off, cout);
      out.tokens().rowwise() += b;
    }
    return out;
  }

  Tensor<S> backward(const S* theta, const Conv2dCache<S>& cc,
                     const Tensor<S>& gout, S* gtheta) const {
    MapConstMat<S> W(theta + w_off, static_cast<long>(k) * k * cin, cout);
    MapMat<S> gW(gtheta + w_off, static_cast<long>(k) * k * cin, cout);
    gW.noalias() += cc.col.transpose() * gout.tokens();
    if (has_bias) {
      Eigen::Map<Eigen::Matrix<S, 1, Eigen::Dynamic>> gb(gtheta + b_off, cout);
      gb += gout.tokens().colwise().sum();
    }
    MatRM<S> gcol = gout.tokens() * W.transpose();
    // col2im scatter-add
    Tensor<S> gx(cc.in_h, cc.in_w, cin);
    const int oh = gout.h, ow = gout.w;
    for (int oy = 0; oy < oh; ++oy) {
      for (int ox = 0; ox < ow; ++ox) {
        const S* row = gcol.data() + (static_cast<std::size_t>(oy) * ow + ox) * gcol.cols();
        for (int ky = 0; ky < k; ++ky) {
          const int iy = oy * stride + ky - pad;
          if (iy < 0 || iy >= cc.in_h) continue;
          for (int kx = 0; kx < k; ++kx) {
            const int ix = ox * stride + kx - pad;
            if (ix < 0 || ix >= cc.in_w) continue;
            const S* src = row + (static_cast<std::size_t>(ky) * k + kx) * cin;
            S* dst = &gx.v[(static_cast<std::size_t>(iy) * cc.in_w + ix) * cin];
            for (int ci = 0; ci < cin; ++ci) dst[ci] += src[ci];
          }
        }
      }
    }
    return gx;
  }
};

// ---------------------------------------------------------------------------
// Depthwise convolution, stride 1, same padding. Weight layout (k, k, c).
// ---------------------------------------------------------------------------

template <typename S>
struct DepthwiseCache {
  Tensor<S> x;
};

template <typename S>
struct DepthwiseConv {
  int c = 0, k = 7;
  std::size_t w_off = 0, b_off = 0;

  DepthwiseConv() = default;
  DepthwiseConv(ParamStore<S>& ps, const std::string& name, int c_, int k_)
      : c(c_), k(k_) {
    w_off = ps.add(name + ".w", {k, k, c});
    b_off = ps.add(name + ".b", {c});
  }

  Tensor<S> forward(const S* theta, const Tensor<S>& x, DepthwiseCache<S>& cc) const {
    require(x.c == c, "depthwise: channel mismatch");
    cc.x = x;
    const int pad = k / 2;
    Tensor<S> out(x.h, x.w, c);
    const S* W = theta + w_off;
    const S* b = theta + b_off;
    for (int y = 0; y < x.h; ++y) {
      for (int xx = 0; xx < x.w; ++xx) {
        S* o = &out.v[(static_cast<std::size_t>(y) * x.w + xx) * c];
        for (int ci = 0; ci < c; ++ci) o[ci] = b[ci];
        for (int ky = 0; ky < k; ++ky) {
          const int iy = y + ky - pad;
          if (iy < 0 || iy >= x.h) continue;
          for (int kx = 0; kx < k; ++kx) {
            const int ix = xx + kx - pad;
            if (ix < 0 || ix >= x.w) continue;
            const S* src = &x.v[(static_cast<std::size_t>(iy) * x.w + ix) * c];
            const S* wk = W + (static_cast<std::size_t>(ky) * k + kx) * c;
            for (int ci = 0; ci < c; ++ci) o[ci] += wk[ci] * src[ci];
          }
        }
      }
    }
    return out;
  }

  Tensor<S> backward(const S* theta, const DepthwiseCache<S>& cc,
                     const Tensor<S>& gout, S* gtheta) const {
    const int pad = k / 2;
    const Tensor<S>& x = cc.x;
    Tensor<S> gx(x.h, x.w, c);
    const S* W = theta + w_off;
    S* gW = gtheta + w_off;
    S* gb = gtheta + b_off;
    for (int y = 0; y < x.h; ++y) {
      for (int xx = 0; xx < x.w; ++xx) {
        const S* go = &gout.v[(static_cast<std::size_t>(y) * x.w + xx) * c];
        for (int ci = 0; ci < c; ++ci) gb[ci] += go[ci];
        for (int ky = 0; ky < k; ++ky) {
          const int iy = y + ky - pad;
          if (iy < 0 || iy >= x.h) continue;
          for (int kx = 0; kx < k; ++kx) {
            const int ix = xx + kx - pad;
            if (ix < 0 || ix >= x.w) continue;
            const S* src = &x.v[(static_cast<std::size_t>(iy) * x.w + ix) * c];
            S* gsrc = &gx.v[(static_cast<std::size_t>(iy) * x.w + ix) * c];
            const S* wk = W + (static_cast<std::size_t>(ky) * k + kx) * c;
            S* gwk = gW + (static_cast<std::size_t>(ky) * k + kx) * c;
            for (int ci = 0; ci < c; ++ci) {
              gwk[ci] += go[ci] * src[ci];
              gsrc[ci] += go[ci] * wk[ci];
            }
          }
        }
      }
    }
    return gx;
  }
};

// ---------------------------------------------------------------------------
// Layer normalization over the channel axis, one statistic per spatial token.
// ---------------------------------------------------------------------------

template <typename S>
struct LayerNormCache {
  MatRM<S> xhat;            // (n, c)
  std::vector<S> inv_std;   // per token
};

template <typename S>
struct LayerNorm {
  int c = 0;
  std::size_t g_off = 0, b_off = 0;
  static constexpr double kEps = 1e-5;

  LayerNorm() = default;
  LayerNorm(ParamStore<S>& ps, const std::string& name, int c_) : c(c_) {
    g_off = ps.add(name + ".g", {c});
    b_off = ps.add(name + ".b", {c});
    // scale starts at 1
    S* g = ps.data() + g_off;
    for (int i = 0; i < c; ++i) g[i] = S{1};
  }

  template <typename Mat>
  void forward_rows(const S* theta, const Mat& x, MatRM<S>& out,
                    LayerNormCache<S>& cc) const {
    const long n = x.rows();
    cc.xhat.resize(n, c);
    cc.inv_std.resize(static_cast<std::size_t>(n));
    out.resize(n, c);
    const S* g = theta + g_off;
    const S* b = theta + b_off;
    for (long i = 0; i < n; ++i) {
      S mean = x.row(i).sum() / static_cast<S>(c);
      S var = S{0};
      for (int j = 0; j < c; ++j) {
        const S d = x(i, j) - mean;
        var += d * d;
      }
      var /= static_cast<S>(c);
      const S istd = S{1} / std::sqrt(var + static_cast<S>(kEps));
      cc.inv_std[static_cast<std::size_t>(i)] = istd;
      for (int j = 0; j < c; ++j) {
        const S xh = (x(i, j) - mean) * istd;
        cc.xhat(i, j) = xh;
        out(i, j) = g[j] * xh + b[j];
      }
    }
  }

  Tensor<S> forward(const S* theta, const Tensor<S>& x, LayerNormCache<S>& cc) const {
    require(x.c == c, "layernorm: channel mismatch");
    Tensor<S> out(x.h, x.w, c);
    MatRM<S> o;
    forward_rows(theta, x.tokens(), o, cc);
    out.tokens() = o;
    return out;
  }

  // dx = (dxhat - mean(dxhat) - xhat * mean(dxhat .* xhat)) * inv_std
  template <typename Mat>
  void backward_rows(const S* theta, const LayerNormCache<S>& cc, const Mat& gout,
                     MatRM<S>& gx, S* gtheta) const {
    const long n = gout.rows();
    gx.resize(n, c);
    const S* g = theta + g_off;
    S* gg = gtheta + g_off;
    S* gb = gtheta + b_off;
    for (long i = 0; i < n; ++i) {
      S m1 = S{0}, m2 = S{0};
      for (int j = 0; j < c; ++j) {
        const S dxh = gout(i, j) * g[j];
        m1 += dxh;
        m2 += dxh * cc.xhat(i, j);
        gg[j] += gout(i, j) * cc.xhat(i, j);
        gb[j] += gout(i, j);
      }
      m1 /= static_cast<S>(c);
      m2 /= static_cast<S>(c);
      const S istd = cc.inv_std[static_cast<std::size_t>(i)];
      for (int j = 0; j < c; ++j) {
        const S dxh = gout(i, j) * g[j];
        gx(i, j) = (dxh - m1 - cc.xhat(i, j) * m2) * istd;
      }
    }
  }

  Tensor<S> backward(const S* theta, const LayerNormCache<S>& cc,
                     const Tensor<S>& gout, S* gtheta) const {
    Tensor<S> gx(gout.h, gout.w, c);
    MatRM<S> gm;
    backward_rows(theta, cc, gout.tokens(), gm, gtheta);
    gx.tokens() = gm;
    return gx;
  }
};

// ---------------------------------------------------------------------------
// Exact GELU: x * Phi(x).
// ---------------------------------------------------------------------------

template <typename S>
struct GeluCache {
  Tensor<S> x;
};

template <typename S>
struct Gelu {
  static S phi(S x) {
    return S{0.5} * (S{1} + std::erf(x * static_cast<S>(0.7071067811865475244)));
  }
  static S pdf(S x) {
    return static_cast<S>(0.3989422804014326779) * std::exp(S{-0.5} * x * x);
  }

  Tensor<S> forward(const Tensor<S>& x, GeluCache<S>& cc) const {
    cc.x = x;
    Tensor<S> out(x.h, x.w, x.c);
    for (std::size_t i = 0; i < x.size(); ++i) out.v[i] = x.v[i] * phi(x.v[i]);
    return out;
  }

  Tensor<S> backward(const GeluCache<S>& cc, const Tensor<S>& gout) const {
    Tensor<S> gx(gout.h, gout.w, gout.c);
    for (std::size_t i = 0; i < gout.size(); ++i) {
      const S x = cc.x.v[i];
      gx.v[i] = gout.v[i] * (phi(x) + x * pdf(x));
    }
    return gx;
  }
};

// ---------------------------------------------------------------------------
// Pixel shuffle: (h, w, r*r*c') -> (r*h, r*w, c') with
// out(y, x, ch) = in(y/r, x/r, ch*r*r + (y%r)*r + (x%r)).
// ---------------------------------------------------------------------------

template <typename S>
inline Tensor<S> pixel_shuffle(const Tensor<S>& x, int r) {
  require(r >= 2, "pixel_shuffle: r must be >= 2");
  require(x.c % (r * r) == 0, "pixel_shuffle: channels not divisible by r^2");
  const int co = x.c / (r * r);
  Tensor<S> out(x.h * r, x.w * r, co);
  for (int y = 0; y < out.h; ++y) {
    for (int xx = 0; xx < out.w; ++xx) {
      const int sy = y / r, sx = xx / r;
      const int oy = y % r, ox = xx % r;
      for (int ch = 0; ch < co; ++ch) {
        out.at(y, xx, ch) = x.at(sy, sx, ch * r * r + oy * r + ox);
      }
    }
  }
  return out;
}

template <typename S>
inline Tensor<S> pixel_shuffle_backward(const Tensor<S>& gout, int r) {
  const int co = gout.c;
  Tensor<S> gx(gout.h / r, gout.w / r, co * r * r);
  for (int y = 0; y < gout.h; ++y) {
    for (int xx = 0; xx < gout.w; ++xx) {
      const int sy = y / r, sx = xx / r;
      const int oy = y % r, ox = xx % r;
      for (int ch = 0; ch < co; ++ch) {
        gx.at(sy, sx, ch * r * r + oy * r + ox) = gout.at(y, xx, ch);
      }
    }
  }
  return gx;
}

// ---------------------------------------------------------------------------
// Multi-head attention over token matrices. Queries come from Xq, keys and
// values from Xkv; both must have width dim. Self-attention passes the same
// matrix for both, cross-attention passes prompt features as Xkv.
// ---------------------------------------------------------------------------

template <typename S>
struct AttentionCache {
  MatRM<S> xq, xkv;
  MatRM<S> q, kk, vv, o;       // projected matrices, (n, dim) / (m, dim)
  std::vector<MatRM<S>> attn;  // per head, (nq, nkv), post-softmax
};

template <typename S>
struct MultiHeadAttention {
  int dim = 0, heads = 1;
  std::size_t wq_off = 0, wk_off = 0, wv_off = 0, wo_off = 0;

  MultiHeadAttention() = default;
  MultiHeadAttention(ParamStore<S>& ps, const std::string& name, int dim_, int heads_)
      : dim(dim_), heads(heads_) {
    require(heads >= 1 && dim % heads == 0, "attention: heads must divide dim");
    wq_off = ps.add(name + ".wq", {dim, dim});
    wk_off = ps.add(name + ".wk", {dim, dim});
    wv_off = ps.add(name + ".wv", {dim, dim});
    wo_off = ps.add(name + ".wo", {dim, dim});
  }

  MatRM<S> forward(const S* theta, const MatRM<S>& xq, const MatRM<S>& xkv,
                   AttentionCache<S>& cc) const {
    require(xq.cols() == dim && xkv.cols() == dim, "attention: width mismatch");
    const long nq = xq.rows(), nkv = xkv.rows();
    const int dh = dim / heads;
    const S scale = S{1} / std::sqrt(static_cast<S>(dh));
    MapConstMat<S> Wq(theta + wq_off, dim, dim), Wk(theta + wk_off, dim, dim),
        Wv(theta + wv_off, dim, dim), Wo(theta + wo_off, dim, dim);
    cc.xq = xq;
    cc.xkv = xkv;
    cc.q.noalias() = xq * Wq;
    cc.kk.noalias() = xkv * Wk;
    cc.vv.noalias() = xkv * Wv;
    cc.attn.assign(static_cast<std::size_t>(heads), MatRM<S>());
    cc.o.resize(nq, dim);
    for (int h = 0; h < heads; ++h) {
      auto Qh = cc.q.middleCols(h * dh, dh);
      auto Kh = cc.kk.middleCols(h * dh, dh);
      auto Vh = cc.vv.middleCols(h * dh, dh);
      MatRM<S>& A = cc.attn[static_cast<std::size_t>(h)];
      A.noalias() = Qh * Kh.transpose();
      A *= scale;
      for (long i = 0; i < nq; ++i) {
        S mx = A(i, 0);
        for (long j = 1; j < nkv; ++j) mx = std::max(mx, A(i, j));
        S sum = S{0};
        for (long j = 0; j < nkv; ++j) {
          const S e = std::exp(A(i, j) - mx);
          A(i, j) = e;
          sum += e;
        }
        const S inv = S{1} / sum;
        for (long j = 0; j < nkv; ++j) A(i, j) *= inv;
      }
      cc.o.middleCols(h * dh, dh).noalias() = A * Vh;
    }
    return cc.o * Wo;
  }

  // Returns gradients w.r.t. (xq, xkv); for self-attention the caller adds
  // them together.
  void backward(const S* theta, const AttentionCache<S>& cc, const MatRM<S>& gout,
                MatRM<S>& gxq, MatRM<S>& gxkv, S* gtheta) const {
    const long nq = cc.xq.rows();
    const int dh = dim / heads;
    const S scale = S{1} / std::sqrt(static_cast<S>(dh));
    MapConstMat<S> Wq(theta + wq_off, dim, dim), Wk(theta + wk_off, dim, dim),
        Wv(theta + wv_off, dim, dim), Wo(theta + wo_off, dim, dim);
    MapMat<S> gWq(gtheta + wq_off, dim, dim), gWk(gtheta + wk_off, dim, dim),
        gWv(gtheta + wv_off, dim, dim), gWo(gtheta + wo_off, dim, dim);

    gWo.noalias() += cc.o.transpose() * gout;
    MatRM<S> gO = gout * Wo.transpose();

    MatRM<S> gQ = MatRM<S>::Zero(nq, dim);
    MatRM<S> gK = MatRM<S>::Zero(cc.xkv.rows(), dim);
    MatRM<S> gV = MatRM<S>::Zero(cc.xkv.rows(), dim);
    for (int h = 0; h < heads; ++h) {
      const MatRM<S>& A = cc.attn[static_cast<std::size_t>(h)];
      auto Qh = cc.q.middleCols(h * dh, dh);
      auto Kh = cc.kk.middleCols(h * dh, dh);
      auto Vh = cc.vv.middleCols(h * dh, dh);
      auto gOh = gO.middleCols(h * dh, dh);
      MatRM<S> gA = gOh * Vh.transpose();
      gV.middleCols(h * dh, dh).noalias() += A.transpose() * gOh;
      // softmax backward, row-wise
      MatRM<S> gS = A;
      for (long i = 0; i < gA.rows(); ++i) {
        const S dot = (gA.row(i).array() * A.row(i).array()).sum();
        gS.row(i) = (A.row(i).array() * (gA.row(i).array() - dot)).matrix();
      }
      gS *= scale;
      gQ.middleCols(h * dh, dh).noalias() += gS * Kh;
      gK.middleCols(h * dh, dh).noalias() += gS.transpose() * Qh;
    }
    gWq.noalias() += cc.xq.transpose() * gQ;
    gWk.noalias() += cc.xkv.transpose() * gK;
    gWv.noalias() += cc.xkv.transpose() * gV;
    gxq.noalias() = gQ * Wq.transpose();
    gxkv.noalias() = gK * Wk.transpose();
    gxkv.noalias() += gV * Wv.transpose();
  }
};

// ---------------------------------------------------------------------------
// 1-D convolution over the token axis of an (L, D) matrix, stride 1, same
// padding, D -> D channels. Weight layout (k*D, D), row index kt*D + di.
// ---------------------------------------------------------------------------

template <typename S>
struct Conv1dCache {
  MatRM<S> col;  // (L, k*D)
};

template <typename S>
struct Conv1dTokens {
  int d = 0, k = 3;
  std::size_t w_off = 0;

  Conv1dTokens() = default;
  Conv1dTokens(ParamStore<S>& ps, const std::string& name, int d_, int k_)
      : d(d_), k(k_) {
    w_off = ps.add(name + ".w", {k, d, d});
  }

  MatRM<S> forward(const S* theta, const MatRM<S>& t, Conv1dCache<S>& cc) const {
    require(t.cols() == d, "conv1d: width mismatch");
    const long L = t.rows();
    const int pad = k / 2;
    cc.col.resize(L, static_cast<long>(k) * d);
    cc.col.setZero();
    for (long l = 0; l < L; ++l) {
      for (int kt = 0; kt < k; ++kt) {
        const long src = l + kt - pad;
        if (src < 0 || src >= L) continue;
        cc.col.row(l).segment(kt * d, d) = t.row(src);
      }
    }
    MapConstMat<S> W(theta + w_off, static_cast<long>(k) * d, d);
    return cc.col * W;
  }

  MatRM<S> backward(const S* theta, const Conv1dCache<S>& cc, const MatRM<S>& gout,
                    S* gtheta) const {
    const long L = gout.rows();
    const int pad = k / 2;
    MapConstMat<S> W(theta + w_off, static_cast<long>(k) * d, d);
    MapMat<S> gW(gtheta + w_off, static_cast<long>(k) * d, d);
    gW.noalias() += cc.col.transpose() * gout;
    MatRM<S> gcol = gout * W.transpose();
    MatRM<S> gt = MatRM<S>::Zero(L, d);
    for (long l = 0; l < L; ++l) {
      for (int kt = 0; kt < k; ++kt) {
        const long src = l + kt - pad;
        if (src < 0 || src >= L) continue;
        gt.row(src) += gcol.row(l).segment(kt * d, d);
      }
    }
    return gt;
  }
};

// ---------------------------------------------------------------------------
// Bias-free linear map (Din -> Dout) over token rows.
// ---------------------------------------------------------------------------

template <typename S>
struct LinearCache {
  MatRM<S> x;
};

template <typename S>
struct Linear {
  int din = 0, dout = 0;
  std::size_t w_off = 0;

  Linear() = default;
  Linear(ParamStore<S>& ps, const std::string& name, int din_, int dout_)
      : din(din_), dout(dout_) {
    w_off = ps.add(name + ".w", {din, dout});
  }

  MatRM<S> forward(const S* theta, const MatRM<S>& x, LinearCache<S>& cc) const {
    require(x.cols() == din, "linear: width mismatch");
    cc.x = x;
    MapConstMat<S> W(theta + w_off, din, dout);
    return x * W;
  }

  MatRM<S> backward(const S* theta, const LinearCache<S>& cc, const MatRM<S>& gout,
                    S* gtheta) const {
    MapConstMat<S> W(theta + w_off, din, dout);
    MapMat<S> gW(gtheta + w_off, din, dout);
    gW.noalias() += cc.x.transpose() * gout;
    return gout * W.transpose();
  }
};

// Channel concatenation of two tensors with identical spatial dims.
template <typename S>
inline Tensor<S> concat_channels(const Tensor<S>& a, const Tensor<S>& b) {
  require(a.h == b.h && a.w == b.w, "concat: spatial mismatch");
  Tensor<S> out(a.h, a.w, a.c + b.c);
  for (int y = 0; y < a.h; ++y) {
    for (int x = 0; x < a.w; ++x) {
      for (int k = 0; k < a.c; ++k) out.at(y, x, k) = a.at(y, x, k);
      for (int k = 0; k < b.c; ++k) out.at(y, x, a.c + k) = b.at(y, x, k);
    }
  }
  return out;
}

template <typename S>
inline void split_channels(const Tensor<S>& g, int ca, Tensor<S>& ga, Tensor<S>& gb) {
  ga = Tensor<S>(g.h, g.w, ca);
  gb = Tensor<S>(g.h, g.w, g.c - ca);
  for (int y = 0; y < g.h; ++y) {
    for (int x = 0; x < g.w; ++x) {
      for (int k = 0; k < ca; ++k) ga.at(y, x, k) = g.at(y, x, k);
      for (int k = ca; k < g.c; ++k) gb.at(y, x, k - ca) = g.at(y, x, k);
    }
  }
}

}  // namespace propl
