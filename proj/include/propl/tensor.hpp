#pragma once

// Dense row-major (height, width, channel) tensor and a (rows, cols) token
// matrix. These are plain value types; all linear algebra goes through
// Eigen maps over the flat storage.

#include <Eigen/Dense>
#include <cstddef>
#include <new>
#include <stdexcept>
#include <vector>

namespace propl {

// 64-byte-aligned storage for all numeric buffers. With vectorized math the
// grouping of reductions can depend on a buffer's address modulo the SIMD
// width; pinning every allocation to one alignment makes each computation's
// rounding a pure function of shapes, so repeated runs are bit-identical.
template <typename T, std::size_t Align = 64>
struct AlignedAlloc {
  using value_type = T;
  AlignedAlloc() = default;
  template <typename U>
  AlignedAlloc(const AlignedAlloc<U, Align>&) {}
  T* allocate(std::size_t n) {
    return static_cast<T*>(::operator new(n * sizeof(T), std::align_val_t{Align}));
  }
  void deallocate(T* p, std::size_t n) {
    ::operator delete(p, n * sizeof(T), std::align_val_t{Align});
  }
  template <typename U>
  struct rebind {
    using other = AlignedAlloc<U, Align>;
  };
  template <typename U>
  bool operator==(const AlignedAlloc<U, Align>&) const {
    return true;
  }
};

template <typename S>
using AVec = std::vector<S, AlignedAlloc<S>>;

template <typename S>
using MatRM = Eigen::Matrix<S, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>;
template <typename S>
using MapMat = Eigen::Map<MatRM<S>>;
template <typename S>
using MapConstMat = Eigen::Map<const MatRM<S>>;

template <typename S>
struct Tensor {
  int h = 0, w = 0, c = 0;
  AVec<S> v;

  Tensor() = default;
  Tensor(int h_, int w_, int c_)
      : h(h_), w(w_), c(c_), v(static_cast<std::size_t>(h_) * w_ * c_, S{0}) {}

  std::size_t size() const { return v.size(); }
  bool same_shape(const Tensor& o) const {
    return h == o.h && w == o.w && c == o.c;
  }

  S& at(int y, int x, int k) {
    return v[(static_cast<std::size_t>(y) * w + x) * c + k];
  }
  S at(int y, int x, int k) const {
    return v[(static_cast<std::size_t>(y) * w + x) * c + k];
  }

  // View as (h*w) tokens by c channels.
  MapMat<S> tokens() { return MapMat<S>(v.data(), static_cast<long>(h) * w, c); }
  MapConstMat<S> tokens() const {
    return MapConstMat<S>(v.data(), static_cast<long>(h) * w, c);
  }

  void fill(S x) { std::fill(v.begin(), v.end(), x); }

  template <typename T>
  Tensor<T> cast() const {
    Tensor<T> out(h, w, c);
    for (std::size_t i = 0; i < v.size(); ++i) out.v[i] = static_cast<T>(v[i]);
    return out;
  }
};

// Token-major matrix for prompt features: rows = tokens, cols = embedding.
template <typename S>
struct TokenMat {
  int rows = 0, cols = 0;
  AVec<S> v;

  TokenMat() = default;
  TokenMat(int r, int c) : rows(r), cols(c), v(static_cast<std::size_t>(r) * c, S{0}) {}

  S& at(int r, int c_) { return v[static_cast<std::size_t>(r) * cols + c_]; }
  S at(int r, int c_) const { return v[static_cast<std::size_t>(r) * cols + c_]; }

  MapMat<S> mat() { return MapMat<S>(v.data(), rows, cols); }
  MapConstMat<S> mat() const { return MapConstMat<S>(v.data(), rows, cols); }

  template <typename T>
  TokenMat<T> cast() const {
    TokenMat<T> out(rows, cols);
    for (std::size_t i = 0; i < v.size(); ++i) out.v[i] = static_cast<T>(v[i]);
    return out;
  }
};

inline void require(bool ok, const std::string& msg) {
  if (!ok) throw std::runtime_error(msg);
}

}  // namespace propl
