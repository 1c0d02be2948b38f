#pragma once

// Pixel losses (binary cross entropy + soft Dice), the polynomial learning
// rate schedule, and the classical momentum SGD update. Losses operate on
// probability maps and return doubles; gradient helpers return d(loss)/d(pred)
// tensors so callers can chain them through a sigmoid into the network.

#include <cmath>
#include <cstdint>
#include <vector>

#include "propl/tensor.hpp"

namespace propl {

inline constexpr double kBceEps = 1e-7;
inline constexpr double kDiceSmooth = 1.0;

// Mean over all elements of -t*log(p) - (1-t)*log(1-p) with p clamped to
// [eps, 1-eps]. Targets may be soft (calibrated pseudo labels).
template <typename S>
double bce_loss(const Tensor<S>& pred, const Tensor<S>& target) {
  require(pred.h == target.h && pred.w == target.w && pred.c == target.c,
          "bce_loss: shape mismatch");
  require(pred.size() > 0, "bce_loss: empty tensor");
  double sum = 0.0;
  for (std::size_t i = 0; i < pred.size(); ++i) {
    const double p =
        std::min(std::max(static_cast<double>(pred.v[i]), kBceEps), 1.0 - kBceEps);
    const double t = static_cast<double>(target.v[i]);
    sum += -t * std::log(p) - (1.0 - t) * std::log(1.0 - p);
  }
  return sum / static_cast<double>(pred.size());
}

// Gradient of bce_loss wrt pred. Where the clamp is active the loss is locally
// constant in pred, so the gradient there is exactly zero.
template <typename S>
Tensor<S> bce_grad(const Tensor<S>& pred, const Tensor<S>& target) {
  Tensor<S> g(pred.h, pred.w, pred.c);
  const double inv_n = 1.0 / static_cast<double>(pred.size());
  for (std::size_t i = 0; i < pred.size(); ++i) {
    const double p = static_cast<double>(pred.v[i]);
    if (p <= kBceEps || p >= 1.0 - kBceEps) {
      g.v[i] = S(0);
      continue;
    }
    const double t = static_cast<double>(target.v[i]);
    g.v[i] = static_cast<S>((-t / p + (1.0 - t) / (1.0 - p)) * inv_n);
  }
  return g;
}

// Soft Dice loss 1 - (2*sum(p*t) + s) / (sum(p) + sum(t) + s), smooth s = 1.
template <typename S>
double dice_loss(const Tensor<S>& pred, const Tensor<S>& target) {
  require(pred.h == target.h && pred.w == target.w && pred.c == target.c,
          "dice_loss: shape mismatch");
  double inter = 0.0, sp = 0.0, st = 0.0;
  for (std::size_t i = 0; i < pred.size(); ++i) {
    const double p = static_cast<double>(pred.v[i]);
    const double t = static_cast<double>(target.v[i]);
    inter += p * t;
    sp += p;
    st += t;
  }
  return 1.0 - (2.0 * inter + kDiceSmooth) / (sp + st + kDiceSmooth);
}

template <typename S>
Tensor<S> dice_grad(const Tensor<S>& pred, const Tensor<S>& target) {
  double inter = 0.0, sp = 0.0, st = 0.0;
  for (std::size_t i = 0; i < pred.size(); ++i) {
    inter += static_cast<double>(pred.v[i]) * static_cast<double>(target.v[i]);
    sp += static_cast<double>(pred.v[i]);
    st += static_cast<double>(target.v[i]);
  }
  const double denom = sp + st + kDiceSmooth;
  const double num = 2.0 * inter + kDiceSmooth;
  Tensor<S> g(pred.h, pred.w, pred.c);
  for (std::size_t i = 0; i < pred.size(); ++i) {
    const double t = static_cast<double>(target.v[i]);
    g.v[i] = static_cast<S>(-(2.0 * t * denom - num) / (denom * denom));
  }
  return g;
}

template <typename S>
double combined_loss(const Tensor<S>& pred, const Tensor<S>& target,
                     double w_bce = 1.0, double w_dice = 1.0) {
  return w_bce * bce_loss(pred, target) + w_dice * dice_loss(pred, target);
}

template <typename S>
Tensor<S> combined_grad(const Tensor<S>& pred, const Tensor<S>& target,
                        double w_bce = 1.0, double w_dice = 1.0) {
  Tensor<S> gb = bce_grad(pred, target);
  Tensor<S> gd = dice_grad(pred, target);
  for (std::size_t i = 0; i < gb.size(); ++i)
    gb.v[i] = static_cast<S>(w_bce * gb.v[i] + w_dice * gd.v[i]);
  return gb;
}

// Polynomial decay: lr(i) = init * (1 - i/max_iter)^power. The schedule is
// only defined on [0, max_iter]; running past the end is a caller bug, not
// something to clamp silently.
inline double poly_lr(long iter, long max_iter, double init_lr, double power) {
  require(max_iter > 0, "poly_lr: max_iter must be positive");
  require(iter >= 0 && iter <= max_iter, "poly_lr: iter outside [0, max_iter]");
  return init_lr *
         std::pow(1.0 - static_cast<double>(iter) / static_cast<double>(max_iter), power);
}

// Classical coupled-weight-decay momentum step:
//   b <- m*b + g + wd*theta;  theta <- theta - lr*b
template <typename S>
void sgd_update(AVec<S>& theta, const AVec<S>& grad, AVec<S>& momentum, double lr,
                double m, double wd) {
  require(theta.size() == grad.size() && theta.size() == momentum.size(),
          "sgd_update: size mismatch");
  for (std::size_t i = 0; i < theta.size(); ++i) {
    const double b = m * static_cast<double>(momentum[i]) +
                     static_cast<double>(grad[i]) +
                     wd * static_cast<double>(theta[i]);
    momentum[i] = static_cast<S>(b);
    theta[i] = static_cast<S>(static_cast<double>(theta[i]) - lr * b);
  }
}

template <typename S>
bool has_nonfinite(const Tensor<S>& t) {
  for (std::size_t i = 0; i < t.size(); ++i)
    if (!std::isfinite(static_cast<double>(t.v[i]))) return true;
  return false;
}

}  // namespace propl
