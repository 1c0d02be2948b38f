#pragma once

// Uncertainty-guided pseudo-label calibration. The bottleneck feature map is
// perturbed N times, each perturbed copy is decoded through the supervised
// decoder, and the per-pixel ensemble is reduced to a calibrated soft target:
// the mean damped by exp(-variance), so pixels the ensemble disagrees on are
// pulled toward zero and contribute smaller gradients downstream.

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <string>
#include <vector>

#include "propl/model.hpp"
#include "propl/rng.hpp"
#include "propl/tensor.hpp"

namespace propl {

enum class PerturbKind { kDropout, kGaussian };

inline std::string to_string(PerturbKind k) {
  return k == PerturbKind::kDropout ? "dropout" : "gaussian";
}

inline PerturbKind perturb_kind_from_string(const std::string& s) {
  if (s == "dropout") return PerturbKind::kDropout;
  if (s == "gaussian") return PerturbKind::kGaussian;
  throw std::runtime_error("unknown perturbation kind: \"" + s +
                           "\" (expected dropout or gaussian)");
}

// One stochastic copy of a feature map. Dropout is inverted (survivors are
// scaled by 1/(1-rate)) so the map keeps its expectation; gaussian adds noise
// with sigma = rate * std(v), scaling the disturbance to the feature's own
// spread. Elements are visited in flat row-major order, so a given rng state
// yields one reproducible mask.
template <typename S>
Tensor<S> perturb_feature(const Tensor<S>& v, PerturbKind kind, double rate, Rng& rng) {
  Tensor<S> out = v;
  if (kind == PerturbKind::kDropout) {
    require(rate >= 0.0 && rate < 1.0, "perturb_feature: dropout rate must be in [0,1)");
    if (rate == 0.0) return out;  // exact no-op, not a scaled copy
    const S keep = static_cast<S>(1.0 / (1.0 - rate));
    for (std::size_t i = 0; i < out.size(); ++i)
      out.v[i] = rng.uniform() < rate ? S(0) : out.v[i] * keep;
    return out;
  }
  require(rate > 0.0, "perturb_feature: gaussian rate must be positive");
  double mean = 0.0;
  for (std::size_t i = 0; i < v.size(); ++i) mean += static_cast<double>(v.v[i]);
  mean /= static_cast<double>(v.size());
  double var = 0.0;
  for (std::size_t i = 0; i < v.size(); ++i) {
    const double d = static_cast<double>(v.v[i]) - mean;
    var += d * d;
  }
  var /= static_cast<double>(v.size());
  const S sigma = static_cast<S>(rate * std::sqrt(var));
  for (std::size_t i = 0; i < out.size(); ++i)
    out.v[i] += sigma * static_cast<S>(rng.normal());
  return out;
}

template <typename S>
struct PseudoLabelTriple {
  Tensor<S> mu;     // per-pixel ensemble mean
  Tensor<S> gamma;  // per-pixel population variance
  Tensor<S> y_hat;  // exp(-gamma) * mu, the calibrated target
  int n_passes = 0;
  PerturbKind kind = PerturbKind::kDropout;
  double rate = 0.0;
};

// Reduces N probability maps to (mean, variance, calibrated target). The
// variance uses the 1/N population convention, so for values in [0,1] it is
// bounded by 0.25 and the damping factor exp(-gamma) stays in [e^-0.25, 1].
// The per-pixel ensemble is sorted before reduction: every permutation of
// the same passes then reduces the same value sequence, which makes the
// result invariant to pass order bit for bit (a plain left-to-right sum is
// not, once the optimizer fuses multiply-adds). An all-equal ensemble short-
// circuits to variance zero, so it is a bitwise fixed point for every N.
template <typename S>
PseudoLabelTriple<S> calibrate(const std::vector<Tensor<S>>& masks) {
  require(masks.size() >= 2,
          "calibrate: needs at least 2 decoded passes; with one pass the variance "
          "is undefined as an uncertainty signal");
  const int h = masks[0].h, w = masks[0].w, c = masks[0].c;
  for (const auto& m : masks)
    require(m.h == h && m.w == w && m.c == c, "calibrate: pass shapes differ");
  const auto n = static_cast<double>(masks.size());

  PseudoLabelTriple<S> out;
  out.mu = Tensor<S>(h, w, c);
  out.gamma = Tensor<S>(h, w, c);
  out.y_hat = Tensor<S>(h, w, c);
  out.n_passes = static_cast<int>(masks.size());
  std::vector<double> ys(masks.size());
  for (std::size_t i = 0; i < out.mu.size(); ++i) {
    for (std::size_t p = 0; p < masks.size(); ++p) {
      const double y = static_cast<double>(masks[p].v[i]);
      require(y >= 0.0 && y <= 1.0, "calibrate: mask values must lie in [0,1]");
      ys[p] = y;
    }
    std::sort(ys.begin(), ys.end());
    double mu = ys.front(), var = 0.0;
    if (ys.front() != ys.back()) {
      double sum = 0.0;
      for (const double y : ys) sum += y;
      mu = sum / n;
      for (const double y : ys) {
        const double d = y - mu;
        var += d * d;
      }
      var /= n;
    }
    out.mu.v[i] = static_cast<S>(mu);
    out.gamma.v[i] = static_cast<S>(var);
    out.y_hat.v[i] = static_cast<S>(std::exp(-var) * mu);
  }
  return out;
}

// Full pseudo-label pass for one unlabeled image: encode once, decode the
// supervised branch N times with an independently perturbed bottleneck (the
// three shallower skips stay clean), and calibrate the sigmoided ensemble.
// Pure value computation -- nothing here is connected to any gradient.
template <typename S>
PseudoLabelTriple<S> generate_pseudo_labels(const Model<S>& model, const S* theta,
                                            const Tensor<S>& image, const TokenMat<S>& t,
                                            int n_passes, PerturbKind kind, double rate,
                                            std::uint64_t seed,
                                            bool prompt_enabled = true) {
  require(n_passes >= 2, "generate_pseudo_labels: n_passes must be at least 2");
  EncoderCache<S> ec;
  const MultiScaleFeatures<S> feats = model.encode(theta, image, ec);

  std::vector<Tensor<S>> passes;
  passes.reserve(static_cast<std::size_t>(n_passes));
  for (int p = 0; p < n_passes; ++p) {
    Rng rng(mix_seed({seed, static_cast<std::uint64_t>(p)}));
    MultiScaleFeatures<S> fp = feats;
    fp.v[3] = perturb_feature(feats.v[3], kind, rate, rng);
    DecoderCache<S> dc;
    Tensor<S> logits = model.decode(theta, fp, t, Which::kSd, prompt_enabled, dc);
    Tensor<S> prob(logits.h, logits.w, 1);
    for (std::size_t i = 0; i < logits.size(); ++i)
      prob.v[i] = stable_sigmoid(logits.v[i]);
    passes.push_back(std::move(prob));
  }
  PseudoLabelTriple<S> out = calibrate(passes);
  out.kind = kind;
  out.rate = rate;
  return out;
}

}  // namespace propl
