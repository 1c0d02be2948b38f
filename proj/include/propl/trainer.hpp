#pragma once

// Semi-supervised training loop. Each step takes one labeled batch through
// the supervised decoder and one equal-sized unlabeled batch through the
// pseudo decoder, where the targets are calibrated pseudo labels produced by
// the supervised branch. Both losses flow into the shared encoder; a single
// momentum-SGD update with a polynomial learning-rate decay closes the step.
//
// An epoch is one pass over the labeled set (the unlabeled pool is cycled to
// match). All stochastic choices — shuffles, task picks, augmentation draws,
// perturbation streams — come from named seeds, so a run is reproducible
// bit-for-bit.

#include <cmath>
#include <cstdint>
#include <cstdio>
#include <filesystem>
#include <fstream>
#include <map>
#include <ostream>
#include <string>
#include <vector>

#include <nlohmann/json.hpp>

#include "propl/augment.hpp"
#include "propl/checkpoint.hpp"
#include "propl/dataset.hpp"
#include "propl/losses.hpp"
#include "propl/metrics.hpp"
#include "propl/model.hpp"
#include "propl/prompt.hpp"
#include "propl/uplc.hpp"

namespace propl {

struct TrainConfig {
  int batch = 16;
  int epochs = 200;
  double init_lr = 1e-3;
  double power = 0.9;
  double momentum = 0.9;
  double weight_decay = 1e-5;
  int uplc_n = 2;
  PerturbKind uplc_kind = PerturbKind::kDropout;
  double uplc_rate = 0.3;
  double lambda_u = 1.0;
  double w_bce = 1.0;
  double w_dice = 1.0;
  std::uint64_t seed_model = 1;
  std::uint64_t seed_data = 2;
  std::uint64_t seed_perturb = 3;
  bool prompt_enabled = true;
  bool uplc_enabled = true;
  bool augment_enabled = true;
  int eval_every = 1;  // evaluate the test split every k epochs (final always)
  ArchConfig arch;
};

inline void validate(const TrainConfig& c) {
  validate(c.arch);
  require(c.batch >= 1, "train config: batch must be at least 1");
  require(c.epochs >= 1, "train config: epochs must be at least 1");
  require(c.init_lr > 0.0, "train config: init_lr must be positive");
  require(c.power > 0.0, "train config: power must be positive");
  require(c.momentum >= 0.0 && c.momentum < 1.0, "train config: momentum in [0,1)");
  require(c.weight_decay >= 0.0, "train config: weight_decay must be non-negative");
  require(c.uplc_n >= 2, "train config: uplc_n must be at least 2");
  require(c.lambda_u >= 0.0, "train config: lambda_u must be non-negative");
  require(c.eval_every >= 1, "train config: eval_every must be at least 1");
}

inline nlohmann::ordered_json train_config_to_json(const TrainConfig& c) {
  return {{"batch", c.batch},
          {"epochs", c.epochs},
          {"init_lr", c.init_lr},
          {"power", c.power},
          {"momentum", c.momentum},
          {"weight_decay", c.weight_decay},
          {"uplc_n", c.uplc_n},
          {"uplc_kind", to_string(c.uplc_kind)},
          {"uplc_rate", c.uplc_rate},
          {"lambda_u", c.lambda_u},
          {"w_bce", c.w_bce},
          {"w_dice", c.w_dice},
          {"seed_model", c.seed_model},
          {"seed_data", c.seed_data},
          {"seed_perturb", c.seed_perturb},
          {"prompt_enabled", c.prompt_enabled},
          {"uplc_enabled", c.uplc_enabled},
          {"augment_enabled", c.augment_enabled},
          {"eval_every", c.eval_every},
          {"arch", arch_to_json(c.arch)}};
}

inline TrainConfig train_config_from_json(const nlohmann::json& j) {
  TrainConfig c;
  c.batch = j.value("batch", c.batch);
  c.epochs = j.value("epochs", c.epochs);
  c.init_lr = j.value("init_lr", c.init_lr);
  c.power = j.value("power", c.power);
  c.momentum = j.value("momentum", c.momentum);
  c.weight_decay = j.value("weight_decay", c.weight_decay);
  c.uplc_n = j.value("uplc_n", c.uplc_n);
  if (j.contains("uplc_kind"))
    c.uplc_kind = perturb_kind_from_string(j.at("uplc_kind").get<std::string>());
  c.uplc_rate = j.value("uplc_rate", c.uplc_rate);
  c.lambda_u = j.value("lambda_u", c.lambda_u);
  c.w_bce = j.value("w_bce", c.w_bce);
  c.w_dice = j.value("w_dice", c.w_dice);
  c.seed_model = j.value("seed_model", c.seed_model);
  c.seed_data = j.value("seed_data", c.seed_data);
  c.seed_perturb = j.value("seed_perturb", c.seed_perturb);
  c.prompt_enabled = j.value("prompt_enabled", c.prompt_enabled);
  c.uplc_enabled = j.value("uplc_enabled", c.uplc_enabled);
  c.augment_enabled = j.value("augment_enabled", c.augment_enabled);
  c.eval_every = j.value("eval_every", c.eval_every);
  if (j.contains("arch")) c.arch = arch_from_json(j.at("arch"));
  return c;
}

template <typename S>
struct TrainState {
  Model<S> model;
  AVec<S> momentum;
  long iter = 0;
  long max_iter = 0;

  explicit TrainState(const TrainConfig& cfg) : model(cfg.arch) {
    model.init_params(cfg.seed_model);
    momentum.assign(model.params.size(), S(0));
  }
};

template <typename S>
struct LabeledBatch {
  std::vector<Tensor<S>> images;
  std::vector<Tensor<S>> targets;  // (H, W, 1), hard 0/1 cast to S
  std::vector<int> task_ids;
};

template <typename S>
struct UnlabeledBatch {
  std::vector<Tensor<S>> images;
  std::vector<int> task_ids;  // prompt to condition both branches on
};

struct StepStats {
  long iter = 0;
  double lr = 0.0;
  double loss_sup = 0.0;
  double loss_unsup = 0.0;
};

// One optimization step. `injected_targets` substitutes precomputed pseudo
// targets for the unlabeled batch (the generation path is skipped entirely);
// training passes nullptr.
template <typename S>
StepStats train_step(TrainState<S>& st, const TrainConfig& cfg,
                     const LabeledBatch<S>& lb, const UnlabeledBatch<S>& ub,
                     const std::map<int, TokenMat<S>>& prompts,
                     const std::vector<Tensor<S>>* injected_targets = nullptr) {
  require(st.max_iter > 0 && st.iter < st.max_iter,
          "train_step: iteration budget not set or exhausted");
  require(!lb.images.empty(), "train_step: empty labeled batch");
  require(lb.images.size() == lb.targets.size() &&
              lb.images.size() == lb.task_ids.size(),
          "train_step: labeled batch fields disagree");
  require(ub.images.size() == ub.task_ids.size(),
          "train_step: unlabeled batch fields disagree");

  const double lr = poly_lr(st.iter, st.max_iter, cfg.init_lr, cfg.power);
  const S* theta = st.model.params.data();
  AVec<S> grad(st.model.params.size(), S(0));
  ForwardCache<S> cc;

  const auto step_branch = [&](const Tensor<S>& image, const Tensor<S>& target,
                               int task_id, Which which, double weight) {
    Tensor<S> logits = st.model.forward_logits(theta, image, prompts.at(task_id), which,
                                               cfg.prompt_enabled, cc);
    Tensor<S> probs(logits.h, logits.w, 1);
    for (std::size_t i = 0; i < logits.size(); ++i)
      probs.v[i] = stable_sigmoid(logits.v[i]);
    const double loss = combined_loss(probs, target, cfg.w_bce, cfg.w_dice);
    Tensor<S> gp = combined_grad(probs, target, cfg.w_bce, cfg.w_dice);
    for (std::size_t i = 0; i < gp.size(); ++i) {
      const double p = static_cast<double>(probs.v[i]);
      gp.v[i] = static_cast<S>(static_cast<double>(gp.v[i]) * p * (1.0 - p) * weight);
    }
    st.model.backward(theta, cc, gp, grad.data());
    return loss;
  };

  double l_sup = 0.0;
  const double wl = 1.0 / static_cast<double>(lb.images.size());
  for (std::size_t i = 0; i < lb.images.size(); ++i)
    l_sup += step_branch(lb.images[i], lb.targets[i], lb.task_ids[i], Which::kSd, wl);
  l_sup *= wl;

  double l_unsup = 0.0;
  if (cfg.lambda_u != 0.0 && !ub.images.empty()) {
    if (injected_targets)
      require(injected_targets->size() == ub.images.size(),
              "train_step: injected target count mismatch");
    const double wu = cfg.lambda_u / static_cast<double>(ub.images.size());
    for (std::size_t i = 0; i < ub.images.size(); ++i) {
      Tensor<S> target;
      if (injected_targets) {
        target = (*injected_targets)[i];
      } else if (cfg.uplc_enabled) {
        const std::uint64_t seed = mix_seed({cfg.seed_perturb,
                                             static_cast<std::uint64_t>(st.iter),
                                             static_cast<std::uint64_t>(i)});
        target = generate_pseudo_labels(st.model, theta, ub.images[i],
                                        prompts.at(ub.task_ids[i]), cfg.uplc_n,
                                        cfg.uplc_kind, cfg.uplc_rate, seed,
                                        cfg.prompt_enabled)
                     .y_hat;
      } else {
        // ablation arm: raw supervised-branch probabilities, uncalibrated
        target = st.model.forward(ub.images[i], prompts.at(ub.task_ids[i]), Which::kSd,
                                  cfg.prompt_enabled);
      }
      l_unsup +=
          step_branch(ub.images[i], target, ub.task_ids[i], Which::kPd, wu);
    }
    l_unsup /= static_cast<double>(ub.images.size());
  }

  if (!std::isfinite(l_sup) || !std::isfinite(l_unsup)) {
    throw std::runtime_error(
        "training diverged: non-finite loss at iter " + std::to_string(st.iter) +
        " (lr=" + std::to_string(lr) + ", loss_sup=" + std::to_string(l_sup) +
        ", loss_unsup=" + std::to_string(l_unsup) + ")");
  }

  sgd_update(st.model.params.value, grad, st.momentum, lr, cfg.momentum,
             cfg.weight_decay);
  const StepStats out{st.iter, lr, l_sup, l_unsup};
  ++st.iter;
  return out;
}

struct EpochRecord {
  int epoch = 0;
  long iter = 0;      // iterations completed by the end of the epoch
  double lr = 0.0;    // learning rate of the epoch's last step
  double loss_sup = 0.0;    // mean over the epoch's steps
  double loss_unsup = 0.0;  // mean over the epoch's steps
  bool evaluated = false;
  EvalResult eval;
};

inline void write_history_csv(const std::filesystem::path& path,
                              const std::vector<EpochRecord>& history,
                              const std::vector<int>& task_ids) {
  std::ofstream f(path, std::ios::trunc);
  require(f.good(), "cannot open for write: " + path.string());
  f << "epoch,iter,lr,loss_sup,loss_unsup";
  for (int tid : task_ids) f << ",dice_" << tid << ",iou_" << tid << ",hd95_" << tid;
  f << ",mdice,miou\n";
  char buf[64];
  const auto num = [&](double v) {
    std::snprintf(buf, sizeof(buf), "%.17g", v);
    f << ',' << buf;
  };
  for (const auto& r : history) {
    f << r.epoch << ',' << r.iter;
    num(r.lr);
    num(r.loss_sup);
    num(r.loss_unsup);
    if (r.evaluated) {
      for (int tid : task_ids) {
        const TaskReport* tr = nullptr;
        for (const auto& t : r.eval.tasks)
          if (t.task_id == tid) tr = &t;
        require(tr != nullptr, "history: evaluation lacks task " + std::to_string(tid));
        num(tr->dice_pct);
        num(tr->iou_pct);
        num(tr->hd95_mean);
      }
      num(r.eval.mdice_pct);
      num(r.eval.miou_pct);
    } else {
      for (std::size_t i = 0; i < 3 * task_ids.size() + 2; ++i) f << ",nan";
    }
    f << '\n';
  }
  require(f.good(), "write failed: " + path.string());
}

// Checkpoints always store f32; training at another precision is converted.
template <typename S>
ParamStore<float> to_float_params(const ParamStore<S>& p) {
  ParamStore<float> out;
  for (const auto& e : p.entries()) out.add(e.name, e.shape);
  for (std::size_t i = 0; i < p.size(); ++i)
    out.value[i] = static_cast<float>(p.value[i]);
  return out;
}

inline const ParamStore<float>& to_float_params(const ParamStore<float>& p) { return p; }

template <typename S>
struct TrainResult {
  std::vector<EpochRecord> history;
  EvalResult final_eval;
  double best_mdice_pct = 0.0;
  int best_epoch = -1;
  std::filesystem::path final_ckpt, best_ckpt, history_csv;
};

// Full run: loads the split into memory, trains for cfg.epochs epochs, tracks
// the best test mDice, and leaves final.ckpt, best.ckpt and history.csv in
// out_dir. Checkpoints are written via a temp file and rename, so an
// interrupted save never damages an existing best checkpoint.
template <typename S>
TrainResult<S> train(const TrainConfig& cfg, const DatasetManifest& manifest,
                     const SplitManifest& split, const std::filesystem::path& out_dir,
                     TrainState<S>& st, std::ostream* log = nullptr) {
  validate(cfg);
  require(!split.labeled_ids.empty(), "train: no labeled samples");
  require(!split.test_ids.empty(), "train: no test samples");
  require(manifest.height % 32 == 0 && manifest.width % 32 == 0,
          "train: dataset size must be divisible by 32");
  std::filesystem::create_directories(out_dir);

  const auto load_all = [&](const std::vector<std::string>& ids) {
    std::vector<ImageSample> out;
    out.reserve(ids.size());
    for (const auto& id : ids) out.push_back(load_sample(manifest, id));
    return out;
  };
  const std::vector<ImageSample> labeled = load_all(split.labeled_ids);
  const std::vector<ImageSample> unlabeled = load_all(split.unlabeled_ids);
  const std::vector<ImageSample> test = load_all(split.test_ids);

  std::map<int, TokenMat<S>> prompts;
  std::vector<int> task_ids;
  for (const auto& t : manifest.tasks) {
    prompts[t.task_id] = encode_prompt<S>(t.prompt_text, cfg.arch.embed_dim).t;
    task_ids.push_back(t.task_id);
  }

  const long n_l = static_cast<long>(labeled.size());
  const long steps_per_epoch = (n_l + cfg.batch - 1) / cfg.batch;  // partial batch kept
  st.max_iter = static_cast<long>(cfg.epochs) * steps_per_epoch;

  const auto pick_task = [&](Rng& rng) {
    return task_ids[static_cast<std::size_t>(
        rng.uniform_int(static_cast<std::uint64_t>(task_ids.size())))];
  };
  const auto make_input = [&](const ImageSample& s, int tid, Rng& rng, bool with_target,
                              Tensor<S>* target) {
    const Tensor<std::uint8_t>& mask = s.masks.at(tid);
    if (!cfg.augment_enabled) {
      if (with_target) *target = mask.template cast<S>();
      return s.image.template cast<S>();
    }
    AugmentedPair<float> ap = augment(s.image, mask, rng);
    if (with_target) *target = ap.mask.template cast<S>();
    return ap.image.template cast<S>();
  };

  TrainResult<S> res;
  res.final_ckpt = out_dir / "final.ckpt";
  res.best_ckpt = out_dir / "best.ckpt";
  res.history_csv = out_dir / "history.csv";

  for (int epoch = 0; epoch < cfg.epochs; ++epoch) {
    Rng erng(mix_seed({cfg.seed_data, static_cast<std::uint64_t>(epoch)}));
    std::vector<std::size_t> lorder(labeled.size());
    for (std::size_t i = 0; i < lorder.size(); ++i) lorder[i] = i;
    erng.shuffle(lorder);
    std::vector<std::size_t> uorder(unlabeled.size());
    for (std::size_t i = 0; i < uorder.size(); ++i) uorder[i] = i;
    if (!uorder.empty()) erng.shuffle(uorder);
    std::size_t upos = 0;

    double sum_sup = 0.0, sum_unsup = 0.0;
    double last_lr = 0.0;
    for (long s = 0; s < steps_per_epoch; ++s) {
      const std::size_t lo = static_cast<std::size_t>(s) * cfg.batch;
      const std::size_t hi =
          std::min(lo + static_cast<std::size_t>(cfg.batch), labeled.size());

      LabeledBatch<S> lb;
      for (std::size_t i = lo; i < hi; ++i) {
        const ImageSample& smp = labeled[lorder[i]];
        const int tid = pick_task(erng);
        Tensor<S> target;
        lb.images.push_back(make_input(smp, tid, erng, true, &target));
        lb.targets.push_back(std::move(target));
        lb.task_ids.push_back(tid);
      }
      UnlabeledBatch<S> ub;
      for (std::size_t i = lo; i < hi && !uorder.empty(); ++i) {
        const ImageSample& smp = unlabeled[uorder[upos]];
        upos = (upos + 1) % uorder.size();  // cycle the shorter pool
        const int tid = pick_task(erng);
        ub.images.push_back(make_input(smp, tid, erng, false, nullptr));
        ub.task_ids.push_back(tid);
      }

      const StepStats stats = train_step(st, cfg, lb, ub, prompts);
      sum_sup += stats.loss_sup;
      sum_unsup += stats.loss_unsup;
      last_lr = stats.lr;
    }

    EpochRecord rec;
    rec.epoch = epoch;
    rec.iter = st.iter;
    rec.lr = last_lr;
    rec.loss_sup = sum_sup / static_cast<double>(steps_per_epoch);
    rec.loss_unsup = sum_unsup / static_cast<double>(steps_per_epoch);

    if (epoch % cfg.eval_every == 0 || epoch == cfg.epochs - 1) {
      rec.evaluated = true;
      rec.eval = evaluate(st.model, st.model.params.data(), test, prompts,
                          cfg.prompt_enabled);
      if (res.best_epoch < 0 || rec.eval.mdice_pct > res.best_mdice_pct) {
        res.best_mdice_pct = rec.eval.mdice_pct;
        res.best_epoch = epoch;
        save_checkpoint(res.best_ckpt, cfg.arch, to_float_params(st.model.params));
      }
      res.final_eval = rec.eval;
    }
    res.history.push_back(rec);
    if (log) {
      *log << "epoch " << epoch << " iter " << rec.iter << " lr " << rec.lr
           << " loss_sup " << rec.loss_sup << " loss_unsup " << rec.loss_unsup;
      if (rec.evaluated) *log << " mdice " << rec.eval.mdice_pct;
      *log << '\n';
    }
  }

  save_checkpoint(res.final_ckpt, cfg.arch, to_float_params(st.model.params));
  write_history_csv(res.history_csv, res.history, task_ids);
  return res;
}

}  // namespace propl
