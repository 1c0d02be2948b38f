// propl — prompt-guided semi-supervised segmentation workbench.
//
// Subcommands:
//   synth   generate a synthetic multi-task dataset
//   train   train a model on a dataset split
//   eval    evaluate a checkpoint on a split
//   ablate  prompt/uplc ablation grid plus a perturbation-count sweep
//   report  tables and charts from experiment records
//
// Every run writes a self-contained record.json next to its artifacts so the
// experiment can be re-run exactly from the record alone.

#include <algorithm>
#include <array>
#include <chrono>
#include <cmath>
#include <cstdio>
#include <filesystem>
#include <fstream>
#include <iostream>
#include <map>
#include <optional>
#include <sstream>
#include <string>
#include <vector>

#include <nlohmann/json.hpp>

#include "CLI11.hpp"
#include "propl/checkpoint.hpp"
#include "propl/dataset.hpp"
#include "propl/metrics.hpp"
#include "propl/trainer.hpp"
#include "propl/version.hpp"

namespace {

namespace fs = std::filesystem;
using nlohmann::json;
using nlohmann::ordered_json;

// ---------------------------------------------------------------------------
// Small utilities.
// ---------------------------------------------------------------------------

std::string g17(double v) {
  char buf[64];
  std::snprintf(buf, sizeof(buf), "%.17g", v);
  return buf;
}

std::string f2(double v) {
  char buf[64];
  std::snprintf(buf, sizeof(buf), "%.2f", v);
  return buf;
}

// Accepts "1/8" style rationals or plain decimals; returns the value and
// echoes the original text so artifacts show what was requested.
double parse_fraction(const std::string& text) {
  const auto slash = text.find('/');
  double v = 0.0;
  if (slash == std::string::npos) {
    v = std::stod(text);
  } else {
    const double num = std::stod(text.substr(0, slash));
    const double den = std::stod(text.substr(slash + 1));
    propl::require(den != 0.0, "labeled fraction has zero denominator: " + text);
    v = num / den;
  }
  propl::require(v > 0.0 && v < 1.0, "labeled fraction must be in (0,1): " + text);
  return v;
}

// Refuses to write into a non-empty directory unless --force was given.
void ensure_outdir(const fs::path& out, bool force) {
  if (fs::exists(out) && !fs::is_empty(out) && !force) {
    throw std::runtime_error("output directory is not empty (use --force to overwrite): " +
                             out.string());
  }
  fs::create_directories(out);
}

std::vector<int> parse_int_list(const std::string& s) {
  std::vector<int> out;
  std::stringstream ss(s);
  std::string tok;
  while (std::getline(ss, tok, ',')) {
    if (!tok.empty()) out.push_back(std::stoi(tok));
  }
  propl::require(!out.empty(), "empty integer list: " + s);
  return out;
}

std::array<int, 4> parse_channels(const std::string& s) {
  const auto v = parse_int_list(s);
  propl::require(v.size() == 4, "--channels needs exactly 4 comma-separated widths");
  return {v[0], v[1], v[2], v[3]};
}

std::string slurp(const fs::path& p) {
  std::ifstream f(p, std::ios::binary);
  propl::require(f.good(), "cannot open: " + p.string());
  std::stringstream ss;
  ss << f.rdbuf();
  return ss.str();
}

void spit(const fs::path& p, const std::string& content) {
  std::ofstream f(p, std::ios::binary | std::ios::trunc);
  propl::require(f.good(), "cannot open for write: " + p.string());
  f << content;
  propl::require(f.good(), "write failed: " + p.string());
}

std::string xml_escape(const std::string& s) {
  std::string out;
  for (char c : s) {
    if (c == '&')
      out += "&amp;";
    else if (c == '<')
      out += "&lt;";
    else if (c == '>')
      out += "&gt;";
    else
      out += c;
  }
  return out;
}

// ---------------------------------------------------------------------------
// Evaluation serialization and table printing.
// ---------------------------------------------------------------------------

ordered_json eval_to_json(const propl::EvalResult& ev) {
  ordered_json jt = ordered_json::array();
  for (const auto& t : ev.tasks) {
    jt.push_back({{"task_id", t.task_id},
                  {"dice_pct", t.dice_pct},
                  {"iou_pct", t.iou_pct},
                  {"hd95_mean", t.hd95_mean},
                  {"hd95_excluded", t.hd95_excluded},
                  {"n_samples", t.n_samples}});
  }
  return {{"tasks", jt}, {"mdice_pct", ev.mdice_pct}, {"miou_pct", ev.miou_pct}};
}

std::string task_name(const propl::DatasetManifest& m, int tid) {
  for (const auto& t : m.tasks)
    if (t.task_id == tid) return t.name;
  return "task" + std::to_string(tid);
}

void print_eval_table(std::ostream& os, const propl::DatasetManifest& m,
                      const propl::EvalResult& ev) {
  char line[256];
  std::snprintf(line, sizeof(line), "%-4s %-24s %6s %9s %9s %12s %10s\n", "task",
                "name", "n", "dice%", "iou%", "hd95(mean)", "hd95-excl");
  os << line;
  int n_total = 0;
  for (const auto& t : ev.tasks) {
    n_total += t.n_samples;
    std::snprintf(line, sizeof(line), "%-4d %-24s %6d %9.2f %9.2f %12.2f %10d\n",
                  t.task_id, task_name(m, t.task_id).c_str(), t.n_samples, t.dice_pct,
                  t.iou_pct, t.hd95_mean, t.hd95_excluded);
    os << line;
  }
  std::snprintf(line, sizeof(line), "%-4s %-24s %6d %9.2f %9.2f\n", "mean", "",
                n_total, ev.mdice_pct, ev.miou_pct);
  os << line;
}

// Machine-readable form; metric fields use full %.17g precision so values can
// be compared exactly against history.csv (same code path, same doubles).
void print_eval_csv(std::ostream& os, const propl::DatasetManifest& m,
                    const propl::EvalResult& ev) {
  os << "task_id,name,n_samples,dice_pct,iou_pct,hd95_mean,hd95_excluded\n";
  int n_total = 0;
  for (const auto& t : ev.tasks) {
    n_total += t.n_samples;
    os << t.task_id << ',' << task_name(m, t.task_id) << ',' << t.n_samples << ','
       << g17(t.dice_pct) << ',' << g17(t.iou_pct) << ',' << g17(t.hd95_mean) << ','
       << t.hd95_excluded << '\n';
  }
  os << "mean,," << n_total << ',' << g17(ev.mdice_pct) << ',' << g17(ev.miou_pct)
     << ",,\n";
}

// ---------------------------------------------------------------------------
// SVG charts. Plain hand-rolled vector output: deterministic byte-for-byte
// given the same data, no external tooling.
// ---------------------------------------------------------------------------

constexpr const char* kPalette[] = {"#1f77b4", "#d62728", "#2ca02c", "#9467bd",
                                    "#ff7f0e", "#8c564b", "#e377c2", "#7f7f7f"};
constexpr int kPaletteSize = 8;

struct Series {
  std::string name;
  std::vector<std::array<double, 2>> pts;  // (x, y); NaN y values are skipped
};

struct Canvas {
  double w = 720, h = 440;
  double ml = 70, mr = 170, mt = 44, mb = 54;
  double pw() const { return w - ml - mr; }
  double ph() const { return h - mt - mb; }
};

std::string num(double v) {
  char buf[48];
  std::snprintf(buf, sizeof(buf), "%.2f", v);
  return buf;
}

std::string tick_label(double v) {
  char buf[48];
  std::snprintf(buf, sizeof(buf), "%.4g", v);
  return buf;
}

void svg_header(std::string& s, const Canvas& c, const std::string& title) {
  s += "<svg xmlns=\"http://www.w3.org/2000/svg\" width=\"" + num(c.w) +
       "\" height=\"" + num(c.h) + "\" viewBox=\"0 0 " + num(c.w) + " " + num(c.h) +
       "\">\n";
  s += "<rect width=\"100%\" height=\"100%\" fill=\"white\"/>\n";
  s += "<text x=\"" + num(c.ml + c.pw() / 2) +
       "\" y=\"24\" text-anchor=\"middle\" font-family=\"monospace\" "
       "font-size=\"15\">" +
       xml_escape(title) + "</text>\n";
}

void svg_axes(std::string& s, const Canvas& c, double xmin, double xmax, double ymin,
              double ymax, const std::string& xlabel, const std::string& ylabel) {
  const double x0 = c.ml, y0 = c.mt + c.ph();
  s += "<line x1=\"" + num(x0) + "\" y1=\"" + num(y0) + "\" x2=\"" +
       num(x0 + c.pw()) + "\" y2=\"" + num(y0) + "\" stroke=\"black\"/>\n";
  s += "<line x1=\"" + num(x0) + "\" y1=\"" + num(y0) + "\" x2=\"" + num(x0) +
       "\" y2=\"" + num(c.mt) + "\" stroke=\"black\"/>\n";
  for (int i = 0; i <= 5; ++i) {
    const double fx = xmin + (xmax - xmin) * i / 5.0;
    const double px = x0 + c.pw() * i / 5.0;
    s += "<line x1=\"" + num(px) + "\" y1=\"" + num(y0) + "\" x2=\"" + num(px) +
         "\" y2=\"" + num(y0 + 4) + "\" stroke=\"black\"/>\n";
    s += "<text x=\"" + num(px) + "\" y=\"" + num(y0 + 18) +
         "\" text-anchor=\"middle\" font-family=\"monospace\" font-size=\"11\">" +
         tick_label(fx) + "</text>\n";
    const double fy = ymin + (ymax - ymin) * i / 5.0;
    const double py = y0 - c.ph() * i / 5.0;
    s += "<line x1=\"" + num(x0 - 4) + "\" y1=\"" + num(py) + "\" x2=\"" + num(x0) +
         "\" y2=\"" + num(py) + "\" stroke=\"black\"/>\n";
    s += "<text x=\"" + num(x0 - 8) + "\" y=\"" + num(py + 4) +
         "\" text-anchor=\"end\" font-family=\"monospace\" font-size=\"11\">" +
         tick_label(fy) + "</text>\n";
  }
  s += "<text x=\"" + num(x0 + c.pw() / 2) + "\" y=\"" + num(c.h - 14) +
       "\" text-anchor=\"middle\" font-family=\"monospace\" font-size=\"12\">" +
       xml_escape(xlabel) + "</text>\n";
  s += "<text x=\"18\" y=\"" + num(c.mt + c.ph() / 2) +
       "\" text-anchor=\"middle\" font-family=\"monospace\" font-size=\"12\" "
       "transform=\"rotate(-90 18 " +
       num(c.mt + c.ph() / 2) + ")\">" + xml_escape(ylabel) + "</text>\n";
}

void svg_legend(std::string& s, const Canvas& c, const std::vector<std::string>& names) {
  const double lx = c.ml + c.pw() + 14;
  for (std::size_t i = 0; i < names.size(); ++i) {
    const double ly = c.mt + 10 + 18.0 * static_cast<double>(i);
    s += "<rect x=\"" + num(lx) + "\" y=\"" + num(ly - 9) +
         "\" width=\"11\" height=\"11\" fill=\"" +
         kPalette[i % kPaletteSize] + "\"/>\n";
    std::string nm = names[i];
    if (nm.size() > 18) nm = nm.substr(0, 17) + "~";
    s += "<text x=\"" + num(lx + 16) + "\" y=\"" + num(ly + 1) +
         "\" font-family=\"monospace\" font-size=\"11\">" + xml_escape(nm) +
         "</text>\n";
  }
}

void write_svg_lines(const fs::path& path, const std::string& title,
                     const std::string& xlabel, const std::string& ylabel,
                     const std::vector<Series>& series) {
  double xmin = 0, xmax = 1, ymin = 0, ymax = 1;
  bool seen = false;
  for (const auto& se : series) {
    for (const auto& p : se.pts) {
      if (!std::isfinite(p[1])) continue;
      if (!seen) {
        xmin = xmax = p[0];
        ymin = ymax = p[1];
        seen = true;
      } else {
        xmin = std::min(xmin, p[0]);
        xmax = std::max(xmax, p[0]);
        ymin = std::min(ymin, p[1]);
        ymax = std::max(ymax, p[1]);
      }
    }
  }
  if (xmax == xmin) xmax = xmin + 1;
  const double ypad = (ymax - ymin) > 0 ? 0.05 * (ymax - ymin) : 1.0;
  ymin -= ypad;
  ymax += ypad;

  Canvas c;
  std::string s;
  svg_header(s, c, title);
  svg_axes(s, c, xmin, xmax, ymin, ymax, xlabel, ylabel);
  std::vector<std::string> names;
  for (std::size_t i = 0; i < series.size(); ++i) {
    names.push_back(series[i].name);
    std::string poly;
    for (const auto& p : series[i].pts) {
      if (!std::isfinite(p[1])) continue;
      const double px = c.ml + (p[0] - xmin) / (xmax - xmin) * c.pw();
      const double py = c.mt + c.ph() - (p[1] - ymin) / (ymax - ymin) * c.ph();
      poly += num(px) + "," + num(py) + " ";
    }
    if (!poly.empty()) poly.pop_back();
    s += "<polyline fill=\"none\" stroke=\"" + std::string(kPalette[i % kPaletteSize]) +
         "\" stroke-width=\"1.5\" points=\"" + poly + "\"/>\n";
  }
  svg_legend(s, c, names);
  s += "</svg>\n";
  spit(path, s);
}

// Grouped bars: one group per record, one bar per task.
void write_svg_bars(const fs::path& path, const std::string& title,
                    const std::string& ylabel,
                    const std::vector<std::string>& group_names,
                    const std::vector<std::string>& bar_names,
                    const std::vector<std::vector<double>>& vals) {
  double ymax = 1.0;
  for (const auto& g : vals)
    for (double v : g)
      if (std::isfinite(v)) ymax = std::max(ymax, v);
  ymax *= 1.05;

  Canvas c;
  std::string s;
  svg_header(s, c, title);
  svg_axes(s, c, 0, static_cast<double>(group_names.size()), 0, ymax, "", ylabel);
  const double gw = c.pw() / static_cast<double>(group_names.size());
  const double bw = gw * 0.8 / static_cast<double>(bar_names.size());
  const double y0 = c.mt + c.ph();
  for (std::size_t g = 0; g < group_names.size(); ++g) {
    for (std::size_t b = 0; b < bar_names.size(); ++b) {
      const double v = vals[g][b];
      if (!std::isfinite(v)) continue;
      const double bh = v / ymax * c.ph();
      const double bx = c.ml + gw * static_cast<double>(g) + gw * 0.1 +
                        bw * static_cast<double>(b);
      s += "<rect x=\"" + num(bx) + "\" y=\"" + num(y0 - bh) + "\" width=\"" +
           num(bw) + "\" height=\"" + num(bh) + "\" fill=\"" +
           kPalette[b % kPaletteSize] + "\"/>\n";
    }
    std::string nm = group_names[g];
    if (nm.size() > 12) nm = nm.substr(0, 11) + "~";
    s += "<text x=\"" + num(c.ml + gw * (static_cast<double>(g) + 0.5)) + "\" y=\"" +
         num(y0 + 18) +
         "\" text-anchor=\"middle\" font-family=\"monospace\" font-size=\"11\">" +
         xml_escape(nm) + "</text>\n";
  }
  svg_legend(s, c, bar_names);
  s += "</svg>\n";
  spit(path, s);
}

// ---------------------------------------------------------------------------
// Shared experiment runner: trains one configuration into out_dir and writes
// config.json, split.json, history.csv, checkpoints and record.json.
// ---------------------------------------------------------------------------

ordered_json run_experiment(const propl::TrainConfig& cfg,
                            const propl::DatasetManifest& manifest,
                            const propl::SplitManifest& split, const fs::path& out_dir,
                            std::ostream* log) {
  fs::create_directories(out_dir);
  spit(out_dir / "config.json", propl::train_config_to_json(cfg).dump(2) + "\n");
  spit(out_dir / "split.json", propl::split_to_json(split).dump(2) + "\n");

  const auto t0 = std::chrono::steady_clock::now();
  propl::TrainState<float> st(cfg);
  const auto res = propl::train(cfg, manifest, split, out_dir, st, log);
  const double secs =
      std::chrono::duration<double>(std::chrono::steady_clock::now() - t0).count();

  ordered_json tasks = ordered_json::array();
  for (const auto& t : manifest.tasks) {
    tasks.push_back({{"task_id", t.task_id},
                     {"name", t.name},
                     {"prompt_text", t.prompt_text}});
  }
  ordered_json rec{
      {"kind", "propl-experiment-1"},
      {"code_version", propl::kVersion},
      {"code_hash", propl::version_hash()},
      {"dataset",
       {{"root", manifest.root.string()},
        {"generator_version", manifest.generator_version},
        {"root_seed", manifest.root_seed},
        {"image_size", {manifest.height, manifest.width}},
        {"tasks", tasks}}},
      {"config", propl::train_config_to_json(cfg)},
      {"split_path", "split.json"},
      {"split", propl::split_to_json(split)},
      {"history_path", "history.csv"},
      {"final_ckpt", "final.ckpt"},
      {"best_ckpt", "best.ckpt"},
      {"final_eval", eval_to_json(res.final_eval)},
      {"best", {{"epoch", res.best_epoch}, {"mdice_pct", res.best_mdice_pct}}},
      {"wall_seconds", secs}};
  spit(out_dir / "record.json", rec.dump(2) + "\n");
  return rec;
}

// ---------------------------------------------------------------------------
// synth
// ---------------------------------------------------------------------------

struct SynthArgs {
  std::string out;
  int tasks = 2;
  int n_samples = 64;
  int size = 64;
  std::uint64_t seed_data = 1234;
  bool force = false;
};

int cmd_synth(const SynthArgs& a) {
  ensure_outdir(a.out, a.force);
  const auto tasks = propl::default_tasks(a.tasks);
  const auto m = propl::build_dataset(a.n_samples, tasks, a.size, a.size, a.seed_data,
                                      a.out);
  std::cout << "manifest: " << (m.root / "manifest.json").string() << "\n";
  std::cout << "samples: " << m.samples.size() << " at " << m.height << "x" << m.width
            << "\n";
  for (const auto& t : m.tasks) {
    int nonempty = 0;
    double fg = 0.0;
    for (const auto& ref : m.samples) {
      const auto s = propl::load_sample(m, ref.sample_id);
      const auto& mask = s.masks.at(t.task_id);
      long on = 0;
      for (std::size_t i = 0; i < mask.size(); ++i) on += mask.v[i] ? 1 : 0;
      if (on > 0) ++nonempty;
      fg += static_cast<double>(on) / static_cast<double>(mask.size());
    }
    fg /= static_cast<double>(m.samples.size());
    std::cout << "task " << t.task_id << " (" << t.name << "): " << nonempty << "/"
              << m.samples.size() << " samples with foreground, mean foreground "
              << f2(100.0 * fg) << "%\n";
  }
  return 0;
}

// ---------------------------------------------------------------------------
// train
// ---------------------------------------------------------------------------

struct TrainArgs {
  std::string data, out, config;
  std::string labeled_fraction = "1/8";
  std::uint64_t split_seed = 9;
  std::string channels, uplc_kind;
  int embed_dim = -1, heads = -1, stage_depth = -1;
  bool force = false;
  // remaining overrides are read straight from the CLI11 subcommand
};

// ---------------------------------------------------------------------------
// eval
// ---------------------------------------------------------------------------

struct EvalArgs {
  std::string ckpt, data, split;
  std::string subset = "test";
  std::string format = "table";
  bool no_prompt = false;
};

int cmd_eval(const EvalArgs& a) {
  const auto model = propl::model_from_checkpoint(a.ckpt);
  const auto manifest = propl::load_manifest(a.data);
  const auto split = propl::split_from_json(json::parse(slurp(a.split)));

  std::vector<std::string> ids;
  if (a.subset == "test")
    ids = split.test_ids;
  else if (a.subset == "labeled")
    ids = split.labeled_ids;
  else if (a.subset == "unlabeled")
    ids = split.unlabeled_ids;
  else if (a.subset == "all") {
    ids = split.labeled_ids;
    ids.insert(ids.end(), split.unlabeled_ids.begin(), split.unlabeled_ids.end());
    ids.insert(ids.end(), split.test_ids.begin(), split.test_ids.end());
  } else {
    throw std::runtime_error("unknown subset: " + a.subset +
                             " (expected test, labeled, unlabeled or all)");
  }
  propl::require(!ids.empty(), "selected subset is empty: " + a.subset);

  std::vector<propl::ImageSample> samples;
  samples.reserve(ids.size());
  for (const auto& id : ids) samples.push_back(propl::load_sample(manifest, id));
  std::map<int, propl::TokenMat<float>> prompts;
  for (const auto& t : manifest.tasks)
    prompts[t.task_id] =
        propl::encode_prompt<float>(t.prompt_text, model.cfg.embed_dim).t;

  const auto ev = propl::evaluate(model, model.params.data(), samples, prompts,
                                  !a.no_prompt);
  if (a.format == "csv")
    print_eval_csv(std::cout, manifest, ev);
  else
    print_eval_table(std::cout, manifest, ev);
  return 0;
}

// ---------------------------------------------------------------------------
// ablate
// ---------------------------------------------------------------------------

struct AblateArm {
  std::string name;
  bool prompt = true, uplc = true;
};

int run_ablation(const propl::TrainConfig& base, const propl::DatasetManifest& manifest,
                 const propl::SplitManifest& split, const fs::path& out,
                 const std::vector<int>& sweep_n) {
  const std::vector<AblateArm> arms{{"full", true, true},
                                    {"no_uplc", true, false},
                                    {"no_prompt", false, true},
                                    {"neither", false, false}};
  std::vector<int> task_ids;
  for (const auto& t : manifest.tasks) task_ids.push_back(t.task_id);

  int failures = 0;
  std::string grid_csv = "arm,prompt,uplc,mdice_pct,miou_pct";
  for (int tid : task_ids) grid_csv += ",dice_" + std::to_string(tid);
  grid_csv += ",wall_seconds\n";

  for (const auto& arm : arms) {
    propl::TrainConfig cfg = base;
    cfg.prompt_enabled = arm.prompt;
    cfg.uplc_enabled = arm.uplc;
    const fs::path dir = out / "grid" / arm.name;
    std::cout << "== arm " << arm.name << " (prompt=" << (arm.prompt ? "on" : "off")
              << ", uplc=" << (arm.uplc ? "on" : "off") << ") ==\n";
    try {
      const auto rec = run_experiment(cfg, manifest, split, dir, &std::cout);
      grid_csv += arm.name;
      grid_csv += arm.prompt ? ",on" : ",off";
      grid_csv += arm.uplc ? ",on" : ",off";
      grid_csv += "," + g17(rec.at("final_eval").at("mdice_pct").get<double>());
      grid_csv += "," + g17(rec.at("final_eval").at("miou_pct").get<double>());
      for (int tid : task_ids) {
        double d = std::numeric_limits<double>::quiet_NaN();
        for (const auto& t : rec.at("final_eval").at("tasks"))
          if (t.at("task_id").get<int>() == tid) d = t.at("dice_pct").get<double>();
        grid_csv += "," + g17(d);
      }
      grid_csv += "," + g17(rec.at("wall_seconds").get<double>()) + "\n";
    } catch (const std::exception& e) {
      std::cerr << "arm " << arm.name << " failed: " << e.what() << "\n";
      ++failures;
    }
    spit(out / "grid.csv", grid_csv);  // partial results survive later failures
  }

  // Perturbation-count sweep on the full configuration; the axis is written
  // in ascending order so downstream readers get a monotone curve file.
  std::vector<int> ns = sweep_n;
  std::sort(ns.begin(), ns.end());
  ns.erase(std::unique(ns.begin(), ns.end()), ns.end());
  std::string sweep_csv = "uplc_n,mdice_pct,miou_pct\n";
  for (int n : ns) {
    propl::TrainConfig cfg = base;
    cfg.prompt_enabled = true;
    cfg.uplc_enabled = true;
    cfg.uplc_n = n;
    const fs::path dir = out / "sweep" / ("n" + std::to_string(n));
    std::cout << "== sweep uplc_n=" << n << " ==\n";
    try {
      const auto rec = run_experiment(cfg, manifest, split, dir, &std::cout);
      sweep_csv += std::to_string(n) + "," +
                   g17(rec.at("final_eval").at("mdice_pct").get<double>()) + "," +
                   g17(rec.at("final_eval").at("miou_pct").get<double>()) + "\n";
    } catch (const std::exception& e) {
      std::cerr << "sweep arm n=" << n << " failed: " << e.what() << "\n";
      ++failures;
    }
    spit(out / "sweep.csv", sweep_csv);
  }

  if (failures > 0) {
    std::cerr << failures << " ablation arm(s) failed; partial results kept in "
              << out.string() << "\n";
    return 1;
  }
  std::cout << "ablation grid and sweep complete: " << out.string() << "\n";
  return 0;
}

// ---------------------------------------------------------------------------
// report
// ---------------------------------------------------------------------------

struct RecordInfo {
  fs::path dir;        // directory holding record.json
  std::string name;    // dir relative to the records root
  ordered_json rec;
};

std::vector<std::string> split_csv_line(const std::string& line) {
  std::vector<std::string> out;
  std::stringstream ss(line);
  std::string tok;
  while (std::getline(ss, tok, ',')) out.push_back(tok);
  if (!line.empty() && line.back() == ',') out.push_back("");
  return out;
}

int cmd_report(const std::string& records_dir, const std::string& out_dir) {
  propl::require(fs::exists(records_dir), "records directory does not exist: " +
                                              records_dir);
  std::vector<fs::path> record_files;
  for (const auto& e : fs::recursive_directory_iterator(records_dir)) {
    if (e.is_regular_file() && e.path().filename() == "record.json")
      record_files.push_back(e.path());
  }
  std::sort(record_files.begin(), record_files.end());
  if (record_files.empty()) {
    std::cerr << "no record.json files under " << records_dir << "\n";
    return 1;
  }

  std::vector<RecordInfo> records;
  for (const auto& p : record_files) {
    RecordInfo ri;
    ri.dir = p.parent_path();
    ri.name = fs::relative(ri.dir, records_dir).generic_string();
    if (ri.name == ".") ri.name = ri.dir.filename().generic_string();
    ri.rec = ordered_json::parse(slurp(p));
    records.push_back(std::move(ri));
  }

  const fs::path out = out_dir.empty() ? fs::path(records_dir) / "report"
                                       : fs::path(out_dir);
  fs::create_directories(out);

  // Summary table (csv + aligned text).
  std::string csv =
      "name,labeled_fraction,epochs,prompt,uplc,uplc_n,mdice_pct,miou_pct,"
      "wall_seconds\n";
  std::string txt;
  char line[512];
  std::snprintf(line, sizeof(line), "%-24s %-8s %6s %7s %5s %7s %8s %8s %9s\n",
                "name", "frac", "epochs", "prompt", "uplc", "uplc_n", "mdice%",
                "miou%", "seconds");
  txt += line;
  for (const auto& ri : records) {
    const auto& cfgj = ri.rec.at("config");
    const auto& ev = ri.rec.at("final_eval");
    const std::string frac = ri.rec.at("split").value("fraction_text", std::string{});
    const bool prompt = cfgj.value("prompt_enabled", true);
    const bool uplc = cfgj.value("uplc_enabled", true);
    csv += ri.name + "," + frac + "," + std::to_string(cfgj.value("epochs", 0)) + "," +
           (prompt ? "on" : "off") + "," + (uplc ? "on" : "off") + "," +
           std::to_string(cfgj.value("uplc_n", 0)) + "," +
           g17(ev.at("mdice_pct").get<double>()) + "," +
           g17(ev.at("miou_pct").get<double>()) + "," +
           g17(ri.rec.value("wall_seconds", 0.0)) + "\n";
    std::string nm = ri.name;
    if (nm.size() > 24) nm = nm.substr(0, 23) + "~";
    std::snprintf(line, sizeof(line), "%-24s %-8s %6d %7s %5s %7d %8.2f %8.2f %9.1f\n",
                  nm.c_str(), frac.c_str(), cfgj.value("epochs", 0),
                  prompt ? "on" : "off", uplc ? "on" : "off", cfgj.value("uplc_n", 0),
                  ev.at("mdice_pct").get<double>(), ev.at("miou_pct").get<double>(),
                  ri.rec.value("wall_seconds", 0.0));
    txt += line;
  }
  spit(out / "summary.csv", csv);
  spit(out / "summary.txt", txt);
  std::cout << txt;

  if (records.size() < 2) {
    std::cout << "single record: wrote tables only (comparison charts need >= 2 runs)\n";
    std::cout << "report written to " << out.string() << "\n";
    return 0;
  }

  // Loss curves from each record's history.csv.
  std::vector<Series> loss_series;
  std::size_t max_epochs = 0;
  for (const auto& ri : records) {
    const fs::path hist = ri.dir / ri.rec.value("history_path", std::string("history.csv"));
    if (!fs::exists(hist)) continue;
    std::ifstream f(hist);
    std::string ln;
    std::getline(f, ln);
    const auto header = split_csv_line(ln);
    std::size_t ep_col = 0, loss_col = 3;
    for (std::size_t i = 0; i < header.size(); ++i) {
      if (header[i] == "epoch") ep_col = i;
      if (header[i] == "loss_sup") loss_col = i;
    }
    Series se;
    se.name = ri.name;
    while (std::getline(f, ln)) {
      const auto cells = split_csv_line(ln);
      if (cells.size() <= std::max(ep_col, loss_col)) continue;
      se.pts.push_back({std::stod(cells[ep_col]), std::stod(cells[loss_col])});
    }
    max_epochs = std::max(max_epochs, se.pts.size());
    loss_series.push_back(std::move(se));
  }
  if (!loss_series.empty()) {
    write_svg_lines(out / "loss_curves.svg", "supervised loss per epoch", "epoch",
                    "loss", loss_series);
    std::string lc = "epoch";
    for (const auto& se : loss_series) lc += "," + se.name;
    lc += "\n";
    for (std::size_t e = 0; e < max_epochs; ++e) {
      lc += std::to_string(e);
      for (const auto& se : loss_series)
        lc += "," + (e < se.pts.size() ? g17(se.pts[e][1]) : std::string{});
      lc += "\n";
    }
    spit(out / "loss_curves.csv", lc);
  }

  // Per-task Dice bars from the final evaluations.
  std::vector<int> all_tids;
  for (const auto& ri : records)
    for (const auto& t : ri.rec.at("final_eval").at("tasks")) {
      const int tid = t.at("task_id").get<int>();
      if (std::find(all_tids.begin(), all_tids.end(), tid) == all_tids.end())
        all_tids.push_back(tid);
    }
  std::sort(all_tids.begin(), all_tids.end());
  std::vector<std::string> group_names, bar_names;
  for (int tid : all_tids) bar_names.push_back("task " + std::to_string(tid));
  std::vector<std::vector<double>> vals;
  std::string bars_csv = "name";
  for (int tid : all_tids) bars_csv += ",dice_" + std::to_string(tid);
  bars_csv += "\n";
  for (const auto& ri : records) {
    group_names.push_back(ri.name);
    std::vector<double> row(all_tids.size(),
                            std::numeric_limits<double>::quiet_NaN());
    for (const auto& t : ri.rec.at("final_eval").at("tasks")) {
      const int tid = t.at("task_id").get<int>();
      const auto it = std::find(all_tids.begin(), all_tids.end(), tid);
      row[static_cast<std::size_t>(it - all_tids.begin())] =
          t.at("dice_pct").get<double>();
    }
    bars_csv += ri.name;
    for (double v : row) bars_csv += "," + (std::isfinite(v) ? g17(v) : std::string{});
    bars_csv += "\n";
    vals.push_back(std::move(row));
  }
  write_svg_bars(out / "dice_bars.svg", "final per-task Dice", "dice %", group_names,
                 bar_names, vals);
  spit(out / "dice_bars.csv", bars_csv);

  // Perturbation-count sweep curve, when an ablation left a sweep.csv around.
  std::vector<fs::path> sweeps;
  for (const auto& e : fs::recursive_directory_iterator(records_dir)) {
    if (e.is_regular_file() && e.path().filename() == "sweep.csv")
      sweeps.push_back(e.path());
  }
  std::sort(sweeps.begin(), sweeps.end());
  if (!sweeps.empty()) {
    const std::string content = slurp(sweeps.front());
    spit(out / "nsweep.csv", content);
    std::stringstream ss(content);
    std::string ln;
    std::getline(ss, ln);  // header
    Series se;
    se.name = "mdice";
    while (std::getline(ss, ln)) {
      const auto cells = split_csv_line(ln);
      if (cells.size() < 2) continue;
      se.pts.push_back({std::stod(cells[0]), std::stod(cells[1])});
    }
    if (!se.pts.empty())
      write_svg_lines(out / "nsweep.svg", "mDice vs perturbation count",
                      "perturbation count", "mdice %", {se});
  }

  std::cout << "report written to " << out.string() << "\n";
  return 0;
}

}  // namespace

// ---------------------------------------------------------------------------
// main: flag wiring.
// ---------------------------------------------------------------------------

int main(int argc, char** argv) {
  CLI::App app{"propl: prompt-guided semi-supervised segmentation workbench"};
  app.require_subcommand(1);

  // synth ------------------------------------------------------------------
  SynthArgs sa;
  auto* synth = app.add_subcommand("synth", "generate a synthetic multi-task dataset");
  synth->add_option("--out", sa.out, "output dataset directory")->required();
  synth->add_option("--tasks", sa.tasks, "number of tasks (2..4)")
      ->check(CLI::Range(2, 4));
  synth->add_option("--n-samples", sa.n_samples, "number of samples");
  synth->add_option("--size", sa.size, "image side length (multiple of 32)");
  synth->add_option("--seed-data", sa.seed_data, "dataset root seed");
  synth->add_flag("--force", sa.force, "write into a non-empty directory");

  // shared train-style options ----------------------------------------------
  TrainArgs ta;
  double f_lr = 1e-3, f_power = 0.9, f_momentum = 0.9, f_wd = 1e-5, f_rate = 0.3,
         f_lambda = 1.0;
  int f_epochs = 200, f_batch = 16, f_n = 2, f_eval_every = 1;
  std::uint64_t f_sm = 1, f_sd = 2, f_sp = 3;
  const auto add_train_flags = [&](CLI::App* sub) {
    sub->add_option("--data", ta.data, "dataset directory (from synth)")->required();
    sub->add_option("--out", ta.out, "output directory")->required();
    sub->add_option("--config", ta.config, "json config file (flags override)");
    sub->add_option("--labeled-fraction", ta.labeled_fraction,
                    "labeled share of the train split, e.g. 1/8");
    sub->add_option("--split-seed", ta.split_seed, "train/test split seed");
    sub->add_option("--epochs", f_epochs, "training epochs");
    sub->add_option("--batch", f_batch, "labeled batch size");
    sub->add_option("--lr", f_lr, "initial learning rate");
    sub->add_option("--power", f_power, "poly schedule exponent");
    sub->add_option("--momentum", f_momentum, "sgd momentum");
    sub->add_option("--weight-decay", f_wd, "sgd weight decay");
    sub->add_option("--uplc-n", f_n, "stochastic perturbation passes");
    sub->add_option("--uplc-kind", ta.uplc_kind, "perturbation kind: dropout|gaussian");
    sub->add_option("--uplc-rate", f_rate, "perturbation strength");
    sub->add_option("--lambda-u", f_lambda, "unsupervised loss weight");
    sub->add_option("--seed-model", f_sm, "parameter init seed");
    sub->add_option("--seed-data", f_sd, "batch/augmentation seed");
    sub->add_option("--seed-perturb", f_sp, "pseudo-label perturbation seed");
    sub->add_option("--eval-every", f_eval_every, "evaluate every k epochs");
    sub->add_option("--channels", ta.channels, "encoder widths, e.g. 32,64,128,256");
    sub->add_option("--embed-dim", ta.embed_dim, "prompt embedding width");
    sub->add_option("--heads", ta.heads, "attention heads");
    sub->add_option("--stage-depth", ta.stage_depth, "conv blocks per encoder stage");
    sub->add_flag("--no-augment", "disable rotation/scaling augmentation");
    sub->add_flag("--force", ta.force, "write into a non-empty directory");
  };
  // Defaults come from TrainConfig, then the config file, then any flag the
  // user actually passed (config file + flag overrides).
  const auto make_config = [&](CLI::App* sub) {
    propl::TrainConfig cfg;
    if (!ta.config.empty())
      cfg = propl::train_config_from_json(json::parse(slurp(ta.config)));
    const auto passed = [&](const char* n) {
      const auto* o = sub->get_option_no_throw(n);
      return o != nullptr && o->count() > 0;
    };
    if (passed("--lr")) cfg.init_lr = f_lr;
    if (passed("--epochs")) cfg.epochs = f_epochs;
    if (passed("--batch")) cfg.batch = f_batch;
    if (passed("--power")) cfg.power = f_power;
    if (passed("--momentum")) cfg.momentum = f_momentum;
    if (passed("--weight-decay")) cfg.weight_decay = f_wd;
    if (passed("--uplc-n")) cfg.uplc_n = f_n;
    if (passed("--uplc-rate")) cfg.uplc_rate = f_rate;
    if (passed("--lambda-u")) cfg.lambda_u = f_lambda;
    if (passed("--seed-model")) cfg.seed_model = f_sm;
    if (passed("--seed-data")) cfg.seed_data = f_sd;
    if (passed("--seed-perturb")) cfg.seed_perturb = f_sp;
    if (passed("--eval-every")) cfg.eval_every = f_eval_every;
    if (passed("--uplc-kind"))
      cfg.uplc_kind = propl::perturb_kind_from_string(ta.uplc_kind);
    if (passed("--no-prompt")) cfg.prompt_enabled = false;
    if (passed("--no-uplc")) cfg.uplc_enabled = false;
    if (passed("--no-augment")) cfg.augment_enabled = false;
    if (passed("--channels")) cfg.arch.C = parse_channels(ta.channels);
    if (passed("--embed-dim")) cfg.arch.embed_dim = ta.embed_dim;
    if (passed("--heads")) cfg.arch.heads = ta.heads;
    if (passed("--stage-depth")) cfg.arch.stage_depth = ta.stage_depth;
    return cfg;
  };

  // train --------------------------------------------------------------------
  auto* train = app.add_subcommand("train", "train a model on a dataset split");
  add_train_flags(train);
  train->add_flag("--no-prompt", "ablate prompting: decoders run self-attention only");
  train->add_flag("--no-uplc", "ablate calibration: raw pseudo-label probabilities");

  // eval ----------------------------------------------------------------------
  EvalArgs ea;
  auto* eval = app.add_subcommand("eval", "evaluate a checkpoint on a split");
  eval->add_option("--ckpt", ea.ckpt, "checkpoint file")->required();
  eval->add_option("--data", ea.data, "dataset directory")->required();
  eval->add_option("--split", ea.split, "split.json path")->required();
  eval->add_option("--subset", ea.subset, "test|labeled|unlabeled|all");
  eval->add_option("--format", ea.format, "table|csv")
      ->check(CLI::IsMember({"table", "csv"}));
  eval->add_flag("--no-prompt", ea.no_prompt, "evaluate with prompting disabled");

  // ablate ----------------------------------------------------------------------
  std::string sweep_list = "2,3,4";
  auto* ablate = app.add_subcommand(
      "ablate", "prompt/uplc 2x2 grid plus perturbation-count sweep");
  add_train_flags(ablate);
  ablate->add_option("--sweep-n", sweep_list, "perturbation counts, e.g. 2,3,4");

  // report ----------------------------------------------------------------------
  std::string rep_records, rep_out;
  auto* report = app.add_subcommand("report", "tables and charts from records");
  report->add_option("--records", rep_records, "directory tree holding record.json files")
      ->required();
  report->add_option("--out", rep_out, "report output directory (default records/report)");

  CLI11_PARSE(app, argc, argv);

  try {
    if (synth->parsed()) return cmd_synth(sa);

    if (train->parsed() || ablate->parsed()) {
      CLI::App* sub = train->parsed() ? train : ablate;
      const auto manifest = propl::load_manifest(ta.data);
      const double frac = parse_fraction(ta.labeled_fraction);
      const auto split = propl::split_partition(manifest, frac, ta.split_seed,
                                                ta.labeled_fraction);
      propl::TrainConfig cfg = make_config(sub);
      ensure_outdir(ta.out, ta.force);
      if (train->parsed()) {
        const auto rec = run_experiment(cfg, manifest, split, ta.out, &std::cout);
        std::cout << "final evaluation:\n";
        propl::EvalResult ev;
        ev.mdice_pct = rec.at("final_eval").at("mdice_pct").get<double>();
        ev.miou_pct = rec.at("final_eval").at("miou_pct").get<double>();
        for (const auto& t : rec.at("final_eval").at("tasks")) {
          propl::TaskReport tr;
          tr.task_id = t.at("task_id").get<int>();
          tr.dice_pct = t.at("dice_pct").get<double>();
          tr.iou_pct = t.at("iou_pct").get<double>();
          tr.hd95_mean = t.at("hd95_mean").is_null()
                             ? std::numeric_limits<double>::quiet_NaN()
                             : t.at("hd95_mean").get<double>();
          tr.hd95_excluded = t.at("hd95_excluded").get<int>();
          tr.n_samples = t.at("n_samples").get<int>();
          ev.tasks.push_back(tr);
        }
        print_eval_table(std::cout, manifest, ev);
        std::cout << "record: " << (fs::path(ta.out) / "record.json").string() << "\n";
        return 0;
      }
      return run_ablation(cfg, manifest, split, ta.out, parse_int_list(sweep_list));
    }

    if (eval->parsed()) return cmd_eval(ea);
    if (report->parsed()) return cmd_report(rep_records, rep_out);
  } catch (const std::exception& e) {
    std::cerr << "error: " << e.what() << "\n";
    return 1;
  }
  return 0;
}
