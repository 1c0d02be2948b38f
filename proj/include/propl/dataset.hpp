#pragma once

// Synthetic multi-task dataset: each image carries one structure per task on
// a speckled background, so the requested task decides which structure is
// the target. Images and masks are stored as 8-bit binary PPM/PGM, the
// manifest as JSON. Everything is a pure function of the seeds involved.

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <filesystem>
#include <fstream>
#include <map>
#include <numbers>
#include <sstream>
#include <string>
#include <vector>

#include <nlohmann/json.hpp>

#include "propl/rng.hpp"
#include "propl/tensor.hpp"

namespace propl {

using json = nlohmann::ordered_json;

struct TaskSpec {
  int task_id = 0;
  std::string name;
  std::string prompt_text;
};

inline std::string prompt_for(const std::string& name) {
  return "Segment the " + name + " in the ultrasound image.";
}

// Built-in shape families. Even ids are ellipses, odd ids are irregular
// blobs; polarity (brighter / darker than background) alternates so that no
// intensity rule alone identifies the target.
inline std::vector<TaskSpec> default_tasks(int n) {
  require(n >= 2 && n <= 4, "default_tasks: supported task count is 2..4");
  static const char* names[4] = {"bright-ellipse", "dark-blob", "dark-ellipse",
                                 "bright-blob"};
  std::vector<TaskSpec> tasks;
  for (int i = 0; i < n; ++i) tasks.push_back({i, names[i], prompt_for(names[i])});
  return tasks;
}

struct ImageSample {
  Tensor<float> image;                     // (H, W, 3), values in [0,1]
  std::map<int, Tensor<std::uint8_t>> masks;  // task_id -> (H, W, 1), {0,1}
  std::string sample_id;
  std::uint64_t provenance_seed = 0;
};

inline std::size_t mask_area(const Tensor<std::uint8_t>& m) {
  std::size_t a = 0;
  for (auto p : m.v) a += p;
  return a;
}

inline std::size_t mask_overlap(const Tensor<std::uint8_t>& a,
                                const Tensor<std::uint8_t>& b) {
  std::size_t o = 0;
  for (std::size_t i = 0; i < a.size(); ++i) o += a.v[i] & b.v[i];
  return o;
}

namespace detail {

struct StructureDraw {
  Tensor<std::uint8_t> mask;
  double delta = 0.0;  // signed intensity offset against the background
};

inline bool task_is_ellipse(int task_id) { return task_id % 2 == 0; }
inline bool task_is_bright(int task_id) {
  const int m = task_id % 4;
  return m == 0 || m == 3;
}

inline StructureDraw draw_structure(Rng& rng, int task_id, int H, int W) {
  StructureDraw s;
  s.mask = Tensor<std::uint8_t>(H, W, 1);
  const double area_frac = rng.uniform(0.045, 0.20);
  const double cx = rng.uniform(0.22, 0.78) * W;
  const double cy = rng.uniform(0.22, 0.78) * H;
  const double target_area = area_frac * H * W;
  if (task_is_ellipse(task_id)) {
    const double aspect = rng.uniform(0.55, 0.95);
    const double a = std::sqrt(target_area / (std::numbers::pi * aspect));
    const double b = a * aspect;
    const double th = rng.uniform(0.0, std::numbers::pi);
    const double ct = std::cos(th), st = std::sin(th);
    for (int y = 0; y < H; ++y) {
      for (int x = 0; x < W; ++x) {
        const double dx = x + 0.5 - cx, dy = y + 0.5 - cy;
        const double u = dx * ct + dy * st, v = -dx * st + dy * ct;
        if ((u * u) / (a * a) + (v * v) / (b * b) <= 1.0) s.mask.at(y, x, 0) = 1;
      }
    }
  } else {
    const double r0 = std::sqrt(target_area / std::numbers::pi);
    double amp[3], phase[3];
    for (int i = 0; i < 3; ++i) {
      amp[i] = rng.uniform(0.05, 0.27) / (i + 1);
      phase[i] = rng.uniform(0.0, 2.0 * std::numbers::pi);
    }
    for (int y = 0; y < H; ++y) {
      for (int x = 0; x < W; ++x) {
        const double dx = x + 0.5 - cx, dy = y + 0.5 - cy;
        const double rr = std::sqrt(dx * dx + dy * dy);
        const double ang = std::atan2(dy, dx);
        double rb = r0;
        for (int i = 0; i < 3; ++i)
          rb += r0 * amp[i] * std::cos((i + 2) * ang + phase[i]);
        if (rr <= rb) s.mask.at(y, x, 0) = 1;
      }
    }
  }
  const double mag = rng.uniform(0.26, 0.40);
  s.delta = task_is_bright(task_id) ? mag : -0.8 * mag;
  return s;
}

}  // namespace detail

// Generates one image plus one mask per task. Deterministic in
// (tasks, seed, size): the same arguments always reproduce the same bytes.
inline ImageSample synth_image(const std::vector<TaskSpec>& tasks,
                               std::uint64_t seed, int H, int W) {
  require(tasks.size() >= 2, "synth_image: need at least 2 tasks");
  require(H >= 32 && W >= 32, "synth_image: size must be at least 32x32");

  constexpr double kMinAreaFrac = 0.02, kMaxAreaFrac = 0.30, kMaxOverlap = 0.10;
  Rng rng(seed);

  // Background field with a gentle vertical gain ramp.
  const double base = rng.uniform(0.30, 0.44);
  const double ramp = rng.uniform(-0.05, 0.05);
  // Speckle: multiplicative, mean 1 (average of four U[0.5, 1.5] draws).
  Tensor<float> speckle(H, W, 1);
  for (int y = 0; y < H; ++y)
    for (int x = 0; x < W; ++x) {
      double s = 0.0;
      for (int i = 0; i < 4; ++i) s += rng.uniform(0.5, 1.5);
      speckle.at(y, x, 0) = static_cast<float>(s / 4.0);
    }
  // 0..2 darkened vertical bands.
  std::vector<double> shadow(static_cast<std::size_t>(W), 1.0);
  const int n_bands = static_cast<int>(rng.uniform_int(3));
  for (int bi = 0; bi < n_bands; ++bi) {
    const double bc = rng.uniform(0.1, 0.9) * W;
    const double bw = rng.uniform(0.04, 0.13) * W;
    const double depth = rng.uniform(0.25, 0.5);
    for (int x = 0; x < W; ++x) {
      const double d = (x + 0.5 - bc) / bw;
      shadow[static_cast<std::size_t>(x)] *= 1.0 - depth * std::exp(-d * d);
    }
  }

  const std::size_t min_area =
      static_cast<std::size_t>(std::ceil(kMinAreaFrac * H * W));
  const std::size_t max_area =
      static_cast<std::size_t>(std::floor(kMaxAreaFrac * H * W));

  std::vector<detail::StructureDraw> structures;
  constexpr int kMaxAttempts = 500;
  int attempt = 0;
  for (; attempt < kMaxAttempts; ++attempt) {
    structures.clear();
    bool ok = true;
    for (const auto& t : tasks) {
      auto s = detail::draw_structure(rng, t.task_id, H, W);
      const std::size_t area = mask_area(s.mask);
      if (area < min_area || area > max_area) {
        ok = false;
        break;
      }
      structures.push_back(std::move(s));
    }
    if (!ok) continue;
    for (std::size_t i = 0; ok && i < structures.size(); ++i) {
      for (std::size_t j = i + 1; j < structures.size(); ++j) {
        const std::size_t ov = mask_overlap(structures[i].mask, structures[j].mask);
        const std::size_t smaller =
            std::min(mask_area(structures[i].mask), mask_area(structures[j].mask));
        if (static_cast<double>(ov) > kMaxOverlap * static_cast<double>(smaller)) {
          ok = false;
          break;
        }
      }
    }
    if (ok) break;
  }
  require(attempt < kMaxAttempts,
          "synth_image: could not satisfy structure area bounds "
          "[2%,30%] and 10% overlap limit at this size");

  ImageSample out;
  out.provenance_seed = seed;
  out.image = Tensor<float>(H, W, 3);
  for (int y = 0; y < H; ++y) {
    for (int x = 0; x < W; ++x) {
      double v = base + ramp * (static_cast<double>(y) / H - 0.5);
      for (std::size_t si = 0; si < structures.size(); ++si) {
        if (structures[si].mask.at(y, x, 0)) v += structures[si].delta;
      }
      v *= speckle.at(y, x, 0);
      v *= shadow[static_cast<std::size_t>(x)];
      v = std::clamp(v, 0.0, 1.0);
      const float f = static_cast<float>(v);
      out.image.at(y, x, 0) = f;
      out.image.at(y, x, 1) = f;
      out.image.at(y, x, 2) = f;
    }
  }
  for (std::size_t si = 0; si < structures.size(); ++si) {
    out.masks[tasks[si].task_id] = std::move(structures[si].mask);
  }
  return out;
}

inline ImageSample synth_image(const std::vector<TaskSpec>& tasks,
                               std::uint64_t seed, std::pair<int, int> size) {
  return synth_image(tasks, seed, size.first, size.second);
}

// --------------------------------------------------------------------------
// 8-bit raster I/O (binary PPM / PGM).
// --------------------------------------------------------------------------

inline std::uint8_t quantize8(float v) {
  const float c = std::clamp(v, 0.0f, 1.0f);
  return static_cast<std::uint8_t>(std::lround(c * 255.0f));
}

inline void write_ppm(const std::filesystem::path& path, const Tensor<float>& img) {
  std::ofstream f(path, std::ios::binary);
  require(f.good(), "cannot open for write: " + path.string());
  f << "P6\n" << img.w << " " << img.h << "\n255\n";
  std::vector<std::uint8_t> buf(img.size());
  for (std::size_t i = 0; i < img.size(); ++i) buf[i] = quantize8(img.v[i]);
  f.write(reinterpret_cast<const char*>(buf.data()),
          static_cast<std::streamsize>(buf.size()));
  require(f.good(), "write failed: " + path.string());
}

inline void write_pgm_mask(const std::filesystem::path& path,
                           const Tensor<std::uint8_t>& mask) {
  std::ofstream f(path, std::ios::binary);
  require(f.good(), "cannot open for write: " + path.string());
  f << "P5\n" << mask.w << " " << mask.h << "\n255\n";
  std::vector<std::uint8_t> buf(mask.size());
  for (std::size_t i = 0; i < mask.size(); ++i)
    buf[i] = mask.v[i] ? std::uint8_t{255} : std::uint8_t{0};
  f.write(reinterpret_cast<const char*>(buf.data()),
          static_cast<std::streamsize>(buf.size()));
  require(f.good(), "write failed: " + path.string());
}

namespace detail {

inline void read_pnm_header(std::istream& f, const std::string& magic,
                            const std::string& path, int& w, int& h) {
  std::string m;
  f >> m;
  require(m == magic, "bad raster magic in " + path + " (expected " + magic + ")");
  int maxval = 0;
  auto next_int = [&](int& out) {
    // skip whitespace and '#' comments
    int ch = f.peek();
    while (ch == ' ' || ch == '\n' || ch == '\r' || ch == '\t' || ch == '#') {
      if (ch == '#') {
        std::string line;
        std::getline(f, line);
      } else {
        f.get();
      }
      ch = f.peek();
    }
    f >> out;
  };
  next_int(w);
  next_int(h);
  next_int(maxval);
  require(f.good() && w > 0 && h > 0, "bad raster header in " + path);
  require(maxval == 255, "unsupported raster depth in " + path);
  f.get();  // single whitespace after maxval
}

}  // namespace detail

inline Tensor<float> read_ppm(const std::filesystem::path& path) {
  std::ifstream f(path, std::ios::binary);
  require(f.good(), "cannot open image file: " + path.string());
  int w = 0, h = 0;
  detail::read_pnm_header(f, "P6", path.string(), w, h);
  std::vector<std::uint8_t> buf(static_cast<std::size_t>(w) * h * 3);
  f.read(reinterpret_cast<char*>(buf.data()), static_cast<std::streamsize>(buf.size()));
  require(f.gcount() == static_cast<std::streamsize>(buf.size()),
          "truncated image file: " + path.string());
  Tensor<float> img(h, w, 3);
  for (std::size_t i = 0; i < buf.size(); ++i)
    img.v[i] = static_cast<float>(buf[i]) / 255.0f;
  return img;
}

inline Tensor<std::uint8_t> read_pgm_mask(const std::filesystem::path& path) {
  std::ifstream f(path, std::ios::binary);
  require(f.good(), "cannot open mask file: " + path.string());
  int w = 0, h = 0;
  detail::read_pnm_header(f, "P5", path.string(), w, h);
  std::vector<std::uint8_t> buf(static_cast<std::size_t>(w) * h);
  f.read(reinterpret_cast<char*>(buf.data()), static_cast<std::streamsize>(buf.size()));
  require(f.gcount() == static_cast<std::streamsize>(buf.size()),
          "truncated mask file: " + path.string());
  Tensor<std::uint8_t> m(h, w, 1);
  for (std::size_t i = 0; i < buf.size(); ++i) {
    require(buf[i] == 0 || buf[i] == 255,
            "mask file " + path.string() + " contains value " +
                std::to_string(buf[i]) + "; masks must be 0/255");
    m.v[i] = buf[i] ? 1 : 0;
  }
  return m;
}

// --------------------------------------------------------------------------
// Manifests.
// --------------------------------------------------------------------------

struct SampleRef {
  std::string sample_id;
  std::string image_path;                 // relative to root
  std::map<int, std::string> mask_paths;  // task_id -> relative path
  std::vector<int> task_ids;
};

struct DatasetManifest {
  std::vector<TaskSpec> tasks;
  std::vector<SampleRef> samples;
  int height = 0, width = 0;
  std::string generator_version;
  std::uint64_t root_seed = 0;
  std::filesystem::path root;  // directory holding manifest.json
  json extra;                  // unknown fields, preserved on write

  const SampleRef& find(const std::string& sample_id) const {
    for (const auto& s : samples)
      if (s.sample_id == sample_id) return s;
    throw std::runtime_error("sample_id not in manifest: " + sample_id);
  }
};

inline constexpr const char* kGeneratorVersion = "propl-synth-1";

inline std::uint64_t sample_seed(std::uint64_t root_seed, std::size_t index) {
  std::uint64_t s = static_cast<std::uint64_t>(index);
  return root_seed ^ splitmix64(s);
}

inline json manifest_to_json(const DatasetManifest& m) {
  json j = m.extra.is_object() ? m.extra : json::object();
  j["generator_version"] = m.generator_version;
  j["root_seed"] = m.root_seed;
  j["image_size"] = {m.height, m.width};
  json jt = json::array();
  for (const auto& t : m.tasks)
    jt.push_back({{"task_id", t.task_id}, {"name", t.name}, {"prompt_text", t.prompt_text}});
  j["tasks"] = jt;
  json js = json::array();
  for (const auto& s : m.samples) {
    json masks = json::object();
    for (const auto& [tid, p] : s.mask_paths) masks[std::to_string(tid)] = p;
    js.push_back({{"sample_id", s.sample_id},
                  {"image", s.image_path},
                  {"masks", masks},
                  {"task_ids", s.task_ids}});
  }
  j["samples"] = js;
  return j;
}

inline DatasetManifest manifest_from_json(const json& j,
                                          const std::filesystem::path& root) {
  DatasetManifest m;
  m.root = root;
  m.extra = json::object();
  for (auto it = j.begin(); it != j.end(); ++it) {
    const std::string& key = it.key();
    if (key != "generator_version" && key != "root_seed" && key != "image_size" &&
        key != "tasks" && key != "samples") {
      m.extra[key] = it.value();
    }
  }
  m.generator_version = j.at("generator_version").get<std::string>();
  m.root_seed = j.at("root_seed").get<std::uint64_t>();
  m.height = j.at("image_size").at(0).get<int>();
  m.width = j.at("image_size").at(1).get<int>();
  for (const auto& jt : j.at("tasks")) {
    m.tasks.push_back({jt.at("task_id").get<int>(), jt.at("name").get<std::string>(),
                       jt.at("prompt_text").get<std::string>()});
  }
  for (const auto& js : j.at("samples")) {
    SampleRef s;
    s.sample_id = js.at("sample_id").get<std::string>();
    s.image_path = js.at("image").get<std::string>();
    for (auto it = js.at("masks").begin(); it != js.at("masks").end(); ++it)
      s.mask_paths[std::stoi(it.key())] = it.value().get<std::string>();
    s.task_ids = js.at("task_ids").get<std::vector<int>>();
    require(!s.task_ids.empty(), "sample lists no tasks: " + s.sample_id);
    m.samples.push_back(std::move(s));
  }
  return m;
}

inline void save_manifest(const DatasetManifest& m) {
  std::ofstream f(m.root / "manifest.json");
  require(f.good(), "cannot write manifest: " + (m.root / "manifest.json").string());
  f << manifest_to_json(m).dump(2) << "\n";
  require(f.good(), "manifest write failed");
}

inline DatasetManifest load_manifest(const std::filesystem::path& root) {
  const auto path = root / "manifest.json";
  std::ifstream f(path);
  require(f.good(), "cannot open manifest: " + path.string());
  json j = json::parse(f);
  return manifest_from_json(j, root);
}

// Writes n samples and the manifest. Per-sample seeds are
// root_seed XOR splitmix64(sample index), so any sample can be regenerated
// in isolation.
inline DatasetManifest build_dataset(int n_samples, const std::vector<TaskSpec>& tasks,
                                     int H, int W, std::uint64_t root_seed,
                                     const std::filesystem::path& out_dir) {
  require(n_samples >= 8, "build_dataset: need at least 8 samples");
  namespace fs = std::filesystem;
  std::error_code ec;
  fs::create_directories(out_dir / "images", ec);
  require(!ec, "cannot create " + (out_dir / "images").string() + ": " + ec.message());
  for (const auto& t : tasks) {
    fs::create_directories(out_dir / "masks" / std::to_string(t.task_id), ec);
    require(!ec, "cannot create mask dir for task " + std::to_string(t.task_id) +
                     ": " + ec.message());
  }

  DatasetManifest m;
  m.tasks = tasks;
  m.height = H;
  m.width = W;
  m.generator_version = kGeneratorVersion;
  m.root_seed = root_seed;
  m.root = out_dir;
  m.extra = json::object();

  char idbuf[32];
  for (int i = 0; i < n_samples; ++i) {
    std::snprintf(idbuf, sizeof(idbuf), "s%05d", i);
    const std::string sid = idbuf;
    ImageSample s = synth_image(tasks, sample_seed(root_seed, static_cast<std::size_t>(i)), H, W);
    s.sample_id = sid;
    SampleRef ref;
    ref.sample_id = sid;
    ref.image_path = "images/" + sid + ".ppm";
    write_ppm(out_dir / ref.image_path, s.image);
    for (const auto& t : tasks) {
      const std::string mp = "masks/" + std::to_string(t.task_id) + "/" + sid + ".pgm";
      write_pgm_mask(out_dir / mp, s.masks.at(t.task_id));
      ref.mask_paths[t.task_id] = mp;
      ref.task_ids.push_back(t.task_id);
    }
    m.samples.push_back(std::move(ref));
  }
  save_manifest(m);
  return m;
}

inline ImageSample load_sample(const DatasetManifest& m, const std::string& sample_id) {
  const SampleRef& ref = m.find(sample_id);
  ImageSample s;
  s.sample_id = sample_id;
  s.provenance_seed = m.root_seed;
  s.image = read_ppm(m.root / ref.image_path);
  for (const auto& [tid, p] : ref.mask_paths) s.masks[tid] = read_pgm_mask(m.root / p);
  return s;
}

// --------------------------------------------------------------------------
// Labeled / unlabeled / test partition.
// --------------------------------------------------------------------------

struct SplitManifest {
  std::vector<std::string> labeled_ids, unlabeled_ids, test_ids;
  double labeled_fraction = 0.0;
  std::string fraction_text;  // e.g. "1/8"; echoes the requested value
  std::uint64_t split_seed = 0;
};

inline long round_half_up(double x) { return static_cast<long>(std::floor(x + 0.5)); }

// Deterministic shuffle by split_seed; the first quarter of the shuffled ids
// becomes the test set (3:1 train-test), then round(labeled_fraction x train)
// ids are labeled and the rest unlabeled.
inline SplitManifest split_partition(const DatasetManifest& m, double labeled_fraction,
                                     std::uint64_t split_seed,
                                     const std::string& fraction_text = "") {
  require(labeled_fraction > 0.0 && labeled_fraction < 1.0,
          "labeled_fraction must be in (0,1)");
  std::vector<std::string> ids;
  for (const auto& s : m.samples) ids.push_back(s.sample_id);
  Rng rng(split_seed);
  rng.shuffle(ids);

  const long n = static_cast<long>(ids.size());
  const long n_test = round_half_up(0.25 * static_cast<double>(n));
  const long n_train = n - n_test;
  const long n_labeled = round_half_up(labeled_fraction * static_cast<double>(n_train));
  require(n_labeled >= 1, "labeled_fraction yields zero labeled samples");
  require(n_labeled <= n_train, "labeled_fraction yields more labeled than train");

  SplitManifest sp;
  sp.labeled_fraction = labeled_fraction;
  sp.fraction_text = fraction_text.empty() ? std::to_string(labeled_fraction) : fraction_text;
  sp.split_seed = split_seed;
  sp.test_ids.assign(ids.begin(), ids.begin() + n_test);
  sp.labeled_ids.assign(ids.begin() + n_test, ids.begin() + n_test + n_labeled);
  sp.unlabeled_ids.assign(ids.begin() + n_test + n_labeled, ids.end());
  return sp;
}

inline json split_to_json(const SplitManifest& sp) {
  return json{{"labeled_ids", sp.labeled_ids},
              {"unlabeled_ids", sp.unlabeled_ids},
              {"test_ids", sp.test_ids},
              {"labeled_fraction", sp.labeled_fraction},
              {"fraction_text", sp.fraction_text},
              {"split_seed", sp.split_seed}};
}

inline SplitManifest split_from_json(const json& j) {
  SplitManifest sp;
  sp.labeled_ids = j.at("labeled_ids").get<std::vector<std::string>>();
  sp.unlabeled_ids = j.at("unlabeled_ids").get<std::vector<std::string>>();
  sp.test_ids = j.at("test_ids").get<std::vector<std::string>>();
  sp.labeled_fraction = j.at("labeled_fraction").get<double>();
  sp.fraction_text = j.value("fraction_text", std::string{});
  sp.split_seed = j.at("split_seed").get<std::uint64_t>();
  return sp;
}

}  // namespace propl
