#include <catch2/catch_amalgamated.hpp>

#include <cstdint>
#include <cstring>
#include <filesystem>
#include <fstream>
#include <set>

#include "propl/dataset.hpp"
#include "propl/rng.hpp"

using namespace propl;
namespace fs = std::filesystem;

namespace {

fs::path fresh_dir(const std::string& name) {
  const fs::path p = fs::temp_directory_path() / ("propl_test_" + name);
  fs::remove_all(p);
  fs::create_directories(p);
  return p;
}

std::string slurp(const fs::path& p) {
  std::ifstream f(p, std::ios::binary);
  REQUIRE(f.good());
  return std::string(std::istreambuf_iterator<char>(f), {});
}

}  // namespace

TEST_CASE("synth_image is deterministic in (tasks, seed, size)") {
  const auto tasks = default_tasks(2);
  const auto a = synth_image(tasks, 1234, 64, 64);
  const auto b = synth_image(tasks, 1234, 64, 64);
  REQUIRE(a.image.size() == b.image.size());
  CHECK(std::memcmp(a.image.v.data(), b.image.v.data(),
                    a.image.size() * sizeof(float)) == 0);
  for (const auto& [tid, m] : a.masks) {
    CHECK(std::memcmp(m.v.data(), b.masks.at(tid).v.data(), m.size()) == 0);
  }
  const auto c = synth_image(tasks, 1235, 64, 64);
  CHECK(std::memcmp(a.image.v.data(), c.image.v.data(),
                    a.image.size() * sizeof(float)) != 0);
}

TEST_CASE("structure areas and overlaps respect the documented bounds") {
  const auto tasks = default_tasks(2);
  for (std::uint64_t seed = 0; seed < 40; ++seed) {
    const int H = 64, W = 64;
    const auto s = synth_image(tasks, mix_seed({seed, 1}), H, W);
    REQUIRE(s.masks.size() == 2);
    std::vector<std::size_t> areas;
    for (const auto& [tid, m] : s.masks) {
      const auto a = mask_area(m);
      REQUIRE(a >= static_cast<std::size_t>(0.02 * H * W));
      REQUIRE(a <= static_cast<std::size_t>(0.30 * H * W));
      areas.push_back(a);
      for (const auto px : m.v) REQUIRE((px == 0 || px == 1));
    }
    const auto ov = mask_overlap(s.masks.at(0), s.masks.at(1));
    REQUIRE(static_cast<double>(ov) <= 0.10 * static_cast<double>(std::min(areas[0], areas[1])));
  }
}

TEST_CASE("images are grayscale in range with polarity-correct structures") {
  const auto tasks = default_tasks(2);
  int bright_wins = 0, dark_wins = 0;
  const int trials = 20;
  for (std::uint64_t seed = 0; seed < trials; ++seed) {
    const auto s = synth_image(tasks, mix_seed({seed, 2}), 64, 64);
    double in0 = 0, in1 = 0, bg = 0;
    std::size_t n0 = 0, n1 = 0, nbg = 0;
    for (int y = 0; y < 64; ++y)
      for (int x = 0; x < 64; ++x) {
        const float v = s.image.at(y, x, 0);
        REQUIRE(v >= 0.0f);
        REQUIRE(v <= 1.0f);
        REQUIRE(s.image.at(y, x, 1) == v);  // channels replicated
        REQUIRE(s.image.at(y, x, 2) == v);
        const bool m0 = s.masks.at(0).at(y, x, 0) != 0;
        const bool m1 = s.masks.at(1).at(y, x, 0) != 0;
        if (m0 && !m1) { in0 += v; ++n0; }
        else if (m1 && !m0) { in1 += v; ++n1; }
        else if (!m0 && !m1) { bg += v; ++nbg; }
      }
    REQUIRE(n0 > 0);
    REQUIRE(n1 > 0);
    if (in0 / n0 > bg / nbg) ++bright_wins;   // task 0: brighter than background
    if (in1 / n1 < bg / nbg) ++dark_wins;     // task 1: darker than background
  }
  // speckle and shadows add noise, but the polarity should dominate
  CHECK(bright_wins >= trials - 1);
  CHECK(dark_wins >= trials - 1);
}

TEST_CASE("too-small canvases and too-few tasks are rejected") {
  CHECK_THROWS_WITH(synth_image(default_tasks(2), 1, 16, 64),
                    Catch::Matchers::ContainsSubstring("32"));
  CHECK_THROWS_WITH(synth_image({default_tasks(2)[0]}, 1, 64, 64),
                    Catch::Matchers::ContainsSubstring("2 tasks"));
}

TEST_CASE("raster round trip reproduces the 8-bit quantization exactly") {
  const auto tasks = default_tasks(2);
  const auto s = synth_image(tasks, 99, 64, 64);
  const auto dir = fresh_dir("raster");
  write_ppm(dir / "img.ppm", s.image);
  const auto img2 = read_ppm(dir / "img.ppm");
  REQUIRE(img2.same_shape(s.image));
  for (std::size_t i = 0; i < s.image.size(); ++i) {
    const float expect = static_cast<float>(quantize8(s.image.v[i])) / 255.0f;
    REQUIRE(img2.v[i] == expect);
  }
  write_pgm_mask(dir / "m.pgm", s.masks.at(0));
  const auto m2 = read_pgm_mask(dir / "m.pgm");
  REQUIRE(std::memcmp(m2.v.data(), s.masks.at(0).v.data(), m2.size()) == 0);
}

TEST_CASE("non-binary mask bytes are a decode error") {
  const auto dir = fresh_dir("badmask");
  std::ofstream f(dir / "bad.pgm", std::ios::binary);
  f << "P5\n2 2\n255\n";
  const unsigned char px[4] = {0, 255, 128, 0};
  f.write(reinterpret_cast<const char*>(px), 4);
  f.close();
  CHECK_THROWS_WITH(read_pgm_mask(dir / "bad.pgm"),
                    Catch::Matchers::ContainsSubstring("128"));
}

TEST_CASE("missing files carry the path in the error") {
  CHECK_THROWS_WITH(read_ppm("/nonexistent/dir/x.ppm"),
                    Catch::Matchers::ContainsSubstring("/nonexistent/dir/x.ppm"));
}

TEST_CASE("build_dataset writes the documented layout and reloads bit-identically") {
  const auto dir = fresh_dir("build");
  const auto tasks = default_tasks(2);
  const auto m = build_dataset(8, tasks, 64, 64, 4242, dir);
  REQUIRE(m.samples.size() == 8);
  CHECK(fs::exists(dir / "manifest.json"));
  CHECK(fs::exists(dir / "images" / "s00000.ppm"));
  CHECK(fs::exists(dir / "masks" / "0" / "s00000.pgm"));
  CHECK(fs::exists(dir / "masks" / "1" / "s00007.pgm"));

  const auto loaded = load_manifest(dir);
  CHECK(loaded.root_seed == 4242);
  CHECK(loaded.height == 64);
  CHECK(loaded.tasks.size() == 2);
  CHECK(loaded.tasks[1].name == "dark-blob");
  CHECK(loaded.samples[3].sample_id == "s00003");

  // a sample loads back to exactly the quantized generator output
  const auto regen = synth_image(tasks, sample_seed(4242, 3), 64, 64);
  const auto disk = load_sample(loaded, "s00003");
  for (std::size_t i = 0; i < regen.image.size(); ++i) {
    REQUIRE(disk.image.v[i] == static_cast<float>(quantize8(regen.image.v[i])) / 255.0f);
  }
  REQUIRE(std::memcmp(disk.masks.at(1).v.data(), regen.masks.at(1).v.data(),
                      regen.masks.at(1).size()) == 0);

  // rebuilding with the same seed gives byte-identical files
  const auto dir2 = fresh_dir("build2");
  build_dataset(8, tasks, 64, 64, 4242, dir2);
  CHECK(slurp(dir / "manifest.json") == slurp(dir2 / "manifest.json"));
  CHECK(slurp(dir / "images" / "s00005.ppm") == slurp(dir2 / "images" / "s00005.ppm"));
  CHECK(slurp(dir / "masks" / "0" / "s00002.pgm") ==
        slurp(dir2 / "masks" / "0" / "s00002.pgm"));
}

TEST_CASE("manifest preserves unknown fields across a load-save cycle") {
  const auto dir = fresh_dir("extra");
  build_dataset(8, default_tasks(2), 64, 64, 7, dir);
  auto j = json::parse(std::ifstream(dir / "manifest.json"));
  j["curator_note"] = "hand-checked";
  {
    std::ofstream f(dir / "manifest.json");
    f << j.dump(2) << "\n";
  }
  auto m = load_manifest(dir);
  save_manifest(m);
  const auto j2 = json::parse(std::ifstream(dir / "manifest.json"));
  REQUIRE(j2.contains("curator_note"));
  CHECK(j2["curator_note"] == "hand-checked");
  CHECK(j2["samples"].size() == 8);
}

TEST_CASE("unknown sample id names the id in the error") {
  const auto dir = fresh_dir("badid");
  const auto m = build_dataset(8, default_tasks(2), 64, 64, 7, dir);
  CHECK_THROWS_WITH(load_sample(m, "s99999"),
                    Catch::Matchers::ContainsSubstring("s99999"));
}

TEST_CASE("split arithmetic matches the documented worked examples") {
  DatasetManifest m;
  m.root_seed = 0;
  for (int i = 0; i < 800; ++i) {
    SampleRef r;
    r.sample_id = "s" + std::to_string(i);
    r.task_ids = {0, 1};
    m.samples.push_back(r);
  }
  const auto sp16 = split_partition(m, 1.0 / 16.0, 5, "1/16");
  CHECK(sp16.test_ids.size() == 200);
  CHECK(sp16.labeled_ids.size() == 38);  // round-half-up of 37.5
  CHECK(sp16.unlabeled_ids.size() == 600 - 38);

  const auto sp4 = split_partition(m, 0.25, 5, "1/4");
  CHECK(sp4.test_ids.size() == 200);
  CHECK(sp4.labeled_ids.size() == 150);
  CHECK(sp4.unlabeled_ids.size() == 450);
}

TEST_CASE("split is a disjoint cover, deterministic in split_seed") {
  const auto dir = fresh_dir("split");
  const auto m = build_dataset(16, default_tasks(2), 64, 64, 11, dir);
  const auto a = split_partition(m, 0.25, 31);
  const auto b = split_partition(m, 0.25, 31);
  CHECK(a.labeled_ids == b.labeled_ids);
  CHECK(a.unlabeled_ids == b.unlabeled_ids);
  CHECK(a.test_ids == b.test_ids);

  std::set<std::string> all;
  for (const auto& v : {a.labeled_ids, a.unlabeled_ids, a.test_ids})
    for (const auto& id : v) REQUIRE(all.insert(id).second);  // no duplicates
  CHECK(all.size() == 16);

  const auto c = split_partition(m, 0.25, 32);
  CHECK(c.test_ids != a.test_ids);  // different seed shuffles differently

  // JSON round trip
  const auto j = split_to_json(a);
  const auto back = split_from_json(j);
  CHECK(back.labeled_ids == a.labeled_ids);
  CHECK(back.split_seed == a.split_seed);
  CHECK(back.labeled_fraction == a.labeled_fraction);
}

TEST_CASE("degenerate fractions are rejected") {
  DatasetManifest m;
  for (int i = 0; i < 16; ++i) {
    SampleRef r;
    r.sample_id = "s" + std::to_string(i);
    m.samples.push_back(r);
  }
  CHECK_THROWS(split_partition(m, 0.0, 1));
  CHECK_THROWS(split_partition(m, 1.0, 1));
  CHECK_THROWS_WITH(split_partition(m, 0.001, 1),
                    Catch::Matchers::ContainsSubstring("zero labeled"));
}

TEST_CASE("prompts follow the task-name template") {
  const auto tasks = default_tasks(3);
  CHECK(tasks[0].prompt_text == "Segment the bright-ellipse in the ultrasound image.");
  CHECK(tasks[2].prompt_text == "Segment the dark-ellipse in the ultrasound image.");
}
