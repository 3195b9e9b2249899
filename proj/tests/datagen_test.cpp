// Scene world, captions, codec, datasets, alignment, and image files.

#include <doctest.h>

#include <algorithm>
#include <cmath>
#include <cstdio>
#include <fstream>
#include <stdexcept>

#include "mos/codec.hpp"
#include "mos/dataset.hpp"
#include "mos/image_io.hpp"
#include "mos/scene.hpp"

using mos::Color;
using mos::Entity;
using mos::SceneSpec;
using mos::Shape;
using mos::Tensor;

namespace {

SceneSpec two_entity_scene() {
  SceneSpec s;
  s.entities.push_back({Shape::kSquare, Color::kRed, 0, 0});
  s.entities.push_back({Shape::kCircle, Color::kBlue, 2, 3});
  return s;
}

std::string temp_path(const char* name) {
  return std::string("/tmp/mos_datagen_") + name;
}

}  // namespace

TEST_CASE("render: empty scene is uniform background") {
  Tensor img = mos::render_scene({});
  REQUIRE(img.shape() == std::vector<int>{32, 32, 3});
  for (int i = 0; i < img.numel(); ++i) REQUIRE(img.data()[i] == 0.5f);
}

TEST_CASE("render: red square occupies exactly the frozen mask pixels") {
  // The square mask is the 6x6 block at cell pixels 1..6 — frozen here as an
  // independent statement of the contract.
  SceneSpec s;
  s.entities.push_back({Shape::kSquare, Color::kRed, 0, 0});
  Tensor img = mos::render_scene(s);
  const float* p = img.data();
  for (int y = 0; y < 32; ++y) {
    for (int x = 0; x < 32; ++x) {
      bool inside = y >= 1 && y <= 6 && x >= 1 && x <= 6;
      const float* px = p + (y * 32 + x) * 3;
      if (inside) {
        REQUIRE(px[0] == 1.0f);
        REQUIRE(px[1] == 0.0f);
        REQUIRE(px[2] == 0.0f);
      } else {
        REQUIRE(px[0] == 0.5f);
        REQUIRE(px[1] == 0.5f);
        REQUIRE(px[2] == 0.5f);
      }
    }
  }
}

TEST_CASE("render: deterministic, masks distinct, overlap errors") {
  SceneSpec s = two_entity_scene();
  Tensor a = mos::render_scene(s);
  Tensor b = mos::render_scene(s);
  REQUIRE(a.data_vec() == b.data_vec());

  // All four shape masks are nonempty and pairwise distinct.
  for (int i = 0; i < 4; ++i) {
    const auto& mi = mos::shape_mask(static_cast<Shape>(i));
    int on = 0;
    for (bool v : mi) on += v ? 1 : 0;
    REQUIRE(on > 0);
    for (int j = i + 1; j < 4; ++j) {
      REQUIRE(mi != mos::shape_mask(static_cast<Shape>(j)));
    }
  }

  SceneSpec overlap;
  overlap.entities.push_back({Shape::kSquare, Color::kRed, 1, 1});
  overlap.entities.push_back({Shape::kCross, Color::kCyan, 1, 1});
  REQUIRE_THROWS_AS(mos::render_scene(overlap), std::invalid_argument);

  SceneSpec outside;
  outside.entities.push_back({Shape::kSquare, Color::kRed, 4, 0});
  REQUIRE_THROWS_AS(mos::render_scene(outside), std::invalid_argument);
}

TEST_CASE("captions: grammar, canonical order, bijectivity") {
  REQUIRE(mos::caption_of({}) == std::vector<int>{0});  // EMPTY
  REQUIRE(mos::parse_caption({0}) == SceneSpec{});

  SceneSpec s = two_entity_scene();
  std::vector<int> cap = mos::caption_of(s);
  REQUIRE(cap.size() == 10);
  REQUIRE(mos::tokens_to_string(cap) == "RED SQUARE AT 0 0 BLUE CIRCLE AT 2 3");
  REQUIRE(mos::parse_caption(cap) == s);

  // Round trip over 1000 random scenes, both directions.
  for (int i = 0; i < 1000; ++i) {
    mos::Pcg32 rng(1000 + static_cast<uint64_t>(i));
    SceneSpec spec = mos::sample_scene(rng);
    std::vector<int> c = mos::caption_of(spec);
    REQUIRE(mos::parse_caption(c) == spec);
    REQUIRE(mos::caption_of(mos::parse_caption(c)) == c);
  }

  // Strict parser rejects wrong order, duplicates, and malformed structure.
  std::vector<int> swapped = mos::caption_of(s);
  std::rotate(swapped.begin(), swapped.begin() + 5, swapped.end());
  REQUIRE_THROWS_AS(mos::parse_caption(swapped), std::invalid_argument);
  REQUIRE_THROWS_AS(mos::parse_caption({1, 9, 13, 14}), std::invalid_argument);
  REQUIRE_THROWS_AS(mos::parse_caption({1, 9, 13, 14, 14, 1, 9, 13, 14, 14}),
                    std::invalid_argument);
  REQUIRE_THROWS_WITH_AS(mos::parse_caption({13}), doctest::Contains("position 0"),
                         std::invalid_argument);
}

TEST_CASE("prompts: lenient order, canonicalization, unknown words") {
  SceneSpec s = mos::parse_prompt("blue circle at 2 3 red square at 0 0");
  REQUIRE(s == two_entity_scene());
  REQUIRE(mos::parse_prompt("EMPTY") == SceneSpec{});
  REQUIRE(mos::parse_prompt("Red Square At 1 2").entities[0].row == 1);
  REQUIRE_THROWS_WITH_AS(mos::parse_prompt("red banana at 0 0"),
                         doctest::Contains("unknown word"), std::invalid_argument);
  REQUIRE_THROWS_AS(mos::parse_prompt("red square at 0 0 blue circle at 0 0"),
                    std::invalid_argument);
}

TEST_CASE("codec: exact round trip, zero maps to zero, rotation orthogonal") {
  Tensor img = mos::render_scene(two_entity_scene());
  Tensor lat = mos::encode_latent(img);
  REQUIRE(lat.shape() == std::vector<int>{16, 16, 12});
  Tensor back = mos::decode_latent(lat);
  for (int i = 0; i < img.numel(); ++i) {
    REQUIRE(std::abs(back.data()[i] - img.data()[i]) <= 1e-5f);
  }

  Tensor zero = Tensor::zeros({32, 32, 3});
  Tensor zlat = mos::encode_latent(zero);
  for (int i = 0; i < zlat.numel(); ++i) REQUIRE(zlat.data()[i] == 0.0f);

  const auto& q = mos::codec_matrix();
  for (int i = 0; i < 12; ++i) {
    for (int j = 0; j < 12; ++j) {
      double dot = 0.0;
      for (int r = 0; r < 12; ++r) dot += static_cast<double>(q[r * 12 + i]) * q[r * 12 + j];
      REQUIRE(std::abs(dot - (i == j ? 1.0 : 0.0)) <= 1e-6);
    }
  }

  REQUIRE_THROWS_AS(mos::encode_latent(Tensor::zeros({16, 16, 3})), std::invalid_argument);
  REQUIRE_THROWS_AS(mos::decode_latent(Tensor::zeros({16, 16, 4})), std::invalid_argument);
}

TEST_CASE("alignment: perfect render 1.0, background 0.0, half 0.5") {
  SceneSpec s = two_entity_scene();
  Tensor img = mos::render_scene(s);
  REQUIRE(mos::alignment_score(img, s) == 1.0);

  // Alignment survives the codec round trip.
  REQUIRE(mos::alignment_score(mos::decode_latent(mos::encode_latent(img)), s) == 1.0);

  Tensor bg = Tensor::full({32, 32, 3}, 0.5f);
  REQUIRE(mos::alignment_score(bg, s) == 0.0);

  // Render only the first entity: exactly half the spec is realized.
  SceneSpec first;
  first.entities.push_back(s.entities[0]);
  REQUIRE(mos::alignment_score(mos::render_scene(first), s) == 0.5);

  // Wrong color at the second entity's cell also drops it to half.
  SceneSpec recolored = s;
  recolored.entities[1].color = Color::kGreen;
  REQUIRE(mos::alignment_score(mos::render_scene(recolored), s) == 0.5);

  REQUIRE(mos::alignment_score(bg, {}) == 1.0);
  REQUIRE_THROWS_AS(mos::alignment_score(Tensor::zeros({8, 8, 3}), s), std::invalid_argument);
}

TEST_CASE("edits: apply semantics and errors") {
  SceneSpec s = two_entity_scene();
  auto tok = [](const char* w) { return mos::token_id(w); };

  SceneSpec rec = mos::apply_edit(s, {tok("RECOLOR"), tok("0"), tok("0"), tok("CYAN")});
  REQUIRE(rec.entities[0].color == Color::kCyan);
  REQUIRE(rec.entities[1] == s.entities[1]);

  SceneSpec mov = mos::apply_edit(s, {tok("MOVE"), tok("2"), tok("3"), tok("TO"), tok("1"), tok("1")});
  REQUIRE(mov.entities[1].row == 1);
  REQUIRE(mov.entities[1].col == 1);
  REQUIRE(mov.entities[1].shape == Shape::kCircle);

  SceneSpec rem = mos::apply_edit(s, {tok("REMOVE"), tok("0"), tok("0")});
  REQUIRE(rem.entities.size() == 1);
  REQUIRE(rem.entities[0] == s.entities[1]);

  SceneSpec add = mos::apply_edit(s, {tok("ADD"), tok("WHITE"), tok("CROSS"), tok("AT"), tok("3"), tok("0")});
  REQUIRE(add.entities.size() == 3);
  REQUIRE(add.entities[2].shape == Shape::kCross);  // row-major position

  REQUIRE_THROWS_AS(mos::apply_edit(s, {tok("RECOLOR"), tok("1"), tok("1"), tok("RED")}),
                    std::invalid_argument);
  REQUIRE_THROWS_AS(
      mos::apply_edit(s, {tok("MOVE"), tok("0"), tok("0"), tok("TO"), tok("2"), tok("3")}),
      std::invalid_argument);
  REQUIRE_THROWS_AS(mos::apply_edit(s, {tok("REMOVE"), tok("3"), tok("3")}), std::invalid_argument);
  REQUIRE_THROWS_AS(
      mos::apply_edit(s, {tok("ADD"), tok("RED"), tok("SQUARE"), tok("AT"), tok("0"), tok("0")}),
      std::invalid_argument);
  REQUIRE_THROWS_AS(mos::apply_edit(s, {tok("AT")}), std::invalid_argument);
}

TEST_CASE("edits: sampled instructions are always applicable and change the scene") {
  for (int i = 0; i < 500; ++i) {
    mos::Pcg32 rng(5000 + static_cast<uint64_t>(i));
    SceneSpec s = mos::sample_scene(rng);
    std::vector<int> ins = mos::sample_edit_instruction(s, rng);
    SceneSpec t = mos::apply_edit(s, ins);  // must not throw
    REQUIRE(!(t == s));
  }
}

TEST_CASE("scene sampling: uniform histograms within 3 sigma") {
  int shape_count[4] = {0, 0, 0, 0};
  int color_count[8] = {0, 0, 0, 0, 0, 0, 0, 0};
  int cell_count[16] = {0};
  long total = 0;
  long count_sum = 0;
  const int kScenes = 10000;
  for (int i = 0; i < kScenes; ++i) {
    mos::Pcg32 rng = mos::derive_rng(77, mos::rng_tag::kDataset, static_cast<uint64_t>(i));
    SceneSpec s = mos::sample_scene(rng);
    count_sum += static_cast<long>(s.entities.size());
    for (const Entity& e : s.entities) {
      ++shape_count[static_cast<int>(e.shape)];
      ++color_count[static_cast<int>(e.color)];
      ++cell_count[e.row * 4 + e.col];
      ++total;
    }
  }
  // Entity count mean 2.5 within 3 sigma of the uniform{1..4} sampler.
  double mean_count = static_cast<double>(count_sum) / kScenes;
  REQUIRE(std::abs(mean_count - 2.5) <= 3.0 * std::sqrt(1.25 / kScenes));

  auto check_uniform = [&](const int* counts, int bins) {
    double p = 1.0 / bins;
    double expect = total * p;
    double sigma = std::sqrt(total * p * (1.0 - p));
    for (int b = 0; b < bins; ++b) {
      INFO("bin ", b, " count ", counts[b], " expect ", expect);
      REQUIRE(std::abs(counts[b] - expect) <= 3.0 * sigma);
    }
  };
  check_uniform(shape_count, 4);
  check_uniform(color_count, 8);
  check_uniform(cell_count, 16);
}

TEST_CASE("datasets: determinism, size handling, cache round trip") {
  auto a = mos::make_dataset(5, 31);
  auto b = mos::make_dataset(5, 31);
  auto c = mos::make_dataset(5, 32);
  REQUIRE(a.size() == 5);
  for (int i = 0; i < 5; ++i) {
    REQUIRE(a[i].scene == b[i].scene);
    REQUIRE(a[i].caption == b[i].caption);
    REQUIRE(a[i].latent.data_vec() == b[i].latent.data_vec());
    REQUIRE(a[i].caption == mos::caption_of(a[i].scene));
  }
  bool any_diff = false;
  for (int i = 0; i < 5; ++i) any_diff = any_diff || !(a[i].scene == c[i].scene);
  REQUIRE(any_diff);

  REQUIRE(mos::make_dataset(1, 7).size() == 1);
  REQUIRE(mos::make_dataset(0, 7).empty());

  std::string path = temp_path("cache.bin");
  mos::save_dataset(path, a);
  auto loaded = mos::load_dataset(path);
  REQUIRE(loaded.size() == a.size());
  for (size_t i = 0; i < a.size(); ++i) {
    REQUIRE(loaded[i].scene == a[i].scene);
    REQUIRE(loaded[i].caption == a[i].caption);
    REQUIRE(loaded[i].latent.data_vec() == a[i].latent.data_vec());
  }
  std::remove(path.c_str());
  REQUIRE_THROWS_AS(mos::load_dataset(path), std::runtime_error);
}

TEST_CASE("edit datasets: deterministic and self-consistent") {
  auto a = mos::make_edit_dataset(6, 41);
  auto b = mos::make_edit_dataset(6, 41);
  REQUIRE(a.size() == 6);
  for (int i = 0; i < 6; ++i) {
    REQUIRE(a[i].source == b[i].source);
    REQUIRE(a[i].instruction == b[i].instruction);
    REQUIRE(a[i].target == mos::apply_edit(a[i].source, a[i].instruction));
    REQUIRE(a[i].source_latent.data_vec() ==
            mos::encode_latent(mos::render_scene(a[i].source)).data_vec());
    REQUIRE(a[i].target_latent.data_vec() ==
            mos::encode_latent(mos::render_scene(a[i].target)).data_vec());
  }
}

TEST_CASE("image files: ppm/pgm round trip on the 255-level grid") {
  Tensor img = mos::render_scene(two_entity_scene());
  std::string path = temp_path("img.ppm");
  mos::write_ppm(path, img);
  Tensor back = mos::read_ppm(path);
  REQUIRE(back.shape() == img.shape());
  for (int i = 0; i < img.numel(); ++i) {
    float quantized = std::lround(img.data()[i] * 255.0f) / 255.0f;
    REQUIRE(std::abs(back.data()[i] - quantized) <= 1e-6f);
  }
  // Writing the read-back image reproduces the file byte-for-byte.
  std::string path2 = temp_path("img2.ppm");
  mos::write_ppm(path2, back);
  std::ifstream f1(path, std::ios::binary), f2(path2, std::ios::binary);
  std::string s1((std::istreambuf_iterator<char>(f1)), std::istreambuf_iterator<char>());
  std::string s2((std::istreambuf_iterator<char>(f2)), std::istreambuf_iterator<char>());
  REQUIRE(s1 == s2);
  std::remove(path.c_str());
  std::remove(path2.c_str());

  Tensor gray = Tensor::zeros({4, 6});
  for (int i = 0; i < 24; ++i) gray.data()[i] = static_cast<float>(i) / 24.0f;
  std::string gpath = temp_path("img.pgm");
  mos::write_pgm(gpath, gray);
  Tensor gback = mos::read_pgm(gpath);
  REQUIRE(gback.shape() == gray.shape());
  for (int i = 0; i < 24; ++i) {
    float quantized = std::lround(gray.data()[i] * 255.0f) / 255.0f;
    REQUIRE(std::abs(gback.data()[i] - quantized) <= 1e-6f);
  }
  std::remove(gpath.c_str());

  REQUIRE_THROWS_AS(mos::write_ppm("/nonexistent_dir/x.ppm", img), std::runtime_error);
  REQUIRE_THROWS_AS(mos::read_ppm("/nonexistent_dir/x.ppm"), std::runtime_error);
  REQUIRE_THROWS_AS(mos::write_ppm(temp_path("bad.ppm"), gray), std::invalid_argument);
}
