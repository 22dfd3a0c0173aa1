#include <doctest.h>

#include <filesystem>
#include <set>

#include "poslm/scenes.hpp"

using namespace poslm;

namespace {

SceneConfig small_config() {
  SceneConfig c;
  c.seed = 7;
  return c;
}

}  // namespace

TEST_CASE("generation is deterministic in (seed, index)") {
  SceneConfig c = small_config();
  for (std::uint64_t idx : {0ULL, 3ULL, 17ULL}) {
    SceneSample a = generate(c, idx);
    SceneSample b = generate(c, idx);
    CHECK(a.image == b.image);
    CHECK(a.caption == b.caption);
    REQUIRE(a.objects.size() == b.objects.size());
    for (size_t i = 0; i < a.objects.size(); ++i) {
      CHECK(a.objects[i].box.x_min == b.objects[i].box.x_min);
      CHECK(a.objects[i].box.y_max == b.objects[i].box.y_max);
    }
  }
  // different indices differ
  CHECK(generate(c, 0).image != generate(c, 1).image);
}

TEST_CASE("generated scenes satisfy their invariants") {
  SceneConfig c = small_config();
  int with_relations = 0, total_objects = 0;
  for (std::uint64_t idx = 0; idx < 500; ++idx) {
    SceneSample s = generate(c, idx);
    audit_scene(s, c);  // boxes, spans, truthfulness, rasterization oracle
    REQUIRE(!s.objects.empty());
    total_objects += static_cast<int>(s.objects.size());
    for (const auto& w : s.caption) {
      if (w == "left" || w == "right" || w == "above" || w == "below") {
        ++with_relations;
        break;
      }
    }
    // objects do not overlap
    for (size_t i = 0; i < s.objects.size(); ++i) {
      for (size_t j = i + 1; j < s.objects.size(); ++j) {
        const BBox& a = s.objects[i].box;
        const BBox& b = s.objects[j].box;
        bool disjoint = a.x_max <= b.x_min || b.x_max <= a.x_min || a.y_max <= b.y_min || b.y_max <= a.y_min;
        CHECK(disjoint);
      }
    }
    // distinct color/shape combos per scene
    std::set<std::pair<int, int>> combos;
    for (const auto& o : s.objects) CHECK(combos.emplace(o.color, o.shape).second);
  }
  CHECK(with_relations > 50);  // relation clauses actually appear
  CHECK(total_objects > 900);
}

TEST_CASE("left-of claims hold geometrically") {
  SceneConfig c = small_config();
  int checked = 0;
  for (std::uint64_t idx = 0; idx < 2000 && checked < 50; ++idx) {
    SceneSample s = generate(c, idx);
    for (size_t i = 1; i < s.objects.size(); ++i) {
      const auto& prev = s.objects[i - 1];
      const auto& cur = s.objects[i];
      std::vector<std::string> gap(s.caption.begin() + prev.phrase_end + 1,
                                   s.caption.begin() + cur.phrase_begin);
      if (gap == std::vector<std::string>{"left", "of"}) {
        CHECK(prev.box.x_center() < cur.box.x_center());
        ++checked;
      } else if (gap == std::vector<std::string>{"right", "of"}) {
        CHECK(prev.box.x_center() > cur.box.x_center());
        ++checked;
      }
    }
  }
  CHECK(checked >= 50);
}

TEST_CASE("hflip") {
  SceneConfig c = small_config();
  SceneSample s = generate(c, 11);

  SUBCASE("box reflection arithmetic") {
    SceneSample f = hflip(s);
    for (size_t i = 0; i < s.objects.size(); ++i) {
      CHECK(f.objects[i].box.x_min == doctest::Approx(s.width - s.objects[i].box.x_max));
      CHECK(f.objects[i].box.x_max == doctest::Approx(s.width - s.objects[i].box.x_min));
      CHECK(f.objects[i].box.y_min == s.objects[i].box.y_min);
    }
    BBox b{10, 20, 30, 40, 64, 64};
    SceneSample one;
    one.width = 64;
    one.height = 64;
    one.channels = 3;
    one.image.assign(64 * 64 * 3, 0.0f);
    one.caption = {"red", "square"};
    one.objects = {{0, 0, b, 0, 1}};
    SceneSample fo = hflip(one);
    CHECK(fo.objects[0].box.x_min == doctest::Approx(34));
    CHECK(fo.objects[0].box.x_max == doctest::Approx(54));
  }

  SUBCASE("involution") {
    SceneSample ff = hflip(hflip(s));
    CHECK(ff.image == s.image);
    CHECK(ff.caption == s.caption);
    for (size_t i = 0; i < s.objects.size(); ++i)
      CHECK(ff.objects[i].box.x_min == doctest::Approx(s.objects[i].box.x_min));
  }

  SUBCASE("left/right words swap and stay truthful") {
    for (std::uint64_t idx = 0; idx < 200; ++idx) {
      SceneSample a = generate(c, idx);
      SceneSample f = hflip(a);
      audit_scene(f, c);
      for (size_t w = 0; w < a.caption.size(); ++w) {
        if (a.caption[w] == "left") CHECK(f.caption[w] == "right");
        else if (a.caption[w] == "right") CHECK(f.caption[w] == "left");
        else CHECK(f.caption[w] == a.caption[w]);
      }
    }
  }
}

TEST_CASE("random_crop") {
  SceneConfig c = small_config();

  SUBCASE("full-window crop is the identity") {
    SceneSample s = generate(c, 4);
    Rng rng(1);
    SceneSample out = random_crop(s, rng, 1.0, 8);
    CHECK(out.width == s.width);
    CHECK(out.height == s.height);
    CHECK(out.image == s.image);
    CHECK(out.caption == s.caption);
  }

  SUBCASE("clipped boxes lie inside the window and survivors stay consistent") {
    Rng rng(42);
    for (std::uint64_t idx = 0; idx < 300; ++idx) {
      SceneSample s = generate(c, idx);
      SceneSample out = random_crop(s, rng, 0.6, 8);
      CHECK(out.width % 8 == 0);
      CHECK(out.height % 8 == 0);
      REQUIRE(!out.objects.empty());
      SceneConfig cc = c;
      cc.width = out.width;
      cc.height = out.height;
      for (const auto& o : out.objects) {
        CHECK(o.box.x_min >= 0);
        CHECK(o.box.x_max <= out.width);
        CHECK(o.box.y_min >= 0);
        CHECK(o.box.y_max <= out.height);
      }
      // spans rebuilt consistently: phrase words match object attributes
      for (const auto& o : out.objects) {
        CHECK(out.caption[static_cast<size_t>(o.phrase_begin)] == c.colors[static_cast<size_t>(o.color)]);
        CHECK(out.caption[static_cast<size_t>(o.phrase_end)] == c.shapes[static_cast<size_t>(o.shape)]);
      }
      // spatial claims remain truthful after the rewrite
      for (size_t i = 1; i < out.objects.size(); ++i) {
        const auto& prev = out.objects[i - 1];
        const auto& cur = out.objects[i];
        std::vector<std::string> gap(out.caption.begin() + prev.phrase_end + 1,
                                     out.caption.begin() + cur.phrase_begin);
        if (gap == std::vector<std::string>{"left", "of"}) CHECK(prev.box.x_center() < cur.box.x_center());
        if (gap == std::vector<std::string>{"right", "of"}) CHECK(prev.box.x_center() > cur.box.x_center());
        if (gap == std::vector<std::string>{"above"}) CHECK(prev.box.y_center() < cur.box.y_center());
        if (gap == std::vector<std::string>{"below"}) CHECK(prev.box.y_center() > cur.box.y_center());
      }
    }
  }
}

TEST_CASE("corpus word list covers scenes and prompt glue") {
  SceneConfig c = small_config();
  WordVocab words = corpus_words(c);
  for (const auto& w : {"red", "square", "left", "of", "the", "is", "answer", "yes", "no", "relation", "with"})
    CHECK(words.contains(w));
  // every caption word is in the vocabulary
  for (std::uint64_t idx = 0; idx < 100; ++idx) {
    for (const auto& w : generate(c, idx).caption) CHECK(words.contains(w));
  }
}

TEST_CASE("dataset save/load round trip") {
  namespace fs = std::filesystem;
  SceneConfig c = small_config();
  std::vector<SceneSample> scenes;
  for (std::uint64_t i = 0; i < 10; ++i) scenes.push_back(generate(c, i));

  fs::path dir = fs::temp_directory_path() / "poslm_test_dataset";
  fs::remove_all(dir);
  save_dataset(dir.string(), c, scenes, "0123456789abcdef");
  Dataset ds = load_dataset(dir.string());

  CHECK(ds.config_digest == "0123456789abcdef");
  REQUIRE(ds.scenes.size() == scenes.size());
  for (size_t i = 0; i < scenes.size(); ++i) {
    CHECK(ds.scenes[i].image == scenes[i].image);
    CHECK(ds.scenes[i].caption == scenes[i].caption);
    CHECK(ds.scenes[i].seed == scenes[i].seed);
    REQUIRE(ds.scenes[i].objects.size() == scenes[i].objects.size());
    for (size_t o = 0; o < scenes[i].objects.size(); ++o) {
      CHECK(ds.scenes[i].objects[o].box.x_min == scenes[i].objects[o].box.x_min);
      CHECK(ds.scenes[i].objects[o].phrase_end == scenes[i].objects[o].phrase_end);
    }
  }
  fs::remove_all(dir);
}
