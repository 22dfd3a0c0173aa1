#pragma once

#include <array>
#include <cstdint>
#include <string>
#include <vector>

#include "poslm/position_codec.hpp"
#include "poslm/rng.hpp"
#include "poslm/vocab.hpp"

namespace poslm {

struct GenerationError : std::runtime_error {
  using std::runtime_error::runtime_error;
};

struct SceneConfig {
  int width = 64;
  int height = 64;
  int channels = 3;
  int min_objects = 1;
  int max_objects = 3;
  int min_size = 16;  // object bounding box side, pixels
  int max_size = 26;
  double relation_prob = 0.5;  // chance of a spatial clause between consecutive phrases
  std::uint64_t seed = 1;

  std::vector<std::string> colors = {"red", "green", "blue", "yellow", "magenta", "cyan"};
  std::vector<std::string> shapes = {"square", "circle", "triangle"};
};

struct SceneObject {
  int color = 0;  // index into SceneConfig::colors
  int shape = 0;  // index into SceneConfig::shapes
  BBox box;
  int phrase_begin = 0;  // caption word indices, inclusive
  int phrase_end = 0;
};

// One synthetic grounded sample: flat-color shapes on a plain background and
// a caption that names each object, with geometrically truthful spatial
// clauses between consecutive phrases.
struct SceneSample {
  int width = 0, height = 0, channels = 3;
  std::vector<float> image;  // HWC row-major, unit range
  std::vector<std::string> caption;
  std::vector<SceneObject> objects;
  std::uint64_t seed = 0;

  float pixel(int x, int y, int c) const {
    return image[(static_cast<size_t>(y) * static_cast<size_t>(width) + static_cast<size_t>(x)) *
                     static_cast<size_t>(channels) +
                 static_cast<size_t>(c)];
  }
};

// Deterministic in (config.seed, index); objects never overlap and every
// caption claim holds geometrically.
SceneSample generate(const SceneConfig& config, std::uint64_t index);

// Mirror the image left-right, reflect every box, and swap the exact words
// "left" and "right" in the caption.
SceneSample hflip(const SceneSample& sample);

// Random crop window with side scales in [min_scale, 1], snapped to
// `snap`-pixel multiples. Boxes are translated and clipped; objects whose
// clipped area falls below 10% of the original are dropped and the caption is
// rebuilt. Retries when the window would drop every object.
SceneSample random_crop(const SceneSample& sample, Rng& rng, double min_scale = 0.6, int snap = 8);

// The fixed word list of the synthetic corpus: colors, shapes, spatial words
// and the glue words used by task prompts.
WordVocab corpus_words(const SceneConfig& config);

// Dataset directory layout: scenes.jsonl + images.bin + manifest.json.
void save_dataset(const std::string& dir, const SceneConfig& config, const std::vector<SceneSample>& scenes,
                  const std::string& config_digest);
struct Dataset {
  SceneConfig config;
  std::vector<SceneSample> scenes;
  std::string config_digest;
};
Dataset load_dataset(const std::string& dir);

// Audits SceneSample invariants (boxes inside image, spans valid, spatial
// words truthful, stated box close to rendered pixels). Throws on violation.
void audit_scene(const SceneSample& sample, const SceneConfig& config);

}  // namespace poslm
