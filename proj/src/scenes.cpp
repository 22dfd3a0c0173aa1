#include "poslm/scenes.hpp"

#include <algorithm>
#include <cmath>
#include <filesystem>
#include <fstream>
#include <set>

#include <json.hpp>

#include "poslm/io_util.hpp"

namespace poslm {

namespace {

struct Rgb {
  float r, g, b;
};

Rgb color_rgb(const std::string& name) {
  if (name == "red") return {1.0f, 0.1f, 0.1f};
  if (name == "green") return {0.1f, 1.0f, 0.1f};
  if (name == "blue") return {0.15f, 0.25f, 1.0f};
  if (name == "yellow") return {1.0f, 1.0f, 0.1f};
  if (name == "magenta") return {1.0f, 0.1f, 1.0f};
  if (name == "cyan") return {0.1f, 1.0f, 1.0f};
  // Unlisted color names get a deterministic hash-derived tint.
  std::uint64_t h = 1469598103934665603ULL;
  for (char c : name) h = (h ^ static_cast<unsigned char>(c)) * 1099511628211ULL;
  auto chan = [&](int k) { return 0.25f + 0.75f * static_cast<float>((h >> (k * 8)) & 0xff) / 255.0f; };
  return {chan(0), chan(1), chan(2)};
}

constexpr float kBackground = 0.08f;
constexpr double kRelationMargin = 4.0;  // pixels between centers before a claim is made

bool inside_shape(const std::string& shape, const BBox& box, double px, double py) {
  double cx = box.x_center(), cy = box.y_center();
  if (shape == "circle") {
    double r = 0.5 * std::min(box.width(), box.height());
    double dx = px - cx, dy = py - cy;
    return dx * dx + dy * dy <= r * r;
  }
  if (shape == "triangle") {
    if (py < box.y_min || py > box.y_max || box.height() <= 0) return false;
    double t = (py - box.y_min) / box.height();
    return std::abs(px - cx) <= t * 0.5 * box.width();
  }
  return px >= box.x_min && px < box.x_max && py >= box.y_min && py < box.y_max;  // square
}

void render_object(SceneSample& s, const SceneConfig& config, const SceneObject& obj) {
  Rgb rgb = color_rgb(config.colors[static_cast<size_t>(obj.color)]);
  const std::string& shape = config.shapes[static_cast<size_t>(obj.shape)];
  int x0 = static_cast<int>(std::floor(obj.box.x_min));
  int y0 = static_cast<int>(std::floor(obj.box.y_min));
  int x1 = static_cast<int>(std::ceil(obj.box.x_max));
  int y1 = static_cast<int>(std::ceil(obj.box.y_max));
  for (int y = std::max(0, y0); y < std::min(s.height, y1); ++y) {
    for (int x = std::max(0, x0); x < std::min(s.width, x1); ++x) {
      if (!inside_shape(shape, obj.box, x + 0.5, y + 0.5)) continue;
      size_t at = (static_cast<size_t>(y) * static_cast<size_t>(s.width) + static_cast<size_t>(x)) *
                  static_cast<size_t>(s.channels);
      s.image[at + 0] = rgb.r;
      s.image[at + 1] = rgb.g;
      s.image[at + 2] = rgb.b;
    }
  }
}

bool boxes_too_close(const BBox& a, const BBox& b, double margin) {
  return a.x_min - margin < b.x_max && b.x_min - margin < a.x_max && a.y_min - margin < b.y_max &&
         b.y_min - margin < a.y_max;
}

// Relation clauses as word sequences; "left of" reads subject-then-object.
const std::vector<std::vector<std::string>>& relation_clauses() {
  static const std::vector<std::vector<std::string>> kClauses = {
      {"left", "of"}, {"right", "of"}, {"above"}, {"below"}};
  return kClauses;
}

bool clause_holds(size_t clause, const BBox& subject, const BBox& object, double margin) {
  switch (clause) {
    case 0: return subject.x_center() < object.x_center() - margin;
    case 1: return subject.x_center() > object.x_center() + margin;
    case 2: return subject.y_center() < object.y_center() - margin;
    case 3: return subject.y_center() > object.y_center() + margin;
    default: return false;
  }
}

// Finds which clause (if any) sits between two adjacent phrases in a caption.
int clause_between(const std::vector<std::string>& caption, int gap_begin, int gap_end) {
  std::vector<std::string> gap(caption.begin() + gap_begin, caption.begin() + gap_end);
  if (gap.empty()) return -1;
  const auto& clauses = relation_clauses();
  for (size_t c = 0; c < clauses.size(); ++c) {
    if (gap == clauses[c]) return static_cast<int>(c);
  }
  return -1;
}

}  // namespace

WordVocab corpus_words(const SceneConfig& config) {
  std::vector<std::string> words;
  for (const auto& c : config.colors) words.push_back(c);
  for (const auto& s : config.shapes) words.push_back(s);
  for (const char* w : {"left", "right", "above", "below", "of", "the", "is", "a", "what", "which",
                        "color", "shape", "answer", "yes", "no", "relation", "with", "it"})
    words.emplace_back(w);
  return WordVocab(std::move(words));
}

SceneSample generate(const SceneConfig& config, std::uint64_t index) {
  if (config.colors.empty() || config.shapes.empty())
    throw std::invalid_argument("SceneConfig: vocabularies must be non-empty");
  if (config.min_objects < 1 || config.max_objects < config.min_objects)
    throw std::invalid_argument("SceneConfig: bad object count range");
  if (config.min_size < 4 || config.max_size < config.min_size ||
      config.max_size > std::min(config.width, config.height))
    throw std::invalid_argument("SceneConfig: bad size range");
  int combos = static_cast<int>(config.colors.size() * config.shapes.size());
  if (config.max_objects > combos)
    throw std::invalid_argument("SceneConfig: more objects than distinct color/shape combos");

  Rng rng(derive_seed(config.seed, index));
  SceneSample s;
  s.width = config.width;
  s.height = config.height;
  s.channels = config.channels;
  s.seed = derive_seed(config.seed, index);
  s.image.assign(static_cast<size_t>(config.width) * static_cast<size_t>(config.height) *
                     static_cast<size_t>(config.channels),
                 kBackground);

  int n = config.min_objects + static_cast<int>(rng.next_below(
                                   static_cast<std::uint32_t>(config.max_objects - config.min_objects + 1)));

  // Each scene uses distinct (color, shape) combos so phrases are unambiguous.
  std::set<std::pair<int, int>> used;
  std::vector<SceneObject> objects;
  while (static_cast<int>(objects.size()) < n) {
    int c = static_cast<int>(rng.next_below(static_cast<std::uint32_t>(config.colors.size())));
    int sh = static_cast<int>(rng.next_below(static_cast<std::uint32_t>(config.shapes.size())));
    if (!used.emplace(c, sh).second) continue;
    SceneObject obj;
    obj.color = c;
    obj.shape = sh;
    objects.push_back(obj);
  }

  bool placed_all = false;
  for (int round = 0; round < 20 && !placed_all; ++round) {
    std::vector<BBox> boxes;
    placed_all = true;
    for (auto& obj : objects) {
      int size = config.min_size +
                 static_cast<int>(rng.next_below(static_cast<std::uint32_t>(config.max_size - config.min_size + 1)));
      bool ok = false;
      for (int attempt = 0; attempt < 100 && !ok; ++attempt) {
        int x0 = static_cast<int>(rng.next_below(static_cast<std::uint32_t>(config.width - size + 1)));
        int y0 = static_cast<int>(rng.next_below(static_cast<std::uint32_t>(config.height - size + 1)));
        BBox box{static_cast<double>(x0), static_cast<double>(y0), static_cast<double>(x0 + size),
                 static_cast<double>(y0 + size), static_cast<double>(config.width),
                 static_cast<double>(config.height)};
        ok = true;
        for (const auto& other : boxes) {
          if (boxes_too_close(box, other, 2.0)) {
            ok = false;
            break;
          }
        }
        if (ok) {
          obj.box = box;
          boxes.push_back(box);
        }
      }
      if (!ok) {
        placed_all = false;
        break;
      }
    }
  }
  if (!placed_all) throw GenerationError("generate: could not place objects without overlap");

  for (const auto& obj : objects) render_object(s, config, obj);

  for (size_t i = 0; i < objects.size(); ++i) {
    if (i > 0 && rng.next_bool(config.relation_prob)) {
      std::vector<size_t> valid;
      for (size_t c = 0; c < relation_clauses().size(); ++c) {
        if (clause_holds(c, objects[i - 1].box, objects[i].box, kRelationMargin)) valid.push_back(c);
      }
      if (!valid.empty()) {
        size_t c = valid[rng.next_below(static_cast<std::uint32_t>(valid.size()))];
        for (const auto& w : relation_clauses()[c]) s.caption.push_back(w);
      }
    }
    objects[i].phrase_begin = static_cast<int>(s.caption.size());
    s.caption.push_back(config.colors[static_cast<size_t>(objects[i].color)]);
    s.caption.push_back(config.shapes[static_cast<size_t>(objects[i].shape)]);
    objects[i].phrase_end = static_cast<int>(s.caption.size()) - 1;
  }
  s.objects = std::move(objects);
  return s;
}

SceneSample hflip(const SceneSample& sample) {
  SceneSample out = sample;
  for (int y = 0; y < sample.height; ++y) {
    for (int x = 0; x < sample.width; ++x) {
      for (int c = 0; c < sample.channels; ++c) {
        size_t dst = (static_cast<size_t>(y) * static_cast<size_t>(sample.width) + static_cast<size_t>(x)) *
                         static_cast<size_t>(sample.channels) +
                     static_cast<size_t>(c);
        out.image[dst] = sample.pixel(sample.width - 1 - x, y, c);
      }
    }
  }
  double w = static_cast<double>(sample.width);
  for (auto& obj : out.objects) {
    double x_min = obj.box.x_min, x_max = obj.box.x_max;
    obj.box.x_min = w - x_max;
    obj.box.x_max = w - x_min;
  }
  for (auto& word : out.caption) {
    if (word == "left")
      word = "right";
    else if (word == "right")
      word = "left";
  }
  return out;
}

SceneSample random_crop(const SceneSample& sample, Rng& rng, double min_scale, int snap) {
  if (min_scale <= 0 || min_scale > 1) throw std::invalid_argument("random_crop: min_scale out of (0,1]");
  if (snap < 1) throw std::invalid_argument("random_crop: snap must be >= 1");

  for (int attempt = 0; attempt < 50; ++attempt) {
    auto draw_side = [&](int full) {
      double scale = min_scale + (1.0 - min_scale) * rng.next_double();
      int side = static_cast<int>(static_cast<double>(full) * scale) / snap * snap;
      return std::clamp(side, std::min(snap, full), full);
    };
    int cw = draw_side(sample.width);
    int ch = draw_side(sample.height);
    int x0 = static_cast<int>(rng.next_below(static_cast<std::uint32_t>(sample.width - cw + 1)));
    int y0 = static_cast<int>(rng.next_below(static_cast<std::uint32_t>(sample.height - ch + 1)));

    std::vector<int> kept;
    std::vector<BBox> clipped;
    for (size_t i = 0; i < sample.objects.size(); ++i) {
      const BBox& b = sample.objects[i].box;
      BBox c;
      c.image_w = cw;
      c.image_h = ch;
      c.x_min = std::clamp(b.x_min - x0, 0.0, static_cast<double>(cw));
      c.x_max = std::clamp(b.x_max - x0, 0.0, static_cast<double>(cw));
      c.y_min = std::clamp(b.y_min - y0, 0.0, static_cast<double>(ch));
      c.y_max = std::clamp(b.y_max - y0, 0.0, static_cast<double>(ch));
      if (b.area() > 0 && c.area() / b.area() >= 0.1) {
        kept.push_back(static_cast<int>(i));
        clipped.push_back(c);
      }
    }
    if (kept.empty()) continue;

    SceneSample out;
    out.width = cw;
    out.height = ch;
    out.channels = sample.channels;
    out.seed = sample.seed;
    out.image.resize(static_cast<size_t>(cw) * static_cast<size_t>(ch) * static_cast<size_t>(sample.channels));
    for (int y = 0; y < ch; ++y) {
      for (int x = 0; x < cw; ++x) {
        for (int c = 0; c < sample.channels; ++c) {
          out.image[(static_cast<size_t>(y) * static_cast<size_t>(cw) + static_cast<size_t>(x)) *
                        static_cast<size_t>(sample.channels) +
                    static_cast<size_t>(c)] = sample.pixel(x + x0, y + y0, c);
        }
      }
    }

    // Rebuild the caption from survivors, keeping a clause only when the pair
    // was adjacent before the crop and the claim still holds for the clipped
    // boxes (clipping moves centers).
    for (size_t k = 0; k < kept.size(); ++k) {
      const SceneObject& src = sample.objects[static_cast<size_t>(kept[k])];
      if (k > 0 && kept[k] == kept[k - 1] + 1) {
        const SceneObject& prev = sample.objects[static_cast<size_t>(kept[k - 1])];
        int clause = clause_between(sample.caption, prev.phrase_end + 1, src.phrase_begin);
        if (clause >= 0 && clause_holds(static_cast<size_t>(clause), clipped[k - 1], clipped[k], 0.0)) {
          for (const auto& w : relation_clauses()[static_cast<size_t>(clause)]) out.caption.push_back(w);
        }
      }
      SceneObject obj = src;
      obj.box = clipped[k];
      obj.phrase_begin = static_cast<int>(out.caption.size());
      out.caption.push_back(sample.caption[static_cast<size_t>(src.phrase_begin)]);
      out.caption.push_back(sample.caption[static_cast<size_t>(src.phrase_end)]);
      obj.phrase_end = static_cast<int>(out.caption.size()) - 1;
      out.objects.push_back(obj);
    }
    return out;
  }
  throw GenerationError("random_crop: no window kept any object after bounded retries");
}

void audit_scene(const SceneSample& sample, const SceneConfig& config) {
  auto fail = [](const std::string& what) { throw std::runtime_error("audit_scene: " + what); };
  if (sample.image.size() != static_cast<size_t>(sample.width) * static_cast<size_t>(sample.height) *
                                 static_cast<size_t>(sample.channels))
    fail("image buffer size mismatch");

  for (const auto& obj : sample.objects) {
    if (!obj.box.valid() || obj.box.image_w != sample.width || obj.box.image_h != sample.height)
      fail("object box outside image");
    if (obj.phrase_begin < 0 || obj.phrase_end < obj.phrase_begin ||
        obj.phrase_end >= static_cast<int>(sample.caption.size()))
      fail("phrase span out of caption");
  }

  for (size_t i = 1; i < sample.objects.size(); ++i) {
    const auto& prev = sample.objects[i - 1];
    const auto& cur = sample.objects[i];
    int clause = clause_between(sample.caption, prev.phrase_end + 1, cur.phrase_begin);
    if (clause >= 0 && !clause_holds(static_cast<size_t>(clause), prev.box, cur.box, 0.0))
      fail("spatial clause is geometrically false");
  }

  // Rasterization check: the stated box must cover the rendered pixels.
  for (const auto& obj : sample.objects) {
    if (obj.box.area() <= 0) continue;
    Rgb rgb = color_rgb(config.colors[static_cast<size_t>(obj.color)]);
    double px_min = 1e9, py_min = 1e9, px_max = -1e9, py_max = -1e9;
    int x0 = std::max(0, static_cast<int>(std::floor(obj.box.x_min)));
    int y0 = std::max(0, static_cast<int>(std::floor(obj.box.y_min)));
    int x1 = std::min(sample.width, static_cast<int>(std::ceil(obj.box.x_max)));
    int y1 = std::min(sample.height, static_cast<int>(std::ceil(obj.box.y_max)));
    for (int y = y0; y < y1; ++y) {
      for (int x = x0; x < x1; ++x) {
        float dr = sample.pixel(x, y, 0) - rgb.r;
        float dg = sample.pixel(x, y, 1) - rgb.g;
        float db = sample.pixel(x, y, 2) - rgb.b;
        if (dr * dr + dg * dg + db * db < 0.05f) {
          px_min = std::min(px_min, static_cast<double>(x));
          py_min = std::min(py_min, static_cast<double>(y));
          px_max = std::max(px_max, static_cast<double>(x) + 1.0);
          py_max = std::max(py_max, static_cast<double>(y) + 1.0);
        }
      }
    }
    if (px_max < px_min) fail("object rendered no pixels of its color inside its box");
    BBox pixel_rect{px_min, py_min, px_max, py_max, obj.box.image_w, obj.box.image_h};
    double ix = std::max(0.0, std::min(obj.box.x_max, pixel_rect.x_max) - std::max(obj.box.x_min, pixel_rect.x_min));
    double iy = std::max(0.0, std::min(obj.box.y_max, pixel_rect.y_max) - std::max(obj.box.y_min, pixel_rect.y_min));
    double inter = ix * iy;
    double uni = obj.box.area() + pixel_rect.area() - inter;
    if (uni <= 0 || inter / uni < 0.5) fail("stated box and rendered pixel rectangle diverge");
  }
}

void save_dataset(const std::string& dir, const SceneConfig& config, const std::vector<SceneSample>& scenes,
                  const std::string& config_digest) {
  namespace fs = std::filesystem;
  fs::create_directories(dir);

  {
    std::ofstream out(fs::path(dir) / "scenes.jsonl");
    if (!out) throw std::runtime_error("save_dataset: cannot write " + dir + "/scenes.jsonl");
    for (const auto& s : scenes) {
      nlohmann::json j;
      j["seed"] = s.seed;
      j["caption"] = s.caption;
      nlohmann::json objs = nlohmann::json::array();
      for (const auto& o : s.objects) {
        objs.push_back({{"color", o.color},
                        {"shape", o.shape},
                        {"span", {o.phrase_begin, o.phrase_end}},
                        {"box", {o.box.x_min, o.box.y_min, o.box.x_max, o.box.y_max}}});
      }
      j["objects"] = objs;
      out << j.dump() << "\n";
    }
  }

  {
    std::ofstream out(fs::path(dir) / "images.bin", std::ios::binary);
    if (!out) throw std::runtime_error("save_dataset: cannot write " + dir + "/images.bin");
    out.write("PLIM", 4);
    write_u32_le(out, 1);  // format version
    write_u32_le(out, static_cast<std::uint32_t>(config.width));
    write_u32_le(out, static_cast<std::uint32_t>(config.height));
    write_u32_le(out, static_cast<std::uint32_t>(config.channels));
    write_u32_le(out, static_cast<std::uint32_t>(scenes.size()));
    for (const auto& s : scenes) {
      if (s.width != config.width || s.height != config.height)
        throw std::runtime_error("save_dataset: scene size differs from dataset size");
      for (float v : s.image) write_f32_le(out, v);
    }
  }

  {
    nlohmann::json j;
    j["width"] = config.width;
    j["height"] = config.height;
    j["channels"] = config.channels;
    j["count"] = scenes.size();
    j["config_digest"] = config_digest;
    j["scene"] = {{"min_objects", config.min_objects}, {"max_objects", config.max_objects},
                  {"min_size", config.min_size},       {"max_size", config.max_size},
                  {"relation_prob", config.relation_prob}, {"seed", config.seed},
                  {"colors", config.colors},           {"shapes", config.shapes}};
    std::ofstream out(fs::path(dir) / "manifest.json");
    if (!out) throw std::runtime_error("save_dataset: cannot write " + dir + "/manifest.json");
    out << j.dump(2) << "\n";
  }
}

Dataset load_dataset(const std::string& dir) {
  namespace fs = std::filesystem;
  Dataset ds;

  {
    std::ifstream in(fs::path(dir) / "manifest.json");
    if (!in) throw std::runtime_error("load_dataset: cannot read " + dir + "/manifest.json");
    nlohmann::json j = nlohmann::json::parse(in);
    ds.config.width = j.at("width").get<int>();
    ds.config.height = j.at("height").get<int>();
    ds.config.channels = j.at("channels").get<int>();
    ds.config_digest = j.at("config_digest").get<std::string>();
    const auto& sc = j.at("scene");
    ds.config.min_objects = sc.at("min_objects").get<int>();
    ds.config.max_objects = sc.at("max_objects").get<int>();
    ds.config.min_size = sc.at("min_size").get<int>();
    ds.config.max_size = sc.at("max_size").get<int>();
    ds.config.relation_prob = sc.at("relation_prob").get<double>();
    ds.config.seed = sc.at("seed").get<std::uint64_t>();
    ds.config.colors = sc.at("colors").get<std::vector<std::string>>();
    ds.config.shapes = sc.at("shapes").get<std::vector<std::string>>();
  }

  std::ifstream img(fs::path(dir) / "images.bin", std::ios::binary);
  if (!img) throw std::runtime_error("load_dataset: cannot read " + dir + "/images.bin");
  char magic[4];
  img.read(magic, 4);
  if (!img || std::string(magic, 4) != "PLIM") throw std::runtime_error("load_dataset: bad images.bin magic");
  if (read_u32_le(img) != 1) throw std::runtime_error("load_dataset: unsupported images.bin version");
  std::uint32_t w = read_u32_le(img), h = read_u32_le(img), c = read_u32_le(img), count = read_u32_le(img);
  if (static_cast<int>(w) != ds.config.width || static_cast<int>(h) != ds.config.height ||
      static_cast<int>(c) != ds.config.channels)
    throw std::runtime_error("load_dataset: images.bin header disagrees with manifest");

  std::ifstream in(fs::path(dir) / "scenes.jsonl");
  if (!in) throw std::runtime_error("load_dataset: cannot read " + dir + "/scenes.jsonl");
  std::string line;
  while (std::getline(in, line)) {
    if (line.empty()) continue;
    nlohmann::json j = nlohmann::json::parse(line);
    SceneSample s;
    s.width = static_cast<int>(w);
    s.height = static_cast<int>(h);
    s.channels = static_cast<int>(c);
    s.seed = j.at("seed").get<std::uint64_t>();
    s.caption = j.at("caption").get<std::vector<std::string>>();
    for (const auto& oj : j.at("objects")) {
      SceneObject o;
      o.color = oj.at("color").get<int>();
      o.shape = oj.at("shape").get<int>();
      o.phrase_begin = oj.at("span")[0].get<int>();
      o.phrase_end = oj.at("span")[1].get<int>();
      auto box = oj.at("box");
      o.box = BBox{box[0].get<double>(), box[1].get<double>(), box[2].get<double>(), box[3].get<double>(),
                   static_cast<double>(w), static_cast<double>(h)};
      s.objects.push_back(o);
    }
    s.image.resize(static_cast<size_t>(w) * h * c);
    for (auto& v : s.image) v = read_f32_le(img);
    ds.scenes.push_back(std::move(s));
  }
  if (ds.scenes.size() != count) throw std::runtime_error("load_dataset: scene count mismatch");
  return ds;
}

}  // namespace poslm
