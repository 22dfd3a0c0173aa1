#include "poslm/config.hpp"

#include <fstream>
#include <sstream>

namespace poslm {

namespace {

std::string trim(const std::string& s) {
  size_t b = s.find_first_not_of(" \t\r\n");
  if (b == std::string::npos) return "";
  size_t e = s.find_last_not_of(" \t\r\n");
  return s.substr(b, e - b + 1);
}

struct IniReader {
  const std::map<std::string, std::string>& kv;

  bool has(const std::string& key) const { return kv.count(key) != 0; }
  std::string str(const std::string& key, const std::string& def) const {
    auto it = kv.find(key);
    return it == kv.end() ? def : it->second;
  }
  double num(const std::string& key, double def) const {
    auto it = kv.find(key);
    if (it == kv.end()) return def;
    size_t pos = 0;
    double v = std::stod(it->second, &pos);
    if (pos != it->second.size()) throw std::invalid_argument("config: bad number for " + key);
    return v;
  }
  int integer(const std::string& key, int def) const {
    double v = num(key, static_cast<double>(def));
    int i = static_cast<int>(v);
    if (static_cast<double>(i) != v) throw std::invalid_argument("config: expected integer for " + key);
    return i;
  }
  std::uint64_t u64(const std::string& key, std::uint64_t def) const {
    auto it = kv.find(key);
    if (it == kv.end()) return def;
    return std::stoull(it->second);
  }
  bool boolean(const std::string& key, bool def) const {
    auto it = kv.find(key);
    if (it == kv.end()) return def;
    std::string v = it->second;
    if (v == "true" || v == "1" || v == "yes" || v == "on") return true;
    if (v == "false" || v == "0" || v == "no" || v == "off") return false;
    throw std::invalid_argument("config: bad boolean for " + key);
  }
  std::vector<std::string> list(const std::string& key, const std::vector<std::string>& def) const {
    auto it = kv.find(key);
    if (it == kv.end()) return def;
    std::vector<std::string> out;
    std::istringstream is(it->second);
    std::string w;
    while (std::getline(is, w, ',')) {
      w = trim(w);
      if (!w.empty()) out.push_back(w);
    }
    return out;
  }
};

}  // namespace

std::map<std::string, std::string> parse_ini(const std::string& text) {
  std::map<std::string, std::string> kv;
  std::istringstream is(text);
  std::string line, section;
  int lineno = 0;
  while (std::getline(is, line)) {
    ++lineno;
    size_t hash = line.find_first_of("#;");
    if (hash != std::string::npos) line = line.substr(0, hash);
    line = trim(line);
    if (line.empty()) continue;
    if (line.front() == '[') {
      if (line.back() != ']')
        throw std::invalid_argument("config line " + std::to_string(lineno) + ": unterminated section");
      section = trim(line.substr(1, line.size() - 2));
      continue;
    }
    size_t eq = line.find('=');
    if (eq == std::string::npos)
      throw std::invalid_argument("config line " + std::to_string(lineno) + ": expected key = value");
    std::string key = trim(line.substr(0, eq));
    std::string value = trim(line.substr(eq + 1));
    if (key.empty()) throw std::invalid_argument("config line " + std::to_string(lineno) + ": empty key");
    kv[section.empty() ? key : section + "." + key] = value;
  }
  return kv;
}

void ExperimentConfig::validate() const {
  if (scene_count < 1 || holdout < 0 || holdout >= scene_count)
    throw std::invalid_argument("ExperimentConfig: need 0 <= holdout < count");
  if (threads < 1) throw std::invalid_argument("ExperimentConfig: threads must be >= 1");
  model.validate();
  train.validate();
}

ExperimentConfig config_from_ini(const std::string& text) {
  auto kv = parse_ini(text);
  IniReader r{kv};
  ExperimentConfig c;

  c.seed = r.u64("experiment.seed", c.seed);
  c.out_dir = r.str("experiment.out_dir", c.out_dir);
  c.threads = r.integer("experiment.threads", c.threads);

  c.scene.width = r.integer("scene.width", c.scene.width);
  c.scene.height = r.integer("scene.height", c.scene.height);
  c.scene.min_objects = r.integer("scene.min_objects", c.scene.min_objects);
  c.scene.max_objects = r.integer("scene.max_objects", c.scene.max_objects);
  c.scene.min_size = r.integer("scene.min_size", c.scene.min_size);
  c.scene.max_size = r.integer("scene.max_size", c.scene.max_size);
  c.scene.relation_prob = r.num("scene.relation_prob", c.scene.relation_prob);
  c.scene.colors = r.list("scene.colors", c.scene.colors);
  c.scene.shapes = r.list("scene.shapes", c.scene.shapes);
  c.scene_count = r.integer("scene.count", c.scene_count);
  c.holdout = r.integer("scene.holdout", c.holdout);

  c.model.dim = r.integer("model.dim", c.model.dim);
  c.model.layers = r.integer("model.layers", c.model.layers);
  c.model.heads = r.integer("model.heads", c.model.heads);
  c.model.ffn_dim = r.integer("model.ffn_dim", c.model.ffn_dim);
  c.model.patch = r.integer("model.patch", c.model.patch);
  c.model.max_tokens = r.integer("model.max_tokens", c.model.max_tokens);
  c.model.position_bins = r.integer("model.position_bins", c.model.position_bins);

  c.train.optimizer = r.str("train.optimizer", c.train.optimizer);
  c.train.lr = r.num("train.lr", c.train.lr);
  c.train.batch = r.integer("train.batch", c.train.batch);
  c.train.epochs = r.integer("train.epochs", c.train.epochs);
  c.train.lambda = r.num("train.lambda", c.train.lambda);
  c.train.alpha = r.num("train.alpha", c.train.alpha);
  c.train.ordering_aware = r.boolean("train.ordering_aware", c.train.ordering_aware);
  c.train.itm_neg_rate = r.num("train.itm_neg_rate", c.train.itm_neg_rate);
  c.train.hflip_prob = r.num("train.hflip_prob", c.train.hflip_prob);
  c.train.crop_prob = r.num("train.crop_prob", c.train.crop_prob);
  c.train.crop_min_scale = r.num("train.crop_min_scale", c.train.crop_min_scale);

  c.tune.optimizer = r.str("tune.optimizer", c.tune.optimizer);
  if (c.tune.optimizer != "adam" && c.tune.optimizer != "sgd")
    throw std::invalid_argument("config: tune.optimizer must be adam or sgd");
  c.tune.lr = r.num("tune.lr", c.tune.lr);
  c.tune.batch = r.integer("tune.batch", c.tune.batch);
  c.tune.epochs = r.integer("tune.epochs", c.tune.epochs);
  c.tune.vcr_head = r.str("tune.vcr_head", c.tune.vcr_head);
  if (c.tune.vcr_head != "itm" && c.tune.vcr_head != "yesno")
    throw std::invalid_argument("config: tune.vcr_head must be itm or yesno");

  std::string mode = r.str("masking.mode", "structured");
  if (mode == "structured")
    c.masking.mode = MaskingMode::Structured;
  else if (mode == "independent")
    c.masking.mode = MaskingMode::Independent;
  else
    throw std::invalid_argument("config: masking.mode must be structured or independent");
  c.masking.independent_rate = r.num("masking.independent_rate", c.masking.independent_rate);
  c.masking.text_rate = r.num("masking.text_rate", c.masking.text_rate);

  c.ablate.seeds = r.integer("ablate.seeds", c.ablate.seeds);
  c.ablate.scene_count = r.integer("ablate.scene_count", c.ablate.scene_count);
  c.ablate.holdout = r.integer("ablate.holdout", c.ablate.holdout);
  c.ablate.pretrain_epochs = r.integer("ablate.pretrain_epochs", c.ablate.pretrain_epochs);
  c.ablate.tune_epochs = r.integer("ablate.tune_epochs", c.ablate.tune_epochs);
  c.ablate.threshold = r.num("ablate.threshold", c.ablate.threshold);

  // Derived fields: the image extent bounds the patch table, the corpus word
  // list sizes the text vocabulary, and all stage seeds flow from the root.
  c.model.image_w = c.scene.width;
  c.model.image_h = c.scene.height;
  c.model.text_vocab = corpus_words(c.scene).size();
  c.model.seed = derive_seed(c.seed, 1);
  c.train.seed = derive_seed(c.seed, 2);
  c.scene.seed = derive_seed(c.seed, 3);

  c.validate();
  return c;
}

ExperimentConfig load_config_file(const std::string& path) {
  std::ifstream in(path);
  if (!in) throw std::runtime_error("cannot open config file " + path);
  std::ostringstream ss;
  ss << in.rdbuf();
  return config_from_ini(ss.str());
}

std::string config_canonical(const ExperimentConfig& c) {
  std::ostringstream os;
  os.precision(17);
  os << "seed=" << c.seed << "\nthreads=" << c.threads << "\n";
  os << "scene=" << c.scene.width << "x" << c.scene.height << " objects=" << c.scene.min_objects << ".."
     << c.scene.max_objects << " size=" << c.scene.min_size << ".." << c.scene.max_size
     << " rel=" << c.scene.relation_prob << " count=" << c.scene_count << " holdout=" << c.holdout << "\n";
  os << "colors=";
  for (const auto& w : c.scene.colors) os << w << ",";
  os << "\nshapes=";
  for (const auto& w : c.scene.shapes) os << w << ",";
  os << "\nmodel=d" << c.model.dim << " l" << c.model.layers << " h" << c.model.heads << " f" << c.model.ffn_dim
     << " p" << c.model.patch << " M" << c.model.position_bins << " T" << c.model.max_tokens << "\n";
  os << "train=" << c.train.optimizer << " lr" << c.train.lr << " b" << c.train.batch << " e" << c.train.epochs << " lam" << c.train.lambda
     << " a" << c.train.alpha << " oao" << c.train.ordering_aware << " itm" << c.train.itm_neg_rate << " hf"
     << c.train.hflip_prob << " cr" << c.train.crop_prob << " cs" << c.train.crop_min_scale << "\n";
  os << "tune=" << c.tune.optimizer << " lr" << c.tune.lr << " b" << c.tune.batch << " e" << c.tune.epochs << "\n";
  os << "masking=" << (c.masking.mode == MaskingMode::Structured ? "structured" : "independent") << " ir"
     << c.masking.independent_rate << " tr" << c.masking.text_rate << "\n";
  return os.str();
}

std::string fnv1a_hex(const std::string& text) {
  std::uint64_t h = 1469598103934665603ULL;
  for (unsigned char ch : text) h = (h ^ ch) * 1099511628211ULL;
  static const char* digits = "0123456789abcdef";
  std::string out(16, '0');
  for (int i = 15; i >= 0; --i) {
    out[static_cast<size_t>(i)] = digits[h & 0xf];
    h >>= 4;
  }
  return out;
}

std::string config_digest(const ExperimentConfig& config) { return fnv1a_hex(config_canonical(config)); }

}  // namespace poslm
