#include "poslm/model.hpp"

#include <fstream>

#include <json.hpp>

#include "poslm/io_util.hpp"
#include "poslm/rng.hpp"

namespace poslm {

ModelParams init_params(const ModelConfig& config) {
  ModelParams p;
  p.config = config;
  p.allocate();
  Rng rng(derive_seed(config.seed, 0x0de1ULL));
  const float std_dev = 0.02f;
  p.visit([&](const std::string& name, std::vector<float>& v, int, int) {
    std::string leaf = name.substr(name.find_last_of('.') + 1);
    bool is_gain = leaf.size() >= 2 && leaf.compare(leaf.size() - 2, 2, "_g") == 0;
    bool is_bias = leaf[0] == 'b' || (leaf.size() >= 2 && leaf.compare(leaf.size() - 2, 2, "_b") == 0);
    if (is_gain) {
      std::fill(v.begin(), v.end(), 1.0f);
    } else if (is_bias) {
      std::fill(v.begin(), v.end(), 0.0f);
    } else {
      for (auto& x : v) x = std_dev * static_cast<float>(rng.next_gaussian());
    }
  });
  return p;
}

std::vector<int> coord_slots_for(const TokenStream& tokens, const VocabSpec& vocab) {
  std::vector<int> out(tokens.size(), -1);
  for (size_t i = 0; i < tokens.size(); ++i) {
    if (tokens[i] == vocab.open_id()) {
      for (size_t k = 0; k < 4 && i + 1 + k < tokens.size(); ++k) out[i + 1 + k] = static_cast<int>(k);
      i += 5;
    }
  }
  return out;
}

double itm_score(const ModelParams& params, const SampleInput& input) {
  Trace<float> trace;
  forward_encoder(params, input, trace);
  return itm_logit_of(params, trace);
}

void apply_sgd(ModelParams& params, const ParamsT<float>& grads, double lr) {
  std::vector<std::vector<float>*> mine;
  std::vector<const std::vector<float>*> theirs;
  params.visit([&](const std::string&, std::vector<float>& v, int, int) { mine.push_back(&v); });
  grads.visit([&](const std::string&, const std::vector<float>& v, int, int) { theirs.push_back(&v); });
  for (size_t b = 0; b < mine.size(); ++b) {
    auto& p = *mine[b];
    const auto& g = *theirs[b];
    for (size_t i = 0; i < p.size(); ++i)
      p[i] = static_cast<float>(static_cast<double>(p[i]) - lr * static_cast<double>(g[i]));
  }
}

void apply_sgd(ModelParams& params, const ParamsT<double>& grads, double lr) {
  std::vector<std::vector<float>*> mine;
  std::vector<const std::vector<double>*> theirs;
  params.visit([&](const std::string&, std::vector<float>& v, int, int) { mine.push_back(&v); });
  grads.visit([&](const std::string&, const std::vector<double>& v, int, int) { theirs.push_back(&v); });
  for (size_t b = 0; b < mine.size(); ++b) {
    auto& p = *mine[b];
    const auto& g = *theirs[b];
    for (size_t i = 0; i < p.size(); ++i) p[i] = static_cast<float>(static_cast<double>(p[i]) - lr * g[i]);
  }
}

void apply_adam(ModelParams& params, AdamState& state, const ParamsT<float>& grads, double lr, double beta1,
                double beta2, double eps) {
  if (!state.initialized()) state.init(params.config);
  state.step += 1;
  double bc1 = 1.0 - std::pow(beta1, static_cast<double>(state.step));
  double bc2 = 1.0 - std::pow(beta2, static_cast<double>(state.step));

  std::vector<std::vector<float>*> pv, mv, vv;
  std::vector<const std::vector<float>*> gv;
  params.visit([&](const std::string&, std::vector<float>& v, int, int) { pv.push_back(&v); });
  state.m.visit([&](const std::string&, std::vector<float>& v, int, int) { mv.push_back(&v); });
  state.v.visit([&](const std::string&, std::vector<float>& v, int, int) { vv.push_back(&v); });
  grads.visit([&](const std::string&, const std::vector<float>& v, int, int) { gv.push_back(&v); });

  for (size_t b = 0; b < pv.size(); ++b) {
    auto& p = *pv[b];
    auto& m = *mv[b];
    auto& v = *vv[b];
    const auto& g = *gv[b];
    for (size_t i = 0; i < p.size(); ++i) {
      double gi = g[i];
      double mi = beta1 * static_cast<double>(m[i]) + (1.0 - beta1) * gi;
      double vi = beta2 * static_cast<double>(v[i]) + (1.0 - beta2) * gi * gi;
      m[i] = static_cast<float>(mi);
      v[i] = static_cast<float>(vi);
      double update = lr * (mi / bc1) / (std::sqrt(vi / bc2) + eps);
      p[i] = static_cast<float>(static_cast<double>(p[i]) - update);
    }
  }
}

namespace {

nlohmann::json config_to_json(const ModelConfig& c) {
  return {{"dim", c.dim},           {"layers", c.layers},
          {"heads", c.heads},       {"ffn_dim", c.ffn_dim},
          {"patch", c.patch},       {"image_w", c.image_w},
          {"image_h", c.image_h},   {"max_tokens", c.max_tokens},
          {"position_bins", c.position_bins}, {"text_vocab", c.text_vocab},
          {"seed", c.seed}};
}

ModelConfig config_from_json(const nlohmann::json& j) {
  ModelConfig c;
  c.dim = j.at("dim").get<int>();
  c.layers = j.at("layers").get<int>();
  c.heads = j.at("heads").get<int>();
  c.ffn_dim = j.at("ffn_dim").get<int>();
  c.patch = j.at("patch").get<int>();
  c.image_w = j.at("image_w").get<int>();
  c.image_h = j.at("image_h").get<int>();
  c.max_tokens = j.at("max_tokens").get<int>();
  c.position_bins = j.at("position_bins").get<int>();
  c.text_vocab = j.at("text_vocab").get<int>();
  c.seed = j.at("seed").get<std::uint64_t>();
  return c;
}

}  // namespace

void save_checkpoint(const std::string& path, const ModelParams& params, const CheckpointMeta& meta,
                     const Optimizer* optimizer) {
  std::ofstream out(path, std::ios::binary);
  if (!out) throw std::runtime_error("save_checkpoint: cannot write " + path);
  out.write("PLCK", 4);
  write_u32_le(out, 1);  // format version

  nlohmann::json header;
  header["model"] = config_to_json(params.config);
  header["epochs_done"] = meta.epochs_done;
  header["train_seed"] = meta.train_seed;
  header["config_digest"] = meta.config_digest;
  header["note"] = meta.note;
  std::string hs = header.dump();
  write_u32_le(out, static_cast<std::uint32_t>(hs.size()));
  out.write(hs.data(), static_cast<std::streamsize>(hs.size()));

  std::uint32_t n_blocks = 0;
  params.visit([&](const std::string&, const std::vector<float>&, int, int) { ++n_blocks; });
  write_u32_le(out, n_blocks);
  params.visit([&](const std::string& name, const std::vector<float>& v, int rows, int cols) {
    write_u32_le(out, static_cast<std::uint32_t>(name.size()));
    out.write(name.data(), static_cast<std::streamsize>(name.size()));
    write_u32_le(out, static_cast<std::uint32_t>(rows));
    write_u32_le(out, static_cast<std::uint32_t>(cols));
    for (float x : v) write_f32_le(out, x);
  });

  // Optional optimizer tail so a resumed run continues bit-exactly.
  if (optimizer != nullptr && optimizer->kind == "adam" && optimizer->adam.initialized()) {
    write_u32_le(out, 1);
    write_u64_le(out, static_cast<std::uint64_t>(optimizer->adam.step));
    auto dump = [&](const ParamsT<float>& q) {
      q.visit([&](const std::string&, const std::vector<float>& v, int, int) {
        for (float x : v) write_f32_le(out, x);
      });
    };
    dump(optimizer->adam.m);
    dump(optimizer->adam.v);
  } else {
    write_u32_le(out, 0);
  }
  if (!out) throw std::runtime_error("save_checkpoint: write failed for " + path);
}

Checkpoint load_checkpoint(const std::string& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw std::runtime_error("load_checkpoint: cannot read " + path);
  char magic[4];
  in.read(magic, 4);
  if (!in || std::string(magic, 4) != "PLCK") throw std::runtime_error("load_checkpoint: bad magic in " + path);
  if (read_u32_le(in) != 1) throw std::runtime_error("load_checkpoint: unsupported version");

  std::uint32_t hlen = read_u32_le(in);
  std::string hs(hlen, '\0');
  in.read(hs.data(), hlen);
  if (!in) throw std::runtime_error("load_checkpoint: truncated header");
  nlohmann::json header = nlohmann::json::parse(hs);

  Checkpoint ck;
  ck.params.config = config_from_json(header.at("model"));
  ck.params.allocate();
  ck.meta.epochs_done = header.at("epochs_done").get<int>();
  ck.meta.train_seed = header.at("train_seed").get<std::uint64_t>();
  ck.meta.config_digest = header.at("config_digest").get<std::string>();
  ck.meta.note = header.at("note").get<std::string>();

  std::uint32_t n_blocks = read_u32_le(in);
  std::uint32_t seen = 0;
  ck.params.visit([&](const std::string& name, std::vector<float>& v, int rows, int cols) {
    std::uint32_t nlen = read_u32_le(in);
    std::string bname(nlen, '\0');
    in.read(bname.data(), nlen);
    if (bname != name) throw std::runtime_error("load_checkpoint: block order mismatch at '" + bname + "'");
    std::uint32_t r = read_u32_le(in), c = read_u32_le(in);
    if (static_cast<int>(r) != rows || static_cast<int>(c) != cols)
      throw std::runtime_error("load_checkpoint: shape mismatch for '" + name + "'");
    for (auto& x : v) x = read_f32_le(in);
    ++seen;
  });
  if (seen != n_blocks) throw std::runtime_error("load_checkpoint: block count mismatch");

  std::uint32_t opt_kind = read_u32_le(in);
  if (opt_kind == 1) {
    ck.optimizer.kind = "adam";
    ck.optimizer.adam.init(ck.params.config);
    ck.optimizer.adam.step = static_cast<long long>(read_u64_le(in));
    auto slurp = [&](ParamsT<float>& q) {
      q.visit([&](const std::string&, std::vector<float>& v, int, int) {
        for (auto& x : v) x = read_f32_le(in);
      });
    };
    slurp(ck.optimizer.adam.m);
    slurp(ck.optimizer.adam.v);
    ck.has_optimizer = true;
  }
  return ck;
}

}  // namespace poslm
