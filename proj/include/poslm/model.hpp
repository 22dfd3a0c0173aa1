#pragma once

#include <cmath>
#include <cstdint>
#include <stdexcept>
#include <string>
#include <vector>

#include "poslm/gmlm.hpp"
#include "poslm/vocab.hpp"

namespace poslm {

// Joint bidirectional encoder over [CLS] + token stream + image patches,
// sized for CPU experiments. Pre-LN blocks, ReLU feed-forward, GMLM output
// head tied to the token embedding table, scalar ITM head on [CLS].
struct ModelConfig {
  int dim = 64;
  int layers = 2;
  int heads = 4;
  int ffn_dim = 256;
  int patch = 8;
  int image_w = 64;  // maximum image extent; smaller (cropped) inputs are fine
  int image_h = 64;
  int max_tokens = 96;  // [CLS] + stream
  int position_bins = 16;
  int text_vocab = 0;
  std::uint64_t seed = 1;

  int patch_dim() const { return patch * patch * 3; }
  int max_patches() const { return (image_w / patch) * (image_h / patch); }
  int vocab_total() const { return text_vocab + position_bins + VocabSpec::kNumSpecials; }
  VocabSpec vocab() const { return VocabSpec(text_vocab, position_bins); }

  void validate() const {
    if (dim <= 0 || layers <= 0 || heads <= 0 || ffn_dim <= 0) throw std::invalid_argument("ModelConfig: sizes must be positive");
    if (dim % heads != 0) throw std::invalid_argument("ModelConfig: dim must be divisible by heads");
    if (patch <= 0 || image_w % patch != 0 || image_h % patch != 0)
      throw std::invalid_argument("ModelConfig: patch must divide the image size");
    if (text_vocab <= 0) throw std::invalid_argument("ModelConfig: text_vocab not set");
    if (position_bins < 2) throw std::invalid_argument("ModelConfig: position_bins must be >= 2");
  }
};

template <typename T>
struct ParamsT {
  ModelConfig config;

  std::vector<T> tok_emb;     // [vocab_total][dim], tied with the GMLM head
  std::vector<T> tok_pos;     // [max_tokens][dim]
  std::vector<T> coord_slot;  // [4][dim], added inside delimiter groups
  std::vector<T> patch_w;     // [dim][patch_dim]
  std::vector<T> patch_b;     // [dim]
  std::vector<T> patch_pos;   // [max_patches][dim]

  struct Layer {
    std::vector<T> ln1_g, ln1_b;
    std::vector<T> wq, bq, wk, bk, wv, bv, wo, bo;  // [dim][dim] / [dim]
    std::vector<T> ln2_g, ln2_b;
    std::vector<T> w1, b1;  // [ffn][dim], [ffn]
    std::vector<T> w2, b2;  // [dim][ffn], [dim]
  };
  std::vector<Layer> layers;

  std::vector<T> lnf_g, lnf_b;
  std::vector<T> itm_w;  // [dim]
  std::vector<T> itm_b;  // [1]

  void allocate() {
    config.validate();
    int d = config.dim, f = config.ffn_dim;
    tok_emb.assign(static_cast<size_t>(config.vocab_total()) * d, T(0));
    tok_pos.assign(static_cast<size_t>(config.max_tokens) * d, T(0));
    coord_slot.assign(static_cast<size_t>(4) * d, T(0));
    patch_w.assign(static_cast<size_t>(d) * config.patch_dim(), T(0));
    patch_b.assign(static_cast<size_t>(d), T(0));
    patch_pos.assign(static_cast<size_t>(config.max_patches()) * d, T(0));
    layers.assign(static_cast<size_t>(config.layers), {});
    for (auto& l : layers) {
      l.ln1_g.assign(static_cast<size_t>(d), T(0));
      l.ln1_b.assign(static_cast<size_t>(d), T(0));
      l.wq.assign(static_cast<size_t>(d) * d, T(0));
      l.bq.assign(static_cast<size_t>(d), T(0));
      l.wk.assign(static_cast<size_t>(d) * d, T(0));
      l.bk.assign(static_cast<size_t>(d), T(0));
      l.wv.assign(static_cast<size_t>(d) * d, T(0));
      l.bv.assign(static_cast<size_t>(d), T(0));
      l.wo.assign(static_cast<size_t>(d) * d, T(0));
      l.bo.assign(static_cast<size_t>(d), T(0));
      l.ln2_g.assign(static_cast<size_t>(d), T(0));
      l.ln2_b.assign(static_cast<size_t>(d), T(0));
      l.w1.assign(static_cast<size_t>(f) * d, T(0));
      l.b1.assign(static_cast<size_t>(f), T(0));
      l.w2.assign(static_cast<size_t>(d) * f, T(0));
      l.b2.assign(static_cast<size_t>(d), T(0));
    }
    lnf_g.assign(static_cast<size_t>(d), T(0));
    lnf_b.assign(static_cast<size_t>(d), T(0));
    itm_w.assign(static_cast<size_t>(d), T(0));
    itm_b.assign(1, T(0));
  }

  // Enumerates (name, data, rows, cols) for every parameter block, in a fixed
  // order shared by checkpoints, gradient buffers and finite-difference loops.
  template <typename Self, typename F>
  static void visit_impl(Self& self, F&& f) {
    int d = self.config.dim, fd = self.config.ffn_dim;
    f("tok_emb", self.tok_emb, self.config.vocab_total(), d);
    f("tok_pos", self.tok_pos, self.config.max_tokens, d);
    f("coord_slot", self.coord_slot, 4, d);
    f("patch_w", self.patch_w, d, self.config.patch_dim());
    f("patch_b", self.patch_b, 1, d);
    f("patch_pos", self.patch_pos, self.config.max_patches(), d);
    for (size_t i = 0; i < self.layers.size(); ++i) {
      auto& l = self.layers[i];
      std::string p = "layer" + std::to_string(i) + ".";
      f(p + "ln1_g", l.ln1_g, 1, d);
      f(p + "ln1_b", l.ln1_b, 1, d);
      f(p + "wq", l.wq, d, d);
      f(p + "bq", l.bq, 1, d);
      f(p + "wk", l.wk, d, d);
      f(p + "bk", l.bk, 1, d);
      f(p + "wv", l.wv, d, d);
      f(p + "bv", l.bv, 1, d);
      f(p + "wo", l.wo, d, d);
      f(p + "bo", l.bo, 1, d);
      f(p + "ln2_g", l.ln2_g, 1, d);
      f(p + "ln2_b", l.ln2_b, 1, d);
      f(p + "w1", l.w1, fd, d);
      f(p + "b1", l.b1, 1, fd);
      f(p + "w2", l.w2, d, fd);
      f(p + "b2", l.b2, 1, d);
    }
    f("lnf_g", self.lnf_g, 1, d);
    f("lnf_b", self.lnf_b, 1, d);
    f("itm_w", self.itm_w, 1, d);
    f("itm_b", self.itm_b, 1, 1);
  }
  template <typename F>
  void visit(F&& f) {
    visit_impl(*this, std::forward<F>(f));
  }
  template <typename F>
  void visit(F&& f) const {
    visit_impl(*this, std::forward<F>(f));
  }

  std::size_t param_count() const {
    std::size_t n = 0;
    visit([&](const std::string&, const std::vector<T>& v, int, int) { n += v.size(); });
    return n;
  }

  void add_scaled(const ParamsT<T>& other, T scale) {
    auto add = [&](std::vector<T>& dst, const std::vector<T>& src) {
      for (size_t i = 0; i < dst.size(); ++i) dst[i] += scale * src[i];
    };
    std::vector<std::vector<T>*> mine;
    std::vector<const std::vector<T>*> theirs;
    visit([&](const std::string&, std::vector<T>& v, int, int) { mine.push_back(&v); });
    other.visit([&](const std::string&, const std::vector<T>& v, int, int) { theirs.push_back(&v); });
    for (size_t i = 0; i < mine.size(); ++i) add(*mine[i], *theirs[i]);
  }

  void zero() {
    visit([](const std::string&, std::vector<T>& v, int, int) { std::fill(v.begin(), v.end(), T(0)); });
  }
};

using ModelParams = ParamsT<float>;

// Gaussian init, std 0.02 for matrices and embeddings; LayerNorm gains at 1.
ModelParams init_params(const ModelConfig& config);

void apply_sgd(ModelParams& params, const ParamsT<float>& grads, double lr);
void apply_sgd(ModelParams& params, const ParamsT<double>& grads, double lr);

// Adam with bias correction; moment buffers mirror the parameter blocks.
// Plain SGD cannot organize the cross-modal attention circuit at this scale
// within any reasonable step budget, so Adam is the default optimizer.
struct AdamState {
  ParamsT<float> m, v;
  long long step = 0;

  void init(const ModelConfig& config) {
    m.config = config;
    m.allocate();
    v.config = config;
    v.allocate();
    step = 0;
  }
  bool initialized() const { return !m.tok_emb.empty(); }
};

void apply_adam(ModelParams& params, AdamState& state, const ParamsT<float>& grads, double lr,
                double beta1 = 0.9, double beta2 = 0.999, double eps = 1e-8);

// Optimizer front end selected by TrainConfig/TuneConfig.
struct Optimizer {
  std::string kind = "adam";  // "adam" or "sgd"
  double lr = 1e-3;
  AdamState adam;

  void init(const ModelConfig& config) {
    if (kind == "adam") adam.init(config);
  }
  void apply(ModelParams& params, const ParamsT<float>& grads) {
    if (kind == "adam") {
      if (!adam.initialized()) adam.init(params.config);
      apply_adam(params, adam, grads, lr);
    } else {
      apply_sgd(params, grads, lr);
    }
  }
};

// Checkpoint: "PLCK" magic, version, JSON header (config + metadata), then
// named blocks of little-endian float32.
struct CheckpointMeta {
  int epochs_done = 0;
  std::uint64_t train_seed = 0;
  std::string config_digest;
  std::string note;
};
void save_checkpoint(const std::string& path, const ModelParams& params, const CheckpointMeta& meta,
                     const Optimizer* optimizer = nullptr);
struct Checkpoint {
  ModelParams params;
  CheckpointMeta meta;
  Optimizer optimizer;       // carries Adam moments when the file has them
  bool has_optimizer = false;
};
Checkpoint load_checkpoint(const std::string& path);

// ---------------------------------------------------------------------------
// Per-sample forward/backward. Activations are templated so the identical
// code path runs in double for finite-difference verification and in float
// for training throughput. Parameters are always float32.
// ---------------------------------------------------------------------------

struct SampleInput {
  TokenStream tokens;           // [CLS] first
  std::vector<int> coord_slots; // per token: -1, or 0..3 inside delimiter groups
  const float* image = nullptr; // HWC row-major, unit range; may be null for text-only
  int image_w = 0, image_h = 0;
};

// Fills coord_slots with the intra-group coordinate index of each token.
std::vector<int> coord_slots_for(const TokenStream& tokens, const VocabSpec& vocab);

struct SlotTarget {
  int token_index = 0;  // index into SampleInput::tokens
  bool is_position = false;
  SoftLabelTarget soft;   // position slots
  TokenId gold_text = 0;  // text slots
};

struct TrainingExample {
  SampleInput input;
  std::vector<SlotTarget> targets;
  bool has_itm = false;
  double itm_label = 0;
};

// Premultiplied per-slot loss weights (lambda / batch position-slot count, ...).
struct LossWeights {
  double position = 0;
  double text = 0;
  double itm = 0;
};

struct LossStats {
  double position_loss_sum = 0;
  std::size_t position_slots = 0;
  std::size_t position_top1 = 0;
  double text_loss_sum = 0;
  std::size_t text_slots = 0;
  double itm_loss_sum = 0;
  std::size_t itm_count = 0;
  std::size_t itm_correct = 0;

  void merge(const LossStats& o) {
    position_loss_sum += o.position_loss_sum;
    position_slots += o.position_slots;
    position_top1 += o.position_top1;
    text_loss_sum += o.text_loss_sum;
    text_slots += o.text_slots;
    itm_loss_sum += o.itm_loss_sum;
    itm_count += o.itm_count;
    itm_correct += o.itm_correct;
  }
};

template <typename T>
struct LayerTrace {
  std::vector<T> x_in, ln1_mean, ln1_rstd, a;
  std::vector<T> q, k, v, att, ctx;
  std::vector<T> x_mid, ln2_mean, ln2_rstd, b, h1;
};

template <typename T>
struct Trace {
  int seq = 0, n_tokens = 0, n_patches = 0;
  std::vector<T> patch_vec;  // [n_patches][patch_dim]
  std::vector<T> x0;
  std::vector<LayerTrace<T>> layers;
  std::vector<T> x_final;  // input to the final LayerNorm
  std::vector<T> lnf_mean, lnf_rstd;
  std::vector<T> y;  // final hidden states [seq][dim]
};

template <typename T>
void forward_encoder(const ModelParams& params, const SampleInput& input, Trace<T>& trace);

// Logits of the GMLM head at a token slot, over the position rows or the full
// vocabulary of the tied embedding table.
template <typename T>
std::vector<double> position_logits(const ModelParams& params, const Trace<T>& trace, int token_index);
template <typename T>
std::vector<double> vocab_logits(const ModelParams& params, const Trace<T>& trace, int token_index);
template <typename T>
double itm_logit_of(const ModelParams& params, const Trace<T>& trace);

// Convenience: forward + ITM head in one call.
double itm_score(const ModelParams& params, const SampleInput& input);

// Forward, head losses, and full backward; gradients are accumulated into
// `grads` (already allocated, not zeroed here). Returns unweighted sums in
// `stats`; `weights` scales what flows into the gradients.
template <typename T>
void example_loss_and_grad(const ModelParams& params, const TrainingExample& example, const LossWeights& weights,
                           ParamsT<T>& grads, LossStats& stats);

// Loss of one example under the batch weights, via the same code path as the
// gradient; used by the finite-difference oracle.
template <typename T>
double example_weighted_loss(const ModelParams& params, const TrainingExample& example, const LossWeights& weights);

}  // namespace poslm

#include "poslm/model_impl.hpp"
