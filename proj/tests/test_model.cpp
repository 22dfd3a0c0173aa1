#include <doctest.h>

#include <cmath>
#include <filesystem>

#include "poslm/model.hpp"
#include "poslm/rng.hpp"

using namespace poslm;

namespace {

ModelConfig micro_config(std::uint64_t seed) {
  ModelConfig c;
  c.dim = 8;
  c.layers = 1;
  c.heads = 2;
  c.ffn_dim = 16;
  c.patch = 8;
  c.image_w = 16;
  c.image_h = 16;
  c.max_tokens = 24;
  c.position_bins = 8;
  c.text_vocab = 12;
  c.seed = seed;
  return c;
}

// A sample exercising every head: masked position slots, a masked text slot,
// and an ITM label, over text + one delimiter group + 4 image patches.
struct MicroCase {
  TrainingExample example;
  std::vector<float> image;

  MicroCase(const ModelConfig& c, std::uint64_t seed, bool one_hot = false) {
    Rng rng(seed);
    VocabSpec vocab = c.vocab();
    image.resize(static_cast<size_t>(c.image_w) * c.image_h * 3);
    for (auto& v : image) v = static_cast<float>(rng.next_double());

    TokenStream t;
    t.push_back(vocab.cls_id());
    t.push_back(2);
    t.push_back(vocab.mask_id());  // masked text slot (gold id 5)
    t.push_back(7);
    t.push_back(vocab.open_id());
    t.push_back(vocab.mask_id());  // masked position slot (gold bin 1)
    t.push_back(vocab.position_id(3));
    t.push_back(vocab.mask_id());  // masked position slot (gold bin 6)
    t.push_back(vocab.position_id(7));
    t.push_back(vocab.close_id());
    t.push_back(4);

    example.input.tokens = t;
    example.input.coord_slots = coord_slots_for(t, vocab);
    example.input.image = image.data();
    example.input.image_w = c.image_w;
    example.input.image_h = c.image_h;

    SlotTarget text_slot;
    text_slot.token_index = 2;
    text_slot.is_position = false;
    text_slot.gold_text = 5;
    example.targets.push_back(text_slot);

    SlotTarget p1;
    p1.token_index = 5;
    p1.is_position = true;
    p1.soft = one_hot ? one_hot_target(1, c.position_bins) : soft_labels(1, c.position_bins, 0.25);
    example.targets.push_back(p1);

    SlotTarget p2;
    p2.token_index = 7;
    p2.is_position = true;
    p2.soft = one_hot ? one_hot_target(6, c.position_bins) : soft_labels(6, c.position_bins, 1.0);
    example.targets.push_back(p2);

    example.has_itm = true;
    example.itm_label = 1.0;
  }
};

}  // namespace

TEST_CASE("full-model analytic gradient matches central finite differences") {
  const LossWeights weights{2.0 / 2.0, 1.0, 1.0};  // lambda 2 over 2 position slots, 1 text, 1 itm
  for (std::uint64_t seed : {1ULL, 2ULL, 3ULL, 4ULL, 5ULL}) {
    ModelConfig config = micro_config(seed);
    ModelParams params = init_params(config);
    MicroCase mc(config, 100 + seed);

    ParamsT<double> grads;
    grads.config = config;
    grads.allocate();
    LossStats stats;
    example_loss_and_grad<double>(params, mc.example, weights, grads, stats);

    std::vector<std::vector<double>*> grad_blocks;
    grads.visit([&](const std::string&, std::vector<double>& v, int, int) { grad_blocks.push_back(&v); });

    std::size_t block_idx = 0;
    std::size_t checked = 0, skipped = 0;
    double worst = 0;
    params.visit([&](const std::string& name, std::vector<float>& v, int, int) {
      std::vector<double>& g = *grad_blocks[block_idx++];
      for (size_t i = 0; i < v.size(); ++i) {
        float orig = v[i];
        // Snap the perturbed values to float and measure the true step so the
        // finite difference is exact in the perturbation.
        float xp = static_cast<float>(static_cast<double>(orig) + 1e-4);
        float xm = static_cast<float>(static_cast<double>(orig) - 1e-4);
        v[i] = xp;
        double fp = example_weighted_loss<double>(params, mc.example, weights);
        v[i] = xm;
        double fm = example_weighted_loss<double>(params, mc.example, weights);
        v[i] = orig;
        double fd = (fp - fm) / (static_cast<double>(xp) - static_cast<double>(xm));
        double a = g[i];
        if (std::abs(a) < 1e-12 && std::abs(fd) < 1e-9) {
          ++skipped;  // parameter unused by this sample
          continue;
        }
        double rel = std::abs(a - fd) / std::max({1e-6, std::abs(a), std::abs(fd)});
        worst = std::max(worst, rel);
        if (rel > 1e-3) {
          CAPTURE(name);
          CAPTURE(i);
          CAPTURE(a);
          CAPTURE(fd);
          CHECK(rel <= 1e-3);
        }
        ++checked;
      }
    });
    CHECK(checked > 1000);  // the sweep actually covered the model
    CHECK(worst <= 1e-3);
  }
}

TEST_CASE("float and double paths agree on the loss") {
  ModelConfig config = micro_config(77);
  ModelParams params = init_params(config);
  MicroCase mc(config, 9);
  LossWeights w{1.0, 1.0, 1.0};
  double lf = example_weighted_loss<float>(params, mc.example, w);
  double ld = example_weighted_loss<double>(params, mc.example, w);
  CHECK(lf == doctest::Approx(ld).epsilon(1e-4));
}

TEST_CASE("forward determinism and sequence checks") {
  ModelConfig config = micro_config(3);
  ModelParams params = init_params(config);
  MicroCase mc(config, 4);

  Trace<float> a, b;
  forward_encoder(params, mc.example.input, a);
  forward_encoder(params, mc.example.input, b);
  CHECK(a.y == b.y);

  SUBCASE("CLS required first") {
    SampleInput bad = mc.example.input;
    bad.tokens[0] = 2;
    CHECK_THROWS_AS(forward_encoder(params, bad, a), std::invalid_argument);
  }

  SUBCASE("max_tokens enforced") {
    SampleInput big = mc.example.input;
    while (big.tokens.size() <= static_cast<size_t>(config.max_tokens)) big.tokens.push_back(1);
    big.coord_slots.assign(big.tokens.size(), -1);
    CHECK_THROWS_AS(forward_encoder(params, big, a), std::invalid_argument);
  }

  SUBCASE("text-only input (no image) runs") {
    SampleInput text_only = mc.example.input;
    text_only.image = nullptr;
    text_only.image_w = 0;
    text_only.image_h = 0;
    Trace<float> t;
    forward_encoder(params, text_only, t);
    CHECK(t.n_patches == 0);
    CHECK(t.seq == static_cast<int>(text_only.tokens.size()));
  }

  SUBCASE("zeroed image still runs and attention reaches distant patches") {
    std::vector<float> zeros(mc.image.size(), 0.0f);
    SampleInput z = mc.example.input;
    z.image = zeros.data();
    Trace<float> t0;
    forward_encoder(params, z, t0);

    // poke the last patch; CLS output must move (full bidirectional attention)
    std::vector<float> poked = zeros;
    poked[poked.size() - 1] = 1.0f;
    z.image = poked.data();
    Trace<float> t1;
    forward_encoder(params, z, t1);
    double diff = 0;
    for (int j = 0; j < config.dim; ++j)
      diff += std::abs(static_cast<double>(t1.y[static_cast<size_t>(j)]) -
                       static_cast<double>(t0.y[static_cast<size_t>(j)]));
    CHECK(diff > 1e-7);
  }
}

TEST_CASE("weight tying: GMLM scores are embedding inner products") {
  ModelConfig config = micro_config(5);
  ModelParams params = init_params(config);
  MicroCase mc(config, 6);
  Trace<float> trace;
  forward_encoder(params, mc.example.input, trace);

  auto logits = position_logits(params, trace, 5);
  for (int bin = 0; bin < config.position_bins; ++bin) {
    double manual = 0;
    const float* row = params.tok_emb.data() + static_cast<size_t>(config.text_vocab + bin) * config.dim;
    for (int j = 0; j < config.dim; ++j)
      manual += static_cast<double>(row[j]) * static_cast<double>(trace.y[5 * config.dim + j]);
    CHECK(logits[static_cast<size_t>(bin)] == doctest::Approx(manual).epsilon(1e-12));
  }
}

TEST_CASE("itm head") {
  ModelConfig config = micro_config(8);
  ModelParams params = init_params(config);
  MicroCase mc(config, 10);
  double a = itm_score(params, mc.example.input);
  double b = itm_score(params, mc.example.input);
  CHECK(std::isfinite(a));
  CHECK(a == b);
}

TEST_CASE("memorization: loss collapses on a fixed tiny batch") {
  ModelConfig config = micro_config(21);
  ModelParams params = init_params(config);
  // one-hot targets: soft-label cross entropy is floored at the target
  // entropy and cannot collapse, one-hot can.
  std::vector<MicroCase> cases;
  for (std::uint64_t s = 0; s < 4; ++s) cases.emplace_back(config, 40 + s, true);

  LossWeights w{2.0 / 8.0, 1.0 / 4.0, 1.0 / 4.0};
  auto batch_loss = [&]() {
    double total = 0;
    for (const auto& mc : cases) total += example_weighted_loss<float>(params, mc.example, w);
    return total;
  };

  double initial = batch_loss();
  for (int step = 0; step < 200; ++step) {
    ParamsT<float> grads;
    grads.config = config;
    grads.allocate();
    LossStats stats;
    for (const auto& mc : cases) example_loss_and_grad<float>(params, mc.example, w, grads, stats);
    apply_sgd(params, grads, 0.1);
  }
  double final = batch_loss();
  CHECK(final < 0.1 * initial);
}

TEST_CASE("checkpoint round trip is bit exact") {
  namespace fs = std::filesystem;
  ModelConfig config = micro_config(31);
  ModelParams params = init_params(config);
  CheckpointMeta meta;
  meta.epochs_done = 3;
  meta.train_seed = 123;
  meta.config_digest = "aaaabbbbccccdddd";
  meta.note = "test";

  fs::path path = fs::temp_directory_path() / "poslm_test_ckpt.bin";
  save_checkpoint(path.string(), params, meta);
  Checkpoint ck = load_checkpoint(path.string());

  CHECK(ck.meta.epochs_done == 3);
  CHECK(ck.meta.train_seed == 123);
  CHECK(ck.meta.config_digest == meta.config_digest);
  CHECK(ck.params.param_count() == params.param_count());

  std::vector<const std::vector<float>*> orig, loaded;
  params.visit([&](const std::string&, const std::vector<float>& v, int, int) { orig.push_back(&v); });
  ck.params.visit([&](const std::string&, const std::vector<float>& v, int, int) { loaded.push_back(&v); });
  REQUIRE(orig.size() == loaded.size());
  for (size_t b = 0; b < orig.size(); ++b) CHECK(*orig[b] == *loaded[b]);

  fs::remove(path);
}

TEST_CASE("coord_slots_for annotates delimiter interiors") {
  VocabSpec vocab(12, 8);
  TokenStream t{vocab.cls_id(), 1, vocab.open_id(), vocab.position_id(0), vocab.mask_id(),
                vocab.position_id(2), vocab.position_id(3), vocab.close_id(), 2};
  auto cs = coord_slots_for(t, vocab);
  CHECK(cs == std::vector<int>{-1, -1, -1, 0, 1, 2, 3, -1, -1});
}
