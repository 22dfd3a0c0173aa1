#include <doctest.h>

#include <cmath>
#include <set>

#include "poslm/pipeline.hpp"

using namespace poslm;

namespace {

// Tiny end-to-end fixture: 32x32 scenes, 1-layer dim-16 model.
ExperimentConfig tiny_config() {
  ExperimentConfig c = config_from_ini(
      "[experiment]\nseed = 11\n"
      "[scene]\nwidth = 32\nheight = 32\nmin_size = 10\nmax_size = 14\ncount = 60\nholdout = 12\n"
      "[model]\ndim = 16\nlayers = 1\nheads = 2\nffn_dim = 32\nmax_tokens = 48\n"
      "[train]\nepochs = 1\nbatch = 16\nlr = 0.05\n"
      "[tune]\nepochs = 1\nbatch = 16\n");
  return c;
}

Corpus tiny_corpus(const ExperimentConfig& cfg) {
  Dataset ds;
  ds.config = cfg.scene;
  ds.config_digest = config_digest(cfg);
  for (int i = 0; i < cfg.scene_count; ++i) ds.scenes.push_back(generate(cfg.scene, static_cast<std::uint64_t>(i)));
  return Corpus::from_dataset(std::move(ds), cfg.model.position_bins);
}

}  // namespace

TEST_CASE("split helpers") {
  auto tr = train_indices(10, 3);
  auto ev = eval_indices(10, 3);
  CHECK(tr.size() == 7);
  CHECK(ev == std::vector<std::size_t>{7, 8, 9});
  CHECK_THROWS_AS(train_indices(5, 5), std::invalid_argument);
}

TEST_CASE("geometric relations") {
  auto box = [](double cx, double cy) {
    return BBox{cx - 5, cy - 5, cx + 5, cy + 5, 64, 64};
  };
  CHECK(geometric_relation(box(10, 30), box(30, 30)) == 0);  // left of
  CHECK(geometric_relation(box(30, 30), box(10, 30)) == 1);  // right of
  CHECK(geometric_relation(box(30, 10), box(30, 28)) == 2);  // above
  CHECK(geometric_relation(box(30, 28), box(30, 10)) == 3);  // below
  CHECK(geometric_relation(box(10, 10), box(50, 50)) == 4);  // far: no relation
  CHECK(vrd_relations()[4] == "no relation with");
}

TEST_CASE("pretrain example construction") {
  ExperimentConfig cfg = tiny_config();
  Corpus corpus = tiny_corpus(cfg);
  const SceneSample& scene = corpus.data.scenes[0];

  SUBCASE("deterministic in the seed") {
    BuiltExample a = build_pretrain_example(corpus, scene, cfg.train, cfg.masking, 999, nullptr);
    BuiltExample b = build_pretrain_example(corpus, scene, cfg.train, cfg.masking, 999, nullptr);
    CHECK(a.example.input.tokens == b.example.input.tokens);
    REQUIRE(a.example.targets.size() == b.example.targets.size());
    for (size_t i = 0; i < a.example.targets.size(); ++i) {
      CHECK(a.example.targets[i].token_index == b.example.targets[i].token_index);
      CHECK(a.example.targets[i].is_position == b.example.targets[i].is_position);
    }
  }

  SUBCASE("targets sit on corrupted-or-kept slots with true ground truths") {
    for (std::uint64_t seed = 0; seed < 30; ++seed) {
      BuiltExample built = build_pretrain_example(corpus, scene, cfg.train, cfg.masking, seed, nullptr);
      const TokenStream& tokens = built.example.input.tokens;
      CHECK(tokens[0] == corpus.vocab.cls_id());
      validate_stream(TokenStream(tokens.begin() + 1, tokens.end()), corpus.vocab);
      CHECK(built.example.has_itm);
      CHECK(built.example.itm_label == 1.0);
      for (const auto& t : built.example.targets) {
        REQUIRE(t.token_index >= 1);
        REQUIRE(t.token_index < static_cast<int>(tokens.size()));
        if (t.is_position) {
          CHECK(t.soft.probs.size() == static_cast<size_t>(corpus.vocab.position_bins));
          TokenId tok = tokens[static_cast<size_t>(t.token_index)];
          bool masked = tok == corpus.vocab.mask_id();
          CHECK(masked);  // structured positions are pure MASK
        } else {
          CHECK(corpus.vocab.is_text(t.gold_text));
        }
      }
    }
  }

  SUBCASE("mismatched pairs carry no reconstruction targets") {
    BuiltExample neg =
        build_pretrain_example(corpus, scene, cfg.train, cfg.masking, 5, &corpus.data.scenes[1]);
    CHECK(neg.example.targets.empty());
    CHECK(neg.example.has_itm);
    CHECK(neg.example.itm_label == 0.0);
    // image from `scene`, caption from the donor
    CHECK(neg.example.input.image_w == scene.width);
  }

  SUBCASE("hflip augmentation owns its pixels") {
    TrainConfig always_flip = cfg.train;
    always_flip.hflip_prob = 1.0;
    BuiltExample built = build_pretrain_example(corpus, scene, always_flip, cfg.masking, 3, nullptr);
    CHECK(!built.image.empty());
    CHECK(built.example.input.image == built.image.data());
  }
}

TEST_CASE("task instance builders") {
  ExperimentConfig cfg = tiny_config();
  Corpus corpus = tiny_corpus(cfg);

  SUBCASE("rec: prompt is valid, salt-deterministic, gold is an object box") {
    for (std::size_t idx = 0; idx < 20; ++idx) {
      const SceneSample& scene = corpus.data.scenes[idx];
      RecInstance a = build_rec_instance(corpus, scene, 0);
      RecInstance b = build_rec_instance(corpus, scene, 0);
      CHECK(a.prompt.stream == b.prompt.stream);
      validate_stream(a.prompt.stream, corpus.vocab);
      REQUIRE(a.prompt.box_groups.size() == 1);
      bool matches_an_object = false;
      for (const auto& o : scene.objects)
        if (o.box.x_min == a.gold.x_min && o.box.y_max == a.gold.y_max) matches_an_object = true;
      CHECK(matches_an_object);
    }
  }

  SUBCASE("ground: one group per phrase") {
    const SceneSample& scene = corpus.data.scenes[2];
    GroundInstance g = build_ground_instance(corpus, scene);
    CHECK(g.prompt.box_groups.size() == scene.objects.size());
    CHECK(g.golds.size() == scene.objects.size());
    validate_stream(g.prompt.stream, corpus.vocab);
  }

  SUBCASE("vrd: all ordered pairs, directed") {
    const RelationCatalog cat = build_relation_catalog(vrd_relations(), corpus.words, 3);
    for (std::size_t idx = 0; idx < 20; ++idx) {
      const SceneSample& scene = corpus.data.scenes[idx];
      auto instances = build_vrd_instances(corpus, scene, cat);
      std::size_t n = scene.objects.size();
      CHECK(instances.size() == n * (n - 1));
      for (const auto& inst : instances) {
        CHECK(inst.prompt.text_slots.size() == 3);
        validate_stream(inst.prompt.stream, corpus.vocab);
        CHECK(inst.gold_relation >= 0);
        CHECK(inst.gold_relation < cat.size());
      }
    }
  }

  SUBCASE("vcr: unique gold answer") {
    int built = 0;
    for (std::size_t idx = 0; idx < corpus.size() && built < 10; ++idx) {
      auto inst = build_vcr_instance(corpus, corpus.data.scenes[idx], 0);
      if (!inst) continue;
      ++built;
      CHECK(inst->answers.size() == 4);
      CHECK(inst->rationales.size() == 4);
      CHECK(inst->gold_answer >= 0);
      CHECK(inst->gold_answer < 4);
      // candidates are distinct token sequences
      std::set<std::vector<TokenId>> seen;
      for (const auto& cand : inst->answers) CHECK(seen.insert(cand[0].tokens).second);
    }
    CHECK(built == 10);
  }

  SUBCASE("vqa: gold color matches the queried object") {
    int built = 0;
    for (std::size_t idx = 0; idx < corpus.size() && built < 10; ++idx) {
      const SceneSample& scene = corpus.data.scenes[idx];
      auto inst = build_vqa_instance(corpus, scene, 0);
      if (!inst) continue;
      ++built;
      CHECK(inst->candidates.size() == corpus.data.config.colors.size());
      validate_stream(inst->prompt.stream, corpus.vocab);
      CHECK(inst->gold >= 0);
      CHECK(inst->gold < static_cast<int>(inst->candidates.size()));
    }
    CHECK(built == 10);
  }
}

TEST_CASE("pretrain runs, is deterministic, and resumes exactly") {
  ExperimentConfig cfg = tiny_config();
  Corpus corpus = tiny_corpus(cfg);

  ModelParams a = init_params(cfg.model);
  ModelParams b = init_params(cfg.model);
  Optimizer opt_a;
  opt_a.kind = cfg.train.optimizer;
  opt_a.lr = cfg.train.lr;
  auto log_a = pretrain(a, corpus, cfg, 0, 2, nullptr, &opt_a);
  REQUIRE(log_a.size() == 2);
  for (const auto& l : log_a) {
    CHECK(std::isfinite(l.position_loss));
    CHECK(std::isfinite(l.text_loss));
    CHECK(l.combined == doctest::Approx(cfg.train.lambda * l.position_loss + l.text_loss));
    CHECK(l.itm_accuracy >= 0);
    CHECK(l.itm_accuracy <= 1);
  }

  // epoch-seeded batches + persisted optimizer: 1 + 1 resumed == 2 straight
  Optimizer opt_b;
  opt_b.kind = cfg.train.optimizer;
  opt_b.lr = cfg.train.lr;
  pretrain(b, corpus, cfg, 0, 1, nullptr, &opt_b);
  pretrain(b, corpus, cfg, 1, 1, nullptr, &opt_b);
  std::vector<const std::vector<float>*> va, vb;
  a.visit([&](const std::string&, const std::vector<float>& v, int, int) { va.push_back(&v); });
  b.visit([&](const std::string&, const std::vector<float>& v, int, int) { vb.push_back(&v); });
  for (size_t i = 0; i < va.size(); ++i) CHECK(*va[i] == *vb[i]);

  SUBCASE("two identical runs are bitwise identical") {
    ModelParams c = init_params(cfg.model);
    ModelParams d = init_params(cfg.model);
    pretrain(c, corpus, cfg, 0, 1, nullptr);
    pretrain(d, corpus, cfg, 0, 1, nullptr);
    std::vector<const std::vector<float>*> vc, vd;
    c.visit([&](const std::string&, const std::vector<float>& v, int, int) { vc.push_back(&v); });
    d.visit([&](const std::string&, const std::vector<float>& v, int, int) { vd.push_back(&v); });
    for (size_t i = 0; i < vc.size(); ++i) CHECK(*vc[i] == *vd[i]);
  }
}

TEST_CASE("prompt tuning keeps the parameter count for every task") {
  ExperimentConfig cfg = tiny_config();
  Corpus corpus = tiny_corpus(cfg);
  ModelParams pretrained = init_params(cfg.model);
  pretrain(pretrained, corpus, cfg, 0, 1, nullptr);
  std::size_t count = pretrained.param_count();

  for (TaskTag task : {TaskTag::Rec, TaskTag::Ground, TaskTag::Vrd, TaskTag::VcrQA, TaskTag::Vqa}) {
    ModelParams tuned = pretrained;
    auto logs = prompt_tune(tuned, corpus, cfg, task, nullptr);
    CHECK(logs.size() == static_cast<size_t>(cfg.tune.epochs));
    CHECK(tuned.param_count() == count);
    // tuning moved the parameters
    bool changed = false;
    std::vector<const std::vector<float>*> vp, vt;
    pretrained.visit([&](const std::string&, const std::vector<float>& v, int, int) { vp.push_back(&v); });
    tuned.visit([&](const std::string&, const std::vector<float>& v, int, int) { vt.push_back(&v); });
    for (size_t i = 0; i < vp.size(); ++i)
      if (*vp[i] != *vt[i]) changed = true;
    CHECK(changed);
  }
}

TEST_CASE("eval dumps and reports") {
  ExperimentConfig cfg = tiny_config();
  Corpus corpus = tiny_corpus(cfg);
  ModelParams params = init_params(cfg.model);
  auto held = eval_indices(corpus.size(), static_cast<std::size_t>(cfg.holdout));

  for (TaskTag task : {TaskTag::Rec, TaskTag::Ground, TaskTag::Vrd, TaskTag::VcrQA, TaskTag::Vqa}) {
    auto lines = eval_dump(params, corpus, cfg, task, held);
    REQUIRE(!lines.empty());
    EvalReport report = report_from_dump(task, lines, "cafecafecafecafe");
    CHECK(report.config_digest == "cafecafecafecafe");
    for (const auto& [name, value] : report.metrics) {
      CHECK(value >= 0.0);
      CHECK(value <= 1.0);
    }
  }

  // rec_accuracy agrees with the report path
  auto lines = eval_dump(params, corpus, cfg, TaskTag::Rec, held);
  double via_report = report_from_dump(TaskTag::Rec, lines, "").get("acc@0.5");
  CHECK(rec_accuracy(params, corpus, cfg, held) == doctest::Approx(via_report));
}

TEST_CASE("train_step with worker threads matches the loss accounting") {
  ExperimentConfig cfg = tiny_config();
  Corpus corpus = tiny_corpus(cfg);
  std::vector<BuiltExample> batch;
  for (std::size_t i = 0; i < 8; ++i)
    batch.push_back(build_pretrain_example(corpus, corpus.data.scenes[i], cfg.train, cfg.masking, i, nullptr));

  ModelParams p1 = init_params(cfg.model);
  ModelParams p2 = init_params(cfg.model);
  std::vector<BuiltExample> batch_copy;
  for (std::size_t i = 0; i < 8; ++i)
    batch_copy.push_back(build_pretrain_example(corpus, corpus.data.scenes[i], cfg.train, cfg.masking, i, nullptr));

  Optimizer o1, o2;
  LossStats s1 = train_step(p1, o1, batch, 2.0, 1);
  LossStats s2 = train_step(p2, o2, batch_copy, 2.0, 2);
  CHECK(s1.position_slots == s2.position_slots);
  CHECK(s1.text_slots == s2.text_slots);
  CHECK(s1.position_loss_sum == doctest::Approx(s2.position_loss_sum).epsilon(1e-9));
  CHECK(s1.itm_loss_sum == doctest::Approx(s2.itm_loss_sum).epsilon(1e-9));
}
