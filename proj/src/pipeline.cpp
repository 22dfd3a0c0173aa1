#include "poslm/pipeline.hpp"

#include <algorithm>
#include <cmath>
#include <memory>
#include <numeric>
#include <set>
#include <sstream>
#include <thread>

#include <json.hpp>

namespace poslm {

Corpus Corpus::from_dataset(Dataset ds, int position_bins) {
  Corpus c;
  c.words = corpus_words(ds.config);
  c.vocab = VocabSpec(c.words.size(), position_bins);
  c.data = std::move(ds);
  return c;
}

std::vector<std::size_t> train_indices(std::size_t count, std::size_t holdout) {
  if (holdout >= count) throw std::invalid_argument("train_indices: holdout >= count");
  std::vector<std::size_t> out(count - holdout);
  std::iota(out.begin(), out.end(), 0);
  return out;
}

std::vector<std::size_t> eval_indices(std::size_t count, std::size_t holdout) {
  if (holdout >= count) throw std::invalid_argument("eval_indices: holdout >= count");
  std::vector<std::size_t> out(holdout);
  std::iota(out.begin(), out.end(), count - holdout);
  return out;
}

const std::vector<std::string>& vrd_relations() {
  static const std::vector<std::string> kRelations = {"left of", "right of", "above", "below",
                                                      "no relation with"};
  return kRelations;
}

int geometric_relation(const BBox& subject, const BBox& object) {
  double dx = subject.x_center() - object.x_center();
  double dy = subject.y_center() - object.y_center();
  if (std::sqrt(dx * dx + dy * dy) >= kNeighborDist) return 4;  // no relation with
  if (std::abs(dx) >= std::abs(dy)) return dx < 0 ? 0 : 1;      // left of / right of
  return dy < 0 ? 2 : 3;                                        // above / below
}

namespace {

void shuffle_indices(std::vector<std::size_t>& v, Rng& rng) {
  for (std::size_t i = v.size(); i > 1; --i)
    std::swap(v[i - 1], v[rng.next_below(static_cast<std::uint32_t>(i))]);
}

std::vector<GroundedObject> grounded_objects(const SceneSample& scene) {
  std::vector<GroundedObject> out;
  out.reserve(scene.objects.size());
  for (const auto& o : scene.objects) out.push_back({o.phrase_end, o.box});
  return out;
}

// [CLS] + stream, with coord-slot annotations, ready for the encoder.
SampleInput make_input(const TokenStream& stream, const VocabSpec& vocab, const SceneSample* scene) {
  SampleInput in;
  in.tokens.reserve(stream.size() + 1);
  in.tokens.push_back(vocab.cls_id());
  in.tokens.insert(in.tokens.end(), stream.begin(), stream.end());
  in.coord_slots = coord_slots_for(in.tokens, vocab);
  if (scene != nullptr) {
    in.image = scene->image.data();
    in.image_w = scene->width;
    in.image_h = scene->height;
  }
  return in;
}

SoftLabelTarget position_target(int bin, int m, const TrainConfig& train) {
  return train.ordering_aware ? soft_labels(bin, m, train.alpha) : one_hot_target(bin, m);
}

std::vector<TokenId> phrase_tokens(const Corpus& corpus, const SceneSample& scene, const SceneObject& obj) {
  std::vector<TokenId> out;
  for (int i = obj.phrase_begin; i <= obj.phrase_end; ++i)
    out.push_back(corpus.words.id(scene.caption[static_cast<size_t>(i)]));
  return out;
}

const RelationCatalog& shared_catalog(const Corpus& corpus) {
  static thread_local std::unique_ptr<RelationCatalog> cat;
  static thread_local int cached_text_size = -1;
  if (!cat || cached_text_size != corpus.vocab.text_size) {
    cat = std::make_unique<RelationCatalog>(build_relation_catalog(vrd_relations(), corpus.words, 3));
    cached_text_size = corpus.vocab.text_size;
  }
  return *cat;
}

}  // namespace

BuiltExample build_pretrain_example(const Corpus& corpus, const SceneSample& scene, const TrainConfig& train,
                                    const MaskingConfig& masking, std::uint64_t seed,
                                    const SceneSample* mismatched_with) {
  Rng rng(seed);
  const SceneSample* use = &scene;
  SceneSample augmented;
  bool augmented_used = false;

  bool flip = rng.next_bool(train.hflip_prob);
  bool crop = rng.next_bool(train.crop_prob);
  if (flip) {
    augmented = hflip(*use);
    use = &augmented;
    augmented_used = true;
  }
  if (crop) {
    // Snap crop windows to the patch grid so the encoder sees whole patches.
    augmented = random_crop(*use, rng, train.crop_min_scale, 8);
    use = &augmented;
    augmented_used = true;
  }

  // An ITM negative pairs this image with a different scene's caption; it
  // is masked exactly like a positive so the head cannot key on MASK density.
  const SceneSample* caption_source = mismatched_with != nullptr ? mismatched_with : use;

  TokenStream stream = encode_grounded(corpus.words.encode(caption_source->caption),
                                       grounded_objects(*caption_source), corpus.vocab);
  MaskingPlan plan = plan_masking(stream, corpus.vocab, masking, rng.next_u64());
  TokenStream corrupted = apply_plan(stream, plan, corpus.vocab);

  BuiltExample built;
  built.example.input = make_input(corrupted, corpus.vocab, nullptr);
  if (augmented_used) {
    built.image = std::move(augmented.image);
    built.image_w = augmented.width;
    built.image_h = augmented.height;
    built.point_input_at_own_image();
  } else {
    built.example.input.image = scene.image.data();
    built.example.input.image_w = scene.width;
    built.example.input.image_h = scene.height;
  }

  if (mismatched_with == nullptr) {
    for (const auto& slot : plan.slots) {
      SlotTarget t;
      t.token_index = static_cast<int>(slot.index) + 1;  // CLS shift
      if (corpus.vocab.is_position(slot.ground_truth)) {
        t.is_position = true;
        t.soft = position_target(corpus.vocab.bin_of(slot.ground_truth), corpus.vocab.position_bins, train);
      } else {
        t.is_position = false;
        t.gold_text = slot.ground_truth;
      }
      built.example.targets.push_back(std::move(t));
    }
    built.example.has_itm = true;
    built.example.itm_label = 1.0;
  } else {
    built.example.has_itm = true;
    built.example.itm_label = 0.0;
  }
  return built;
}

LossStats train_step(ModelParams& params, Optimizer& optimizer, const std::vector<BuiltExample>& batch,
                     double lambda, int threads) {
  std::size_t n_pos = 0, n_text = 0, n_itm = 0;
  for (const auto& b : batch) {
    for (const auto& t : b.example.targets) (t.is_position ? n_pos : n_text) += 1;
    if (b.example.has_itm) ++n_itm;
  }
  LossWeights w;
  w.position = n_pos ? lambda / static_cast<double>(n_pos) : 0.0;
  w.text = n_text ? 1.0 / static_cast<double>(n_text) : 0.0;
  w.itm = n_itm ? 1.0 / static_cast<double>(n_itm) : 0.0;

  int workers = std::max(1, std::min<int>(threads, static_cast<int>(batch.size())));
  std::vector<ParamsT<float>> grads(static_cast<size_t>(workers));
  std::vector<LossStats> stats(static_cast<size_t>(workers));
  for (auto& g : grads) {
    g.config = params.config;
    g.allocate();
  }

  auto worker = [&](int wi) {
    for (std::size_t i = static_cast<size_t>(wi); i < batch.size(); i += static_cast<size_t>(workers))
      example_loss_and_grad(params, batch[i].example, w, grads[static_cast<size_t>(wi)],
                            stats[static_cast<size_t>(wi)]);
  };
  if (workers == 1) {
    worker(0);
  } else {
    std::vector<std::thread> pool;
    for (int t = 0; t < workers; ++t) pool.emplace_back(worker, t);
    for (auto& t : pool) t.join();
  }

  for (int t = 1; t < workers; ++t) {
    grads[0].add_scaled(grads[static_cast<size_t>(t)], 1.0f);
    stats[0].merge(stats[static_cast<size_t>(t)]);
  }
  optimizer.apply(params, grads[0]);
  return stats[0];
}

std::string EpochLog::to_json_line() const {
  nlohmann::json j;
  j["epoch"] = epoch;
  j["L_p"] = position_loss;
  j["L_t"] = text_loss;
  j["L_gmlm"] = combined;
  j["itm_loss"] = itm_loss;
  j["itm_acc"] = itm_accuracy;
  j["pos_top1"] = position_top1;
  return j.dump();
}

namespace {

EpochLog summarize_epoch(int epoch, const LossStats& s, double lambda) {
  EpochLog log;
  log.epoch = epoch;
  log.position_loss = s.position_slots ? s.position_loss_sum / static_cast<double>(s.position_slots) : 0.0;
  log.text_loss = s.text_slots ? s.text_loss_sum / static_cast<double>(s.text_slots) : 0.0;
  log.combined = lambda * log.position_loss + log.text_loss;
  log.itm_loss = s.itm_count ? s.itm_loss_sum / static_cast<double>(s.itm_count) : 0.0;
  log.itm_accuracy = s.itm_count ? static_cast<double>(s.itm_correct) / static_cast<double>(s.itm_count) : 0.0;
  log.position_top1 =
      s.position_slots ? static_cast<double>(s.position_top1) / static_cast<double>(s.position_slots) : 0.0;
  return log;
}

}  // namespace

std::vector<EpochLog> pretrain(ModelParams& params, const Corpus& corpus, const ExperimentConfig& config,
                               int start_epoch, int epochs, const LogSink& log, Optimizer* optimizer) {
  const TrainConfig& train = config.train;
  Optimizer local;
  if (optimizer == nullptr) {
    local.kind = train.optimizer;
    local.lr = train.lr;
    optimizer = &local;
  }
  auto order_base = train_indices(corpus.size(), static_cast<std::size_t>(config.holdout));
  std::vector<EpochLog> logs;

  for (int e = start_epoch; e < start_epoch + epochs; ++e) {
    std::uint64_t epoch_seed = derive_seed(train.seed, 0x9000 + static_cast<std::uint64_t>(e));
    Rng epoch_rng(epoch_seed);
    auto order = order_base;
    shuffle_indices(order, epoch_rng);

    LossStats epoch_stats;
    for (std::size_t at = 0; at < order.size(); at += static_cast<size_t>(train.batch)) {
      std::size_t end = std::min(order.size(), at + static_cast<size_t>(train.batch));
      std::vector<BuiltExample> batch;
      batch.reserve((end - at) * 2);
      for (std::size_t k = at; k < end; ++k) {
        std::size_t idx = order[k];
        std::uint64_t ex_seed = derive_seed(epoch_seed, idx);
        const SceneSample& scene = corpus.data.scenes[idx];
        batch.push_back(build_pretrain_example(corpus, scene, train, config.masking, ex_seed, nullptr));
        Rng itm_rng(derive_seed(ex_seed, 0x17f));
        if (itm_rng.next_bool(train.itm_neg_rate) && order_base.size() > 1) {
          std::size_t j = order_base[itm_rng.next_below(static_cast<std::uint32_t>(order_base.size()))];
          if (j != idx) {
            batch.push_back(build_pretrain_example(corpus, scene, train, config.masking,
                                                   derive_seed(ex_seed, 0x4e9), &corpus.data.scenes[j]));
          }
        }
      }
      epoch_stats.merge(train_step(params, *optimizer, batch, train.lambda, config.threads));
    }
    logs.push_back(summarize_epoch(e, epoch_stats, train.lambda));
    if (log) log(logs.back().to_json_line());
  }
  return logs;
}

// ---------------------------------------------------------------------------
// Task instances
// ---------------------------------------------------------------------------

RecInstance build_rec_instance(const Corpus& corpus, const SceneSample& scene, std::uint64_t salt) {
  if (scene.objects.empty()) throw std::invalid_argument("build_rec_instance: scene has no objects");
  Rng rng(derive_seed(scene.seed, 0xec + salt * 0x9e37));
  std::size_t head = rng.next_below(static_cast<std::uint32_t>(scene.objects.size()));
  const SceneObject& obj = scene.objects[head];

  std::vector<TokenId> expr = phrase_tokens(corpus, scene, obj);
  int span_end = static_cast<int>(expr.size()) - 1;

  // Optionally keep the caption's relational tail ("red square left of blue
  // circle"); the tail phrase stays ungrounded.
  if (head + 1 < scene.objects.size()) {
    const SceneObject& next = scene.objects[head + 1];
    if (next.phrase_begin > obj.phrase_end + 1 && rng.next_bool(0.5)) {
      for (int i = obj.phrase_end + 1; i < next.phrase_begin; ++i)
        expr.push_back(corpus.words.id(scene.caption[static_cast<size_t>(i)]));
      auto tail = phrase_tokens(corpus, scene, next);
      expr.insert(expr.end(), tail.begin(), tail.end());
    }
  }

  RecInstance inst;
  inst.prompt = build_rec_prompt(expr, span_end, corpus.vocab);
  inst.gold = obj.box;
  inst.scene = &scene;
  return inst;
}

GroundInstance build_ground_instance(const Corpus& corpus, const SceneSample& scene) {
  if (scene.objects.empty()) throw std::invalid_argument("build_ground_instance: scene has no objects");
  GroundInstance inst;
  std::vector<int> span_ends;
  for (const auto& o : scene.objects) {
    span_ends.push_back(o.phrase_end);
    inst.golds.push_back({o.box});
  }
  inst.prompt = build_grounding_prompt(corpus.words.encode(scene.caption), span_ends, corpus.vocab);
  inst.scene = &scene;
  return inst;
}

std::vector<VrdInstance> build_vrd_instances(const Corpus& corpus, const SceneSample& scene,
                                             const RelationCatalog& catalog) {
  std::vector<VrdInstance> out;
  for (std::size_t i = 0; i < scene.objects.size(); ++i) {
    for (std::size_t j = 0; j < scene.objects.size(); ++j) {
      if (i == j) continue;
      VrdInstance inst;
      inst.subject = static_cast<int>(i);
      inst.object_ = static_cast<int>(j);
      inst.gold_relation = geometric_relation(scene.objects[i].box, scene.objects[j].box);
      PhrasePiece subj{phrase_tokens(corpus, scene, scene.objects[i]), true, scene.objects[i].box};
      PhrasePiece obj{phrase_tokens(corpus, scene, scene.objects[j]), true, scene.objects[j].box};
      inst.prompt = build_vrd_prompt(subj, obj, catalog.max_len, corpus.vocab, corpus.words);
      inst.scene = &scene;
      out.push_back(std::move(inst));
    }
  }
  return out;
}

std::optional<VcrInstance> build_vcr_instance(const Corpus& corpus, const SceneSample& scene,
                                              std::uint64_t salt) {
  if (scene.objects.size() < 2) return std::nullopt;
  Rng rng(derive_seed(scene.seed, 0xc4 + salt * 0x9e37));
  const SceneConfig& sc = corpus.data.config;

  // Find a (target, reference, relation) where exactly one object satisfies
  // the relation to the reference, so the question has a unique answer.
  std::vector<std::pair<std::size_t, std::size_t>> options;
  for (std::size_t r = 0; r < scene.objects.size(); ++r) {
    for (std::size_t t = 0; t < scene.objects.size(); ++t) {
      if (t == r) continue;
      int rel = geometric_relation(scene.objects[t].box, scene.objects[r].box);
      if (rel == 4) continue;
      bool unique = true;
      for (std::size_t u = 0; u < scene.objects.size(); ++u) {
        if (u == t || u == r) continue;
        if (geometric_relation(scene.objects[u].box, scene.objects[r].box) == rel) unique = false;
      }
      if (unique) options.emplace_back(t, r);
    }
  }
  if (options.empty()) return std::nullopt;
  auto [t_idx, r_idx] = options[rng.next_below(static_cast<std::uint32_t>(options.size()))];
  const SceneObject& target = scene.objects[t_idx];
  const SceneObject& ref = scene.objects[r_idx];
  int rel = geometric_relation(target.box, ref.box);
  const RelationCatalog& catalog = shared_catalog(corpus);

  VcrInstance inst;
  inst.scene = &scene;
  PhrasePiece lead{{corpus.words.id("which"), corpus.words.id("shape"), corpus.words.id("is")}, false, {}};
  PhrasePiece rel_piece{catalog.tokens[static_cast<size_t>(rel)], false, {}};
  PhrasePiece ref_piece{{corpus.words.id("the")}, false, {}};
  for (TokenId id : phrase_tokens(corpus, scene, ref)) ref_piece.tokens.push_back(id);
  ref_piece.grounded = true;
  ref_piece.box = ref.box;
  inst.question = {lead, rel_piece, ref_piece};

  auto candidate_piece = [&](int color, int shape) {
    PhrasePiece piece{{corpus.words.id("the"), corpus.words.id(sc.colors[static_cast<size_t>(color)]),
                       corpus.words.id(sc.shapes[static_cast<size_t>(shape)])},
                      false,
                      {}};
    for (const auto& o : scene.objects) {
      if (o.color == color && o.shape == shape) {
        piece.grounded = true;
        piece.box = o.box;
        break;
      }
    }
    return std::vector<PhrasePiece>{piece};
  };

  // Gold answer + present-object distractors + absent combos up to 4.
  if (sc.colors.size() * sc.shapes.size() < 4) return std::nullopt;
  std::vector<std::pair<int, int>> combos{{target.color, target.shape}};
  for (std::size_t u = 0; u < scene.objects.size() && combos.size() < 4; ++u) {
    if (u == t_idx) continue;
    combos.emplace_back(scene.objects[u].color, scene.objects[u].shape);
  }
  while (combos.size() < 4) {
    int color = static_cast<int>(rng.next_below(static_cast<std::uint32_t>(sc.colors.size())));
    int shape = static_cast<int>(rng.next_below(static_cast<std::uint32_t>(sc.shapes.size())));
    if (std::find(combos.begin(), combos.end(), std::make_pair(color, shape)) == combos.end())
      combos.emplace_back(color, shape);
  }
  std::vector<std::size_t> perm{0, 1, 2, 3};
  shuffle_indices(perm, rng);
  inst.answers.resize(4);
  for (std::size_t k = 0; k < 4; ++k) {
    inst.answers[perm[k]] = candidate_piece(combos[k].first, combos[k].second);
    if (k == 0) inst.gold_answer = static_cast<int>(perm[k]);
  }

  // Rationales restate the relation; distractors use the three other ones.
  std::vector<std::size_t> rel_perm{0, 1, 2, 3};
  shuffle_indices(rel_perm, rng);
  inst.rationales.resize(4);
  std::size_t slot_of_gold = 0;
  std::vector<int> rels{rel};
  for (int r = 0; r < 4 && rels.size() < 4; ++r) {
    if (r != rel) rels.push_back(r);
  }
  for (std::size_t k = 0; k < 4; ++k) {
    PhrasePiece it_is{{corpus.words.id("it"), corpus.words.id("is")}, false, {}};
    PhrasePiece rp{catalog.tokens[static_cast<size_t>(rels[k])], false, {}};
    inst.rationales[rel_perm[k]] = {it_is, rp, ref_piece};
    if (k == 0) slot_of_gold = rel_perm[k];
  }
  inst.gold_rationale = static_cast<int>(slot_of_gold);
  return inst;
}

std::optional<VqaInstance> build_vqa_instance(const Corpus& corpus, const SceneSample& scene,
                                              std::uint64_t salt) {
  if (scene.objects.empty()) return std::nullopt;
  Rng rng(derive_seed(scene.seed, 0x7a + salt * 0x9e37));
  const SceneConfig& sc = corpus.data.config;

  // Ask about a shape that appears exactly once so the color is well-defined.
  std::vector<std::size_t> unique_objs;
  for (std::size_t i = 0; i < scene.objects.size(); ++i) {
    int same_shape = 0;
    for (const auto& o : scene.objects)
      if (o.shape == scene.objects[i].shape) ++same_shape;
    if (same_shape == 1) unique_objs.push_back(i);
  }
  if (unique_objs.empty()) return std::nullopt;
  const SceneObject& obj = scene.objects[unique_objs[rng.next_below(static_cast<std::uint32_t>(unique_objs.size()))]];

  VqaInstance inst;
  inst.scene = &scene;
  PhrasePiece lead{{corpus.words.id("what"), corpus.words.id("color"), corpus.words.id("is"),
                    corpus.words.id("the")},
                   false,
                   {}};
  PhrasePiece shape_piece{{corpus.words.id(sc.shapes[static_cast<size_t>(obj.shape)])}, true, obj.box};
  inst.prompt = build_vqa_prompt({lead, shape_piece}, 1, corpus.vocab, corpus.words);
  for (const auto& color : sc.colors) inst.candidates.push_back({corpus.words.id(color)});
  inst.gold = obj.color;
  return inst;
}

// ---------------------------------------------------------------------------
// Prompt tuning
// ---------------------------------------------------------------------------

namespace {

BuiltExample example_from_prompt(const Corpus& corpus, const PromptInstance& prompt, const SceneSample* scene) {
  BuiltExample built;
  built.example.input = make_input(prompt.stream, corpus.vocab, scene);
  return built;
}

void add_box_targets(BuiltExample& built, const PromptInstance& prompt, const std::vector<BBox>& golds,
                     const Corpus& corpus, const TrainConfig& train) {
  if (golds.size() != prompt.box_groups.size())
    throw std::invalid_argument("add_box_targets: gold/group count mismatch");
  for (std::size_t g = 0; g < golds.size(); ++g) {
    auto bins = quantize_box(golds[g], corpus.vocab.position_bins);
    for (std::size_t k = 0; k < 4; ++k) {
      SlotTarget t;
      t.token_index = static_cast<int>(prompt.box_groups[g][k]) + 1;
      t.is_position = true;
      t.soft = position_target(bins[k], corpus.vocab.position_bins, train);
      built.example.targets.push_back(std::move(t));
    }
  }
}

void add_text_targets(BuiltExample& built, const std::vector<std::size_t>& slots,
                      const std::vector<TokenId>& gold_tokens) {
  // Padding slots beyond the gold length carry no loss.
  for (std::size_t k = 0; k < gold_tokens.size(); ++k) {
    SlotTarget t;
    t.token_index = static_cast<int>(slots[k]) + 1;
    t.is_position = false;
    t.gold_text = gold_tokens[k];
    built.example.targets.push_back(std::move(t));
  }
}

std::vector<BuiltExample> build_tune_examples(const Corpus& corpus, const ExperimentConfig& config, TaskTag task,
                                              const std::vector<std::size_t>& indices, std::uint64_t salt) {
  std::vector<BuiltExample> out;
  const RelationCatalog& catalog = shared_catalog(corpus);

  for (std::size_t idx : indices) {
    const SceneSample& scene = corpus.data.scenes[idx];
    switch (task) {
      case TaskTag::Rec: {
        RecInstance inst = build_rec_instance(corpus, scene, salt);
        BuiltExample b = example_from_prompt(corpus, inst.prompt, &scene);
        add_box_targets(b, inst.prompt, {inst.gold}, corpus, config.train);
        out.push_back(std::move(b));
        break;
      }
      case TaskTag::Ground: {
        GroundInstance inst = build_ground_instance(corpus, scene);
        std::vector<BBox> golds;
        for (const auto& g : inst.golds) golds.push_back(merge_boxes(g));
        BuiltExample b = example_from_prompt(corpus, inst.prompt, &scene);
        add_box_targets(b, inst.prompt, golds, corpus, config.train);
        out.push_back(std::move(b));
        break;
      }
      case TaskTag::Vrd: {
        auto instances = build_vrd_instances(corpus, scene, catalog);
        std::vector<const VrdInstance*> pos, neg;
        for (const auto& inst : instances)
          (inst.gold_relation == catalog.no_relation ? neg : pos).push_back(&inst);
        Rng rng(derive_seed(scene.seed, 0x3d + salt * 0x9e37));
        std::vector<std::size_t> neg_order(neg.size());
        std::iota(neg_order.begin(), neg_order.end(), 0);
        shuffle_indices(neg_order, rng);
        std::size_t n_neg = std::min(neg.size(), pos.empty() ? std::size_t{1} : pos.size() * 3);
        std::vector<const VrdInstance*> chosen = pos;
        for (std::size_t k = 0; k < n_neg; ++k) chosen.push_back(neg[neg_order[k]]);
        for (const VrdInstance* inst : chosen) {
          BuiltExample b = example_from_prompt(corpus, inst->prompt, &scene);
          add_text_targets(b, inst->prompt.text_slots,
                           catalog.tokens[static_cast<size_t>(inst->gold_relation)]);
          out.push_back(std::move(b));
        }
        break;
      }
      case TaskTag::VcrQA:
      case TaskTag::VcrQAR: {
        auto inst = build_vcr_instance(corpus, scene, salt);
        if (!inst) break;
        bool yesno = config.tune.vcr_head == "yesno";
        for (int a = 0; a < 4; ++a) {
          if (yesno) {
            PromptInstance p = build_vcr_prompt(inst->question, inst->answers[static_cast<size_t>(a)],
                                                corpus.vocab, corpus.words);
            BuiltExample b = example_from_prompt(corpus, p, &scene);
            add_text_targets(b, p.text_slots,
                             {corpus.words.id(a == inst->gold_answer ? "yes" : "no")});
            out.push_back(std::move(b));
          } else {
            std::vector<PhrasePiece> pieces = inst->question;
            for (const auto& piece : inst->answers[static_cast<size_t>(a)]) pieces.push_back(piece);
            BuiltExample b;
            b.example.input = make_input(pieces_to_stream(pieces, corpus.vocab), corpus.vocab, &scene);
            b.example.has_itm = true;
            b.example.itm_label = a == inst->gold_answer ? 1.0 : 0.0;
            out.push_back(std::move(b));
          }
        }
        // Rationale stage: condition on the gold answer.
        for (int r = 0; r < 4; ++r) {
          std::vector<PhrasePiece> pieces = inst->question;
          for (const auto& piece : inst->answers[static_cast<size_t>(inst->gold_answer)]) pieces.push_back(piece);
          for (const auto& piece : inst->rationales[static_cast<size_t>(r)]) pieces.push_back(piece);
          if (yesno) {
            PromptInstance p;
            p.task = TaskTag::VcrQAR;
            p.stream = pieces_to_stream(pieces, corpus.vocab);
            p.stream.push_back(corpus.words.id("answer"));
            p.text_slots.push_back(p.stream.size());
            p.stream.push_back(corpus.vocab.mask_id());
            BuiltExample b = example_from_prompt(corpus, p, &scene);
            add_text_targets(b, p.text_slots,
                             {corpus.words.id(r == inst->gold_rationale ? "yes" : "no")});
            out.push_back(std::move(b));
          } else {
            BuiltExample b;
            b.example.input = make_input(pieces_to_stream(pieces, corpus.vocab), corpus.vocab, &scene);
            b.example.has_itm = true;
            b.example.itm_label = r == inst->gold_rationale ? 1.0 : 0.0;
            out.push_back(std::move(b));
          }
        }
        break;
      }
      case TaskTag::Vqa: {
        auto inst = build_vqa_instance(corpus, scene, salt);
        if (!inst) break;
        BuiltExample b = example_from_prompt(corpus, inst->prompt, &scene);
        add_text_targets(b, inst->prompt.text_slots, inst->candidates[static_cast<size_t>(inst->gold)]);
        out.push_back(std::move(b));
        break;
      }
    }
  }
  return out;
}

}  // namespace

std::vector<EpochLog> prompt_tune(ModelParams& params, const Corpus& corpus, const ExperimentConfig& config,
                                  TaskTag task, const LogSink& log) {
  auto train_idx = train_indices(corpus.size(), static_cast<std::size_t>(config.holdout));
  std::vector<EpochLog> logs;
  Optimizer optimizer;
  optimizer.kind = config.tune.optimizer;
  optimizer.lr = config.tune.lr;
  for (int e = 0; e < config.tune.epochs; ++e) {
    std::uint64_t epoch_seed = derive_seed(config.train.seed, 0xa000 + static_cast<std::uint64_t>(e));
    auto examples = build_tune_examples(corpus, config, task, train_idx, 1000 + static_cast<std::uint64_t>(e));
    // Shuffle example order, not scene order, so multi-example tasks mix.
    std::vector<std::size_t> order(examples.size());
    std::iota(order.begin(), order.end(), 0);
    Rng rng(epoch_seed);
    shuffle_indices(order, rng);

    LossStats epoch_stats;
    for (std::size_t at = 0; at < order.size(); at += static_cast<size_t>(config.tune.batch)) {
      std::size_t end = std::min(order.size(), at + static_cast<size_t>(config.tune.batch));
      std::vector<BuiltExample> batch;
      for (std::size_t k = at; k < end; ++k) batch.push_back(std::move(examples[order[k]]));
      for (auto& b : batch) {
        if (!b.image.empty()) b.point_input_at_own_image();
      }
      epoch_stats.merge(train_step(params, optimizer, batch, config.train.lambda, config.threads));
    }
    logs.push_back(summarize_epoch(e, epoch_stats, config.train.lambda));
    if (log) log(logs.back().to_json_line());
  }
  return logs;
}

// ---------------------------------------------------------------------------
// Evaluation
// ---------------------------------------------------------------------------

namespace {

std::array<std::vector<double>, 4> box_group_probs(const ModelParams& params, const Trace<float>& trace,
                                                   const std::array<std::size_t, 4>& group) {
  std::array<std::vector<double>, 4> out;
  for (std::size_t k = 0; k < 4; ++k)
    out[k] = softmax(position_logits(params, trace, static_cast<int>(group[k]) + 1));
  return out;
}

std::vector<std::vector<double>> slot_log_distributions(const ModelParams& params, const Trace<float>& trace,
                                                        const std::vector<std::size_t>& slots) {
  std::vector<std::vector<double>> out;
  out.reserve(slots.size());
  for (std::size_t s : slots) out.push_back(log_softmax(vocab_logits(params, trace, static_cast<int>(s) + 1)));
  return out;
}

nlohmann::json box_json(const BBox& b) { return {b.x_min, b.y_min, b.x_max, b.y_max}; }
BBox box_from_json(const nlohmann::json& j, double w, double h) {
  return BBox{j[0].get<double>(), j[1].get<double>(), j[2].get<double>(), j[3].get<double>(), w, h};
}

double vcr_candidate_score(const ModelParams& params, const Corpus& corpus, const SceneSample& scene,
                           const std::vector<PhrasePiece>& pieces, bool yesno, const WordVocab& words) {
  if (!yesno) {
    SampleInput in = make_input(pieces_to_stream(pieces, corpus.vocab), corpus.vocab, &scene);
    return itm_score(params, in);
  }
  PromptInstance p;
  p.stream = pieces_to_stream(pieces, corpus.vocab);
  p.stream.push_back(words.id("answer"));
  p.text_slots.push_back(p.stream.size());
  p.stream.push_back(corpus.vocab.mask_id());
  SampleInput in = make_input(p.stream, corpus.vocab, &scene);
  Trace<float> trace;
  forward_encoder(params, in, trace);
  auto logp = log_softmax(vocab_logits(params, trace, static_cast<int>(p.text_slots[0]) + 1));
  return logp[static_cast<size_t>(words.id("yes"))] - logp[static_cast<size_t>(words.id("no"))];
}

}  // namespace

std::vector<std::string> eval_dump(const ModelParams& params, const Corpus& corpus,
                                   const ExperimentConfig& config, TaskTag task,
                                   const std::vector<std::size_t>& indices) {
  std::vector<std::string> lines;
  const RelationCatalog& catalog = shared_catalog(corpus);
  int m = corpus.vocab.position_bins;

  for (std::size_t idx : indices) {
    const SceneSample& scene = corpus.data.scenes[idx];
    double w = scene.width, h = scene.height;
    switch (task) {
      case TaskTag::Rec: {
        RecInstance inst = build_rec_instance(corpus, scene, 0);
        SampleInput in = make_input(inst.prompt.stream, corpus.vocab, &scene);
        Trace<float> trace;
        forward_encoder(params, in, trace);
        BBox pred = decode_box(box_group_probs(params, trace, inst.prompt.box_groups[0]), w, h, m);
        nlohmann::json j{{"task", "rec"}, {"id", idx}, {"pred_box", box_json(pred)}, {"gold_box", box_json(inst.gold)}};
        lines.push_back(j.dump());
        break;
      }
      case TaskTag::Ground: {
        GroundInstance inst = build_ground_instance(corpus, scene);
        SampleInput in = make_input(inst.prompt.stream, corpus.vocab, &scene);
        Trace<float> trace;
        forward_encoder(params, in, trace);
        nlohmann::json phrases = nlohmann::json::array();
        for (std::size_t g = 0; g < inst.prompt.box_groups.size(); ++g) {
          BBox pred = decode_box(box_group_probs(params, trace, inst.prompt.box_groups[g]), w, h, m);
          nlohmann::json golds = nlohmann::json::array();
          for (const auto& gb : inst.golds[g]) golds.push_back(box_json(gb));
          phrases.push_back({{"pred_box", box_json(pred)}, {"gold_boxes", golds}});
        }
        nlohmann::json j{{"task", "ground"}, {"id", idx}, {"phrases", phrases}};
        lines.push_back(j.dump());
        break;
      }
      case TaskTag::Vrd: {
        auto instances = build_vrd_instances(corpus, scene, catalog);
        nlohmann::json preds = nlohmann::json::array();
        nlohmann::json golds = nlohmann::json::array();
        for (const auto& inst : instances) {
          SampleInput in = make_input(inst.prompt.stream, corpus.vocab, &scene);
          Trace<float> trace;
          forward_encoder(params, in, trace);
          auto scores = score_catalog(slot_log_distributions(params, trace, inst.prompt.text_slots), catalog);
          int best = argmax_score(scores);
          if (best != catalog.no_relation)
            preds.push_back({inst.subject, best, inst.object_, scores[static_cast<size_t>(best)]});
          if (inst.gold_relation != catalog.no_relation)
            golds.push_back({inst.subject, inst.gold_relation, inst.object_});
        }
        nlohmann::json j{{"task", "vrd"}, {"id", idx}, {"preds", preds}, {"golds", golds}};
        lines.push_back(j.dump());
        break;
      }
      case TaskTag::VcrQA:
      case TaskTag::VcrQAR: {
        auto inst = build_vcr_instance(corpus, scene, 0);
        if (!inst) break;
        bool yesno = config.tune.vcr_head == "yesno";
        auto score_answer = [&](int a) {
          std::vector<PhrasePiece> pieces = inst->question;
          for (const auto& piece : inst->answers[static_cast<size_t>(a)]) pieces.push_back(piece);
          return vcr_candidate_score(params, corpus, scene, pieces, yesno, corpus.words);
        };
        auto score_rationale = [&](int given_answer, int r) {
          std::vector<PhrasePiece> pieces = inst->question;
          for (const auto& piece : inst->answers[static_cast<size_t>(given_answer)]) pieces.push_back(piece);
          for (const auto& piece : inst->rationales[static_cast<size_t>(r)]) pieces.push_back(piece);
          return vcr_candidate_score(params, corpus, scene, pieces, yesno, corpus.words);
        };
        std::vector<double> ans_scores;
        for (int a = 0; a < 4; ++a) ans_scores.push_back(score_answer(a));
        int pred_a = argmax_score(ans_scores);
        std::vector<double> rat_gold, rat_pred;
        for (int r = 0; r < 4; ++r) rat_gold.push_back(score_rationale(inst->gold_answer, r));
        if (pred_a == inst->gold_answer) {
          rat_pred = rat_gold;
        } else {
          for (int r = 0; r < 4; ++r) rat_pred.push_back(score_rationale(pred_a, r));
        }
        nlohmann::json j{{"task", "vcr"},
                         {"id", idx},
                         {"answer_scores", ans_scores},
                         {"gold_answer", inst->gold_answer},
                         {"rat_scores_gold", rat_gold},
                         {"rat_scores_pred", rat_pred},
                         {"gold_rationale", inst->gold_rationale}};
        lines.push_back(j.dump());
        break;
      }
      case TaskTag::Vqa: {
        auto inst = build_vqa_instance(corpus, scene, 0);
        if (!inst) break;
        SampleInput in = make_input(inst->prompt.stream, corpus.vocab, &scene);
        Trace<float> trace;
        forward_encoder(params, in, trace);
        auto logps = slot_log_distributions(params, trace, inst->prompt.text_slots);
        std::vector<double> scores;
        for (const auto& cand : inst->candidates) scores.push_back(score_relation(logps, cand));
        nlohmann::json j{{"task", "vqa"}, {"id", idx}, {"scores", scores}, {"gold", inst->gold}};
        lines.push_back(j.dump());
        break;
      }
    }
  }
  return lines;
}

EvalReport report_from_dump(TaskTag task, const std::vector<std::string>& lines, const std::string& digest) {
  EvalReport report;
  report.task = task_name(task);
  report.config_digest = digest;
  report.instance_count = lines.size();
  if (lines.empty()) throw std::invalid_argument("report_from_dump: empty dump");

  switch (task) {
    case TaskTag::Rec: {
      std::vector<BBox> preds, golds;
      for (const auto& line : lines) {
        nlohmann::json j = nlohmann::json::parse(line);
        preds.push_back(box_from_json(j.at("pred_box"), 0, 0));
        golds.push_back(box_from_json(j.at("gold_box"), 0, 0));
      }
      report.add("acc@0.5", acc_at_05(preds, golds));
      break;
    }
    case TaskTag::Ground: {
      std::vector<BBox> preds, golds;
      std::size_t phrases = 0;
      for (const auto& line : lines) {
        nlohmann::json j = nlohmann::json::parse(line);
        for (const auto& ph : j.at("phrases")) {
          preds.push_back(box_from_json(ph.at("pred_box"), 0, 0));
          std::vector<BBox> gb;
          for (const auto& b : ph.at("gold_boxes")) gb.push_back(box_from_json(b, 0, 0));
          golds.push_back(merge_boxes(gb));
          ++phrases;
        }
      }
      report.instance_count = phrases;
      report.add("merged_acc@0.5", acc_at_05(preds, golds));
      break;
    }
    case TaskTag::Vrd: {
      std::vector<std::vector<ScoredTriplet>> preds;
      std::vector<std::vector<GoldTriplet>> golds;
      for (const auto& line : lines) {
        nlohmann::json j = nlohmann::json::parse(line);
        std::vector<ScoredTriplet> p;
        for (const auto& t : j.at("preds"))
          p.push_back({t[0].get<int>(), t[1].get<int>(), t[2].get<int>(), t[3].get<double>()});
        std::vector<GoldTriplet> g;
        for (const auto& t : j.at("golds")) g.push_back({t[0].get<int>(), t[1].get<int>(), t[2].get<int>()});
        preds.push_back(std::move(p));
        golds.push_back(std::move(g));
      }
      report.add("R@50", recall_at_k(preds, golds, 50));
      report.add("R@100", recall_at_k(preds, golds, 100));
      report.add("mR@50", mean_recall_at_k(preds, golds, 50));
      report.add("mR@100", mean_recall_at_k(preds, golds, 100));
      break;
    }
    case TaskTag::VcrQA:
    case TaskTag::VcrQAR: {
      std::vector<int> pred_a, gold_a, pred_r_gold, gold_r, pred_r_pred;
      for (const auto& line : lines) {
        nlohmann::json j = nlohmann::json::parse(line);
        pred_a.push_back(argmax_score(j.at("answer_scores").get<std::vector<double>>()));
        gold_a.push_back(j.at("gold_answer").get<int>());
        pred_r_gold.push_back(argmax_score(j.at("rat_scores_gold").get<std::vector<double>>()));
        pred_r_pred.push_back(argmax_score(j.at("rat_scores_pred").get<std::vector<double>>()));
        gold_r.push_back(j.at("gold_rationale").get<int>());
      }
      report.add("Q->A", choice_accuracy(pred_a, gold_a));
      report.add("QA->R", choice_accuracy(pred_r_gold, gold_r));
      report.add("Q->AR", chained_accuracy(pred_a, gold_a, pred_r_pred, gold_r));
      break;
    }
    case TaskTag::Vqa: {
      std::vector<int> pred, gold;
      for (const auto& line : lines) {
        nlohmann::json j = nlohmann::json::parse(line);
        pred.push_back(argmax_score(j.at("scores").get<std::vector<double>>()));
        gold.push_back(j.at("gold").get<int>());
      }
      report.add("accuracy", choice_accuracy(pred, gold));
      break;
    }
  }
  return report;
}

double rec_accuracy(const ModelParams& params, const Corpus& corpus, const ExperimentConfig& config,
                    const std::vector<std::size_t>& indices) {
  auto lines = eval_dump(params, corpus, config, TaskTag::Rec, indices);
  return report_from_dump(TaskTag::Rec, lines, "").get("acc@0.5");
}

// ---------------------------------------------------------------------------
// Ablation
// ---------------------------------------------------------------------------

double AblationRow::mean_accuracy() const {
  double s = 0;
  for (double a : accuracy) s += a;
  return accuracy.empty() ? 0.0 : s / static_cast<double>(accuracy.size());
}

double AblationRow::mean_epochs() const {
  double s = 0;
  for (int e : epochs_to_threshold) {
    if (e < 0) return -1;
    s += e;
  }
  return epochs_to_threshold.empty() ? -1 : s / static_cast<double>(epochs_to_threshold.size());
}

const AblationRow& AblationTable::row(const std::string& variant) const {
  for (const auto& r : rows) {
    if (r.variant == variant) return r;
  }
  throw std::invalid_argument("AblationTable: no row named '" + variant + "'");
}

std::string AblationTable::to_text() const {
  std::ostringstream os;
  os << "variant             acc@0.5 (per seed)          mean    epochs-to-" << threshold << " (per seed)  mean\n";
  for (const auto& r : rows) {
    os << r.variant;
    for (std::size_t i = r.variant.size(); i < 20; ++i) os << ' ';
    std::ostringstream accs;
    for (double a : r.accuracy) {
      accs.precision(3);
      accs << std::fixed << a << ' ';
    }
    os << accs.str();
    for (std::size_t i = accs.str().size(); i < 28; ++i) os << ' ';
    os.precision(3);
    os << std::fixed << r.mean_accuracy() << "   ";
    std::ostringstream eps;
    for (int e : r.epochs_to_threshold) {
      if (e < 0)
        eps << "-  ";
      else
        eps << e << "  ";
    }
    os << eps.str();
    for (std::size_t i = eps.str().size(); i < 24; ++i) os << ' ';
    if (r.mean_epochs() < 0)
      os << "-";
    else
      os << r.mean_epochs();
    os << "\n";
  }
  return os.str();
}

std::string AblationTable::to_json() const {
  nlohmann::json rows_json = nlohmann::json::array();
  for (const auto& r : rows) {
    rows_json.push_back({{"variant", r.variant},
                         {"accuracy", r.accuracy},
                         {"mean_accuracy", r.mean_accuracy()},
                         {"epochs_to_threshold", r.epochs_to_threshold},
                         {"mean_epochs", r.mean_epochs()}});
  }
  return nlohmann::json{{"threshold", threshold}, {"rows", rows_json}}.dump();
}

AblationTable run_ablation(const ExperimentConfig& base, const LogSink& log) {
  struct Variant {
    std::string name;
    bool ordering_aware;
    MaskingMode mode;
    double rate;
  };
  std::vector<Variant> variants = {{"structured+oao", true, MaskingMode::Structured, 0.0},
                                   {"structured+onehot", false, MaskingMode::Structured, 0.0}};
  for (double rate : base.ablate.independent_rates) {
    std::ostringstream name;
    name << "independent-" << static_cast<int>(rate * 100) << "%";
    variants.push_back({name.str(), true, MaskingMode::Independent, rate});
  }

  AblationTable table;
  table.threshold = base.ablate.threshold;
  for (const auto& v : variants) table.rows.push_back({v.name, {}, {}});

  for (int s = 0; s < base.ablate.seeds; ++s) {
    ExperimentConfig cfg = base;
    cfg.scene_count = base.ablate.scene_count;
    cfg.holdout = base.ablate.holdout;
    cfg.train.epochs = base.ablate.pretrain_epochs;
    cfg.tune.epochs = base.ablate.tune_epochs;
    std::uint64_t seed_root = derive_seed(base.seed, 0xab1a7e + static_cast<std::uint64_t>(s));
    cfg.scene.seed = derive_seed(seed_root, 1);
    cfg.model.seed = derive_seed(seed_root, 2);
    cfg.train.seed = derive_seed(seed_root, 3);

    Dataset ds;
    ds.config = cfg.scene;
    ds.config_digest = config_digest(cfg);
    for (int i = 0; i < cfg.scene_count; ++i)
      ds.scenes.push_back(generate(cfg.scene, static_cast<std::uint64_t>(i)));
    Corpus corpus = Corpus::from_dataset(std::move(ds), cfg.model.position_bins);
    auto held = eval_indices(corpus.size(), static_cast<std::size_t>(cfg.holdout));

    for (std::size_t vi = 0; vi < variants.size(); ++vi) {
      const Variant& v = variants[vi];
      ExperimentConfig vcfg = cfg;
      vcfg.train.ordering_aware = v.ordering_aware;
      vcfg.masking.mode = v.mode;
      if (v.mode == MaskingMode::Independent) vcfg.masking.independent_rate = v.rate;

      ModelParams params = init_params(vcfg.model);
      double final_acc = 0;
      int epochs_to = -1;
      for (int e = 0; e < vcfg.train.epochs; ++e) {
        pretrain(params, corpus, vcfg, e, 1, nullptr);
        ModelParams tuned = params;
        prompt_tune(tuned, corpus, vcfg, TaskTag::Rec, nullptr);
        double acc = rec_accuracy(tuned, corpus, vcfg, held);
        final_acc = acc;
        if (epochs_to < 0 && acc >= table.threshold) epochs_to = e + 1;
        if (log) {
          std::ostringstream os;
          os << "{\"ablation\":\"" << v.name << "\",\"seed\":" << s << ",\"pretrain_epoch\":" << e + 1
             << ",\"rec_acc\":" << acc << "}";
          log(os.str());
        }
      }
      table.rows[vi].accuracy.push_back(final_acc);
      table.rows[vi].epochs_to_threshold.push_back(epochs_to);
    }
  }
  return table;
}

}  // namespace poslm
