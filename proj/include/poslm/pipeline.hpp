#pragma once

#include <functional>
#include <optional>
#include <string>
#include <vector>

#include "poslm/config.hpp"
#include "poslm/masking.hpp"
#include "poslm/metrics.hpp"
#include "poslm/model.hpp"
#include "poslm/prompts.hpp"
#include "poslm/scenes.hpp"

namespace poslm {

// A dataset plus the derived vocabulary objects every stage needs.
struct Corpus {
  Dataset data;
  WordVocab words;
  VocabSpec vocab;

  static Corpus from_dataset(Dataset ds, int position_bins);
  std::size_t size() const { return data.scenes.size(); }
};

// Train/held-out split: the last `holdout` scenes are held out.
std::vector<std::size_t> train_indices(std::size_t count, std::size_t holdout);
std::vector<std::size_t> eval_indices(std::size_t count, std::size_t holdout);

// Objects are neighbors (and thus carry a directed relation) when their
// centers are closer than this; used by the synthetic VRD/VCR truth.
constexpr double kNeighborDist = 32.0;
const std::vector<std::string>& vrd_relations();
int geometric_relation(const BBox& subject, const BBox& object);  // catalog index

// A training example plus the storage its image pointer refers to.
struct BuiltExample {
  TrainingExample example;
  std::vector<float> image;  // owns pixels when augmentation copied them
  int image_w = 0, image_h = 0;

  void point_input_at_own_image() {
    example.input.image = image.data();
    example.input.image_w = image_w;
    example.input.image_h = image_h;
  }
};

// Masked grounded caption for one scene, with soft-label / gold-text targets
// and an optional extra ITM pairing; `mismatched_with` selects the caption
// donor for negative pairs.
BuiltExample build_pretrain_example(const Corpus& corpus, const SceneSample& scene, const TrainConfig& train,
                                    const MaskingConfig& masking, std::uint64_t seed,
                                    const SceneSample* mismatched_with);

// Runs one optimizer step over a batch of examples with per-batch mean
// reduction; returns the unweighted loss sums for logging.
LossStats train_step(ModelParams& params, Optimizer& optimizer, const std::vector<BuiltExample>& batch,
                     double lambda, int threads);

struct EpochLog {
  int epoch = 0;
  double position_loss = 0, text_loss = 0, combined = 0;
  double itm_loss = 0, itm_accuracy = 0;
  double position_top1 = 0;
  std::string to_json_line() const;
};

using LogSink = std::function<void(const std::string&)>;

// GMLM + ITM pre-training over the train split. Start epoch > 0 continues a
// checkpointed run with the identical batch composition per epoch; pass the
// persisted optimizer for exact continuation (a fresh one is made when null).
std::vector<EpochLog> pretrain(ModelParams& params, const Corpus& corpus, const ExperimentConfig& config,
                               int start_epoch, int epochs, const LogSink& log, Optimizer* optimizer = nullptr);

// ---------------------------------------------------------------------------
// Task instances
// ---------------------------------------------------------------------------

struct RecInstance {
  PromptInstance prompt;
  BBox gold;
  const SceneSample* scene = nullptr;
};
// Deterministic in (scene, salt). Expression = head phrase, optionally with
// the caption's spatial clause and the following phrase as ungrounded tail.
RecInstance build_rec_instance(const Corpus& corpus, const SceneSample& scene, std::uint64_t salt);

struct GroundInstance {
  PromptInstance prompt;
  std::vector<std::vector<BBox>> golds;  // per phrase, merged at eval time
  const SceneSample* scene = nullptr;
};
GroundInstance build_ground_instance(const Corpus& corpus, const SceneSample& scene);

struct VrdInstance {
  PromptInstance prompt;
  int subject = 0, object_ = 0;  // object indices within the scene
  int gold_relation = 0;         // catalog index
  const SceneSample* scene = nullptr;
};
std::vector<VrdInstance> build_vrd_instances(const Corpus& corpus, const SceneSample& scene,
                                             const RelationCatalog& catalog);

struct VcrInstance {
  std::vector<PhrasePiece> question;
  std::vector<std::vector<PhrasePiece>> answers;     // 4 candidates
  std::vector<std::vector<PhrasePiece>> rationales;  // 4 candidates
  int gold_answer = 0;
  int gold_rationale = 0;
  const SceneSample* scene = nullptr;
};
std::optional<VcrInstance> build_vcr_instance(const Corpus& corpus, const SceneSample& scene, std::uint64_t salt);

struct VqaInstance {
  PromptInstance prompt;
  std::vector<std::vector<TokenId>> candidates;  // answer token sequences
  int gold = 0;
  const SceneSample* scene = nullptr;
};
std::optional<VqaInstance> build_vqa_instance(const Corpus& corpus, const SceneSample& scene, std::uint64_t salt);

// Fine-tunes `params` in place on the task built from the train split; the
// GMLM head serves every task, the ITM head the VCR variant. No parameters
// are added or removed.
std::vector<EpochLog> prompt_tune(ModelParams& params, const Corpus& corpus, const ExperimentConfig& config,
                                  TaskTag task, const LogSink& log);

// ---------------------------------------------------------------------------
// Evaluation: every task emits one JSON line per instance; reports are
// computed from dump lines only, so CLI output and library calls agree.
// ---------------------------------------------------------------------------

std::vector<std::string> eval_dump(const ModelParams& params, const Corpus& corpus,
                                   const ExperimentConfig& config, TaskTag task,
                                   const std::vector<std::size_t>& indices);
EvalReport report_from_dump(TaskTag task, const std::vector<std::string>& lines, const std::string& digest);

// REC accuracy@0.5 over the given scenes (shorthand used by the ablation).
double rec_accuracy(const ModelParams& params, const Corpus& corpus, const ExperimentConfig& config,
                    const std::vector<std::size_t>& indices);

// ---------------------------------------------------------------------------
// Ablation harness: ordering-aware vs one-hot targets, structured vs
// independent masking at several rates.
// ---------------------------------------------------------------------------

struct AblationRow {
  std::string variant;
  std::vector<double> accuracy;         // per seed
  std::vector<int> epochs_to_threshold; // per seed; -1 = never reached
  double mean_accuracy() const;
  double mean_epochs() const;  // -1 if any seed never reached it
};

struct AblationTable {
  std::vector<AblationRow> rows;
  double threshold = 0;
  std::string to_text() const;
  std::string to_json() const;
  const AblationRow& row(const std::string& variant) const;
};

AblationTable run_ablation(const ExperimentConfig& config, const LogSink& log);

}  // namespace poslm
