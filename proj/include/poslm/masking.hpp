#pragma once

#include <array>
#include <cstdint>
#include <vector>

#include "poslm/rng.hpp"
#include "poslm/vocab.hpp"

namespace poslm {

// NotChosen slots stay untouched and get no prediction target. Keep means
// chosen-but-unchanged (the BERT 10%): the token stays but is still predicted.
enum class SlotAction { NotChosen, Keep, Mask, RandomReplace };

enum class MaskingMode {
  Structured,   // per object, mask a uniform-size random subset of its 4 slots
  Independent,  // each slot chosen independently at `independent_rate`, BERT split
};

struct MaskingConfig {
  MaskingMode mode = MaskingMode::Structured;
  double independent_rate = 0.2;  // only used in Independent mode
  double text_rate = 0.15;
  double mask_frac = 0.8;  // chosen slots: MASK / random replace / keep
  double random_frac = 0.1;
  double keep_frac = 0.1;
};

// One corrupted slot of a sequence. Slots not listed are kept untouched.
struct PlannedSlot {
  std::size_t index = 0;
  SlotAction action = SlotAction::Mask;
  TokenId ground_truth = 0;
  TokenId replacement = 0;  // meaningful for RandomReplace only
};

struct MaskingPlan {
  std::vector<PlannedSlot> slots;  // sorted by index
  std::uint64_t seed = 0;
};

// Uniform n in {1,2,3,4}, then a uniformly random size-n subset of the four
// coordinate slots of one object.
int draw_mask_count(Rng& rng);
std::array<bool, 4> draw_slot_subset(int n, Rng& rng);

// Per-object masked subsets for `n_objects` delimiter groups.
std::vector<std::array<bool, 4>> sample_position_masks(std::size_t n_objects, Rng& rng);

// BERT-style text masking: each slot chosen at `text_rate`, chosen slots
// split mask/random/keep; replacements must be drawn from the text range.
std::vector<SlotAction> sample_text_masks(std::size_t n_slots, const MaskingConfig& config, Rng& rng);

// Independent per-slot masking for the ablation baselines; split ratios as in
// text masking but replacements come from the position range.
std::vector<SlotAction> sample_independent_position_masks(std::size_t n_slots, double rate,
                                                          const MaskingConfig& config, Rng& rng);

// Builds the full corruption plan for one grounded stream: position slots per
// `config.mode`, text slots BERT-style. Special tokens are never touched.
MaskingPlan plan_masking(const TokenStream& stream, const VocabSpec& vocab, const MaskingConfig& config,
                         std::uint64_t seed);

// Applies a plan, returning the corrupted stream. Throws std::invalid_argument
// if the plan touches OPEN/CLOSE/CLS or replaces a token of the wrong kind.
TokenStream apply_plan(const TokenStream& stream, const MaskingPlan& plan, const VocabSpec& vocab);

// Restores the ground truths recorded in the plan; inverse of apply_plan.
TokenStream restore_plan(const TokenStream& corrupted, const MaskingPlan& plan);

}  // namespace poslm
