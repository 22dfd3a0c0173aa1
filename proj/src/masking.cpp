#include "poslm/masking.hpp"

#include <algorithm>
#include <stdexcept>

namespace poslm {

int draw_mask_count(Rng& rng) { return 1 + static_cast<int>(rng.next_below(4)); }

std::array<bool, 4> draw_slot_subset(int n, Rng& rng) {
  if (n < 1 || n > 4) throw std::invalid_argument("draw_slot_subset: n must be in [1,4]");
  // Partial Fisher-Yates over the four slot indices; first n land in the subset.
  std::array<int, 4> idx{0, 1, 2, 3};
  for (int i = 0; i < n; ++i) {
    int j = i + static_cast<int>(rng.next_below(static_cast<std::uint32_t>(4 - i)));
    std::swap(idx[static_cast<size_t>(i)], idx[static_cast<size_t>(j)]);
  }
  std::array<bool, 4> subset{false, false, false, false};
  for (int i = 0; i < n; ++i) subset[static_cast<size_t>(idx[static_cast<size_t>(i)])] = true;
  return subset;
}

std::vector<std::array<bool, 4>> sample_position_masks(std::size_t n_objects, Rng& rng) {
  std::vector<std::array<bool, 4>> out;
  out.reserve(n_objects);
  for (std::size_t i = 0; i < n_objects; ++i) out.push_back(draw_slot_subset(draw_mask_count(rng), rng));
  return out;
}

namespace {

void check_split(const MaskingConfig& c) {
  if (c.text_rate < 0 || c.text_rate > 1 || c.independent_rate < 0 || c.independent_rate > 1)
    throw std::invalid_argument("MaskingConfig: rates must lie in [0,1]");
  double s = c.mask_frac + c.random_frac + c.keep_frac;
  if (c.mask_frac < 0 || c.random_frac < 0 || c.keep_frac < 0 || std::abs(s - 1.0) > 1e-9)
    throw std::invalid_argument("MaskingConfig: mask/random/keep split must sum to 1");
}

SlotAction draw_split_action(const MaskingConfig& config, Rng& rng) {
  double u = rng.next_double();
  if (u < config.mask_frac) return SlotAction::Mask;
  if (u < config.mask_frac + config.random_frac) return SlotAction::RandomReplace;
  return SlotAction::Keep;
}

std::vector<SlotAction> sample_bernoulli_split(std::size_t n_slots, double rate, const MaskingConfig& config,
                                               Rng& rng) {
  std::vector<SlotAction> out(n_slots, SlotAction::NotChosen);
  for (std::size_t i = 0; i < n_slots; ++i) {
    if (rng.next_double() < rate) out[i] = draw_split_action(config, rng);
  }
  return out;
}

}  // namespace

std::vector<SlotAction> sample_text_masks(std::size_t n_slots, const MaskingConfig& config, Rng& rng) {
  check_split(config);
  return sample_bernoulli_split(n_slots, config.text_rate, config, rng);
}

std::vector<SlotAction> sample_independent_position_masks(std::size_t n_slots, double rate,
                                                          const MaskingConfig& config, Rng& rng) {
  check_split(config);
  if (rate < 0 || rate > 1) throw std::invalid_argument("independent rate must lie in [0,1]");
  return sample_bernoulli_split(n_slots, rate, config, rng);
}

MaskingPlan plan_masking(const TokenStream& stream, const VocabSpec& vocab, const MaskingConfig& config,
                         std::uint64_t seed) {
  check_split(config);
  Rng rng(seed);

  std::vector<std::size_t> text_slots;
  std::vector<std::array<std::size_t, 4>> object_slots;
  for (std::size_t i = 0; i < stream.size(); ++i) {
    TokenId id = stream[i];
    if (vocab.is_text(id)) {
      text_slots.push_back(i);
    } else if (id == vocab.open_id()) {
      object_slots.push_back({i + 1, i + 2, i + 3, i + 4});
      i += 5;
    }
  }

  MaskingPlan plan;
  plan.seed = seed;

  if (config.mode == MaskingMode::Structured) {
    // Positions get pure MASK; the 80/10/10 split is a text-token convention.
    auto subsets = sample_position_masks(object_slots.size(), rng);
    for (std::size_t o = 0; o < object_slots.size(); ++o) {
      for (std::size_t k = 0; k < 4; ++k) {
        if (!subsets[o][k]) continue;
        std::size_t at = object_slots[o][k];
        plan.slots.push_back({at, SlotAction::Mask, stream[at], 0});
      }
    }
  } else {
    std::vector<std::size_t> pos_slots;
    for (const auto& group : object_slots)
      for (std::size_t at : group) pos_slots.push_back(at);
    auto actions = sample_independent_position_masks(pos_slots.size(), config.independent_rate, config, rng);
    for (std::size_t i = 0; i < pos_slots.size(); ++i) {
      if (actions[i] == SlotAction::NotChosen) continue;
      std::size_t at = pos_slots[i];
      TokenId repl = 0;
      if (actions[i] == SlotAction::RandomReplace)
        repl = vocab.position_id(static_cast<int>(rng.next_below(static_cast<std::uint32_t>(vocab.position_bins))));
      plan.slots.push_back({at, actions[i], stream[at], repl});
    }
  }

  auto text_actions = sample_text_masks(text_slots.size(), config, rng);
  for (std::size_t i = 0; i < text_slots.size(); ++i) {
    if (text_actions[i] == SlotAction::NotChosen) continue;
    std::size_t at = text_slots[i];
    TokenId repl = 0;
    if (text_actions[i] == SlotAction::RandomReplace)
      repl = static_cast<TokenId>(rng.next_below(static_cast<std::uint32_t>(vocab.text_size)));
    plan.slots.push_back({at, text_actions[i], stream[at], repl});
  }

  std::sort(plan.slots.begin(), plan.slots.end(),
            [](const PlannedSlot& a, const PlannedSlot& b) { return a.index < b.index; });
  return plan;
}

TokenStream apply_plan(const TokenStream& stream, const MaskingPlan& plan, const VocabSpec& vocab) {
  TokenStream out = stream;
  for (const auto& slot : plan.slots) {
    if (slot.index >= out.size()) throw std::invalid_argument("apply_plan: slot index out of range");
    TokenId current = out[slot.index];
    if (vocab.is_special(current)) throw std::invalid_argument("apply_plan: plan touches a special token");
    if (slot.ground_truth != current) throw std::invalid_argument("apply_plan: ground truth mismatch");
    switch (slot.action) {
      case SlotAction::NotChosen:
        throw std::invalid_argument("apply_plan: NotChosen slot inside a plan");
      case SlotAction::Keep:
        break;
      case SlotAction::Mask:
        out[slot.index] = vocab.mask_id();
        break;
      case SlotAction::RandomReplace:
        if (vocab.is_text(current) != vocab.is_text(slot.replacement) ||
            vocab.is_position(current) != vocab.is_position(slot.replacement))
          throw std::invalid_argument("apply_plan: replacement crosses vocabulary partition");
        out[slot.index] = slot.replacement;
        break;
    }
  }
  return out;
}

TokenStream restore_plan(const TokenStream& corrupted, const MaskingPlan& plan) {
  TokenStream out = corrupted;
  for (const auto& slot : plan.slots) {
    if (slot.index >= out.size()) throw std::invalid_argument("restore_plan: slot index out of range");
    out[slot.index] = slot.ground_truth;
  }
  return out;
}

}  // namespace poslm
