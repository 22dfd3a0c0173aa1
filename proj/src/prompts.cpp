#include "poslm/prompts.hpp"

#include <algorithm>
#include <cmath>
#include <sstream>
#include <stdexcept>

namespace poslm {

std::string task_name(TaskTag tag) {
  switch (tag) {
    case TaskTag::Rec: return "rec";
    case TaskTag::Ground: return "ground";
    case TaskTag::VcrQA: return "vcr_qa";
    case TaskTag::VcrQAR: return "vcr_qar";
    case TaskTag::Vrd: return "vrd";
    case TaskTag::Vqa: return "vqa";
  }
  throw std::invalid_argument("task_name: unknown tag");
}

TaskTag task_from_name(const std::string& name) {
  if (name == "rec") return TaskTag::Rec;
  if (name == "ground") return TaskTag::Ground;
  if (name == "vcr" || name == "vcr_qa") return TaskTag::VcrQA;
  if (name == "vcr_qar") return TaskTag::VcrQAR;
  if (name == "vrd") return TaskTag::Vrd;
  if (name == "vqa") return TaskTag::Vqa;
  throw std::invalid_argument("unknown task '" + name + "'");
}

namespace {

std::array<std::size_t, 4> append_masked_group(TokenStream& stream, const VocabSpec& vocab) {
  stream.push_back(vocab.open_id());
  std::array<std::size_t, 4> slots{};
  for (std::size_t k = 0; k < 4; ++k) {
    slots[k] = stream.size();
    stream.push_back(vocab.mask_id());
  }
  stream.push_back(vocab.close_id());
  return slots;
}

void append_grounded_box(TokenStream& stream, const BBox& box, const VocabSpec& vocab) {
  auto bins = quantize_box(box, vocab.position_bins);
  stream.push_back(vocab.open_id());
  for (int bin : bins) stream.push_back(vocab.position_id(bin));
  stream.push_back(vocab.close_id());
}

}  // namespace

TokenStream pieces_to_stream(const std::vector<PhrasePiece>& pieces, const VocabSpec& vocab) {
  TokenStream stream;
  for (const auto& piece : pieces) {
    for (TokenId id : piece.tokens) stream.push_back(id);
    if (piece.grounded) append_grounded_box(stream, piece.box, vocab);
  }
  return stream;
}

PromptInstance build_rec_prompt(const std::vector<TokenId>& expression, int head_span_end,
                                const VocabSpec& vocab) {
  if (expression.empty()) throw std::invalid_argument("build_rec_prompt: empty expression");
  if (head_span_end < 0 || head_span_end >= static_cast<int>(expression.size()))
    throw std::invalid_argument("build_rec_prompt: head span end outside expression");

  PromptInstance out;
  out.task = TaskTag::Rec;
  for (int i = 0; i < static_cast<int>(expression.size()); ++i) {
    out.stream.push_back(expression[static_cast<size_t>(i)]);
    if (i == head_span_end) out.box_groups.push_back(append_masked_group(out.stream, vocab));
  }
  return out;
}

PromptInstance build_grounding_prompt(const std::vector<TokenId>& caption, const std::vector<int>& span_ends,
                                      const VocabSpec& vocab) {
  if (span_ends.empty()) throw std::invalid_argument("build_grounding_prompt: needs at least one phrase");
  int prev = -1;
  for (int end : span_ends) {
    if (end <= prev) throw std::invalid_argument("build_grounding_prompt: span ends must be strictly increasing");
    if (end < 0 || end >= static_cast<int>(caption.size()))
      throw std::invalid_argument("build_grounding_prompt: span end outside caption");
    prev = end;
  }

  PromptInstance out;
  out.task = TaskTag::Ground;
  std::size_t next = 0;
  for (int i = 0; i < static_cast<int>(caption.size()); ++i) {
    out.stream.push_back(caption[static_cast<size_t>(i)]);
    if (next < span_ends.size() && span_ends[next] == i) {
      out.box_groups.push_back(append_masked_group(out.stream, vocab));
      ++next;
    }
  }
  return out;
}

BBox decode_box(const std::array<std::vector<double>, 4>& slot_probs, double image_w, double image_h, int m) {
  std::array<int, 4> bins{};
  for (std::size_t k = 0; k < 4; ++k) {
    if (static_cast<int>(slot_probs[k].size()) != m)
      throw std::invalid_argument("decode_box: distribution size != m");
    int best = 0;
    for (int i = 1; i < m; ++i) {
      if (slot_probs[k][static_cast<size_t>(i)] > slot_probs[k][static_cast<size_t>(best)]) best = i;
    }
    bins[k] = best;
  }
  // Independent argmax can cross (x_max bin < x_min bin); order the pair so
  // the decoded box is always valid.
  if (bins[2] < bins[0]) std::swap(bins[0], bins[2]);
  if (bins[3] < bins[1]) std::swap(bins[1], bins[3]);
  return dequantize_box(bins, image_w, image_h, m);
}

RelationCatalog build_relation_catalog(const std::vector<std::string>& relations, const WordVocab& words,
                                       int max_len) {
  if (max_len < 1) throw std::invalid_argument("build_relation_catalog: max_len must be >= 1");
  RelationCatalog cat;
  cat.max_len = max_len;
  for (const auto& rel : relations) {
    std::istringstream is(rel);
    std::vector<TokenId> toks;
    std::string w;
    while (is >> w) toks.push_back(words.id(w));
    if (toks.empty()) throw std::invalid_argument("build_relation_catalog: empty relation");
    if (static_cast<int>(toks.size()) > max_len)
      throw std::invalid_argument("build_relation_catalog: relation '" + rel + "' longer than max_len");
    if (rel == "no relation with") cat.no_relation = cat.size();
    cat.names.push_back(rel);
    cat.tokens.push_back(std::move(toks));
  }
  if (cat.no_relation < 0)
    throw std::invalid_argument("build_relation_catalog: catalog must contain 'no relation with'");
  return cat;
}

PromptInstance build_vrd_prompt(const PhrasePiece& subject, const PhrasePiece& object, int max_len,
                                const VocabSpec& vocab, const WordVocab& words) {
  if (!subject.grounded || !object.grounded)
    throw std::invalid_argument("build_vrd_prompt: both entities must carry boxes");
  if (subject.tokens.empty() || object.tokens.empty())
    throw std::invalid_argument("build_vrd_prompt: empty entity phrase");

  PromptInstance out;
  out.task = TaskTag::Vrd;
  TokenId the = words.id("the");
  out.stream.push_back(the);
  for (TokenId id : subject.tokens) out.stream.push_back(id);
  append_grounded_box(out.stream, subject.box, vocab);
  out.stream.push_back(words.id("is"));
  for (int k = 0; k < max_len; ++k) {
    out.text_slots.push_back(out.stream.size());
    out.stream.push_back(vocab.mask_id());
  }
  out.stream.push_back(the);
  for (TokenId id : object.tokens) out.stream.push_back(id);
  append_grounded_box(out.stream, object.box, vocab);
  return out;
}

double score_relation(const std::vector<std::vector<double>>& slot_log_probs,
                      const std::vector<TokenId>& relation_tokens) {
  if (relation_tokens.empty()) throw std::invalid_argument("score_relation: empty relation");
  if (relation_tokens.size() > slot_log_probs.size())
    throw std::invalid_argument("score_relation: relation longer than the mask run");
  double sum = 0;
  for (std::size_t i = 0; i < relation_tokens.size(); ++i) {
    TokenId id = relation_tokens[i];
    if (id < 0 || id >= static_cast<int>(slot_log_probs[i].size()))
      throw std::invalid_argument("score_relation: token id outside distribution");
    sum += slot_log_probs[i][static_cast<size_t>(id)];
  }
  return sum / static_cast<double>(relation_tokens.size());
}

std::vector<double> score_catalog(const std::vector<std::vector<double>>& slot_log_probs,
                                  const RelationCatalog& catalog) {
  std::vector<double> scores;
  scores.reserve(catalog.tokens.size());
  for (const auto& rel : catalog.tokens) scores.push_back(score_relation(slot_log_probs, rel));
  return scores;
}

int argmax_score(const std::vector<double>& scores) {
  if (scores.empty()) throw std::invalid_argument("argmax_score: empty scores");
  int best = 0;
  for (int i = 1; i < static_cast<int>(scores.size()); ++i) {
    if (scores[static_cast<size_t>(i)] > scores[static_cast<size_t>(best)]) best = i;
  }
  return best;
}

PromptInstance build_vcr_prompt(const std::vector<PhrasePiece>& question, const std::vector<PhrasePiece>& answer,
                                const VocabSpec& vocab, const WordVocab& words) {
  if (question.empty() || answer.empty())
    throw std::invalid_argument("build_vcr_prompt: question and answer must be non-empty");
  PromptInstance out;
  out.task = TaskTag::VcrQA;
  out.stream = pieces_to_stream(question, vocab);
  TokenStream ans = pieces_to_stream(answer, vocab);
  out.stream.insert(out.stream.end(), ans.begin(), ans.end());
  out.stream.push_back(words.id("answer"));
  out.text_slots.push_back(out.stream.size());
  out.stream.push_back(vocab.mask_id());
  return out;
}

PromptInstance build_vqa_prompt(const std::vector<PhrasePiece>& question, int answer_len, const VocabSpec& vocab,
                                const WordVocab& words) {
  if (question.empty()) throw std::invalid_argument("build_vqa_prompt: empty question");
  if (answer_len < 1) throw std::invalid_argument("build_vqa_prompt: answer_len must be >= 1");
  PromptInstance out;
  out.task = TaskTag::Vqa;
  out.stream = pieces_to_stream(question, vocab);
  out.stream.push_back(words.id("answer"));
  for (int k = 0; k < answer_len; ++k) {
    out.text_slots.push_back(out.stream.size());
    out.stream.push_back(vocab.mask_id());
  }
  return out;
}

}  // namespace poslm
