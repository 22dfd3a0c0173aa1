#pragma once

#include <array>
#include <string>
#include <vector>

#include "poslm/position_codec.hpp"
#include "poslm/vocab.hpp"

namespace poslm {

enum class TaskTag { Rec, Ground, VcrQA, VcrQAR, Vrd, Vqa };

std::string task_name(TaskTag tag);
TaskTag task_from_name(const std::string& name);

// A task prompt: a token stream with MASK slots plus the decode contract.
// Box slots (REC/GROUND) decode over the position vocabulary, grouped four
// per target box; text slots (VRD/VQA/VCR answer token) decode over the text
// vocabulary.
struct PromptInstance {
  TokenStream stream;  // without CLS; the model prepends it
  TaskTag task = TaskTag::Rec;
  std::vector<std::array<std::size_t, 4>> box_groups;  // MASK positions per target box
  std::vector<std::size_t> text_slots;                 // MASK positions decoding over text
};

// Grounded-text building block: a phrase with an optional box. Boxes are
// rendered as delimiter groups after the phrase's last token.
struct PhrasePiece {
  std::vector<TokenId> tokens;
  bool grounded = false;
  BBox box;
};

// "man < [MASK] x4 > on the left": one masked delimiter group after the head
// phrase, the rest of the expression untouched (existing groups included).
PromptInstance build_rec_prompt(const std::vector<TokenId>& expression, int head_span_end,
                                const VocabSpec& vocab);

// One masked delimiter group after each phrase, in text order.
PromptInstance build_grounding_prompt(const std::vector<TokenId>& caption, const std::vector<int>& span_ends,
                                      const VocabSpec& vocab);

// Independent argmax per slot (ties to the lowest bin), then bin centers.
BBox decode_box(const std::array<std::vector<double>, 4>& slot_probs, double image_w, double image_h, int m);

// Relation set with tokenized forms padded to a shared length l; always
// contains the "no relation with" entry that stands for "no edge".
struct RelationCatalog {
  std::vector<std::string> names;
  std::vector<std::vector<TokenId>> tokens;  // unpadded
  int max_len = 0;                           // l
  int no_relation = -1;                      // index of "no relation with"

  int size() const { return static_cast<int>(names.size()); }
};

// Tokenizes each relation by whitespace against the word vocabulary. Throws
// if any relation exceeds `max_len` slots or "no relation with" is missing.
RelationCatalog build_relation_catalog(const std::vector<std::string>& relations, const WordVocab& words,
                                       int max_len);

// "The s <...> is [MASK] x l the o <...>"; relations are directed.
PromptInstance build_vrd_prompt(const PhrasePiece& subject, const PhrasePiece& object, int max_len,
                                const VocabSpec& vocab, const WordVocab& words);

// Mean log-probability of the relation's tokens over its non-padding slots:
// slot_log_probs[i] is the log-distribution over the full vocabulary at the
// i-th mask slot.
double score_relation(const std::vector<std::vector<double>>& slot_log_probs,
                      const std::vector<TokenId>& relation_tokens);

std::vector<double> score_catalog(const std::vector<std::vector<double>>& slot_log_probs,
                                  const RelationCatalog& catalog);

// Index of the best candidate; ties go to the lowest index.
int argmax_score(const std::vector<double>& scores);

// "q a answer: [MASK]". The mask decodes over {yes, no}; the caller may
// instead score the concatenation with the image-text matching head.
PromptInstance build_vcr_prompt(const std::vector<PhrasePiece>& question, const std::vector<PhrasePiece>& answer,
                                const VocabSpec& vocab, const WordVocab& words);

// "q answer: [MASK] x l" with multi-token answers scored like relations.
PromptInstance build_vqa_prompt(const std::vector<PhrasePiece>& question, int answer_len, const VocabSpec& vocab,
                                const WordVocab& words);

// Renders grounded pieces into a stream (delimiter group after each grounded
// phrase); shared by the prompt builders.
TokenStream pieces_to_stream(const std::vector<PhrasePiece>& pieces, const VocabSpec& vocab);

}  // namespace poslm
