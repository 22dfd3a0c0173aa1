#include <doctest.h>

#include <cmath>
#include <stdexcept>

#include "poslm/prompts.hpp"
#include "poslm/rng.hpp"
#include "poslm/scenes.hpp"

using namespace poslm;

namespace {

struct Fixture {
  SceneConfig scene_config;
  WordVocab words = corpus_words(scene_config);
  VocabSpec vocab{words.size(), 16};
};

}  // namespace

TEST_CASE("build_rec_prompt") {
  Fixture f;
  // "red square left of blue circle", head = "red square"
  std::vector<TokenId> expr = f.words.encode({"red", "square", "left", "of", "blue", "circle"});
  PromptInstance p = build_rec_prompt(expr, 1, f.vocab);

  validate_stream(p.stream, f.vocab);
  REQUIRE(p.box_groups.size() == 1);
  CHECK(p.stream.size() == expr.size() + 6);
  CHECK(p.stream[2] == f.vocab.open_id());
  for (std::size_t k = 0; k < 4; ++k) CHECK(p.stream[p.box_groups[0][k]] == f.vocab.mask_id());
  CHECK(p.stream[7] == f.vocab.close_id());
  CHECK(render_stream(p.stream, f.vocab, &f.words) ==
        "red square < [MASK] [MASK] [MASK] [MASK] > left of blue circle");

  SUBCASE("existing delimiter groups elsewhere are preserved") {
    BBox box{8, 8, 24, 24, 64, 64};
    TokenStream grounded_expr = encode_grounded(expr, {{5, box}}, f.vocab);  // tail phrase grounded
    PromptInstance p2 = build_rec_prompt(grounded_expr, 1, f.vocab);
    validate_stream(p2.stream, f.vocab);
    REQUIRE(p2.stream.size() == grounded_expr.size() + 6);
    TokenStream tail(p2.stream.end() - 6, p2.stream.end());
    TokenStream orig_tail(grounded_expr.end() - 6, grounded_expr.end());
    CHECK(tail == orig_tail);  // insertion is local to the head
  }

  CHECK_THROWS_AS(build_rec_prompt({}, 0, f.vocab), std::invalid_argument);
  CHECK_THROWS_AS(build_rec_prompt(expr, 6, f.vocab), std::invalid_argument);
}

TEST_CASE("build_grounding_prompt") {
  Fixture f;
  std::vector<TokenId> caption = f.words.encode({"red", "square", "blue", "circle"});

  PromptInstance p = build_grounding_prompt(caption, {1, 3}, f.vocab);
  validate_stream(p.stream, f.vocab);
  CHECK(p.box_groups.size() == 2);
  CHECK(p.stream.size() == caption.size() + 12);

  // group order matches phrase order
  CHECK(p.box_groups[0][0] < p.box_groups[1][0]);

  // one phrase reduces to the REC shape
  PromptInstance rec_like = build_grounding_prompt(caption, {1}, f.vocab);
  PromptInstance rec = build_rec_prompt(caption, 1, f.vocab);
  CHECK(rec_like.stream == rec.stream);

  CHECK_THROWS_AS(build_grounding_prompt(caption, {}, f.vocab), std::invalid_argument);
  CHECK_THROWS_AS(build_grounding_prompt(caption, {1, 1}, f.vocab), std::invalid_argument);
  CHECK_THROWS_AS(build_grounding_prompt(caption, {3, 1}, f.vocab), std::invalid_argument);
}

TEST_CASE("decode_box") {
  SUBCASE("one-hot distributions decode through bin centers") {
    std::array<std::vector<double>, 4> probs;
    std::array<int, 4> bins{2, 5, 7, 10};
    for (std::size_t k = 0; k < 4; ++k) {
      probs[k].assign(16, 0.0);
      probs[k][static_cast<size_t>(bins[k])] = 1.0;
    }
    BBox box = decode_box(probs, 64, 64, 16);
    CHECK(box.x_min == doctest::Approx(dequantize(2, 64, 16)));
    CHECK(box.y_min == doctest::Approx(dequantize(5, 64, 16)));
    CHECK(box.x_max == doctest::Approx(dequantize(7, 64, 16)));
    CHECK(box.y_max == doctest::Approx(dequantize(10, 64, 16)));
    CHECK(box.x_min == doctest::Approx(10.0));
    CHECK(box.y_min == doctest::Approx(22.0));
    CHECK(box.x_max == doctest::Approx(30.0));
    CHECK(box.y_max == doctest::Approx(42.0));
  }

  SUBCASE("uniform ties break to bin 0") {
    std::array<std::vector<double>, 4> probs;
    for (auto& p : probs) p.assign(16, 1.0 / 16);
    BBox box = decode_box(probs, 64, 64, 16);
    CHECK(box.x_min == doctest::Approx(dequantize(0, 64, 16)));
    CHECK(box.x_max == doctest::Approx(dequantize(0, 64, 16)));
  }

  SUBCASE("invariant to monotone rescaling, always inside the image") {
    Rng rng(55);
    for (int trial = 0; trial < 100; ++trial) {
      std::array<std::vector<double>, 4> probs;
      for (auto& p : probs) {
        p.resize(16);
        for (auto& v : p) v = rng.next_double();
      }
      BBox a = decode_box(probs, 64, 48, 16);
      auto scaled = probs;
      for (auto& p : scaled)
        for (auto& v : p) v = 0.25 * v + 3.0;
      BBox b = decode_box(scaled, 64, 48, 16);
      CHECK(a.x_min == b.x_min);
      CHECK(a.y_max == b.y_max);
      CHECK(a.x_min >= 0);
      CHECK(a.x_max <= 64);
      CHECK(a.y_min >= 0);
      CHECK(a.y_max <= 48);
      CHECK(a.valid());
    }
  }
}

TEST_CASE("relation catalog") {
  Fixture f;
  RelationCatalog cat = build_relation_catalog({"left of", "right of", "above", "below", "no relation with"},
                                               f.words, 3);
  CHECK(cat.size() == 5);
  CHECK(cat.max_len == 3);
  CHECK(cat.no_relation == 4);
  CHECK(cat.tokens[0].size() == 2);
  CHECK(cat.tokens[2].size() == 1);
  CHECK(cat.tokens[4].size() == 3);

  CHECK_THROWS_AS(build_relation_catalog({"left of"}, f.words, 3), std::invalid_argument);  // missing no-relation
  CHECK_THROWS_AS(build_relation_catalog({"no relation with"}, f.words, 2), std::invalid_argument);  // too long
}

TEST_CASE("build_vrd_prompt") {
  Fixture f;
  PhrasePiece woman{f.words.encode({"red", "square"}), true, BBox{0, 0, 16, 16, 64, 64}};
  PhrasePiece horse{f.words.encode({"blue", "circle"}), true, BBox{32, 32, 48, 48, 64, 64}};

  PromptInstance p = build_vrd_prompt(woman, horse, 3, f.vocab, f.words);
  validate_stream(p.stream, f.vocab);
  REQUIRE(p.text_slots.size() == 3);
  // "the red square <...> is [MASK][MASK][MASK] the blue circle <...>"
  CHECK(p.stream[0] == f.words.id("the"));
  CHECK(p.stream[p.text_slots[0] - 1] == f.words.id("is"));
  for (std::size_t s : p.text_slots) CHECK(p.stream[s] == f.vocab.mask_id());

  // order matters: swapping the pair gives a different prompt
  PromptInstance q = build_vrd_prompt(horse, woman, 3, f.vocab, f.words);
  CHECK(p.stream != q.stream);

  PhrasePiece ungrounded{f.words.encode({"red", "square"}), false, {}};
  CHECK_THROWS_AS(build_vrd_prompt(ungrounded, horse, 3, f.vocab, f.words), std::invalid_argument);
}

TEST_CASE("score_relation") {
  Fixture f;
  int vocab_size = f.vocab.total_size();

  SUBCASE("single token") {
    std::vector<std::vector<double>> logp(1, std::vector<double>(static_cast<size_t>(vocab_size), -10));
    logp[0][static_cast<size_t>(f.words.id("above"))] = std::log(0.5);
    CHECK(score_relation(logp, {f.words.id("above")}) == doctest::Approx(-0.693147).epsilon(1e-5));
  }

  SUBCASE("two tokens average the log probabilities") {
    std::vector<std::vector<double>> logp(2, std::vector<double>(static_cast<size_t>(vocab_size), -10));
    logp[0][static_cast<size_t>(f.words.id("left"))] = std::log(0.5);
    logp[1][static_cast<size_t>(f.words.id("of"))] = std::log(0.25);
    double s = score_relation(logp, f.words.encode({"left", "of"}));
    CHECK(s == doctest::Approx((std::log(0.5) + std::log(0.25)) / 2).epsilon(1e-9));
    CHECK(s == doctest::Approx(-1.039721).epsilon(1e-5));
  }

  SUBCASE("catalog ranking matches brute-force enumeration and is permutation-equivariant") {
    RelationCatalog cat = build_relation_catalog({"left of", "right of", "above", "below", "no relation with"},
                                                 f.words, 3);
    Rng rng(31);
    for (int trial = 0; trial < 50; ++trial) {
      std::vector<std::vector<double>> logp(3, std::vector<double>(static_cast<size_t>(vocab_size)));
      for (auto& row : logp)
        for (auto& v : row) v = -5 + 4 * rng.next_double();
      auto scores = score_catalog(logp, cat);
      // brute force over entries
      for (int i = 0; i < cat.size(); ++i) {
        double s = 0;
        const auto& toks = cat.tokens[static_cast<size_t>(i)];
        for (size_t k = 0; k < toks.size(); ++k) s += logp[k][static_cast<size_t>(toks[k])];
        s /= static_cast<double>(toks.size());
        CHECK(scores[static_cast<size_t>(i)] == doctest::Approx(s).epsilon(1e-12));
      }
      // adding a constant to all slot log-probs leaves the argmax unchanged
      int best = argmax_score(scores);
      for (auto& row : logp)
        for (auto& v : row) v += 2.5;
      CHECK(argmax_score(score_catalog(logp, cat)) == best);
    }
  }
}

TEST_CASE("build_vcr_prompt") {
  Fixture f;
  std::vector<PhrasePiece> question{{f.words.encode({"which", "shape", "is", "left", "of", "the", "red",
                                                     "square"}),
                                     false,
                                     {}}};
  std::vector<PhrasePiece> answer{{f.words.encode({"the", "blue", "circle"}), true, BBox{0, 0, 16, 16, 64, 64}}};
  PromptInstance p = build_vcr_prompt(question, answer, f.vocab, f.words);
  validate_stream(p.stream, f.vocab);
  REQUIRE(p.text_slots.size() == 1);
  CHECK(p.stream.back() == f.vocab.mask_id());
  CHECK(p.stream[p.stream.size() - 2] == f.words.id("answer"));
  CHECK_THROWS_AS(build_vcr_prompt({}, answer, f.vocab, f.words), std::invalid_argument);
}

TEST_CASE("build_vqa_prompt") {
  Fixture f;
  std::vector<PhrasePiece> q{{f.words.encode({"what", "color", "is", "the"}), false, {}},
                             {f.words.encode({"square"}), true, BBox{8, 8, 24, 24, 64, 64}}};
  PromptInstance p = build_vqa_prompt(q, 2, f.vocab, f.words);
  validate_stream(p.stream, f.vocab);
  CHECK(p.text_slots.size() == 2);
  // removing the position group yields the ungrounded baseline prompt
  std::vector<PhrasePiece> q2 = q;
  q2[1].grounded = false;
  PromptInstance p2 = build_vqa_prompt(q2, 2, f.vocab, f.words);
  CHECK(p2.stream.size() + 6 == p.stream.size());
}
