#pragma once

#include <array>
#include <cstddef>
#include <stdexcept>
#include <string>
#include <utility>
#include <vector>

#include "poslm/vocab.hpp"

namespace poslm {

// Axis-aligned box in continuous pixel coordinates, carrying the extent of
// the image it lives in.
struct BBox {
  double x_min = 0, y_min = 0, x_max = 0, y_max = 0;
  double image_w = 0, image_h = 0;

  bool valid() const {
    return image_w > 0 && image_h > 0 && 0 <= x_min && x_min <= x_max && x_max <= image_w &&
           0 <= y_min && y_min <= y_max && y_max <= image_h;
  }
  double width() const { return x_max - x_min; }
  double height() const { return y_max - y_min; }
  double area() const { return width() * height(); }
  double x_center() const { return 0.5 * (x_min + x_max); }
  double y_center() const { return 0.5 * (y_min + y_max); }
};

struct ParseError : std::runtime_error {
  ParseError(const std::string& what, size_t at) : std::runtime_error(what), index(at) {}
  size_t index;
};

// Maps a coordinate to its discrete bin floor(m * coord / extent). The right
// image border coord == extent would land on bin m, so it is clamped to m-1;
// every valid pixel stays in-vocabulary.
int quantize(double coord, double extent, int m);

// Bin center (bin + 0.5) * extent / m; inverse of quantize up to half a bin.
double dequantize(int bin, double extent, int m);

// (x_min, y_min, x_max, y_max) bins; x against image_w, y against image_h.
std::array<int, 4> quantize_box(const BBox& box, int m);

// Box through bin centers; always lies inside the image rectangle.
BBox dequantize_box(const std::array<int, 4>& bins, double image_w, double image_h, int m);

// An object mention in a token sequence: the index of the last token of its
// phrase, and its box.
struct GroundedObject {
  int span_end = 0;  // index into the text token sequence
  BBox box;
};

struct ParsedGrounding {
  std::vector<TokenId> text;
  std::vector<std::pair<int, std::array<int, 4>>> objects;  // (span_end, bins)
};

// Inserts OPEN p1 p2 p3 p4 CLOSE after each object's final phrase token.
// Span ends must be strictly increasing and within the text.
TokenStream encode_grounded(const std::vector<TokenId>& text, const std::vector<GroundedObject>& objects,
                            const VocabSpec& vocab);

// Exact inverse of encode_grounded for well-formed streams without MASK.
// Throws ParseError naming the offending stream index otherwise.
ParsedGrounding parse_grounded(const TokenStream& stream, const VocabSpec& vocab);

// Checks the delimiter-group invariant: every OPEN is followed by exactly
// four position-or-MASK tokens and a CLOSE, with no nesting. Throws
// ParseError on violation.
void validate_stream(const TokenStream& stream, const VocabSpec& vocab);

// "the red square < 2 5 7 10 >" style rendering for CLI/debug output. If a
// word vocabulary is given, text ids are printed as words.
std::string render_stream(const TokenStream& stream, const VocabSpec& vocab, const WordVocab* words = nullptr);

// Line record: space-separated token ids.
std::string stream_to_line(const TokenStream& stream);
TokenStream stream_from_line(const std::string& line);

}  // namespace poslm
