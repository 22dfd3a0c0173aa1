#include "poslm/position_codec.hpp"

#include <cmath>
#include <sstream>

namespace poslm {

int quantize(double coord, double extent, int m) {
  if (m < 2) throw std::invalid_argument("quantize: m must be >= 2");
  if (extent <= 0) throw std::invalid_argument("quantize: extent must be > 0");
  if (coord < 0 || coord > extent) throw std::invalid_argument("quantize: coord out of [0, extent]");
  int bin = static_cast<int>(std::floor(static_cast<double>(m) * coord / extent));
  if (bin >= m) bin = m - 1;  // coord == extent
  return bin;
}

double dequantize(int bin, double extent, int m) {
  if (m < 2) throw std::invalid_argument("dequantize: m must be >= 2");
  if (extent <= 0) throw std::invalid_argument("dequantize: extent must be > 0");
  if (bin < 0 || bin >= m) throw std::invalid_argument("dequantize: bin out of range");
  return (static_cast<double>(bin) + 0.5) * extent / static_cast<double>(m);
}

std::array<int, 4> quantize_box(const BBox& box, int m) {
  if (!box.valid()) throw std::invalid_argument("quantize_box: invalid box");
  return {quantize(box.x_min, box.image_w, m), quantize(box.y_min, box.image_h, m),
          quantize(box.x_max, box.image_w, m), quantize(box.y_max, box.image_h, m)};
}

BBox dequantize_box(const std::array<int, 4>& bins, double image_w, double image_h, int m) {
  BBox b;
  b.image_w = image_w;
  b.image_h = image_h;
  b.x_min = dequantize(bins[0], image_w, m);
  b.y_min = dequantize(bins[1], image_h, m);
  b.x_max = dequantize(bins[2], image_w, m);
  b.y_max = dequantize(bins[3], image_h, m);
  // Quantized min/max of a degenerate box can land in the same bin; centers
  // then coincide and the box stays valid. Crossed bins cannot happen for a
  // valid input box, but guard against hand-built bin tuples.
  if (b.x_min > b.x_max || b.y_min > b.y_max)
    throw std::invalid_argument("dequantize_box: bins not coordinate-ordered");
  return b;
}

TokenStream encode_grounded(const std::vector<TokenId>& text, const std::vector<GroundedObject>& objects,
                            const VocabSpec& vocab) {
  int prev_end = -1;
  for (const auto& obj : objects) {
    if (obj.span_end <= prev_end)
      throw std::invalid_argument("encode_grounded: span ends must be strictly increasing");
    if (obj.span_end < 0 || obj.span_end >= static_cast<int>(text.size()))
      throw std::invalid_argument("encode_grounded: span end outside text");
    prev_end = obj.span_end;
  }
  for (TokenId id : text) {
    if (!vocab.is_text(id)) throw std::invalid_argument("encode_grounded: non-text token in text input");
  }

  TokenStream out;
  out.reserve(text.size() + objects.size() * 6);
  size_t next_obj = 0;
  for (int i = 0; i < static_cast<int>(text.size()); ++i) {
    out.push_back(text[static_cast<size_t>(i)]);
    if (next_obj < objects.size() && objects[next_obj].span_end == i) {
      auto bins = quantize_box(objects[next_obj].box, vocab.position_bins);
      out.push_back(vocab.open_id());
      for (int bin : bins) out.push_back(vocab.position_id(bin));
      out.push_back(vocab.close_id());
      ++next_obj;
    }
  }
  return out;
}

void validate_stream(const TokenStream& stream, const VocabSpec& vocab) {
  for (size_t i = 0; i < stream.size(); ++i) {
    TokenId id = stream[i];
    if (id < 0 || id >= vocab.total_size()) throw ParseError("token id out of vocabulary", i);
    if (id == vocab.close_id()) throw ParseError("CLOSE without matching OPEN", i);
    if (vocab.is_position(id)) throw ParseError("position token outside delimiter group", i);
    if (id != vocab.open_id()) continue;
    for (size_t j = i + 1; j <= i + 4; ++j) {
      if (j >= stream.size()) throw ParseError("truncated delimiter group", i);
      if (!vocab.is_position(stream[j]) && stream[j] != vocab.mask_id())
        throw ParseError("delimiter group expects four position-or-MASK tokens", j);
    }
    if (i + 5 >= stream.size()) throw ParseError("delimiter group missing CLOSE", i);
    if (stream[i + 5] != vocab.close_id()) throw ParseError("delimiter group missing CLOSE", i + 5);
    i += 5;
  }
}

ParsedGrounding parse_grounded(const TokenStream& stream, const VocabSpec& vocab) {
  validate_stream(stream, vocab);
  ParsedGrounding out;
  for (size_t i = 0; i < stream.size(); ++i) {
    TokenId id = stream[i];
    if (id == vocab.open_id()) {
      if (out.text.empty()) throw ParseError("delimiter group precedes any text token", i);
      std::array<int, 4> bins{};
      for (size_t k = 0; k < 4; ++k) {
        TokenId p = stream[i + 1 + k];
        if (p == vocab.mask_id()) throw ParseError("MASK inside group; stream is not fully grounded", i + 1 + k);
        bins[k] = vocab.bin_of(p);
      }
      out.objects.emplace_back(static_cast<int>(out.text.size()) - 1, bins);
      i += 5;
    } else if (vocab.is_text(id)) {
      out.text.push_back(id);
    } else if (id == vocab.mask_id()) {
      throw ParseError("MASK outside delimiter group; stream is not fully grounded", i);
    } else if (id == vocab.cls_id()) {
      throw ParseError("CLS token inside grounded text", i);
    }
  }
  return out;
}

std::string render_stream(const TokenStream& stream, const VocabSpec& vocab, const WordVocab* words) {
  std::ostringstream os;
  bool first = true;
  for (TokenId id : stream) {
    if (!first) os << ' ';
    first = false;
    if (vocab.is_text(id)) {
      if (words != nullptr && id < words->size())
        os << words->word(id);
      else
        os << 't' << id;
    } else if (vocab.is_position(id)) {
      os << vocab.bin_of(id);
    } else if (id == vocab.open_id()) {
      os << '<';
    } else if (id == vocab.close_id()) {
      os << '>';
    } else if (id == vocab.mask_id()) {
      os << "[MASK]";
    } else if (id == vocab.cls_id()) {
      os << "[CLS]";
    } else {
      os << '?' << id;
    }
  }
  return os.str();
}

std::string stream_to_line(const TokenStream& stream) {
  std::ostringstream os;
  for (size_t i = 0; i < stream.size(); ++i) {
    if (i) os << ' ';
    os << stream[i];
  }
  return os.str();
}

TokenStream stream_from_line(const std::string& line) {
  TokenStream out;
  std::istringstream is(line);
  long long id;
  while (is >> id) out.push_back(static_cast<TokenId>(id));
  if (!is.eof()) throw std::invalid_argument("stream_from_line: non-integer token id");
  return out;
}

}  // namespace poslm
