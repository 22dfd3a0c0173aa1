#pragma once

#include <map>
#include <string>
#include <vector>

#include "poslm/position_codec.hpp"

namespace poslm {

// Intersection over union; 0 when the union has zero area.
double iou(const BBox& a, const BBox& b);

// Fraction of predictions whose IoU with gold is strictly greater than 0.5.
double acc_at_05(const std::vector<BBox>& predictions, const std::vector<BBox>& golds);

// Coordinate-wise bounding rectangle (the merged-boxes protocol for phrases
// referring to several objects).
BBox merge_boxes(const std::vector<BBox>& boxes);

// A scored directed relation triplet inside one image.
struct ScoredTriplet {
  int subject_id = 0;
  int relation_id = 0;
  int object_id = 0;
  double score = 0;
};

struct GoldTriplet {
  int subject_id = 0;
  int relation_id = 0;
  int object_id = 0;
};

// Fraction of gold triplets found in the image's top-K predictions, averaged
// over images. Ties are broken by (subject, relation, object) id order.
double recall_at_k(const std::vector<std::vector<ScoredTriplet>>& predictions,
                   const std::vector<std::vector<GoldTriplet>>& golds, int k);

// Unweighted mean of per-relation-class recall@K over classes that have at
// least one gold triplet.
double mean_recall_at_k(const std::vector<std::vector<ScoredTriplet>>& predictions,
                        const std::vector<std::vector<GoldTriplet>>& golds, int k);

// Plain K-way choice accuracy over aligned index lists.
double choice_accuracy(const std::vector<int>& predicted, const std::vector<int>& gold);

// Chained two-stage accuracy: an item counts only when both stages are right.
double chained_accuracy(const std::vector<int>& predicted_first, const std::vector<int>& gold_first,
                        const std::vector<int>& predicted_second, const std::vector<int>& gold_second);

struct EvalReport {
  std::string task;
  std::vector<std::pair<std::string, double>> metrics;
  std::size_t instance_count = 0;
  std::string config_digest;

  void add(const std::string& name, double value) { metrics.emplace_back(name, value); }
  double get(const std::string& name) const;
  std::string to_json_line() const;
  static EvalReport from_json_line(const std::string& line);
  std::string to_table() const;
};

}  // namespace poslm
