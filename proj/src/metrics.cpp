#include "poslm/metrics.hpp"

#include <algorithm>
#include <iomanip>
#include <set>
#include <sstream>
#include <stdexcept>

#include <json.hpp>

namespace poslm {

double iou(const BBox& a, const BBox& b) {
  double ix = std::max(0.0, std::min(a.x_max, b.x_max) - std::max(a.x_min, b.x_min));
  double iy = std::max(0.0, std::min(a.y_max, b.y_max) - std::max(a.y_min, b.y_min));
  double inter = ix * iy;
  double uni = a.area() + b.area() - inter;
  if (uni <= 0) return 0.0;
  return inter / uni;
}

double acc_at_05(const std::vector<BBox>& predictions, const std::vector<BBox>& golds) {
  if (predictions.size() != golds.size()) throw std::invalid_argument("acc_at_05: length mismatch");
  if (predictions.empty()) throw std::invalid_argument("acc_at_05: empty input");
  std::size_t hits = 0;
  for (std::size_t i = 0; i < predictions.size(); ++i) {
    if (iou(predictions[i], golds[i]) > 0.5) ++hits;  // strictly greater
  }
  return static_cast<double>(hits) / static_cast<double>(predictions.size());
}

BBox merge_boxes(const std::vector<BBox>& boxes) {
  if (boxes.empty()) throw std::invalid_argument("merge_boxes: empty input");
  BBox out = boxes.front();
  for (const BBox& b : boxes) {
    out.x_min = std::min(out.x_min, b.x_min);
    out.y_min = std::min(out.y_min, b.y_min);
    out.x_max = std::max(out.x_max, b.x_max);
    out.y_max = std::max(out.y_max, b.y_max);
  }
  return out;
}

namespace {

std::vector<ScoredTriplet> top_k(std::vector<ScoredTriplet> preds, int k) {
  std::stable_sort(preds.begin(), preds.end(), [](const ScoredTriplet& a, const ScoredTriplet& b) {
    if (a.score != b.score) return a.score > b.score;
    return std::tie(a.subject_id, a.relation_id, a.object_id) <
           std::tie(b.subject_id, b.relation_id, b.object_id);
  });
  if (static_cast<int>(preds.size()) > k) preds.resize(static_cast<std::size_t>(k));
  return preds;
}

}  // namespace

double recall_at_k(const std::vector<std::vector<ScoredTriplet>>& predictions,
                   const std::vector<std::vector<GoldTriplet>>& golds, int k) {
  if (predictions.size() != golds.size()) throw std::invalid_argument("recall_at_k: image count mismatch");
  if (k <= 0) throw std::invalid_argument("recall_at_k: k must be positive");
  double sum = 0;
  std::size_t images = 0;
  for (std::size_t img = 0; img < golds.size(); ++img) {
    if (golds[img].empty()) continue;
    auto top = top_k(predictions[img], k);
    std::set<std::tuple<int, int, int>> found;
    for (const auto& t : top) found.insert({t.subject_id, t.relation_id, t.object_id});
    std::size_t hit = 0;
    for (const auto& g : golds[img]) {
      if (found.count({g.subject_id, g.relation_id, g.object_id})) ++hit;
    }
    sum += static_cast<double>(hit) / static_cast<double>(golds[img].size());
    ++images;
  }
  if (images == 0) throw std::invalid_argument("recall_at_k: no image carries gold triplets");
  return sum / static_cast<double>(images);
}

double mean_recall_at_k(const std::vector<std::vector<ScoredTriplet>>& predictions,
                        const std::vector<std::vector<GoldTriplet>>& golds, int k) {
  if (predictions.size() != golds.size()) throw std::invalid_argument("mean_recall_at_k: image count mismatch");
  if (k <= 0) throw std::invalid_argument("mean_recall_at_k: k must be positive");
  // Per-class tallies pooled over images of gold hits within each image's top-K.
  std::map<int, std::pair<std::size_t, std::size_t>> per_class;  // relation -> (hits, golds)
  for (std::size_t img = 0; img < golds.size(); ++img) {
    if (golds[img].empty()) continue;
    auto top = top_k(predictions[img], k);
    std::set<std::tuple<int, int, int>> found;
    for (const auto& t : top) found.insert({t.subject_id, t.relation_id, t.object_id});
    for (const auto& g : golds[img]) {
      auto& tally = per_class[g.relation_id];
      ++tally.second;
      if (found.count({g.subject_id, g.relation_id, g.object_id})) ++tally.first;
    }
  }
  if (per_class.empty()) throw std::invalid_argument("mean_recall_at_k: no gold triplets");
  double sum = 0;
  for (const auto& [rel, tally] : per_class)
    sum += static_cast<double>(tally.first) / static_cast<double>(tally.second);
  return sum / static_cast<double>(per_class.size());
}

double choice_accuracy(const std::vector<int>& predicted, const std::vector<int>& gold) {
  if (predicted.size() != gold.size()) throw std::invalid_argument("choice_accuracy: length mismatch");
  if (predicted.empty()) throw std::invalid_argument("choice_accuracy: empty input");
  std::size_t hits = 0;
  for (std::size_t i = 0; i < predicted.size(); ++i) {
    if (predicted[i] == gold[i]) ++hits;
  }
  return static_cast<double>(hits) / static_cast<double>(predicted.size());
}

double chained_accuracy(const std::vector<int>& predicted_first, const std::vector<int>& gold_first,
                        const std::vector<int>& predicted_second, const std::vector<int>& gold_second) {
  if (predicted_first.size() != gold_first.size() || predicted_second.size() != gold_second.size() ||
      predicted_first.size() != predicted_second.size())
    throw std::invalid_argument("chained_accuracy: length mismatch");
  if (predicted_first.empty()) throw std::invalid_argument("chained_accuracy: empty input");
  std::size_t hits = 0;
  for (std::size_t i = 0; i < predicted_first.size(); ++i) {
    if (predicted_first[i] == gold_first[i] && predicted_second[i] == gold_second[i]) ++hits;
  }
  return static_cast<double>(hits) / static_cast<double>(predicted_first.size());
}

double EvalReport::get(const std::string& name) const {
  for (const auto& [k, v] : metrics) {
    if (k == name) return v;
  }
  throw std::invalid_argument("EvalReport: no metric named '" + name + "'");
}

std::string EvalReport::to_json_line() const {
  nlohmann::json j;
  j["task"] = task;
  j["instances"] = instance_count;
  j["config_digest"] = config_digest;
  nlohmann::json m = nlohmann::json::array();
  for (const auto& [k, v] : metrics) m.push_back({{"name", k}, {"value", v}});
  j["metrics"] = m;
  return j.dump();
}

EvalReport EvalReport::from_json_line(const std::string& line) {
  nlohmann::json j = nlohmann::json::parse(line);
  EvalReport r;
  r.task = j.at("task").get<std::string>();
  r.instance_count = j.at("instances").get<std::size_t>();
  r.config_digest = j.at("config_digest").get<std::string>();
  for (const auto& m : j.at("metrics"))
    r.metrics.emplace_back(m.at("name").get<std::string>(), m.at("value").get<double>());
  return r;
}

std::string EvalReport::to_table() const {
  std::ostringstream os;
  os << "task: " << task << "  instances: " << instance_count << "  config: " << config_digest << "\n";
  std::size_t width = 6;
  for (const auto& [k, v] : metrics) width = std::max(width, k.size());
  for (const auto& [k, v] : metrics) {
    os << "  " << std::left << std::setw(static_cast<int>(width)) << k << "  " << std::fixed
       << std::setprecision(6) << v << "\n";
  }
  return os.str();
}

}  // namespace poslm
