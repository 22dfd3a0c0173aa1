#pragma once

#include <cstdint>
#include <map>
#include <string>

#include "poslm/masking.hpp"
#include "poslm/model.hpp"
#include "poslm/scenes.hpp"

namespace poslm {

struct TrainConfig {
  std::string optimizer = "adam";  // "adam" or "sgd"
  double lr = 1e-3;
  int batch = 32;
  int epochs = 4;
  double lambda = 2.0;  // position-loss weight in the combined objective
  double alpha = 0.25;  // soft-label decay rate
  bool ordering_aware = true;
  double itm_neg_rate = 0.5;
  double hflip_prob = 0.5;
  double crop_prob = 0.0;
  double crop_min_scale = 0.6;
  std::uint64_t seed = 1;

  void validate() const {
    if (optimizer != "adam" && optimizer != "sgd")
      throw std::invalid_argument("TrainConfig: optimizer must be adam or sgd");
    if (lr <= 0 || batch < 1 || epochs < 0) throw std::invalid_argument("TrainConfig: bad lr/batch/epochs");
    if (lambda <= 0 || alpha <= 0) throw std::invalid_argument("TrainConfig: lambda and alpha must be > 0");
    if (itm_neg_rate < 0 || itm_neg_rate > 1 || hflip_prob < 0 || hflip_prob > 1 || crop_prob < 0 || crop_prob > 1)
      throw std::invalid_argument("TrainConfig: rates must lie in [0,1]");
  }
};

struct TuneConfig {
  std::string optimizer = "adam";
  double lr = 1e-3;
  int batch = 32;
  int epochs = 2;
  std::string vcr_head = "itm";  // "itm" or "yesno": which pre-trained head scores VCR candidates
};

struct AblateConfig {
  int seeds = 3;
  int scene_count = 1500;
  int holdout = 300;
  int pretrain_epochs = 4;
  int tune_epochs = 2;
  double threshold = 0.6;
  std::vector<double> independent_rates = {0.2, 0.4, 0.6};
};

// Everything one experiment needs, loadable from a single sectioned
// key = value text file; flags may override individual fields.
struct ExperimentConfig {
  std::uint64_t seed = 7;
  std::string out_dir = "runs/default";
  int threads = 1;

  SceneConfig scene;
  int scene_count = 5000;
  int holdout = 500;  // last `holdout` scenes form the held-out split

  ModelConfig model;
  TrainConfig train;
  TuneConfig tune;
  MaskingConfig masking;
  AblateConfig ablate;

  void validate() const;
};

// Parse "[section]\nkey = value" text; '#' and ';' start comments.
std::map<std::string, std::string> parse_ini(const std::string& text);

ExperimentConfig config_from_ini(const std::string& text);
ExperimentConfig load_config_file(const std::string& path);

// Canonical one-line-per-field dump; the digest hashes exactly this.
std::string config_canonical(const ExperimentConfig& config);
std::string config_digest(const ExperimentConfig& config);

// FNV-1a 64-bit over a string, rendered as 16 hex chars.
std::string fnv1a_hex(const std::string& text);

}  // namespace poslm
