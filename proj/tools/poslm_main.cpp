// poslm: synthetic grounded-scene pipeline around position-token language
// modeling. Subcommands: gen-data, pretrain, tune, eval, ablate, encode,
// report. Exit codes: 0 success, 1 usage error, 2 runtime error.

#include <cstdlib>
#include <filesystem>
#include <fstream>
#include <iostream>

#include <CLI11.hpp>
#include <json.hpp>

#include "poslm/config.hpp"
#include "poslm/pipeline.hpp"

namespace fs = std::filesystem;
using namespace poslm;

namespace {

// Relative paths land under $POSLM_OUT_ROOT when it is set.
std::string rooted(const std::string& path) {
  const char* root = std::getenv("POSLM_OUT_ROOT");
  if (root == nullptr || path.empty() || fs::path(path).is_absolute()) return path;
  return (fs::path(root) / path).string();
}

void write_lines(const std::string& path, const std::vector<std::string>& lines) {
  fs::path p(path);
  if (p.has_parent_path()) fs::create_directories(p.parent_path());
  std::ofstream out(p);
  if (!out) throw std::runtime_error("cannot write " + path);
  for (const auto& line : lines) out << line << "\n";
}

std::vector<std::string> read_lines(const std::string& path) {
  std::ifstream in(path);
  if (!in) throw std::runtime_error("cannot read " + path);
  std::vector<std::string> lines;
  std::string line;
  while (std::getline(in, line)) {
    if (!line.empty()) lines.push_back(line);
  }
  return lines;
}

Corpus load_corpus(const std::string& data_dir, const ExperimentConfig& cfg) {
  Dataset ds = load_dataset(rooted(data_dir));
  return Corpus::from_dataset(std::move(ds), cfg.model.position_bins);
}

LogSink stdout_log() {
  return [](const std::string& line) { std::cout << line << "\n"; };
}

int cmd_gen_data(const ExperimentConfig& cfg, const std::string& out_dir) {
  std::string digest = config_digest(cfg);
  std::vector<SceneSample> scenes;
  scenes.reserve(static_cast<size_t>(cfg.scene_count));
  for (int i = 0; i < cfg.scene_count; ++i) {
    scenes.push_back(generate(cfg.scene, static_cast<std::uint64_t>(i)));
    audit_scene(scenes.back(), cfg.scene);
  }
  std::string dir = rooted(out_dir);
  save_dataset(dir, cfg.scene, scenes, digest);
  std::cout << "wrote " << scenes.size() << " scenes to " << dir << " (config " << digest << ")\n";
  return 0;
}

int cmd_pretrain(const ExperimentConfig& cfg, const std::string& data_dir, const std::string& out_path,
                 const std::string& resume, const std::string& log_path) {
  Corpus corpus = load_corpus(data_dir, cfg);
  ModelParams params = init_params(cfg.model);
  Optimizer optimizer;
  optimizer.kind = cfg.train.optimizer;
  optimizer.lr = cfg.train.lr;
  int start_epoch = 0;
  if (!resume.empty()) {
    Checkpoint ck = load_checkpoint(rooted(resume));
    params = std::move(ck.params);
    start_epoch = ck.meta.epochs_done;
    if (ck.has_optimizer && cfg.train.optimizer == "adam") optimizer.adam = std::move(ck.optimizer.adam);
  }

  std::ofstream log_file;
  if (!log_path.empty()) {
    log_file.open(rooted(log_path), start_epoch > 0 ? std::ios::app : std::ios::out);
    if (!log_file) throw std::runtime_error("cannot write " + log_path);
  }
  LogSink sink = [&](const std::string& line) {
    std::cout << line << "\n";
    if (log_file.is_open()) log_file << line << "\n";
  };

  int remaining = cfg.train.epochs - start_epoch;
  if (remaining <= 0) throw std::runtime_error("checkpoint already covers the configured epochs");
  pretrain(params, corpus, cfg, start_epoch, remaining, sink, &optimizer);

  CheckpointMeta meta;
  meta.epochs_done = cfg.train.epochs;
  meta.train_seed = cfg.train.seed;
  meta.config_digest = config_digest(cfg);
  meta.note = "pretrain";
  std::string out = rooted(out_path);
  if (fs::path(out).has_parent_path()) fs::create_directories(fs::path(out).parent_path());
  save_checkpoint(out, params, meta, &optimizer);
  std::cout << "checkpoint " << out << " (" << params.param_count() << " parameters)\n";
  return 0;
}

int cmd_tune(const ExperimentConfig& cfg, const std::string& data_dir, const std::string& task_str,
             const std::string& in_path, const std::string& out_path) {
  TaskTag task = task_from_name(task_str);
  Corpus corpus = load_corpus(data_dir, cfg);
  Checkpoint ck = load_checkpoint(rooted(in_path));
  std::size_t before = ck.params.param_count();
  prompt_tune(ck.params, corpus, cfg, task, stdout_log());
  std::size_t after = ck.params.param_count();
  if (before != after) throw std::runtime_error("parameter count changed during tuning");

  ck.meta.note = "tuned:" + task_str;
  ck.meta.config_digest = config_digest(cfg);
  std::string out = rooted(out_path);
  if (fs::path(out).has_parent_path()) fs::create_directories(fs::path(out).parent_path());
  save_checkpoint(out, ck.params, ck.meta);
  std::cout << "checkpoint " << out << " (" << after << " parameters, unchanged count)\n";
  return 0;
}

int cmd_eval(const ExperimentConfig& cfg, const std::string& data_dir, const std::string& task_str,
             const std::string& split, const std::string& ckpt_path, const std::string& report_path,
             const std::string& dump_path) {
  TaskTag task = task_from_name(task_str);
  Corpus corpus = load_corpus(data_dir, cfg);
  Checkpoint ck = load_checkpoint(rooted(ckpt_path));

  std::vector<std::size_t> indices;
  if (split == "val")
    indices = eval_indices(corpus.size(), static_cast<std::size_t>(cfg.holdout));
  else if (split == "train")
    indices = train_indices(corpus.size(), static_cast<std::size_t>(cfg.holdout));
  else
    throw CLI::ValidationError("--split must be train or val");

  auto lines = eval_dump(ck.params, corpus, cfg, task, indices);
  if (!dump_path.empty()) write_lines(rooted(dump_path), lines);
  EvalReport report = report_from_dump(task, lines, config_digest(cfg));
  if (!report_path.empty()) write_lines(rooted(report_path), {report.to_json_line()});
  std::cout << report.to_table();
  return 0;
}

int cmd_ablate(const ExperimentConfig& cfg, const std::string& out_path) {
  AblationTable table = run_ablation(cfg, stdout_log());
  std::cout << table.to_text();
  if (!out_path.empty()) write_lines(rooted(out_path), {table.to_json()});
  return 0;
}

int cmd_encode(const std::string& caption, const std::vector<std::string>& object_specs, int bins) {
  SceneConfig sc;
  WordVocab words = corpus_words(sc);
  VocabSpec vocab(words.size(), bins);

  std::vector<TokenId> text;
  {
    std::istringstream is(caption);
    std::string w;
    while (is >> w) text.push_back(words.id(w));
  }
  std::vector<GroundedObject> objects;
  for (const auto& spec : object_specs) {
    // span_end:x_min,y_min,x_max,y_max[@WxH]
    GroundedObject obj;
    double w = 64, h = 64;
    std::string body = spec;
    auto at = body.find('@');
    if (at != std::string::npos) {
      std::string dims = body.substr(at + 1);
      body = body.substr(0, at);
      if (std::sscanf(dims.c_str(), "%lfx%lf", &w, &h) != 2)
        throw CLI::ValidationError("bad --object image size, expected @WxH");
    }
    double x0, y0, x1, y1;
    int end;
    if (std::sscanf(body.c_str(), "%d:%lf,%lf,%lf,%lf", &end, &x0, &y0, &x1, &y1) != 5)
      throw CLI::ValidationError("bad --object, expected END:x0,y0,x1,y1[@WxH]");
    obj.span_end = end;
    obj.box = BBox{x0, y0, x1, y1, w, h};
    objects.push_back(obj);
  }

  TokenStream stream = encode_grounded(text, objects, vocab);
  std::cout << "ids:      " << stream_to_line(stream) << "\n";
  std::cout << "rendered: " << render_stream(stream, vocab, &words) << "\n";

  ParsedGrounding parsed = parse_grounded(stream, vocab);
  std::cout << "parsed:   " << parsed.objects.size() << " objects";
  for (const auto& [end, bin_arr] : parsed.objects) {
    BBox box = dequantize_box(bin_arr, objects.empty() ? 64 : objects[0].box.image_w,
                              objects.empty() ? 64 : objects[0].box.image_h, bins);
    std::cout << "  [end=" << end << " bins=" << bin_arr[0] << "," << bin_arr[1] << "," << bin_arr[2] << ","
              << bin_arr[3] << " box=(" << box.x_min << "," << box.y_min << "," << box.x_max << "," << box.y_max
              << ")]";
  }
  std::cout << "\n";
  if (parsed.text != text) throw std::runtime_error("round trip failed: text mismatch");
  std::cout << "round trip ok\n";
  return 0;
}

int cmd_report(const std::string& report_path) {
  for (const auto& line : read_lines(rooted(report_path))) {
    EvalReport report = EvalReport::from_json_line(line);
    std::cout << report.to_table();
  }
  return 0;
}

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"position-token language modeling on synthetic grounded scenes"};
  app.require_subcommand(1);

  std::string config_path, data_dir = "data", out_path, ckpt_path, resume_path, log_path;
  std::string task_str = "rec", split = "val", dump_path, report_path, caption;
  std::vector<std::string> object_specs;
  int threads_override = 0, count_override = 0, bins = 16;
  std::uint64_t seed_override = 0;
  bool has_seed = false;

  auto add_config = [&](CLI::App* cmd, bool required = true) {
    auto* opt = cmd->add_option("--config", config_path, "experiment config file");
    if (required) opt->required();
    cmd->add_option("--threads", threads_override, "worker threads (overrides config)");
    cmd->add_option("--seed", seed_override, "root seed (overrides config)")->each([&](std::string) {
      has_seed = true;
    });
  };

  auto* gen = app.add_subcommand("gen-data", "generate the synthetic scene dataset");
  add_config(gen);
  gen->add_option("--out", data_dir, "dataset directory")->required();
  gen->add_option("--count", count_override, "override scene count");

  auto* pre = app.add_subcommand("pretrain", "GMLM + ITM pre-training");
  add_config(pre);
  pre->add_option("--data", data_dir, "dataset directory")->required();
  pre->add_option("--out", out_path, "output checkpoint")->required();
  pre->add_option("--resume", resume_path, "checkpoint to continue from");
  pre->add_option("--log", log_path, "epoch log file (json lines)");

  auto* tune = app.add_subcommand("tune", "prompt-tune a pretrained checkpoint on a task");
  add_config(tune);
  tune->add_option("--data", data_dir, "dataset directory")->required();
  tune->add_option("--task", task_str, "rec|ground|vcr|vrd|vqa")->required();
  tune->add_option("--checkpoint", ckpt_path, "input checkpoint")->required();
  tune->add_option("--out", out_path, "output checkpoint")->required();

  auto* ev = app.add_subcommand("eval", "evaluate a checkpoint on a task split");
  add_config(ev);
  ev->add_option("--data", data_dir, "dataset directory")->required();
  ev->add_option("--task", task_str, "rec|ground|vcr|vrd|vqa")->required();
  ev->add_option("--split", split, "train|val");
  ev->add_option("--checkpoint", ckpt_path, "checkpoint to evaluate")->required();
  ev->add_option("--report", report_path, "report output (json lines)");
  ev->add_option("--dump", dump_path, "per-instance prediction dump (json lines)");

  auto* ab = app.add_subcommand("ablate", "run the objective/masking ablation grid");
  add_config(ab);
  ab->add_option("--out", out_path, "table output (json)");

  auto* enc = app.add_subcommand("encode", "debug codec round trip for grounded text");
  enc->add_option("--caption", caption, "space-separated caption words")->required();
  enc->add_option("--object", object_specs, "grounded object as END:x0,y0,x1,y1[@WxH]");
  enc->add_option("--bins", bins, "position bins (M)");

  auto* rep = app.add_subcommand("report", "pretty-print a report file");
  rep->add_option("--report", report_path, "report file (json lines)")->required();

  try {
    app.parse(argc, argv);
  } catch (const CLI::ParseError& e) {
    int code = app.exit(e);
    return code == 0 ? 0 : 1;
  }

  try {
    ExperimentConfig cfg;
    if (!config_path.empty()) cfg = load_config_file(config_path);
    if (threads_override > 0) cfg.threads = threads_override;
    if (has_seed) {
      std::string text = "seed_override";
      cfg.seed = seed_override;
      cfg.model.seed = derive_seed(cfg.seed, 1);
      cfg.train.seed = derive_seed(cfg.seed, 2);
      cfg.scene.seed = derive_seed(cfg.seed, 3);
    }
    if (count_override > 0) {
      cfg.scene_count = count_override;
      if (cfg.holdout >= cfg.scene_count) cfg.holdout = cfg.scene_count / 10;
    }

    if (gen->parsed()) return cmd_gen_data(cfg, data_dir);
    if (pre->parsed()) return cmd_pretrain(cfg, data_dir, out_path, resume_path, log_path);
    if (tune->parsed()) return cmd_tune(cfg, data_dir, task_str, ckpt_path, out_path);
    if (ev->parsed()) return cmd_eval(cfg, data_dir, task_str, split, ckpt_path, report_path, dump_path);
    if (ab->parsed()) return cmd_ablate(cfg, out_path);
    if (enc->parsed()) return cmd_encode(caption, object_specs, bins);
    if (rep->parsed()) return cmd_report(report_path);
  } catch (const CLI::ValidationError& e) {
    std::cerr << "usage error: " << e.what() << "\n";
    return 1;
  } catch (const std::invalid_argument& e) {
    std::cerr << "usage error: " << e.what() << "\n";
    return 1;
  } catch (const std::exception& e) {
    std::cerr << "error: " << e.what() << "\n";
    return 2;
  }
  return 1;
}
