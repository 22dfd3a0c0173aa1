#include <pybind11/numpy.h>
#include <pybind11/pybind11.h>
#include <pybind11/stl.h>

#include "poslm/config.hpp"
#include "poslm/gmlm.hpp"
#include "poslm/masking.hpp"
#include "poslm/metrics.hpp"
#include "poslm/model.hpp"
#include "poslm/pipeline.hpp"
#include "poslm/position_codec.hpp"
#include "poslm/prompts.hpp"
#include "poslm/scenes.hpp"

namespace py = pybind11;
using namespace poslm;

namespace {

py::array_t<float> scene_image(const SceneSample& s) {
  py::array_t<float> arr({s.height, s.width, s.channels});
  std::memcpy(arr.mutable_data(), s.image.data(), s.image.size() * sizeof(float));
  return arr;
}

std::vector<double> span_to_vec(py::sequence seq) {
  std::vector<double> v;
  v.reserve(static_cast<size_t>(py::len(seq)));
  for (auto item : seq) v.push_back(item.cast<double>());
  return v;
}

}  // namespace

PYBIND11_MODULE(_core, m) {
  m.doc() = "position-token language modeling core: codecs, objectives, masking, metrics, scenes";

  py::class_<BBox>(m, "BBox")
      .def(py::init([](double x0, double y0, double x1, double y1, double w, double h) {
             return BBox{x0, y0, x1, y1, w, h};
           }),
           py::arg("x_min"), py::arg("y_min"), py::arg("x_max"), py::arg("y_max"), py::arg("image_w"),
           py::arg("image_h"))
      .def_readwrite("x_min", &BBox::x_min)
      .def_readwrite("y_min", &BBox::y_min)
      .def_readwrite("x_max", &BBox::x_max)
      .def_readwrite("y_max", &BBox::y_max)
      .def_readwrite("image_w", &BBox::image_w)
      .def_readwrite("image_h", &BBox::image_h)
      .def("valid", &BBox::valid)
      .def("area", &BBox::area)
      .def("__repr__", [](const BBox& b) {
        return "BBox(" + std::to_string(b.x_min) + ", " + std::to_string(b.y_min) + ", " +
               std::to_string(b.x_max) + ", " + std::to_string(b.y_max) + ")";
      });

  py::class_<VocabSpec>(m, "VocabSpec")
      .def(py::init<int, int>(), py::arg("text_size"), py::arg("position_bins"))
      .def_readonly("text_size", &VocabSpec::text_size)
      .def_readonly("position_bins", &VocabSpec::position_bins)
      .def("total_size", &VocabSpec::total_size)
      .def("open_id", &VocabSpec::open_id)
      .def("close_id", &VocabSpec::close_id)
      .def("mask_id", &VocabSpec::mask_id)
      .def("cls_id", &VocabSpec::cls_id)
      .def("is_text", &VocabSpec::is_text)
      .def("is_position", &VocabSpec::is_position)
      .def("bin_of", &VocabSpec::bin_of)
      .def("position_id", &VocabSpec::position_id);

  // position codec
  m.def("quantize", &quantize, py::arg("coord"), py::arg("extent"), py::arg("m"));
  m.def("dequantize", &dequantize, py::arg("bin"), py::arg("extent"), py::arg("m"));
  m.def("quantize_box", &quantize_box, py::arg("box"), py::arg("m"));
  m.def("dequantize_box", &dequantize_box, py::arg("bins"), py::arg("image_w"), py::arg("image_h"), py::arg("m"));
  m.def(
      "encode_grounded",
      [](const std::vector<TokenId>& text, const std::vector<std::pair<int, BBox>>& objects,
         const VocabSpec& vocab) {
        std::vector<GroundedObject> objs;
        for (const auto& [end, box] : objects) objs.push_back({end, box});
        return encode_grounded(text, objs, vocab);
      },
      py::arg("text"), py::arg("objects"), py::arg("vocab"));
  m.def(
      "parse_grounded",
      [](const TokenStream& stream, const VocabSpec& vocab) {
        ParsedGrounding p = parse_grounded(stream, vocab);
        return py::make_tuple(p.text, p.objects);
      },
      py::arg("stream"), py::arg("vocab"));
  m.def(
      "render_stream",
      [](const TokenStream& stream, const VocabSpec& vocab) { return render_stream(stream, vocab, nullptr); },
      py::arg("stream"), py::arg("vocab"));

  // ordering-aware objective
  py::class_<SoftLabelTarget>(m, "SoftLabelTarget")
      .def_readonly("probs", &SoftLabelTarget::probs)
      .def_readonly("ground_truth_bin", &SoftLabelTarget::ground_truth_bin)
      .def_readonly("alpha", &SoftLabelTarget::alpha)
      .def("entropy", &SoftLabelTarget::entropy);
  m.def("soft_labels", &soft_labels, py::arg("p_star"), py::arg("m"), py::arg("alpha"));
  m.def("one_hot_target", &one_hot_target, py::arg("p_star"), py::arg("m"));
  m.def("softmax", [](py::sequence logits) { return softmax(span_to_vec(logits)); });
  m.def("log_softmax", [](py::sequence logits) { return log_softmax(span_to_vec(logits)); });
  m.def(
      "position_softmax",
      [](py::sequence hidden, py::sequence embeddings, int m_bins, int dim) {
        return position_softmax(span_to_vec(hidden), span_to_vec(embeddings), m_bins, dim);
      },
      py::arg("hidden"), py::arg("embeddings"), py::arg("m"), py::arg("dim"));
  m.def("position_loss",
        [](py::sequence probs, const SoftLabelTarget& t) { return position_loss(span_to_vec(probs), t); });
  m.def("position_loss_from_logits", [](py::sequence logits, const SoftLabelTarget& t) {
    return position_loss_from_logits(span_to_vec(logits), t);
  });
  m.def("text_loss", [](py::sequence probs, int gold) { return text_loss(span_to_vec(probs), gold); });
  m.def("gmlm_loss", &gmlm_loss, py::arg("position"), py::arg("text"), py::arg("lambda_"));
  py::class_<GmlmLossBreakdown>(m, "GmlmLossBreakdown")
      .def_readonly("position_loss", &GmlmLossBreakdown::position_loss)
      .def_readonly("text_loss", &GmlmLossBreakdown::text_loss)
      .def_readonly("lambda_", &GmlmLossBreakdown::lambda)
      .def_readonly("combined", &GmlmLossBreakdown::combined);
  m.def("loss_gradient_wrt_logits", [](py::sequence logits, const SoftLabelTarget& t) {
    return loss_gradient_wrt_logits(span_to_vec(logits), t);
  });

  // masking
  py::enum_<SlotAction>(m, "SlotAction")
      .value("NOT_CHOSEN", SlotAction::NotChosen)
      .value("KEEP", SlotAction::Keep)
      .value("MASK", SlotAction::Mask)
      .value("RANDOM_REPLACE", SlotAction::RandomReplace);
  py::enum_<MaskingMode>(m, "MaskingMode")
      .value("STRUCTURED", MaskingMode::Structured)
      .value("INDEPENDENT", MaskingMode::Independent);
  py::class_<MaskingConfig>(m, "MaskingConfig")
      .def(py::init<>())
      .def_readwrite("mode", &MaskingConfig::mode)
      .def_readwrite("independent_rate", &MaskingConfig::independent_rate)
      .def_readwrite("text_rate", &MaskingConfig::text_rate);
  py::class_<PlannedSlot>(m, "PlannedSlot")
      .def_readonly("index", &PlannedSlot::index)
      .def_readonly("action", &PlannedSlot::action)
      .def_readonly("ground_truth", &PlannedSlot::ground_truth)
      .def_readonly("replacement", &PlannedSlot::replacement);
  py::class_<MaskingPlan>(m, "MaskingPlan")
      .def_readonly("slots", &MaskingPlan::slots)
      .def_readonly("seed", &MaskingPlan::seed);
  m.def("plan_masking", &plan_masking, py::arg("stream"), py::arg("vocab"), py::arg("config"), py::arg("seed"));
  m.def("apply_plan", &apply_plan, py::arg("stream"), py::arg("plan"), py::arg("vocab"));
  m.def("restore_plan", &restore_plan, py::arg("corrupted"), py::arg("plan"));

  // metrics
  m.def("iou", &iou, py::arg("a"), py::arg("b"));
  m.def("acc_at_05", &acc_at_05, py::arg("predictions"), py::arg("golds"));
  m.def("merge_boxes", &merge_boxes, py::arg("boxes"));
  m.def("choice_accuracy", &choice_accuracy, py::arg("predicted"), py::arg("gold"));

  // prompts
  m.def(
      "decode_box",
      [](const std::vector<std::vector<double>>& probs, double w, double h, int m_bins) {
        if (probs.size() != 4) throw std::invalid_argument("decode_box: need 4 distributions");
        std::array<std::vector<double>, 4> arr{probs[0], probs[1], probs[2], probs[3]};
        return decode_box(arr, w, h, m_bins);
      },
      py::arg("slot_probs"), py::arg("image_w"), py::arg("image_h"), py::arg("m"));
  m.def("score_relation", &score_relation, py::arg("slot_log_probs"), py::arg("relation_tokens"));

  // scenes
  py::class_<SceneConfig>(m, "SceneConfig")
      .def(py::init<>())
      .def_readwrite("width", &SceneConfig::width)
      .def_readwrite("height", &SceneConfig::height)
      .def_readwrite("min_objects", &SceneConfig::min_objects)
      .def_readwrite("max_objects", &SceneConfig::max_objects)
      .def_readwrite("min_size", &SceneConfig::min_size)
      .def_readwrite("max_size", &SceneConfig::max_size)
      .def_readwrite("relation_prob", &SceneConfig::relation_prob)
      .def_readwrite("seed", &SceneConfig::seed)
      .def_readwrite("colors", &SceneConfig::colors)
      .def_readwrite("shapes", &SceneConfig::shapes);
  py::class_<SceneObject>(m, "SceneObject")
      .def_readonly("color", &SceneObject::color)
      .def_readonly("shape", &SceneObject::shape)
      .def_readonly("box", &SceneObject::box)
      .def_readonly("phrase_begin", &SceneObject::phrase_begin)
      .def_readonly("phrase_end", &SceneObject::phrase_end);
  py::class_<SceneSample>(m, "SceneSample")
      .def_readonly("width", &SceneSample::width)
      .def_readonly("height", &SceneSample::height)
      .def_readonly("caption", &SceneSample::caption)
      .def_readonly("objects", &SceneSample::objects)
      .def_readonly("seed", &SceneSample::seed)
      .def_property_readonly("image", &scene_image);
  m.def("generate_scene", &generate, py::arg("config"), py::arg("index"));
  m.def("hflip", &hflip, py::arg("sample"));
  m.def("audit_scene", &audit_scene, py::arg("sample"), py::arg("config"));
  m.def("corpus_word_list", [](const SceneConfig& c) { return corpus_words(c).words(); });

  // model surface: enough to poke the encoder end to end from python
  py::class_<ModelConfig>(m, "ModelConfig")
      .def(py::init<>())
      .def_readwrite("dim", &ModelConfig::dim)
      .def_readwrite("layers", &ModelConfig::layers)
      .def_readwrite("heads", &ModelConfig::heads)
      .def_readwrite("ffn_dim", &ModelConfig::ffn_dim)
      .def_readwrite("patch", &ModelConfig::patch)
      .def_readwrite("image_w", &ModelConfig::image_w)
      .def_readwrite("image_h", &ModelConfig::image_h)
      .def_readwrite("max_tokens", &ModelConfig::max_tokens)
      .def_readwrite("position_bins", &ModelConfig::position_bins)
      .def_readwrite("text_vocab", &ModelConfig::text_vocab)
      .def_readwrite("seed", &ModelConfig::seed);
  py::class_<ModelParams>(m, "ModelParams")
      .def_property_readonly("config", [](const ModelParams& p) { return p.config; })
      .def("param_count", &ModelParams::param_count);
  m.def("init_params", &init_params, py::arg("config"));
  m.def("save_checkpoint", [](const std::string& path, const ModelParams& p) {
    save_checkpoint(path, p, CheckpointMeta{});
  });
  m.def("load_checkpoint", [](const std::string& path) { return load_checkpoint(path).params; });
}
