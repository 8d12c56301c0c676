#include <sstream>

#include <pybind11/eigen.h>
#include <pybind11/pybind11.h>
#include <pybind11/stl.h>
#include <pybind11/stl/filesystem.h>

#include "alignforge/common.hpp"
#include "alignforge/corpus.hpp"
#include "alignforge/eval.hpp"
#include "alignforge/objectives.hpp"
#include "alignforge/pipeline.hpp"
#include "alignforge/tinylm.hpp"
#include "alignforge/trainer.hpp"

namespace py = pybind11;
namespace af = alignforge;
namespace tl = alignforge::tinylm;
namespace ev = alignforge::eval;

namespace {

py::dict dialogue_dict(const af::corpus::Dialogue& d) {
  py::dict out;
  out["id"] = d.id;
  out["patient_query"] = d.patient_query;
  out["doctor_response"] = d.doctor_response;
  out["split"] = std::string(af::corpus::to_string(d.split));
  out["source"] = d.source;
  return out;
}

py::dict scores_dict(const ev::EmotionScores& s) {
  py::dict out;
  out["empathetic"] = s.empathetic;
  out["comforting"] = s.comforting;
  out["reassuring"] = s.reassuring;
  out["mean"] = s.mean;
  out["max"] = s.max;
  out["parse_failure"] = s.parse_failure;
  return out;
}

// Model output is raw bytes; invalid UTF-8 becomes U+FFFD.
py::str lenient_str(const std::string& bytes) {
  PyObject* obj = PyUnicode_DecodeUTF8(bytes.data(), static_cast<Py_ssize_t>(bytes.size()), "replace");
  if (!obj) throw py::error_already_set();
  return py::reinterpret_steal<py::str>(obj);
}

// Runs a pipeline command and returns (exit code, stdout text, stderr text).
template <typename Fn>
py::tuple run_captured(Fn fn) {
  std::ostringstream out, err;
  int rc;
  {
    py::gil_scoped_release release;
    rc = af::pipeline::run_command([&] { return fn(out, err); }, err);
  }
  return py::make_tuple(rc, out.str(), err.str());
}

}  // namespace

PYBIND11_MODULE(_core, m) {
  m.doc() = "Native core of alignforge";

  py::register_exception<af::DataError>(m, "DataError", PyExc_RuntimeError);
  py::register_exception<af::CheckpointError>(m, "CheckpointError", PyExc_RuntimeError);
  py::register_exception<af::chat::AuthError>(m, "AuthError", PyExc_PermissionError);

  // Metrics
  m.def("tokenize", &ev::tokenize, py::arg("text"));
  m.def("rouge_n", py::overload_cast<std::string_view, std::string_view, int>(&ev::rouge_n),
        py::arg("candidate"), py::arg("reference"), py::arg("n"));
  m.def("rouge_l", py::overload_cast<std::string_view, std::string_view>(&ev::rouge_l),
        py::arg("candidate"), py::arg("reference"));
  m.def(
      "bleu",
      [](const std::vector<std::string>& c, const std::vector<std::string>& r, int max_n) {
        return ev::bleu(std::span<const std::string>(c), std::span<const std::string>(r), max_n);
      },
      py::arg("candidates"), py::arg("references"), py::arg("max_n") = 4);
  m.def(
      "bleu1",
      [](const std::vector<std::string>& c, const std::vector<std::string>& r) {
        return ev::bleu1(std::span<const std::string>(c), std::span<const std::string>(r));
      },
      py::arg("candidates"), py::arg("references"));
  m.def(
      "mock_judge_intensity",
      [](const std::string& response) {
        ev::MockJudgeClient judge;
        return scores_dict(ev::judge_intensity(judge, response));
      },
      py::arg("response"));

  // Scalar loss forms
  m.def("sigmoid", &af::objectives::sigmoid, py::arg("x"));
  m.def("log_sigmoid", &af::objectives::log_sigmoid, py::arg("x"));
  m.def("dpo_pair_loss", &af::objectives::dpo_pair_loss, py::arg("chosen_logratio"),
        py::arg("rejected_logratio"), py::arg("beta") = 0.1);
  m.def(
      "kto_value",
      [](double reward, double z0, bool desirable, double beta, double lambda_d, double lambda_u) {
        return af::objectives::kto_value(reward, z0, desirable, {beta, lambda_d, lambda_u});
      },
      py::arg("reward"), py::arg("z0"), py::arg("desirable"), py::arg("beta") = 0.1,
      py::arg("lambda_d") = 1.0, py::arg("lambda_u") = 1.0);

  // Tokenizer
  m.def("encode", &tl::encode, py::arg("text"));
  m.def(
      "decode", [](const tl::Tokens& t, int vocab) { return lenient_str(tl::decode(t, vocab)); }, py::arg("tokens"),
      py::arg("vocab_size") = tl::kDefaultVocab);

  // Model
  py::class_<tl::LMConfig>(m, "LMConfig")
      .def(py::init<>())
      .def_readwrite("n_layers", &tl::LMConfig::n_layers)
      .def_readwrite("n_heads", &tl::LMConfig::n_heads)
      .def_readwrite("d_model", &tl::LMConfig::d_model)
      .def_readwrite("d_ff", &tl::LMConfig::d_ff)
      .def_readwrite("context_len", &tl::LMConfig::context_len)
      .def_readwrite("vocab_size", &tl::LMConfig::vocab_size)
      .def_readwrite("init_seed", &tl::LMConfig::init_seed)
      .def("validate", &tl::LMConfig::validate);

  py::class_<tl::LMParams>(m, "Model")
      .def(py::init(&tl::init_params), py::arg("config"))
      .def_static("load", &tl::load_checkpoint, py::arg("path"))
      .def("save", [](const tl::LMParams& p, const std::filesystem::path& path) { tl::save_checkpoint(p, path); },
           py::arg("path"))
      .def_readonly("config", &tl::LMParams::config)
      .def_property_readonly("parameter_count", &tl::LMParams::parameter_count)
      .def(
          "logits",
          [](const tl::LMParams& p, const tl::Tokens& tokens) -> tl::Matrix { return tl::forward(p, tokens); },
          py::arg("tokens"))
      .def(
          "sequence_logprob",
          [](const tl::LMParams& p, const std::string& prompt, const std::string& completion) {
            return tl::sequence_logprob(p, tl::encode(prompt), tl::encode(completion));
          },
          py::arg("prompt"), py::arg("completion"))
      .def(
          "generate",
          [](const tl::LMParams& p, const std::string& prompt, int max_new, double temperature,
             std::uint64_t seed) {
            std::string text;
            {
              py::gil_scoped_release release;
              text = af::trainer::generate(p, prompt, {max_new, temperature, seed});
            }
            return lenient_str(text);
          },
          py::arg("prompt"), py::arg("max_new") = 128, py::arg("temperature") = 0.0, py::arg("seed") = 0)
      .def("__eq__", &tl::LMParams::operator==);

  // Corpus
  m.def(
      "synthesize_corpus",
      [](std::size_t n, std::uint64_t seed, const std::string& split) {
        py::list out;
        for (const auto& d : af::corpus::synthesize_corpus(n, seed, af::corpus::parse_split(split))) {
          out.append(dialogue_dict(d));
        }
        return out;
      },
      py::arg("n"), py::arg("seed") = 0, py::arg("split") = "train");

  // Pipeline
  m.def("plan_names", &af::pipeline::plan_names);
  m.def(
      "load_config",
      [](const std::filesystem::path& path, const std::vector<std::string>& overrides) {
        return py::module_::import("json").attr("loads")(af::pipeline::load_config(path, overrides).snapshot.dump());
      },
      py::arg("path"), py::arg("overrides") = std::vector<std::string>{});
  m.def(
      "run_all",
      [](const std::filesystem::path& path, const std::vector<std::string>& overrides) {
        return run_captured([&](std::ostream& out, std::ostream& err) {
          return af::pipeline::cmd_run_all(af::pipeline::load_config(path, overrides), out, err);
        });
      },
      py::arg("config"), py::arg("overrides") = std::vector<std::string>{},
      "Runs the whole pipeline; returns (exit_code, stdout, stderr).");
}
