#include <pybind11/pybind11.h>
#include <pybind11/stl.h>
#include <pybind11/stl/filesystem.h>

#include <sstream>

#include "cli.hpp"
#include "ufa/corpus.hpp"
#include "ufa/decode_eval.hpp"
#include "ufa/error.hpp"
#include "ufa/fixtures.hpp"
#include "ufa/harness.hpp"
#include "ufa/promptkit.hpp"
#include "ufa/tokenizer.hpp"

namespace py = pybind11;
using namespace ufa;

namespace {

// Records cross the boundary as JSON lines; the Python side parses them.
template <typename T>
std::vector<std::string> json_lines(const std::vector<T>& items) {
  std::vector<std::string> out;
  out.reserve(items.size());
  for (const auto& item : items) out.push_back(to_json_line(item));
  return out;
}

std::vector<Utterance> utterances_from(const std::vector<std::pair<std::string, std::string>>& turns) {
  std::vector<Utterance> out;
  for (const auto& [role, text] : turns) {
    if (role == "customer") out.push_back({Role::customer, text});
    else if (role == "agent") out.push_back({Role::agent, text});
    else throw ContractError("unknown role '" + role + "'");
  }
  return out;
}

}  // namespace

PYBIND11_MODULE(_ufa, m) {
  m.doc() = "Knowledge-prompt pre-training pipeline, native core";

  auto base = py::register_exception<Error>(m, "Error", PyExc_RuntimeError);
  py::register_exception<ConfigError>(m, "ConfigError", base.ptr());
  py::register_exception<IoError>(m, "IoError", base.ptr());
  py::register_exception<ContractError>(m, "ContractError", base.ptr());
  py::register_exception<RegistryError>(m, "RegistryError", base.ptr());
  py::register_exception<OrchestrationError>(m, "OrchestrationError", base.ptr());

  py::class_<Tokenizer>(m, "Tokenizer")
      .def_static(
          "train",
          [](const std::vector<std::string>& corpus, std::size_t vocab_size) {
            return Tokenizer::train(corpus, vocab_size);
          },
          py::arg("corpus"), py::arg("vocab_size"))
      .def_static("load", &Tokenizer::load, py::arg("path"))
      .def("save", &Tokenizer::save, py::arg("path"))
      .def("encode", &Tokenizer::encode, py::arg("text"))
      .def(
          "decode", [](const Tokenizer& t, const std::vector<int>& ids) { return t.decode(ids); }, py::arg("ids"))
      .def("__len__", &Tokenizer::size)
      .def_property_readonly("pad_id", &Tokenizer::pad_id)
      .def_property_readonly("eos_id", &Tokenizer::eos_id)
      .def("sentinel_id", &Tokenizer::sentinel_id, py::arg("k"));

  m.def(
      "generate_corpus_lines",
      [](std::size_t n_dialogues, std::uint64_t seed, double label_noise, bool gold) {
        GeneratorConfig c;
        c.n_dialogues = n_dialogues;
        c.seed = seed;
        c.label_noise_rate = label_noise;
        c.provenance = gold ? Provenance::gold : Provenance::weak;
        c.validate();
        return json_lines(generate_corpus(c));
      },
      py::arg("n_dialogues"), py::arg("seed") = 0, py::arg("label_noise") = 0.0, py::arg("gold") = false);

  m.def("task_names", [] { return TaskRegistry::builtin().names(); });
  m.def(
      "build_prompt",
      [](const std::string& task, const std::vector<std::pair<std::string, std::string>>& turns,
         const std::string& variant) {
        const auto utts = utterances_from(turns);
        return build_prompt(TaskRegistry::builtin().at(task), render_dialogue_history(utts),
                            parse_prompt_variant(variant));
      },
      py::arg("task"), py::arg("turns"), py::arg("variant") = "full");

  m.def("metric_tokens", &metric_tokens, py::arg("text"));
  m.def(
      "bleu2",
      [](const std::vector<std::string>& p, const std::vector<std::string>& r) { return bleu2(p, r); },
      py::arg("predictions"), py::arg("references"));
  m.def(
      "rouge",
      [](const std::vector<std::string>& p, const std::vector<std::string>& r, const std::string& variant) {
        RougeVariant v;
        if (variant == "1") v = RougeVariant::one;
        else if (variant == "2") v = RougeVariant::two;
        else if (variant == "L") v = RougeVariant::lcs;
        else throw ContractError("rouge variant must be '1', '2' or 'L'");
        return corpus_rouge(p, r, v);
      },
      py::arg("predictions"), py::arg("references"), py::arg("variant"));
  m.def(
      "exact_match",
      [](const std::vector<std::string>& p, const std::vector<std::string>& g) { return exact_match_accuracy(p, g); },
      py::arg("predictions"), py::arg("gold"));

  m.def(
      "verify_fixtures",
      [](const std::filesystem::path& dir) {
        const auto report = verify_fixtures(load_fixtures(dir));
        return py::make_tuple(report.outcomes.size(), report.failures(), report.describe_failures());
      },
      py::arg("directory"));

  m.def(
      "run_experiment_lines",
      [](const std::string& config_text) {
        const auto cfg = ExperimentConfig::from_text(config_text);
        std::vector<MetricReport> bundle;
        {
          py::gil_scoped_release release;
          bundle = run_experiment(cfg);
        }
        return json_lines(bundle);
      },
      py::arg("config_text"));
  m.def(
      "render_report_lines",
      [](const std::vector<std::string>& lines) {
        std::vector<MetricReport> bundle;
        for (std::size_t i = 0; i < lines.size(); ++i) bundle.push_back(report_from_json_line(lines[i], i + 1));
        return render_report(bundle);
      },
      py::arg("lines"));

  m.def(
      "cli",
      [](const std::vector<std::string>& args) {
        std::ostringstream out, err;
        int code;
        {
          py::gil_scoped_release release;
          code = cli::run(args, out, err);
        }
        return py::make_tuple(code, out.str(), err.str());
      },
      py::arg("args"));
}
