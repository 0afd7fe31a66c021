#include <pybind11/pybind11.h>
#include <pybind11/stl.h>
#include <pybind11/stl/filesystem.h>

#include <sstream>

#include "margingate/calibration.hpp"
#include "margingate/config.hpp"
#include "margingate/diagnostics.hpp"
#include "margingate/engines.hpp"
#include "margingate/errors.hpp"
#include "margingate/logits.hpp"
#include "margingate/numerics.hpp"
#include "margingate/pipeline.hpp"
#include "margingate/policy.hpp"

namespace py = pybind11;
using namespace margingate;

namespace {

py::object to_python(const nlohmann::json& j) {
  return py::module_::import("json").attr("loads")(j.dump());
}

BatchLayout make_layout(const std::vector<std::vector<int>>& rows, int protected_row) {
  BatchLayout layout;
  layout.rows = rows;
  layout.protected_row = protected_row;
  return layout;
}

py::dict stats_dict(const GateStats& s) {
  py::dict d;
  d["steps"] = s.steps;
  d["sync_steps"] = s.sync_steps;
  d["triggered"] = s.triggered;
  d["repairs"] = s.repairs;
  d["r_verify"] = s.r_verify;
  d["r_repair"] = s.r_repair;
  d["sequence_deterministic"] = s.sequence_deterministic;
  d["verifier_prefix_tokens"] = s.verifier_prefix_tokens;
  d["always_verify_prefix_tokens"] = s.always_verify_prefix_tokens;
  return d;
}

}  // namespace

PYBIND11_MODULE(_margingate, m) {
  m.doc() = "Batch-shape token-flip simulator and the MarginGate decoding policy.";

  py::register_exception<ConfigError>(m, "ConfigError", PyExc_ValueError);
  py::register_exception<CapacityError>(m, "CapacityError", PyExc_RuntimeError);
  py::register_exception<InvariantViolation>(m, "InvariantViolation", PyExc_RuntimeError);
  py::register_exception<UndefinedMetric>(m, "UndefinedMetric", PyExc_ValueError);

  m.attr("__version__") = tool_version();

  m.def("round_to_bf16", [](float x) { return round_to_bf16(x).bits; }, py::arg("x"),
        "Bit pattern of x rounded to bfloat16 (nearest, ties to even).");
  m.def("bf16_quantize", &bf16_quantize, py::arg("x"));
  m.def(
      "chunked_dot",
      [](const std::vector<float>& a, const std::vector<float>& b, int chunks) {
        std::vector<float> qa(a.size()), qb(b.size());
        for (std::size_t i = 0; i < a.size(); ++i) qa[i] = bf16_quantize(a[i]);
        for (std::size_t i = 0; i < b.size(); ++i) qb[i] = bf16_quantize(b[i]);
        return chunked_dot(std::span<const float>(qa), std::span<const float>(qb), ReductionPlan(qa.size(), chunks));
      },
      py::arg("a"), py::arg("b"), py::arg("chunks") = 1,
      "Dot product of the bf16-rounded inputs with `chunks` contiguous partial sums.");
  m.def("margin", [](const std::vector<float>& logits) { return margin(logits); }, py::arg("logits"));

  py::class_<ModelSpec>(m, "ModelSpec")
      .def(py::init<>())
      .def_readwrite("layers", &ModelSpec::layers)
      .def_readwrite("heads", &ModelSpec::heads)
      .def_readwrite("d_model", &ModelSpec::d_model)
      .def_readwrite("vocab", &ModelSpec::vocab)
      .def_readwrite("max_positions", &ModelSpec::max_positions)
      .def_readwrite("mlp_mult", &ModelSpec::mlp_mult)
      .def_readwrite("seed", &ModelSpec::seed)
      .def_readwrite("embed_std", &ModelSpec::embed_std);

  py::class_<Weights>(m, "Weights").def_property_readonly("spec", [](const Weights& w) { return w.spec; });
  m.def("build_model", &build_model, py::arg("spec") = ModelSpec{});

  py::class_<NumericsProfile>(m, "NumericsProfile")
      .def_static("reference", &NumericsProfile::reference)
      .def_static("reduction_order", &NumericsProfile::reduction_order, py::arg("schedule") = std::map<int, int>{})
      .def_static("injected_noise", &NumericsProfile::injected_noise, py::arg("amplitude"), py::arg("seed") = 0)
      .def_readonly("chunk_schedule", &NumericsProfile::chunk_schedule);

  py::class_<DecodeConfig>(m, "DecodeConfig")
      .def(py::init([](int max_new_tokens, std::optional<int> eos, int top_k) {
             DecodeConfig c;
             c.max_new_tokens = max_new_tokens;
             c.eos_token = eos;
             c.top_k = top_k;
             return c;
           }),
           py::arg("max_new_tokens") = 128, py::arg("eos") = py::none(), py::arg("top_k") = 64)
      .def_readwrite("max_new_tokens", &DecodeConfig::max_new_tokens)
      .def_readwrite("eos", &DecodeConfig::eos_token)
      .def_readwrite("top_k", &DecodeConfig::top_k);

  py::class_<DecodeTrace>(m, "DecodeTrace")
      .def_property_readonly("prompt", [](const DecodeTrace& t) { return t.prompt; })
      .def_property_readonly("tokens", &DecodeTrace::tokens)
      .def_property_readonly("margins",
                             [](const DecodeTrace& t) {
                               std::vector<float> out;
                               for (const auto& s : t.steps) out.push_back(s.margin);
                               return out;
                             })
      .def_property_readonly("stop", [](const DecodeTrace& t) { return std::string(to_string(t.stop)); })
      .def("__len__", &DecodeTrace::length);

  m.def(
      "decode_reference",
      [](const Weights& w, const std::vector<int>& prompt, const DecodeConfig& cfg) {
        return decode_reference(w, prompt, cfg);
      },
      py::arg("weights"), py::arg("prompt"),
        py::arg("cfg") = DecodeConfig{}, py::call_guard<py::gil_scoped_release>());
  m.def(
      "decode_batched",
      [](const Weights& w, const std::vector<std::vector<int>>& rows, const DecodeConfig& cfg,
         const NumericsProfile& profile) { return decode_batched(w, make_layout(rows, 0), cfg, profile); },
      py::arg("weights"), py::arg("rows"), py::arg("cfg") = DecodeConfig{}, py::arg("profile"),
      py::call_guard<py::gil_scoped_release>());
  m.def(
      "find_first_divergence",
      [](const std::vector<int>& batched, const std::vector<int>& reference) {
        return find_first_divergence(batched, reference);
      },
      py::arg("batched"), py::arg("reference"));
  m.def(
      "flip_rate",
      [](const std::vector<DecodeTrace>& batched, const std::vector<DecodeTrace>& reference) {
        if (batched.size() != reference.size()) throw InvalidArgument("flip_rate: trace lists differ in length");
        std::vector<DivergenceReport> reps;
        for (std::size_t i = 0; i < batched.size(); ++i) reps.push_back(make_divergence_report(batched[i], reference[i]));
        return flip_rate(reps);
      },
      py::arg("batched"), py::arg("reference"));
  m.def(
      "margin_recall", [](const std::vector<double>& margins, double tau) { return margin_recall(margins, tau); },
      py::arg("margins"), py::arg("tau"));

  m.def(
      "run_margingate",
      [](const Weights& w, const std::vector<std::vector<int>>& rows, double tau, const NumericsProfile& profile,
         const DecodeConfig& cfg, int protected_row, const std::string& mode) {
        PolicyRun run;
        {
          py::gil_scoped_release release;
          run = run_margingate(w, make_layout(rows, protected_row), cfg, GateConfig{tau, parse_gate_mode(mode)},
                               profile);
        }
        py::list commits;
        for (const auto& c : run.commits) {
          py::dict d;
          d["step"] = c.step;
          d["kind"] = std::string(to_string(c.kind));
          d["margin"] = c.margin;
          d["tentative"] = c.tentative;
          d["final"] = c.final_token;
          commits.append(d);
        }
        py::dict out;
        out["tokens"] = run.trace.tokens();
        out["commits"] = commits;
        out["stats"] = stats_dict(run.stats);
        return out;
      },
      py::arg("weights"), py::arg("rows"), py::arg("tau"), py::arg("profile"), py::arg("cfg") = DecodeConfig{},
      py::arg("protected_row") = 0, py::arg("mode") = "margin-gate");
  m.def(
      "run_oracle_repair",
      [](const Weights& w, const std::vector<std::vector<int>>& rows, const NumericsProfile& profile,
         const DecodeConfig& cfg, int protected_row) {
        OracleRun run;
        {
          py::gil_scoped_release release;
          run = run_oracle_repair(w, make_layout(rows, protected_row), cfg, profile);
        }
        py::dict out;
        out["tokens"] = run.trace.tokens();
        out["repairs"] = run.repairs;
        out["deterministic"] = run.deterministic;
        return out;
      },
      py::arg("weights"), py::arg("rows"), py::arg("profile"), py::arg("cfg") = DecodeConfig{},
      py::arg("protected_row") = 0);

  m.def(
      "summarize_eps",
      [](const std::vector<double>& eps) {
        const EpsSummary s = summarize_eps(eps);
        py::dict d;
        d["samples"] = s.samples;
        d["median"] = s.median;
        d["max"] = s.max;
        d["pert_tau"] = s.pert_tau;
        return d;
      },
      py::arg("eps"));
  m.def(
      "select_tau100",
      [](const std::vector<std::tuple<double, int, int>>& rows) {
        std::vector<GateAggregate> aggs;
        for (const auto& [tau, deterministic, trials] : rows) {
          GateAggregate a;
          a.tau = tau;
          a.deterministic_trials = deterministic;
          a.trials = trials;
          aggs.push_back(a);
        }
        return select_tau100(aggs);
      },
      py::arg("rows"), "rows: (tau, deterministic trials, trials) in ascending tau order.");

  py::class_<RunConfig>(m, "RunConfig")
      .def(py::init<>())
      .def_static("load", &load_config, py::arg("path"))
      .def_static(
          "parse",
          [](const std::string& text) {
            std::istringstream in(text);
            return parse_config(in, "<string>");
          },
          py::arg("text"))
      .def("set", &set_config_value, py::arg("key"), py::arg("value"))
      .def("to_text", &RunConfig::to_text)
      .def("hash", &RunConfig::hash)
      .def_readwrite("workers", &RunConfig::workers);

  py::class_<Pipeline>(m, "Pipeline")
      .def(py::init<RunConfig, std::filesystem::path>(), py::arg("config"), py::arg("out"))
      .def("gen_corpus", [](Pipeline& p) { return to_python(p.gen_corpus()); })
      .def("diagnose", [](Pipeline& p) { return to_python(p.diagnose()); })
      .def("oracle", [](Pipeline& p) { return to_python(p.oracle()); })
      .def("gate", [](Pipeline& p) { return to_python(p.gate()); })
      .def("calibrate", [](Pipeline& p) { return to_python(p.calibrate()); })
      .def("sweep", [](Pipeline& p) { return to_python(p.sweep()); })
      .def("transfer", [](Pipeline& p) { return to_python(p.transfer()); })
      .def("report", &Pipeline::report)
      .def_property_readonly("manifest", [](const Pipeline& p) { return to_python(p.manifest()); })
      .def_property_readonly("corpus", [](const Pipeline& p) { return p.corpus().prompts; });
}
