#include "cli.hpp"

#include <CLI11.hpp>
#include <filesystem>
#include <fstream>
#include <optional>
#include <sstream>

#include "ufa/error.hpp"
#include "ufa/harness.hpp"

namespace ufa::cli {

namespace fs = std::filesystem;

namespace {

struct Common {
  std::string config;
  std::optional<std::uint64_t> seed;
  std::string out;
};

ExperimentConfig load_config(const Common& c, bool seed_is_data_seed) {
  ExperimentConfig cfg = c.config.empty() ? ExperimentConfig{} : ExperimentConfig::from_file(c.config);
  if (c.seed) {
    if (seed_is_data_seed) cfg.data_seed = *c.seed;
    else cfg.seeds = {*c.seed};
  }
  cfg.validate();
  return cfg;
}

void write_file(const fs::path& path, const std::string& text) {
  if (path.has_parent_path()) fs::create_directories(path.parent_path());
  std::ofstream f(path, std::ios::binary);
  if (!f) throw IoError("cannot write " + path.string());
  f << text;
  if (!f) throw IoError("write failed for " + path.string());
}

int dispatch(const std::string& command, const Common& common, std::ostream& out, std::ostream& err) {
  if (command == "gen-corpus") {
    const auto cfg = load_config(common, true);
    Workspace ws(cfg);
    const fs::path dir = common.out.empty() ? ws.data_dir() : fs::path(common.out);
    ws.build_data(dir);
    out << "corpus written to " << dir.string() << "\n";
    return kOk;
  }
  if (command == "train-tokenizer") {
    const auto cfg = load_config(common, false);
    Workspace ws(cfg);
    const fs::path path = common.out.empty() ? ws.tokenizer_path() : fs::path(common.out);
    ws.build_tokenizer(path);
    out << "tokenizer written to " << path.string() << "\n";
    return kOk;
  }
  const auto cfg = load_config(common, false);
  Workspace ws(cfg);
  const auto seed = cfg.seeds.front();
  if (command == "pretrain-denoise" || command == "pretrain-ufa") {
    ws.require_data();
    ws.require_tokenizer();
    const auto ckpt = command == "pretrain-denoise" ? ws.denoise(seed, &err, common.out)
                                                    : ws.ufa_pretrain(seed, cfg.stage2_tasks(), &err, common.out);
    out << ckpt.string() << "\n";
    return kOk;
  }
  if (command == "finetune") {
    ws.require_data();
    ws.require_tokenizer();
    const fs::path init = cfg.checkpoint.empty()
                              ? ws.base_checkpoint(cfg.model_variant, seed, cfg.stage2_tasks(), &err)
                              : cfg.checkpoint;
    Workspace::FinetuneRun run{cfg.task, cfg.model_variant, cfg.prompt_variant, std::nullopt, seed, init,
                               to_string(cfg.model_variant)};
    const auto report = ws.finetune(run, &err, common.out);
    out << to_json_line(report) << "\n";
    return kOk;
  }
  if (command == "evaluate") {
    if (cfg.checkpoint.empty()) throw ConfigError("evaluate needs the 'checkpoint' config key");
    ws.require_data();
    ws.require_tokenizer();
    auto report = ws.evaluate_checkpoint(cfg.checkpoint, cfg.task, cfg.prompt_variant, seed);
    if (!common.out.empty()) save_reports(common.out, {report});
    out << to_json_line(report) << "\n";
    return kOk;
  }
  if (command == "experiment") {
    const auto bundle = run_experiment(cfg, &err);
    const fs::path path =
        common.out.empty() ? cfg.work_dir / "reports" / (to_string(cfg.experiment) + ".jsonl") : fs::path(common.out);
    if (path.has_parent_path()) fs::create_directories(path.parent_path());
    save_reports(path, bundle);
    out << render_report(bundle) << "bundle written to " << path.string() << "\n";
    return kOk;
  }
  if (command == "report") {
    if (cfg.bundle.empty()) throw ConfigError("report needs the 'bundle' config key");
    const auto bundle = load_reports(cfg.bundle);
    if (bundle.empty()) throw ConfigError("bundle " + cfg.bundle.string() + " holds no reports");
    const auto text = render_report(bundle);
    if (common.out.empty()) out << text;
    else write_file(common.out, text);
    return kOk;
  }
  throw ConfigError("unknown subcommand '" + command + "'");
}

}  // namespace

int run(const std::vector<std::string>& args, std::ostream& out, std::ostream& err) {
  CLI::App app{"Knowledge-prompt pre-training pipeline"};
  app.require_subcommand(1);
  Common common;
  const std::vector<std::pair<std::string, std::string>> commands = {
      {"gen-corpus", "generate the synthetic dialogue corpora (--seed sets data_seed)"},
      {"train-tokenizer", "train the BPE tokenizer on the pre-training corpus"},
      {"pretrain-denoise", "stage 1: span-denoising pre-training"},
      {"pretrain-ufa", "stage 2: knowledge-prompt multi-task pre-training"},
      {"finetune", "fine-tune one task and evaluate the best dev checkpoint"},
      {"evaluate", "evaluate a checkpoint on a task's test split"},
      {"experiment", "run an experiment suite and write a report bundle"},
      {"report", "render a report bundle as text tables"},
  };
  for (const auto& [name, help] : commands) {
    auto* sub = app.add_subcommand(name, help);
    sub->add_option("--config", common.config, "key = value configuration file");
    sub->add_option("--seed", common.seed, "seed override");
    sub->add_option("--out", common.out, "output path override");
  }

  std::vector<std::string> reversed(args.rbegin(), args.rend());
  try {
    app.parse(reversed);
  } catch (const CLI::ParseError& e) {
    std::ostringstream o, e2;
    const int code = app.exit(e, o, e2);
    out << o.str();
    err << e2.str();
    return code == 0 ? kOk : kConfigError;
  }

  const std::string command = app.get_subcommands().front()->get_name();
  try {
    return dispatch(command, common, out, err);
  } catch (const IoError& e) {
    err << "error: " << e.what() << "\n";
    return kIoError;
  } catch (const FormatError& e) {
    err << "error: " << e.what() << "\n";
    return kIoError;
  } catch (const CheckpointError& e) {
    err << "error: " << e.what() << "\n";
    return kIoError;
  } catch (const ParseError& e) {
    err << "error: " << e.what() << "\n";
    return kIoError;
  } catch (const fs::filesystem_error& e) {
    err << "error: " << e.what() << "\n";
    return kIoError;
  } catch (const std::exception& e) {
    err << "error: " << e.what() << "\n";
    return kConfigError;
  }
}

}  // namespace ufa::cli
