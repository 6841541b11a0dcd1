#include <cstdio>
#include <filesystem>
#include <string>
#include <vector>

#include "CLI11.hpp"
#include "simpleq/checkpoint.hpp"
#include "simpleq/harness.hpp"
#include "simpleq/plot.hpp"

namespace {

using namespace simpleq;

struct CommonOpts {
  std::string config_path;
  std::vector<std::string> overrides;
  std::string out_dir;
  std::int64_t seed = -1;
};

void add_common(CLI::App* cmd, CommonOpts& opts, bool config_required = true) {
  auto* c = cmd->add_option("--config", opts.config_path, "experiment config JSON");
  if (config_required) c->required();
  cmd->add_option("--override", opts.overrides,
                  "dotted config override, e.g. agent.beta=0.1 (repeatable)");
  cmd->add_option("--out", opts.out_dir, "override the configured output directory");
  cmd->add_option("--seed", opts.seed, "restrict to a single seed from the config list");
}

ExperimentConfig load_config(const CommonOpts& opts) {
  std::vector<std::string> ov = opts.overrides;
  if (!opts.out_dir.empty()) ov.push_back("out_dir=\"" + opts.out_dir + "\"");
  return load_experiment_config(opts.config_path, ov);
}

std::vector<std::uint64_t> pick_seeds(const ExperimentConfig& cfg, std::int64_t seed) {
  if (seed < 0) return cfg.seeds;
  return {static_cast<std::uint64_t>(seed)};
}

std::vector<Trajectory> load_dataset(const ExperimentConfig& cfg) {
  const std::string path = dataset_path(cfg);
  if (!std::filesystem::exists(path))
    throw IoError("dataset not found at " + path + "; run `collect` first");
  return load_trajectories(path);
}

int cmd_collect(const CommonOpts& opts) {
  const ExperimentConfig cfg = load_config(opts);
  const auto demos = run_collect(cfg);
  std::printf("collected %zu demonstration episodes -> %s\n", demos.size(),
              dataset_path(cfg).c_str());
  return 0;
}

int cmd_train_offline(const CommonOpts& opts) {
  const ExperimentConfig cfg = load_config(opts);
  const auto demos = load_dataset(cfg);
  for (std::uint64_t seed : pick_seeds(cfg, opts.seed)) {
    run_train_offline(cfg, seed, demos);
    std::printf("seed %llu: offline training done (%d steps) -> %s\n",
                static_cast<unsigned long long>(seed), cfg.offline_steps,
                seed_dir(cfg, seed).c_str());
  }
  return 0;
}

int cmd_train_online(const CommonOpts& opts) {
  const ExperimentConfig cfg = load_config(opts);
  const auto demos = load_dataset(cfg);
  for (std::uint64_t seed : pick_seeds(cfg, opts.seed)) {
    const std::string ckpt = seed_dir(cfg, seed) + "/agent_offline.json";
    if (!std::filesystem::exists(ckpt))
      throw IoError("checkpoint not found at " + ckpt + "; run `train-offline` first");
    Agent agent = Agent::from_json(read_json_file(ckpt));
    const OnlineResult res = run_train_online(cfg, seed, agent, demos);
    std::printf("seed %llu: online training done (%d episodes), final-window success %s\n",
                static_cast<unsigned long long>(seed), cfg.online_episodes,
                format_double(res.final_window_success).c_str());
  }
  return 0;
}

int cmd_evaluate(const CommonOpts& opts, const std::string& checkpoint,
                 const std::string& out_file) {
  const ExperimentConfig cfg = load_config(opts);
  const Agent agent = Agent::from_json(read_json_file(checkpoint));
  const std::uint64_t base = opts.seed < 0 ? cfg.seeds.front()
                                           : static_cast<std::uint64_t>(opts.seed);
  const EvalResult r = evaluate_agent(agent, cfg.env, cfg.eval_attempts, base);
  std::printf("eval: attempts=%d success=%s fault=%s return=%s\n", r.attempts,
              format_double(r.success_rate).c_str(), format_double(r.fault_rate).c_str(),
              format_double(r.mean_return).c_str());
  if (!out_file.empty()) write_json_file(out_file, eval_result_to_json(r));
  return 0;
}

int cmd_diagnose(const std::string& checkpoint, const std::string& dataset,
                 const std::vector<std::string>& which, const std::string& out_dir, double clip,
                 int pairs) {
  run_diagnose(checkpoint, dataset, which, out_dir, clip, pairs);
  std::printf("wrote %zu diagnostic report(s) -> %s\n", which.size(), out_dir.c_str());
  return 0;
}

int cmd_plot(const std::string& kind, const std::vector<std::string>& inputs,
             const std::string& out_file, int window, double clip) {
  if (inputs.empty()) throw ConfigError("plot needs at least one input file");
  if (kind == "success") {
    plot_success(inputs, window, out_file);
  } else if (kind == "loss") {
    plot_loss(inputs.front(), out_file);
  } else if (kind == "similarity") {
    plot_similarity(inputs.front(), clip, out_file);
  } else if (kind == "histogram") {
    plot_histogram(inputs.front(), out_file);
  } else {
    throw ConfigError("unknown plot kind: " + kind);
  }
  std::printf("wrote %s\n", out_file.c_str());
  return 0;
}

// A sweep config is an experiment config plus a "sweep" array of named
// override sets; each entry runs the full pipeline into its own directory.
int cmd_sweep(const CommonOpts& opts) {
  Json doc = read_json_file(opts.config_path);
  for (const auto& ov : opts.overrides) apply_override(doc, ov);
  if (!opts.out_dir.empty()) doc["out_dir"] = opts.out_dir;
  if (!doc.contains("sweep") || !doc.at("sweep").is_array() || doc.at("sweep").empty())
    throw ConfigError("sweep config needs a non-empty \"sweep\" array");
  const Json entries = doc.at("sweep");
  doc.erase("sweep");

  const std::string base_out = doc.value("out_dir", std::string("runs/sweep"));
  std::filesystem::create_directories(base_out);
  std::ofstream summary(base_out + "/sweep_summary.csv", std::ios::app);
  if (!summary) throw IoError("cannot open " + base_out + "/sweep_summary.csv");
  if (std::filesystem::file_size(base_out + "/sweep_summary.csv") == 0)
    summary << "name,seed,offline_success,final_window_success,eval_success,eval_return\n";

  for (const auto& entry : entries) {
    if (!entry.is_object() || !entry.contains("name"))
      throw ConfigError("each sweep entry needs a \"name\"");
    const std::string name = entry.at("name").get<std::string>();
    Json variant = doc;
    if (entry.contains("overrides")) {
      for (const auto& kv : entry.at("overrides").items())
        apply_override(variant, kv.key() + "=" + kv.value().dump());
    }
    variant["out_dir"] = base_out + "/" + name;
    const ExperimentConfig cfg = experiment_config_from_json(variant);

    const auto demos = run_collect(cfg);
    for (std::uint64_t seed : pick_seeds(cfg, opts.seed)) {
      Agent agent = run_train_offline(cfg, seed, demos);
      const EvalResult offline_eval = evaluate_agent(agent, cfg.env, cfg.eval_attempts, seed);
      write_json_file(seed_dir(cfg, seed) + "/eval_offline.json",
                      eval_result_to_json(offline_eval));
      const OnlineResult online = run_train_online(cfg, seed, agent, demos);
      const EvalResult final_eval = evaluate_agent(agent, cfg.env, cfg.eval_attempts, seed);
      write_json_file(seed_dir(cfg, seed) + "/eval_final.json", eval_result_to_json(final_eval));
      summary << name << ',' << seed << ',' << format_double(offline_eval.success_rate) << ','
              << format_double(online.final_window_success) << ','
              << format_double(final_eval.success_rate) << ','
              << format_double(final_eval.mean_return) << '\n';
      summary.flush();
      std::printf("sweep %s seed %llu: offline %s -> online %s -> eval %s\n", name.c_str(),
                  static_cast<unsigned long long>(seed),
                  format_double(offline_eval.success_rate).c_str(),
                  format_double(online.final_window_success).c_str(),
                  format_double(final_eval.success_rate).c_str());
    }
  }
  return 0;
}

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"simpleq: offline-to-online actor-critic experiment harness"};
  app.require_subcommand(1);

  CommonOpts collect_opts, offline_opts, online_opts, eval_opts, sweep_opts;
  std::string eval_checkpoint, eval_out;
  std::string diag_checkpoint, diag_dataset, diag_out = "diagnostics";
  std::vector<std::string> diag_which;
  double diag_clip = 10000.0;
  int diag_pairs = 512;
  std::string plot_kind, plot_out = "plot.svg";
  std::vector<std::string> plot_inputs;
  int plot_window = 10;
  double plot_clip = 10000.0;

  add_common(app.add_subcommand("collect", "record scripted demonstrations"), collect_opts);
  add_common(app.add_subcommand("train-offline", "pretrain on the demonstration dataset"),
             offline_opts);
  add_common(app.add_subcommand("train-online", "continue training with environment episodes"),
             online_opts);

  auto* eval_cmd = app.add_subcommand("evaluate", "deterministic mean-action evaluation");
  add_common(eval_cmd, eval_opts);
  eval_cmd->add_option("--checkpoint", eval_checkpoint, "agent checkpoint JSON")->required();
  eval_cmd->add_option("--out-file", eval_out, "optional JSON result path");

  auto* diag_cmd = app.add_subcommand("diagnose", "run diagnostics on a checkpoint");
  diag_cmd->add_option("--checkpoint", diag_checkpoint, "agent checkpoint JSON")->required();
  diag_cmd->add_option("--dataset", diag_dataset, "trajectory dataset file")->required();
  diag_cmd->add_option("--which", diag_which,
                       "reports: similarity, qtrace, histogram, gradient_field")
      ->required();
  diag_cmd->add_option("--out", diag_out, "output directory");
  diag_cmd->add_option("--clip", diag_clip, "similarity clip magnitude");
  diag_cmd->add_option("--pairs", diag_pairs, "probe pair count");

  auto* plot_cmd = app.add_subcommand("plot", "render CSV artifacts to SVG");
  plot_cmd->add_option("--kind", plot_kind, "success | loss | similarity | histogram")
      ->required();
  plot_cmd->add_option("--out", plot_out, "output SVG path");
  plot_cmd->add_option("--window", plot_window, "episode window for success curves");
  plot_cmd->add_option("--clip", plot_clip, "color saturation for similarity heatmaps");
  plot_cmd->add_option("inputs", plot_inputs, "input CSV files")->required();

  add_common(app.add_subcommand("sweep", "run a named set of config variants"), sweep_opts);

  try {
    app.parse(argc, argv);
  } catch (const CLI::CallForHelp& e) {
    return app.exit(e);
  } catch (const CLI::ParseError& e) {
    app.exit(e);
    return 3;
  }

  try {
    if (app.got_subcommand("collect")) return cmd_collect(collect_opts);
    if (app.got_subcommand("train-offline")) return cmd_train_offline(offline_opts);
    if (app.got_subcommand("train-online")) return cmd_train_online(online_opts);
    if (app.got_subcommand("evaluate")) return cmd_evaluate(eval_opts, eval_checkpoint, eval_out);
    if (app.got_subcommand("diagnose"))
      return cmd_diagnose(diag_checkpoint, diag_dataset, diag_which, diag_out, diag_clip,
                          diag_pairs);
    if (app.got_subcommand("plot"))
      return cmd_plot(plot_kind, plot_inputs, plot_out, plot_window, plot_clip);
    if (app.got_subcommand("sweep")) return cmd_sweep(sweep_opts);
    throw ConfigError("no subcommand given");
  } catch (const ConfigError& e) {
    std::fprintf(stderr, "config error: %s\n", e.what());
    return 3;
  } catch (const IoError& e) {
    std::fprintf(stderr, "io error: %s\n", e.what());
    return 4;
  } catch (const DivergenceFault& e) {
    std::fprintf(stderr, "divergence fault: %s\n", e.what());
    return 2;
  } catch (const CollectionError& e) {
    std::fprintf(stderr, "collection fault: %s\n", e.what());
    return 2;
  } catch (const std::exception& e) {
    std::fprintf(stderr, "error: %s\n", e.what());
    return 1;
  }
}
