#pragma once

#include <fstream>
#include <string>
#include <vector>

#include "simpleq/diagnostics.hpp"

namespace simpleq {

// One experiment: environment, agent, protocol sizes, seeds, output layout.
struct ExperimentConfig {
  std::string env = "grasp";
  AgentConfig agent;
  int demonstrations = 50;
  int offline_steps = 20000;
  int online_episodes = 200;
  int eval_attempts = 50;
  std::vector<std::uint64_t> seeds = {0, 1, 2};
  std::string out_dir = "runs/default";
  int diagnostics_every = 0;  // 0: only at phase boundaries
  int probe_pairs = 512;
  bool sil = true;
  bool symmetric_sampling = true;
  bool bootstrap_on_fault = true;

  BufferOptions buffer_options() const;
  void validate() const;
};

Json experiment_config_to_json(const ExperimentConfig& cfg);
ExperimentConfig experiment_config_from_json(const Json& j);
ExperimentConfig load_experiment_config(const std::string& path,
                                        const std::vector<std::string>& overrides = {});

// Applies "dotted.path=json_value" onto a config document (typos surface as
// unknown-key errors when the document is parsed).
void apply_override(Json& doc, const std::string& assignment);

// Append-only CSV with a fixed schema. Wall-clock times live in a separate
// timing file so the metrics bytes stay reproducible.
class MetricsWriter {
 public:
  MetricsWriter(const std::string& metrics_path, const std::string& timing_path);

  void row(const std::string& phase, long index, int success, int fault, double episode_return,
           const UpdateReport& losses);
  void timing(const std::string& phase, long index, double seconds);

  static const char* header();

 private:
  std::ofstream metrics_;
  std::ofstream timing_;
};

// Fixed probe set of state-action pairs drawn from random-policy episodes;
// the draw depends only on the environment, so traces are comparable across
// runs and algorithms.
struct ProbeSet {
  Matrix s;
  Matrix a;
};

ProbeSet make_probe_set(const std::string& env_name, int pairs);

struct EvalResult {
  int attempts = 0;
  double success_rate = 0.0;
  double fault_rate = 0.0;
  double mean_return = 0.0;
};

Json eval_result_to_json(const EvalResult& r);

// Per-seed training artifacts and summaries.
struct OnlineResult {
  std::vector<EpisodeRecord> episodes;
  double final_window_success = 0.0;  // mean success over the last 50 episodes
  bool q_bound_violated = false;      // any probe checkpoint with |q| above 1/(1-gamma)
  double worst_frac_above_bound = 0.0;
};

std::string seed_dir(const ExperimentConfig& cfg, std::uint64_t seed);
std::string dataset_path(const ExperimentConfig& cfg);

// collect: scripted demonstrations written to the dataset file + manifest.
std::vector<Trajectory> run_collect(const ExperimentConfig& cfg);

// offline: gradient steps on the demonstration store only; returns the agent
// and writes checkpoint, metrics, and cadenced probe traces.
Agent run_train_offline(const ExperimentConfig& cfg, std::uint64_t seed,
                        const std::vector<Trajectory>& demos);

// online: episode loop (rollout -> commit -> updates) continuing from the
// given agent; writes checkpoint, metrics, probe traces, final similarity.
OnlineResult run_train_online(const ExperimentConfig& cfg, std::uint64_t seed, Agent& agent,
                              const std::vector<Trajectory>& demos);

// evaluate: deterministic mean-action rollouts.
EvalResult evaluate_agent(const Agent& agent, const std::string& env_name, int attempts,
                          std::uint64_t base_seed);

// diagnose: emit the requested reports for a checkpoint + dataset.
void run_diagnose(const std::string& checkpoint_path, const std::string& dataset,
                  const std::vector<std::string>& which, const std::string& out_dir,
                  double clip = 10000.0, int probe_pairs = 512);

// Similarity summary over the environment's fixed probe set.
SimilarityReport probe_similarity(const Agent& agent, const std::string& env_name,
                                  int probe_pairs, double clip = 10000.0);

void write_matrix_csv(const std::string& path, const Matrix& m);
Matrix read_matrix_csv(const std::string& path);

}  // namespace simpleq
