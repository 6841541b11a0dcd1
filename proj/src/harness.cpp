#include "simpleq/harness.hpp"

#include <algorithm>
#include <chrono>
#include <cstdio>
#include <filesystem>
#include <sstream>
#include <utility>

#include "simpleq/checkpoint.hpp"

namespace simpleq {
namespace {

namespace fs = std::filesystem;

// Seed-stream salts for the harness layer; the agent derives its own streams
// internally from the seed it is handed.
constexpr std::uint64_t kSaltUpdates = 0x0FF11E;
constexpr std::uint64_t kSaltActNoise = 0xAC7;
constexpr std::uint64_t kSaltEpisode = 0xE9150DE;
constexpr std::uint64_t kSaltEval = 0xE7A1;
constexpr std::uint64_t kSaltCollect = 0xC0117EC7;
constexpr std::uint64_t kSaltProbe = 0x9120BE;

void ensure_dir(const std::string& dir) {
  std::error_code ec;
  fs::create_directories(dir, ec);
  if (ec) throw IoError("cannot create directory " + dir + ": " + ec.message());
}

double now_seconds() {
  using clock = std::chrono::steady_clock;
  return std::chrono::duration<double>(clock::now().time_since_epoch()).count();
}

struct ReportAccumulator {
  UpdateReport sum;
  int n = 0;
  bool diverged = false;

  void add(const UpdateReport& r) {
    sum.td += r.td;
    sum.cql += r.cql;
    sum.reg += r.reg;
    sum.critic_total += r.critic_total;
    sum.actor += r.actor;
    sum.entropy += r.entropy;
    sum.tau += r.tau;
    sum.bc += r.bc;
    diverged = diverged || r.diverged;
    ++n;
  }

  UpdateReport mean() const {
    UpdateReport m = sum;
    if (n > 0) {
      const double inv = 1.0 / n;
      m.td *= inv;
      m.cql *= inv;
      m.reg *= inv;
      m.critic_total *= inv;
      m.actor *= inv;
      m.entropy *= inv;
      m.tau *= inv;
      m.bc *= inv;
    }
    m.diverged = diverged;
    return m;
  }
};

// qtrace.csv keeps per-checkpoint summaries of the probe Q values; the probe
// set itself is fixed so rows are comparable across the whole run.
class QTraceWriter {
 public:
  explicit QTraceWriter(const std::string& path) : out_(path, std::ios::app) {
    if (!out_) throw IoError("cannot open " + path);
    if (fs::file_size(path) == 0) {
      out_ << "phase,index,bound,mean_q,max_abs_q,frac_above_bound\n";
      out_.flush();
    }
  }

  void row(const std::string& phase, long index, const QTraceEntry& e) {
    out_ << phase << ',' << index << ',' << format_double(e.bound) << ','
         << format_double(e.q.size() ? e.q.mean() : 0.0) << ',' << format_double(e.max_abs_q)
         << ',' << format_double(e.frac_above_bound) << '\n';
    out_.flush();
  }

 private:
  std::ofstream out_;
};

void write_similarity_outputs(const SimilarityReport& rep, const std::string& dir,
                              const std::string& stem) {
  write_matrix_csv(dir + "/" + stem + ".csv", rep.matrix);
  Json j;
  j["pairs"] = rep.pairs;
  j["clip"] = rep.clip;
  j["mean_abs"] = rep.mean_abs;
  j["mean_abs_offdiag"] = rep.mean_abs_offdiag;
  j["max_entry"] = rep.max_entry;
  j["frac_clipped"] = rep.frac_clipped;
  write_json_file(dir + "/" + stem + "_summary.json", j);
}

// Uniformly sample (s, a) pairs from a trajectory set with a caller-owned rng.
ProbeSet sample_pairs(const std::vector<Trajectory>& trajs, int pairs, Rng& rng) {
  Eigen::Index total = 0;
  for (const auto& t : trajs) total += t.length();
  if (total <= 0) throw ConfigError("probe sampling needs at least one transition");
  const Eigen::Index obs = trajs.front().observations.rows();
  const Eigen::Index act = trajs.front().actions.rows();
  ProbeSet p;
  p.s.resize(obs, pairs);
  p.a.resize(act, pairs);
  for (int k = 0; k < pairs; ++k) {
    Eigen::Index pick = rng.uniform_int(static_cast<int>(total));
    for (const auto& t : trajs) {
      if (pick < t.length()) {
        p.s.col(k) = t.observations.col(pick);
        p.a.col(k) = t.actions.col(pick);
        break;
      }
      pick -= t.length();
    }
  }
  return p;
}

}  // namespace

BufferOptions ExperimentConfig::buffer_options() const {
  BufferOptions opt;
  opt.n_step = agent.n_step;
  opt.gamma = agent.gamma;
  opt.bootstrap_on_fault = bootstrap_on_fault;
  opt.sil_enabled = sil;
  opt.symmetric_sampling = symmetric_sampling;
  return opt;
}

void ExperimentConfig::validate() const {
  agent.validate();
  if (demonstrations < 1) throw ConfigError("demonstrations must be positive");
  if (offline_steps < 0) throw ConfigError("offline_steps must be non-negative");
  if (online_episodes < 0) throw ConfigError("online_episodes must be non-negative");
  if (eval_attempts < 1) throw ConfigError("eval_attempts must be positive");
  if (seeds.empty()) throw ConfigError("seeds must be non-empty");
  if (out_dir.empty()) throw ConfigError("out_dir must be non-empty");
  if (diagnostics_every < 0) throw ConfigError("diagnostics_every must be non-negative");
  if (probe_pairs < 1) throw ConfigError("probe_pairs must be positive");
  make_env(env);  // rejects unknown environment names
}

Json experiment_config_to_json(const ExperimentConfig& cfg) {
  Json j;
  j["env"] = cfg.env;
  j["agent"] = agent_config_to_json(cfg.agent);
  j["demonstrations"] = cfg.demonstrations;
  j["offline_steps"] = cfg.offline_steps;
  j["online_episodes"] = cfg.online_episodes;
  j["eval_attempts"] = cfg.eval_attempts;
  j["seeds"] = cfg.seeds;
  j["out_dir"] = cfg.out_dir;
  j["diagnostics_every"] = cfg.diagnostics_every;
  j["probe_pairs"] = cfg.probe_pairs;
  j["sil"] = cfg.sil;
  j["symmetric_sampling"] = cfg.symmetric_sampling;
  j["bootstrap_on_fault"] = cfg.bootstrap_on_fault;
  return j;
}

ExperimentConfig experiment_config_from_json(const Json& j) {
  if (!j.is_object()) throw ConfigError("experiment config must be a JSON object");
  static const std::vector<std::string> known = {
      "env",          "agent",         "demonstrations",    "offline_steps",
      "online_episodes", "eval_attempts", "seeds",          "out_dir",
      "diagnostics_every", "probe_pairs", "sil",            "symmetric_sampling",
      "bootstrap_on_fault"};
  for (const auto& item : j.items()) {
    if (std::find(known.begin(), known.end(), item.key()) == known.end())
      throw ConfigError("unknown experiment config key: " + item.key());
  }
  ExperimentConfig cfg;
  try {
    if (j.contains("env")) cfg.env = j.at("env").get<std::string>();
    if (j.contains("agent")) cfg.agent = agent_config_from_json(j.at("agent"));
    if (j.contains("demonstrations")) cfg.demonstrations = j.at("demonstrations").get<int>();
    if (j.contains("offline_steps")) cfg.offline_steps = j.at("offline_steps").get<int>();
    if (j.contains("online_episodes")) cfg.online_episodes = j.at("online_episodes").get<int>();
    if (j.contains("eval_attempts")) cfg.eval_attempts = j.at("eval_attempts").get<int>();
    if (j.contains("seeds")) cfg.seeds = j.at("seeds").get<std::vector<std::uint64_t>>();
    if (j.contains("out_dir")) cfg.out_dir = j.at("out_dir").get<std::string>();
    if (j.contains("diagnostics_every"))
      cfg.diagnostics_every = j.at("diagnostics_every").get<int>();
    if (j.contains("probe_pairs")) cfg.probe_pairs = j.at("probe_pairs").get<int>();
    if (j.contains("sil")) cfg.sil = j.at("sil").get<bool>();
    if (j.contains("symmetric_sampling"))
      cfg.symmetric_sampling = j.at("symmetric_sampling").get<bool>();
    if (j.contains("bootstrap_on_fault"))
      cfg.bootstrap_on_fault = j.at("bootstrap_on_fault").get<bool>();
  } catch (const Json::exception& e) {
    throw ConfigError(std::string("malformed experiment config: ") + e.what());
  }
  cfg.validate();
  return cfg;
}

void apply_override(Json& doc, const std::string& assignment) {
  const auto eq = assignment.find('=');
  if (eq == std::string::npos || eq == 0)
    throw ConfigError("override must look like key.path=value, got: " + assignment);
  const std::string path = assignment.substr(0, eq);
  const std::string raw = assignment.substr(eq + 1);

  Json value;
  try {
    value = Json::parse(raw);
  } catch (const Json::exception&) {
    value = raw;  // unquoted strings are allowed on the command line
  }

  Json* node = &doc;
  std::size_t begin = 0;
  while (true) {
    const auto dot = path.find('.', begin);
    const std::string key = path.substr(begin, dot == std::string::npos ? dot : dot - begin);
    if (key.empty()) throw ConfigError("override has an empty path segment: " + assignment);
    if (dot == std::string::npos) {
      (*node)[key] = value;
      return;
    }
    if (!node->contains(key)) (*node)[key] = Json::object();
    node = &(*node)[key];
    if (!node->is_object())
      throw ConfigError("override path crosses a non-object value: " + assignment);
    begin = dot + 1;
  }
}

ExperimentConfig load_experiment_config(const std::string& path,
                                        const std::vector<std::string>& overrides) {
  Json doc = read_json_file(path);
  for (const auto& ov : overrides) apply_override(doc, ov);
  return experiment_config_from_json(doc);
}

const char* MetricsWriter::header() {
  return "phase,index,success,fault,return,td,cql,reg,critic_total,actor,entropy,tau,bc,"
         "diverged";
}

MetricsWriter::MetricsWriter(const std::string& metrics_path, const std::string& timing_path)
    : metrics_(metrics_path, std::ios::app), timing_(timing_path, std::ios::app) {
  if (!metrics_) throw IoError("cannot open " + metrics_path);
  if (!timing_) throw IoError("cannot open " + timing_path);
  if (fs::file_size(metrics_path) == 0) {
    metrics_ << header() << '\n';
    metrics_.flush();
  }
  if (fs::file_size(timing_path) == 0) {
    timing_ << "phase,index,seconds\n";
    timing_.flush();
  }
}

void MetricsWriter::row(const std::string& phase, long index, int success, int fault,
                        double episode_return, const UpdateReport& losses) {
  metrics_ << phase << ',' << index << ',' << success << ',' << fault << ','
           << format_double(episode_return) << ',' << format_double(losses.td) << ','
           << format_double(losses.cql) << ',' << format_double(losses.reg) << ','
           << format_double(losses.critic_total) << ',' << format_double(losses.actor) << ','
           << format_double(losses.entropy) << ',' << format_double(losses.tau) << ','
           << format_double(losses.bc) << ',' << (losses.diverged ? 1 : 0) << '\n';
  metrics_.flush();
}

void MetricsWriter::timing(const std::string& phase, long index, double seconds) {
  timing_ << phase << ',' << index << ',' << format_double(seconds) << '\n';
  timing_.flush();
}

ProbeSet make_probe_set(const std::string& env_name, int pairs) {
  if (pairs < 1) throw ConfigError("probe_pairs must be positive");
  auto env = make_env(env_name);
  // Random-policy episodes, in waves until enough transitions exist. The seed
  // depends only on the environment so every run sees the same probes.
  std::vector<Trajectory> trajs;
  Eigen::Index total = 0;
  for (int wave = 0; total < pairs && wave < 64; ++wave) {
    auto batch = collect_random(*env, 16, mix_seed(kSaltProbe, static_cast<std::uint64_t>(wave)));
    for (auto& t : batch) {
      total += t.length();
      trajs.push_back(std::move(t));
    }
  }
  Rng rng(mix_seed(kSaltProbe, 0xF00D));
  return sample_pairs(trajs, pairs, rng);
}

Json eval_result_to_json(const EvalResult& r) {
  Json j;
  j["attempts"] = r.attempts;
  j["success_rate"] = r.success_rate;
  j["fault_rate"] = r.fault_rate;
  j["mean_return"] = r.mean_return;
  return j;
}

std::string seed_dir(const ExperimentConfig& cfg, std::uint64_t seed) {
  return cfg.out_dir + "/seed" + std::to_string(seed);
}

std::string dataset_path(const ExperimentConfig& cfg) {
  return cfg.out_dir + "/dataset.json";
}

std::vector<Trajectory> run_collect(const ExperimentConfig& cfg) {
  cfg.validate();
  ensure_dir(cfg.out_dir);
  auto env = make_env(cfg.env);
  // The dataset is a fixture shared by every seed and sweep variant, so its
  // seed is derived from the protocol (env + size), not from training seeds.
  const std::uint64_t seed = mix_seed(kSaltCollect, static_cast<std::uint64_t>(cfg.demonstrations));
  auto demos = collect_demonstrations(*env, cfg.demonstrations, true, seed);
  save_trajectories(dataset_path(cfg), demos);
  Json manifest;
  manifest["env"] = cfg.env;
  manifest["demonstrations"] = cfg.demonstrations;
  manifest["success_filter"] = true;
  manifest["episodes"] = demos.size();
  manifest["collect_seed"] = seed;
  write_json_file(cfg.out_dir + "/dataset_manifest.json", manifest);
  return demos;
}

Agent run_train_offline(const ExperimentConfig& cfg, std::uint64_t seed,
                        const std::vector<Trajectory>& demos) {
  cfg.validate();
  if (demos.empty()) throw ConfigError("offline training needs a non-empty dataset");
  const std::string dir = seed_dir(cfg, seed);
  ensure_dir(dir + "/diagnostics");

  Json info = experiment_config_to_json(cfg);
  info["seed"] = seed;
  info["format"] = "simpleq-run/1";
  write_json_file(dir + "/config.json", info);

  auto env = make_env(cfg.env);
  DualBuffer buffer(cfg.buffer_options());
  for (const auto& t : demos) buffer.add_offline(t);

  Agent agent(cfg.agent, env->obs_dim(), env->act_dim(), seed);
  MetricsWriter metrics(dir + "/metrics.csv", dir + "/timing.csv");
  QTraceWriter qtrace(dir + "/diagnostics/qtrace.csv");
  const ProbeSet probe = make_probe_set(cfg.env, cfg.probe_pairs);
  Rng update_rng(mix_seed(seed, kSaltUpdates));

  for (int step = 1; step <= cfg.offline_steps; ++step) {
    const double t0 = now_seconds();
    const UpdateReport rep = agent.update(buffer, update_rng);
    metrics.row("offline", step, 0, 0, 0.0, rep);
    metrics.timing("offline", step, now_seconds() - t0);
    if (rep.diverged) {
      write_json_file(dir + "/agent_diverged.json", agent.to_json());
      throw DivergenceFault("offline update diverged at step " + std::to_string(step));
    }
    const bool cadence = cfg.diagnostics_every > 0 && step % cfg.diagnostics_every == 0;
    if (agent.num_critics() > 0 && (cadence || step == cfg.offline_steps))
      qtrace.row("offline", step, q_trace(agent.critic(0), probe.s, probe.a, cfg.agent.gamma, step));
  }

  write_json_file(dir + "/agent_offline.json", agent.to_json());
  return agent;
}

OnlineResult run_train_online(const ExperimentConfig& cfg, std::uint64_t seed, Agent& agent,
                              const std::vector<Trajectory>& demos) {
  cfg.validate();
  const std::string dir = seed_dir(cfg, seed);
  ensure_dir(dir + "/diagnostics");

  auto env = make_env(cfg.env);
  DualBuffer buffer(cfg.buffer_options());
  for (const auto& t : demos) buffer.add_offline(t);

  MetricsWriter metrics(dir + "/metrics.csv", dir + "/timing.csv");
  QTraceWriter qtrace(dir + "/diagnostics/qtrace.csv");
  const ProbeSet probe = make_probe_set(cfg.env, cfg.probe_pairs);
  Rng update_rng(mix_seed(seed, kSaltUpdates + 1));
  Rng act_rng(mix_seed(seed, kSaltActNoise));

  OnlineResult result;
  for (int ep = 1; ep <= cfg.online_episodes; ++ep) {
    const double t0 = now_seconds();
    const Trajectory traj = rollout(
        *env, mix_seed(seed, kSaltEpisode + static_cast<std::uint64_t>(ep)),
        [&](const Vector& obs) { return agent.act_sample(obs, act_rng); }, "online");
    const int idx = buffer.add_online_episode(traj);
    if (cfg.sil) buffer.sil_commit(idx);

    ReportAccumulator acc;
    for (int u = 0; u < cfg.agent.updates_per_episode; ++u) {
      acc.add(agent.update(buffer, update_rng));
      if (acc.diverged) break;
    }
    const UpdateReport mean = acc.mean();
    const int success = trajectory_success(traj) ? 1 : 0;
    metrics.row("online", ep, success, traj.fault ? 1 : 0, traj.episode_return(), mean);
    metrics.timing("online", ep, now_seconds() - t0);
    result.episodes.push_back(
        EpisodeRecord{traj.episode_return(), success == 1, traj.fault});

    if (mean.diverged) {
      write_json_file(dir + "/agent_diverged.json", agent.to_json());
      throw DivergenceFault("online update diverged in episode " + std::to_string(ep));
    }
    const bool cadence = cfg.diagnostics_every > 0 && ep % cfg.diagnostics_every == 0;
    if (agent.num_critics() > 0 && (cadence || ep == cfg.online_episodes)) {
      const QTraceEntry entry = q_trace(agent.critic(0), probe.s, probe.a, cfg.agent.gamma, ep);
      qtrace.row("online", ep, entry);
      result.worst_frac_above_bound =
          std::max(result.worst_frac_above_bound, entry.frac_above_bound);
      if (entry.frac_above_bound > 0.0) result.q_bound_violated = true;
    }
  }

  const int n = static_cast<int>(result.episodes.size());
  const int window = std::min(50, n);
  if (window > 0) {
    double s = 0.0;
    for (int i = n - window; i < n; ++i) s += result.episodes[static_cast<std::size_t>(i)].success;
    result.final_window_success = s / window;
  }

  if (agent.num_critics() > 0) {
    const SimilarityReport sim =
        feature_similarity(agent.critic(0), probe.s, probe.a, 10000.0);
    write_similarity_outputs(sim, dir + "/diagnostics", "similarity_final");
  }
  write_json_file(dir + "/agent_final.json", agent.to_json());
  return result;
}

EvalResult evaluate_agent(const Agent& agent, const std::string& env_name, int attempts,
                          std::uint64_t base_seed) {
  if (attempts < 1) throw ConfigError("eval_attempts must be positive");
  auto env = make_env(env_name);
  EvalResult r;
  r.attempts = attempts;
  for (int i = 0; i < attempts; ++i) {
    const Trajectory traj = rollout(
        *env, mix_seed(base_seed, kSaltEval + static_cast<std::uint64_t>(i)),
        [&](const Vector& obs) { return agent.act_mean(obs); }, "eval");
    r.success_rate += trajectory_success(traj) ? 1.0 : 0.0;
    r.fault_rate += traj.fault ? 1.0 : 0.0;
    r.mean_return += traj.episode_return();
  }
  r.success_rate /= attempts;
  r.fault_rate /= attempts;
  r.mean_return /= attempts;
  return r;
}

SimilarityReport probe_similarity(const Agent& agent, const std::string& env_name,
                                  int probe_pairs, double clip) {
  const ProbeSet probe = make_probe_set(env_name, probe_pairs);
  return feature_similarity(agent.critic(0), probe.s, probe.a, clip);
}

void run_diagnose(const std::string& checkpoint_path, const std::string& dataset,
                  const std::vector<std::string>& which, const std::string& out_dir,
                  double clip, int probe_pairs) {
  const Agent agent = Agent::from_json(read_json_file(checkpoint_path));
  const std::vector<Trajectory> trajs = load_trajectories(dataset);
  if (trajs.empty()) throw ConfigError("diagnose needs a non-empty dataset");
  ensure_dir(out_dir);

  Eigen::Index total = 0;
  for (const auto& t : trajs) total += t.length();
  const int pairs = static_cast<int>(std::min<Eigen::Index>(probe_pairs, total));

  for (const auto& name : which) {
    if (name != "histogram" && agent.num_critics() == 0)
      throw ConfigError("diagnostic '" + name + "' needs a critic; this agent has none");
    if (name == "similarity") {
      Rng rng(mix_seed(kSaltProbe, 0xD1A6));
      const ProbeSet p = sample_pairs(trajs, pairs, rng);
      const SimilarityReport rep = feature_similarity(agent.critic(0), p.s, p.a, clip);
      write_similarity_outputs(rep, out_dir, "similarity");
    } else if (name == "qtrace") {
      Rng rng(mix_seed(kSaltProbe, 0xD1A6));
      const ProbeSet p = sample_pairs(trajs, pairs, rng);
      QTraceWriter w(out_dir + "/qtrace.csv");
      w.row("checkpoint", agent.updates_done(),
            q_trace(agent.critic(0), p.s, p.a, agent.config().gamma, agent.updates_done()));
    } else if (name == "histogram") {
      const ActionHistogram h = action_histogram(trajs, 21);
      std::ofstream out(out_dir + "/action_histogram.csv");
      if (!out) throw IoError("cannot open " + out_dir + "/action_histogram.csv");
      out << "dim,bin,lo,hi,freq\n";
      const double width = 2.0 / h.bins;
      for (Eigen::Index d = 0; d < h.freq.rows(); ++d)
        for (int b = 0; b < h.bins; ++b)
          out << d << ',' << b << ',' << format_double(-1.0 + b * width) << ','
              << format_double(-1.0 + (b + 1) * width) << ',' << format_double(h.freq(d, b))
              << '\n';
      Json j;
      j["bins"] = h.bins;
      j["samples"] = h.samples;
      j["bang_bang"] = h.bang_bang;
      j["bang_bang_index"] = h.bang_bang_index;
      write_json_file(out_dir + "/action_histogram_summary.json", j);
    } else if (name == "gradient_field") {
      const Vector s0 = trajs.front().observations.col(0);
      const Vector base = Vector::Zero(agent.act_dim());
      const int dim2 = agent.act_dim() > 1 ? 1 : 0;
      const GradientField f =
          q_action_gradient_field(agent.critic(0), s0, base, 0, dim2, 9);
      std::ofstream out(out_dir + "/gradient_field.csv");
      if (!out) throw IoError("cannot open " + out_dir + "/gradient_field.csv");
      out << "i,j,a_dim1,a_dim2,q,dq_dim1,dq_dim2\n";
      for (int i = 0; i < f.q.rows(); ++i)
        for (int j = 0; j < f.q.cols(); ++j)
          out << i << ',' << j << ',' << format_double(f.axis(i)) << ','
              << format_double(f.axis(j)) << ',' << format_double(f.q(i, j)) << ','
              << format_double(f.dq_d1(i, j)) << ',' << format_double(f.dq_d2(i, j)) << '\n';
    } else {
      throw ConfigError("unknown diagnostic: " + name);
    }
  }
}

void write_matrix_csv(const std::string& path, const Matrix& m) {
  std::ofstream out(path);
  if (!out) throw IoError("cannot open " + path);
  for (Eigen::Index c = 0; c < m.cols(); ++c) out << (c ? "," : "") << 'c' << c;
  out << '\n';
  for (Eigen::Index r = 0; r < m.rows(); ++r) {
    for (Eigen::Index c = 0; c < m.cols(); ++c)
      out << (c ? "," : "") << format_double(m(r, c));
    out << '\n';
  }
  if (!out) throw IoError("failed writing " + path);
}

Matrix read_matrix_csv(const std::string& path) {
  std::ifstream in(path);
  if (!in) throw IoError("cannot open " + path);
  std::string line;
  if (!std::getline(in, line)) throw IoError(path + ":1: empty csv");
  const auto cols = static_cast<Eigen::Index>(std::count(line.begin(), line.end(), ',') + 1);
  std::vector<double> values;
  Eigen::Index rows = 0;
  long line_no = 1;
  while (std::getline(in, line)) {
    ++line_no;
    if (line.empty()) continue;
    std::stringstream ss(line);
    std::string cell;
    Eigen::Index got = 0;
    while (std::getline(ss, cell, ',')) {
      try {
        values.push_back(std::stod(cell));
      } catch (const std::exception&) {
        throw IoError(path + ":" + std::to_string(line_no) + ": bad number '" + cell + "'");
      }
      ++got;
    }
    if (got != cols)
      throw IoError(path + ":" + std::to_string(line_no) + ": expected " +
                    std::to_string(cols) + " columns, got " + std::to_string(got));
    ++rows;
  }
  if (rows == 0) throw IoError(path + ": no data rows");
  Matrix m(rows, cols);
  for (Eigen::Index r = 0; r < rows; ++r)
    for (Eigen::Index c = 0; c < cols; ++c)
      m(r, c) = values[static_cast<std::size_t>(r * cols + c)];
  return m;
}

}  // namespace simpleq
