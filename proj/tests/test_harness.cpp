#define DOCTEST_CONFIG_IMPLEMENT_WITH_MAIN
#include "doctest.h"

#include <cmath>
#include <filesystem>
#include <fstream>
#include <sstream>
#include <string>
#include <vector>

#include "simpleq/checkpoint.hpp"
#include "simpleq/harness.hpp"
#include "simpleq/plot.hpp"

using namespace simpleq;
namespace fs = std::filesystem;

namespace {

std::string fresh_dir(const std::string& name) {
  const std::string dir = (fs::temp_directory_path() / ("simpleq_test_" + name)).string();
  fs::remove_all(dir);
  fs::create_directories(dir);
  return dir;
}

std::string slurp(const std::string& path) {
  std::ifstream in(path, std::ios::binary);
  REQUIRE(in.good());
  std::ostringstream ss;
  ss << in.rdbuf();
  return ss.str();
}

template <typename E, typename Fn>
std::string thrown_message(Fn&& fn) {
  try {
    fn();
  } catch (const E& e) {
    return e.what();
  }
  return "";
}

bool same_matrix(const Matrix& a, const Matrix& b) {
  return a.rows() == b.rows() && a.cols() == b.cols() && (a.array() == b.array()).all();
}

// Small enough that a full offline+online pipeline runs in well under a
// second, while still exercising every code path.
ExperimentConfig tiny_config(const std::string& dir) {
  ExperimentConfig cfg;
  cfg.env = "grasp";
  cfg.agent.algorithm = Algorithm::simplified_q;
  cfg.agent.critic_hidden = 16;
  cfg.agent.critic_layers = 2;
  cfg.agent.policy_hidden = 12;
  cfg.agent.policy_layers = 1;
  cfg.agent.batch_size = 8;
  cfg.agent.updates_per_episode = 2;
  cfg.agent.ood_action_samples = 2;
  cfg.demonstrations = 3;
  cfg.offline_steps = 3;
  cfg.online_episodes = 2;
  cfg.eval_attempts = 2;
  cfg.seeds = {0};
  cfg.out_dir = dir;
  cfg.diagnostics_every = 1;
  cfg.probe_pairs = 8;
  return cfg;
}

}  // namespace

TEST_CASE("experiment config json round trip") {
  ExperimentConfig cfg = tiny_config("runs/x");
  cfg.agent.beta = 0.37;
  cfg.seeds = {4, 9};
  cfg.sil = false;
  const Json j = experiment_config_to_json(cfg);
  const ExperimentConfig back = experiment_config_from_json(j);
  CHECK(back.env == cfg.env);
  CHECK(back.agent.beta == cfg.agent.beta);
  CHECK(back.agent.batch_size == cfg.agent.batch_size);
  CHECK(back.demonstrations == cfg.demonstrations);
  CHECK(back.offline_steps == cfg.offline_steps);
  CHECK(back.online_episodes == cfg.online_episodes);
  CHECK(back.eval_attempts == cfg.eval_attempts);
  CHECK(back.seeds == cfg.seeds);
  CHECK(back.out_dir == cfg.out_dir);
  CHECK(back.diagnostics_every == cfg.diagnostics_every);
  CHECK(back.probe_pairs == cfg.probe_pairs);
  CHECK(back.sil == cfg.sil);
  CHECK(back.symmetric_sampling == cfg.symmetric_sampling);
  CHECK(back.bootstrap_on_fault == cfg.bootstrap_on_fault);
}

TEST_CASE("experiment config defaults and validation") {
  const ExperimentConfig cfg = experiment_config_from_json(Json::object());
  CHECK(cfg.env == "grasp");
  CHECK(cfg.demonstrations == 50);
  CHECK(cfg.offline_steps == 20000);
  CHECK(cfg.online_episodes == 200);
  CHECK(cfg.eval_attempts == 50);
  CHECK(cfg.seeds == std::vector<std::uint64_t>{0, 1, 2});
  CHECK(cfg.probe_pairs == 512);
  CHECK(cfg.sil);
  CHECK(cfg.symmetric_sampling);

  CHECK_THROWS_AS(experiment_config_from_json(Json{{"bogus", 1}}), ConfigError);
  CHECK_THROWS_AS(experiment_config_from_json(Json{{"agent", Json{{"nope", 1}}}}), ConfigError);
  CHECK_THROWS_AS(experiment_config_from_json(Json{{"env", "marsrover"}}), ConfigError);
  CHECK_THROWS_AS(experiment_config_from_json(Json{{"seeds", Json::array()}}), ConfigError);
  CHECK_THROWS_AS(experiment_config_from_json(Json{{"demonstrations", 0}}), ConfigError);
  CHECK_THROWS_AS(experiment_config_from_json(Json{{"eval_attempts", 0}}), ConfigError);
  CHECK_THROWS_AS(experiment_config_from_json(Json{{"offline_steps", -1}}), ConfigError);
  CHECK_THROWS_AS(experiment_config_from_json(Json::array()), ConfigError);
}

TEST_CASE("dotted overrides rewrite the config document") {
  Json doc = experiment_config_to_json(tiny_config("runs/x"));

  apply_override(doc, "agent.beta=0.125");
  apply_override(doc, "env=reacher");            // bare string fallback
  apply_override(doc, "seeds=[7,8]");            // JSON literal
  apply_override(doc, "agent.algorithm=sac_cql");
  const ExperimentConfig cfg = experiment_config_from_json(doc);
  CHECK(cfg.agent.beta == 0.125);
  CHECK(cfg.env == "reacher");
  CHECK(cfg.seeds == std::vector<std::uint64_t>{7, 8});
  CHECK(cfg.agent.algorithm == Algorithm::sac_cql);

  // A typo'd override creates an unknown key, which parsing rejects.
  Json typo = experiment_config_to_json(tiny_config("runs/x"));
  apply_override(typo, "agent.betaa=0.1");
  CHECK_THROWS_AS(experiment_config_from_json(typo), ConfigError);

  CHECK_THROWS_AS(apply_override(doc, "no_equals_sign"), ConfigError);
  CHECK_THROWS_AS(apply_override(doc, "=5"), ConfigError);
  CHECK_THROWS_AS(apply_override(doc, "env.sub=1"), ConfigError);  // crosses a scalar
  CHECK_THROWS_AS(apply_override(doc, "a..b=1"), ConfigError);
}

TEST_CASE("load_experiment_config applies overrides from disk") {
  const std::string dir = fresh_dir("load_cfg");
  const std::string path = dir + "/config.json";
  write_json_file(path, experiment_config_to_json(tiny_config(dir)));
  const ExperimentConfig cfg =
      load_experiment_config(path, {"agent.alpha=0.55", "online_episodes=9"});
  CHECK(cfg.agent.alpha == 0.55);
  CHECK(cfg.online_episodes == 9);
  CHECK_THROWS_AS(load_experiment_config(dir + "/missing.json"), IoError);
}

TEST_CASE("metrics writer keeps a fixed schema and appends") {
  const std::string dir = fresh_dir("metrics");
  const std::string mpath = dir + "/metrics.csv";
  UpdateReport rep;
  rep.td = 1.5;
  rep.critic_total = 2.0;
  {
    MetricsWriter w(mpath, dir + "/timing.csv");
    w.row("offline", 1, 0, 0, 0.0, rep);
    w.timing("offline", 1, 0.25);
  }
  {
    MetricsWriter w(mpath, dir + "/timing.csv");  // reopen: append, no extra header
    w.row("online", 1, 1, 0, 3.5, rep);
  }
  const CsvTable t = read_csv(mpath);
  REQUIRE(t.header.size() == 14);
  CHECK(t.header.front() == "phase");
  CHECK(t.header.back() == "diverged");
  REQUIRE(t.rows.size() == 2);
  CHECK(t.str(0, 0) == "offline");
  CHECK(t.str(1, 0) == "online");
  CHECK(t.num(1, t.column("return")) == 3.5);
  CHECK(t.num(0, t.column("td")) == 1.5);

  // The header line is exactly the documented schema, once.
  const std::string text = slurp(mpath);
  CHECK(text.rfind(MetricsWriter::header(), 0) == 0);
  CHECK(text.find(MetricsWriter::header(), 1) == std::string::npos);
}

TEST_CASE("probe set is a pure function of the environment") {
  const ProbeSet a = make_probe_set("grasp", 24);
  const ProbeSet b = make_probe_set("grasp", 24);
  REQUIRE(a.s.rows() == 5);
  REQUIRE(a.a.rows() == 3);
  REQUIRE(a.s.cols() == 24);
  REQUIRE(a.a.cols() == 24);
  CHECK(same_matrix(a.s, b.s));
  CHECK(same_matrix(a.a, b.a));

  const ProbeSet r = make_probe_set("reacher", 10);
  CHECK(r.s.rows() == 4);
  CHECK(r.a.rows() == 2);
}

TEST_CASE("collect writes a deterministic dataset") {
  const std::string d1 = fresh_dir("collect_a");
  const std::string d2 = fresh_dir("collect_b");
  ExperimentConfig c1 = tiny_config(d1);
  ExperimentConfig c2 = tiny_config(d2);
  const auto t1 = run_collect(c1);
  const auto t2 = run_collect(c2);
  REQUIRE(t1.size() == 3);
  CHECK(slurp(dataset_path(c1)) == slurp(dataset_path(c2)));
  CHECK(fs::exists(d1 + "/dataset_manifest.json"));

  // Every stored demonstration passed the success filter.
  for (const auto& t : t1) CHECK(trajectory_success(t));
}

TEST_CASE("zero offline steps leaves the agent at its initialization") {
  const std::string dir = fresh_dir("zero_steps");
  ExperimentConfig cfg = tiny_config(dir);
  cfg.offline_steps = 0;
  const auto demos = run_collect(cfg);
  run_train_offline(cfg, 7, demos);

  auto env = make_env(cfg.env);
  const Agent fresh(cfg.agent, env->obs_dim(), env->act_dim(), 7);
  const Json saved = read_json_file(seed_dir(cfg, 7) + "/agent_offline.json");
  CHECK(saved == fresh.to_json());
}

TEST_CASE("offline training is reproducible byte for byte") {
  const std::string d1 = fresh_dir("repro_a");
  const std::string d2 = fresh_dir("repro_b");
  ExperimentConfig c1 = tiny_config(d1);
  ExperimentConfig c2 = tiny_config(d2);
  const auto demos = run_collect(c1);
  run_collect(c2);
  run_train_offline(c1, 0, demos);
  run_train_offline(c2, 0, demos);
  CHECK(slurp(d1 + "/seed0/metrics.csv") == slurp(d2 + "/seed0/metrics.csv"));
  CHECK(slurp(d1 + "/seed0/agent_offline.json") == slurp(d2 + "/seed0/agent_offline.json"));
  CHECK(slurp(d1 + "/seed0/diagnostics/qtrace.csv") == slurp(d2 + "/seed0/diagnostics/qtrace.csv"));

  // A different seed produces a different parameter trace.
  const std::string d3 = fresh_dir("repro_c");
  ExperimentConfig c3 = tiny_config(d3);
  run_collect(c3);
  run_train_offline(c3, 1, demos);
  CHECK(slurp(d3 + "/seed1/agent_offline.json") != slurp(d1 + "/seed0/agent_offline.json"));
}

TEST_CASE("online phase appends rows and writes final artifacts") {
  const std::string dir = fresh_dir("online");
  ExperimentConfig cfg = tiny_config(dir);
  const auto demos = run_collect(cfg);
  Agent agent = run_train_offline(cfg, 0, demos);
  const OnlineResult res = run_train_online(cfg, 0, agent, demos);

  REQUIRE(static_cast<int>(res.episodes.size()) == cfg.online_episodes);
  CHECK(res.final_window_success >= 0.0);
  CHECK(res.final_window_success <= 1.0);

  const CsvTable t = read_csv(dir + "/seed0/metrics.csv");
  int offline_rows = 0, online_rows = 0;
  const int c_phase = t.column("phase");
  for (std::size_t r = 0; r < t.rows.size(); ++r) {
    if (t.str(r, c_phase) == "offline") ++offline_rows;
    if (t.str(r, c_phase) == "online") ++online_rows;
  }
  CHECK(offline_rows == cfg.offline_steps);
  CHECK(online_rows == cfg.online_episodes);

  CHECK(fs::exists(dir + "/seed0/agent_final.json"));
  CHECK(fs::exists(dir + "/seed0/diagnostics/similarity_final.csv"));
  CHECK(fs::exists(dir + "/seed0/diagnostics/similarity_final_summary.json"));
  const Matrix sim = read_matrix_csv(dir + "/seed0/diagnostics/similarity_final.csv");
  CHECK(sim.rows() == cfg.probe_pairs);
  CHECK(sim.cols() == cfg.probe_pairs);
}

TEST_CASE("evaluation is deterministic and untrained agents do not solve the task") {
  ExperimentConfig cfg = tiny_config("unused");
  auto env = make_env(cfg.env);
  const Agent agent(cfg.agent, env->obs_dim(), env->act_dim(), 3);

  const EvalResult a = evaluate_agent(agent, cfg.env, 6, 42);
  const EvalResult b = evaluate_agent(agent, cfg.env, 6, 42);
  CHECK(a.success_rate == b.success_rate);
  CHECK(a.fault_rate == b.fault_rate);
  CHECK(a.mean_return == b.mean_return);
  CHECK(a.attempts == 6);
  CHECK(a.success_rate <= 0.2);  // fresh random policy cannot grasp+lift reliably

  CHECK_THROWS_AS(evaluate_agent(agent, cfg.env, 0, 1), ConfigError);
}

TEST_CASE("diagnose writes the requested reports and nothing else, purely") {
  const std::string dir = fresh_dir("diag");
  ExperimentConfig cfg = tiny_config(dir);
  const auto demos = run_collect(cfg);
  const Agent agent = run_train_offline(cfg, 0, demos);
  const std::string ckpt = seed_dir(cfg, 0) + "/agent_offline.json";

  const std::string out1 = dir + "/diag1";
  const std::string out2 = dir + "/diag2";
  const std::vector<std::string> which = {"similarity", "qtrace", "histogram", "gradient_field"};
  run_diagnose(ckpt, dataset_path(cfg), which, out1, 100.0, 6);
  run_diagnose(ckpt, dataset_path(cfg), which, out2, 100.0, 6);

  const std::vector<std::string> files = {"similarity.csv",       "similarity_summary.json",
                                          "qtrace.csv",           "action_histogram.csv",
                                          "action_histogram_summary.json", "gradient_field.csv"};
  for (const auto& f : files) {
    CHECK(fs::exists(out1 + "/" + f));
    CHECK(slurp(out1 + "/" + f) == slurp(out2 + "/" + f));
  }

  // Empty `which` is a no-op; unknown names are config errors.
  const std::string out3 = dir + "/diag3";
  run_diagnose(ckpt, dataset_path(cfg), {}, out3);
  CHECK(fs::is_empty(out3));
  CHECK_THROWS_AS(run_diagnose(ckpt, dataset_path(cfg), {"nonsense"}, out3), ConfigError);

  const Matrix sim = read_matrix_csv(out1 + "/similarity.csv");
  CHECK(sim.rows() == 6);
  CHECK(sim.cols() == 6);
}

TEST_CASE("matrix csv round trips exactly and rejects malformed input") {
  const std::string dir = fresh_dir("matcsv");
  Rng rng(5);
  const Matrix m = rng.normal_matrix(7, 4) * 1e6;
  write_matrix_csv(dir + "/m.csv", m);
  const Matrix back = read_matrix_csv(dir + "/m.csv");
  CHECK(same_matrix(back, m));  // format_double round trips bit-for-bit

  std::ofstream(dir + "/bad.csv") << "c0,c1\n1.0,oops\n";
  CHECK(thrown_message<IoError>([&] { read_matrix_csv(dir + "/bad.csv"); }).find("bad.csv:2") !=
        std::string::npos);
  std::ofstream(dir + "/short.csv") << "c0,c1\n1.0\n";
  CHECK(thrown_message<IoError>([&] {
          read_matrix_csv(dir + "/short.csv");
        }).find("expected 2 columns") != std::string::npos);
  std::ofstream(dir + "/empty.csv") << "";
  CHECK_THROWS_AS(read_matrix_csv(dir + "/empty.csv"), IoError);
  std::ofstream(dir + "/headeronly.csv") << "c0,c1\n";
  CHECK_THROWS_AS(read_matrix_csv(dir + "/headeronly.csv"), IoError);
  CHECK_THROWS_AS(read_matrix_csv(dir + "/nofile.csv"), IoError);
}

TEST_CASE("csv table reports bad cells with file and line") {
  const std::string dir = fresh_dir("csvtable");
  std::ofstream(dir + "/t.csv") << "phase,val\noffline,1.25\nonline,xyz\n";
  const CsvTable t = read_csv(dir + "/t.csv");
  CHECK(t.column("val") == 1);
  CHECK_THROWS_AS(t.column("nope"), IoError);
  CHECK(t.num(0, 1) == 1.25);
  CHECK(thrown_message<IoError>([&] { t.num(1, 1); }).find("t.csv:3") != std::string::npos);

  std::ofstream(dir + "/ragged.csv") << "a,b\n1,2\n3\n";
  CHECK(thrown_message<IoError>([&] { read_csv(dir + "/ragged.csv"); }).find("ragged.csv:3") !=
        std::string::npos);
}

TEST_CASE("plots render valid svg from pipeline artifacts") {
  const std::string dir = fresh_dir("plots");
  ExperimentConfig cfg = tiny_config(dir);
  cfg.online_episodes = 4;
  const auto demos = run_collect(cfg);
  Agent agent = run_train_offline(cfg, 0, demos);
  run_train_online(cfg, 0, agent, demos);
  const std::string metrics = dir + "/seed0/metrics.csv";

  plot_success({metrics}, 2, dir + "/succ.svg");
  plot_loss(metrics, dir + "/loss.svg");
  plot_similarity(dir + "/seed0/diagnostics/similarity_final.csv", 100.0, dir + "/sim.svg");

  for (const std::string f : {"succ.svg", "loss.svg", "sim.svg"}) {
    const std::string text = slurp(dir + "/" + f);
    CHECK(text.rfind("<svg", 0) == 0);
    CHECK(text.find("</svg>") != std::string::npos);
  }

  // Offline-only metrics have no online rows to plot.
  const std::string d2 = fresh_dir("plots_offline_only");
  ExperimentConfig c2 = tiny_config(d2);
  const auto demos2 = run_collect(c2);
  run_train_offline(c2, 0, demos2);
  CHECK_THROWS_AS(plot_success({d2 + "/seed0/metrics.csv"}, 2, d2 + "/x.svg"), IoError);
  CHECK_THROWS_AS(plot_success({}, 2, d2 + "/x.svg"), ConfigError);
  CHECK_THROWS_AS(plot_similarity(d2 + "/seed0/metrics.csv", 0.0, d2 + "/x.svg"), ConfigError);
}

TEST_CASE("divergence during offline training halts with a fault artifact") {
  const std::string dir = fresh_dir("diverge");
  ExperimentConfig cfg = tiny_config(dir);
  cfg.agent.lr = 1e300;  // first optimizer step overflows the parameters
  cfg.offline_steps = 50;
  const auto demos = run_collect(cfg);
  CHECK_THROWS_AS(run_train_offline(cfg, 0, demos), DivergenceFault);
  CHECK(fs::exists(dir + "/seed0/agent_diverged.json"));
  CHECK(fs::exists(dir + "/seed0/metrics.csv"));

  // The last metrics row records the diverged update.
  const CsvTable t = read_csv(dir + "/seed0/metrics.csv");
  CHECK(t.num(t.rows.size() - 1, t.column("diverged")) == 1.0);
}

TEST_CASE("divergence during the online phase is also a halting fault") {
  const std::string dir = fresh_dir("diverge_online");
  ExperimentConfig cfg = tiny_config(dir);
  const auto demos = run_collect(cfg);
  Agent agent = run_train_offline(cfg, 0, demos);
  agent.critic(0).net.layers[0].weight(0, 0) = std::nan("");
  CHECK_THROWS_AS(run_train_online(cfg, 0, agent, demos), DivergenceFault);
  CHECK(fs::exists(dir + "/seed0/agent_diverged.json"));
}
