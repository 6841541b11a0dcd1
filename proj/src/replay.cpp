#include "simpleq/replay.hpp"

#include <filesystem>

#include "simpleq/checkpoint.hpp"

namespace simpleq {

std::vector<Transition> assemble_nstep(const Trajectory& traj, int n, double gamma,
                                       bool bootstrap_on_fault) {
  if (n < 1) throw ConfigError("n_step must be >= 1");
  if (gamma < 0.0 || gamma >= 1.0) throw ConfigError("gamma must lie in [0, 1)");
  const Eigen::Index len = traj.length();
  std::vector<Transition> out;
  out.reserve(static_cast<std::size_t>(len));
  const Eigen::Index act_dim = traj.actions.rows();
  for (Eigen::Index t = 0; t < len; ++t) {
    Transition tr;
    tr.s = traj.observations.col(t);
    tr.a = traj.actions.col(t);
    tr.n_used = static_cast<int>(std::min<Eigen::Index>(n, len - t));
    double ret = 0.0, disc = 1.0;
    for (int k = 0; k < tr.n_used; ++k) {
      ret += disc * traj.rewards(t + k);
      disc *= gamma;
    }
    tr.n_step_return = ret;
    tr.s_target = traj.observations.col(t + tr.n_used);
    const bool window_hits_end = t + tr.n_used == len;
    tr.fault = traj.fault && window_hits_end;
    tr.bootstrap = !(tr.fault && !bootstrap_on_fault);
    tr.s_next = traj.observations.col(t + 1);
    if (t + 1 < len) {
      tr.a_next = traj.actions.col(t + 1);
      tr.has_next_action = true;
    } else {
      tr.a_next = Vector::Zero(act_dim);
    }
    out.push_back(std::move(tr));
  }
  return out;
}

Batch to_batch(const std::vector<const Transition*>& transitions) {
  if (transitions.empty()) throw BufferEmptyError("empty transition batch");
  const Eigen::Index b = static_cast<Eigen::Index>(transitions.size());
  const Eigen::Index obs_dim = transitions[0]->s.size();
  const Eigen::Index act_dim = transitions[0]->a.size();
  Batch out;
  out.s.resize(obs_dim, b);
  out.a.resize(act_dim, b);
  out.s_target.resize(obs_dim, b);
  out.s_next.resize(obs_dim, b);
  out.a_next.resize(act_dim, b);
  out.n_step_return.resize(b);
  out.n_used.resize(b);
  out.bootstrap_mask.resize(b);
  out.has_next_mask.resize(b);
  for (Eigen::Index i = 0; i < b; ++i) {
    const Transition& t = *transitions[i];
    out.s.col(i) = t.s;
    out.a.col(i) = t.a;
    out.s_target.col(i) = t.s_target;
    out.s_next.col(i) = t.s_next;
    out.a_next.col(i) = t.a_next;
    out.n_step_return(i) = t.n_step_return;
    out.n_used(i) = t.n_used;
    out.bootstrap_mask(i) = t.bootstrap ? 1.0 : 0.0;
    out.has_next_mask(i) = t.has_next_action ? 1.0 : 0.0;
  }
  return out;
}

void DualBuffer::append_transitions(const Trajectory& traj, std::vector<Transition>& store) const {
  std::vector<Transition> ts =
      assemble_nstep(traj, opt_.n_step, opt_.gamma, opt_.bootstrap_on_fault);
  store.insert(store.end(), std::make_move_iterator(ts.begin()),
               std::make_move_iterator(ts.end()));
}

void DualBuffer::add_offline(const Trajectory& traj) {
  off_trajs_.push_back(traj);
  off_source_.push_back("demo");
  append_transitions(traj, off_);
}

int DualBuffer::add_online_episode(const Trajectory& traj) {
  on_trajs_.push_back(traj);
  committed_.push_back(false);
  append_transitions(traj, on_);
  return static_cast<int>(on_trajs_.size()) - 1;
}

bool DualBuffer::sil_commit(int online_index) {
  const Trajectory& traj = on_trajs_.at(online_index);
  if (!opt_.sil_enabled || committed_.at(online_index)) return false;
  if (traj.episode_return() <= 0.0) return false;
  committed_[online_index] = true;
  off_trajs_.push_back(traj);
  off_source_.push_back("sil");
  append_transitions(traj, off_);
  return true;
}

std::vector<const Transition*> DualBuffer::sample_symmetric(int batch_size, Rng& rng) const {
  if (batch_size <= 0 || batch_size % 2 != 0)
    throw ConfigError("batch_size must be positive and even");
  if (off_.empty() && on_.empty()) throw BufferEmptyError("both stores empty");

  std::vector<const Transition*> out;
  out.reserve(static_cast<std::size_t>(batch_size));
  auto draw = [&](const std::vector<Transition>& store, int count) {
    for (int i = 0; i < count; ++i)
      out.push_back(&store[static_cast<std::size_t>(rng.uniform_int(static_cast<int>(store.size())))]);
  };

  if (!opt_.symmetric_sampling) {
    // Ablation: uniform over the union of both stores.
    const int total = static_cast<int>(off_.size() + on_.size());
    for (int i = 0; i < batch_size; ++i) {
      const int k = rng.uniform_int(total);
      out.push_back(k < static_cast<int>(off_.size())
                        ? &off_[static_cast<std::size_t>(k)]
                        : &on_[static_cast<std::size_t>(k) - off_.size()]);
    }
    return out;
  }
  if (on_.empty()) {
    draw(off_, batch_size);
  } else if (off_.empty()) {
    draw(on_, batch_size);
  } else {
    draw(off_, batch_size / 2);
    draw(on_, batch_size / 2);
  }
  return out;
}

Matrix DualBuffer::sample_states(int count, Rng& rng) const {
  if (off_.empty() && on_.empty()) throw BufferEmptyError("both stores empty");
  const int total = static_cast<int>(off_.size() + on_.size());
  Matrix out(off_.empty() ? on_[0].s.size() : off_[0].s.size(), count);
  for (int i = 0; i < count; ++i) {
    const int k = rng.uniform_int(total);
    out.col(i) = k < static_cast<int>(off_.size())
                     ? off_[static_cast<std::size_t>(k)].s
                     : on_[static_cast<std::size_t>(k) - off_.size()].s;
  }
  return out;
}

void DualBuffer::save(const std::string& dir) const {
  std::filesystem::create_directories(dir);
  save_trajectories(dir + "/d_off.jsonl", off_trajs_);
  save_trajectories(dir + "/d_on.jsonl", on_trajs_);
  Json manifest;
  manifest["n_step"] = opt_.n_step;
  manifest["gamma"] = opt_.gamma;
  manifest["bootstrap_on_fault"] = opt_.bootstrap_on_fault;
  manifest["sil_enabled"] = opt_.sil_enabled;
  manifest["symmetric_sampling"] = opt_.symmetric_sampling;
  manifest["off_source"] = off_source_;
  manifest["committed"] = committed_;
  write_json_file(dir + "/manifest.json", manifest);
}

DualBuffer DualBuffer::load(const std::string& dir) {
  Json manifest = read_json_file(dir + "/manifest.json");
  BufferOptions opt;
  opt.n_step = manifest.at("n_step").get<int>();
  opt.gamma = manifest.at("gamma").get<double>();
  opt.bootstrap_on_fault = manifest.at("bootstrap_on_fault").get<bool>();
  opt.sil_enabled = manifest.at("sil_enabled").get<bool>();
  opt.symmetric_sampling = manifest.at("symmetric_sampling").get<bool>();

  DualBuffer buf(opt);
  std::vector<Trajectory> off = load_trajectories(dir + "/d_off.jsonl");
  std::vector<std::string> sources = manifest.at("off_source").get<std::vector<std::string>>();
  if (sources.size() != off.size()) throw IoError(dir + ": manifest/off-store size mismatch");
  for (std::size_t i = 0; i < off.size(); ++i) {
    buf.off_trajs_.push_back(off[i]);
    buf.off_source_.push_back(sources[i]);
    buf.append_transitions(off[i], buf.off_);
  }
  for (const Trajectory& t : load_trajectories(dir + "/d_on.jsonl")) buf.add_online_episode(t);
  buf.committed_ = manifest.at("committed").get<std::vector<bool>>();
  if (buf.committed_.size() != buf.on_trajs_.size())
    throw IoError(dir + ": manifest/on-store size mismatch");
  return buf;
}

}  // namespace simpleq
