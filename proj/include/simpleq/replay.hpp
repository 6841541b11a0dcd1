#pragma once

#include <string>
#include <vector>

#include "simpleq/envs.hpp"

namespace simpleq {

// One training sample: state/action, the discounted n-step return, and the
// bootstrap state n_used steps ahead. (s_next, a_next) is the logged
// consecutive pair, present except at the trajectory tail.
struct Transition {
  Vector s;
  Vector a;
  double n_step_return = 0.0;
  Vector s_target;
  int n_used = 1;
  bool bootstrap = true;
  bool fault = false;
  Vector s_next;
  Vector a_next;
  bool has_next_action = false;
};

// Returns one Transition per timestep. n_used = min(n, steps remaining);
// bootstrap stays true at horizon and fault truncation alike unless
// bootstrap_on_fault is false, in which case windows that reach a faulted
// end are treated as absorbing.
std::vector<Transition> assemble_nstep(const Trajectory& traj, int n, double gamma,
                                       bool bootstrap_on_fault = true);

// Column-major batch view used by the agents.
struct Batch {
  Matrix s, a, s_target, s_next, a_next;
  Vector n_step_return;
  Vector n_used;           // stored as doubles for direct use in gamma^n
  Vector bootstrap_mask;   // 1.0 where the target bootstraps
  Vector has_next_mask;    // 1.0 where (s_next, a_next) is logged

  Eigen::Index size() const { return s.cols(); }
};

Batch to_batch(const std::vector<const Transition*>& transitions);

struct BufferOptions {
  int n_step = 3;
  double gamma = 0.99;
  bool bootstrap_on_fault = true;
  bool sil_enabled = true;
  bool symmetric_sampling = true;
};

// D_off holds demonstrations plus self-imitation commits; D_on holds every
// online episode. Sampling composes batches exactly half-and-half whenever
// both stores have data.
class DualBuffer {
 public:
  explicit DualBuffer(const BufferOptions& opt) : opt_(opt) {}

  void add_offline(const Trajectory& traj);
  // Appends to D_on; returns the episode's index for sil_commit.
  int add_online_episode(const Trajectory& traj);
  // Commits episode `online_index` into D_off when its return is positive.
  // Idempotent: at most one commit per episode.
  bool sil_commit(int online_index);

  std::vector<const Transition*> sample_symmetric(int batch_size, Rng& rng) const;
  // Uniform states from the union of both stores.
  Matrix sample_states(int count, Rng& rng) const;

  Eigen::Index off_size() const { return static_cast<Eigen::Index>(off_.size()); }
  Eigen::Index on_size() const { return static_cast<Eigen::Index>(on_.size()); }
  int off_episodes() const { return static_cast<int>(off_trajs_.size()); }
  int on_episodes() const { return static_cast<int>(on_trajs_.size()); }
  const Trajectory& online_trajectory(int index) const { return on_trajs_.at(index); }
  const BufferOptions& options() const { return opt_; }

  void save(const std::string& dir) const;
  static DualBuffer load(const std::string& dir);

 private:
  void append_transitions(const Trajectory& traj, std::vector<Transition>& store) const;

  BufferOptions opt_;
  std::vector<Trajectory> off_trajs_;
  std::vector<std::string> off_source_;  // "demo" or "sil"
  std::vector<Trajectory> on_trajs_;
  std::vector<bool> committed_;
  std::vector<Transition> off_;
  std::vector<Transition> on_;
};

}  // namespace simpleq
