#pragma once

#include <vector>

#include "simpleq/agents.hpp"

namespace simpleq {

// Clipped pairwise feature dot products over a probe set.
struct SimilarityReport {
  Eigen::Index pairs = 0;
  double clip = 0.0;
  Matrix matrix;                  // pairs x pairs, entries clipped to [-clip, clip]
  double mean_abs = 0.0;          // over all entries
  double mean_abs_offdiag = 0.0;  // over off-diagonal entries
  double max_entry = 0.0;
  double frac_clipped = 0.0;      // fraction pinned at either ceiling
};

SimilarityReport feature_similarity(const Critic& critic, const Matrix& s, const Matrix& a,
                                    double clip = 10000.0);

// Probe Q-values at one checkpoint, against the unit-reward return bound.
struct QTraceEntry {
  long step = 0;
  double bound = 0.0;  // 1 / (1 - gamma)
  Vector q;
  double max_abs_q = 0.0;
  double frac_above_bound = 0.0;  // fraction with |q| > bound
};

QTraceEntry q_trace(const Critic& critic, const Matrix& s, const Matrix& a, double gamma,
                    long step);

// Per-dimension normalized action frequencies over [-1, 1].
struct ActionHistogram {
  int bins = 0;
  long samples = 0;
  Matrix freq;               // act_dim x bins, rows sum to 1
  Vector bang_bang;          // per-dimension mass in the two extreme bins
  double bang_bang_index = 0.0;  // mean of bang_bang over dimensions
};

ActionHistogram action_histogram(const std::vector<Trajectory>& trajectories, int bins);

// Exact dQ/da over a 2-D slice of the action space; the remaining action
// coordinates stay at base_action.
struct GradientField {
  int dim1 = 0, dim2 = 1;
  Vector axis;    // shared grid coordinates, length n
  Matrix q;       // n x n, q(i, j) at (axis(i), axis(j))
  Matrix dq_d1;   // n x n
  Matrix dq_d2;   // n x n
};

GradientField q_action_gradient_field(const Critic& critic, const Vector& s,
                                      const Vector& base_action, int dim1, int dim2, int n,
                                      double lo = -1.0, double hi = 1.0);

// Per-episode outcome records, grouped by seed.
struct EpisodeRecord {
  double episode_return = 0.0;
  bool success = false;
  bool fault = false;
};

struct SeedSeries {
  std::uint64_t seed = 0;
  std::vector<EpisodeRecord> episodes;
};

// Windowed rates per seed plus the cross-seed interquartile mean with
// stratified (seed-level) percentile-bootstrap confidence intervals.
struct RunStatistics {
  int window = 0;
  int points = 0;
  std::vector<double> episode_axis;  // last episode index of each window (1-based)
  Matrix success_rate;               // seeds x points
  Matrix fault_rate;                 // seeds x points
  Matrix mean_return;                // seeds x points
  std::vector<double> success_iqm;
  std::vector<double> success_ci_lo, success_ci_hi;
  std::vector<double> return_iqm;
  std::vector<double> return_ci_lo, return_ci_hi;
  bool ci_valid = false;  // false with fewer than 2 seeds
};

// Fractional-trim interquartile mean (middle 50% by weight).
double interquartile_mean(std::vector<double> values);

RunStatistics run_statistics(const std::vector<SeedSeries>& seeds, int window,
                             int bootstrap_resamples = 2000, std::uint64_t bootstrap_seed = 0);

}  // namespace simpleq
