#include "simpleq/diagnostics.hpp"

#include <algorithm>
#include <cmath>
#include <cstdio>

namespace simpleq {

SimilarityReport feature_similarity(const Critic& critic, const Matrix& s, const Matrix& a,
                                    double clip_ceiling) {
  const Eigen::Index n = s.cols();
  if (n < 2) throw ConfigError("feature similarity needs at least two probe pairs");
  if (clip_ceiling <= 0.0) throw ConfigError("clip ceiling must be positive");

  Matrix phi = critic_forward(critic, s, a, Mode::eval).phi;
  SimilarityReport rep;
  rep.pairs = n;
  rep.clip = clip_ceiling;
  rep.matrix = clip(Matrix(phi.transpose() * phi), -clip_ceiling, clip_ceiling);

  const double total = static_cast<double>(n) * static_cast<double>(n);
  rep.mean_abs = rep.matrix.cwiseAbs().sum() / total;
  rep.mean_abs_offdiag =
      (rep.matrix.cwiseAbs().sum() - rep.matrix.diagonal().cwiseAbs().sum()) /
      (total - static_cast<double>(n));
  rep.max_entry = rep.matrix.maxCoeff();
  rep.frac_clipped =
      (rep.matrix.cwiseAbs().array() >= clip_ceiling).cast<double>().sum() / total;
  return rep;
}

QTraceEntry q_trace(const Critic& critic, const Matrix& s, const Matrix& a, double gamma,
                    long step) {
  QTraceEntry e;
  e.step = step;
  e.bound = 1.0 / (1.0 - gamma);
  e.q = critic_forward(critic, s, a, Mode::eval).q;
  e.max_abs_q = e.q.size() ? e.q.cwiseAbs().maxCoeff() : 0.0;
  e.frac_above_bound =
      e.q.size() ? (e.q.cwiseAbs().array() > e.bound).cast<double>().mean() : 0.0;
  return e;
}

ActionHistogram action_histogram(const std::vector<Trajectory>& trajectories, int bins) {
  if (bins < 2) throw ConfigError("action histogram needs at least two bins");
  Eigen::Index act_dim = 0;
  long samples = 0;
  for (const Trajectory& t : trajectories) {
    if (t.length() == 0) continue;
    if (act_dim == 0) act_dim = t.actions.rows();
    if (t.actions.rows() != act_dim) throw ConfigError("mixed action dimensions in histogram");
    samples += t.length();
  }
  if (samples == 0) throw ConfigError("action histogram needs at least one action");

  ActionHistogram h;
  h.bins = bins;
  h.samples = samples;
  h.freq = Matrix::Zero(act_dim, bins);
  const double lo = -1.0, hi = 1.0;
  const double width = (hi - lo) / static_cast<double>(bins);
  for (const Trajectory& t : trajectories)
    for (Eigen::Index c = 0; c < t.length(); ++c)
      for (Eigen::Index d = 0; d < act_dim; ++d) {
        int bin = static_cast<int>(std::floor((t.actions(d, c) - lo) / width));
        bin = std::max(0, std::min(bins - 1, bin));
        h.freq(d, bin) += 1.0;
      }
  h.freq /= static_cast<double>(samples);
  h.bang_bang = h.freq.col(0) + h.freq.col(bins - 1);
  h.bang_bang_index = h.bang_bang.mean();
  return h;
}

GradientField q_action_gradient_field(const Critic& critic, const Vector& s,
                                      const Vector& base_action, int dim1, int dim2, int n,
                                      double lo, double hi) {
  if (n < 2) throw ConfigError("gradient field needs a grid of at least 2x2");
  if (base_action.size() != critic.act_dim || s.size() != critic.obs_dim)
    throw ConfigError("gradient field input dimensions do not match the critic");
  if (dim1 < 0 || dim2 < 0 || dim1 >= critic.act_dim || dim2 >= critic.act_dim || dim1 == dim2)
    throw ConfigError("gradient field needs two distinct action dimensions");

  GradientField f;
  f.dim1 = dim1;
  f.dim2 = dim2;
  f.axis.resize(n);
  for (int i = 0; i < n; ++i)
    f.axis(i) = lo + (hi - lo) * static_cast<double>(i) / static_cast<double>(n - 1);

  // One forward/backward over all n^2 grid points as columns.
  const Eigen::Index total = static_cast<Eigen::Index>(n) * n;
  Matrix x(critic.obs_dim + critic.act_dim, total);
  for (int i = 0; i < n; ++i)
    for (int j = 0; j < n; ++j) {
      const Eigen::Index c = static_cast<Eigen::Index>(i) * n + j;
      x.col(c).head(critic.obs_dim) = s;
      x.col(c).tail(critic.act_dim) = base_action;
      x(critic.obs_dim + dim1, c) = f.axis(i);
      x(critic.obs_dim + dim2, c) = f.axis(j);
    }
  MlpTape tape;
  mlp_forward(critic.net, x, Mode::eval, &tape);
  MlpGradients scratch = zero_gradients(critic.net);
  Matrix din = mlp_backward_acc(critic.net, tape, Matrix::Ones(1, total), scratch);

  f.q.resize(n, n);
  f.dq_d1.resize(n, n);
  f.dq_d2.resize(n, n);
  for (int i = 0; i < n; ++i)
    for (int j = 0; j < n; ++j) {
      const Eigen::Index c = static_cast<Eigen::Index>(i) * n + j;
      f.q(i, j) = tape.output()(0, c);
      f.dq_d1(i, j) = din(critic.obs_dim + dim1, c);
      f.dq_d2(i, j) = din(critic.obs_dim + dim2, c);
    }
  return f;
}

double interquartile_mean(std::vector<double> values) {
  if (values.empty()) throw ConfigError("interquartile mean of an empty set");
  std::sort(values.begin(), values.end());
  const double k = static_cast<double>(values.size());
  const double lo = k / 4.0, hi = 3.0 * k / 4.0;
  double weighted = 0.0, weight = 0.0;
  for (std::size_t i = 0; i < values.size(); ++i) {
    const double left = std::max(lo, static_cast<double>(i));
    const double right = std::min(hi, static_cast<double>(i + 1));
    const double w = std::max(0.0, right - left);
    weighted += w * values[i];
    weight += w;
  }
  return weighted / weight;
}

namespace {

// Percentile with linear interpolation over sorted data.
double percentile(std::vector<double> sorted, double p) {
  const double idx = p * static_cast<double>(sorted.size() - 1);
  const std::size_t i = static_cast<std::size_t>(std::floor(idx));
  if (i + 1 >= sorted.size()) return sorted.back();
  const double frac = idx - static_cast<double>(i);
  return sorted[i] * (1.0 - frac) + sorted[i + 1] * frac;
}

void bootstrap_ci(const Matrix& per_seed, int resamples, Rng& rng, std::vector<double>& iqm,
                  std::vector<double>& lo, std::vector<double>& hi, bool ci_valid) {
  const Eigen::Index n_seeds = per_seed.rows();
  const Eigen::Index points = per_seed.cols();
  iqm.resize(points);
  lo.resize(points);
  hi.resize(points);
  std::vector<double> column(static_cast<std::size_t>(n_seeds));
  for (Eigen::Index p = 0; p < points; ++p) {
    for (Eigen::Index r = 0; r < n_seeds; ++r) column[static_cast<std::size_t>(r)] = per_seed(r, p);
    iqm[p] = interquartile_mean(column);
  }
  if (!ci_valid) {
    for (Eigen::Index p = 0; p < points; ++p) {
      lo[p] = iqm[p];
      hi[p] = iqm[p];
    }
    return;
  }
  // Resample seeds with replacement; one shared draw per resample keeps the
  // intervals stratified by seed across all points.
  std::vector<std::vector<double>> stats(static_cast<std::size_t>(points));
  std::vector<Eigen::Index> pick(static_cast<std::size_t>(n_seeds));
  for (int b = 0; b < resamples; ++b) {
    for (auto& idx : pick) idx = static_cast<Eigen::Index>(rng.uniform_int(static_cast<std::uint64_t>(n_seeds)));
    for (Eigen::Index p = 0; p < points; ++p) {
      for (std::size_t r = 0; r < pick.size(); ++r) column[r] = per_seed(pick[r], p);
      stats[static_cast<std::size_t>(p)].push_back(interquartile_mean(column));
    }
  }
  for (Eigen::Index p = 0; p < points; ++p) {
    std::vector<double>& v = stats[static_cast<std::size_t>(p)];
    std::sort(v.begin(), v.end());
    lo[p] = percentile(v, 0.025);
    hi[p] = percentile(v, 0.975);
  }
}

}  // namespace

RunStatistics run_statistics(const std::vector<SeedSeries>& seeds, int window,
                             int bootstrap_resamples, std::uint64_t bootstrap_seed) {
  if (seeds.empty()) throw ConfigError("run statistics need at least one seed");
  if (window < 1) throw ConfigError("window must be positive");

  std::size_t min_len = seeds.front().episodes.size();
  for (const SeedSeries& s : seeds) min_len = std::min(min_len, s.episodes.size());
  const int points = static_cast<int>(min_len) / window;
  if (points == 0) throw ConfigError("fewer episodes than one window");

  RunStatistics out;
  out.window = window;
  out.points = points;
  const Eigen::Index n_seeds = static_cast<Eigen::Index>(seeds.size());
  out.success_rate.resize(n_seeds, points);
  out.fault_rate.resize(n_seeds, points);
  out.mean_return.resize(n_seeds, points);
  for (int p = 0; p < points; ++p) out.episode_axis.push_back(static_cast<double>((p + 1) * window));

  for (Eigen::Index r = 0; r < n_seeds; ++r)
    for (int p = 0; p < points; ++p) {
      double succ = 0.0, fault = 0.0, ret = 0.0;
      for (int e = p * window; e < (p + 1) * window; ++e) {
        const EpisodeRecord& rec = seeds[static_cast<std::size_t>(r)].episodes[static_cast<std::size_t>(e)];
        succ += rec.success ? 1.0 : 0.0;
        fault += rec.fault ? 1.0 : 0.0;
        ret += rec.episode_return;
      }
      out.success_rate(r, p) = succ / window;
      out.fault_rate(r, p) = fault / window;
      out.mean_return(r, p) = ret / window;
    }

  out.ci_valid = n_seeds >= 2;
  if (!out.ci_valid)
    std::fprintf(stderr,
                 "warning: run statistics over a single seed; confidence intervals omitted\n");
  Rng rng(mix_seed(bootstrap_seed, 0xB00757));
  bootstrap_ci(out.success_rate, bootstrap_resamples, rng, out.success_iqm, out.success_ci_lo,
               out.success_ci_hi, out.ci_valid);
  bootstrap_ci(out.mean_return, bootstrap_resamples, rng, out.return_iqm, out.return_ci_lo,
               out.return_ci_hi, out.ci_valid);
  return out;
}

}  // namespace simpleq
