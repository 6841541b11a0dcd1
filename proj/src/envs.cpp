#include "simpleq/envs.hpp"

#include <algorithm>
#include <cmath>
#include <fstream>

#include "simpleq/checkpoint.hpp"

namespace simpleq {

namespace {

void require_action(const Vector& a, Eigen::Index dim, const std::string& env) {
  if (a.size() != dim)
    throw ConfigError(env + ": action size " + std::to_string(a.size()) + ", expected " +
                      std::to_string(dim));
  if (!a.allFinite()) throw ConfigError(env + ": non-finite action");
}

}  // namespace

Vector ReacherEnv::reset(std::uint64_t seed) {
  Rng rng(mix_seed(seed, 101));
  pos_ = rng.uniform_vector(2, -0.2, 0.2);
  goal_ = rng.uniform_vector(2, -0.8, 0.8);
  t_ = 0;
  return observe();
}

StepResult ReacherEnv::step(const Vector& action) {
  require_action(action, 2, name_);
  pos_ += kDt * clip(action, -1.0, 1.0);
  ++t_;
  StepResult r;
  r.reward = -(goal_ - pos_).norm();
  r.truncated = t_ >= kHorizon;
  r.observation = observe();
  return r;
}

Vector ReacherEnv::observe() const {
  if (image_obs_) return render_arrow(goal_ - pos_);
  Vector o(4);
  o << pos_, goal_ - pos_;
  return o;
}

Vector ReacherEnv::expert_action(Rng&) const {
  return reacher_expert_action(pos_, goal_, kGain);
}

Vector reacher_expert_action(const Vector& x_curr, const Vector& x_goal, double gain) {
  return clip(Vector(gain * (x_goal - x_curr)), -1.0, 1.0);
}

Vector render_arrow(const Vector& delta, int size) {
  // Pixel-space arrow vector, capped at 7 px so the tip stays inside the
  // raster for any reachable delta.
  Vector v = delta * (7.0 / 2.5);
  const double n = v.norm();
  if (n > 7.0) v *= 7.0 / n;
  const double cx = (size - 1) / 2.0;
  const double vv = v.squaredNorm();

  Vector img(size * size);
  for (int row = 0; row < size; ++row) {
    for (int col = 0; col < size; ++col) {
      const double ux = col - cx;
      const double uy = row - cx;
      // Distance to the segment [center, center+v].
      double t = 0.0;
      if (vv > 0.0) t = clip((ux * v(0) + uy * v(1)) / vv, 0.0, 1.0);
      const double dx = ux - t * v(0);
      const double dy = uy - t * v(1);
      const double d_line = std::sqrt(dx * dx + dy * dy);
      const double d_tip = std::sqrt((ux - v(0)) * (ux - v(0)) + (uy - v(1)) * (uy - v(1)));
      const double d_anchor = std::sqrt(ux * ux + uy * uy);
      const double line = 0.7 * std::max(0.0, 1.0 - d_line / 1.2);
      const double tip = std::max(0.0, 1.0 - d_tip / 1.8);
      const double anchor = 0.8 * std::max(0.0, 1.0 - d_anchor / 1.5);
      img(row * size + col) = std::max({line, tip, anchor});
    }
  }
  return img;
}

Vector GraspEnv::reset(std::uint64_t seed) {
  Rng rng(mix_seed(seed, 202));
  pos_ = Vector(2);
  pos_ << rng.uniform(0.3, 0.7), 0.8;
  item_ = Vector(2);
  item_ << rng.uniform(0.25, 0.75), rng.uniform(0.05, 0.3);
  holding_ = false;
  t_ = 0;
  return observe();
}

StepResult GraspEnv::step(const Vector& action) {
  require_action(action, 3, name_);
  const Vector v = clip(Vector(action.head(2)), -1.0, 1.0);
  const double grip = action(2);
  pos_ += kDt * v;
  ++t_;

  StepResult r;
  if (pos_(0) < 0.0 || pos_(0) > 1.0 || pos_(1) < 0.0 || pos_(1) > 1.0) {
    r.fault = true;
    r.truncated = true;
    r.observation = observe();
    return r;
  }

  if (grip > 0.0) {
    if (!holding_ && (pos_ - item_).norm() <= kEpsGrab) holding_ = true;
  } else if (holding_) {
    holding_ = false;
    item_(0) = clip(item_(0), 0.05, 0.95);
    item_(1) = 0.1;  // dropped item settles back near the bin floor
  }
  if (holding_) item_ = pos_;

  r.reward = (holding_ && item_(1) > kLiftThreshold) ? 1.0 : 0.0;
  r.truncated = t_ >= kHorizon;
  r.observation = observe();
  return r;
}

Vector GraspEnv::observe() const {
  Vector o(5);
  o << pos_, item_, holding_ ? 1.0 : 0.0;
  return o;
}

// Three phases: approach with the grip open, close the grip near the item,
// then lift straight up while holding.
Vector GraspEnv::expert_action(Rng& rng) const {
  Vector target(2);
  double grip;
  if (holding_) {
    target << pos_(0), 0.85;
    grip = 1.0;
  } else if ((pos_ - item_).norm() <= 0.6 * kEpsGrab) {
    target = item_;
    grip = 1.0;
  } else {
    target = item_;
    grip = -1.0;
  }
  Vector v = 4.0 * (target - pos_);
  v(0) += 0.05 * rng.normal();
  v(1) += 0.05 * rng.normal();
  Vector a(3);
  a << clip(v, -1.0, 1.0), grip;
  return a;
}

std::unique_ptr<Env> make_env(const std::string& name) {
  if (name == "reacher") return std::make_unique<ReacherEnv>(false);
  if (name == "reacher_image") return std::make_unique<ReacherEnv>(true);
  if (name == "grasp") return std::make_unique<GraspEnv>();
  throw ConfigError("unknown env: " + name);
}

bool trajectory_success(const Trajectory& traj) {
  if (traj.rewards.size() == 0) return false;
  if (traj.env_name == "grasp") return traj.episode_return() > 0.0;
  // Reacher reward is the negative distance, so the last reward reads back
  // the final distance.
  return traj.rewards(traj.rewards.size() - 1) > -ReacherEnv::kSuccessDist;
}

Trajectory rollout(Env& env, std::uint64_t episode_seed, const ActionFn& act,
                   const std::string& policy_id) {
  std::vector<Vector> obs;
  std::vector<Vector> actions;
  std::vector<double> rewards;
  obs.push_back(env.reset(episode_seed));
  bool fault = false;
  for (;;) {
    Vector a = act(obs.back());
    StepResult r = env.step(a);
    actions.push_back(std::move(a));
    rewards.push_back(r.reward);
    obs.push_back(r.observation);
    if (r.fault) fault = true;
    if (r.truncated) break;
  }

  Trajectory traj;
  const Eigen::Index len = static_cast<Eigen::Index>(actions.size());
  traj.observations.resize(env.obs_dim(), len + 1);
  traj.actions.resize(env.act_dim(), len);
  traj.rewards.resize(len);
  for (Eigen::Index i = 0; i <= len; ++i) traj.observations.col(i) = obs[i];
  for (Eigen::Index i = 0; i < len; ++i) {
    traj.actions.col(i) = actions[i];
    traj.rewards(i) = rewards[i];
  }
  traj.fault = fault;
  traj.env_name = env.name();
  traj.seed = episode_seed;
  traj.policy_id = policy_id;
  traj.horizon = env.horizon();
  return traj;
}

std::vector<Trajectory> collect_demonstrations(Env& env, int m, bool success_filter,
                                               std::uint64_t seed) {
  std::vector<Trajectory> out;
  Rng noise(mix_seed(seed, 303));
  const int budget = 4 * m + 200;
  for (int attempt = 0; attempt < budget && static_cast<int>(out.size()) < m; ++attempt) {
    Trajectory traj = rollout(
        env, mix_seed(seed, 1000 + attempt),
        [&](const Vector&) { return env.expert_action(noise); }, "expert");
    if (!success_filter || trajectory_success(traj)) out.push_back(std::move(traj));
  }
  if (static_cast<int>(out.size()) < m)
    throw CollectionError("demonstrator produced " + std::to_string(out.size()) + "/" +
                          std::to_string(m) + " episodes within the retry budget");
  return out;
}

std::vector<Trajectory> collect_random(Env& env, int m, std::uint64_t seed) {
  std::vector<Trajectory> out;
  Rng rng(mix_seed(seed, 404));
  const Eigen::Index act_dim = env.act_dim();
  for (int i = 0; i < m; ++i) {
    out.push_back(rollout(
        env, mix_seed(seed, 2000 + i),
        [&](const Vector&) { return rng.uniform_vector(static_cast<int>(act_dim), -1.0, 1.0); },
        "random"));
  }
  return out;
}

void save_trajectories(const std::string& path, const std::vector<Trajectory>& trajs) {
  std::ofstream out(path);
  if (!out) throw IoError("cannot open for write: " + path);
  for (const Trajectory& t : trajs) {
    Json j;
    j["env"] = t.env_name;
    j["seed"] = t.seed;
    j["policy"] = t.policy_id;
    j["horizon"] = t.horizon;
    j["fault"] = t.fault;
    j["observations"] = matrix_to_json(t.observations);
    j["actions"] = matrix_to_json(t.actions);
    j["rewards"] = vector_to_json(t.rewards);
    out << j.dump() << "\n";
  }
  if (!out) throw IoError("write failed: " + path);
}

std::vector<Trajectory> load_trajectories(const std::string& path) {
  std::ifstream in(path);
  if (!in) throw IoError("cannot open: " + path);
  std::vector<Trajectory> out;
  std::string line;
  int lineno = 0;
  while (std::getline(in, line)) {
    ++lineno;
    if (line.empty()) continue;
    Json j = Json::parse(line, nullptr, false);
    if (j.is_discarded())
      throw IoError(path + ":" + std::to_string(lineno) + ": malformed trajectory record");
    Trajectory t;
    t.env_name = j.at("env").get<std::string>();
    t.seed = j.at("seed").get<std::uint64_t>();
    t.policy_id = j.at("policy").get<std::string>();
    t.horizon = j.at("horizon").get<int>();
    t.fault = j.at("fault").get<bool>();
    t.observations = matrix_from_json(j.at("observations"));
    t.actions = matrix_from_json(j.at("actions"));
    t.rewards = vector_from_json(j.at("rewards"));
    if (t.observations.cols() != t.actions.cols() + 1 || t.rewards.size() != t.actions.cols())
      throw IoError(path + ":" + std::to_string(lineno) + ": inconsistent trajectory shapes");
    out.push_back(std::move(t));
  }
  return out;
}

}  // namespace simpleq
