#pragma once

#include <functional>
#include <memory>
#include <string>
#include <vector>

#include "simpleq/common.hpp"

namespace simpleq {

// One truncated episode. observations has L+1 columns (includes the state
// after the final step); actions/rewards have L entries.
struct Trajectory {
  Matrix observations;
  Matrix actions;
  Vector rewards;
  bool fault = false;
  std::string env_name;
  std::uint64_t seed = 0;
  std::string policy_id;
  int horizon = 0;

  Eigen::Index length() const { return actions.cols(); }
  double episode_return() const { return rewards.size() ? rewards.sum() : 0.0; }
};

struct StepResult {
  Vector observation;
  double reward = 0.0;
  bool truncated = false;
  bool fault = false;
};

// Episodes end by horizon or fault only, never by task success.
class Env {
 public:
  virtual ~Env() = default;
  virtual Vector reset(std::uint64_t seed) = 0;
  virtual StepResult step(const Vector& action) = 0;
  virtual Eigen::Index obs_dim() const = 0;
  virtual Eigen::Index act_dim() const = 0;
  virtual int horizon() const = 0;
  virtual const std::string& name() const = 0;
  // Scripted demonstrator action for the current internal state.
  virtual Vector expert_action(Rng& rng) const = 0;
};

// Point mass tracking a goal. Action is a velocity in [-1,1]^2 integrated at
// fixed dt; reward is the negative post-move distance to the goal. State
// observations are [x, goal - x]; the image variant emits a 16x16 arrow
// raster of goal - x instead.
class ReacherEnv : public Env {
 public:
  static constexpr double kDt = 0.1;
  static constexpr int kHorizon = 40;
  static constexpr double kGain = 2.0;          // demonstrator gain K
  static constexpr double kSuccessDist = 0.05;  // final-distance success bar
  static constexpr int kImageSize = 16;

  explicit ReacherEnv(bool image_obs = false) : image_obs_(image_obs) {}

  Vector reset(std::uint64_t seed) override;
  StepResult step(const Vector& action) override;
  Eigen::Index obs_dim() const override { return image_obs_ ? kImageSize * kImageSize : 4; }
  Eigen::Index act_dim() const override { return 2; }
  int horizon() const override { return kHorizon; }
  const std::string& name() const override { return name_; }
  Vector expert_action(Rng& rng) const override;

  const Vector& position() const { return pos_; }
  const Vector& goal() const { return goal_; }

 private:
  Vector observe() const;

  bool image_obs_;
  std::string name_ = image_obs_ ? "reacher_image" : "reacher";
  Vector pos_{2};
  Vector goal_{2};
  int t_ = 0;
};

// Proportional controller toward the goal, elementwise-clipped to [-1,1].
Vector reacher_expert_action(const Vector& x_curr, const Vector& x_goal, double gain);

// Grayscale arrow raster encoding a position delta: an anchor dot at the
// image center, a line toward the (scaled) delta, and a bright tip blob.
// Depends only on the delta; pixels in [0,1], row-major flattened.
Vector render_arrow(const Vector& delta, int size = ReacherEnv::kImageSize);

// Planar gripper above a bin. Action is [vx, vy, grip]; position integrates
// the clipped velocity at fixed dt inside the unit square. Grip > 0 within
// eps_grab of the item picks it up; the held item tracks the gripper and is
// dropped when grip goes nonpositive. Reward is 1 per step while the held
// item sits above the lift threshold. Leaving the workspace is a fault that
// truncates the episode early; otherwise episodes run exactly the horizon.
// Observation: [gripper(2), item(2), holding].
class GraspEnv : public Env {
 public:
  static constexpr double kDt = 0.05;
  static constexpr int kHorizon = 60;
  static constexpr double kEpsGrab = 0.05;
  static constexpr double kBinTop = 0.35;
  static constexpr double kLiftThreshold = kBinTop + 0.2;

  Vector reset(std::uint64_t seed) override;
  StepResult step(const Vector& action) override;
  Eigen::Index obs_dim() const override { return 5; }
  Eigen::Index act_dim() const override { return 3; }
  int horizon() const override { return kHorizon; }
  const std::string& name() const override { return name_; }
  Vector expert_action(Rng& rng) const override;

  const Vector& gripper() const { return pos_; }
  const Vector& item() const { return item_; }
  bool holding() const { return holding_; }

 private:
  Vector observe() const;

  std::string name_ = "grasp";
  Vector pos_{2};
  Vector item_{2};
  bool holding_ = false;
  int t_ = 0;
};

std::unique_ptr<Env> make_env(const std::string& name);

// Success is an episode-level label derived from logged rewards: positive
// return for grasp, final step within the distance bar for reacher.
bool trajectory_success(const Trajectory& traj);

using ActionFn = std::function<Vector(const Vector& obs)>;

Trajectory rollout(Env& env, std::uint64_t episode_seed, const ActionFn& act,
                   const std::string& policy_id);

struct CollectionError : std::runtime_error {
  using std::runtime_error::runtime_error;
};

// M scripted-demonstrator episodes. With success_filter, failed episodes are
// discarded and retried; the retry budget is 4M + 200 attempts.
std::vector<Trajectory> collect_demonstrations(Env& env, int m, bool success_filter,
                                               std::uint64_t seed);

std::vector<Trajectory> collect_random(Env& env, int m, std::uint64_t seed);

void save_trajectories(const std::string& path, const std::vector<Trajectory>& trajs);
std::vector<Trajectory> load_trajectories(const std::string& path);

}  // namespace simpleq
