#pragma once

#include <functional>
#include <string>

#include "simpleq/checkpoint.hpp"
#include "simpleq/mlp.hpp"
#include "simpleq/replay.hpp"

namespace simpleq {

enum class Algorithm { simplified_q, sac_cql, crossq, dr3, layernorm, bc };
enum class MuMode { uniform, policy };
enum class EntropyMode { fixed, auto_tune };

std::string algorithm_name(Algorithm a);
Algorithm algorithm_from_name(const std::string& s);
std::string mu_mode_name(MuMode m);
MuMode mu_mode_from_name(const std::string& s);
std::string entropy_mode_name(EntropyMode m);
EntropyMode entropy_mode_from_name(const std::string& s);

struct AgentConfig {
  Algorithm algorithm = Algorithm::simplified_q;
  double alpha = 1.0;  // pessimism penalty weight
  double beta = 0.2;   // feature regularizer weight
  int n_step = 3;
  double gamma = 0.99;
  double lr = 3e-4;
  int batch_size = 512;
  int updates_per_episode = 60;
  int ood_action_samples = 4;
  MuMode mu_mode = MuMode::uniform;
  bool weighted_cql = true;
  bool cql_data_term = true;
  double target_polyak = 0.995;
  // True when a config file names target_polyak explicitly; algorithms
  // without a target network reject that.
  bool target_polyak_set = false;
  EntropyMode entropy_mode = EntropyMode::auto_tune;
  double fixed_tau = 0.0;
  int critic_hidden = 256;
  int critic_layers = 2;
  int policy_hidden = 64;
  int policy_layers = 2;

  bool uses_target() const {
    return algorithm == Algorithm::sac_cql || algorithm == Algorithm::dr3 ||
           algorithm == Algorithm::layernorm;
  }
  bool has_critic() const { return algorithm != Algorithm::bc; }
  int num_critics() const { return has_critic() ? (uses_target() ? 2 : 1) : 0; }
  Norm critic_norm() const {
    if (algorithm == Algorithm::crossq) return Norm::batch_norm;
    if (algorithm == Algorithm::layernorm) return Norm::layer_norm;
    return Norm::none;
  }
  void validate() const;
};

Json agent_config_to_json(const AgentConfig& cfg);
AgentConfig agent_config_from_json(const Json& j);

// Tanh-squashed diagonal Gaussian. The network emits [mean; raw log-std]
// stacked per action dimension; log-std is hard-clamped to [-5, 2].
struct Policy {
  MlpParams net;
  Eigen::Index obs_dim = 0;
  Eigen::Index act_dim = 0;
};

constexpr double kLogStdMin = -5.0;
constexpr double kLogStdMax = 2.0;

Policy make_policy(Eigen::Index obs_dim, Eigen::Index act_dim, int hidden, int layers, Rng& rng);

struct PolicySample {
  Matrix a;         // act_dim x B, inside (-1, 1)
  Vector log_prob;  // B, includes the tanh change-of-variables correction
};

PolicySample policy_sample(const Policy& policy, const Matrix& s, Rng& rng);
// Deterministic given the standard-normal noise matrix (act_dim x B).
PolicySample policy_sample_with_noise(const Policy& policy, const Matrix& s, const Matrix& noise);
// Log-density of given actions (columns) under the current policy.
Vector policy_log_prob(const Policy& policy, const Matrix& s, const Matrix& a);
Matrix policy_mean_action(const Policy& policy, const Matrix& s);

// Critic with a linear, bias-free head so q is exactly the inner product of
// the last layer with the feature vector phi.
struct Critic {
  MlpParams net;
  Eigen::Index obs_dim = 0;
  Eigen::Index act_dim = 0;

  Eigen::Index feature_dim() const { return net.layers.back().in_dim(); }
  int feature_layer() const { return static_cast<int>(net.layers.size()) - 2; }
};

Critic make_critic(Eigen::Index obs_dim, Eigen::Index act_dim, int hidden, int layers, Norm norm,
                   Rng& rng);

struct CriticOutput {
  Vector q;    // B
  Matrix phi;  // feature_dim x B
};

CriticOutput critic_forward(const Critic& critic, const Matrix& s, const Matrix& a, Mode mode);
// Mutable overload: batch-norm critics update running statistics in train mode.
CriticOutput critic_forward(Critic& critic, const Matrix& s, const Matrix& a, Mode mode);

// target_i = return_i + bootstrap_i * gamma^{n_used_i} * (qbar_i - tau * logp_next_i)
Vector td_targets(const Batch& batch, const Vector& qbar, const Vector& logp_next, double gamma,
                  double tau);

// Loss cores. Each returns the scalar loss and, when grads is non-null,
// accumulates scale * d(loss)/d(params) into it. Targets and sampled actions
// enter as explicit constants, which keeps every core a deterministic
// function of the parameters.
double td_loss_core(const Critic& critic, const Matrix& s, const Matrix& a, const Vector& targets,
                    MlpGradients* grads = nullptr, double scale = 1.0);

// Out-of-distribution penalty. ood_actions holds ood_samples blocks of B
// columns. In weighted mode each draw is scaled by 1 - exp(-|a_data - a'|^2);
// with data_term the mean data Q-value is subtracted.
double cql_penalty_core(const Critic& critic, const Matrix& s, const Matrix& a_data,
                        const Matrix& ood_actions, bool weighted, bool data_term,
                        MlpGradients* grads = nullptr, double scale = 1.0);

// Mean squared feature dot product over paired columns; gradient flows into
// both branches but never into the linear head.
double ntk_reg_core(const Critic& critic, const Matrix& s1, const Matrix& a_u, const Matrix& s2,
                    const Matrix& a_pi, MlpGradients* grads = nullptr, double scale = 1.0);

// Signed mean feature dot product over logged consecutive pairs (mask picks
// the columns that carry one).
double dr3_reg_core(const Critic& critic, const Matrix& s, const Matrix& a, const Matrix& s_next,
                    const Matrix& a_next, const Vector& mask, MlpGradients* grads = nullptr,
                    double scale = 1.0);

double bc_loss_core(const Policy& policy, const Matrix& s, const Matrix& a_target,
                    MlpGradients* grads = nullptr, double scale = 1.0);

// Joint-batch TD for the batch-norm critic: one train-mode forward over
// [(s,a) | (s_target,a_next)] so both halves share batch statistics; the
// target half carries no upstream gradient. frozen_targets substitutes the
// internally computed targets (used by finite-difference checks).
double crossq_td_loss(Critic& critic, const Batch& batch, const Matrix& a_next,
                      const Vector& logp_next, double gamma, double tau,
                      MlpGradients* grads = nullptr, double scale = 1.0,
                      Vector* targets_out = nullptr, const Vector* frozen_targets = nullptr);

struct QEvalResult {
  Vector q;       // B
  Matrix dq_da;   // act_dim x B
};
using QEval = std::function<QEvalResult(const Matrix& s, const Matrix& a)>;

// Reparameterized actor objective mean(tau * log pi - Q) with frozen noise.
double actor_loss_core(const Policy& policy, const QEval& q_eval, const Matrix& s,
                       const Matrix& noise, double tau, MlpGradients* grads = nullptr,
                       double scale = 1.0, double* mean_logp = nullptr);

// Sampling wrappers over the cores.
double cql_penalty(const Critic& critic, const Matrix& s, const Matrix& a_data,
                   const Policy& policy, MuMode mu_mode, bool weighted, int ood_samples, Rng& rng);
double ntk_reg_loss(const Critic& critic, const Matrix& s1, const Matrix& s2,
                    const Policy& policy, Rng& rng);
double dr3_reg_loss(const Critic& critic, const Batch& batch);

void target_sync(MlpParams& target, const MlpParams& source, double polyak);

// Exact parameter-gradient inner product between two state-action pairs.
double ntk_kernel_estimate(const Critic& critic, const Vector& s1, const Vector& a1,
                           const Vector& s2, const Vector& a2);

struct ScalarAdam {
  double m = 0.0, v = 0.0;
  long step = 0;
  double lr = 3e-4;
};
void scalar_adam_step(double& x, double grad, ScalarAdam& state);

struct UpdateReport {
  double td = 0.0;
  double cql = 0.0;   // alpha-scaled contribution
  double reg = 0.0;   // beta-scaled contribution
  double critic_total = 0.0;
  double actor = 0.0;
  double entropy = 0.0;
  double tau = 0.0;
  double bc = 0.0;
  bool diverged = false;
};

class Agent {
 public:
  Agent(const AgentConfig& cfg, Eigen::Index obs_dim, Eigen::Index act_dim, std::uint64_t seed);

  // One gradient update: draw everything from rng, compute all losses and
  // gradients at the current parameters, then step the optimizers (critics,
  // policy, entropy coefficient) and sync targets. A non-finite loss or
  // gradient marks the report diverged and skips the step.
  UpdateReport update(const DualBuffer& buffer, Rng& rng);

  Vector act_mean(const Vector& obs) const;
  Vector act_sample(const Vector& obs, Rng& rng) const;

  const AgentConfig& config() const { return cfg_; }
  Eigen::Index obs_dim() const { return obs_dim_; }
  Eigen::Index act_dim() const { return act_dim_; }
  int num_critics() const { return static_cast<int>(critics_.size()); }
  bool has_target() const { return !targets_.empty(); }
  Critic& critic(int i = 0) { return critics_.at(static_cast<std::size_t>(i)); }
  const Critic& critic(int i = 0) const { return critics_.at(static_cast<std::size_t>(i)); }
  const MlpParams& target(int i = 0) const { return targets_.at(static_cast<std::size_t>(i)); }
  Policy& policy() { return policy_; }
  const Policy& policy() const { return policy_; }
  double tau() const;
  long updates_done() const { return updates_done_; }

  Json to_json() const;
  static Agent from_json(const Json& j);

 private:
  Agent() = default;
  UpdateReport bc_step(const DualBuffer& buffer, Rng& rng);

  AgentConfig cfg_;
  Eigen::Index obs_dim_ = 0;
  Eigen::Index act_dim_ = 0;
  Policy policy_;
  AdamState policy_adam_;
  std::vector<Critic> critics_;
  std::vector<AdamState> critic_adams_;
  std::vector<MlpParams> targets_;
  double log_tau_ = 0.0;
  ScalarAdam tau_adam_;
  long updates_done_ = 0;
};

}  // namespace simpleq
