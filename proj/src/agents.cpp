#include "simpleq/agents.hpp"

#include <algorithm>
#include <cmath>
#include <utility>

namespace simpleq {

namespace {

constexpr double kHalfLog2Pi = 0.91893853320467274178;  // 0.5 * log(2*pi)
constexpr double kLog2 = 0.69314718055994530942;

Matrix softplus(const Matrix& x) {
  // log(1 + e^x), stable on both tails.
  return (x.array().max(0.0) + (-x.array().abs()).exp().log1p()).matrix();
}

Matrix sa_input(const Matrix& s, const Matrix& a) {
  if (s.cols() != a.cols()) throw ConfigError("state/action batch sizes differ");
  Matrix x(s.rows() + a.rows(), s.cols());
  x.topRows(s.rows()) = s;
  x.bottomRows(a.rows()) = a;
  return x;
}

// Everything the squashed-Gaussian head derives from the network output and
// a standard-normal noise draw.
struct SquashParts {
  Matrix mean, raw_log_std, log_std, std, z, a;
  Vector log_prob;
};

SquashParts squash_from_output(const Matrix& out, Eigen::Index act_dim, const Matrix& noise) {
  SquashParts p;
  p.mean = out.topRows(act_dim);
  p.raw_log_std = out.bottomRows(act_dim);
  p.log_std = clip(p.raw_log_std, kLogStdMin, kLogStdMax);
  p.std = p.log_std.array().exp();
  p.z = p.mean + p.std.cwiseProduct(noise);
  p.a = p.z.array().tanh();
  // Gaussian density at the reparameterized point plus the tanh correction
  // log(1 - tanh(z)^2) = 2(log 2 - z - softplus(-2z)).
  Matrix per_dim = (-0.5 * noise.array().square() - p.log_std.array() - kHalfLog2Pi).matrix() -
                   2.0 * ((kLog2 - p.z.array()).matrix() - softplus(Matrix(-2.0 * p.z)));
  p.log_prob = per_dim.colwise().sum().transpose();
  return p;
}

Vector q_of_params(const MlpParams& net, const Matrix& s, const Matrix& a) {
  return mlp_forward(net, sa_input(s, a), Mode::eval).row(0).transpose();
}

}  // namespace

std::string algorithm_name(Algorithm a) {
  switch (a) {
    case Algorithm::simplified_q: return "simplified_q";
    case Algorithm::sac_cql: return "sac_cql";
    case Algorithm::crossq: return "crossq";
    case Algorithm::dr3: return "dr3";
    case Algorithm::layernorm: return "layernorm";
    case Algorithm::bc: return "bc";
  }
  throw ConfigError("unknown algorithm enum");
}

Algorithm algorithm_from_name(const std::string& s) {
  for (Algorithm a : {Algorithm::simplified_q, Algorithm::sac_cql, Algorithm::crossq,
                      Algorithm::dr3, Algorithm::layernorm, Algorithm::bc})
    if (algorithm_name(a) == s) return a;
  throw ConfigError("unknown algorithm: " + s);
}

std::string mu_mode_name(MuMode m) {
  return m == MuMode::uniform ? "uniform" : "policy";
}

MuMode mu_mode_from_name(const std::string& s) {
  if (s == "uniform") return MuMode::uniform;
  if (s == "policy") return MuMode::policy;
  throw ConfigError("unknown mu_mode: " + s);
}

std::string entropy_mode_name(EntropyMode m) {
  return m == EntropyMode::fixed ? "fixed" : "auto";
}

EntropyMode entropy_mode_from_name(const std::string& s) {
  if (s == "fixed") return EntropyMode::fixed;
  if (s == "auto") return EntropyMode::auto_tune;
  throw ConfigError("unknown entropy_mode: " + s);
}

void AgentConfig::validate() const {
  if (alpha < 0.0) throw ConfigError("alpha must be >= 0");
  if (beta < 0.0) throw ConfigError("beta must be >= 0");
  if (n_step < 1) throw ConfigError("n_step must be >= 1");
  if (gamma < 0.0 || gamma >= 1.0) throw ConfigError("gamma must lie in [0, 1)");
  if (lr <= 0.0) throw ConfigError("lr must be positive");
  if (batch_size <= 0 || batch_size % 2 != 0)
    throw ConfigError("batch_size must be positive and even");
  if (updates_per_episode < 0) throw ConfigError("updates_per_episode must be >= 0");
  if (ood_action_samples < 1) throw ConfigError("ood_action_samples must be >= 1");
  if (target_polyak <= 0.0 || target_polyak > 1.0)
    throw ConfigError("target_polyak must lie in (0, 1]");
  if (target_polyak_set && !uses_target())
    throw ConfigError(algorithm_name(algorithm) + " has no target network; target_polyak not applicable");
  if (fixed_tau < 0.0) throw ConfigError("fixed_tau must be >= 0");
  if (critic_hidden < 1 || critic_layers < 1 || policy_hidden < 1 || policy_layers < 1)
    throw ConfigError("network sizes must be positive");
}

Json agent_config_to_json(const AgentConfig& cfg) {
  Json j;
  j["algorithm"] = algorithm_name(cfg.algorithm);
  j["alpha"] = cfg.alpha;
  j["beta"] = cfg.beta;
  j["n_step"] = cfg.n_step;
  j["gamma"] = cfg.gamma;
  j["lr"] = cfg.lr;
  j["batch_size"] = cfg.batch_size;
  j["updates_per_episode"] = cfg.updates_per_episode;
  j["ood_action_samples"] = cfg.ood_action_samples;
  j["mu_mode"] = mu_mode_name(cfg.mu_mode);
  j["weighted_cql"] = cfg.weighted_cql;
  j["cql_data_term"] = cfg.cql_data_term;
  if (cfg.uses_target()) j["target_polyak"] = cfg.target_polyak;
  j["entropy_mode"] = entropy_mode_name(cfg.entropy_mode);
  j["fixed_tau"] = cfg.fixed_tau;
  j["critic_hidden"] = cfg.critic_hidden;
  j["critic_layers"] = cfg.critic_layers;
  j["policy_hidden"] = cfg.policy_hidden;
  j["policy_layers"] = cfg.policy_layers;
  return j;
}

AgentConfig agent_config_from_json(const Json& j) {
  static const std::vector<std::string> known = {
      "algorithm",      "alpha",         "beta",        "n_step",
      "gamma",          "lr",            "batch_size",  "updates_per_episode",
      "ood_action_samples", "mu_mode",   "weighted_cql", "cql_data_term",
      "target_polyak",  "entropy_mode",  "fixed_tau",   "critic_hidden",
      "critic_layers",  "policy_hidden", "policy_layers"};
  for (const auto& [key, value] : j.items()) {
    (void)value;
    if (std::find(known.begin(), known.end(), key) == known.end())
      throw ConfigError("unknown agent config key: " + key);
  }
  AgentConfig cfg;
  if (j.contains("algorithm")) cfg.algorithm = algorithm_from_name(j.at("algorithm"));
  if (j.contains("alpha")) cfg.alpha = j.at("alpha").get<double>();
  if (j.contains("beta")) cfg.beta = j.at("beta").get<double>();
  if (j.contains("n_step")) cfg.n_step = j.at("n_step").get<int>();
  if (j.contains("gamma")) cfg.gamma = j.at("gamma").get<double>();
  if (j.contains("lr")) cfg.lr = j.at("lr").get<double>();
  if (j.contains("batch_size")) cfg.batch_size = j.at("batch_size").get<int>();
  if (j.contains("updates_per_episode"))
    cfg.updates_per_episode = j.at("updates_per_episode").get<int>();
  if (j.contains("ood_action_samples"))
    cfg.ood_action_samples = j.at("ood_action_samples").get<int>();
  if (j.contains("mu_mode")) cfg.mu_mode = mu_mode_from_name(j.at("mu_mode"));
  if (j.contains("weighted_cql")) cfg.weighted_cql = j.at("weighted_cql").get<bool>();
  if (j.contains("cql_data_term")) cfg.cql_data_term = j.at("cql_data_term").get<bool>();
  if (j.contains("target_polyak")) {
    cfg.target_polyak = j.at("target_polyak").get<double>();
    cfg.target_polyak_set = true;
  }
  if (j.contains("entropy_mode")) cfg.entropy_mode = entropy_mode_from_name(j.at("entropy_mode"));
  if (j.contains("fixed_tau")) cfg.fixed_tau = j.at("fixed_tau").get<double>();
  if (j.contains("critic_hidden")) cfg.critic_hidden = j.at("critic_hidden").get<int>();
  if (j.contains("critic_layers")) cfg.critic_layers = j.at("critic_layers").get<int>();
  if (j.contains("policy_hidden")) cfg.policy_hidden = j.at("policy_hidden").get<int>();
  if (j.contains("policy_layers")) cfg.policy_layers = j.at("policy_layers").get<int>();
  cfg.validate();
  return cfg;
}

Policy make_policy(Eigen::Index obs_dim, Eigen::Index act_dim, int hidden, int layers, Rng& rng) {
  Policy p;
  p.obs_dim = obs_dim;
  p.act_dim = act_dim;
  std::vector<Eigen::Index> widths(static_cast<std::size_t>(layers), hidden);
  p.net = make_mlp(obs_dim, widths, 2 * act_dim, Activation::tanh_fn, Norm::none, rng);
  return p;
}

PolicySample policy_sample(const Policy& policy, const Matrix& s, Rng& rng) {
  return policy_sample_with_noise(policy, s, rng.normal_matrix(policy.act_dim, s.cols()));
}

PolicySample policy_sample_with_noise(const Policy& policy, const Matrix& s, const Matrix& noise) {
  Matrix out = mlp_forward(policy.net, s, Mode::eval);
  SquashParts p = squash_from_output(out, policy.act_dim, noise);
  return {std::move(p.a), std::move(p.log_prob)};
}

Vector policy_log_prob(const Policy& policy, const Matrix& s, const Matrix& a) {
  Matrix out = mlp_forward(policy.net, s, Mode::eval);
  Matrix mean = out.topRows(policy.act_dim);
  Matrix log_std = clip(Matrix(out.bottomRows(policy.act_dim)), kLogStdMin, kLogStdMax);
  Matrix std = log_std.array().exp();
  Matrix a_safe = clip(a, -1.0 + 1e-12, 1.0 - 1e-12);
  Matrix z = a_safe.array().atanh();
  Matrix eps = (z - mean).cwiseQuotient(std);
  Matrix per_dim = (-0.5 * eps.array().square() - log_std.array() - kHalfLog2Pi).matrix() -
                   2.0 * ((kLog2 - z.array()).matrix() - softplus(Matrix(-2.0 * z)));
  return per_dim.colwise().sum().transpose();
}

Matrix policy_mean_action(const Policy& policy, const Matrix& s) {
  Matrix out = mlp_forward(policy.net, s, Mode::eval);
  return out.topRows(policy.act_dim).array().tanh();
}

Critic make_critic(Eigen::Index obs_dim, Eigen::Index act_dim, int hidden, int layers, Norm norm,
                   Rng& rng) {
  Critic c;
  c.obs_dim = obs_dim;
  c.act_dim = act_dim;
  std::vector<Eigen::Index> widths(static_cast<std::size_t>(layers), hidden);
  // Bias-free linear head: q is exactly w . phi.
  c.net = make_mlp(obs_dim + act_dim, widths, 1, Activation::relu, norm, rng, false);
  return c;
}

namespace {

CriticOutput critic_output_from_tape(const MlpTape& tape) {
  CriticOutput out;
  out.q = tape.output().row(0).transpose();
  out.phi = tape.penultimate();
  return out;
}

}  // namespace

CriticOutput critic_forward(const Critic& critic, const Matrix& s, const Matrix& a, Mode mode) {
  MlpTape tape;
  mlp_forward(critic.net, sa_input(s, a), mode, &tape);
  return critic_output_from_tape(tape);
}

CriticOutput critic_forward(Critic& critic, const Matrix& s, const Matrix& a, Mode mode) {
  MlpTape tape;
  mlp_forward(critic.net, sa_input(s, a), mode, &tape);
  return critic_output_from_tape(tape);
}

Vector td_targets(const Batch& batch, const Vector& qbar, const Vector& logp_next, double gamma,
                  double tau) {
  const Eigen::Index b = batch.size();
  if (qbar.size() != b || logp_next.size() != b) throw ConfigError("td_targets size mismatch");
  Vector y(b);
  for (Eigen::Index i = 0; i < b; ++i) {
    const double discount = std::pow(gamma, batch.n_used(i));
    y(i) = batch.n_step_return(i) +
           batch.bootstrap_mask(i) * discount * (qbar(i) - tau * logp_next(i));
  }
  return y;
}

double td_loss_core(const Critic& critic, const Matrix& s, const Matrix& a, const Vector& targets,
                    MlpGradients* grads, double scale) {
  const Eigen::Index b = s.cols();
  if (b == 0) throw ConfigError("empty batch");
  MlpTape tape;
  mlp_forward(critic.net, sa_input(s, a), Mode::eval, &tape);
  Vector diff = tape.output().row(0).transpose() - targets;
  const double loss = diff.squaredNorm() / static_cast<double>(b);
  if (grads) {
    Matrix up = (2.0 * scale / static_cast<double>(b)) * diff.transpose();
    mlp_backward_acc(critic.net, tape, up, *grads);
  }
  return loss;
}

double cql_penalty_core(const Critic& critic, const Matrix& s, const Matrix& a_data,
                        const Matrix& ood_actions, bool weighted, bool data_term,
                        MlpGradients* grads, double scale) {
  const Eigen::Index b = s.cols();
  const Eigen::Index total = ood_actions.cols();
  if (b == 0 || total == 0 || total % b != 0)
    throw ConfigError("ood actions must come in whole blocks of the batch");
  const Eigen::Index m = total / b;

  Matrix x(s.rows() + a_data.rows(), total + b);
  for (Eigen::Index k = 0; k < m; ++k) {
    x.block(0, k * b, s.rows(), b) = s;
    x.block(s.rows(), k * b, a_data.rows(), b) = ood_actions.middleCols(k * b, b);
  }
  x.block(0, total, s.rows(), b) = s;
  x.block(s.rows(), total, a_data.rows(), b) = a_data;

  MlpTape tape;
  mlp_forward(critic.net, x, Mode::eval, &tape);
  Vector q = tape.output().row(0).transpose();

  Vector w = Vector::Ones(total);
  if (weighted) {
    for (Eigen::Index k = 0; k < m; ++k)
      for (Eigen::Index i = 0; i < b; ++i) {
        const double d2 = (ood_actions.col(k * b + i) - a_data.col(i)).squaredNorm();
        w(k * b + i) = 1.0 - std::exp(-d2);
      }
  }
  const double ood_mean = w.dot(q.head(total)) / static_cast<double>(total);
  const double data_mean = q.tail(b).mean();
  const double loss = ood_mean - (data_term ? data_mean : 0.0);

  if (grads) {
    Matrix up(1, total + b);
    up.row(0).head(total) = (scale / static_cast<double>(total)) * w.transpose();
    up.row(0).tail(b).setConstant(data_term ? -scale / static_cast<double>(b) : 0.0);
    mlp_backward_acc(critic.net, tape, up, *grads);
  }
  return loss;
}

double ntk_reg_core(const Critic& critic, const Matrix& s1, const Matrix& a_u, const Matrix& s2,
                    const Matrix& a_pi, MlpGradients* grads, double scale) {
  const Eigen::Index b = s1.cols();
  if (b == 0 || s2.cols() != b) throw ConfigError("regularizer state batches must pair up");
  MlpTape tape1, tape2;
  mlp_forward(critic.net, sa_input(s1, a_u), Mode::eval, &tape1);
  mlp_forward(critic.net, sa_input(s2, a_pi), Mode::eval, &tape2);
  const Matrix& phi1 = tape1.penultimate();
  const Matrix& phi2 = tape2.penultimate();
  Vector dots = (phi1.array() * phi2.array()).colwise().sum().transpose();
  const double loss = dots.squaredNorm() / static_cast<double>(b);
  if (grads) {
    Vector coeff = (2.0 * scale / static_cast<double>(b)) * dots;
    Matrix up1 = phi2.array().rowwise() * coeff.transpose().array();
    Matrix up2 = phi1.array().rowwise() * coeff.transpose().array();
    mlp_backward_acc(critic.net, tape1, up1, *grads, critic.feature_layer());
    mlp_backward_acc(critic.net, tape2, up2, *grads, critic.feature_layer());
  }
  return loss;
}

double dr3_reg_core(const Critic& critic, const Matrix& s, const Matrix& a, const Matrix& s_next,
                    const Matrix& a_next, const Vector& mask, MlpGradients* grads, double scale) {
  const double count = mask.sum();
  if (count == 0.0) return 0.0;
  MlpTape tape1, tape2;
  mlp_forward(critic.net, sa_input(s, a), Mode::eval, &tape1);
  mlp_forward(critic.net, sa_input(s_next, a_next), Mode::eval, &tape2);
  const Matrix& phi1 = tape1.penultimate();
  const Matrix& phi2 = tape2.penultimate();
  Vector dots = (phi1.array() * phi2.array()).colwise().sum().transpose();
  const double loss = mask.dot(dots) / count;
  if (grads) {
    Vector coeff = (scale / count) * mask;
    Matrix up1 = phi2.array().rowwise() * coeff.transpose().array();
    Matrix up2 = phi1.array().rowwise() * coeff.transpose().array();
    mlp_backward_acc(critic.net, tape1, up1, *grads, critic.feature_layer());
    mlp_backward_acc(critic.net, tape2, up2, *grads, critic.feature_layer());
  }
  return loss;
}

double bc_loss_core(const Policy& policy, const Matrix& s, const Matrix& a_target,
                    MlpGradients* grads, double scale) {
  const Eigen::Index b = s.cols();
  if (b == 0) throw ConfigError("empty batch");
  MlpTape tape;
  mlp_forward(policy.net, s, Mode::eval, &tape);
  Matrix mean = tape.output().topRows(policy.act_dim);
  Matrix a_pred = mean.array().tanh();
  Matrix diff = a_pred - a_target;
  const double loss = diff.squaredNorm() / static_cast<double>(b);
  if (grads) {
    Matrix up = Matrix::Zero(tape.output().rows(), b);
    up.topRows(policy.act_dim) =
        (2.0 * scale / static_cast<double>(b)) *
        (diff.array() * (1.0 - a_pred.array().square())).matrix();
    mlp_backward_acc(policy.net, tape, up, *grads);
  }
  return loss;
}

double crossq_td_loss(Critic& critic, const Batch& batch, const Matrix& a_next,
                      const Vector& logp_next, double gamma, double tau, MlpGradients* grads,
                      double scale, Vector* targets_out, const Vector* frozen_targets) {
  const Eigen::Index b = batch.size();
  if (b == 0) throw ConfigError("empty batch");
  Matrix x(critic.obs_dim + critic.act_dim, 2 * b);
  x.leftCols(b) = sa_input(batch.s, batch.a);
  x.rightCols(b) = sa_input(batch.s_target, a_next);
  MlpTape tape;
  mlp_forward(critic.net, x, Mode::train, &tape);
  Vector q_all = tape.output().row(0).transpose();
  Vector q_pred = q_all.head(b);
  Vector y = frozen_targets ? *frozen_targets
                            : td_targets(batch, Vector(q_all.tail(b)), logp_next, gamma, tau);
  if (targets_out) *targets_out = y;
  Vector diff = q_pred - y;
  const double loss = diff.squaredNorm() / static_cast<double>(b);
  if (grads) {
    // Semi-gradient: the target half carries no upstream, but its columns
    // still shape the shared batch statistics.
    Matrix up = Matrix::Zero(1, 2 * b);
    up.row(0).head(b) = (2.0 * scale / static_cast<double>(b)) * diff.transpose();
    mlp_backward_acc(critic.net, tape, up, *grads);
  }
  return loss;
}

double actor_loss_core(const Policy& policy, const QEval& q_eval, const Matrix& s,
                       const Matrix& noise, double tau, MlpGradients* grads, double scale,
                       double* mean_logp) {
  const Eigen::Index b = s.cols();
  if (b == 0) throw ConfigError("empty batch");
  MlpTape tape;
  Matrix out = mlp_forward(policy.net, s, Mode::eval, &tape);
  SquashParts p = squash_from_output(out, policy.act_dim, noise);
  QEvalResult qr = q_eval(s, p.a);
  const double loss = (tau * p.log_prob - qr.q).mean();
  if (mean_logp) *mean_logp = p.log_prob.mean();
  if (grads) {
    const double inv_b = 1.0 / static_cast<double>(b);
    // d loss / dz: the tanh-correction term contributes tau*2a; the Q term
    // enters through a = tanh(z).
    Matrix dz = inv_b * (tau * 2.0 * p.a.array() -
                         qr.dq_da.array() * (1.0 - p.a.array().square()))
                            .matrix();
    Matrix dmean = dz;
    // d loss / d log_std: z moves by std*eps, and the Gaussian log-density
    // contributes a constant -1 per dimension.
    Matrix dlog_std = (dz.array() * p.std.array() * noise.array() - tau * inv_b).matrix();
    // Hard clamp: no gradient outside the active range.
    Matrix in_range = ((p.raw_log_std.array() > kLogStdMin) &&
                       (p.raw_log_std.array() < kLogStdMax))
                          .cast<double>();
    Matrix up(out.rows(), b);
    up.topRows(policy.act_dim) = scale * dmean;
    up.bottomRows(policy.act_dim) = scale * dlog_std.cwiseProduct(in_range);
    mlp_backward_acc(policy.net, tape, up, *grads);
  }
  return loss;
}

double cql_penalty(const Critic& critic, const Matrix& s, const Matrix& a_data,
                   const Policy& policy, MuMode mu_mode, bool weighted, int ood_samples,
                   Rng& rng) {
  const Eigen::Index b = s.cols();
  Matrix ood;
  if (mu_mode == MuMode::uniform) {
    ood = rng.uniform_matrix(critic.act_dim, b * ood_samples, -1.0, 1.0);
  } else {
    Matrix s_rep(s.rows(), b * ood_samples);
    for (int k = 0; k < ood_samples; ++k) s_rep.middleCols(k * b, b) = s;
    ood = policy_sample(policy, s_rep, rng).a;
  }
  return cql_penalty_core(critic, s, a_data, ood, weighted, true);
}

double ntk_reg_loss(const Critic& critic, const Matrix& s1, const Matrix& s2,
                    const Policy& policy, Rng& rng) {
  Matrix a_u = rng.uniform_matrix(critic.act_dim, s1.cols(), -1.0, 1.0);
  Matrix a_pi = policy_sample(policy, s2, rng).a;
  return ntk_reg_core(critic, s1, a_u, s2, a_pi);
}

double dr3_reg_loss(const Critic& critic, const Batch& batch) {
  return dr3_reg_core(critic, batch.s, batch.a, batch.s_next, batch.a_next, batch.has_next_mask);
}

void target_sync(MlpParams& target, const MlpParams& source, double polyak) {
  if (target.layers.size() != source.layers.size()) throw ConfigError("target shape mismatch");
  const double p = polyak;
  for (std::size_t i = 0; i < target.layers.size(); ++i) {
    LayerParams& t = target.layers[i];
    const LayerParams& s = source.layers[i];
    t.weight = p * t.weight + (1.0 - p) * s.weight;
    if (t.bias.size() > 0) t.bias = p * t.bias + (1.0 - p) * s.bias;
    if (t.gamma.size() > 0) {
      t.gamma = p * t.gamma + (1.0 - p) * s.gamma;
      t.beta = p * t.beta + (1.0 - p) * s.beta;
    }
    if (t.running_mean.size() > 0) {
      t.running_mean = p * t.running_mean + (1.0 - p) * s.running_mean;
      t.running_var = p * t.running_var + (1.0 - p) * s.running_var;
    }
  }
  target.version += 1;
}

double ntk_kernel_estimate(const Critic& critic, const Vector& s1, const Vector& a1,
                           const Vector& s2, const Vector& a2) {
  auto grad_of = [&](const Vector& s, const Vector& a) {
    Matrix x(s.size() + a.size(), 1);
    x.col(0).head(s.size()) = s;
    x.col(0).tail(a.size()) = a;
    MlpTape tape;
    mlp_forward(critic.net, x, Mode::eval, &tape);
    MlpGradients g = mlp_backward(critic.net, tape, Matrix::Ones(1, 1));
    return flatten_gradients(g);
  };
  return grad_of(s1, a1).dot(grad_of(s2, a2));
}

void scalar_adam_step(double& x, double grad, ScalarAdam& state) {
  if (!std::isfinite(grad)) throw DivergenceFault("non-finite entropy-coefficient gradient");
  constexpr double b1 = 0.9, b2 = 0.999, eps = 1e-8;
  state.step += 1;
  state.m = b1 * state.m + (1.0 - b1) * grad;
  state.v = b2 * state.v + (1.0 - b2) * grad * grad;
  const double mhat = state.m / (1.0 - std::pow(b1, static_cast<double>(state.step)));
  const double vhat = state.v / (1.0 - std::pow(b2, static_cast<double>(state.step)));
  x -= state.lr * mhat / (std::sqrt(vhat) + eps);
}

Agent::Agent(const AgentConfig& cfg, Eigen::Index obs_dim, Eigen::Index act_dim,
             std::uint64_t seed)
    : cfg_(cfg), obs_dim_(obs_dim), act_dim_(act_dim) {
  cfg_.validate();
  Rng rng(mix_seed(seed, 0xA6E17));
  policy_ = make_policy(obs_dim, act_dim, cfg_.policy_hidden, cfg_.policy_layers, rng);
  policy_adam_ = make_adam(policy_.net, cfg_.lr);
  for (int k = 0; k < cfg_.num_critics(); ++k) {
    critics_.push_back(
        make_critic(obs_dim, act_dim, cfg_.critic_hidden, cfg_.critic_layers, cfg_.critic_norm(), rng));
    critic_adams_.push_back(make_adam(critics_.back().net, cfg_.lr));
    if (cfg_.uses_target()) targets_.push_back(critics_.back().net);
  }
  log_tau_ = std::log(0.1);
  tau_adam_.lr = cfg_.lr;
}

double Agent::tau() const {
  return cfg_.entropy_mode == EntropyMode::fixed ? cfg_.fixed_tau : std::exp(log_tau_);
}

Vector Agent::act_mean(const Vector& obs) const {
  return policy_mean_action(policy_, Matrix(obs)).col(0);
}

Vector Agent::act_sample(const Vector& obs, Rng& rng) const {
  return policy_sample(policy_, Matrix(obs), rng).a.col(0);
}

UpdateReport Agent::bc_step(const DualBuffer& buffer, Rng& rng) {
  UpdateReport report;
  Batch batch = to_batch(buffer.sample_symmetric(cfg_.batch_size, rng));
  MlpGradients grads = zero_gradients(policy_.net);
  report.bc = bc_loss_core(policy_, batch.s, batch.a, &grads);
  if (!std::isfinite(report.bc) || !grads.all_finite()) {
    report.diverged = true;
    return report;
  }
  adam_step(policy_.net, grads, policy_adam_);
  ++updates_done_;
  return report;
}

UpdateReport Agent::update(const DualBuffer& buffer, Rng& rng) {
  if (cfg_.algorithm == Algorithm::bc) return bc_step(buffer, rng);

  const Eigen::Index act = act_dim_;
  const int b = cfg_.batch_size;
  const double tau_now = tau();
  UpdateReport report;
  report.tau = tau_now;

  // Draw order is fixed: batch, actor noise, next-action noise, pessimism
  // actions, regularizer states/actions. Everything below is evaluated at
  // the pre-step parameters, then all optimizers step at once.
  Batch batch = to_batch(buffer.sample_symmetric(b, rng));
  Matrix noise_actor = rng.normal_matrix(act, b);
  Matrix noise_next = rng.normal_matrix(act, b);

  const bool use_cql = cfg_.algorithm != Algorithm::crossq && cfg_.alpha != 0.0;
  Matrix mu_actions;
  if (use_cql) {
    const Eigen::Index total = static_cast<Eigen::Index>(b) * cfg_.ood_action_samples;
    if (cfg_.mu_mode == MuMode::uniform) {
      mu_actions = rng.uniform_matrix(act, total, -1.0, 1.0);
    } else {
      Matrix s_rep(obs_dim_, total);
      for (int k = 0; k < cfg_.ood_action_samples; ++k) s_rep.middleCols(k * b, b) = batch.s;
      mu_actions = policy_sample_with_noise(policy_, s_rep, rng.normal_matrix(act, total)).a;
    }
  }

  const bool use_ntk_reg = cfg_.algorithm == Algorithm::simplified_q && cfg_.beta != 0.0;
  Matrix reg_s1, reg_s2, reg_a_u, reg_noise;
  if (use_ntk_reg) {
    reg_s1 = buffer.sample_states(b, rng);
    reg_s2 = buffer.sample_states(b, rng);
    reg_a_u = rng.uniform_matrix(act, b, -1.0, 1.0);
    reg_noise = rng.normal_matrix(act, b);
  }

  // Actor objective at the pre-step critic(s).
  QEval q_eval = [this](const Matrix& s, const Matrix& a) {
    QEvalResult r;
    Matrix x = sa_input(s, a);
    std::vector<Vector> qs;
    std::vector<Matrix> dq;
    for (const Critic& c : critics_) {
      MlpTape tape;
      mlp_forward(c.net, x, Mode::eval, &tape);
      MlpGradients scratch = zero_gradients(c.net);
      Matrix din = mlp_backward_acc(c.net, tape, Matrix::Ones(1, x.cols()), scratch);
      qs.push_back(tape.output().row(0).transpose());
      dq.push_back(din.bottomRows(act_dim_));
    }
    if (qs.size() == 1) return QEvalResult{qs[0], dq[0]};
    r.q.resize(qs[0].size());
    r.dq_da.resize(act_dim_, qs[0].size());
    for (Eigen::Index i = 0; i < r.q.size(); ++i) {
      const int pick = qs[0](i) <= qs[1](i) ? 0 : 1;
      r.q(i) = qs[pick](i);
      r.dq_da.col(i) = dq[static_cast<std::size_t>(pick)].col(i);
    }
    return r;
  };
  MlpGradients actor_grads = zero_gradients(policy_.net);
  double mean_logp = 0.0;
  report.actor =
      actor_loss_core(policy_, q_eval, batch.s, noise_actor, tau_now, &actor_grads, 1.0, &mean_logp);
  report.entropy = -mean_logp;

  // Bootstrap action at the next state, from the pre-step policy.
  PolicySample next = policy_sample_with_noise(policy_, batch.s_target, noise_next);

  std::vector<MlpGradients> critic_grads;
  double td_sum = 0.0, cql_sum = 0.0, reg_sum = 0.0;
  if (cfg_.algorithm == Algorithm::crossq) {
    critic_grads.push_back(zero_gradients(critics_[0].net));
    td_sum = crossq_td_loss(critics_[0], batch, next.a, next.log_prob, cfg_.gamma, tau_now,
                            &critic_grads[0]);
  } else {
    Vector qbar;
    if (cfg_.uses_target()) {
      Vector q0 = q_of_params(targets_[0], batch.s_target, next.a);
      Vector q1 = q_of_params(targets_[1], batch.s_target, next.a);
      qbar = q0.cwiseMin(q1);
    } else {
      qbar = critic_forward(std::as_const(critics_[0]), batch.s_target, next.a, Mode::eval).q;
    }
    Vector y = td_targets(batch, qbar, next.log_prob, cfg_.gamma, tau_now);
    for (std::size_t k = 0; k < critics_.size(); ++k) {
      critic_grads.push_back(zero_gradients(critics_[k].net));
      td_sum += td_loss_core(critics_[k], batch.s, batch.a, y, &critic_grads[k]);
      if (use_cql)
        cql_sum += cfg_.alpha * cql_penalty_core(critics_[k], batch.s, batch.a, mu_actions,
                                                 cfg_.weighted_cql, cfg_.cql_data_term,
                                                 &critic_grads[k], cfg_.alpha);
      if (cfg_.algorithm == Algorithm::dr3 && cfg_.beta != 0.0)
        reg_sum += cfg_.beta * dr3_reg_core(critics_[k], batch.s, batch.a, batch.s_next,
                                            batch.a_next, batch.has_next_mask, &critic_grads[k],
                                            cfg_.beta);
    }
    if (use_ntk_reg) {
      Matrix reg_a_pi = policy_sample_with_noise(policy_, reg_s2, reg_noise).a;
      reg_sum = cfg_.beta * ntk_reg_core(critics_[0], reg_s1, reg_a_u, reg_s2, reg_a_pi,
                                         &critic_grads[0], cfg_.beta);
    }
  }
  const double nc = static_cast<double>(critics_.size());
  report.td = td_sum / nc;
  report.cql = cql_sum / nc;
  report.reg = cfg_.algorithm == Algorithm::simplified_q ? reg_sum : reg_sum / nc;
  report.critic_total = report.td + report.cql + report.reg;

  bool finite = std::isfinite(report.critic_total) && std::isfinite(report.actor) &&
                actor_grads.all_finite();
  for (const MlpGradients& g : critic_grads) finite = finite && g.all_finite();
  if (!finite) {
    report.diverged = true;
    return report;
  }

  for (std::size_t k = 0; k < critics_.size(); ++k)
    adam_step(critics_[k].net, critic_grads[k], critic_adams_[k]);
  adam_step(policy_.net, actor_grads, policy_adam_);
  if (cfg_.entropy_mode == EntropyMode::auto_tune) {
    const double target_entropy = -static_cast<double>(act_dim_);
    scalar_adam_step(log_tau_, -tau_now * (mean_logp + target_entropy), tau_adam_);
  }
  for (std::size_t k = 0; k < targets_.size(); ++k)
    target_sync(targets_[k], critics_[k].net, cfg_.target_polyak);
  ++updates_done_;
  return report;
}

Json Agent::to_json() const {
  Json j;
  j["format"] = "simpleq-agent/1";
  j["config"] = agent_config_to_json(cfg_);
  j["obs_dim"] = obs_dim_;
  j["act_dim"] = act_dim_;
  j["policy"] = params_to_json(policy_.net);
  j["policy_adam"] = adam_to_json(policy_adam_);
  j["critics"] = Json::array();
  j["critic_adams"] = Json::array();
  for (std::size_t k = 0; k < critics_.size(); ++k) {
    j["critics"].push_back(params_to_json(critics_[k].net));
    j["critic_adams"].push_back(adam_to_json(critic_adams_[k]));
  }
  j["targets"] = Json::array();
  for (const MlpParams& t : targets_) j["targets"].push_back(params_to_json(t));
  j["log_tau"] = log_tau_;
  j["tau_adam"] = {{"m", tau_adam_.m}, {"v", tau_adam_.v}, {"step", tau_adam_.step},
                   {"lr", tau_adam_.lr}};
  j["updates_done"] = updates_done_;
  return j;
}

Agent Agent::from_json(const Json& j) {
  if (j.value("format", "") != "simpleq-agent/1") throw IoError("not an agent checkpoint");
  Agent a;
  a.cfg_ = agent_config_from_json(j.at("config"));
  a.obs_dim_ = j.at("obs_dim").get<Eigen::Index>();
  a.act_dim_ = j.at("act_dim").get<Eigen::Index>();
  a.policy_.obs_dim = a.obs_dim_;
  a.policy_.act_dim = a.act_dim_;
  a.policy_.net = params_from_json(j.at("policy"));
  a.policy_adam_ = adam_from_json(j.at("policy_adam"), a.policy_.net);
  for (std::size_t k = 0; k < j.at("critics").size(); ++k) {
    Critic c;
    c.obs_dim = a.obs_dim_;
    c.act_dim = a.act_dim_;
    c.net = params_from_json(j.at("critics")[k]);
    a.critic_adams_.push_back(adam_from_json(j.at("critic_adams")[k], c.net));
    a.critics_.push_back(std::move(c));
  }
  for (const Json& t : j.at("targets")) a.targets_.push_back(params_from_json(t));
  a.log_tau_ = j.at("log_tau").get<double>();
  a.tau_adam_.m = j.at("tau_adam").at("m").get<double>();
  a.tau_adam_.v = j.at("tau_adam").at("v").get<double>();
  a.tau_adam_.step = j.at("tau_adam").at("step").get<long>();
  a.tau_adam_.lr = j.at("tau_adam").at("lr").get<double>();
  a.updates_done_ = j.at("updates_done").get<long>();
  return a;
}

}  // namespace simpleq
