#define DOCTEST_CONFIG_IMPLEMENT_WITH_MAIN
#include "doctest.h"

#include <cmath>
#include <vector>

#include "simpleq/agents.hpp"

using namespace simpleq;

namespace {

Matrix vstack(const Matrix& s, const Matrix& a) {
  Matrix x(s.rows() + a.rows(), s.cols());
  x.topRows(s.rows()) = s;
  x.bottomRows(a.rows()) = a;
  return x;
}

bool close(double a, double b, double tol = 1e-12) {
  return std::abs(a - b) <= tol * std::max({1.0, std::abs(a), std::abs(b)});
}

bool same_vector(const Vector& a, const Vector& b) {
  return a.size() == b.size() && (a.array() == b.array()).all();
}

// Hand-built critic with tanh hidden layers: smooth everywhere, so central
// differences converge cleanly. The head stays linear and bias-free.
Critic smooth_critic(Eigen::Index obs, Eigen::Index act, Eigen::Index hidden, int layers,
                     Norm norm, std::uint64_t seed) {
  Critic c;
  c.obs_dim = obs;
  c.act_dim = act;
  std::vector<LayerSpec> spec;
  Eigen::Index in = obs + act;
  for (int l = 0; l < layers; ++l) {
    spec.push_back({in, hidden, Activation::tanh_fn, norm, true});
    in = hidden;
  }
  spec.push_back({in, 1, Activation::identity, Norm::none, false});
  Rng rng(seed);
  c.net = make_mlp(spec, rng);
  return c;
}

// phi(s, a) = [s; a] exactly: one identity layer with unit weights.
Critic identity_feature_critic(Eigen::Index obs, Eigen::Index act) {
  Critic c;
  c.obs_dim = obs;
  c.act_dim = act;
  const Eigen::Index d = obs + act;
  std::vector<LayerSpec> spec = {{d, d, Activation::identity, Norm::none, true},
                                 {d, 1, Activation::identity, Norm::none, false}};
  Rng rng(1);
  c.net = make_mlp(spec, rng);
  c.net.layers[0].weight = Matrix::Identity(d, d);
  c.net.layers[0].bias.setZero();
  c.net.layers[1].weight.setOnes();
  return c;
}

// q(s, a) = head . phi with phi constant: the value ignores its inputs.
Critic constant_q_critic(Eigen::Index obs, Eigen::Index act, const Vector& phi,
                         const Vector& head) {
  Critic c;
  c.obs_dim = obs;
  c.act_dim = act;
  const Eigen::Index d = obs + act;
  std::vector<LayerSpec> spec = {{d, phi.size(), Activation::identity, Norm::none, true},
                                 {phi.size(), 1, Activation::identity, Norm::none, false}};
  Rng rng(1);
  c.net = make_mlp(spec, rng);
  c.net.layers[0].weight.setZero();
  c.net.layers[0].bias = phi;
  c.net.layers[1].weight = head.transpose();
  return c;
}

Batch random_batch(Rng& rng, Eigen::Index obs, Eigen::Index act, Eigen::Index b) {
  Batch bt;
  bt.s = rng.uniform_matrix(obs, b, -1.0, 1.0);
  bt.a = rng.uniform_matrix(act, b, -1.0, 1.0);
  bt.s_target = rng.uniform_matrix(obs, b, -1.0, 1.0);
  bt.s_next = rng.uniform_matrix(obs, b, -1.0, 1.0);
  bt.a_next = rng.uniform_matrix(act, b, -1.0, 1.0);
  bt.n_step_return = rng.uniform_vector(static_cast<int>(b), -1.0, 1.0);
  bt.n_used.resize(b);
  bt.bootstrap_mask.resize(b);
  bt.has_next_mask.resize(b);
  for (Eigen::Index i = 0; i < b; ++i) {
    bt.n_used(i) = 1.0 + static_cast<double>(rng.uniform_int(3));
    bt.bootstrap_mask(i) = rng.uniform() < 0.8 ? 1.0 : 0.0;
    bt.has_next_mask(i) = rng.uniform() < 0.8 ? 1.0 : 0.0;
  }
  if (bt.has_next_mask.sum() == 0.0) bt.has_next_mask(0) = 1.0;
  return bt;
}

Trajectory synth_traj(Rng& rng, Eigen::Index obs, Eigen::Index act, int len) {
  Trajectory t;
  t.observations = rng.uniform_matrix(obs, len + 1, -1.0, 1.0);
  t.actions = rng.uniform_matrix(act, len, -0.99, 0.99);
  t.rewards = rng.uniform_vector(len, -1.0, 1.0);
  t.env_name = "synthetic";
  t.horizon = len;
  return t;
}

DualBuffer synth_buffer(Eigen::Index obs, Eigen::Index act, std::uint64_t seed) {
  BufferOptions opt;
  DualBuffer buf(opt);
  Rng rng(seed);
  for (int e = 0; e < 4; ++e) buf.add_offline(synth_traj(rng, obs, act, 12));
  for (int e = 0; e < 3; ++e) buf.add_online_episode(synth_traj(rng, obs, act, 12));
  return buf;
}

QEval critic_q_eval(const Critic& critic) {
  return [&critic](const Matrix& s, const Matrix& a) {
    MlpTape tape;
    mlp_forward(critic.net, vstack(s, a), Mode::eval, &tape);
    MlpGradients scratch = zero_gradients(critic.net);
    Matrix din = mlp_backward_acc(critic.net, tape, Matrix::Ones(1, s.cols()), scratch);
    return QEvalResult{tape.output().row(0).transpose(), din.bottomRows(a.rows())};
  };
}

// Recomputes one update's losses from a parameter snapshot and a copy of the
// rng, consuming draws in the documented order.
UpdateReport straight_line_report(const Agent& ag, const DualBuffer& buf, Rng rng) {
  const AgentConfig& cfg = ag.config();
  UpdateReport r;
  if (cfg.algorithm == Algorithm::bc) {
    Batch batch = to_batch(buf.sample_symmetric(cfg.batch_size, rng));
    r.bc = bc_loss_core(ag.policy(), batch.s, batch.a);
    return r;
  }
  const Eigen::Index act = ag.act_dim();
  const int b = cfg.batch_size;
  const double tau = ag.tau();
  r.tau = tau;
  Batch batch = to_batch(buf.sample_symmetric(b, rng));
  Matrix noise_actor = rng.normal_matrix(act, b);
  Matrix noise_next = rng.normal_matrix(act, b);
  const bool use_cql = cfg.algorithm != Algorithm::crossq && cfg.alpha != 0.0;
  Matrix mu;
  if (use_cql) {
    const Eigen::Index total = static_cast<Eigen::Index>(b) * cfg.ood_action_samples;
    if (cfg.mu_mode == MuMode::uniform) {
      mu = rng.uniform_matrix(act, total, -1.0, 1.0);
    } else {
      Matrix s_rep(ag.obs_dim(), total);
      for (int k = 0; k < cfg.ood_action_samples; ++k) s_rep.middleCols(k * b, b) = batch.s;
      mu = policy_sample_with_noise(ag.policy(), s_rep, rng.normal_matrix(act, total)).a;
    }
  }
  const bool use_reg = cfg.algorithm == Algorithm::simplified_q && cfg.beta != 0.0;
  Matrix reg_s1, reg_s2, reg_a_u, reg_noise;
  if (use_reg) {
    reg_s1 = buf.sample_states(b, rng);
    reg_s2 = buf.sample_states(b, rng);
    reg_a_u = rng.uniform_matrix(act, b, -1.0, 1.0);
    reg_noise = rng.normal_matrix(act, b);
  }
  QEval qe = [&](const Matrix& ss, const Matrix& aa) {
    Vector q = critic_forward(ag.critic(0), ss, aa, Mode::eval).q;
    if (ag.num_critics() == 2)
      q = q.cwiseMin(critic_forward(ag.critic(1), ss, aa, Mode::eval).q);
    return QEvalResult{q, Matrix::Zero(aa.rows(), aa.cols())};
  };
  double mean_logp = 0.0;
  r.actor = actor_loss_core(ag.policy(), qe, batch.s, noise_actor, tau, nullptr, 1.0, &mean_logp);
  r.entropy = -mean_logp;
  PolicySample next = policy_sample_with_noise(ag.policy(), batch.s_target, noise_next);
  double td = 0.0, cql = 0.0, reg = 0.0;
  if (cfg.algorithm == Algorithm::crossq) {
    Critic scratch = ag.critic(0);
    td = crossq_td_loss(scratch, batch, next.a, next.log_prob, cfg.gamma, tau);
  } else {
    Vector qbar;
    if (ag.has_target()) {
      Matrix x = vstack(batch.s_target, next.a);
      Vector q0 = mlp_forward(ag.target(0), x, Mode::eval).row(0).transpose();
      Vector q1 = mlp_forward(ag.target(1), x, Mode::eval).row(0).transpose();
      qbar = q0.cwiseMin(q1);
    } else {
      qbar = critic_forward(ag.critic(0), batch.s_target, next.a, Mode::eval).q;
    }
    Vector y = td_targets(batch, qbar, next.log_prob, cfg.gamma, tau);
    for (int k = 0; k < ag.num_critics(); ++k) {
      td += td_loss_core(ag.critic(k), batch.s, batch.a, y);
      if (use_cql)
        cql += cfg.alpha * cql_penalty_core(ag.critic(k), batch.s, batch.a, mu, cfg.weighted_cql,
                                            cfg.cql_data_term);
      if (cfg.algorithm == Algorithm::dr3 && cfg.beta != 0.0)
        reg += cfg.beta * dr3_reg_core(ag.critic(k), batch.s, batch.a, batch.s_next, batch.a_next,
                                       batch.has_next_mask);
    }
    if (use_reg) {
      Matrix a_pi = policy_sample_with_noise(ag.policy(), reg_s2, reg_noise).a;
      reg = cfg.beta * ntk_reg_core(ag.critic(0), reg_s1, reg_a_u, reg_s2, a_pi);
    }
  }
  const double nc = static_cast<double>(ag.num_critics());
  r.td = td / nc;
  r.cql = cql / nc;
  r.reg = cfg.algorithm == Algorithm::simplified_q ? reg : reg / nc;
  r.critic_total = r.td + r.cql + r.reg;
  return r;
}

AgentConfig small_config(Algorithm algo) {
  AgentConfig cfg;
  cfg.algorithm = algo;
  cfg.alpha = algo == Algorithm::crossq ? 0.0 : 0.7;
  cfg.beta = 0.15;
  cfg.batch_size = 16;
  cfg.ood_action_samples = 3;
  cfg.critic_hidden = 12;
  cfg.critic_layers = 2;
  cfg.policy_hidden = 10;
  cfg.policy_layers = 1;
  return cfg;
}

}  // namespace

TEST_CASE("policy samples stay inside the action box and match the mean path at zero noise") {
  Rng rng(7);
  Policy p = make_policy(2, 3, 16, 2, rng);
  Matrix s = rng.uniform_matrix(2, 50, -1.0, 1.0);

  PolicySample ps = policy_sample(p, s, rng);
  CHECK(ps.a.rows() == 3);
  CHECK(ps.a.cols() == 50);
  CHECK((ps.a.array().abs() < 1.0).all());
  CHECK(ps.log_prob.allFinite());

  PolicySample mean_path = policy_sample_with_noise(p, s, Matrix::Zero(3, 50));
  Matrix mean_action = policy_mean_action(p, s);
  CHECK((mean_path.a.array() == mean_action.array()).all());
}

TEST_CASE("policy log-density integrates to one over the action box") {
  Rng rng(42);
  Policy p = make_policy(3, 1, 8, 1, rng);
  Matrix s0 = rng.uniform_matrix(3, 1, -1.0, 1.0);

  const int n = 200000;
  Matrix s = s0.replicate(1, n);
  Matrix a = rng.uniform_matrix(1, n, -1.0, 1.0);
  Vector lp = policy_log_prob(p, s, a);
  // Importance estimate of the total mass against the uniform proposal.
  const double integral = (lp.array().exp() * 2.0).mean();
  CHECK(integral == doctest::Approx(1.0).epsilon(0.02));
}

TEST_CASE("sampling and density paths agree on the same actions") {
  Rng rng(11);
  Policy p = make_policy(2, 3, 16, 2, rng);
  Matrix s = rng.uniform_matrix(2, 40, -1.0, 1.0);
  PolicySample ps = policy_sample(p, s, rng);
  Vector lp = policy_log_prob(p, s, ps.a);
  for (Eigen::Index i = 0; i < lp.size(); ++i)
    CHECK(lp(i) == doctest::Approx(ps.log_prob(i)).epsilon(1e-6));
}

TEST_CASE("log-std clamp pins the scale at the lower bound") {
  Rng rng(5);
  Policy p = make_policy(2, 2, 8, 1, rng);
  // Force raw log-std to -20 exactly: zero that half of the head, bias -20.
  LayerParams& head = p.net.layers.back();
  head.weight.bottomRows(2).setZero();
  head.bias.tail(2).setConstant(-20.0);

  Matrix s = rng.uniform_matrix(2, 6, -1.0, 1.0);
  Matrix noise = Matrix::Ones(2, 6);
  PolicySample ps = policy_sample_with_noise(p, s, noise);

  Matrix mean = mlp_forward(p.net, s, Mode::eval).topRows(2);
  Matrix expect = (mean.array() + std::exp(kLogStdMin)).tanh();
  CHECK((ps.a.array() == expect.array()).all());
}

TEST_CASE("critic value is exactly the head inner product with the features") {
  Rng rng(3);
  Critic c = make_critic(3, 2, 16, 2, Norm::none, rng);
  CHECK(c.net.layers.back().bias.size() == 0);
  CHECK(c.feature_dim() == 16);

  Matrix s = rng.uniform_matrix(3, 9, -1.0, 1.0);
  Matrix a = rng.uniform_matrix(2, 9, -1.0, 1.0);
  CriticOutput out = critic_forward(c, s, a, Mode::eval);
  Vector manual = (c.net.layers.back().weight * out.phi).row(0).transpose();
  for (Eigen::Index i = 0; i < out.q.size(); ++i) CHECK(close(out.q(i), manual(i)));

  c.net.layers.back().weight.setZero();
  CriticOutput zero = critic_forward(c, s, a, Mode::eval);
  CHECK(zero.q.cwiseAbs().maxCoeff() == 0.0);
}

TEST_CASE("n-step targets compose return, discount, bootstrap, and entropy terms") {
  Batch bt;
  bt.s = Matrix::Zero(1, 4);
  bt.n_step_return = Vector(4);
  bt.n_step_return << 1.5, -0.3, 0.7, 2.0;
  bt.n_used = Vector(4);
  bt.n_used << 3, 1, 2, 3;
  bt.bootstrap_mask = Vector(4);
  bt.bootstrap_mask << 1, 1, 0, 1;
  Vector qbar(4), logp(4);
  qbar << 0.5, -1.0, 9.9, 0.0;
  logp << -1.2, 0.4, 7.7, -0.5;
  const double gamma = 0.9, tau = 0.2;

  Vector y = td_targets(bt, qbar, logp, gamma, tau);
  for (Eigen::Index i = 0; i < 4; ++i) {
    const double want = bt.n_step_return(i) + bt.bootstrap_mask(i) *
                                                  std::pow(gamma, bt.n_used(i)) *
                                                  (qbar(i) - tau * logp(i));
    CHECK(y(i) == doctest::Approx(want).epsilon(1e-15));
  }
  // Terminal one-step window reduces to the raw return.
  CHECK(y(2) == 0.7);
  CHECK_THROWS_AS(td_targets(bt, Vector::Zero(3), logp, gamma, tau), ConfigError);
}

TEST_CASE("temporal-difference loss gradient matches finite differences") {
  for (std::uint64_t seed : {11u, 23u, 37u, 51u, 68u}) {
    Rng rng(seed);
    Critic c = smooth_critic(3, 2, 8, 2, seed % 2 == 0 ? Norm::layer_norm : Norm::none, seed);
    Matrix s = rng.uniform_matrix(3, 6, -1.0, 1.0);
    Matrix a = rng.uniform_matrix(2, 6, -1.0, 1.0);
    Vector y = rng.uniform_vector(6, -2.0, 2.0);

    MlpGradients g = zero_gradients(c.net);
    td_loss_core(c, s, a, y, &g);
    auto f = [&](MlpParams&) { return td_loss_core(c, s, a, y); };
    CHECK(gradient_check(f, c.net, g, 1e-5) < 1e-4);
  }
}

TEST_CASE("pessimism penalty gradient matches finite differences for every flag combination") {
  std::uint64_t seed = 100;
  for (bool weighted : {false, true})
    for (bool data_term : {false, true}) {
      Rng rng(++seed);
      Critic c = smooth_critic(3, 2, 8, 2, Norm::none, seed);
      Matrix s = rng.uniform_matrix(3, 5, -1.0, 1.0);
      Matrix a = rng.uniform_matrix(2, 5, -1.0, 1.0);
      Matrix ood = rng.uniform_matrix(2, 15, -1.0, 1.0);

      MlpGradients g = zero_gradients(c.net);
      cql_penalty_core(c, s, a, ood, weighted, data_term, &g);
      auto f = [&](MlpParams&) { return cql_penalty_core(c, s, a, ood, weighted, data_term); };
      CHECK(gradient_check(f, c.net, g, 1e-5) < 1e-4);
    }
}

TEST_CASE("pessimism penalty closed forms on a constant critic") {
  Vector phi(3), head(3);
  phi << 0.5, -0.25, 2.0;
  head << 1.0, 2.0, 0.5;  // q = 0.5 - 0.5 + 1.0 = 1 everywhere
  Critic c = constant_q_critic(2, 2, phi, head);

  Rng rng(8);
  Matrix s = rng.uniform_matrix(2, 3, -1.0, 1.0);
  Matrix a = rng.uniform_matrix(2, 3, -0.5, 0.5);

  // Two blocks of draws, each exactly unit squared distance from the data.
  Matrix ood(2, 6);
  ood.leftCols(3) = a;
  ood.rightCols(3) = a;
  ood.row(0).head(3).array() += 1.0;
  ood.row(1).tail(3).array() -= 1.0;

  CHECK(close(cql_penalty_core(c, s, a, ood, false, true), 0.0));
  CHECK(close(cql_penalty_core(c, s, a, ood, false, false), 1.0));
  CHECK(close(cql_penalty_core(c, s, a, ood, true, false), 1.0 - std::exp(-1.0)));

  // Draws equal to the data carry zero weight.
  Matrix same(2, 6);
  same.leftCols(3) = a;
  same.rightCols(3) = a;
  CHECK(close(cql_penalty_core(c, s, a, same, true, true), -1.0));

  CHECK_THROWS_AS(cql_penalty_core(c, s, a, Matrix(2, 4), true, true), ConfigError);
}

TEST_CASE("zero critic head yields zero penalty for any draws") {
  Rng rng(9);
  Critic c = make_critic(3, 2, 8, 2, Norm::none, rng);
  c.net.layers.back().weight.setZero();
  Matrix s = rng.uniform_matrix(3, 4, -1.0, 1.0);
  Matrix a = rng.uniform_matrix(2, 4, -1.0, 1.0);
  Matrix ood = rng.uniform_matrix(2, 8, -1.0, 1.0);
  CHECK(cql_penalty_core(c, s, a, ood, true, true) == 0.0);
}

TEST_CASE("feature regularizer closed forms on an identity-feature critic") {
  Critic c = identity_feature_critic(2, 2);

  // Orthogonal pairs: zero dot product, zero loss.
  Matrix s1(2, 2), a1(2, 2), s2(2, 2), a2(2, 2);
  s1 << 1, 0, 0, 1;
  a1.setZero();
  s2.setZero();
  a2 << 0, 1, 1, 0;
  CHECK(ntk_reg_core(c, s1, a1, s2, a2) == 0.0);

  // Identical unit vectors: dot = 1, loss = 1.
  Matrix u(2, 1), z(2, 1);
  u << 1, 0;
  z.setZero();
  CHECK(close(ntk_reg_core(c, u, z, u, z), 1.0));

  // Brute force over random pairs.
  Rng rng(17);
  Matrix r1 = rng.uniform_matrix(2, 8, -1.0, 1.0), ru = rng.uniform_matrix(2, 8, -1.0, 1.0);
  Matrix r2 = rng.uniform_matrix(2, 8, -1.0, 1.0), rp = rng.uniform_matrix(2, 8, -1.0, 1.0);
  double want = 0.0;
  for (int i = 0; i < 8; ++i) {
    Vector x1(4), x2(4);
    x1 << r1(0, i), r1(1, i), ru(0, i), ru(1, i);
    x2 << r2(0, i), r2(1, i), rp(0, i), rp(1, i);
    want += std::pow(x1.dot(x2), 2.0);
  }
  want /= 8.0;
  CHECK(close(ntk_reg_core(c, r1, ru, r2, rp), want));
}

TEST_CASE("feature regularizer gradient matches finite differences and spares the head") {
  for (std::uint64_t seed : {201u, 202u, 203u}) {
    Rng rng(seed);
    Critic c = smooth_critic(3, 2, 8, 2, Norm::none, seed);
    Matrix s1 = rng.uniform_matrix(3, 5, -1.0, 1.0), a_u = rng.uniform_matrix(2, 5, -1.0, 1.0);
    Matrix s2 = rng.uniform_matrix(3, 5, -1.0, 1.0), a_pi = rng.uniform_matrix(2, 5, -1.0, 1.0);

    MlpGradients g = zero_gradients(c.net);
    ntk_reg_core(c, s1, a_u, s2, a_pi, &g);
    CHECK(g.layers.back().weight.cwiseAbs().maxCoeff() == 0.0);

    auto f = [&](MlpParams&) { return ntk_reg_core(c, s1, a_u, s2, a_pi); };
    CHECK(gradient_check(f, c.net, g, 1e-5) < 1e-4);

    // Gradient scale is linear: scale=beta equals beta times scale=1.
    const double beta = 0.37;
    MlpGradients gb = zero_gradients(c.net);
    ntk_reg_core(c, s1, a_u, s2, a_pi, &gb, beta);
    Vector flat1 = flatten_gradients(g), flatb = flatten_gradients(gb);
    for (Eigen::Index i = 0; i < flat1.size(); ++i) CHECK(close(flatb(i), beta * flat1(i)));
  }
}

TEST_CASE("feature co-adaptation term: closed forms, masking, finite differences") {
  Critic c = identity_feature_critic(2, 2);

  Matrix s(2, 2), a(2, 2), sn(2, 2), an(2, 2);
  s << 1, 0, 0, 1;
  a.setZero();
  sn = -s;  // anti-aligned unit features
  an.setZero();
  CHECK(close(dr3_reg_core(c, s, a, sn, an, Vector::Ones(2)), -1.0));
  sn.setZero();
  an << 0, 1, 1, 0;  // orthogonal
  CHECK(dr3_reg_core(c, s, a, sn, an, Vector::Ones(2)) == 0.0);

  // Mask-weighted brute force.
  Rng rng(31);
  Matrix rs = rng.uniform_matrix(2, 6, -1.0, 1.0), ra = rng.uniform_matrix(2, 6, -1.0, 1.0);
  Matrix rn = rng.uniform_matrix(2, 6, -1.0, 1.0), rb = rng.uniform_matrix(2, 6, -1.0, 1.0);
  Vector mask(6);
  mask << 1, 0, 1, 1, 0, 1;
  double want = 0.0;
  for (int i = 0; i < 6; ++i) {
    if (mask(i) == 0.0) continue;
    Vector x1(4), x2(4);
    x1 << rs(0, i), rs(1, i), ra(0, i), ra(1, i);
    x2 << rn(0, i), rn(1, i), rb(0, i), rb(1, i);
    want += x1.dot(x2);
  }
  want /= mask.sum();
  CHECK(close(dr3_reg_core(c, rs, ra, rn, rb, mask), want));

  // All-masked batches contribute nothing.
  CHECK(dr3_reg_core(c, rs, ra, rn, rb, Vector::Zero(6)) == 0.0);

  for (std::uint64_t seed : {301u, 302u}) {
    Rng frng(seed);
    Critic fc = smooth_critic(3, 2, 8, 2, Norm::none, seed);
    Matrix fs = frng.uniform_matrix(3, 5, -1.0, 1.0), fa = frng.uniform_matrix(2, 5, -1.0, 1.0);
    Matrix fn = frng.uniform_matrix(3, 5, -1.0, 1.0), fb = frng.uniform_matrix(2, 5, -1.0, 1.0);
    Vector fm(5);
    fm << 1, 1, 0, 1, 0;
    MlpGradients g = zero_gradients(fc.net);
    dr3_reg_core(fc, fs, fa, fn, fb, fm, &g);
    CHECK(g.layers.back().weight.cwiseAbs().maxCoeff() == 0.0);
    auto f = [&](MlpParams&) { return dr3_reg_core(fc, fs, fa, fn, fb, fm); };
    CHECK(gradient_check(f, fc.net, g, 1e-5) < 1e-4);
  }
}

TEST_CASE("behavior-cloning loss: finite differences and exact reproduction") {
  Rng rng(41);
  Policy p = make_policy(3, 2, 10, 2, rng);
  Matrix s = rng.uniform_matrix(3, 7, -1.0, 1.0);
  Matrix a_target = rng.uniform_matrix(2, 7, -0.9, 0.9);

  MlpGradients g = zero_gradients(p.net);
  double loss = bc_loss_core(p, s, a_target, &g);
  CHECK(loss > 0.0);
  auto f = [&](MlpParams&) { return bc_loss_core(p, s, a_target); };
  CHECK(gradient_check(f, p.net, g, 1e-5) < 1e-4);

  // The policy's own mean action reproduces itself exactly.
  Matrix own = policy_mean_action(p, s);
  CHECK(bc_loss_core(p, s, own) == 0.0);
}

TEST_CASE("joint-batch TD loss gradient matches finite differences through shared statistics") {
  for (std::uint64_t seed : {401u, 402u, 403u}) {
    Rng rng(seed);
    Critic c = smooth_critic(3, 2, 8, 2, Norm::batch_norm, seed);
    Batch bt = random_batch(rng, 3, 2, 6);
    Matrix a_next = rng.uniform_matrix(2, 6, -1.0, 1.0);
    Vector logp = rng.uniform_vector(6, -3.0, 0.0);
    Vector frozen = rng.uniform_vector(6, -1.0, 1.0);

    MlpGradients g = zero_gradients(c.net);
    crossq_td_loss(c, bt, a_next, logp, 0.99, 0.1, &g, 1.0, nullptr, &frozen);
    auto f = [&](MlpParams&) {
      return crossq_td_loss(c, bt, a_next, logp, 0.99, 0.1, nullptr, 1.0, nullptr, &frozen);
    };
    CHECK(gradient_check(f, c.net, g, 1e-5) < 1e-4);
  }
}

TEST_CASE("joint-batch TD targets come from the train-mode tail half") {
  Rng rng(55);
  Critic c = smooth_critic(3, 2, 8, 1, Norm::batch_norm, 77);
  Batch bt = random_batch(rng, 3, 2, 5);
  Matrix a_next = rng.uniform_matrix(2, 5, -1.0, 1.0);
  Vector logp = rng.uniform_vector(5, -3.0, 0.0);

  Critic c1 = c, c2 = c;
  Vector targets;
  crossq_td_loss(c1, bt, a_next, logp, 0.9, 0.2, nullptr, 1.0, &targets);

  MlpTape tape;
  Matrix x(5, 10);
  x.leftCols(5) = vstack(bt.s, bt.a);
  x.rightCols(5) = vstack(bt.s_target, a_next);
  mlp_forward(c2.net, x, Mode::train, &tape);
  Vector manual = td_targets(bt, tape.output().row(0).tail(5).transpose(), logp, 0.9, 0.2);
  CHECK(same_vector(targets, manual));

  // Train-mode forwards move the running statistics.
  CHECK(c1.net.layers[0].running_mean != c.net.layers[0].running_mean);
}

TEST_CASE("actor objective gradient matches finite differences") {
  // Quadratic value landscape with an analytic action gradient.
  for (std::uint64_t seed : {501u, 502u, 503u}) {
    Rng rng(seed);
    Policy p = make_policy(3, 2, 8, 2, rng);
    Matrix s = rng.uniform_matrix(3, 6, -1.0, 1.0);
    Matrix noise = rng.normal_matrix(2, 6);
    Vector center = rng.uniform_vector(2, -0.5, 0.5);
    QEval qe = [&](const Matrix&, const Matrix& aa) {
      Matrix diff = aa.colwise() - center;
      QEvalResult r;
      r.q = -diff.array().square().colwise().sum().matrix().transpose();
      r.dq_da = -2.0 * diff;
      return r;
    };
    MlpGradients g = zero_gradients(p.net);
    actor_loss_core(p, qe, s, noise, 0.3, &g);
    auto f = [&](MlpParams&) { return actor_loss_core(p, qe, s, noise, 0.3); };
    CHECK(gradient_check(f, p.net, g, 1e-5) < 1e-4);
  }

  // A real critic behind the objective, differentiated through its input.
  Rng rng(504);
  Policy p = make_policy(3, 2, 8, 1, rng);
  Critic c = smooth_critic(3, 2, 8, 2, Norm::none, 504);
  Matrix s = rng.uniform_matrix(3, 6, -1.0, 1.0);
  Matrix noise = rng.normal_matrix(2, 6);
  QEval qe = critic_q_eval(c);
  MlpGradients g = zero_gradients(p.net);
  actor_loss_core(p, qe, s, noise, 0.1, &g);
  auto f = [&](MlpParams&) { return actor_loss_core(p, qe, s, noise, 0.1); };
  CHECK(gradient_check(f, p.net, g, 1e-5) < 1e-4);
}

TEST_CASE("clamped log-std coordinates receive no actor gradient") {
  Rng rng(61);
  Policy p = make_policy(2, 2, 8, 1, rng);
  LayerParams& head = p.net.layers.back();
  head.weight.bottomRows(2).setZero();
  head.bias.tail(2).setConstant(-20.0);

  Matrix s = rng.uniform_matrix(2, 5, -1.0, 1.0);
  Matrix noise = rng.normal_matrix(2, 5);
  QEval qe = [](const Matrix&, const Matrix& aa) {
    return QEvalResult{-aa.array().square().colwise().sum().matrix().transpose(), -2.0 * aa};
  };
  MlpGradients g = zero_gradients(p.net);
  actor_loss_core(p, qe, s, noise, 0.2, &g);
  CHECK(g.layers.back().bias.tail(2).cwiseAbs().maxCoeff() == 0.0);
  auto f = [&](MlpParams&) { return actor_loss_core(p, qe, s, noise, 0.2); };
  CHECK(gradient_check(f, p.net, g, 1e-5) < 1e-4);
}

TEST_CASE("actor objective drives the mean toward the value maximum") {
  Rng rng(71);
  Policy p = make_policy(1, 1, 16, 1, rng);
  AdamState adam = make_adam(p.net, 1e-2);
  Matrix s = Matrix::Constant(1, 64, 0.5);
  QEval qe = [](const Matrix&, const Matrix& aa) {
    return QEvalResult{(-(aa.array() - 0.3).square()).matrix().row(0).transpose(),
                       (-2.0 * (aa.array() - 0.3)).matrix()};
  };
  for (int i = 0; i < 1500; ++i) {
    MlpGradients g = zero_gradients(p.net);
    actor_loss_core(p, qe, s, rng.normal_matrix(1, 64), 0.0, &g);
    adam_step(p.net, g, adam);
  }
  CHECK(policy_mean_action(p, s.leftCols(1))(0, 0) == doctest::Approx(0.3).epsilon(0.2));
}

TEST_CASE("kernel estimate: symmetry, nonnegative diagonal, identity-feature closed form") {
  Rng rng(81);
  Critic c = make_critic(3, 2, 12, 2, Norm::none, rng);
  for (int t = 0; t < 20; ++t) {
    Vector s1 = rng.uniform_vector(3, -1.0, 1.0), a1 = rng.uniform_vector(2, -1.0, 1.0);
    Vector s2 = rng.uniform_vector(3, -1.0, 1.0), a2 = rng.uniform_vector(2, -1.0, 1.0);
    const double k12 = ntk_kernel_estimate(c, s1, a1, s2, a2);
    const double k21 = ntk_kernel_estimate(c, s2, a2, s1, a1);
    CHECK(close(k12, k21));
    CHECK(ntk_kernel_estimate(c, s1, a1, s1, a1) >= 0.0);
  }

  // With phi = x and a ones head: q = sum(W x + b), so the kernel is
  // x1.x2 (1 + |w|^2) + |w|^2 with w = ones(d).
  Critic idc = identity_feature_critic(2, 2);
  Vector s1(2), a1(2), s2(2), a2(2);
  s1 << 0.3, -0.4;
  a1 << 0.1, 0.9;
  s2 << -0.7, 0.2;
  a2 << 0.5, -0.6;
  Vector x1(4), x2(4);
  x1 << 0.3, -0.4, 0.1, 0.9;
  x2 << -0.7, 0.2, 0.5, -0.6;
  const double d = 4.0;
  const double want = x1.dot(x2) * (1.0 + d) + d;
  CHECK(close(ntk_kernel_estimate(idc, s1, a1, s2, a2), want));
}

TEST_CASE("kernel estimate predicts one-step value changes") {
  Rng init(5);
  Critic base = make_critic(3, 2, 16, 2, Norm::none, init);
  Rng rng(99);
  const double eta = 1e-4;
  int within = 0;
  const int pairs = 500;
  for (int t = 0; t < pairs; ++t) {
    Critic c = base;
    Vector s1 = rng.uniform_vector(3, -1.0, 1.0), a1 = rng.uniform_vector(2, -1.0, 1.0);
    Vector s2 = rng.uniform_vector(3, -1.0, 1.0), a2 = rng.uniform_vector(2, -1.0, 1.0);
    const double kappa = ntk_kernel_estimate(c, s1, a1, s2, a2);
    const double q1 = critic_forward(c, Matrix(s1), Matrix(a1), Mode::eval).q(0);
    const double q2_before = critic_forward(c, Matrix(s2), Matrix(a2), Mode::eval).q(0);
    const double y = q1 - 1.0;  // unit TD error

    MlpGradients g = zero_gradients(c.net);
    td_loss_core(c, Matrix(s1), Matrix(a1), Vector::Constant(1, y), &g);
    sgd_step(c.net, g, eta);

    const double actual = critic_forward(c, Matrix(s2), Matrix(a2), Mode::eval).q(0) - q2_before;
    const double predicted = -eta * 2.0 * (q1 - y) * kappa;
    if (std::abs(predicted - actual) <= 1e-2 * std::max(std::abs(actual), 1e-8)) ++within;
  }
  CHECK(within >= static_cast<int>(0.95 * pairs));
}

TEST_CASE("target sync interpolates and reaches a fixed point") {
  Rng rng(91);
  Critic c = make_critic(2, 1, 6, 1, Norm::none, rng);
  MlpParams target = c.net;
  Critic fresh = make_critic(2, 1, 6, 1, Norm::none, rng);

  // polyak = 1 leaves the target untouched.
  MlpParams t1 = target;
  target_sync(t1, fresh.net, 1.0);
  CHECK(same_vector(flatten_params(t1), flatten_params(target)));

  // polyak = 0 copies the source.
  MlpParams t0 = target;
  target_sync(t0, fresh.net, 0.0);
  CHECK(same_vector(flatten_params(t0), flatten_params(fresh.net)));

  // Intermediate value interpolates coordinate-wise.
  MlpParams tm = target;
  target_sync(tm, fresh.net, 0.75);
  Vector want = 0.75 * flatten_params(target) + 0.25 * flatten_params(fresh.net);
  Vector got = flatten_params(tm);
  for (Eigen::Index i = 0; i < want.size(); ++i) CHECK(close(got(i), want(i)));

  // Identical networks are a fixed point up to rounding.
  MlpParams tf = fresh.net;
  target_sync(tf, fresh.net, 0.9);
  Vector before = flatten_params(fresh.net), after = flatten_params(tf);
  for (Eigen::Index i = 0; i < before.size(); ++i) CHECK(close(after(i), before(i), 1e-15));
}

TEST_CASE("scalar adam first step has unit-lr magnitude and descends") {
  double x = 1.0;
  ScalarAdam st;
  st.lr = 0.01;
  scalar_adam_step(x, 5.0, st);
  CHECK(x == doctest::Approx(1.0 - 0.01).epsilon(1e-6));
  double y = 1.0;
  ScalarAdam st2;
  st2.lr = 0.01;
  scalar_adam_step(y, -0.003, st2);
  CHECK(y == doctest::Approx(1.0 + 0.01).epsilon(1e-6));
  CHECK_THROWS_AS(scalar_adam_step(x, std::nan(""), st), DivergenceFault);
}

TEST_CASE("sampling wrappers agree with their cores under a replayed draw") {
  Rng rng(21);
  Critic c = smooth_critic(3, 2, 8, 1, Norm::none, 4);
  Policy p = make_policy(3, 2, 8, 1, rng);
  Matrix s = rng.uniform_matrix(3, 5, -1.0, 1.0);
  Matrix a = rng.uniform_matrix(2, 5, -1.0, 1.0);

  {
    Rng r1(50), r2(50);
    const double got = cql_penalty(c, s, a, p, MuMode::uniform, true, 3, r1);
    Matrix ood = r2.uniform_matrix(2, 15, -1.0, 1.0);
    CHECK(close(got, cql_penalty_core(c, s, a, ood, true, true)));
  }
  {
    Rng r1(51), r2(51);
    const double got = cql_penalty(c, s, a, p, MuMode::policy, false, 2, r1);
    Matrix s_rep(3, 10);
    s_rep.leftCols(5) = s;
    s_rep.rightCols(5) = s;
    Matrix ood = policy_sample(p, s_rep, r2).a;
    CHECK(close(got, cql_penalty_core(c, s, a, ood, false, true)));
  }
  {
    Rng r1(60), r2(60);
    Matrix s2 = rng.uniform_matrix(3, 5, -1.0, 1.0);
    const double got = ntk_reg_loss(c, s, s2, p, r1);
    Matrix a_u = r2.uniform_matrix(2, 5, -1.0, 1.0);
    Matrix a_pi = policy_sample(p, s2, r2).a;
    CHECK(close(got, ntk_reg_core(c, s, a_u, s2, a_pi)));
  }
  {
    Rng brng(61);
    Batch bt = random_batch(brng, 3, 2, 6);
    CHECK(dr3_reg_loss(c, bt) ==
          dr3_reg_core(c, bt.s, bt.a, bt.s_next, bt.a_next, bt.has_next_mask));
  }
}

TEST_CASE("one agent update reproduces exactly from a straight-line recomputation") {
  DualBuffer buf = synth_buffer(4, 2, 5);
  std::vector<AgentConfig> configs;
  for (Algorithm algo : {Algorithm::simplified_q, Algorithm::sac_cql, Algorithm::crossq,
                         Algorithm::dr3, Algorithm::layernorm, Algorithm::bc})
    configs.push_back(small_config(algo));
  configs.push_back(small_config(Algorithm::simplified_q));
  configs.back().mu_mode = MuMode::policy;
  configs.push_back(small_config(Algorithm::sac_cql));
  configs.back().entropy_mode = EntropyMode::fixed;
  configs.back().fixed_tau = 0.05;

  for (const AgentConfig& cfg : configs) {
    CAPTURE(algorithm_name(cfg.algorithm));
    Agent agent(cfg, 4, 2, 77);
    Rng rng(123);
    Rng replay = rng;
    Agent snapshot = agent;
    UpdateReport got = agent.update(buf, rng);
    UpdateReport want = straight_line_report(snapshot, buf, replay);

    REQUIRE(!got.diverged);
    CHECK(close(got.td, want.td, 1e-10));
    CHECK(close(got.cql, want.cql, 1e-10));
    CHECK(close(got.reg, want.reg, 1e-10));
    CHECK(close(got.critic_total, want.critic_total, 1e-10));
    CHECK(close(got.actor, want.actor, 1e-10));
    CHECK(close(got.entropy, want.entropy, 1e-10));
    CHECK(close(got.bc, want.bc, 1e-10));
    CHECK(got.tau == want.tau);
    CHECK(got.critic_total == got.td + got.cql + got.reg);
    CHECK(agent.updates_done() == 1);
  }
}

TEST_CASE("switching off the penalty and regularizer leaves plain one-step TD") {
  AgentConfig cfg = small_config(Algorithm::simplified_q);
  cfg.alpha = 0.0;
  cfg.beta = 0.0;
  cfg.n_step = 1;
  DualBuffer buf = synth_buffer(4, 2, 6);
  Agent agent(cfg, 4, 2, 3);
  Rng rng(9);
  UpdateReport r = agent.update(buf, rng);
  CHECK(r.cql == 0.0);
  CHECK(r.reg == 0.0);
  CHECK(r.critic_total == r.td);
}

TEST_CASE("critic counts, targets, and config constraints per algorithm") {
  DualBuffer buf = synth_buffer(3, 2, 7);
  struct Row {
    Algorithm algo;
    int critics;
    bool target;
  };
  for (Row row : {Row{Algorithm::simplified_q, 1, false}, Row{Algorithm::sac_cql, 2, true},
                  Row{Algorithm::crossq, 1, false}, Row{Algorithm::dr3, 2, true},
                  Row{Algorithm::layernorm, 2, true}, Row{Algorithm::bc, 0, false}}) {
    Agent agent(small_config(row.algo), 3, 2, 1);
    CHECK(agent.num_critics() == row.critics);
    CHECK(agent.has_target() == row.target);
  }

  // Naming a target rate for a target-free variant is a config error.
  Json j = agent_config_to_json(small_config(Algorithm::simplified_q));
  j["target_polyak"] = 0.99;
  CHECK_THROWS_AS(agent_config_from_json(j), ConfigError);
  Json jc = agent_config_to_json(small_config(Algorithm::crossq));
  jc["target_polyak"] = 0.99;
  CHECK_THROWS_AS(agent_config_from_json(jc), ConfigError);

  // Norm choices follow the variant.
  Agent cq(small_config(Algorithm::crossq), 3, 2, 1);
  CHECK(cq.critic(0).net.layers[0].norm == Norm::batch_norm);
  Agent ln(small_config(Algorithm::layernorm), 3, 2, 1);
  CHECK(ln.critic(0).net.layers[0].norm == Norm::layer_norm);
  Agent sq(small_config(Algorithm::simplified_q), 3, 2, 1);
  CHECK(sq.critic(0).net.layers[0].norm == Norm::none);
}

TEST_CASE("agent config json round-trips and rejects unknown keys") {
  AgentConfig cfg = small_config(Algorithm::dr3);
  cfg.mu_mode = MuMode::policy;
  cfg.weighted_cql = false;
  cfg.entropy_mode = EntropyMode::fixed;
  cfg.fixed_tau = 0.02;
  Json j = agent_config_to_json(cfg);
  AgentConfig back = agent_config_from_json(j);
  CHECK(agent_config_to_json(back) == j);

  Json bad = j;
  bad["learning_rate"] = 1e-3;
  CHECK_THROWS_AS(agent_config_from_json(bad), ConfigError);

  Json odd = j;
  odd["batch_size"] = 7;
  CHECK_THROWS_AS(agent_config_from_json(odd), ConfigError);
}

TEST_CASE("entropy coefficient moves opposite the entropy surplus") {
  AgentConfig cfg = small_config(Algorithm::simplified_q);
  DualBuffer buf = synth_buffer(3, 1, 8);
  Agent agent(cfg, 3, 1, 11);
  const double tau0 = agent.tau();
  CHECK(tau0 == doctest::Approx(0.1));
  Rng rng(2);
  UpdateReport r = agent.update(buf, rng);
  REQUIRE(!r.diverged);
  if (r.entropy > -1.0)
    CHECK(agent.tau() < tau0);
  else
    CHECK(agent.tau() > tau0);
  // Adam's first step moves log tau by exactly lr (up to the eps guard).
  CHECK(std::abs(std::log(agent.tau() / tau0)) == doctest::Approx(cfg.lr).epsilon(1e-4));

  AgentConfig fixed = cfg;
  fixed.entropy_mode = EntropyMode::fixed;
  fixed.fixed_tau = 0.3;
  Agent fagent(fixed, 3, 1, 11);
  Rng frng(2);
  fagent.update(buf, frng);
  CHECK(fagent.tau() == 0.3);
}

TEST_CASE("agent updates are deterministic under a fixed seed") {
  AgentConfig cfg = small_config(Algorithm::simplified_q);
  DualBuffer buf = synth_buffer(4, 2, 8);
  Agent a1(cfg, 4, 2, 3), a2(cfg, 4, 2, 3);
  Rng r1(5), r2(5);
  for (int i = 0; i < 3; ++i) {
    UpdateReport u1 = a1.update(buf, r1);
    UpdateReport u2 = a2.update(buf, r2);
    CHECK(u1.critic_total == u2.critic_total);
    CHECK(u1.actor == u2.actor);
    CHECK(u1.entropy == u2.entropy);
  }
  CHECK(same_vector(flatten_params(a1.critic(0).net), flatten_params(a2.critic(0).net)));
  CHECK(same_vector(flatten_params(a1.policy().net), flatten_params(a2.policy().net)));
  CHECK(a1.tau() == a2.tau());
}

TEST_CASE("agent checkpoints resume exactly") {
  for (Algorithm algo : {Algorithm::simplified_q, Algorithm::sac_cql, Algorithm::bc}) {
    CAPTURE(algorithm_name(algo));
    AgentConfig cfg = small_config(algo);
    DualBuffer buf = synth_buffer(4, 2, 8);
    Agent a1(cfg, 4, 2, 13);
    Rng rng(17);
    for (int i = 0; i < 2; ++i) a1.update(buf, rng);

    Json j = a1.to_json();
    Agent a2 = Agent::from_json(j);
    CHECK(a2.to_json() == j);
    CHECK(a2.updates_done() == a1.updates_done());

    Rng r1 = rng, r2 = rng;
    UpdateReport u1 = a1.update(buf, r1);
    UpdateReport u2 = a2.update(buf, r2);
    CHECK(u1.critic_total == u2.critic_total);
    CHECK(u1.actor == u2.actor);
    CHECK(u1.bc == u2.bc);
    CHECK(same_vector(flatten_params(a1.policy().net), flatten_params(a2.policy().net)));
  }
}

TEST_CASE("non-finite losses mark the report diverged and skip the step") {
  AgentConfig cfg = small_config(Algorithm::simplified_q);
  DualBuffer buf = synth_buffer(4, 2, 9);
  Agent agent(cfg, 4, 2, 19);
  agent.critic(0).net.layers[0].weight(0, 0) = std::nan("");
  Vector policy_before = flatten_params(agent.policy().net);
  Rng rng(23);
  UpdateReport r = agent.update(buf, rng);
  CHECK(r.diverged);
  CHECK(agent.updates_done() == 0);
  CHECK(same_vector(flatten_params(agent.policy().net), policy_before));
}

TEST_CASE("behavior cloning drives the imitation loss toward zero on one demonstration") {
  BufferOptions opt;
  DualBuffer buf(opt);
  Rng trng(9);
  buf.add_offline(synth_traj(trng, 3, 2, 1));

  AgentConfig cfg;
  cfg.algorithm = Algorithm::bc;
  cfg.batch_size = 8;
  cfg.lr = 3e-3;
  cfg.policy_hidden = 16;
  cfg.policy_layers = 1;
  Agent agent(cfg, 3, 2, 2);
  Rng rng(33);
  double last = 1.0;
  for (int i = 0; i < 1500; ++i) {
    UpdateReport r = agent.update(buf, rng);
    REQUIRE(!r.diverged);
    CHECK(r.bc >= 0.0);
    last = r.bc;
  }
  CHECK(last < 1e-4);
  CHECK(agent.num_critics() == 0);
}

TEST_CASE("agent action helpers respect bounds") {
  Agent agent(small_config(Algorithm::sac_cql), 3, 2, 29);
  Rng rng(31);
  Vector obs = rng.uniform_vector(3, -1.0, 1.0);
  Vector mean = agent.act_mean(obs);
  CHECK(mean.size() == 2);
  CHECK((mean.array().abs() < 1.0).all());
  for (int i = 0; i < 20; ++i) {
    Vector a = agent.act_sample(obs, rng);
    CHECK((a.array().abs() < 1.0).all());
  }
}
