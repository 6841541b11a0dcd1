#include "simpleq/mlp.hpp"

#include <cmath>

namespace simpleq {

namespace {

constexpr double kNormEps = 1e-8;

Matrix apply_activation(Activation act, const Matrix& h) {
  switch (act) {
    case Activation::identity:
      return h;
    case Activation::tanh_fn:
      return h.array().tanh().matrix();
    case Activation::relu:
      return h.array().max(0.0).matrix();
  }
  throw ConfigError("unknown activation");
}

}  // namespace

MlpParams make_mlp(const std::vector<LayerSpec>& spec, Rng& rng) {
  if (spec.empty()) throw ConfigError("mlp needs at least one layer");
  MlpParams params;
  params.layers.reserve(spec.size());
  for (std::size_t i = 0; i < spec.size(); ++i) {
    const LayerSpec& s = spec[i];
    if (s.in <= 0 || s.out <= 0) throw ConfigError("layer dimensions must be positive");
    if (i > 0 && spec[i - 1].out != s.in)
      throw ConfigError("consecutive layer dimensions are incompatible");
    LayerParams layer;
    const double fan_in = static_cast<double>(s.in);
    const double fan_out = static_cast<double>(s.out);
    const double limit = s.activation == Activation::relu
                             ? std::sqrt(6.0 / fan_in)
                             : std::sqrt(6.0 / (fan_in + fan_out));
    layer.weight = rng.uniform_matrix(s.out, s.in, -limit, limit);
    if (s.bias) layer.bias = Vector::Zero(s.out);
    layer.activation = s.activation;
    layer.norm = s.norm;
    if (s.norm != Norm::none) {
      layer.gamma = Vector::Ones(s.out);
      layer.beta = Vector::Zero(s.out);
    }
    if (s.norm == Norm::batch_norm) {
      layer.running_mean = Vector::Zero(s.out);
      layer.running_var = Vector::Ones(s.out);
    }
    params.layers.push_back(std::move(layer));
  }
  return params;
}

MlpParams make_mlp(Eigen::Index in, const std::vector<Eigen::Index>& hidden, Eigen::Index out,
                   Activation hidden_act, Norm hidden_norm, Rng& rng, bool output_bias) {
  std::vector<LayerSpec> spec;
  Eigen::Index prev = in;
  for (Eigen::Index h : hidden) {
    spec.push_back({prev, h, hidden_act, hidden_norm, true});
    prev = h;
  }
  spec.push_back({prev, out, Activation::identity, Norm::none, output_bias});
  return make_mlp(spec, rng);
}

namespace {

// Shared forward core. `stat_updates` receives (mean, var) per batch_norm
// layer in train mode so the mutable wrapper can fold them into the params.
Matrix forward_impl(const MlpParams& params, const Matrix& input, Mode mode, MlpTape* tape,
                    std::vector<std::pair<Eigen::Index, std::pair<Vector, Vector>>>* stat_updates) {
  if (params.layers.empty()) throw ConfigError("empty network");
  if (input.rows() != params.input_dim())
    throw ConfigError("input width does not match first layer");
  if (tape) {
    tape->layers.assign(params.layers.size(), LayerTape{});
    tape->mode = mode;
    tape->params_version = params.version;
  }

  Matrix x = input;
  const Eigen::Index batch = input.cols();
  for (std::size_t li = 0; li < params.layers.size(); ++li) {
    const LayerParams& layer = params.layers[li];
    Matrix z = layer.weight * x;
    if (layer.bias.size() > 0) z.colwise() += layer.bias;

    Matrix h;
    Matrix zhat;
    Vector inv_std;
    if (layer.norm == Norm::batch_norm) {
      if (mode == Mode::train) {
        if (batch < 2) throw ConfigError("batch_norm in train mode requires batch size >= 2");
        const Vector mean = z.rowwise().mean();
        Matrix centered = z.colwise() - mean;
        const Vector var = centered.array().square().rowwise().mean();
        inv_std = (var.array() + kNormEps).rsqrt();
        zhat = centered.array().colwise() * inv_std.array();
        if (stat_updates) stat_updates->push_back({static_cast<Eigen::Index>(li), {mean, var}});
      } else {
        inv_std = (layer.running_var.array() + kNormEps).rsqrt();
        zhat = (z.colwise() - layer.running_mean).array().colwise() * inv_std.array();
      }
      h = (zhat.array().colwise() * layer.gamma.array()).matrix();
      h.colwise() += layer.beta;
    } else if (layer.norm == Norm::layer_norm) {
      const Eigen::Index dim = z.rows();
      Eigen::RowVectorXd mean = z.colwise().mean();
      Matrix centered = z.rowwise() - mean;
      Eigen::RowVectorXd var = centered.array().square().colwise().mean();
      inv_std = (var.transpose().array() + kNormEps).rsqrt();
      zhat = centered.array().rowwise() * inv_std.transpose().array();
      (void)dim;
      h = (zhat.array().colwise() * layer.gamma.array()).matrix();
      h.colwise() += layer.beta;
    } else {
      h = z;
    }

    Matrix a = apply_activation(layer.activation, h);
    if (tape) {
      LayerTape& lt = tape->layers[li];
      lt.input = x;
      lt.normalized = std::move(zhat);
      lt.inv_std = std::move(inv_std);
      lt.pre_act = std::move(h);
      lt.output = a;
    }
    x = std::move(a);
  }
  return x;
}

}  // namespace

Matrix mlp_forward(MlpParams& params, const Matrix& input, Mode mode, MlpTape* tape) {
  std::vector<std::pair<Eigen::Index, std::pair<Vector, Vector>>> updates;
  Matrix out = forward_impl(params, input, mode, tape, &updates);
  for (const auto& [li, mv] : updates) {
    LayerParams& layer = params.layers[li];
    const double m = params.bn_momentum;
    layer.running_mean = m * layer.running_mean + (1.0 - m) * mv.first;
    layer.running_var = m * layer.running_var + (1.0 - m) * mv.second;
  }
  return out;
}

Matrix mlp_forward(const MlpParams& params, const Matrix& input, Mode mode, MlpTape* tape) {
  if (mode == Mode::train) {
    for (const LayerParams& layer : params.layers)
      if (layer.norm == Norm::batch_norm)
        throw ConfigError("train-mode batch_norm forward needs mutable params");
  }
  return forward_impl(params, input, mode, tape, nullptr);
}

Vector mlp_forward(const MlpParams& params, const Vector& input, Mode mode) {
  return mlp_forward(params, Matrix(input), mode, nullptr).col(0);
}

void MlpGradients::set_zero() {
  for (LayerGrads& g : layers) {
    g.weight.setZero();
    g.bias.setZero();
    g.gamma.setZero();
    g.beta.setZero();
  }
}

MlpGradients& MlpGradients::operator+=(const MlpGradients& other) {
  for (std::size_t i = 0; i < layers.size(); ++i) {
    layers[i].weight += other.layers[i].weight;
    if (layers[i].bias.size() > 0) layers[i].bias += other.layers[i].bias;
    if (layers[i].gamma.size() > 0) {
      layers[i].gamma += other.layers[i].gamma;
      layers[i].beta += other.layers[i].beta;
    }
  }
  return *this;
}

MlpGradients& MlpGradients::operator*=(double s) {
  for (LayerGrads& g : layers) {
    g.weight *= s;
    g.bias *= s;
    g.gamma *= s;
    g.beta *= s;
  }
  return *this;
}

bool MlpGradients::all_finite() const {
  for (const LayerGrads& g : layers) {
    if (!g.weight.allFinite() || !g.bias.allFinite() || !g.gamma.allFinite() ||
        !g.beta.allFinite())
      return false;
  }
  return true;
}

MlpGradients zero_gradients(const MlpParams& params) {
  MlpGradients grads;
  grads.layers.reserve(params.layers.size());
  for (const LayerParams& layer : params.layers) {
    LayerGrads g;
    g.weight = Matrix::Zero(layer.weight.rows(), layer.weight.cols());
    g.bias = Vector::Zero(layer.bias.size());
    g.gamma = Vector::Zero(layer.gamma.size());
    g.beta = Vector::Zero(layer.beta.size());
    grads.layers.push_back(std::move(g));
  }
  return grads;
}

Matrix mlp_backward_acc(const MlpParams& params, const MlpTape& tape, const Matrix& upstream,
                        MlpGradients& grads, int from_layer) {
  if (tape.params_version != params.version)
    throw StaleTapeError("tape is stale: parameters were updated after forward");
  if (tape.layers.size() != params.layers.size())
    throw ConfigError("tape does not match network");
  const int last = from_layer < 0 ? static_cast<int>(params.layers.size()) - 1 : from_layer;
  if (last < 0 || last >= static_cast<int>(params.layers.size()))
    throw ConfigError("backward injection layer out of range");
  if (upstream.rows() != params.layers[last].out_dim() ||
      upstream.cols() != tape.layers[last].output.cols())
    throw ConfigError("upstream gradient shape mismatch");

  Matrix da = upstream;
  for (int li = last; li >= 0; --li) {
    const LayerParams& layer = params.layers[li];
    const LayerTape& lt = tape.layers[li];
    const Eigen::Index batch = lt.input.cols();

    Matrix dh;
    switch (layer.activation) {
      case Activation::identity:
        dh = std::move(da);
        break;
      case Activation::tanh_fn:
        dh = (da.array() * (1.0 - lt.output.array().square())).matrix();
        break;
      case Activation::relu:
        dh = (da.array() * (lt.pre_act.array() > 0.0).cast<double>()).matrix();
        break;
    }

    Matrix dz;
    if (layer.norm != Norm::none) {
      grads.layers[li].gamma += (dh.array() * lt.normalized.array()).rowwise().sum().matrix();
      grads.layers[li].beta += dh.rowwise().sum();
      Matrix dzhat = dh.array().colwise() * layer.gamma.array();
      if (layer.norm == Norm::batch_norm) {
        if (tape.mode == Mode::train) {
          const double n = static_cast<double>(batch);
          const Vector s1 = dzhat.rowwise().sum();
          const Vector s2 = (dzhat.array() * lt.normalized.array()).rowwise().sum();
          Matrix tmp = n * dzhat;
          tmp.colwise() -= s1;
          tmp -= (lt.normalized.array().colwise() * s2.array()).matrix();
          dz = tmp.array().colwise() * (lt.inv_std.array() / n);
        } else {
          dz = dzhat.array().colwise() * lt.inv_std.array();
        }
      } else {  // layer_norm; normalization runs per sample over features
        const double d = static_cast<double>(layer.out_dim());
        Eigen::RowVectorXd s1 = dzhat.colwise().sum();
        Eigen::RowVectorXd s2 = (dzhat.array() * lt.normalized.array()).colwise().sum();
        Matrix tmp = d * dzhat;
        tmp.rowwise() -= s1;
        tmp -= (lt.normalized.array().rowwise() * s2.array()).matrix();
        dz = tmp.array().rowwise() * (lt.inv_std.transpose().array() / d);
      }
    } else {
      dz = std::move(dh);
    }

    grads.layers[li].weight += dz * lt.input.transpose();
    if (layer.bias.size() > 0) grads.layers[li].bias += dz.rowwise().sum();
    da = layer.weight.transpose() * dz;
  }
  return da;
}

MlpGradients mlp_backward(const MlpParams& params, const MlpTape& tape, const Matrix& upstream) {
  MlpGradients grads = zero_gradients(params);
  mlp_backward_acc(params, tape, upstream, grads);
  return grads;
}

AdamState make_adam(const MlpParams& params, double lr) {
  AdamState state;
  MlpGradients z = zero_gradients(params);
  state.m = z.layers;
  state.v = std::move(z.layers);
  state.lr = lr;
  return state;
}

namespace {

template <typename P, typename G>
void adam_block(P& param, const G& grad, G& m, G& v, double lr, double b1, double b2, double eps,
                double bc1, double bc2) {
  if (param.size() == 0) return;
  m = b1 * m + (1.0 - b1) * grad;
  v = (b2 * v.array() + (1.0 - b2) * grad.array().square()).matrix();
  param.array() -= lr * (m.array() / bc1) / ((v.array() / bc2).sqrt() + eps);
}

}  // namespace

void adam_step(MlpParams& params, const MlpGradients& grads, AdamState& state) {
  if (!grads.all_finite()) throw DivergenceFault("non-finite gradients in optimizer step");
  state.step += 1;
  const double bc1 = 1.0 - std::pow(state.beta1, static_cast<double>(state.step));
  const double bc2 = 1.0 - std::pow(state.beta2, static_cast<double>(state.step));
  for (std::size_t i = 0; i < params.layers.size(); ++i) {
    LayerParams& p = params.layers[i];
    const LayerGrads& g = grads.layers[i];
    adam_block(p.weight, g.weight, state.m[i].weight, state.v[i].weight, state.lr, state.beta1,
               state.beta2, state.eps, bc1, bc2);
    adam_block(p.bias, g.bias, state.m[i].bias, state.v[i].bias, state.lr, state.beta1,
               state.beta2, state.eps, bc1, bc2);
    adam_block(p.gamma, g.gamma, state.m[i].gamma, state.v[i].gamma, state.lr, state.beta1,
               state.beta2, state.eps, bc1, bc2);
    adam_block(p.beta, g.beta, state.m[i].beta, state.v[i].beta, state.lr, state.beta1,
               state.beta2, state.eps, bc1, bc2);
  }
  params.version += 1;
}

void sgd_step(MlpParams& params, const MlpGradients& grads, double lr) {
  if (!grads.all_finite()) throw DivergenceFault("non-finite gradients in optimizer step");
  for (std::size_t i = 0; i < params.layers.size(); ++i) {
    LayerParams& p = params.layers[i];
    const LayerGrads& g = grads.layers[i];
    p.weight -= lr * g.weight;
    if (p.bias.size() > 0) p.bias -= lr * g.bias;
    if (p.gamma.size() > 0) {
      p.gamma -= lr * g.gamma;
      p.beta -= lr * g.beta;
    }
  }
  params.version += 1;
}

long param_count(const MlpParams& params) {
  long n = 0;
  for (const LayerParams& layer : params.layers)
    n += layer.weight.size() + layer.bias.size() + layer.gamma.size() + layer.beta.size();
  return n;
}

namespace {

// Visits every trainable coordinate in a fixed order (weights column-major,
// then bias, gamma, beta per layer).
template <typename Fn>
void for_each_coord(MlpParams& params, Fn&& fn) {
  for (std::size_t li = 0; li < params.layers.size(); ++li) {
    LayerParams& layer = params.layers[li];
    for (Eigen::Index k = 0; k < layer.weight.size(); ++k) fn(li, 0, k, layer.weight.data()[k]);
    for (Eigen::Index k = 0; k < layer.bias.size(); ++k) fn(li, 1, k, layer.bias.data()[k]);
    for (Eigen::Index k = 0; k < layer.gamma.size(); ++k) fn(li, 2, k, layer.gamma.data()[k]);
    for (Eigen::Index k = 0; k < layer.beta.size(); ++k) fn(li, 3, k, layer.beta.data()[k]);
  }
}

double grad_coord(const MlpGradients& grads, std::size_t li, int block, Eigen::Index k) {
  const LayerGrads& g = grads.layers[li];
  switch (block) {
    case 0:
      return g.weight.data()[k];
    case 1:
      return g.bias.data()[k];
    case 2:
      return g.gamma.data()[k];
    default:
      return g.beta.data()[k];
  }
}

}  // namespace

Vector flatten_params(const MlpParams& params) {
  Vector out(param_count(params));
  Eigen::Index pos = 0;
  for_each_coord(const_cast<MlpParams&>(params),
                 [&](std::size_t, int, Eigen::Index, double& value) { out(pos++) = value; });
  return out;
}

Vector flatten_gradients(const MlpGradients& grads) {
  Eigen::Index total = 0;
  for (const LayerGrads& g : grads.layers)
    total += g.weight.size() + g.bias.size() + g.gamma.size() + g.beta.size();
  Vector out(total);
  Eigen::Index pos = 0;
  for (const LayerGrads& g : grads.layers) {
    for (Eigen::Index k = 0; k < g.weight.size(); ++k) out(pos++) = g.weight.data()[k];
    for (Eigen::Index k = 0; k < g.bias.size(); ++k) out(pos++) = g.bias.data()[k];
    for (Eigen::Index k = 0; k < g.gamma.size(); ++k) out(pos++) = g.gamma.data()[k];
    for (Eigen::Index k = 0; k < g.beta.size(); ++k) out(pos++) = g.beta.data()[k];
  }
  return out;
}

double gradient_check(const std::function<double(MlpParams&)>& f, MlpParams& params,
                      const MlpGradients& analytic, double eps, int max_coords,
                      std::uint64_t subsample_seed) {
  if (eps <= 0.0) throw ConfigError("gradient_check eps must be positive");
  const long total = param_count(params);
  double keep_prob = 1.0;
  if (max_coords > 0 && total > max_coords)
    keep_prob = static_cast<double>(max_coords) / static_cast<double>(total);
  Rng pick(mix_seed(subsample_seed, 0x6fd1));

  double max_rel = 0.0;
  for_each_coord(params, [&](std::size_t li, int block, Eigen::Index k, double& value) {
    if (keep_prob < 1.0 && pick.uniform() > keep_prob) return;
    const double saved = value;
    value = saved + eps;
    const double up = f(params);
    value = saved - eps;
    const double down = f(params);
    value = saved;
    const double fd = (up - down) / (2.0 * eps);
    const double an = grad_coord(analytic, li, block, k);
    const double denom = std::max({std::abs(fd), std::abs(an), 1e-4});
    max_rel = std::max(max_rel, std::abs(fd - an) / denom);
  });
  return max_rel;
}

}  // namespace simpleq
