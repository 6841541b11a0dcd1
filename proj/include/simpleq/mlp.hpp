#pragma once

#include <cstdint>
#include <functional>
#include <vector>

#include "simpleq/common.hpp"

namespace simpleq {

enum class Activation { identity, tanh_fn, relu };
enum class Norm { none, batch_norm, layer_norm };
enum class Mode { train, eval };

// One dense layer: z = W x (+ b), h = norm(z) * gamma + beta, a = act(h).
// gamma/beta/running stats are empty unless the layer has a normalizer.
struct LayerParams {
  Matrix weight;  // out x in
  Vector bias;    // out; size 0 when the layer has no bias
  Vector gamma;
  Vector beta;
  Vector running_mean;
  Vector running_var;
  Activation activation = Activation::identity;
  Norm norm = Norm::none;

  Eigen::Index in_dim() const { return weight.cols(); }
  Eigen::Index out_dim() const { return weight.rows(); }
};

struct LayerSpec {
  Eigen::Index in = 0;
  Eigen::Index out = 0;
  Activation activation = Activation::identity;
  Norm norm = Norm::none;
  bool bias = true;
};

// Parameter container for a dense network. `version` is bumped by every
// in-place parameter update and lets backward detect stale tapes.
struct MlpParams {
  std::vector<LayerParams> layers;
  double bn_momentum = 0.99;
  std::uint64_t version = 0;

  Eigen::Index input_dim() const { return layers.front().in_dim(); }
  Eigen::Index output_dim() const { return layers.back().out_dim(); }
};

// Fan-in scaled uniform init: He-style for relu layers, Xavier-style
// otherwise. Biases zero, gamma one, beta zero, running stats (0, 1).
MlpParams make_mlp(const std::vector<LayerSpec>& spec, Rng& rng);

// Convenience builder: `hidden` layers with the given activation/norm, then a
// linear output layer (identity, no norm).
MlpParams make_mlp(Eigen::Index in, const std::vector<Eigen::Index>& hidden, Eigen::Index out,
                   Activation hidden_act, Norm hidden_norm, Rng& rng, bool output_bias = true);

struct LayerTape {
  Matrix input;       // in x B
  Matrix normalized;  // zhat before affine; empty when no norm
  Vector inv_std;     // per-feature (batch_norm) or per-sample (layer_norm)
  Matrix pre_act;     // h
  Matrix output;      // a
};

struct MlpTape {
  std::vector<LayerTape> layers;
  Mode mode = Mode::eval;
  std::uint64_t params_version = 0;

  const Matrix& output() const { return layers.back().output; }
  // Output of the second-to-last layer; the feature view used by critics.
  const Matrix& penultimate() const { return layers[layers.size() - 2].output; }
};

// Samples are columns. Train mode uses batch statistics for batch_norm layers
// and updates the running estimates in place; eval mode reads the running
// estimates and is a pure function of (params, input).
Matrix mlp_forward(MlpParams& params, const Matrix& input, Mode mode, MlpTape* tape = nullptr);

// Const overload; batch_norm layers in train mode are rejected since they
// would have to mutate running statistics.
Matrix mlp_forward(const MlpParams& params, const Matrix& input, Mode mode,
                   MlpTape* tape = nullptr);

Vector mlp_forward(const MlpParams& params, const Vector& input, Mode mode);

struct LayerGrads {
  Matrix weight;
  Vector bias;
  Vector gamma;
  Vector beta;
};

struct MlpGradients {
  std::vector<LayerGrads> layers;

  void set_zero();
  MlpGradients& operator+=(const MlpGradients& other);
  MlpGradients& operator*=(double s);
  bool all_finite() const;
};

MlpGradients zero_gradients(const MlpParams& params);

// Gradient of (upstream . output-of-layer `from_layer`) w.r.t. parameters,
// accumulated into `grads`; returns the gradient w.r.t. the network input.
// `from_layer == -1` injects at the final layer output. Layers above the
// injection point receive no gradient.
Matrix mlp_backward_acc(const MlpParams& params, const MlpTape& tape, const Matrix& upstream,
                        MlpGradients& grads, int from_layer = -1);

MlpGradients mlp_backward(const MlpParams& params, const MlpTape& tape, const Matrix& upstream);

struct AdamState {
  std::vector<LayerGrads> m;
  std::vector<LayerGrads> v;
  long step = 0;
  double lr = 3e-4;
  double beta1 = 0.9;
  double beta2 = 0.999;
  double eps = 1e-8;
};

AdamState make_adam(const MlpParams& params, double lr);

// Standard bias-corrected Adam. Throws DivergenceFault on non-finite
// gradients; nothing is clamped.
void adam_step(MlpParams& params, const MlpGradients& grads, AdamState& state);

// Plain gradient step, used by the first-order learning-dynamics checks.
void sgd_step(MlpParams& params, const MlpGradients& grads, double lr);

long param_count(const MlpParams& params);
Vector flatten_params(const MlpParams& params);
Vector flatten_gradients(const MlpGradients& grads);

// Central-difference comparison of an analytic gradient over all parameter
// coordinates (or a seeded subsample of max_coords when positive). Returns
// the max of |fd - analytic| / max(|fd|, |analytic|, 1e-4).
double gradient_check(const std::function<double(MlpParams&)>& f, MlpParams& params,
                      const MlpGradients& analytic, double eps, int max_coords = 0,
                      std::uint64_t subsample_seed = 0);

}  // namespace simpleq
