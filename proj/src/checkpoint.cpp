#include "simpleq/checkpoint.hpp"

#include <fstream>

namespace simpleq {

namespace {

const char* activation_name(Activation a) {
  switch (a) {
    case Activation::identity:
      return "identity";
    case Activation::tanh_fn:
      return "tanh";
    case Activation::relu:
      return "relu";
  }
  return "identity";
}

Activation activation_from_name(const std::string& s) {
  if (s == "identity") return Activation::identity;
  if (s == "tanh") return Activation::tanh_fn;
  if (s == "relu") return Activation::relu;
  throw IoError("unknown activation in checkpoint: " + s);
}

const char* norm_name(Norm n) {
  switch (n) {
    case Norm::none:
      return "none";
    case Norm::batch_norm:
      return "batch_norm";
    case Norm::layer_norm:
      return "layer_norm";
  }
  return "none";
}

Norm norm_from_name(const std::string& s) {
  if (s == "none") return Norm::none;
  if (s == "batch_norm") return Norm::batch_norm;
  if (s == "layer_norm") return Norm::layer_norm;
  throw IoError("unknown norm in checkpoint: " + s);
}

}  // namespace

Json matrix_to_json(const Matrix& m) {
  Json rows = Json::array();
  for (Eigen::Index r = 0; r < m.rows(); ++r) {
    Json row = Json::array();
    for (Eigen::Index c = 0; c < m.cols(); ++c) row.push_back(m(r, c));
    rows.push_back(std::move(row));
  }
  return rows;
}

Matrix matrix_from_json(const Json& j) {
  const Eigen::Index rows = static_cast<Eigen::Index>(j.size());
  if (rows == 0) return Matrix(0, 0);
  const Eigen::Index cols = static_cast<Eigen::Index>(j[0].size());
  Matrix m(rows, cols);
  for (Eigen::Index r = 0; r < rows; ++r) {
    if (static_cast<Eigen::Index>(j[r].size()) != cols) throw IoError("ragged matrix in file");
    for (Eigen::Index c = 0; c < cols; ++c) m(r, c) = j[r][c].get<double>();
  }
  return m;
}

Json vector_to_json(const Vector& v) {
  Json arr = Json::array();
  for (Eigen::Index i = 0; i < v.size(); ++i) arr.push_back(v(i));
  return arr;
}

Vector vector_from_json(const Json& j) {
  Vector v(static_cast<Eigen::Index>(j.size()));
  for (Eigen::Index i = 0; i < v.size(); ++i) v(i) = j[i].get<double>();
  return v;
}

Json params_to_json(const MlpParams& params) {
  Json j;
  j["format"] = "simpleq-mlp/1";
  j["bn_momentum"] = params.bn_momentum;
  Json layers = Json::array();
  for (const LayerParams& layer : params.layers) {
    Json l;
    l["activation"] = activation_name(layer.activation);
    l["norm"] = norm_name(layer.norm);
    l["weight"] = matrix_to_json(layer.weight);
    l["bias"] = vector_to_json(layer.bias);
    if (layer.norm != Norm::none) {
      l["gamma"] = vector_to_json(layer.gamma);
      l["beta"] = vector_to_json(layer.beta);
    }
    if (layer.norm == Norm::batch_norm) {
      l["running_mean"] = vector_to_json(layer.running_mean);
      l["running_var"] = vector_to_json(layer.running_var);
    }
    layers.push_back(std::move(l));
  }
  j["layers"] = std::move(layers);
  return j;
}

MlpParams params_from_json(const Json& j) {
  if (j.value("format", "") != "simpleq-mlp/1") throw IoError("unrecognized network format");
  MlpParams params;
  params.bn_momentum = j.at("bn_momentum").get<double>();
  for (const Json& l : j.at("layers")) {
    LayerParams layer;
    layer.activation = activation_from_name(l.at("activation").get<std::string>());
    layer.norm = norm_from_name(l.at("norm").get<std::string>());
    layer.weight = matrix_from_json(l.at("weight"));
    layer.bias = vector_from_json(l.at("bias"));
    if (layer.norm != Norm::none) {
      layer.gamma = vector_from_json(l.at("gamma"));
      layer.beta = vector_from_json(l.at("beta"));
    }
    if (layer.norm == Norm::batch_norm) {
      layer.running_mean = vector_from_json(l.at("running_mean"));
      layer.running_var = vector_from_json(l.at("running_var"));
    }
    params.layers.push_back(std::move(layer));
  }
  return params;
}

Json adam_to_json(const AdamState& state) {
  Json j;
  j["step"] = state.step;
  j["lr"] = state.lr;
  j["beta1"] = state.beta1;
  j["beta2"] = state.beta2;
  j["eps"] = state.eps;
  Json blocks = Json::array();
  for (std::size_t i = 0; i < state.m.size(); ++i) {
    Json b;
    b["m_weight"] = matrix_to_json(state.m[i].weight);
    b["v_weight"] = matrix_to_json(state.v[i].weight);
    b["m_bias"] = vector_to_json(state.m[i].bias);
    b["v_bias"] = vector_to_json(state.v[i].bias);
    b["m_gamma"] = vector_to_json(state.m[i].gamma);
    b["v_gamma"] = vector_to_json(state.v[i].gamma);
    b["m_beta"] = vector_to_json(state.m[i].beta);
    b["v_beta"] = vector_to_json(state.v[i].beta);
    blocks.push_back(std::move(b));
  }
  j["blocks"] = std::move(blocks);
  return j;
}

AdamState adam_from_json(const Json& j, const MlpParams& params) {
  AdamState state = make_adam(params, j.at("lr").get<double>());
  state.step = j.at("step").get<long>();
  state.beta1 = j.at("beta1").get<double>();
  state.beta2 = j.at("beta2").get<double>();
  state.eps = j.at("eps").get<double>();
  const Json& blocks = j.at("blocks");
  if (blocks.size() != state.m.size()) throw IoError("optimizer state does not match network");
  for (std::size_t i = 0; i < state.m.size(); ++i) {
    state.m[i].weight = matrix_from_json(blocks[i].at("m_weight"));
    state.v[i].weight = matrix_from_json(blocks[i].at("v_weight"));
    state.m[i].bias = vector_from_json(blocks[i].at("m_bias"));
    state.v[i].bias = vector_from_json(blocks[i].at("v_bias"));
    state.m[i].gamma = vector_from_json(blocks[i].at("m_gamma"));
    state.v[i].gamma = vector_from_json(blocks[i].at("v_gamma"));
    state.m[i].beta = vector_from_json(blocks[i].at("m_beta"));
    state.v[i].beta = vector_from_json(blocks[i].at("v_beta"));
  }
  return state;
}

void write_json_file(const std::string& path, const Json& j) {
  std::ofstream out(path);
  if (!out) throw IoError("cannot open for writing: " + path);
  out << j.dump(2) << "\n";
  if (!out) throw IoError("write failed: " + path);
}

Json read_json_file(const std::string& path) {
  std::ifstream in(path);
  if (!in) throw IoError("cannot open: " + path);
  Json j;
  try {
    in >> j;
  } catch (const std::exception& e) {
    throw IoError("invalid JSON in " + path + ": " + e.what());
  }
  return j;
}

}  // namespace simpleq
