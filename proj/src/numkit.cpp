#include "demorl/numkit.hpp"

#include <algorithm>
#include <cmath>
#include <sstream>

#include "demorl/errors.hpp"

namespace demorl {

std::string rng_to_string(const Rng& rng) {
  std::ostringstream out;
  out << rng;
  return out.str();
}

Rng rng_from_string(const std::string& text) {
  Rng rng;
  std::istringstream in(text);
  in >> rng;
  if (in.fail()) throw InvalidInput("malformed rng state");
  return rng;
}

}  // namespace demorl

namespace demorl::nn {

namespace {

void apply_activation(Activation a, const Matrix& pre, Matrix& post) {
  switch (a) {
    case Activation::relu:
      post = pre.cwiseMax(0.0);
      break;
    case Activation::tanh:
      post = pre.array().tanh().matrix();
      break;
    case Activation::identity:
      post = pre;
      break;
  }
}

// dL/dpre from dL/dpost.
void activation_backward(Activation a, const Matrix& pre, const Matrix& post, Matrix& grad) {
  switch (a) {
    case Activation::relu:
      grad = (pre.array() > 0.0).select(grad, 0.0);
      break;
    case Activation::tanh:
      grad.array() *= 1.0 - post.array().square();
      break;
    case Activation::identity:
      break;
  }
}

template <class Fn>
void for_each_param_pair(std::vector<LayerGrad>& a, const std::vector<LayerGrad>& b, Fn fn) {
  for (std::size_t k = 0; k < a.size(); ++k) {
    fn(a[k].weight, b[k].weight);
    fn(a[k].bias, b[k].bias);
  }
}

std::vector<LayerGrad> zero_layer_grads(const DenseNet& net) {
  std::vector<LayerGrad> out;
  out.reserve(net.layers().size());
  for (const auto& l : net.layers()) {
    out.push_back({Matrix::Zero(l.weight.rows(), l.weight.cols()), RowVector::Zero(l.bias.cols())});
  }
  return out;
}

nlohmann::json matrix_json(const Eigen::Ref<const Matrix>& m) {
  return std::vector<double>(m.data(), m.data() + m.size());
}

void read_flat(const nlohmann::json& j, double* dst, std::size_t n, const char* what) {
  if (!j.is_array() || j.size() != n) {
    throw InvalidInput(std::string("checkpoint: wrong element count for ") + what);
  }
  for (std::size_t i = 0; i < n; ++i) dst[i] = j[i].get<double>();
}

}  // namespace

std::string to_string(Activation a) {
  switch (a) {
    case Activation::relu:
      return "relu";
    case Activation::tanh:
      return "tanh";
    case Activation::identity:
      return "identity";
  }
  return "identity";
}

Activation activation_from_string(const std::string& name) {
  if (name == "relu") return Activation::relu;
  if (name == "tanh") return Activation::tanh;
  if (name == "identity") return Activation::identity;
  throw InvalidInput("unknown activation '" + name + "'");
}

DenseNet::DenseNet(std::vector<Layer> layers) : layers_(std::move(layers)) {
  for (std::size_t k = 0; k < layers_.size(); ++k) {
    const auto& l = layers_[k];
    if (l.bias.cols() != l.weight.cols()) throw InvalidInput("layer bias width != weight columns");
    if (k > 0 && layers_[k - 1].out_dim() != l.in_dim()) {
      throw InvalidInput("adjacent layer dimensions do not chain");
    }
  }
}

DenseNet DenseNet::random(const std::vector<std::size_t>& dims, Activation hidden, Activation output,
                          Rng& rng) {
  DenseNet net = zeros(dims, hidden, output);
  for (auto& l : net.layers_) {
    const double bound = 1.0 / std::sqrt(static_cast<double>(l.in_dim()));
    for (Eigen::Index i = 0; i < l.weight.size(); ++i) l.weight.data()[i] = uniform(rng, -bound, bound);
    for (Eigen::Index i = 0; i < l.bias.size(); ++i) l.bias.data()[i] = uniform(rng, -bound, bound);
  }
  return net;
}

DenseNet DenseNet::zeros(const std::vector<std::size_t>& dims, Activation hidden, Activation output) {
  if (dims.size() < 2) throw InvalidInput("a network needs at least input and output widths");
  std::vector<Layer> layers;
  for (std::size_t k = 0; k + 1 < dims.size(); ++k) {
    if (dims[k] == 0 || dims[k + 1] == 0) throw InvalidInput("zero-width layer");
    Layer l;
    l.weight = Matrix::Zero(static_cast<Eigen::Index>(dims[k]), static_cast<Eigen::Index>(dims[k + 1]));
    l.bias = RowVector::Zero(static_cast<Eigen::Index>(dims[k + 1]));
    l.activation = (k + 2 == dims.size()) ? output : hidden;
    layers.push_back(std::move(l));
  }
  return DenseNet(std::move(layers));
}

std::size_t DenseNet::input_dim() const { return layers_.empty() ? 0 : layers_.front().in_dim(); }
std::size_t DenseNet::output_dim() const { return layers_.empty() ? 0 : layers_.back().out_dim(); }

std::size_t DenseNet::parameter_count() const {
  std::size_t n = 0;
  for (const auto& l : layers_) n += static_cast<std::size_t>(l.weight.size() + l.bias.size());
  return n;
}

std::vector<std::size_t> DenseNet::dims() const {
  std::vector<std::size_t> d;
  if (layers_.empty()) return d;
  d.push_back(input_dim());
  for (const auto& l : layers_) d.push_back(l.out_dim());
  return d;
}

bool DenseNet::all_finite() const {
  return std::all_of(layers_.begin(), layers_.end(),
                     [](const Layer& l) { return l.weight.allFinite() && l.bias.allFinite(); });
}

bool DenseNet::same_shape(const DenseNet& other) const {
  if (layers_.size() != other.layers_.size()) return false;
  for (std::size_t k = 0; k < layers_.size(); ++k) {
    if (layers_[k].weight.rows() != other.layers_[k].weight.rows() ||
        layers_[k].weight.cols() != other.layers_[k].weight.cols() ||
        layers_[k].activation != other.layers_[k].activation) {
      return false;
    }
  }
  return true;
}

bool operator==(const DenseNet& a, const DenseNet& b) {
  if (!a.same_shape(b)) return false;
  for (std::size_t k = 0; k < a.layers_.size(); ++k) {
    if (a.layers_[k].weight != b.layers_[k].weight || a.layers_[k].bias != b.layers_[k].bias) return false;
  }
  return true;
}

GradBundle GradBundle::zeros_like(const DenseNet& net) { return GradBundle{zero_layer_grads(net), std::nullopt}; }

GradBundle& GradBundle::operator+=(const GradBundle& other) {
  add_scaled(other, 1.0);
  return *this;
}

GradBundle& GradBundle::operator*=(double s) {
  for (auto& l : layers) {
    l.weight *= s;
    l.bias *= s;
  }
  return *this;
}

void GradBundle::add_scaled(const GradBundle& other, double s) {
  if (other.layers.size() != layers.size()) throw InvalidInput("gradient bundles differ in depth");
  for_each_param_pair(layers, other.layers, [s](auto& a, const auto& b) {
    if (a.rows() != b.rows() || a.cols() != b.cols()) throw InvalidInput("gradient bundles differ in shape");
    a.noalias() += s * b;
  });
}

bool GradBundle::all_finite() const {
  for (const auto& l : layers) {
    if (!l.weight.allFinite() || !l.bias.allFinite()) return false;
  }
  return !input || input->allFinite();
}

bool GradBundle::matches(const DenseNet& net) const {
  if (layers.size() != net.layers().size()) return false;
  for (std::size_t k = 0; k < layers.size(); ++k) {
    const auto& l = net.layers()[k];
    if (layers[k].weight.rows() != l.weight.rows() || layers[k].weight.cols() != l.weight.cols() ||
        layers[k].bias.cols() != l.bias.cols()) {
      return false;
    }
  }
  return true;
}

double GradBundle::max_abs() const {
  double m = 0.0;
  for (const auto& l : layers) {
    if (l.weight.size() > 0) m = std::max(m, l.weight.cwiseAbs().maxCoeff());
    if (l.bias.size() > 0) m = std::max(m, l.bias.cwiseAbs().maxCoeff());
  }
  return m;
}

Matrix forward(const DenseNet& net, const Matrix& batch, ForwardCache* cache) {
  if (net.layers().empty()) throw InvalidInput("forward on an empty network");
  if (static_cast<std::size_t>(batch.cols()) != net.input_dim()) {
    throw InvalidInput("forward: batch has " + std::to_string(batch.cols()) + " columns, network expects " +
                       std::to_string(net.input_dim()));
  }
  const auto& layers = net.layers();
  if (cache) {
    cache->inputs.resize(layers.size());
    cache->pre.resize(layers.size());
    cache->post.resize(layers.size());
  }
  Matrix x = batch;
  Matrix pre;
  Matrix post;
  for (std::size_t k = 0; k < layers.size(); ++k) {
    const auto& l = layers[k];
    pre.noalias() = x * l.weight;
    pre.rowwise() += l.bias;
    apply_activation(l.activation, pre, post);
    if (cache) {
      cache->inputs[k] = std::move(x);
      cache->pre[k] = pre;
      cache->post[k] = post;
      x = post;
    } else {
      x.swap(post);
    }
  }
  return x;
}

GradBundle backward(const DenseNet& net, const ForwardCache& cache, const Matrix& output_grad) {
  const auto& layers = net.layers();
  if (cache.inputs.size() != layers.size() || cache.pre.size() != layers.size()) {
    throw InvalidInput("backward: cache depth does not match the network");
  }
  const Eigen::Index batch = cache.inputs.front().rows();
  for (std::size_t k = 0; k < layers.size(); ++k) {
    if (cache.inputs[k].cols() != layers[k].weight.rows() || cache.pre[k].cols() != layers[k].weight.cols() ||
        cache.inputs[k].rows() != batch) {
      throw InvalidInput("backward: stale cache (layer shapes changed since forward)");
    }
  }
  if (static_cast<std::size_t>(output_grad.cols()) != net.output_dim() || output_grad.rows() != batch) {
    throw InvalidInput("backward: output gradient shape does not match the forward batch");
  }

  GradBundle g;
  g.layers.resize(layers.size());
  Matrix delta = output_grad;
  for (std::size_t k = layers.size(); k-- > 0;) {
    const auto& l = layers[k];
    activation_backward(l.activation, cache.pre[k], cache.post[k], delta);
    g.layers[k].weight.noalias() = cache.inputs[k].transpose() * delta;
    g.layers[k].bias = delta.colwise().sum();
    Matrix upstream;
    upstream.noalias() = delta * l.weight.transpose();
    delta.swap(upstream);
  }
  g.input = std::move(delta);
  return g;
}

AdamState AdamState::for_net(const DenseNet& net, double learning_rate) {
  AdamState s;
  s.m = zero_layer_grads(net);
  s.v = zero_layer_grads(net);
  s.learning_rate = learning_rate;
  return s;
}

void adam_step(DenseNet& net, const GradBundle& grads, AdamState& state) {
  if (!grads.matches(net) || state.m.size() != net.layers().size() || state.v.size() != net.layers().size()) {
    throw InvalidInput("adam_step: gradient or optimizer state shape does not match the network");
  }
  for (const auto& l : grads.layers) {
    if (!l.weight.allFinite() || !l.bias.allFinite()) throw NumericError("adam_step: non-finite gradient");
  }
  state.step += 1;
  const double b1 = state.beta1;
  const double b2 = state.beta2;
  const double c1 = 1.0 - std::pow(b1, static_cast<double>(state.step));
  const double c2 = 1.0 - std::pow(b2, static_cast<double>(state.step));
  const double lr = state.learning_rate;
  const double eps = state.epsilon;
  auto update = [&](auto& param, const auto& g, auto& m, auto& v) {
    m = b1 * m + (1.0 - b1) * g;
    v = b2 * v + (1.0 - b2) * g.cwiseProduct(g);
    param.array() -= lr * (m.array() / c1) / ((v.array() / c2).sqrt() + eps);
  };
  for (std::size_t k = 0; k < net.layers().size(); ++k) {
    auto& l = net.layers()[k];
    update(l.weight, grads.layers[k].weight, state.m[k].weight, state.v[k].weight);
    update(l.bias, grads.layers[k].bias, state.m[k].bias, state.v[k].bias);
  }
}

GradBundle l2_grad(const DenseNet& net, double coeff) {
  if (coeff < 0.0) throw InvalidInput("l2 coefficient must be non-negative");
  GradBundle g = GradBundle::zeros_like(net);
  if (coeff == 0.0) return g;
  for (std::size_t k = 0; k < net.layers().size(); ++k) g.layers[k].weight = coeff * net.layers()[k].weight;
  return g;
}

double l2_penalty(const DenseNet& net, double coeff) {
  double s = 0.0;
  for (const auto& l : net.layers()) s += l.weight.squaredNorm();
  return 0.5 * coeff * s;
}

GradBundle finite_diff_grad(const LossFn& loss_fn, const DenseNet& net, double h) {
  if (!(h > 0.0)) throw InvalidInput("finite difference step must be positive");
  DenseNet probe = net;
  GradBundle g = GradBundle::zeros_like(net);
  auto probe_param = [&](double& p) {
    const double orig = p;
    p = orig + h;
    const double up = loss_fn(probe);
    p = orig - h;
    const double down = loss_fn(probe);
    p = orig;
    return (up - down) / (2.0 * h);
  };
  for (std::size_t k = 0; k < probe.layers().size(); ++k) {
    auto& l = probe.layers()[k];
    for (Eigen::Index i = 0; i < l.weight.size(); ++i) g.layers[k].weight.data()[i] = probe_param(l.weight.data()[i]);
    for (Eigen::Index i = 0; i < l.bias.size(); ++i) g.layers[k].bias.data()[i] = probe_param(l.bias.data()[i]);
  }
  return g;
}

double max_relative_error(const GradBundle& a, const GradBundle& b, double floor) {
  if (a.layers.size() != b.layers.size()) throw InvalidInput("gradient bundles differ in depth");
  double worst = 0.0;
  auto scan = [&](const auto& x, const auto& y) {
    if (x.size() != y.size()) throw InvalidInput("gradient bundles differ in shape");
    for (Eigen::Index i = 0; i < x.size(); ++i) {
      const double xa = x.data()[i];
      const double ya = y.data()[i];
      const double denom = std::max({std::abs(xa), std::abs(ya), floor});
      worst = std::max(worst, std::abs(xa - ya) / denom);
    }
  };
  for (std::size_t k = 0; k < a.layers.size(); ++k) {
    scan(a.layers[k].weight, b.layers[k].weight);
    scan(a.layers[k].bias, b.layers[k].bias);
  }
  return worst;
}

void polyak_average(DenseNet& target, const DenseNet& source, double tau) {
  if (!target.same_shape(source)) throw InvalidInput("polyak_average: networks differ in shape");
  for (std::size_t k = 0; k < target.layers().size(); ++k) {
    auto& t = target.layers()[k];
    const auto& s = source.layers()[k];
    t.weight = tau * s.weight + (1.0 - tau) * t.weight;
    t.bias = tau * s.bias + (1.0 - tau) * t.bias;
  }
}

void to_json(nlohmann::json& j, const DenseNet& net) {
  j = nlohmann::json::object();
  j["dims"] = net.dims();
  auto& layers = j["layers"] = nlohmann::json::array();
  for (const auto& l : net.layers()) {
    layers.push_back({{"activation", to_string(l.activation)}, {"weight", matrix_json(l.weight)},
                      {"bias", matrix_json(l.bias)}});
  }
}

void from_json(const nlohmann::json& j, DenseNet& net) {
  const auto dims = j.at("dims").get<std::vector<std::size_t>>();
  const auto& jl = j.at("layers");
  if (dims.size() != jl.size() + 1) throw InvalidInput("checkpoint: dims and layer count disagree");
  std::vector<Layer> layers;
  for (std::size_t k = 0; k < jl.size(); ++k) {
    Layer l;
    l.activation = activation_from_string(jl[k].at("activation").get<std::string>());
    l.weight.resize(static_cast<Eigen::Index>(dims[k]), static_cast<Eigen::Index>(dims[k + 1]));
    l.bias.resize(static_cast<Eigen::Index>(dims[k + 1]));
    read_flat(jl[k].at("weight"), l.weight.data(), static_cast<std::size_t>(l.weight.size()), "weight");
    read_flat(jl[k].at("bias"), l.bias.data(), static_cast<std::size_t>(l.bias.size()), "bias");
    layers.push_back(std::move(l));
  }
  net = DenseNet(std::move(layers));
}

namespace {

nlohmann::json moments_json(const std::vector<LayerGrad>& m) {
  auto out = nlohmann::json::array();
  for (const auto& l : m) {
    out.push_back({{"rows", l.weight.rows()}, {"cols", l.weight.cols()}, {"weight", matrix_json(l.weight)},
                   {"bias", matrix_json(l.bias)}});
  }
  return out;
}

std::vector<LayerGrad> moments_from_json(const nlohmann::json& j) {
  std::vector<LayerGrad> out;
  for (const auto& e : j) {
    LayerGrad l;
    const auto rows = e.at("rows").get<Eigen::Index>();
    const auto cols = e.at("cols").get<Eigen::Index>();
    l.weight.resize(rows, cols);
    l.bias.resize(cols);
    read_flat(e.at("weight"), l.weight.data(), static_cast<std::size_t>(l.weight.size()), "moment");
    read_flat(e.at("bias"), l.bias.data(), static_cast<std::size_t>(l.bias.size()), "moment");
    out.push_back(std::move(l));
  }
  return out;
}

}  // namespace

void to_json(nlohmann::json& j, const AdamState& s) {
  j = {{"step", s.step},         {"learning_rate", s.learning_rate}, {"beta1", s.beta1},
       {"beta2", s.beta2},       {"epsilon", s.epsilon},             {"m", moments_json(s.m)},
       {"v", moments_json(s.v)}};
}

void from_json(const nlohmann::json& j, AdamState& s) {
  s.step = j.at("step").get<long>();
  s.learning_rate = j.at("learning_rate").get<double>();
  s.beta1 = j.at("beta1").get<double>();
  s.beta2 = j.at("beta2").get<double>();
  s.epsilon = j.at("epsilon").get<double>();
  s.m = moments_from_json(j.at("m"));
  s.v = moments_from_json(j.at("v"));
}

}  // namespace demorl::nn
