#pragma once

// Dense feed-forward networks with hand-written backpropagation, Adam and
// L2 regularization. Everything is batch-first and row-major: a batch is a
// (samples x features) matrix and each layer computes act(X * W + b).

#include <Eigen/Core>
#include <cstddef>
#include <functional>
#include <optional>
#include <string>
#include <vector>

#include <json.hpp>

#include "demorl/rng.hpp"

namespace demorl::nn {

using Matrix = Eigen::Matrix<double, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>;
using RowVector = Eigen::Matrix<double, 1, Eigen::Dynamic>;

enum class Activation { relu, tanh, identity };

std::string to_string(Activation a);
Activation activation_from_string(const std::string& name);

struct Layer {
  Matrix weight;  // (in x out)
  RowVector bias;  // (1 x out)
  Activation activation = Activation::identity;

  std::size_t in_dim() const { return static_cast<std::size_t>(weight.rows()); }
  std::size_t out_dim() const { return static_cast<std::size_t>(weight.cols()); }
};

class DenseNet {
 public:
  DenseNet() = default;
  explicit DenseNet(std::vector<Layer> layers);

  /// Layers of widths dims[0] -> dims[1] -> ... with `hidden` between and
  /// `output` on the last layer. Weights and biases uniform in +-1/sqrt(fan_in).
  static DenseNet random(const std::vector<std::size_t>& dims, Activation hidden,
                         Activation output, Rng& rng);
  /// Same shapes, every parameter zero.
  static DenseNet zeros(const std::vector<std::size_t>& dims, Activation hidden,
                        Activation output);

  std::size_t input_dim() const;
  std::size_t output_dim() const;
  std::size_t parameter_count() const;
  std::vector<std::size_t> dims() const;

  const std::vector<Layer>& layers() const { return layers_; }
  std::vector<Layer>& layers() { return layers_; }

  bool all_finite() const;
  bool same_shape(const DenseNet& other) const;

  friend bool operator==(const DenseNet& a, const DenseNet& b);

 private:
  std::vector<Layer> layers_;
};

/// Per-layer activations kept by forward so backward needs no recomputation.
struct ForwardCache {
  std::vector<Matrix> inputs;  // inputs[k] is what layer k consumed
  std::vector<Matrix> pre;     // X*W + b
  std::vector<Matrix> post;    // act(pre)
};

struct LayerGrad {
  Matrix weight;
  RowVector bias;
};

/// Gradients shaped like a DenseNet, plus (from backward) d/d input.
struct GradBundle {
  std::vector<LayerGrad> layers;
  std::optional<Matrix> input;

  static GradBundle zeros_like(const DenseNet& net);

  GradBundle& operator+=(const GradBundle& other);
  GradBundle& operator*=(double s);
  /// this += s * other (parameter part only).
  void add_scaled(const GradBundle& other, double s);

  bool all_finite() const;
  bool matches(const DenseNet& net) const;
  double max_abs() const;
};

Matrix forward(const DenseNet& net, const Matrix& batch, ForwardCache* cache = nullptr);

GradBundle backward(const DenseNet& net, const ForwardCache& cache, const Matrix& output_grad);

struct AdamState {
  std::vector<LayerGrad> m;
  std::vector<LayerGrad> v;
  long step = 0;
  double learning_rate = 1e-3;
  double beta1 = 0.9;
  double beta2 = 0.999;
  double epsilon = 1e-8;

  static AdamState for_net(const DenseNet& net, double learning_rate = 1e-3);
};

/// One bias-corrected Adam descent step. Throws NumericError (leaving net and
/// state untouched) when any gradient entry is non-finite.
void adam_step(DenseNet& net, const GradBundle& grads, AdamState& state);

/// Gradient of (coeff / 2) * sum of squared weights. Biases are not penalized.
GradBundle l2_grad(const DenseNet& net, double coeff);
double l2_penalty(const DenseNet& net, double coeff);

using LossFn = std::function<double(const DenseNet&)>;

/// Central-difference estimate of d loss / d theta for every parameter.
GradBundle finite_diff_grad(const LossFn& loss_fn, const DenseNet& net, double h);

/// Largest |a - b| / max(|a|, |b|, floor) over all parameter entries.
double max_relative_error(const GradBundle& a, const GradBundle& b, double floor = 1e-8);

/// target <- tau * source + (1 - tau) * target, parameter-wise.
void polyak_average(DenseNet& target, const DenseNet& source, double tau);

void to_json(nlohmann::json& j, const DenseNet& net);
void from_json(const nlohmann::json& j, DenseNet& net);
void to_json(nlohmann::json& j, const AdamState& s);
void from_json(const nlohmann::json& j, AdamState& s);

}  // namespace demorl::nn
