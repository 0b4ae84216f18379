#pragma once

#include <cstddef>
#include <cstdint>
#include <random>
#include <span>
#include <vector>

#include "twophase/linalg.hpp"

namespace twophase {

using linalg::Matrix;
using linalg::Vector;

/// Fully-connected softplus network: widths[0] = m_x, widths[1..H] are the
/// hidden widths, output_dim = m_y. Batch normalization, when enabled for a
/// hidden layer, sits between the affine map and the activation.
struct NetworkSpec {
  std::vector<std::size_t> widths;
  std::size_t output_dim = 1;
  double sharpness = 100.0;
  std::vector<bool> batch_norm;  // one flag per hidden layer; empty means none
  double bn_epsilon = 1e-5;

  std::size_t depth() const { return widths.empty() ? 0 : widths.size() - 1; }
  std::size_t input_dim() const { return widths.front(); }
  std::size_t last_hidden_width() const { return widths.back(); }
  /// `layer` is 1-based, 1..H.
  bool has_batch_norm(std::size_t layer) const;
  bool any_batch_norm() const;

  /// Throws std::invalid_argument describing the first violated invariant.
  void validate() const;
};

/// Offsets of each layer's block inside the flat parameter vector.
///
/// Layer l (1..H+1) stores vec([W^(l); b^(l)]) column-major, i.e. for each
/// output unit k the m_{l-1} incoming weights followed by the bias. Hidden
/// layers with batch normalization append gamma (m_l) and beta (m_l). Hidden
/// layers come first, so w = [w_(1:H); w_(H+1)].
class ParamLayout {
 public:
  explicit ParamLayout(const NetworkSpec& spec);

  std::size_t size() const { return total_; }
  std::size_t hidden_size() const { return offsets_.back(); }
  std::size_t last_size() const { return total_ - offsets_.back(); }
  std::size_t depth() const { return widths_.size() - 2; }

  std::size_t layer_offset(std::size_t layer) const { return offsets_.at(layer - 1); }
  std::size_t layer_size(std::size_t layer) const;
  std::size_t fan_in(std::size_t layer) const { return widths_.at(layer - 1); }
  std::size_t fan_out(std::size_t layer) const { return widths_.at(layer); }
  bool has_batch_norm(std::size_t layer) const;
  std::size_t gamma_offset(std::size_t layer) const;
  std::size_t beta_offset(std::size_t layer) const;

  bool operator==(const ParamLayout&) const = default;

 private:
  std::vector<std::size_t> widths_;  // m_0..m_H, m_y
  std::vector<bool> bn_;             // per hidden layer
  std::vector<std::size_t> offsets_;  // start of layers 1..H+1
  std::size_t total_ = 0;
};

class Params {
 public:
  /// Zero weights and biases; batch-norm scales 1 and shifts 0.
  explicit Params(const NetworkSpec& spec);
  Params(ParamLayout layout, Vector flat);

  const ParamLayout& layout() const { return layout_; }
  const Vector& flat() const { return flat_; }
  Vector& flat() { return flat_; }
  std::size_t size() const { return layout_.size(); }

  /// [W; b] as a (fan_in + 1) x fan_out view.
  Eigen::Map<Matrix> weight_bias(std::size_t layer);
  Eigen::Map<const Matrix> weight_bias(std::size_t layer) const;
  Eigen::Map<Vector> gamma(std::size_t layer);
  Eigen::Map<const Vector> gamma(std::size_t layer) const;
  Eigen::Map<Vector> beta(std::size_t layer);
  Eigen::Map<const Vector> beta(std::size_t layer) const;

  Vector hidden_block() const { return flat_.head(layout_.hidden_size()); }
  Vector last_block() const { return flat_.tail(layout_.last_size()); }
  void set_last_block(const Vector& v);

 private:
  ParamLayout layout_;
  Vector flat_;
};

/// Scaled Gaussian initialization: W ~ N(0, 2 / fan_in), zero biases,
/// batch-norm gamma = 1 and beta = 0.
Params init_params(const NetworkSpec& spec, std::mt19937_64& rng);

/// Every coordinate (including batch-norm parameters) drawn i.i.d. from
/// N(0, scale^2).
Params gaussian_params(const NetworkSpec& spec, double scale, std::mt19937_64& rng);

/// ln(1 + exp(s z)) / s, evaluated as max(z, 0) + ln(1 + exp(-s |z|)) / s.
double softplus(double z, double sharpness);
/// d/dz softplus(z, s) = 1 / (1 + exp(-s z)).
double softplus_derivative(double z, double sharpness);

/// gamma (z_i - mu) / sqrt(var + eps) + beta with population statistics.
std::vector<double> batchnorm_forward(std::span<const double> batch, double gamma, double beta,
                                      double eps);

/// Per-layer batch statistics; entries for layers without batch norm are empty.
struct BnStatistics {
  std::vector<Vector> mean;
  std::vector<Vector> var;
};

struct LayerTrace {
  Matrix pre;         // [h_{l-1}, 1] [W; b]
  Matrix normalized;  // (pre - mu) / sqrt(var + eps), batch-norm layers only
  Matrix act_input;   // argument of the softplus
  Matrix post;        // h_l
  Vector mean;
  Vector var;
};

struct ForwardTrace {
  Matrix input;
  std::vector<LayerTrace> layers;
  Matrix hidden;  // h_X^(H), n x m_H
  Matrix output;  // f_X, n x m_y
  bool frozen_statistics = false;

  BnStatistics statistics() const;
};

/// Runs the network on all rows of X. Batch-norm layers use statistics of the
/// whole batch, or `frozen` when given.
ForwardTrace forward_hidden(const NetworkSpec& spec, const Params& params, const Matrix& x,
                            const BnStatistics* frozen = nullptr);

/// f_X = [h, 1] [W^(H+1); b^(H+1)].
Matrix forward_output(const NetworkSpec& spec, const Params& params, const Matrix& x,
                      const BnStatistics* frozen = nullptr);

/// [h, 1] [W; b] for the output layer of `params` given precomputed features.
Matrix head_output(const Params& params, const Matrix& hidden);

enum class ParamSubset { all, last_layer_only, hidden_only };

/// Gradient of <upstream, f_X> with respect to the parameters in `subset`, as a
/// length-d vector with zeros outside the subset. Training-mode batch norm is
/// differentiated through the batch mean and variance.
Vector backprop(const NetworkSpec& spec, const Params& params, const ForwardTrace& trace,
                const Matrix& upstream, ParamSubset subset = ParamSubset::all);

Vector backprop(const NetworkSpec& spec, const Params& params, const Matrix& x,
                const Matrix& upstream, ParamSubset subset = ParamSubset::all,
                const BnStatistics* frozen = nullptr);

/// Extracts the coordinates of `subset` from a full-length vector.
Vector restrict_to_subset(const Vector& full, const ParamLayout& layout, ParamSubset subset);

}  // namespace twophase
