#include "twophase/network.hpp"

#include <cmath>
#include <stdexcept>
#include <string>

namespace twophase {

namespace {

using Index = Eigen::Index;

Index idx(std::size_t v) { return static_cast<Index>(v); }

std::string layer_name(std::size_t layer) { return "layer " + std::to_string(layer); }

Matrix apply_softplus(const Matrix& u, double s) {
  return u.unaryExpr([s](double z) { return softplus(z, s); });
}

Matrix apply_softplus_derivative(const Matrix& u, double s) {
  return u.unaryExpr([s](double z) { return softplus_derivative(z, s); });
}

}  // namespace

bool NetworkSpec::has_batch_norm(std::size_t layer) const {
  if (layer == 0 || layer > batch_norm.size()) return false;
  return batch_norm[layer - 1];
}

bool NetworkSpec::any_batch_norm() const {
  for (bool b : batch_norm) {
    if (b) return true;
  }
  return false;
}

void NetworkSpec::validate() const {
  if (widths.size() < 2) {
    throw std::invalid_argument("network needs an input width and at least one hidden layer");
  }
  for (std::size_t l = 0; l < widths.size(); ++l) {
    if (widths[l] == 0) throw std::invalid_argument("width of layer " + std::to_string(l) + " is 0");
  }
  if (output_dim == 0) throw std::invalid_argument("output dimension is 0");
  if (!(sharpness > 0.0) || !std::isfinite(sharpness)) {
    throw std::invalid_argument("softplus sharpness must be positive");
  }
  if (!batch_norm.empty() && batch_norm.size() != depth()) {
    throw std::invalid_argument("batch_norm flags: expected " + std::to_string(depth()) +
                                " entries, got " + std::to_string(batch_norm.size()));
  }
  if (!(bn_epsilon > 0.0)) throw std::invalid_argument("batch-norm epsilon must be positive");
}

ParamLayout::ParamLayout(const NetworkSpec& spec) {
  spec.validate();
  widths_ = spec.widths;
  widths_.push_back(spec.output_dim);
  const std::size_t hidden = spec.depth();
  bn_.assign(hidden, false);
  for (std::size_t l = 1; l <= hidden; ++l) bn_[l - 1] = spec.has_batch_norm(l);

  std::size_t offset = 0;
  for (std::size_t l = 1; l <= hidden + 1; ++l) {
    offsets_.push_back(offset);
    offset += (widths_[l - 1] + 1) * widths_[l];
    if (l <= hidden && bn_[l - 1]) offset += 2 * widths_[l];
  }
  total_ = offset;
}

std::size_t ParamLayout::layer_size(std::size_t layer) const {
  const std::size_t end = layer < offsets_.size() ? offsets_[layer] : total_;
  return end - offsets_.at(layer - 1);
}

bool ParamLayout::has_batch_norm(std::size_t layer) const {
  return layer >= 1 && layer <= bn_.size() && bn_[layer - 1];
}

std::size_t ParamLayout::gamma_offset(std::size_t layer) const {
  if (!has_batch_norm(layer)) throw std::out_of_range(layer_name(layer) + " has no batch norm");
  return layer_offset(layer) + (fan_in(layer) + 1) * fan_out(layer);
}

std::size_t ParamLayout::beta_offset(std::size_t layer) const {
  return gamma_offset(layer) + fan_out(layer);
}

Params::Params(const NetworkSpec& spec) : layout_(spec), flat_(Vector::Zero(idx(layout_.size()))) {
  for (std::size_t l = 1; l <= layout_.depth(); ++l) {
    if (layout_.has_batch_norm(l)) gamma(l).setOnes();
  }
}

Params::Params(ParamLayout layout, Vector flat) : layout_(std::move(layout)), flat_(std::move(flat)) {
  if (static_cast<std::size_t>(flat_.size()) != layout_.size()) {
    throw std::invalid_argument("parameter vector has length " + std::to_string(flat_.size()) +
                                ", layout expects " + std::to_string(layout_.size()));
  }
}

Eigen::Map<Matrix> Params::weight_bias(std::size_t layer) {
  return {flat_.data() + layout_.layer_offset(layer), idx(layout_.fan_in(layer) + 1),
          idx(layout_.fan_out(layer))};
}

Eigen::Map<const Matrix> Params::weight_bias(std::size_t layer) const {
  return {flat_.data() + layout_.layer_offset(layer), idx(layout_.fan_in(layer) + 1),
          idx(layout_.fan_out(layer))};
}

Eigen::Map<Vector> Params::gamma(std::size_t layer) {
  return {flat_.data() + layout_.gamma_offset(layer), idx(layout_.fan_out(layer))};
}

Eigen::Map<const Vector> Params::gamma(std::size_t layer) const {
  return {flat_.data() + layout_.gamma_offset(layer), idx(layout_.fan_out(layer))};
}

Eigen::Map<Vector> Params::beta(std::size_t layer) {
  return {flat_.data() + layout_.beta_offset(layer), idx(layout_.fan_out(layer))};
}

Eigen::Map<const Vector> Params::beta(std::size_t layer) const {
  return {flat_.data() + layout_.beta_offset(layer), idx(layout_.fan_out(layer))};
}

void Params::set_last_block(const Vector& v) {
  if (static_cast<std::size_t>(v.size()) != layout_.last_size()) {
    throw std::invalid_argument("last-layer block has the wrong length");
  }
  flat_.tail(v.size()) = v;
}

Params init_params(const NetworkSpec& spec, std::mt19937_64& rng) {
  Params p(spec);
  std::normal_distribution<double> normal(0.0, 1.0);
  for (std::size_t l = 1; l <= spec.depth() + 1; ++l) {
    auto wb = p.weight_bias(l);
    const double scale = std::sqrt(2.0 / static_cast<double>(wb.rows() - 1));
    for (Index j = 0; j < wb.cols(); ++j) {
      for (Index i = 0; i + 1 < wb.rows(); ++i) wb(i, j) = scale * normal(rng);
    }
  }
  return p;
}

Params gaussian_params(const NetworkSpec& spec, double scale, std::mt19937_64& rng) {
  Params p(spec);
  std::normal_distribution<double> normal(0.0, scale);
  for (Index i = 0; i < p.flat().size(); ++i) p.flat()(i) = normal(rng);
  return p;
}

double softplus(double z, double sharpness) {
  return std::max(z, 0.0) + std::log1p(std::exp(-sharpness * std::abs(z))) / sharpness;
}

double softplus_derivative(double z, double sharpness) {
  const double t = sharpness * z;
  if (t >= 0.0) return 1.0 / (1.0 + std::exp(-t));
  const double e = std::exp(t);
  return e / (1.0 + e);
}

std::vector<double> batchnorm_forward(std::span<const double> batch, double gamma, double beta,
                                      double eps) {
  if (batch.empty()) throw std::invalid_argument("batchnorm_forward: empty batch");
  if (eps < 0.0) throw std::invalid_argument("batchnorm_forward: negative epsilon");
  const double n = static_cast<double>(batch.size());
  double mu = 0.0;
  for (double z : batch) mu += z;
  mu /= n;
  double var = 0.0;
  for (double z : batch) var += (z - mu) * (z - mu);
  var /= n;
  const double denom = std::sqrt(var + eps);
  std::vector<double> out;
  out.reserve(batch.size());
  for (double z : batch) out.push_back(gamma * (z - mu) / denom + beta);
  return out;
}

BnStatistics ForwardTrace::statistics() const {
  BnStatistics stats;
  for (const auto& layer : layers) {
    stats.mean.push_back(layer.mean);
    stats.var.push_back(layer.var);
  }
  return stats;
}

ForwardTrace forward_hidden(const NetworkSpec& spec, const Params& params, const Matrix& x,
                            const BnStatistics* frozen) {
  spec.validate();
  if (!(params.layout() == ParamLayout(spec))) {
    throw std::invalid_argument("parameter layout does not match the network spec");
  }
  if (static_cast<std::size_t>(x.cols()) != spec.input_dim()) {
    throw std::invalid_argument("layer 0 (input): expected " + std::to_string(spec.input_dim()) +
                                " columns, got " + std::to_string(x.cols()));
  }
  if (x.rows() == 0) throw std::invalid_argument("layer 0 (input): no samples");
  const std::size_t depth = spec.depth();
  if (frozen && (frozen->mean.size() != depth || frozen->var.size() != depth)) {
    throw std::invalid_argument("frozen batch statistics do not cover every hidden layer");
  }

  ForwardTrace trace;
  trace.input = x;
  trace.frozen_statistics = frozen != nullptr;
  trace.layers.resize(depth);
  const double eps = spec.bn_epsilon;

  const Matrix* h = &trace.input;
  for (std::size_t l = 1; l <= depth; ++l) {
    LayerTrace& lt = trace.layers[l - 1];
    const auto wb = params.weight_bias(l);
    const Index fan_in = wb.rows() - 1;
    lt.pre = (*h) * wb.topRows(fan_in);
    lt.pre.rowwise() += wb.row(fan_in);
    if (spec.has_batch_norm(l)) {
      if (frozen) {
        lt.mean = frozen->mean[l - 1];
        lt.var = frozen->var[l - 1];
        if (lt.mean.size() != lt.pre.cols() || lt.var.size() != lt.pre.cols()) {
          throw std::invalid_argument(layer_name(l) + ": frozen statistics have the wrong width");
        }
      } else {
        lt.mean = lt.pre.colwise().mean().transpose();
        lt.var = (lt.pre.rowwise() - lt.mean.transpose()).array().square().colwise().mean().transpose();
      }
      const Eigen::RowVectorXd inv_std = (lt.var.array() + eps).rsqrt().matrix().transpose();
      lt.normalized = ((lt.pre.rowwise() - lt.mean.transpose()).array().rowwise() *
                       inv_std.array())
                          .matrix();
      lt.act_input = (lt.normalized.array().rowwise() *
                      params.gamma(l).transpose().array())
                         .matrix();
      lt.act_input.rowwise() += params.beta(l).transpose();
    } else {
      lt.act_input = lt.pre;
    }
    lt.post = apply_softplus(lt.act_input, spec.sharpness);
    h = &lt.post;
  }
  trace.hidden = *h;
  trace.output = head_output(params, trace.hidden);
  return trace;
}

Matrix head_output(const Params& params, const Matrix& hidden) {
  const std::size_t last = params.layout().depth() + 1;
  const auto wb = params.weight_bias(last);
  if (hidden.cols() + 1 != wb.rows()) {
    throw std::invalid_argument("output layer: feature width does not match weights");
  }
  return linalg::append_ones_column(hidden) * wb;
}

Matrix forward_output(const NetworkSpec& spec, const Params& params, const Matrix& x,
                      const BnStatistics* frozen) {
  return forward_hidden(spec, params, x, frozen).output;
}

Vector backprop(const NetworkSpec& spec, const Params& params, const ForwardTrace& trace,
                const Matrix& upstream, ParamSubset subset) {
  const auto& layout = params.layout();
  const std::size_t depth = spec.depth();
  if (upstream.rows() != trace.output.rows() || upstream.cols() != trace.output.cols()) {
    throw std::invalid_argument("backprop: upstream must be " + std::to_string(trace.output.rows()) +
                                "x" + std::to_string(trace.output.cols()));
  }
  Vector grad = Vector::Zero(idx(layout.size()));
  const auto grad_block = [&](std::size_t layer) {
    return Eigen::Map<Matrix>(grad.data() + layout.layer_offset(layer),
                              idx(layout.fan_in(layer) + 1), idx(layout.fan_out(layer)));
  };

  const auto last_wb = params.weight_bias(depth + 1);
  const Index m_h = last_wb.rows() - 1;
  if (subset != ParamSubset::hidden_only) {
    auto g = grad_block(depth + 1);
    g.topRows(m_h).noalias() = trace.hidden.transpose() * upstream;
    g.row(m_h) = upstream.colwise().sum();
  }
  if (subset == ParamSubset::last_layer_only) return grad;

  const double s = spec.sharpness;
  const double eps = spec.bn_epsilon;
  Matrix dh = upstream * last_wb.topRows(m_h).transpose();
  for (std::size_t l = depth; l >= 1; --l) {
    const LayerTrace& lt = trace.layers[l - 1];
    Matrix dz = dh.cwiseProduct(apply_softplus_derivative(lt.act_input, s));
    if (spec.has_batch_norm(l)) {
      const Matrix& xhat = lt.normalized;
      Eigen::Map<Vector>(grad.data() + layout.gamma_offset(l), idx(layout.fan_out(l))) =
          dz.cwiseProduct(xhat).colwise().sum().transpose();
      Eigen::Map<Vector>(grad.data() + layout.beta_offset(l), idx(layout.fan_out(l))) =
          dz.colwise().sum().transpose();
      const Eigen::RowVectorXd inv_std = (lt.var.array() + eps).rsqrt().matrix().transpose();
      Matrix dxhat = (dz.array().rowwise() * params.gamma(l).transpose().array()).matrix();
      if (trace.frozen_statistics) {
        dz = (dxhat.array().rowwise() * inv_std.array()).matrix();
      } else {
        const Eigen::RowVectorXd mean_d = dxhat.colwise().mean();
        const Eigen::RowVectorXd mean_dx = dxhat.cwiseProduct(xhat).colwise().mean();
        Matrix centered = dxhat.rowwise() - mean_d;
        centered -= (xhat.array().rowwise() * mean_dx.array()).matrix();
        dz = (centered.array().rowwise() * inv_std.array()).matrix();
      }
    }
    const Matrix& h_prev = l == 1 ? trace.input : trace.layers[l - 2].post;
    const auto wb = params.weight_bias(l);
    const Index fan_in = wb.rows() - 1;
    auto g = grad_block(l);
    g.topRows(fan_in).noalias() = h_prev.transpose() * dz;
    g.row(fan_in) = dz.colwise().sum();
    if (l > 1) dh = dz * wb.topRows(fan_in).transpose();
  }
  return grad;
}

Vector backprop(const NetworkSpec& spec, const Params& params, const Matrix& x,
                const Matrix& upstream, ParamSubset subset, const BnStatistics* frozen) {
  const ForwardTrace trace = forward_hidden(spec, params, x, frozen);
  return backprop(spec, params, trace, upstream, subset);
}

Vector restrict_to_subset(const Vector& full, const ParamLayout& layout, ParamSubset subset) {
  if (static_cast<std::size_t>(full.size()) != layout.size()) {
    throw std::invalid_argument("restrict_to_subset: vector length does not match layout");
  }
  switch (subset) {
    case ParamSubset::all:
      return full;
    case ParamSubset::last_layer_only:
      return full.tail(idx(layout.last_size()));
    case ParamSubset::hidden_only:
      return full.head(idx(layout.hidden_size()));
  }
  return full;
}

}  // namespace twophase
