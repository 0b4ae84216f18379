#include "twophase/trainer.hpp"

#include <algorithm>
#include <chrono>
#include <cmath>
#include <numeric>
#include <random>

#include "twophase/random.hpp"

namespace twophase {

namespace {

using Index = Eigen::Index;
using Clock = std::chrono::steady_clock;

Matrix select_rows(const Matrix& m, const std::vector<std::size_t>& rows) {
  Matrix out(static_cast<Index>(rows.size()), m.cols());
  for (std::size_t i = 0; i < rows.size(); ++i) out.row(static_cast<Index>(i)) = m.row(static_cast<Index>(rows[i]));
  return out;
}

/// Gradient of the mean loss over `rows` (all samples when empty).
Vector batch_gradient(const NetworkSpec& spec, const Params& params, const Matrix& x,
                      const Matrix& y, LossKind kind) {
  const ForwardTrace trace = forward_hidden(spec, params, x);
  return backprop(spec, params, trace, loss_grad(kind, trace.output, y));
}

/// Gradient over the last-layer block for fixed features: [h,1]^T dL/dF.
Vector head_gradient(const Matrix& features_aug, const Matrix& weight_bias, const Matrix& y,
                     LossKind kind) {
  const Matrix f = features_aug * weight_bias;
  const Matrix g = features_aug.transpose() * loss_grad(kind, f, y);
  return Eigen::Map<const Vector>(g.data(), g.size());
}

class MinibatchSampler {
 public:
  MinibatchSampler(std::size_t n, std::size_t batch, Sampling scheme, std::uint64_t seed)
      : n_(n), batch_(std::min(batch, n)), scheme_(scheme), rng_(seed), order_(n) {
    std::iota(order_.begin(), order_.end(), 0);
    cursor_ = n_;
  }

  std::vector<std::size_t> next() {
    std::vector<std::size_t> rows(batch_);
    if (scheme_ == Sampling::with_replacement) {
      std::uniform_int_distribution<std::size_t> pick(0, n_ - 1);
      for (auto& r : rows) r = pick(rng_);
      return rows;
    }
    for (auto& r : rows) {
      if (cursor_ == n_) {
        std::shuffle(order_.begin(), order_.end(), rng_);
        cursor_ = 0;
      }
      r = order_[cursor_++];
    }
    return rows;
  }

 private:
  std::size_t n_;
  std::size_t batch_;
  Sampling scheme_;
  std::mt19937_64 rng_;
  std::vector<std::size_t> order_;
  std::size_t cursor_;
};

struct RankMonitor {
  const NetworkSpec& spec;
  const Dataset& data;
  std::size_t max_entries;
  std::optional<NtkSnapshot> reference;

  std::optional<NtkSnapshot> snapshot(const Params& params, std::size_t step,
                                      std::optional<double> tol) const {
    JacobianOptions opts;
    opts.max_entries = max_entries;
    try {
      return compute_ntk(compute_jacobian(spec, params, data.x, opts), step, tol, false);
    } catch (const SizeCapError&) {
      return std::nullopt;
    }
  }
};

std::size_t feature_rank(const Matrix& hidden) {
  return linalg::numerical_rank(linalg::append_ones_column(hidden));
}

}  // namespace

std::string to_string(BaseVariant v) { return v == BaseVariant::gd ? "gd" : "sgd_momentum"; }

std::string to_string(Phase2Mode m) {
  switch (m) {
    case Phase2Mode::last_layer_gd:
      return "last_layer_gd";
    case Phase2Mode::last_layer_sgd:
      return "last_layer_sgd";
    case Phase2Mode::lazy_full:
      return "lazy_full";
    case Phase2Mode::last_layer_base:
      return "last_layer_base";
  }
  return "last_layer_gd";
}

std::string to_string(Sampling s) {
  return s == Sampling::with_replacement ? "with_replacement" : "epoch_shuffle";
}

BaseVariant base_variant_from_string(std::string_view name) {
  if (name == "gd") return BaseVariant::gd;
  if (name == "sgd_momentum") return BaseVariant::sgd_momentum;
  throw std::invalid_argument("unknown base algorithm '" + std::string(name) + "'");
}

Phase2Mode phase2_mode_from_string(std::string_view name) {
  if (name == "last_layer_gd") return Phase2Mode::last_layer_gd;
  if (name == "last_layer_sgd") return Phase2Mode::last_layer_sgd;
  if (name == "lazy_full") return Phase2Mode::lazy_full;
  if (name == "last_layer_base") return Phase2Mode::last_layer_base;
  throw std::invalid_argument("unknown phase-2 mode '" + std::string(name) + "'");
}

Sampling sampling_from_string(std::string_view name) {
  if (name == "with_replacement") return Sampling::with_replacement;
  if (name == "epoch_shuffle") return Sampling::epoch_shuffle;
  throw std::invalid_argument("unknown sampling scheme '" + std::string(name) + "'");
}

void BaseAlgoConfig::validate(std::size_t n) const {
  if (!(learning_rate > 0.0)) throw std::invalid_argument("base learning rate must be positive");
  if (!(momentum >= 0.0 && momentum < 1.0)) throw std::invalid_argument("momentum must lie in [0, 1)");
  if (weight_decay < 0.0) throw std::invalid_argument("weight decay must be nonnegative");
  if (variant == BaseVariant::sgd_momentum && (batch_size == 0 || batch_size > n)) {
    throw std::invalid_argument("minibatch size must lie in [1, n=" + std::to_string(n) + "]");
  }
}

std::size_t TwoPhaseConfig::tau() const {
  if (switch_step) return *switch_step;
  return static_cast<std::size_t>(std::floor(switch_fraction * static_cast<double>(total_steps)));
}

std::vector<double> TwoPhaseConfig::noise_scales(std::size_t depth) const {
  if (!layer_noise.empty()) return layer_noise;
  return std::vector<double>(depth, noise_scale);
}

void TwoPhaseConfig::validate(const NetworkSpec& spec) const {
  if (!switch_step && !(switch_fraction >= 0.0 && switch_fraction <= 1.0)) {
    throw std::invalid_argument("switch fraction tau0 must lie in [0, 1]");
  }
  if (tau() > total_steps) throw std::invalid_argument("switch step tau exceeds total steps T");
  const auto sigmas = noise_scales(spec.depth());
  if (sigmas.size() != spec.depth()) {
    throw std::invalid_argument("expected one noise scale per hidden layer (" +
                                std::to_string(spec.depth()) + ")");
  }
  for (double s : sigmas) {
    if (!(s > 0.0) || !std::isfinite(s)) {
      throw std::invalid_argument("noise scales must be positive: the perturbation has to be a non-degenerate Gaussian");
    }
  }
  if (phase2_momentum != 0.0 || phase2_weight_decay != 0.0) {
    throw std::invalid_argument("phase-2 momentum and weight decay must be 0: the second phase needs exact (stochastic) gradient steps");
  }
  if (mode == Phase2Mode::last_layer_sgd) {
    if (!(sgd_rate > 0.0)) throw std::invalid_argument("phase-2 SGD rate must be positive");
    if (phase2_batch_size == 0) throw std::invalid_argument("phase-2 batch size must be positive");
  }
  if (mode == Phase2Mode::lazy_full) {
    if (!(lazy_eta_bar > 0.0 && lazy_eta_bar < 1.0)) {
      throw std::invalid_argument("lazy_full eta_bar must lie in (0, 1)");
    }
    if (lazy_lipschitz && !(*lazy_lipschitz > 0.0)) {
      throw std::invalid_argument("lazy_full Lipschitz constant must be positive");
    }
  }
}

double TrainLog::final_loss() const {
  // With tau = T the returned parameters are the perturbed ones.
  if (records.empty() || records.back().t <= tau) return loss_at_tau;
  return records.back().loss;
}

Vector nu_mask(const ParamLayout& layout) {
  Vector mask = Vector::Zero(static_cast<Index>(layout.size()));
  mask.tail(static_cast<Index>(layout.last_size())).setOnes();
  return mask;
}

Params perturb(const Params& params, const std::vector<double>& sigmas, std::uint64_t seed) {
  const auto& layout = params.layout();
  if (sigmas.size() != layout.depth()) {
    throw std::invalid_argument("perturb: expected one scale per hidden layer");
  }
  Params out = params;
  std::mt19937_64 rng(seed);
  for (std::size_t l = 1; l <= layout.depth(); ++l) {
    if (!(sigmas[l - 1] > 0.0)) throw std::invalid_argument("perturb: noise scales must be positive");
    std::normal_distribution<double> noise(0.0, sigmas[l - 1]);
    const auto begin = static_cast<Index>(layout.layer_offset(l));
    const auto size = static_cast<Index>(layout.layer_size(l));
    for (Index i = begin; i < begin + size; ++i) out.flat()(i) += noise(rng);
  }
  return out;
}

double compute_L_H(LossKind kind, const Matrix& hidden) {
  if (hidden.rows() == 0) throw std::invalid_argument("compute_L_H: no samples");
  double total = 0.0;
  for (Index i = 0; i < hidden.rows(); ++i) total += hidden.row(i).squaredNorm() + 1.0;
  return lipschitz_constant(kind) * total / static_cast<double>(hidden.rows());
}

double full_loss(const NetworkSpec& spec, const Params& params, const Dataset& data, LossKind kind) {
  return loss_value(kind, forward_output(spec, params, data.x), data.y);
}

Vector full_gradient(const NetworkSpec& spec, const Params& params, const Dataset& data,
                     LossKind kind) {
  return batch_gradient(spec, params, data.x, data.y, kind);
}

double estimate_hessian_norm(const NetworkSpec& spec, const Params& params, const Dataset& data,
                             LossKind kind, std::uint64_t seed, std::size_t iterations) {
  std::mt19937_64 rng(seed);
  std::normal_distribution<double> normal(0.0, 1.0);
  Vector v(params.flat().size());
  for (Index i = 0; i < v.size(); ++i) v(i) = normal(rng);
  v.normalize();
  const double h = 1e-5 * std::max(1.0, params.flat().norm());
  double lambda = 0.0;
  for (std::size_t it = 0; it < iterations; ++it) {
    Params plus = params;
    Params minus = params;
    plus.flat() += h * v;
    minus.flat() -= h * v;
    const Vector hv = (full_gradient(spec, plus, data, kind) - full_gradient(spec, minus, data, kind)) / (2.0 * h);
    lambda = hv.norm();
    if (lambda == 0.0) break;
    v = hv / lambda;
  }
  return lambda;
}

TrainResult run_two_phase(const NetworkSpec& spec, const Params& initial, const Dataset& data,
                          const BaseAlgoConfig& base, const TwoPhaseConfig& config, LossKind kind,
                          const TrainObserver& observer) {
  spec.validate();
  data.validate();
  const std::size_t n = data.size();
  base.validate(n);
  config.validate(spec);
  if (spec.depth() < 2) {
    throw std::invalid_argument("two-phase training needs at least two hidden layers (H >= 2)");
  }
  if (static_cast<std::size_t>(data.y.cols()) != spec.output_dim) {
    throw std::invalid_argument("target width does not match the network output dimension");
  }
  if (!(initial.layout() == ParamLayout(spec))) {
    throw std::invalid_argument("initial parameters do not match the network spec");
  }

  const std::size_t total = config.total_steps;
  const std::size_t tau = config.tau();
  const auto start = Clock::now();
  const auto elapsed_ms = [&] {
    return config.record_wall_time
               ? std::chrono::duration<double, std::milli>(Clock::now() - start).count()
               : 0.0;
  };

  TrainLog log;
  log.total_steps = total;
  log.tau = tau;
  log.mode = config.mode;
  log.sgd_rate = config.sgd_rate;
  log.records.reserve(total);

  const auto emit = [&](TrainRecord rec) {
    rec.wall_ms = elapsed_ms();
    if (observer.on_record) observer.on_record(rec);
    log.records.push_back(rec);
  };
  const bool monitoring = config.monitor_every > 0;
  const auto monitored = [&](std::size_t step) {
    return monitoring && step % config.monitor_every == 0;
  };

  // First phase: the unmodified base algorithm.
  Params params = initial;
  Vector velocity = Vector::Zero(params.flat().size());
  MinibatchSampler phase1_sampler(n, base.batch_size, Sampling::epoch_shuffle, base.seed);
  for (std::size_t step = 0; step < tau; ++step) {
    Vector g;
    if (base.variant == BaseVariant::gd) {
      g = full_gradient(spec, params, data, kind);
    } else {
      const auto rows = phase1_sampler.next();
      g = batch_gradient(spec, params, select_rows(data.x, rows), select_rows(data.y, rows), kind);
    }
    velocity = base.momentum * velocity + g + base.weight_decay * params.flat();
    params.flat() -= base.learning_rate * velocity;
    if (!params.flat().allFinite()) {
      throw std::runtime_error("phase-1 iterate diverged at step " + std::to_string(step + 1));
    }

    TrainRecord rec;
    rec.t = step + 1;
    rec.phase = 1;
    rec.grad_norm = g.norm();
    rec.rate = base.learning_rate;
    if (monitored(rec.t)) {
      const ForwardTrace trace = forward_hidden(spec, params, data.x);
      rec.loss = loss_value(kind, trace.output, data.y);
      rec.feature_rank = feature_rank(trace.hidden);
    } else {
      rec.loss = full_loss(spec, params, data, kind);
    }
    emit(rec);
  }
  log.loss_before_perturbation = full_loss(spec, params, data, kind);

  // Random perturbation of every hidden-layer parameter.
  const Params unperturbed = params;
  params = perturb(params, config.noise_scales(spec.depth()), derive_seed(config.seed, 0));
  const ForwardTrace tau_trace = forward_hidden(spec, params, data.x);
  TrainResult result{params, params, unperturbed, tau_trace.hidden, tau_trace.statistics(), {}};
  log.loss_at_tau = loss_value(kind, tau_trace.output, data.y);
  log.best_step = tau;
  log.best_loss = log.loss_at_tau;
  const Matrix features_aug = linalg::append_ones_column(tau_trace.hidden);
  log.lipschitz_last = compute_L_H(kind, tau_trace.hidden);

  if (tau < total) {
    const std::size_t rank = linalg::numerical_rank(features_aug);
    log.feature_rank_at_tau = rank;
    if (rank < n) {
      throw RankLossError("features after the perturbation have rank " + std::to_string(rank) +
                          " < n = " + std::to_string(n) +
                          "; widen the last hidden layer (m_H + 1 >= n) or change the seed");
    }
  }

  RankMonitor monitor{spec, data, config.jacobian_max_entries, std::nullopt};
  const bool need_reference = tau < total && (monitoring || config.mode == Phase2Mode::lazy_full);
  if (need_reference) {
    monitor.reference = monitor.snapshot(params, tau, std::nullopt);
    if (monitor.reference) log.ntk_rank_at_tau = monitor.reference->rank;
  }

  if (observer.on_phase_two && tau < total) {
    observer.on_phase_two(PhaseTwoStart{params, tau_trace.hidden, log.loss_at_tau, log.lipschitz_last});
  }

  const std::size_t n_my = n * spec.output_dim;
  const auto ntk_check = [&](const Params& p, std::size_t step, TrainRecord& rec) {
    if (!monitor.reference) {
      // Without the full Jacobian the last-layer block certifies rank n m_y
      // whenever the features are full row rank.
      if (log.feature_rank_at_tau && *log.feature_rank_at_tau == n) {
        rec.ntk_rank = n_my;
        rec.rank_preserved = true;
      }
      return;
    }
    const auto snap = monitor.snapshot(p, step, monitor.reference->tolerance);
    if (!snap) return;
    rec.ntk_rank = snap->rank;
    rec.rank_preserved = assert_rank_preserved(*monitor.reference, *snap);
  };

  const auto update_best = [&](TrainRecord& rec) {
    if (rec.loss < log.best_loss) {
      log.best_loss = rec.loss;
      log.best_step = rec.t;
    }
    rec.running_best = log.best_loss;
  };

  // Second phase.
  if (config.mode != Phase2Mode::lazy_full) {
    const std::size_t depth = spec.depth();
    const std::size_t last_rank = tau < total && log.feature_rank_at_tau ? *log.feature_rank_at_tau : 0;
    const bool base_mode = config.mode == Phase2Mode::last_layer_base;
    MinibatchSampler sampler(n, base_mode ? base.batch_size : config.phase2_batch_size,
                             base_mode ? Sampling::epoch_shuffle : config.phase2_sampling,
                             derive_seed(config.seed, 1));
    const auto last = static_cast<Index>(params.layout().last_size());
    Vector last_velocity = velocity.tail(last);
    for (std::size_t step = tau; step < total; ++step) {
      Matrix wb = params.weight_bias(depth + 1);
      Vector g;
      double rate = 0.0;
      if (config.mode == Phase2Mode::last_layer_gd) {
        g = head_gradient(features_aug, wb, data.y, kind);
        rate = 1.0 / log.lipschitz_last;
      } else if (base_mode) {
        if (base.variant == BaseVariant::gd) {
          g = head_gradient(features_aug, wb, data.y, kind);
        } else {
          const auto rows = sampler.next();
          g = head_gradient(select_rows(features_aug, rows), wb, select_rows(data.y, rows), kind);
        }
        rate = base.learning_rate;
      } else {
        const auto rows = sampler.next();
        g = head_gradient(select_rows(features_aug, rows), wb, select_rows(data.y, rows), kind);
        rate = config.sgd_rate / std::sqrt(static_cast<double>(step - tau + 1));
      }
      log.max_grad_norm_sq = std::max(log.max_grad_norm_sq, g.squaredNorm());
      if (base_mode) {
        // The base optimizer continues unchanged on the last layer only.
        last_velocity = base.momentum * last_velocity + g + base.weight_decay * params.last_block();
        params.set_last_block(params.last_block() - rate * last_velocity);
      } else {
        params.set_last_block(params.last_block() - rate * g);
      }

      TrainRecord rec;
      rec.t = step + 1;
      rec.phase = 2;
      rec.grad_norm = g.norm();
      rec.rate = rate;
      rec.loss = loss_value(kind, head_output(params, tau_trace.hidden), data.y);
      if (!std::isfinite(rec.loss)) {
        throw std::runtime_error("phase-2 loss is not finite at step " + std::to_string(rec.t));
      }
      if (observer.on_params) observer.on_params(rec.t, params);
      if (monitored(rec.t - tau)) {
        rec.feature_rank = last_rank;
        ntk_check(params, rec.t, rec);
      }
      update_best(rec);
      emit(rec);
    }
  } else if (tau < total) {
    log.lipschitz_full = config.lazy_lipschitz
                             ? *config.lazy_lipschitz
                             : estimate_hessian_norm(spec, params, data, kind, derive_seed(config.seed, 2));
    if (!(log.lipschitz_full > 0.0)) {
      throw std::runtime_error("could not estimate a positive Lipschitz constant for lazy_full");
    }
    const double base_rate = 2.0 * config.lazy_eta_bar / log.lipschitz_full;
    for (std::size_t step = tau; step < total; ++step) {
      const Vector g = full_gradient(spec, params, data, kind);
      log.max_grad_norm_sq = std::max(log.max_grad_norm_sq, g.squaredNorm());
      TrainRecord rec;
      rec.t = step + 1;
      rec.phase = 2;
      rec.grad_norm = g.norm();
      double rate = base_rate;
      bool accepted = false;
      for (std::size_t attempt = 0; attempt <= config.lazy_max_halvings; ++attempt) {
        Params proposal = params;
        proposal.flat() -= rate * g;
        TrainRecord probe;
        ntk_check(proposal, rec.t, probe);
        if (!probe.rank_preserved || *probe.rank_preserved) {
          params = std::move(proposal);
          rec.ntk_rank = probe.ntk_rank;
          rec.rank_preserved = probe.rank_preserved;
          accepted = true;
          break;
        }
        ++rec.rejected;
        rate *= 0.5;
      }
      rec.skipped = !accepted;
      rec.rate = accepted ? rate : 0.0;
      rec.loss = full_loss(spec, params, data, kind);
      if (!std::isfinite(rec.loss)) {
        throw std::runtime_error("phase-2 loss is not finite at step " + std::to_string(rec.t));
      }
      if (observer.on_params) observer.on_params(rec.t, params);
      if (monitored(rec.t - tau)) {
        rec.feature_rank = feature_rank(forward_hidden(spec, params, data.x).hidden);
      }
      update_best(rec);
      emit(rec);
    }
  }

  result.params = params;
  result.log = std::move(log);
  return result;
}

}  // namespace twophase
