#pragma once

#include <cstddef>
#include <cstdint>
#include <functional>
#include <optional>
#include <stdexcept>
#include <string>
#include <string_view>
#include <vector>

#include "twophase/data.hpp"
#include "twophase/loss.hpp"
#include "twophase/network.hpp"
#include "twophase/ntk.hpp"

namespace twophase {

enum class BaseVariant { gd, sgd_momentum };
/// last_layer_base keeps the base optimizer (rate, momentum, weight decay,
/// minibatches) but masks every hidden coordinate; no bound applies to it.
enum class Phase2Mode { last_layer_gd, last_layer_sgd, lazy_full, last_layer_base };
/// with_replacement keeps E[g | w] equal to the full gradient; epoch_shuffle
/// does not and is offered only for comparison.
enum class Sampling { with_replacement, epoch_shuffle };

std::string to_string(BaseVariant v);
std::string to_string(Phase2Mode m);
std::string to_string(Sampling s);
BaseVariant base_variant_from_string(std::string_view name);
Phase2Mode phase2_mode_from_string(std::string_view name);
Sampling sampling_from_string(std::string_view name);

/// First-phase optimizer: heavy-ball momentum with coupled weight decay,
///   v <- momentum v + (g + weight_decay w),  w <- w - learning_rate v.
/// `gd` uses the full batch, `sgd_momentum` shuffled minibatches.
struct BaseAlgoConfig {
  BaseVariant variant = BaseVariant::sgd_momentum;
  double learning_rate = 0.01;
  double momentum = 0.9;
  std::size_t batch_size = 64;
  double weight_decay = 1e-5;
  std::uint64_t seed = 0;

  void validate(std::size_t n) const;
};

struct TwoPhaseConfig {
  std::size_t total_steps = 1000;
  /// Switch step tau; when absent tau = floor(switch_fraction * total_steps).
  std::optional<std::size_t> switch_step;
  double switch_fraction = 0.6;
  /// Scalar noise scale used for every hidden layer unless layer_noise is set.
  double noise_scale = 0.001;
  std::vector<double> layer_noise;

  Phase2Mode mode = Phase2Mode::last_layer_gd;
  /// last_layer_sgd: rate a / sqrt(t - tau + 1).
  double sgd_rate = 0.01;
  std::size_t phase2_batch_size = 64;
  Sampling phase2_sampling = Sampling::with_replacement;
  /// lazy_full: uniform rate 2 eta_bar / L with eta_bar in (0, 1).
  double lazy_eta_bar = 0.5;
  std::optional<double> lazy_lipschitz;
  std::size_t lazy_max_halvings = 10;
  /// Second-phase momentum and weight decay. Both must stay 0: the phase-2
  /// guarantees assume plain (stochastic) gradient steps.
  double phase2_momentum = 0.0;
  double phase2_weight_decay = 0.0;

  /// Rank monitoring cadence in steps (0 disables it).
  std::size_t monitor_every = 0;
  std::size_t jacobian_max_entries = std::size_t{1} << 24;
  bool record_wall_time = false;
  std::uint64_t seed = 0;

  std::size_t tau() const;
  std::vector<double> noise_scales(std::size_t depth) const;
  void validate(const NetworkSpec& spec) const;
};

struct TrainRecord {
  std::size_t t = 0;  // loss is L(w^t), logged after the t-th update
  int phase = 1;
  double loss = 0.0;
  double grad_norm = 0.0;  // norm of the update direction g^{t-1}
  double rate = 0.0;       // scalar step size used for that update
  std::optional<std::size_t> feature_rank;
  std::optional<std::size_t> ntk_rank;
  std::optional<bool> rank_preserved;
  std::size_t rejected = 0;  // lazy_full halvings before acceptance
  bool skipped = false;      // lazy_full step abandoned after max halvings
  std::optional<double> running_best;  // min L(w^k) over k in [tau, t]
  std::optional<double> bound;
  std::optional<double> suboptimality;
  double wall_ms = 0.0;
};

struct TrainLog {
  std::vector<TrainRecord> records;
  std::size_t total_steps = 0;
  std::size_t tau = 0;
  Phase2Mode mode = Phase2Mode::last_layer_gd;
  double loss_before_perturbation = 0.0;
  double loss_at_tau = 0.0;  // L(w^tau) after the perturbation
  std::size_t best_step = 0;  // t* over [tau, T]
  double best_loss = 0.0;
  double lipschitz_last = 0.0;   // L_H
  double lipschitz_full = 0.0;   // L used by lazy_full
  double sgd_rate = 0.0;
  double max_grad_norm_sq = 0.0;  // max ||g^t||^2 over phase 2
  std::optional<std::size_t> feature_rank_at_tau;
  std::optional<std::size_t> ntk_rank_at_tau;

  double final_loss() const;
};

/// State at the start of the second phase, handed to observers so bound
/// constants can be computed before phase-2 records are emitted.
struct PhaseTwoStart {
  const Params& params;
  const Matrix& features;  // h_X^(H)(w^tau_(1:H))
  double loss;
  double lipschitz_last;
};

struct TrainObserver {
  std::function<void(const PhaseTwoStart&)> on_phase_two;
  std::function<void(TrainRecord&)> on_record;
  /// Phase-2 iterate w^t, called before on_record for the same t.
  std::function<void(std::size_t, const Params&)> on_params;
};

struct TrainResult {
  Params params;
  Params params_at_tau;
  /// w^tau before the perturbation; the perturbation draws average over this point.
  Params params_before_perturbation;
  Matrix features_at_tau;
  BnStatistics frozen_statistics;
  TrainLog log;
};

/// Features after the perturbation are not full row rank.
class RankLossError : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

/// 0 over w_(1:H) (including batch-norm parameters), 1 over w_(H+1).
Vector nu_mask(const ParamLayout& layout);

/// Adds N(0, sigma_h^2) noise to every coordinate of hidden layer h.
Params perturb(const Params& params, const std::vector<double>& sigmas, std::uint64_t seed);

/// (L_l / n) sum_i ||[h_i, 1]||^2.
double compute_L_H(LossKind kind, const Matrix& hidden);

/// Full-batch loss and its gradient over all parameters (training-mode BN).
double full_loss(const NetworkSpec& spec, const Params& params, const Dataset& data, LossKind kind);
Vector full_gradient(const NetworkSpec& spec, const Params& params, const Dataset& data,
                     LossKind kind);

/// Power-iteration estimate of the largest Hessian eigenvalue magnitude at
/// `params`, using central differences of gradients.
double estimate_hessian_norm(const NetworkSpec& spec, const Params& params, const Dataset& data,
                             LossKind kind, std::uint64_t seed, std::size_t iterations = 30);

TrainResult run_two_phase(const NetworkSpec& spec, const Params& initial, const Dataset& data,
                          const BaseAlgoConfig& base, const TwoPhaseConfig& config, LossKind kind,
                          const TrainObserver& observer = {});

}  // namespace twophase
