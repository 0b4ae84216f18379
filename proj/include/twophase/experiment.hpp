#pragma once

#include <cstdint>
#include <filesystem>
#include <iosfwd>
#include <optional>
#include <stdexcept>
#include <string>
#include <vector>

#include <json.hpp>

#include "twophase/bounds.hpp"
#include "twophase/data.hpp"
#include "twophase/expressivity.hpp"
#include "twophase/loss.hpp"
#include "twophase/network.hpp"
#include "twophase/trainer.hpp"

namespace twophase {

enum ExitCode : int { exit_ok = 0, exit_config = 1, exit_verification = 2, exit_numeric = 3 };

class ConfigError : public std::invalid_argument {
 public:
  using std::invalid_argument::invalid_argument;
};

/// A check requested by verify failed, or training hit a rank condition.
class VerificationFailure : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

struct DataConfig {
  std::string source = "synthetic";  // synthetic | csv
  std::filesystem::path path;
  std::size_t n = 16;
  std::size_t input_dim = 4;
  std::size_t output_dim = 1;
  double min_margin = 0.05;
  TargetKind kind = TargetKind::regression;
  std::size_t num_classes = 0;
  std::size_t teacher_width = 16;
  bool normalize = false;
};

struct NetworkConfig {
  /// Hidden widths m_1..m_H; 0 means ceil(width_factor * n).
  std::vector<std::size_t> hidden = {32, 0};
  double width_factor = 1.1;
  double sharpness = 100.0;
  std::vector<bool> batch_norm;
  double bn_epsilon = 1e-5;
  std::string init = "he";  // he | gaussian
  double init_scale = 1.0;  // gaussian only
};

struct VerifyConfig {
  std::size_t trials = 20;
  double init_scale = 1.0;
  bool witness = true;
  double tolerance = 1e-9;
};

struct BoundsConfig {
  bool enabled = true;
  std::optional<double> g_squared;
  std::size_t optimum_max_steps = 100'000;
};

struct SweepConfig {
  std::vector<double> tau0 = {0.4, 0.6};
  std::vector<double> delta0 = {0.001, 0.01};
  std::size_t seeds = 3;
};

/// Per-purpose seeds. Unset ones are derived from the master seed.
struct SeedConfig {
  std::optional<std::uint64_t> data;
  std::optional<std::uint64_t> init;
  std::optional<std::uint64_t> base;
  std::optional<std::uint64_t> perturbation;
  std::optional<std::uint64_t> verify;
};

struct ExperimentConfig {
  std::uint64_t seed = 0;
  SeedConfig seeds;
  DataConfig data;
  NetworkConfig network;
  LossKind loss = LossKind::squared;
  BaseAlgoConfig base;
  TwoPhaseConfig two_phase;
  VerifyConfig verify;
  BoundsConfig bounds;
  SweepConfig sweep;

  std::uint64_t data_seed() const;
  std::uint64_t init_seed() const;
  std::uint64_t base_seed() const;
  std::uint64_t perturbation_seed() const;
  std::uint64_t verify_seed() const;
};

/// Unknown keys and ill-typed values raise ConfigError naming the key.
ExperimentConfig parse_config(const nlohmann::json& j);
ExperimentConfig load_config(const std::filesystem::path& path);
nlohmann::json to_json(const ExperimentConfig& config);

Dataset build_dataset(const ExperimentConfig& config);
NetworkSpec build_spec(const ExperimentConfig& config, const Dataset& data);

/// Checks every precondition a training run needs; throws ConfigError.
void validate_for_training(const ExperimentConfig& config, const NetworkSpec& spec,
                           const Dataset& data);

struct TrainOutcome {
  TrainResult result;
  std::optional<LastLayerOptimum> optimum;
  std::optional<BoundReport> bounds;
  /// R^2 averaged over fresh perturbation draws (squared loss only).
  std::optional<double> r_squared_averaged;
  std::size_t r_squared_draws = 0;
};

nlohmann::json record_to_json(const TrainRecord& rec);

/// One run of the two-phase algorithm with bounds evaluated alongside.
/// `records` (optional) receives one JSON line per step as it is produced.
TrainOutcome train_once(const ExperimentConfig& config, const Dataset& data, const NetworkSpec& spec,
                        std::ostream* records = nullptr);

int cmd_verify(const ExperimentConfig& config, const std::filesystem::path& out, std::ostream& msg);
int cmd_train(const ExperimentConfig& config, const std::filesystem::path& out, std::ostream& msg);
int cmd_sweep(const ExperimentConfig& config, const std::filesystem::path& out, std::ostream& msg,
              std::size_t threads);
int cmd_gen_data(const ExperimentConfig& config, const std::filesystem::path& out, std::ostream& msg);

/// TWOPHASE_THREADS, else the hardware concurrency (at least 1).
std::size_t worker_threads();

/// Entry point shared by the executable and the tests. args[0] is the
/// program name.
int run_cli(const std::vector<std::string>& args, std::ostream& out, std::ostream& err);

}  // namespace twophase
