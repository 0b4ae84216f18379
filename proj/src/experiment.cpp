#include "twophase/experiment.hpp"

#include <CLI11.hpp>

#include <algorithm>
#include <atomic>
#include <cmath>
#include <cstdlib>
#include <fstream>
#include <iomanip>
#include <iostream>
#include <limits>
#include <mutex>
#include <set>
#include <sstream>
#include <thread>

#include "twophase/random.hpp"

namespace twophase {

namespace fs = std::filesystem;
using nlohmann::json;

namespace {

// Parsed text yields unsigned values; values built in code may be signed.
bool is_count(const json& v) { return v.is_number_unsigned() || (v.is_number_integer() && v.get<long long>() >= 0); }

/// Strict reader over one JSON object: every key must be consumed.
class ObjectReader {
 public:
  ObjectReader(const json& j, std::string where) : j_(j), where_(std::move(where)) {
    if (!j_.is_object()) throw ConfigError(label() + " must be an object");
  }

  bool has(const std::string& key) {
    if (!j_.contains(key)) return false;
    seen_.insert(key);
    return true;
  }

  const json& at(const std::string& key) { return j_.at(key); }

  void number(const std::string& key, double& out) {
    if (!has(key)) return;
    if (!j_[key].is_number()) throw ConfigError(path(key) + " must be a number");
    out = j_[key].get<double>();
  }
  void number(const std::string& key, std::optional<double>& out) {
    if (!has(key)) return;
    if (j_[key].is_null()) return out.reset();
    double v = 0.0;
    seen_.erase(key);
    number(key, v);
    out = v;
  }
  void count(const std::string& key, std::size_t& out) {
    if (!has(key)) return;
    if (!is_count(j_[key])) throw ConfigError(path(key) + " must be a nonnegative integer");
    out = j_[key].get<std::size_t>();
  }
  void count(const std::string& key, std::optional<std::size_t>& out) {
    if (!has(key)) return;
    if (j_[key].is_null()) return out.reset();
    std::size_t v = 0;
    count(key, v);
    out = v;
  }
  void seed(const std::string& key, std::uint64_t& out) {
    if (!has(key)) return;
    if (!is_count(j_[key])) throw ConfigError(path(key) + " must be a nonnegative integer");
    out = j_[key].get<std::uint64_t>();
  }
  void seed(const std::string& key, std::optional<std::uint64_t>& out) {
    if (!has(key)) return;
    if (j_[key].is_null()) return out.reset();
    std::uint64_t v = 0;
    seed(key, v);
    out = v;
  }
  void flag(const std::string& key, bool& out) {
    if (!has(key)) return;
    if (!j_[key].is_boolean()) throw ConfigError(path(key) + " must be true or false");
    out = j_[key].get<bool>();
  }
  void text(const std::string& key, std::string& out) {
    if (!has(key)) return;
    if (!j_[key].is_string()) throw ConfigError(path(key) + " must be a string");
    out = j_[key].get<std::string>();
  }
  template <typename T, typename Fn>
  void list(const std::string& key, std::vector<T>& out, Fn convert) {
    if (!has(key)) return;
    if (!j_[key].is_array()) throw ConfigError(path(key) + " must be an array");
    out.clear();
    for (const auto& item : j_[key]) out.push_back(convert(item, path(key)));
  }
  template <typename Fn>
  void parsed(const std::string& key, Fn apply) {
    std::string value;
    if (!has(key)) return;
    text(key, value);
    try {
      apply(value);
    } catch (const std::invalid_argument& e) {
      throw ConfigError(path(key) + ": " + e.what());
    }
  }

  void finish() const {
    for (auto it = j_.begin(); it != j_.end(); ++it) {
      if (!seen_.count(it.key())) throw ConfigError("unknown key " + path(it.key()));
    }
  }

  std::string path(const std::string& key) const {
    return "'" + (where_.empty() ? key : where_ + "." + key) + "'";
  }

 private:
  std::string label() const { return where_.empty() ? "config" : "'" + where_ + "'"; }

  const json& j_;
  std::string where_;
  std::set<std::string> seen_;
};

double as_double(const json& item, const std::string& where) {
  if (!item.is_number()) throw ConfigError(where + " entries must be numbers");
  return item.get<double>();
}

std::size_t as_count(const json& item, const std::string& where) {
  if (!is_count(item)) throw ConfigError(where + " entries must be nonnegative integers");
  return item.get<std::size_t>();
}

bool as_bool(const json& item, const std::string& where) {
  if (!item.is_boolean()) throw ConfigError(where + " entries must be true or false");
  return item.get<bool>();
}

template <typename T>
json optional_json(const std::optional<T>& v) {
  return v ? json(*v) : json(nullptr);
}

std::ofstream open_output(const fs::path& path) {
  std::ofstream out(path);
  if (!out) throw std::runtime_error("cannot write " + path.string());
  out.precision(17);
  return out;
}

void ensure_dir(const fs::path& dir) {
  std::error_code ec;
  fs::create_directories(dir, ec);
  if (ec) throw std::runtime_error("cannot create output directory " + dir.string() + ": " + ec.message());
}

/// key: value lines with the keys padded to a common width.
std::string aligned_text(const std::vector<std::pair<std::string, std::string>>& rows) {
  std::size_t width = 0;
  for (const auto& [k, v] : rows) width = std::max(width, k.size());
  std::ostringstream out;
  for (const auto& [k, v] : rows) out << std::left << std::setw(static_cast<int>(width)) << k << "  " << v << "\n";
  return out.str();
}

std::string fmt(double v) {
  std::ostringstream s;
  s << std::setprecision(10) << v;
  return s.str();
}

std::string fmt_json(const json& v) {
  if (v.is_string()) return v.get<std::string>();
  if (v.is_number_float()) return fmt(v.get<double>());
  return v.dump();
}

void write_summary(const fs::path& out, const json& summary) {
  open_output(out / "summary.json") << summary.dump(2) << "\n";
  std::vector<std::pair<std::string, std::string>> rows;
  for (auto it = summary.begin(); it != summary.end(); ++it) {
    if (it->is_object() || (it->is_array() && it.key() != "ranks")) continue;
    rows.emplace_back(it.key(), fmt_json(*it));
  }
  if (summary.contains("constants")) {
    for (auto it = summary["constants"].begin(); it != summary["constants"].end(); ++it) {
      rows.emplace_back("constants." + it.key(), fmt_json(*it));
    }
  }
  open_output(out / "summary.txt") << aligned_text(rows);
}

/// Indices of up to `count` roughly log-spaced phase-2 points plus the last.
std::vector<std::size_t> checkpoint_indices(std::size_t size, std::size_t count) {
  std::vector<std::size_t> idx;
  if (size == 0) return idx;
  for (std::size_t k = 0; k < count; ++k) {
    const double frac = static_cast<double>(k) / static_cast<double>(std::max<std::size_t>(count - 1, 1));
    const auto i = static_cast<std::size_t>(std::pow(static_cast<double>(size), frac)) - 1;
    if (idx.empty() || idx.back() != i) idx.push_back(std::min(i, size - 1));
  }
  if (idx.back() != size - 1) idx.push_back(size - 1);
  return idx;
}

json bound_point_json(const BoundPoint& p) {
  return {{"t", p.t}, {"bound", p.bound}, {"measured", p.measured}, {"slack", p.slack}, {"violated", p.violated}};
}

}  // namespace

std::uint64_t ExperimentConfig::data_seed() const { return seeds.data.value_or(derive_seed(seed, 1)); }
std::uint64_t ExperimentConfig::init_seed() const { return seeds.init.value_or(derive_seed(seed, 2)); }
std::uint64_t ExperimentConfig::base_seed() const { return seeds.base.value_or(derive_seed(seed, 3)); }
std::uint64_t ExperimentConfig::perturbation_seed() const {
  return seeds.perturbation.value_or(derive_seed(seed, 4));
}
std::uint64_t ExperimentConfig::verify_seed() const { return seeds.verify.value_or(derive_seed(seed, 5)); }

ExperimentConfig parse_config(const json& j) {
  ExperimentConfig c;
  ObjectReader root(j, "");
  root.seed("seed", c.seed);
  root.parsed("loss", [&](const std::string& v) { c.loss = loss_kind_from_string(v); });

  if (root.has("seeds")) {
    ObjectReader r(root.at("seeds"), "seeds");
    r.seed("data", c.seeds.data);
    r.seed("init", c.seeds.init);
    r.seed("base", c.seeds.base);
    r.seed("perturbation", c.seeds.perturbation);
    r.seed("verify", c.seeds.verify);
    r.finish();
  }
  if (root.has("data")) {
    ObjectReader r(root.at("data"), "data");
    r.text("source", c.data.source);
    std::string path;
    r.text("path", path);
    c.data.path = path;
    r.count("n", c.data.n);
    r.count("input_dim", c.data.input_dim);
    r.count("output_dim", c.data.output_dim);
    r.number("min_margin", c.data.min_margin);
    r.parsed("kind", [&](const std::string& v) { c.data.kind = target_kind_from_string(v); });
    r.count("num_classes", c.data.num_classes);
    r.count("teacher_width", c.data.teacher_width);
    r.flag("normalize", c.data.normalize);
    r.finish();
  }
  if (root.has("network")) {
    ObjectReader r(root.at("network"), "network");
    r.list("hidden", c.network.hidden, as_count);
    r.number("width_factor", c.network.width_factor);
    r.number("sharpness", c.network.sharpness);
    r.list("batch_norm", c.network.batch_norm, as_bool);
    r.number("bn_epsilon", c.network.bn_epsilon);
    r.text("init", c.network.init);
    r.number("init_scale", c.network.init_scale);
    r.finish();
  }
  if (root.has("base")) {
    ObjectReader r(root.at("base"), "base");
    r.parsed("variant", [&](const std::string& v) { c.base.variant = base_variant_from_string(v); });
    r.number("learning_rate", c.base.learning_rate);
    r.number("momentum", c.base.momentum);
    r.count("batch_size", c.base.batch_size);
    r.number("weight_decay", c.base.weight_decay);
    r.finish();
  }
  if (root.has("two_phase")) {
    auto& t = c.two_phase;
    ObjectReader r(root.at("two_phase"), "two_phase");
    r.count("total_steps", t.total_steps);
    r.count("switch_step", t.switch_step);
    r.number("switch_fraction", t.switch_fraction);
    r.number("noise_scale", t.noise_scale);
    r.list("layer_noise", t.layer_noise, as_double);
    r.parsed("mode", [&](const std::string& v) { t.mode = phase2_mode_from_string(v); });
    r.number("sgd_rate", t.sgd_rate);
    r.count("phase2_batch_size", t.phase2_batch_size);
    r.parsed("phase2_sampling", [&](const std::string& v) { t.phase2_sampling = sampling_from_string(v); });
    r.number("lazy_eta_bar", t.lazy_eta_bar);
    r.number("lazy_lipschitz", t.lazy_lipschitz);
    r.count("lazy_max_halvings", t.lazy_max_halvings);
    r.number("phase2_momentum", t.phase2_momentum);
    r.number("phase2_weight_decay", t.phase2_weight_decay);
    r.count("monitor_every", t.monitor_every);
    r.count("jacobian_max_entries", t.jacobian_max_entries);
    r.flag("record_wall_time", t.record_wall_time);
    r.finish();
  }
  if (root.has("verify")) {
    ObjectReader r(root.at("verify"), "verify");
    r.count("trials", c.verify.trials);
    r.number("init_scale", c.verify.init_scale);
    r.flag("witness", c.verify.witness);
    r.number("tolerance", c.verify.tolerance);
    r.finish();
  }
  if (root.has("bounds")) {
    ObjectReader r(root.at("bounds"), "bounds");
    r.flag("enabled", c.bounds.enabled);
    r.number("g_squared", c.bounds.g_squared);
    r.count("optimum_max_steps", c.bounds.optimum_max_steps);
    r.finish();
  }
  if (root.has("sweep")) {
    ObjectReader r(root.at("sweep"), "sweep");
    r.list("tau0", c.sweep.tau0, as_double);
    r.list("delta0", c.sweep.delta0, as_double);
    r.count("seeds", c.sweep.seeds);
    r.finish();
  }
  root.finish();
  return c;
}

ExperimentConfig load_config(const fs::path& path) {
  std::ifstream in(path);
  if (!in) throw ConfigError("cannot open config file " + path.string());
  json j;
  try {
    j = json::parse(in);
  } catch (const json::parse_error& e) {
    throw ConfigError(path.string() + ": " + e.what());
  }
  return parse_config(j);
}

json to_json(const ExperimentConfig& c) {
  const auto& t = c.two_phase;
  return {
      {"seed", c.seed},
      {"loss", to_string(c.loss)},
      {"seeds",
       {{"data", c.data_seed()},
        {"init", c.init_seed()},
        {"base", c.base_seed()},
        {"perturbation", c.perturbation_seed()},
        {"verify", c.verify_seed()}}},
      {"data",
       {{"source", c.data.source},
        {"path", c.data.path.string()},
        {"n", c.data.n},
        {"input_dim", c.data.input_dim},
        {"output_dim", c.data.output_dim},
        {"min_margin", c.data.min_margin},
        {"kind", to_string(c.data.kind)},
        {"num_classes", c.data.num_classes},
        {"teacher_width", c.data.teacher_width},
        {"normalize", c.data.normalize}}},
      {"network",
       {{"hidden", c.network.hidden},
        {"width_factor", c.network.width_factor},
        {"sharpness", c.network.sharpness},
        {"batch_norm", c.network.batch_norm},
        {"bn_epsilon", c.network.bn_epsilon},
        {"init", c.network.init},
        {"init_scale", c.network.init_scale}}},
      {"base",
       {{"variant", to_string(c.base.variant)},
        {"learning_rate", c.base.learning_rate},
        {"momentum", c.base.momentum},
        {"batch_size", c.base.batch_size},
        {"weight_decay", c.base.weight_decay}}},
      {"two_phase",
       {{"total_steps", t.total_steps},
        {"switch_step", optional_json(t.switch_step)},
        {"switch_fraction", t.switch_fraction},
        {"noise_scale", t.noise_scale},
        {"layer_noise", t.layer_noise},
        {"mode", to_string(t.mode)},
        {"sgd_rate", t.sgd_rate},
        {"phase2_batch_size", t.phase2_batch_size},
        {"phase2_sampling", to_string(t.phase2_sampling)},
        {"lazy_eta_bar", t.lazy_eta_bar},
        {"lazy_lipschitz", optional_json(t.lazy_lipschitz)},
        {"lazy_max_halvings", t.lazy_max_halvings},
        {"phase2_momentum", t.phase2_momentum},
        {"phase2_weight_decay", t.phase2_weight_decay},
        {"monitor_every", t.monitor_every},
        {"jacobian_max_entries", t.jacobian_max_entries},
        {"record_wall_time", t.record_wall_time}}},
      {"verify",
       {{"trials", c.verify.trials},
        {"init_scale", c.verify.init_scale},
        {"witness", c.verify.witness},
        {"tolerance", c.verify.tolerance}}},
      {"bounds",
       {{"enabled", c.bounds.enabled},
        {"g_squared", optional_json(c.bounds.g_squared)},
        {"optimum_max_steps", c.bounds.optimum_max_steps}}},
      {"sweep", {{"tau0", c.sweep.tau0}, {"delta0", c.sweep.delta0}, {"seeds", c.sweep.seeds}}},
  };
}

Dataset build_dataset(const ExperimentConfig& c) {
  Dataset data;
  try {
    if (c.data.source == "synthetic") {
      SynthOptions o;
      o.n = c.data.n;
      o.input_dim = c.data.input_dim;
      o.output_dim = c.data.output_dim;
      o.min_margin = c.data.min_margin;
      o.kind = c.data.kind;
      o.seed = c.data_seed();
      o.teacher_width = c.data.teacher_width;
      data = synth_gen(o);
    } else if (c.data.source == "csv") {
      if (c.data.path.empty()) throw ConfigError("'data.path' is required for csv data");
      data = load_csv(c.data.path, c.data.input_dim, c.data.kind, c.data.num_classes);
    } else {
      throw ConfigError("'data.source' must be synthetic or csv");
    }
  } catch (const ConfigError&) {
    throw;
  } catch (const std::invalid_argument& e) {
    throw ConfigError(std::string("data: ") + e.what());
  }
  if (c.data.normalize) {
    try {
      data.x = normalize_inputs(data.x);
    } catch (const std::invalid_argument& e) {
      throw ConfigError(std::string("data.normalize: ") + e.what());
    }
  }
  return data;
}

NetworkSpec build_spec(const ExperimentConfig& c, const Dataset& data) {
  if (c.network.hidden.empty()) throw ConfigError("'network.hidden' needs at least one layer");
  if (!(c.network.width_factor > 0.0)) throw ConfigError("'network.width_factor' must be positive");
  NetworkSpec spec;
  spec.widths.push_back(static_cast<std::size_t>(data.x.cols()));
  for (std::size_t w : c.network.hidden) {
    spec.widths.push_back(w ? w : static_cast<std::size_t>(std::ceil(c.network.width_factor * static_cast<double>(data.size()) - 1e-9)));
  }
  spec.output_dim = static_cast<std::size_t>(data.y.cols());
  spec.sharpness = c.network.sharpness;
  spec.batch_norm = c.network.batch_norm;
  spec.bn_epsilon = c.network.bn_epsilon;
  try {
    spec.validate();
  } catch (const std::invalid_argument& e) {
    throw ConfigError(std::string("network: ") + e.what());
  }
  return spec;
}

void validate_for_training(const ExperimentConfig& c, const NetworkSpec& spec, const Dataset& data) {
  if (spec.depth() < 2) {
    throw ConfigError("network: training needs H >= 2 hidden layers (the convergence guarantees assume it)");
  }
  if (c.network.init != "he" && c.network.init != "gaussian") {
    throw ConfigError("'network.init' must be he or gaussian");
  }
  if (c.network.init == "gaussian" && !(c.network.init_scale > 0.0)) {
    throw ConfigError("'network.init_scale' must be positive");
  }
  try {
    data.validate();
    c.base.validate(data.size());
    c.two_phase.validate(spec);
    validate_targets(c.loss, data.y, data.y);
  } catch (const std::invalid_argument& e) {
    throw ConfigError(e.what());
  }
}

json record_to_json(const TrainRecord& r) {
  json j = {{"t", r.t}, {"phase", r.phase}, {"loss", r.loss}, {"grad_norm", r.grad_norm}, {"rate", r.rate}};
  if (r.feature_rank) j["feature_rank"] = *r.feature_rank;
  if (r.ntk_rank) j["ntk_rank"] = *r.ntk_rank;
  if (r.rank_preserved) j["rank_preserved"] = *r.rank_preserved;
  if (r.rejected) j["rejected"] = r.rejected;
  if (r.skipped) j["skipped"] = true;
  if (r.running_best) j["running_best"] = *r.running_best;
  if (r.bound) j["bound"] = *r.bound;
  if (r.suboptimality) j["suboptimality"] = *r.suboptimality;
  if (r.wall_ms > 0.0) j["wall_ms"] = r.wall_ms;
  return j;
}

constexpr std::uint64_t kAveragedDraws = 8;

TrainOutcome train_once(const ExperimentConfig& c, const Dataset& data, const NetworkSpec& spec,
                        std::ostream* records) {
  validate_for_training(c, spec, data);
  std::mt19937_64 init_rng(c.init_seed());
  const Params initial = c.network.init == "he" ? init_params(spec, init_rng)
                                                : gaussian_params(spec, c.network.init_scale, init_rng);
  BaseAlgoConfig base = c.base;
  base.seed = c.base_seed();
  TwoPhaseConfig cfg = c.two_phase;
  cfg.seed = c.perturbation_seed();

  TrainOutcome outcome{TrainResult{initial, initial, initial, {}, {}, {}}, std::nullopt, std::nullopt, std::nullopt, 0};
  const bool bounds = c.bounds.enabled;
  const Phase2Mode mode = cfg.mode;
  std::size_t tau = cfg.tau();
  BoundConstants constants;
  constants.mode = mode;
  constants.sgd_rate = cfg.sgd_rate;
  constants.eta_bar = cfg.lazy_eta_bar;

  // lazy_full: empirical Lipschitz over consecutive iterates and R-bar over
  // monitored iterates.
  std::optional<Vector> prev_w;
  std::optional<Vector> prev_g;
  double lipschitz_emp = 0.0;
  std::vector<TrajectoryPoint> trajectory;
  const Vector mask = nu_mask(ParamLayout(spec));
  const auto collect_lazy = [&](std::size_t t, const Params& p) {
    const Vector g = full_gradient(spec, p, data, c.loss);
    if (prev_w) {
      const double dw = (p.flat() - *prev_w).norm();
      if (dw > 0.0) lipschitz_emp = std::max(lipschitz_emp, (g - *prev_g).norm() / dw);
    }
    prev_w = p.flat();
    prev_g = g;
    const std::size_t every = cfg.monitor_every ? cfg.monitor_every : std::max<std::size_t>(cfg.total_steps, 1);
    if (c.loss == LossKind::squared && ((t - tau) % every == 0 || t == cfg.total_steps)) {
      JacobianOptions opts;
      opts.max_entries = cfg.jacobian_max_entries;
      try {
        trajectory.push_back({mask.cwiseProduct(p.flat()), compute_jacobian(spec, p, data.x, opts)});
      } catch (const SizeCapError&) {
      }
    }
  };

  TrainObserver observer;
  observer.on_phase_two = [&](const PhaseTwoStart& start) {
    if (!bounds) return;
    OptimumOptions opts;
    opts.max_steps = c.bounds.optimum_max_steps;
    const Matrix anchor = start.params.weight_bias(spec.depth() + 1);
    outcome.optimum = solve_last_layer_optimum(c.loss, start.features, data.y, anchor, opts);
    constants.r_squared = outcome.optimum->r_squared;
    constants.loss_star = outcome.optimum->loss;
    constants.approximate_optimum = outcome.optimum->approximate;
    constants.lipschitz_last = start.lipschitz_last;
    if (c.bounds.g_squared) {
      constants.g_squared = *c.bounds.g_squared;
      constants.g_squared_measured = false;
    }
    if (mode == Phase2Mode::lazy_full) collect_lazy(tau, start.params);
  };
  if (bounds && mode == Phase2Mode::lazy_full) observer.on_params = collect_lazy;
  observer.on_record = [&](TrainRecord& rec) {
    if (bounds && rec.t > tau && outcome.optimum) {
      if (mode == Phase2Mode::last_layer_gd) {
        rec.bound = gd_bound(constants.r_squared, constants.lipschitz_last, rec.t, tau);
        rec.suboptimality = rec.loss - constants.loss_star;
      } else if (rec.running_best) {
        rec.suboptimality = *rec.running_best - constants.loss_star;
        if (mode == Phase2Mode::last_layer_sgd && !constants.g_squared_measured) {
          rec.bound = sgd_bound(constants.r_squared, constants.g_squared,
                                sqrt_schedule(cfg.sgd_rate, rec.t, tau), rec.t, tau);
        }
      }
    }
    if (records) *records << record_to_json(rec).dump() << "\n" << std::flush;
  };

  outcome.result = run_two_phase(spec, initial, data, base, cfg, c.loss, observer);
  if (bounds && outcome.optimum) {
    if (mode == Phase2Mode::last_layer_sgd && constants.g_squared_measured) {
      constants.g_squared = outcome.result.log.max_grad_norm_sq;
    }
    if (mode == Phase2Mode::lazy_full) {
      constants.lipschitz = lipschitz_emp;
      constants.r_bar = trajectory.empty() ? 0.0 : estimate_R_bar(trajectory, data.y, c.loss);
    }
    if (mode == Phase2Mode::last_layer_gd || mode == Phase2Mode::last_layer_sgd || !trajectory.empty()) {
      outcome.bounds = check_bounds(outcome.result.log, constants);
    }
    // The realized R^2 conditions on one perturbation; also report its mean over
    // independent draws around the same w^tau.
    if (c.loss == LossKind::squared && tau < cfg.total_steps) {
      const Params& pre = outcome.result.params_before_perturbation;
      const Matrix anchor = pre.weight_bias(spec.depth() + 1);
      const auto sigmas = cfg.noise_scales(spec.depth());
      double sum = 0.0;
      std::size_t draws = 0;
      for (std::uint64_t k = 0; k < kAveragedDraws; ++k) {
        const Params q = perturb(pre, sigmas, derive_seed(cfg.seed, 100 + k));
        const Matrix h = forward_hidden(spec, q, data.x).hidden;
        const LastLayerOptimum o = solve_last_layer_optimum(c.loss, h, data.y, anchor);
        if (!o.full_rank) continue;
        sum += o.r_squared;
        ++draws;
      }
      if (draws > 0) outcome.r_squared_averaged = sum / static_cast<double>(draws);
      outcome.r_squared_draws = draws;
    }
  }
  return outcome;
}

int cmd_train(const ExperimentConfig& c, const fs::path& out, std::ostream& msg) {
  const Dataset data = build_dataset(c);
  const NetworkSpec spec = build_spec(c, data);
  validate_for_training(c, spec, data);
  ensure_dir(out);
  auto log = open_output(out / "run.log.jsonl");

  json summary = {{"status", "ok"}, {"config", to_json(c)}, {"provenance", data.provenance},
                  {"n", data.size()}, {"widths", spec.widths}, {"output_dim", spec.output_dim}};
  std::optional<TrainOutcome> run;
  try {
    run = train_once(c, data, spec, &log);
  } catch (const std::exception& e) {
    log.flush();
    summary["status"] = "failed";
    summary["error"] = e.what();
    write_summary(out, summary);
    throw;
  }
  const TrainOutcome& outcome = *run;
  const TrainLog& tl = outcome.result.log;

  double best = std::numeric_limits<double>::infinity();
  std::size_t best_t = 0;
  for (const auto& r : tl.records) {
    if (r.loss < best) {
      best = r.loss;
      best_t = r.t;
    }
  }
  summary["total_steps"] = tl.total_steps;
  summary["tau"] = tl.tau;
  summary["mode"] = to_string(tl.mode);
  summary["final_loss"] = tl.final_loss();
  summary["best_loss"] = tl.records.empty() ? json(nullptr) : json(best);
  summary["best_step"] = best_t;
  summary["loss_before_perturbation"] = tl.loss_before_perturbation;
  summary["loss_at_tau"] = tl.loss_at_tau;
  summary["t_star"] = tl.best_step;
  summary["loss_t_star"] = tl.best_loss;
  summary["L_H"] = tl.lipschitz_last;
  if (tl.mode == Phase2Mode::lazy_full) summary["L_step"] = tl.lipschitz_full;
  summary["ranks"] = {{"feature_rank_at_tau", optional_json(tl.feature_rank_at_tau)},
                      {"ntk_rank_at_tau", optional_json(tl.ntk_rank_at_tau)}};
  if (outcome.optimum) {
    const auto& o = *outcome.optimum;
    json constants = {{"R2", o.r_squared}, {"loss_star", o.loss}, {"optimum_approximate", o.approximate},
                      {"feature_rank", o.rank}, {"L_H", tl.lipschitz_last}};
    if (outcome.bounds) {
      const auto& k = outcome.bounds->constants;
      if (tl.mode == Phase2Mode::last_layer_sgd) {
        constants["G2"] = k.g_squared;
        constants["G2_measured"] = k.g_squared_measured;
        constants["sgd_rate"] = k.sgd_rate;
      }
      if (tl.mode == Phase2Mode::lazy_full) {
        constants["L_empirical"] = k.lipschitz;
        constants["R_bar"] = k.r_bar;
        constants["eta_bar"] = k.eta_bar;
      }
    }
    constants["R2_realized_perturbation"] = true;
    if (outcome.r_squared_averaged) {
      constants["R2_averaged"] = *outcome.r_squared_averaged;
      constants["R2_averaged_draws"] = outcome.r_squared_draws;
    }
    summary["constants"] = constants;
  }
  if (outcome.bounds) {
    const auto& b = *outcome.bounds;
    summary["violations"] = b.violations;
    summary["bounds_diagnostic_only"] = b.diagnostic_only;
    json points = json::array();
    for (std::size_t i : checkpoint_indices(b.points.size(), 12)) points.push_back(bound_point_json(b.points[i]));
    summary["bound_checkpoints"] = points;
  }
  write_summary(out, summary);
  msg << "train: final loss " << fmt(tl.final_loss()) << ", tau " << tl.tau << ", T " << tl.total_steps;
  if (outcome.bounds) msg << ", bound violations " << outcome.bounds->violations;
  msg << "\n";
  return exit_ok;
}

int cmd_verify(const ExperimentConfig& c, const fs::path& out, std::ostream& msg) {
  const Dataset data = build_dataset(c);
  const NetworkSpec spec = build_spec(c, data);
  if (c.verify.trials == 0) throw ConfigError("'verify.trials' must be positive");
  if (!(c.verify.init_scale > 0.0)) throw ConfigError("'verify.init_scale' must be positive");
  ensure_dir(out);
  const std::size_t n = data.size();
  json report = {{"provenance", data.provenance}, {"n", n}, {"widths", spec.widths}, {"warnings", json::array()}};
  std::vector<std::string> failures;

  if (n >= 2) {
    const auto d = check_distinguishability(data.x, c.verify.tolerance);
    json pairs = json::array();
    for (std::size_t k = 0; k < std::min<std::size_t>(d.violations.size(), 20); ++k) {
      pairs.push_back({d.violations[k].first, d.violations[k].second});
    }
    report["distinguishability"] = {{"passed", d.passed},
                                    {"margin", d.margin},
                                    {"worst_pair", {d.worst_pair.first, d.worst_pair.second}},
                                    {"violations", d.violations.size()},
                                    {"violating_pairs", pairs}};
    if (!d.passed) {
      failures.push_back("input distinguishability fails for samples " + std::to_string(d.worst_pair.first) +
                         " and " + std::to_string(d.worst_pair.second) +
                         ": ||x_i||^2 - x_i.x_j = " + fmt(d.margin) + " (need > 0)");
    }
  }

  const std::size_t m_h = spec.last_hidden_width();
  const bool dim_ok = m_h + 1 >= n;
  report["dimension"] = {{"m_H", m_h}, {"n", n}, {"passed", dim_ok}};
  if (!dim_ok) {
    failures.push_back("rank([h, 1]) <= m_H + 1 = " + std::to_string(m_h + 1) + " < n = " +
                       std::to_string(n) + ": the expressivity condition cannot hold; widen the last hidden layer");
  }

  const auto prob = probabilistic_expressivity(spec, data.x, c.verify.trials, c.verify.init_scale, c.verify_seed());
  json ranks = json::array();
  for (const auto& r : prob.reports) ranks.push_back(r.rank);
  report["probabilistic"] = {{"trials", prob.trials}, {"passed", prob.passed}, {"fraction", prob.fraction}, {"ranks", ranks}};
  // The condition is existential: one full-rank draw (or the witness below)
  // certifies it. Partial fractions are reported as a warning.
  bool certified = prob.passed > 0;
  if (prob.passed != prob.trials) {
    report["warnings"].push_back(std::to_string(prob.trials - prob.passed) + " of " + std::to_string(prob.trials) +
                                 " random draws lost numerical rank; sharp softplus units saturate below the rank "
                                 "tolerance, a wider last hidden layer or smaller sharpness helps");
  }
  if (c.verify.witness) {
    if (spec.any_batch_norm() || !witness_architecture(spec, n) || n < 2) {
      report["witness"] = {{"attempted", false},
                           {"reason", "architecture does not admit the explicit construction (needs no batch norm, "
                                      "min inner width >= min(m_x, n), m_H >= n)"}};
    } else {
      try {
        const Witness w = construct_witness(spec, data.x);
        report["witness"] = {{"attempted", true},
                             {"passed", w.report.passed},
                             {"case", to_string(w.kind)},
                             {"alpha", w.alpha},
                             {"alpha_prime", w.alpha_prime},
                             {"alpha_doublings", w.alpha_doublings},
                             {"alpha_prime_doublings", w.alpha_prime_doublings},
                             {"dominance", w.dominance},
                             {"rank", w.report.rank}};
        if (w.report.passed) certified = true;
        else failures.push_back("witness parameters did not reach rank n");
      } catch (const WitnessError& e) {
        report["witness"] = {{"attempted", true}, {"passed", false}, {"error", e.what()}};
        failures.push_back(std::string("witness: ") + e.what());
      }
    }
  }

  if (!certified) {
    failures.push_back("expressivity condition not certified: no random draw reached rank([h, 1]) = n and no witness was built");
  }
  report["passed"] = failures.empty();
  report["failures"] = failures;
  open_output(out / "verify.json") << report.dump(2) << "\n";
  std::vector<std::pair<std::string, std::string>> rows = {
      {"passed", failures.empty() ? "true" : "false"},
      {"n", std::to_string(n)},
      {"m_H", std::to_string(m_h)},
      {"expressivity_fraction", fmt(prob.fraction)}};
  if (report.contains("distinguishability")) rows.emplace_back("margin", fmt(report["distinguishability"]["margin"].get<double>()));
  for (const auto& f : failures) rows.emplace_back("failure", f);
  for (const auto& wmsg : report["warnings"]) rows.emplace_back("warning", wmsg.get<std::string>());
  open_output(out / "verify.txt") << aligned_text(rows);
  for (const auto& f : failures) msg << "verify: " << f << "\n";
  if (failures.empty()) msg << "verify: all checks passed\n";
  return failures.empty() ? exit_ok : exit_verification;
}

int cmd_gen_data(const ExperimentConfig& c, const fs::path& out, std::ostream& msg) {
  if (c.data.source != "synthetic") throw ConfigError("gen-data needs 'data.source' = synthetic");
  const Dataset data = build_dataset(c);
  ensure_dir(out);
  save_csv(data, out / "data.csv");
  msg << "gen-data: wrote " << data.size() << " rows to " << (out / "data.csv").string() << "\n";
  return exit_ok;
}

std::size_t worker_threads() {
  if (const char* env = std::getenv("TWOPHASE_THREADS")) {
    char* end = nullptr;
    const unsigned long v = std::strtoul(env, &end, 10);
    if (end != env && *end == '\0' && v > 0) return v;
  }
  return std::max(1u, std::thread::hardware_concurrency());
}

int cmd_sweep(const ExperimentConfig& c, const fs::path& out, std::ostream& msg, std::size_t threads) {
  if (c.sweep.tau0.empty() || c.sweep.delta0.empty()) throw ConfigError("sweep grid must not be empty");
  if (c.sweep.seeds == 0) throw ConfigError("'sweep.seeds' must be positive");
  for (double t : c.sweep.tau0) {
    if (!(t >= 0.0 && t <= 1.0)) throw ConfigError("'sweep.tau0' entries must lie in [0, 1]");
  }
  for (double d : c.sweep.delta0) {
    if (!(d > 0.0)) throw ConfigError("'sweep.delta0' entries must be positive (non-degenerate noise)");
  }
  {
    // Fail fast on configuration problems shared by every cell.
    const Dataset data = build_dataset(c);
    validate_for_training(c, build_spec(c, data), data);
  }
  ensure_dir(out);

  struct Task {
    std::size_t cell;
    ExperimentConfig config;
    std::optional<double> final_loss;
    std::string error;
  };
  std::vector<Task> tasks;
  const std::size_t cells = c.sweep.tau0.size() * c.sweep.delta0.size();
  for (std::size_t a = 0; a < c.sweep.tau0.size(); ++a) {
    for (std::size_t b = 0; b < c.sweep.delta0.size(); ++b) {
      for (std::size_t s = 0; s < c.sweep.seeds; ++s) {
        ExperimentConfig run = c;
        run.seed = c.seed + s;
        run.two_phase.switch_step.reset();
        run.two_phase.switch_fraction = c.sweep.tau0[a];
        run.two_phase.noise_scale = c.sweep.delta0[b];
        run.two_phase.layer_noise.clear();
        run.bounds.enabled = false;
        tasks.push_back({a * c.sweep.delta0.size() + b, std::move(run), std::nullopt, {}});
      }
    }
  }

  std::atomic<std::size_t> next{0};
  const auto worker = [&] {
    for (std::size_t i = next++; i < tasks.size(); i = next++) {
      auto& task = tasks[i];
      try {
        const Dataset data = build_dataset(task.config);
        const NetworkSpec spec = build_spec(task.config, data);
        task.final_loss = train_once(task.config, data, spec).result.log.final_loss();
      } catch (const std::exception& e) {
        task.error = e.what();
      }
    }
  };
  std::vector<std::thread> pool;
  for (std::size_t k = 1; k < std::min(threads, tasks.size()); ++k) pool.emplace_back(worker);
  worker();
  for (auto& t : pool) t.join();

  json table = json::array();
  std::ostringstream text;
  text << std::left << std::setw(8) << "tau0" << std::setw(10) << "delta0" << std::setw(8) << "runs"
       << std::setw(8) << "failed" << std::setw(20) << "mean_final_loss" << "std_final_loss\n";
  std::size_t failed_cells = 0;
  for (std::size_t cell = 0; cell < cells; ++cell) {
    const double tau0 = c.sweep.tau0[cell / c.sweep.delta0.size()];
    const double delta0 = c.sweep.delta0[cell % c.sweep.delta0.size()];
    std::vector<double> losses;
    json errors = json::array();
    for (const auto& t : tasks) {
      if (t.cell != cell) continue;
      if (t.final_loss) losses.push_back(*t.final_loss);
      else errors.push_back({{"seed", t.config.seed}, {"error", t.error}});
    }
    double mean = 0.0;
    double sd = 0.0;
    for (double l : losses) mean += l;
    if (!losses.empty()) mean /= static_cast<double>(losses.size());
    for (double l : losses) sd += (l - mean) * (l - mean);
    if (losses.size() > 1) sd = std::sqrt(sd / static_cast<double>(losses.size() - 1));
    if (!errors.empty()) ++failed_cells;
    json row = {{"tau0", tau0}, {"delta0", delta0}, {"runs", losses.size()}, {"failed", errors.size()},
                {"final_losses", losses}, {"errors", errors}};
    row["mean_final_loss"] = losses.empty() ? json(nullptr) : json(mean);
    row["std_final_loss"] = losses.empty() ? json(nullptr) : json(sd);
    table.push_back(row);
    text << std::left << std::setw(8) << fmt(tau0) << std::setw(10) << fmt(delta0) << std::setw(8)
         << losses.size() << std::setw(8) << errors.size() << std::setw(20)
         << (losses.empty() ? "nan" : fmt(mean)) << (losses.empty() ? "nan" : fmt(sd)) << "\n";
  }
  json doc = {{"config", to_json(c)}, {"seeds", c.sweep.seeds}, {"cells", table}};
  open_output(out / "sweep.json") << doc.dump(2) << "\n";
  open_output(out / "sweep.txt") << text.str();
  msg << "sweep: " << cells << " cells, " << failed_cells << " with failed runs\n";
  return exit_ok;
}

int run_cli(const std::vector<std::string>& args, std::ostream& out, std::ostream& err) {
  CLI::App app{"Two-phase training of softplus networks with convergence checks", "twophase"};
  app.require_subcommand(1);
  std::string config_path;
  std::string out_dir = "out";
  std::optional<std::uint64_t> seed;
  std::optional<std::size_t> monitor_every;
  std::optional<std::size_t> threads;
  const auto add_common = [&](CLI::App* sub) {
    sub->add_option("--config", config_path, "JSON config file (defaults apply when omitted)");
    sub->add_option("--out", out_dir, "output directory")->capture_default_str();
    sub->add_option("--seed", seed, "master seed (overrides the config)");
    sub->add_option("--monitor-every", monitor_every, "rank/bound cadence in steps (0 = off)");
  };
  auto* verify = app.add_subcommand("verify", "check distinguishability and expressivity");
  auto* train = app.add_subcommand("train", "run the two-phase algorithm");
  auto* sweep = app.add_subcommand("sweep", "grid over tau0 x delta0");
  auto* gen = app.add_subcommand("gen-data", "write a synthetic dataset as CSV");
  for (auto* sub : {verify, train, sweep, gen}) add_common(sub);
  sweep->add_option("--threads", threads, "worker threads (default TWOPHASE_THREADS)");

  // CLI11 consumes arguments from the back.
  std::vector<std::string> rev(args.rbegin(), args.rend());
  if (!rev.empty()) rev.pop_back();
  try {
    app.parse(rev);
  } catch (const CLI::CallForHelp&) {
    out << app.help();
    return exit_ok;
  } catch (const CLI::CallForAllHelp&) {
    out << app.help("", CLI::AppFormatMode::All);
    return exit_ok;
  } catch (const CLI::ParseError& e) {
    err << "error: " << e.what() << "\n" << app.help();
    return exit_config;
  }

  try {
    ExperimentConfig config = config_path.empty() ? ExperimentConfig{} : load_config(config_path);
    if (seed) config.seed = *seed;
    if (monitor_every) config.two_phase.monitor_every = *monitor_every;
    if (*verify) return cmd_verify(config, out_dir, err);
    if (*train) return cmd_train(config, out_dir, err);
    if (*sweep) return cmd_sweep(config, out_dir, err, threads.value_or(worker_threads()));
    return cmd_gen_data(config, out_dir, err);
  } catch (const ConfigError& e) {
    err << "config error: " << e.what() << "\n";
    return exit_config;
  } catch (const std::invalid_argument& e) {
    err << "config error: " << e.what() << "\n";
    return exit_config;
  } catch (const RankLossError& e) {
    err << "verification failure: " << e.what() << "\n";
    return exit_verification;
  } catch (const VerificationFailure& e) {
    err << "verification failure: " << e.what() << "\n";
    return exit_verification;
  } catch (const std::exception& e) {
    err << "runtime failure: " << e.what() << "\n";
    return exit_numeric;
  }
}

}  // namespace twophase
