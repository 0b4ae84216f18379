#include "twophase/data.hpp"

#include <charconv>
#include <cmath>
#include <fstream>
#include <random>
#include <sstream>
#include <stdexcept>

#include "twophase/network.hpp"

namespace twophase {

namespace {

using Index = Eigen::Index;

std::vector<std::string_view> split_fields(std::string_view line) {
  std::vector<std::string_view> fields;
  std::size_t start = 0;
  while (true) {
    const std::size_t comma = line.find(',', start);
    fields.push_back(line.substr(start, comma == std::string_view::npos ? comma : comma - start));
    if (comma == std::string_view::npos) break;
    start = comma + 1;
  }
  return fields;
}

std::string_view trim(std::string_view s) {
  while (!s.empty() && (s.front() == ' ' || s.front() == '\t')) s.remove_prefix(1);
  while (!s.empty() && (s.back() == ' ' || s.back() == '\t' || s.back() == '\r')) s.remove_suffix(1);
  return s;
}

double parse_double(std::string_view field, std::size_t line_no) {
  field = trim(field);
  double value = 0.0;
  const auto* end = field.data() + field.size();
  const auto [ptr, ec] = std::from_chars(field.data(), end, value);
  if (ec != std::errc() || ptr != end) {
    throw std::invalid_argument("line " + std::to_string(line_no) + ": cannot parse '" +
                                std::string(field) + "' as a number");
  }
  if (!std::isfinite(value)) {
    throw std::invalid_argument("line " + std::to_string(line_no) + ": non-finite value");
  }
  return value;
}

Vector random_unit_vector(std::size_t dim, std::mt19937_64& rng) {
  std::normal_distribution<double> normal(0.0, 1.0);
  Vector v(static_cast<Index>(dim));
  do {
    for (Index i = 0; i < v.size(); ++i) v(i) = normal(rng);
  } while (v.norm() == 0.0);
  return v / v.norm();
}

}  // namespace

std::string to_string(TargetKind kind) {
  switch (kind) {
    case TargetKind::regression:
      return "regression";
    case TargetKind::class_index:
      return "class_index";
    case TargetKind::one_hot:
      return "one_hot";
  }
  return "regression";
}

TargetKind target_kind_from_string(std::string_view name) {
  if (name == "regression") return TargetKind::regression;
  if (name == "class_index") return TargetKind::class_index;
  if (name == "one_hot") return TargetKind::one_hot;
  throw std::invalid_argument("unknown target kind '" + std::string(name) + "'");
}

void Dataset::validate() const {
  if (x.rows() < 1) throw std::invalid_argument("dataset has no samples");
  if (y.rows() != x.rows()) throw std::invalid_argument("dataset: X and Y row counts differ");
  linalg::require_finite(x, "dataset inputs");
  linalg::require_finite(y, "dataset targets");
  if (kind != TargetKind::regression) {
    for (Index i = 0; i < y.rows(); ++i) {
      if ((y.row(i).array() < 0.0).any() || std::abs(y.row(i).sum() - 1.0) > 1e-9) {
        throw std::invalid_argument("dataset: target row " + std::to_string(i) +
                                    " is not a probability vector");
      }
    }
  }
}

Matrix one_hot(const std::vector<std::size_t>& labels, std::size_t num_classes) {
  Matrix y = Matrix::Zero(static_cast<Index>(labels.size()), static_cast<Index>(num_classes));
  for (std::size_t i = 0; i < labels.size(); ++i) {
    if (labels[i] >= num_classes) {
      throw std::invalid_argument("label " + std::to_string(labels[i]) + " out of range for " +
                                  std::to_string(num_classes) + " classes");
    }
    y(static_cast<Index>(i), static_cast<Index>(labels[i])) = 1.0;
  }
  return y;
}

Dataset synth_gen(const SynthOptions& o) {
  if (o.n < 1 || o.input_dim < 1 || o.output_dim < 1) {
    throw std::invalid_argument("synth_gen: n, input_dim and output_dim must be >= 1");
  }
  if (!(o.min_margin > 0.0 && o.min_margin < 1.0)) {
    throw std::invalid_argument("synth_gen: min_margin must lie in (0, 1)");
  }
  std::mt19937_64 rng(o.seed);
  Dataset data;
  data.kind = o.kind;
  data.x.resize(static_cast<Index>(o.n), static_cast<Index>(o.input_dim));
  const double min_dist2 = 2.0 * o.min_margin;
  std::size_t rejections = 0;
  for (std::size_t i = 0; i < o.n;) {
    const Vector candidate = random_unit_vector(o.input_dim, rng);
    bool ok = true;
    for (std::size_t j = 0; j < i && ok; ++j) {
      ok = (data.x.row(static_cast<Index>(j)).transpose() - candidate).squaredNorm() >= min_dist2;
    }
    if (ok) {
      data.x.row(static_cast<Index>(i++)) = candidate.transpose();
    } else if (++rejections > o.max_rejections) {
      throw std::runtime_error("synth_gen: placed only " + std::to_string(i) + " of " +
                               std::to_string(o.n) + " points after " +
                               std::to_string(o.max_rejections) +
                               " rejections; lower n or min_margin, or raise input_dim");
    }
  }

  if (o.kind == TargetKind::regression) {
    NetworkSpec teacher{{o.input_dim, o.teacher_width}, o.output_dim, 1.0, {}, 1e-5};
    const Params p = init_params(teacher, rng);
    data.y = forward_output(teacher, p, data.x);
  } else {
    std::uniform_int_distribution<std::size_t> label(0, o.output_dim - 1);
    data.labels.resize(o.n);
    for (auto& l : data.labels) l = label(rng);
    data.y = one_hot(data.labels, o.output_dim);
  }
  std::ostringstream prov;
  prov << "synthetic n=" << o.n << " m_x=" << o.input_dim << " m_y=" << o.output_dim
       << " c_min=" << o.min_margin << " kind=" << to_string(o.kind) << " seed=" << o.seed;
  data.provenance = prov.str();
  return data;
}

Matrix normalize_inputs(const Matrix& x) {
  Matrix out = x;
  for (Index i = 0; i < x.rows(); ++i) {
    const double norm = x.row(i).norm();
    if (norm == 0.0) throw std::invalid_argument("normalize_inputs: row " + std::to_string(i) + " is zero");
    out.row(i) /= norm;
  }
  return out;
}

Dataset load_csv(const std::filesystem::path& path, std::size_t input_dim, TargetKind kind,
                 std::size_t num_classes) {
  std::ifstream in(path);
  if (!in) throw std::invalid_argument("cannot open " + path.string());
  std::vector<std::vector<double>> features;
  std::vector<std::vector<double>> targets;
  std::vector<std::size_t> labels;
  std::string line;
  std::size_t line_no = 0;
  std::size_t target_width = 0;
  while (std::getline(in, line)) {
    ++line_no;
    if (trim(line).empty()) continue;
    const auto fields = split_fields(line);
    if (fields.size() <= input_dim) {
      throw std::invalid_argument("line " + std::to_string(line_no) + ": expected " +
                                  std::to_string(input_dim) + " features plus targets, got " +
                                  std::to_string(fields.size()) + " fields");
    }
    const std::size_t width = fields.size() - input_dim;
    if (target_width == 0) target_width = width;
    if (width != target_width || (kind == TargetKind::class_index && width != 1)) {
      throw std::invalid_argument("line " + std::to_string(line_no) + ": inconsistent number of target columns");
    }
    std::vector<double> row;
    for (std::size_t k = 0; k < input_dim; ++k) row.push_back(parse_double(fields[k], line_no));
    features.push_back(std::move(row));
    std::vector<double> t;
    for (std::size_t k = input_dim; k < fields.size(); ++k) t.push_back(parse_double(fields[k], line_no));
    if (kind == TargetKind::class_index) {
      if (t[0] < 0.0 || t[0] != std::floor(t[0])) {
        throw std::invalid_argument("line " + std::to_string(line_no) + ": class label must be a nonnegative integer");
      }
      labels.push_back(static_cast<std::size_t>(t[0]));
    }
    targets.push_back(std::move(t));
  }
  if (features.empty()) throw std::invalid_argument(path.string() + ": no data rows");

  Dataset data;
  data.kind = kind;
  data.provenance = path.string();
  const auto n = static_cast<Index>(features.size());
  data.x.resize(n, static_cast<Index>(input_dim));
  for (Index i = 0; i < n; ++i) {
    for (Index k = 0; k < static_cast<Index>(input_dim); ++k) data.x(i, k) = features[static_cast<std::size_t>(i)][static_cast<std::size_t>(k)];
  }
  if (kind == TargetKind::class_index) {
    std::size_t classes = num_classes;
    if (classes == 0) {
      for (auto l : labels) classes = std::max(classes, l + 1);
    }
    data.labels = labels;
    data.y = one_hot(labels, classes);
  } else {
    data.y.resize(n, static_cast<Index>(target_width));
    for (Index i = 0; i < n; ++i) {
      for (Index k = 0; k < static_cast<Index>(target_width); ++k) data.y(i, k) = targets[static_cast<std::size_t>(i)][static_cast<std::size_t>(k)];
    }
    if (kind == TargetKind::one_hot) {
      data.labels.resize(static_cast<std::size_t>(n));
      for (Index i = 0; i < n; ++i) {
        Index arg = 0;
        data.y.row(i).maxCoeff(&arg);
        data.labels[static_cast<std::size_t>(i)] = static_cast<std::size_t>(arg);
      }
    }
  }
  data.validate();
  return data;
}

void save_csv(const Dataset& data, const std::filesystem::path& path) {
  std::ofstream out(path);
  if (!out) throw std::runtime_error("cannot write " + path.string());
  out.precision(17);
  for (Index i = 0; i < data.x.rows(); ++i) {
    for (Index k = 0; k < data.x.cols(); ++k) out << (k ? "," : "") << data.x(i, k);
    if (data.kind == TargetKind::class_index) {
      out << "," << data.labels.at(static_cast<std::size_t>(i));
    } else {
      for (Index k = 0; k < data.y.cols(); ++k) out << "," << data.y(i, k);
    }
    out << "\n";
  }
}

}  // namespace twophase
