#pragma once

#include <cstddef>
#include <cstdint>
#include <filesystem>
#include <string>
#include <string_view>
#include <vector>

#include "twophase/linalg.hpp"

namespace twophase {

using linalg::Matrix;

enum class TargetKind { regression, class_index, one_hot };
std::string to_string(TargetKind kind);
TargetKind target_kind_from_string(std::string_view name);

/// Y is always dense: class indices are expanded to one-hot rows and the
/// original labels are kept in `labels`.
struct Dataset {
  Matrix x;
  Matrix y;
  TargetKind kind = TargetKind::regression;
  std::vector<std::size_t> labels;
  std::string provenance;

  std::size_t size() const { return static_cast<std::size_t>(x.rows()); }
  void validate() const;
};

struct SynthOptions {
  std::size_t n = 16;
  std::size_t input_dim = 4;
  std::size_t output_dim = 1;  // number of classes for classification kinds
  double min_margin = 0.05;
  TargetKind kind = TargetKind::regression;
  std::uint64_t seed = 0;
  std::size_t teacher_width = 16;
  std::size_t max_rejections = 1'000'000;
};

/// Unit-sphere inputs with every pairwise squared distance >= 2 min_margin.
/// Regression targets come from a random softplus teacher network,
/// classification targets are uniform class labels.
Dataset synth_gen(const SynthOptions& options);

/// Scales every row to unit Euclidean norm. Throws on a zero row.
Matrix normalize_inputs(const Matrix& x);

/// Comma-separated rows: input_dim features followed by the targets (one
/// integer column for class_index). `num_classes` = 0 infers max label + 1.
Dataset load_csv(const std::filesystem::path& path, std::size_t input_dim, TargetKind kind,
                 std::size_t num_classes = 0);

/// Writes the dataset in the layout load_csv reads back (17 significant digits).
void save_csv(const Dataset& data, const std::filesystem::path& path);

/// One-hot rows from class labels.
Matrix one_hot(const std::vector<std::size_t>& labels, std::size_t num_classes);

}  // namespace twophase
