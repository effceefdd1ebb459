#pragma once

// Synthetic datasets, sliced Wasserstein distance and PPM grids.

#include <algorithm>
#include <cmath>
#include <fstream>
#include <numbers>
#include <string>
#include <vector>

#include "asymflow/error.hpp"
#include "asymflow/matrix.hpp"
#include "asymflow/rng.hpp"
#include "asymflow/train.hpp"

namespace asymflow {

enum class DatasetKind { Moons2d, GaussMixture, ToyPatches };

inline std::string_view to_string(DatasetKind k) {
  switch (k) {
    case DatasetKind::Moons2d: return "moons2d";
    case DatasetKind::GaussMixture: return "gauss_mixture";
    case DatasetKind::ToyPatches: return "toy_patches";
  }
  return "unknown";
}

inline DatasetKind dataset_kind_from_string(std::string_view s) {
  if (s == "moons2d") return DatasetKind::Moons2d;
  if (s == "gauss_mixture") return DatasetKind::GaussMixture;
  if (s == "toy_patches") return DatasetKind::ToyPatches;
  throw Error("unknown dataset '" + std::string(s) + "'");
}

struct DatasetSpec {
  DatasetKind kind = DatasetKind::ToyPatches;
  std::size_t size = 1000;
  std::size_t patch = 4;         // toy_patches: side p, D = p^2
  std::size_t dim = 2;           // gauss_mixture: dimension
  std::size_t components = 1;    // gauss_mixture: number of components
  double radius = 3.0;           // gauss_mixture: component means on a circle of this radius
  double noise = 0.1;            // moons2d: Gaussian jitter
  bool standardize = true;       // toy_patches: per-dimension mean 0, std 1

  std::size_t data_dim() const {
    switch (kind) {
      case DatasetKind::Moons2d: return 2;
      case DatasetKind::GaussMixture: return dim;
      case DatasetKind::ToyPatches: return patch * patch;
    }
    return 0;
  }

  void validate() const {
    if (size == 0) throw DomainError("dataset: size must be >= 1");
    if (kind == DatasetKind::ToyPatches && patch == 0) throw DomainError("dataset: patch must be >= 1");
    if (kind == DatasetKind::GaussMixture && (dim == 0 || components == 0)) {
      throw DomainError("dataset: gauss_mixture needs dim >= 1 and components >= 1");
    }
    if (kind == DatasetKind::GaussMixture && components > 1 && dim < 2) {
      throw DomainError("dataset: gauss_mixture with several components needs dim >= 2");
    }
    if (!(noise >= 0.0)) throw DomainError("dataset: noise must be >= 0");
  }
};

namespace detail {

inline TrainData make_moons(const DatasetSpec& spec, Rng& rng) {
  TrainData d{Matrix(2, spec.size), std::vector<int>(spec.size), 2};
  for (std::size_t n = 0; n < spec.size; ++n) {
    const int moon = n % 2 == 0 ? 0 : 1;
    const double th = std::numbers::pi * rng.uniform();
    double x = std::cos(th), y = std::sin(th);
    if (moon == 1) {
      x = 1.0 - x;
      y = 0.5 - y;
    }
    d.x(0, n) = x + spec.noise * rng.normal();
    d.x(1, n) = y + spec.noise * rng.normal();
    d.labels[n] = moon;
  }
  return d;
}

inline TrainData make_gauss_mixture(const DatasetSpec& spec, Rng& rng) {
  const std::size_t k = spec.components;
  TrainData d{Matrix(spec.dim, spec.size), std::vector<int>(spec.size), k > 1 ? k : 0};
  for (std::size_t n = 0; n < spec.size; ++n) {
    const std::size_t c = k > 1 ? rng.below(k) : 0;
    for (std::size_t i = 0; i < spec.dim; ++i) d.x(i, n) = rng.normal();
    if (k > 1) {
      const double ang = 2.0 * std::numbers::pi * static_cast<double>(c) / static_cast<double>(k);
      d.x(0, n) += spec.radius * std::cos(ang);
      d.x(1, n) += spec.radius * std::sin(ang);
      d.labels[n] = static_cast<int>(c);
    }
  }
  if (k <= 1) d.labels.clear();
  return d;
}

// One to three smooth Gaussian bumps on a p x p grid; label = bumps - 1.
inline TrainData make_toy_patches(const DatasetSpec& spec, Rng& rng) {
  const std::size_t p = spec.patch;
  const std::size_t dim = p * p;
  TrainData d{Matrix(dim, spec.size), std::vector<int>(spec.size), 3};
  const double span = static_cast<double>(p - 1);
  for (std::size_t n = 0; n < spec.size; ++n) {
    const std::size_t bumps = 1 + rng.below(3);
    for (std::size_t b = 0; b < bumps; ++b) {
      const double cx = span * rng.uniform();
      const double cy = span * rng.uniform();
      const double amp = rng.uniform(0.5, 1.5) * (rng.uniform() < 0.5 ? -1.0 : 1.0);
      const double w = rng.uniform(0.25, 0.6) * static_cast<double>(p);
      const double inv = 1.0 / (2.0 * w * w);
      for (std::size_t r = 0; r < p; ++r) {
        for (std::size_t c = 0; c < p; ++c) {
          const double dr = static_cast<double>(r) - cy;
          const double dc = static_cast<double>(c) - cx;
          d.x(r * p + c, n) += amp * std::exp(-(dr * dr + dc * dc) * inv);
        }
      }
    }
    for (std::size_t i = 0; i < dim; ++i) d.x(i, n) += 0.02 * rng.normal();
    d.labels[n] = static_cast<int>(bumps - 1);
  }
  if (spec.standardize) {
    for (std::size_t i = 0; i < dim; ++i) {
      double mean = 0.0;
      for (std::size_t n = 0; n < spec.size; ++n) mean += d.x(i, n);
      mean /= static_cast<double>(spec.size);
      double var = 0.0;
      for (std::size_t n = 0; n < spec.size; ++n) var += (d.x(i, n) - mean) * (d.x(i, n) - mean);
      var /= static_cast<double>(spec.size);
      const double sd = var > 0.0 ? std::sqrt(var) : 1.0;
      for (std::size_t n = 0; n < spec.size; ++n) d.x(i, n) = (d.x(i, n) - mean) / sd;
    }
  }
  return d;
}

}  // namespace detail

/// Samples as columns (D x N), with class labels where the dataset has them.
inline TrainData make_dataset(const DatasetSpec& spec, Rng& rng) {
  spec.validate();
  switch (spec.kind) {
    case DatasetKind::Moons2d: return detail::make_moons(spec, rng);
    case DatasetKind::GaussMixture: return detail::make_gauss_mixture(spec, rng);
    case DatasetKind::ToyPatches: return detail::make_toy_patches(spec, rng);
  }
  throw DomainError("make_dataset: invalid kind");
}

/// Columns [first, first + count) of a dataset.
inline TrainData slice_columns(const TrainData& d, std::size_t first, std::size_t count) {
  if (first + count > d.x.cols()) throw DimensionError("slice_columns: range out of bounds");
  TrainData out{d.x.col_block(first, count), {}, d.num_classes};
  if (!d.labels.empty()) {
    out.labels.assign(d.labels.begin() + static_cast<std::ptrdiff_t>(first),
                      d.labels.begin() + static_cast<std::ptrdiff_t>(first + count));
  }
  return out;
}

/// Exact W1 between two empirical 1-D distributions with uniform weights.
inline double wasserstein1_1d(std::vector<double> a, std::vector<double> b) {
  if (a.empty() || b.empty()) throw DomainError("wasserstein1_1d: empty sample");
  std::sort(a.begin(), a.end());
  std::sort(b.begin(), b.end());
  const double na = static_cast<double>(a.size());
  const double nb = static_cast<double>(b.size());
  // Integrate |F_a^{-1}(q) - F_b^{-1}(q)| over q in [0, 1] by merging the quantile breakpoints.
  std::size_t i = 0, j = 0;
  double q = 0.0, total = 0.0;
  while (i < a.size() && j < b.size()) {
    const double qa = static_cast<double>(i + 1) / na;
    const double qb = static_cast<double>(j + 1) / nb;
    const double next = std::min(qa, qb);
    total += (next - q) * std::abs(a[i] - b[j]);
    q = next;
    if (qa <= next) ++i;
    if (qb <= next) ++j;
  }
  return total;
}

/// Mean 1-D W1 over `projections` random unit directions drawn from `seed`.
/// Samples are columns of x and y.
inline double sliced_wasserstein(const Matrix& x, const Matrix& y, std::size_t projections,
                                 std::uint64_t seed) {
  detail::require_same_size(x.rows(), y.rows(), "sliced_wasserstein");
  if (projections == 0) throw DomainError("sliced_wasserstein: projections must be >= 1");
  const std::size_t dim = x.rows();
  Rng rng(seed);
  double total = 0.0;
  for (std::size_t p = 0; p < projections; ++p) {
    Vector dir = sample_gaussian(rng, dim);
    const double n = norm(dir);
    for (double& v : dir) v /= n;
    const Vector px = matvec_t(x, dir);
    const Vector py = matvec_t(y, dir);
    total += wasserstein1_1d(px, py);
  }
  return total / static_cast<double>(projections);
}

inline constexpr std::uint64_t kSlicedSeed = 0x51ced;

/// Writes square patches (columns of x, D = p^2) as a P6 grid; values in [-range, range]
/// map affinely to [0, 255] and are clamped.
inline void write_ppm_grid(const std::string& path, const Matrix& x, std::size_t grid_cols,
                           std::size_t scale = 8, double range = 3.0) {
  const std::size_t dim = x.rows();
  const auto p = static_cast<std::size_t>(std::llround(std::sqrt(static_cast<double>(dim))));
  if (p * p != dim) throw DimensionError("write_ppm_grid: D is not a square");
  if (grid_cols == 0 || scale == 0) throw DomainError("write_ppm_grid: grid_cols and scale must be >= 1");
  const std::size_t n = x.cols();
  const std::size_t grid_rows = (n + grid_cols - 1) / grid_cols;
  const std::size_t gap = 1;
  const std::size_t cell = p * scale + gap;
  const std::size_t width = grid_cols * cell + gap;
  const std::size_t height = std::max<std::size_t>(grid_rows, 1) * cell + gap;
  std::vector<unsigned char> img(width * height * 3, 32);
  for (std::size_t k = 0; k < n; ++k) {
    const std::size_t oy = (k / grid_cols) * cell + gap;
    const std::size_t ox = (k % grid_cols) * cell + gap;
    for (std::size_t r = 0; r < p * scale; ++r) {
      for (std::size_t c = 0; c < p * scale; ++c) {
        const double v = x((r / scale) * p + c / scale, k);
        const double u = std::clamp((v + range) / (2.0 * range), 0.0, 1.0);
        const auto byte = static_cast<unsigned char>(std::lround(255.0 * u));
        unsigned char* px = &img[((oy + r) * width + ox + c) * 3];
        px[0] = px[1] = px[2] = byte;
      }
    }
  }
  std::ofstream out(path, std::ios::binary);
  if (!out) throw IoError("cannot open '" + path + "' for writing");
  out << "P6\n" << width << ' ' << height << "\n255\n";
  out.write(reinterpret_cast<const char*>(img.data()), static_cast<std::streamsize>(img.size()));
  if (!out) throw IoError("failed writing '" + path + "'");
}

}  // namespace asymflow
