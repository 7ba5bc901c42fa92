#pragma once

#include <cmath>
#include <cstdint>
#include <filesystem>
#include <functional>
#include <random>
#include <string>
#include <vector>

#include "mlcaps/hierarchy.hpp"
#include "mlcaps/ops.hpp"
#include "mlcaps/tensor.hpp"

namespace mlcaps::testing {

// Hand-rolled generators for property tests.
class Gen {
 public:
  explicit Gen(std::uint64_t seed) : rng_(seed) {}

  double uniform(double lo, double hi) { return std::uniform_real_distribution<double>(lo, hi)(rng_); }
  std::size_t index(std::size_t lo, std::size_t hi) {  // inclusive
    return std::uniform_int_distribution<std::size_t>(lo, hi)(rng_);
  }
  double normal(double stddev = 1.0) { return std::normal_distribution<double>(0.0, stddev)(rng_); }

  template <typename T>
  Tensor<T> tensor(Shape shape, double lo = -1.0, double hi = 1.0, bool requires_grad = false) {
    std::vector<T> v(shape_size(shape));
    for (auto& x : v) x = T(uniform(lo, hi));
    return Tensor<T>(std::move(shape), std::move(v), requires_grad);
  }

  // Random valid tree: every parent gets at least one child.
  LabelTree tree(std::size_t depth, std::size_t max_width) {
    LabelTree t;
    std::size_t width = index(1, std::max<std::size_t>(1, max_width / 2));
    for (std::size_t n = 0; n < depth; ++n) {
      LabelLevel level{"level" + std::to_string(n), width, {}};
      t.levels.push_back(level);
      if (n == 0) {
        t.parent_of.emplace_back();
      } else {
        const std::size_t parents = t.levels[n - 1].classes;
        std::vector<std::size_t> map(width);
        for (std::size_t k = 0; k < width; ++k) map[k] = k < parents ? k : index(0, parents - 1);
        std::shuffle(map.begin(), map.end(), rng_);
        t.parent_of.push_back(map);
      }
      width = std::min(max_width, width + index(0, width + 1));
    }
    return t;
  }

  std::mt19937_64& rng() { return rng_; }

 private:
  std::mt19937_64 rng_;
};

struct GradCheck {
  double max_relative_error = 0.0;
  std::string worst;
};

// Compares analytic gradients of f (scalar) with central differences, one
// input at a time. Relative error is ||g_a - g_n|| / max(||g_a||, ||g_n||).
template <typename T>
GradCheck gradcheck(const std::function<Tensor<T>(const std::vector<Tensor<T>>&)>& f,
                    std::vector<Tensor<T>> inputs, double step) {
  for (auto& in : inputs) in.zero_grad();
  backward(f(inputs));
  GradCheck result;
  for (std::size_t p = 0; p < inputs.size(); ++p) {
    auto& in = inputs[p];
    if (!in.requires_grad()) continue;
    std::vector<double> analytic(in.size(), 0.0);
    if (in.has_grad())
      for (std::size_t i = 0; i < in.size(); ++i) analytic[i] = double(in.grad()[i]);
    double diff2 = 0.0, a2 = 0.0, n2 = 0.0;
    for (std::size_t i = 0; i < in.size(); ++i) {
      const T saved = in.data()[i];
      double fp, fm;
      {
        NoGradGuard guard;
        in.mutable_data()[i] = T(double(saved) + step);
        fp = double(f(inputs).item());
        in.mutable_data()[i] = T(double(saved) - step);
        fm = double(f(inputs).item());
      }
      in.mutable_data()[i] = saved;
      const double numeric = (fp - fm) / (2.0 * step);
      diff2 += (analytic[i] - numeric) * (analytic[i] - numeric);
      a2 += analytic[i] * analytic[i];
      n2 += numeric * numeric;
    }
    const double denom = std::max({std::sqrt(a2), std::sqrt(n2), 1e-12});
    const double rel = std::sqrt(diff2) / denom;
    if (rel > result.max_relative_error) {
      result.max_relative_error = rel;
      result.worst = "input " + std::to_string(p) + " " + shape_str(in.shape());
    }
  }
  return result;
}

template <typename T>
Tensor<double> widen(const Tensor<T>& t) {
  return Tensor<double>(t.shape(), std::vector<double>(t.data().begin(), t.data().end()));
}

// Analytic gradients of f against central differences of a double-precision
// twin `ref` whose inputs hold the same values. Float differences at any step
// are either round-off or kink dominated on a whole model.
template <typename T>
GradCheck gradcheck_widened(const std::function<Tensor<T>(const std::vector<Tensor<T>>&)>& f,
                            std::vector<Tensor<T>> inputs,
                            const std::function<Tensor<double>(const std::vector<Tensor<double>>&)>& ref,
                            std::vector<Tensor<double>> ref_inputs, double step = 1e-6) {
  for (auto& in : inputs) in.zero_grad();
  backward(f(inputs));
  GradCheck result;
  for (std::size_t p = 0; p < inputs.size(); ++p) {
    auto& in = inputs[p];
    auto& wide = ref_inputs[p];
    if (!in.requires_grad()) continue;
    double diff2 = 0.0, a2 = 0.0, n2 = 0.0;
    for (std::size_t i = 0; i < in.size(); ++i) {
      const double analytic = in.has_grad() ? double(in.grad()[i]) : 0.0;
      const double saved = wide.data()[i];
      double fp, fm;
      {
        NoGradGuard guard;
        wide.mutable_data()[i] = saved + step;
        fp = ref(ref_inputs).item();
        wide.mutable_data()[i] = saved - step;
        fm = ref(ref_inputs).item();
      }
      wide.mutable_data()[i] = saved;
      const double numeric = (fp - fm) / (2.0 * step);
      diff2 += (analytic - numeric) * (analytic - numeric);
      a2 += analytic * analytic;
      n2 += numeric * numeric;
    }
    const double rel = std::sqrt(diff2) / std::max({std::sqrt(a2), std::sqrt(n2), 1e-12});
    if (rel > result.max_relative_error) {
      result.max_relative_error = rel;
      result.worst = "input " + std::to_string(p) + " " + shape_str(in.shape());
    }
  }
  return result;
}

// Projects an arbitrary output onto a scalar with fixed random weights.
template <typename T>
Tensor<T> project(const Tensor<T>& out, std::uint64_t seed = 99) {
  Gen g(seed);
  return sum(mul(out, g.tensor<T>(out.shape(), -1.0, 1.0)));
}

inline std::filesystem::path temp_dir(const std::string& name) {
  auto p = std::filesystem::temp_directory_path() / ("mlcaps_test_" + name);
  std::filesystem::remove_all(p);
  std::filesystem::create_directories(p);
  return p;
}

template <typename T>
constexpr double grad_tolerance() {
  return std::is_same_v<T, double> ? 1e-4 : 1e-2;
}

template <typename T>
constexpr double grad_step() {
  return std::is_same_v<T, double> ? 1e-6 : 1e-2;
}

}  // namespace mlcaps::testing
