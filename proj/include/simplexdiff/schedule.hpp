#pragma once

#include <cmath>
#include <numbers>
#include <string>
#include <vector>

#include "simplexdiff/error.hpp"

namespace simplexdiff {

/// Cosine noise schedule. All diffusion coefficients are derived from here.
///
/// alpha_bar(t) = f(t) / f(0) with f(t) = cos(((t/T + s) / (1 + s)) * pi/2)^2.
/// The per-step retention alpha(t) = alpha_bar(t) / alpha_bar(t-1) is clipped
/// from below at 1 - max_beta; where the clip is active alpha_bar(t) is
/// re-derived as alpha_bar(t-1) * alpha(t) so the telescoping product holds.
/// With the default offset this only touches t = T.
class NoiseSchedule {
 public:
  NoiseSchedule(int train_steps = 5000, double offset = 0.008, double simplex_scale = 5.0,
                double max_beta = 0.999)
      : steps_(train_steps), offset_(offset), k_(simplex_scale), max_beta_(max_beta) {
    if (steps_ < 1) fail(ErrorKind::range, "schedule needs at least one training step");
    if (!(offset_ >= 0.0)) fail(ErrorKind::range, "schedule offset must be >= 0");
    if (!(k_ > 0.0)) fail(ErrorKind::range, "simplex scale must be > 0");
    if (!(max_beta_ > 0.0 && max_beta_ < 1.0)) fail(ErrorKind::range, "max_beta must be in (0,1)");
    f0_ = raw_f(0.0);
  }

  int train_steps() const { return steps_; }
  double offset() const { return offset_; }
  double simplex_scale() const { return k_; }
  double max_beta() const { return max_beta_; }

  double alpha_bar(int t) const {
    check_step(t, 0, "alpha_bar");
    if (t == 0) return 1.0;
    const double raw = raw_f(t) / f0_;
    const double prev_raw = raw_f(t - 1) / f0_;
    if (raw >= prev_raw * (1.0 - max_beta_)) return raw;
    return alpha_bar(t - 1) * (1.0 - max_beta_);
  }

  double alpha(int t) const {
    check_step(t, 1, "alpha");
    return alpha_bar(t) / alpha_bar(t - 1);
  }

  /// sqrt((alpha_t - alpha_bar_t) / (1 - alpha_bar_t)): the factor by which the
  /// exact DDPM-style reverse step's noise coefficient differs from
  /// sqrt(1 - alpha_bar_{t-1}).
  double approx_coefficient(int t) const {
    check_step(t, 1, "approx_coefficient");
    const double ab = alpha_bar(t);
    const double a = alpha(t);
    return std::sqrt((a - ab) / (1.0 - ab));
  }

  double scaled_time(int t) const {
    check_step(t, 0, "scaled_time");
    return static_cast<double>(t) / steps_;
  }

 private:
  double raw_f(double t) const {
    const double c = std::cos(((t / steps_ + offset_) / (1.0 + offset_)) * (std::numbers::pi / 2.0));
    return c * c;
  }

  void check_step(int t, int lo, const char* what) const {
    if (t < lo || t > steps_) {
      fail(ErrorKind::range, std::string(what) + ": step " + std::to_string(t) + " outside [" +
                                 std::to_string(lo) + "," + std::to_string(steps_) + "]");
    }
  }

  int steps_;
  double offset_;
  double k_;
  double max_beta_;
  double f0_;
};

/// Inference step indices: strictly decreasing, evenly spaced in t/T, starting
/// at T. grid(n, T)[i] = floor(T * (n - i) / n).
inline std::vector<int> timestep_grid(int num_inference_steps, int train_steps) {
  if (num_inference_steps < 1 || num_inference_steps > train_steps) {
    fail(ErrorKind::range, "timestep_grid: " + std::to_string(num_inference_steps) +
                               " steps outside [1," + std::to_string(train_steps) + "]");
  }
  std::vector<int> grid;
  grid.reserve(static_cast<std::size_t>(num_inference_steps));
  const long long n = num_inference_steps, T = train_steps;
  for (long long i = 0; i < n; ++i) grid.push_back(static_cast<int>(T * (n - i) / n));
  return grid;
}

}  // namespace simplexdiff
