#pragma once

#include <cmath>
#include <cstdint>
#include <span>
#include <string>
#include <vector>

#include "n2p/autodiff.hpp"
#include "n2p/error.hpp"

namespace n2p {

struct AdamConfig {
  double beta1 = 0.9;
  double beta2 = 0.999;
  double eps = 1e-15;
};

/// First/second moments for one parameter group.
template <class T>
struct AdamState {
  std::vector<Matrix<T>> m;
  std::vector<Matrix<T>> v;
  std::int64_t step = 0;

  AdamState() = default;
  explicit AdamState(std::span<const Parameter<T>> params) {
    for (const auto& p : params) {
      m.push_back(Matrix<T>::Zero(p.value.rows(), p.value.cols()));
      v.push_back(Matrix<T>::Zero(p.value.rows(), p.value.cols()));
    }
  }
};

/// One bias-corrected Adam update; gradients must be finite.
template <class T>
void adam_step(std::span<Parameter<T>> params, AdamState<T>& state, double lr,
               const AdamConfig& cfg = {}) {
  if (state.m.size() != params.size())
    throw ShapeError("adam_step: state holds " + std::to_string(state.m.size()) +
                     " moments for " + std::to_string(params.size()) + " parameters");
  for (const auto& p : params)
    if (!p.grad.allFinite()) throw NumericError("adam_step: non-finite gradient in parameter '" + p.name + "'");

  ++state.step;
  const double bc1 = 1.0 - std::pow(cfg.beta1, static_cast<double>(state.step));
  const double bc2 = 1.0 - std::pow(cfg.beta2, static_cast<double>(state.step));
  const T b1 = T(cfg.beta1), b2 = T(cfg.beta2);
  const T step_size = T(lr / bc1);
  const T inv_sqrt_bc2 = T(1.0 / std::sqrt(bc2));
  const T eps = T(cfg.eps);
  for (std::size_t i = 0; i < params.size(); ++i) {
    auto& p = params[i];
    if (state.m[i].rows() != p.value.rows() || state.m[i].cols() != p.value.cols())
      throw ShapeError("adam_step: moment shape mismatch for '" + p.name + "'");
    state.m[i] = b1 * state.m[i] + (T(1) - b1) * p.grad;
    state.v[i] = b2 * state.v[i] + (T(1) - b2) * p.grad.cwiseAbs2();
    p.value.array() -= step_size * state.m[i].array() / (state.v[i].array().sqrt() * inv_sqrt_bc2 + eps);
  }
}

/// Rescales the group so its global L2 norm is at most max_norm, then clamps
/// each entry to [-max_value, max_value]. Returns the pre-clip global norm.
template <class T>
double clip_gradients(std::span<Parameter<T>> params, double max_norm, double max_value) {
  double sq = 0.0;
  for (const auto& p : params) sq += p.grad.template cast<double>().squaredNorm();
  const double norm = std::sqrt(sq);
  if (norm > max_norm && norm > 0.0) {
    const T s = T(max_norm / norm);
    for (auto& p : params) p.grad *= s;
  }
  const T cap = T(max_value);
  for (auto& p : params) p.grad = p.grad.cwiseMax(-cap).cwiseMin(cap);
  return norm;
}

/// Linear warm-up to base_lr, then exponential interpolation down to final_lr
/// at total_steps; held at final_lr afterwards.
struct LrSchedule {
  std::int64_t warmup_steps = 100;
  double base_lr = 5e-3;
  double final_lr = 5e-4;
  std::int64_t total_steps = 2000;

  double at(std::int64_t step) const {
    if (step < 0) throw ValueError("lr_at: negative step");
    if (warmup_steps > 0 && step < warmup_steps)
      return base_lr * static_cast<double>(step) / static_cast<double>(warmup_steps);
    if (step >= total_steps) return final_lr;
    const double span = static_cast<double>(total_steps - warmup_steps);
    if (span <= 0.0) return final_lr;
    const double frac = static_cast<double>(step - warmup_steps) / span;
    return base_lr * std::pow(final_lr / base_lr, frac);
  }
};

inline double lr_at(std::int64_t step, const LrSchedule& schedule) { return schedule.at(step); }

}  // namespace n2p
