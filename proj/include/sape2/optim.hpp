#pragma once

#include <cmath>
#include <cstdint>
#include <stdexcept>
#include <vector>

#include "sape2/tensor.hpp"

namespace sape2 {

struct AdamOptions {
  double lr = 1e-3;
  double beta1 = 0.9;
  double beta2 = 0.999;
  double eps = 1e-8;
  // decoupled (AdamW-style); 0 gives plain Adam
  double weight_decay = 0.0;
};

/// Adam with bias correction over a fixed parameter list.
template <typename T>
class Adam {
 public:
  Adam(std::vector<Tensor<T>> params, AdamOptions opts = {}) : params_(std::move(params)), opts_(opts) {
    for (const auto& p : params_) {
      first_.emplace_back(p.numel(), T{0});
      second_.emplace_back(p.numel(), T{0});
    }
  }

  void step() {
    for (const auto& p : params_) {
      if (!p.has_grad()) throw std::logic_error("adam_step: a parameter has no gradient");
    }
    ++step_count_;
    const double bc1 = 1.0 - std::pow(opts_.beta1, static_cast<double>(step_count_));
    const double bc2 = 1.0 - std::pow(opts_.beta2, static_cast<double>(step_count_));
    const auto b1 = static_cast<T>(opts_.beta1), b2 = static_cast<T>(opts_.beta2);
    const auto step_size = static_cast<T>(opts_.lr / bc1);
    const auto inv_sqrt_bc2 = static_cast<T>(1.0 / std::sqrt(bc2));
    const auto eps = static_cast<T>(opts_.eps);
    const auto decay = static_cast<T>(1.0 - opts_.lr * opts_.weight_decay);
    for (std::size_t k = 0; k < params_.size(); ++k) {
      auto& p = params_[k];
      auto w = p.data();
      auto g = p.grad();
      auto& m = first_[k];
      auto& v = second_[k];
      for (std::size_t i = 0; i < w.size(); ++i) {
        m[i] = b1 * m[i] + (T{1} - b1) * g[i];
        v[i] = b2 * v[i] + (T{1} - b2) * g[i] * g[i];
        if (opts_.weight_decay != 0.0) w[i] *= decay;
        w[i] -= step_size * m[i] / (std::sqrt(v[i]) * inv_sqrt_bc2 + eps);
      }
    }
  }

  void zero_grad() {
    for (auto& p : params_) p.zero_grad();
  }

  std::uint64_t step_count() const { return step_count_; }
  const AdamOptions& options() const { return opts_; }
  void set_lr(double lr) { opts_.lr = lr; }
  const std::vector<T>& first_moment(std::size_t k) const { return first_[k]; }
  const std::vector<T>& second_moment(std::size_t k) const { return second_[k]; }

 private:
  std::vector<Tensor<T>> params_;
  AdamOptions opts_;
  std::vector<std::vector<T>> first_;
  std::vector<std::vector<T>> second_;
  std::uint64_t step_count_ = 0;
};

}  // namespace sape2
