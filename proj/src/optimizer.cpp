#include "clm/optimizer.hpp"

#include <cmath>
#include <stdexcept>

namespace clm {

AdamW::AdamW(AdamWConfig config, std::vector<bool> decay_mask) : config_(config), decay_(std::move(decay_mask)) {}

void AdamW::step(std::span<Tensor<float>> params, std::span<const Tensor<float>> grads, double lr) {
  if (params.size() != grads.size() || params.size() != decay_.size()) {
    throw std::invalid_argument("AdamW: parameter, gradient and decay-mask counts differ");
  }
  if (m_.empty()) {
    for (const auto& p : params) {
      m_.emplace_back(p.numel(), 0.0);
      v_.emplace_back(p.numel(), 0.0);
    }
  }
  ++t_;
  const double b1 = config_.beta1, b2 = config_.beta2;
  const double c1 = 1.0 - std::pow(b1, static_cast<double>(t_));
  const double c2 = 1.0 - std::pow(b2, static_cast<double>(t_));
  for (std::size_t i = 0; i < params.size(); ++i) {
    auto& p = params[i].data;
    const auto& g = grads[i].data;
    if (g.size() != p.size()) throw std::invalid_argument("AdamW: gradient shape mismatch");
    auto& m = m_[i];
    auto& v = v_[i];
    const double shrink = decay_[i] ? 1.0 - lr * config_.weight_decay : 1.0;
    for (std::size_t j = 0; j < p.size(); ++j) {
      m[j] = b1 * m[j] + (1.0 - b1) * g[j];
      v[j] = b2 * v[j] + (1.0 - b2) * static_cast<double>(g[j]) * g[j];
      const double update = (m[j] / c1) / (std::sqrt(v[j] / c2) + config_.eps);
      p[j] = static_cast<float>(p[j] * shrink - lr * update);
    }
  }
}

}  // namespace clm
