#pragma once

#include <span>
#include <vector>

#include "clm/tensor.hpp"

namespace clm {

struct AdamWConfig {
  double beta1 = 0.9;
  double beta2 = 0.98;
  double eps = 1e-8;
  double weight_decay = 0.01;
};

// AdamW with decoupled weight decay. `decay_mask[i]` selects which tensors are
// decayed; a tensor with zero gradient still shrinks by (1 - lr * wd).
class AdamW {
 public:
  AdamW(AdamWConfig config, std::vector<bool> decay_mask);

  void step(std::span<Tensor<float>> params, std::span<const Tensor<float>> grads, double lr);
  long steps() const { return t_; }

 private:
  AdamWConfig config_;
  std::vector<bool> decay_;
  std::vector<std::vector<double>> m_, v_;
  long t_ = 0;
};

}  // namespace clm
