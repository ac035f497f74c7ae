#pragma once

// AdamW with global-norm clipping and a linear-warmup cosine schedule.

#include "ematrace/spen.hpp"

#include <vector>

namespace ematrace::spen {

struct AdamWConfig {
  double lr = 6e-4;  // peak
  double beta1 = 0.9;
  double beta2 = 0.95;
  double eps = 1e-8;
  double weight_decay = 0.1;  // decoupled; only tensors marked decayed
  double clip = 1.0;          // global L2 norm; <= 0 disables
  int warmup_steps = 50;
  double min_lr_ratio = 0.1;  // cosine floor as a fraction of the peak

  void validate() const;
};

// Learning rate for 0-based `step` of `total_steps`: linear ramp to the peak
// over warmup_steps, then cosine down to min_lr_ratio * peak at the last step.
double lr_at(const AdamWConfig& config, int step, int total_steps);

template <typename Scalar>
double global_norm(const SpenConfig& model, SpenParams<Scalar>& grads);

template <typename Scalar>
class AdamW {
 public:
  AdamW(const AdamWConfig& config, const SpenModel<Scalar>& model);

  // Clips `grads` in place, applies one update at `lr`, returns the
  // pre-clip global norm.
  double step(SpenModel<Scalar>& model, SpenParams<Scalar>& grads, double lr);
  long long steps_taken() const { return t_; }

 private:
  AdamWConfig config_;
  SpenParams<Scalar> m_, v_;
  long long t_ = 0;
};

}  // namespace ematrace::spen
