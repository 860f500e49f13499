#pragma once

#include <vector>

#include "m2m/nn/layers.hpp"

namespace m2m::train {

struct AdamWOptions {
  double lr = 1e-3;
  double beta1 = 0.9;
  double beta2 = 0.999;
  double eps = 1e-8;
  double weight_decay = 0.01;
};

/// Decoupled weight decay Adam. Decay applies to tensors of rank >= 2 only, so
/// biases, norm parameters and the relative position bias are left alone.
class AdamW {
 public:
  AdamW(nn::ParameterStore<float>& store, AdamWOptions opts);
  void step();
  double lr() const { return opts_.lr; }
  void set_lr(double lr) { opts_.lr = lr; }
  long long steps_taken() const { return t_; }

 private:
  nn::ParameterStore<float>& store_;
  AdamWOptions opts_;
  std::vector<std::vector<float>> m_, v_;
  long long t_ = 0;
};

/// Scales all gradients so their global L2 norm is at most `max_norm`.
/// Returns the norm before clipping.
double clip_grad_norm(nn::ParameterStore<float>& store, double max_norm);

/// Multiplies the learning rate by `factor` once validation loss has failed
/// to improve for `patience` consecutive epochs, then starts counting again.
class PlateauSchedule {
 public:
  PlateauSchedule(double lr, double factor, int patience);
  /// Returns true when this observation triggered a reduction.
  bool observe(double valid_loss);
  double lr() const { return lr_; }
  double best() const { return best_; }

 private:
  double lr_;
  double factor_;
  int patience_;
  int bad_epochs_ = 0;
  double best_;
};

}  // namespace m2m::train
