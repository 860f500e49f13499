#include "m2m/train/optim.hpp"

#include <cmath>
#include <limits>

#include "m2m/core/error.hpp"

namespace m2m::train {

AdamW::AdamW(nn::ParameterStore<float>& store, AdamWOptions opts) : store_(store), opts_(opts) {
  for (const auto& p : store_.entries()) {
    m_.emplace_back(p.tensor.numel(), 0.0f);
    v_.emplace_back(p.tensor.numel(), 0.0f);
  }
}

void AdamW::step() {
  ++t_;
  const double bc1 = 1.0 - std::pow(opts_.beta1, static_cast<double>(t_));
  const double bc2 = 1.0 - std::pow(opts_.beta2, static_cast<double>(t_));
  const auto b1 = static_cast<float>(opts_.beta1), b2 = static_cast<float>(opts_.beta2);
  const auto step_size = static_cast<float>(opts_.lr / bc1);
  const auto inv_bc2 = static_cast<float>(1.0 / bc2);
  const auto eps = static_cast<float>(opts_.eps);
  const auto& entries = store_.entries();
  for (std::size_t i = 0; i < entries.size(); ++i) {
    nn::Tensor<float> w = entries[i].tensor;
    if (!w.has_grad()) continue;
    auto value = w.data();
    auto grad = w.grad();
    auto& m = m_[i];
    auto& v = v_[i];
    const float decay = w.rank() >= 2 ? static_cast<float>(1.0 - opts_.lr * opts_.weight_decay) : 1.0f;
    for (std::size_t k = 0; k < value.size(); ++k) {
      const float g = grad[k];
      m[k] = b1 * m[k] + (1.0f - b1) * g;
      v[k] = b2 * v[k] + (1.0f - b2) * g * g;
      value[k] = value[k] * decay - step_size * m[k] / (std::sqrt(v[k] * inv_bc2) + eps);
    }
  }
}

double clip_grad_norm(nn::ParameterStore<float>& store, double max_norm) {
  double sq = 0.0;
  for (const auto& p : store.entries()) {
    nn::Tensor<float> t = p.tensor;
    if (!t.has_grad()) continue;
    for (float g : t.grad()) sq += static_cast<double>(g) * g;
  }
  const double norm = std::sqrt(sq);
  if (norm > max_norm && norm > 0.0) {
    const auto s = static_cast<float>(max_norm / norm);
    for (const auto& p : store.entries()) {
      nn::Tensor<float> t = p.tensor;
      if (!t.has_grad()) continue;
      for (float& g : t.grad()) g *= s;
    }
  }
  return norm;
}

PlateauSchedule::PlateauSchedule(double lr, double factor, int patience)
    : lr_(lr), factor_(factor), patience_(patience), best_(std::numeric_limits<double>::infinity()) {
  if (!(factor > 0.0 && factor < 1.0)) throw ConfigError("plateau factor must be in (0, 1)");
  if (patience < 1) throw ConfigError("plateau patience must be >= 1");
}

bool PlateauSchedule::observe(double valid_loss) {
  if (valid_loss < best_) {
    best_ = valid_loss;
    bad_epochs_ = 0;
    return false;
  }
  if (++bad_epochs_ >= patience_) {
    lr_ *= factor_;
    bad_epochs_ = 0;
    return true;
  }
  return false;
}

}  // namespace m2m::train
