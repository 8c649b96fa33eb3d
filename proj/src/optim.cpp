#include "tg/optim.hpp"

#include <cmath>

namespace tg {

void OptimConfig::validate() const {
  if (!(learning_rate > 0.0)) throw ShapeError("optim: learning_rate must be positive");
  if (!(momentum >= 0.0 && momentum < 1.0)) throw ShapeError("optim: momentum must be in [0,1)");
  if (!(weight_decay >= 0.0)) throw ShapeError("optim: weight_decay must be non-negative");
  if (!(lr_decay_factor > 0.0 && lr_decay_factor <= 1.0)) {
    throw ShapeError("optim: lr_decay_factor must be in (0,1]");
  }
  if (lr_decay_every_epochs < 1) throw ShapeError("optim: lr_decay_every must be positive");
}

double effective_lr(const OptimConfig& config, int epoch) {
  const int k = epoch / config.lr_decay_every_epochs;
  return config.learning_rate * std::pow(config.lr_decay_factor, k);
}

void sgd_step(std::vector<Parameter>& params, const OptimConfig& config, int epoch) {
  for (const Parameter& p : params) {
    if (!p.tensor.has_grad()) throw ShapeError("sgd_step: parameter '" + p.name + "' has no gradient");
  }
  const double lr = effective_lr(config, epoch);
  for (Parameter& p : params) {
    auto w = p.tensor.mutable_data();
    auto g = p.tensor.grad();
    if (p.momentum.empty()) p.momentum.assign(w.size(), 0.0);
    for (std::size_t i = 0; i < w.size(); ++i) {
      const double step = g[i] + config.weight_decay * w[i];
      p.momentum[i] = config.momentum * p.momentum[i] + step;
      w[i] -= lr * p.momentum[i];
    }
    p.tensor.clear_grad();
  }
}

}  // namespace tg
