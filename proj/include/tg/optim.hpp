#pragma once

#include <string>
#include <vector>

#include "tg/tensor.hpp"

namespace tg {

struct Parameter {
  std::string name;  // dotted path, unique within a model
  Tensor tensor;
  std::vector<double> momentum;  // empty until the first optimiser step
};

struct OptimConfig {
  double learning_rate = 0.001;
  double momentum = 0.9;
  double weight_decay = 0.0005;
  double lr_decay_factor = 0.1;
  int lr_decay_every_epochs = 20;

  void validate() const;
};

/// learning_rate * lr_decay_factor^floor(epoch / lr_decay_every_epochs)
double effective_lr(const OptimConfig& config, int epoch);

/// SGD with momentum and L2 weight decay:
///   g = grad + wd*w;  v = mu*v + g;  w -= lr(epoch)*v
/// Gradients are cleared afterwards.
void sgd_step(std::vector<Parameter>& params, const OptimConfig& config, int epoch);

}  // namespace tg
