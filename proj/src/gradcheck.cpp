#include "tg/gradcheck.hpp"

#include <algorithm>
#include <cmath>
#include <numeric>

#include "tg/ops.hpp"
#include "tg/rng.hpp"

namespace tg {

namespace {

void check_finite(std::span<const double> xs, const char* what) {
  for (double v : xs) {
    if (!std::isfinite(v)) throw NumericalError(std::string("gradcheck: non-finite value in ") + what);
  }
}

std::vector<std::size_t> pick_indices(std::size_t n, std::size_t cap, Rng& rng) {
  std::vector<std::size_t> idx(n);
  std::iota(idx.begin(), idx.end(), 0);
  if (cap == 0 || n <= cap) return idx;
  for (std::size_t i = 0; i < cap; ++i) std::swap(idx[i], idx[i + rng.below(n - i)]);
  idx.resize(cap);
  std::sort(idx.begin(), idx.end());
  return idx;
}

}  // namespace

double gradcheck_tensors(const std::function<Tensor()>& forward, std::vector<Tensor> wrt,
                         std::uint64_t seed, const GradcheckOptions& options) {
  Rng rng(derive_seed(seed, "gradcheck-head"));
  for (Tensor& t : wrt) {
    t.set_requires_grad(true);
    t.clear_grad();
  }

  Tensor out = forward();
  check_finite(out.data(), "forward output");
  std::vector<double> head(static_cast<std::size_t>(out.numel()));
  for (double& w : head) w = rng.uniform(-1.0, 1.0);

  auto scalar = [&]() {
    NoGradGuard guard;
    Tensor y = forward();
    check_finite(y.data(), "forward output");
    double s = 0.0;
    for (std::size_t i = 0; i < head.size(); ++i) s += head[i] * y.data()[i];
    return s;
  };

  weighted_sum(out, head).backward();

  double worst = 0.0;
  Rng pick(derive_seed(seed, "gradcheck-pick"));
  for (Tensor& t : wrt) {
    std::vector<double> analytic(static_cast<std::size_t>(t.numel()), 0.0);
    if (t.has_grad()) std::copy(t.grad().begin(), t.grad().end(), analytic.begin());
    check_finite(analytic, "analytic gradient");
    auto data = t.mutable_data();
    for (std::size_t i : pick_indices(data.size(), options.max_elements_per_tensor, pick)) {
      const double saved = data[i];
      data[i] = saved + options.epsilon;
      const double up = scalar();
      data[i] = saved - options.epsilon;
      const double down = scalar();
      data[i] = saved;
      const double numeric = (up - down) / (2.0 * options.epsilon);
      const double denom =
          std::max({std::abs(analytic[i]), std::abs(numeric), options.relative_floor});
      worst = std::max(worst, std::abs(analytic[i] - numeric) / denom);
    }
    t.clear_grad();
  }
  return worst;
}

double gradcheck(const GradcheckFn& op, const std::vector<Shape>& input_shapes, std::uint64_t seed,
                 const GradcheckOptions& options) {
  Rng rng(derive_seed(seed, "gradcheck-inputs"));
  std::vector<Tensor> inputs;
  for (const Shape& s : input_shapes) {
    Tensor t(s);
    for (double& v : t.mutable_data()) {
      v = rng.uniform(-options.input_range, options.input_range);
      if (options.kink_margin > 0.0 && std::abs(v) < options.kink_margin) {
        v = v < 0.0 ? v - options.kink_margin : v + options.kink_margin;
      }
    }
    inputs.push_back(t);
  }
  return gradcheck_tensors([&]() { return op(inputs); }, inputs, seed, options);
}

}  // namespace tg
