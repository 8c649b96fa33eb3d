#include <doctest.h>

#include <sstream>

#include "oracles.hpp"
#include "tg/gradcheck.hpp"
#include "tg/gradcheck_suite.hpp"
#include "tg/ops.hpp"

using namespace tg;

TEST_CASE("every gradcheck case passes") {
  const auto results = run_gradcheck_suite("*", 42);
  REQUIRE(results.size() == gradcheck_cases().size());
  for (const auto& r : results) {
    INFO(r.name << " " << r.max_error << " " << r.error);
    CHECK(r.passed);
    CHECK(r.max_error < 1e-4);
  }
}

TEST_CASE("gradcheck passes on a second seed") {
  for (const auto& r : run_gradcheck_suite("*", 7)) {
    INFO(r.name);
    CHECK(r.passed);
  }
}

TEST_CASE("gradcheck catches a corrupted backward") {
  // Forward is x^2 but backward claims 2.1x.
  auto bad_square = [](const std::vector<Tensor>& in) {
    const Tensor x = in[0];
    std::vector<double> y(x.data().begin(), x.data().end());
    for (double& v : y) v *= v;
    return detail::make_result(x.shape(), std::move(y), {x}, [x](std::span<const double> g) {
      std::vector<double> d(g.size());
      for (std::size_t i = 0; i < g.size(); ++i) d[i] = 2.1 * x.data()[i] * g[i];
      x.impl()->accumulate_grad(std::move(d));
    });
  };
  CHECK(gradcheck(bad_square, {{3, 4}}, 1) > 1e-2);

  auto dropped_input = [](const std::vector<Tensor>& in) {
    return detail::make_result(in[0].shape(), std::vector<double>(in[0].data().begin(), in[0].data().end()),
                               {in[0]}, [](std::span<const double>) {});
  };
  CHECK(gradcheck(dropped_input, {{5}}, 2) > 0.5);

  CHECK(gradcheck([](const std::vector<Tensor>& in) { return scale(in[0], 3.0); }, {{3, 4}}, 3) < 1e-8);
}

TEST_CASE("suite filter and table") {
  std::ostringstream table;
  const auto some = run_gradcheck_suite("conv*", 1, &table);
  CHECK(some.size() >= 3);
  for (const auto& r : some) CHECK(glob_match("conv*", r.name));
  CHECK(table.str().find("passed") != std::string::npos);

  std::ostringstream empty;
  CHECK(run_gradcheck_suite("no-such-op", 1, &empty).empty());
  CHECK(empty.str().find("0 ops") != std::string::npos);
}

TEST_CASE("gradcheck agrees with an independent finite-difference oracle") {
  Tensor x = oracle::leaf({2, 3, 4, 4}, 5);
  const Tensor w = oracle::random({2, 3, 3, 3}, 6);
  const Tensor head = oracle::random({2, 2, 2, 2}, 7);
  auto f = [&] {
    NoGradGuard guard;
    return weighted_sum(conv2d(x, w, {}, {1, 1}, {0, 0}), head.data()).item();
  };
  const Tensor out = weighted_sum(conv2d(x, w, {}, {1, 1}, {0, 0}), head.data());
  out.backward();
  CHECK(oracle::max_abs_diff(x.grad(), oracle::numeric_grad(f, x)) < 1e-8);
}
