#include "tg/ops.hpp"

#include <Eigen/Core>
#include <algorithm>
#include <cmath>
#include <limits>
#include <string>

namespace tg {

namespace {

using RowMat = Eigen::Matrix<double, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>;
using MapMat = Eigen::Map<RowMat>;
using ConstMapMat = Eigen::Map<const RowMat>;
using ArrayMap = Eigen::Map<Eigen::ArrayXd>;
using ConstArrayMap = Eigen::Map<const Eigen::ArrayXd>;

using detail::make_result;
using detail::wants_grad;

// Sum of f(0..n-1) over eight fixed lanes. Unlike Eigen's redux on a mapped
// array, the order does not depend on the buffer's address, so results are
// reproducible from run to run.
template <typename F>
double lane_sum(Index n, F f) {
  double acc[8] = {0, 0, 0, 0, 0, 0, 0, 0};
  Index i = 0;
  for (; i + 8 <= n; i += 8) {
    for (int j = 0; j < 8; ++j) acc[j] += f(i + j);
  }
  for (int j = 0; i < n; ++i, ++j) acc[j] += f(i);
  return ((acc[0] + acc[1]) + (acc[2] + acc[3])) + ((acc[4] + acc[5]) + (acc[6] + acc[7]));
}

void require_rank(const Tensor& t, int rank, const char* what) {
  if (!t.defined()) throw ShapeError(std::string(what) + ": tensor is undefined");
  if (t.ndim() != rank) {
    throw ShapeError(std::string(what) + ": expected rank " + std::to_string(rank) + ", got " +
                     shape_str(t.shape()));
  }
}

struct ConvGeometry {
  Index cin, t, h, w;
  Index cout, kt, kh, kw;
  Triple stride, pad;
  Index to, ho, wo;

  Index cols_rows() const { return cin * kt * kh * kw; }
  Index cols_cols() const { return to * ho * wo; }
  bool pointwise() const {
    return kt == 1 && kh == 1 && kw == 1 && stride == Triple{1, 1, 1} && pad == Triple{0, 0, 0};
  }
};

Index out_extent(Index in, Index k, Index s, Index p, const char* axis) {
  if (s < 1) throw ShapeError(std::string("stride must be >= 1 on axis ") + axis);
  if (p < 0) throw ShapeError(std::string("padding must be >= 0 on axis ") + axis);
  if (in + 2 * p < k) {
    throw ShapeError(std::string("kernel extent ") + std::to_string(k) + " exceeds padded input " +
                     std::to_string(in + 2 * p) + " on axis " + axis);
  }
  return (in + 2 * p - k) / s + 1;
}

// Output columns ow in [lo, hi) read an in-bounds input column for kernel offset c.
std::pair<Index, Index> valid_range(const ConvGeometry& g, Index c) {
  const Index s = g.stride[2], off = c - g.pad[2];
  const Index lo = std::clamp<Index>(off >= 0 ? 0 : (-off + s - 1) / s, 0, g.wo);
  const Index hi = std::clamp<Index>(g.w - off <= 0 ? 0 : (g.w - off - 1) / s + 1, lo, g.wo);
  return {lo, hi};
}

// cols[(ci,a,b,c), (o_t,o_h,o_w)] = x[ci, o_t*st-pt+a, o_h*sh-ph+b, o_w*sw-pw+c], zero outside.
void im2col(const double* x, const ConvGeometry& g, double* cols) {
  const Index plane = g.h * g.w, vol = g.t * plane, ncols = g.cols_cols();
  Index row = 0;
  for (Index ci = 0; ci < g.cin; ++ci) {
    const double* xc = x + ci * vol;
    for (Index a = 0; a < g.kt; ++a) {
      for (Index b = 0; b < g.kh; ++b) {
        for (Index c = 0; c < g.kw; ++c, ++row) {
          double* dst = cols + row * ncols;
          for (Index ot = 0; ot < g.to; ++ot) {
            const Index it = ot * g.stride[0] - g.pad[0] + a;
            if (it < 0 || it >= g.t) {
              std::fill(dst, dst + g.ho * g.wo, 0.0);
              dst += g.ho * g.wo;
              continue;
            }
            for (Index oh = 0; oh < g.ho; ++oh) {
              const Index ih = oh * g.stride[1] - g.pad[1] + b;
              if (ih < 0 || ih >= g.h) {
                std::fill(dst, dst + g.wo, 0.0);
                dst += g.wo;
                continue;
              }
              const double* src = xc + it * plane + ih * g.w;
              const auto [lo, hi] = valid_range(g, c);
              std::fill(dst, dst + lo, 0.0);
              if (g.stride[2] == 1) {
                std::copy(src + lo - g.pad[2] + c, src + hi - g.pad[2] + c, dst + lo);
              } else {
                for (Index ow = lo; ow < hi; ++ow) dst[ow] = src[ow * g.stride[2] - g.pad[2] + c];
              }
              std::fill(dst + hi, dst + g.wo, 0.0);
              dst += g.wo;
            }
          }
        }
      }
    }
  }
}

void col2im_add(const double* cols, const ConvGeometry& g, double* dx) {
  const Index plane = g.h * g.w, vol = g.t * plane, ncols = g.cols_cols();
  Index row = 0;
  for (Index ci = 0; ci < g.cin; ++ci) {
    double* dc = dx + ci * vol;
    for (Index a = 0; a < g.kt; ++a) {
      for (Index b = 0; b < g.kh; ++b) {
        for (Index c = 0; c < g.kw; ++c, ++row) {
          const double* src = cols + row * ncols;
          for (Index ot = 0; ot < g.to; ++ot) {
            const Index it = ot * g.stride[0] - g.pad[0] + a;
            if (it < 0 || it >= g.t) {
              src += g.ho * g.wo;
              continue;
            }
            for (Index oh = 0; oh < g.ho; ++oh) {
              const Index ih = oh * g.stride[1] - g.pad[1] + b;
              if (ih < 0 || ih >= g.h) {
                src += g.wo;
                continue;
              }
              double* dst = dc + it * plane + ih * g.w;
              const auto [lo, hi] = valid_range(g, c);
              for (Index ow = lo; ow < hi; ++ow) dst[ow * g.stride[2] - g.pad[2] + c] += src[ow];
              src += g.wo;
            }
          }
        }
      }
    }
  }
}

}  // namespace

Tensor conv3d(const Tensor& input, const Tensor& weight, const Tensor& bias, Triple stride,
              Triple padding) {
  require_rank(input, 5, "conv3d input");
  require_rank(weight, 5, "conv3d weight");
  const Shape& xs = input.shape();
  const Shape& ws = weight.shape();
  if (xs[1] != ws[1]) {
    throw ShapeError("conv3d: input has " + std::to_string(xs[1]) +
                     " channels but weight expects Cin=" + std::to_string(ws[1]));
  }
  ConvGeometry g{xs[1], xs[2], xs[3], xs[4], ws[0], ws[2], ws[3], ws[4], stride, padding, 0, 0, 0};
  g.to = out_extent(g.t, g.kt, stride[0], padding[0], "T");
  g.ho = out_extent(g.h, g.kh, stride[1], padding[1], "H");
  g.wo = out_extent(g.w, g.kw, stride[2], padding[2], "W");
  if (bias.defined() && (bias.ndim() != 1 || bias.dim(0) != g.cout)) {
    throw ShapeError("conv3d: bias shape " + shape_str(bias.shape()) + " does not match Cout=" +
                     std::to_string(g.cout));
  }

  const Index n = xs[0];
  const Index K = g.cols_rows(), P = g.cols_cols(), in_sample = g.cin * g.t * g.h * g.w;
  std::vector<double> out(static_cast<std::size_t>(n * g.cout * P));
  const double* x = input.data().data();
  ConstMapMat wm(weight.data().data(), g.cout, K);
  std::vector<double> cols(g.pointwise() ? 0 : static_cast<std::size_t>(K * P));
  for (Index s = 0; s < n; ++s) {
    const double* cs = x + s * in_sample;
    if (!g.pointwise()) {
      im2col(cs, g, cols.data());
      cs = cols.data();
    }
    MapMat om(out.data() + s * g.cout * P, g.cout, P);
    om.noalias() = wm * ConstMapMat(cs, K, P);
    if (bias.defined()) {
      for (Index co = 0; co < g.cout; ++co) om.row(co).array() += bias.data()[co];
    }
  }

  Shape out_shape{n, g.cout, g.to, g.ho, g.wo};
  return make_result(out_shape, std::move(out), {input, weight, bias},
                     [input, weight, bias, g, n](std::span<const double> gy) {
                       const Index K = g.cols_rows(), P = g.cols_cols();
                       const Index in_sample = g.cin * g.t * g.h * g.w;
                       const bool need_x = wants_grad(input), need_w = wants_grad(weight),
                                  need_b = wants_grad(bias);
                       std::vector<double> dx(need_x ? static_cast<std::size_t>(n * in_sample) : 0);
                       RowMat dw = RowMat::Zero(need_w ? g.cout : 0, need_w ? K : 0);
                       std::vector<double> db(need_b ? static_cast<std::size_t>(g.cout) : 0, 0.0);
                       // An explicit row-major transpose is several times faster than a transposed view here.
                       const RowMat wt = need_x ? RowMat(ConstMapMat(weight.data().data(), g.cout, K).transpose())
                                                : RowMat();
                       std::vector<double> cols(g.pointwise() ? 0 : static_cast<std::size_t>(K * P));
                       const double* x = input.data().data();
                       for (Index s = 0; s < n; ++s) {
                         ConstMapMat gm(gy.data() + s * g.cout * P, g.cout, P);
                         if (need_b) {
                           for (Index co = 0; co < g.cout; ++co) {
                             const double* r = gy.data() + (s * g.cout + co) * P;
                             db[co] += lane_sum(P, [r](Index i) { return r[i]; });
                           }
                         }
                         if (need_w) {
                           const double* cs = x + s * in_sample;
                           if (!g.pointwise()) {
                             im2col(cs, g, cols.data());
                             cs = cols.data();
                           }
                           dw.noalias() += gm * ConstMapMat(cs, K, P).transpose();
                         }
                         if (need_x) {
                           if (g.pointwise()) {
                             MapMat(dx.data() + s * in_sample, K, P).noalias() = wt * gm;
                           } else {
                             MapMat(cols.data(), K, P).noalias() = wt * gm;
                             col2im_add(cols.data(), g, dx.data() + s * in_sample);
                           }
                         }
                       }
                       if (need_x) input.impl()->accumulate_grad(std::move(dx));
                       if (need_w) {
                         weight.impl()->accumulate_grad(std::span<const double>(dw.data(), dw.size()));
                       }
                       if (need_b) bias.impl()->accumulate_grad(std::move(db));
                     });
}

Tensor conv2d(const Tensor& input, const Tensor& weight, const Tensor& bias, Pair stride,
              Pair padding) {
  require_rank(input, 4, "conv2d input");
  require_rank(weight, 4, "conv2d weight");
  const Shape& xs = input.shape();
  const Shape& ws = weight.shape();
  if (xs[1] != ws[1]) {
    throw ShapeError("conv2d: input has " + std::to_string(xs[1]) +
                     " channels but weight expects Cin=" + std::to_string(ws[1]));
  }
  Tensor x5 = input.reshape({xs[0], xs[1], 1, xs[2], xs[3]});
  Tensor w5 = weight.reshape({ws[0], ws[1], 1, ws[2], ws[3]});
  Tensor y = conv3d(x5, w5, bias, {1, stride[0], stride[1]}, {0, padding[0], padding[1]});
  const Shape& ys = y.shape();
  return y.reshape({ys[0], ys[1], ys[3], ys[4]});
}

Tensor maxpool3d(const Tensor& input, Triple kernel, Triple stride) {
  require_rank(input, 5, "maxpool3d input");
  const Shape& xs = input.shape();
  for (Index k : kernel) {
    if (k < 1) throw ShapeError("maxpool3d: kernel extents must be >= 1");
  }
  const Index n = xs[0], c = xs[1], t = xs[2], h = xs[3], w = xs[4];
  const Index to = out_extent(t, kernel[0], stride[0], 0, "T");
  const Index ho = out_extent(h, kernel[1], stride[1], 0, "H");
  const Index wo = out_extent(w, kernel[2], stride[2], 0, "W");
  const Index out_n = n * c * to * ho * wo;
  std::vector<double> out(static_cast<std::size_t>(out_n));
  auto argmax = std::make_shared<std::vector<Index>>(static_cast<std::size_t>(out_n));
  const double* x = input.data().data();
  // window offsets in row-major order, so strict '>' keeps the first maximum
  std::vector<Index> window;
  for (Index a = 0; a < kernel[0]; ++a) {
    for (Index b = 0; b < kernel[1]; ++b) {
      for (Index cc = 0; cc < kernel[2]; ++cc) window.push_back((a * h + b) * w + cc);
    }
  }
  const Index vol = t * h * w;
  Index o = 0;
  for (Index nc = 0; nc < n * c; ++nc) {
    for (Index ot = 0; ot < to; ++ot) {
      for (Index oh = 0; oh < ho; ++oh) {
        const Index row = nc * vol + (ot * stride[0] * h + oh * stride[1]) * w;
        for (Index ow = 0; ow < wo; ++ow, ++o) {
          const Index origin = row + ow * stride[2];
          const double* p = x + origin;
          double best = p[0];
          Index best_at = 0;
          for (std::size_t k = 1; k < window.size(); ++k) {
            const double v = p[window[k]];
            const bool better = v > best;
            best_at = better ? window[k] : best_at;
            best = better ? v : best;
          }
          out[o] = best;
          (*argmax)[o] = origin + best_at;
        }
      }
    }
  }
  return make_result({n, c, to, ho, wo}, std::move(out), {input},
                     [input, argmax](std::span<const double> gy) {
                       std::vector<double> dx(static_cast<std::size_t>(input.numel()), 0.0);
                       for (std::size_t i = 0; i < gy.size(); ++i) dx[(*argmax)[i]] += gy[i];
                       input.impl()->accumulate_grad(std::move(dx));
                     });
}

Tensor elu(const Tensor& input, double alpha) {
  auto xs = input.data();
  const Index n = static_cast<Index>(xs.size());
  std::vector<double> out(xs.size());
  ConstArrayMap x(xs.data(), n);
  ArrayMap y(out.data(), n);
  // branch-free; exp(min(x,0)) vectorizes where a per-element expm1 call does not.
  // Evaluated into an aligned temporary: on an unaligned map Eigen sends a
  // leading, address-dependent run through scalar exp, which rounds differently.
  const Eigen::ArrayXd e = x.min(0.0).exp();
  y = x.max(0.0) + alpha * (e - 1.0);
  std::shared_ptr<std::vector<double>> deriv;
  if (wants_grad(input) && grad_enabled()) {
    // derivative kept from the forward pass: 1 above zero, out + alpha below
    deriv = std::make_shared<std::vector<double>>(xs.size());
    double* d = deriv->data();
    ArrayMap(d, n) = y + alpha;
    // kept as two loops so both vectorize
    for (Index i = 0; i < n; ++i) d[i] = xs[i] > 0.0 ? 1.0 : d[i];
  }
  return make_result(input.shape(), std::move(out), {input}, [input, deriv](std::span<const double> gy) {
    const Index n = static_cast<Index>(gy.size());
    std::vector<double> dx(gy.size());
    ArrayMap(dx.data(), n) = ConstArrayMap(gy.data(), n) * ConstArrayMap(deriv->data(), n);
    input.impl()->accumulate_grad(std::move(dx));
  });
}

Tensor relu(const Tensor& input) {
  auto xs = input.data();
  std::vector<double> out(xs.size());
  for (std::size_t i = 0; i < xs.size(); ++i) out[i] = xs[i] > 0.0 ? xs[i] : 0.0;
  return make_result(input.shape(), std::move(out), {input}, [input](std::span<const double> gy) {
    auto xs = input.data();
    std::vector<double> dx(xs.size());
    for (std::size_t i = 0; i < xs.size(); ++i) dx[i] = xs[i] > 0.0 ? gy[i] : 0.0;
    input.impl()->accumulate_grad(std::move(dx));
  });
}

Tensor activate(const Tensor& input, Activation act) {
  switch (act) {
    case Activation::elu: return elu(input);
    case Activation::relu: return relu(input);
    case Activation::identity: return input;
  }
  return input;
}

Tensor add(const Tensor& a, const Tensor& b) {
  if (a.shape() != b.shape()) {
    throw ShapeError("add: shape mismatch " + shape_str(a.shape()) + " vs " + shape_str(b.shape()));
  }
  auto xa = a.data(), xb = b.data();
  std::vector<double> out(xa.size());
  for (std::size_t i = 0; i < xa.size(); ++i) out[i] = xa[i] + xb[i];
  return make_result(a.shape(), std::move(out), {a, b}, [a, b](std::span<const double> gy) {
    if (wants_grad(a)) a.impl()->accumulate_grad(gy);
    if (wants_grad(b)) b.impl()->accumulate_grad(gy);
  });
}

Tensor scale(const Tensor& a, double s) {
  auto xa = a.data();
  std::vector<double> out(xa.size());
  for (std::size_t i = 0; i < xa.size(); ++i) out[i] = s * xa[i];
  return make_result(a.shape(), std::move(out), {a}, [a, s](std::span<const double> gy) {
    std::vector<double> dx(gy.size());
    for (std::size_t i = 0; i < gy.size(); ++i) dx[i] = s * gy[i];
    a.impl()->accumulate_grad(std::move(dx));
  });
}

BatchNormBuffers BatchNormBuffers::create(Index channels) {
  return {Tensor(Shape{channels}, 0.0), Tensor(Shape{channels}, 1.0), Tensor(Shape{1}, 0.0)};
}

Tensor batchnorm(const Tensor& input, const Tensor& gamma, const Tensor& beta,
                 BatchNormBuffers& buffers, bool training, double epsilon, double momentum) {
  if (!input.defined() || input.ndim() < 2) throw ShapeError("batchnorm: input needs rank >= 2");
  const Shape& xs = input.shape();
  const Index n = xs[0], c = xs[1];
  const Index inner = input.numel() / (n * c);
  const Index m = n * inner;
  if (gamma.numel() != c || beta.numel() != c || buffers.running_mean.numel() != c) {
    throw ShapeError("batchnorm: parameter length does not match channel count " +
                     std::to_string(c));
  }
  auto x = input.data();
  std::vector<double> mean(static_cast<std::size_t>(c)), invstd(static_cast<std::size_t>(c));

  if (training) {
    if (m < 2) throw ShapeError("batchnorm: training needs at least 2 values per channel");
    auto rm = buffers.running_mean.mutable_data();
    auto rv = buffers.running_var.mutable_data();
    for (Index ch = 0; ch < c; ++ch) {
      double s = 0.0;
      for (Index i = 0; i < n; ++i) {
        const double* xi = x.data() + (i * c + ch) * inner;
        s += lane_sum(inner, [xi](Index j) { return xi[j]; });
      }
      const double mu = s / static_cast<double>(m);
      double v = 0.0;
      for (Index i = 0; i < n; ++i) {
        const double* xi = x.data() + (i * c + ch) * inner;
        v += lane_sum(inner, [xi, mu](Index j) { return (xi[j] - mu) * (xi[j] - mu); });
      }
      const double var = v / static_cast<double>(m);
      mean[ch] = mu;
      invstd[ch] = 1.0 / std::sqrt(var + epsilon);
      rm[ch] = (1.0 - momentum) * rm[ch] + momentum * mu;
      rv[ch] = (1.0 - momentum) * rv[ch] +
               momentum * var * static_cast<double>(m) / static_cast<double>(m - 1);
    }
    buffers.batches_seen.mutable_data()[0] += 1.0;
  } else {
    if (buffers.batches_seen.data()[0] <= 0.0) {
      throw ShapeError("batchnorm: eval mode before any running statistics were recorded");
    }
    auto rm = buffers.running_mean.data();
    auto rv = buffers.running_var.data();
    for (Index ch = 0; ch < c; ++ch) {
      mean[ch] = rm[ch];
      invstd[ch] = 1.0 / std::sqrt(rv[ch] + epsilon);
    }
  }

  auto gm = gamma.data(), bt = beta.data();
  std::vector<double> out(x.size());
  for (Index i = 0; i < n; ++i) {
    for (Index ch = 0; ch < c; ++ch) {
      const Index off = (i * c + ch) * inner;
      const double a = gm[ch] * invstd[ch], b = bt[ch] - mean[ch] * a;
      ArrayMap(out.data() + off, inner) = ConstArrayMap(x.data() + off, inner) * a + b;
    }
  }

  return make_result(
      xs, std::move(out), {input, gamma, beta},
      [input, gamma, beta, mean = std::move(mean), invstd = std::move(invstd), training, n, c,
       inner](std::span<const double> gy) {
        const double* x = input.data().data();
        const double* g = gy.data();
        auto gm = gamma.data();
        const double mcount = static_cast<double>(n * inner);
        std::vector<double> dgamma(static_cast<std::size_t>(c), 0.0),
            dbeta(static_cast<std::size_t>(c), 0.0);
        for (Index ch = 0; ch < c; ++ch) {
          double sg = 0.0, sgx = 0.0;
          const double mu = mean[ch];
          for (Index i = 0; i < n; ++i) {
            const Index off = (i * c + ch) * inner;
            const double *gi = g + off, *xi = x + off;
            sg += lane_sum(inner, [gi](Index j) { return gi[j]; });
            sgx += lane_sum(inner, [gi, xi, mu](Index j) { return gi[j] * (xi[j] - mu); });
          }
          dbeta[ch] = sg;
          dgamma[ch] = sgx * invstd[ch];
        }
        if (wants_grad(input)) {
          std::vector<double> dx(static_cast<std::size_t>(n * c * inner));
          for (Index ch = 0; ch < c; ++ch) {
            // dx = a*gy - b*x + k, per channel
            const double a = gm[ch] * invstd[ch];
            const double b = training ? a * invstd[ch] * dgamma[ch] / mcount : 0.0;
            const double k = training ? b * mean[ch] - a * dbeta[ch] / mcount : 0.0;
            for (Index i = 0; i < n; ++i) {
              const Index off = (i * c + ch) * inner;
              ArrayMap(dx.data() + off, inner) = a * ConstArrayMap(g + off, inner) - b * ConstArrayMap(x + off, inner) + k;
            }
          }
          input.impl()->accumulate_grad(std::move(dx));
        }
        if (wants_grad(gamma)) gamma.impl()->accumulate_grad(std::move(dgamma));
        if (wants_grad(beta)) beta.impl()->accumulate_grad(std::move(dbeta));
      });
}

Tensor linear(const Tensor& input, const Tensor& weight, const Tensor& bias) {
  require_rank(input, 2, "linear input");
  require_rank(weight, 2, "linear weight");
  const Index n = input.dim(0), f = input.dim(1), c = weight.dim(0);
  if (weight.dim(1) != f) {
    throw ShapeError("linear: input has " + std::to_string(f) + " features but weight expects " +
                     std::to_string(weight.dim(1)));
  }
  if (bias.defined() && bias.numel() != c) {
    throw ShapeError("linear: bias length " + std::to_string(bias.numel()) +
                     " does not match outputs " + std::to_string(c));
  }
  std::vector<double> out(static_cast<std::size_t>(n * c));
  MapMat om(out.data(), n, c);
  om.noalias() = ConstMapMat(input.data().data(), n, f) * ConstMapMat(weight.data().data(), c, f).transpose();
  if (bias.defined()) {
    for (Index i = 0; i < n; ++i) {
      for (Index j = 0; j < c; ++j) om(i, j) += bias.data()[j];
    }
  }
  return make_result({n, c}, std::move(out), {input, weight, bias},
                     [input, weight, bias, n, f, c](std::span<const double> gy) {
                       ConstMapMat g(gy.data(), n, c);
                       if (wants_grad(input)) {
                         RowMat dx = g * ConstMapMat(weight.data().data(), c, f);
                         input.impl()->accumulate_grad(std::span<const double>(dx.data(), dx.size()));
                       }
                       if (wants_grad(weight)) {
                         RowMat dw = g.transpose() * ConstMapMat(input.data().data(), n, f);
                         weight.impl()->accumulate_grad(std::span<const double>(dw.data(), dw.size()));
                       }
                       if (wants_grad(bias)) {
                         std::vector<double> db(static_cast<std::size_t>(c), 0.0);
                         for (Index i = 0; i < n; ++i) {
                           for (Index j = 0; j < c; ++j) db[j] += g(i, j);
                         }
                         bias.impl()->accumulate_grad(std::move(db));
                       }
                     });
}

CrossEntropyResult softmax_cross_entropy(const Tensor& logits, std::span<const int> labels) {
  require_rank(logits, 2, "softmax_cross_entropy logits");
  const Index n = logits.dim(0), c = logits.dim(1);
  if (static_cast<Index>(labels.size()) != n) {
    throw ShapeError("softmax_cross_entropy: " + std::to_string(labels.size()) + " labels for " +
                     std::to_string(n) + " rows");
  }
  auto z = logits.data();
  std::vector<double> grad(z.size());
  double loss = 0.0;
  for (Index i = 0; i < n; ++i) {
    const int y = labels[i];
    if (y < 0 || y >= c) {
      throw ShapeError("softmax_cross_entropy: label " + std::to_string(y) + " outside [0, " +
                       std::to_string(c) + ")");
    }
    const double* row = z.data() + i * c;
    const double mx = *std::max_element(row, row + c);
    double se = 0.0;
    for (Index j = 0; j < c; ++j) se += std::exp(row[j] - mx);
    const double lse = mx + std::log(se);
    loss += lse - row[y];
    for (Index j = 0; j < c; ++j) {
      grad[i * c + j] = (std::exp(row[j] - lse) - (j == y ? 1.0 : 0.0)) / static_cast<double>(n);
    }
  }
  loss /= static_cast<double>(n);
  Tensor g_detached(logits.shape(), grad);
  Tensor loss_t = make_result({1}, {loss}, {logits}, [logits, grad](std::span<const double> gy) {
    std::vector<double> dz(grad.size());
    for (std::size_t i = 0; i < grad.size(); ++i) dz[i] = gy[0] * grad[i];
    logits.impl()->accumulate_grad(std::move(dz));
  });
  return {loss_t, g_detached};
}

Tensor concat_channels(const std::vector<Tensor>& parts) {
  if (parts.empty()) throw ShapeError("concat_channels: nothing to concatenate");
  const Shape& first = parts.front().shape();
  if (first.size() < 2) throw ShapeError("concat_channels: rank must be >= 2");
  const Index n = first[0];
  const Index inner = parts.front().numel() / (first[0] * first[1]);
  Index total_c = 0;
  std::vector<Index> chans;
  for (const Tensor& p : parts) {
    const Shape& s = p.shape();
    bool ok = s.size() == first.size() && s[0] == n;
    for (std::size_t a = 2; ok && a < s.size(); ++a) ok = s[a] == first[a];
    if (!ok) {
      throw ShapeError("concat_channels: incompatible shapes " + shape_str(first) + " and " +
                       shape_str(s));
    }
    chans.push_back(s[1]);
    total_c += s[1];
  }
  Shape out_shape = first;
  out_shape[1] = total_c;
  std::vector<double> out(static_cast<std::size_t>(n * total_c * inner));
  Index coff = 0;
  for (std::size_t k = 0; k < parts.size(); ++k) {
    auto src = parts[k].data();
    for (Index i = 0; i < n; ++i) {
      std::copy_n(src.data() + i * chans[k] * inner, chans[k] * inner,
                  out.data() + (i * total_c + coff) * inner);
    }
    coff += chans[k];
  }
  return make_result(out_shape, std::move(out), parts,
                     [parts, chans, n, total_c, inner](std::span<const double> gy) {
                       Index coff = 0;
                       for (std::size_t k = 0; k < parts.size(); ++k) {
                         if (wants_grad(parts[k])) {
                           std::vector<double> d(static_cast<std::size_t>(n * chans[k] * inner));
                           for (Index i = 0; i < n; ++i) {
                             std::copy_n(gy.data() + (i * total_c + coff) * inner, chans[k] * inner,
                                         d.data() + i * chans[k] * inner);
                           }
                           parts[k].impl()->accumulate_grad(std::move(d));
                         }
                         coff += chans[k];
                       }
                     });
}

Tensor global_avg_pool(const Tensor& input) {
  if (!input.defined() || input.ndim() < 2) throw ShapeError("global_avg_pool: rank must be >= 2");
  const Index n = input.dim(0), c = input.dim(1);
  const Index inner = input.numel() / (n * c);
  auto x = input.data();
  std::vector<double> out(static_cast<std::size_t>(n * c));
  for (Index i = 0; i < n * c; ++i) {
    double s = 0.0;
    for (Index j = 0; j < inner; ++j) s += x[i * inner + j];
    out[i] = s / static_cast<double>(inner);
  }
  return make_result({n, c}, std::move(out), {input}, [input, inner](std::span<const double> gy) {
    std::vector<double> dx(static_cast<std::size_t>(input.numel()));
    for (std::size_t i = 0; i < gy.size(); ++i) {
      const double v = gy[i] / static_cast<double>(inner);
      std::fill_n(dx.data() + i * inner, inner, v);
    }
    input.impl()->accumulate_grad(std::move(dx));
  });
}

Tensor mean_axis1(const Tensor& input) {
  if (!input.defined() || input.ndim() < 2) throw ShapeError("mean_axis1: rank must be >= 2");
  const Shape& s = input.shape();
  const Index a = s[0], b = s[1];
  const Index inner = input.numel() / (a * b);
  Shape out_shape{a};
  for (std::size_t k = 2; k < s.size(); ++k) out_shape.push_back(s[k]);
  if (out_shape.size() == 1) out_shape.push_back(1);
  auto x = input.data();
  std::vector<double> out(static_cast<std::size_t>(a * inner));
  for (Index i = 0; i < a; ++i) {
    const double* base = x.data() + i * b * inner;
    for (Index r = 0; r < inner; ++r) {
      const double ref = base[r];
      double dev = 0.0;
      for (Index j = 1; j < b; ++j) dev += base[j * inner + r] - ref;
      out[i * inner + r] = ref + dev / static_cast<double>(b);
    }
  }
  return make_result(out_shape, std::move(out), {input},
                     [input, a, b, inner](std::span<const double> gy) {
                       std::vector<double> dx(static_cast<std::size_t>(input.numel()));
                       for (Index i = 0; i < a; ++i) {
                         for (Index j = 0; j < b; ++j) {
                           for (Index r = 0; r < inner; ++r) {
                             dx[(i * b + j) * inner + r] = gy[i * inner + r] / static_cast<double>(b);
                           }
                         }
                       }
                       input.impl()->accumulate_grad(std::move(dx));
                     });
}

Tensor select_frames(const Tensor& input, Index start, Index step, Index count) {
  require_rank(input, 5, "select_frames input");
  const Shape& s = input.shape();
  const Index n = s[0], c = s[1], t = s[2], hw = s[3] * s[4];
  if (count < 1 || step < 1 || start < 0 || start + (count - 1) * step >= t) {
    throw ShapeError("select_frames: frames " + std::to_string(start) + "+" + std::to_string(step) +
                     "*k for k<" + std::to_string(count) + " exceed T=" + std::to_string(t));
  }
  auto x = input.data();
  std::vector<double> out(static_cast<std::size_t>(n * c * count * hw));
  for (Index nc = 0; nc < n * c; ++nc) {
    for (Index k = 0; k < count; ++k) {
      std::copy_n(x.data() + (nc * t + start + k * step) * hw, hw, out.data() + (nc * count + k) * hw);
    }
  }
  return make_result({n, c, count, s[3], s[4]}, std::move(out), {input},
                     [input, n, c, t, hw, start, step, count](std::span<const double> gy) {
                       std::vector<double> dx(static_cast<std::size_t>(input.numel()), 0.0);
                       for (Index nc = 0; nc < n * c; ++nc) {
                         for (Index k = 0; k < count; ++k) {
                           const double* g = gy.data() + (nc * count + k) * hw;
                           double* d = dx.data() + (nc * t + start + k * step) * hw;
                           for (Index j = 0; j < hw; ++j) d[j] += g[j];
                         }
                       }
                       input.impl()->accumulate_grad(std::move(dx));
                     });
}

namespace {
// Swap axes 1 and 2 of a [A, B, C, inner] block layout.
void swap12(const double* src, double* dst, Index a, Index b, Index c, Index inner) {
  for (Index i = 0; i < a; ++i) {
    for (Index j = 0; j < b; ++j) {
      for (Index k = 0; k < c; ++k) {
        std::copy_n(src + ((i * b + j) * c + k) * inner, inner, dst + ((i * c + k) * b + j) * inner);
      }
    }
  }
}
}  // namespace

Tensor clip_to_frames(const Tensor& input) {
  require_rank(input, 5, "clip_to_frames input");
  const Shape& s = input.shape();
  const Index n = s[0], c = s[1], t = s[2], hw = s[3] * s[4];
  std::vector<double> out(static_cast<std::size_t>(input.numel()));
  swap12(input.data().data(), out.data(), n, c, t, hw);
  return make_result({n * t, c, s[3], s[4]}, std::move(out), {input},
                     [input, n, c, t, hw](std::span<const double> gy) {
                       std::vector<double> dx(gy.size());
                       swap12(gy.data(), dx.data(), n, t, c, hw);
                       input.impl()->accumulate_grad(std::move(dx));
                     });
}

Tensor frames_to_clip(const Tensor& input, Index frames) {
  require_rank(input, 4, "frames_to_clip input");
  const Shape& s = input.shape();
  if (frames < 1 || s[0] % frames != 0) {
    throw ShapeError("frames_to_clip: batch " + std::to_string(s[0]) + " not divisible by T=" +
                     std::to_string(frames));
  }
  const Index n = s[0] / frames, c = s[1], hw = s[2] * s[3];
  std::vector<double> out(static_cast<std::size_t>(input.numel()));
  swap12(input.data().data(), out.data(), n, frames, c, hw);
  return make_result({n, c, frames, s[2], s[3]}, std::move(out), {input},
                     [input, n, c, frames, hw](std::span<const double> gy) {
                       std::vector<double> dx(gy.size());
                       swap12(gy.data(), dx.data(), n, c, frames, hw);
                       input.impl()->accumulate_grad(std::move(dx));
                     });
}

Tensor sum(const Tensor& input) {
  double s = 0.0;
  for (double v : input.data()) s += v;
  return make_result({1}, {s}, {input}, [input](std::span<const double> gy) {
    std::vector<double> dx(static_cast<std::size_t>(input.numel()), gy[0]);
    input.impl()->accumulate_grad(std::move(dx));
  });
}

Tensor weighted_sum(const Tensor& input, std::span<const double> weights) {
  if (static_cast<Index>(weights.size()) != input.numel()) {
    throw ShapeError("weighted_sum: weight count does not match tensor size");
  }
  auto x = input.data();
  double s = 0.0;
  for (std::size_t i = 0; i < x.size(); ++i) s += weights[i] * x[i];
  std::vector<double> w(weights.begin(), weights.end());
  return make_result({1}, {s}, {input}, [input, w = std::move(w)](std::span<const double> gy) {
    std::vector<double> dx(w.size());
    for (std::size_t i = 0; i < w.size(); ++i) dx[i] = gy[0] * w[i];
    input.impl()->accumulate_grad(std::move(dx));
  });
}

}  // namespace tg
