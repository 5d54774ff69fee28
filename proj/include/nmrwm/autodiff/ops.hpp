#pragma once

#include <algorithm>
#include <cmath>
#include <memory>
#include <optional>
#include <random>
#include <vector>

#include <Eigen/Dense>

#include "nmrwm/audio_core.hpp"
#include "nmrwm/autodiff/tape.hpp"

namespace nmrwm::ad {

template <typename Scalar>
using RowMatrix = Eigen::Matrix<Scalar, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>;
template <typename Scalar>
using MatrixMap = Eigen::Map<RowMatrix<Scalar>>;
template <typename Scalar>
using ConstMatrixMap = Eigen::Map<const RowMatrix<Scalar>>;

inline constexpr Index kKernelSize = 5;
inline constexpr Index kKernelPad = 2;

namespace detail {

inline void require(bool ok, const std::string& what) {
  if (!ok) throw UsageError(what);
}

/// Geometry of a 5x5, pad-2 convolution from an image (channels x in_h x in_w)
/// onto an output grid (out_h x out_w).
struct ConvGeometry {
  Index channels, in_h, in_w, out_h, out_w, stride;

  static ConvGeometry forward(Index channels, Index h, Index w, Index stride) {
    return {channels, h, w, (h + 2 * kKernelPad - kKernelSize) / stride + 1,
            (w + 2 * kKernelPad - kKernelSize) / stride + 1, stride};
  }
  Index rows() const { return channels * kKernelSize * kKernelSize; }
  Index cols() const { return out_h * out_w; }
};

template <typename Scalar>
void im2col(const Scalar* img, const ConvGeometry& g, Scalar* cols) {
  const Index n = g.cols();
  for (Index c = 0; c < g.channels; ++c)
    for (Index ky = 0; ky < kKernelSize; ++ky)
      for (Index kx = 0; kx < kKernelSize; ++kx) {
        Scalar* row = cols + ((c * kKernelSize + ky) * kKernelSize + kx) * n;
        for (Index oy = 0; oy < g.out_h; ++oy) {
          const Index iy = oy * g.stride - kKernelPad + ky;
          Scalar* out = row + oy * g.out_w;
          if (iy < 0 || iy >= g.in_h) {
            std::fill(out, out + g.out_w, Scalar(0));
            continue;
          }
          const Scalar* src = img + (c * g.in_h + iy) * g.in_w;
          for (Index ox = 0; ox < g.out_w; ++ox) {
            const Index ix = ox * g.stride - kKernelPad + kx;
            out[ox] = (ix >= 0 && ix < g.in_w) ? src[ix] : Scalar(0);
          }
        }
      }
}

/// Adjoint of im2col; accumulates into `img`.
template <typename Scalar>
void col2im(const Scalar* cols, const ConvGeometry& g, Scalar* img) {
  const Index n = g.cols();
  for (Index c = 0; c < g.channels; ++c)
    for (Index ky = 0; ky < kKernelSize; ++ky)
      for (Index kx = 0; kx < kKernelSize; ++kx) {
        const Scalar* row = cols + ((c * kKernelSize + ky) * kKernelSize + kx) * n;
        for (Index oy = 0; oy < g.out_h; ++oy) {
          const Index iy = oy * g.stride - kKernelPad + ky;
          if (iy < 0 || iy >= g.in_h) continue;
          const Scalar* in = row + oy * g.out_w;
          Scalar* dst = img + (c * g.in_h + iy) * g.in_w;
          for (Index ox = 0; ox < g.out_w; ++ox) {
            const Index ix = ox * g.stride - kKernelPad + kx;
            if (ix >= 0 && ix < g.in_w) dst[ix] += in[ox];
          }
        }
      }
}

template <typename Scalar>
bool any_grad(std::initializer_list<const Var<Scalar>*> vars) {
  for (const auto* v : vars)
    if (v && v->requires_grad()) return true;
  return false;
}

}  // namespace detail

// ---------------------------------------------------------------------------
// Convolutions

/// 5x5 convolution, padding 2, stride 1 or 2. x: [B, Cin, H, W], kernel: [Cout, Cin, 5, 5].
template <typename Scalar>
Var<Scalar> conv2d(const Var<Scalar>& x, const Var<Scalar>& kernel, const std::optional<Var<Scalar>>& bias,
                   Index stride) {
  using detail::require;
  const auto& xs = x.shape();
  const auto& ks = kernel.shape();
  require(xs.size() == 4, "conv2d: input must be [B,C,H,W], got " + shape_string(xs));
  require(ks.size() == 4 && ks[2] == kKernelSize && ks[3] == kKernelSize, "conv2d: kernel must be [Cout,Cin,5,5]");
  require(ks[1] == xs[1], "conv2d: channel mismatch, input " + shape_string(xs) + " kernel " + shape_string(ks));
  require(stride == 1 || stride == 2, "conv2d: stride must be 1 or 2");
  if (bias) require(bias->shape() == Shape{ks[0]}, "conv2d: bias must be [Cout]");

  const Index batch = xs[0], cin = xs[1], cout = ks[0];
  const auto g = detail::ConvGeometry::forward(cin, xs[2], xs[3], stride);
  Tensor<Scalar> out({batch, cout, g.out_h, g.out_w});
  RowMatrix<Scalar> cols(g.rows(), g.cols());
  const ConstMatrixMap<Scalar> k(kernel.value().data(), cout, g.rows());
  const Index in_step = cin * g.in_h * g.in_w, out_step = cout * g.cols();
  for (Index b = 0; b < batch; ++b) {
    detail::im2col(x.value().data() + b * in_step, g, cols.data());
    MatrixMap<Scalar> y(out.data() + b * out_step, cout, g.cols());
    y.noalias() = k * cols;
    if (bias) y.colwise() += bias->value().array().matrix();
  }

  const bool req = detail::any_grad<Scalar>({&x, &kernel, bias ? &*bias : nullptr});
  auto& tape = x.tape();
  return tape.record(std::move(out), req, [x, kernel, bias, g, batch, cout, in_step, out_step, &tape](const Tensor<Scalar>& gout) {
    const ConstMatrixMap<Scalar> k(kernel.value().data(), cout, g.rows());
    RowMatrix<Scalar> cols(g.rows(), g.cols());
    RowMatrix<Scalar> dk = RowMatrix<Scalar>::Zero(cout, g.rows());
    Tensor<Scalar> dx(x.shape());
    for (Index b = 0; b < batch; ++b) {
      const ConstMatrixMap<Scalar> gy(gout.data() + b * out_step, cout, g.cols());
      if (kernel.requires_grad()) {
        detail::im2col(x.value().data() + b * in_step, g, cols.data());
        dk.noalias() += gy * cols.transpose();
      }
      if (x.requires_grad()) {
        cols.noalias() = k.transpose() * gy;
        detail::col2im(cols.data(), g, dx.data() + b * in_step);
      }
    }
    if (kernel.requires_grad()) tape.accumulate(kernel, Tensor<Scalar>(kernel.shape(), Eigen::Map<typename Tensor<Scalar>::Array>(dk.data(), dk.size())));
    if (x.requires_grad()) tape.accumulate(x, dx);
    if (bias && bias->requires_grad()) {
      Tensor<Scalar> db({cout});
      for (Index b = 0; b < batch; ++b)
        db.array() += ConstMatrixMap<Scalar>(gout.data() + b * out_step, cout, g.cols()).rowwise().sum().array();
      tape.accumulate(*bias, db);
    }
  });
}

/// 5x5 transposed convolution, stride 2, output exactly [B, Cout, 2H, 2W].
/// x: [B, Cin, H, W], kernel: [Cin, Cout, 5, 5]. Adjoint of the stride-2 conv2d.
template <typename Scalar>
Var<Scalar> conv_transpose2d(const Var<Scalar>& x, const Var<Scalar>& kernel) {
  using detail::require;
  const auto& xs = x.shape();
  const auto& ks = kernel.shape();
  require(xs.size() == 4, "conv_transpose2d: input must be [B,C,H,W], got " + shape_string(xs));
  require(ks.size() == 4 && ks[2] == kKernelSize && ks[3] == kKernelSize,
          "conv_transpose2d: kernel must be [Cin,Cout,5,5]");
  require(ks[0] == xs[1], "conv_transpose2d: channel mismatch, input " + shape_string(xs) + " kernel " + shape_string(ks));

  const Index batch = xs[0], cin = xs[1], cout = ks[1];
  const detail::ConvGeometry g{cout, 2 * xs[2], 2 * xs[3], xs[2], xs[3], 2};
  Tensor<Scalar> out({batch, cout, g.in_h, g.in_w});
  RowMatrix<Scalar> cols(g.rows(), g.cols());
  const ConstMatrixMap<Scalar> k(kernel.value().data(), cin, g.rows());
  const Index in_step = cin * g.cols(), out_step = cout * g.in_h * g.in_w;
  for (Index b = 0; b < batch; ++b) {
    const ConstMatrixMap<Scalar> xb(x.value().data() + b * in_step, cin, g.cols());
    cols.noalias() = k.transpose() * xb;
    detail::col2im(cols.data(), g, out.data() + b * out_step);
  }

  const bool req = detail::any_grad<Scalar>({&x, &kernel});
  auto& tape = x.tape();
  return tape.record(std::move(out), req, [x, kernel, g, batch, cin, in_step, out_step, &tape](const Tensor<Scalar>& gout) {
    const ConstMatrixMap<Scalar> k(kernel.value().data(), cin, g.rows());
    RowMatrix<Scalar> cols(g.rows(), g.cols());
    RowMatrix<Scalar> dk = RowMatrix<Scalar>::Zero(cin, g.rows());
    Tensor<Scalar> dx(x.shape());
    for (Index b = 0; b < batch; ++b) {
      detail::im2col(gout.data() + b * out_step, g, cols.data());
      if (x.requires_grad()) MatrixMap<Scalar>(dx.data() + b * in_step, cin, g.cols()).noalias() = k * cols;
      if (kernel.requires_grad())
        dk.noalias() += ConstMatrixMap<Scalar>(x.value().data() + b * in_step, cin, g.cols()) * cols.transpose();
    }
    if (x.requires_grad()) tape.accumulate(x, dx);
    if (kernel.requires_grad())
      tape.accumulate(kernel, Tensor<Scalar>(kernel.shape(), Eigen::Map<typename Tensor<Scalar>::Array>(dk.data(), dk.size())));
  });
}

// ---------------------------------------------------------------------------
// Normalization

inline constexpr double kBatchNormEps = 1e-5;
inline constexpr double kBatchNormMomentum = 0.1;

/// Running statistics updated in train mode. Null in eval mode.
template <typename Scalar>
struct RunningStats {
  Tensor<Scalar>* mean = nullptr;
  Tensor<Scalar>* var = nullptr;
};

/// Per-channel batch normalization of [B, C, H, W]. Train mode uses batch statistics
/// (biased variance) and updates `update` with momentum 0.1 (unbiased variance).
/// Eval mode uses `running_mean` / `running_var`.
template <typename Scalar>
Var<Scalar> batch_norm2d(const Var<Scalar>& x, const Var<Scalar>& scale, const Var<Scalar>& shift,
                         const Tensor<Scalar>& running_mean, const Tensor<Scalar>& running_var, Mode mode,
                         RunningStats<Scalar> update = {}) {
  using detail::require;
  const auto& xs = x.shape();
  require(xs.size() == 4, "batch_norm2d: input must be [B,C,H,W]");
  const Index batch = xs[0], channels = xs[1], plane = xs[2] * xs[3];
  require(scale.shape() == Shape{channels} && shift.shape() == Shape{channels}, "batch_norm2d: scale/shift must be [C]");
  require(running_mean.shape() == Shape{channels} && running_var.shape() == Shape{channels},
          "batch_norm2d: running statistics must be [C]");
  if (mode == Mode::train) require(batch >= 2, "batch_norm2d: train mode needs a batch of at least 2");

  const auto eps = static_cast<Scalar>(kBatchNormEps);
  const Index count = batch * plane;
  auto xhat = std::make_shared<Tensor<Scalar>>(xs);
  Eigen::Array<Scalar, Eigen::Dynamic, 1> inv_std(channels);
  Tensor<Scalar> out(xs);
  for (Index c = 0; c < channels; ++c) {
    Scalar mean, var;
    if (mode == Mode::train) {
      double s = 0.0, s2 = 0.0;
      for (Index b = 0; b < batch; ++b) {
        const auto seg = x.value().array().segment((b * channels + c) * plane, plane).template cast<double>();
        s += seg.sum();
      }
      const double m = s / static_cast<double>(count);
      for (Index b = 0; b < batch; ++b) {
        const auto seg = x.value().array().segment((b * channels + c) * plane, plane).template cast<double>();
        s2 += (seg - m).square().sum();
      }
      mean = static_cast<Scalar>(m);
      var = static_cast<Scalar>(s2 / static_cast<double>(count));
      if (update.mean && update.var) {
        const auto mom = static_cast<Scalar>(kBatchNormMomentum);
        (*update.mean)[c] = (Scalar(1) - mom) * (*update.mean)[c] + mom * mean;
        const Scalar unbiased = static_cast<Scalar>(s2 / static_cast<double>(std::max<Index>(count - 1, 1)));
        (*update.var)[c] = (Scalar(1) - mom) * (*update.var)[c] + mom * unbiased;
      }
    } else {
      mean = running_mean[c];
      var = running_var[c];
    }
    inv_std[c] = Scalar(1) / std::sqrt(var + eps);
    for (Index b = 0; b < batch; ++b) {
      const Index off = (b * channels + c) * plane;
      xhat->array().segment(off, plane) = (x.value().array().segment(off, plane) - mean) * inv_std[c];
      out.array().segment(off, plane) = scale.value()[c] * xhat->array().segment(off, plane) + shift.value()[c];
    }
  }

  const bool req = detail::any_grad<Scalar>({&x, &scale, &shift});
  auto& tape = x.tape();
  return tape.record(std::move(out), req, [x, scale, shift, xhat, inv_std, mode, batch, channels, plane, count, &tape](const Tensor<Scalar>& gout) {
    Tensor<Scalar> dx(x.shape()), dscale({channels}), dshift({channels});
    for (Index c = 0; c < channels; ++c) {
      Scalar sum_g = 0, sum_gx = 0;
      for (Index b = 0; b < batch; ++b) {
        const Index off = (b * channels + c) * plane;
        sum_g += gout.array().segment(off, plane).sum();
        sum_gx += (gout.array().segment(off, plane) * xhat->array().segment(off, plane)).sum();
      }
      dscale[c] = sum_gx;
      dshift[c] = sum_g;
      if (!x.requires_grad()) continue;
      const Scalar gamma = scale.value()[c];
      for (Index b = 0; b < batch; ++b) {
        const Index off = (b * channels + c) * plane;
        if (mode == Mode::train) {
          const Scalar n = static_cast<Scalar>(count);
          dx.array().segment(off, plane) =
              (gamma * inv_std[c] / n) *
              (n * gout.array().segment(off, plane) - sum_g - xhat->array().segment(off, plane) * sum_gx);
        } else {
          dx.array().segment(off, plane) = gamma * inv_std[c] * gout.array().segment(off, plane);
        }
      }
    }
    if (x.requires_grad()) tape.accumulate(x, dx);
    if (scale.requires_grad()) tape.accumulate(scale, dscale);
    if (shift.requires_grad()) tape.accumulate(shift, dshift);
  });
}

// ---------------------------------------------------------------------------
// Elementwise

namespace detail {

template <typename Scalar, typename Fwd, typename Deriv>
Var<Scalar> elementwise(const Var<Scalar>& x, Fwd fwd, Deriv deriv) {
  Tensor<Scalar> out(x.shape(), x.value().array().unaryExpr(fwd));
  auto& tape = x.tape();
  return tape.record(std::move(out), x.requires_grad(), [x, deriv, &tape](const Tensor<Scalar>& gout) {
    tape.accumulate(x, Tensor<Scalar>(x.shape(), gout.array() * x.value().array().unaryExpr(deriv)));
  });
}

}  // namespace detail

/// The derivative at exactly 0 takes the negative-side slope.
template <typename Scalar>
Var<Scalar> leaky_relu(const Var<Scalar>& x, Scalar slope = Scalar(0.2)) {
  return detail::elementwise(
      x, [slope](Scalar v) { return v > Scalar(0) ? v : slope * v; },
      [slope](Scalar v) { return v > Scalar(0) ? Scalar(1) : slope; });
}

template <typename Scalar>
Var<Scalar> relu(const Var<Scalar>& x) {
  return leaky_relu(x, Scalar(0));
}

template <typename Scalar>
Scalar stable_sigmoid(Scalar v) {
  if (v >= Scalar(0)) return Scalar(1) / (Scalar(1) + std::exp(-v));
  const Scalar e = std::exp(v);
  return e / (Scalar(1) + e);
}

template <typename Scalar>
Var<Scalar> sigmoid(const Var<Scalar>& x) {
  return detail::elementwise(
      x, [](Scalar v) { return stable_sigmoid(v); },
      [](Scalar v) {
        const Scalar s = stable_sigmoid(v);
        return s * (Scalar(1) - s);
      });
}

/// Inverted dropout: train mode zeroes entries with probability p and scales survivors.
template <typename Scalar>
Var<Scalar> dropout(const Var<Scalar>& x, double p, Mode mode, std::mt19937_64& rng) {
  detail::require(p >= 0.0 && p < 1.0, "dropout: p must lie in [0, 1)");
  if (mode == Mode::eval || p == 0.0) return x;
  std::uniform_real_distribution<double> u(0.0, 1.0);
  const auto keep_scale = static_cast<Scalar>(1.0 / (1.0 - p));
  auto mask = std::make_shared<typename Tensor<Scalar>::Array>(x.value().size());
  for (Index i = 0; i < mask->size(); ++i) (*mask)[i] = u(rng) < p ? Scalar(0) : keep_scale;
  Tensor<Scalar> out(x.shape(), x.value().array() * *mask);
  auto& tape = x.tape();
  return tape.record(std::move(out), x.requires_grad(), [x, mask, &tape](const Tensor<Scalar>& gout) {
    tape.accumulate(x, Tensor<Scalar>(x.shape(), gout.array() * *mask));
  });
}

template <typename Scalar>
Var<Scalar> add(const Var<Scalar>& a, const Var<Scalar>& b) {
  detail::require(a.shape() == b.shape(), "add: shape mismatch " + shape_string(a.shape()) + " vs " + shape_string(b.shape()));
  Tensor<Scalar> out(a.shape(), a.value().array() + b.value().array());
  auto& tape = a.tape();
  return tape.record(std::move(out), a.requires_grad() || b.requires_grad(), [a, b, &tape](const Tensor<Scalar>& gout) {
    tape.accumulate(a, gout);
    tape.accumulate(b, gout);
  });
}

template <typename Scalar>
Var<Scalar> scale(const Var<Scalar>& a, Scalar factor) {
  Tensor<Scalar> out(a.shape(), a.value().array() * factor);
  auto& tape = a.tape();
  return tape.record(std::move(out), a.requires_grad(), [a, factor, &tape](const Tensor<Scalar>& gout) {
    tape.accumulate(a, Tensor<Scalar>(a.shape(), gout.array() * factor));
  });
}

/// Scalar sum(weights * x) with constant weights. Injects an externally computed
/// gradient into the graph.
template <typename Scalar>
Var<Scalar> dot(const Var<Scalar>& x, const Tensor<Scalar>& weights) {
  detail::require(x.shape() == weights.shape(), "dot: shape mismatch");
  Tensor<Scalar> out = Tensor<Scalar>::filled({1}, (x.value().array() * weights.array()).sum());
  auto& tape = x.tape();
  auto w = std::make_shared<Tensor<Scalar>>(weights);
  return tape.record(std::move(out), x.requires_grad(), [x, w, &tape](const Tensor<Scalar>& gout) {
    tape.accumulate(x, Tensor<Scalar>(x.shape(), w->array() * gout[0]));
  });
}

template <typename Scalar>
Var<Scalar> sum(const Var<Scalar>& x) {
  Tensor<Scalar> out = Tensor<Scalar>::filled({1}, x.value().array().sum());
  auto& tape = x.tape();
  return tape.record(std::move(out), x.requires_grad(), [x, &tape](const Tensor<Scalar>& gout) {
    tape.accumulate(x, Tensor<Scalar>::filled(x.shape(), gout[0]));
  });
}

// ---------------------------------------------------------------------------
// Dense

/// x: [B, K], weight: [L, K], bias: [L] -> [B, L].
template <typename Scalar>
Var<Scalar> dense(const Var<Scalar>& x, const Var<Scalar>& weight, const Var<Scalar>& bias) {
  using detail::require;
  const auto& xs = x.shape();
  const auto& ws = weight.shape();
  require(xs.size() == 2 && ws.size() == 2 && ws[1] == xs[1],
          "dense: shape mismatch, input " + shape_string(xs) + " weight " + shape_string(ws));
  require(bias.shape() == Shape{ws[0]}, "dense: bias must be [L]");
  const Index batch = xs[0], k = xs[1], l = ws[0];
  Tensor<Scalar> out({batch, l});
  MatrixMap<Scalar> y(out.data(), batch, l);
  const ConstMatrixMap<Scalar> xm(x.value().data(), batch, k), wm(weight.value().data(), l, k);
  y.noalias() = xm * wm.transpose();
  y.rowwise() += bias.value().array().matrix().transpose();

  const bool req = detail::any_grad<Scalar>({&x, &weight, &bias});
  auto& tape = x.tape();
  return tape.record(std::move(out), req, [x, weight, bias, batch, k, l, &tape](const Tensor<Scalar>& gout) {
    const ConstMatrixMap<Scalar> gy(gout.data(), batch, l);
    const ConstMatrixMap<Scalar> xm(x.value().data(), batch, k), wm(weight.value().data(), l, k);
    if (x.requires_grad()) {
      Tensor<Scalar> dx(x.shape());
      MatrixMap<Scalar>(dx.data(), batch, k).noalias() = gy * wm;
      tape.accumulate(x, dx);
    }
    if (weight.requires_grad()) {
      Tensor<Scalar> dw(weight.shape());
      MatrixMap<Scalar>(dw.data(), l, k).noalias() = gy.transpose() * xm;
      tape.accumulate(weight, dw);
    }
    if (bias.requires_grad()) {
      Tensor<Scalar> db({l});
      db.array() = gy.colwise().sum().transpose().array();
      tape.accumulate(bias, db);
    }
  });
}

// ---------------------------------------------------------------------------
// Shape manipulation

template <typename Scalar>
Var<Scalar> reshape(const Var<Scalar>& x, Shape shape) {
  Tensor<Scalar> out = x.value().reshaped(std::move(shape));
  auto& tape = x.tape();
  return tape.record(std::move(out), x.requires_grad(), [x, &tape](const Tensor<Scalar>& gout) {
    tape.accumulate(x, gout.reshaped(x.shape()));
  });
}

/// Concatenate [B, Ca, H, W] and [B, Cb, H, W] along channels.
template <typename Scalar>
Var<Scalar> concat_channels(const Var<Scalar>& a, const Var<Scalar>& b) {
  const auto& as = a.shape();
  const auto& bs = b.shape();
  detail::require(as.size() == 4 && bs.size() == 4 && as[0] == bs[0] && as[2] == bs[2] && as[3] == bs[3],
                  "concat_channels: incompatible shapes " + shape_string(as) + " and " + shape_string(bs));
  const Index batch = as[0], plane = as[2] * as[3];
  const Index na = as[1] * plane, nb = bs[1] * plane;
  Tensor<Scalar> out({batch, as[1] + bs[1], as[2], as[3]});
  for (Index i = 0; i < batch; ++i) {
    out.array().segment(i * (na + nb), na) = a.value().array().segment(i * na, na);
    out.array().segment(i * (na + nb) + na, nb) = b.value().array().segment(i * nb, nb);
  }
  auto& tape = a.tape();
  return tape.record(std::move(out), a.requires_grad() || b.requires_grad(), [a, b, batch, na, nb, &tape](const Tensor<Scalar>& gout) {
    Tensor<Scalar> da(a.shape()), db(b.shape());
    for (Index i = 0; i < batch; ++i) {
      da.array().segment(i * na, na) = gout.array().segment(i * (na + nb), na);
      db.array().segment(i * nb, nb) = gout.array().segment(i * (na + nb) + na, nb);
    }
    tape.accumulate(a, da);
    tape.accumulate(b, db);
  });
}

/// Rectangular window of the last two axes of [B, C, H, W].
struct Region {
  Index row = 0, rows = 0, col = 0, cols = 0;
  friend bool operator==(const Region&, const Region&) = default;
};

namespace detail {

template <typename Scalar, typename Fn>
void for_region_rows(const Shape& s, const Region& r, Fn fn) {
  for (Index b = 0; b < s[0]; ++b)
    for (Index c = 0; c < s[1]; ++c)
      for (Index y = 0; y < r.rows; ++y) {
        const Index big = ((b * s[1] + c) * s[2] + r.row + y) * s[3] + r.col;
        const Index small = ((b * s[1] + c) * r.rows + y) * r.cols;
        fn(big, small);
      }
}

inline void check_region(const Shape& s, const Region& r, const char* op) {
  require(s.size() == 4, std::string(op) + ": input must be [B,C,H,W]");
  require(r.row >= 0 && r.col >= 0 && r.rows > 0 && r.cols > 0 && r.row + r.rows <= s[2] && r.col + r.cols <= s[3],
          std::string(op) + ": region out of bounds for " + shape_string(s));
}

}  // namespace detail

template <typename Scalar>
Var<Scalar> crop(const Var<Scalar>& x, const Region& r) {
  const Shape s = x.shape();
  detail::check_region(s, r, "crop");
  Tensor<Scalar> out({s[0], s[1], r.rows, r.cols});
  detail::for_region_rows<Scalar>(s, r, [&](Index big, Index small) {
    out.array().segment(small, r.cols) = x.value().array().segment(big, r.cols);
  });
  auto& tape = x.tape();
  return tape.record(std::move(out), x.requires_grad(), [x, r, s, &tape](const Tensor<Scalar>& gout) {
    Tensor<Scalar> dx(s);
    detail::for_region_rows<Scalar>(s, r, [&](Index big, Index small) {
      dx.array().segment(big, r.cols) = gout.array().segment(small, r.cols);
    });
    tape.accumulate(x, dx);
  });
}

/// Copy of `base` with `patch` written into region (r.row, r.col).
template <typename Scalar>
Var<Scalar> insert(const Var<Scalar>& base, const Var<Scalar>& patch, Index row, Index col) {
  const Shape s = base.shape();
  const auto& ps = patch.shape();
  detail::require(ps.size() == 4 && ps[0] == s[0] && ps[1] == s[1], "insert: patch " + shape_string(ps) + " incompatible with " + shape_string(s));
  const Region r{row, ps[2], col, ps[3]};
  detail::check_region(s, r, "insert");
  Tensor<Scalar> out = base.value();
  detail::for_region_rows<Scalar>(s, r, [&](Index big, Index small) {
    out.array().segment(big, r.cols) = patch.value().array().segment(small, r.cols);
  });
  auto& tape = base.tape();
  return tape.record(std::move(out), base.requires_grad() || patch.requires_grad(), [base, patch, r, s, &tape](const Tensor<Scalar>& gout) {
    Tensor<Scalar> dbase = gout;
    Tensor<Scalar> dpatch(patch.shape());
    detail::for_region_rows<Scalar>(s, r, [&](Index big, Index small) {
      dpatch.array().segment(small, r.cols) = gout.array().segment(big, r.cols);
      dbase.array().segment(big, r.cols).setZero();
    });
    tape.accumulate(base, dbase);
    tape.accumulate(patch, dpatch);
  });
}

/// [B, L] -> [B, L, H, W], each entry repeated over the H x W plane.
template <typename Scalar>
Var<Scalar> replicate(const Var<Scalar>& x, Index h, Index w) {
  const auto& xs = x.shape();
  detail::require(xs.size() == 2, "replicate: input must be [B,L]");
  const Index plane = h * w;
  Tensor<Scalar> out({xs[0], xs[1], h, w});
  for (Index i = 0; i < x.value().size(); ++i) out.array().segment(i * plane, plane).setConstant(x.value()[i]);
  auto& tape = x.tape();
  return tape.record(std::move(out), x.requires_grad(), [x, plane, &tape](const Tensor<Scalar>& gout) {
    Tensor<Scalar> dx(x.shape());
    for (Index i = 0; i < dx.size(); ++i) dx[i] = gout.array().segment(i * plane, plane).sum();
    tape.accumulate(x, dx);
  });
}

// ---------------------------------------------------------------------------
// STFT bridges. Computed in double through the audio core, so forward values are
// the audio-core results rounded to Scalar.

/// Spectrogram of batch item `b` of a [B, 2, F, T] tensor.
template <typename Scalar>
Spectrogram to_spectrogram(const Tensor<Scalar>& t, Index b) {
  const Index f = t.dim(2), frames = t.dim(3), plane = f * frames;
  const Scalar* p = t.data() + b * 2 * plane;
  return {ConstMatrixMap<Scalar>(p, f, frames).template cast<double>(),
          ConstMatrixMap<Scalar>(p + plane, f, frames).template cast<double>()};
}

template <typename Scalar>
void write_spectrogram(const Spectrogram& s, Tensor<Scalar>& t, Index b) {
  const Index plane = s.bins() * s.frames();
  Scalar* p = t.data() + b * 2 * plane;
  MatrixMap<Scalar>(p, s.bins(), s.frames()) = s.re.template cast<Scalar>();
  MatrixMap<Scalar>(p + plane, s.bins(), s.frames()) = s.im.template cast<Scalar>();
}

template <typename Scalar>
Tensor<Scalar> spectrogram_tensor(const std::vector<Spectrogram>& specs) {
  detail::require(!specs.empty(), "spectrogram_tensor: empty batch");
  Tensor<Scalar> t({static_cast<Index>(specs.size()), 2, specs[0].bins(), specs[0].frames()});
  for (std::size_t b = 0; b < specs.size(); ++b) write_spectrogram(specs[b], t, static_cast<Index>(b));
  return t;
}

/// [B, L] samples -> [B, 2, F, T].
template <typename Scalar>
Var<Scalar> stft_bridge(const Var<Scalar>& x, const StftConfig& cfg) {
  const auto& xs = x.shape();
  detail::require(xs.size() == 2 && xs[1] == cfg.segment_length, "stft_bridge: input must be [B, segment_length]");
  const Index batch = xs[0], len = xs[1];
  Tensor<Scalar> out({batch, 2, cfg.bins(), cfg.frames()});
  for (Index b = 0; b < batch; ++b) {
    const Eigen::VectorXd seg = x.value().array().segment(b * len, len).template cast<double>();
    write_spectrogram(stft(seg, cfg), out, b);
  }
  auto& tape = x.tape();
  return tape.record(std::move(out), x.requires_grad(), [x, cfg, batch, len, &tape](const Tensor<Scalar>& gout) {
    Tensor<Scalar> dx(x.shape());
    for (Index b = 0; b < batch; ++b)
      dx.array().segment(b * len, len) = stft_adjoint(to_spectrogram(gout, b), cfg).array().template cast<Scalar>();
    tape.accumulate(x, dx);
  });
}

/// [B, 2, F, T] -> [B, L] samples.
template <typename Scalar>
Var<Scalar> istft_bridge(const Var<Scalar>& spec, const StftConfig& cfg) {
  const auto& ss = spec.shape();
  detail::require(ss.size() == 4 && ss[1] == 2 && ss[2] == cfg.bins() && ss[3] == cfg.frames(),
                  "istft_bridge: input must be [B, 2, F, T], got " + shape_string(ss));
  const Index batch = ss[0], len = cfg.segment_length;
  Tensor<Scalar> out({batch, len});
  for (Index b = 0; b < batch; ++b)
    out.array().segment(b * len, len) = istft(to_spectrogram(spec.value(), b), cfg).array().template cast<Scalar>();
  auto& tape = spec.tape();
  return tape.record(std::move(out), spec.requires_grad(), [spec, cfg, batch, len, &tape](const Tensor<Scalar>& gout) {
    Tensor<Scalar> ds(spec.shape());
    for (Index b = 0; b < batch; ++b) {
      const Eigen::VectorXd g = gout.array().segment(b * len, len).template cast<double>();
      write_spectrogram(istft_adjoint(g, cfg), ds, b);
    }
    tape.accumulate(spec, ds);
  });
}

}  // namespace nmrwm::ad
