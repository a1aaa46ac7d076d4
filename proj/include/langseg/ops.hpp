#pragma once

// Differentiable operators over DenseMap. Each takes the tape first, records
// its forward value, and registers the reverse-mode rule for its inputs.

#include <algorithm>
#include <cmath>
#include <optional>

#include "langseg/dense_map.hpp"
#include "langseg/tape.hpp"

namespace langseg {

namespace detail {

inline void require(bool ok, const std::string& what) {
  if (!ok) throw ShapeError(what);
}

}  // namespace detail

/// Per-channel k x k convolution with zero "same" padding.
/// `kernels` is k x k x C, `bias` is 1 x 1 x C.
template <typename Scalar>
Var conv_depthwise(Tape<Scalar>& tape, Var x, Var kernels, Var bias) {
  const auto& in = tape.value(x);
  const auto& k = tape.value(kernels);
  const auto& b = tape.value(bias);
  const Index H = in.height(), W = in.width(), C = in.channels();
  const Index K = k.height();
  detail::require(k.width() == K && K % 2 == 1, "conv_depthwise: kernel must be square with odd size");
  detail::require(k.channels() == C, "conv_depthwise: " + std::to_string(k.channels()) +
                                         " kernels for " + std::to_string(C) + " channels");
  detail::require(b.height() == 1 && b.width() == 1 && b.channels() == C,
                  "conv_depthwise: bias must be 1x1x" + std::to_string(C));
  const Index r = K / 2;

  DenseMap<Scalar> out(H, W, C);
  for (Index h = 0; h < H; ++h) {
    for (Index w = 0; w < W; ++w) {
      Scalar* o = &out(h, w, 0);
      for (Index c = 0; c < C; ++c) o[c] = b(0, 0, c);
      for (Index dy = 0; dy < K; ++dy) {
        const Index sh = h + dy - r;
        if (sh < 0 || sh >= H) continue;
        for (Index dx = 0; dx < K; ++dx) {
          const Index sw = w + dx - r;
          if (sw < 0 || sw >= W) continue;
          const Scalar* src = &in(sh, sw, 0);
          const Scalar* kk = &k(dy, dx, 0);
          for (Index c = 0; c < C; ++c) o[c] += kk[c] * src[c];
        }
      }
    }
  }

  return tape.record(std::move(out), {x, kernels, bias},
                     [x, kernels, bias, r, K](Tape<Scalar>& t, const DenseMap<Scalar>& g) {
    const auto& in = t.value(x);
    const auto& k = t.value(kernels);
    const Index H = in.height(), W = in.width(), C = in.channels();
    DenseMap<Scalar> dx_map(H, W, C), dk(K, K, C), db(1, 1, C);
    for (Index h = 0; h < H; ++h) {
      for (Index w = 0; w < W; ++w) {
        const Scalar* gp = &g(h, w, 0);
        for (Index c = 0; c < C; ++c) db(0, 0, c) += gp[c];
        for (Index dy = 0; dy < K; ++dy) {
          const Index sh = h + dy - r;
          if (sh < 0 || sh >= H) continue;
          for (Index ddx = 0; ddx < K; ++ddx) {
            const Index sw = w + ddx - r;
            if (sw < 0 || sw >= W) continue;
            const Scalar* src = &in(sh, sw, 0);
            const Scalar* kk = &k(dy, ddx, 0);
            Scalar* dsrc = &dx_map(sh, sw, 0);
            Scalar* dkk = &dk(dy, ddx, 0);
            for (Index c = 0; c < C; ++c) {
              dsrc[c] += kk[c] * gp[c];
              dkk[c] += src[c] * gp[c];
            }
          }
        }
      }
    }
    t.accumulate(x, dx_map.matrix());
    t.accumulate(kernels, dk.matrix());
    t.accumulate(bias, db.matrix());
  });
}

/// Repeats a single-channel map `n` times along the channel axis. The
/// gradient sums back over the copies, which is how channel-shared weights
/// are expressed.
template <typename Scalar>
Var tile_channels(Tape<Scalar>& tape, Var x, Index n) {
  const auto& in = tape.value(x);
  detail::require(in.channels() == 1, "tile_channels: input must have one channel");
  detail::require(n >= 1, "tile_channels: count must be positive");
  DenseMap<Scalar> out(in.height(), in.width(), n);
  out.matrix() = in.matrix().replicate(1, n);
  return tape.record(std::move(out), {x}, [x](Tape<Scalar>& t, const DenseMap<Scalar>& g) {
    t.accumulate(x, g.matrix().rowwise().sum());
  });
}

/// Max over channels at each pixel. The subgradient goes to the lowest
/// channel index attaining the max.
template <typename Scalar>
Var channel_max(Tape<Scalar>& tape, Var x) {
  const auto& in = tape.value(x);
  detail::require(in.channels() >= 1, "channel_max: no channels");
  const Index P = in.pixels(), C = in.channels();
  DenseMap<Scalar> out(in.height(), in.width(), 1);
  std::vector<Index> arg(static_cast<std::size_t>(P));
  for (Index p = 0; p < P; ++p) {
    const Scalar* row = in.data() + p * C;
    Index best = 0;
    for (Index c = 1; c < C; ++c) {
      if (row[c] > row[best]) best = c;
    }
    arg[static_cast<std::size_t>(p)] = best;
    out.data()[p] = row[best];
  }
  return tape.record(std::move(out), {x},
                     [x, arg = std::move(arg)](Tape<Scalar>& t, const DenseMap<Scalar>& g) {
    const auto& in = t.value(x);
    typename DenseMap<Scalar>::Matrix d = DenseMap<Scalar>::Matrix::Zero(in.pixels(), in.channels());
    for (Index p = 0; p < in.pixels(); ++p) d(p, arg[static_cast<std::size_t>(p)]) = g.data()[p];
    t.accumulate(x, d);
  });
}

template <typename Scalar>
Var relu(Tape<Scalar>& tape, Var x) {
  const auto& in = tape.value(x);
  DenseMap<Scalar> out(in.height(), in.width(), in.channels());
  out.matrix() = in.matrix().cwiseMax(Scalar(0));
  return tape.record(std::move(out), {x}, [x](Tape<Scalar>& t, const DenseMap<Scalar>& g) {
    const auto& in = t.value(x);
    t.accumulate(x, (in.matrix().array() > Scalar(0)).select(g.matrix(), Scalar(0)).matrix());
  });
}

/// x + y, where y has the same shape as x or a single channel broadcast
/// across all of x's channels.
template <typename Scalar>
Var add(Tape<Scalar>& tape, Var x, Var y) {
  const auto& a = tape.value(x);
  const auto& b = tape.value(y);
  const bool broadcast = !a.same_shape(b);
  if (broadcast) {
    detail::require(b.height() == a.height() && b.width() == a.width() && b.channels() == 1,
                    "add: cannot combine " + a.shape_string() + " with " + b.shape_string());
  }
  DenseMap<Scalar> out = a;
  if (broadcast) {
    out.matrix().colwise() += b.matrix().col(0);
  } else {
    out.matrix() += b.matrix();
  }
  return tape.record(std::move(out), {x, y},
                     [x, y, broadcast](Tape<Scalar>& t, const DenseMap<Scalar>& g) {
    t.accumulate(x, g.matrix());
    if (broadcast) {
      t.accumulate(y, g.matrix().rowwise().sum());
    } else {
      t.accumulate(y, g.matrix());
    }
  });
}

template <typename Scalar>
Var scale(Tape<Scalar>& tape, Var x, Scalar s) {
  DenseMap<Scalar> out = tape.value(x);
  out.matrix() *= s;
  return tape.record(std::move(out), {x}, [x, s](Tape<Scalar>& t, const DenseMap<Scalar>& g) {
    t.accumulate(x, g.matrix() * s);
  });
}

template <typename Scalar>
Var sum(Tape<Scalar>& tape, Var x) {
  const auto& in = tape.value(x);
  auto out = DenseMap<Scalar>::Scalar1(in.matrix().sum());
  return tape.record(std::move(out), {x}, [x](Tape<Scalar>& t, const DenseMap<Scalar>& g) {
    const auto& in = t.value(x);
    t.accumulate(x, DenseMap<Scalar>::Matrix::Constant(in.pixels(), in.channels(), g.data()[0]));
  });
}

namespace detail {

// Source coordinate and blend weight for one output index under the
// half-pixel (align_corners = false) convention.
struct LinearTap {
  Index lo;
  Index hi;
  double frac;
};

inline std::vector<LinearTap> linear_taps(Index in_size, Index factor) {
  std::vector<LinearTap> taps;
  taps.reserve(static_cast<std::size_t>(in_size * factor));
  for (Index o = 0; o < in_size * factor; ++o) {
    double src = (static_cast<double>(o) + 0.5) / static_cast<double>(factor) - 0.5;
    if (src < 0.0) src = 0.0;
    Index lo = static_cast<Index>(std::floor(src));
    if (lo > in_size - 1) lo = in_size - 1;
    const Index hi = std::min(lo + 1, in_size - 1);
    taps.push_back({lo, hi, src - static_cast<double>(lo)});
  }
  return taps;
}

}  // namespace detail

/// Bilinear upsampling by an integer factor, half-pixel centres
/// (align_corners = false), each channel independently.
template <typename Scalar>
Var bilinear_upsample(Tape<Scalar>& tape, Var x, Index factor) {
  if (factor < 1) throw ShapeError("bilinear_upsample: factor must be >= 1");
  const auto& in = tape.value(x);
  if (factor == 1) {
    return tape.record(DenseMap<Scalar>(in), {x}, [x](Tape<Scalar>& t, const DenseMap<Scalar>& g) {
      t.accumulate(x, g.matrix());
    });
  }
  const Index H = in.height(), W = in.width(), C = in.channels();
  const auto ty = detail::linear_taps(H, factor);
  const auto tx = detail::linear_taps(W, factor);
  DenseMap<Scalar> out(H * factor, W * factor, C);
  for (Index oh = 0; oh < H * factor; ++oh) {
    const auto& a = ty[static_cast<std::size_t>(oh)];
    const Scalar fy = static_cast<Scalar>(a.frac);
    for (Index ow = 0; ow < W * factor; ++ow) {
      const auto& b = tx[static_cast<std::size_t>(ow)];
      const Scalar fx = static_cast<Scalar>(b.frac);
      const Scalar w00 = (1 - fy) * (1 - fx), w01 = (1 - fy) * fx;
      const Scalar w10 = fy * (1 - fx), w11 = fy * fx;
      const Scalar* p00 = &in(a.lo, b.lo, 0);
      const Scalar* p01 = &in(a.lo, b.hi, 0);
      const Scalar* p10 = &in(a.hi, b.lo, 0);
      const Scalar* p11 = &in(a.hi, b.hi, 0);
      Scalar* o = &out(oh, ow, 0);
      for (Index c = 0; c < C; ++c) o[c] = w00 * p00[c] + w01 * p01[c] + w10 * p10[c] + w11 * p11[c];
    }
  }
  return tape.record(std::move(out), {x},
                     [x, factor, ty, tx](Tape<Scalar>& t, const DenseMap<Scalar>& g) {
    const auto& in = t.value(x);
    const Index H = in.height(), W = in.width(), C = in.channels();
    DenseMap<Scalar> d(H, W, C);
    for (Index oh = 0; oh < H * factor; ++oh) {
      const auto& a = ty[static_cast<std::size_t>(oh)];
      const Scalar fy = static_cast<Scalar>(a.frac);
      for (Index ow = 0; ow < W * factor; ++ow) {
        const auto& b = tx[static_cast<std::size_t>(ow)];
        const Scalar fx = static_cast<Scalar>(b.frac);
        const Scalar* gp = &g(oh, ow, 0);
        Scalar* d00 = &d(a.lo, b.lo, 0);
        Scalar* d01 = &d(a.lo, b.hi, 0);
        Scalar* d10 = &d(a.hi, b.lo, 0);
        Scalar* d11 = &d(a.hi, b.hi, 0);
        const Scalar w00 = (1 - fy) * (1 - fx), w01 = (1 - fy) * fx;
        const Scalar w10 = fy * (1 - fx), w11 = fy * fx;
        for (Index c = 0; c < C; ++c) {
          d00[c] += w00 * gp[c];
          d01[c] += w01 * gp[c];
          d10[c] += w10 * gp[c];
          d11[c] += w11 * gp[c];
        }
      }
    }
    t.accumulate(x, d.matrix());
  });
}

/// 1x1 convolution: out = x * weight + bias with `weight` 1 x Cin x Cout and
/// `bias` 1 x 1 x Cout.
template <typename Scalar>
Var pointwise(Tape<Scalar>& tape, Var x, Var weight, Var bias) {
  const auto& in = tape.value(x);
  const auto& w = tape.value(weight);
  const auto& b = tape.value(bias);
  detail::require(w.height() == 1 && w.width() == in.channels(),
                  "pointwise: weight " + w.shape_string() + " for input " + in.shape_string());
  detail::require(b.height() == 1 && b.width() == 1 && b.channels() == w.channels(),
                  "pointwise: bias " + b.shape_string() + " for weight " + w.shape_string());
  DenseMap<Scalar> out(in.height(), in.width(), w.channels());
  out.matrix().noalias() = in.matrix() * w.matrix();
  out.matrix().rowwise() += b.matrix().row(0);
  return tape.record(std::move(out), {x, weight, bias},
                     [x, weight, bias](Tape<Scalar>& t, const DenseMap<Scalar>& g) {
    const auto& in = t.value(x);
    const auto& w = t.value(weight);
    if (t.requires_grad(x)) t.accumulate(x, g.matrix() * w.matrix().transpose());
    t.accumulate(weight, in.matrix().transpose() * g.matrix());
    t.accumulate(bias, g.matrix().colwise().sum());
  });
}

/// Rearranges non-overlapping p x p patches into channels:
/// out(i, j, (dy*p + dx)*C + c) = x(i*p + dy, j*p + dx, c).
template <typename Scalar>
Var space_to_depth(Tape<Scalar>& tape, Var x, Index p) {
  const auto& in = tape.value(x);
  detail::require(p >= 1 && in.height() % p == 0 && in.width() % p == 0,
                  "space_to_depth: " + in.shape_string() + " not divisible by patch " + std::to_string(p));
  const Index H = in.height() / p, W = in.width() / p, C = in.channels();
  DenseMap<Scalar> out(H, W, p * p * C);
  for (Index i = 0; i < H; ++i)
    for (Index j = 0; j < W; ++j)
      for (Index dy = 0; dy < p; ++dy)
        for (Index dx = 0; dx < p; ++dx)
          for (Index c = 0; c < C; ++c) out(i, j, (dy * p + dx) * C + c) = in(i * p + dy, j * p + dx, c);
  return tape.record(std::move(out), {x}, [x, p](Tape<Scalar>& t, const DenseMap<Scalar>& g) {
    const auto& in = t.value(x);
    DenseMap<Scalar> d(in.height(), in.width(), in.channels());
    const Index C = in.channels();
    for (Index i = 0; i < g.height(); ++i)
      for (Index j = 0; j < g.width(); ++j)
        for (Index dy = 0; dy < p; ++dy)
          for (Index dx = 0; dx < p; ++dx)
            for (Index c = 0; c < C; ++c) d(i * p + dy, j * p + dx, c) = g(i, j, (dy * p + dx) * C + c);
    t.accumulate(x, d.matrix());
  });
}

/// Scales each pixel's channel vector to unit length: x / sqrt(|x|^2 + eps).
template <typename Scalar>
Var l2_normalize(Tape<Scalar>& tape, Var x, Scalar eps = Scalar(1e-12)) {
  const auto& in = tape.value(x);
  Eigen::Matrix<Scalar, Eigen::Dynamic, 1> norms =
      (in.matrix().rowwise().squaredNorm().array() + eps).sqrt().matrix();
  DenseMap<Scalar> out(in.height(), in.width(), in.channels());
  out.matrix() = norms.cwiseInverse().asDiagonal() * in.matrix();
  return tape.record(std::move(out), {x}, [x, norms](Tape<Scalar>& t, const DenseMap<Scalar>& g) {
    const auto& in = t.value(x);
    // d/dx (x/n) applied to g: g/n - x (x.g)/n^3
    const auto& X = in.matrix();
    const auto& G = g.matrix();
    Eigen::Matrix<Scalar, Eigen::Dynamic, 1> dots = X.cwiseProduct(G).rowwise().sum();
    typename DenseMap<Scalar>::Matrix d =
        norms.cwiseInverse().asDiagonal() * G -
        (dots.array() / norms.array().cube()).matrix().asDiagonal() * X;
    t.accumulate(x, d);
  });
}

/// Word-pixel correlation: out(h, w, k) = <x(h, w, :), labels.row(k)>.
///
/// `labels` is a frozen N x C matrix and receives no gradient. Each output
/// entry is an independent dot product accumulated in channel order, so
/// permuting the rows of `labels` permutes the output channels bit-exactly.
template <typename Scalar>
Var correlate(Tape<Scalar>& tape, Var x, const PixelMatrix<Scalar>& labels) {
  const auto& in = tape.value(x);
  if (labels.cols() != in.channels()) {
    throw ShapeError("correlate: pixel embeddings have " + std::to_string(in.channels()) +
                     " channels but label embeddings have " + std::to_string(labels.cols()));
  }
  const Index P = in.pixels(), C = in.channels(), N = labels.rows();
  DenseMap<Scalar> out(in.height(), in.width(), N);
  for (Index p = 0; p < P; ++p) {
    const Scalar* v = in.data() + p * C;
    Scalar* o = out.data() + p * N;
    for (Index k = 0; k < N; ++k) {
      const Scalar* e = labels.data() + k * C;
      Scalar acc = 0;
      for (Index c = 0; c < C; ++c) acc += v[c] * e[c];
      o[k] = acc;
    }
  }
  return tape.record(std::move(out), {x}, [x, labels](Tape<Scalar>& t, const DenseMap<Scalar>& g) {
    t.accumulate(x, g.matrix() * labels);
  });
}

/// Mean over non-ignored pixels of -log softmax_{y}(logits / temperature).
///
/// `targets` is height x width; entries equal to `ignore_index` are skipped.
/// Gradient flows to `logits` only.
template <typename Scalar>
Var softmax_cross_entropy(Tape<Scalar>& tape, Var logits, const LabelMap& targets, Scalar temperature,
                          std::optional<std::int32_t> ignore_index = std::nullopt) {
  const auto& z = tape.value(logits);
  if (!(temperature > 0)) throw ValidationError("temperature must be positive");
  if (targets.rows() != z.height() || targets.cols() != z.width()) {
    throw ShapeError("softmax_cross_entropy: targets " + std::to_string(targets.rows()) + "x" +
                     std::to_string(targets.cols()) + " for logits " + z.shape_string());
  }
  if (!z.all_finite()) throw NumericError("softmax_cross_entropy: non-finite logits");
  const Index P = z.pixels(), N = z.channels();
  typename DenseMap<Scalar>::Matrix probs(P, N);
  Index counted = 0;
  Scalar total = 0;
  std::vector<std::int32_t> y(static_cast<std::size_t>(P));
  for (Index p = 0; p < P; ++p) {
    const std::int32_t label = targets.data()[p];
    y[static_cast<std::size_t>(p)] = label;
    if (ignore_index && label == *ignore_index) continue;
    if (label < 0 || label >= N) {
      throw ValidationError("target label " + std::to_string(label) + " out of range for " +
                            std::to_string(N) + " labels");
    }
    auto row = z.matrix().row(p).array() / temperature;
    const Scalar m = row.maxCoeff();
    auto e = (row - m).exp();
    const Scalar s = e.sum();
    probs.row(p) = (e / s).matrix();
    total += std::log(s) + m - row(label);
    ++counted;
  }
  if (counted == 0) throw ValidationError("softmax_cross_entropy: every pixel is ignored");
  auto out = DenseMap<Scalar>::Scalar1(total / static_cast<Scalar>(counted));
  return tape.record(std::move(out), {logits},
                     [logits, probs = std::move(probs), y = std::move(y), ignore_index, temperature,
                      counted](Tape<Scalar>& t, const DenseMap<Scalar>& g) {
    const Index P = probs.rows();
    typename DenseMap<Scalar>::Matrix d = DenseMap<Scalar>::Matrix::Zero(P, probs.cols());
    const Scalar coef = g.data()[0] / (temperature * static_cast<Scalar>(counted));
    for (Index p = 0; p < P; ++p) {
      const std::int32_t label = y[static_cast<std::size_t>(p)];
      if (ignore_index && label == *ignore_index) continue;
      d.row(p) = probs.row(p) * coef;
      d(p, label) -= coef;
    }
    t.accumulate(logits, d);
  });
}

}  // namespace langseg
