#pragma once

// Minimal differentiable network engine: convolution primitives, batch
// normalization, the toy MBConv-analog block, a linear head, softmax
// cross-entropy and momentum SGD. Every primitive is a forward/backward pair
// of free functions; caches are plain values so one parameter block can be
// applied several times in a single step (the shared head is).

#include <Eigen/Dense>
#include <algorithm>
#include <cmath>
#include <cstdint>
#include <limits>
#include <span>
#include <string>
#include <vector>

#include "neas/archspace.hpp"
#include "neas/errors.hpp"
#include "neas/linalg.hpp"
#include "neas/rng.hpp"
#include "neas/tensor.hpp"

namespace neas {

enum class Mode { train, eval, calibrate };
enum class Activation { relu, swish };

template <typename T>
using RowMatrix = Eigen::Matrix<T, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>;

inline constexpr double kBnEpsilon = 1e-5;
inline constexpr double kBnMomentum = 0.1;

// ---------------------------------------------------------------------------
// Convolutions. Padding is k/2 on every side ("same" for stride 1).

inline int conv_out_size(int in, int k, int stride) {
  return (in + 2 * (k / 2) - k) / stride + 1;
}

// weight layout [out][in][ky][kx]
template <typename T>
Tensor<T> conv2d_forward(const Tensor<T>& x, const VectorX<T>& weight,
                         int out_channels, int k, int stride) {
  const int pad = k / 2;
  const int ho = conv_out_size(x.h(), k, stride);
  const int wo = conv_out_size(x.w(), k, stride);
  Tensor<T> y(x.n(), out_channels, ho, wo);
  const int cin = x.c();
  for (int n = 0; n < x.n(); ++n) {
    for (int co = 0; co < out_channels; ++co) {
      T* out = y.plane(n, co);
      for (int ci = 0; ci < cin; ++ci) {
        const T* in = x.plane(n, ci);
        const T* wk = weight.data() + (static_cast<std::size_t>(co) * cin + ci) * k * k;
        for (int oy = 0; oy < ho; ++oy) {
          for (int ox = 0; ox < wo; ++ox) {
            T acc = 0;
            for (int ky = 0; ky < k; ++ky) {
              const int iy = oy * stride + ky - pad;
              if (iy < 0 || iy >= x.h()) continue;
              for (int kx = 0; kx < k; ++kx) {
                const int ix = ox * stride + kx - pad;
                if (ix < 0 || ix >= x.w()) continue;
                acc += wk[ky * k + kx] * in[iy * x.w() + ix];
              }
            }
            out[oy * wo + ox] += acc;
          }
        }
      }
    }
  }
  return y;
}

template <typename T>
Tensor<T> conv2d_backward(const Tensor<T>& x, const VectorX<T>& weight,
                          const Tensor<T>& dy, int k, int stride,
                          VectorX<T>& dweight) {
  const int pad = k / 2;
  const int cin = x.c();
  Tensor<T> dx(x.shape());
  for (int n = 0; n < x.n(); ++n) {
    for (int co = 0; co < dy.c(); ++co) {
      const T* g = dy.plane(n, co);
      for (int ci = 0; ci < cin; ++ci) {
        const T* in = x.plane(n, ci);
        T* din = dx.plane(n, ci);
        const std::size_t base = (static_cast<std::size_t>(co) * cin + ci) * k * k;
        const T* wk = weight.data() + base;
        T* dwk = dweight.data() + base;
        for (int oy = 0; oy < dy.h(); ++oy) {
          for (int ox = 0; ox < dy.w(); ++ox) {
            const T go = g[oy * dy.w() + ox];
            if (go == T(0)) continue;
            for (int ky = 0; ky < k; ++ky) {
              const int iy = oy * stride + ky - pad;
              if (iy < 0 || iy >= x.h()) continue;
              for (int kx = 0; kx < k; ++kx) {
                const int ix = ox * stride + kx - pad;
                if (ix < 0 || ix >= x.w()) continue;
                dwk[ky * k + kx] += go * in[iy * x.w() + ix];
                din[iy * x.w() + ix] += go * wk[ky * k + kx];
              }
            }
          }
        }
      }
    }
  }
  return dx;
}

// weight is a column-major (out x in) matrix.
template <typename T>
Tensor<T> pointwise_forward(const Tensor<T>& x, const VectorX<T>& weight,
                            int out_channels) {
  Eigen::Map<const MatrixX<T>> w(weight.data(), out_channels, x.c());
  Tensor<T> y(x.n(), out_channels, x.h(), x.w());
  for (int n = 0; n < x.n(); ++n) y.sample(n).noalias() = x.sample(n) * w.transpose();
  return y;
}

template <typename T>
Tensor<T> pointwise_backward(const Tensor<T>& x, const VectorX<T>& weight,
                             const Tensor<T>& dy, VectorX<T>& dweight) {
  Eigen::Map<const MatrixX<T>> w(weight.data(), dy.c(), x.c());
  Eigen::Map<MatrixX<T>> dw(dweight.data(), dy.c(), x.c());
  Tensor<T> dx(x.shape());
  for (int n = 0; n < x.n(); ++n) {
    dw.noalias() += dy.sample(n).transpose() * x.sample(n);
    dx.sample(n).noalias() = dy.sample(n) * w;
  }
  return dx;
}

// weight layout [channel][ky][kx]
template <typename T>
Tensor<T> depthwise_forward(const Tensor<T>& x, const VectorX<T>& weight,
                            int k, int stride) {
  const int pad = k / 2;
  const int ho = conv_out_size(x.h(), k, stride);
  const int wo = conv_out_size(x.w(), k, stride);
  Tensor<T> y(x.n(), x.c(), ho, wo);
  for (int n = 0; n < x.n(); ++n) {
    for (int c = 0; c < x.c(); ++c) {
      const T* in = x.plane(n, c);
      const T* wk = weight.data() + static_cast<std::size_t>(c) * k * k;
      T* out = y.plane(n, c);
      for (int oy = 0; oy < ho; ++oy) {
        const int ky0 = std::max(0, pad - oy * stride);
        const int ky1 = std::min(k, x.h() + pad - oy * stride);
        for (int ox = 0; ox < wo; ++ox) {
          const int kx0 = std::max(0, pad - ox * stride);
          const int kx1 = std::min(k, x.w() + pad - ox * stride);
          T acc = 0;
          for (int ky = ky0; ky < ky1; ++ky) {
            const T* row = in + (oy * stride + ky - pad) * x.w() + ox * stride - pad;
            for (int kx = kx0; kx < kx1; ++kx) acc += wk[ky * k + kx] * row[kx];
          }
          out[oy * wo + ox] = acc;
        }
      }
    }
  }
  return y;
}

template <typename T>
Tensor<T> depthwise_backward(const Tensor<T>& x, const VectorX<T>& weight,
                             const Tensor<T>& dy, int k, int stride,
                             VectorX<T>& dweight) {
  const int pad = k / 2;
  Tensor<T> dx(x.shape());
  for (int n = 0; n < x.n(); ++n) {
    for (int c = 0; c < x.c(); ++c) {
      const T* in = x.plane(n, c);
      const T* g = dy.plane(n, c);
      const std::size_t base = static_cast<std::size_t>(c) * k * k;
      const T* wk = weight.data() + base;
      T* dwk = dweight.data() + base;
      T* din = dx.plane(n, c);
      for (int oy = 0; oy < dy.h(); ++oy) {
        const int ky0 = std::max(0, pad - oy * stride);
        const int ky1 = std::min(k, x.h() + pad - oy * stride);
        for (int ox = 0; ox < dy.w(); ++ox) {
          const T go = g[oy * dy.w() + ox];
          const int kx0 = std::max(0, pad - ox * stride);
          const int kx1 = std::min(k, x.w() + pad - ox * stride);
          const int off = (oy * stride - pad) * x.w() + ox * stride - pad;
          for (int ky = ky0; ky < ky1; ++ky) {
            for (int kx = kx0; kx < kx1; ++kx) {
              const int at = off + ky * x.w() + kx;
              dwk[ky * k + kx] += go * in[at];
              din[at] += go * wk[ky * k + kx];
            }
          }
        }
      }
    }
  }
  return dx;
}

// ---------------------------------------------------------------------------
// Batch normalization over (N, H, W) per channel.

template <typename T>
struct BnStats {
  VectorX<T> mean;
  VectorX<T> var;

  explicit BnStats(int channels = 0)
      : mean(VectorX<T>::Zero(channels)), var(VectorX<T>::Ones(channels)) {}
};

template <typename T>
struct BnCache {
  Tensor<T> xhat;
  VectorX<T> inv_std;
  VectorX<T> batch_mean;  // empty in eval mode
  VectorX<T> batch_var;
  bool batch_stats = false;
};

template <typename T>
void channel_moments(const Tensor<T>& x, VectorX<T>& mean, VectorX<T>& var) {
  const int c = x.c();
  const double count = static_cast<double>(x.n()) * x.h() * x.w();
  mean = VectorX<T>::Zero(c);
  var = VectorX<T>::Zero(c);
  for (int ch = 0; ch < c; ++ch) {
    double s = 0;
    for (int n = 0; n < x.n(); ++n) {
      const T* p = x.plane(n, ch);
      for (int i = 0; i < x.h() * x.w(); ++i) s += p[i];
    }
    const double mu = s / count;
    double ss = 0;
    for (int n = 0; n < x.n(); ++n) {
      const T* p = x.plane(n, ch);
      for (int i = 0; i < x.h() * x.w(); ++i) {
        const double d = p[i] - mu;
        ss += d * d;
      }
    }
    mean[ch] = static_cast<T>(mu);
    var[ch] = static_cast<T>(ss / count);
  }
}

// Train and calibrate modes normalize with batch moments (biased variance);
// eval mode uses `running`. The running statistics are never touched here.
template <typename T>
Tensor<T> batchnorm_forward(const Tensor<T>& x, const VectorX<T>& gamma,
                            const VectorX<T>& beta, const BnStats<T>& running,
                            Mode mode, BnCache<T>* cache) {
  const int c = x.c();
  VectorX<T> mean, var;
  const bool batch = mode != Mode::eval;
  if (batch) {
    if (x.n() * x.h() * x.w() < 2 && mode == Mode::train) {
      throw ShapeError("batch norm in train mode needs more than one value per channel");
    }
    channel_moments(x, mean, var);
  } else {
    mean = running.mean;
    var = running.var;
  }
  VectorX<T> inv_std(c);
  for (int ch = 0; ch < c; ++ch) {
    inv_std[ch] = T(1) / std::sqrt(var[ch] + static_cast<T>(kBnEpsilon));
  }
  Tensor<T> y(x.shape());
  Tensor<T> xhat;
  if (cache) xhat = Tensor<T>(x.shape());
  const int plane = x.h() * x.w();
  for (int n = 0; n < x.n(); ++n) {
    for (int ch = 0; ch < c; ++ch) {
      const T* p = x.plane(n, ch);
      T* q = y.plane(n, ch);
      T* h = cache ? xhat.plane(n, ch) : nullptr;
      for (int i = 0; i < plane; ++i) {
        const T v = (p[i] - mean[ch]) * inv_std[ch];
        if (h) h[i] = v;
        q[i] = gamma[ch] * v + beta[ch];
      }
    }
  }
  if (cache) {
    cache->xhat = std::move(xhat);
    cache->inv_std = inv_std;
    cache->batch_stats = batch;
    if (batch) {
      cache->batch_mean = mean;
      cache->batch_var = var;
    } else {
      cache->batch_mean.resize(0);
      cache->batch_var.resize(0);
    }
  }
  return y;
}

template <typename T>
Tensor<T> batchnorm_backward(const Tensor<T>& dy, const VectorX<T>& gamma,
                             const BnCache<T>& cache, VectorX<T>& dgamma,
                             VectorX<T>& dbeta) {
  const int c = dy.c();
  const int plane = dy.h() * dy.w();
  const T count = static_cast<T>(dy.n()) * plane;
  Tensor<T> dx(dy.shape());
  for (int ch = 0; ch < c; ++ch) {
    T sum_dy = 0, sum_dy_xhat = 0;
    for (int n = 0; n < dy.n(); ++n) {
      const T* g = dy.plane(n, ch);
      const T* h = cache.xhat.plane(n, ch);
      for (int i = 0; i < plane; ++i) {
        sum_dy += g[i];
        sum_dy_xhat += g[i] * h[i];
      }
    }
    dgamma[ch] += sum_dy_xhat;
    dbeta[ch] += sum_dy;
    const T scale = gamma[ch] * cache.inv_std[ch];
    for (int n = 0; n < dy.n(); ++n) {
      const T* g = dy.plane(n, ch);
      const T* h = cache.xhat.plane(n, ch);
      T* d = dx.plane(n, ch);
      if (cache.batch_stats) {
        for (int i = 0; i < plane; ++i) {
          d[i] = scale * (g[i] - sum_dy / count - h[i] * sum_dy_xhat / count);
        }
      } else {
        for (int i = 0; i < plane; ++i) d[i] = scale * g[i];
      }
    }
  }
  return dx;
}

// ---------------------------------------------------------------------------
// Nonlinearities, pooling, linear head, loss.

template <typename T>
Tensor<T> activation_forward(const Tensor<T>& z, Activation act) {
  Tensor<T> y(z.shape());
  if (act == Activation::relu) {
    y.storage() = z.storage().cwiseMax(T(0));
  } else {
    y.storage() = z.storage().array() / (T(1) + (-z.storage().array()).exp());
  }
  return y;
}

template <typename T>
Tensor<T> activation_backward(const Tensor<T>& z, const Tensor<T>& dy,
                              Activation act) {
  Tensor<T> dz(z.shape());
  if (act == Activation::relu) {
    dz.storage() = (z.storage().array() > T(0)).select(dy.storage(), T(0));
  } else {
    const auto s = (T(1) / (T(1) + (-z.storage().array()).exp())).eval();
    dz.storage() = dy.storage().array() *
                   (s + z.storage().array() * s * (T(1) - s));
  }
  return dz;
}

template <typename T>
Tensor<T> global_avg_pool_forward(const Tensor<T>& x) {
  Tensor<T> y(x.n(), x.c());
  const int plane = x.h() * x.w();
  for (int n = 0; n < x.n(); ++n) {
    for (int c = 0; c < x.c(); ++c) {
      const T* p = x.plane(n, c);
      T s = 0;
      for (int i = 0; i < plane; ++i) s += p[i];
      y(n, c) = s / static_cast<T>(plane);
    }
  }
  return y;
}

template <typename T>
Tensor<T> global_avg_pool_backward(const Shape& input_shape, const Tensor<T>& dy) {
  Tensor<T> dx(input_shape);
  const int plane = input_shape.h * input_shape.w;
  for (int n = 0; n < input_shape.n; ++n) {
    for (int c = 0; c < input_shape.c; ++c) {
      const T g = dy(n, c) / static_cast<T>(plane);
      T* p = dx.plane(n, c);
      for (int i = 0; i < plane; ++i) p[i] = g;
    }
  }
  return dx;
}

template <typename T>
Eigen::Map<RowMatrix<T>> as_rows(Tensor<T>& t) {
  return Eigen::Map<RowMatrix<T>>(t.data(), t.n(), t.c() * t.h() * t.w());
}
template <typename T>
Eigen::Map<const RowMatrix<T>> as_rows(const Tensor<T>& t) {
  return Eigen::Map<const RowMatrix<T>>(t.data(), t.n(), t.c() * t.h() * t.w());
}

// y = x W^T + b with W column-major (out x in).
template <typename T>
Tensor<T> linear_forward(const Tensor<T>& x, const VectorX<T>& weight,
                         const VectorX<T>& bias) {
  const int out = static_cast<int>(bias.size());
  Eigen::Map<const MatrixX<T>> w(weight.data(), out, x.c());
  Tensor<T> y(x.n(), out);
  as_rows(y).noalias() = as_rows(x) * w.transpose();
  as_rows(y).rowwise() += bias.transpose();
  return y;
}

template <typename T>
Tensor<T> linear_backward(const Tensor<T>& x, const VectorX<T>& weight,
                          const Tensor<T>& dy, VectorX<T>& dweight,
                          VectorX<T>& dbias) {
  const int out = dy.c();
  Eigen::Map<const MatrixX<T>> w(weight.data(), out, x.c());
  Eigen::Map<MatrixX<T>> dw(dweight.data(), out, x.c());
  dw.noalias() += as_rows(dy).transpose() * as_rows(x);
  dbias += as_rows(dy).colwise().sum().transpose();
  Tensor<T> dx(x.shape());
  as_rows(dx).noalias() = as_rows(dy) * w;
  return dx;
}

template <typename T>
Tensor<T> softmax(const Tensor<T>& logits) {
  Tensor<T> p(logits.shape());
  for (int n = 0; n < logits.n(); ++n) {
    T mx = -std::numeric_limits<T>::infinity();
    for (int c = 0; c < logits.c(); ++c) mx = std::max(mx, logits(n, c));
    T z = 0;
    for (int c = 0; c < logits.c(); ++c) {
      p(n, c) = std::exp(logits(n, c) - mx);
      z += p(n, c);
    }
    for (int c = 0; c < logits.c(); ++c) p(n, c) /= z;
  }
  return p;
}

template <typename T>
struct LossResult {
  T loss = 0;
  Tensor<T> grad;  // d loss / d logits
};

/// Mean softmax cross-entropy; gradient is (softmax - onehot) / batch.
template <typename T>
LossResult<T> softmax_cross_entropy(const Tensor<T>& logits,
                                    std::span<const int> labels) {
  if (static_cast<int>(labels.size()) != logits.n()) {
    throw InputError("logits batch " + std::to_string(logits.n()) +
                     " does not match " + std::to_string(labels.size()) +
                     " labels");
  }
  LossResult<T> r;
  r.grad = softmax(logits);
  const T inv_n = T(1) / static_cast<T>(logits.n());
  for (int n = 0; n < logits.n(); ++n) {
    const int y = labels[static_cast<std::size_t>(n)];
    if (y < 0 || y >= logits.c()) {
      throw InputError("label " + std::to_string(y) + " outside [0, " +
                       std::to_string(logits.c()) + ")");
    }
    T mx = -std::numeric_limits<T>::infinity();
    for (int c = 0; c < logits.c(); ++c) mx = std::max(mx, logits(n, c));
    T z = 0;
    for (int c = 0; c < logits.c(); ++c) z += std::exp(logits(n, c) - mx);
    r.loss += (std::log(z) + mx - logits(n, y)) * inv_n;
    r.grad(n, y) -= T(1);
  }
  r.grad.storage() *= inv_n;
  return r;
}

// ---------------------------------------------------------------------------
// Parameter blocks.

enum class BlockKind { stem, mbconv, head };

struct BlockGeometry {
  int in_channels = 0;
  int out_channels = 0;
  int hidden = 0;
  int kernel_size = 1;
  int stride = 1;
  bool residual = false;
};

/// Weights, gradients and momentum buffers of one operator instance, plus
/// its batch-norm running statistics.
///   stem:   [conv, gamma, beta]
///   mbconv: [expand, g1, b1, depthwise, g2, b2, project, g3, b3]
///   head:   [weight, bias]
template <typename T>
struct ParamBlock {
  BlockKind kind = BlockKind::mbconv;
  int layer = 0;   // 0 for the stem, d+1 for the head
  int op_id = -1;  // -1 for stem and head
  BlockGeometry geometry;
  Activation activation = Activation::relu;
  std::vector<VectorX<T>> weights;
  std::vector<VectorX<T>> grads;
  std::vector<VectorX<T>> velocity;
  std::vector<std::vector<int>> shapes;
  std::vector<BnStats<T>> bn;
  std::uint64_t steps = 0;

  void add_weight(std::vector<int> shape, VectorX<T> value) {
    grads.push_back(VectorX<T>::Zero(value.size()));
    velocity.push_back(VectorX<T>::Zero(value.size()));
    weights.push_back(std::move(value));
    shapes.push_back(std::move(shape));
  }
  void zero_grad() {
    for (auto& g : grads) g.setZero();
  }
  std::size_t parameter_count() const {
    std::size_t n = 0;
    for (const auto& w : weights) n += static_cast<std::size_t>(w.size());
    return n;
  }
  bool has_nonzero_grad() const {
    for (const auto& g : grads) {
      if (!g.isZero(0)) return true;
    }
    return false;
  }
};

template <typename T>
VectorX<T> he_normal(Eigen::Index count, double fan_in, Rng& rng) {
  VectorX<T> v(count);
  const double sd = std::sqrt(2.0 / fan_in);
  for (Eigen::Index i = 0; i < count; ++i) v[i] = static_cast<T>(sd * rng.normal());
  return v;
}

template <typename T>
ParamBlock<T> make_stem_block(const StemSpec& stem, Activation act, Rng& rng) {
  ParamBlock<T> b;
  b.kind = BlockKind::stem;
  b.layer = 0;
  b.activation = act;
  b.geometry = {stem.in_channels, stem.out_channels, 0, stem.kernel_size,
                stem.stride, false};
  const int k = stem.kernel_size;
  b.add_weight({stem.out_channels, stem.in_channels, k, k},
               he_normal<T>(stem.out_channels * stem.in_channels * k * k,
                            stem.in_channels * k * k, rng));
  b.add_weight({stem.out_channels}, VectorX<T>::Ones(stem.out_channels));
  b.add_weight({stem.out_channels}, VectorX<T>::Zero(stem.out_channels));
  b.bn.emplace_back(stem.out_channels);
  return b;
}

template <typename T>
ParamBlock<T> make_mbconv_block(const LayerSpec& layer, const OperatorSpec& op,
                                Activation act, Rng& rng) {
  if (op.kind != OpKind::conv) {
    throw InvariantError("skip operators have no parameter block");
  }
  ParamBlock<T> b;
  b.kind = BlockKind::mbconv;
  b.layer = layer.index;
  b.op_id = op.op_id;
  b.activation = act;
  const int cin = layer.in_channels;
  const int cout = layer.out_channels;
  const int hidden = cin * op.expansion;
  const int k = op.kernel_size;
  b.geometry = {cin, cout, hidden, k, layer.stride,
                layer.stride == 1 && cin == cout};
  b.add_weight({hidden, cin}, he_normal<T>(hidden * cin, cin, rng));
  b.add_weight({hidden}, VectorX<T>::Ones(hidden));
  b.add_weight({hidden}, VectorX<T>::Zero(hidden));
  b.add_weight({hidden, k, k}, he_normal<T>(hidden * k * k, k * k, rng));
  b.add_weight({hidden}, VectorX<T>::Ones(hidden));
  b.add_weight({hidden}, VectorX<T>::Zero(hidden));
  b.add_weight({cout, hidden}, he_normal<T>(cout * hidden, hidden, rng));
  b.add_weight({cout}, VectorX<T>::Ones(cout));
  b.add_weight({cout}, VectorX<T>::Zero(cout));
  b.bn.emplace_back(hidden);
  b.bn.emplace_back(hidden);
  b.bn.emplace_back(cout);
  return b;
}

template <typename T>
ParamBlock<T> make_head_block(int features, int classes, int layer, Rng& rng) {
  ParamBlock<T> b;
  b.kind = BlockKind::head;
  b.layer = layer;
  b.geometry = {features, classes, 0, 1, 1, false};
  VectorX<T> w(features * classes);
  const double sd = std::sqrt(1.0 / features);
  for (Eigen::Index i = 0; i < w.size(); ++i) w[i] = static_cast<T>(sd * rng.normal());
  b.add_weight({classes, features}, std::move(w));
  b.add_weight({classes}, VectorX<T>::Zero(classes));
  return b;
}

template <typename T>
struct BlockCache {
  std::vector<Tensor<T>> stage_in;  // input of each conv stage
  std::vector<Tensor<T>> pre_act;   // BN outputs fed to a nonlinearity
  std::vector<BnCache<T>> bn;
};

/// Pure forward of a stem or MBConv block. `cache` is required for backward
/// and for reading batch moments in train/calibrate mode.
template <typename T>
Tensor<T> forward_block(const ParamBlock<T>& b, const Tensor<T>& x, Mode mode,
                        BlockCache<T>* cache) {
  const auto& g = b.geometry;
  const std::string where = "block(layer " + std::to_string(b.layer) + ", op " +
                            std::to_string(b.op_id) + ")";
  require_shape(x, g.in_channels, where);
  if (cache) *cache = BlockCache<T>{};
  auto bn = [&](const Tensor<T>& in, int i) {
    BnCache<T>* c = nullptr;
    if (cache) c = &cache->bn.emplace_back();
    return batchnorm_forward(in, b.weights[static_cast<std::size_t>(3 * i + 1)],
                             b.weights[static_cast<std::size_t>(3 * i + 2)],
                             b.bn[static_cast<std::size_t>(i)], mode, c);
  };
  auto act = [&](Tensor<T> z) {
    Tensor<T> a = activation_forward(z, b.activation);
    if (cache) cache->pre_act.push_back(std::move(z));
    return a;
  };
  if (b.kind == BlockKind::stem) {
    if (cache) cache->stage_in.push_back(x);
    auto z = bn(conv2d_forward(x, b.weights[0], g.out_channels, g.kernel_size,
                               g.stride), 0);
    return act(std::move(z));
  }
  if (b.kind != BlockKind::mbconv) throw InvariantError(where + ": not a conv block");
  if (cache) cache->stage_in.push_back(x);
  Tensor<T> a1 = act(bn(pointwise_forward(x, b.weights[0], g.hidden), 0));
  if (cache) cache->stage_in.push_back(a1);
  Tensor<T> a2 = act(bn(depthwise_forward(a1, b.weights[3], g.kernel_size, g.stride), 1));
  if (cache) cache->stage_in.push_back(a2);
  Tensor<T> y = bn(pointwise_forward(a2, b.weights[6], g.out_channels), 2);
  if (g.residual) y.storage() += x.storage();
  return y;
}

/// Exponential update of running statistics from the batch moments of a
/// train-mode forward.
template <typename T>
void update_running_stats(ParamBlock<T>& b, const BlockCache<T>& cache,
                          double momentum = kBnMomentum) {
  for (std::size_t i = 0; i < cache.bn.size(); ++i) {
    const auto& c = cache.bn[i];
    if (!c.batch_stats) continue;
    const T m = static_cast<T>(momentum);
    b.bn[i].mean = (T(1) - m) * b.bn[i].mean + m * c.batch_mean;
    b.bn[i].var = (T(1) - m) * b.bn[i].var + m * c.batch_var;
  }
}

/// Train-mode forward that also updates the running statistics.
template <typename T>
Tensor<T> forward_block_train(ParamBlock<T>& b, const Tensor<T>& x,
                              BlockCache<T>& cache,
                              double momentum = kBnMomentum) {
  Tensor<T> y = forward_block(b, x, Mode::train, &cache);
  update_running_stats(b, cache, momentum);
  return y;
}

/// Accumulates parameter gradients into `b.grads`; returns d loss / d input.
template <typename T>
Tensor<T> backward_block(ParamBlock<T>& b, const BlockCache<T>& cache,
                         const Tensor<T>& dy) {
  const auto& g = b.geometry;
  auto bn_back = [&](const Tensor<T>& d, int i) {
    const auto wi = static_cast<std::size_t>(3 * i);
    return batchnorm_backward(d, b.weights[wi + 1],
                              cache.bn[static_cast<std::size_t>(i)],
                              b.grads[wi + 1], b.grads[wi + 2]);
  };
  if (b.kind == BlockKind::stem) {
    Tensor<T> dz = bn_back(activation_backward(cache.pre_act[0], dy, b.activation), 0);
    return conv2d_backward(cache.stage_in[0], b.weights[0], dz, g.kernel_size,
                           g.stride, b.grads[0]);
  }
  Tensor<T> d = bn_back(dy, 2);
  d = pointwise_backward(cache.stage_in[2], b.weights[6], d, b.grads[6]);
  d = bn_back(activation_backward(cache.pre_act[1], d, b.activation), 1);
  d = depthwise_backward(cache.stage_in[1], b.weights[3], d, g.kernel_size,
                         g.stride, b.grads[3]);
  d = bn_back(activation_backward(cache.pre_act[0], d, b.activation), 0);
  d = pointwise_backward(cache.stage_in[0], b.weights[0], d, b.grads[0]);
  if (g.residual) d.storage() += dy.storage();
  return d;
}

template <typename T>
Tensor<T> head_forward(const ParamBlock<T>& head, const Tensor<T>& features) {
  require_shape(features, head.geometry.in_channels, "head");
  return linear_forward(features, head.weights[0], head.weights[1]);
}

template <typename T>
Tensor<T> head_backward(ParamBlock<T>& head, const Tensor<T>& features,
                        const Tensor<T>& dlogits) {
  return linear_backward(features, head.weights[0], dlogits, head.grads[0],
                         head.grads[1]);
}

// ---------------------------------------------------------------------------
// Optimization.

enum class LrSchedule { linear, constant };

struct TrainConfig {
  double learning_rate = 0.5;
  LrSchedule schedule = LrSchedule::linear;
  double momentum = 0.9;
  double weight_decay = 4e-5;
  int batch_size = 64;
  int epochs = 120;
};

/// Learning rate at step `step` of `total_steps`; linear anneal towards zero
/// stays strictly positive for step < total_steps.
inline double learning_rate_at(const TrainConfig& cfg, long step, long total_steps) {
  if (cfg.schedule == LrSchedule::constant || total_steps <= 0) {
    return cfg.learning_rate;
  }
  const double frac = static_cast<double>(std::min(step, total_steps - 1)) /
                      static_cast<double>(total_steps);
  return cfg.learning_rate * (1.0 - frac);
}

/// v = momentum*v + g + wd*w;  w -= lr*v;  g = 0.
template <typename T>
void sgd_step(ParamBlock<T>& b, double lr, const TrainConfig& cfg) {
  for (std::size_t i = 0; i < b.weights.size(); ++i) {
    if (!b.grads[i].allFinite()) {
      throw TrainingError("non-finite gradient in block(layer " +
                          std::to_string(b.layer) + ", op " +
                          std::to_string(b.op_id) + ") tensor " +
                          std::to_string(i));
    }
    b.velocity[i] = static_cast<T>(cfg.momentum) * b.velocity[i] + b.grads[i] +
                    static_cast<T>(cfg.weight_decay) * b.weights[i];
    b.weights[i] -= static_cast<T>(lr) * b.velocity[i];
    b.grads[i].setZero();
  }
  ++b.steps;
}

// ---------------------------------------------------------------------------
// Finite-difference gradient check.

struct GradCheckResult {
  double max_relative_error = 0.0;
  std::size_t checked = 0;
};

inline double relative_error(double analytic, double numeric) {
  const double denom = std::max({std::abs(analytic), std::abs(numeric), 1e-6});
  return std::abs(analytic - numeric) / denom;
}

/// Compares `blocks[i]->grads` (already populated) with central differences
/// of `loss()` on up to `per_tensor` sampled entries of every weight tensor
/// (0: every entry).
/// `loss` must not touch gradients or running statistics.
template <typename T, typename LossFn>
GradCheckResult numeric_gradient_check(std::span<ParamBlock<T>* const> blocks,
                                       LossFn&& loss, double epsilon,
                                       std::size_t per_tensor, Rng& rng) {
  GradCheckResult r;
  for (ParamBlock<T>* b : blocks) {
    for (std::size_t t = 0; t < b->weights.size(); ++t) {
      auto& w = b->weights[t];
      const auto n = static_cast<std::size_t>(w.size());
      std::vector<std::size_t> idx(n);
      for (std::size_t i = 0; i < n; ++i) idx[i] = i;
      if (per_tensor > 0 && n > per_tensor) {
        rng.shuffle(idx);
        idx.resize(per_tensor);
      }
      for (std::size_t i : idx) {
        const auto e = static_cast<Eigen::Index>(i);
        const T saved = w[e];
        w[e] = saved + static_cast<T>(epsilon);
        const double up = static_cast<double>(loss());
        w[e] = saved - static_cast<T>(epsilon);
        const double down = static_cast<double>(loss());
        w[e] = saved;
        const double numeric = (up - down) / (2 * epsilon);
        r.max_relative_error = std::max(
            r.max_relative_error,
            relative_error(static_cast<double>(b->grads[t][e]), numeric));
        ++r.checked;
      }
    }
  }
  return r;
}

// Explicit instantiations live in netcore.cpp.
extern template class Tensor<float>;
extern template class Tensor<double>;

}  // namespace neas
