#include "velofill/nn.hpp"

#include <Eigen/Core>
#include <algorithm>
#include <cmath>
#include <limits>
#include <stdexcept>
#include <string>

namespace velofill::nn {

namespace {

template <typename T>
using MatRM = Eigen::Matrix<T, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>;
template <typename T>
using MapRM = Eigen::Map<MatRM<T>>;
template <typename T>
using ConstMapRM = Eigen::Map<const MatRM<T>>;

using Index = Eigen::Index;

void require(bool ok, const std::string& what) {
  if (!ok) throw std::invalid_argument(what);
}

void require_rank4(const Shape& s, const char* what) {
  require(s.size() == 4, std::string(what) + ": expected (N,C,H,W), got " + shape_to_string(s));
}

// col is (C*K*K, Ho*Wo); col[(c*K + ky)*K + kx][oy*Wo + ox] = img[c][oy*s - p + ky][ox*s - p + kx]
template <typename T>
void im2col(const T* img, int C, int H, int W, int K, int stride, int pad, int Ho, int Wo, T* col) {
  for (int c = 0; c < C; ++c) {
    const T* plane = img + static_cast<std::size_t>(c) * H * W;
    for (int ky = 0; ky < K; ++ky) {
      for (int kx = 0; kx < K; ++kx) {
        T* row = col + (static_cast<std::size_t>(c * K + ky) * K + kx) * Ho * Wo;
        for (int oy = 0; oy < Ho; ++oy) {
          const int iy = oy * stride - pad + ky;
          T* dst = row + static_cast<std::size_t>(oy) * Wo;
          if (iy < 0 || iy >= H) {
            std::fill(dst, dst + Wo, T(0));
            continue;
          }
          const T* src = plane + static_cast<std::size_t>(iy) * W;
          for (int ox = 0; ox < Wo; ++ox) {
            const int ix = ox * stride - pad + kx;
            dst[ox] = (ix >= 0 && ix < W) ? src[ix] : T(0);
          }
        }
      }
    }
  }
}

// Adjoint of im2col: accumulates col entries back into img.
template <typename T>
void col2im(const T* col, int C, int H, int W, int K, int stride, int pad, int Ho, int Wo, T* img) {
  for (int c = 0; c < C; ++c) {
    T* plane = img + static_cast<std::size_t>(c) * H * W;
    for (int ky = 0; ky < K; ++ky) {
      for (int kx = 0; kx < K; ++kx) {
        const T* row = col + (static_cast<std::size_t>(c * K + ky) * K + kx) * Ho * Wo;
        for (int oy = 0; oy < Ho; ++oy) {
          const int iy = oy * stride - pad + ky;
          if (iy < 0 || iy >= H) continue;
          const T* src = row + static_cast<std::size_t>(oy) * Wo;
          T* dst = plane + static_cast<std::size_t>(iy) * W;
          for (int ox = 0; ox < Wo; ++ox) {
            const int ix = ox * stride - pad + kx;
            if (ix >= 0 && ix < W) dst[ix] += src[ox];
          }
        }
      }
    }
  }
}

struct ConvDims {
  int N, Cin, H, W, Cout, K;
};

template <typename T>
ConvDims conv_dims(const BasicTensor<T>& x, const BasicTensor<T>& w) {
  require_rank4(x.shape(), "conv2d input");
  require(w.rank() == 4 && w.dim(2) == w.dim(3) && w.dim(2) % 2 == 1,
          "conv2d weights must be (Cout, Cin, k, k) with odd k, got " + shape_to_string(w.shape()));
  require(w.dim(1) == x.dim(1), "conv2d channel mismatch: input " + shape_to_string(x.shape()) +
                                    ", weights " + shape_to_string(w.shape()));
  return {static_cast<int>(x.dim(0)), static_cast<int>(x.dim(1)), static_cast<int>(x.dim(2)),
          static_cast<int>(x.dim(3)), static_cast<int>(w.dim(0)), static_cast<int>(w.dim(2))};
}

}  // namespace

// ---------------------------------------------------------------------------

template <typename T>
BasicTensor<T> conv2d_forward(const BasicTensor<T>& x, const BasicTensor<T>& weights,
                              const BasicTensor<T>& bias) {
  const ConvDims d = conv_dims(x, weights);
  require(bias.size() == static_cast<std::size_t>(d.Cout), "conv2d bias length mismatch");
  const Index hw = static_cast<Index>(d.H) * d.W;
  const Index rows = static_cast<Index>(d.Cin) * d.K * d.K;

  BasicTensor<T> y({x.dim(0), static_cast<std::size_t>(d.Cout), x.dim(2), x.dim(3)});
  MatRM<T> col(rows, hw);
  ConstMapRM<T> wmat(weights.data(), d.Cout, rows);
  Eigen::Map<const Eigen::Matrix<T, Eigen::Dynamic, 1>> b(bias.data(), d.Cout);

  for (int n = 0; n < d.N; ++n) {
    im2col(x.data() + n * d.Cin * hw, d.Cin, d.H, d.W, d.K, 1, d.K / 2, d.H, d.W, col.data());
    MapRM<T> out(y.data() + n * d.Cout * hw, d.Cout, hw);
    out.noalias() = wmat * col;
    out.colwise() += b;
  }
  return y;
}

template <typename T>
ConvGrads<T> conv2d_backward(const BasicTensor<T>& x, const BasicTensor<T>& weights,
                             const BasicTensor<T>& grad_out) {
  const ConvDims d = conv_dims(x, weights);
  require(grad_out.shape() == Shape{x.dim(0), static_cast<std::size_t>(d.Cout), x.dim(2), x.dim(3)},
          "conv2d_backward: grad_out shape " + shape_to_string(grad_out.shape()));
  const Index hw = static_cast<Index>(d.H) * d.W;
  const Index rows = static_cast<Index>(d.Cin) * d.K * d.K;

  ConvGrads<T> g{BasicTensor<T>(x.shape()), BasicTensor<T>(weights.shape()),
                 BasicTensor<T>({static_cast<std::size_t>(d.Cout)})};
  MatRM<T> col(rows, hw);
  MatRM<T> dcol(rows, hw);
  ConstMapRM<T> wmat(weights.data(), d.Cout, rows);
  MapRM<T> dw(g.weight.data(), d.Cout, rows);
  Eigen::Map<Eigen::Matrix<T, Eigen::Dynamic, 1>> db(g.bias.data(), d.Cout);

  for (int n = 0; n < d.N; ++n) {
    ConstMapRM<T> dy(grad_out.data() + n * d.Cout * hw, d.Cout, hw);
    im2col(x.data() + n * d.Cin * hw, d.Cin, d.H, d.W, d.K, 1, d.K / 2, d.H, d.W, col.data());
    dw.noalias() += dy * col.transpose();
    db += dy.rowwise().sum();
    dcol.noalias() = wmat.transpose() * dy;
    col2im(dcol.data(), d.Cin, d.H, d.W, d.K, 1, d.K / 2, d.H, d.W, g.input.data() + n * d.Cin * hw);
  }
  return g;
}

// ---------------------------------------------------------------------------

namespace {

constexpr int kUpKernel = 4;
constexpr int kUpStride = 2;
constexpr int kUpPad = 1;

template <typename T>
ConvDims transpose_dims(const BasicTensor<T>& x, const BasicTensor<T>& w) {
  require_rank4(x.shape(), "conv_transpose2d input");
  require(w.rank() == 4 && w.dim(2) == kUpKernel && w.dim(3) == kUpKernel,
          "conv_transpose2d weights must be (Cin, Cout, 4, 4), got " + shape_to_string(w.shape()));
  require(w.dim(0) == x.dim(1), "conv_transpose2d channel mismatch: input " +
                                    shape_to_string(x.shape()) + ", weights " +
                                    shape_to_string(w.shape()));
  return {static_cast<int>(x.dim(0)), static_cast<int>(x.dim(1)), static_cast<int>(x.dim(2)),
          static_cast<int>(x.dim(3)), static_cast<int>(w.dim(1)), kUpKernel};
}

}  // namespace

template <typename T>
BasicTensor<T> conv_transpose2d(const BasicTensor<T>& x, const BasicTensor<T>& weights) {
  const ConvDims d = transpose_dims(x, weights);
  const Index hw = static_cast<Index>(d.H) * d.W;
  const Index big = static_cast<Index>(4) * hw;
  const Index rows = static_cast<Index>(d.Cout) * d.K * d.K;

  BasicTensor<T> y({x.dim(0), static_cast<std::size_t>(d.Cout), 2 * x.dim(2), 2 * x.dim(3)});
  MatRM<T> cols(rows, hw);
  ConstMapRM<T> wmat(weights.data(), d.Cin, rows);
  for (int n = 0; n < d.N; ++n) {
    ConstMapRM<T> xn(x.data() + n * d.Cin * hw, d.Cin, hw);
    cols.noalias() = wmat.transpose() * xn;
    col2im(cols.data(), d.Cout, 2 * d.H, 2 * d.W, d.K, kUpStride, kUpPad, d.H, d.W,
           y.data() + n * d.Cout * big);
  }
  return y;
}

template <typename T>
ConvTransposeGrads<T> conv_transpose2d_backward(const BasicTensor<T>& x,
                                                const BasicTensor<T>& weights,
                                                const BasicTensor<T>& grad_out) {
  const ConvDims d = transpose_dims(x, weights);
  require(grad_out.shape() ==
              Shape{x.dim(0), static_cast<std::size_t>(d.Cout), 2 * x.dim(2), 2 * x.dim(3)},
          "conv_transpose2d_backward: grad_out shape " + shape_to_string(grad_out.shape()));
  const Index hw = static_cast<Index>(d.H) * d.W;
  const Index big = static_cast<Index>(4) * hw;
  const Index rows = static_cast<Index>(d.Cout) * d.K * d.K;

  ConvTransposeGrads<T> g{BasicTensor<T>(x.shape()), BasicTensor<T>(weights.shape())};
  MatRM<T> dcols(rows, hw);
  ConstMapRM<T> wmat(weights.data(), d.Cin, rows);
  MapRM<T> dw(g.weight.data(), d.Cin, rows);
  for (int n = 0; n < d.N; ++n) {
    im2col(grad_out.data() + n * d.Cout * big, d.Cout, 2 * d.H, 2 * d.W, d.K, kUpStride, kUpPad,
           d.H, d.W, dcols.data());
    ConstMapRM<T> xn(x.data() + n * d.Cin * hw, d.Cin, hw);
    MapRM<T> dx(g.input.data() + n * d.Cin * hw, d.Cin, hw);
    dx.noalias() = wmat * dcols;
    dw.noalias() += xn * dcols.transpose();
  }
  return g;
}

// ---------------------------------------------------------------------------

template <typename T>
PoolResult<T> maxpool2x2(const BasicTensor<T>& x) {
  require_rank4(x.shape(), "maxpool2x2");
  const std::size_t N = x.dim(0), C = x.dim(1), H = x.dim(2), W = x.dim(3);
  require(H % 2 == 0 && W % 2 == 0, "maxpool2x2 needs even H and W, got " + shape_to_string(x.shape()));

  PoolResult<T> r{BasicTensor<T>({N, C, H / 2, W / 2}), {}, x.shape()};
  r.argmax.resize(r.output.size());
  std::size_t out = 0;
  for (std::size_t plane = 0; plane < N * C; ++plane) {
    const std::size_t base = plane * H * W;
    for (std::size_t oy = 0; oy < H / 2; ++oy) {
      for (std::size_t ox = 0; ox < W / 2; ++ox, ++out) {
        std::size_t best = base + 2 * oy * W + 2 * ox;
        for (std::size_t dy = 0; dy < 2; ++dy)
          for (std::size_t dx = 0; dx < 2; ++dx) {
            const std::size_t idx = base + (2 * oy + dy) * W + 2 * ox + dx;
            if (x[idx] > x[best]) best = idx;
          }
        r.output[out] = x[best];
        r.argmax[out] = best;
      }
    }
  }
  return r;
}

template <typename T>
BasicTensor<T> maxpool2x2_backward(const PoolResult<T>& pool, const BasicTensor<T>& grad_out) {
  pool.output.require_same_shape(grad_out, "maxpool2x2_backward");
  BasicTensor<T> dx(pool.input_shape);
  for (std::size_t i = 0; i < grad_out.size(); ++i) dx[pool.argmax[i]] += grad_out[i];
  return dx;
}

// ---------------------------------------------------------------------------

template <typename T>
BasicTensor<T> batchnorm2d(const BasicTensor<T>& x, const BasicTensor<T>& gamma,
                           const BasicTensor<T>& beta, BatchNormState<T>& state, Mode mode,
                           BatchNormCache<T>* cache) {
  require_rank4(x.shape(), "batchnorm2d");
  const std::size_t N = x.dim(0), C = x.dim(1), HW = x.dim(2) * x.dim(3);
  require(gamma.size() == C && beta.size() == C && state.running_mean.size() == C &&
              state.running_var.size() == C,
          "batchnorm2d channel mismatch for input " + shape_to_string(x.shape()));
  const std::size_t M = N * HW;
  const T eps = static_cast<T>(kBatchNormEps);
  const T momentum = static_cast<T>(kBatchNormMomentum);

  BasicTensor<T> y(x.shape());
  BasicTensor<T> xhat(x.shape());
  std::vector<T> inv_std(C);

  for (std::size_t c = 0; c < C; ++c) {
    T mean, var;
    if (mode == Mode::Train) {
      double sum = 0.0;
      for (std::size_t n = 0; n < N; ++n) {
        const T* p = x.data() + (n * C + c) * HW;
        for (std::size_t i = 0; i < HW; ++i) sum += p[i];
      }
      const double m = sum / static_cast<double>(M);
      double sq = 0.0;
      for (std::size_t n = 0; n < N; ++n) {
        const T* p = x.data() + (n * C + c) * HW;
        for (std::size_t i = 0; i < HW; ++i) sq += (p[i] - m) * (p[i] - m);
      }
      mean = static_cast<T>(m);
      var = static_cast<T>(sq / static_cast<double>(M));
      const double unbiased = M > 1 ? sq / static_cast<double>(M - 1) : sq;
      state.running_mean[c] = (T(1) - momentum) * state.running_mean[c] + momentum * mean;
      state.running_var[c] =
          (T(1) - momentum) * state.running_var[c] + momentum * static_cast<T>(unbiased);
    } else {
      mean = state.running_mean[c];
      var = state.running_var[c];
    }
    const T istd = T(1) / std::sqrt(var + eps);
    inv_std[c] = istd;
    for (std::size_t n = 0; n < N; ++n) {
      const std::size_t off = (n * C + c) * HW;
      for (std::size_t i = 0; i < HW; ++i) {
        const T h = (x[off + i] - mean) * istd;
        xhat[off + i] = h;
        y[off + i] = gamma[c] * h + beta[c];
      }
    }
  }
  if (cache) {
    cache->mode = mode;
    cache->normalized = std::move(xhat);
    cache->inv_std = std::move(inv_std);
  }
  return y;
}

template <typename T>
BasicTensor<T> batchnorm2d(const BasicTensor<T>& x, const BasicTensor<T>& gamma,
                           const BasicTensor<T>& beta, const BatchNormState<T>& state,
                           BatchNormCache<T>* cache) {
  BatchNormState<T> unused = state;
  return batchnorm2d(x, gamma, beta, unused, Mode::Eval, cache);
}

template <typename T>
BatchNormGrads<T> batchnorm2d_backward(const BatchNormCache<T>& cache, const BasicTensor<T>& gamma,
                                       const BasicTensor<T>& grad_out) {
  cache.normalized.require_same_shape(grad_out, "batchnorm2d_backward");
  const auto& xhat = cache.normalized;
  const std::size_t N = xhat.dim(0), C = xhat.dim(1), HW = xhat.dim(2) * xhat.dim(3);
  const double M = static_cast<double>(N * HW);

  BatchNormGrads<T> g{BasicTensor<T>(xhat.shape()), BasicTensor<T>({C}), BasicTensor<T>({C})};
  for (std::size_t c = 0; c < C; ++c) {
    double sum_dy = 0.0, sum_dy_xhat = 0.0;
    for (std::size_t n = 0; n < N; ++n) {
      const std::size_t off = (n * C + c) * HW;
      for (std::size_t i = 0; i < HW; ++i) {
        sum_dy += grad_out[off + i];
        sum_dy_xhat += grad_out[off + i] * xhat[off + i];
      }
    }
    g.beta[c] = static_cast<T>(sum_dy);
    g.gamma[c] = static_cast<T>(sum_dy_xhat);
    const T scale = gamma[c] * cache.inv_std[c];
    for (std::size_t n = 0; n < N; ++n) {
      const std::size_t off = (n * C + c) * HW;
      for (std::size_t i = 0; i < HW; ++i) {
        if (cache.mode == Mode::Train) {
          g.input[off + i] = static_cast<T>(
              scale * (grad_out[off + i] - sum_dy / M - xhat[off + i] * sum_dy_xhat / M));
        } else {
          g.input[off + i] = scale * grad_out[off + i];
        }
      }
    }
  }
  return g;
}

// ---------------------------------------------------------------------------

template <typename T>
BasicTensor<T> sigmoid(const BasicTensor<T>& x) {
  BasicTensor<T> y(x.shape());
  for (std::size_t i = 0; i < x.size(); ++i) {
    const T v = x[i];
    if (v >= T(0)) {
      y[i] = T(1) / (T(1) + std::exp(-v));
    } else {
      const T e = std::exp(v);
      y[i] = e / (T(1) + e);
    }
  }
  return y;
}

template <typename T>
BasicTensor<T> sigmoid_backward(const BasicTensor<T>& s, const BasicTensor<T>& grad_out) {
  s.require_same_shape(grad_out, "sigmoid_backward");
  BasicTensor<T> dx(s.shape());
  for (std::size_t i = 0; i < s.size(); ++i) dx[i] = grad_out[i] * s[i] * (T(1) - s[i]);
  return dx;
}

// ---------------------------------------------------------------------------

namespace {

void require_windows(const Shape& s, std::size_t n, const char* what) {
  require_rank4(s, what);
  require(n > 0 && s[2] % n == 0 && s[3] % n == 0,
          std::string(what) + ": window " + std::to_string(n) + " does not divide " +
              shape_to_string(s));
}

}  // namespace

template <typename T>
BasicTensor<T> window_partition(const BasicTensor<T>& x, std::size_t n) {
  require_windows(x.shape(), n, "window_partition");
  const std::size_t N = x.dim(0), C = x.dim(1), H = x.dim(2), W = x.dim(3);
  const std::size_t wh = H / n, ww = W / n;
  BasicTensor<T> out({N * C * wh * ww, n * n});
  std::size_t row = 0;
  for (std::size_t b = 0; b < N; ++b)
    for (std::size_t c = 0; c < C; ++c)
      for (std::size_t wy = 0; wy < wh; ++wy)
        for (std::size_t wx = 0; wx < ww; ++wx, ++row)
          for (std::size_t iy = 0; iy < n; ++iy)
            for (std::size_t ix = 0; ix < n; ++ix)
              out[row * n * n + iy * n + ix] = x(b, c, wy * n + iy, wx * n + ix);
  return out;
}

template <typename T>
BasicTensor<T> window_merge(const BasicTensor<T>& windows, const Shape& shape, std::size_t n) {
  require_windows(shape, n, "window_merge");
  const std::size_t N = shape[0], C = shape[1], H = shape[2], W = shape[3];
  const std::size_t wh = H / n, ww = W / n;
  require(windows.shape() == Shape{N * C * wh * ww, n * n},
          "window_merge: windows shape " + shape_to_string(windows.shape()));
  BasicTensor<T> x(shape);
  std::size_t row = 0;
  for (std::size_t b = 0; b < N; ++b)
    for (std::size_t c = 0; c < C; ++c)
      for (std::size_t wy = 0; wy < wh; ++wy)
        for (std::size_t wx = 0; wx < ww; ++wx, ++row)
          for (std::size_t iy = 0; iy < n; ++iy)
            for (std::size_t ix = 0; ix < n; ++ix)
              x(b, c, wy * n + iy, wx * n + ix) = windows[row * n * n + iy * n + ix];
  return x;
}

// ---------------------------------------------------------------------------

namespace {

// Token order: window (b, wy, wx) row-major, then position (iy, ix) inside it.
template <typename T>
void gather_tokens(const BasicTensor<T>& x, std::size_t n, std::vector<T>& tokens) {
  const std::size_t N = x.dim(0), C = x.dim(1), H = x.dim(2), W = x.dim(3);
  tokens.assign(N * H * W * C, T(0));
  std::size_t t = 0;
  for (std::size_t b = 0; b < N; ++b)
    for (std::size_t wy = 0; wy < H / n; ++wy)
      for (std::size_t wx = 0; wx < W / n; ++wx)
        for (std::size_t iy = 0; iy < n; ++iy)
          for (std::size_t ix = 0; ix < n; ++ix, ++t)
            for (std::size_t c = 0; c < C; ++c) tokens[t * C + c] = x(b, c, wy * n + iy, wx * n + ix);
}

template <typename T>
void scatter_tokens(const std::vector<T>& tokens, std::size_t n, BasicTensor<T>& x) {
  const std::size_t N = x.dim(0), C = x.dim(1), H = x.dim(2), W = x.dim(3);
  std::size_t t = 0;
  for (std::size_t b = 0; b < N; ++b)
    for (std::size_t wy = 0; wy < H / n; ++wy)
      for (std::size_t wx = 0; wx < W / n; ++wx)
        for (std::size_t iy = 0; iy < n; ++iy)
          for (std::size_t ix = 0; ix < n; ++ix, ++t)
            for (std::size_t c = 0; c < C; ++c) x(b, c, wy * n + iy, wx * n + ix) += tokens[t * C + c];
}

// valid[l] for token l of window (wy, wx)
std::vector<char> window_validity(std::size_t n, std::size_t wy, std::size_t wx, std::size_t valid_h,
                                  std::size_t valid_w) {
  std::vector<char> valid(n * n);
  for (std::size_t iy = 0; iy < n; ++iy)
    for (std::size_t ix = 0; ix < n; ++ix)
      valid[iy * n + ix] = (wy * n + iy < valid_h) && (wx * n + ix < valid_w);
  return valid;
}

}  // namespace

template <typename T>
BasicTensor<T> window_attention(const BasicTensor<T>& x, const AttentionWeights<T>& weights,
                                std::size_t n, AttentionCache<T>* cache, std::size_t valid_h,
                                std::size_t valid_w) {
  require_windows(x.shape(), n, "window_attention");
  const std::size_t N = x.dim(0), C = x.dim(1), H = x.dim(2), W = x.dim(3);
  for (const auto* w : {&weights.wq, &weights.wk, &weights.wv})
    require(w->shape() == Shape{C, C}, "window_attention projection must be (C, C), got " +
                                           shape_to_string(w->shape()));
  if (valid_h == 0) valid_h = H;
  if (valid_w == 0) valid_w = W;

  const Index L = static_cast<Index>(n * n);
  const Index tokens_total = static_cast<Index>(N * H * W);
  const Index Ci = static_cast<Index>(C);
  const T scale = T(1) / std::sqrt(static_cast<T>(C));

  AttentionCache<T> local;
  AttentionCache<T>& c = cache ? *cache : local;
  c.shape = x.shape();
  c.window = n;
  c.valid_h = valid_h;
  c.valid_w = valid_w;
  gather_tokens(x, n, c.tokens);
  c.q.assign(c.tokens.size(), T(0));
  c.k.assign(c.tokens.size(), T(0));
  c.v.assign(c.tokens.size(), T(0));

  ConstMapRM<T> X(c.tokens.data(), tokens_total, Ci);
  MapRM<T>(c.q.data(), tokens_total, Ci).noalias() = X * ConstMapRM<T>(weights.wq.data(), Ci, Ci).transpose();
  MapRM<T>(c.k.data(), tokens_total, Ci).noalias() = X * ConstMapRM<T>(weights.wk.data(), Ci, Ci).transpose();
  MapRM<T>(c.v.data(), tokens_total, Ci).noalias() = X * ConstMapRM<T>(weights.wv.data(), Ci, Ci).transpose();

  const std::size_t windows = N * (H / n) * (W / n);
  c.probs.assign(windows * L * L, T(0));
  std::vector<T> out(c.tokens.size(), T(0));

  std::size_t widx = 0;
  for (std::size_t b = 0; b < N; ++b) {
    for (std::size_t wy = 0; wy < H / n; ++wy) {
      for (std::size_t wx = 0; wx < W / n; ++wx, ++widx) {
        const auto valid = window_validity(n, wy, wx, valid_h, valid_w);
        if (std::none_of(valid.begin(), valid.end(), [](char v) { return v; })) continue;
        const Index first = static_cast<Index>(widx) * L;
        ConstMapRM<T> Q(c.q.data() + first * Ci, L, Ci);
        ConstMapRM<T> K(c.k.data() + first * Ci, L, Ci);
        ConstMapRM<T> V(c.v.data() + first * Ci, L, Ci);
        MapRM<T> A(c.probs.data() + widx * L * L, L, L);
        A.noalias() = (Q * K.transpose()) * scale;
        for (Index i = 0; i < L; ++i) {
          T mx = -std::numeric_limits<T>::infinity();
          for (Index j = 0; j < L; ++j)
            if (valid[j]) mx = std::max(mx, A(i, j));
          T sum = T(0);
          for (Index j = 0; j < L; ++j) {
            A(i, j) = valid[j] ? std::exp(A(i, j) - mx) : T(0);
            sum += A(i, j);
          }
          A.row(i) /= sum;
        }
        MapRM<T>(out.data() + first * Ci, L, Ci).noalias() = A * V;
      }
    }
  }

  BasicTensor<T> y = x;  // residual
  scatter_tokens(out, n, y);
  return y;
}

template <typename T>
AttentionGrads<T> window_attention_backward(const AttentionCache<T>& cache,
                                            const AttentionWeights<T>& weights,
                                            const BasicTensor<T>& grad_out) {
  require(grad_out.shape() == cache.shape,
          "window_attention_backward: grad_out shape " + shape_to_string(grad_out.shape()));
  const std::size_t n = cache.window;
  const std::size_t N = cache.shape[0], C = cache.shape[1], H = cache.shape[2], W = cache.shape[3];
  const Index L = static_cast<Index>(n * n);
  const Index tokens_total = static_cast<Index>(N * H * W);
  const Index Ci = static_cast<Index>(C);
  const T scale = T(1) / std::sqrt(static_cast<T>(C));

  std::vector<T> dout;
  gather_tokens(grad_out, n, dout);
  std::vector<T> dq(dout.size(), T(0)), dk(dout.size(), T(0)), dv(dout.size(), T(0));

  MatRM<T> dA(L, L), dS(L, L);
  const std::size_t windows = N * (H / n) * (W / n);
  for (std::size_t widx = 0; widx < windows; ++widx) {
    const Index first = static_cast<Index>(widx) * L;
    ConstMapRM<T> A(cache.probs.data() + widx * L * L, L, L);
    ConstMapRM<T> Q(cache.q.data() + first * Ci, L, Ci);
    ConstMapRM<T> K(cache.k.data() + first * Ci, L, Ci);
    ConstMapRM<T> V(cache.v.data() + first * Ci, L, Ci);
    ConstMapRM<T> dO(dout.data() + first * Ci, L, Ci);

    dA.noalias() = dO * V.transpose();
    MapRM<T>(dv.data() + first * Ci, L, Ci).noalias() = A.transpose() * dO;
    for (Index i = 0; i < L; ++i) {
      const T dot = (dA.row(i).array() * A.row(i).array()).sum();
      dS.row(i) = A.row(i).array() * (dA.row(i).array() - dot);
    }
    dS *= scale;
    MapRM<T>(dq.data() + first * Ci, L, Ci).noalias() = dS * K;
    MapRM<T>(dk.data() + first * Ci, L, Ci).noalias() = dS.transpose() * Q;
  }

  AttentionGrads<T> g{BasicTensor<T>(cache.shape), BasicTensor<T>({C, C}), BasicTensor<T>({C, C}),
                      BasicTensor<T>({C, C})};
  ConstMapRM<T> X(cache.tokens.data(), tokens_total, Ci);
  ConstMapRM<T> dQ(dq.data(), tokens_total, Ci), dK(dk.data(), tokens_total, Ci),
      dV(dv.data(), tokens_total, Ci);
  MapRM<T>(g.wq.data(), Ci, Ci).noalias() = dQ.transpose() * X;
  MapRM<T>(g.wk.data(), Ci, Ci).noalias() = dK.transpose() * X;
  MapRM<T>(g.wv.data(), Ci, Ci).noalias() = dV.transpose() * X;

  std::vector<T> dx(dout.size());
  MapRM<T> dX(dx.data(), tokens_total, Ci);
  dX.noalias() = dQ * ConstMapRM<T>(weights.wq.data(), Ci, Ci);
  dX.noalias() += dK * ConstMapRM<T>(weights.wk.data(), Ci, Ci);
  dX.noalias() += dV * ConstMapRM<T>(weights.wv.data(), Ci, Ci);

  g.input = grad_out;  // residual path
  scatter_tokens(dx, n, g.input);
  return g;
}

// ---------------------------------------------------------------------------

template <typename T>
BasicTensor<T> concat_channels(const BasicTensor<T>& a, const BasicTensor<T>& b) {
  require_rank4(a.shape(), "concat_channels");
  require_rank4(b.shape(), "concat_channels");
  require(a.dim(0) == b.dim(0) && a.dim(2) == b.dim(2) && a.dim(3) == b.dim(3),
          "concat_channels spatial mismatch: " + shape_to_string(a.shape()) + " vs " +
              shape_to_string(b.shape()));
  const std::size_t N = a.dim(0), Ca = a.dim(1), Cb = b.dim(1), HW = a.dim(2) * a.dim(3);
  BasicTensor<T> y({N, Ca + Cb, a.dim(2), a.dim(3)});
  for (std::size_t n = 0; n < N; ++n) {
    std::copy_n(a.data() + n * Ca * HW, Ca * HW, y.data() + n * (Ca + Cb) * HW);
    std::copy_n(b.data() + n * Cb * HW, Cb * HW, y.data() + (n * (Ca + Cb) + Ca) * HW);
  }
  return y;
}

template <typename T>
std::pair<BasicTensor<T>, BasicTensor<T>> split_channels(const BasicTensor<T>& grad,
                                                         std::size_t channels_a) {
  require_rank4(grad.shape(), "split_channels");
  require(channels_a <= grad.dim(1), "split_channels: split point beyond channel count");
  const std::size_t N = grad.dim(0), C = grad.dim(1), HW = grad.dim(2) * grad.dim(3);
  const std::size_t Cb = C - channels_a;
  BasicTensor<T> a({N, channels_a, grad.dim(2), grad.dim(3)});
  BasicTensor<T> b({N, Cb, grad.dim(2), grad.dim(3)});
  for (std::size_t n = 0; n < N; ++n) {
    std::copy_n(grad.data() + n * C * HW, channels_a * HW, a.data() + n * channels_a * HW);
    std::copy_n(grad.data() + (n * C + channels_a) * HW, Cb * HW, b.data() + n * Cb * HW);
  }
  return {std::move(a), std::move(b)};
}

template <typename T>
BasicTensor<T> pad_spatial(const BasicTensor<T>& x, std::size_t height, std::size_t width) {
  require_rank4(x.shape(), "pad_spatial");
  require(height >= x.dim(2) && width >= x.dim(3), "pad_spatial cannot shrink");
  BasicTensor<T> y({x.dim(0), x.dim(1), height, width});
  for (std::size_t p = 0; p < x.dim(0) * x.dim(1); ++p)
    for (std::size_t h = 0; h < x.dim(2); ++h)
      std::copy_n(x.data() + (p * x.dim(2) + h) * x.dim(3), x.dim(3),
                  y.data() + (p * height + h) * width);
  return y;
}

template <typename T>
BasicTensor<T> crop_spatial(const BasicTensor<T>& x, std::size_t height, std::size_t width) {
  require_rank4(x.shape(), "crop_spatial");
  require(height <= x.dim(2) && width <= x.dim(3), "crop_spatial cannot grow");
  BasicTensor<T> y({x.dim(0), x.dim(1), height, width});
  for (std::size_t p = 0; p < x.dim(0) * x.dim(1); ++p)
    for (std::size_t h = 0; h < height; ++h)
      std::copy_n(x.data() + (p * x.dim(2) + h) * x.dim(3), width,
                  y.data() + (p * height + h) * width);
  return y;
}

// ---------------------------------------------------------------------------

#define VELOFILL_INSTANTIATE_NN(T)                                                              \
  template BasicTensor<T> conv2d_forward(const BasicTensor<T>&, const BasicTensor<T>&,         \
                                         const BasicTensor<T>&);                               \
  template ConvGrads<T> conv2d_backward(const BasicTensor<T>&, const BasicTensor<T>&,          \
                                        const BasicTensor<T>&);                                \
  template BasicTensor<T> conv_transpose2d(const BasicTensor<T>&, const BasicTensor<T>&);      \
  template ConvTransposeGrads<T> conv_transpose2d_backward(                                    \
      const BasicTensor<T>&, const BasicTensor<T>&, const BasicTensor<T>&);                    \
  template PoolResult<T> maxpool2x2(const BasicTensor<T>&);                                    \
  template BasicTensor<T> maxpool2x2_backward(const PoolResult<T>&, const BasicTensor<T>&);    \
  template BasicTensor<T> batchnorm2d(const BasicTensor<T>&, const BasicTensor<T>&,            \
                                      const BasicTensor<T>&, BatchNormState<T>&, Mode,         \
                                      BatchNormCache<T>*);                                     \
  template BasicTensor<T> batchnorm2d(const BasicTensor<T>&, const BasicTensor<T>&,            \
                                      const BasicTensor<T>&, const BatchNormState<T>&,         \
                                      BatchNormCache<T>*);                                     \
  template BatchNormGrads<T> batchnorm2d_backward(const BatchNormCache<T>&,                    \
                                                  const BasicTensor<T>&, const BasicTensor<T>&); \
  template BasicTensor<T> sigmoid(const BasicTensor<T>&);                                      \
  template BasicTensor<T> sigmoid_backward(const BasicTensor<T>&, const BasicTensor<T>&);      \
  template BasicTensor<T> window_partition(const BasicTensor<T>&, std::size_t);                \
  template BasicTensor<T> window_merge(const BasicTensor<T>&, const Shape&, std::size_t);      \
  template BasicTensor<T> window_attention(const BasicTensor<T>&, const AttentionWeights<T>&,  \
                                           std::size_t, AttentionCache<T>*, std::size_t,       \
                                           std::size_t);                                       \
  template AttentionGrads<T> window_attention_backward(                                        \
      const AttentionCache<T>&, const AttentionWeights<T>&, const BasicTensor<T>&);            \
  template BasicTensor<T> concat_channels(const BasicTensor<T>&, const BasicTensor<T>&);       \
  template std::pair<BasicTensor<T>, BasicTensor<T>> split_channels(const BasicTensor<T>&,     \
                                                                    std::size_t);              \
  template BasicTensor<T> pad_spatial(const BasicTensor<T>&, std::size_t, std::size_t);        \
  template BasicTensor<T> crop_spatial(const BasicTensor<T>&, std::size_t, std::size_t);

VELOFILL_INSTANTIATE_NN(float)
VELOFILL_INSTANTIATE_NN(double)

#undef VELOFILL_INSTANTIATE_NN

}  // namespace velofill::nn
