#pragma once

#include <cstddef>
#include <utility>
#include <vector>

#include "velofill/tensor.hpp"

// Differentiable building blocks for the U-Net. Every forward has a matching
// hand-written backward; feature maps are (N, C, H, W) tensors.
namespace velofill::nn {

enum class Mode { Train, Eval };

inline constexpr double kBatchNormEps = 1e-5;
inline constexpr double kBatchNormMomentum = 0.1;

// ---------------------------------------------------------------------------
// Convolution: odd square kernel, stride 1, zero padding k/2 (same size out).

template <typename T>
struct ConvGrads {
  BasicTensor<T> input;
  BasicTensor<T> weight;
  BasicTensor<T> bias;
};

/// weights (Cout, Cin, k, k), bias (Cout).
template <typename T>
BasicTensor<T> conv2d_forward(const BasicTensor<T>& x, const BasicTensor<T>& weights,
                              const BasicTensor<T>& bias);

template <typename T>
ConvGrads<T> conv2d_backward(const BasicTensor<T>& x, const BasicTensor<T>& weights,
                             const BasicTensor<T>& grad_out);

// ---------------------------------------------------------------------------
// Transposed convolution, 4x4 kernel, stride 2, padding 1: (H, W) -> (2H, 2W).

template <typename T>
struct ConvTransposeGrads {
  BasicTensor<T> input;
  BasicTensor<T> weight;
};

/// weights (Cin, Cout, 4, 4); no bias.
template <typename T>
BasicTensor<T> conv_transpose2d(const BasicTensor<T>& x, const BasicTensor<T>& weights);

template <typename T>
ConvTransposeGrads<T> conv_transpose2d_backward(const BasicTensor<T>& x,
                                                const BasicTensor<T>& weights,
                                                const BasicTensor<T>& grad_out);

// ---------------------------------------------------------------------------
// 2x2 max pooling. Ties go to the first cell in row-major order.

template <typename T>
struct PoolResult {
  BasicTensor<T> output;
  std::vector<std::size_t> argmax;  // flat input index per output cell
  Shape input_shape;
};

template <typename T>
PoolResult<T> maxpool2x2(const BasicTensor<T>& x);

template <typename T>
BasicTensor<T> maxpool2x2_backward(const PoolResult<T>& pool, const BasicTensor<T>& grad_out);

// ---------------------------------------------------------------------------
// Batch normalization over (N, H, W) per channel.

template <typename T>
struct BatchNormState {
  BasicTensor<T> running_mean;
  BasicTensor<T> running_var;

  static BatchNormState identity(std::size_t channels) {
    return {BasicTensor<T>({channels}, T(0)), BasicTensor<T>({channels}, T(1))};
  }
};

template <typename T>
struct BatchNormCache {
  Mode mode = Mode::Train;
  BasicTensor<T> normalized;
  std::vector<T> inv_std;
};

template <typename T>
struct BatchNormGrads {
  BasicTensor<T> input;
  BasicTensor<T> gamma;
  BasicTensor<T> beta;
};

/// Train mode normalizes with batch statistics and updates `state` (momentum
/// 0.1, unbiased running variance); eval mode reads `state` only.
template <typename T>
BasicTensor<T> batchnorm2d(const BasicTensor<T>& x, const BasicTensor<T>& gamma,
                           const BasicTensor<T>& beta, BatchNormState<T>& state, Mode mode,
                           BatchNormCache<T>* cache = nullptr);

/// Eval-mode normalization with read-only running statistics.
template <typename T>
BasicTensor<T> batchnorm2d(const BasicTensor<T>& x, const BasicTensor<T>& gamma,
                           const BasicTensor<T>& beta, const BatchNormState<T>& state,
                           BatchNormCache<T>* cache = nullptr);

template <typename T>
BatchNormGrads<T> batchnorm2d_backward(const BatchNormCache<T>& cache, const BasicTensor<T>& gamma,
                                       const BasicTensor<T>& grad_out);

// ---------------------------------------------------------------------------

template <typename T>
BasicTensor<T> sigmoid(const BasicTensor<T>& x);

/// Takes the forward *output* s and returns grad_out * s * (1 - s).
template <typename T>
BasicTensor<T> sigmoid_backward(const BasicTensor<T>& s, const BasicTensor<T>& grad_out);

// ---------------------------------------------------------------------------
// Windows: (N, C, H, W) -> (N*C*(H/n)*(W/n), n*n), rows ordered (n, c, wy, wx)
// and each row holding its n x n window in row-major order.

template <typename T>
BasicTensor<T> window_partition(const BasicTensor<T>& x, std::size_t n);

template <typename T>
BasicTensor<T> window_merge(const BasicTensor<T>& windows, const Shape& shape, std::size_t n);

// ---------------------------------------------------------------------------
// Single-head scaled dot-product attention inside n x n windows, with a
// residual connection: y = x + softmax(Q K^T / sqrt(C)) V per window, where
// Q = Wq x, K = Wk x, V = Wv x act on the channel vector of each position.

template <typename T>
struct AttentionWeights {
  BasicTensor<T> wq;  // (C, C)
  BasicTensor<T> wk;
  BasicTensor<T> wv;
};

template <typename T>
struct AttentionCache {
  Shape shape;
  std::size_t window = 1;
  std::size_t valid_h = 0;
  std::size_t valid_w = 0;
  std::vector<T> tokens;  // (windows * L, C), L = n*n
  std::vector<T> q, k, v;
  std::vector<T> probs;   // (windows, L, L)
};

template <typename T>
struct AttentionGrads {
  BasicTensor<T> input;
  BasicTensor<T> wq;
  BasicTensor<T> wk;
  BasicTensor<T> wv;
};

/// `valid_h`/`valid_w` (0 = full extent) restrict which positions may be
/// attended to; positions outside are zero padding added by the caller.
template <typename T>
BasicTensor<T> window_attention(const BasicTensor<T>& x, const AttentionWeights<T>& weights,
                                std::size_t n, AttentionCache<T>* cache = nullptr,
                                std::size_t valid_h = 0, std::size_t valid_w = 0);

template <typename T>
AttentionGrads<T> window_attention_backward(const AttentionCache<T>& cache,
                                            const AttentionWeights<T>& weights,
                                            const BasicTensor<T>& grad_out);

// ---------------------------------------------------------------------------

template <typename T>
BasicTensor<T> concat_channels(const BasicTensor<T>& a, const BasicTensor<T>& b);

/// Splits a gradient of concat_channels back into (grad_a, grad_b).
template <typename T>
std::pair<BasicTensor<T>, BasicTensor<T>> split_channels(const BasicTensor<T>& grad,
                                                         std::size_t channels_a);

/// Zero-pads the bottom/right of H and W up to (height, width).
template <typename T>
BasicTensor<T> pad_spatial(const BasicTensor<T>& x, std::size_t height, std::size_t width);

/// Keeps the top-left (height, width) block.
template <typename T>
BasicTensor<T> crop_spatial(const BasicTensor<T>& x, std::size_t height, std::size_t width);

}  // namespace velofill::nn
