#pragma once

#include <cstddef>
#include <cstdint>
#include <string>
#include <vector>

#include "velofill/nn.hpp"
#include "velofill/tensor.hpp"

namespace velofill {

/// U-Net topology. Channels double per level: base, 2*base, ..., with
/// base * 2^depth at the bottleneck.
struct UNetConfig {
  int input_channels = 1;  // frame roll only
  int depth = 3;
  int base_channels = 16;
  int window_size = 2;
  double segment_duration = 10.0;  // seconds per 96-frame input the model was trained on

  /// Throws std::invalid_argument unless 96 x 88 inputs survive `depth`
  /// halvings and all sizes are positive.
  void validate() const;
  int channels_at(int level) const { return base_channels << level; }

  std::string to_text() const;  // JSON object
  static UNetConfig from_text(const std::string& text);

  bool operator==(const UNetConfig&) const = default;
};

template <typename T>
struct ConvLayer {
  BasicTensor<T> weight;  // (Cout, Cin, k, k)
  BasicTensor<T> bias;    // (Cout)
};

template <typename T>
struct BatchNormLayer {
  BasicTensor<T> gamma;
  BasicTensor<T> beta;
  nn::BatchNormState<T> state;  // buffers, not trained
};

/// Two (conv3x3 -> sigmoid -> batchnorm) stages.
template <typename T>
struct ConvBlock {
  ConvLayer<T> conv1;
  BatchNormLayer<T> bn1;
  ConvLayer<T> conv2;
  BatchNormLayer<T> bn2;
};

/// All tensors of a U-Net. Also used as the gradient container, in which case
/// the batch-norm buffers stay empty.
template <typename T>
struct UNetWeights {
  std::vector<ConvBlock<T>> encoders;    // level 0 .. depth-1
  ConvBlock<T> bottleneck;
  nn::AttentionWeights<T> attention;
  std::vector<BasicTensor<T>> upsamplers;  // level i: channels(i+1) -> channels(i)
  std::vector<ConvBlock<T>> decoders;      // level i: 2*channels(i) -> channels(i)
  ConvLayer<T> head;                       // 1x1 conv to one channel

  /// Visits trainable tensors as f(name, tensor) in a stable order.
  template <typename F>
  void for_each_parameter(F&& f);
  template <typename F>
  void for_each_parameter(F&& f) const;
  /// Visits batch-norm running statistics.
  template <typename F>
  void for_each_buffer(F&& f);
  template <typename F>
  void for_each_buffer(F&& f) const;

  std::size_t parameter_count() const;
};

template <typename T>
struct UNetModel {
  UNetConfig config;
  UNetWeights<T> weights;

  template <typename U>
  UNetModel<U> cast() const;
};

using UNet = UNetModel<float>;

/// Conv/attention weights and biases uniform in +-1/sqrt(fan_in); batch norm
/// gamma = 1, beta = 0, running mean 0 and variance 1.
template <typename T>
UNetModel<T> build_unet(const UNetConfig& config, std::uint64_t seed);

/// Same tree as UNetWeights but all tensors zero and buffers empty.
template <typename T>
UNetWeights<T> zero_gradients(const UNetWeights<T>& like);

template <typename T>
struct ConvBlockCache {
  BasicTensor<T> input;
  BasicTensor<T> act1;  // sigmoid outputs
  BasicTensor<T> norm1;
  BasicTensor<T> act2;
  nn::BatchNormCache<T> bn1;
  nn::BatchNormCache<T> bn2;
};

template <typename T>
struct UNetCache {
  std::vector<ConvBlockCache<T>> encoders;
  std::vector<nn::PoolResult<T>> pools;
  ConvBlockCache<T> bottleneck;
  nn::AttentionCache<T> attention;
  std::size_t bottleneck_h = 0;
  std::size_t bottleneck_w = 0;
  std::vector<BasicTensor<T>> up_inputs;
  std::vector<std::size_t> skip_channels;
  std::vector<ConvBlockCache<T>> decoders;
  BasicTensor<T> head_input;
  BasicTensor<T> output;
};

/// Train-mode (batch statistics, updates running stats) or eval-mode forward.
/// Input (N, input_channels, H, W) with H, W divisible by 2^depth; output
/// (N, 1, H, W) in (0, 1).
template <typename T>
BasicTensor<T> forward(UNetModel<T>& model, const BasicTensor<T>& input, nn::Mode mode,
                       UNetCache<T>* cache = nullptr);

/// Eval-mode forward on a read-only model.
template <typename T>
BasicTensor<T> forward(const UNetModel<T>& model, const BasicTensor<T>& input,
                       UNetCache<T>* cache = nullptr);

/// Gradients of a scalar loss given d loss / d output.
template <typename T>
UNetWeights<T> backward(const UNetModel<T>& model, const UNetCache<T>& cache,
                        const BasicTensor<T>& grad_output, BasicTensor<T>* grad_input = nullptr);

// ---------------------------------------------------------------------------

namespace detail {

template <typename W, typename F>
void visit_block(W& block, const std::string& prefix, F& f) {
  f(prefix + ".conv1.weight", block.conv1.weight);
  f(prefix + ".conv1.bias", block.conv1.bias);
  f(prefix + ".bn1.gamma", block.bn1.gamma);
  f(prefix + ".bn1.beta", block.bn1.beta);
  f(prefix + ".conv2.weight", block.conv2.weight);
  f(prefix + ".conv2.bias", block.conv2.bias);
  f(prefix + ".bn2.gamma", block.bn2.gamma);
  f(prefix + ".bn2.beta", block.bn2.beta);
}

template <typename W, typename F>
void visit_block_buffers(W& block, const std::string& prefix, F& f) {
  f(prefix + ".bn1.running_mean", block.bn1.state.running_mean);
  f(prefix + ".bn1.running_var", block.bn1.state.running_var);
  f(prefix + ".bn2.running_mean", block.bn2.state.running_mean);
  f(prefix + ".bn2.running_var", block.bn2.state.running_var);
}

template <typename Weights, typename F>
void visit_parameters(Weights& w, F& f) {
  for (std::size_t i = 0; i < w.encoders.size(); ++i)
    visit_block(w.encoders[i], "enc" + std::to_string(i), f);
  visit_block(w.bottleneck, "bottleneck", f);
  f(std::string("attn.wq"), w.attention.wq);
  f(std::string("attn.wk"), w.attention.wk);
  f(std::string("attn.wv"), w.attention.wv);
  for (std::size_t i = w.decoders.size(); i-- > 0;) {
    f("up" + std::to_string(i) + ".weight", w.upsamplers[i]);
    visit_block(w.decoders[i], "dec" + std::to_string(i), f);
  }
  f(std::string("head.weight"), w.head.weight);
  f(std::string("head.bias"), w.head.bias);
}

template <typename Weights, typename F>
void visit_buffers(Weights& w, F& f) {
  for (std::size_t i = 0; i < w.encoders.size(); ++i)
    visit_block_buffers(w.encoders[i], "enc" + std::to_string(i), f);
  visit_block_buffers(w.bottleneck, "bottleneck", f);
  for (std::size_t i = w.decoders.size(); i-- > 0;)
    visit_block_buffers(w.decoders[i], "dec" + std::to_string(i), f);
}

}  // namespace detail

template <typename T>
template <typename F>
void UNetWeights<T>::for_each_parameter(F&& f) {
  detail::visit_parameters(*this, f);
}

template <typename T>
template <typename F>
void UNetWeights<T>::for_each_parameter(F&& f) const {
  detail::visit_parameters(*this, f);
}

template <typename T>
template <typename F>
void UNetWeights<T>::for_each_buffer(F&& f) {
  detail::visit_buffers(*this, f);
}

template <typename T>
template <typename F>
void UNetWeights<T>::for_each_buffer(F&& f) const {
  detail::visit_buffers(*this, f);
}

template <typename T>
std::size_t UNetWeights<T>::parameter_count() const {
  std::size_t total = 0;
  for_each_parameter([&](const std::string&, const BasicTensor<T>& t) { total += t.size(); });
  return total;
}

template <typename T>
template <typename U>
UNetModel<U> UNetModel<T>::cast() const {
  UNetModel<U> out = build_unet<U>(config, 0);
  std::vector<const BasicTensor<T>*> src;
  weights.for_each_parameter([&](const std::string&, const BasicTensor<T>& t) { src.push_back(&t); });
  weights.for_each_buffer([&](const std::string&, const BasicTensor<T>& t) { src.push_back(&t); });
  std::size_t i = 0;
  auto assign = [&](const std::string&, BasicTensor<U>& t) { t = src[i++]->template cast<U>(); };
  out.weights.for_each_parameter(assign);
  out.weights.for_each_buffer(assign);
  return out;
}

}  // namespace velofill
