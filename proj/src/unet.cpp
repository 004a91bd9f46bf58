#include "velofill/unet.hpp"

#include <cmath>
#include <random>
#include <stdexcept>

#include "json.hpp"
#include "velofill/pianoroll.hpp"

namespace velofill {

void UNetConfig::validate() const {
  if (input_channels < 1 || depth < 1 || base_channels < 1 || window_size < 1)
    throw std::invalid_argument("U-Net sizes must be positive");
  if (!(segment_duration > 0.0)) throw std::invalid_argument("segment duration must be positive");
  if (depth > 16) throw std::invalid_argument("U-Net depth too large");
  const int scale = 1 << depth;
  if (kSegmentFrames % scale != 0 || kPitchCount % scale != 0)
    throw std::invalid_argument("depth " + std::to_string(depth) + " needs " +
                                std::to_string(kSegmentFrames) + "x" + std::to_string(kPitchCount) +
                                " divisible by " + std::to_string(scale));
}

std::string UNetConfig::to_text() const {
  nlohmann::ordered_json j;
  j["input_channels"] = input_channels;
  j["depth"] = depth;
  j["base_channels"] = base_channels;
  j["window_size"] = window_size;
  j["activation"] = "sigmoid";
  j["segment_duration"] = segment_duration;
  return j.dump();
}

UNetConfig UNetConfig::from_text(const std::string& text) {
  const auto j = nlohmann::json::parse(text);
  UNetConfig c;
  c.input_channels = j.at("input_channels").get<int>();
  c.depth = j.at("depth").get<int>();
  c.base_channels = j.at("base_channels").get<int>();
  c.window_size = j.at("window_size").get<int>();
  c.segment_duration = j.value("segment_duration", 10.0);
  if (j.value("activation", std::string("sigmoid")) != "sigmoid")
    throw std::invalid_argument("unsupported activation in U-Net config");
  c.validate();
  return c;
}

namespace {

template <typename T>
class Initializer {
 public:
  explicit Initializer(std::uint64_t seed) : rng_(seed) {}

  BasicTensor<T> uniform(Shape shape, std::size_t fan_in) {
    const double bound = 1.0 / std::sqrt(static_cast<double>(fan_in));
    std::uniform_real_distribution<double> dist(-bound, bound);
    BasicTensor<T> t(std::move(shape));
    for (std::size_t i = 0; i < t.size(); ++i) t[i] = static_cast<T>(dist(rng_));
    return t;
  }

  ConvLayer<T> conv(std::size_t cin, std::size_t cout, std::size_t k) {
    ConvLayer<T> layer;
    layer.weight = uniform({cout, cin, k, k}, cin * k * k);
    layer.bias = uniform({cout}, cin * k * k);
    return layer;
  }

  static BatchNormLayer<T> batchnorm(std::size_t channels) {
    return {BasicTensor<T>({channels}, T(1)), BasicTensor<T>({channels}, T(0)),
            nn::BatchNormState<T>::identity(channels)};
  }

  ConvBlock<T> block(std::size_t cin, std::size_t cout) {
    ConvBlock<T> b;
    b.conv1 = conv(cin, cout, 3);
    b.bn1 = batchnorm(cout);
    b.conv2 = conv(cout, cout, 3);
    b.bn2 = batchnorm(cout);
    return b;
  }

 private:
  std::mt19937_64 rng_;
};

template <typename T>
struct BlockOps {
  static const BasicTensor<T>& norm(const BasicTensor<T>& x, const BatchNormLayer<T>& bn,
                                    BatchNormLayer<T>* train_bn, nn::BatchNormCache<T>& cache,
                                    BasicTensor<T>& out) {
    out = train_bn ? nn::batchnorm2d(x, bn.gamma, bn.beta, train_bn->state, nn::Mode::Train, &cache)
                   : nn::batchnorm2d(x, bn.gamma, bn.beta, bn.state, &cache);
    return out;
  }

  // train_block aliases `block` in train mode and is null in eval mode.
  static BasicTensor<T> forward(const ConvBlock<T>& block, ConvBlock<T>* train_block,
                                const BasicTensor<T>& x, ConvBlockCache<T>& c) {
    c.input = x;
    c.act1 = nn::sigmoid(nn::conv2d_forward(x, block.conv1.weight, block.conv1.bias));
    norm(c.act1, block.bn1, train_block ? &train_block->bn1 : nullptr, c.bn1, c.norm1);
    c.act2 = nn::sigmoid(nn::conv2d_forward(c.norm1, block.conv2.weight, block.conv2.bias));
    BasicTensor<T> out;
    norm(c.act2, block.bn2, train_block ? &train_block->bn2 : nullptr, c.bn2, out);
    return out;
  }

  static BasicTensor<T> backward(const ConvBlock<T>& block, const ConvBlockCache<T>& c,
                                 const BasicTensor<T>& grad_out, ConvBlock<T>& g) {
    auto bn2 = nn::batchnorm2d_backward(c.bn2, block.bn2.gamma, grad_out);
    g.bn2.gamma = std::move(bn2.gamma);
    g.bn2.beta = std::move(bn2.beta);
    auto conv2 = nn::conv2d_backward(c.norm1, block.conv2.weight, nn::sigmoid_backward(c.act2, bn2.input));
    g.conv2.weight = std::move(conv2.weight);
    g.conv2.bias = std::move(conv2.bias);
    auto bn1 = nn::batchnorm2d_backward(c.bn1, block.bn1.gamma, conv2.input);
    g.bn1.gamma = std::move(bn1.gamma);
    g.bn1.beta = std::move(bn1.beta);
    auto conv1 = nn::conv2d_backward(c.input, block.conv1.weight, nn::sigmoid_backward(c.act1, bn1.input));
    g.conv1.weight = std::move(conv1.weight);
    g.conv1.bias = std::move(conv1.bias);
    return std::move(conv1.input);
  }
};

std::size_t round_up(std::size_t v, std::size_t m) { return (v + m - 1) / m * m; }

template <typename T>
BasicTensor<T> run_forward(const UNetModel<T>& model, UNetWeights<T>* train_weights,
                           const BasicTensor<T>& input, UNetCache<T>* cache_out) {
  const UNetConfig& cfg = model.config;
  const UNetWeights<T>& w = model.weights;
  const auto scale = static_cast<std::size_t>(1) << cfg.depth;
  if (input.rank() != 4 || input.dim(1) != static_cast<std::size_t>(cfg.input_channels) ||
      input.dim(2) % scale != 0 || input.dim(3) % scale != 0 || input.dim(2) == 0 ||
      input.dim(3) == 0)
    throw std::invalid_argument("U-Net input " + shape_to_string(input.shape()) +
                                " must be (N," + std::to_string(cfg.input_channels) +
                                ",H,W) with H and W divisible by " + std::to_string(scale));

  UNetCache<T> local;
  UNetCache<T>& c = cache_out ? *cache_out : local;
  const auto depth = static_cast<std::size_t>(cfg.depth);
  c.encoders.assign(depth, {});
  c.pools.assign(depth, {});
  c.decoders.assign(depth, {});
  c.up_inputs.assign(depth, {});
  c.skip_channels.assign(depth, 0);

  std::vector<BasicTensor<T>> skips(depth);
  BasicTensor<T> h = input;
  for (std::size_t i = 0; i < depth; ++i) {
    skips[i] = BlockOps<T>::forward(w.encoders[i], train_weights ? &train_weights->encoders[i] : nullptr,
                                    h, c.encoders[i]);
    c.pools[i] = nn::maxpool2x2(skips[i]);
    h = c.pools[i].output;
  }

  h = BlockOps<T>::forward(w.bottleneck, train_weights ? &train_weights->bottleneck : nullptr, h,
                           c.bottleneck);

  const auto n = static_cast<std::size_t>(cfg.window_size);
  c.bottleneck_h = h.dim(2);
  c.bottleneck_w = h.dim(3);
  const std::size_t ph = round_up(c.bottleneck_h, n), pw = round_up(c.bottleneck_w, n);
  if (ph != c.bottleneck_h || pw != c.bottleneck_w) {
    h = nn::window_attention(nn::pad_spatial(h, ph, pw), w.attention, n, &c.attention,
                             c.bottleneck_h, c.bottleneck_w);
    h = nn::crop_spatial(h, c.bottleneck_h, c.bottleneck_w);
  } else {
    h = nn::window_attention(h, w.attention, n, &c.attention);
  }

  for (std::size_t i = depth; i-- > 0;) {
    c.up_inputs[i] = h;
    BasicTensor<T> up = nn::conv_transpose2d(h, w.upsamplers[i]);
    c.skip_channels[i] = skips[i].dim(1);
    h = BlockOps<T>::forward(w.decoders[i], train_weights ? &train_weights->decoders[i] : nullptr,
                             nn::concat_channels(skips[i], up), c.decoders[i]);
  }

  c.head_input = h;
  c.output = nn::sigmoid(nn::conv2d_forward(h, w.head.weight, w.head.bias));
  return c.output;
}

}  // namespace

template <typename T>
UNetModel<T> build_unet(const UNetConfig& config, std::uint64_t seed) {
  config.validate();
  Initializer<T> init(seed);
  UNetModel<T> m;
  m.config = config;
  auto& w = m.weights;
  const auto depth = static_cast<std::size_t>(config.depth);
  auto ch = [&](std::size_t level) { return static_cast<std::size_t>(config.channels_at(static_cast<int>(level))); };

  std::size_t in = static_cast<std::size_t>(config.input_channels);
  for (std::size_t i = 0; i < depth; ++i) {
    w.encoders.push_back(init.block(in, ch(i)));
    in = ch(i);
  }
  const std::size_t bottom = ch(depth);
  w.bottleneck = init.block(in, bottom);
  w.attention.wq = init.uniform({bottom, bottom}, bottom);
  w.attention.wk = init.uniform({bottom, bottom}, bottom);
  w.attention.wv = init.uniform({bottom, bottom}, bottom);

  w.upsamplers.resize(depth);
  w.decoders.resize(depth);
  for (std::size_t i = depth; i-- > 0;) {
    w.upsamplers[i] = init.uniform({ch(i + 1), ch(i), 4, 4}, ch(i) * 16);
    w.decoders[i] = init.block(2 * ch(i), ch(i));
  }
  w.head = init.conv(ch(0), 1, 1);
  return m;
}

template <typename T>
UNetWeights<T> zero_gradients(const UNetWeights<T>& like) {
  UNetWeights<T> g = like;
  g.for_each_parameter([](const std::string&, BasicTensor<T>& t) { t.fill(T(0)); });
  g.for_each_buffer([](const std::string&, BasicTensor<T>& t) { t = BasicTensor<T>(); });
  return g;
}

template <typename T>
BasicTensor<T> forward(UNetModel<T>& model, const BasicTensor<T>& input, nn::Mode mode,
                       UNetCache<T>* cache) {
  return run_forward(model, mode == nn::Mode::Train ? &model.weights : nullptr, input, cache);
}

template <typename T>
BasicTensor<T> forward(const UNetModel<T>& model, const BasicTensor<T>& input, UNetCache<T>* cache) {
  return run_forward(model, static_cast<UNetWeights<T>*>(nullptr), input, cache);
}

template <typename T>
UNetWeights<T> backward(const UNetModel<T>& model, const UNetCache<T>& c,
                        const BasicTensor<T>& grad_output, BasicTensor<T>* grad_input) {
  const UNetWeights<T>& w = model.weights;
  UNetWeights<T> g = zero_gradients(w);
  const auto depth = static_cast<std::size_t>(model.config.depth);

  auto head = nn::conv2d_backward(c.head_input, w.head.weight, nn::sigmoid_backward(c.output, grad_output));
  g.head.weight = std::move(head.weight);
  g.head.bias = std::move(head.bias);
  BasicTensor<T> dh = std::move(head.input);

  std::vector<BasicTensor<T>> dskips(depth);
  for (std::size_t i = 0; i < depth; ++i) {
    BasicTensor<T> dcat = BlockOps<T>::backward(w.decoders[i], c.decoders[i], dh, g.decoders[i]);
    auto [dskip, dup] = nn::split_channels(dcat, c.skip_channels[i]);
    dskips[i] = std::move(dskip);
    auto up = nn::conv_transpose2d_backward(c.up_inputs[i], w.upsamplers[i], dup);
    g.upsamplers[i] = std::move(up.weight);
    dh = std::move(up.input);
  }

  const Shape& padded = c.attention.shape;
  auto att = nn::window_attention_backward(c.attention, w.attention,
                                           nn::pad_spatial(dh, padded[2], padded[3]));
  g.attention.wq = std::move(att.wq);
  g.attention.wk = std::move(att.wk);
  g.attention.wv = std::move(att.wv);
  dh = nn::crop_spatial(att.input, c.bottleneck_h, c.bottleneck_w);

  dh = BlockOps<T>::backward(w.bottleneck, c.bottleneck, dh, g.bottleneck);
  for (std::size_t i = depth; i-- > 0;) {
    dh = nn::maxpool2x2_backward(c.pools[i], dh);
    dh += dskips[i];
    dh = BlockOps<T>::backward(w.encoders[i], c.encoders[i], dh, g.encoders[i]);
  }
  if (grad_input) *grad_input = std::move(dh);
  return g;
}

#define VELOFILL_INSTANTIATE_UNET(T)                                                            \
  template UNetModel<T> build_unet<T>(const UNetConfig&, std::uint64_t);                        \
  template UNetWeights<T> zero_gradients(const UNetWeights<T>&);                                \
  template BasicTensor<T> forward(UNetModel<T>&, const BasicTensor<T>&, nn::Mode, UNetCache<T>*); \
  template BasicTensor<T> forward(const UNetModel<T>&, const BasicTensor<T>&, UNetCache<T>*);   \
  template UNetWeights<T> backward(const UNetModel<T>&, const UNetCache<T>&, const BasicTensor<T>&, \
                                   BasicTensor<T>*);

VELOFILL_INSTANTIATE_UNET(float)
VELOFILL_INSTANTIATE_UNET(double)

#undef VELOFILL_INSTANTIATE_UNET

}  // namespace velofill
