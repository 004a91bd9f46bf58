#include <gtest/gtest.h>

#include <cstring>
#include <fstream>
#include <random>
#include <set>

#include "test_support.hpp"
#include "velofill/checkpoint.hpp"
#include "velofill/losses.hpp"
#include "velofill/pianoroll.hpp"
#include "velofill/unet.hpp"

using namespace velofill;
using velofill::fixtures::dot;
using velofill::fixtures::numeric_gradient;
using velofill::fixtures::random_tensor;
using velofill::fixtures::relative_error;
using velofill::fixtures::to_vector;

namespace {

Tensor binary_rolls(std::size_t n, std::uint64_t seed, double density = 0.1) {
  std::mt19937_64 rng(seed);
  std::bernoulli_distribution on(density);
  Tensor x({n, 1, 96, 88});
  for (std::size_t i = 0; i < x.size(); ++i) x[i] = on(rng) ? 1.0f : 0.0f;
  return x;
}

std::vector<std::pair<std::string, TensorD*>> named_parameters(UNetModel<double>& m) {
  std::vector<std::pair<std::string, TensorD*>> out;
  m.weights.for_each_parameter([&](const std::string& name, TensorD& t) { out.emplace_back(name, &t); });
  return out;
}

}  // namespace

TEST(UNet, DefaultParameterCount) {
  const UNet m = build_unet<float>(UNetConfig{}, 42);
  // encoder 1->16->32->64, bottleneck 128, attention 3x128^2, mirrored decoder, 1x1 head
  EXPECT_EQ(m.weights.parameter_count(), 661217u);
}

TEST(UNet, ParameterNamesAreStableAndUnique) {
  const UNet m = build_unet<float>(UNetConfig{}, 1);
  std::vector<std::string> names;
  m.weights.for_each_parameter([&](const std::string& n, const Tensor&) { names.push_back(n); });
  EXPECT_EQ(names.front(), "enc0.conv1.weight");
  EXPECT_EQ(names.back(), "head.bias");
  std::set<std::string> unique(names.begin(), names.end());
  EXPECT_EQ(unique.size(), names.size());
  EXPECT_TRUE(unique.count("attn.wq"));
  EXPECT_TRUE(unique.count("up2.weight"));
}

TEST(UNet, SeedDeterminism) {
  const UNet a = build_unet<float>(UNetConfig{}, 42), b = build_unet<float>(UNetConfig{}, 42);
  const UNet c = build_unet<float>(UNetConfig{}, 43);
  std::vector<const Tensor*> ta, tb, tc;
  a.weights.for_each_parameter([&](const std::string&, const Tensor& t) { ta.push_back(&t); });
  b.weights.for_each_parameter([&](const std::string&, const Tensor& t) { tb.push_back(&t); });
  c.weights.for_each_parameter([&](const std::string&, const Tensor& t) { tc.push_back(&t); });
  bool any_diff = false;
  for (std::size_t i = 0; i < ta.size(); ++i) {
    EXPECT_EQ(*ta[i], *tb[i]);
    any_diff = any_diff || !(*ta[i] == *tc[i]);
  }
  EXPECT_TRUE(any_diff);
}

TEST(UNet, InitializationBounds) {
  const UNet m = build_unet<float>(UNetConfig{}, 5);
  const auto& w = m.weights.encoders[1].conv1.weight;  // fan_in = 16 * 9
  const float bound = 1.0f / std::sqrt(16.0f * 9.0f);
  for (float v : w.values()) EXPECT_LE(std::abs(v), bound);
  for (float v : m.weights.encoders[0].bn1.gamma.values()) EXPECT_EQ(v, 1.0f);
  for (float v : m.weights.encoders[0].bn1.beta.values()) EXPECT_EQ(v, 0.0f);
}

TEST(UNet, ConfigValidation) {
  UNetConfig deep;
  deep.depth = 4;  // 88 / 16 is not an integer
  EXPECT_THROW(build_unet<float>(deep, 1), std::invalid_argument);
  UNetConfig zero;
  zero.base_channels = 0;
  EXPECT_THROW(zero.validate(), std::invalid_argument);
  UNetConfig ok;
  ok.depth = 2;
  ok.window_size = 4;
  EXPECT_EQ(UNetConfig::from_text(ok.to_text()), ok);
}

TEST(UNet, SkipChannelsMatch) {
  const UNet m = build_unet<float>(UNetConfig{}, 1);
  for (int i = 0; i < 3; ++i) {
    const auto c = static_cast<std::size_t>(m.config.channels_at(i));
    EXPECT_EQ(m.weights.decoders[i].conv1.weight.dim(1), 2 * c);
    EXPECT_EQ(m.weights.upsamplers[i].dim(1), c);
  }
}

TEST(UNet, ForwardShapeAndRange) {
  UNet m = build_unet<float>(UNetConfig{}, 42);
  const Tensor zeros({3, 1, 96, 88});
  for (const Tensor& x : {zeros, binary_rolls(3, 9)}) {
    const Tensor y = forward(m, x, nn::Mode::Train);
    ASSERT_EQ(y.shape(), (Shape{3, 1, 96, 88}));
    for (float v : y.values()) {
      ASSERT_TRUE(std::isfinite(v));
      ASSERT_GT(v, 0.0f);
      ASSERT_LT(v, 1.0f);
    }
  }
  EXPECT_THROW(forward(m, Tensor({1, 1, 96, 87}), nn::Mode::Eval), std::invalid_argument);
  EXPECT_THROW(forward(m, Tensor({1, 2, 96, 88}), nn::Mode::Eval), std::invalid_argument);
}

TEST(UNet, EvalForwardIsDeterministic) {
  const UNet m = build_unet<float>(UNetConfig{}, 42);
  const Tensor x = binary_rolls(2, 4);
  EXPECT_EQ(forward(m, x), forward(m, x));
}

TEST(UNet, AllWindowSizesRunAtTheBottleneck) {
  const Tensor x = binary_rolls(1, 8);
  for (int n : {1, 2, 4, 8}) {
    UNetConfig cfg;
    cfg.window_size = n;
    const UNet m = build_unet<float>(cfg, 3);
    const Tensor y = forward(m, x);
    EXPECT_EQ(y.shape(), x.shape()) << n;
    for (float v : y.values()) ASSERT_TRUE(v > 0.0f && v < 1.0f) << n;
  }
}

TEST(UNet, EndToEndGradientCheck) {
  UNetConfig cfg;
  cfg.depth = 2;
  cfg.base_channels = 2;
  cfg.window_size = 2;
  UNetModel<double> m = build_unet<double>(cfg, 17);
  std::mt19937_64 rng(23);
  TensorD x = random_tensor({2, 1, 8, 8}, rng, 0.0, 1.0);
  const TensorD r = random_tensor({2, 1, 8, 8}, rng);

  UNetCache<double> cache;
  forward(m, x, nn::Mode::Train, &cache);
  TensorD grad_x;
  auto grads = backward(static_cast<const UNetModel<double>&>(m), cache, r, &grad_x);
  std::vector<TensorD*> analytic;
  grads.for_each_parameter([&](const std::string&, TensorD& t) { analytic.push_back(&t); });

  auto loss = [&] { return dot(r, forward(m, x, nn::Mode::Train)); };
  const auto params = named_parameters(m);
  ASSERT_EQ(params.size(), analytic.size());
  for (std::size_t i = 0; i < params.size(); ++i) {
    auto* p = params[i].second;
    const auto numeric = numeric_gradient(std::span<double>(p->data(), p->size()), loss);
    EXPECT_LT(relative_error(to_vector(*analytic[i]), numeric), 1e-3) << params[i].first;
  }
  const auto numeric_x = numeric_gradient(std::span<double>(x.data(), x.size()), loss);
  EXPECT_LT(relative_error(to_vector(grad_x), numeric_x), 1e-3);
}

TEST(UNet, GradientThroughCombinedLoss) {
  UNetConfig cfg;
  cfg.depth = 2;
  cfg.base_channels = 2;
  cfg.window_size = 1;
  UNetModel<double> m = build_unet<double>(cfg, 5);
  TensorD x({1, 1, 8, 8});
  Roll onset(8, 8), vel(8, 8);
  std::mt19937_64 rng(24);
  std::uniform_int_distribution<int> v(1, 127);
  for (int t = 0; t < 8; ++t)
    for (int p = 0; p < 8; p += 1 + t % 3) {
      x(0, 0, t, p) = 1.0;
      onset(t, p) = (t + p) % 2;
      vel(t, p) = normalize_velocity(v(rng));
    }
  auto to_roll = [](const TensorD& y) {
    Roll r(8, 8);
    std::copy(y.data(), y.data() + 64, r.data().begin());
    return r;
  };
  UNetCache<double> cache;
  const TensorD y = forward(m, x, nn::Mode::Train, &cache);
  const LossValue lv = combined_loss(vel, to_roll(y), onset, vel);
  TensorD gy({1, 1, 8, 8}, lv.gradient.data());
  auto grads = backward(static_cast<const UNetModel<double>&>(m), cache, gy);
  auto loss = [&] { return combined_loss(vel, to_roll(forward(m, x, nn::Mode::Train)), onset, vel).total; };
  std::vector<TensorD*> analytic;
  grads.for_each_parameter([&](const std::string&, TensorD& t) { analytic.push_back(&t); });
  const auto params = named_parameters(m);
  for (std::size_t i = 0; i < params.size(); ++i) {
    auto* p = params[i].second;
    const auto numeric = numeric_gradient(std::span<double>(p->data(), p->size()), loss);
    EXPECT_LT(relative_error(to_vector(*analytic[i]), numeric), 1e-3) << params[i].first;
  }
}

TEST(UNet, CastRoundTrip) {
  const UNet m = build_unet<float>(UNetConfig{}, 2);
  const UNet back = m.cast<double>().cast<float>();
  EXPECT_EQ(serialize_checkpoint(back), serialize_checkpoint(m));
}

// ---------------------------------------------------------------------------

namespace {

// Bitwise reflected CRC-32 (polynomial 0xEDB88320).
std::uint32_t crc32_oracle(const std::uint8_t* p, std::size_t n) {
  std::uint32_t crc = 0xFFFFFFFFu;
  for (std::size_t i = 0; i < n; ++i) {
    crc ^= p[i];
    for (int k = 0; k < 8; ++k) crc = (crc >> 1) ^ (0xEDB88320u & (0u - (crc & 1u)));
  }
  return ~crc;
}

void put_le32(std::vector<std::uint8_t>& b, std::size_t at, std::uint32_t v) {
  for (int i = 0; i < 4; ++i) b[at + i] = static_cast<std::uint8_t>(v >> (8 * i));
}

std::uint32_t get_le32(const std::vector<std::uint8_t>& b, std::size_t at) {
  std::uint32_t v = 0;
  for (int i = 0; i < 4; ++i) v |= static_cast<std::uint32_t>(b[at + i]) << (8 * i);
  return v;
}

CheckpointError::Kind load_error(const std::vector<std::uint8_t>& bytes) {
  try {
    deserialize_checkpoint(bytes);
  } catch (const CheckpointError& e) {
    return e.kind();
  }
  ADD_FAILURE() << "checkpoint loaded";
  return CheckpointError::Kind::CorruptCheckpoint;
}

}  // namespace

TEST(Checkpoint, RoundTripIsBitExact) {
  fixtures::TempDir dir("ckpt");
  UNet m = build_unet<float>(UNetConfig{}, 42);
  forward(m, binary_rolls(2, 1), nn::Mode::Train);  // move the running stats off identity
  save_checkpoint(m, dir / "m.vlfl");
  const UNet r = load_checkpoint(dir / "m.vlfl");
  EXPECT_EQ(r.config, m.config);
  std::vector<const Tensor*> a, b;
  m.weights.for_each_parameter([&](const std::string&, const Tensor& t) { a.push_back(&t); });
  m.weights.for_each_buffer([&](const std::string&, const Tensor& t) { a.push_back(&t); });
  r.weights.for_each_parameter([&](const std::string&, const Tensor& t) { b.push_back(&t); });
  r.weights.for_each_buffer([&](const std::string&, const Tensor& t) { b.push_back(&t); });
  ASSERT_EQ(a.size(), b.size());
  for (std::size_t i = 0; i < a.size(); ++i)
    ASSERT_EQ(std::memcmp(a[i]->data(), b[i]->data(), a[i]->size() * sizeof(float)), 0);
  EXPECT_EQ(forward(r, binary_rolls(1, 3)), forward(static_cast<const UNet&>(m), binary_rolls(1, 3)));
}

TEST(Checkpoint, Layout) {
  const UNet m = build_unet<float>(UNetConfig{}, 1);
  const auto b = serialize_checkpoint(m);
  EXPECT_EQ(std::string(b.begin(), b.begin() + 4), "VLFL");
  EXPECT_EQ(get_le32(b, 4), kCheckpointVersion);
  const std::uint32_t len = get_le32(b, 8);
  EXPECT_EQ(UNetConfig::from_text(std::string(b.begin() + 12, b.begin() + 12 + len)), m.config);
  EXPECT_EQ(get_le32(b, b.size() - 4), crc32_oracle(b.data(), b.size() - 4));
  // first record is enc0.conv1.weight with dims (16,1,3,3)
  std::size_t at = 12 + len;
  const std::uint32_t name_len = get_le32(b, at);
  EXPECT_EQ(std::string(b.begin() + at + 4, b.begin() + at + 4 + name_len), "enc0.conv1.weight");
  at += 4 + name_len;
  EXPECT_EQ(get_le32(b, at), 4u);
  EXPECT_EQ(get_le32(b, at + 4), 16u);
  EXPECT_EQ(get_le32(b, at + 8), 1u);
}

TEST(Checkpoint, TruncatedFileIsCorrupt) {
  const auto b = serialize_checkpoint(build_unet<float>(UNetConfig{}, 1));
  for (std::size_t keep : {std::size_t{0}, std::size_t{3}, std::size_t{10}, b.size() / 2, b.size() - 1}) {
    EXPECT_EQ(load_error({b.begin(), b.begin() + static_cast<long>(keep)}),
              CheckpointError::Kind::CorruptCheckpoint)
        << keep;
  }
  fixtures::TempDir dir("trunc");
  {
    std::ofstream out(dir / "t.vlfl", std::ios::binary);
    out.write(reinterpret_cast<const char*>(b.data()), static_cast<long>(b.size() / 3));
  }
  EXPECT_THROW(load_checkpoint(dir / "t.vlfl"), CheckpointError);
}

TEST(Checkpoint, FlippedByteIsCorrupt) {
  auto b = serialize_checkpoint(build_unet<float>(UNetConfig{}, 1));
  b[b.size() / 2] ^= 0x40;
  EXPECT_EQ(load_error(b), CheckpointError::Kind::CorruptCheckpoint);
}

TEST(Checkpoint, OtherVersionIsRejected) {
  auto b = serialize_checkpoint(build_unet<float>(UNetConfig{}, 1));
  put_le32(b, 4, kCheckpointVersion + 1);
  put_le32(b, b.size() - 4, crc32_oracle(b.data(), b.size() - 4));
  EXPECT_EQ(load_error(b), CheckpointError::Kind::VersionMismatch);
}

TEST(Checkpoint, StoresItsOwnConfig) {
  fixtures::TempDir dir("cfg");
  UNetConfig cfg;
  cfg.depth = 2;
  cfg.base_channels = 4;
  cfg.window_size = 4;
  cfg.segment_duration = 5.0;
  save_checkpoint(build_unet<float>(cfg, 9), dir / "d2.vlfl");
  const UNet r = load_checkpoint(dir / "d2.vlfl");
  EXPECT_EQ(r.config, cfg);
  EXPECT_EQ(r.weights.encoders.size(), 2u);
  EXPECT_THROW(load_checkpoint(dir / "missing.vlfl"), std::runtime_error);
}
