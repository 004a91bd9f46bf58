#include <gtest/gtest.h>

#include <cmath>
#include <filesystem>
#include <fstream>
#include <random>
#include <set>
#include <sstream>

#include "test_support.hpp"
#include "velofill/checkpoint.hpp"
#include "velofill/manifest.hpp"
#include "velofill/training.hpp"

using namespace velofill;
namespace fs = std::filesystem;

TEST(MakeBatches, SevenSegmentsInBatchesOfThree) {
  std::mt19937_64 rng(1);
  const std::vector<std::size_t> counts{7};
  auto batches = make_batches(counts, 3, rng);
  ASSERT_EQ(batches.size(), 3u);
  std::multiset<std::size_t> sizes;
  for (const auto& b : batches) {
    sizes.insert(b.size());
    for (std::size_t i = 1; i < b.size(); ++i) EXPECT_EQ(b[i].segment, b[i - 1].segment + 1);
    EXPECT_EQ(b.front().segment % 3, 0u);
  }
  EXPECT_EQ(sizes, (std::multiset<std::size_t>{1, 3, 3}));
}

TEST(MakeBatches, SingleSegment) {
  std::mt19937_64 rng(2);
  const std::vector<std::size_t> counts{1};
  const auto batches = make_batches(counts, 3, rng);
  ASSERT_EQ(batches.size(), 1u);
  EXPECT_EQ(batches[0], (Batch{{0, 0}}));
}

TEST(MakeBatches, CoversEverySegmentOnceWithoutMixingPieces) {
  std::mt19937_64 rng(3);
  const std::vector<std::size_t> counts{5, 0, 9, 1, 4};
  const auto batches = make_batches(counts, 3, rng);
  std::set<std::pair<std::size_t, std::size_t>> seen;
  for (const auto& b : batches) {
    ASSERT_FALSE(b.empty());
    ASSERT_LE(b.size(), 3u);
    for (const auto& ref : b) {
      EXPECT_EQ(ref.piece, b.front().piece);
      EXPECT_TRUE(seen.insert({ref.piece, ref.segment}).second);
    }
  }
  EXPECT_EQ(seen.size(), 19u);
}

TEST(MakeBatches, OrderDependsOnlyOnSeed) {
  const std::vector<std::size_t> counts{10, 10, 10};
  std::mt19937_64 a(7), b(7), c(8);
  const auto ba = make_batches(counts, 3, a), bb = make_batches(counts, 3, b), bc = make_batches(counts, 3, c);
  EXPECT_EQ(ba, bb);
  EXPECT_NE(ba, bc);
  EXPECT_THROW(make_batches(counts, 0, a), std::invalid_argument);
}

// ---------------------------------------------------------------------------

TEST(Adam, ZeroGradientLeavesParameters) {
  TensorD p({3}, {1.0, -2.0, 0.5}), g({3});
  const TensorD before = p;
  AdamState<double> s;
  std::vector<TensorD*> ps{&p};
  std::vector<const TensorD*> gs{&g};
  for (int i = 0; i < 3; ++i) adam_step<double>(ps, gs, s, 0.1);
  EXPECT_EQ(p, before);
}

TEST(Adam, MatchesHandComputedSteps) {
  TensorD p({2}, {1.0, -1.0}), g({2}, {0.5, -2.0});
  AdamState<double> s;
  std::vector<TensorD*> ps{&p};
  std::vector<const TensorD*> gs{&g};
  const double lr = 0.01;
  adam_step<double>(ps, gs, s, lr);
  // step 1: m_hat = g, v_hat = g^2, so the update is lr * g / (|g| + eps)
  EXPECT_NEAR(p[0], 1.0 - lr * 0.5 / (0.5 + 1e-8), 1e-15);
  EXPECT_NEAR(p[1], -1.0 + lr * 2.0 / (2.0 + 1e-8), 1e-15);

  const double p0 = p[0];
  g[0] = 1.5;
  adam_step<double>(ps, gs, s, lr);
  const double m = 0.9 * (0.1 * 0.5) + 0.1 * 1.5;
  const double v = 0.999 * (0.001 * 0.25) + 0.001 * 2.25;
  const double m_hat = m / (1 - 0.81), v_hat = v / (1 - 0.999 * 0.999);
  EXPECT_NEAR(p[0], p0 - lr * m_hat / (std::sqrt(v_hat) + 1e-8), 1e-15);
  EXPECT_EQ(s.step, 2);
}

TEST(Adam, DeterministicAndShapeChecked) {
  std::mt19937_64 rng(4);
  const TensorD g = fixtures::random_tensor({4, 4}, rng);
  TensorD a = fixtures::random_tensor({4, 4}, rng), b = a;
  AdamState<double> sa, sb;
  std::vector<TensorD*> pa{&a}, pb{&b};
  std::vector<const TensorD*> gs{&g};
  for (int i = 0; i < 5; ++i) {
    adam_step<double>(pa, gs, sa, 1e-3);
    adam_step<double>(pb, gs, sb, 1e-3);
  }
  EXPECT_EQ(a, b);
  TensorD wrong({3});
  std::vector<const TensorD*> bad{&wrong};
  AdamState<double> fresh;
  EXPECT_THROW(adam_step<double>(pa, bad, fresh, 1e-3), std::invalid_argument);
}

// ---------------------------------------------------------------------------

TEST(Ranking, KeepsTheKSmallest) {
  std::mt19937_64 rng(5);
  std::uniform_real_distribution<double> d(0.0, 30.0);
  CheckpointRanking ranking(3);
  std::vector<double> all;
  std::set<std::string> live;
  for (int e = 1; e <= 50; ++e) {
    const double mae = std::round(d(rng) * 4) / 4;  // force some ties
    all.push_back(mae);
    std::string evicted;
    if (ranking.offer({e, mae, "c" + std::to_string(e)}, &evicted)) live.insert("c" + std::to_string(e));
    if (!evicted.empty()) live.erase(evicted);
    auto sorted = all;
    std::sort(sorted.begin(), sorted.end());
    const auto& entries = ranking.entries();
    ASSERT_EQ(entries.size(), std::min<std::size_t>(3, all.size()));
    for (std::size_t i = 0; i < entries.size(); ++i) EXPECT_EQ(entries[i].validation_mae, sorted[i]);
    for (std::size_t i = 1; i < entries.size(); ++i) EXPECT_LE(entries[i - 1].validation_mae, entries[i].validation_mae);
    EXPECT_EQ(live.size(), entries.size());
  }
}

TEST(Ranking, TiesKeepEarlierEpoch) {
  CheckpointRanking ranking(2);
  EXPECT_TRUE(ranking.offer({1, 5.0, "a"}));
  EXPECT_TRUE(ranking.offer({2, 5.0, "b"}));
  EXPECT_FALSE(ranking.offer({3, 5.0, "c"}));
  EXPECT_EQ(ranking.entries()[0].epoch, 1);
  EXPECT_EQ(ranking.entries()[1].epoch, 2);
}

TEST(Ranking, CheckpointFileName) {
  EXPECT_EQ(checkpoint_filename(3, 12.34567), "ckpt_epoch3_vmae12.3457.vlfl");
}

// ---------------------------------------------------------------------------

TEST(Manifest, ParsesMaestroShapedCsv) {
  const std::string csv =
      "canonical_composer,canonical_title,split,year,midi_filename,audio_filename,duration\n"
      "\"Bach, J.S.\",\"Prelude \"\"C\"\"\",train,2004,2004/a.midi,2004/a.wav,10.5\n"
      "Chopin,Etude,validation,2006,2006/b.midi,2006/b.wav,20\n"
      "Liszt,\"Multi\nline\",test,2008,/abs/c.mid,c.wav,30\n";
  const DatasetManifest m = parse_manifest(csv, "/data/maestro");
  ASSERT_EQ(m.entries.size(), 3u);
  EXPECT_EQ(m.entries[0].midi_path, "/data/maestro/2004/a.midi");
  EXPECT_EQ(m.entries[0].split, Split::Train);
  EXPECT_EQ(m.entries[0].piece_id, "a");
  EXPECT_EQ(m.entries[1].split, Split::Validation);
  EXPECT_EQ(m.entries[2].midi_path, "/abs/c.mid");
  EXPECT_EQ(m.of(Split::Test).size(), 1u);
}

TEST(Manifest, RejectsBadInput) {
  EXPECT_THROW(parse_manifest("midi_filename\na.mid\n", "."), std::invalid_argument);
  EXPECT_THROW(parse_manifest("midi_filename,split\na.mid,holdout\n", "."), std::invalid_argument);
  EXPECT_THROW(parse_manifest("midi_filename,split\na.mid,train\na.mid,test\n", "."), std::invalid_argument);
  EXPECT_THROW(
      parse_manifest("midi_filename,split,piece_id\na.mid,train,x\nb.mid,test,x\n", "."),
      std::invalid_argument);
  EXPECT_EQ(parse_split("valid"), Split::Validation);
  EXPECT_STREQ(split_name(Split::Test), "test");
}

// ---------------------------------------------------------------------------

namespace {

struct ToyCorpus {
  fixtures::TempDir dir{"toy"};
  std::string manifest;
};

// Five training segments over two pieces, one validation piece, one test piece.
void write_toy_corpus(ToyCorpus& c) {
  std::mt19937_64 rng(77);
  const std::vector<std::pair<std::string, double>> files{
      {"train_a.mid", 28.0}, {"train_b.mid", 15.0}, {"val.mid", 12.0}, {"test.mid", 8.0}};
  for (const auto& [name, seconds] : files)
    write_midi_file(fixtures::random_piece(rng, static_cast<int>(seconds * 6), seconds - 1.0), c.dir / name);
  std::ofstream(c.dir / "m.csv") << "midi_filename,split\ntrain_a.mid,train\ntrain_b.mid,train\n"
                                     "val.mid,validation\ntest.mid,test\n";
  c.manifest = c.dir / "m.csv";
}

}  // namespace

TEST(Train, TwoEpochSmokeRun) {
  ToyCorpus c;
  write_toy_corpus(c);
  const DatasetManifest manifest = read_manifest(c.manifest);
  const TrainingCorpus corpus = load_corpus(manifest, {});
  EXPECT_EQ(corpus.train.size(), 2u);
  EXPECT_EQ(corpus.validation.size(), 1u);
  std::size_t segments = 0;
  for (const auto& p : corpus.train) segments += p.segments.size();
  EXPECT_EQ(segments, 5u);

  TrainConfig cfg;
  cfg.epochs = 2;
  UNet model = build_unet<float>(UNetConfig{}, cfg.seed);
  std::ostringstream log;
  const auto ranking = train(model, corpus, cfg, c.dir / "out", &log);
  EXPECT_LE(ranking.entries().size(), 2u);
  EXPECT_GE(ranking.entries().size(), 1u);
  for (const auto& e : ranking.entries()) {
    EXPECT_TRUE(std::isfinite(e.validation_mae));
    EXPECT_TRUE(fs::exists(e.path));
    EXPECT_NO_THROW(load_checkpoint(e.path));
  }
  std::istringstream lines(log.str());
  std::string line;
  int records = 0;
  while (std::getline(lines, line)) {
    EXPECT_NE(line.find("\"val_mae\""), std::string::npos);
    ++records;
  }
  EXPECT_EQ(records, 2);
}

TEST(Train, EvictedCheckpointsAreDeleted) {
  ToyCorpus c;
  write_toy_corpus(c);
  TrainConfig cfg;
  cfg.epochs = 4;
  cfg.top_k = 1;
  cfg.learning_rate = 1e-3;
  UNet model = build_unet<float>(UNetConfig{}, 1);
  const auto ranking = train(model, read_manifest(c.manifest), cfg, c.dir / "out");
  std::size_t files = 0;
  for (const auto& e : fs::directory_iterator(c.dir / "out")) files += e.path().extension() == ".vlfl";
  EXPECT_EQ(files, 1u);
  EXPECT_EQ(ranking.entries().size(), 1u);
}

TEST(Train, EmptySplitsRejected) {
  TrainingCorpus corpus;
  std::mt19937_64 rng(1);
  corpus.train.push_back(encode_piece("a", fixtures::random_piece(rng, 20, 5.0), {}));
  UNet model = build_unet<float>(UNetConfig{}, 1);
  fixtures::TempDir dir("empty");
  try {
    train(model, corpus, TrainConfig{}, dir / "out");
    FAIL();
  } catch (const TrainingError& e) {
    EXPECT_EQ(e.kind(), TrainingError::Kind::EmptySplit);
  }
  std::swap(corpus.train, corpus.validation);
  EXPECT_THROW(train(model, corpus, TrainConfig{}, dir / "out"), TrainingError);
}

TEST(Train, NonFiniteLossAborts) {
  std::mt19937_64 rng(2);
  const std::vector<EncodedPiece> pieces{encode_piece("a", fixtures::random_piece(rng, 30, 9.0), {})};
  UNet model = build_unet<float>(UNetConfig{}, 1);
  model.weights.head.bias[0] = std::nanf("");
  AdamState<float> adam;
  try {
    train_step(model, adam, pieces, Batch{{0, 0}}, TrainConfig{});
    FAIL();
  } catch (const TrainingError& e) {
    EXPECT_EQ(e.kind(), TrainingError::Kind::NonFiniteLoss);
  }
}

TEST(Train, SameSeedSameTrajectory) {
  ToyCorpus c;
  write_toy_corpus(c);
  const TrainingCorpus corpus = load_corpus(read_manifest(c.manifest), {});
  TrainConfig cfg;
  cfg.epochs = 2;
  cfg.learning_rate = 1e-3;
  std::string logs[2];
  for (int run = 0; run < 2; ++run) {
    UNet model = build_unet<float>(UNetConfig{}, cfg.seed);
    std::ostringstream log;
    train(model, corpus, cfg, c.dir / ("run" + std::to_string(run)), &log);
    logs[run] = log.str();
  }
  EXPECT_FALSE(logs[0].empty());
  EXPECT_EQ(logs[0], logs[1]);
}

TEST(Train, OverfitSingleBatchHalvesLoss) {
  std::mt19937_64 rng(31);
  const std::vector<EncodedPiece> pieces{encode_piece("dense", fixtures::dense_piece(rng, 30.0), {})};
  ASSERT_EQ(pieces[0].segments.size(), 3u);
  const Batch batch{{0, 0}, {0, 1}, {0, 2}};
  TrainConfig cfg;
  cfg.learning_rate = 1e-3;
  UNet model = build_unet<float>(UNetConfig{}, 42);
  AdamState<float> adam;
  const double first = train_step(model, adam, pieces, batch, cfg);
  double last = first;
  for (int step = 2; step <= 200; ++step) last = train_step(model, adam, pieces, batch, cfg);
  EXPECT_LE(last, 0.5 * first) << "first " << first << " last " << last;
}

// ---------------------------------------------------------------------------

TEST(Fill, KeepsTimingAndIgnoresIncomingVelocities) {
  std::mt19937_64 rng(6);
  MidiPiece p = fixtures::random_piece(rng, 120, 24.0);
  const UNet model = build_unet<float>(UNetConfig{}, 3);
  const MidiPiece a = fill_piece(model, p);
  for (auto& n : p.notes) n.velocity = 127 - n.velocity;
  const MidiPiece b = fill_piece(model, p);
  ASSERT_EQ(a.notes.size(), p.notes.size());
  for (std::size_t i = 0; i < p.notes.size(); ++i) {
    EXPECT_EQ(a.notes[i].onset_seconds, p.notes[i].onset_seconds);
    EXPECT_EQ(a.notes[i].offset_seconds, p.notes[i].offset_seconds);
    EXPECT_EQ(a.notes[i].pitch, p.notes[i].pitch);
    EXPECT_EQ(a.notes[i].velocity, b.notes[i].velocity);
    EXPECT_GE(a.notes[i].velocity, 0);
    EXPECT_LE(a.notes[i].velocity, 127);
  }
}

TEST(Fill, EvaluateMaeMatchesMetrics) {
  std::mt19937_64 rng(8);
  const MidiPiece p = fixtures::random_piece(rng, 80, 19.0);
  const UNet model = build_unet<float>(UNetConfig{}, 3);
  const std::vector<EncodedPiece> pieces{encode_piece("x", p, {})};
  const MidiPiece filled = fill_piece(model, p);
  double abs_sum = 0.0;
  for (std::size_t i = 0; i < p.notes.size(); ++i) abs_sum += std::abs(filled.notes[i].velocity - p.notes[i].velocity);
  EXPECT_NEAR(evaluate_mae(model, pieces), abs_sum / static_cast<double>(p.notes.size()), 1e-9);
}
