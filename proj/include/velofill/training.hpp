#pragma once

#include <cstddef>
#include <cstdint>
#include <iosfwd>
#include <random>
#include <span>
#include <stdexcept>
#include <string>
#include <vector>

#include "velofill/losses.hpp"
#include "velofill/manifest.hpp"
#include "velofill/midi_io.hpp"
#include "velofill/pianoroll.hpp"
#include "velofill/unet.hpp"

namespace velofill {

struct TrainConfig {
  int epochs = 300;
  double learning_rate = 1e-5;
  int batch_size = 3;
  LossConfig loss;
  std::uint64_t seed = 42;
  int top_k = 3;
  SegmentationConfig segmentation;

  void validate() const;
};

class TrainingError : public std::runtime_error {
 public:
  enum class Kind { EmptySplit, NonFiniteLoss };

  TrainingError(Kind kind, const std::string& what) : std::runtime_error(what), kind_(kind) {}
  Kind kind() const noexcept { return kind_; }

 private:
  Kind kind_;
};

/// A piece together with its pianoroll segments.
struct EncodedPiece {
  std::string piece_id;
  MidiPiece piece;
  std::vector<PianorollSegment> segments;
};

EncodedPiece encode_piece(std::string piece_id, MidiPiece piece, const SegmentationConfig& config);

struct SegmentRef {
  std::size_t piece = 0;
  std::size_t segment = 0;

  bool operator==(const SegmentRef&) const = default;
};
using Batch = std::vector<SegmentRef>;

/// Cuts every piece into runs of `batch_size` consecutive segments (the last
/// run may be shorter), then shuffles the order of the runs.
std::vector<Batch> make_batches(std::span<const std::size_t> segments_per_piece, int batch_size,
                                std::mt19937_64& rng);

// ---------------------------------------------------------------------------

template <typename T>
struct AdamState {
  std::vector<BasicTensor<T>> m;
  std::vector<BasicTensor<T>> v;
  std::int64_t step = 0;
};

inline constexpr double kAdamBeta1 = 0.9;
inline constexpr double kAdamBeta2 = 0.999;
inline constexpr double kAdamEps = 1e-8;

/// Bias-corrected Adam; state is lazily sized on the first call.
template <typename T>
void adam_step(std::span<BasicTensor<T>* const> params, std::span<const BasicTensor<T>* const> grads,
               AdamState<T>& state, double learning_rate);

// ---------------------------------------------------------------------------

/// Stacks the frame rolls of a batch into a (N, 1, T, P) model input.
Tensor batch_input(std::span<const EncodedPiece> pieces, const Batch& batch);

/// One forward/backward/update on a batch; returns the mean combined loss.
/// Throws TrainingError(NonFiniteLoss).
double train_step(UNet& model, AdamState<float>& adam, std::span<const EncodedPiece> pieces,
                  const Batch& batch, const TrainConfig& config);

/// Predicted velocity rolls for `segments` of one piece, in eval mode.
std::vector<Roll> predict_segments(const UNet& model, std::span<const PianorollSegment> segments,
                                   int batch_size = 3);

/// Replaces every note velocity with the model's prediction at its onset.
/// Incoming velocities are zeroed first; timing and pitch are untouched.
MidiPiece fill_piece(const UNet& model, MidiPiece piece, const SegmentationConfig& config = {},
                     int batch_size = 3);

/// Note-level MAE (0-127 scale) of the model over all notes of the pieces.
double evaluate_mae(const UNet& model, std::span<const EncodedPiece> pieces, int batch_size = 3);

// ---------------------------------------------------------------------------

struct RankedCheckpoint {
  int epoch = 0;
  double validation_mae = 0.0;
  std::string path;
};

/// The k best checkpoints seen so far, ascending by validation MAE. Ties keep
/// the earlier epoch ahead.
class CheckpointRanking {
 public:
  explicit CheckpointRanking(int top_k = 3) : top_k_(top_k) {}

  bool would_enter(double validation_mae) const;
  /// Inserts the entry if it ranks; returns the evicted entry path, if any,
  /// through `evicted`. Returns whether the entry was kept.
  bool offer(const RankedCheckpoint& entry, std::string* evicted = nullptr);

  const std::vector<RankedCheckpoint>& entries() const { return entries_; }
  int top_k() const { return top_k_; }

 private:
  int top_k_;
  std::vector<RankedCheckpoint> entries_;
};

struct TrainingCorpus {
  std::vector<EncodedPiece> train;
  std::vector<EncodedPiece> validation;
};

TrainingCorpus load_corpus(const DatasetManifest& manifest, const SegmentationConfig& config);

std::string checkpoint_filename(int epoch, double validation_mae);

/// Epoch loop: train on all batches, measure validation MAE, keep the top-k
/// checkpoints under `out_dir`. Writes one JSON line per epoch to `log`.
CheckpointRanking train(UNet& model, const TrainingCorpus& corpus, const TrainConfig& config,
                        const std::string& out_dir, std::ostream* log = nullptr);

CheckpointRanking train(UNet& model, const DatasetManifest& manifest, const TrainConfig& config,
                        const std::string& out_dir, std::ostream* log = nullptr);

}  // namespace velofill
