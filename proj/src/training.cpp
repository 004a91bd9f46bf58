#include "velofill/training.hpp"

#include <algorithm>
#include <cmath>
#include <cstdio>
#include <filesystem>
#include <ostream>

#include "json.hpp"
#include "velofill/checkpoint.hpp"

namespace velofill {

namespace fs = std::filesystem;

void TrainConfig::validate() const {
  if (epochs <= 0 || batch_size <= 0 || top_k <= 0 || !(learning_rate > 0.0))
    throw std::invalid_argument("epochs, learning rate, batch size and top_k must be positive");
  loss.validate();
  resolution_of(segmentation);
}

EncodedPiece encode_piece(std::string piece_id, MidiPiece piece, const SegmentationConfig& config) {
  EncodedPiece e{std::move(piece_id), std::move(piece), {}};
  e.segments = segment_piece(e.piece, config);
  return e;
}

std::vector<Batch> make_batches(std::span<const std::size_t> segments_per_piece, int batch_size,
                                std::mt19937_64& rng) {
  if (batch_size <= 0) throw std::invalid_argument("batch size must be positive");
  const auto step = static_cast<std::size_t>(batch_size);
  std::vector<Batch> batches;
  for (std::size_t p = 0; p < segments_per_piece.size(); ++p) {
    for (std::size_t first = 0; first < segments_per_piece[p]; first += step) {
      Batch b;
      for (std::size_t s = first; s < std::min(first + step, segments_per_piece[p]); ++s)
        b.push_back({p, s});
      batches.push_back(std::move(b));
    }
  }
  std::shuffle(batches.begin(), batches.end(), rng);
  return batches;
}

template <typename T>
void adam_step(std::span<BasicTensor<T>* const> params, std::span<const BasicTensor<T>* const> grads,
               AdamState<T>& state, double learning_rate) {
  if (params.size() != grads.size())
    throw std::invalid_argument("adam_step: parameter and gradient counts differ");
  if (state.m.empty()) {
    for (const auto* p : params) {
      state.m.push_back(BasicTensor<T>::zeros_like(*p));
      state.v.push_back(BasicTensor<T>::zeros_like(*p));
    }
  }
  if (state.m.size() != params.size()) throw std::invalid_argument("adam_step: state size mismatch");

  ++state.step;
  const double c1 = 1.0 - std::pow(kAdamBeta1, static_cast<double>(state.step));
  const double c2 = 1.0 - std::pow(kAdamBeta2, static_cast<double>(state.step));
  for (std::size_t i = 0; i < params.size(); ++i) {
    BasicTensor<T>& p = *params[i];
    const BasicTensor<T>& g = *grads[i];
    p.require_same_shape(g, "adam_step");
    p.require_same_shape(state.m[i], "adam_step state");
    auto& m = state.m[i];
    auto& v = state.v[i];
    for (std::size_t j = 0; j < p.size(); ++j) {
      const double gj = g[j];
      const double mj = kAdamBeta1 * m[j] + (1.0 - kAdamBeta1) * gj;
      const double vj = kAdamBeta2 * v[j] + (1.0 - kAdamBeta2) * gj * gj;
      m[j] = static_cast<T>(mj);
      v[j] = static_cast<T>(vj);
      p[j] = static_cast<T>(p[j] - learning_rate * (mj / c1) / (std::sqrt(vj / c2) + kAdamEps));
    }
  }
}

template void adam_step<float>(std::span<Tensor* const>, std::span<const Tensor* const>,
                               AdamState<float>&, double);
template void adam_step<double>(std::span<TensorD* const>, std::span<const TensorD* const>,
                                AdamState<double>&, double);

namespace {

const PianorollSegment& segment_of(std::span<const EncodedPiece> pieces, const SegmentRef& ref) {
  return pieces[ref.piece].segments[ref.segment];
}

Tensor stack_frames(const std::vector<const PianorollSegment*>& segments) {
  const auto frames = static_cast<std::size_t>(segments.front()->frame.frames());
  const auto pitches = static_cast<std::size_t>(segments.front()->frame.pitches());
  Tensor x({segments.size(), 1, frames, pitches});
  float* out = x.data();
  for (const auto* seg : segments)
    for (double v : seg->frame.data()) *out++ = static_cast<float>(v);
  return x;
}

Roll roll_of(const Tensor& y, std::size_t n) {
  const int frames = static_cast<int>(y.dim(2)), pitches = static_cast<int>(y.dim(3));
  Roll r(frames, pitches);
  const float* src = y.data() + n * r.size();
  std::copy(src, src + r.size(), r.data().begin());
  return r;
}

}  // namespace

Tensor batch_input(std::span<const EncodedPiece> pieces, const Batch& batch) {
  if (batch.empty()) throw std::invalid_argument("empty batch");
  std::vector<const PianorollSegment*> segs;
  for (const auto& ref : batch) segs.push_back(&segment_of(pieces, ref));
  return stack_frames(segs);
}

double train_step(UNet& model, AdamState<float>& adam, std::span<const EncodedPiece> pieces,
                  const Batch& batch, const TrainConfig& config) {
  const Tensor x = batch_input(pieces, batch);
  UNetCache<float> cache;
  const Tensor y = forward(model, x, nn::Mode::Train, &cache);

  const double n = static_cast<double>(batch.size());
  Tensor grad(y.shape());
  double total = 0.0;
  for (std::size_t i = 0; i < batch.size(); ++i) {
    const PianorollSegment& seg = segment_of(pieces, batch[i]);
    const LossValue loss = combined_loss(seg.velocity, roll_of(y, i), seg.onset, seg.velocity, config.loss);
    if (!std::isfinite(loss.total))
      throw TrainingError(TrainingError::Kind::NonFiniteLoss,
                          "non-finite loss on piece " + pieces[batch[i].piece].piece_id +
                              " segment " + std::to_string(batch[i].segment));
    total += loss.total;
    float* dst = grad.data() + i * loss.gradient.size();
    for (double g : loss.gradient.data()) *dst++ = static_cast<float>(g / n);
  }

  const UNetWeights<float> grads = backward(static_cast<const UNet&>(model), cache, grad);
  std::vector<Tensor*> params;
  std::vector<const Tensor*> grad_ptrs;
  model.weights.for_each_parameter([&](const std::string&, Tensor& t) { params.push_back(&t); });
  grads.for_each_parameter([&](const std::string&, const Tensor& t) { grad_ptrs.push_back(&t); });
  adam_step<float>(params, grad_ptrs, adam, config.learning_rate);
  return total / n;
}

std::vector<Roll> predict_segments(const UNet& model, std::span<const PianorollSegment> segments,
                                   int batch_size) {
  std::vector<Roll> out;
  const auto step = static_cast<std::size_t>(std::max(batch_size, 1));
  for (std::size_t first = 0; first < segments.size(); first += step) {
    std::vector<const PianorollSegment*> chunk;
    for (std::size_t s = first; s < std::min(first + step, segments.size()); ++s)
      chunk.push_back(&segments[s]);
    const Tensor y = forward(model, stack_frames(chunk));
    for (std::size_t i = 0; i < chunk.size(); ++i) out.push_back(roll_of(y, i));
  }
  return out;
}

MidiPiece fill_piece(const UNet& model, MidiPiece piece, const SegmentationConfig& config,
                     int batch_size) {
  for (auto& n : piece.notes) n.velocity = 0;
  const auto segments = segment_piece(piece, config);
  const auto predictions = predict_segments(model, segments, batch_size);
  for (std::size_t i = 0; i < segments.size(); ++i)
    piece = fill_velocities(segments[i], predictions[i], std::move(piece));
  return piece;
}

double evaluate_mae(const UNet& model, std::span<const EncodedPiece> pieces, int batch_size) {
  double abs_sum = 0.0;
  std::size_t count = 0;
  for (const auto& p : pieces) {
    const auto predictions = predict_segments(model, p.segments, batch_size);
    for (std::size_t s = 0; s < p.segments.size(); ++s) {
      for (const auto& note : p.segments[s].notes) {
        const int predicted = denormalize_velocity(predictions[s](note.onset_frame, note.pitch_row));
        abs_sum += std::abs(predicted - p.piece.notes[note.note_index].velocity);
        ++count;
      }
    }
  }
  return count ? abs_sum / static_cast<double>(count) : 0.0;
}

bool CheckpointRanking::would_enter(double validation_mae) const {
  return static_cast<int>(entries_.size()) < top_k_ || validation_mae < entries_.back().validation_mae;
}

bool CheckpointRanking::offer(const RankedCheckpoint& entry, std::string* evicted) {
  if (!would_enter(entry.validation_mae)) return false;
  auto pos = std::upper_bound(entries_.begin(), entries_.end(), entry.validation_mae,
                              [](double mae, const RankedCheckpoint& e) { return mae < e.validation_mae; });
  entries_.insert(pos, entry);
  if (static_cast<int>(entries_.size()) > top_k_) {
    if (evicted) *evicted = entries_.back().path;
    entries_.pop_back();
  }
  return true;
}

TrainingCorpus load_corpus(const DatasetManifest& manifest, const SegmentationConfig& config) {
  manifest.validate();
  TrainingCorpus corpus;
  for (const auto& e : manifest.entries) {
    if (e.split == Split::Test) continue;
    auto& dst = e.split == Split::Train ? corpus.train : corpus.validation;
    dst.push_back(encode_piece(e.piece_id, read_midi_file(e.midi_path), config));
  }
  return corpus;
}

std::string checkpoint_filename(int epoch, double validation_mae) {
  char buf[96];
  std::snprintf(buf, sizeof buf, "ckpt_epoch%d_vmae%.4f.vlfl", epoch, validation_mae);
  return buf;
}

CheckpointRanking train(UNet& model, const TrainingCorpus& corpus, const TrainConfig& config,
                        const std::string& out_dir, std::ostream* log) {
  config.validate();
  if (corpus.train.empty()) throw TrainingError(TrainingError::Kind::EmptySplit, "no training pieces");
  if (corpus.validation.empty())
    throw TrainingError(TrainingError::Kind::EmptySplit, "no validation pieces");
  fs::create_directories(out_dir);

  std::vector<std::size_t> counts;
  for (const auto& p : corpus.train) counts.push_back(p.segments.size());

  std::mt19937_64 rng(config.seed);
  AdamState<float> adam;
  CheckpointRanking ranking(config.top_k);

  for (int epoch = 1; epoch <= config.epochs; ++epoch) {
    const auto batches = make_batches(counts, config.batch_size, rng);
    double loss_sum = 0.0;
    for (const auto& b : batches) loss_sum += train_step(model, adam, corpus.train, b, config);
    const double train_loss = batches.empty() ? 0.0 : loss_sum / static_cast<double>(batches.size());
    const double val_mae = evaluate_mae(model, corpus.validation, config.batch_size);

    if (ranking.would_enter(val_mae)) {
      const std::string path = (fs::path(out_dir) / checkpoint_filename(epoch, val_mae)).string();
      save_checkpoint(model, path);
      std::string evicted;
      ranking.offer({epoch, val_mae, path}, &evicted);
      if (!evicted.empty()) fs::remove(evicted);
    }

    if (log) {
      nlohmann::ordered_json rec;
      rec["epoch"] = epoch;
      rec["train_loss"] = train_loss;
      rec["val_mae"] = val_mae;
      rec["steps"] = batches.size();
      *log << rec.dump() << '\n' << std::flush;
    }
  }
  return ranking;
}

CheckpointRanking train(UNet& model, const DatasetManifest& manifest, const TrainConfig& config,
                        const std::string& out_dir, std::ostream* log) {
  return train(model, load_corpus(manifest, config.segmentation), config, out_dir, log);
}

}  // namespace velofill
