#include "commands.hpp"

#include <algorithm>
#include <cctype>
#include <cmath>
#include <cstdio>
#include <cstdlib>
#include <filesystem>
#include <fstream>
#include <map>
#include <streambuf>

#include "CLI11.hpp"
#include "velofill/checkpoint.hpp"
#include "velofill/metrics.hpp"
#include "velofill/midi_io.hpp"
#include "velofill/pianoroll.hpp"
#include "velofill/training.hpp"

namespace velofill::cli {

namespace fs = std::filesystem;

namespace {

class UsageError : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

std::uint64_t seed_from_env() {
  const char* text = std::getenv("VELOFILL_SEED");
  if (!text || !*text) return 42;
  try {
    std::size_t used = 0;
    const auto seed = std::stoull(text, &used);
    if (used != std::string(text).size()) throw std::invalid_argument(text);
    return seed;
  } catch (const std::exception&) {
    throw UsageError(std::string("VELOFILL_SEED must be a non-negative integer, got '") + text + "'");
  }
}

std::string fixed(double v, int digits) {
  char buf[64];
  std::snprintf(buf, sizeof buf, "%.*f", digits, v);
  return buf;
}

double population_sd(const std::vector<int>& values) {
  if (values.empty()) return 0.0;
  double mean = 0.0;
  for (int v : values) mean += v;
  mean /= static_cast<double>(values.size());
  double ss = 0.0;
  for (int v : values) ss += (v - mean) * (v - mean);
  return std::sqrt(ss / static_cast<double>(values.size()));
}

void ensure_parent(const fs::path& path) {
  if (path.has_parent_path()) fs::create_directories(path.parent_path());
}

// Writes everything to two streams.
class TeeBuf : public std::streambuf {
 public:
  TeeBuf(std::streambuf* a, std::streambuf* b) : a_(a), b_(b) {}

 protected:
  int overflow(int c) override {
    if (c == EOF) return !EOF;
    const int ra = a_->sputc(static_cast<char>(c)), rb = b_->sputc(static_cast<char>(c));
    return ra == EOF || rb == EOF ? EOF : c;
  }
  int sync() override { return a_->pubsync() == 0 && b_->pubsync() == 0 ? 0 : -1; }

 private:
  std::streambuf* a_;
  std::streambuf* b_;
};

// ---------------------------------------------------------------------------

struct FillArgs {
  std::string input, checkpoint, output;
};

void cmd_fill(const FillArgs& a, std::ostream& out) {
  const UNet model = load_checkpoint(a.checkpoint);
  const MidiPiece piece = read_midi_file(a.input);
  SegmentationConfig seg;
  seg.segment_duration = model.config.segment_duration;
  const MidiPiece filled = fill_piece(model, piece, seg);
  ensure_parent(a.output);
  write_midi_file(filled, a.output);

  std::vector<int> velocities;
  for (const auto& n : filled.notes) velocities.push_back(n.velocity);
  out << "notes: " << filled.notes.size() << "\n"
      << "sd_velo: " << fixed(population_sd(velocities), 4) << "\n";
}

// ---------------------------------------------------------------------------

struct EvalArgs {
  std::string pred, truth;
  bool flat = false;
  bool csv = false;
};

bool is_midi_name(const fs::path& p) {
  std::string ext = p.extension().string();
  std::transform(ext.begin(), ext.end(), ext.begin(), [](unsigned char c) { return std::tolower(c); });
  return ext == ".mid" || ext == ".midi";
}

std::vector<std::string> midi_files(const std::string& dir) {
  if (!fs::is_directory(dir)) throw std::runtime_error("not a directory: " + dir);
  std::vector<std::string> names;
  for (const auto& e : fs::directory_iterator(dir))
    if (e.is_regular_file() && is_midi_name(e.path())) names.push_back(e.path().filename().string());
  std::sort(names.begin(), names.end());
  return names;
}

void cmd_eval(const EvalArgs& a, std::ostream& out) {
  const auto truth_names = midi_files(a.truth);
  if (truth_names.empty()) throw std::runtime_error("no MIDI files in " + a.truth);
  if (!a.flat) {
    const auto pred_names = midi_files(a.pred);
    std::vector<std::string> unmatched;
    std::set_symmetric_difference(truth_names.begin(), truth_names.end(), pred_names.begin(),
                                  pred_names.end(), std::back_inserter(unmatched));
    if (!unmatched.empty()) throw std::runtime_error("unmatched file: " + unmatched.front());
  }

  std::vector<NotePair> pairs;
  for (const auto& name : truth_names) {
    const MidiPiece truth = read_midi_file((fs::path(a.truth) / name).string());
    const MidiPiece pred =
        a.flat ? flat_baseline(truth) : read_midi_file((fs::path(a.pred) / name).string());
    const auto p = pair_notes(truth, pred, name);
    pairs.insert(pairs.end(), p.begin(), p.end());
  }
  const MetricsReport report = compute_metrics(pairs);
  if (a.csv)
    out << csv_header() << "\n" << to_csv_row(report, a.flat ? "flat" : "model") << "\n";
  else
    out << to_json(report) << "\n";
}

// ---------------------------------------------------------------------------

struct SegmentArgs {
  std::string input, out;
};

void cmd_segment(const SegmentArgs& a, std::ostream& out) {
  const MidiPiece piece = read_midi_file(a.input);
  const auto segments = segment_piece(piece);
  fs::create_directories(a.out);
  std::ofstream index(fs::path(a.out) / "segments.csv");
  if (!index) throw std::runtime_error("cannot write segment index in " + a.out);
  index << "index,start_seconds,duration_seconds,note_count,onset_pgm,frame_pgm,velocity_pgm\n";
  for (const auto& seg : segments) {
    char stem[32];
    std::snprintf(stem, sizeof stem, "seg%04d", seg.index);
    dump_segment_pgm(seg, (fs::path(a.out) / stem).string());
    index << seg.index << ',' << seg.start_seconds << ',' << seg.duration_seconds << ','
          << seg.notes.size() << ',' << stem << "_O.pgm," << stem << "_F.pgm," << stem << "_V.pgm\n";
  }
  out << "segments: " << segments.size() << "\n";
}

// ---------------------------------------------------------------------------

struct PlotArgs {
  std::string truth, pred, out;
};

void cmd_plot(const PlotArgs& a, std::ostream& out) {
  const MidiPiece truth = read_midi_file(a.truth);
  const MidiPiece pred = read_midi_file(a.pred);
  const auto ts = segment_piece(truth);
  const auto ps = segment_piece(pred);
  const std::size_t count = std::max(ts.size(), ps.size());
  ensure_parent(a.out);

  // Velocity v sits at v/128 in the roll; x256 draws it as gray level 2v.
  constexpr double kScale = 256.0;
  const Roll blank(kSegmentFrames, kPitchCount);
  for (std::size_t k = 0; k < count; ++k) {
    const Roll& t = k < ts.size() ? ts[k].velocity : blank;
    const Roll& p = k < ps.size() ? ps[k].velocity : blank;
    Roll diff(t.frames(), t.pitches());
    for (std::size_t i = 0; i < diff.size(); ++i) diff.data()[i] = std::abs(t.data()[i] - p.data()[i]);
    char suffix[32];
    std::snprintf(suffix, sizeof suffix, "_seg%04zu", k);
    const std::string stem = a.out + suffix;
    write_pgm(stem + "_truth.pgm", t, kScale);
    write_pgm(stem + "_pred.pgm", p, kScale);
    write_pgm(stem + "_diff.pgm", diff, kScale);
  }
  out << "segments: " << count << "\n";
}

// ---------------------------------------------------------------------------

struct TrainArgs {
  std::string manifest, out;
  int epochs = 300;
  double lr = 1e-5;
  int batch = 3;
  double alpha = 0.2;
  int window = 2;
  double duration = 10.0;
};

void cmd_train(const TrainArgs& a, std::ostream& out) {
  TrainConfig cfg;
  cfg.epochs = a.epochs;
  cfg.learning_rate = a.lr;
  cfg.batch_size = a.batch;
  cfg.loss.alpha = a.alpha;
  cfg.segmentation.segment_duration = a.duration;
  cfg.seed = seed_from_env();
  UNetConfig net;
  net.window_size = a.window;
  net.segment_duration = a.duration;

  out << "velofill train\n"
      << "  manifest: " << a.manifest << "\n"
      << "  epochs: " << cfg.epochs << "\n"
      << "  learning_rate: " << cfg.learning_rate << "\n"
      << "  batch_size: " << cfg.batch_size << "\n"
      << "  alpha: " << cfg.loss.alpha << "\n"
      << "  window: " << net.window_size << "\n"
      << "  segment_duration_s: " << cfg.segmentation.segment_duration << "\n"
      << "  resolution: " << fixed(resolution_of(cfg.segmentation) * 1000.0, 2) << " ms/frame\n"
      << "  optimizer: adam (beta1 0.9, beta2 0.999, eps 1e-8)\n"
      << "  top_k: " << cfg.top_k << "\n"
      << "  seed: " << cfg.seed << "\n"
      << std::flush;

  const DatasetManifest manifest = read_manifest(a.manifest);
  const TrainingCorpus corpus = load_corpus(manifest, cfg.segmentation);
  UNet model = build_unet<float>(net, cfg.seed);

  fs::create_directories(a.out);
  std::ofstream log_file(fs::path(a.out) / "train_log.jsonl");
  if (!log_file) throw std::runtime_error("cannot write training log in " + a.out);
  TeeBuf tee(out.rdbuf(), log_file.rdbuf());
  std::ostream log(&tee);

  const CheckpointRanking ranking = train(model, corpus, cfg, a.out, &log);
  for (const auto& e : ranking.entries())
    out << "kept: epoch " << e.epoch << " val_mae " << fixed(e.validation_mae, 4) << " " << e.path << "\n";
}

}  // namespace

int run(const std::vector<std::string>& args, std::ostream& out, std::ostream& err) {
  CLI::App app{"Velocity filling for piano MIDI", "velofill"};
  app.require_subcommand(1);

  FillArgs fill;
  auto* fill_cmd = app.add_subcommand("fill", "Predict velocities for every note of a MIDI file");
  fill_cmd->add_option("--input", fill.input, "Input MIDI file")->required();
  fill_cmd->add_option("--checkpoint", fill.checkpoint, "Model checkpoint (.vlfl)")->required();
  fill_cmd->add_option("--output", fill.output, "Output MIDI file")->required();

  EvalArgs eval;
  auto* eval_cmd = app.add_subcommand("eval", "Velocity metrics of predictions against ground truth");
  eval_cmd->add_option("--pred", eval.pred, "Directory of predicted MIDI files");
  eval_cmd->add_option("--truth", eval.truth, "Directory of ground-truth MIDI files")->required();
  eval_cmd->add_flag("--flat", eval.flat, "Score the constant-64 baseline instead of --pred");
  eval_cmd->add_flag("--csv", eval.csv, "Print a CSV row instead of JSON");

  SegmentArgs seg;
  auto* seg_cmd = app.add_subcommand("segment", "Dump pianoroll segments as PGM images");
  seg_cmd->add_option("--input", seg.input, "Input MIDI file")->required();
  seg_cmd->add_option("--out", seg.out, "Output directory")->required();

  PlotArgs plot;
  auto* plot_cmd = app.add_subcommand("plot", "Velocity maps of truth, prediction and their difference");
  plot_cmd->add_option("--truth", plot.truth, "Ground-truth MIDI file")->required();
  plot_cmd->add_option("--pred", plot.pred, "Predicted MIDI file")->required();
  plot_cmd->add_option("--out", plot.out, "Output file prefix")->required();

  TrainArgs tr;
  auto* train_cmd = app.add_subcommand("train", "Train a model from a dataset manifest");
  train_cmd->add_option("--manifest", tr.manifest, "CSV with midi_filename,split columns")->required();
  train_cmd->add_option("--out", tr.out, "Checkpoint directory")->required();
  train_cmd->add_option("--epochs", tr.epochs, "Training epochs")->capture_default_str()->check(CLI::PositiveNumber);
  train_cmd->add_option("--lr", tr.lr, "Adam learning rate")->capture_default_str()->check(CLI::PositiveNumber);
  train_cmd->add_option("--batch", tr.batch, "Segments per batch")->capture_default_str()->check(CLI::PositiveNumber);
  train_cmd->add_option("--alpha", tr.alpha, "Cosine-similarity weight")->capture_default_str()->check(CLI::Range(0.0, 1.0));
  train_cmd->add_option("--window", tr.window, "Attention window size")->capture_default_str()->check(CLI::PositiveNumber);
  train_cmd->add_option("--duration", tr.duration, "Segment length in seconds")->capture_default_str()->check(CLI::PositiveNumber);

  try {
    std::vector<std::string> reversed(args.rbegin(), args.rend());
    app.parse(reversed);
    if (eval_cmd->parsed() && !eval.flat && eval.pred.empty())
      throw CLI::ValidationError("--pred", "required unless --flat is given");
  } catch (const CLI::ParseError& e) {
    return app.exit(e, out, err) == 0 ? kExitOk : kExitUsage;
  }

  try {
    if (fill_cmd->parsed()) cmd_fill(fill, out);
    else if (eval_cmd->parsed()) cmd_eval(eval, out);
    else if (seg_cmd->parsed()) cmd_segment(seg, out);
    else if (plot_cmd->parsed()) cmd_plot(plot, out);
    else if (train_cmd->parsed()) cmd_train(tr, out);
  } catch (const UsageError& e) {
    err << "velofill: " << e.what() << "\n";
    return kExitUsage;
  } catch (const std::exception& e) {
    err << "velofill: " << e.what() << "\n";
    return kExitData;
  }
  return kExitOk;
}

}  // namespace velofill::cli
