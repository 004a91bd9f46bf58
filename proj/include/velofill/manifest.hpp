#pragma once

#include <string>
#include <string_view>
#include <vector>

namespace velofill {

enum class Split { Train, Validation, Test };

Split parse_split(std::string_view text);
const char* split_name(Split split);

struct ManifestEntry {
  std::string midi_path;
  Split split = Split::Train;
  std::string piece_id;
};

/// Dataset listing in the MAESTRO metadata shape: a CSV with at least the
/// columns `midi_filename` and `split`; `piece_id` is optional and defaults to
/// the file name without extension.
struct DatasetManifest {
  std::vector<ManifestEntry> entries;

  /// Throws std::invalid_argument on duplicate paths or a piece_id that
  /// appears in more than one split.
  void validate() const;
  std::vector<ManifestEntry> of(Split split) const;
};

/// RFC 4180 records: quoted fields may hold commas, newlines and "" escapes.
std::vector<std::vector<std::string>> parse_csv(std::string_view text);

/// Relative midi paths are resolved against `base_dir`.
DatasetManifest parse_manifest(std::string_view csv_text, const std::string& base_dir);
DatasetManifest read_manifest(const std::string& path);

}  // namespace velofill
