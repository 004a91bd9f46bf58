#include "velofill/manifest.hpp"

#include <algorithm>
#include <filesystem>
#include <fstream>
#include <map>
#include <set>
#include <sstream>
#include <stdexcept>

namespace velofill {

namespace fs = std::filesystem;

Split parse_split(std::string_view text) {
  if (text == "train") return Split::Train;
  if (text == "validation" || text == "valid" || text == "val") return Split::Validation;
  if (text == "test") return Split::Test;
  throw std::invalid_argument("unknown split '" + std::string(text) + "'");
}

const char* split_name(Split split) {
  switch (split) {
    case Split::Train: return "train";
    case Split::Validation: return "validation";
    case Split::Test: return "test";
  }
  return "?";
}

void DatasetManifest::validate() const {
  std::set<std::string> paths;
  std::map<std::string, Split> piece_split;
  for (const auto& e : entries) {
    if (!paths.insert(e.midi_path).second)
      throw std::invalid_argument("duplicate manifest path " + e.midi_path);
    auto [it, inserted] = piece_split.emplace(e.piece_id, e.split);
    if (!inserted && it->second != e.split)
      throw std::invalid_argument("piece " + e.piece_id + " appears in both " +
                                  split_name(it->second) + " and " + split_name(e.split));
  }
}

std::vector<ManifestEntry> DatasetManifest::of(Split split) const {
  std::vector<ManifestEntry> out;
  std::copy_if(entries.begin(), entries.end(), std::back_inserter(out),
               [&](const ManifestEntry& e) { return e.split == split; });
  return out;
}

std::vector<std::vector<std::string>> parse_csv(std::string_view text) {
  std::vector<std::vector<std::string>> rows;
  std::vector<std::string> row;
  std::string field;
  bool quoted = false;
  bool row_has_data = false;

  auto end_field = [&] {
    row.push_back(std::move(field));
    field.clear();
  };
  auto end_row = [&] {
    end_field();
    if (row_has_data || row.size() > 1 || !row.front().empty()) rows.push_back(std::move(row));
    row.clear();
    row_has_data = false;
  };

  for (std::size_t i = 0; i < text.size(); ++i) {
    const char ch = text[i];
    if (quoted) {
      if (ch == '"') {
        if (i + 1 < text.size() && text[i + 1] == '"') {
          field += '"';
          ++i;
        } else {
          quoted = false;
        }
      } else {
        field += ch;
      }
    } else if (ch == '"') {
      quoted = true;
      row_has_data = true;
    } else if (ch == ',') {
      end_field();
    } else if (ch == '\n') {
      end_row();
    } else if (ch != '\r') {
      field += ch;
    }
  }
  if (quoted) throw std::invalid_argument("unterminated quoted CSV field");
  if (!field.empty() || !row.empty() || row_has_data) end_row();
  return rows;
}

DatasetManifest parse_manifest(std::string_view csv_text, const std::string& base_dir) {
  const auto rows = parse_csv(csv_text);
  if (rows.empty()) throw std::invalid_argument("manifest is empty");
  const auto& header = rows.front();
  auto column = [&](std::string_view name) -> std::ptrdiff_t {
    auto it = std::find(header.begin(), header.end(), name);
    return it == header.end() ? -1 : it - header.begin();
  };
  const auto path_col = column("midi_filename");
  const auto split_col = column("split");
  const auto id_col = column("piece_id");
  if (path_col < 0 || split_col < 0)
    throw std::invalid_argument("manifest needs midi_filename and split columns");

  DatasetManifest manifest;
  for (std::size_t r = 1; r < rows.size(); ++r) {
    const auto& row = rows[r];
    const auto need = static_cast<std::size_t>(std::max({path_col, split_col, id_col})) + 1;
    if (row.size() < need)
      throw std::invalid_argument("manifest row " + std::to_string(r + 1) + " has too few columns");
    fs::path path(row[path_col]);
    ManifestEntry e;
    e.midi_path = (path.is_absolute() || base_dir.empty() ? path : fs::path(base_dir) / path).string();
    e.split = parse_split(row[split_col]);
    e.piece_id = id_col >= 0 && !row[id_col].empty() ? row[id_col] : path.stem().string();
    manifest.entries.push_back(std::move(e));
  }
  manifest.validate();
  return manifest;
}

DatasetManifest read_manifest(const std::string& path) {
  std::ifstream file(path);
  if (!file) throw std::runtime_error("cannot open manifest " + path);
  std::stringstream buffer;
  buffer << file.rdbuf();
  return parse_manifest(buffer.str(), fs::path(path).parent_path().string());
}

}  // namespace velofill
