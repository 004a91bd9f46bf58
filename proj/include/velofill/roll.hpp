#pragma once

#include <cassert>
#include <cstddef>
#include <vector>

namespace velofill {

/// Dense frames x pitches matrix, row-major (one row per time frame).
class Roll {
 public:
  Roll() = default;
  Roll(int frames, int pitches, double fill = 0.0)
      : frames_(frames), pitches_(pitches), data_(static_cast<std::size_t>(frames) * pitches, fill) {}

  int frames() const { return frames_; }
  int pitches() const { return pitches_; }
  std::size_t size() const { return data_.size(); }

  double& operator()(int t, int p) {
    assert(t >= 0 && t < frames_ && p >= 0 && p < pitches_);
    return data_[static_cast<std::size_t>(t) * pitches_ + p];
  }
  double operator()(int t, int p) const {
    assert(t >= 0 && t < frames_ && p >= 0 && p < pitches_);
    return data_[static_cast<std::size_t>(t) * pitches_ + p];
  }

  std::vector<double>& data() { return data_; }
  const std::vector<double>& data() const { return data_; }

  bool same_shape(const Roll& other) const {
    return frames_ == other.frames_ && pitches_ == other.pitches_;
  }
  bool operator==(const Roll&) const = default;

 private:
  int frames_ = 0;
  int pitches_ = 0;
  std::vector<double> data_;
};

}  // namespace velofill
