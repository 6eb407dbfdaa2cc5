#pragma once

// Stage list driving progressive growth and the fade-in coefficient.

#include <cstdint>
#include <sstream>
#include <string>
#include <vector>

#include "lesionforge/error.hpp"

namespace lesionforge {

enum class Phase { kStabilize, kFade };

inline const char* phase_name(Phase p) { return p == Phase::kFade ? "fade" : "stabilize"; }

struct Stage {
  std::size_t resolution = 0;
  Phase phase = Phase::kStabilize;
  std::uint64_t duration = 0;

  bool operator==(const Stage&) const = default;
};

inline bool is_power_of_two(std::size_t v) { return v != 0 && (v & (v - 1)) == 0; }

inline std::size_t log2_exact(std::size_t v) {
  std::size_t k = 0;
  while ((std::size_t{1} << k) < v) ++k;
  return k;
}

class ProgressiveSchedule {
 public:
  ProgressiveSchedule() = default;

  explicit ProgressiveSchedule(std::vector<Stage> stages) : stages_(std::move(stages)) { validate(); }

  /// stabilize@base, then (fade@r, stabilize@r) for every doubling up to target.
  static ProgressiveSchedule uniform(std::size_t base, std::size_t target, std::uint64_t stabilize,
                                     std::uint64_t fade, std::uint64_t final_stabilize = 0) {
    if (!is_power_of_two(base) || !is_power_of_two(target) || target < base)
      throw ArgumentError("schedule: base and target must be powers of two with base <= target");
    std::vector<Stage> stages{{base, Phase::kStabilize, stabilize}};
    for (std::size_t r = base * 2; r <= target; r *= 2) {
      stages.push_back({r, Phase::kFade, fade});
      stages.push_back({r, Phase::kStabilize, r == target && final_stabilize ? final_stabilize : stabilize});
    }
    return ProgressiveSchedule(std::move(stages));
  }

  const std::vector<Stage>& stages() const { return stages_; }
  std::size_t base_resolution() const { return stages_.front().resolution; }
  std::size_t target_resolution() const { return stages_.back().resolution; }

  std::uint64_t total() const {
    std::uint64_t t = 0;
    for (const auto& s : stages_) t += s.duration;
    return t;
  }

  std::vector<std::size_t> resolutions() const {
    std::vector<std::size_t> out;
    for (const auto& s : stages_)
      if (out.empty() || out.back() != s.resolution) out.push_back(s.resolution);
    return out;
  }

  /// Index of the stage containing `iteration` and the offset into it.
  std::pair<std::size_t, std::uint64_t> locate(std::uint64_t iteration) const {
    std::uint64_t start = 0;
    for (std::size_t i = 0; i < stages_.size(); ++i) {
      if (iteration < start + stages_[i].duration) return {i, iteration - start};
      start += stages_[i].duration;
    }
    throw ArgumentError("schedule: iteration " + std::to_string(iteration) + " beyond total " +
                        std::to_string(total()));
  }

  std::size_t resolution_at(std::uint64_t iteration) const { return stages_[locate(iteration).first].resolution; }

  /// First iteration of every fade stage, i.e. where the networks grow.
  std::vector<std::pair<std::uint64_t, std::size_t>> growth_points() const {
    std::vector<std::pair<std::uint64_t, std::size_t>> out;
    std::uint64_t start = 0;
    for (const auto& s : stages_) {
      if (s.phase == Phase::kFade) out.emplace_back(start, s.resolution);
      start += s.duration;
    }
    return out;
  }

  std::string to_string() const {
    std::ostringstream os;
    for (std::size_t i = 0; i < stages_.size(); ++i)
      os << (i ? "," : "") << stages_[i].resolution << ':' << phase_name(stages_[i].phase) << ':' << stages_[i].duration;
    return os.str();
  }

  static ProgressiveSchedule parse(const std::string& text) {
    std::vector<Stage> stages;
    std::istringstream in(text);
    std::string item;
    while (std::getline(in, item, ',')) {
      auto a = item.find(':'), b = item.rfind(':');
      if (a == std::string::npos || a == b) throw ArgumentError("schedule: malformed stage '" + item + "'");
      Stage s;
      s.resolution = std::stoull(item.substr(0, a));
      std::string phase = item.substr(a + 1, b - a - 1);
      if (phase == "fade") s.phase = Phase::kFade;
      else if (phase == "stabilize") s.phase = Phase::kStabilize;
      else throw ArgumentError("schedule: unknown phase '" + phase + "'");
      s.duration = std::stoull(item.substr(b + 1));
      stages.push_back(s);
    }
    return ProgressiveSchedule(std::move(stages));
  }

  bool operator==(const ProgressiveSchedule&) const = default;

 private:
  void validate() const {
    if (stages_.empty()) throw ArgumentError("schedule: no stages");
    const Stage& first = stages_.front();
    if (first.phase != Phase::kStabilize) throw ArgumentError("schedule: first stage must stabilize");
    if (!is_power_of_two(first.resolution)) throw ArgumentError("schedule: base resolution must be a power of two");
    std::size_t current = first.resolution;
    bool faded = true;
    for (std::size_t i = 0; i < stages_.size(); ++i) {
      const Stage& s = stages_[i];
      if (s.duration == 0) throw ArgumentError("schedule: stage " + std::to_string(i) + " has zero duration");
      if (i == 0) continue;
      if (s.phase == Phase::kFade) {
        if (s.resolution != 2 * current)
          throw ArgumentError("schedule: fade to " + std::to_string(s.resolution) + " does not double " +
                              std::to_string(current));
        if (!faded) throw ArgumentError("schedule: two consecutive fades");
        current = s.resolution;
        faded = false;
      } else {
        if (s.resolution != current)
          throw ArgumentError("schedule: stabilize at " + std::to_string(s.resolution) +
                              " without a preceding fade");
        faded = true;
      }
    }
  }

  std::vector<Stage> stages_;
};

/// Fade coefficient: 1 while stabilizing, linear 0 -> 1 across a fade stage.
inline double alpha_at(const ProgressiveSchedule& schedule, std::uint64_t iteration) {
  auto [index, offset] = schedule.locate(iteration);
  const Stage& s = schedule.stages()[index];
  if (s.phase == Phase::kStabilize) return 1.0;
  return static_cast<double>(offset) / static_cast<double>(s.duration);
}

}  // namespace lesionforge
