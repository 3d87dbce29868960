#pragma once

// Subjects on a common period grid, with a per-cell missingness mask.

#include <algorithm>
#include <cmath>
#include <cstddef>
#include <optional>
#include <string>
#include <unordered_set>
#include <vector>

#include "mnarjm/errors.hpp"

namespace mnarjm {

/// Common period grid. Period j (1-based) covers (j-1, j]; its marker is
/// measured at the midpoint j - 0.5.
struct PeriodGrid {
  int n_periods = 7;

  double measurement_time(int period) const { return period - 0.5; }

  /// Period containing time t, i.e. ceil(t).
  static int period_of(double t) { return static_cast<int>(std::ceil(t)); }
};

/// Generating quantities, only present for simulated subjects.
struct LatentState {
  double a = 0.0;                   // random intercept
  double b = 0.0;                   // random slope
  std::vector<double> trajectory;   // m_i(j), j = 1..J (log scale)
  std::vector<double> full_marker;  // marker before missingness was applied (raw scale)
};

struct SubjectRecord {
  int id = 0;
  int female = 0;
  int older = 0;
  std::vector<std::optional<double>> marker;  // raw scale; nullopt = missing
  int event = 0;
  double time = 0.0;  // event or censoring time
  int event_period = 0;
  int omit = 0;
  std::optional<LatentState> latent;

  bool observed(int period) const { return marker[period - 1].has_value(); }
};

struct CohortDataset {
  PeriodGrid grid;
  std::vector<SubjectRecord> subjects;
  std::string scenario_tag;

  std::size_t size() const { return subjects.size(); }

  std::size_t missing_cells() const {
    std::size_t n = 0;
    for (const auto& s : subjects)
      for (const auto& m : s.marker) n += !m.has_value();
    return n;
  }
};

/// One row of the long (subject x period) layout.
struct LongRow {
  int id = 0;
  int period = 0;
  double time = 0.0;
  double log_marker = 0.0;
  int female = 0;
  int older = 0;
};

/// Throws ConfigError when the dataset breaks a structural invariant.
inline void validate(const CohortDataset& cohort) {
  if (cohort.grid.n_periods < 1) throw ConfigError("period grid needs at least one period");
  std::unordered_set<int> ids;
  for (const auto& s : cohort.subjects) {
    if (!ids.insert(s.id).second) throw ConfigError("duplicate subject id " + std::to_string(s.id));
    if (static_cast<int>(s.marker.size()) != cohort.grid.n_periods)
      throw ConfigError("subject " + std::to_string(s.id) + " has wrong number of marker cells");
    for (const auto& m : s.marker)
      if (m && !(*m > 0.0)) throw ConfigError("subject " + std::to_string(s.id) + " has a nonpositive marker");
    if (!(s.time >= 0.0)) throw ConfigError("subject " + std::to_string(s.id) + " has negative follow-up");
  }
}

/// Sets the all-missing flag from the cells measured within follow-up and
/// drops subjects followed for less than one period.
inline CohortDataset derive_omit(const CohortDataset& cohort) {
  CohortDataset out;
  out.grid = cohort.grid;
  out.scenario_tag = cohort.scenario_tag;
  out.subjects.reserve(cohort.subjects.size());
  for (const auto& s : cohort.subjects) {
    if (s.time < 1.0) continue;
    int in_follow_up = 0;
    int missing = 0;
    for (int j = 1; j <= cohort.grid.n_periods; ++j) {
      if (cohort.grid.measurement_time(j) <= s.time) {
        ++in_follow_up;
        missing += !s.observed(j);
      }
    }
    SubjectRecord r = s;
    r.omit = (missing == in_follow_up) ? 1 : 0;
    out.subjects.push_back(std::move(r));
  }
  return out;
}

/// One row per non-missing cell. `max_period` (0 = all) limits the periods used.
inline std::vector<LongRow> to_long_format(const CohortDataset& cohort, bool drop_post_event,
                                           int max_period = 0) {
  const int last = max_period > 0 ? std::min(max_period, cohort.grid.n_periods) : cohort.grid.n_periods;
  std::vector<LongRow> rows;
  for (const auto& s : cohort.subjects) {
    for (int j = 1; j <= last; ++j) {
      const double t = cohort.grid.measurement_time(j);
      if (!s.observed(j)) continue;
      if (drop_post_event && t > s.time) continue;
      rows.push_back({s.id, j, t, std::log(*s.marker[j - 1]), s.female, s.older});
    }
  }
  return rows;
}

/// Replace observed cells by the pre-missingness values kept in the latent state.
inline CohortDataset fully_observed(const CohortDataset& cohort) {
  CohortDataset out = cohort;
  for (auto& s : out.subjects) {
    if (!s.latent) throw ConfigError("fully_observed needs simulated subjects");
    for (std::size_t j = 0; j < s.marker.size(); ++j) s.marker[j] = s.latent->full_marker[j];
  }
  return out;
}

}  // namespace mnarjm
