#pragma once

// Wide (one row per subject) and long (one row per observed cell) CSV layouts.
// Numbers are written in shortest round-trip form, so write/read is exact.

#include <charconv>
#include <istream>
#include <ostream>
#include <string>
#include <string_view>
#include <system_error>
#include <vector>

#include "mnarjm/cohort_data.hpp"
#include "mnarjm/errors.hpp"

namespace mnarjm {

namespace detail {

inline std::string format_double(double v) {
  char buf[64];
  auto res = std::to_chars(buf, buf + sizeof buf, v);
  return std::string(buf, res.ptr);
}

inline std::string_view trim(std::string_view s) {
  while (!s.empty() && (s.front() == ' ' || s.front() == '\t')) s.remove_prefix(1);
  while (!s.empty() && (s.back() == ' ' || s.back() == '\t' || s.back() == '\r')) s.remove_suffix(1);
  return s;
}

inline std::vector<std::string_view> split_csv(std::string_view line) {
  std::vector<std::string_view> out;
  std::size_t start = 0;
  for (;;) {
    auto pos = line.find(',', start);
    out.push_back(trim(line.substr(start, pos == std::string_view::npos ? pos : pos - start)));
    if (pos == std::string_view::npos) break;
    start = pos + 1;
  }
  return out;
}

template <typename T>
T parse_number(std::string_view s, std::size_t row, const std::string& column) {
  T value{};
  auto res = std::from_chars(s.data(), s.data() + s.size(), value);
  if (s.empty() || res.ec != std::errc{} || res.ptr != s.data() + s.size())
    throw IngestionError(row, column, "cannot parse '" + std::string(s) + "' as a number");
  return value;
}

inline int parse_binary(std::string_view s, std::size_t row, const std::string& column) {
  int v = parse_number<int>(s, row, column);
  if (v != 0 && v != 1) throw IngestionError(row, column, "expected 0 or 1");
  return v;
}

}  // namespace detail

inline void write_wide_csv(const CohortDataset& cohort, std::ostream& os) {
  os << "id,female,older";
  for (int j = 1; j <= cohort.grid.n_periods; ++j) os << ",h" << j;
  os << ",event,time\n";
  for (const auto& s : cohort.subjects) {
    os << s.id << ',' << s.female << ',' << s.older;
    for (const auto& m : s.marker) {
      os << ',';
      if (m) os << detail::format_double(*m);
    }
    os << ',' << s.event << ',' << detail::format_double(s.time) << '\n';
  }
}

/// Reads the wide layout. The number of marker columns is taken from the header.
inline CohortDataset read_wide_csv(std::istream& is, std::string scenario_tag = "csv") {
  std::string line;
  if (!std::getline(is, line)) throw IngestionError(0, "", "empty input");
  auto header = detail::split_csv(line);
  if (header.size() < 6) throw IngestionError(0, "", "too few columns");
  const char* fixed_front[] = {"id", "female", "older"};
  for (int c = 0; c < 3; ++c)
    if (header[c] != fixed_front[c])
      throw IngestionError(0, std::string(header[c]), std::string("expected '") + fixed_front[c] + "'");
  const int n_periods = static_cast<int>(header.size()) - 5;
  for (int j = 1; j <= n_periods; ++j)
    if (header[2 + j] != "h" + std::to_string(j))
      throw IngestionError(0, std::string(header[2 + j]), "expected 'h" + std::to_string(j) + "'");
  if (header[header.size() - 2] != "event") throw IngestionError(0, std::string(header[header.size() - 2]), "expected 'event'");
  if (header.back() != "time") throw IngestionError(0, std::string(header.back()), "expected 'time'");

  CohortDataset cohort;
  cohort.grid.n_periods = n_periods;
  cohort.scenario_tag = std::move(scenario_tag);
  std::size_t row = 0;
  while (std::getline(is, line)) {
    ++row;
    if (detail::trim(line).empty()) continue;
    auto cells = detail::split_csv(line);
    if (cells.size() != header.size())
      throw IngestionError(row, "", "expected " + std::to_string(header.size()) + " cells, found " +
                                        std::to_string(cells.size()));
    SubjectRecord s;
    s.id = detail::parse_number<int>(cells[0], row, "id");
    s.female = detail::parse_binary(cells[1], row, "female");
    s.older = detail::parse_binary(cells[2], row, "older");
    s.marker.resize(n_periods);
    for (int j = 1; j <= n_periods; ++j) {
      const std::string col = "h" + std::to_string(j);
      if (cells[2 + j].empty()) continue;
      double v = detail::parse_number<double>(cells[2 + j], row, col);
      if (!(v > 0.0)) throw IngestionError(row, col, "marker values must be positive");
      s.marker[j - 1] = v;
    }
    if (cells[cells.size() - 2].empty()) throw IngestionError(row, "event", "empty event cell");
    s.event = detail::parse_binary(cells[cells.size() - 2], row, "event");
    s.time = detail::parse_number<double>(cells.back(), row, "time");
    if (!(s.time >= 0.0)) throw IngestionError(row, "time", "follow-up time must be nonnegative");
    s.event_period = PeriodGrid::period_of(s.time);
    cohort.subjects.push_back(std::move(s));
  }
  try {
    validate(cohort);
  } catch (const ConfigError& e) {
    throw IngestionError(row, "id", e.what());
  }
  return cohort;
}

inline void write_long_csv(const std::vector<LongRow>& rows, std::ostream& os) {
  os << "id,period,time,log_marker,female,older\n";
  for (const auto& r : rows)
    os << r.id << ',' << r.period << ',' << detail::format_double(r.time) << ','
       << detail::format_double(r.log_marker) << ',' << r.female << ',' << r.older << '\n';
}

}  // namespace mnarjm
