#pragma once

#include <cstdint>
#include <iosfwd>
#include <optional>
#include <string>
#include <utility>
#include <vector>

namespace rulmae {

inline constexpr std::size_t kOpSettingCols = 3;
inline constexpr std::size_t kSensorCols = 21;
inline constexpr std::size_t kRecordCols = 2 + kOpSettingCols + kSensorCols;

// One engine unit's multivariate record. Channel count is 21 for parsed
// data and may differ for synthetic or normalized series.
struct UnitSeries {
  int unit_id = 0;
  std::size_t length = 0;
  std::size_t n_features = 0;
  std::vector<double> features;     // [length x n_features], row-major
  std::vector<double> op_settings;  // [length x 3]; empty once normalized
  std::vector<int> cycles;          // consecutive, starting at 1
  std::vector<int> rul;             // empty until labels are derived

  double feature(std::size_t i, std::size_t j) const {
    return features[i * n_features + j];
  }

  friend bool operator==(const UnitSeries&, const UnitSeries&) = default;
};

enum class SplitRole { train, test };

struct DatasetSplit {
  SplitRole role = SplitRole::train;
  std::vector<UnitSeries> units;
  // One terminal-RUL value per test unit, aligned with `units`.
  std::optional<std::vector<int>> test_rul_truth;

  friend bool operator==(const DatasetSplit&, const DatasetSplit&) = default;
};

// Whitespace-separated 26-column records, grouped by unit id (ascending) and
// sorted by cycle. Raises MalformedLine / NonContiguousCycles.
DatasetSplit parse_cmapss(std::istream& in, SplitRole role);

// Truth file: one integer per line, i-th line = terminal RUL of i-th test unit.
std::vector<int> parse_truth(std::istream& in);

// Inverse of parse_cmapss: 26 columns, sensors zero-filled beyond n_features.
// Values are printed with shortest round-trip formatting.
void write_cmapss(const DatasetSplit& split, std::ostream& out);
void write_truth(const std::vector<int>& truth, std::ostream& out);

// rul[i] = max_cycle - cycle[i].
UnitSeries label_rul(UnitSeries unit);

// Desk-scale corpus: each unit mixes exactly-linear trends, degradation
// trends tied to remaining life, periodic channels and pure noise, so the
// selection criteria have both passing and failing features. Labels are
// derived from the terminal cycle. Pure function of its arguments.
DatasetSplit generate_synthetic(std::size_t n_units, std::pair<int, int> length_range,
                                std::size_t n_features, double noise_level,
                                std::uint64_t seed);

// Turns run-to-failure units into a test split: truncates each unit at a
// seeded cutoff (keeping at least min_keep cycles) and records the removed
// tail length as the terminal-RUL truth.
DatasetSplit truncate_for_test(const DatasetSplit& full, std::uint64_t seed,
                               std::size_t min_keep);

// Conventional file layout around a stem: "<dir>/FD001" resolves to
// <dir>/train_FD001.txt, <dir>/test_FD001.txt, <dir>/RUL_FD001.txt.
struct DatasetPaths {
  std::string train_file;
  std::string test_file;
  std::string truth_file;
  static DatasetPaths from_stem(const std::string& stem);
};

DatasetSplit load_train_split(const std::string& path);   // parses + labels
DatasetSplit load_test_split(const std::string& data_file, const std::string& truth_file);

}  // namespace rulmae
