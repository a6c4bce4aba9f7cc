#include "rulmae/ingest.hpp"

#include <algorithm>
#include <charconv>
#include <cmath>
#include <filesystem>
#include <fstream>
#include <istream>
#include <map>
#include <ostream>
#include <sstream>

#include "rulmae/error.hpp"
#include "rulmae/rng.hpp"

namespace rulmae {
namespace {

bool parse_double(const std::string& token, double& out) {
  const char* first = token.data();
  const char* last = first + token.size();
  auto [ptr, ec] = std::from_chars(first, last, out);
  return ec == std::errc() && ptr == last;
}

void append_double(std::string& line, double v) {
  char buf[32];
  auto res = std::to_chars(buf, buf + sizeof(buf), v);
  line.append(buf, res.ptr);
}

}  // namespace

DatasetSplit parse_cmapss(std::istream& in, SplitRole role) {
  struct Raw {
    int cycle;
    std::array<double, kOpSettingCols> ops;
    std::array<double, kSensorCols> sensors;
  };
  std::map<int, std::vector<Raw>> by_unit;

  std::string line;
  std::size_t line_no = 0;
  while (std::getline(in, line)) {
    ++line_no;
    std::istringstream ls(line);
    std::vector<std::string> tokens;
    std::string tok;
    while (ls >> tok) tokens.push_back(tok);
    if (tokens.empty()) continue;  // blank lines tolerated
    if (tokens.size() != kRecordCols) {
      raise(ErrorCode::MalformedLine,
            "line " + std::to_string(line_no) + ": expected " +
                std::to_string(kRecordCols) + " columns, got " +
                std::to_string(tokens.size()));
    }
    double unit_d = 0.0, cycle_d = 0.0;
    if (!parse_double(tokens[0], unit_d) || !parse_double(tokens[1], cycle_d) ||
        unit_d != std::floor(unit_d) || cycle_d != std::floor(cycle_d) ||
        unit_d < 1 || cycle_d < 1) {
      raise(ErrorCode::MalformedLine,
            "line " + std::to_string(line_no) + ": bad unit/cycle fields");
    }
    Raw r;
    r.cycle = static_cast<int>(cycle_d);
    for (std::size_t c = 0; c < kOpSettingCols; ++c) {
      if (!parse_double(tokens[2 + c], r.ops[c])) {
        raise(ErrorCode::MalformedLine, "line " + std::to_string(line_no) +
                                            ": non-numeric token '" + tokens[2 + c] + "'");
      }
    }
    for (std::size_t c = 0; c < kSensorCols; ++c) {
      if (!parse_double(tokens[2 + kOpSettingCols + c], r.sensors[c])) {
        raise(ErrorCode::MalformedLine,
              "line " + std::to_string(line_no) + ": non-numeric token '" +
                  tokens[2 + kOpSettingCols + c] + "'");
      }
    }
    by_unit[static_cast<int>(unit_d)].push_back(r);
  }

  DatasetSplit split;
  split.role = role;
  for (auto& [unit_id, rows] : by_unit) {
    std::stable_sort(rows.begin(), rows.end(),
                     [](const Raw& a, const Raw& b) { return a.cycle < b.cycle; });
    for (std::size_t i = 0; i < rows.size(); ++i) {
      if (rows[i].cycle != static_cast<int>(i) + 1) {
        raise(ErrorCode::NonContiguousCycles,
              "unit " + std::to_string(unit_id) + ": cycle " +
                  std::to_string(rows[i].cycle) + " at position " +
                  std::to_string(i + 1));
      }
    }
    UnitSeries u;
    u.unit_id = unit_id;
    u.length = rows.size();
    u.n_features = kSensorCols;
    u.features.resize(u.length * kSensorCols);
    u.op_settings.resize(u.length * kOpSettingCols);
    u.cycles.resize(u.length);
    for (std::size_t i = 0; i < rows.size(); ++i) {
      u.cycles[i] = rows[i].cycle;
      for (std::size_t c = 0; c < kOpSettingCols; ++c) {
        u.op_settings[i * kOpSettingCols + c] = rows[i].ops[c];
      }
      for (std::size_t c = 0; c < kSensorCols; ++c) {
        u.features[i * kSensorCols + c] = rows[i].sensors[c];
      }
    }
    split.units.push_back(std::move(u));
  }
  return split;
}

std::vector<int> parse_truth(std::istream& in) {
  std::vector<int> truth;
  std::string line;
  std::size_t line_no = 0;
  while (std::getline(in, line)) {
    ++line_no;
    std::istringstream ls(line);
    std::string tok;
    if (!(ls >> tok)) continue;
    double v = 0.0;
    std::string extra;
    if (!parse_double(tok, v) || v != std::floor(v) || v < 0 || (ls >> extra)) {
      raise(ErrorCode::MalformedLine,
            "truth line " + std::to_string(line_no) + ": expected one integer");
    }
    truth.push_back(static_cast<int>(v));
  }
  return truth;
}

void write_cmapss(const DatasetSplit& split, std::ostream& out) {
  std::string line;
  for (const UnitSeries& u : split.units) {
    for (std::size_t i = 0; i < u.length; ++i) {
      line.clear();
      line += std::to_string(u.unit_id);
      line += ' ';
      line += std::to_string(u.cycles.empty() ? static_cast<int>(i) + 1 : u.cycles[i]);
      for (std::size_t c = 0; c < kOpSettingCols; ++c) {
        line += ' ';
        append_double(line, u.op_settings.empty() ? 0.0
                                                  : u.op_settings[i * kOpSettingCols + c]);
      }
      for (std::size_t c = 0; c < kSensorCols; ++c) {
        line += ' ';
        append_double(line, c < u.n_features ? u.feature(i, c) : 0.0);
      }
      line += '\n';
      out << line;
    }
  }
}

void write_truth(const std::vector<int>& truth, std::ostream& out) {
  for (int v : truth) out << v << '\n';
}

UnitSeries label_rul(UnitSeries unit) {
  const int max_cycle =
      unit.cycles.empty() ? static_cast<int>(unit.length)
                          : *std::max_element(unit.cycles.begin(), unit.cycles.end());
  unit.rul.resize(unit.length);
  for (std::size_t i = 0; i < unit.length; ++i) {
    const int cycle = unit.cycles.empty() ? static_cast<int>(i) + 1 : unit.cycles[i];
    unit.rul[i] = max_cycle - cycle;
  }
  return unit;
}

DatasetSplit generate_synthetic(std::size_t n_units, std::pair<int, int> length_range,
                                std::size_t n_features, double noise_level,
                                std::uint64_t seed) {
  if (length_range.first < 1 || length_range.second < length_range.first) {
    raise(ErrorCode::InvalidRange, "empty unit length range");
  }
  if (n_units == 0) raise(ErrorCode::EmptyDataset, "n_units must be >= 1");
  if (n_features == 0) raise(ErrorCode::InvalidRange, "n_features must be >= 1");

  DatasetSplit split;
  split.role = SplitRole::train;
  for (std::size_t q = 0; q < n_units; ++q) {
    Rng rng(mix_seed(seed, 0xA11CE5u, q));
    const int span = length_range.second - length_range.first + 1;
    const std::size_t length =
        static_cast<std::size_t>(length_range.first) +
        rng.uniform_index(static_cast<std::size_t>(span));

    UnitSeries u;
    u.unit_id = static_cast<int>(q) + 1;
    u.length = length;
    u.n_features = n_features;
    u.features.resize(length * n_features);
    u.op_settings.assign(length * kOpSettingCols, 0.0);
    u.cycles.resize(length);
    for (std::size_t i = 0; i < length; ++i) u.cycles[i] = static_cast<int>(i) + 1;

    for (std::size_t j = 0; j < n_features; ++j) {
      // Channel archetypes cycle through: exact linear trend, degradation
      // curve tied to remaining life, periodic, pure noise.
      const int kind = static_cast<int>(j % 4);
      const double base = rng.uniform(-2.0, 2.0);
      const double gain = rng.uniform(0.5, 2.0);
      const double tau = rng.uniform(15.0, 40.0);
      const double period = rng.uniform(7.0, 15.0);
      const double phase = rng.uniform(0.0, 6.283185307179586);
      for (std::size_t i = 0; i < length; ++i) {
        const double rul = static_cast<double>(length - 1 - i);
        double v = 0.0;
        switch (kind) {
          case 0: v = base + gain * static_cast<double>(i + 1); break;
          case 1: v = base + gain * std::exp(-rul / tau); break;
          case 2: v = base + gain * std::sin(6.283185307179586 * static_cast<double>(i) / period + phase); break;
          default: v = base; break;
        }
        double noise = 0.0;
        if (kind == 3) {
          noise = rng.normal(0.0, 1.0);  // pure-noise channel
        } else if (noise_level > 0.0) {
          noise = noise_level * gain * rng.normal(0.0, 1.0);
        }
        u.features[i * n_features + j] = v + noise;
      }
    }
    split.units.push_back(label_rul(std::move(u)));
  }
  return split;
}

DatasetSplit truncate_for_test(const DatasetSplit& full, std::uint64_t seed,
                               std::size_t min_keep) {
  DatasetSplit out;
  out.role = SplitRole::test;
  std::vector<int> truth;
  for (std::size_t idx = 0; idx < full.units.size(); ++idx) {
    const UnitSeries& u = full.units[idx];
    if (u.length < 2) raise(ErrorCode::UnitTooShort, "cannot truncate a length-1 unit");
    Rng rng(mix_seed(seed, 0x7E57u, idx));
    const std::size_t lo = std::min(std::max<std::size_t>(min_keep, 1), u.length - 1);
    const std::size_t keep = lo + rng.uniform_index(u.length - lo);
    UnitSeries t;
    t.unit_id = u.unit_id;
    t.length = keep;
    t.n_features = u.n_features;
    t.features.assign(u.features.begin(),
                      u.features.begin() + static_cast<std::ptrdiff_t>(keep * u.n_features));
    if (!u.op_settings.empty()) {
      t.op_settings.assign(
          u.op_settings.begin(),
          u.op_settings.begin() + static_cast<std::ptrdiff_t>(keep * kOpSettingCols));
    }
    t.cycles.assign(u.cycles.begin(), u.cycles.begin() + static_cast<std::ptrdiff_t>(keep));
    truth.push_back(static_cast<int>(u.length - keep));
    out.units.push_back(std::move(t));
  }
  out.test_rul_truth = std::move(truth);
  return out;
}

DatasetPaths DatasetPaths::from_stem(const std::string& stem) {
  std::filesystem::path p(stem);
  const std::string name = p.filename().string();
  const std::filesystem::path dir = p.parent_path();
  DatasetPaths out;
  out.train_file = (dir / ("train_" + name + ".txt")).string();
  out.test_file = (dir / ("test_" + name + ".txt")).string();
  out.truth_file = (dir / ("RUL_" + name + ".txt")).string();
  return out;
}

DatasetSplit load_train_split(const std::string& path) {
  std::ifstream in(path);
  if (!in) raise(ErrorCode::IoError, "cannot open dataset file " + path);
  DatasetSplit split = parse_cmapss(in, SplitRole::train);
  if (split.units.empty()) raise(ErrorCode::EmptyDataset, "no records in " + path);
  for (UnitSeries& u : split.units) u = label_rul(std::move(u));
  return split;
}

DatasetSplit load_test_split(const std::string& data_file, const std::string& truth_file) {
  std::ifstream in(data_file);
  if (!in) raise(ErrorCode::IoError, "cannot open dataset file " + data_file);
  DatasetSplit split = parse_cmapss(in, SplitRole::test);
  std::ifstream tin(truth_file);
  if (!tin) raise(ErrorCode::MissingTruth, "cannot open truth file " + truth_file);
  auto truth = parse_truth(tin);
  if (truth.size() != split.units.size()) {
    raise(ErrorCode::MissingTruth,
          "truth file has " + std::to_string(truth.size()) + " entries for " +
              std::to_string(split.units.size()) + " test units");
  }
  split.test_rul_truth = std::move(truth);
  return split;
}

}  // namespace rulmae
