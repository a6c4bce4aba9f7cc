#include "rulmae/windowing.hpp"

#include <algorithm>
#include <charconv>
#include <cmath>
#include <numeric>
#include <ostream>

#include "rulmae/error.hpp"

namespace rulmae {

std::vector<Window> make_windows(const UnitSeries& unit, std::size_t P,
                                 std::size_t stride) {
  if (P == 0 || stride == 0) raise(ErrorCode::InvalidRange, "P and stride must be >= 1");
  if (unit.length < P) {
    raise(ErrorCode::UnitTooShort, "unit " + std::to_string(unit.unit_id) + " has " +
                                       std::to_string(unit.length) + " cycles, needs " +
                                       std::to_string(P));
  }
  const bool labeled = !unit.rul.empty();
  std::vector<Window> out;
  for (std::size_t t = 0; t + P <= unit.length; t += stride) {
    Window w;
    w.P = P;
    w.J = unit.n_features;
    w.unit_id = unit.unit_id;
    w.start = t;
    w.features.assign(unit.features.begin() + static_cast<std::ptrdiff_t>(t * w.J),
                      unit.features.begin() + static_cast<std::ptrdiff_t>((t + P) * w.J));
    if (labeled) {
      std::vector<double> labels(P);
      for (std::size_t i = 0; i < P; ++i) labels[i] = static_cast<double>(unit.rul[t + i]);
      w.labels = std::move(labels);
    }
    out.push_back(std::move(w));
  }
  return out;
}

Window last_window(const UnitSeries& unit, std::size_t P) {
  if (unit.length == 0) raise(ErrorCode::EmptyDataset, "empty unit");
  Window w;
  w.P = P;
  w.J = unit.n_features;
  w.unit_id = unit.unit_id;
  w.features.resize(P * w.J);
  if (unit.length >= P) {
    const std::size_t t0 = unit.length - P;
    w.start = t0;
    std::copy(unit.features.begin() + static_cast<std::ptrdiff_t>(t0 * w.J),
              unit.features.begin() + static_cast<std::ptrdiff_t>((t0 + P) * w.J),
              w.features.begin());
  } else {
    w.start = 0;
    w.pad_prefix = P - unit.length;
    for (std::size_t t = 0; t < w.pad_prefix; ++t) {
      std::copy(unit.features.begin(), unit.features.begin() + static_cast<std::ptrdiff_t>(w.J),
                w.features.begin() + static_cast<std::ptrdiff_t>(t * w.J));
    }
    std::copy(unit.features.begin(),
              unit.features.begin() + static_cast<std::ptrdiff_t>(unit.length * w.J),
              w.features.begin() + static_cast<std::ptrdiff_t>(w.pad_prefix * w.J));
  }
  if (!unit.rul.empty()) {
    std::vector<double> labels(P);
    for (std::size_t t = 0; t < P; ++t) {
      const std::size_t src = t < w.pad_prefix ? 0 : t - w.pad_prefix + w.start;
      labels[t] = static_cast<double>(unit.rul[src]);
    }
    w.labels = std::move(labels);
  }
  return w;
}

PatchedWindow patch(const Window& window, std::size_t K) {
  if (K % 2 == 0 || K > window.P || K == 0) {
    raise(ErrorCode::BadPatchSize,
          "patch size " + std::to_string(K) + " for window of " + std::to_string(window.P));
  }
  PatchedWindow p;
  p.K = K;
  p.J = window.J;
  p.N = window.P - K + 1;
  p.patches.resize(p.N * K * p.J);
  p.centers.resize(p.N);
  p.mask.assign(p.N, 0);
  for (std::size_t s = 0; s < p.N; ++s) {
    p.centers[s] = s + (K - 1) / 2;
    std::copy(window.features.begin() + static_cast<std::ptrdiff_t>(s * p.J),
              window.features.begin() + static_cast<std::ptrdiff_t>((s + K) * p.J),
              p.patches.begin() + static_cast<std::ptrdiff_t>(s * K * p.J));
  }
  p.source = window;
  return p;
}

std::size_t mask_count(double ratio, std::size_t n_patches) {
  if (ratio < 0.0 || ratio >= 1.0) {
    raise(ErrorCode::BadRatio, "masking ratio must be in [0,1)");
  }
  if (ratio == 0.0) return 0;
  auto m = static_cast<std::size_t>(
      std::llround(ratio * static_cast<double>(n_patches)));
  m = std::max<std::size_t>(m, 1);               // encoder needs work to do
  m = std::min<std::size_t>(m, n_patches - 1);   // and at least one visible patch
  return m;
}

PatchedWindow apply_mask(PatchedWindow patched, double ratio, Rng& rng) {
  const std::size_t m = mask_count(ratio, patched.N);
  std::fill(patched.mask.begin(), patched.mask.end(), 0);
  if (m == 0) return patched;
  std::vector<std::size_t> idx(patched.N);
  std::iota(idx.begin(), idx.end(), 0);
  for (std::size_t i = 0; i < m; ++i) {
    const std::size_t j = i + rng.uniform_index(patched.N - i);
    std::swap(idx[i], idx[j]);
  }
  for (std::size_t i = 0; i < m; ++i) patched.mask[idx[i]] = 1;
  return patched;
}

void write_patched_window_csv(const PatchedWindow& patched, std::ostream& out) {
  const Window& w = patched.source;
  out << "# unit=" << w.unit_id << " start=" << w.start << " P=" << w.P << " J=" << w.J
      << " K=" << patched.K << " N=" << patched.N << "\n";
  std::string line;
  char buf[32];
  for (std::size_t t = 0; t < w.P; ++t) {
    line = std::to_string(t);
    for (std::size_t j = 0; j < w.J; ++j) {
      line += ',';
      auto res = std::to_chars(buf, buf + sizeof(buf), w.feature(t, j));
      line.append(buf, res.ptr);
    }
    line += '\n';
    out << line;
  }
  line = "mask";
  for (std::size_t s = 0; s < patched.N; ++s) {
    line += ',';
    line += patched.mask[s] ? '1' : '0';
  }
  line += '\n';
  out << line;
}

SplitSets split_sets(const PatchedWindow& patched) {
  SplitSets sets;
  for (std::size_t s = 0; s < patched.N; ++s) {
    (patched.mask[s] ? sets.masked : sets.unmasked).push_back(s);
  }
  return sets;
}

}  // namespace rulmae
