#pragma once

#include <cstdint>
#include <iosfwd>
#include <optional>
#include <vector>

#include "rulmae/ingest.hpp"
#include "rulmae/rng.hpp"

namespace rulmae {

struct Window {
  std::size_t P = 0;
  std::size_t J = 0;
  std::vector<double> features;              // [P x J]
  std::optional<std::vector<double>> labels;  // [P], present iff source labeled
  int unit_id = 0;
  std::size_t start = 0;       // first covered timestamp within the unit
  std::size_t pad_prefix = 0;  // leading rows repeated from the first real row

  double feature(std::size_t t, std::size_t j) const { return features[t * J + j]; }
};

// A window split into overlapping K-step patches plus the mask bitmap.
// Patch s covers rows [s, s+K); its center timestamp is s + (K-1)/2.
struct PatchedWindow {
  std::size_t N = 0;
  std::size_t K = 0;
  std::size_t J = 0;
  std::vector<double> patches;       // [N x K x J]
  std::vector<std::size_t> centers;  // [N]
  std::vector<std::uint8_t> mask;    // [N]; 1 = masked
  Window source;

  std::size_t masked_count() const {
    std::size_t m = 0;
    for (auto b : mask) m += b ? 1 : 0;
    return m;
  }
};

struct SplitSets {
  std::vector<std::size_t> unmasked;  // original relative order
  std::vector<std::size_t> masked;
};

// Sliding windows [t, t+P) for t = 0, stride, 2*stride, ... Labels are
// sliced in parallel when the unit carries them. UnitTooShort when the unit
// is shorter than P.
std::vector<Window> make_windows(const UnitSeries& unit, std::size_t P,
                                 std::size_t stride);

// Evaluation protocol: one window covering the unit's last P cycles. Units
// shorter than P are left-padded by repeating their first row; padded rows
// are flagged via pad_prefix and excluded from losses and metrics.
Window last_window(const UnitSeries& unit, std::size_t P);

// All-zero mask. BadPatchSize when K is even or exceeds P.
PatchedWindow patch(const Window& window, std::size_t K);

// Flags exactly round(ratio*N) distinct patches, uniformly without
// replacement; at least 1 when ratio > 0 and never all N. Patch data is
// untouched. BadRatio unless 0 <= ratio < 1.
PatchedWindow apply_mask(PatchedWindow patched, double ratio, Rng& rng);

std::size_t mask_count(double ratio, std::size_t n_patches);

SplitSets split_sets(const PatchedWindow& patched);

// Debug dump: one row per timestamp followed by a per-patch mask row.
void write_patched_window_csv(const PatchedWindow& patched, std::ostream& out);

}  // namespace rulmae
