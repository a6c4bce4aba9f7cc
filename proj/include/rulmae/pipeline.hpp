#pragma once

#include <string>
#include <vector>

#include "rulmae/features.hpp"
#include "rulmae/ingest.hpp"
#include "rulmae/train.hpp"
#include "rulmae/windowing.hpp"

namespace rulmae {

struct Preprocessed {
  FeatureReport report;
  NormStats stats;
};

// Feature selection + normalization stats from a labeled training split.
Preprocessed preprocess_train(const DatasetSplit& train, double gamma, double lambda);

// Normalizes every unit with the fitted stats and slices sliding windows.
// Units shorter than P are skipped; a note per skipped unit is appended to
// `warnings` when given. `keep_labels` false drops labels (phase one).
std::vector<Window> build_training_windows(const DatasetSplit& train,
                                           const NormStats& stats, std::size_t P,
                                           std::size_t stride, bool keep_labels,
                                           std::vector<std::string>* warnings);

}  // namespace rulmae
