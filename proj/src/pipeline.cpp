#include "rulmae/pipeline.hpp"

#include "rulmae/error.hpp"

namespace rulmae {

Preprocessed preprocess_train(const DatasetSplit& train, double gamma, double lambda) {
  Preprocessed prep;
  prep.report = select_features(train.units, gamma, lambda);
  if (prep.report.selected.empty()) {
    raise(ErrorCode::EmptyDataset, "no channels pass the selection criteria");
  }
  prep.stats = fit_norm(train.units, prep.report.selected);
  return prep;
}

std::vector<Window> build_training_windows(const DatasetSplit& train,
                                           const NormStats& stats, std::size_t P,
                                           std::size_t stride, bool keep_labels,
                                           std::vector<std::string>* warnings) {
  std::vector<Window> out;
  for (const UnitSeries& unit : train.units) {
    UnitSeries norm = apply_norm(unit, stats);
    if (norm.length < P) {
      if (warnings) {
        warnings->push_back("unit " + std::to_string(unit.unit_id) + " skipped: " +
                            std::to_string(unit.length) + " < " + std::to_string(P) +
                            " cycles");
      }
      continue;
    }
    std::vector<Window> ws = make_windows(norm, P, stride);
    for (Window& w : ws) {
      if (!keep_labels) w.labels.reset();
      out.push_back(std::move(w));
    }
  }
  if (out.empty()) raise(ErrorCode::EmptyDataset, "no unit long enough for a window");
  return out;
}

}  // namespace rulmae
