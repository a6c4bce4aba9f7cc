#include "rulmae/tensor.hpp"

#include <sstream>

#include "rulmae/error.hpp"

namespace rulmae {

Tensor::Tensor(std::vector<std::size_t> shape, std::vector<double> data)
    : shape_(std::move(shape)), data_(std::move(data)) {
  if (data_.size() != numel(shape_)) {
    raise(ErrorCode::ShapeMismatch, "tensor data length does not match shape");
  }
}

Tensor Tensor::full(std::vector<std::size_t> shape, double value) {
  Tensor t(std::move(shape));
  t.fill(value);
  return t;
}

std::size_t Tensor::numel(const std::vector<std::size_t>& shape) {
  std::size_t n = 1;
  for (std::size_t d : shape) n *= d;
  return shape.empty() ? 0 : n;
}

std::string Tensor::shape_str() const {
  std::ostringstream os;
  os << '[';
  for (std::size_t i = 0; i < shape_.size(); ++i) {
    if (i) os << 'x';
    os << shape_[i];
  }
  os << ']';
  return os.str();
}

const char* error_code_name(ErrorCode code) {
  switch (code) {
    case ErrorCode::MalformedLine: return "MalformedLine";
    case ErrorCode::NonContiguousCycles: return "NonContiguousCycles";
    case ErrorCode::InvalidRange: return "InvalidRange";
    case ErrorCode::EmptyDataset: return "EmptyDataset";
    case ErrorCode::UnknownFeature: return "UnknownFeature";
    case ErrorCode::UnitTooShort: return "UnitTooShort";
    case ErrorCode::BadPatchSize: return "BadPatchSize";
    case ErrorCode::BadRatio: return "BadRatio";
    case ErrorCode::ShapeMismatch: return "ShapeMismatch";
    case ErrorCode::NonFinite: return "NonFinite";
    case ErrorCode::BadHeadCount: return "BadHeadCount";
    case ErrorCode::BadDim: return "BadDim";
    case ErrorCode::IndexOverlap: return "IndexOverlap";
    case ErrorCode::EmptyInput: return "EmptyInput";
    case ErrorCode::AllMasked: return "AllMasked";
    case ErrorCode::MissingLabels: return "MissingLabels";
    case ErrorCode::NonFiniteLoss: return "NonFiniteLoss";
    case ErrorCode::VersionMismatch: return "VersionMismatch";
    case ErrorCode::CorruptFile: return "CorruptFile";
    case ErrorCode::MissingTruth: return "MissingTruth";
    case ErrorCode::IoError: return "IoError";
  }
  return "UnknownError";
}

}  // namespace rulmae
