#include "rulmae/grad_check.hpp"

#include <algorithm>
#include <cmath>
#include <sstream>

#include "rulmae/error.hpp"

namespace rulmae {

std::string GradCheckReport::summary() const {
  std::ostringstream os;
  os << "max rel err " << max_rel_err << " over " << coords_checked
     << " coords (worst: input " << worst_input << " coord " << worst_coord
     << ", analytic " << worst_analytic << " vs numeric " << worst_numeric << ")";
  return os.str();
}

GradCheckReport grad_check(const LossAndGrad& fn, std::vector<Tensor> inputs, double h,
                           std::size_t max_coords) {
  std::vector<Tensor> analytic;
  fn(inputs, &analytic);
  if (analytic.size() != inputs.size()) {
    raise(ErrorCode::ShapeMismatch, "grad_check: gradient count mismatch");
  }
  GradCheckReport report;
  for (std::size_t i = 0; i < inputs.size(); ++i) {
    if (!analytic[i].same_shape(inputs[i])) {
      raise(ErrorCode::ShapeMismatch, "grad_check: gradient " + std::to_string(i) +
                                          " shape " + analytic[i].shape_str() +
                                          " vs input " + inputs[i].shape_str());
    }
    const std::size_t n = inputs[i].size();
    const std::size_t stride = n <= max_coords ? 1 : (n + max_coords - 1) / max_coords;
    for (std::size_t j = 0; j < n; j += stride) {
      const double saved = inputs[i][j];
      inputs[i][j] = saved + h;
      const double up = fn(inputs, nullptr);
      inputs[i][j] = saved - h;
      const double down = fn(inputs, nullptr);
      inputs[i][j] = saved;
      const double numeric = (up - down) / (2.0 * h);
      const double a = analytic[i][j];
      // Floor keeps central-difference roundoff (~|f|*eps/h ~ 1e-11) from
      // registering on coordinates whose true gradient is zero.
      const double denom = std::max({std::fabs(a), std::fabs(numeric), 1e-4});
      const double rel = std::fabs(a - numeric) / denom;
      ++report.coords_checked;
      if (rel > report.max_rel_err) {
        report.max_rel_err = rel;
        report.worst_input = i;
        report.worst_coord = j;
        report.worst_analytic = a;
        report.worst_numeric = numeric;
      }
    }
  }
  return report;
}

}  // namespace rulmae
