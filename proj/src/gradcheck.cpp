#include "wdfq/gradcheck.hpp"

#include <cmath>

namespace wdfq {

FdReport fd_check(const FdCase& c, double h) {
  std::vector<Tensor> inputs = c.inputs;
  const auto phi = [&]() {
    Tensor y = c.forward(inputs);
    require_same_shape(y, c.cotangent, "fd_check cotangent");
    return y.as_vector().dot(c.cotangent.as_vector());
  };
  FdReport rep;
  for (std::size_t i = 0; i < inputs.size(); ++i) {
    if (!c.wrt.empty() && !c.wrt[i]) continue;
    const Tensor& an = c.analytic[i];
    require_same_shape(inputs[i], an, "fd_check analytic gradient");
    const std::int64_t stride = i < c.probe_stride.size() ? c.probe_stride[i] : 1;
    for (std::int64_t j = 0; j < inputs[i].size(); j += stride) {
      const double saved = inputs[i][j];
      inputs[i][j] = saved + h;
      const double up = phi();
      inputs[i][j] = saved - h;
      const double dn = phi();
      inputs[i][j] = saved;
      const double fd = (up - dn) / (2.0 * h);
      const double rel =
          std::fabs(fd - an[j]) / std::max({1.0, std::fabs(fd), std::fabs(an[j])});
      if (rel > rep.max_rel_err) rep.max_rel_err = rel;
      ++rep.elements;
    }
  }
  return rep;
}

}  // namespace wdfq
