#pragma once

#include <cstdint>
#include <functional>
#include <map>
#include <string>
#include <vector>

#include "wdfq/tensor.hpp"

namespace wdfq {

// One finite-difference check instance: a multi-input single-output forward,
// its claimed input gradients for a fixed cotangent, and which inputs carry
// gradient at all.
struct FdCase {
  std::function<Tensor(const std::vector<Tensor>&)> forward;
  std::vector<Tensor> inputs;
  std::vector<bool> wrt;           // empty means every input
  Tensor cotangent;                // same shape as forward output
  std::vector<Tensor> analytic;    // one per input; ignored where !wrt
  std::vector<std::int64_t> probe_stride;  // per input, default 1 (every element)
};

struct FdReport {
  double max_rel_err = 0.0;
  std::int64_t elements = 0;
};

// Central differences with step h: rel err per element is
// |fd - an| / max(1, |fd|, |an|); the report keeps the worst one.
FdReport fd_check(const FdCase& c, double h = 1e-5);

// Named factories producing randomized check instances; index varies the
// draw. Keys cover every registered kernel plus the composite losses and
// module forwards, shared by the test suite and the `gradcheck` subcommand.
using FdCaseFactory = std::function<FdCase(std::uint64_t seed, int index)>;
const std::map<std::string, FdCaseFactory>& gradcheck_registry();

}  // namespace wdfq
