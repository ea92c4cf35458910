#pragma once

#include <cstddef>
#include <functional>
#include <map>
#include <string>

#include "ltp/autodiff.hpp"

namespace ltp {

struct GradCheckOptions {
    double step = 1e-5;
    // Upper bound on probed coordinates per tensor; 0 probes every coordinate.
    // Probed coordinates are spread evenly over the flat index range.
    std::size_t max_coords_per_tensor = 0;
};

using ScalarFn = std::function<Var(Tape&, Var)>;
using NamedScalarFn = std::function<Var(Tape&, const std::map<std::string, Var>&)>;

// Max over probed coordinates of |analytic - central difference| / max(1, |analytic|).
// A NaN anywhere is returned as NaN.
double finite_difference_check(const ScalarFn& fn, const Tensor& point, const GradCheckOptions& options = {});

double finite_difference_check(const NamedScalarFn& fn, const std::map<std::string, Tensor>& point,
                               const GradCheckOptions& options = {});

}  // namespace ltp
