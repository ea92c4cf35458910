#include "ltp/gradcheck.hpp"

#include <algorithm>
#include <cmath>
#include <limits>
#include <vector>

#include "ltp/error.hpp"

namespace ltp {

namespace {

double evaluate(const NamedScalarFn& fn, const std::map<std::string, Tensor>& point) {
    Tape tape;
    std::map<std::string, Var> vars;
    for (const auto& [name, t] : point) {
        vars.emplace(name, tape.reference(t, false));
    }
    return fn(tape, vars).value().item();
}

std::vector<std::size_t> probe_indices(std::size_t n, std::size_t max_coords) {
    std::vector<std::size_t> out;
    if (max_coords == 0 || max_coords >= n) {
        out.resize(n);
        for (std::size_t i = 0; i < n; ++i) {
            out[i] = i;
        }
        return out;
    }
    for (std::size_t j = 0; j < max_coords; ++j) {
        out.push_back(j * n / max_coords);
    }
    return out;
}

}  // namespace

double finite_difference_check(const NamedScalarFn& fn, const std::map<std::string, Tensor>& point,
                               const GradCheckOptions& options) {
    GradientMap analytic;
    {
        Tape tape;
        std::map<std::string, Var> vars;
        for (const auto& [name, t] : point) {
            vars.emplace(name, tape.parameter(name, t));
        }
        Var loss = fn(tape, vars);
        analytic = tape.backward(loss);
    }

    std::map<std::string, Tensor> probe = point;
    const double h = options.step;
    double worst = 0.0;
    for (auto& [name, tensor] : probe) {
        const Tensor& a = analytic.at(name);
        for (std::size_t i : probe_indices(tensor.size(), options.max_coords_per_tensor)) {
            const double orig = tensor[i];
            tensor[i] = orig + h;
            const double fp = evaluate(fn, probe);
            tensor[i] = orig - h;
            const double fm = evaluate(fn, probe);
            tensor[i] = orig;
            const double numeric = (fp - fm) / (2.0 * h);
            const double err = std::fabs(a[i] - numeric) / std::max(1.0, std::fabs(a[i]));
            if (std::isnan(err)) {
                return std::numeric_limits<double>::quiet_NaN();
            }
            worst = std::max(worst, err);
        }
    }
    return worst;
}

double finite_difference_check(const ScalarFn& fn, const Tensor& point, const GradCheckOptions& options) {
    NamedScalarFn named = [&fn](Tape& tape, const std::map<std::string, Var>& vars) {
        return fn(tape, vars.at("x"));
    };
    return finite_difference_check(named, {{"x", point}}, options);
}

}  // namespace ltp
