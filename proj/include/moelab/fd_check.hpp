#pragma once

#include <algorithm>
#include <cmath>
#include <functional>
#include <span>
#include <string>
#include <vector>

#include "moelab/ops.hpp"
#include "moelab/tensor.hpp"

namespace moelab {

struct FdReport {
    double max_rel_err = 0.0;
    std::size_t worst_param = 0;
    std::int64_t worst_index = -1;
    double autodiff_value = 0.0;
    double fd_value = 0.0;
};

// Central-difference check of reverse-mode gradients: rebuilds the loss via
// `f` on a fresh tape, backpropagates once, then perturbs every parameter
// element by +/-h with recording off. Relative error uses
// max(|autodiff|, |fd|, 1e-8) as denominator.
template <class S>
FdReport fd_check(const std::function<Tensor<S>(Tape<S>&)>& f,
                  std::span<Tensor<S>> params, double h = 1e-5) {
    if (h <= 0) throw NumericError("fd_check: step h must be positive");

    Tape<S> tape;
    for (auto& p : params) p.zero_grad();
    Tensor<S> loss = f(tape);
    if (!std::isfinite(static_cast<double>(loss.item())))
        throw NumericError("fd_check: non-finite loss");
    tape.backward(loss);

    std::vector<Eigen::Matrix<S, Eigen::Dynamic, 1>> ad;
    ad.reserve(params.size());
    for (auto& p : params) ad.push_back(p.grad());

    Tape<S> probe;
    probe.set_recording(false);
    auto eval = [&]() -> double {
        probe.clear();
        return static_cast<double>(f(probe).item());
    };

    FdReport rep;
    for (std::size_t pi = 0; pi < params.size(); ++pi) {
        auto& vals = params[pi].values();
        for (std::int64_t i = 0; i < vals.size(); ++i) {
            const S saved = vals[i];
            vals[i] = saved + static_cast<S>(h);
            const double fp = eval();
            vals[i] = saved - static_cast<S>(h);
            const double fm = eval();
            vals[i] = saved;
            if (!std::isfinite(fp) || !std::isfinite(fm))
                throw NumericError("fd_check: non-finite loss at perturbed point");
            const double fd = (fp - fm) / (2.0 * h);
            const double a = static_cast<double>(ad[pi][i]);
            const double denom = std::max({std::abs(a), std::abs(fd), 1e-8});
            const double rel = std::abs(a - fd) / denom;
            if (rel > rep.max_rel_err) {
                rep.max_rel_err = rel;
                rep.worst_param = pi;
                rep.worst_index = i;
                rep.autodiff_value = a;
                rep.fd_value = fd;
            }
        }
    }
    return rep;
}

}  // namespace moelab
