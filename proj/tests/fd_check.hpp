#pragma once

// Finite-difference gradient oracle shared by unit and acceptance tests.
// Independent of the autograd implementation: it only evaluates forward passes.

#include <cmath>
#include <functional>
#include <string>
#include <vector>

#include "kdlab/tensor.hpp"

namespace kdtest {

using kdlab::real_t;
using kdlab::Tensor;

// Builds a fresh scalar loss from the current values of `params`.
using LossFn = std::function<Tensor(std::vector<Tensor>&)>;

struct FdReport {
    bool ok = true;
    std::string detail;
    double worst_rel_err = 0.0;
};

inline double rel_err(double a, double b) {
    return std::fabs(a - b) / std::max({1.0, std::fabs(a), std::fabs(b)});
}

// Central differences with step h against autograd grads, element by element.
inline FdReport fd_check(const LossFn& fn, std::vector<Tensor>& params, double h = 1e-5,
                         double tol = 1e-6) {
    FdReport report;
    Tensor loss = fn(params);
    kdlab::backward(loss);
    std::vector<std::vector<real_t>> grads;
    for (auto& p : params) {
        grads.push_back(p.has_grad() ? p.grad() : std::vector<real_t>(p.size(), real_t(0)));
    }
    for (size_t pi = 0; pi < params.size(); ++pi) {
        auto& data = params[pi].data();
        for (size_t j = 0; j < data.size(); ++j) {
            const real_t orig = data[j];
            data[j] = orig + static_cast<real_t>(h);
            const double fp = fn(params).item();
            data[j] = orig - static_cast<real_t>(h);
            const double fm = fn(params).item();
            data[j] = orig;
            const double fd = (fp - fm) / (2 * h);
            const double err = rel_err(fd, grads[pi][j]);
            report.worst_rel_err = std::max(report.worst_rel_err, err);
            if (err > tol) {
                report.ok = false;
                report.detail = "param " + std::to_string(pi) + " elem " + std::to_string(j) +
                                ": autograd " + std::to_string(grads[pi][j]) + " vs fd " +
                                std::to_string(fd);
                return report;
            }
        }
    }
    return report;
}

} // namespace kdtest
