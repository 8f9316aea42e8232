#pragma once

#include <algorithm>
#include <functional>

#include <torch/torch.h>

namespace testsupport {

/// Relative L2 gap between the autograd gradient of a scalar function and its
/// central finite-difference estimate, in double precision.
inline double gradient_rel_error(const std::function<torch::Tensor(const torch::Tensor&)>& f, const torch::Tensor& at,
                                 double h = 1e-6) {
    auto x = at.detach().to(torch::kFloat64).clone().requires_grad_(true);
    const auto analytic = torch::autograd::grad({f(x)}, {x}, {}, false, false, true)[0];
    const auto a = analytic.defined() ? analytic.detach() : torch::zeros_like(x);
    auto numeric = torch::zeros_like(x).detach();
    auto flat = x.detach().clone();
    auto* p = flat.data_ptr<double>();
    auto* n = numeric.data_ptr<double>();
    torch::NoGradGuard ng;
    for (std::int64_t i = 0; i < flat.numel(); ++i) {
        const double v = p[i];
        p[i] = v + h;
        const double up = f(flat).item<double>();
        p[i] = v - h;
        const double down = f(flat).item<double>();
        p[i] = v;
        n[i] = (up - down) / (2 * h);
    }
    const double scale = std::max({a.norm().item<double>(), numeric.norm().item<double>(), 1e-12});
    return (a - numeric).norm().item<double>() / scale;
}

}  // namespace testsupport
