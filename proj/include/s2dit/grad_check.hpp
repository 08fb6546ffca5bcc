#pragma once

#include <functional>
#include <string>
#include <vector>

#include "s2dit/tensor.hpp"

namespace s2dit {

struct GradCheckResult {
    std::string name;
    double max_rel_err = 0.0;
    bool pass = false;
};

using TensorFn = std::function<Tensor(const std::vector<Tensor>&)>;

/// Central finite differences against the tape. Inputs must be float64; the
/// output is reduced to a scalar through a fixed random projection so ops
/// with tensor outputs are covered elementwise.
GradCheckResult grad_check(const std::string& name, const TensorFn& f, std::vector<Tensor> inputs,
                           double tol = 1e-4, double fd_step = 1e-5, uint64_t proj_seed = 7);

struct RegisteredOp {
    std::string name;
    std::function<GradCheckResult(Rng&, double tol)> run;
};

/// Gradient-checkable op catalog (straight-through ops excluded: their
/// backward is intentionally not the derivative of the hard forward).
const std::vector<RegisteredOp>& op_gradient_registry();

}  // namespace s2dit
