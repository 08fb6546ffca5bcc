#include "s2dit/grad_check.hpp"

#include <cmath>

#include "s2dit/ops.hpp"

namespace s2dit {

GradCheckResult grad_check(const std::string& name, const TensorFn& f, std::vector<Tensor> inputs,
                           double tol, double fd_step, uint64_t proj_seed) {
    for (auto& in : inputs) {
        if (in.dtype != Dtype::f64) {
            throw std::invalid_argument("grad_check(" + name + "): float64 inputs required");
        }
        in.set_requires_grad(true);
        in.zero_grad();
    }
    Tensor out = f(inputs);
    if (!out.node) {
        throw std::runtime_error("grad_check(" + name + "): no vjp registered on the output path");
    }
    Rng proj_rng(proj_seed);
    Tensor proj = proj_rng.rand_uniform(out.shape, -1.0, 1.0);

    auto project = [&](const Tensor& t) {
        double acc = 0.0;
        for (size_t i = 0; i < t.numel(); ++i) acc += t.at(i) * proj.at(i);
        return acc;
    };

    Tensor loss = ops::scale(ops::mean_all(ops::mul(out, proj)), static_cast<double>(out.numel()));
    backward(loss);

    GradCheckResult res{name, 0.0, false};
    for (auto& in : inputs) {
        const auto& analytic = *in.grad;
        for (size_t i = 0; i < in.numel(); ++i) {
            const double saved = in.at(i);
            double lp, lm;
            {
                NoGradGuard ng;
                in.at(i) = saved + fd_step;
                lp = project(f(inputs));
                in.at(i) = saved - fd_step;
                lm = project(f(inputs));
                in.at(i) = saved;
            }
            const double numeric = (lp - lm) / (2.0 * fd_step);
            const double denom = std::max({std::fabs(analytic[i]), std::fabs(numeric), 1e-6});
            res.max_rel_err = std::max(res.max_rel_err, std::fabs(analytic[i] - numeric) / denom);
        }
    }
    res.pass = res.max_rel_err <= tol;
    return res;
}

namespace {

Tensor rnd(Rng& rng, std::vector<size_t> shape) { return rng.randn(std::move(shape)); }

// Bounded away from zero so kinked activations stay finite-difference safe.
Tensor rnd_offzero(Rng& rng, std::vector<size_t> shape) {
    Tensor t = rng.rand_uniform(std::move(shape), 0.2, 1.0);
    for (auto& v : *t.data)
        if (rng.uniform() < 0.5) v = -v;
    return t;
}

std::vector<RegisteredOp> build_registry() {
    using namespace ops;
    std::vector<RegisteredOp> reg;
    auto entry = [&](const std::string& name, auto make_inputs, TensorFn fn) {
        reg.push_back({name, [name, make_inputs, fn](Rng& rng, double tol) {
                           return grad_check(name, fn, make_inputs(rng), tol);
                       }});
    };

    entry("add", [](Rng& r) { return std::vector<Tensor>{rnd(r, {3, 4}), rnd(r, {3, 4})}; },
          [](const std::vector<Tensor>& in) { return add(in[0], in[1]); });
    entry("sub", [](Rng& r) { return std::vector<Tensor>{rnd(r, {3, 4}), rnd(r, {3, 4})}; },
          [](const std::vector<Tensor>& in) { return sub(in[0], in[1]); });
    entry("mul", [](Rng& r) { return std::vector<Tensor>{rnd(r, {3, 4}), rnd(r, {3, 4})}; },
          [](const std::vector<Tensor>& in) { return mul(in[0], in[1]); });
    entry("add_rowwise", [](Rng& r) { return std::vector<Tensor>{rnd(r, {3, 4}), rnd(r, {4})}; },
          [](const std::vector<Tensor>& in) { return add_rowwise(in[0], in[1]); });
    entry("mul_rowwise", [](Rng& r) { return std::vector<Tensor>{rnd(r, {3, 4}), rnd(r, {4})}; },
          [](const std::vector<Tensor>& in) { return mul_rowwise(in[0], in[1]); });
    entry("scale", [](Rng& r) { return std::vector<Tensor>{rnd(r, {5})}; },
          [](const std::vector<Tensor>& in) { return scale(in[0], -1.7); });
    entry("mul_scalar_t", [](Rng& r) { return std::vector<Tensor>{rnd(r, {3, 3}), rnd(r, {1})}; },
          [](const std::vector<Tensor>& in) { return mul_scalar_t(in[0], in[1]); });
    entry("relu", [](Rng& r) { return std::vector<Tensor>{rnd_offzero(r, {4, 4})}; },
          [](const std::vector<Tensor>& in) { return relu(in[0]); });
    entry("sigmoid", [](Rng& r) { return std::vector<Tensor>{rnd(r, {4, 4})}; },
          [](const std::vector<Tensor>& in) { return sigmoid(in[0]); });
    entry("silu", [](Rng& r) { return std::vector<Tensor>{rnd(r, {4, 4})}; },
          [](const std::vector<Tensor>& in) { return silu(in[0]); });
    entry("softplus", [](Rng& r) { return std::vector<Tensor>{rnd(r, {4, 4})}; },
          [](const std::vector<Tensor>& in) { return softplus(in[0]); });
    entry("matmul", [](Rng& r) { return std::vector<Tensor>{rnd(r, {4, 4}), rnd(r, {4, 4})}; },
          [](const std::vector<Tensor>& in) { return matmul(in[0], in[1]); });
    entry("transpose2d", [](Rng& r) { return std::vector<Tensor>{rnd(r, {3, 5})}; },
          [](const std::vector<Tensor>& in) { return transpose2d(in[0]); });
    entry("reshape", [](Rng& r) { return std::vector<Tensor>{rnd(r, {3, 4})}; },
          [](const std::vector<Tensor>& in) { return reshape(in[0], {2, 6}); });
    entry("slice_lastdim", [](Rng& r) { return std::vector<Tensor>{rnd(r, {3, 6})}; },
          [](const std::vector<Tensor>& in) { return slice_lastdim(in[0], 2, 3); });
    entry("concat_lastdim", [](Rng& r) { return std::vector<Tensor>{rnd(r, {3, 2}), rnd(r, {3, 3})}; },
          [](const std::vector<Tensor>& in) { return concat_lastdim({in[0], in[1]}); });
    entry("softmax", [](Rng& r) { return std::vector<Tensor>{rnd(r, {4, 5})}; },
          [](const std::vector<Tensor>& in) { return softmax_lastdim(in[0]); });
    entry("softmax_causal", [](Rng& r) { return std::vector<Tensor>{rnd(r, {5, 5})}; },
          [](const std::vector<Tensor>& in) { return softmax_lastdim(in[0], true); });
    entry("layer_norm",
          [](Rng& r) { return std::vector<Tensor>{rnd(r, {3, 6}), rnd(r, {6}), rnd(r, {6})}; },
          [](const std::vector<Tensor>& in) { return layer_norm(in[0], in[1], in[2]); });
    entry("layer_norm_noaffine", [](Rng& r) { return std::vector<Tensor>{rnd(r, {3, 6})}; },
          [](const std::vector<Tensor>& in) { return layer_norm_noaffine(in[0]); });
    entry("mean_all", [](Rng& r) { return std::vector<Tensor>{rnd(r, {3, 4})}; },
          [](const std::vector<Tensor>& in) { return mean_all(in[0]); });
    entry("mean_square", [](Rng& r) { return std::vector<Tensor>{rnd(r, {3, 4})}; },
          [](const std::vector<Tensor>& in) { return mean_square(in[0]); });
    entry("expand_frames", [](Rng& r) { return std::vector<Tensor>{rnd(r, {2, 3})}; },
          [](const std::vector<Tensor>& in) {
              return expand_frames(in[0], {0, 0, 1, 1, 0, 1});
          });
    entry("depthwise_conv3d",
          [](Rng& r) {
              return std::vector<Tensor>{rnd(r, {2 * 3 * 3, 2}), rnd(r, {2, 2, 3, 3})};
          },
          [](const std::vector<Tensor>& in) {
              return depthwise_conv3d(in[0], TokenGrid{2, 3, 3}, in[1]);
          });
    entry("rope3d", [](Rng& r) { return std::vector<Tensor>{rnd(r, {2 * 2 * 2, 6})}; },
          [](const std::vector<Tensor>& in) { return rope3d(in[0], TokenGrid{2, 2, 2}, 3); });
    entry("lin_attn_numerator_causal",
          [](Rng& r) {
              return std::vector<Tensor>{rnd(r, {5, 3}), rnd(r, {5, 3}), rnd(r, {5, 4})};
          },
          [](const std::vector<Tensor>& in) { return lin_attn_numerator(in[0], in[1], in[2], true); });
    entry("lin_attn_numerator_full",
          [](Rng& r) {
              return std::vector<Tensor>{rnd(r, {5, 3}), rnd(r, {5, 3}), rnd(r, {5, 4})};
          },
          [](const std::vector<Tensor>& in) { return lin_attn_numerator(in[0], in[1], in[2], false); });
    entry("lin_attn_denominator_causal",
          [](Rng& r) { return std::vector<Tensor>{rnd(r, {5, 3}), rnd(r, {5, 3})}; },
          [](const std::vector<Tensor>& in) { return lin_attn_denominator(in[0], in[1], true); });
    entry("lin_attn_denominator_full",
          [](Rng& r) { return std::vector<Tensor>{rnd(r, {5, 3}), rnd(r, {5, 3})}; },
          [](const std::vector<Tensor>& in) { return lin_attn_denominator(in[0], in[1], false); });
    entry("rowwise_div",
          [](Rng& r) {
              Tensor den = r.rand_uniform({4}, 0.5, 2.0);
              return std::vector<Tensor>{rnd(r, {4, 3}), den};
          },
          [](const std::vector<Tensor>& in) { return rowwise_div(in[0], in[1], 1e-6); });
    entry("pixel_unshuffle", [](Rng& r) { return std::vector<Tensor>{rnd(r, {1 * 4 * 4, 2})}; },
          [](const std::vector<Tensor>& in) { return pixel_unshuffle(in[0], TokenGrid{1, 4, 4}, 2); });
    entry("pixel_shuffle", [](Rng& r) { return std::vector<Tensor>{rnd(r, {1 * 2 * 2, 8})}; },
          [](const std::vector<Tensor>& in) { return pixel_shuffle(in[0], TokenGrid{1, 2, 2}, 2); });
    entry("spatial_avg_pool", [](Rng& r) { return std::vector<Tensor>{rnd(r, {1 * 4 * 4, 2})}; },
          [](const std::vector<Tensor>& in) { return spatial_avg_pool(in[0], TokenGrid{1, 4, 4}, 2); });
    return reg;
}

}  // namespace

const std::vector<RegisteredOp>& op_gradient_registry() {
    static const std::vector<RegisteredOp> reg = build_registry();
    return reg;
}

}  // namespace s2dit
