#include "s2dit/ops.hpp"

#include <cmath>
#include <cstring>

namespace s2dit {
namespace ops {

namespace {

bool tape_active(const Tensor& t) { return t.requires_grad || static_cast<bool>(t.node); }

template <typename... Ts>
bool needs_tape(const Ts&... ts) {
    if (!grad_enabled()) return false;
    return (tape_active(ts) || ...);
}

bool needs_tape_vec(const std::vector<Tensor>& ts) {
    if (!grad_enabled()) return false;
    for (const auto& t : ts)
        if (tape_active(t)) return true;
    return false;
}

// Output handle for capture inside backward closures: shares data+grad but
// not the node, so the node does not own itself.
Tensor handle(const Tensor& t) {
    Tensor h = t;
    h.node = nullptr;
    return h;
}

void prep(Tensor& out) { out.grad = std::make_shared<std::vector<double>>(out.numel(), 0.0); }

void set_node(Tensor& out, const char* op, std::vector<Tensor> parents, std::function<void()> bw) {
    auto node = std::make_shared<Node>();
    node->op = op;
    node->parents = std::move(parents);
    node->backward = std::move(bw);
    out.node = node;
}

Dtype promote(const Tensor& a, const Tensor& b) {
    return (a.dtype == Dtype::f64 || b.dtype == Dtype::f64) ? Dtype::f64 : Dtype::f32;
}

void require(bool cond, const std::string& msg) {
    if (!cond) throw std::invalid_argument(msg);
}

size_t last_dim(const Tensor& t) {
    require(!t.shape.empty(), "op requires rank >= 1");
    return t.shape.back();
}

double stable_softplus(double x) { return x > 0.0 ? x + std::log1p(std::exp(-x)) : std::log1p(std::exp(x)); }

double stable_sigmoid(double x) {
    if (x >= 0.0) {
        return 1.0 / (1.0 + std::exp(-x));
    }
    double e = std::exp(x);
    return e / (1.0 + e);
}

}  // namespace

// ---------------------------------------------------------------------------
// Elementwise
// ---------------------------------------------------------------------------

Tensor add(const Tensor& a, const Tensor& b) {
    require(same_shape(a, b), "add: shape mismatch " + shape_str(a.shape) + " vs " + shape_str(b.shape));
    Tensor out = Tensor::zeros(a.shape, promote(a, b));
    const size_t n = out.numel();
    for (size_t i = 0; i < n; ++i) out.at(i) = a.at(i) + b.at(i);
    check_finite("add", out);
    if (needs_tape(a, b)) {
        prep(out);
        Tensor oh = handle(out), pa = a, pb = b;
        set_node(out, "add", {a, b}, [oh, pa, pb]() mutable {
            const auto& g = *oh.grad;
            auto& ga = pa.grad_ref();
            auto& gb = pb.grad_ref();
            for (size_t i = 0; i < g.size(); ++i) {
                ga[i] += g[i];
                gb[i] += g[i];
            }
        });
    }
    return out;
}

Tensor sub(const Tensor& a, const Tensor& b) {
    require(same_shape(a, b), "sub: shape mismatch " + shape_str(a.shape) + " vs " + shape_str(b.shape));
    Tensor out = Tensor::zeros(a.shape, promote(a, b));
    const size_t n = out.numel();
    for (size_t i = 0; i < n; ++i) out.at(i) = a.at(i) - b.at(i);
    check_finite("sub", out);
    if (needs_tape(a, b)) {
        prep(out);
        Tensor oh = handle(out), pa = a, pb = b;
        set_node(out, "sub", {a, b}, [oh, pa, pb]() mutable {
            const auto& g = *oh.grad;
            auto& ga = pa.grad_ref();
            auto& gb = pb.grad_ref();
            for (size_t i = 0; i < g.size(); ++i) {
                ga[i] += g[i];
                gb[i] -= g[i];
            }
        });
    }
    return out;
}

Tensor mul(const Tensor& a, const Tensor& b) {
    require(same_shape(a, b), "mul: shape mismatch " + shape_str(a.shape) + " vs " + shape_str(b.shape));
    Tensor out = Tensor::zeros(a.shape, promote(a, b));
    const size_t n = out.numel();
    for (size_t i = 0; i < n; ++i) out.at(i) = a.at(i) * b.at(i);
    check_finite("mul", out);
    if (needs_tape(a, b)) {
        prep(out);
        Tensor oh = handle(out), pa = a, pb = b;
        set_node(out, "mul", {a, b}, [oh, pa, pb]() mutable {
            const auto& g = *oh.grad;
            auto& ga = pa.grad_ref();
            auto& gb = pb.grad_ref();
            for (size_t i = 0; i < g.size(); ++i) {
                ga[i] += g[i] * pb.at(i);
                gb[i] += g[i] * pa.at(i);
            }
        });
    }
    return out;
}

Tensor add_rowwise(const Tensor& x, const Tensor& bias) {
    const size_t c = last_dim(x);
    require(bias.rank() == 1 && bias.dim(0) == c, "add_rowwise: bias must be [C]");
    Tensor out = Tensor::zeros(x.shape, promote(x, bias));
    const size_t rows = x.numel() / c;
    for (size_t r = 0; r < rows; ++r)
        for (size_t j = 0; j < c; ++j) out.at(r * c + j) = x.at(r * c + j) + bias.at(j);
    check_finite("add_rowwise", out);
    if (needs_tape(x, bias)) {
        prep(out);
        Tensor oh = handle(out), px = x, pb = bias;
        set_node(out, "add_rowwise", {x, bias}, [oh, px, pb, rows, c]() mutable {
            const auto& g = *oh.grad;
            auto& gx = px.grad_ref();
            auto& gb = pb.grad_ref();
            for (size_t r = 0; r < rows; ++r)
                for (size_t j = 0; j < c; ++j) {
                    gx[r * c + j] += g[r * c + j];
                    gb[j] += g[r * c + j];
                }
        });
    }
    return out;
}

Tensor mul_rowwise(const Tensor& x, const Tensor& scale_vec) {
    const size_t c = last_dim(x);
    require(scale_vec.rank() == 1 && scale_vec.dim(0) == c, "mul_rowwise: scale must be [C]");
    Tensor out = Tensor::zeros(x.shape, promote(x, scale_vec));
    const size_t rows = x.numel() / c;
    for (size_t r = 0; r < rows; ++r)
        for (size_t j = 0; j < c; ++j) out.at(r * c + j) = x.at(r * c + j) * scale_vec.at(j);
    check_finite("mul_rowwise", out);
    if (needs_tape(x, scale_vec)) {
        prep(out);
        Tensor oh = handle(out), px = x, ps = scale_vec;
        set_node(out, "mul_rowwise", {x, scale_vec}, [oh, px, ps, rows, c]() mutable {
            const auto& g = *oh.grad;
            auto& gx = px.grad_ref();
            auto& gs = ps.grad_ref();
            for (size_t r = 0; r < rows; ++r)
                for (size_t j = 0; j < c; ++j) {
                    gx[r * c + j] += g[r * c + j] * ps.at(j);
                    gs[j] += g[r * c + j] * px.at(r * c + j);
                }
        });
    }
    return out;
}

Tensor scale(const Tensor& x, double s) {
    Tensor out = Tensor::zeros(x.shape, x.dtype);
    const size_t n = out.numel();
    for (size_t i = 0; i < n; ++i) out.at(i) = x.at(i) * s;
    check_finite("scale", out);
    if (needs_tape(x)) {
        prep(out);
        Tensor oh = handle(out), px = x;
        set_node(out, "scale", {x}, [oh, px, s]() mutable {
            const auto& g = *oh.grad;
            auto& gx = px.grad_ref();
            for (size_t i = 0; i < g.size(); ++i) gx[i] += g[i] * s;
        });
    }
    return out;
}

Tensor mul_scalar_t(const Tensor& x, const Tensor& s) {
    require(s.numel() == 1, "mul_scalar_t: scale must be a 1-element tensor");
    const double sv = s.at(0);
    Tensor out = Tensor::zeros(x.shape, promote(x, s));
    const size_t n = out.numel();
    for (size_t i = 0; i < n; ++i) out.at(i) = x.at(i) * sv;
    check_finite("mul_scalar_t", out);
    if (needs_tape(x, s)) {
        prep(out);
        Tensor oh = handle(out), px = x, ps = s;
        set_node(out, "mul_scalar_t", {x, s}, [oh, px, ps, sv]() mutable {
            const auto& g = *oh.grad;
            auto& gx = px.grad_ref();
            auto& gs = ps.grad_ref();
            for (size_t i = 0; i < g.size(); ++i) {
                gx[i] += g[i] * sv;
                gs[0] += g[i] * px.at(i);
            }
        });
    }
    return out;
}

// ---------------------------------------------------------------------------
// Nonlinearities
// ---------------------------------------------------------------------------

Tensor relu(const Tensor& x) {
    Tensor out = Tensor::zeros(x.shape, x.dtype);
    const size_t n = out.numel();
    for (size_t i = 0; i < n; ++i) out.at(i) = x.at(i) > 0.0 ? x.at(i) : 0.0;
    check_finite("relu", out);
    if (needs_tape(x)) {
        prep(out);
        Tensor oh = handle(out), px = x;
        set_node(out, "relu", {x}, [oh, px]() mutable {
            const auto& g = *oh.grad;
            auto& gx = px.grad_ref();
            for (size_t i = 0; i < g.size(); ++i)
                if (px.at(i) > 0.0) gx[i] += g[i];
        });
    }
    return out;
}

Tensor sigmoid(const Tensor& x) {
    Tensor out = Tensor::zeros(x.shape, x.dtype);
    const size_t n = out.numel();
    for (size_t i = 0; i < n; ++i) out.at(i) = stable_sigmoid(x.at(i));
    check_finite("sigmoid", out);
    if (needs_tape(x)) {
        prep(out);
        Tensor oh = handle(out), px = x;
        set_node(out, "sigmoid", {x}, [oh, px]() mutable {
            const auto& g = *oh.grad;
            auto& gx = px.grad_ref();
            for (size_t i = 0; i < g.size(); ++i) {
                double y = oh.at(i);
                gx[i] += g[i] * y * (1.0 - y);
            }
        });
    }
    return out;
}

Tensor silu(const Tensor& x) {
    Tensor out = Tensor::zeros(x.shape, x.dtype);
    const size_t n = out.numel();
    for (size_t i = 0; i < n; ++i) out.at(i) = x.at(i) * stable_sigmoid(x.at(i));
    check_finite("silu", out);
    if (needs_tape(x)) {
        prep(out);
        Tensor oh = handle(out), px = x;
        set_node(out, "silu", {x}, [oh, px]() mutable {
            const auto& g = *oh.grad;
            auto& gx = px.grad_ref();
            for (size_t i = 0; i < g.size(); ++i) {
                double s = stable_sigmoid(px.at(i));
                gx[i] += g[i] * (s + px.at(i) * s * (1.0 - s));
            }
        });
    }
    return out;
}

Tensor softplus(const Tensor& x) {
    Tensor out = Tensor::zeros(x.shape, x.dtype);
    const size_t n = out.numel();
    for (size_t i = 0; i < n; ++i) out.at(i) = stable_softplus(x.at(i));
    check_finite("softplus", out);
    if (needs_tape(x)) {
        prep(out);
        Tensor oh = handle(out), px = x;
        set_node(out, "softplus", {x}, [oh, px]() mutable {
            const auto& g = *oh.grad;
            auto& gx = px.grad_ref();
            for (size_t i = 0; i < g.size(); ++i) gx[i] += g[i] * stable_sigmoid(px.at(i));
        });
    }
    return out;
}

// ---------------------------------------------------------------------------
// Linear algebra / shape
// ---------------------------------------------------------------------------

Tensor matmul(const Tensor& a, const Tensor& b) {
    require(a.rank() == 2 && b.rank() == 2, "matmul: rank-2 operands required");
    require(a.dim(1) == b.dim(0),
            "matmul: inner dims mismatch " + shape_str(a.shape) + " vs " + shape_str(b.shape));
    const size_t m = a.dim(0), k = a.dim(1), n = b.dim(1);
    Tensor out = Tensor::zeros({m, n}, promote(a, b));
    for (size_t i = 0; i < m; ++i) {
        for (size_t p = 0; p < k; ++p) {
            const double av = a.at(i * k + p);
            if (av == 0.0) continue;
            for (size_t j = 0; j < n; ++j) out.at(i * n + j) += av * b.at(p * n + j);
        }
    }
    check_finite("matmul", out);
    if (needs_tape(a, b)) {
        prep(out);
        Tensor oh = handle(out), pa = a, pb = b;
        set_node(out, "matmul", {a, b}, [oh, pa, pb, m, k, n]() mutable {
            const auto& g = *oh.grad;
            auto& ga = pa.grad_ref();
            auto& gb = pb.grad_ref();
            // dA = G B^T, dB = A^T G
            for (size_t i = 0; i < m; ++i)
                for (size_t p = 0; p < k; ++p) {
                    double acc = 0.0;
                    for (size_t j = 0; j < n; ++j) acc += g[i * n + j] * pb.at(p * n + j);
                    ga[i * k + p] += acc;
                }
            for (size_t p = 0; p < k; ++p)
                for (size_t j = 0; j < n; ++j) {
                    double acc = 0.0;
                    for (size_t i = 0; i < m; ++i) acc += pa.at(i * k + p) * g[i * n + j];
                    gb[p * n + j] += acc;
                }
        });
    }
    return out;
}

Tensor transpose2d(const Tensor& x) {
    require(x.rank() == 2, "transpose2d: rank-2 required");
    const size_t m = x.dim(0), n = x.dim(1);
    Tensor out = Tensor::zeros({n, m}, x.dtype);
    for (size_t i = 0; i < m; ++i)
        for (size_t j = 0; j < n; ++j) out.at(j * m + i) = x.at(i * n + j);
    if (needs_tape(x)) {
        prep(out);
        Tensor oh = handle(out), px = x;
        set_node(out, "transpose2d", {x}, [oh, px, m, n]() mutable {
            const auto& g = *oh.grad;
            auto& gx = px.grad_ref();
            for (size_t i = 0; i < m; ++i)
                for (size_t j = 0; j < n; ++j) gx[i * n + j] += g[j * m + i];
        });
    }
    return out;
}

Tensor reshape(const Tensor& x, std::vector<size_t> shape) {
    size_t n = 1;
    for (size_t d : shape) n *= d;
    require(n == x.numel(), "reshape: element count mismatch");
    Tensor out;
    out.shape = std::move(shape);
    out.dtype = x.dtype;
    out.data = std::make_shared<std::vector<double>>(*x.data);
    if (needs_tape(x)) {
        prep(out);
        Tensor oh = handle(out), px = x;
        set_node(out, "reshape", {x}, [oh, px]() mutable {
            const auto& g = *oh.grad;
            auto& gx = px.grad_ref();
            for (size_t i = 0; i < g.size(); ++i) gx[i] += g[i];
        });
    }
    return out;
}

Tensor slice_lastdim(const Tensor& x, size_t offset, size_t len) {
    const size_t c = last_dim(x);
    require(len > 0 && offset + len <= c, "slice_lastdim: invalid slice");
    std::vector<size_t> shape = x.shape;
    shape.back() = len;
    Tensor out = Tensor::zeros(shape, x.dtype);
    const size_t rows = x.numel() / c;
    for (size_t r = 0; r < rows; ++r)
        for (size_t j = 0; j < len; ++j) out.at(r * len + j) = x.at(r * c + offset + j);
    if (needs_tape(x)) {
        prep(out);
        Tensor oh = handle(out), px = x;
        set_node(out, "slice_lastdim", {x}, [oh, px, rows, c, offset, len]() mutable {
            const auto& g = *oh.grad;
            auto& gx = px.grad_ref();
            for (size_t r = 0; r < rows; ++r)
                for (size_t j = 0; j < len; ++j) gx[r * c + offset + j] += g[r * len + j];
        });
    }
    return out;
}

Tensor concat_lastdim(const std::vector<Tensor>& parts) {
    require(!parts.empty(), "concat_lastdim: no inputs");
    size_t total = 0;
    Dtype dt = Dtype::f32;
    for (const auto& p : parts) {
        total += last_dim(p);
        if (p.dtype == Dtype::f64) dt = Dtype::f64;
        require(p.numel() / last_dim(p) == parts[0].numel() / last_dim(parts[0]),
                "concat_lastdim: leading dims mismatch");
    }
    std::vector<size_t> shape = parts[0].shape;
    shape.back() = total;
    Tensor out = Tensor::zeros(shape, dt);
    const size_t rows = out.numel() / total;
    size_t off = 0;
    for (const auto& p : parts) {
        const size_t c = last_dim(p);
        for (size_t r = 0; r < rows; ++r)
            for (size_t j = 0; j < c; ++j) out.at(r * total + off + j) = p.at(r * c + j);
        off += c;
    }
    if (needs_tape_vec(parts)) {
        prep(out);
        Tensor oh = handle(out);
        std::vector<Tensor> ps = parts;
        set_node(out, "concat_lastdim", parts, [oh, ps, rows, total]() mutable {
            const auto& g = *oh.grad;
            size_t off = 0;
            for (auto& p : ps) {
                const size_t c = p.shape.back();
                auto& gp = p.grad_ref();
                for (size_t r = 0; r < rows; ++r)
                    for (size_t j = 0; j < c; ++j) gp[r * c + j] += g[r * total + off + j];
                off += c;
            }
        });
    }
    return out;
}

Tensor softmax_lastdim(const Tensor& x, bool causal, size_t q_offset) {
    const size_t cols = last_dim(x);
    require(cols > 0, "softmax: empty rows");
    if (causal) require(x.rank() == 2, "softmax: causal mode requires rank-2 scores");
    const size_t rows = x.numel() / cols;
    Tensor out = Tensor::zeros(x.shape, x.dtype);
    for (size_t r = 0; r < rows; ++r) {
        const size_t valid = causal ? std::min(cols, q_offset + r + 1) : cols;
        double mx = -1e300;
        for (size_t j = 0; j < valid; ++j) mx = std::max(mx, x.at(r * cols + j));
        double sum = 0.0;
        for (size_t j = 0; j < valid; ++j) {
            double e = std::exp(x.at(r * cols + j) - mx);
            out.at(r * cols + j) = e;
            sum += e;
        }
        for (size_t j = 0; j < valid; ++j) out.at(r * cols + j) /= sum;
    }
    check_finite("softmax", out);
    if (needs_tape(x)) {
        prep(out);
        Tensor oh = handle(out), px = x;
        set_node(out, "softmax", {x}, [oh, px, rows, cols, causal, q_offset]() mutable {
            const auto& g = *oh.grad;
            auto& gx = px.grad_ref();
            for (size_t r = 0; r < rows; ++r) {
                const size_t valid = causal ? std::min(cols, q_offset + r + 1) : cols;
                double dot = 0.0;
                for (size_t j = 0; j < valid; ++j) dot += g[r * cols + j] * oh.at(r * cols + j);
                for (size_t j = 0; j < valid; ++j)
                    gx[r * cols + j] += oh.at(r * cols + j) * (g[r * cols + j] - dot);
            }
        });
    }
    return out;
}

namespace {

Tensor layer_norm_impl(const Tensor& x, const Tensor* gamma, const Tensor* beta, double eps) {
    const size_t c = last_dim(x);
    require(c > 0, "layer_norm: zero feature dim");
    if (gamma) require(gamma->rank() == 1 && gamma->dim(0) == c, "layer_norm: gamma must be [C]");
    if (beta) require(beta->rank() == 1 && beta->dim(0) == c, "layer_norm: beta must be [C]");
    const size_t rows = x.numel() / c;
    Tensor out = Tensor::zeros(x.shape, x.dtype);
    std::vector<double> inv_std(rows), mean(rows);
    for (size_t r = 0; r < rows; ++r) {
        double mu = 0.0;
        for (size_t j = 0; j < c; ++j) mu += x.at(r * c + j);
        mu /= static_cast<double>(c);
        double var = 0.0;
        for (size_t j = 0; j < c; ++j) {
            double d = x.at(r * c + j) - mu;
            var += d * d;
        }
        var /= static_cast<double>(c);
        const double is = 1.0 / std::sqrt(var + eps);
        mean[r] = mu;
        inv_std[r] = is;
        for (size_t j = 0; j < c; ++j) {
            double xh = (x.at(r * c + j) - mu) * is;
            double y = xh;
            if (gamma) y *= gamma->at(j);
            if (beta) y += beta->at(j);
            out.at(r * c + j) = y;
        }
    }
    check_finite("layer_norm", out);
    bool need = gamma ? needs_tape(x, *gamma, *beta) : needs_tape(x);
    if (need) {
        prep(out);
        Tensor oh = handle(out), px = x;
        Tensor pg = gamma ? *gamma : Tensor{};
        Tensor pb = beta ? *beta : Tensor{};
        std::vector<Tensor> parents = {x};
        if (gamma) {
            parents.push_back(*gamma);
            parents.push_back(*beta);
        }
        set_node(out, "layer_norm", parents,
                 [oh, px, pg, pb, rows, c, mean, inv_std]() mutable {
                     const auto& g = *oh.grad;
                     auto& gx = px.grad_ref();
                     const bool affine = pg.defined();
                     for (size_t r = 0; r < rows; ++r) {
                         double m1 = 0.0, m2 = 0.0;
                         for (size_t j = 0; j < c; ++j) {
                             double xh = (px.at(r * c + j) - mean[r]) * inv_std[r];
                             double gg = g[r * c + j] * (affine ? pg.at(j) : 1.0);
                             m1 += gg;
                             m2 += gg * xh;
                             if (affine) {
                                 pg.grad_ref()[j] += g[r * c + j] * xh;
                                 pb.grad_ref()[j] += g[r * c + j];
                             }
                         }
                         m1 /= static_cast<double>(c);
                         m2 /= static_cast<double>(c);
                         for (size_t j = 0; j < c; ++j) {
                             double xh = (px.at(r * c + j) - mean[r]) * inv_std[r];
                             double gg = g[r * c + j] * (affine ? pg.at(j) : 1.0);
                             gx[r * c + j] += (gg - m1 - xh * m2) * inv_std[r];
                         }
                     }
                 });
    }
    return out;
}

}  // namespace

Tensor layer_norm(const Tensor& x, const Tensor& gamma, const Tensor& beta, double eps) {
    return layer_norm_impl(x, &gamma, &beta, eps);
}

Tensor layer_norm_noaffine(const Tensor& x, double eps) { return layer_norm_impl(x, nullptr, nullptr, eps); }

// ---------------------------------------------------------------------------
// Reductions
// ---------------------------------------------------------------------------

Tensor mean_all(const Tensor& x) {
    const size_t n = x.numel();
    require(n > 0, "mean_all: empty tensor");
    double acc = 0.0;
    for (size_t i = 0; i < n; ++i) acc += x.at(i);
    Tensor out = Tensor::from({acc / static_cast<double>(n)}, {1}, x.dtype);
    check_finite("mean_all", out);
    if (needs_tape(x)) {
        prep(out);
        Tensor oh = handle(out), px = x;
        set_node(out, "mean_all", {x}, [oh, px, n]() mutable {
            const double g = (*oh.grad)[0] / static_cast<double>(n);
            auto& gx = px.grad_ref();
            for (size_t i = 0; i < n; ++i) gx[i] += g;
        });
    }
    return out;
}

Tensor mean_square(const Tensor& x) {
    const size_t n = x.numel();
    require(n > 0, "mean_square: empty tensor");
    double acc = 0.0;
    for (size_t i = 0; i < n; ++i) acc += x.at(i) * x.at(i);
    Tensor out = Tensor::from({acc / static_cast<double>(n)}, {1}, x.dtype);
    check_finite("mean_square", out);
    if (needs_tape(x)) {
        prep(out);
        Tensor oh = handle(out), px = x;
        set_node(out, "mean_square", {x}, [oh, px, n]() mutable {
            const double g = (*oh.grad)[0];
            auto& gx = px.grad_ref();
            for (size_t i = 0; i < n; ++i) gx[i] += g * 2.0 * px.at(i) / static_cast<double>(n);
        });
    }
    return out;
}

Tensor mse(const Tensor& a, const Tensor& b) {
    require(same_shape(a, b), "mse: shape mismatch " + shape_str(a.shape) + " vs " + shape_str(b.shape));
    return mean_square(sub(a, b));
}

// ---------------------------------------------------------------------------
// Frame conditioning
// ---------------------------------------------------------------------------

Tensor expand_frames(const Tensor& x, const std::vector<size_t>& frame_of_token) {
    require(x.rank() == 2, "expand_frames: [F,C] input required");
    const size_t f = x.dim(0), c = x.dim(1);
    const size_t l = frame_of_token.size();
    Tensor out = Tensor::zeros({l, c}, x.dtype);
    for (size_t i = 0; i < l; ++i) {
        require(frame_of_token[i] < f, "expand_frames: frame index out of range");
        for (size_t j = 0; j < c; ++j) out.at(i * c + j) = x.at(frame_of_token[i] * c + j);
    }
    if (needs_tape(x)) {
        prep(out);
        Tensor oh = handle(out), px = x;
        set_node(out, "expand_frames", {x}, [oh, px, frame_of_token, c]() mutable {
            const auto& g = *oh.grad;
            auto& gx = px.grad_ref();
            for (size_t i = 0; i < frame_of_token.size(); ++i)
                for (size_t j = 0; j < c; ++j) gx[frame_of_token[i] * c + j] += g[i * c + j];
        });
    }
    return out;
}

// ---------------------------------------------------------------------------
// Depthwise causal conv3d
// ---------------------------------------------------------------------------

Tensor depthwise_conv3d(const Tensor& x, const TokenGrid& grid, const Tensor& weights,
                        const Tensor* history, size_t history_frames) {
    require(x.rank() == 2 && x.dim(0) == grid.len(), "conv3d: input must be [T*H*W, C] on the grid");
    require(weights.rank() == 4, "conv3d: weights must be [C, kt, kh, kw]");
    const size_t c = x.dim(1);
    const size_t kt = weights.dim(1), kh = weights.dim(2), kw = weights.dim(3);
    require(weights.dim(0) == c, "conv3d: channel mismatch");
    require(kh % 2 == 1 && kw % 2 == 1, "conv3d: spatial kernel must be odd");
    require(kh <= 2 * grid.h - 1 && kw <= 2 * grid.w - 1 && kt >= 1,
            "conv3d: kernel larger than padded extent");
    if (history) {
        require(history->rank() == 2 && history->dim(0) == history_frames * grid.frame_len() &&
                    history->dim(1) == c,
                "conv3d: history shape mismatch");
    }
    const size_t T = grid.t, H = grid.h, W = grid.w;
    const long ph = static_cast<long>(kh / 2), pw = static_cast<long>(kw / 2);
    const long hf = static_cast<long>(history_frames);

    auto sample = [&](long tt, long hh, long ww, size_t ch) -> double {
        // tt indexes the concatenation [history | x]; out-of-range is zero pad.
        if (hh < 0 || hh >= static_cast<long>(H) || ww < 0 || ww >= static_cast<long>(W)) return 0.0;
        if (tt < 0) return 0.0;
        if (tt < hf) return history->at((static_cast<size_t>(tt) * H * W + hh * W + ww) * c + ch);
        const long xt = tt - hf;
        if (xt >= static_cast<long>(T)) return 0.0;
        return x.at((static_cast<size_t>(xt) * H * W + hh * W + ww) * c + ch);
    };

    Tensor out = Tensor::zeros(x.shape, x.dtype);
    for (size_t t = 0; t < T; ++t)
        for (size_t h = 0; h < H; ++h)
            for (size_t w = 0; w < W; ++w)
                for (size_t ch = 0; ch < c; ++ch) {
                    double acc = 0.0;
                    for (size_t dt = 0; dt < kt; ++dt)
                        for (size_t dh = 0; dh < kh; ++dh)
                            for (size_t dw = 0; dw < kw; ++dw) {
                                const long tt = static_cast<long>(t) + hf -
                                                static_cast<long>(kt - 1) + static_cast<long>(dt);
                                const long hh = static_cast<long>(h) - ph + static_cast<long>(dh);
                                const long ww = static_cast<long>(w) - pw + static_cast<long>(dw);
                                acc += weights.at(((ch * kt + dt) * kh + dh) * kw + dw) *
                                       sample(tt, hh, ww, ch);
                            }
                    out.at((t * H * W + h * W + w) * c + ch) = acc;
                }
    check_finite("depthwise_conv3d", out);
    if (needs_tape(x, weights)) {
        require(history == nullptr, "conv3d: history path is inference-only");
        prep(out);
        Tensor oh = handle(out), px = x, pw_t = weights;
        set_node(out, "depthwise_conv3d", {x, weights},
                 [oh, px, pw_t, T, H, W, c, kt, kh, kw, ph, pw]() mutable {
                     const auto& g = *oh.grad;
                     auto& gx = px.grad_ref();
                     auto& gw = pw_t.grad_ref();
                     for (size_t t = 0; t < T; ++t)
                         for (size_t h = 0; h < H; ++h)
                             for (size_t w = 0; w < W; ++w)
                                 for (size_t ch = 0; ch < c; ++ch) {
                                     const double go = g[(t * H * W + h * W + w) * c + ch];
                                     if (go == 0.0) continue;
                                     for (size_t dt = 0; dt < kt; ++dt)
                                         for (size_t dh = 0; dh < kh; ++dh)
                                             for (size_t dw = 0; dw < kw; ++dw) {
                                                 const long tt = static_cast<long>(t) -
                                                                 static_cast<long>(kt - 1) +
                                                                 static_cast<long>(dt);
                                                 const long hh = static_cast<long>(h) - ph +
                                                                 static_cast<long>(dh);
                                                 const long ww = static_cast<long>(w) - pw +
                                                                 static_cast<long>(dw);
                                                 if (tt < 0 || tt >= static_cast<long>(T) || hh < 0 ||
                                                     hh >= static_cast<long>(H) || ww < 0 ||
                                                     ww >= static_cast<long>(W))
                                                     continue;
                                                 const size_t xi =
                                                     (static_cast<size_t>(tt) * H * W + hh * W + ww) * c +
                                                     ch;
                                                 const size_t wi = ((ch * kt + dt) * kh + dh) * kw + dw;
                                                 gx[xi] += go * pw_t.at(wi);
                                                 gw[wi] += go * px.at(xi);
                                             }
                                 }
                 });
    }
    return out;
}

// ---------------------------------------------------------------------------
// RoPE-3D
// ---------------------------------------------------------------------------

namespace {

struct RopePlan {
    // Per pair: frequency and which axis position drives it.
    std::vector<double> freq;
    std::vector<int> axis;  // 0 = t, 1 = h, 2 = w
};

RopePlan rope_plan(size_t d, double base) {
    if (d % 2 != 0) throw std::invalid_argument("rope3d: feature dim must be even");
    const size_t pairs = d / 2;
    const size_t per = pairs / 3;
    const size_t pt = pairs - 2 * per;  // remainder goes to the temporal axis
    RopePlan plan;
    plan.freq.resize(pairs);
    plan.axis.resize(pairs);
    size_t idx = 0;
    auto fill = [&](size_t count, int axis) {
        for (size_t i = 0; i < count; ++i, ++idx) {
            plan.freq[idx] = std::pow(base, -static_cast<double>(i) / static_cast<double>(count));
            plan.axis[idx] = axis;
        }
    };
    fill(pt, 0);
    fill(per, 1);
    fill(per, 2);
    return plan;
}

void rotate_into(std::vector<double>& dst, const std::vector<double>& src, const TokenGrid& grid,
                 size_t t_offset, const RopePlan& plan, size_t d, double sign) {
    const size_t pairs = d / 2;
    for (size_t t = 0; t < grid.t; ++t)
        for (size_t h = 0; h < grid.h; ++h)
            for (size_t w = 0; w < grid.w; ++w) {
                const size_t row = grid.index(t, h, w);
                const double pos[3] = {static_cast<double>(t + t_offset), static_cast<double>(h),
                                       static_cast<double>(w)};
                for (size_t p = 0; p < pairs; ++p) {
                    const double ang = sign * pos[plan.axis[p]] * plan.freq[p];
                    const double cs = std::cos(ang), sn = std::sin(ang);
                    const double a = src[row * d + 2 * p], b = src[row * d + 2 * p + 1];
                    dst[row * d + 2 * p] += a * cs - b * sn;
                    dst[row * d + 2 * p + 1] += a * sn + b * cs;
                }
            }
}

}  // namespace

Tensor rope3d(const Tensor& x, const TokenGrid& grid, size_t t_offset, double base) {
    require(x.rank() == 2 && x.dim(0) == grid.len(), "rope3d: input must be [T*H*W, d] on the grid");
    const size_t d = x.dim(1);
    RopePlan plan = rope_plan(d, base);
    Tensor out = Tensor::zeros(x.shape, x.dtype);
    rotate_into(*out.data, *x.data, grid, t_offset, plan, d, +1.0);
    check_finite("rope3d", out);
    if (needs_tape(x)) {
        prep(out);
        Tensor oh = handle(out), px = x;
        set_node(out, "rope3d", {x}, [oh, px, grid, t_offset, plan, d]() mutable {
            // Inverse rotation of the incoming grad.
            rotate_into(px.grad_ref(), *oh.grad, grid, t_offset, plan, d, -1.0);
        });
    }
    return out;
}

// ---------------------------------------------------------------------------
// Linear-attention prefix forms
// ---------------------------------------------------------------------------

Tensor lin_attn_numerator(const Tensor& a, const Tensor& b, const Tensor& v, bool causal) {
    require(a.rank() == 2 && b.rank() == 2 && v.rank() == 2, "lin_attn_numerator: rank-2 inputs");
    const size_t l = a.dim(0), dk = a.dim(1), dv = v.dim(1);
    require(b.dim(0) == l && b.dim(1) == dk && v.dim(0) == l, "lin_attn_numerator: shape mismatch");
    Tensor out = Tensor::zeros({l, dv}, promote(promote(a, b) == Dtype::f64 ? a : b, v));
    std::vector<double> state(dk * dv, 0.0);  // S = sum b_j v_j^T
    if (!causal) {
        for (size_t j = 0; j < l; ++j)
            for (size_t p = 0; p < dk; ++p) {
                const double bv = b.at(j * dk + p);
                if (bv == 0.0) continue;
                for (size_t q = 0; q < dv; ++q) state[p * dv + q] += bv * v.at(j * dv + q);
            }
    }
    for (size_t i = 0; i < l; ++i) {
        if (causal) {
            for (size_t p = 0; p < dk; ++p) {
                const double bv = b.at(i * dk + p);
                if (bv == 0.0) continue;
                for (size_t q = 0; q < dv; ++q) state[p * dv + q] += bv * v.at(i * dv + q);
            }
        }
        for (size_t q = 0; q < dv; ++q) {
            double acc = 0.0;
            for (size_t p = 0; p < dk; ++p) acc += a.at(i * dk + p) * state[p * dv + q];
            out.at(i * dv + q) = acc;
        }
    }
    check_finite("lin_attn_numerator", out);
    if (needs_tape(a, b, v)) {
        prep(out);
        Tensor oh = handle(out), pa = a, pb = b, pv = v;
        set_node(out, "lin_attn_numerator", {a, b, v}, [oh, pa, pb, pv, l, dk, dv, causal]() mutable {
            const auto& g = *oh.grad;
            auto& ga = pa.grad_ref();
            auto& gb = pb.grad_ref();
            auto& gv = pv.grad_ref();
            // dA_i = S_i g_i with S_i the (prefix) key-value state.
            std::vector<double> s(dk * dv, 0.0);
            if (!causal) {
                for (size_t j = 0; j < l; ++j)
                    for (size_t p = 0; p < dk; ++p)
                        for (size_t q = 0; q < dv; ++q)
                            s[p * dv + q] += pb.at(j * dk + p) * pv.at(j * dv + q);
            }
            for (size_t i = 0; i < l; ++i) {
                if (causal) {
                    for (size_t p = 0; p < dk; ++p)
                        for (size_t q = 0; q < dv; ++q)
                            s[p * dv + q] += pb.at(i * dk + p) * pv.at(i * dv + q);
                }
                for (size_t p = 0; p < dk; ++p) {
                    double acc = 0.0;
                    for (size_t q = 0; q < dv; ++q) acc += s[p * dv + q] * g[i * dv + q];
                    ga[i * dk + p] += acc;
                }
            }
            // dB_j = T_j v_j, dV_j = T_j^T b_j with T_j = sum_{i>=j} a_i g_i^T.
            std::vector<double> tmat(dk * dv, 0.0);
            if (!causal) {
                for (size_t i = 0; i < l; ++i)
                    for (size_t p = 0; p < dk; ++p)
                        for (size_t q = 0; q < dv; ++q)
                            tmat[p * dv + q] += pa.at(i * dk + p) * g[i * dv + q];
            }
            for (size_t jj = 0; jj < l; ++jj) {
                const size_t j = l - 1 - jj;
                if (causal) {
                    for (size_t p = 0; p < dk; ++p)
                        for (size_t q = 0; q < dv; ++q)
                            tmat[p * dv + q] += pa.at(j * dk + p) * g[j * dv + q];
                }
                for (size_t p = 0; p < dk; ++p) {
                    double acc = 0.0;
                    for (size_t q = 0; q < dv; ++q) acc += tmat[p * dv + q] * pv.at(j * dv + q);
                    gb[j * dk + p] += acc;
                }
                for (size_t q = 0; q < dv; ++q) {
                    double acc = 0.0;
                    for (size_t p = 0; p < dk; ++p) acc += tmat[p * dv + q] * pb.at(j * dk + p);
                    gv[j * dv + q] += acc;
                }
            }
        });
    }
    return out;
}

Tensor lin_attn_denominator(const Tensor& a, const Tensor& b, bool causal) {
    require(a.rank() == 2 && b.rank() == 2 && same_shape(a, b), "lin_attn_denominator: shape mismatch");
    const size_t l = a.dim(0), dk = a.dim(1);
    Tensor out = Tensor::zeros({l}, promote(a, b));
    std::vector<double> z(dk, 0.0);
    if (!causal) {
        for (size_t j = 0; j < l; ++j)
            for (size_t p = 0; p < dk; ++p) z[p] += b.at(j * dk + p);
    }
    for (size_t i = 0; i < l; ++i) {
        if (causal)
            for (size_t p = 0; p < dk; ++p) z[p] += b.at(i * dk + p);
        double acc = 0.0;
        for (size_t p = 0; p < dk; ++p) acc += a.at(i * dk + p) * z[p];
        out.at(i) = acc;
    }
    check_finite("lin_attn_denominator", out);
    if (needs_tape(a, b)) {
        prep(out);
        Tensor oh = handle(out), pa = a, pb = b;
        set_node(out, "lin_attn_denominator", {a, b}, [oh, pa, pb, l, dk, causal]() mutable {
            const auto& g = *oh.grad;
            auto& ga = pa.grad_ref();
            auto& gb = pb.grad_ref();
            std::vector<double> z(dk, 0.0);
            if (!causal) {
                for (size_t j = 0; j < l; ++j)
                    for (size_t p = 0; p < dk; ++p) z[p] += pb.at(j * dk + p);
            }
            for (size_t i = 0; i < l; ++i) {
                if (causal)
                    for (size_t p = 0; p < dk; ++p) z[p] += pb.at(i * dk + p);
                for (size_t p = 0; p < dk; ++p) ga[i * dk + p] += g[i] * z[p];
            }
            std::vector<double> acc(dk, 0.0);
            if (!causal) {
                for (size_t i = 0; i < l; ++i)
                    for (size_t p = 0; p < dk; ++p) acc[p] += g[i] * pa.at(i * dk + p);
                for (size_t j = 0; j < l; ++j)
                    for (size_t p = 0; p < dk; ++p) gb[j * dk + p] += acc[p];
            } else {
                for (size_t jj = 0; jj < l; ++jj) {
                    const size_t j = l - 1 - jj;
                    for (size_t p = 0; p < dk; ++p) acc[p] += g[j] * pa.at(j * dk + p);
                    for (size_t p = 0; p < dk; ++p) gb[j * dk + p] += acc[p];
                }
            }
        });
    }
    return out;
}

Tensor rowwise_div(const Tensor& numer, const Tensor& denom, double eps) {
    require(numer.rank() == 2, "rowwise_div: numerator must be rank-2");
    require(denom.rank() == 1 && denom.dim(0) == numer.dim(0), "rowwise_div: denominator must be [L]");
    const size_t l = numer.dim(0), dv = numer.dim(1);
    Tensor out = Tensor::zeros(numer.shape, promote(numer, denom));
    for (size_t i = 0; i < l; ++i) {
        const double d = denom.at(i) + eps;
        for (size_t q = 0; q < dv; ++q) out.at(i * dv + q) = numer.at(i * dv + q) / d;
    }
    check_finite("rowwise_div", out);
    if (needs_tape(numer, denom)) {
        prep(out);
        Tensor oh = handle(out), pn = numer, pd = denom;
        set_node(out, "rowwise_div", {numer, denom}, [oh, pn, pd, l, dv, eps]() mutable {
            const auto& g = *oh.grad;
            auto& gn = pn.grad_ref();
            auto& gd = pd.grad_ref();
            for (size_t i = 0; i < l; ++i) {
                const double d = pd.at(i) + eps;
                double acc = 0.0;
                for (size_t q = 0; q < dv; ++q) {
                    gn[i * dv + q] += g[i * dv + q] / d;
                    acc += g[i * dv + q] * pn.at(i * dv + q);
                }
                gd[i] -= acc / (d * d);
            }
        });
    }
    return out;
}

// ---------------------------------------------------------------------------
// Pixel shuffle / pooling
// ---------------------------------------------------------------------------

namespace {

// Index map for unshuffle: low-res token/channel -> high-res flat index.
size_t unshuffle_src(const TokenGrid& grid, size_t s, size_t c, size_t t, size_t ho, size_t wo,
                     size_t cc) {
    const size_t block = cc / c;         // dy*s + dx
    const size_t ch = cc % c;
    const size_t dy = block / s, dx = block % s;
    const size_t hi = ho * s + dy, wi = wo * s + dx;
    return (t * grid.h * grid.w + hi * grid.w + wi) * c + ch;
}

}  // namespace

Tensor pixel_unshuffle(const Tensor& x, const TokenGrid& grid, size_t s) {
    require(x.rank() == 2 && x.dim(0) == grid.len(), "pixel_unshuffle: grid mismatch");
    require(grid.h % s == 0 && grid.w % s == 0, "pixel_unshuffle: dims not divisible by stride");
    const size_t c = x.dim(1);
    const TokenGrid low = grid.strided(s);
    const size_t cc_total = c * s * s;
    Tensor out = Tensor::zeros({low.len(), cc_total}, x.dtype);
    for (size_t t = 0; t < low.t; ++t)
        for (size_t ho = 0; ho < low.h; ++ho)
            for (size_t wo = 0; wo < low.w; ++wo)
                for (size_t cc = 0; cc < cc_total; ++cc)
                    out.at((t * low.h * low.w + ho * low.w + wo) * cc_total + cc) =
                        x.at(unshuffle_src(grid, s, c, t, ho, wo, cc));
    if (needs_tape(x)) {
        prep(out);
        Tensor oh = handle(out), px = x;
        set_node(out, "pixel_unshuffle", {x}, [oh, px, grid, low, s, c, cc_total]() mutable {
            const auto& g = *oh.grad;
            auto& gx = px.grad_ref();
            for (size_t t = 0; t < low.t; ++t)
                for (size_t ho = 0; ho < low.h; ++ho)
                    for (size_t wo = 0; wo < low.w; ++wo)
                        for (size_t cc = 0; cc < cc_total; ++cc)
                            gx[unshuffle_src(grid, s, c, t, ho, wo, cc)] +=
                                g[(t * low.h * low.w + ho * low.w + wo) * cc_total + cc];
        });
    }
    return out;
}

Tensor pixel_shuffle(const Tensor& x, const TokenGrid& grid_low, size_t s) {
    require(x.rank() == 2 && x.dim(0) == grid_low.len(), "pixel_shuffle: grid mismatch");
    const size_t cc_total = x.dim(1);
    require(cc_total % (s * s) == 0, "pixel_shuffle: channels not divisible by s^2");
    const size_t c = cc_total / (s * s);
    const TokenGrid high{grid_low.t, grid_low.h * s, grid_low.w * s};
    Tensor out = Tensor::zeros({high.len(), c}, x.dtype);
    for (size_t t = 0; t < grid_low.t; ++t)
        for (size_t ho = 0; ho < grid_low.h; ++ho)
            for (size_t wo = 0; wo < grid_low.w; ++wo)
                for (size_t cc = 0; cc < cc_total; ++cc)
                    out.at(unshuffle_src(high, s, c, t, ho, wo, cc)) =
                        x.at((t * grid_low.h * grid_low.w + ho * grid_low.w + wo) * cc_total + cc);
    if (needs_tape(x)) {
        prep(out);
        Tensor oh = handle(out), px = x;
        set_node(out, "pixel_shuffle", {x}, [oh, px, grid_low, high, s, c, cc_total]() mutable {
            const auto& g = *oh.grad;
            auto& gx = px.grad_ref();
            for (size_t t = 0; t < grid_low.t; ++t)
                for (size_t ho = 0; ho < grid_low.h; ++ho)
                    for (size_t wo = 0; wo < grid_low.w; ++wo)
                        for (size_t cc = 0; cc < cc_total; ++cc)
                            gx[(t * grid_low.h * grid_low.w + ho * grid_low.w + wo) * cc_total + cc] +=
                                g[unshuffle_src(high, s, c, t, ho, wo, cc)];
        });
    }
    return out;
}

Tensor spatial_avg_pool(const Tensor& x, const TokenGrid& grid, size_t s) {
    require(x.rank() == 2 && x.dim(0) == grid.len(), "spatial_avg_pool: grid mismatch");
    require(grid.h % s == 0 && grid.w % s == 0, "spatial_avg_pool: dims not divisible by stride");
    const size_t c = x.dim(1);
    const TokenGrid low = grid.strided(s);
    const double inv = 1.0 / static_cast<double>(s * s);
    Tensor out = Tensor::zeros({low.len(), c}, x.dtype);
    for (size_t t = 0; t < low.t; ++t)
        for (size_t ho = 0; ho < low.h; ++ho)
            for (size_t wo = 0; wo < low.w; ++wo)
                for (size_t ch = 0; ch < c; ++ch) {
                    double acc = 0.0;
                    for (size_t dy = 0; dy < s; ++dy)
                        for (size_t dx = 0; dx < s; ++dx)
                            acc += x.at((t * grid.h * grid.w + (ho * s + dy) * grid.w + wo * s + dx) * c +
                                        ch);
                    out.at((t * low.h * low.w + ho * low.w + wo) * c + ch) = acc * inv;
                }
    check_finite("spatial_avg_pool", out);
    if (needs_tape(x)) {
        prep(out);
        Tensor oh = handle(out), px = x;
        set_node(out, "spatial_avg_pool", {x}, [oh, px, grid, low, s, c, inv]() mutable {
            const auto& g = *oh.grad;
            auto& gx = px.grad_ref();
            for (size_t t = 0; t < low.t; ++t)
                for (size_t ho = 0; ho < low.h; ++ho)
                    for (size_t wo = 0; wo < low.w; ++wo)
                        for (size_t ch = 0; ch < c; ++ch) {
                            const double go = g[(t * low.h * low.w + ho * low.w + wo) * c + ch] * inv;
                            for (size_t dy = 0; dy < s; ++dy)
                                for (size_t dx = 0; dx < s; ++dx)
                                    gx[(t * grid.h * grid.w + (ho * s + dy) * grid.w + wo * s + dx) * c +
                                       ch] += go;
                        }
        });
    }
    return out;
}

Tensor ste_hard(const Tensor& p) {
    Tensor out = Tensor::zeros(p.shape, p.dtype);
    const size_t n = out.numel();
    for (size_t i = 0; i < n; ++i) out.at(i) = p.at(i) > 0.5 ? 1.0 : 0.0;
    if (needs_tape(p)) {
        prep(out);
        Tensor oh = handle(out), pp = p;
        set_node(out, "ste_hard", {p}, [oh, pp]() mutable {
            const auto& g = *oh.grad;
            auto& gp = pp.grad_ref();
            for (size_t i = 0; i < g.size(); ++i) gp[i] += g[i];
        });
    }
    return out;
}

}  // namespace ops
}  // namespace s2dit
