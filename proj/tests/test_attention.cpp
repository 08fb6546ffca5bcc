#define DOCTEST_CONFIG_IMPLEMENT_WITH_MAIN
#include <doctest.h>

#include <cmath>

#include "s2dit/attention.hpp"
#include "s2dit/grad_check.hpp"

using namespace s2dit;
using namespace s2dit::ops;

namespace {

constexpr double kTinyFloor = 1e-300;

// ---------------------------------------------------------------------------
// Independent oracles (plain loops, no engine ops)
// ---------------------------------------------------------------------------

std::vector<double> norm_row(const std::vector<double>& v) {
    const size_t n = v.size();
    double mu = 0.0;
    for (double x : v) mu += x;
    mu /= static_cast<double>(n);
    double var = 0.0;
    for (double x : v) var += (x - mu) * (x - mu);
    var /= static_cast<double>(n);
    const double inv = 1.0 / std::sqrt(var + 1e-5);
    std::vector<double> out(n);
    for (size_t i = 0; i < n; ++i) out[i] = (v[i] - mu) * inv;
    return out;
}

std::vector<double> phi_row(const std::vector<double>& x, const Tensor& w, const Tensor& b) {
    const size_t dk = w.dim(0), dh = w.dim(1);
    std::vector<double> out(dk);
    for (size_t i = 0; i < dk; ++i) {
        double z = b.at(i);
        for (size_t j = 0; j < dh; ++j) z += w.at(i * dh + j) * x[j];
        double sp = z > 0 ? z + std::log1p(std::exp(-z)) : std::log1p(std::exp(z));
        out[i] = std::max(sp, kTinyFloor);
    }
    return out;
}

// Same pair-split convention as the design: 1:1:1 with remainder temporal.
std::vector<double> rotate_row(const std::vector<double>& x, size_t t, size_t h, size_t w,
                               double base = 10000.0) {
    const size_t d = x.size();
    const size_t pairs = d / 2;
    const size_t per = pairs / 3;
    const size_t pt = pairs - 2 * per;
    std::vector<double> out(d);
    size_t idx = 0;
    auto rot = [&](size_t count, double pos) {
        for (size_t i = 0; i < count; ++i, ++idx) {
            const double freq = std::pow(base, -static_cast<double>(i) / static_cast<double>(count));
            const double ang = pos * freq;
            const double a = x[2 * idx], b = x[2 * idx + 1];
            out[2 * idx] = a * std::cos(ang) - b * std::sin(ang);
            out[2 * idx + 1] = a * std::sin(ang) + b * std::cos(ang);
        }
    };
    rot(pt, static_cast<double>(t));
    rot(per, static_cast<double>(h));
    rot(per, static_cast<double>(w));
    return out;
}

std::vector<double> tensor_row(const Tensor& t, size_t r) {
    const size_t c = t.dim(1);
    std::vector<double> out(c);
    for (size_t j = 0; j < c; ++j) out[j] = t.at(r * c + j);
    return out;
}

// Quadratic-form linear attention: explicit O(L^2) double loop.
Tensor lin_attn_oracle(const Tensor& q, const Tensor& k, const Tensor& v, const KernelParams& p,
                       const TokenGrid* grid, bool causal, double eps, bool qk_norm) {
    const size_t l = q.dim(0), dv = v.dim(1);
    std::vector<std::vector<double>> pq(l), pk(l), rq(l), rk(l);
    for (size_t i = 0; i < l; ++i) {
        auto qr = tensor_row(q, i);
        auto kr = tensor_row(k, i);
        if (qk_norm) {
            qr = norm_row(qr);
            kr = norm_row(kr);
        }
        pq[i] = phi_row(qr, p.w, p.b);
        pk[i] = phi_row(kr, p.w, p.b);
        if (grid) {
            const size_t fl = grid->frame_len();
            const size_t t = i / fl, h = (i % fl) / grid->w, w = i % grid->w;
            rq[i] = rotate_row(pq[i], t, h, w);
            rk[i] = rotate_row(pk[i], t, h, w);
        } else {
            rq[i] = pq[i];
            rk[i] = pk[i];
        }
    }
    Tensor out = Tensor::zeros({l, dv});
    for (size_t i = 0; i < l; ++i) {
        const size_t jmax = causal ? i + 1 : l;
        double den = 0.0;
        std::vector<double> num(dv, 0.0);
        for (size_t j = 0; j < jmax; ++j) {
            double w_rot = 0.0, raw = 0.0;
            for (size_t d = 0; d < pq[i].size(); ++d) {
                w_rot += rq[i][d] * rk[j][d];
                raw += pq[i][d] * pk[j][d];
            }
            den += raw;
            for (size_t e = 0; e < dv; ++e) num[e] += w_rot * v.at(j * dv + e);
        }
        for (size_t e = 0; e < dv; ++e) out.at(i * dv + e) = num[e] / (den + eps);
    }
    return out;
}

// Naive six-loop depthwise conv oracle (causal temporal, same spatial).
Tensor conv_oracle(const Tensor& x, const TokenGrid& g, const Tensor& w) {
    const size_t c = x.dim(1), kt = w.dim(1), kh = w.dim(2), kw = w.dim(3);
    const long ph = static_cast<long>(kh / 2), pw = static_cast<long>(kw / 2);
    Tensor out = Tensor::zeros(x.shape);
    for (size_t t = 0; t < g.t; ++t)
        for (size_t hh = 0; hh < g.h; ++hh)
            for (size_t ww = 0; ww < g.w; ++ww)
                for (size_t ch = 0; ch < c; ++ch) {
                    double acc = 0.0;
                    for (size_t dt = 0; dt < kt; ++dt)
                        for (size_t dh = 0; dh < kh; ++dh)
                            for (size_t dw = 0; dw < kw; ++dw) {
                                const long ti = static_cast<long>(t) - static_cast<long>(kt - 1) +
                                                static_cast<long>(dt);
                                const long hi = static_cast<long>(hh) - ph + static_cast<long>(dh);
                                const long wi = static_cast<long>(ww) - pw + static_cast<long>(dw);
                                if (ti < 0 || ti >= static_cast<long>(g.t) || hi < 0 ||
                                    hi >= static_cast<long>(g.h) || wi < 0 ||
                                    wi >= static_cast<long>(g.w))
                                    continue;
                                acc += w.at(((ch * kt + dt) * kh + dh) * kw + dw) *
                                       x.at((static_cast<size_t>(ti) * g.h * g.w +
                                             static_cast<size_t>(hi) * g.w + static_cast<size_t>(wi)) *
                                                c +
                                            ch);
                            }
                    out.at((t * g.h * g.w + hh * g.w + ww) * c + ch) = acc;
                }
    return out;
}

double max_rel_diff(const Tensor& a, const Tensor& b) {
    double m = 0.0;
    for (size_t i = 0; i < a.numel(); ++i) {
        const double d = std::fabs(a.at(i) - b.at(i));
        m = std::max(m, d / std::max({std::fabs(a.at(i)), std::fabs(b.at(i)), 1e-9}));
    }
    return m;
}

KernelParams make_kernel(Rng& rng, size_t dk, size_t dh) {
    KernelParams p;
    p.w = rng.randn({dk, dh}, Dtype::f64, 1.0 / std::sqrt(static_cast<double>(dh)));
    p.b = Tensor::full({dk}, 0.5);
    return p;
}

CondCtx make_cond(Rng& rng, size_t cond_dim, const TokenGrid& grid) {
    CondCtx ctx;
    ctx.cond = rng.randn({grid.t, cond_dim}, Dtype::f64, 0.2);
    ctx.frame_of_token = frame_map(grid);
    return ctx;
}

void make_identity_projection(SsaBlock& ssa) {
    // down/up become exact inverses: identity matrices, zero bias.
    for (size_t i = 0; i < ssa.down.w.dim(0); ++i)
        for (size_t j = 0; j < ssa.down.w.dim(1); ++j)
            ssa.down.w.at(i * ssa.down.w.dim(1) + j) = i == j ? 1.0 : 0.0;
    for (size_t i = 0; i < ssa.down.b.numel(); ++i) ssa.down.b.at(i) = 0.0;
    for (size_t i = 0; i < ssa.up.w.dim(0); ++i)
        for (size_t j = 0; j < ssa.up.w.dim(1); ++j)
            ssa.up.w.at(i * ssa.up.w.dim(1) + j) = i == j ? 1.0 : 0.0;
    for (size_t i = 0; i < ssa.up.b.numel(); ++i) ssa.up.b.at(i) = 0.0;
}

}  // namespace

// ---------------------------------------------------------------------------
// full attention
// ---------------------------------------------------------------------------

TEST_CASE("full_attention basics") {
    Rng rng(1);
    Tensor v1 = rng.randn({1, 4});
    Tensor q1 = rng.randn({1, 4});
    Tensor k1 = rng.randn({1, 4});
    Tensor y1 = full_attention(q1, k1, v1, false);
    for (size_t i = 0; i < 4; ++i) CHECK(y1.at(i) == doctest::Approx(v1.at(i)).epsilon(1e-12));

    // Uniform q, k: every row averages v.
    Tensor qu = Tensor::full({5, 3}, 0.7);
    Tensor ku = Tensor::full({5, 3}, 0.7);
    Tensor v = rng.randn({5, 3});
    Tensor y = full_attention(qu, ku, v, false);
    for (size_t j = 0; j < 3; ++j) {
        double mean = 0.0;
        for (size_t i = 0; i < 5; ++i) mean += v.at(i * 3 + j);
        mean /= 5.0;
        for (size_t i = 0; i < 5; ++i) CHECK(y.at(i * 3 + j) == doctest::Approx(mean).epsilon(1e-10));
    }
    CHECK_THROWS(full_attention(Tensor::zeros({0, 2}), ku, v, false));
}

TEST_CASE("causal full attention equals chunked recomputation") {
    Rng rng(2);
    const size_t l = 16, d = 6;
    Tensor q = rng.randn({l, d});
    Tensor k = rng.randn({l, d});
    Tensor v = rng.randn({l, d});
    Tensor full = full_attention(q, k, v, true);
    // Recompute each suffix chunk against the full prefix (the cache route).
    for (size_t split : {4ul, 9ul}) {
        Tensor qc = Tensor::zeros({l - split, d});
        for (size_t i = 0; i < (l - split) * d; ++i) qc.at(i) = q.at(split * d + i);
        Tensor yc = full_attention(qc, k, v, true, split);
        for (size_t i = 0; i < yc.numel(); ++i) {
            CHECK(std::fabs(yc.at(i) - full.at(split * d + i)) < 1e-6);
        }
    }
}

TEST_CASE("causal full attention leaks nothing from the future") {
    Rng rng(3);
    const size_t l = 10, d = 4;
    Tensor q = rng.randn({l, d});
    Tensor k = rng.randn({l, d});
    Tensor v = rng.randn({l, d});
    Tensor base = full_attention(q, k, v, true);
    Tensor k2 = k.detached_copy(), v2 = v.detached_copy();
    const size_t cut = 6;
    for (size_t j = cut; j < l; ++j)
        for (size_t e = 0; e < d; ++e) {
            k2.at(j * d + e) += 10.0;
            v2.at(j * d + e) -= 5.0;
        }
    Tensor pert = full_attention(q, k2, v2, true);
    for (size_t i = 0; i < cut; ++i)
        for (size_t e = 0; e < d; ++e) CHECK(pert.at(i * d + e) == base.at(i * d + e));
}

// ---------------------------------------------------------------------------
// kernel map
// ---------------------------------------------------------------------------

TEST_CASE("kernel_map: softplus(0) and strict positivity") {
    KernelParams p;
    p.w = Tensor::zeros({3, 3});
    for (size_t i = 0; i < 3; ++i) p.w.at(i * 3 + i) = 1.0;
    p.b = Tensor::zeros({3});
    Tensor x = Tensor::zeros({2, 3});
    Tensor y = kernel_map(x, p);
    for (size_t i = 0; i < y.numel(); ++i) CHECK(y.at(i) == doctest::Approx(std::log(2.0)));

    // Adversarially negative inputs stay strictly positive.
    Rng rng(4);
    KernelParams pr = make_kernel(rng, 4, 4);
    Tensor xneg = Tensor::full({3, 4}, -1e3);
    Tensor yneg = kernel_map(xneg, pr);
    for (size_t i = 0; i < yneg.numel(); ++i) CHECK(yneg.at(i) > 0.0);
}

// ---------------------------------------------------------------------------
// linear attention
// ---------------------------------------------------------------------------

TEST_CASE("linear attention: L=1 returns v") {
    Rng rng(5);
    KernelParams p = make_kernel(rng, 4, 4);
    Tensor q = rng.randn({1, 4}), k = rng.randn({1, 4}), v = rng.randn({1, 4});
    for (bool causal : {false, true}) {
        Tensor y = linear_attention(q, k, v, p, nullptr, 0, causal, 1e-6, true);
        for (size_t i = 0; i < 4; ++i) CHECK(y.at(i) == doctest::Approx(v.at(i)).epsilon(1e-5));
    }
}

TEST_CASE("linear attention O(L) form matches the quadratic oracle") {
    Rng rng(6);
    const size_t l = 32, d = 8;
    KernelParams p = make_kernel(rng, d, d);
    Tensor q = rng.randn({l, d}), k = rng.randn({l, d}), v = rng.randn({l, d});
    TokenGrid grid{2, 4, 4};
    const TokenGrid* grids[] = {nullptr, &grid};
    for (bool causal : {false, true}) {
        for (const TokenGrid* g : grids) {
            Tensor fast = linear_attention(q, k, v, p, g, 0, causal, 1e-6, true);
            Tensor slow = lin_attn_oracle(q, k, v, p, g, causal, 1e-6, true);
            CHECK(max_rel_diff(fast, slow) < 1e-5);
        }
    }
}

TEST_CASE("linear attention is a convex combination without rotation") {
    Rng rng(7);
    const size_t l = 12, d = 4;
    KernelParams p = make_kernel(rng, d, d);
    Tensor q = rng.randn({l, d}), k = rng.randn({l, d});
    Tensor v = Tensor::zeros({l, d});
    for (size_t i = 0; i < l; ++i)
        for (size_t j = 0; j < d; ++j) v.at(i * d + j) = 1.0 + static_cast<double>(j);
    for (bool causal : {false, true}) {
        Tensor y = linear_attention(q, k, v, p, nullptr, 0, causal, 1e-6, true);
        for (size_t i = 0; i < l; ++i)
            for (size_t j = 0; j < d; ++j)
                CHECK(y.at(i * d + j) == doctest::Approx(1.0 + static_cast<double>(j)).epsilon(1e-5));
    }
}

TEST_CASE("linear attention causal: zero leakage, exact") {
    Rng rng(8);
    const size_t l = 14, d = 4;
    KernelParams p = make_kernel(rng, d, d);
    TokenGrid grid{14, 1, 1};
    Tensor q = rng.randn({l, d}), k = rng.randn({l, d}), v = rng.randn({l, d});
    Tensor base = linear_attention(q, k, v, p, &grid, 0, true, 1e-6, true);
    Tensor k2 = k.detached_copy(), v2 = v.detached_copy(), q2 = q.detached_copy();
    const size_t cut = 9;
    for (size_t j = cut; j < l; ++j)
        for (size_t e = 0; e < d; ++e) {
            k2.at(j * d + e) = -k2.at(j * d + e) + 3.0;
            v2.at(j * d + e) *= -2.0;
            q2.at(j * d + e) += 1.0;
        }
    Tensor pert = linear_attention(q2, k2, v2, p, &grid, 0, true, 1e-6, true);
    for (size_t i = 0; i < cut; ++i)
        for (size_t e = 0; e < d; ++e) CHECK(pert.at(i * d + e) == base.at(i * d + e));
}

TEST_CASE("linear attention flags a degenerate denominator") {
    KernelParams p;
    p.w = Tensor::zeros({2, 2});
    p.b = Tensor::full({2}, -800.0);  // phi underflows to the tiny floor
    Rng rng(9);
    Tensor q = rng.randn({3, 2}), k = rng.randn({3, 2}), v = rng.randn({3, 2});
    CHECK_THROWS_WITH_AS(linear_attention(q, k, v, p, nullptr, 0, false, 1e-6, false),
                         doctest::Contains("degenerate"), std::runtime_error);
}

// ---------------------------------------------------------------------------
// rope3d
// ---------------------------------------------------------------------------

TEST_CASE("rope3d: identity at the origin, isometry, relative positions") {
    Rng rng(10);
    TokenGrid grid{3, 3, 3};
    const size_t d = 6;
    Tensor x = rng.randn({grid.len(), d});
    Tensor y = rope3d(x, grid);
    // Token (0,0,0) is untouched.
    for (size_t j = 0; j < d; ++j) CHECK(y.at(j) == doctest::Approx(x.at(j)).epsilon(1e-12));
    // Norm preserved everywhere.
    for (size_t i = 0; i < grid.len(); ++i) {
        double nx = 0.0, ny = 0.0;
        for (size_t j = 0; j < d; ++j) {
            nx += x.at(i * d + j) * x.at(i * d + j);
            ny += y.at(i * d + j) * y.at(i * d + j);
        }
        CHECK(std::fabs(std::sqrt(nx) - std::sqrt(ny)) < 1e-6);
    }
    CHECK_THROWS(rope3d(rng.randn({grid.len(), 5}), grid));

    // <R_m q, R_n k> depends only on m - n per axis.
    std::vector<double> qv = tensor_row(rng.randn({1, d}), 0);
    std::vector<double> kv = tensor_row(rng.randn({1, d}), 0);
    auto dot = [&](const std::vector<double>& a, const std::vector<double>& b) {
        double acc = 0.0;
        for (size_t i = 0; i < a.size(); ++i) acc += a[i] * b[i];
        return acc;
    };
    const double base_ip = dot(rotate_row(qv, 5, 2, 1), rotate_row(kv, 3, 1, 0));
    const double shifted_ip = dot(rotate_row(qv, 9, 6, 4), rotate_row(kv, 7, 5, 3));
    CHECK(std::fabs(base_ip - shifted_ip) < 1e-6);

    // Engine path agrees with the independent rotation.
    for (size_t i = 0; i < grid.len(); ++i) {
        const size_t fl = grid.frame_len();
        auto want = rotate_row(tensor_row(x, i), i / fl, (i % fl) / grid.w, i % grid.w);
        for (size_t j = 0; j < d; ++j) CHECK(y.at(i * d + j) == doctest::Approx(want[j]).epsilon(1e-12));
    }
}

// ---------------------------------------------------------------------------
// local conv path
// ---------------------------------------------------------------------------

TEST_CASE("local_conv_path: identity kernel reproduces the input") {
    TokenGrid grid{3, 4, 4};
    const size_t c = 3;
    Rng rng(11);
    Tensor x = rng.randn({grid.len(), c});
    // Delta at the last temporal tap and spatial center.
    Tensor w = Tensor::zeros({c, 3, 3, 3});
    for (size_t ch = 0; ch < c; ++ch) w.at(((ch * 3 + 2) * 3 + 1) * 3 + 1) = 1.0;
    Tensor mix = Tensor::zeros({c, c});
    for (size_t i = 0; i < c; ++i) mix.at(i * c + i) = 1.0;
    Tensor bias = Tensor::zeros({c});
    Tensor y = local_conv_path(x, grid, w, mix, bias);
    for (size_t i = 0; i < x.numel(); ++i) CHECK(y.at(i) == x.at(i));
}

TEST_CASE("local_conv_path: temporal causality and naive oracle") {
    TokenGrid grid{4, 3, 3};
    const size_t c = 2;
    Rng rng(12);
    Tensor x = rng.randn({grid.len(), c});
    Tensor w = rng.randn({c, 3, 3, 3});
    Tensor mix = rng.randn({c, c});
    Tensor bias = rng.randn({c});

    Tensor base = local_conv_path(x, grid, w, mix, bias);
    Tensor x2 = x.detached_copy();
    const size_t t_cut = 2;  // perturb frames >= 2
    for (size_t i = t_cut * grid.frame_len(); i < grid.len(); ++i)
        for (size_t ch = 0; ch < c; ++ch) x2.at(i * c + ch) += 7.0;
    Tensor pert = local_conv_path(x2, grid, w, mix, bias);
    for (size_t i = 0; i < t_cut * grid.frame_len(); ++i)
        for (size_t ch = 0; ch < c; ++ch) CHECK(pert.at(i * c + ch) == base.at(i * c + ch));

    // Depthwise part against the six-loop oracle (identity mixing).
    Tensor eye = Tensor::zeros({c, c});
    for (size_t i = 0; i < c; ++i) eye.at(i * c + i) = 1.0;
    Tensor zb = Tensor::zeros({c});
    Tensor got = local_conv_path(x, grid, w, eye, zb);
    Tensor want = conv_oracle(x, grid, w);
    CHECK(max_rel_diff(got, want) < 1e-6);

    CHECK_THROWS(depthwise_conv3d(x, grid, rng.randn({c, 1, 9, 3})));
}

// ---------------------------------------------------------------------------
// lcha block
// ---------------------------------------------------------------------------

TEST_CASE("lcha fusion gate: saturation and the exact half mix") {
    TokenGrid grid{2, 4, 4};
    LchaConfig cfg;
    cfg.heads = 2;
    cfg.head_dim = 4;
    Rng rng(13);
    LchaBlock blk;
    blk.init(rng, 8, 8, cfg, 2, Dtype::f64);
    Tensor h = Rng(77).randn({grid.len(), 8});

    // alpha -> +inf: the conv branch becomes irrelevant.
    blk.alpha.at(0) = 1000.0;
    Tensor out_lin = blk.attn_mix(h, grid, Mode{});
    LchaBlock scrambled = blk;
    Rng srng(99);
    scrambled.conv_w = srng.randn({8, 3, 3, 3});
    scrambled.mix_w = srng.randn({8, 8});
    scrambled.mix_b = srng.randn({8});
    Tensor out_lin2 = scrambled.attn_mix(h, grid, Mode{});
    for (size_t i = 0; i < out_lin.numel(); ++i) CHECK(out_lin.at(i) == out_lin2.at(i));

    // alpha -> -inf: pure conv path.
    blk.alpha.at(0) = -1000.0;
    Tensor out_conv = blk.attn_mix(h, grid, Mode{});

    // alpha = 0: exactly (lin + conv) / 2.
    blk.alpha.at(0) = 0.0;
    Tensor out_half = blk.attn_mix(h, grid, Mode{});
    for (size_t i = 0; i < out_half.numel(); ++i) {
        CHECK(out_half.at(i) ==
              doctest::Approx(0.5 * out_lin.at(i) + 0.5 * out_conv.at(i)).epsilon(1e-12));
    }
}

TEST_CASE("lcha gate sweep is monotone in the mixing coefficient") {
    TokenGrid grid{1, 4, 4};
    LchaConfig cfg;
    cfg.heads = 1;
    cfg.head_dim = 4;
    Rng rng(14);
    LchaBlock blk;
    blk.init(rng, 4, 4, cfg, 2, Dtype::f64);
    Tensor h = Rng(15).randn({grid.len(), 4});
    std::vector<Tensor> sweep;
    for (double a : {-10.0, -3.0, 0.0, 3.0, 10.0}) {
        blk.alpha.at(0) = a;
        sweep.push_back(blk.attn_mix(h, grid, Mode{}));
    }
    for (size_t i = 0; i < sweep[0].numel(); ++i) {
        const double lo = sweep.front().at(i), hi = sweep.back().at(i);
        if (std::fabs(hi - lo) < 1e-9) continue;
        const double dir = hi > lo ? 1.0 : -1.0;
        for (size_t s = 1; s < sweep.size(); ++s) {
            CHECK(dir * (sweep[s].at(i) - sweep[s - 1].at(i)) >= -1e-12);
        }
    }
}

TEST_CASE("lcha block gradients: alpha and every learnable tensor") {
    TokenGrid grid{1, 2, 2};
    LchaConfig cfg;
    cfg.heads = 1;
    cfg.head_dim = 2;
    Rng rng(16);
    LchaBlock blk;
    blk.init(rng, 2, 4, cfg, 2, Dtype::f64);
    CondCtx cond = make_cond(rng, 4, grid);
    Tensor x = rng.randn({grid.len(), 2});

    NamedParams params;
    blk.collect_params("blk", params);
    std::vector<Tensor> inputs{x};
    for (auto& [name, t] : params.items) inputs.push_back(t);
    auto fn = [&](const std::vector<Tensor>& in) { return blk.forward(in[0], grid, cond, Mode{}); };
    GradCheckResult r = grad_check("lcha_block", fn, inputs, 1e-4);
    INFO("max_rel_err=", r.max_rel_err);
    CHECK(r.pass);
}

// ---------------------------------------------------------------------------
// ssa block
// ---------------------------------------------------------------------------

TEST_CASE("ssa stride 1 with identity projections equals a plain attention block") {
    TokenGrid grid{2, 3, 3};
    Rng rng(17);
    AttnBlock plain;
    plain.init(rng, 4, 4, 2, 2, true, 2, Dtype::f64);

    SsaConfig scfg{1, 2, 2, true};
    Rng rng2(18);
    SsaBlock ssa;
    ssa.init(rng2, 4, 4, scfg, 2, Dtype::f64);
    make_identity_projection(ssa);
    // Share every wrapped parameter with the plain block.
    ssa.ln1 = plain.ln1;
    ssa.ln2 = plain.ln2;
    ssa.ada = plain.ada;
    ssa.attn = plain.attn;
    ssa.mlp = plain.mlp;

    Rng crng(19);
    CondCtx cond = make_cond(crng, 4, grid);
    Tensor x = crng.randn({grid.len(), 4});
    Tensor a = plain.forward(x, grid, cond, Mode{});
    Tensor b = ssa.forward(x, grid, cond, Mode{});
    for (size_t i = 0; i < a.numel(); ++i) CHECK(a.at(i) == b.at(i));
}

TEST_CASE("ssa stride 2 sees a quarter of the tokens") {
    TokenGrid grid{2, 4, 4};
    CHECK(grid.len() == 32);
    CHECK(grid.strided(2).len() == 8);  // 4x reduction
    CHECK_THROWS((void)TokenGrid{1, 5, 4}.strided(2));
}

TEST_CASE("ssa down/up round trip with identity projections") {
    TokenGrid grid{2, 4, 4};
    Rng rng(20);
    SsaConfig scfg{2, 1, 4, true};
    SsaBlock ssa;
    ssa.init(rng, 3, 4, scfg, 2, Dtype::f64);
    make_identity_projection(ssa);
    Tensor x = rng.randn({grid.len(), 3});
    Tensor low = ssa.down.forward(x, grid);
    CHECK(low.dim(0) == 8);
    CHECK(low.dim(1) == 12);
    Tensor back = ssa.up.forward(low, grid.strided(2));
    CHECK(max_rel_diff(back, x) < 1e-6);
}

TEST_CASE("ssa block gradients through down/attend/up") {
    TokenGrid grid{1, 2, 2};
    Rng rng(21);
    SsaConfig scfg{2, 1, 2, true};
    SsaBlock ssa;
    ssa.init(rng, 2, 4, scfg, 2, Dtype::f64);
    CondCtx cond = make_cond(rng, 4, grid);
    NamedParams params;
    ssa.collect_params("ssa", params);
    std::vector<Tensor> inputs{rng.randn({grid.len(), 2})};
    for (auto& [name, t] : params.items) inputs.push_back(t);
    auto fn = [&](const std::vector<Tensor>& in) { return ssa.forward(in[0], grid, cond, Mode{}); };
    GradCheckResult r = grad_check("ssa_block", fn, inputs, 1e-4);
    INFO("max_rel_err=", r.max_rel_err);
    CHECK(r.pass);
}

// ---------------------------------------------------------------------------
// kv compression baseline
// ---------------------------------------------------------------------------

TEST_CASE("kv_compress_attention") {
    TokenGrid grid{2, 4, 4};
    Rng rng(22);
    const size_t d = 4;
    Tensor q = rng.randn({grid.len(), d});
    Tensor k = rng.randn({grid.len(), d});
    Tensor v = rng.randn({grid.len(), d});

    Tensor y1 = kv_compress_attention(q, k, v, grid, 1);
    Tensor yf = full_attention(q, k, v, false);
    for (size_t i = 0; i < y1.numel(); ++i) CHECK(y1.at(i) == yf.at(i));

    Tensor vc = Tensor::full({grid.len(), d}, 2.5);
    Tensor yc = kv_compress_attention(q, k, vc, grid, 2);
    for (size_t i = 0; i < yc.numel(); ++i) CHECK(yc.at(i) == doctest::Approx(2.5).epsilon(1e-10));

    // Explicit pooled oracle.
    Tensor kp = spatial_avg_pool(k, grid, 2);
    Tensor vp = spatial_avg_pool(v, grid, 2);
    Tensor want = full_attention(q, kp, vp, false);
    Tensor got = kv_compress_attention(q, k, v, grid, 2);
    CHECK(max_rel_diff(got, want) < 1e-6);
}

// ---------------------------------------------------------------------------
// reference model
// ---------------------------------------------------------------------------

TEST_CASE("reference model forward shape, determinism, causal mode") {
    RefModelConfig rc;
    rc.grid = TokenGrid{2, 4, 4};
    rc.c_latent = 3;
    rc.c_model = 8;
    rc.heads = 2;
    rc.head_dim = 4;
    rc.blocks = 2;
    rc.cond_dim = 8;
    rc.c_text = 4;
    Rng rng(23);
    ReferenceModel model;
    model.init(rng, rc);
    Tensor x = Rng(24).randn({rc.grid.len(), rc.c_latent});
    Tensor c = Rng(25).randn({rc.c_text});
    std::vector<double> t(rc.grid.t, 0.4);
    Tensor y1 = model.forward(x, t, c, Mode{});
    Tensor y2 = model.forward(x, t, c, Mode{});
    REQUIRE(y1.shape == std::vector<size_t>{rc.grid.len(), rc.c_latent});
    for (size_t i = 0; i < y1.numel(); ++i) CHECK(y1.at(i) == y2.at(i));

    // Causal mode: future-frame perturbations stay in the future.
    Tensor y_causal = model.forward(x, t, c, Mode{true, nullptr});
    Tensor x2 = x.detached_copy();
    for (size_t i = rc.grid.frame_len(); i < rc.grid.len(); ++i)
        for (size_t j = 0; j < rc.c_latent; ++j) x2.at(i * rc.c_latent + j) += 3.0;
    Tensor y_pert = model.forward(x2, t, c, Mode{true, nullptr});
    for (size_t i = 0; i < rc.grid.frame_len(); ++i)
        for (size_t j = 0; j < rc.c_latent; ++j)
            CHECK(y_pert.at(i * rc.c_latent + j) == y_causal.at(i * rc.c_latent + j));
}
