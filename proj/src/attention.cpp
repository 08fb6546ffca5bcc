#include "s2dit/attention.hpp"

#include <cmath>

namespace s2dit {

using namespace ops;

namespace {

// Plain row concatenation for streaming caches; never on the tape.
Tensor vstack(const std::vector<const Tensor*>& parts) {
    size_t rows = 0;
    size_t cols = 0;
    for (const Tensor* p : parts) {
        if (!p || p->numel() == 0) continue;
        rows += p->dim(0);
        cols = p->dim(1);
    }
    Tensor out = Tensor::zeros({rows, cols}, Dtype::f64);
    size_t r = 0;
    for (const Tensor* p : parts) {
        if (!p || p->numel() == 0) continue;
        for (size_t i = 0; i < p->dim(0); ++i, ++r)
            for (size_t j = 0; j < cols; ++j) out.at(r * cols + j) = p->at(i * cols + j);
    }
    return out;
}

Tensor frame_rows(const Tensor& x, const TokenGrid& grid, size_t frame) {
    const size_t fl = grid.frame_len(), c = x.dim(1);
    Tensor out = Tensor::zeros({fl, c}, x.dtype);
    for (size_t i = 0; i < fl; ++i)
        for (size_t j = 0; j < c; ++j) out.at(i * c + j) = x.at((frame * fl + i) * c + j);
    return out;
}

Tensor linear(const Tensor& x, const Tensor& w, const Tensor& b) {
    return add_rowwise(matmul(x, w), b);
}

void init_linear(Rng& rng, Tensor& w, Tensor& b, size_t in, size_t out, Dtype dt) {
    w = rng.randn({in, out}, dt, 1.0 / std::sqrt(static_cast<double>(in)));
    w.set_requires_grad(true);
    b = Tensor::zeros({out}, dt);
    b.set_requires_grad(true);
}

}  // namespace

std::vector<size_t> frame_map(const TokenGrid& grid) {
    std::vector<size_t> fot(grid.len());
    for (size_t i = 0; i < fot.size(); ++i) fot[i] = grid.frame_of(i);
    return fot;
}

Tensor sinusoidal_embedding(double t, size_t dim) {
    if (dim % 2 != 0) throw std::invalid_argument("sinusoidal_embedding: dim must be even");
    const size_t half = dim / 2;
    Tensor e = Tensor::zeros({dim}, Dtype::f64);
    for (size_t i = 0; i < half; ++i) {
        const double freq = std::exp(-std::log(10000.0) * static_cast<double>(i) /
                                     static_cast<double>(half));
        const double ang = t * 1000.0 * freq;
        e.at(i) = std::cos(ang);
        e.at(half + i) = std::sin(ang);
    }
    return e;
}

// ---------------------------------------------------------------------------
// AdaLN / block plumbing
// ---------------------------------------------------------------------------

void AdaLnHead::init(Rng& rng, size_t cond_dim, size_t c, Dtype dt) {
    w = rng.randn({cond_dim, 6 * c}, dt, 0.02);
    w.set_requires_grad(true);
    b = Tensor::zeros({6 * c}, dt);
    b.set_requires_grad(true);
}

AdaLnParams AdaLnHead::compute(const Tensor& cond) const {
    const size_t c = b.dim(0) / 6;
    Tensor m = linear(cond, w, b);  // [F, 6C]
    AdaLnParams p;
    p.shift_attn = slice_lastdim(m, 0, c);
    p.scale_attn = slice_lastdim(m, c, c);
    p.gate_attn = sigmoid(slice_lastdim(m, 2 * c, c));
    p.shift_mlp = slice_lastdim(m, 3 * c, c);
    p.scale_mlp = slice_lastdim(m, 4 * c, c);
    p.gate_mlp = sigmoid(slice_lastdim(m, 5 * c, c));
    return p;
}

void AdaLnHead::collect_params(const std::string& prefix, NamedParams& out) const {
    out.add(prefix + ".w", w);
    out.add(prefix + ".b", b);
}

void LayerNormParams::init(size_t c, Dtype dt) {
    gamma = Tensor::full({c}, 1.0, dt);
    gamma.set_requires_grad(true);
    beta = Tensor::zeros({c}, dt);
    beta.set_requires_grad(true);
}

void LayerNormParams::collect_params(const std::string& prefix, NamedParams& out) const {
    out.add(prefix + ".gamma", gamma);
    out.add(prefix + ".beta", beta);
}

void Mlp::init(Rng& rng, size_t c, size_t hidden, Dtype dt) {
    init_linear(rng, w1, b1, c, hidden, dt);
    init_linear(rng, w2, b2, hidden, c, dt);
}

Tensor Mlp::forward(const Tensor& x) const { return linear(silu(linear(x, w1, b1)), w2, b2); }

void Mlp::collect_params(const std::string& prefix, NamedParams& out) const {
    out.add(prefix + ".w1", w1);
    out.add(prefix + ".b1", b1);
    out.add(prefix + ".w2", w2);
    out.add(prefix + ".b2", b2);
}

Tensor modulate(const Tensor& x, const Tensor& shift, const Tensor& scale,
                const std::vector<size_t>& fot) {
    Tensor se = expand_frames(scale, fot);
    Tensor sh = expand_frames(shift, fot);
    Tensor ones = Tensor::full(se.shape, 1.0, se.dtype);
    return add(mul(x, add(se, ones)), sh);
}

Tensor apply_gate(const Tensor& x, const Tensor& gate, const std::vector<size_t>& fot) {
    return mul(expand_frames(gate, fot), x);
}

// ---------------------------------------------------------------------------
// Attention ops
// ---------------------------------------------------------------------------

Tensor full_attention(const Tensor& q, const Tensor& k, const Tensor& v, bool causal,
                      size_t q_offset) {
    if (q.rank() != 2 || k.rank() != 2 || v.rank() != 2) {
        throw std::invalid_argument("full_attention: rank-2 inputs required");
    }
    if (q.dim(0) == 0 || k.dim(0) == 0) throw std::invalid_argument("full_attention: empty sequence");
    if (q.dim(1) != k.dim(1) || k.dim(0) != v.dim(0)) {
        throw std::invalid_argument("full_attention: shape mismatch");
    }
    const double inv_sqrt_d = 1.0 / std::sqrt(static_cast<double>(q.dim(1)));
    Tensor scores = scale(matmul(q, transpose2d(k)), inv_sqrt_d);
    Tensor probs = softmax_lastdim(scores, causal, q_offset);
    return matmul(probs, v);
}

Tensor kernel_map(const Tensor& x, const KernelParams& p) {
    Tensor z = linear(x, transpose2d(p.w), p.b);
    Tensor sp = softplus(z);
    // softplus underflows to exactly 0 below z ~ -745; keep the map positive.
    Tensor out = sp;
    bool clamped = false;
    for (size_t i = 0; i < out.numel(); ++i) {
        if (out.at(i) == 0.0) {
            clamped = true;
            break;
        }
    }
    if (clamped) {
        Tensor floor_t = Tensor::full(sp.shape, 1e-300, sp.dtype);
        out = add(relu(sub(sp, floor_t)), floor_t);  // max(sp, 1e-300), grad-safe
    }
    return out;
}

Tensor linear_attention(const Tensor& q, const Tensor& k, const Tensor& v, const KernelParams& p,
                        const TokenGrid* rope_grid, size_t t_offset, bool causal, double eps,
                        bool qk_norm) {
    Tensor qn = qk_norm ? layer_norm_noaffine(q) : q;
    Tensor kn = qk_norm ? layer_norm_noaffine(k) : k;
    Tensor pq = kernel_map(qn, p);
    Tensor pk = kernel_map(kn, p);
    Tensor rq = rope_grid ? rope3d(pq, *rope_grid, t_offset) : pq;
    Tensor rk = rope_grid ? rope3d(pk, *rope_grid, t_offset) : pk;
    Tensor numer = lin_attn_numerator(rq, rk, v, causal);
    Tensor denom = lin_attn_denominator(pq, pk, causal);
    for (size_t i = 0; i < denom.numel(); ++i) {
        if (denom.at(i) < eps) {
            throw std::runtime_error("linear_attention: degenerate denominator " +
                                     std::to_string(denom.at(i)) + " below eps floor");
        }
    }
    return rowwise_div(numer, denom, eps);
}

Tensor linear_attention_stream(const Tensor& q, const Tensor& k, const Tensor& v,
                               const KernelParams& p, const TokenGrid* rope_grid, size_t t_offset,
                               double eps, bool qk_norm, Tensor& state_s, Tensor& state_z,
                               bool commit) {
    NoGradGuard ng;
    Tensor qn = qk_norm ? layer_norm_noaffine(q) : q;
    Tensor kn = qk_norm ? layer_norm_noaffine(k) : k;
    Tensor pq = kernel_map(qn, p);
    Tensor pk = kernel_map(kn, p);
    Tensor rq = rope_grid ? rope3d(pq, *rope_grid, t_offset) : pq;
    Tensor rk = rope_grid ? rope3d(pk, *rope_grid, t_offset) : pk;
    const size_t l = q.dim(0), dk = pq.dim(1), dv = v.dim(1);
    std::vector<double> s = *state_s.data;  // [dk*dv], rotated-key state
    std::vector<double> z = *state_z.data;  // [dk], un-rotated normalizer
    Tensor out = Tensor::zeros({l, dv}, Dtype::f64);
    for (size_t i = 0; i < l; ++i) {
        for (size_t d = 0; d < dk; ++d) {
            const double rkv = rk.at(i * dk + d);
            for (size_t e = 0; e < dv; ++e) s[d * dv + e] += rkv * v.at(i * dv + e);
            z[d] += pk.at(i * dk + d);
        }
        double den = 0.0;
        for (size_t d = 0; d < dk; ++d) den += pq.at(i * dk + d) * z[d];
        if (den < eps) {
            throw std::runtime_error("linear_attention: degenerate denominator " +
                                     std::to_string(den) + " below eps floor");
        }
        for (size_t e = 0; e < dv; ++e) {
            double acc = 0.0;
            for (size_t d = 0; d < dk; ++d) acc += rq.at(i * dk + d) * s[d * dv + e];
            out.at(i * dv + e) = acc / (den + eps);
        }
    }
    if (commit) {
        *state_s.data = s;
        *state_z.data = z;
    }
    check_finite("linear_attention_stream", out);
    return out;
}

Tensor local_conv_path(const Tensor& x, const TokenGrid& grid, const Tensor& conv_w,
                       const Tensor& mix_w, const Tensor& mix_b, ConvRing* ring, bool commit) {
    Tensor conv_out;
    if (ring != nullptr && ring->capacity > 0) {
        Tensor history = [&] {
            std::vector<const Tensor*> parts;
            for (const auto& f : ring->frames) parts.push_back(&f);
            return vstack(parts);
        }();
        conv_out = depthwise_conv3d(x, grid, conv_w, &history, ring->capacity);
    } else {
        conv_out = depthwise_conv3d(x, grid, conv_w);
    }
    if (ring != nullptr && commit) {
        for (size_t f = 0; f < grid.t; ++f) ring->push(frame_rows(x, grid, f));
    }
    return linear(conv_out, mix_w, mix_b);
}

Tensor kv_compress_attention(const Tensor& q, const Tensor& k, const Tensor& v,
                             const TokenGrid& grid, size_t pool) {
    if (pool == 1) return full_attention(q, k, v, false);
    Tensor kp = spatial_avg_pool(k, grid, pool);
    Tensor vp = spatial_avg_pool(v, grid, pool);
    return full_attention(q, kp, vp, false);
}

// ---------------------------------------------------------------------------
// MhaCore
// ---------------------------------------------------------------------------

void MhaCore::init(Rng& rng, size_t c, size_t h, size_t hd, bool use_rope, Dtype dt) {
    heads = h;
    head_dim = hd;
    rope = use_rope;
    const size_t inner = heads * head_dim;
    init_linear(rng, wq, bq, c, inner, dt);
    init_linear(rng, wk, bk, c, inner, dt);
    init_linear(rng, wv, bv, c, inner, dt);
    init_linear(rng, wo, bo, inner, c, dt);
}

Tensor MhaCore::forward(const Tensor& x, const TokenGrid& grid, const Mode& mode,
                        const void* state_key) const {
    const size_t hd = head_dim;
    Tensor q = linear(x, wq, bq);
    Tensor k = linear(x, wk, bk);
    Tensor v = linear(x, wv, bv);
    const size_t t_offset = mode.stream ? mode.stream->frame_offset : 0;

    auto head_prep = [&](const Tensor& full, size_t h, bool rotate) {
        Tensor s = slice_lastdim(full, h * hd, hd);
        if (qk_norm) s = layer_norm_noaffine(s);
        if (rotate && rope) s = rope3d(s, grid, t_offset);
        return s;
    };

    std::vector<Tensor> head_outs;
    if (mode.stream == nullptr) {
        for (size_t h = 0; h < heads; ++h) {
            Tensor qh = head_prep(q, h, true);
            Tensor kh = head_prep(k, h, true);
            Tensor vh = slice_lastdim(v, h * hd, hd);
            head_outs.push_back(full_attention(qh, kh, vh, mode.causal));
        }
    } else {
        // Cached keys were rotated at their global positions; concatenate and
        // attend with the causal offset at the cache boundary.
        StreamCtx& ctx = *mode.stream;
        BlockState& st = ctx.state_for(state_key ? state_key : this);
        st.kv.window_chunks = ctx.window_chunks;
        std::vector<Tensor> kh_cur(heads), vh_cur(heads);
        for (size_t h = 0; h < heads; ++h) {
            kh_cur[h] = head_prep(k, h, true);
            vh_cur[h] = slice_lastdim(v, h * hd, hd);
        }
        Tensor k_cur = concat_lastdim(kh_cur);
        Tensor v_cur = concat_lastdim(vh_cur);
        const size_t cached = st.kv.token_count();
        for (size_t h = 0; h < heads; ++h) {
            Tensor qh = head_prep(q, h, true);
            std::vector<const Tensor*> kparts, vparts;
            std::vector<Tensor> kslices, vslices;
            for (const auto& [ck, cv] : st.kv.chunks) {
                kslices.push_back(slice_lastdim(ck, h * hd, hd));
                vslices.push_back(slice_lastdim(cv, h * hd, hd));
            }
            for (const auto& t : kslices) kparts.push_back(&t);
            for (const auto& t : vslices) vparts.push_back(&t);
            Tensor kh = kh_cur[h], vh = vh_cur[h];
            kparts.push_back(&kh);
            vparts.push_back(&vh);
            head_outs.push_back(full_attention(qh, vstack(kparts), vstack(vparts), true, cached));
        }
        if (ctx.commit) st.kv.push(k_cur.detached_copy(), v_cur.detached_copy());
    }
    return linear(concat_lastdim(head_outs), wo, bo);
}

void MhaCore::collect_params(const std::string& prefix, NamedParams& out) const {
    out.add(prefix + ".wq", wq);
    out.add(prefix + ".bq", bq);
    out.add(prefix + ".wk", wk);
    out.add(prefix + ".bk", bk);
    out.add(prefix + ".wv", wv);
    out.add(prefix + ".bv", bv);
    out.add(prefix + ".wo", wo);
    out.add(prefix + ".bo", bo);
}

// ---------------------------------------------------------------------------
// AttnBlock
// ---------------------------------------------------------------------------

void AttnBlock::init(Rng& rng, size_t c_model, size_t cond_dim, size_t heads, size_t head_dim,
                     bool rope, size_t mlp_ratio, Dtype dt) {
    c = c_model;
    ln1.init(c, dt);
    ln2.init(c, dt);
    ada.init(rng, cond_dim, c, dt);
    attn.init(rng, c, heads, head_dim, rope, dt);
    mlp.init(rng, c, c * mlp_ratio, dt);
}

Tensor AttnBlock::forward(const Tensor& x, const TokenGrid& grid, const CondCtx& cond,
                          const Mode& mode) const {
    AdaLnParams ap = ada.compute(cond.cond);
    Tensor h = layer_norm(x, ln1.gamma, ln1.beta);
    h = modulate(h, ap.shift_attn, ap.scale_attn, cond.frame_of_token);
    Tensor a = attn.forward(h, grid, mode, this);
    Tensor x1 = add(x, apply_gate(a, ap.gate_attn, cond.frame_of_token));
    Tensor m = layer_norm(x1, ln2.gamma, ln2.beta);
    m = modulate(m, ap.shift_mlp, ap.scale_mlp, cond.frame_of_token);
    return add(x1, apply_gate(mlp.forward(m), ap.gate_mlp, cond.frame_of_token));
}

void AttnBlock::collect_params(const std::string& prefix, NamedParams& out) const {
    ln1.collect_params(prefix + ".ln1", out);
    ln2.collect_params(prefix + ".ln2", out);
    ada.collect_params(prefix + ".ada", out);
    attn.collect_params(prefix + ".attn", out);
    mlp.collect_params(prefix + ".mlp", out);
}

// ---------------------------------------------------------------------------
// LchaBlock
// ---------------------------------------------------------------------------

void LchaBlock::init(Rng& rng, size_t c_model, size_t cond_dim, const LchaConfig& config,
                     size_t mlp_ratio, Dtype dt) {
    cfg = config;
    c = c_model;
    if (cfg.kh % 2 == 0 || cfg.kw % 2 == 0) {
        throw std::invalid_argument("LchaBlock: spatial conv kernel must be odd");
    }
    ln1.init(c, dt);
    ln2.init(c, dt);
    ada.init(rng, cond_dim, c, dt);
    const size_t inner = cfg.heads * cfg.head_dim;
    init_linear(rng, wq, bq, c, inner, dt);
    init_linear(rng, wk, bk, c, inner, dt);
    init_linear(rng, wv, bv, c, inner, dt);
    init_linear(rng, wo, bo, inner, c, dt);
    kernels.resize(cfg.heads);
    for (auto& kp : kernels) {
        kp.w = rng.randn({cfg.dk(), cfg.head_dim}, dt, 1.0 / std::sqrt(static_cast<double>(cfg.head_dim)));
        kp.w.set_requires_grad(true);
        kp.b = Tensor::full({cfg.dk()}, 0.5, dt);
        kp.b.set_requires_grad(true);
    }
    conv_w = rng.randn({c, cfg.kt, cfg.kh, cfg.kw}, dt,
                       1.0 / std::sqrt(static_cast<double>(cfg.kt * cfg.kh * cfg.kw)));
    conv_w.set_requires_grad(true);
    init_linear(rng, mix_w, mix_b, c, c, dt);
    alpha = Tensor::full({1}, cfg.alpha_init, dt);
    alpha.set_requires_grad(true);
    mlp.init(rng, c, c * mlp_ratio, dt);
}

Tensor LchaBlock::attn_mix(const Tensor& h, const TokenGrid& grid, const Mode& mode) const {
    const size_t hd = cfg.head_dim;
    Tensor q = linear(h, wq, bq);
    Tensor k = linear(h, wk, bk);
    Tensor v = linear(h, wv, bv);
    const TokenGrid* rope_grid = cfg.rope ? &grid : nullptr;
    const size_t t_offset = mode.stream ? mode.stream->frame_offset : 0;

    std::vector<Tensor> head_outs;
    BlockState* st = nullptr;
    if (mode.stream != nullptr) {
        st = &mode.stream->state_for(this);
        if (!st->lin.ready()) st->lin.init(cfg.heads, cfg.dk(), hd);
        if (!st->ring.initialized) st->ring.init(cfg.kt - 1, grid.frame_len(), c);
    }
    for (size_t hidx = 0; hidx < cfg.heads; ++hidx) {
        Tensor qh = slice_lastdim(q, hidx * hd, hd);
        Tensor kh = slice_lastdim(k, hidx * hd, hd);
        Tensor vh = slice_lastdim(v, hidx * hd, hd);
        if (mode.stream == nullptr) {
            head_outs.push_back(linear_attention(qh, kh, vh, kernels[hidx], rope_grid, t_offset,
                                                 mode.causal, cfg.eps, cfg.qk_norm));
        } else {
            head_outs.push_back(linear_attention_stream(qh, kh, vh, kernels[hidx], rope_grid,
                                                        t_offset, cfg.eps, cfg.qk_norm,
                                                        st->lin.s[hidx], st->lin.z[hidx],
                                                        mode.stream->commit));
        }
    }
    if (st != nullptr && mode.stream->commit) st->lin.tokens += grid.len();
    Tensor lin_out = linear(concat_lastdim(head_outs), wo, bo);
    Tensor conv_out = local_conv_path(h, grid, conv_w, mix_w, mix_b, st ? &st->ring : nullptr,
                                      mode.stream != nullptr && mode.stream->commit);

    Tensor g = sigmoid(alpha);
    Tensor one = Tensor::scalar(1.0, g.dtype);
    return add(mul_scalar_t(lin_out, g), mul_scalar_t(conv_out, sub(one, g)));
}

Tensor LchaBlock::forward(const Tensor& x, const TokenGrid& grid, const CondCtx& cond,
                          const Mode& mode) const {
    AdaLnParams ap = ada.compute(cond.cond);
    Tensor h = layer_norm(x, ln1.gamma, ln1.beta);
    h = modulate(h, ap.shift_attn, ap.scale_attn, cond.frame_of_token);
    Tensor mixed = attn_mix(h, grid, mode);
    Tensor x1 = add(x, apply_gate(mixed, ap.gate_attn, cond.frame_of_token));
    Tensor m = layer_norm(x1, ln2.gamma, ln2.beta);
    m = modulate(m, ap.shift_mlp, ap.scale_mlp, cond.frame_of_token);
    return add(x1, apply_gate(mlp.forward(m), ap.gate_mlp, cond.frame_of_token));
}

std::vector<Tensor> LchaBlock::attention_maps(const Tensor& x, const TokenGrid& grid,
                                              const CondCtx& cond) const {
    NoGradGuard ng;
    AdaLnParams ap = ada.compute(cond.cond);
    Tensor h = layer_norm(x, ln1.gamma, ln1.beta);
    h = modulate(h, ap.shift_attn, ap.scale_attn, cond.frame_of_token);
    Tensor q = linear(h, wq, bq);
    Tensor k = linear(h, wk, bk);
    const size_t l = grid.len(), hd = cfg.head_dim;
    std::vector<Tensor> maps;
    for (size_t hidx = 0; hidx < cfg.heads; ++hidx) {
        Tensor qh = slice_lastdim(q, hidx * hd, hd);
        Tensor kh = slice_lastdim(k, hidx * hd, hd);
        if (cfg.qk_norm) {
            qh = layer_norm_noaffine(qh);
            kh = layer_norm_noaffine(kh);
        }
        Tensor pq = kernel_map(qh, kernels[hidx]);
        Tensor pk = kernel_map(kh, kernels[hidx]);
        Tensor den = lin_attn_denominator(pq, pk, false);
        Tensor amap = Tensor::zeros({l, l}, Dtype::f64);
        const size_t dk = pq.dim(1);
        for (size_t i = 0; i < l; ++i) {
            const double d = den.at(i) + cfg.eps;
            for (size_t j = 0; j < l; ++j) {
                double acc = 0.0;
                for (size_t p = 0; p < dk; ++p) acc += pq.at(i * dk + p) * pk.at(j * dk + p);
                amap.at(i * l + j) = acc / d;
            }
        }
        maps.push_back(amap);
    }
    return maps;
}

void LchaBlock::collect_params(const std::string& prefix, NamedParams& out) const {
    ln1.collect_params(prefix + ".ln1", out);
    ln2.collect_params(prefix + ".ln2", out);
    ada.collect_params(prefix + ".ada", out);
    out.add(prefix + ".wq", wq);
    out.add(prefix + ".bq", bq);
    out.add(prefix + ".wk", wk);
    out.add(prefix + ".bk", bk);
    out.add(prefix + ".wv", wv);
    out.add(prefix + ".bv", bv);
    out.add(prefix + ".wo", wo);
    out.add(prefix + ".bo", bo);
    for (size_t h = 0; h < kernels.size(); ++h) {
        out.add(prefix + ".kernel." + std::to_string(h) + ".w", kernels[h].w);
        out.add(prefix + ".kernel." + std::to_string(h) + ".b", kernels[h].b);
    }
    out.add(prefix + ".conv_w", conv_w);
    out.add(prefix + ".mix_w", mix_w);
    out.add(prefix + ".mix_b", mix_b);
    out.add(prefix + ".alpha", alpha);
    mlp.collect_params(prefix + ".mlp", out);
}

// ---------------------------------------------------------------------------
// Down/Up and SsaBlock
// ---------------------------------------------------------------------------

void Downsample::init(Rng& rng, size_t c_high, size_t c_low, size_t stride, Dtype dt) {
    s = stride;
    init_linear(rng, w, b, c_high * s * s, c_low, dt);
}

Tensor Downsample::forward(const Tensor& x, const TokenGrid& grid_high) const {
    return linear(pixel_unshuffle(x, grid_high, s), w, b);
}

void Downsample::collect_params(const std::string& prefix, NamedParams& out) const {
    out.add(prefix + ".w", w);
    out.add(prefix + ".b", b);
}

void Upsample::init(Rng& rng, size_t c_high, size_t c_low, size_t stride, Dtype dt) {
    s = stride;
    init_linear(rng, w, b, c_low, c_high * s * s, dt);
}

Tensor Upsample::forward(const Tensor& x, const TokenGrid& grid_low) const {
    return pixel_shuffle(linear(x, w, b), grid_low, s);
}

void Upsample::collect_params(const std::string& prefix, NamedParams& out) const {
    out.add(prefix + ".w", w);
    out.add(prefix + ".b", b);
}

void SsaBlock::init(Rng& rng, size_t c_model, size_t cond_dim, const SsaConfig& config,
                    size_t mlp_ratio, Dtype dt) {
    cfg = config;
    c = c_model;
    ln1.init(c, dt);
    ln2.init(c, dt);
    ada.init(rng, cond_dim, c, dt);
    const size_t c_low = c * cfg.stride * cfg.stride;
    down.init(rng, c, c_low, cfg.stride, dt);
    up.init(rng, c, c_low, cfg.stride, dt);
    attn.init(rng, c_low, cfg.heads, cfg.head_dim, cfg.rope, dt);
    mlp.init(rng, c, c * mlp_ratio, dt);
}

Tensor SsaBlock::forward(const Tensor& x, const TokenGrid& grid, const CondCtx& cond,
                         const Mode& mode) const {
    AdaLnParams ap = ada.compute(cond.cond);
    Tensor h = layer_norm(x, ln1.gamma, ln1.beta);
    h = modulate(h, ap.shift_attn, ap.scale_attn, cond.frame_of_token);
    const TokenGrid low = grid.strided(cfg.stride);
    Tensor a = up.forward(attn.forward(down.forward(h, grid), low, mode, this), low);
    Tensor x1 = add(x, apply_gate(a, ap.gate_attn, cond.frame_of_token));
    Tensor m = layer_norm(x1, ln2.gamma, ln2.beta);
    m = modulate(m, ap.shift_mlp, ap.scale_mlp, cond.frame_of_token);
    return add(x1, apply_gate(mlp.forward(m), ap.gate_mlp, cond.frame_of_token));
}

void SsaBlock::collect_params(const std::string& prefix, NamedParams& out) const {
    ln1.collect_params(prefix + ".ln1", out);
    ln2.collect_params(prefix + ".ln2", out);
    ada.collect_params(prefix + ".ada", out);
    down.collect_params(prefix + ".down", out);
    up.collect_params(prefix + ".up", out);
    attn.collect_params(prefix + ".attn", out);
    mlp.collect_params(prefix + ".mlp", out);
}

// ---------------------------------------------------------------------------
// Conditioner / ReferenceModel
// ---------------------------------------------------------------------------

void Conditioner::init(Rng& rng, size_t cd, size_t c_text, Dtype dt) {
    cond_dim = cd;
    init_linear(rng, w_t, b_t, cond_dim, cond_dim, dt);
    w_c = rng.randn({c_text, cond_dim}, dt, 1.0 / std::sqrt(static_cast<double>(c_text)));
    w_c.set_requires_grad(true);
}

CondCtx Conditioner::build(const std::vector<double>& t_frames, const Tensor& c_text,
                           const TokenGrid& grid) const {
    if (t_frames.size() != grid.t) {
        throw std::invalid_argument("Conditioner: need one timestep per frame");
    }
    Tensor emb = Tensor::zeros({grid.t, cond_dim}, Dtype::f64);
    for (size_t f = 0; f < grid.t; ++f) {
        Tensor e = sinusoidal_embedding(t_frames[f], cond_dim);
        for (size_t j = 0; j < cond_dim; ++j) emb.at(f * cond_dim + j) = e.at(j);
    }
    Tensor ct = matmul(reshape(c_text, {1, c_text.numel()}), w_c);
    Tensor ct_vec = reshape(ct, {cond_dim});
    CondCtx ctx;
    ctx.cond = silu(add_rowwise(linear(emb, w_t, b_t), ct_vec));
    ctx.frame_of_token = frame_map(grid);
    return ctx;
}

void Conditioner::collect_params(const std::string& prefix, NamedParams& out) const {
    out.add(prefix + ".w_t", w_t);
    out.add(prefix + ".b_t", b_t);
    out.add(prefix + ".w_c", w_c);
}

void ReferenceModel::init(Rng& rng, const RefModelConfig& config) {
    cfg = config;
    conditioner.init(rng, cfg.cond_dim, cfg.c_text, cfg.dtype);
    init_linear(rng, w_in, b_in, cfg.c_latent, cfg.c_model, cfg.dtype);
    init_linear(rng, w_out, b_out, cfg.c_model, cfg.c_latent, cfg.dtype);
    ln_f.init(cfg.c_model, cfg.dtype);
    blocks.resize(cfg.blocks);
    for (auto& blk : blocks) {
        blk.init(rng, cfg.c_model, cfg.cond_dim, cfg.heads, cfg.head_dim, cfg.rope, cfg.mlp_ratio,
                 cfg.dtype);
    }
}

Tensor ReferenceModel::forward(const Tensor& x_latent, const std::vector<double>& t_frames,
                               const Tensor& c_text, const Mode& mode,
                               const TokenGrid* grid_override) const {
    const TokenGrid grid = grid_override ? *grid_override : cfg.grid;
    if (x_latent.rank() != 2 || x_latent.dim(0) != grid.len() || x_latent.dim(1) != cfg.c_latent) {
        throw std::invalid_argument("ReferenceModel: input must be [T*H*W, c_latent]");
    }
    CondCtx cond = conditioner.build(t_frames, c_text, grid);
    Tensor h = linear(x_latent, w_in, b_in);
    for (const auto& blk : blocks) h = blk.forward(h, grid, cond, mode);
    h = layer_norm(h, ln_f.gamma, ln_f.beta);
    return linear(h, w_out, b_out);
}

NamedParams ReferenceModel::params() {
    NamedParams out;
    conditioner.collect_params("cond", out);
    out.add("in.w", w_in);
    out.add("in.b", b_in);
    out.add("out.w", w_out);
    out.add("out.b", b_out);
    ln_f.collect_params("ln_f", out);
    for (size_t i = 0; i < blocks.size(); ++i) {
        blocks[i].collect_params("blocks." + std::to_string(i), out);
    }
    return out;
}

}  // namespace s2dit
