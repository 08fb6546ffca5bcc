#include "s2dit/sandwich.hpp"

#include <algorithm>
#include <cmath>

#include <json.hpp>

#include "s2dit/io.hpp"

namespace s2dit {

using namespace ops;
using nlohmann::json;

// ---------------------------------------------------------------------------
// Allocation
// ---------------------------------------------------------------------------

void BudgetProfile::validate() const {
    if (ell_lcha <= 0 || ell_ssa <= 0 || mem_lcha <= 0 || mem_ssa <= 0) {
        throw std::invalid_argument("BudgetProfile: per-block costs must be positive");
    }
    if (total_blocks < 2) throw std::invalid_argument("BudgetProfile: K must be >= 2");
    if (latency_budget <= 0 || memory_budget <= 0) {
        throw std::invalid_argument("BudgetProfile: budgets must be positive");
    }
}

Allocation allocate_blocks(const BudgetProfile& p) {
    p.validate();
    bool found = false;
    Allocation best;
    // Scanning from all-LCHA down makes strict improvement break distance
    // ties toward larger N_LCHA.
    for (size_t n = p.total_blocks + 1; n-- > 0;) {
        const size_t n_ssa = p.total_blocks - n;
        const double lat = p.ell_lcha * static_cast<double>(n) + p.ell_ssa * static_cast<double>(n_ssa);
        const double mem = p.mem_lcha * static_cast<double>(n) + p.mem_ssa * static_cast<double>(n_ssa);
        if (lat > p.latency_budget || mem > p.memory_budget) continue;
        const double dl = 1.0 - lat / p.latency_budget;
        const double dm = 1.0 - mem / p.memory_budget;
        const double dist = std::sqrt(dl * dl + dm * dm);
        if (!found || dist < best.distance) {
            found = true;
            best = Allocation{n, n_ssa, lat, mem, dist};
        }
    }
    if (!found) {
        const double lat_min =
            std::min(p.ell_lcha, p.ell_ssa) * static_cast<double>(p.total_blocks);
        const double mem_min =
            std::min(p.mem_lcha, p.mem_ssa) * static_cast<double>(p.total_blocks);
        std::string which = lat_min > p.latency_budget
                                ? "latency (min " + std::to_string(lat_min) + " ms > budget " +
                                      std::to_string(p.latency_budget) + " ms)"
                                : "memory (min " + std::to_string(mem_min) + " MB > budget " +
                                      std::to_string(p.memory_budget) + " MB)";
        throw InfeasibleBudgetError("allocate_blocks: no feasible split; violating constraint: " + which);
    }
    return best;
}

std::pair<int, int> triggers(int m_prev, int m_cur) {
    if ((m_prev != 0 && m_prev != 1) || (m_cur != 0 && m_cur != 1)) {
        throw std::invalid_argument("triggers: bits must be 0 or 1");
    }
    return {std::max(m_cur - m_prev, 0), std::max(m_prev - m_cur, 0)};
}

uint64_t binomial(size_t n, size_t k) {
    if (k > n) return 0;
    k = std::min(k, n - k);
    uint64_t r = 1;
    for (size_t i = 1; i <= k; ++i) {
        r = r * (n - k + i) / i;
    }
    return r;
}

std::vector<std::vector<int>> enumerate_masks(size_t m_groups, size_t k_interior) {
    if (m_groups < 2) throw std::invalid_argument("enumerate_masks: need at least 2 groups");
    const size_t interior = m_groups - 2;
    if (k_interior > interior) {
        throw std::invalid_argument("enumerate_masks: k out of range (interior = " +
                                    std::to_string(interior) + ")");
    }
    std::vector<std::vector<int>> out;
    std::vector<int> mask(m_groups, 0);
    mask.front() = mask.back() = 1;
    // Lexicographic over the full mask string == lexicographic over interior.
    std::function<void(size_t, size_t)> rec = [&](size_t pos, size_t placed) {
        if (pos == interior) {
            if (placed == k_interior) out.push_back(mask);
            return;
        }
        // 0 first keeps lexicographic order.
        if (interior - pos - 1 + placed >= k_interior) {
            mask[1 + pos] = 0;
            rec(pos + 1, placed);
        }
        if (placed < k_interior) {
            mask[1 + pos] = 1;
            rec(pos + 1, placed + 1);
            mask[1 + pos] = 0;
        }
    };
    rec(0, 0);
    return out;
}

bool mask_legal(const std::vector<int>& mask, size_t k_interior) {
    if (mask.size() < 2 || mask.front() != 1 || mask.back() != 1) return false;
    size_t ones = 0;
    for (size_t i = 1; i + 1 < mask.size(); ++i) {
        if (mask[i] != 0 && mask[i] != 1) return false;
        ones += static_cast<size_t>(mask[i]);
    }
    return ones == k_interior;
}

// ---------------------------------------------------------------------------
// Gumbel-ST sampling
// ---------------------------------------------------------------------------

GumbelSample gumbel_ste_sample(const Tensor& logits, double temperature, Rng& rng) {
    if (logits.numel() != 2) throw std::invalid_argument("gumbel_ste_sample: logits must be [2]");
    if (temperature <= 0) throw std::invalid_argument("gumbel_ste_sample: temperature must be > 0");
    const double g0 = rng.gumbel();
    const double g1 = rng.gumbel();
    Tensor l0 = slice_lastdim(logits, 0, 1);
    Tensor l1 = slice_lastdim(logits, 1, 1);
    Tensor noise = Tensor::scalar(g1 - g0, logits.dtype);
    Tensor diff = scale(add(sub(l1, l0), noise), 1.0 / temperature);
    Tensor p = sigmoid(diff);
    return GumbelSample{ste_hard(p), p.at(0)};
}

// ---------------------------------------------------------------------------
// Model
// ---------------------------------------------------------------------------

namespace {

Tensor linear(const Tensor& x, const Tensor& w, const Tensor& b) {
    return add_rowwise(matmul(x, w), b);
}

void init_linear(Rng& rng, Tensor& w, Tensor& b, size_t in, size_t out, Dtype dt) {
    w = rng.randn({in, out}, dt, 1.0 / std::sqrt(static_cast<double>(in)));
    w.set_requires_grad(true);
    b = Tensor::zeros({out}, dt);
    b.set_requires_grad(true);
}

// (1-c)*a + c*b; constant coefficients select a side without extra ops so the
// hard path stays tensor-identical to a hand-wired composition.
Tensor blend(const Tensor& a, const Tensor& b, const SoftBit& c) {
    if (c.is_const) return c.value >= 0.5 ? b : a;
    Tensor one = Tensor::scalar(1.0, c.t.dtype);
    return add(mul_scalar_t(a, sub(one, c.t)), mul_scalar_t(b, c.t));
}

SoftBit bit_relu_diff(const SoftBit& a, const SoftBit& b) {
    // max(a - b, 0) on routing bits.
    if (a.is_const && b.is_const) return SoftBit::constant(std::max(a.value - b.value, 0.0));
    Tensor at = a.is_const ? Tensor::scalar(a.value) : a.t;
    Tensor bt = b.is_const ? Tensor::scalar(b.value) : b.t;
    return SoftBit::tensor(relu(sub(at, bt)));
}

}  // namespace

void SandwichModel::init(Rng& rng, const SandwichConfig& config, std::vector<int> m) {
    cfg = config;
    if (m.empty()) m.assign(cfg.groups, 1);
    if (m.size() != cfg.groups || m.front() != 1 || m.back() != 1) {
        throw std::invalid_argument("SandwichModel: mask must cover all groups with endpoints 1");
    }
    mask = std::move(m);
    conditioner.init(rng, cfg.cond_dim, cfg.c_text, cfg.dtype);
    init_linear(rng, w_in, b_in, cfg.c_latent, cfg.c_model, cfg.dtype);
    init_linear(rng, w_out, b_out, cfg.c_model, cfg.c_latent, cfg.dtype);
    ln_f.init(cfg.c_model, cfg.dtype);
    groups.resize(cfg.groups);
    for (auto& g : groups) {
        g.f_l.resize(cfg.blocks_per_group);
        for (auto& blk : g.f_l) blk.init(rng, cfg.c_model, cfg.cond_dim, cfg.lcha, cfg.mlp_ratio, cfg.dtype);
        g.f_s.resize(cfg.blocks_per_group);
        for (auto& blk : g.f_s) {
            blk.init(rng, cfg.c_low(), cfg.cond_dim, cfg.ssa_heads, cfg.ssa_head_dim, cfg.rope,
                     cfg.mlp_ratio, cfg.dtype);
        }
        g.down.init(rng, cfg.c_model, cfg.c_low(), cfg.stride, cfg.dtype);
        g.up.init(rng, cfg.c_model, cfg.c_low(), cfg.stride, cfg.dtype);
    }
}

std::vector<SoftBit> SandwichModel::hard_bits() const {
    std::vector<SoftBit> bits;
    bits.reserve(mask.size());
    for (int b : mask) bits.push_back(SoftBit::constant(static_cast<double>(b)));
    return bits;
}

Tensor SandwichModel::route_tokens(const Tensor& tokens, const TokenGrid& grid, const CondCtx& cond,
                                   const Mode& mode, const std::vector<SoftBit>& bits,
                                   RoutingTrace* trace) const {
    if (bits.size() != groups.size()) {
        throw std::invalid_argument("route_tokens: one routing bit per group required");
    }
    const TokenGrid grid_low = grid.strided(cfg.stride);
    CondCtx cond_low{cond.cond, frame_map(grid_low)};

    Tensor y_l = tokens;
    Tensor y_s;      // lazily down_1(tokens) the first time a blend reads it
    Tensor skip_s;   // zeros until the first high->low switch
    SoftBit m_prev = SoftBit::constant(1.0);

    auto y_s_or_init = [&]() -> Tensor {
        if (!y_s.defined()) y_s = groups.front().down.forward(tokens, grid);
        return y_s;
    };
    auto skip_or_zero = [&]() -> Tensor {
        if (!skip_s.defined()) return Tensor::zeros(y_l.shape, y_l.dtype);
        return skip_s;
    };

    for (size_t n = 0; n < groups.size(); ++n) {
        const SandwichGroup& g = groups[n];
        const SoftBit& m = bits[n];
        SoftBit u = bit_relu_diff(m, m_prev);
        SoftBit d = bit_relu_diff(m_prev, m);

        const bool run_l = !(m.is_const && m.value < 0.5);
        const bool run_s = !(m.is_const && m.value >= 0.5);

        Tensor ty_l, ty_s;
        if (run_l) {
            Tensor x_l = (u.is_const && u.value < 0.5)
                             ? y_l
                             : blend(y_l, add(g.up.forward(y_s_or_init(), grid_low), skip_or_zero()), u);
            for (const auto& blk : g.f_l) x_l = blk.forward(x_l, grid, cond, mode);
            ty_l = x_l;
        }
        if (run_s) {
            Tensor x_s = (d.is_const && d.value < 0.5) ? y_s_or_init()
                                                       : blend(y_s_or_init(), g.down.forward(y_l, grid), d);
            for (const auto& blk : g.f_s) x_s = blk.forward(x_s, grid_low, cond_low, mode);
            ty_s = x_s;
        }

        // Long-skip buffer: captures the pre-switch high-res stream on
        // high->low switches only.
        bool skip_changed = false;
        if (d.is_const) {
            if (d.value >= 0.5) {
                skip_s = y_l;
                skip_changed = true;
            }
        } else {
            skip_s = blend(skip_or_zero(), y_l, d);
            skip_changed = true;  // soft path rewrites the buffer tensor
        }

        if (trace) {
            trace->m.push_back(static_cast<int>(m.forward_value()));
            trace->u.push_back(static_cast<int>(u.forward_value()));
            trace->d.push_back(static_cast<int>(d.forward_value()));
            trace->skip_written.push_back(skip_changed ? 1 : 0);
            trace->skip.push_back(skip_s.defined() ? skip_s.detached_copy()
                                                   : Tensor::zeros(y_l.shape, y_l.dtype));
        }

        if (run_l && run_s) {
            Tensor new_l = blend(y_l, ty_l, m);
            Tensor new_s = blend(ty_s, y_s_or_init(), m);
            y_l = new_l;
            y_s = new_s;
        } else if (run_l) {
            y_l = ty_l;
        } else {
            y_s = ty_s;
        }
        m_prev = m;
    }

    const SoftBit& m_last = bits.back();
    if (m_last.is_const) {
        return m_last.value >= 0.5 ? y_l : groups.back().up.forward(y_s_or_init(), grid_low);
    }
    return blend(groups.back().up.forward(y_s_or_init(), grid_low), y_l, m_last);
}

Tensor SandwichModel::forward(const Tensor& x_latent, const std::vector<double>& t_frames,
                              const Tensor& c_text, const Mode& mode, const TokenGrid* grid_override,
                              RoutingTrace* trace) const {
    const TokenGrid grid = grid_override ? *grid_override : cfg.grid;
    if (x_latent.rank() != 2 || x_latent.dim(0) != grid.len() || x_latent.dim(1) != cfg.c_latent) {
        throw std::invalid_argument("SandwichModel: input must be [T*H*W, c_latent]");
    }
    CondCtx cond = conditioner.build(t_frames, c_text, grid);
    Tensor h = linear(x_latent, w_in, b_in);
    h = route_tokens(h, grid, cond, mode, hard_bits(), trace);
    h = layer_norm(h, ln_f.gamma, ln_f.beta);
    return linear(h, w_out, b_out);
}

Tensor routed_forward(const SandwichModel& model, const Tensor& tokens, const TokenGrid& grid,
                      const CondCtx& cond, const Mode& mode, bool hard, double temperature, Rng* rng,
                      const std::vector<Tensor>* logits, RoutingTrace* trace) {
    if (hard) return model.route_tokens(tokens, grid, cond, mode, model.hard_bits(), trace);
    if (rng == nullptr || logits == nullptr || logits->size() != model.groups.size() - 2) {
        throw std::invalid_argument("routed_forward: soft mode needs rng and interior logits");
    }
    std::vector<SoftBit> bits;
    bits.push_back(SoftBit::constant(1.0));
    for (const auto& lg : *logits) {
        bits.push_back(SoftBit::tensor(gumbel_ste_sample(lg, temperature, *rng).m));
    }
    bits.push_back(SoftBit::constant(1.0));
    return model.route_tokens(tokens, grid, cond, mode, bits, trace);
}

namespace {

size_t copy_matching(Tensor& dst, const Tensor& src) {
    if (!dst.defined() || !src.defined() || dst.shape != src.shape) return 0;
    *dst.data = *src.data;
    return 1;
}

}  // namespace

size_t SandwichModel::inherit_from(ReferenceModel& teacher) {
    size_t copied = 0;
    NamedParams mine = params();
    NamedParams theirs = teacher.params();
    copied += copy_matching(w_in, teacher.w_in);
    copied += copy_matching(b_in, teacher.b_in);
    copied += copy_matching(w_out, teacher.w_out);
    copied += copy_matching(b_out, teacher.b_out);
    copied += copy_matching(ln_f.gamma, teacher.ln_f.gamma);
    copied += copy_matching(ln_f.beta, teacher.ln_f.beta);
    copied += copy_matching(conditioner.w_t, teacher.conditioner.w_t);
    copied += copy_matching(conditioner.b_t, teacher.conditioner.b_t);
    copied += copy_matching(conditioner.w_c, teacher.conditioner.w_c);
    for (size_t g = 0; g < groups.size(); ++g) {
        for (size_t i = 0; i < groups[g].f_l.size(); ++i) {
            const size_t global = g * cfg.blocks_per_group + i;
            if (global >= teacher.blocks.size()) continue;
            AttnBlock& tb = teacher.blocks[global];
            LchaBlock& sb = groups[g].f_l[i];
            copied += copy_matching(sb.ln1.gamma, tb.ln1.gamma);
            copied += copy_matching(sb.ln1.beta, tb.ln1.beta);
            copied += copy_matching(sb.ln2.gamma, tb.ln2.gamma);
            copied += copy_matching(sb.ln2.beta, tb.ln2.beta);
            copied += copy_matching(sb.ada.w, tb.ada.w);
            copied += copy_matching(sb.ada.b, tb.ada.b);
            copied += copy_matching(sb.wq, tb.attn.wq);
            copied += copy_matching(sb.bq, tb.attn.bq);
            copied += copy_matching(sb.wk, tb.attn.wk);
            copied += copy_matching(sb.bk, tb.attn.bk);
            copied += copy_matching(sb.wv, tb.attn.wv);
            copied += copy_matching(sb.bv, tb.attn.bv);
            copied += copy_matching(sb.wo, tb.attn.wo);
            copied += copy_matching(sb.bo, tb.attn.bo);
            copied += copy_matching(sb.mlp.w1, tb.mlp.w1);
            copied += copy_matching(sb.mlp.b1, tb.mlp.b1);
            copied += copy_matching(sb.mlp.w2, tb.mlp.w2);
            copied += copy_matching(sb.mlp.b2, tb.mlp.b2);
        }
    }
    return copied;
}

NamedParams SandwichModel::params() {
    NamedParams out;
    conditioner.collect_params("cond", out);
    out.add("in.w", w_in);
    out.add("in.b", b_in);
    out.add("out.w", w_out);
    out.add("out.b", b_out);
    ln_f.collect_params("ln_f", out);
    for (size_t g = 0; g < groups.size(); ++g) {
        const std::string gp = "groups." + std::to_string(g);
        for (size_t i = 0; i < groups[g].f_l.size(); ++i)
            groups[g].f_l[i].collect_params(gp + ".lcha." + std::to_string(i), out);
        for (size_t i = 0; i < groups[g].f_s.size(); ++i)
            groups[g].f_s[i].collect_params(gp + ".ssa." + std::to_string(i), out);
        groups[g].down.collect_params(gp + ".down", out);
        groups[g].up.collect_params(gp + ".up", out);
    }
    return out;
}

Tensor self_distill_loss(const Tensor& student_out, const Tensor& teacher_out) {
    return mse(student_out, teacher_out);
}

// ---------------------------------------------------------------------------
// Search
// ---------------------------------------------------------------------------

std::vector<int> harden_mask(const std::vector<int>& bits, size_t m_groups, size_t k_interior) {
    auto candidates = enumerate_masks(m_groups, k_interior);
    std::vector<int> full(m_groups, 1);
    for (size_t i = 1; i + 1 < m_groups; ++i) full[i] = bits[i];
    size_t best_dist = m_groups + 1;
    const std::vector<int>* best = nullptr;
    for (const auto& cand : candidates) {
        size_t dist = 0;
        for (size_t i = 1; i + 1 < m_groups; ++i) dist += static_cast<size_t>(cand[i] != full[i]);
        if (best == nullptr || dist < best_dist) {
            best = &cand;
            best_dist = dist;
        }
    }
    return *best;
}

SearchResult search(SandwichModel& student, size_t k_interior, const TeacherFn& teacher,
                    const SearchSchedule& sched) {
    const size_t m_groups = student.cfg.groups;
    const size_t interior = m_groups - 2;
    if (k_interior > interior) throw std::invalid_argument("search: k out of range");

    SearchResult res;
    if (binomial(interior, k_interior) == 1) {
        res.mask = enumerate_masks(m_groups, k_interior).front();
        student.mask = res.mask;
        res.trained = false;
        return res;
    }

    Rng rng(sched.seed);
    std::vector<Tensor> logits(interior);
    for (auto& lg : logits) {
        lg = Tensor::zeros({2}, Dtype::f64);
        lg.set_requires_grad(true);
    }
    std::vector<Tensor> opt_params = logits;
    if (sched.train_weights) {
        NamedParams mp = student.params();
        for (auto& [name, t] : mp.items) opt_params.push_back(t);
    }
    Adam opt(opt_params, sched.lr);

    const TokenGrid grid = student.cfg.grid;
    for (size_t step = 0; step < sched.steps; ++step) {
        const double frac =
            sched.steps > 1 ? static_cast<double>(step) / static_cast<double>(sched.steps - 1) : 0.0;
        const double temp = sched.temp_start * std::pow(sched.temp_end / sched.temp_start, frac);

        opt.zero_grad();
        Tensor loss;
        for (size_t b = 0; b < sched.batch; ++b) {
            Tensor x = rng.randn({grid.len(), student.cfg.c_latent});
            std::vector<double> t_frames(grid.t, rng.uniform());
            Tensor c_text = rng.randn({student.cfg.c_text});
            Tensor target;
            {
                NoGradGuard ng;
                target = teacher(x, t_frames, c_text);
            }
            std::vector<SoftBit> bits;
            bits.push_back(SoftBit::constant(1.0));
            for (auto& lg : logits)
                bits.push_back(SoftBit::tensor(gumbel_ste_sample(lg, temp, rng).m));
            bits.push_back(SoftBit::constant(1.0));

            CondCtx cond = student.conditioner.build(t_frames, c_text, grid);
            Tensor h = linear(x, student.w_in, student.b_in);
            h = student.route_tokens(h, grid, cond, Mode{}, bits);
            h = layer_norm(h, student.ln_f.gamma, student.ln_f.beta);
            Tensor out = linear(h, student.w_out, student.b_out);
            Tensor sample_loss = self_distill_loss(out, target);
            loss = loss.defined() ? add(loss, sample_loss) : sample_loss;
        }
        loss = scale(loss, 1.0 / static_cast<double>(sched.batch));
        if (!std::isfinite(loss.at(0))) throw std::runtime_error("search: non-finite loss");
        backward(loss);
        opt.step();
        res.loss_curve.push_back(loss.at(0));
    }

    std::vector<int> bits_full(m_groups, 1);
    res.interior_probs.resize(interior);
    for (size_t i = 0; i < interior; ++i) {
        const double p = 1.0 / (1.0 + std::exp(-(logits[i].at(1) - logits[i].at(0))));
        res.interior_probs[i] = p;
        bits_full[i + 1] = p > 0.5 ? 1 : 0;
    }
    res.mask = harden_mask(bits_full, m_groups, k_interior);
    res.final_loss = res.loss_curve.empty() ? 0.0 : res.loss_curve.back();
    res.trained = true;
    student.mask = res.mask;
    return res;
}

// ---------------------------------------------------------------------------
// Layout file
// ---------------------------------------------------------------------------

namespace {

json config_to_json(const SandwichConfig& c) {
    json j;
    j["grid"] = {{"t", c.grid.t}, {"h", c.grid.h}, {"w", c.grid.w}};
    j["c_latent"] = c.c_latent;
    j["c_model"] = c.c_model;
    j["cond_dim"] = c.cond_dim;
    j["c_text"] = c.c_text;
    j["mlp_ratio"] = c.mlp_ratio;
    j["groups"] = c.groups;
    j["blocks_per_group"] = c.blocks_per_group;
    j["stride"] = c.stride;
    j["rope"] = c.rope;
    j["dtype"] = dtype_name(c.dtype);
    j["lcha"] = {{"heads", c.lcha.heads},       {"head_dim", c.lcha.head_dim},
                 {"kernel_dim", c.lcha.dk()},   {"kt", c.lcha.kt},
                 {"kh", c.lcha.kh},             {"kw", c.lcha.kw},
                 {"alpha_init", c.lcha.alpha_init}, {"qk_norm", c.lcha.qk_norm},
                 {"rope", c.lcha.rope},         {"eps", c.lcha.eps}};
    j["ssa"] = {{"heads", c.ssa_heads}, {"head_dim", c.ssa_head_dim}};
    return j;
}

SandwichConfig config_from_json(const json& j) {
    SandwichConfig c;
    c.grid = TokenGrid{j.at("grid").at("t"), j.at("grid").at("h"), j.at("grid").at("w")};
    c.c_latent = j.at("c_latent");
    c.c_model = j.at("c_model");
    c.cond_dim = j.at("cond_dim");
    c.c_text = j.at("c_text");
    c.mlp_ratio = j.at("mlp_ratio");
    c.groups = j.at("groups");
    c.blocks_per_group = j.at("blocks_per_group");
    c.stride = j.at("stride");
    c.rope = j.at("rope");
    c.dtype = dtype_from_name(j.at("dtype"));
    const auto& l = j.at("lcha");
    c.lcha.heads = l.at("heads");
    c.lcha.head_dim = l.at("head_dim");
    c.lcha.kernel_dim = l.at("kernel_dim");
    c.lcha.kt = l.at("kt");
    c.lcha.kh = l.at("kh");
    c.lcha.kw = l.at("kw");
    c.lcha.alpha_init = l.at("alpha_init");
    c.lcha.qk_norm = l.at("qk_norm");
    c.lcha.rope = l.at("rope");
    c.lcha.eps = l.at("eps");
    c.ssa_heads = j.at("ssa").at("heads");
    c.ssa_head_dim = j.at("ssa").at("head_dim");
    return c;
}

}  // namespace

std::string SandwichLayout::to_json() const {
    json j;
    j["format"] = "s2dit-layout";
    j["config"] = config_to_json(cfg);
    j["mask"] = mask;
    if (has_budget) {
        j["budget"] = {{"ell_lcha", budget.ell_lcha},     {"ell_ssa", budget.ell_ssa},
                       {"mem_lcha", budget.mem_lcha},     {"mem_ssa", budget.mem_ssa},
                       {"total_blocks", budget.total_blocks},
                       {"latency_budget", budget.latency_budget},
                       {"memory_budget", budget.memory_budget}};
    }
    if (has_alloc) {
        j["achieved"] = {{"n_lcha", achieved.n_lcha},
                         {"n_ssa", achieved.n_ssa},
                         {"latency_ms", achieved.latency_ms},
                         {"memory_mb", achieved.memory_mb},
                         {"distance", achieved.distance}};
    }
    j["search"] = {{"seed", seed}, {"steps", search_steps}, {"final_loss", final_loss}};
    return j.dump(2) + "\n";
}

SandwichLayout SandwichLayout::from_json(const std::string& text) {
    json j = json::parse(text);
    if (!j.contains("format") || j.at("format") != "s2dit-layout") {
        throw std::runtime_error("layout file: bad or missing format tag");
    }
    SandwichLayout layout;
    layout.cfg = config_from_json(j.at("config"));
    layout.mask = j.at("mask").get<std::vector<int>>();
    if (j.contains("budget")) {
        const auto& b = j.at("budget");
        layout.has_budget = true;
        layout.budget.ell_lcha = b.at("ell_lcha");
        layout.budget.ell_ssa = b.at("ell_ssa");
        layout.budget.mem_lcha = b.at("mem_lcha");
        layout.budget.mem_ssa = b.at("mem_ssa");
        layout.budget.total_blocks = b.at("total_blocks");
        layout.budget.latency_budget = b.at("latency_budget");
        layout.budget.memory_budget = b.at("memory_budget");
    }
    if (j.contains("achieved")) {
        const auto& a = j.at("achieved");
        layout.has_alloc = true;
        layout.achieved.n_lcha = a.at("n_lcha");
        layout.achieved.n_ssa = a.at("n_ssa");
        layout.achieved.latency_ms = a.at("latency_ms");
        layout.achieved.memory_mb = a.at("memory_mb");
        layout.achieved.distance = a.at("distance");
    }
    if (j.contains("search")) {
        layout.seed = j.at("search").at("seed");
        layout.search_steps = j.at("search").at("steps");
        layout.final_loss = j.at("search").at("final_loss");
    }
    return layout;
}

uint64_t SandwichLayout::hash() const { return io::fnv1a_str(to_json()); }

std::string sandwich_config_to_json_text(const SandwichConfig& cfg) {
    return config_to_json(cfg).dump();
}

SandwichConfig sandwich_config_from_json_text(const std::string& text) {
    return config_from_json(json::parse(text));
}

}  // namespace s2dit
