#define DOCTEST_CONFIG_IMPLEMENT_WITH_MAIN
#include <doctest.h>

#include <cmath>

#include "s2dit/sandwich.hpp"

using namespace s2dit;
using namespace s2dit::ops;

namespace {

SandwichConfig tiny_config(size_t groups, size_t blocks_per_group = 1) {
    SandwichConfig mc;
    mc.grid = TokenGrid{1, 4, 4};
    mc.c_latent = 3;
    mc.c_model = 4;
    mc.cond_dim = 4;
    mc.c_text = 3;
    mc.mlp_ratio = 2;
    mc.groups = groups;
    mc.blocks_per_group = blocks_per_group;
    mc.stride = 2;
    mc.lcha.heads = 1;
    mc.lcha.head_dim = 4;
    mc.ssa_heads = 1;
    mc.ssa_head_dim = 8;
    return mc;
}

CondCtx cond_for(const SandwichModel& m, const TokenGrid& grid, double t, const Tensor& c_text) {
    return m.conditioner.build(std::vector<double>(grid.t, t), c_text, grid);
}

Tensor run_lcha_chain(const SandwichGroup& g, Tensor x, const TokenGrid& grid, const CondCtx& cond) {
    for (const auto& blk : g.f_l) x = blk.forward(x, grid, cond, Mode{});
    return x;
}

Tensor run_ssa_chain(const SandwichGroup& g, Tensor x, const TokenGrid& grid_low,
                     const CondCtx& cond_low) {
    for (const auto& blk : g.f_s) x = blk.forward(x, grid_low, cond_low, Mode{});
    return x;
}

bool bit_equal(const Tensor& a, const Tensor& b) {
    if (a.shape != b.shape) return false;
    for (size_t i = 0; i < a.numel(); ++i)
        if (a.at(i) != b.at(i)) return false;
    return true;
}

// Exhaustive closest-point scan, ascending with >= so ties keep the larger
// LCHA count seen last... ascending with strictly-better keeps the first;
// use >= on equal distance to prefer the larger n reached later.
bool alloc_oracle(const BudgetProfile& p, Allocation& best) {
    bool found = false;
    for (size_t n = 0; n <= p.total_blocks; ++n) {
        const size_t ns = p.total_blocks - n;
        const double lat = p.ell_lcha * n + p.ell_ssa * ns;
        const double mem = p.mem_lcha * n + p.mem_ssa * ns;
        if (lat > p.latency_budget || mem > p.memory_budget) continue;
        const double dl = 1.0 - lat / p.latency_budget;
        const double dm = 1.0 - mem / p.memory_budget;
        const double dist = std::sqrt(dl * dl + dm * dm);
        if (!found || dist < best.distance || (dist == best.distance && n > best.n_lcha)) {
            best = Allocation{n, ns, lat, mem, dist};
            found = true;
        }
    }
    return found;
}

}  // namespace

// ---------------------------------------------------------------------------
// Budget allocation
// ---------------------------------------------------------------------------

TEST_CASE("allocate_blocks: spec examples") {
    BudgetProfile p{9, 3, 40, 20, 30, 10000, 10000};
    Allocation a = allocate_blocks(p);
    CHECK(a.n_lcha == 30);
    CHECK(a.n_ssa == 0);

    BudgetProfile p2{9, 3, 40, 20, 30, 150, 900};
    Allocation a2 = allocate_blocks(p2);
    Allocation want;
    REQUIRE(alloc_oracle(p2, want));
    CHECK(a2.n_lcha == want.n_lcha);
    CHECK(a2.n_ssa == want.n_ssa);

    BudgetProfile p3{9, 3, 40, 20, 30, 80, 10000};
    CHECK_THROWS_WITH_AS(allocate_blocks(p3), doctest::Contains("latency"), InfeasibleBudgetError);
}

TEST_CASE("allocate_blocks equals exhaustive scan on 1000 random profiles") {
    Rng rng(314);
    size_t infeasible_seen = 0;
    for (int trial = 0; trial < 1000; ++trial) {
        BudgetProfile p;
        p.ell_lcha = 0.5 + 9.5 * rng.uniform();
        p.ell_ssa = 0.5 + 9.5 * rng.uniform();
        p.mem_lcha = 0.5 + 9.5 * rng.uniform();
        p.mem_ssa = 0.5 + 9.5 * rng.uniform();
        p.total_blocks = 2 + rng.index(38);
        p.latency_budget = 5.0 + 300.0 * rng.uniform();
        p.memory_budget = 5.0 + 300.0 * rng.uniform();
        Allocation want;
        const bool feasible = alloc_oracle(p, want);
        if (!feasible) {
            ++infeasible_seen;
            CHECK_THROWS_AS(allocate_blocks(p), InfeasibleBudgetError);
            continue;
        }
        Allocation got = allocate_blocks(p);
        CHECK(got.n_lcha == want.n_lcha);
        CHECK(got.n_ssa == want.n_ssa);
    }
    CHECK(infeasible_seen > 0);  // the sweep must cover the error path too
}

TEST_CASE("triggers truth table") {
    CHECK(triggers(0, 1) == std::pair<int, int>{1, 0});
    CHECK(triggers(1, 0) == std::pair<int, int>{0, 1});
    CHECK(triggers(1, 1) == std::pair<int, int>{0, 0});
    CHECK(triggers(0, 0) == std::pair<int, int>{0, 0});
    CHECK_THROWS_AS(triggers(2, 0), std::invalid_argument);
}

// ---------------------------------------------------------------------------
// Mask enumeration
// ---------------------------------------------------------------------------

TEST_CASE("enumerate_masks: counts, membership, ordering") {
    auto m62 = enumerate_masks(6, 2);
    CHECK(m62.size() == 6);  // C(4,2)
    CHECK(binomial(4, 2) == 6);

    auto m30 = enumerate_masks(3, 0);
    REQUIRE(m30.size() == 1);
    CHECK(m30[0] == std::vector<int>{1, 0, 1});

    CHECK_THROWS_AS(enumerate_masks(6, 5), std::invalid_argument);

    // Brute-force filter of all 2^6 masks.
    std::vector<std::vector<int>> brute;
    for (int bits = 0; bits < 64; ++bits) {
        std::vector<int> mask(6);
        for (int i = 0; i < 6; ++i) mask[i] = (bits >> (5 - i)) & 1;
        if (mask_legal(mask, 2)) brute.push_back(mask);
    }
    REQUIRE(brute.size() == m62.size());
    // Same membership; enumerate_masks must be lexicographically sorted.
    for (size_t i = 0; i < m62.size(); ++i) CHECK(std::count(brute.begin(), brute.end(), m62[i]) == 1);
    for (size_t i = 1; i < m62.size(); ++i) CHECK(m62[i - 1] < m62[i]);

    // Full law for every M <= 12.
    for (size_t m = 2; m <= 12; ++m)
        for (size_t k = 0; k + 2 <= m; ++k) CHECK(enumerate_masks(m, k).size() == binomial(m - 2, k));
}

// ---------------------------------------------------------------------------
// Routed forward vs hand-wired compositions
// ---------------------------------------------------------------------------

TEST_CASE("routed_forward matches hand-wired compositions tensor-exactly") {
    const std::vector<std::vector<int>> masks = {
        {1, 1, 1}, {1, 0, 1}, {1, 0, 0, 1}, {1, 1, 0, 1}};
    for (const auto& mask : masks) {
        CAPTURE(mask);
        SandwichConfig mc = tiny_config(mask.size());
        Rng rng(55);
        SandwichModel model;
        model.init(rng, mc, mask);
        const TokenGrid grid = mc.grid;
        const TokenGrid low = grid.strided(mc.stride);
        Tensor c_text = Rng(56).randn({mc.c_text});
        CondCtx cond = cond_for(model, grid, 0.3, c_text);
        CondCtx cond_low{cond.cond, frame_map(low)};
        Tensor x = Rng(57).randn({grid.len(), mc.c_model});

        RoutingTrace trace;
        Tensor routed = model.route_tokens(x, grid, cond, Mode{}, model.hard_bits(), &trace);

        // Hand-wired composition with the same blocks.
        Tensor y_l = x;
        Tensor y_s;
        Tensor skip;
        int prev = 1;
        std::vector<Tensor> expected_skip;
        for (size_t n = 0; n < mask.size(); ++n) {
            auto [u, d] = triggers(prev, mask[n]);
            CHECK(trace.u[n] == u);
            CHECK(trace.d[n] == d);
            if (mask[n] == 1) {
                Tensor in = (u == 1) ? add(model.groups[n].up.forward(y_s, low), skip) : y_l;
                y_l = run_lcha_chain(model.groups[n], in, grid, cond);
            } else {
                Tensor in = (d == 1) ? model.groups[n].down.forward(y_l, grid) : y_s;
                if (d == 1) skip = y_l;  // long-skip captures the pre-switch stream
                y_s = run_ssa_chain(model.groups[n], in, low, cond_low);
            }
            expected_skip.push_back(skip.defined() ? skip : Tensor::zeros(x.shape));
            prev = mask[n];
        }
        CHECK(bit_equal(routed, y_l));  // m_M = 1: merge reduces to the high-res stream
        for (size_t n = 0; n < mask.size(); ++n) {
            CHECK(bit_equal(trace.skip[n], expected_skip[n]));
            CHECK(trace.skip_written[n] == (trace.d[n] == 1 ? 1 : 0));
        }
    }
}

TEST_CASE("all-ones mask never touches the down/up projections") {
    SandwichConfig mc = tiny_config(3);
    Rng rng(60);
    SandwichModel model;
    model.init(rng, mc, {1, 1, 1});
    // Poison every down/up weight: any use would trip the finite check.
    for (auto& g : model.groups) {
        for (auto& v : *g.down.w.data) v = std::nan("");
        for (auto& v : *g.up.w.data) v = std::nan("");
    }
    Tensor c_text = Rng(61).randn({mc.c_text});
    CondCtx cond = cond_for(model, mc.grid, 0.5, c_text);
    Tensor x = Rng(62).randn({mc.grid.len(), mc.c_model});
    Tensor routed;
    CHECK_NOTHROW(routed = model.route_tokens(x, mc.grid, cond, Mode{}, model.hard_bits()));

    // And it equals the plain stack of LCHA groups.
    Tensor y = x;
    for (const auto& g : model.groups) y = run_lcha_chain(g, y, mc.grid, cond);
    CHECK(bit_equal(routed, y));
}

// ---------------------------------------------------------------------------
// Gumbel-ST sampling
// ---------------------------------------------------------------------------

TEST_CASE("gumbel_ste_sample: hard forward, calibrated frequency") {
    Rng rng(70);
    Tensor logits = Tensor::from({0.3, -0.2}, {2});
    for (double temp : {0.1, 1.0, 5.0}) {
        for (int i = 0; i < 50; ++i) {
            GumbelSample s = gumbel_ste_sample(logits, temp, rng);
            CHECK((s.m.at(0) == 0.0 || s.m.at(0) == 1.0));
        }
    }
    CHECK_THROWS_AS(gumbel_ste_sample(logits, 0.0, rng), std::invalid_argument);

    Tensor confident = Tensor::from({-10.0, 10.0}, {2});
    size_t ones = 0;
    const size_t draws = 10000;
    for (size_t i = 0; i < draws; ++i) {
        if (gumbel_ste_sample(confident, 1.0, rng).m.at(0) == 1.0) ++ones;
    }
    CHECK(static_cast<double>(ones) / static_cast<double>(draws) > 0.999);
}

TEST_CASE("gumbel STE gradient equals the soft-path finite difference") {
    Tensor logits = Tensor::from({0.4, -0.1}, {2});
    logits.set_requires_grad(true);
    const double temp = 0.7;
    const uint64_t noise_seed = 12345;

    // Analytic: downstream scalar 3*m + 1 through the straight-through path.
    Rng rng(noise_seed);
    GumbelSample s = gumbel_ste_sample(logits, temp, rng);
    Tensor loss = ops::add(ops::scale(s.m, 3.0), Tensor::scalar(1.0));
    backward(loss);
    const double g0 = (*logits.grad)[0];
    const double g1 = (*logits.grad)[1];

    // Finite differences on the soft relaxation with the same noise.
    auto soft_value = [&](double l0, double l1) {
        Rng r2(noise_seed);
        const double n0 = r2.gumbel(), n1 = r2.gumbel();
        const double p = 1.0 / (1.0 + std::exp(-((l1 - l0 + (n1 - n0)) / temp)));
        return 3.0 * p + 1.0;
    };
    const double h = 1e-6;
    const double fd0 = (soft_value(0.4 + h, -0.1) - soft_value(0.4 - h, -0.1)) / (2 * h);
    const double fd1 = (soft_value(0.4, -0.1 + h) - soft_value(0.4, -0.1 - h)) / (2 * h);
    CHECK(std::fabs(g0 - fd0) < 1e-3);
    CHECK(std::fabs(g1 - fd1) < 1e-3);
    CHECK(g1 != 0.0);  // gradients flow for finite logits
}

// ---------------------------------------------------------------------------
// Self-distillation loss
// ---------------------------------------------------------------------------

TEST_CASE("self_distill_loss") {
    Rng rng(80);
    Tensor a = rng.randn({4, 4});
    CHECK(self_distill_loss(a, a).at(0) == 0.0);
    Tensor b = ops::add(a, Tensor::full({4, 4}, 1.0));
    CHECK(self_distill_loss(a, b).at(0) == doctest::Approx(1.0));
    Tensor c = rng.randn({4, 4});
    double want = 0.0;
    for (size_t i = 0; i < 16; ++i) want += (a.at(i) - c.at(i)) * (a.at(i) - c.at(i));
    want /= 16.0;
    CHECK(self_distill_loss(a, c).at(0) == doctest::Approx(want).epsilon(1e-12));
    CHECK_THROWS(self_distill_loss(a, rng.randn({2, 2})));
}

// ---------------------------------------------------------------------------
// Search
// ---------------------------------------------------------------------------

TEST_CASE("harden_mask projects to the nearest legal mask") {
    CHECK(harden_mask({1, 1, 0, 0, 1}, 5, 1) == std::vector<int>{1, 1, 0, 0, 1});
    // Illegal popcount 2 -> nearest with k=1, lexicographically first on ties.
    CHECK(harden_mask({1, 1, 1, 0, 1}, 5, 1)[0] == 1);
    auto h = harden_mask({1, 1, 1, 0, 1}, 5, 1);
    CHECK(mask_legal(h, 1));
    // Hamming distance from {1,1,0} interior to a k=1 interior is 1.
    int dist = 0;
    const std::vector<int> bits = {1, 1, 1, 0, 1};
    for (size_t i = 1; i + 1 < 5; ++i) dist += bits[i] != h[i];
    CHECK(dist == 1);
}

TEST_CASE("search degenerate spaces return the single candidate untouched") {
    // k = M-2: the only legal mask is all ones.
    SandwichConfig mc = tiny_config(4);
    Rng rng(90);
    SandwichModel model;
    model.init(rng, mc, std::vector<int>{});
    NamedParams before = model.params();
    std::vector<std::vector<double>> snapshot;
    for (auto& [n, t] : before.items) snapshot.push_back(*t.data);

    TeacherFn dummy = [](const Tensor& x, const std::vector<double>&, const Tensor&) { return x; };
    SearchSchedule sched;
    sched.steps = 50;
    SearchResult res = search(model, 2, dummy, sched);
    CHECK(res.mask == std::vector<int>{1, 1, 1, 1});
    CHECK_FALSE(res.trained);

    // Weights untouched: no training drift.
    NamedParams after = model.params();
    size_t idx = 0;
    for (auto& [n, t] : after.items) {
        for (size_t i = 0; i < t.numel(); ++i) CHECK(t.at(i) == snapshot[idx][i]);
        ++idx;
    }

    // M=3, k=0: single candidate [1,0,1].
    SandwichConfig mc3 = tiny_config(3);
    SandwichModel m3;
    Rng rng3(91);
    m3.init(rng3, mc3, std::vector<int>{});
    SearchResult res3 = search(m3, 0, dummy, sched);
    CHECK(res3.mask == std::vector<int>{1, 0, 1});
}

TEST_CASE("search recovers a planted layout") {
    SandwichConfig mc = tiny_config(5);
    const std::vector<int> planted = {1, 0, 1, 0, 1};  // k = 1
    Rng trng(100);
    SandwichModel teacher;
    teacher.init(trng, mc, planted);

    Rng srng(101);
    SandwichModel student;
    student.init(srng, mc, std::vector<int>{});
    NamedParams sp = student.params();
    NamedParams tp = teacher.params();
    CHECK(copy_named(sp, tp) == sp.size());

    TeacherFn teacher_fn = [&teacher](const Tensor& x, const std::vector<double>& t, const Tensor& c) {
        NoGradGuard ng;
        return teacher.forward(x, t, c, Mode{});
    };
    SearchSchedule sched;
    sched.steps = 120;
    sched.lr = 0.05;
    sched.batch = 2;
    sched.train_weights = false;
    sched.seed = 7;
    SearchResult res = search(student, 1, teacher_fn, sched);
    CHECK(res.mask == planted);
    CHECK(mask_legal(res.mask, 1));
}

// ---------------------------------------------------------------------------
// Layout serialization
// ---------------------------------------------------------------------------

TEST_CASE("layout json round trip") {
    SandwichLayout layout;
    layout.cfg = tiny_config(4, 2);
    layout.mask = {1, 0, 1, 1};
    layout.has_budget = true;
    layout.budget = BudgetProfile{9, 3, 40, 20, 8, 100, 400};
    layout.has_alloc = true;
    layout.achieved = Allocation{6, 2, 60, 280, 0.5};
    layout.seed = 42;
    layout.search_steps = 150;
    layout.final_loss = 0.031;

    SandwichLayout back = SandwichLayout::from_json(layout.to_json());
    CHECK(back.mask == layout.mask);
    CHECK(back.cfg.groups == layout.cfg.groups);
    CHECK(back.cfg.grid.h == layout.cfg.grid.h);
    CHECK(back.budget.ell_lcha == layout.budget.ell_lcha);
    CHECK(back.achieved.n_lcha == layout.achieved.n_lcha);
    CHECK(back.hash() == layout.hash());
    CHECK_THROWS(SandwichLayout::from_json("{}"));
}
