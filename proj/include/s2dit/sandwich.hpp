#pragma once

#include <functional>

#include "s2dit/attention.hpp"

namespace s2dit {

// ---------------------------------------------------------------------------
// Budget-aware block allocation
// ---------------------------------------------------------------------------

struct BudgetProfile {
    double ell_lcha = 0.0, ell_ssa = 0.0;  // per-block latency (ms)
    double mem_lcha = 0.0, mem_ssa = 0.0;  // per-block memory (MB)
    size_t total_blocks = 0;               // K
    double latency_budget = 0.0;           // L_max (ms)
    double memory_budget = 0.0;            // M_max (MB)

    void validate() const;
};

struct Allocation {
    size_t n_lcha = 0, n_ssa = 0;
    double latency_ms = 0.0, memory_mb = 0.0;
    double distance = 0.0;  // normalized distance to (L_max, M_max)
};

struct InfeasibleBudgetError : std::runtime_error {
    using std::runtime_error::runtime_error;
};

/// Picks the feasible (N_LCHA, N_SSA) split closest to full budget
/// utilization; ties break toward more LCHA blocks.
Allocation allocate_blocks(const BudgetProfile& profile);

/// Branch-switch triggers: u fires on 0->1, d on 1->0.
std::pair<int, int> triggers(int m_prev, int m_cur);

/// All masks of length `m_groups` with endpoints fixed to 1 and exactly
/// `k_interior` ones among the interior positions, lexicographic order.
std::vector<std::vector<int>> enumerate_masks(size_t m_groups, size_t k_interior);

uint64_t binomial(size_t n, size_t k);
bool mask_legal(const std::vector<int>& mask, size_t k_interior);

// ---------------------------------------------------------------------------
// Routing
// ---------------------------------------------------------------------------

/// Routing coefficient: either a compile-time constant bit or a sampled
/// straight-through tensor (hard forward, soft backward).
struct SoftBit {
    bool is_const = true;
    double value = 1.0;
    Tensor t;  // defined when !is_const; scalar with forward value in {0,1}

    static SoftBit constant(double v) { return SoftBit{true, v, {}}; }
    static SoftBit tensor(Tensor m) { return SoftBit{false, m.at(0), std::move(m)}; }
    double forward_value() const { return is_const ? value : t.at(0); }
};

struct GumbelSample {
    Tensor m;          // scalar tensor, forward in {0,1}
    double soft_prob;  // the relaxed probability behind it
};

/// Binary Gumbel-Softmax with straight-through forward. logits: [2], index 1
/// is the high-res branch.
GumbelSample gumbel_ste_sample(const Tensor& logits, double temperature, Rng& rng);

struct RoutingTrace {
    std::vector<int> m, u, d;
    std::vector<int> skip_written;  // 1 where the long-skip buffer changed
    std::vector<Tensor> skip;       // S^n snapshot after each group
};

// ---------------------------------------------------------------------------
// Model
// ---------------------------------------------------------------------------

struct SandwichConfig {
    TokenGrid grid;
    size_t c_latent = 4;
    size_t c_model = 8;
    size_t cond_dim = 8;
    size_t c_text = 8;
    size_t mlp_ratio = 2;
    size_t groups = 3;
    size_t blocks_per_group = 2;
    size_t stride = 2;
    LchaConfig lcha;
    size_t ssa_heads = 1;
    size_t ssa_head_dim = 8;
    bool rope = true;
    Dtype dtype = Dtype::f64;

    size_t c_low() const { return c_model * stride * stride; }
};

struct SandwichGroup {
    std::vector<LchaBlock> f_l;   // high-res branch
    std::vector<AttnBlock> f_s;   // low-res branch
    Downsample down;
    Upsample up;
};

struct SandwichModel {
    SandwichConfig cfg;
    std::vector<int> mask;  // hard routing mask, mask[0] == mask[M-1] == 1
    Conditioner conditioner;
    Tensor w_in, b_in, w_out, b_out;
    LayerNormParams ln_f;
    std::vector<SandwichGroup> groups;

    void init(Rng& rng, const SandwichConfig& cfg, std::vector<int> mask);

    /// Routed core on model-width tokens (the algorithm's y). Bits must have
    /// one entry per group with the endpoints equal to 1.
    Tensor route_tokens(const Tensor& tokens, const TokenGrid& grid, const CondCtx& cond,
                        const Mode& mode, const std::vector<SoftBit>& bits,
                        RoutingTrace* trace = nullptr) const;

    std::vector<SoftBit> hard_bits() const;

    /// End-to-end velocity prediction with the hard mask.
    Tensor forward(const Tensor& x_latent, const std::vector<double>& t_frames, const Tensor& c_text,
                   const Mode& mode, const TokenGrid* grid_override = nullptr,
                   RoutingTrace* trace = nullptr) const;

    /// Copies every shape-compatible tensor from the full-attention teacher.
    size_t inherit_from(ReferenceModel& teacher);

    NamedParams params();
};

/// Spec-level routed forward: hard uses the model mask; soft samples interior
/// bits from `logits` via Gumbel-ST at `temperature`.
Tensor routed_forward(const SandwichModel& model, const Tensor& tokens, const TokenGrid& grid,
                      const CondCtx& cond, const Mode& mode, bool hard, double temperature,
                      Rng* rng, const std::vector<Tensor>* logits = nullptr,
                      RoutingTrace* trace = nullptr);

Tensor self_distill_loss(const Tensor& student_out, const Tensor& teacher_out);

// ---------------------------------------------------------------------------
// Search
// ---------------------------------------------------------------------------

struct SearchSchedule {
    size_t steps = 150;
    double lr = 5e-3;
    size_t batch = 2;
    double temp_start = 1.0;
    double temp_end = 0.1;
    bool train_weights = true;
    uint64_t seed = 0;
};

struct SearchResult {
    std::vector<int> mask;
    double final_loss = 0.0;
    std::vector<double> loss_curve;
    std::vector<double> interior_probs;
    bool trained = false;  // false when the space had a single candidate
};

using TeacherFn =
    std::function<Tensor(const Tensor& x_latent, const std::vector<double>& t_frames, const Tensor& c_text)>;

/// Differentiable routing search against a frozen teacher; hardens to a legal
/// mask with exactly k interior LCHA groups.
SearchResult search(SandwichModel& student, size_t k_interior, const TeacherFn& teacher,
                    const SearchSchedule& sched);

/// Nearest legal mask by interior Hamming distance, lexicographically first
/// on ties.
std::vector<int> harden_mask(const std::vector<int>& bits, size_t m_groups, size_t k_interior);

// ---------------------------------------------------------------------------
// Layout file
// ---------------------------------------------------------------------------

struct SandwichLayout {
    SandwichConfig cfg;
    std::vector<int> mask;
    bool has_budget = false;
    BudgetProfile budget;
    bool has_alloc = false;
    Allocation achieved;
    uint64_t seed = 0;
    size_t search_steps = 0;
    double final_loss = 0.0;

    std::string to_json() const;
    static SandwichLayout from_json(const std::string& text);
    uint64_t hash() const;
};

std::string sandwich_config_to_json_text(const SandwichConfig& cfg);
SandwichConfig sandwich_config_from_json_text(const std::string& text);

}  // namespace s2dit
