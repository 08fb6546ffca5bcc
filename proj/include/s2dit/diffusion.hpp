#pragma once

#include <functional>

#include "s2dit/grid.hpp"
#include "s2dit/ops.hpp"
#include "s2dit/tensor.hpp"

namespace s2dit {

enum class ExpertTag : uint8_t { single = 0, low = 1, high = 2 };

/// Cached supervision record: everything the student needs, teacher-free.
struct DiffusionTuple {
    double t = 0.0;
    Tensor noise;     // epsilon
    Tensor x_t;       // (1-t) x0 + t eps
    Tensor velocity;  // teacher prediction at (x_t, t, c_text)
    Tensor c_text;
    ExpertTag expert = ExpertTag::single;
};

Tensor forward_noise(const Tensor& x0, double t, const Tensor& eps);
Tensor fm_loss(const Tensor& pred_v, const Tensor& x0, const Tensor& eps);
Tensor kd_loss(const Tensor& student_v, const Tensor& teacher_v);

using StudentFn = std::function<Tensor(const Tensor& x_t, double t, const Tensor& c_text)>;

/// Two-expert cached distillation: w_l * low-expert MSE + w_h * high-expert
/// MSE over (low, high) tuple pairs.
Tensor kd_loss_two_expert(const std::vector<std::pair<DiffusionTuple, DiffusionTuple>>& pairs,
                          const StudentFn& student, double w_l = 0.5, double w_h = 0.5);

/// Groups a flat record list into (low, high) pairs; throws when an expert
/// tuple is missing.
std::vector<std::pair<DiffusionTuple, DiffusionTuple>> pair_experts(
    const std::vector<DiffusionTuple>& tuples);

struct KdCacheConfig {
    size_t samples = 512;  // two-expert mode stores two tuples per sample
    TokenGrid grid;
    size_t c_latent = 4;
    size_t c_text = 8;
    bool two_expert = false;
    std::string t_dist = "uniform";  // or "logit_normal"
    double expert_split = 0.5;       // t >= split is the high-noise expert
    uint64_t seed = 0;
    size_t workers = 1;
};

using VelocityFn = std::function<Tensor(const Tensor& x_t, const std::vector<double>& t_frames,
                                        const Tensor& c_text)>;

// KD cache file: magic "S2KD", u8 version=1, u64 record count, then per
// record: u8 expert tag, f64 t, S2TN-embedded eps, x_t, v, c_text.
void build_kd_cache(const VelocityFn& teacher, const KdCacheConfig& cfg, const std::string& path);
std::vector<DiffusionTuple> load_kd_cache(const std::string& path);

/// Relativistic paired losses; returns (L_D, L_G).
std::pair<Tensor, Tensor> rpgan_losses(const Tensor& d_real, const Tensor& d_fake);

using ScorerFn = std::function<Tensor(const Tensor& x)>;  // [B, D] -> [B]

/// Perturbation-difference penalties on real (R1) and fake (R2) scores:
/// (gamma/2)(1/eps) E[D(x + delta) - D(x)] with ||delta|| = eps per sample.
/// `direction` overrides the random unit direction (same shape as x).
std::pair<Tensor, Tensor> r_penalties(const ScorerFn& scorer, const Tensor& x_real,
                                      const Tensor& x_fake, double eps_r, double gamma, Rng& rng,
                                      const Tensor* direction = nullptr);

using FlowModelFn = std::function<Tensor(const Tensor& x, double t, const Tensor& c_text)>;

/// Straight-line Euler integration of the velocity field from t=1 to t=0 on
/// a uniform grid.
Tensor euler_flow_sample(const FlowModelFn& model, const Tensor& x_noise, size_t steps,
                         const Tensor& c_text);

}  // namespace s2dit
