#pragma once

#include "s2dit/grid.hpp"
#include "s2dit/ops.hpp"
#include "s2dit/optim.hpp"
#include "s2dit/stream_state.hpp"
#include "s2dit/tensor.hpp"

namespace s2dit {

// ---------------------------------------------------------------------------
// Configs and conditioning
// ---------------------------------------------------------------------------

struct KernelParams {
    Tensor w;  // [d_k, d_h]
    Tensor b;  // [d_k]
};

struct LchaConfig {
    size_t heads = 1;
    size_t head_dim = 128;
    size_t kernel_dim = 0;  // d_k; 0 means head_dim
    size_t kt = 3, kh = 3, kw = 3;
    double alpha_init = 0.0;
    bool qk_norm = true;
    bool rope = true;
    double eps = 1e-6;  // linear-attention denominator floor

    size_t dk() const { return kernel_dim == 0 ? head_dim : kernel_dim; }
};

struct SsaConfig {
    size_t stride = 2;  // spatial stride; temporal stride is 1
    size_t heads = 1;
    size_t head_dim = 64;
    bool rope = true;
};

struct Mode {
    bool causal = false;
    StreamCtx* stream = nullptr;
};

/// Per-frame conditioning vectors plus the token->frame map of the grid.
struct CondCtx {
    Tensor cond;  // [F, cond_dim]
    std::vector<size_t> frame_of_token;
};

std::vector<size_t> frame_map(const TokenGrid& grid);
Tensor sinusoidal_embedding(double t, size_t dim);

struct AdaLnParams {
    Tensor shift_attn, scale_attn, gate_attn;
    Tensor shift_mlp, scale_mlp, gate_mlp;  // each [F, C]; gates sigmoid-mapped
};

struct AdaLnHead {
    Tensor w;  // [cond_dim, 6C]
    Tensor b;  // [6C]
    void init(Rng& rng, size_t cond_dim, size_t c, Dtype dt);
    AdaLnParams compute(const Tensor& cond) const;
    void collect_params(const std::string& prefix, NamedParams& out) const;
};

struct LayerNormParams {
    Tensor gamma, beta;
    void init(size_t c, Dtype dt);
    void collect_params(const std::string& prefix, NamedParams& out) const;
};

struct Mlp {
    Tensor w1, b1, w2, b2;
    void init(Rng& rng, size_t c, size_t hidden, Dtype dt);
    Tensor forward(const Tensor& x) const;
    void collect_params(const std::string& prefix, NamedParams& out) const;
};

Tensor modulate(const Tensor& x, const Tensor& shift, const Tensor& scale,
                const std::vector<size_t>& frame_of_token);
Tensor apply_gate(const Tensor& x, const Tensor& gate, const std::vector<size_t>& frame_of_token);

// ---------------------------------------------------------------------------
// Attention operations
// ---------------------------------------------------------------------------

/// softmax(q k^T / sqrt(d)) v. In causal mode query i attends to j <= i +
/// q_offset (the offset counts cached tokens in streaming).
Tensor full_attention(const Tensor& q, const Tensor& k, const Tensor& v, bool causal,
                      size_t q_offset = 0);

/// phi(x) = softplus(x W^T + b), clamped to stay strictly positive even where
/// softplus underflows (z < -745 in double).
Tensor kernel_map(const Tensor& x, const KernelParams& p);

/// Single-head linear attention in the O(L) prefix form. QK-norm precedes the
/// kernel; rotation applies to kernel outputs in the numerator only.
Tensor linear_attention(const Tensor& q, const Tensor& k, const Tensor& v, const KernelParams& p,
                        const TokenGrid* rope_grid, size_t t_offset, bool causal, double eps,
                        bool qk_norm);

/// Streaming step: starts from (S, z), returns outputs for the chunk tokens;
/// folds the chunk into the state only when `commit` is set.
Tensor linear_attention_stream(const Tensor& q, const Tensor& k, const Tensor& v,
                               const KernelParams& p, const TokenGrid* rope_grid, size_t t_offset,
                               double eps, bool qk_norm, Tensor& state_s, Tensor& state_z,
                               bool commit);

/// Depthwise causal 3D conv plus channel mixing. `ring` supplies the last
/// kt-1 input frames in streaming mode (and is updated on commit).
Tensor local_conv_path(const Tensor& x, const TokenGrid& grid, const Tensor& conv_w,
                       const Tensor& mix_w, const Tensor& mix_b, ConvRing* ring = nullptr,
                       bool commit = false);

/// Ablation baseline: keys/values average-pooled spatially by s, queries at
/// full length, plain softmax attention.
Tensor kv_compress_attention(const Tensor& q, const Tensor& k, const Tensor& v,
                             const TokenGrid& grid, size_t pool);

// ---------------------------------------------------------------------------
// Blocks
// ---------------------------------------------------------------------------

/// Multi-head full attention with QK-norm and RoPE; shared by the reference
/// blocks and the strided (low-res) blocks. Handles the windowed KV cache.
struct MhaCore {
    size_t heads = 1, head_dim = 8;
    bool rope = true, qk_norm = true;
    Tensor wq, bq, wk, bk, wv, bv, wo, bo;

    void init(Rng& rng, size_t c, size_t heads, size_t head_dim, bool rope, Dtype dt);
    Tensor forward(const Tensor& x, const TokenGrid& grid, const Mode& mode, const void* state_key)
        const;
    void collect_params(const std::string& prefix, NamedParams& out) const;
};

/// Transformer block with AdaLN modulation around full attention and MLP.
struct AttnBlock {
    size_t c = 0;
    LayerNormParams ln1, ln2;
    AdaLnHead ada;
    MhaCore attn;
    Mlp mlp;

    void init(Rng& rng, size_t c_model, size_t cond_dim, size_t heads, size_t head_dim, bool rope,
              size_t mlp_ratio, Dtype dt);
    Tensor forward(const Tensor& x, const TokenGrid& grid, const CondCtx& cond, const Mode& mode) const;
    void collect_params(const std::string& prefix, NamedParams& out) const;
};

/// LinConv hybrid block: linear-attention path and causal-conv path fused by
/// a learnable scalar gate, inside the standard AdaLN block wrapper.
struct LchaBlock {
    LchaConfig cfg;
    size_t c = 0;
    LayerNormParams ln1, ln2;
    AdaLnHead ada;
    Tensor wq, bq, wk, bk, wv, bv, wo, bo;
    std::vector<KernelParams> kernels;  // per head, shared between q and k
    Tensor conv_w, mix_w, mix_b;
    Tensor alpha;  // FusionGate logit (scalar)
    Mlp mlp;

    void init(Rng& rng, size_t c_model, size_t cond_dim, const LchaConfig& cfg, size_t mlp_ratio,
              Dtype dt);
    Tensor forward(const Tensor& x, const TokenGrid& grid, const CondCtx& cond, const Mode& mode) const;
    /// The fused attention sublayer: sigmoid(alpha)*linear + (1-sigmoid)*conv
    /// on the already-modulated hidden state.
    Tensor attn_mix(const Tensor& h, const TokenGrid& grid, const Mode& mode) const;
    /// Implicit per-head kernel-similarity maps phi(q_i).phi(k_j)/denominator
    /// (rotation omitted so rows normalize); rows sum to 1 up to the eps floor.
    std::vector<Tensor> attention_maps(const Tensor& x, const TokenGrid& grid,
                                       const CondCtx& cond) const;
    void collect_params(const std::string& prefix, NamedParams& out) const;
};

/// Space-to-channel downsample (pixel unshuffle + linear) and its inverse.
struct Downsample {
    size_t s = 2;
    Tensor w, b;  // [C*s^2, c_low]
    void init(Rng& rng, size_t c_high, size_t c_low, size_t s, Dtype dt);
    Tensor forward(const Tensor& x, const TokenGrid& grid_high) const;
    void collect_params(const std::string& prefix, NamedParams& out) const;
};

struct Upsample {
    size_t s = 2;
    Tensor w, b;  // [c_low, C*s^2]
    void init(Rng& rng, size_t c_high, size_t c_low, size_t s, Dtype dt);
    Tensor forward(const Tensor& x, const TokenGrid& grid_low) const;
    void collect_params(const std::string& prefix, NamedParams& out) const;
};

/// Standalone strided-attention block (the flat/ablation form): the attention
/// sublayer runs at 1/s^2 tokens between a downsample and an upsample.
struct SsaBlock {
    SsaConfig cfg;
    size_t c = 0;
    LayerNormParams ln1, ln2;
    AdaLnHead ada;
    Downsample down;
    Upsample up;
    MhaCore attn;  // at c_low = C*s^2
    Mlp mlp;

    void init(Rng& rng, size_t c_model, size_t cond_dim, const SsaConfig& cfg, size_t mlp_ratio,
              Dtype dt);
    Tensor forward(const Tensor& x, const TokenGrid& grid, const CondCtx& cond, const Mode& mode) const;
    void collect_params(const std::string& prefix, NamedParams& out) const;
};

// ---------------------------------------------------------------------------
// Reference model (full-attention backbone; quality upper bound and teacher)
// ---------------------------------------------------------------------------

struct Conditioner {
    size_t cond_dim = 0;
    Tensor w_t, b_t;  // [cond_dim, cond_dim], [cond_dim]
    Tensor w_c;       // [c_text, cond_dim]
    void init(Rng& rng, size_t cond_dim, size_t c_text, Dtype dt);
    CondCtx build(const std::vector<double>& t_frames, const Tensor& c_text,
                  const TokenGrid& grid) const;
    void collect_params(const std::string& prefix, NamedParams& out) const;
};

struct RefModelConfig {
    TokenGrid grid;
    size_t c_latent = 4;
    size_t c_model = 8;
    size_t heads = 2;
    size_t head_dim = 4;
    size_t blocks = 4;
    size_t mlp_ratio = 2;
    size_t cond_dim = 8;
    size_t c_text = 8;
    bool rope = true;
    Dtype dtype = Dtype::f64;
};

struct ReferenceModel {
    RefModelConfig cfg;
    Conditioner conditioner;
    Tensor w_in, b_in, w_out, b_out;
    LayerNormParams ln_f;
    std::vector<AttnBlock> blocks;

    void init(Rng& rng, const RefModelConfig& cfg);
    /// Velocity prediction for tokens on cfg.grid (or a shorter prefix grid).
    Tensor forward(const Tensor& x_latent, const std::vector<double>& t_frames, const Tensor& c_text,
                   const Mode& mode, const TokenGrid* grid_override = nullptr) const;
    NamedParams params();
};

}  // namespace s2dit
