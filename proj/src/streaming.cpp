#include "s2dit/streaming.hpp"

#include <cmath>

namespace s2dit {

// ---------------------------------------------------------------------------
// Stream state
// ---------------------------------------------------------------------------

void LinAttnState::init(size_t heads, size_t dk, size_t dv) {
    s.resize(heads);
    z.resize(heads);
    for (size_t h = 0; h < heads; ++h) {
        s[h] = Tensor::zeros({dk, dv});
        z[h] = Tensor::zeros({dk});
    }
    tokens = 0;
}

size_t LinAttnState::bytes() const {
    size_t b = 0;
    for (const auto& t : s) b += t.numel() * sizeof(double);
    for (const auto& t : z) b += t.numel() * sizeof(double);
    return b;
}

void ConvRing::init(size_t cap, size_t frame_tokens, size_t channels) {
    capacity = cap;
    frames.clear();
    for (size_t i = 0; i < cap; ++i) frames.push_back(Tensor::zeros({frame_tokens, channels}));
    initialized = true;
}

void ConvRing::push(const Tensor& frame) {
    if (capacity == 0) return;
    frames.push_back(frame.detached_copy());
    while (frames.size() > capacity) frames.pop_front();
}

size_t ConvRing::bytes() const {
    size_t b = 0;
    for (const auto& f : frames) b += f.numel() * sizeof(double);
    return b;
}

void SsaKvWindow::push(Tensor k, Tensor v) {
    chunks.emplace_back(std::move(k), std::move(v));
    while (chunks.size() > window_chunks) chunks.pop_front();
}

size_t SsaKvWindow::token_count() const {
    size_t n = 0;
    for (const auto& [k, v] : chunks) n += k.dim(0);
    return n;
}

size_t SsaKvWindow::bytes() const {
    size_t b = 0;
    for (const auto& [k, v] : chunks) b += (k.numel() + v.numel()) * sizeof(double);
    return b;
}

BlockState& StreamCtx::state_for(const void* block) { return states[block]; }

const BlockState* StreamCtx::find(const void* block) const {
    auto it = states.find(block);
    return it == states.end() ? nullptr : &it->second;
}

void StreamCtx::clear() { states.clear(); }

size_t StreamCtx::lin_bytes() const {
    size_t b = 0;
    for (const auto& [k, st] : states) b += st.lin.bytes();
    return b;
}

size_t StreamCtx::ring_bytes() const {
    size_t b = 0;
    for (const auto& [k, st] : states) b += st.ring.bytes();
    return b;
}

size_t StreamCtx::kv_bytes() const {
    size_t b = 0;
    for (const auto& [k, st] : states) b += st.kv.bytes();
    return b;
}

// ---------------------------------------------------------------------------
// Latency / footprint models
// ---------------------------------------------------------------------------

void ChunkPlan::validate() const {
    if (frames_per_chunk < 1) throw std::invalid_argument("ChunkPlan: frames_per_chunk must be >= 1");
    if (steps < 1) throw std::invalid_argument("ChunkPlan: steps must be >= 1");
    if (chunk_grid.t != frames_per_chunk) {
        throw std::invalid_argument("ChunkPlan: chunk_grid.t must equal frames_per_chunk");
    }
}

LatencyReport latency_model(const LatencyInputs& in) {
    if (in.text_encoder_ms < 0 || in.dit_step_ms < 0 || in.decoder_ms < 0 || in.steps < 1 ||
        in.pixel_frames_per_chunk <= 0) {
        throw std::invalid_argument("latency_model: inputs must be positive");
    }
    LatencyReport rep;
    rep.chunk_ms = in.text_encoder_ms + static_cast<double>(in.steps) * in.dit_step_ms + in.decoder_ms;
    rep.fps = in.pixel_frames_per_chunk / (rep.chunk_ms / 1000.0);
    rep.fps_rounded = std::round(rep.fps * 10.0) / 10.0;
    return rep;
}

CacheFootprint cache_footprint(const SandwichModel& model, const ChunkPlan& plan, size_t window,
                               size_t chunks) {
    plan.validate();
    const SandwichConfig& cfg = model.cfg;
    size_t lcha_blocks = 0, ssa_blocks = 0;
    for (int m : model.mask) {
        if (m == 1)
            lcha_blocks += cfg.blocks_per_group;
        else
            ssa_blocks += cfg.blocks_per_group;
    }
    const size_t dk = cfg.lcha.dk(), dv = cfg.lcha.head_dim;
    CacheFootprint fp;
    fp.lin_state_bytes = lcha_blocks * cfg.lcha.heads * (dk * dv + dk) * sizeof(double);
    fp.conv_ring_bytes =
        lcha_blocks * (cfg.lcha.kt - 1) * plan.chunk_grid.frame_len() * cfg.c_model * sizeof(double);
    const size_t low_tokens_per_chunk =
        plan.frames_per_chunk * (plan.chunk_grid.h / cfg.stride) * (plan.chunk_grid.w / cfg.stride);
    const size_t kv_width = cfg.ssa_heads * cfg.ssa_head_dim;
    fp.ssa_kv_bytes = ssa_blocks * std::min(chunks, window) * low_tokens_per_chunk * 2 * kv_width *
                      sizeof(double);
    fp.lin_frame_independent = true;
    fp.conv_frame_independent = true;
    fp.ssa_frame_independent = chunks >= window;
    fp.ssa_plateau_chunks = window;
    return fp;
}

// ---------------------------------------------------------------------------
// Engine
// ---------------------------------------------------------------------------

StreamEngine::StreamEngine(const SandwichModel& m, const ChunkPlan& p, size_t w)
    : model(&m), plan(p), window(w) {
    plan.validate();
    if (plan.chunk_grid.h != model->cfg.grid.h || plan.chunk_grid.w != model->cfg.grid.w) {
        throw std::invalid_argument("StreamEngine: chunk grid spatial dims must match the layout");
    }
    ctx.window_chunks = window;
}

Tensor StreamEngine::step(const Tensor& chunk_noise, const Tensor& c_text) {
    NoGradGuard ng;
    const TokenGrid grid = plan.chunk_grid;
    if (chunk_noise.rank() != 2 || chunk_noise.dim(0) != grid.len() ||
        chunk_noise.dim(1) != model->cfg.c_latent) {
        throw std::invalid_argument("StreamEngine: chunk noise must be [frames*H*W, c_latent]");
    }
    ctx.frame_offset = chunks_done_ * plan.frames_per_chunk;
    Mode mode{true, &ctx};
    Tensor x = chunk_noise.detached_copy();
    const double dt = 1.0 / static_cast<double>(plan.steps);
    for (size_t s = 0; s < plan.steps; ++s) {
        const double t = 1.0 - static_cast<double>(s) * dt;
        ctx.commit = false;
        std::vector<double> t_frames(grid.t, t);
        Tensor v = model->forward(x, t_frames, c_text, mode, &grid);
        x = ops::sub(x, ops::scale(v, dt));
        check_finite("stream_step", x);
    }
    // Commit pass: fold the finished chunk into the caches at t=0.
    ctx.commit = true;
    std::vector<double> t_zero(grid.t, 0.0);
    (void)model->forward(x, t_zero, c_text, mode, &grid);
    ctx.commit = false;
    ++chunks_done_;
    return x;
}

void StreamEngine::reset() {
    ctx.clear();
    chunks_done_ = 0;
    ctx.frame_offset = 0;
    ctx.commit = false;
}

CacheFootprint StreamEngine::measured_footprint() const {
    CacheFootprint fp;
    fp.lin_state_bytes = ctx.lin_bytes();
    fp.conv_ring_bytes = ctx.ring_bytes();
    fp.ssa_kv_bytes = ctx.kv_bytes();
    fp.ssa_plateau_chunks = window;
    fp.ssa_frame_independent = chunks_done_ >= window;
    return fp;
}

size_t StreamEngine::lin_tokens() const {
    for (const auto& [k, st] : ctx.states) {
        if (st.lin.ready()) return st.lin.tokens;
    }
    return 0;
}

std::vector<Tensor> stream_reference(const SandwichModel& model, const ChunkPlan& plan,
                                     const std::vector<Tensor>& chunk_noises, const Tensor& c_text) {
    NoGradGuard ng;
    plan.validate();
    const TokenGrid chunk_grid = plan.chunk_grid;
    const size_t chunk_tokens = chunk_grid.len();
    std::vector<Tensor> finalized;
    const double dt = 1.0 / static_cast<double>(plan.steps);
    for (size_t c = 0; c < chunk_noises.size(); ++c) {
        Tensor x = chunk_noises[c].detached_copy();
        const TokenGrid full_grid{(c + 1) * plan.frames_per_chunk, chunk_grid.h, chunk_grid.w};
        for (size_t s = 0; s < plan.steps; ++s) {
            const double t = 1.0 - static_cast<double>(s) * dt;
            // Assemble clean prefix + current chunk, timesteps 0 ... 0, t ... t.
            Tensor seq = Tensor::zeros({full_grid.len(), model.cfg.c_latent});
            for (size_t p = 0; p < c; ++p)
                for (size_t i = 0; i < chunk_tokens; ++i)
                    for (size_t j = 0; j < model.cfg.c_latent; ++j)
                        seq.at((p * chunk_tokens + i) * model.cfg.c_latent + j) =
                            finalized[p].at(i * model.cfg.c_latent + j);
            for (size_t i = 0; i < chunk_tokens; ++i)
                for (size_t j = 0; j < model.cfg.c_latent; ++j)
                    seq.at((c * chunk_tokens + i) * model.cfg.c_latent + j) =
                        x.at(i * model.cfg.c_latent + j);
            std::vector<double> t_frames(full_grid.t, 0.0);
            for (size_t f = c * plan.frames_per_chunk; f < full_grid.t; ++f) t_frames[f] = t;
            Tensor v_full = model.forward(seq, t_frames, c_text, Mode{true, nullptr}, &full_grid);
            Tensor v = Tensor::zeros({chunk_tokens, model.cfg.c_latent});
            for (size_t i = 0; i < chunk_tokens; ++i)
                for (size_t j = 0; j < model.cfg.c_latent; ++j)
                    v.at(i * model.cfg.c_latent + j) =
                        v_full.at((c * chunk_tokens + i) * model.cfg.c_latent + j);
            x = ops::sub(x, ops::scale(v, dt));
        }
        finalized.push_back(x);
    }
    return finalized;
}

}  // namespace s2dit
