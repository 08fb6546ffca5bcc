#pragma once

#include "s2dit/sandwich.hpp"
#include "s2dit/stream_state.hpp"

namespace s2dit {

struct ChunkPlan {
    size_t frames_per_chunk = 3;
    size_t steps = 4;  // denoising steps per chunk
    TokenGrid chunk_grid;
    size_t total_chunks = 1;

    void validate() const;
};

struct LatencyInputs {
    double text_encoder_ms = 4.0;
    double dit_step_ms = 260.0;
    double decoder_ms = 80.0;
    size_t steps = 4;
    double pixel_frames_per_chunk = 12.0;
};

struct LatencyReport {
    double chunk_ms = 0.0;
    double fps = 0.0;
    double fps_rounded = 0.0;  // one decimal, as reported
};

LatencyReport latency_model(const LatencyInputs& in);

struct CacheFootprint {
    size_t lin_state_bytes = 0;
    size_t conv_ring_bytes = 0;
    size_t ssa_kv_bytes = 0;
    bool lin_frame_independent = true;
    bool conv_frame_independent = true;
    bool ssa_frame_independent = false;  // true once the window caps growth
    size_t ssa_plateau_chunks = 0;

    size_t total() const { return lin_state_bytes + conv_ring_bytes + ssa_kv_bytes; }
};

/// Analytic byte accounting for the streaming caches after `chunks` chunks.
CacheFootprint cache_footprint(const SandwichModel& model, const ChunkPlan& plan, size_t window,
                               size_t chunks);

/// Chunked autoregressive engine. Denoise passes read the carried state;
/// a commit pass at t=0 folds the finished chunk into every cache.
struct StreamEngine {
    StreamEngine(const SandwichModel& model, const ChunkPlan& plan, size_t window);

    /// One chunk: denoise `plan.steps` Euler steps, then commit. Returns the
    /// chunk latent.
    Tensor step(const Tensor& chunk_noise, const Tensor& c_text);

    void reset();
    CacheFootprint measured_footprint() const;
    size_t lin_tokens() const;
    size_t chunks_done() const { return chunks_done_; }

    const SandwichModel* model;
    ChunkPlan plan;
    size_t window;
    StreamCtx ctx;

private:
    size_t chunks_done_ = 0;
};

/// Stateless reference for the engine: every forward recomputes over the full
/// concatenated prefix (finalized chunks at t=0, current chunk at its step t).
std::vector<Tensor> stream_reference(const SandwichModel& model, const ChunkPlan& plan,
                                     const std::vector<Tensor>& chunk_noises, const Tensor& c_text);

}  // namespace s2dit
