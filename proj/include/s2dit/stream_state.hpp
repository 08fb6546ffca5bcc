#pragma once

#include <deque>
#include <unordered_map>

#include "s2dit/grid.hpp"
#include "s2dit/tensor.hpp"

namespace s2dit {

/// Per-head linear-attention carry: S accumulates rotated keys times values,
/// z accumulates un-rotated kernel features. Footprint is independent of the
/// number of frames generated.
struct LinAttnState {
    std::vector<Tensor> s;  // per head [d_k, d_v], f64 accumulators
    std::vector<Tensor> z;  // per head [d_k]
    size_t tokens = 0;

    void init(size_t heads, size_t dk, size_t dv);
    bool ready() const { return !s.empty(); }
    size_t bytes() const;
};

/// Last kt-1 conv-input frames; always holds exactly `capacity` frames
/// (zero frames stand in for the causal left padding).
struct ConvRing {
    size_t capacity = 0;
    std::deque<Tensor> frames;  // oldest first, each [H*W, C]

    void init(size_t cap, size_t frame_tokens, size_t channels);
    bool ready() const { return capacity == 0 ? initialized : !frames.empty(); }
    void push(const Tensor& frame);
    size_t bytes() const;
    bool initialized = false;
};

/// Windowed KV cache for strided attention; holds at most `window_chunks`
/// committed chunks of rotated keys and values.
struct SsaKvWindow {
    size_t window_chunks = 2;
    std::deque<std::pair<Tensor, Tensor>> chunks;  // (K, V), each [L_chunk_low, heads*d_h]

    void push(Tensor k, Tensor v);
    size_t token_count() const;
    size_t bytes() const;
};

struct BlockState {
    LinAttnState lin;
    ConvRing ring;
    SsaKvWindow kv;
};

/// Streaming context threaded through block forwards. Keyed by block address;
/// owns every cache the chunk loop carries across steps.
struct StreamCtx {
    size_t frame_offset = 0;  // global index of the current chunk's first frame
    bool commit = false;      // when set, forwards fold the chunk into the caches
    size_t window_chunks = 2;

    BlockState& state_for(const void* block);
    const BlockState* find(const void* block) const;
    void clear();

    size_t lin_bytes() const;
    size_t ring_bytes() const;
    size_t kv_bytes() const;

    std::unordered_map<const void*, BlockState> states;
};

}  // namespace s2dit
