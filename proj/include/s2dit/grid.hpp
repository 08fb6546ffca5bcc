#pragma once

#include <cstddef>
#include <stdexcept>

namespace s2dit {

/// Video token grid. Tokens flatten in (t, h, w) order, so frame f occupies
/// indices [f*h*w, (f+1)*h*w).
struct TokenGrid {
    size_t t = 1;
    size_t h = 1;
    size_t w = 1;

    size_t len() const { return t * h * w; }
    size_t frame_len() const { return h * w; }

    size_t index(size_t tt, size_t hh, size_t ww) const { return (tt * h + hh) * w + ww; }
    size_t frame_of(size_t token) const { return token / (h * w); }

    TokenGrid strided(size_t s) const {
        if (h % s != 0 || w % s != 0) {
            throw std::invalid_argument("TokenGrid: spatial dims not divisible by stride");
        }
        return TokenGrid{t, h / s, w / s};
    }

    bool operator==(const TokenGrid& o) const { return t == o.t && h == o.h && w == o.w; }
};

}  // namespace s2dit
