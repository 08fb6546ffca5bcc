#include "s2dit/optim.hpp"

#include <cmath>

namespace s2dit {

Tensor* NamedParams::find(const std::string& name) {
    for (auto& [n, t] : items)
        if (n == name) return &t;
    return nullptr;
}

const Tensor* NamedParams::find(const std::string& name) const {
    for (const auto& [n, t] : items)
        if (n == name) return &t;
    return nullptr;
}

void NamedParams::zero_grad() {
    for (auto& [n, t] : items) t.zero_grad();
}

size_t copy_named(NamedParams& dst, const NamedParams& src) {
    size_t copied = 0;
    for (auto& [name, t] : dst.items) {
        const Tensor* s = src.find(name);
        if (s && s->shape == t.shape) {
            *t.data = *s->data;
            ++copied;
        }
    }
    return copied;
}

Adam::Adam(std::vector<Tensor> p, double learning_rate) : lr(learning_rate), params(std::move(p)) {
    m.resize(params.size());
    v.resize(params.size());
    for (size_t i = 0; i < params.size(); ++i) {
        m[i].assign(params[i].numel(), 0.0);
        v[i].assign(params[i].numel(), 0.0);
    }
}

void Adam::zero_grad() {
    for (auto& p : params) p.zero_grad();
}

void Adam::step() {
    ++t;
    const double bc1 = 1.0 - std::pow(beta1, static_cast<double>(t));
    const double bc2 = 1.0 - std::pow(beta2, static_cast<double>(t));
    for (size_t i = 0; i < params.size(); ++i) {
        Tensor& p = params[i];
        if (!p.grad) continue;
        const auto& g = *p.grad;
        auto& mi = m[i];
        auto& vi = v[i];
        for (size_t j = 0; j < g.size(); ++j) {
            mi[j] = beta1 * mi[j] + (1.0 - beta1) * g[j];
            vi[j] = beta2 * vi[j] + (1.0 - beta2) * g[j] * g[j];
            const double mhat = mi[j] / bc1;
            const double vhat = vi[j] / bc2;
            p.at(j) -= lr * mhat / (std::sqrt(vhat) + eps);
        }
    }
}

Ema::Ema(const std::vector<Tensor>& params, double d) : decay(d) {
    shadow_.resize(params.size());
    for (size_t i = 0; i < params.size(); ++i) shadow_[i] = *params[i].data;
}

void Ema::update(const std::vector<Tensor>& params) {
    for (size_t i = 0; i < params.size(); ++i) {
        auto& s = shadow_[i];
        const auto& d = *params[i].data;
        for (size_t j = 0; j < s.size(); ++j) s[j] = decay * s[j] + (1.0 - decay) * d[j];
    }
}

void Ema::copy_to(std::vector<Tensor>& params) const {
    for (size_t i = 0; i < params.size(); ++i) *params[i].data = shadow_[i];
}

}  // namespace s2dit
