#pragma once

#include <string>
#include <vector>

#include "s2dit/tensor.hpp"

namespace s2dit {

/// Named parameter list; the unit of checkpointing and optimization.
struct NamedParams {
    std::vector<std::pair<std::string, Tensor>> items;

    void add(const std::string& name, const Tensor& t) { items.emplace_back(name, t); }
    Tensor* find(const std::string& name);
    const Tensor* find(const std::string& name) const;
    size_t size() const { return items.size(); }
    void zero_grad();
};

/// Copies values for every name+shape match; returns the number copied.
size_t copy_named(NamedParams& dst, const NamedParams& src);

/// Adaptive-moment step with bias correction.
struct Adam {
    double lr = 1e-3;
    double beta1 = 0.9;
    double beta2 = 0.999;
    double eps = 1e-8;

    explicit Adam(std::vector<Tensor> params, double lr = 1e-3);

    void zero_grad();
    void step();

    std::vector<Tensor> params;
    std::vector<std::vector<double>> m, v;
    size_t t = 0;
};

/// Plain exponential moving average over a parameter list.
struct Ema {
    double decay = 0.99;

    explicit Ema(const std::vector<Tensor>& params, double decay = 0.99);
    void update(const std::vector<Tensor>& params);
    const std::vector<std::vector<double>>& shadow() const { return shadow_; }
    void copy_to(std::vector<Tensor>& params) const;

private:
    std::vector<std::vector<double>> shadow_;
};

}  // namespace s2dit
