#include "s2dit/tensor.hpp"

#include <cmath>
#include <unordered_set>

namespace s2dit {

Dtype dtype_from_name(const std::string& name) {
    if (name == "f32" || name == "float32") return Dtype::f32;
    if (name == "f64" || name == "float64") return Dtype::f64;
    throw std::invalid_argument("unknown dtype '" + name + "' (expected f32 or f64)");
}

static size_t shape_numel(const std::vector<size_t>& shape) {
    size_t n = 1;
    for (size_t d : shape) n *= d;
    return n;
}

size_t Tensor::numel() const { return shape_numel(shape); }

Tensor Tensor::zeros(std::vector<size_t> shape, Dtype dt) {
    Tensor t;
    t.shape = std::move(shape);
    t.dtype = dt;
    t.data = std::make_shared<std::vector<double>>(shape_numel(t.shape), 0.0);
    return t;
}

Tensor Tensor::full(std::vector<size_t> shape, double value, Dtype dt) {
    Tensor t = zeros(std::move(shape), dt);
    for (double& v : *t.data) v = value;
    return t;
}

Tensor Tensor::from(std::vector<double> values, std::vector<size_t> shape, Dtype dt) {
    if (values.size() != shape_numel(shape)) {
        throw std::invalid_argument("Tensor::from: " + std::to_string(values.size()) +
                                    " values for shape " + shape_str(shape));
    }
    Tensor t;
    t.shape = std::move(shape);
    t.dtype = dt;
    t.data = std::make_shared<std::vector<double>>(std::move(values));
    return t;
}

Tensor Tensor::scalar(double value, Dtype dt) { return from({value}, {1}, dt); }

double Tensor::item() const {
    if (numel() != 1) throw std::invalid_argument("item(): tensor has " + std::to_string(numel()) + " elements");
    return (*data)[0];
}

Tensor& Tensor::set_requires_grad(bool flag) {
    requires_grad = flag;
    if (flag && !grad) grad = std::make_shared<std::vector<double>>(numel(), 0.0);
    return *this;
}

std::vector<double>& Tensor::grad_ref() {
    if (!grad) grad = std::make_shared<std::vector<double>>(numel(), 0.0);
    return *grad;
}

void Tensor::zero_grad() {
    if (grad) std::fill(grad->begin(), grad->end(), 0.0);
}

Tensor Tensor::detached_copy() const {
    Tensor t;
    t.shape = shape;
    t.dtype = dtype;
    t.data = std::make_shared<std::vector<double>>(*data);
    return t;
}

bool same_shape(const Tensor& a, const Tensor& b) { return a.shape == b.shape; }

std::string shape_str(const std::vector<size_t>& shape) {
    std::string s = "[";
    for (size_t i = 0; i < shape.size(); ++i) {
        if (i) s += "x";
        s += std::to_string(shape[i]);
    }
    return s + "]";
}

namespace {
thread_local bool g_grad_enabled = true;
}

bool grad_enabled() { return g_grad_enabled; }

NoGradGuard::NoGradGuard() : prev_(g_grad_enabled) { g_grad_enabled = false; }
NoGradGuard::~NoGradGuard() { g_grad_enabled = prev_; }

void backward(const Tensor& root) {
    if (!root.node) return;
    // Post-order DFS gives parents-before-children; the reverse sweep then
    // visits every node after all of its consumers.
    std::vector<Node*> order;
    std::unordered_set<Node*> seen;
    std::vector<std::pair<Node*, size_t>> stack;
    stack.push_back({root.node.get(), 0});
    seen.insert(root.node.get());
    while (!stack.empty()) {
        auto& [node, next] = stack.back();
        if (next < node->parents.size()) {
            Node* child = node->parents[next].node.get();
            ++next;
            if (child && !seen.count(child)) {
                seen.insert(child);
                stack.push_back({child, 0});
            }
        } else {
            order.push_back(node);
            stack.pop_back();
        }
    }
    Tensor seed = root;
    auto& g = seed.grad_ref();
    std::fill(g.begin(), g.end(), 1.0);
    for (auto it = order.rbegin(); it != order.rend(); ++it) {
        if ((*it)->backward) (*it)->backward();
    }
}

void check_finite(const char* op, const Tensor& t) {
    for (double v : *t.data) {
        if (!std::isfinite(v)) {
            throw std::runtime_error(std::string(op) + " produced non-finite values");
        }
    }
}

// ---------------------------------------------------------------------------
// Rng
// ---------------------------------------------------------------------------

static uint64_t splitmix64(uint64_t x) {
    uint64_t z = x + 0x9E3779B97F4A7C15ull;
    z = (z ^ (z >> 30)) * 0xBF58476D1CE4E5B9ull;
    z = (z ^ (z >> 27)) * 0x94D049BB133111EBull;
    return z ^ (z >> 31);
}

uint64_t Rng::next_u64() {
    uint64_t v = splitmix64(seed + counter * 0x9E3779B97F4A7C15ull);
    ++counter;
    return v;
}

double Rng::uniform() { return static_cast<double>(next_u64() >> 11) * 0x1.0p-53; }

double Rng::normal() {
    double u1 = 1.0 - uniform();  // (0, 1]
    double u2 = uniform();
    return std::sqrt(-2.0 * std::log(u1)) * std::cos(2.0 * M_PI * u2);
}

double Rng::gumbel() {
    double u = uniform();
    if (u < 1e-300) u = 1e-300;
    double inner = -std::log(u);
    if (inner < 1e-300) inner = 1e-300;
    return -std::log(inner);
}

size_t Rng::index(size_t n) {
    if (n == 0) throw std::invalid_argument("Rng::index: empty range");
    return static_cast<size_t>(next_u64() % n);
}

static double quantize(double v, Dtype dt) {
    return dt == Dtype::f32 ? static_cast<double>(static_cast<float>(v)) : v;
}

Tensor Rng::randn(std::vector<size_t> shape, Dtype dt, double std_dev) {
    Tensor t = Tensor::zeros(std::move(shape), dt);
    for (double& v : *t.data) v = quantize(normal() * std_dev, dt);
    return t;
}

Tensor Rng::rand_uniform(std::vector<size_t> shape, double lo, double hi, Dtype dt) {
    Tensor t = Tensor::zeros(std::move(shape), dt);
    for (double& v : *t.data) v = quantize(lo + (hi - lo) * uniform(), dt);
    return t;
}

Rng Rng::fork(uint64_t stream) const {
    return Rng(splitmix64(seed ^ (0xA5A5A5A5DEADBEEFull + stream * 0x9E3779B97F4A7C15ull)));
}

}  // namespace s2dit
