#pragma once

#include <cstdint>
#include <functional>
#include <memory>
#include <stdexcept>
#include <string>
#include <vector>

namespace s2dit {

enum class Dtype : uint8_t { f32 = 0, f64 = 1 };

inline size_t dtype_bytes(Dtype dt) { return dt == Dtype::f32 ? 4 : 8; }
inline const char* dtype_name(Dtype dt) { return dt == Dtype::f32 ? "f32" : "f64"; }
Dtype dtype_from_name(const std::string& name);

struct Node;

/// Dense row-major tensor. Values are held as double regardless of dtype; the
/// dtype tag controls file width and init-time quantization, so "f32 weights"
/// are float-representable values computed in double precision.
struct Tensor {
    std::vector<size_t> shape;
    Dtype dtype = Dtype::f64;
    std::shared_ptr<std::vector<double>> data;
    std::shared_ptr<std::vector<double>> grad;  // allocated lazily
    bool requires_grad = false;
    std::shared_ptr<Node> node;  // non-null for op outputs on the tape

    Tensor() = default;

    static Tensor zeros(std::vector<size_t> shape, Dtype dt = Dtype::f64);
    static Tensor full(std::vector<size_t> shape, double value, Dtype dt = Dtype::f64);
    static Tensor from(std::vector<double> values, std::vector<size_t> shape, Dtype dt = Dtype::f64);
    static Tensor scalar(double value, Dtype dt = Dtype::f64);

    bool defined() const { return static_cast<bool>(data); }
    size_t rank() const { return shape.size(); }
    size_t numel() const;
    size_t dim(size_t i) const { return shape.at(i); }

    std::vector<double>& vals() { return *data; }
    const std::vector<double>& vals() const { return *data; }
    double& at(size_t i) { return (*data)[i]; }
    double at(size_t i) const { return (*data)[i]; }
    double item() const;

    Tensor& set_requires_grad(bool flag);
    std::vector<double>& grad_ref();  // allocates zero-filled on first use
    void zero_grad();

    /// Deep copy of values only; drops tape linkage.
    Tensor detached_copy() const;
};

bool same_shape(const Tensor& a, const Tensor& b);
std::string shape_str(const std::vector<size_t>& shape);

struct Node {
    const char* op = "";
    std::vector<Tensor> parents;
    // Captures the output handle (data+grad, no node, so no ownership cycle)
    // and the activations saved in forward. Accumulates into parent grads.
    std::function<void()> backward;
};

bool grad_enabled();

struct NoGradGuard {
    NoGradGuard();
    ~NoGradGuard();

private:
    bool prev_;
};

/// Reverse-mode sweep from `root` (grad seeded with ones).
void backward(const Tensor& root);

/// Throws if any value is NaN/Inf, naming the producing op.
void check_finite(const char* op, const Tensor& t);

/// Counter-based splitmix64 generator. Identical seed gives an identical draw
/// sequence on every platform; no libc/libstdc++ distribution involved.
struct Rng {
    uint64_t seed = 0;
    uint64_t counter = 0;

    explicit Rng(uint64_t s = 0) : seed(s) {}

    uint64_t next_u64();
    double uniform();  // [0, 1)
    double normal();   // Box-Muller
    double gumbel();
    size_t index(size_t n);  // uniform in [0, n)

    Tensor randn(std::vector<size_t> shape, Dtype dt = Dtype::f64, double std_dev = 1.0);
    Tensor rand_uniform(std::vector<size_t> shape, double lo, double hi, Dtype dt = Dtype::f64);

    /// Independent substream; used for per-record / per-run derivation.
    Rng fork(uint64_t stream) const;
};

}  // namespace s2dit
