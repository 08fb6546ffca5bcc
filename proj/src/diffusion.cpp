#include "s2dit/diffusion.hpp"

#include <cmath>
#include <cstring>
#include <thread>

#include "s2dit/io.hpp"

namespace s2dit {

using namespace ops;

Tensor forward_noise(const Tensor& x0, double t, const Tensor& eps) {
    if (t < 0.0 || t > 1.0) {
        throw std::invalid_argument("forward_noise: t must lie in [0,1], got " + std::to_string(t));
    }
    if (!same_shape(x0, eps)) throw std::invalid_argument("forward_noise: shape mismatch");
    return add(scale(x0, 1.0 - t), scale(eps, t));
}

Tensor fm_loss(const Tensor& pred_v, const Tensor& x0, const Tensor& eps) {
    if (!same_shape(pred_v, x0) || !same_shape(x0, eps)) {
        throw std::invalid_argument("fm_loss: shape mismatch");
    }
    return mse(sub(eps, x0), pred_v);
}

Tensor kd_loss(const Tensor& student_v, const Tensor& teacher_v) {
    if (!same_shape(student_v, teacher_v)) throw std::invalid_argument("kd_loss: shape mismatch");
    return mse(student_v, teacher_v);
}

Tensor kd_loss_two_expert(const std::vector<std::pair<DiffusionTuple, DiffusionTuple>>& pairs,
                          const StudentFn& student, double w_l, double w_h) {
    if (pairs.empty()) throw std::invalid_argument("kd_loss_two_expert: empty batch");
    Tensor low_loss, high_loss;
    for (const auto& [low, high] : pairs) {
        if (low.expert != ExpertTag::low || high.expert != ExpertTag::high) {
            throw std::invalid_argument("kd_loss_two_expert: missing expert tuple in pair");
        }
        Tensor ll = kd_loss(student(low.x_t, low.t, low.c_text), low.velocity);
        Tensor hl = kd_loss(student(high.x_t, high.t, high.c_text), high.velocity);
        low_loss = low_loss.defined() ? add(low_loss, ll) : ll;
        high_loss = high_loss.defined() ? add(high_loss, hl) : hl;
    }
    const double inv = 1.0 / static_cast<double>(pairs.size());
    return add(scale(low_loss, w_l * inv), scale(high_loss, w_h * inv));
}

std::vector<std::pair<DiffusionTuple, DiffusionTuple>> pair_experts(
    const std::vector<DiffusionTuple>& tuples) {
    std::vector<std::pair<DiffusionTuple, DiffusionTuple>> pairs;
    size_t i = 0;
    while (i < tuples.size()) {
        if (i + 1 >= tuples.size()) {
            throw std::runtime_error("pair_experts: dangling record, missing expert tuple");
        }
        const DiffusionTuple& a = tuples[i];
        const DiffusionTuple& b = tuples[i + 1];
        if (a.expert == ExpertTag::low && b.expert == ExpertTag::high) {
            pairs.emplace_back(a, b);
        } else if (a.expert == ExpertTag::high && b.expert == ExpertTag::low) {
            pairs.emplace_back(b, a);
        } else {
            throw std::runtime_error("pair_experts: missing expert tuple at record " +
                                     std::to_string(i));
        }
        i += 2;
    }
    return pairs;
}

// ---------------------------------------------------------------------------
// Cache build / load
// ---------------------------------------------------------------------------

namespace {

double draw_t(Rng& rng, const std::string& dist) {
    if (dist == "uniform") return rng.uniform();
    if (dist == "logit_normal") {
        const double z = rng.normal();
        return 1.0 / (1.0 + std::exp(-z));
    }
    throw std::invalid_argument("build_kd_cache: unknown t distribution '" + dist + "'");
}

DiffusionTuple build_tuple(const VelocityFn& teacher, const KdCacheConfig& cfg, Rng rng, double t,
                          const Tensor& x0, const Tensor& c_text, ExpertTag tag) {
    DiffusionTuple rec;
    rec.t = t;
    rec.expert = tag;
    rec.c_text = c_text;
    rec.noise = rng.randn({cfg.grid.len(), cfg.c_latent});
    rec.x_t = forward_noise(x0, t, rec.noise);
    // Consistency check of the straight-line interpolant at build time.
    for (size_t i = 0; i < rec.x_t.numel(); ++i) {
        const double expect = (1.0 - t) * x0.at(i) + t * rec.noise.at(i);
        if (rec.x_t.at(i) != expect) throw std::runtime_error("build_kd_cache: interpolant mismatch");
    }
    std::vector<double> t_frames(cfg.grid.t, t);
    rec.velocity = teacher(rec.x_t, t_frames, rec.c_text);
    check_finite("build_kd_cache.teacher", rec.velocity);
    return rec;
}

void append_tensor(std::vector<uint8_t>& buf, const Tensor& t) {
    auto enc = io::encode_s2tn(t);
    buf.insert(buf.end(), enc.begin(), enc.end());
}

}  // namespace

void build_kd_cache(const VelocityFn& teacher, const KdCacheConfig& cfg, const std::string& path) {
    const size_t records_per_sample = cfg.two_expert ? 2 : 1;
    std::vector<DiffusionTuple> records(cfg.samples * records_per_sample);

    auto build_sample = [&](size_t s) {
        Rng rng = Rng(cfg.seed).fork(s);
        Tensor x0 = rng.randn({cfg.grid.len(), cfg.c_latent});
        Tensor c_text = rng.randn({cfg.c_text});
        if (cfg.two_expert) {
            const double t_low = draw_t(rng, cfg.t_dist) * cfg.expert_split;
            const double t_high = cfg.expert_split + draw_t(rng, cfg.t_dist) * (1.0 - cfg.expert_split);
            records[2 * s] = build_tuple(teacher, cfg, rng.fork(1), t_low, x0, c_text, ExpertTag::low);
            records[2 * s + 1] =
                build_tuple(teacher, cfg, rng.fork(2), t_high, x0, c_text, ExpertTag::high);
        } else {
            const double t = draw_t(rng, cfg.t_dist);
            records[s] = build_tuple(teacher, cfg, rng.fork(1), t, x0, c_text, ExpertTag::single);
        }
    };

    const size_t workers = std::min(std::max<size_t>(cfg.workers, 1), io::thread_cap());
    if (workers <= 1) {
        for (size_t s = 0; s < cfg.samples; ++s) build_sample(s);
    } else {
        // Per-sample rng substreams keep the merged cache byte-identical for
        // any worker count.
        std::vector<std::thread> pool;
        for (size_t w = 0; w < workers; ++w) {
            pool.emplace_back([&, w] {
                NoGradGuard ng;
                for (size_t s = w; s < cfg.samples; s += workers) build_sample(s);
            });
        }
        for (auto& th : pool) th.join();
    }

    std::vector<uint8_t> buf;
    buf.push_back('S');
    buf.push_back('2');
    buf.push_back('K');
    buf.push_back('D');
    io::put_u8(buf, 1);
    io::put_u64(buf, records.size());
    for (const auto& rec : records) {
        io::put_u8(buf, static_cast<uint8_t>(rec.expert));
        io::put_f64(buf, rec.t);
        append_tensor(buf, rec.noise);
        append_tensor(buf, rec.x_t);
        append_tensor(buf, rec.velocity);
        append_tensor(buf, rec.c_text);
    }
    io::write_file(path, buf);
}

std::vector<DiffusionTuple> load_kd_cache(const std::string& path) {
    auto bytes = io::read_file(path);
    if (bytes.size() < 13 || std::memcmp(bytes.data(), "S2KD", 4) != 0) {
        throw std::runtime_error("KD cache: bad magic in " + path);
    }
    io::Reader r{bytes.data(), bytes.size(), 4};
    const uint8_t version = r.u8();
    if (version != 1) throw std::runtime_error("KD cache: unsupported version");
    const uint64_t count = r.u64();
    std::vector<DiffusionTuple> out;
    out.reserve(count);
    for (uint64_t i = 0; i < count; ++i) {
        DiffusionTuple rec;
        const uint8_t tag = r.u8();
        if (tag > 2) throw std::runtime_error("KD cache: bad expert tag");
        rec.expert = static_cast<ExpertTag>(tag);
        rec.t = r.f64();
        size_t used = 0;
        rec.noise = io::decode_s2tn(bytes.data() + r.pos, bytes.size() - r.pos, &used);
        r.pos += used;
        rec.x_t = io::decode_s2tn(bytes.data() + r.pos, bytes.size() - r.pos, &used);
        r.pos += used;
        rec.velocity = io::decode_s2tn(bytes.data() + r.pos, bytes.size() - r.pos, &used);
        r.pos += used;
        rec.c_text = io::decode_s2tn(bytes.data() + r.pos, bytes.size() - r.pos, &used);
        r.pos += used;
        out.push_back(std::move(rec));
    }
    return out;
}

// ---------------------------------------------------------------------------
// Adversarial objectives
// ---------------------------------------------------------------------------

std::pair<Tensor, Tensor> rpgan_losses(const Tensor& d_real, const Tensor& d_fake) {
    if (d_real.rank() != 1 || d_fake.rank() != 1 || d_real.dim(0) != d_fake.dim(0)) {
        throw std::invalid_argument("rpgan_losses: score length mismatch");
    }
    Tensor diff = sub(d_real, d_fake);
    Tensor l_d = mean_all(softplus(scale(diff, -1.0)));
    Tensor l_g = mean_all(softplus(diff));
    return {l_d, l_g};
}

namespace {

Tensor unit_perturbation(const Tensor& like, double eps_r, Rng& rng, const Tensor* direction) {
    Tensor delta;
    if (direction != nullptr) {
        if (!same_shape(*direction, like)) {
            throw std::invalid_argument("r_penalties: direction shape mismatch");
        }
        delta = direction->detached_copy();
    } else {
        delta = rng.randn(like.shape);
    }
    // Normalize per sample (row) to norm eps_r.
    const size_t b = delta.dim(0);
    const size_t d = delta.numel() / b;
    for (size_t i = 0; i < b; ++i) {
        double norm = 0.0;
        for (size_t j = 0; j < d; ++j) norm += delta.at(i * d + j) * delta.at(i * d + j);
        norm = std::sqrt(norm);
        const double s = norm > 0 ? eps_r / norm : 0.0;
        for (size_t j = 0; j < d; ++j) delta.at(i * d + j) *= s;
    }
    return delta;
}

}  // namespace

std::pair<Tensor, Tensor> r_penalties(const ScorerFn& scorer, const Tensor& x_real,
                                      const Tensor& x_fake, double eps_r, double gamma, Rng& rng,
                                      const Tensor* direction) {
    if (eps_r <= 0.0) throw std::invalid_argument("r_penalties: eps_r must be positive");
    if (x_real.rank() < 2 || x_fake.rank() < 2) {
        throw std::invalid_argument("r_penalties: batched inputs required");
    }
    const double coeff = gamma / (2.0 * eps_r);
    auto penalty = [&](const Tensor& x) {
        Tensor delta = unit_perturbation(x, eps_r, rng, direction);
        Tensor shifted = add(x, delta);
        return scale(mean_all(sub(scorer(shifted), scorer(x))), coeff);
    };
    Tensor r1 = penalty(x_real);
    Tensor r2 = penalty(x_fake);
    return {r1, r2};
}

Tensor euler_flow_sample(const FlowModelFn& model, const Tensor& x_noise, size_t steps,
                         const Tensor& c_text) {
    if (steps < 1) throw std::invalid_argument("euler_flow_sample: steps must be >= 1");
    NoGradGuard ng;
    Tensor x = x_noise.detached_copy();
    const double dt = 1.0 / static_cast<double>(steps);
    for (size_t s = 0; s < steps; ++s) {
        const double t = 1.0 - static_cast<double>(s) * dt;
        Tensor v = model(x, t, c_text);
        if (!same_shape(v, x)) throw std::runtime_error("euler_flow_sample: velocity shape mismatch");
        x = sub(x, scale(v, dt));
        check_finite("euler_flow_sample", x);
    }
    return x;
}

}  // namespace s2dit
