#include "s2dit/cli.hpp"

#include <chrono>
#include <cmath>
#include <filesystem>
#include <iomanip>

#include <json.hpp>

#include "s2dit/diffusion.hpp"
#include "s2dit/grad_check.hpp"
#include "s2dit/io.hpp"
#include "s2dit/streaming.hpp"

namespace s2dit {
namespace cli {

using nlohmann::json;

namespace {

double now_ms() {
    return std::chrono::duration<double, std::milli>(
               std::chrono::steady_clock::now().time_since_epoch())
        .count();
}

json load_config(const std::string& path) {
    if (path.empty()) return json::object();
    return json::parse(io::read_text(path));
}

void apply_overrides(json& cfg, const Overrides& ov) {
    if (ov.seed) cfg["seed"] = *ov.seed;
    if (ov.dtype) cfg["dtype"] = *ov.dtype;
    if (ov.out) cfg["out"] = *ov.out;
    if (ov.chunks) cfg["stream"]["chunks"] = *ov.chunks;
    if (ov.window) cfg["stream"]["window"] = *ov.window;
    if (ov.steps) {
        cfg["stream"]["steps"] = *ov.steps;
        cfg["distill"]["steps"] = *ov.steps;
    }
    if (ov.oracle) cfg["stream"]["oracle"] = *ov.oracle;
}

template <typename T>
T get_or(const json& j, const std::string& key, T fallback) {
    if (!j.contains(key)) return fallback;
    return j.at(key).get<T>();
}

std::string out_dir(const json& cfg, const std::string& command) {
    std::string dir = get_or<std::string>(cfg, "out", "runs/" + command);
    std::filesystem::create_directories(dir);
    return dir;
}

void write_manifest(const std::string& dir, const std::string& command, const json& cfg,
                    const json& extra) {
    json m;
    m["command"] = command;
    m["config"] = cfg;  // a run is reproducible from this echo alone
    m["outputs"] = extra;
    io::write_text(dir + "/manifest.json", m.dump(2) + "\n");
}

SandwichConfig model_config(const json& cfg) {
    if (!cfg.contains("model")) throw std::invalid_argument("config: missing 'model' section");
    SandwichConfig mc = sandwich_config_from_json_text(cfg.at("model").dump());
    if (cfg.contains("dtype")) mc.dtype = dtype_from_name(cfg.at("dtype").get<std::string>());
    return mc;
}

BudgetProfile budget_profile(const json& cfg) {
    if (!cfg.contains("budget")) throw std::invalid_argument("config: missing 'budget' section");
    const json& b = cfg.at("budget");
    for (const char* field : {"ell_lcha", "ell_ssa", "mem_lcha", "mem_ssa", "total_blocks",
                              "latency_budget", "memory_budget"}) {
        if (!b.contains(field)) {
            throw std::invalid_argument(std::string("config: budget missing field '") + field + "'");
        }
    }
    BudgetProfile p;
    p.ell_lcha = b.at("ell_lcha");
    p.ell_ssa = b.at("ell_ssa");
    p.mem_lcha = b.at("mem_lcha");
    p.mem_ssa = b.at("mem_ssa");
    p.total_blocks = b.at("total_blocks");
    p.latency_budget = b.at("latency_budget");
    p.memory_budget = b.at("memory_budget");
    return p;
}

SandwichLayout load_layout(const json& cfg) {
    if (cfg.contains("layout")) {
        return SandwichLayout::from_json(io::read_text(cfg.at("layout").get<std::string>()));
    }
    SandwichLayout layout;
    layout.cfg = model_config(cfg);
    if (cfg.contains("mask")) {
        layout.mask = cfg.at("mask").get<std::vector<int>>();
    } else {
        layout.mask.assign(layout.cfg.groups, 1);
    }
    return layout;
}

LatencyInputs latency_inputs(const json& cfg) {
    LatencyInputs in;
    if (cfg.contains("latency")) {
        const json& l = cfg.at("latency");
        in.text_encoder_ms = get_or(l, "text_ms", in.text_encoder_ms);
        in.dit_step_ms = get_or(l, "dit_step_ms", in.dit_step_ms);
        in.decoder_ms = get_or(l, "decoder_ms", in.decoder_ms);
        in.steps = get_or(l, "steps", in.steps);
        in.pixel_frames_per_chunk = get_or(l, "pixel_frames", in.pixel_frames_per_chunk);
    }
    return in;
}

// Negative-control fixture: identity forward with a 5%-off backward.
Tensor bad_identity(const Tensor& x) {
    Tensor out = x.detached_copy();
    if (grad_enabled() && (x.requires_grad || x.node)) {
        out.grad = std::make_shared<std::vector<double>>(out.numel(), 0.0);
        auto node = std::make_shared<Node>();
        node->op = "bad_identity";
        node->parents = {x};
        Tensor oh = out;
        oh.node = nullptr;
        Tensor px = x;
        node->backward = [oh, px]() mutable {
            const auto& g = *oh.grad;
            auto& gx = px.grad_ref();
            for (size_t i = 0; i < g.size(); ++i) gx[i] += 1.05 * g[i];
        };
        out.node = node;
    }
    return out;
}

// ---------------------------------------------------------------------------
// search
// ---------------------------------------------------------------------------

int cmd_search(json cfg, std::ostream& log) {
    const uint64_t seed = get_or<uint64_t>(cfg, "seed", 0);
    const std::string dir = out_dir(cfg, "search");
    SandwichConfig mc = model_config(cfg);
    BudgetProfile budget = budget_profile(cfg);

    Allocation alloc = allocate_blocks(budget);
    if (budget.total_blocks % mc.blocks_per_group != 0) {
        throw std::invalid_argument("config: total_blocks must be divisible by blocks_per_group");
    }
    mc.groups = budget.total_blocks / mc.blocks_per_group;
    const double lcha_groups_exact =
        static_cast<double>(alloc.n_lcha) / static_cast<double>(mc.blocks_per_group);
    long lcha_groups = std::lround(lcha_groups_exact);
    lcha_groups = std::clamp<long>(lcha_groups, 2, static_cast<long>(mc.groups));
    const size_t k_interior = static_cast<size_t>(lcha_groups) - 2;
    log << "allocation: N_LCHA=" << alloc.n_lcha << " N_SSA=" << alloc.n_ssa
        << " latency=" << alloc.latency_ms << "ms memory=" << alloc.memory_mb
        << "MB distance=" << alloc.distance << "\n";
    log << "groups M=" << mc.groups << " interior LCHA k=" << k_interior << "\n";

    Rng rng(seed);
    SandwichModel student;
    student.init(rng, mc, std::vector<int>{});

    TeacherFn teacher_fn;
    ReferenceModel ref_teacher;
    SandwichModel planted_teacher;
    const json teacher_cfg = cfg.contains("teacher") ? cfg.at("teacher") : json::object();
    const std::string teacher_type = get_or<std::string>(teacher_cfg, "type", "reference");
    if (teacher_type == "reference") {
        RefModelConfig rc;
        rc.grid = mc.grid;
        rc.c_latent = mc.c_latent;
        rc.c_model = mc.c_model;
        rc.heads = get_or<size_t>(teacher_cfg, "heads", mc.lcha.heads);
        rc.head_dim = get_or<size_t>(teacher_cfg, "head_dim", mc.lcha.head_dim);
        rc.blocks = budget.total_blocks;
        rc.mlp_ratio = mc.mlp_ratio;
        rc.cond_dim = mc.cond_dim;
        rc.c_text = mc.c_text;
        rc.rope = mc.rope;
        rc.dtype = mc.dtype;
        Rng trng = Rng(seed).fork(1);
        ref_teacher.init(trng, rc);
        const size_t inherited = student.inherit_from(ref_teacher);
        log << "inherited " << inherited << " tensors from the full-attention teacher\n";
        teacher_fn = [&ref_teacher](const Tensor& x, const std::vector<double>& t, const Tensor& c) {
            return ref_teacher.forward(x, t, c, Mode{});
        };
    } else if (teacher_type == "planted") {
        std::vector<int> planted = teacher_cfg.at("planted_mask").get<std::vector<int>>();
        Rng trng = Rng(seed).fork(1);
        planted_teacher.init(trng, mc, planted);
        // Student starts from the teacher weights; only the routing differs.
        NamedParams sp = student.params();
        NamedParams tp = planted_teacher.params();
        copy_named(sp, tp);
        teacher_fn = [&planted_teacher](const Tensor& x, const std::vector<double>& t, const Tensor& c) {
            return planted_teacher.forward(x, t, c, Mode{});
        };
    } else {
        throw std::invalid_argument("config: teacher.type must be 'reference' or 'planted'");
    }

    SearchSchedule sched;
    if (cfg.contains("search")) {
        const json& s = cfg.at("search");
        sched.steps = get_or<size_t>(s, "steps", sched.steps);
        sched.lr = get_or(s, "lr", sched.lr);
        sched.batch = get_or<size_t>(s, "batch", sched.batch);
        sched.temp_start = get_or(s, "temp_start", sched.temp_start);
        sched.temp_end = get_or(s, "temp_end", sched.temp_end);
        sched.train_weights = get_or(s, "train_weights", sched.train_weights);
    }
    sched.seed = seed;

    SearchResult result = search(student, k_interior, teacher_fn, sched);

    SandwichLayout layout;
    layout.cfg = mc;
    layout.mask = result.mask;
    layout.has_budget = true;
    layout.budget = budget;
    layout.has_alloc = true;
    layout.achieved = alloc;
    layout.seed = seed;
    layout.search_steps = result.trained ? sched.steps : 0;
    layout.final_loss = result.final_loss;
    io::write_text(dir + "/layout.json", layout.to_json());

    json report;
    report["mask"] = result.mask;
    report["final_loss"] = result.final_loss;
    report["loss_curve"] = result.loss_curve;
    report["interior_probs"] = result.interior_probs;
    report["achieved"] = {{"latency_ms", alloc.latency_ms}, {"memory_mb", alloc.memory_mb}};
    io::write_text(dir + "/report.json", report.dump(2) + "\n");

    log << "mask:";
    for (int m : result.mask) log << " " << m;
    log << "\nlayout written to " << dir << "/layout.json\n";
    write_manifest(dir, "search", cfg,
                   json{{"layout", dir + "/layout.json"},
                        {"report", dir + "/report.json"},
                        {"layout_hash", layout.hash()}});
    return kOk;
}

// ---------------------------------------------------------------------------
// bench
// ---------------------------------------------------------------------------

int cmd_bench(json cfg, std::ostream& log) {
    const uint64_t seed = get_or<uint64_t>(cfg, "seed", 0);
    const std::string dir = out_dir(cfg, "bench");
    SandwichLayout layout = load_layout(cfg);
    const SandwichConfig& mc = layout.cfg;
    const size_t reps = cfg.contains("bench") ? get_or<size_t>(cfg.at("bench"), "reps", 5) : 5;

    Rng rng(seed);
    LchaBlock lcha;
    lcha.init(rng, mc.c_model, mc.cond_dim, mc.lcha, mc.mlp_ratio, mc.dtype);
    SsaConfig ssa_cfg{mc.stride, mc.ssa_heads, mc.ssa_head_dim, mc.rope};
    SsaBlock ssa;
    ssa.init(rng, mc.c_model, mc.cond_dim, ssa_cfg, mc.mlp_ratio, mc.dtype);
    AttnBlock full;
    full.init(rng, mc.c_model, mc.cond_dim, mc.lcha.heads, mc.lcha.head_dim, mc.rope, mc.mlp_ratio,
              mc.dtype);

    const TokenGrid grid = mc.grid;
    Tensor x = rng.randn({grid.len(), mc.c_model}, mc.dtype);
    Conditioner conditioner;
    conditioner.init(rng, mc.cond_dim, mc.c_text, mc.dtype);
    Tensor c_text = rng.randn({mc.c_text}, mc.dtype);
    CondCtx cond = conditioner.build(std::vector<double>(grid.t, 0.5), c_text, grid);

    struct Row {
        std::string name;
        double ms;
        size_t attn_tokens;
    };
    std::vector<Row> rows;
    auto bench_one = [&](const std::string& name, size_t tokens, auto&& fn) {
        NoGradGuard ng;
        fn();  // warmup
        const double t0 = now_ms();
        for (size_t r = 0; r < reps; ++r) fn();
        rows.push_back({name, (now_ms() - t0) / static_cast<double>(reps), tokens});
    };

    const size_t low_tokens = grid.len() / (mc.stride * mc.stride);
    bench_one("lcha", grid.len(), [&] { (void)lcha.forward(x, grid, cond, Mode{}); });
    bench_one("ssa", low_tokens, [&] { (void)ssa.forward(x, grid, cond, Mode{}); });
    bench_one("full_attention", grid.len(), [&] { (void)full.forward(x, grid, cond, Mode{}); });
    {
        Tensor q = rng.randn({grid.len(), mc.lcha.head_dim}, mc.dtype);
        Tensor k = rng.randn({grid.len(), mc.lcha.head_dim}, mc.dtype);
        Tensor v = rng.randn({grid.len(), mc.lcha.head_dim}, mc.dtype);
        bench_one("kv_compress", grid.len(), [&] {
            NoGradGuard ng;
            (void)kv_compress_attention(q, k, v, grid, mc.stride);
        });
    }

    LatencyReport projection = latency_model(latency_inputs(cfg));

    log << std::left << std::setw(16) << "block" << std::setw(12) << "ms/block" << "attn_tokens\n";
    for (const auto& r : rows) {
        log << std::left << std::setw(16) << r.name << std::setw(12) << std::fixed
            << std::setprecision(3) << r.ms << r.attn_tokens << "\n";
    }
    log << "projection: chunk_ms=" << projection.chunk_ms << " fps=" << std::setprecision(1)
        << projection.fps_rounded << "\n";

    json out;
    out["rows"] = json::array();
    for (const auto& r : rows)
        out["rows"].push_back({{"block", r.name}, {"ms", r.ms}, {"attn_tokens", r.attn_tokens}});
    out["projection"] = {{"chunk_ms", projection.chunk_ms},
                         {"fps", projection.fps},
                         {"fps_rounded", projection.fps_rounded}};
    io::write_text(dir + "/bench.json", out.dump(2) + "\n");
    write_manifest(dir, "bench", cfg, json{{"bench", dir + "/bench.json"}});
    return kOk;
}

// ---------------------------------------------------------------------------
// stream-sim
// ---------------------------------------------------------------------------

int cmd_stream_sim(json cfg, std::ostream& log) {
    const uint64_t seed = get_or<uint64_t>(cfg, "seed", 0);
    const std::string dir = out_dir(cfg, "stream-sim");
    SandwichLayout layout = load_layout(cfg);
    const json stream_cfg = cfg.contains("stream") ? cfg.at("stream") : json::object();
    const size_t chunks = get_or<size_t>(stream_cfg, "chunks", 4);
    const size_t window = get_or<size_t>(stream_cfg, "window", 2);
    const size_t steps = get_or<size_t>(stream_cfg, "steps", 4);
    const size_t frames = get_or<size_t>(stream_cfg, "frames_per_chunk", 3);
    const bool oracle = get_or(stream_cfg, "oracle", false);

    Rng rng(seed);
    SandwichModel model;
    model.init(rng, layout.cfg, layout.mask);
    if (cfg.contains("weights")) {
        NamedParams p = model.params();
        io::load_checkpoint(cfg.at("weights").get<std::string>(), p);
    }

    ChunkPlan plan{frames, steps, TokenGrid{frames, layout.cfg.grid.h, layout.cfg.grid.w}, chunks};
    StreamEngine engine(model, plan, window);
    Tensor c_text = Rng(seed).fork(999).randn({layout.cfg.c_text});

    std::vector<Tensor> noises;
    for (size_t c = 0; c < chunks; ++c) {
        noises.push_back(Rng(seed).fork(c + 1).randn({plan.chunk_grid.len(), layout.cfg.c_latent}));
    }

    std::vector<Tensor> latents;
    json chunk_meta = json::array();
    for (size_t c = 0; c < chunks; ++c) {
        const double t0 = now_ms();
        Tensor latent = engine.step(noises[c], c_text);
        const double wall = now_ms() - t0;
        latent.dtype = layout.cfg.dtype;
        char name[32];
        std::snprintf(name, sizeof(name), "chunk_%03zu.s2tn", c);
        io::save_s2tn(dir + "/" + name, latent);
        CacheFootprint fp = engine.measured_footprint();
        chunk_meta.push_back({{"file", name},
                              {"wall_ms", wall},
                              {"lin_state_bytes", fp.lin_state_bytes},
                              {"conv_ring_bytes", fp.conv_ring_bytes},
                              {"ssa_kv_bytes", fp.ssa_kv_bytes}});
        latents.push_back(latent);
        log << name << " wall=" << wall << "ms lin=" << fp.lin_state_bytes
            << "B conv=" << fp.conv_ring_bytes << "B kv=" << fp.ssa_kv_bytes << "B\n";
    }

    double max_dev = 0.0;
    if (oracle) {
        std::vector<Tensor> ref = stream_reference(model, plan, noises, c_text);
        for (size_t c = 0; c < chunks; ++c) {
            for (size_t i = 0; i < ref[c].numel(); ++i) {
                const double a = latents[c].at(i), b = ref[c].at(i);
                const double dev = std::fabs(a - b) / std::max({std::fabs(a), std::fabs(b), 1e-9});
                max_dev = std::max(max_dev, dev);
            }
        }
        log << "oracle max relative deviation: " << std::scientific << max_dev << "\n";
    }

    json extra;
    extra["chunks"] = chunk_meta;
    extra["layout_hash"] = layout.hash();
    extra["plan"] = {{"frames_per_chunk", frames}, {"steps", steps}, {"window", window},
                     {"total_chunks", chunks}};
    if (oracle) extra["oracle_max_rel_dev"] = max_dev;
    write_manifest(dir, "stream-sim", cfg, extra);
    return kOk;
}

// ---------------------------------------------------------------------------
// cache-build / distill
// ---------------------------------------------------------------------------

int cmd_cache_build(json cfg, std::ostream& log) {
    const uint64_t seed = get_or<uint64_t>(cfg, "seed", 0);
    const std::string dir = out_dir(cfg, "cache");
    SandwichConfig mc = model_config(cfg);
    const json cache_cfg = cfg.contains("cache") ? cfg.at("cache") : json::object();

    RefModelConfig rc;
    rc.grid = mc.grid;
    rc.c_latent = mc.c_latent;
    rc.c_model = mc.c_model;
    rc.heads = mc.lcha.heads;
    rc.head_dim = mc.lcha.head_dim;
    rc.blocks = get_or<size_t>(cache_cfg, "teacher_blocks", 2);
    rc.mlp_ratio = mc.mlp_ratio;
    rc.cond_dim = mc.cond_dim;
    rc.c_text = mc.c_text;
    rc.rope = mc.rope;
    rc.dtype = mc.dtype;
    Rng trng = Rng(seed).fork(1);
    ReferenceModel teacher;
    teacher.init(trng, rc);

    KdCacheConfig kc;
    kc.samples = get_or<size_t>(cache_cfg, "samples", 512);
    kc.grid = mc.grid;
    kc.c_latent = mc.c_latent;
    kc.c_text = mc.c_text;
    kc.two_expert = get_or(cache_cfg, "two_expert", false);
    kc.t_dist = get_or<std::string>(cache_cfg, "t_dist", "uniform");
    kc.seed = seed;
    kc.workers = get_or<size_t>(cache_cfg, "workers", 1);

    const std::string cache_path = dir + "/kd_cache.s2kd";
    VelocityFn fn = [&teacher](const Tensor& x, const std::vector<double>& t, const Tensor& c) {
        NoGradGuard ng;
        return teacher.forward(x, t, c, Mode{});
    };
    build_kd_cache(fn, kc, cache_path);
    NamedParams tp = teacher.params();
    io::save_checkpoint(dir + "/teacher_ckpt", tp);

    log << "cache written: " << cache_path << " (" << kc.samples * (kc.two_expert ? 2 : 1)
        << " tuples)\n";
    write_manifest(dir, "cache-build", cfg,
                   json{{"cache", cache_path}, {"teacher_ckpt", dir + "/teacher_ckpt"}});
    return kOk;
}

int cmd_distill(json cfg, std::ostream& log) {
    const uint64_t seed = get_or<uint64_t>(cfg, "seed", 0);
    const std::string dir = out_dir(cfg, "distill");
    const json d = cfg.contains("distill") ? cfg.at("distill") : json::object();
    if (!d.contains("cache")) {
        throw std::invalid_argument("config: distill.cache path required (run cache-build first)");
    }
    std::vector<DiffusionTuple> tuples = load_kd_cache(d.at("cache").get<std::string>());
    if (tuples.empty()) throw std::runtime_error("distill: empty cache");
    const bool two_expert = tuples.front().expert != ExpertTag::single;

    SandwichLayout layout = load_layout(cfg);
    Rng rng(seed);
    SandwichModel student;
    student.init(rng, layout.cfg, layout.mask);
    if (d.contains("init_from")) {
        NamedParams p = student.params();
        io::load_checkpoint(d.at("init_from").get<std::string>(), p);
    }

    const size_t steps = get_or<size_t>(d, "steps", 200);
    const size_t batch = get_or<size_t>(d, "batch", 8);
    const double lr = get_or(d, "lr", 1e-2);
    const bool use_ema = get_or(d, "ema", false);

    NamedParams params = student.params();
    std::vector<Tensor> opt_params;
    for (auto& [name, t] : params.items) opt_params.push_back(t);
    Adam opt(opt_params, lr);
    std::unique_ptr<Ema> ema;
    if (use_ema) ema = std::make_unique<Ema>(opt_params, 0.99);

    const TokenGrid grid = layout.cfg.grid;
    auto student_fn = [&](const Tensor& x_t, double t, const Tensor& c_text) {
        std::vector<double> t_frames(grid.t, t);
        return student.forward(x_t, t_frames, c_text, Mode{});
    };

    auto eval_loss = [&](size_t limit) {
        NoGradGuard ng;
        const size_t n = std::min(limit, two_expert ? tuples.size() / 2 : tuples.size());
        double acc = 0.0;
        if (two_expert) {
            auto pairs = pair_experts(tuples);
            std::vector<std::pair<DiffusionTuple, DiffusionTuple>> sub(pairs.begin(),
                                                                       pairs.begin() + n);
            acc = kd_loss_two_expert(sub, student_fn).at(0);
        } else {
            for (size_t i = 0; i < n; ++i) {
                acc += kd_loss(student_fn(tuples[i].x_t, tuples[i].t, tuples[i].c_text),
                               tuples[i].velocity)
                           .at(0);
            }
            acc /= static_cast<double>(n);
        }
        return acc;
    };

    const size_t eval_n = 64;
    const double initial_loss = eval_loss(eval_n);
    std::vector<double> curve;
    std::vector<std::pair<DiffusionTuple, DiffusionTuple>> pairs;
    if (two_expert) pairs = pair_experts(tuples);

    for (size_t step = 0; step < steps; ++step) {
        opt.zero_grad();
        Tensor loss;
        if (two_expert) {
            std::vector<std::pair<DiffusionTuple, DiffusionTuple>> mb;
            for (size_t b = 0; b < batch; ++b) mb.push_back(pairs[rng.index(pairs.size())]);
            loss = kd_loss_two_expert(mb, student_fn);
        } else {
            for (size_t b = 0; b < batch; ++b) {
                const DiffusionTuple& rec = tuples[rng.index(tuples.size())];
                Tensor l = kd_loss(student_fn(rec.x_t, rec.t, rec.c_text), rec.velocity);
                loss = loss.defined() ? ops::add(loss, l) : l;
            }
            loss = ops::scale(loss, 1.0 / static_cast<double>(batch));
        }
        if (!std::isfinite(loss.at(0))) throw std::runtime_error("distill: non-finite loss");
        backward(loss);
        opt.step();
        if (ema) ema->update(opt_params);
        curve.push_back(loss.at(0));
    }

    const double final_loss = eval_loss(eval_n);
    io::save_checkpoint(dir + "/student_ckpt", params);
    if (ema) {
        std::vector<Tensor> shadow_params = opt_params;
        NamedParams saved = student.params();
        std::vector<std::vector<double>> backup;
        for (auto& t : opt_params) backup.push_back(*t.data);
        ema->copy_to(shadow_params);
        io::save_checkpoint(dir + "/student_ckpt_ema", saved);
        for (size_t i = 0; i < opt_params.size(); ++i) *opt_params[i].data = backup[i];
    }
    json curve_json;
    curve_json["train_curve"] = curve;
    curve_json["initial_loss"] = initial_loss;
    curve_json["final_loss"] = final_loss;
    io::write_text(dir + "/loss_curve.json", curve_json.dump(2) + "\n");

    log << "kd_loss: initial=" << initial_loss << " final=" << final_loss
        << " ratio=" << (initial_loss > 0 ? final_loss / initial_loss : 0.0) << "\n";
    write_manifest(dir, "distill", cfg,
                   json{{"student_ckpt", dir + "/student_ckpt"},
                        {"loss_curve", dir + "/loss_curve.json"},
                        {"initial_loss", initial_loss},
                        {"final_loss", final_loss}});
    return kOk;
}

// ---------------------------------------------------------------------------
// grad-check
// ---------------------------------------------------------------------------

int cmd_grad_check(json cfg, std::ostream& log, bool negative_control) {
    const uint64_t seed = get_or<uint64_t>(cfg, "seed", 0);
    const double tol = get_or(cfg, "tol", 1e-4);
    if (cfg.contains("dtype") && cfg.at("dtype").get<std::string>() == "f32") {
        log << "warning: float32 requested; gradient checking runs in float64\n";
    }

    bool all_ok = true;
    Rng rng(seed);
    for (const auto& op : op_gradient_registry()) {
        GradCheckResult r = op.run(rng, tol);
        log << (r.pass ? "[PASS] " : "[FAIL] ") << std::left << std::setw(28) << r.name
            << " max_rel_err=" << std::scientific << r.max_rel_err << "\n";
        all_ok = all_ok && r.pass;
    }

    // End-to-end sandwich group: input plus every parameter of a small
    // high->low->high routed model.
    {
        SandwichConfig mc;
        mc.grid = TokenGrid{1, 4, 4};
        mc.c_latent = 2;
        mc.c_model = 2;
        mc.cond_dim = 4;
        mc.c_text = 2;
        mc.mlp_ratio = 2;
        mc.groups = 3;
        mc.blocks_per_group = 1;
        mc.stride = 2;
        mc.lcha.heads = 1;
        mc.lcha.head_dim = 2;
        mc.lcha.qk_norm = true;
        mc.lcha.rope = true;
        mc.ssa_heads = 1;
        mc.ssa_head_dim = 4;
        Rng mrng = Rng(seed).fork(17);
        SandwichModel model;
        model.init(mrng, mc, {1, 0, 1});
        NamedParams mp = model.params();
        std::vector<Tensor> inputs;
        inputs.push_back(mrng.randn({mc.grid.len(), mc.c_latent}));
        for (auto& [name, t] : mp.items) inputs.push_back(t);
        Tensor c_text = mrng.randn({mc.c_text});
        auto fn = [&model, &mc, c_text](const std::vector<Tensor>& in) {
            return model.forward(in[0], std::vector<double>(mc.grid.t, 0.3), c_text, Mode{});
        };
        GradCheckResult r = grad_check("sandwich_group_e2e", fn, inputs, tol);
        log << (r.pass ? "[PASS] " : "[FAIL] ") << std::left << std::setw(28) << r.name
            << " max_rel_err=" << std::scientific << r.max_rel_err << "\n";
        all_ok = all_ok && r.pass;
    }

    if (negative_control) {
        Rng nrng = Rng(seed).fork(23);
        std::vector<Tensor> in{nrng.randn({3, 3})};
        GradCheckResult r = grad_check(
            "bad_identity(control)",
            [](const std::vector<Tensor>& v) { return bad_identity(v[0]); }, in, tol);
        log << (r.pass ? "[FAIL] " : "[PASS] ") << std::left << std::setw(28) << r.name
            << " max_rel_err=" << std::scientific << r.max_rel_err
            << (r.pass ? " (corrupted vjp went undetected)" : " (correctly rejected)") << "\n";
        all_ok = all_ok && !r.pass;
    }

    return all_ok ? kOk : kError;
}

// ---------------------------------------------------------------------------
// attn-dump
// ---------------------------------------------------------------------------

int cmd_attn_dump(json cfg, std::ostream& log) {
    const uint64_t seed = get_or<uint64_t>(cfg, "seed", 0);
    const std::string dir = out_dir(cfg, "attn-dump");
    SandwichLayout layout = load_layout(cfg);
    const json a = cfg.contains("attn_dump") ? cfg.at("attn_dump") : json::object();
    const size_t l_cap = get_or<size_t>(a, "l_cap", 4096);
    const TokenGrid grid = layout.cfg.grid;
    if (grid.len() > l_cap) {
        throw std::invalid_argument("attn-dump: L=" + std::to_string(grid.len()) +
                                    " exceeds memory guard cap " + std::to_string(l_cap));
    }

    Rng rng(seed);
    SandwichModel model;
    model.init(rng, layout.cfg, layout.mask);
    if (cfg.contains("weights")) {
        NamedParams p = model.params();
        io::load_checkpoint(cfg.at("weights").get<std::string>(), p);
    }
    Tensor x_latent = a.contains("input")
                          ? io::load_s2tn(a.at("input").get<std::string>())
                          : Rng(seed).fork(3).randn({grid.len(), layout.cfg.c_latent});

    // First LCHA group's first block, fed the model-width tokens.
    const LchaBlock* block = nullptr;
    for (size_t g = 0; g < model.groups.size(); ++g) {
        if (model.mask[g] == 1) {
            block = &model.groups[g].f_l.front();
            break;
        }
    }
    if (block == nullptr) throw std::runtime_error("attn-dump: layout has no LCHA group");

    NoGradGuard ng;
    Tensor c_text = Rng(seed).fork(4).randn({layout.cfg.c_text});
    CondCtx cond = model.conditioner.build(std::vector<double>(grid.t, 0.5), c_text, grid);
    Tensor tokens = ops::add_rowwise(ops::matmul(x_latent, model.w_in), model.b_in);
    std::vector<Tensor> maps = block->attention_maps(tokens, grid, cond);
    json files = json::array();
    for (size_t h = 0; h < maps.size(); ++h) {
        char name[32];
        std::snprintf(name, sizeof(name), "attn_head%02zu.s2tn", h);
        io::save_s2tn(dir + "/" + name, maps[h]);
        files.push_back(name);
        log << "wrote " << name << " (" << maps[h].dim(0) << "x" << maps[h].dim(1) << ")\n";
    }
    write_manifest(dir, "attn-dump", cfg, json{{"maps", files}});
    return kOk;
}

}  // namespace

int run_command(const std::string& command, const std::string& config_path, const Overrides& ov,
                std::ostream& log) {
    try {
        json cfg;
        try {
            cfg = load_config(config_path);
        } catch (const json::exception& e) {
            log << "config error: " << e.what() << "\n";
            return kConfigError;
        }
        apply_overrides(cfg, ov);
        if (command == "search") return cmd_search(cfg, log);
        if (command == "bench") return cmd_bench(cfg, log);
        if (command == "stream-sim") return cmd_stream_sim(cfg, log);
        if (command == "distill") return cmd_distill(cfg, log);
        if (command == "grad-check") return cmd_grad_check(cfg, log, ov.negative_control);
        if (command == "attn-dump") return cmd_attn_dump(cfg, log);
        if (command == "cache-build") return cmd_cache_build(cfg, log);
        log << "unknown command: " << command << "\n";
        return kConfigError;
    } catch (const InfeasibleBudgetError& e) {
        log << "infeasible: " << e.what() << "\n";
        return kInfeasible;
    } catch (const nlohmann::json::exception& e) {
        log << "config error: " << e.what() << "\n";
        return kConfigError;
    } catch (const std::invalid_argument& e) {
        log << "config error: " << e.what() << "\n";
        return kConfigError;
    } catch (const std::runtime_error& e) {
        const std::string msg = e.what();
        log << "error: " << msg << "\n";
        if (msg.find("non-finite") != std::string::npos ||
            msg.find("degenerate") != std::string::npos) {
            return kNumeric;
        }
        return kError;
    }
}

}  // namespace cli
}  // namespace s2dit
