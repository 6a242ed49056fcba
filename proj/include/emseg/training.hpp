// Training loop, multitask loss, Adam, and checkpointing.
//
// The joint objective is lambda * L_cls + (1 - lambda) * L_seg, built from
// scaled adds so the endpoints are exact: lambda = 1 reproduces the pure
// classification loss bit for bit and sends exact zeros through the
// segmentation branch.
#pragma once

#include <cstring>
#include <fstream>
#include <functional>
#include <map>

#include "emseg/data.hpp"

namespace emseg {

struct TrainConfig {
    double learning_rate = 1e-3;
    int max_iterations = 2000;
    double lambda = 0.5;   // classification share of the joint loss
    int batch_size = 4;
    double alpha = 0.9;    // base moving average; consumed at model build time
    uint64_t seed = 0;
    int checkpoint_every = 0;  // 0 disables periodic checkpoints
    int eval_every = 0;        // 0 disables the eval hook
    int log_every = 10;
    bool augment = true;
    std::vector<double> class_weights;  // optional CE weights, empty = unweighted

    void validate() const {
        if (!(learning_rate > 0.0)) throw ConfigError("train: learning_rate must be > 0");
        if (max_iterations < 1) throw ConfigError("train: max_iterations must be >= 1");
        if (batch_size < 1) throw ConfigError("train: batch_size must be >= 1");
        if (lambda < 0.0 || lambda > 1.0) throw ConfigError("train: lambda must lie in [0,1]");
        if (alpha < 0.0 || alpha > 1.0) throw ConfigError("train: alpha must lie in [0,1]");
        if (checkpoint_every < 0 || eval_every < 0 || log_every < 1)
            throw ConfigError("train: invalid cadence");
        if (!class_weights.empty() && class_weights.size() != 2)
            throw ConfigError("train: class_weights must have one entry per class");
    }
};

template <class R>
struct LossParts {
    Tensor<R> total, cls, seg;
};

// Joint loss for one sample: image-level CE plus pixel-level CE.
template <class R>
LossParts<R> multitask_loss(const Tensor<R>& cls_logits, int label, const Tensor<R>& seg_logits,
                            const std::vector<uint8_t>& mask, double lambda,
                            const std::vector<double>& class_weights = {}) {
    require_shape(cls_logits.numel() == 2,
                  "loss: cls logits must have 2 entries, got " + shape_str(cls_logits.shape()));
    require_shape(seg_logits.ndim() == 3 && seg_logits.dim(0) == 2,
                  "loss: seg logits must be [2,H,W], got " + shape_str(seg_logits.shape()));
    const size_t n_px = static_cast<size_t>(seg_logits.dim(1)) * seg_logits.dim(2);
    if (mask.size() != n_px)
        throw ShapeError("loss: mask has " + std::to_string(mask.size()) + " pixels, seg logits " +
                         std::to_string(n_px));

    LossParts<R> parts;
    parts.cls = cross_entropy_from_logits(reshape(cls_logits, {1, 2}), std::vector<int>{label},
                                          class_weights);
    std::vector<int> targets(mask.begin(), mask.end());
    parts.seg = cross_entropy_from_logits(flatten_spatial(seg_logits), targets, class_weights);
    parts.total = add(scale(parts.cls, static_cast<R>(lambda)),
                      scale(parts.seg, static_cast<R>(1.0 - lambda)));
    return parts;
}

// ---------------------------------------------------------------------------
// Adam

template <class R>
struct AdamState {
    double beta1 = 0.9, beta2 = 0.999, eps = 1e-8;
    long step = 0;
    std::vector<std::vector<double>> m, v;  // one slot per parameter
};

template <class R>
void adam_step(const std::vector<ParamRef<R>>& params, AdamState<R>& state, double lr) {
    if (state.m.empty()) {
        state.m.resize(params.size());
        state.v.resize(params.size());
        for (size_t i = 0; i < params.size(); ++i) {
            state.m[i].assign(params[i].tensor.numel(), 0.0);
            state.v[i].assign(params[i].tensor.numel(), 0.0);
        }
    }
    if (state.m.size() != params.size())
        throw Error("adam: parameter list changed between steps");

    ++state.step;
    const double bc1 = 1.0 - std::pow(state.beta1, static_cast<double>(state.step));
    const double bc2 = 1.0 - std::pow(state.beta2, static_cast<double>(state.step));

    for (size_t i = 0; i < params.size(); ++i) {
        Tensor<R> t = params[i].tensor;
        t.ensure_grad();
        const R* g = t.grad().data();
        const size_t n = t.numel();
        if (state.m[i].size() != n) throw Error("adam: parameter shape changed between steps");
        for (size_t j = 0; j < n; ++j)
            if (!std::isfinite(static_cast<double>(g[j])))
                throw NumericalError("adam: non-finite gradient in " + params[i].name);

        R* w = t.data();
        auto& m = state.m[i];
        auto& v = state.v[i];
        for (size_t j = 0; j < n; ++j) {
            double gj = static_cast<double>(g[j]);
            m[j] = state.beta1 * m[j] + (1.0 - state.beta1) * gj;
            v[j] = state.beta2 * v[j] + (1.0 - state.beta2) * gj * gj;
            double mhat = m[j] / bc1;
            double vhat = v[j] / bc2;
            w[j] = static_cast<R>(static_cast<double>(w[j]) - lr * mhat / (std::sqrt(vhat) + state.eps));
        }
    }
}

// ---------------------------------------------------------------------------
// Checkpoints: "EMSG" magic, u32 version, then length-prefixed named f32
// tensors (parameters followed by buffers), all little-endian.

inline constexpr uint32_t kCheckpointVersion = 1;

namespace detail {

inline void put_u32(std::ostream& out, uint32_t v) {
    unsigned char b[4] = {static_cast<unsigned char>(v & 0xff),
                          static_cast<unsigned char>((v >> 8) & 0xff),
                          static_cast<unsigned char>((v >> 16) & 0xff),
                          static_cast<unsigned char>((v >> 24) & 0xff)};
    out.write(reinterpret_cast<const char*>(b), 4);
}

inline uint32_t get_u32(std::istream& in) {
    unsigned char b[4];
    in.read(reinterpret_cast<char*>(b), 4);
    if (in.gcount() != 4) throw FormatError("checkpoint: truncated file");
    return static_cast<uint32_t>(b[0]) | (static_cast<uint32_t>(b[1]) << 8) |
           (static_cast<uint32_t>(b[2]) << 16) | (static_cast<uint32_t>(b[3]) << 24);
}

inline void put_f32(std::ostream& out, float v) {
    uint32_t bits;
    std::memcpy(&bits, &v, 4);
    put_u32(out, bits);
}

inline float get_f32(std::istream& in) {
    uint32_t bits = get_u32(in);
    float v;
    std::memcpy(&v, &bits, 4);
    return v;
}

}  // namespace detail

template <class R, class Model>
void save_checkpoint(Model& model, const std::string& path) {
    std::vector<ParamRef<R>> records = model.parameters();
    for (auto& b : model.buffers()) records.push_back(b);

    std::ofstream out(path, std::ios::binary);
    if (!out) throw FormatError("checkpoint: cannot write " + path);
    out.write("EMSG", 4);
    detail::put_u32(out, kCheckpointVersion);
    detail::put_u32(out, static_cast<uint32_t>(records.size()));
    for (const auto& rec : records) {
        detail::put_u32(out, static_cast<uint32_t>(rec.name.size()));
        out.write(rec.name.data(), static_cast<std::streamsize>(rec.name.size()));
        detail::put_u32(out, static_cast<uint32_t>(rec.tensor.ndim()));
        for (int d = 0; d < rec.tensor.ndim(); ++d)
            detail::put_u32(out, static_cast<uint32_t>(rec.tensor.dim(d)));
        const R* p = rec.tensor.data();
        for (size_t i = 0; i < rec.tensor.numel(); ++i)
            detail::put_f32(out, static_cast<float>(p[i]));
    }
    if (!out.good()) throw FormatError("checkpoint: write failed for " + path);
}

// Restores a model of the same architecture. Every record must match by
// name and shape, with no extras on either side.
template <class R, class Model>
void load_checkpoint(Model& model, const std::string& path) {
    std::ifstream in(path, std::ios::binary);
    if (!in) throw FormatError("checkpoint: cannot open " + path);
    char magic[4];
    in.read(magic, 4);
    if (in.gcount() != 4 || std::memcmp(magic, "EMSG", 4) != 0)
        throw FormatError("checkpoint: bad magic in " + path);
    uint32_t version = detail::get_u32(in);
    if (version != kCheckpointVersion)
        throw FormatError("checkpoint: unsupported version " + std::to_string(version));
    uint32_t count = detail::get_u32(in);

    std::map<std::string, std::pair<Shape, std::vector<float>>> file_records;
    for (uint32_t r = 0; r < count; ++r) {
        uint32_t name_len = detail::get_u32(in);
        if (name_len > 4096) throw FormatError("checkpoint: implausible record name length");
        std::string name(name_len, '\0');
        in.read(name.data(), name_len);
        if (in.gcount() != static_cast<std::streamsize>(name_len))
            throw FormatError("checkpoint: truncated file");
        uint32_t ndim = detail::get_u32(in);
        if (ndim > 8) throw FormatError("checkpoint: implausible rank");
        Shape shape(ndim);
        size_t numel = 1;
        for (uint32_t d = 0; d < ndim; ++d) {
            shape[d] = static_cast<int>(detail::get_u32(in));
            numel *= static_cast<size_t>(shape[d]);
        }
        std::vector<float> data(numel);
        for (size_t i = 0; i < numel; ++i) data[i] = detail::get_f32(in);
        if (!file_records.emplace(name, std::make_pair(shape, std::move(data))).second)
            throw FormatError("checkpoint: duplicate record " + name);
    }

    std::vector<ParamRef<R>> records = model.parameters();
    for (auto& b : model.buffers()) records.push_back(b);
    for (auto& rec : records) {
        auto it = file_records.find(rec.name);
        if (it == file_records.end())
            throw FormatError("checkpoint: missing record " + rec.name);
        if (it->second.first != rec.tensor.shape())
            throw ShapeError("checkpoint: " + rec.name + " stored as " +
                             shape_str(it->second.first) + ", model expects " +
                             shape_str(rec.tensor.shape()));
        R* p = rec.tensor.data();
        const auto& data = it->second.second;
        for (size_t i = 0; i < data.size(); ++i) p[i] = static_cast<R>(data[i]);
        file_records.erase(it);
    }
    if (!file_records.empty())
        throw FormatError("checkpoint: unknown record " + file_records.begin()->first);
}

// ---------------------------------------------------------------------------
// Training loop

struct TrainResult {
    int iterations = 0;
    double final_loss = 0.0;
    std::string metrics_path;
    std::string checkpoint_path;
};

// Trains either model family: models whose forward returns logits plus a
// classification head use the joint loss and refresh their attention bases
// per batch; plain segmentation models use the pixel loss alone. The eval
// hook runs every eval_every iterations and may return false to stop early.
template <class R, class Model>
TrainResult train_model(Model& model, const std::vector<SampleTile>& dataset,
                        const TrainConfig& cfg, const std::string& out_dir,
                        const std::type_identity_t<std::function<bool(Model&, int)>>& eval_hook = {}) {
    cfg.validate();
    if (dataset.empty()) throw ConfigError("train: empty dataset");
    namespace fs = std::filesystem;
    fs::create_directories(out_dir);

    constexpr bool has_cls = requires(Model& m, const Tensor<R>& t) {
        m.forward(t, Mode::train).cls_logits;
    };

    TrainResult result;
    result.metrics_path = (fs::path(out_dir) / "metrics.csv").string();
    std::ofstream metrics(result.metrics_path);
    if (!metrics) throw FormatError("train: cannot write " + result.metrics_path);
    metrics << "iter,loss_total,loss_cls,loss_seg,lr\n";

    std::vector<ParamRef<R>> params = model.parameters();
    AdamState<R> opt;
    Rng rng(cfg.seed);
    Tape<R> tape;

    for (int iter = 1; iter <= cfg.max_iterations; ++iter) {
        for (auto& p : params) p.tensor.zero_grad();

        std::vector<SampleTile> batch;
        std::vector<Tensor<R>> xs;
        for (int b = 0; b < cfg.batch_size; ++b) {
            int idx = rng.uniform_int(0, static_cast<int>(dataset.size()) - 1);
            batch.push_back(cfg.augment ? augment_random(dataset[idx], rng) : dataset[idx]);
            xs.push_back(image_to_tensor<R>(batch.back().image));
        }

        Tensor<R> batch_total;
        double cls_sum = 0.0, seg_sum = 0.0;
        std::vector<double> mu_accum;
        Shape mu_shape;

        if constexpr (has_cls) {
            auto outs = model.forward_batch(xs, Mode::train);
            for (int b = 0; b < cfg.batch_size; ++b) {
                const SampleTile& sample = batch[static_cast<size_t>(b)];
                auto& out = outs[static_cast<size_t>(b)];
                LossParts<R> parts =
                    multitask_loss(out.cls_logits, sample.label, out.seg_logits, sample.mask,
                                   cfg.lambda, cfg.class_weights);
                if (mu_accum.empty()) {
                    mu_shape = out.mu_t.shape();
                    mu_accum.assign(out.mu_t.numel(), 0.0);
                }
                const R* mp = out.mu_t.data();
                for (size_t i = 0; i < mu_accum.size(); ++i)
                    mu_accum[i] += static_cast<double>(mp[i]);
                cls_sum += static_cast<double>(parts.cls.item());
                seg_sum += static_cast<double>(parts.seg.item());
                batch_total = (b == 0) ? parts.total : add(batch_total, parts.total);
            }
        } else {
            auto segs = model.forward_batch(xs, Mode::train);
            for (int b = 0; b < cfg.batch_size; ++b) {
                const SampleTile& sample = batch[static_cast<size_t>(b)];
                std::vector<int> targets(sample.mask.begin(), sample.mask.end());
                Tensor<R> seg_loss = cross_entropy_from_logits(
                    flatten_spatial(segs[static_cast<size_t>(b)]), targets, cfg.class_weights);
                seg_sum += static_cast<double>(seg_loss.item());
                batch_total = (b == 0) ? seg_loss : add(batch_total, seg_loss);
            }
        }

        Tensor<R> mean_loss = scale(batch_total, static_cast<R>(1.0 / cfg.batch_size));
        double loss_val = static_cast<double>(mean_loss.item());
        if (!std::isfinite(loss_val))
            throw NumericalError("train: non-finite loss at iteration " + std::to_string(iter));

        tape.backward(mean_loss);
        adam_step(params, opt, cfg.learning_rate);

        if constexpr (has_cls) {
            Tensor<R> mu_mean = Tensor<R>::zeros(mu_shape);
            R* mp = mu_mean.data();
            for (size_t i = 0; i < mu_accum.size(); ++i)
                mp[i] = static_cast<R>(mu_accum[i] / cfg.batch_size);
            model.apply_base_update(mu_mean);
        }

        result.iterations = iter;
        result.final_loss = loss_val;

        if (iter == 1 || iter == cfg.max_iterations || iter % cfg.log_every == 0) {
            char row[160];
            std::snprintf(row, sizeof row, "%d,%.9g,%.9g,%.9g,%.9g\n", iter, loss_val,
                          cls_sum / cfg.batch_size, seg_sum / cfg.batch_size, cfg.learning_rate);
            metrics << row;
            metrics.flush();
        }

        if (cfg.checkpoint_every > 0 && iter % cfg.checkpoint_every == 0) {
            char name[64];
            std::snprintf(name, sizeof name, "checkpoint_%06d.emsg", iter);
            save_checkpoint<R>(model, (fs::path(out_dir) / name).string());
        }

        if (cfg.eval_every > 0 && eval_hook && iter % cfg.eval_every == 0)
            if (!eval_hook(model, iter)) break;
    }

    result.checkpoint_path = (fs::path(out_dir) / "checkpoint_final.emsg").string();
    save_checkpoint<R>(model, result.checkpoint_path);
    return result;
}

}  // namespace emseg
