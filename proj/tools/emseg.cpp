// Command-line driver: synthetic corpus generation, training, evaluation,
// whole-raster prediction, and gradient verification.
//
// Exit codes: 0 success, 2 usage or config error, 3 data or format error,
// 4 numerical failure.
#include <iostream>

#include "CLI11.hpp"
#include "emseg/config.hpp"
#include "emseg/eval.hpp"
#include "emseg/gradcheck.hpp"
#include "emseg/synth.hpp"

namespace fs = std::filesystem;
using namespace emseg;

namespace {

struct CommonOpts {
    std::string config_path;
    std::string preset = "desk";
    std::string model;
    std::vector<std::string> overrides;
};

void add_common_options(CLI::App* cmd, CommonOpts& opts) {
    cmd->add_option("--config", opts.config_path, "key = value config file");
    cmd->add_option("--preset", opts.preset, "desk or paper")->default_val("desk");
    cmd->add_option("--model", opts.model, "solarnet or unet");
    cmd->add_option("--set", opts.overrides, "override KEY=VALUE (repeatable)");
}

RunConfig build_config(const CommonOpts& opts) {
    RunConfig cfg;
    cfg.apply_preset(opts.preset);
    if (!opts.config_path.empty()) load_config_file(cfg, opts.config_path);
    for (const std::string& kv : opts.overrides) {
        size_t eq = kv.find('=');
        if (eq == std::string::npos)
            throw ConfigError("--set expects KEY=VALUE, got '" + kv + "'");
        cfg.set(detail::trim(kv.substr(0, eq)), detail::trim(kv.substr(eq + 1)));
    }
    if (!opts.model.empty()) cfg.set("model", opts.model);
    return cfg;
}

void write_resolved_config(const RunConfig& cfg, const std::string& out_dir) {
    fs::create_directories(out_dir);
    std::ofstream out(fs::path(out_dir) / "resolved_config.txt");
    if (!out) throw FormatError("cannot write resolved_config.txt under " + out_dir);
    out << cfg.resolved_text();
}

int model_input_stride(const RunConfig& cfg) {
    if (cfg.model == "unet") return 16;
    EncoderConfig enc;
    enc.channels = cfg.encoder_channels;
    enc.strides = cfg.encoder_strides;
    enc.validate();
    return enc.total_stride();
}

std::vector<SampleTile> load_samples(const DatasetManifest& manifest) {
    std::vector<SampleTile> samples;
    for (size_t i = 0; i < manifest.size(); ++i)
        samples.push_back(load_sample(manifest.entries[i], static_cast<int>(i)));
    return samples;
}

int cmd_synth(const std::string& out_dir, int n, int size, int seed, double difficulty) {
    if (n < 1) throw UsageError("synth: --n must be >= 1");
    SynthConfig cfg;
    cfg.count = n;
    cfg.size = size;
    cfg.seed = static_cast<uint64_t>(seed);
    cfg.difficulty = difficulty;
    generate_synthetic_dataset(out_dir, cfg);
    std::cout << "synth: wrote " << n << " tiles of size " << size << " to " << out_dir << "\n";
    return 0;
}

int cmd_train(const RunConfig& cfg, const std::string& data_dir, const std::string& out_dir) {
    if (!fs::exists(data_dir))
        throw UsageError("train: data directory not found: " + data_dir);
    write_resolved_config(cfg, out_dir);

    DatasetManifest manifest = load_dataset(data_dir);
    if (manifest.empty()) throw ManifestError("train: no image/mask pairs under " + data_dir);
    DatasetManifest train_part = manifest;
    if (cfg.test_fraction > 0.0 && manifest.size() >= 2) {
        auto [tr, te] = split(manifest, cfg.test_fraction, cfg.seed);
        train_part = tr;
        std::cout << "train: split " << manifest.size() << " tiles into " << tr.size()
                  << " train / " << te.size() << " test\n";
    }
    std::vector<SampleTile> samples = load_samples(train_part);
    TrainConfig tc = cfg.train_config();

    TrainResult result;
    if (cfg.model == "unet") {
        UNet<float> model(cfg.unet_config());
        result = train_model<float>(model, samples, tc, out_dir);
    } else {
        SolarNet<float> model(cfg.solarnet_config());
        result = train_model<float>(model, samples, tc, out_dir);
    }
    std::cout << "train: " << cfg.model << " finished " << result.iterations
              << " iterations, final loss " << result.final_loss << "\n";
    std::cout << "train: metrics " << result.metrics_path << "\n";
    std::cout << "train: checkpoint " << result.checkpoint_path << "\n";
    return 0;
}

int cmd_eval(const RunConfig& cfg, const std::string& checkpoint, const std::string& data_dir,
             const std::string& split_sel, const std::string& results_path) {
    if (!fs::exists(data_dir)) throw UsageError("eval: data directory not found: " + data_dir);
    if (split_sel != "train" && split_sel != "test" && split_sel != "all")
        throw UsageError("eval: --split must be train, test, or all");

    DatasetManifest manifest = load_dataset(data_dir);
    if (manifest.empty()) throw ManifestError("eval: no image/mask pairs under " + data_dir);
    DatasetManifest part = manifest;
    if (split_sel != "all") {
        auto [tr, te] = split(manifest, cfg.test_fraction, cfg.seed);
        part = split_sel == "train" ? tr : te;
    }

    EvalResult res;
    if (cfg.model == "unet") {
        UNet<float> model(cfg.unet_config());
        load_checkpoint<float>(model, checkpoint);
        res = evaluate_model<float>(model, part, cfg.tile, cfg.stride);
    } else {
        SolarNet<float> model(cfg.solarnet_config());
        load_checkpoint<float>(model, checkpoint);
        res = evaluate_model<float>(model, part, cfg.tile, cfg.stride);
    }

    std::string model_name = cfg.model + "-" + cfg.preset;
    std::string dataset_name = fs::path(data_dir).filename().string() + "-" + split_sel;
    append_results_row(results_path, model_name, dataset_name, res);
    char row[256];
    std::snprintf(row, sizeof row, "%s,%s,%.9g,%.9g,%lld,%lld", model_name.c_str(),
                  dataset_name.c_str(), res.miou, res.pixel_acc, res.images, res.pixels);
    std::cout << "eval: " << row << "\n";
    std::cout << "eval: appended to " << results_path << "\n";
    return 0;
}

int cmd_predict(const RunConfig& cfg, const std::string& checkpoint, const std::string& image_path,
                const std::string& out_dir, int tile, int stride) {
    int div = model_input_stride(cfg);
    if (tile < 1 || stride < 1) throw UsageError("predict: tile and stride must be positive");
    if (tile % div != 0)
        throw UsageError("predict: tile " + std::to_string(tile) +
                         " must be divisible by the model input stride " + std::to_string(div));
    ImageU8 image = read_image(image_path);
    write_resolved_config(cfg, out_dir);

    Tensor<float> logits;
    if (cfg.model == "unet") {
        UNet<float> model(cfg.unet_config());
        load_checkpoint<float>(model, checkpoint);
        logits = predict_logits<float>(model, image, tile, stride);
    } else {
        SolarNet<float> model(cfg.solarnet_config());
        load_checkpoint<float>(model, checkpoint);
        logits = predict_logits<float>(model, image, tile, stride);
    }

    std::string mask_path = (fs::path(out_dir) / "mask.pgm").string();
    std::string overlay_path = (fs::path(out_dir) / "overlay.ppm").string();
    write_mask(logits, mask_path);
    write_overlay(logits, image, overlay_path);

    std::vector<uint8_t> mask = argmax_mask(logits);
    size_t positive = 0;
    for (uint8_t v : mask) positive += v;
    char frac[32];
    std::snprintf(frac, sizeof frac, "%.6f", static_cast<double>(positive) / mask.size());
    std::cout << "predict: " << image.width << "x" << image.height << " raster, area_fraction "
              << frac << "\n";
    std::cout << "predict: mask " << mask_path << "\n";
    std::cout << "predict: overlay " << overlay_path << "\n";
    return 0;
}

// ---------------------------------------------------------------------------
// gradcheck subcommand

struct GradCase {
    std::string name;
    std::function<FdReport(const std::function<void()>&)> run;
    std::function<void()> corrupt;  // sign-flips one analytic gradient entry
};

Tensor<double> rand_t(const Shape& shape, uint64_t seed, double lo = -1.0, double hi = 1.0) {
    return tensor_create<double>(shape, Fill<double>::uniform(lo, hi), seed);
}

// Fixed-weight scalar readout so every output coordinate carries gradient.
Tensor<double> readout(const Tensor<double>& x, uint64_t seed = 999) {
    Tensor<double> w = rand_t(x.shape(), seed, 0.5, 1.5);
    return sum(mul(x, w));
}

std::function<void()> flip_first_grad(Tensor<double> t) {
    return [t]() mutable {
        t.ensure_grad();
        for (size_t i = 0; i < t.numel(); ++i)
            if (t.grad().data()[i] != 0.0) {
                t.grad().data()[i] = -t.grad().data()[i];
                return;
            }
    };
}

std::vector<GradCase> build_grad_cases() {
    std::vector<GradCase> cases;
    auto add_case = [&cases](const std::string& name, std::vector<Tensor<double>> inputs,
                             std::function<Tensor<double>()> f, int64_t max_coords = 0) {
        GradCase c;
        c.name = name;
        c.corrupt = flip_first_grad(inputs[0]);
        c.run = [inputs, f, max_coords](const std::function<void()>& corrupt) {
            return check_gradients<double>(f, inputs, 1e-3, 1e-4, corrupt, max_coords);
        };
        cases.push_back(std::move(c));
    };

    {
        Tensor<double> a = rand_t({3, 4}, 1), b = rand_t({3, 4}, 2);
        add_case("add_mul", {a, b}, [a, b]() { return readout(mul(add(a, b), a)); });
    }
    {
        Tensor<double> a = rand_t({3, 4}, 3), b = rand_t({4, 5}, 4);
        add_case("matmul", {a, b}, [a, b]() { return readout(matmul(a, b)); });
    }
    {
        Tensor<double> x = rand_t({3, 5, 6}, 5), w = rand_t({4, 3, 3, 3}, 6), b = rand_t({4}, 7);
        add_case("conv2d", {x, w, b},
                 [x, w, b]() { return readout(conv2d(x, w, b, 1, Pad::same)); });
    }
    {
        Tensor<double> x = rand_t({3, 6, 6}, 8), w = rand_t({2, 3, 3, 3}, 9), b = rand_t({2}, 10);
        add_case("conv2d_s2", {x, w, b},
                 [x, w, b]() { return readout(conv2d(x, w, b, 2, Pad::same)); });
    }
    {
        Tensor<double> x = rand_t({3, 4, 4}, 11), g = rand_t({3}, 12, 0.5, 1.5),
                       be = rand_t({3}, 13);
        BatchNormState<double> bn = BatchNormState<double>::create(3);
        bn.gamma = g;
        bn.beta = be;
        add_case("batchnorm", {x, g, be},
                 [x, bn]() mutable { return readout(batchnorm2d(x, bn, Mode::train)); });
    }
    {
        Tensor<double> x = rand_t({4, 4}, 14);
        for (auto& v : x.vec())
            if (std::fabs(v) < 0.05) v += 0.1;
        add_case("relu", {x}, [x]() { return readout(relu(x)); });
    }
    {
        Tensor<double> x = rand_t({4, 5}, 15);
        add_case("softmax_rows", {x}, [x]() { return readout(softmax_rows(x)); });
    }
    {
        Tensor<double> logits = rand_t({6, 2}, 16);
        std::vector<int> targets = {0, 1, 1, 0, 1, 0};
        add_case("cross_entropy", {logits},
                 [logits, targets]() { return cross_entropy_from_logits(logits, targets); });
    }
    {
        Tensor<double> x = rand_t({2, 6, 6}, 17);
        add_case("maxpool2x", {x}, [x]() { return readout(maxpool2x(x)); });
    }
    {
        Tensor<double> x = rand_t({2, 3, 4}, 18);
        add_case("upsample2x", {x},
                 [x]() { return readout(upsample2x(x, Upsample::bilinear)); });
    }
    {
        Tensor<double> x = rand_t({3, 4, 4}, 19), w = rand_t({2, 3}, 20), b = rand_t({2}, 21);
        add_case("linear_gap", {x, w, b},
                 [x, w, b]() { return readout(linear(global_avg_pool(x), w, b)); });
    }
    {
        Tensor<double> x = rand_t({4, 3, 3}, 22);
        Bases<double> bases = kaiming_init_bases<double>(2, 4, 23);
        EmauParams<double> params = EmauParams<double>::create(4, 24);
        EmauConfig ecfg;
        ecfg.bases = 2;
        ecfg.iterations = 2;
        add_case("emau_block", {x, params.conv_in_w, params.conv_out_w},
                 [x, bases, ecfg, params]() mutable {
                     return readout(emau_forward(x, bases, ecfg, params, Mode::train).first);
                 });
    }
    {
        SolarNet<double>::Config mcfg;
        mcfg.encoder.channels = {3, 4};
        mcfg.encoder.strides = {2, 2};
        mcfg.emau.bases = 3;
        mcfg.emau.iterations = 2;
        mcfg.seed = 25;
        auto model = std::make_shared<SolarNet<double>>(mcfg);
        Tensor<double> x = rand_t({3, 8, 8}, 26, 0.0, 1.0);
        std::vector<uint8_t> mask(64, 0);
        for (int i = 0; i < 64; i += 3) mask[static_cast<size_t>(i)] = 1;
        add_case(
            "solarnet_tiny", {x, model->seg_weight(), model->cls_weight()},
            [model, x, mask]() {
                auto out = model->forward(x, Mode::train);
                return multitask_loss(out.cls_logits, 1, out.seg_logits, mask, 0.5).total;
            },
            24);
    }
    return cases;
}

// Plain-loop attention oracle: row softmax against the bases, then a
// weighted mean update, iterated T times with unit-row renormalization.
double em_oracle_max_error() {
    const int N = 16, C = 6, K = 3, T = 4;
    Tensor<double> x = rand_t({N, C}, 31);
    Bases<double> bases = kaiming_init_bases<double>(K, C, 32);

    std::vector<std::vector<double>> mu(K, std::vector<double>(C));
    for (int k = 0; k < K; ++k)
        for (int c = 0; c < C; ++c) mu[k][c] = bases.mu.at({k, c});
    std::vector<std::vector<double>> z(N, std::vector<double>(K));

    auto oracle_e = [&]() {
        for (int n = 0; n < N; ++n) {
            double mx = -1e300;
            for (int k = 0; k < K; ++k) {
                double dot = 0;
                for (int c = 0; c < C; ++c) dot += x.at({n, c}) * mu[k][c];
                z[n][k] = dot;
                mx = std::max(mx, dot);
            }
            double denom = 0;
            for (int k = 0; k < K; ++k) denom += std::exp(z[n][k] - mx);
            for (int k = 0; k < K; ++k) z[n][k] = std::exp(z[n][k] - mx) / denom;
        }
    };
    for (int t = 0; t < T; ++t) {
        oracle_e();
        for (int k = 0; k < K; ++k) {
            double weight = 0;
            for (int n = 0; n < N; ++n) weight += z[n][k];
            for (int c = 0; c < C; ++c) {
                double acc = 0;
                for (int n = 0; n < N; ++n) acc += z[n][k] * x.at({n, c});
                mu[k][c] = acc / weight;
            }
            double norm = 0;
            for (int c = 0; c < C; ++c) norm += mu[k][c] * mu[k][c];
            norm = std::sqrt(norm);
            for (int c = 0; c < C; ++c) mu[k][c] /= norm;
        }
    }
    oracle_e();

    NoGradGuard guard;
    auto [zt, mu_t] = run_em(x, bases.mu, T, true);
    double max_err = 0;
    for (int n = 0; n < N; ++n)
        for (int k = 0; k < K; ++k)
            max_err = std::max(max_err, std::fabs(zt.at({n, k}) - z[n][k]));
    for (int k = 0; k < K; ++k)
        for (int c = 0; c < C; ++c)
            max_err = std::max(max_err, std::fabs(mu_t.at({k, c}) - mu[k][c]));
    return max_err;
}

int cmd_gradcheck(const std::string& mutate) {
    std::vector<GradCase> cases = build_grad_cases();

    if (!mutate.empty()) {
        for (auto& c : cases) {
            if (c.name != mutate) continue;
            FdReport report = c.run(c.corrupt);
            if (!report.passed) {
                std::cout << "gradcheck: planted sign flip in '" << c.name << "' detected, "
                          << report.summary() << "\n";
            } else {
                std::cout << "gradcheck: planted sign flip in '" << c.name
                          << "' was NOT detected\n";
            }
            return 4;
        }
        std::string names;
        for (const auto& c : cases) names += (names.empty() ? "" : ", ") + c.name;
        throw UsageError("gradcheck: unknown op '" + mutate + "' (known: " + names + ")");
    }

    bool all_passed = true;
    for (auto& c : cases) {
        FdReport report = c.run({});
        all_passed = all_passed && report.passed;
        std::printf("%-14s %-4s %s\n", c.name.c_str(), report.passed ? "PASS" : "FAIL",
                    report.summary().c_str());
    }

    double em_err = em_oracle_max_error();
    bool em_ok = em_err <= 1e-9;
    all_passed = all_passed && em_ok;
    std::printf("%-14s %-4s max abs err %.3e vs plain-loop oracle\n", "em_iteration",
                em_ok ? "PASS" : "FAIL", em_err);

    if (!all_passed) {
        std::cout << "gradcheck: FAILURES above\n";
        return 4;
    }
    std::cout << "gradcheck: all checks passed\n";
    return 0;
}

}  // namespace

int main(int argc, char** argv) {
    CLI::App app{"EM attention segmentation toolkit"};
    app.require_subcommand(1);

    CLI::App* synth = app.add_subcommand("synth", "generate a synthetic labeled corpus");
    std::string synth_out = "data";
    int synth_n = 80, synth_size = 64, synth_seed = 42;
    double synth_difficulty = 0.5;
    synth->add_option("--out", synth_out, "output dataset directory");
    synth->add_option("--n", synth_n, "number of tiles");
    synth->add_option("--size", synth_size, "tile side length");
    synth->add_option("--seed", synth_seed, "corpus seed");
    synth->add_option("--difficulty", synth_difficulty, "distractor density 0..1");

    CLI::App* train = app.add_subcommand("train", "train a model on a dataset directory");
    CommonOpts train_opts;
    std::string train_data, train_out = "run";
    add_common_options(train, train_opts);
    train->add_option("--data", train_data, "dataset directory")->required();
    train->add_option("--out", train_out, "run output directory");

    CLI::App* eval_cmd = app.add_subcommand("eval", "evaluate a checkpoint on a dataset split");
    CommonOpts eval_opts;
    std::string eval_ckpt, eval_data, eval_split = "test", eval_results = "results.csv";
    add_common_options(eval_cmd, eval_opts);
    eval_cmd->add_option("--checkpoint", eval_ckpt, "checkpoint file")->required();
    eval_cmd->add_option("--data", eval_data, "dataset directory")->required();
    eval_cmd->add_option("--split", eval_split, "train, test, or all");
    eval_cmd->add_option("--results", eval_results, "results CSV to append to");

    CLI::App* predict = app.add_subcommand("predict", "predict a mask for one raster");
    CommonOpts predict_opts;
    std::string predict_ckpt, predict_image, predict_out = "prediction";
    int predict_tile = 512, predict_stride = 256;
    add_common_options(predict, predict_opts);
    predict->add_option("--checkpoint", predict_ckpt, "checkpoint file")->required();
    predict->add_option("--image", predict_image, "input PPM raster")->required();
    predict->add_option("--out", predict_out, "output directory");
    predict->add_option("--tile", predict_tile, "tile size");
    predict->add_option("--stride", predict_stride, "tile stride");

    CLI::App* gradcheck = app.add_subcommand("gradcheck", "finite-difference verification suite");
    std::string gradcheck_mutate;
    gradcheck->add_option("--mutate", gradcheck_mutate,
                          "plant a sign flip in the named op and confirm detection");

    try {
        app.parse(argc, argv);
    } catch (const CLI::ParseError& e) {
        int rc = app.exit(e);
        return rc == 0 ? 0 : 2;
    }

    try {
        if (synth->parsed())
            return cmd_synth(synth_out, synth_n, synth_size, synth_seed, synth_difficulty);
        if (train->parsed()) return cmd_train(build_config(train_opts), train_data, train_out);
        if (eval_cmd->parsed())
            return cmd_eval(build_config(eval_opts), eval_ckpt, eval_data, eval_split,
                            eval_results);
        if (predict->parsed())
            return cmd_predict(build_config(predict_opts), predict_ckpt, predict_image,
                               predict_out, predict_tile, predict_stride);
        if (gradcheck->parsed()) return cmd_gradcheck(gradcheck_mutate);
    } catch (const UsageError& e) {
        std::cerr << "error: " << e.what() << "\n";
        return 2;
    } catch (const DataError& e) {
        std::cerr << "error: " << e.what() << "\n";
        return 3;
    } catch (const NumericError& e) {
        std::cerr << "error: " << e.what() << "\n";
        return 4;
    } catch (const std::exception& e) {
        std::cerr << "error: " << e.what() << "\n";
        return 1;
    }
    return 0;
}
