#include <gtest/gtest.h>

#include <filesystem>
#include <fstream>

#include "emseg/synth.hpp"
#include "emseg/training.hpp"

namespace fs = std::filesystem;
using namespace emseg;

namespace {

std::string make_temp_dir(const std::string& tag) {
    fs::path dir = fs::temp_directory_path() / ("emseg_train_" + tag);
    fs::remove_all(dir);
    fs::create_directories(dir);
    return dir.string();
}

template <class R>
typename SolarNet<R>::Config tiny_config(uint64_t seed = 5) {
    typename SolarNet<R>::Config cfg;
    cfg.encoder.channels = {3, 4};
    cfg.encoder.strides = {2, 2};
    cfg.emau.bases = 3;
    cfg.emau.iterations = 2;
    cfg.emau.alpha = 0.9;
    cfg.emau.seed = seed + 1;
    cfg.seed = seed;
    return cfg;
}

std::vector<SampleTile> synth_tiles(int n, int size, uint64_t seed) {
    SynthConfig cfg;
    cfg.count = n;
    cfg.size = size;
    cfg.seed = seed;
    std::vector<SampleTile> tiles;
    for (int i = 0; i < n; ++i) tiles.push_back(make_synthetic_tile(cfg, i));
    return tiles;
}

std::string read_file(const std::string& path) {
    std::ifstream in(path, std::ios::binary);
    return std::string((std::istreambuf_iterator<char>(in)), std::istreambuf_iterator<char>());
}

}  // namespace

TEST(TrainConfig, RejectsInvalidSettings) {
    TrainConfig cfg;
    cfg.learning_rate = 0.0;
    EXPECT_THROW(cfg.validate(), ConfigError);
    cfg = TrainConfig{};
    cfg.lambda = 1.5;
    EXPECT_THROW(cfg.validate(), ConfigError);
    cfg = TrainConfig{};
    cfg.batch_size = 0;
    EXPECT_THROW(cfg.validate(), ConfigError);
    cfg = TrainConfig{};
    cfg.class_weights = {1.0, 2.0, 3.0};
    EXPECT_THROW(cfg.validate(), ConfigError);
    EXPECT_NO_THROW(TrainConfig{}.validate());
}

TEST(MultitaskLoss, EndpointsReproduceSingleTasksExactly) {
    Tensor<double> cls = Tensor<double>::from_data({2}, {0.3, -0.4});
    Tensor<double> seg = Tensor<double>::from_data({2, 1, 2}, {0.2, -1.0, 0.5, 0.7});
    std::vector<uint8_t> mask = {1, 0};

    auto at1 = multitask_loss(cls, 1, seg, mask, 1.0);
    EXPECT_EQ(at1.total.item(), at1.cls.item());
    auto at0 = multitask_loss(cls, 1, seg, mask, 0.0);
    EXPECT_EQ(at0.total.item(), at0.seg.item());
    auto mid = multitask_loss(cls, 1, seg, mask, 0.5);
    EXPECT_DOUBLE_EQ(mid.total.item(), 0.5 * mid.cls.item() + 0.5 * mid.seg.item());
}

TEST(MultitaskLoss, ZeroLogitsGiveLogTwoEverywhere) {
    Tensor<double> cls = Tensor<double>::zeros({2});
    Tensor<double> seg = Tensor<double>::zeros({2, 2, 2});
    std::vector<uint8_t> mask = {0, 1, 1, 0};
    auto parts = multitask_loss(cls, 0, seg, mask, 0.5);
    EXPECT_NEAR(parts.cls.item(), std::log(2.0), 1e-12);
    EXPECT_NEAR(parts.seg.item(), std::log(2.0), 1e-12);
    EXPECT_NEAR(parts.total.item(), std::log(2.0), 1e-12);
}

TEST(MultitaskLoss, MismatchedMaskThrows) {
    Tensor<double> cls = Tensor<double>::zeros({2});
    Tensor<double> seg = Tensor<double>::zeros({2, 2, 2});
    std::vector<uint8_t> mask = {0, 1, 1};
    EXPECT_THROW(multitask_loss(cls, 0, seg, mask, 0.5), ShapeError);
}

TEST(MultitaskLoss, PureClassificationSendsExactZerosToSegHead) {
    SolarNet<double> model(tiny_config<double>());
    SampleTile tile = make_synthetic_tile({1, 8, 21}, 0);
    Tensor<double> x = image_to_tensor<double>(tile.image);

    Tape<double> tape;
    auto out = model.forward(x, Mode::train);
    auto parts = multitask_loss(out.cls_logits, tile.label, out.seg_logits, tile.mask, 1.0);
    tape.backward(parts.total);

    model.seg_weight().ensure_grad();
    for (size_t i = 0; i < model.seg_weight().numel(); ++i)
        ASSERT_EQ(model.seg_weight().grad().data()[i], 0.0);

    model.cls_weight().ensure_grad();
    double cls_norm = 0.0;
    for (size_t i = 0; i < model.cls_weight().numel(); ++i)
        cls_norm += std::abs(model.cls_weight().grad().data()[i]);
    EXPECT_GT(cls_norm, 0.0);
}

TEST(Adam, UnitGradientMovesParameterByLearningRate) {
    Tensor<double> theta = Tensor<double>::from_data({2}, {1.0, 2.0});
    theta.set_requires_grad(true);
    theta.ensure_grad();
    theta.grad().data()[0] = 1.0;
    theta.grad().data()[1] = 1.0;
    std::vector<ParamRef<double>> params = {{"theta", theta}};
    AdamState<double> state;
    adam_step(params, state, 0.1);
    // First step with g = 1: mhat = vhat = 1, so the update is lr/(1+eps).
    EXPECT_NEAR(theta.data()[0], 1.0 - 0.1 / (1.0 + 1e-8), 1e-15);
    EXPECT_NEAR(1.0 - theta.data()[0], 0.1, 1e-8);
    EXPECT_NEAR(theta.data()[1], 2.0 - 0.1 / (1.0 + 1e-8), 1e-15);
}

TEST(Adam, ZeroGradientLeavesParametersUntouched) {
    Tensor<double> theta = Tensor<double>::from_data({3}, {1.0, -2.0, 3.0});
    theta.set_requires_grad(true);
    std::vector<ParamRef<double>> params = {{"theta", theta}};
    AdamState<double> state;
    std::vector<double> before = theta.vec();
    for (int i = 0; i < 3; ++i) adam_step(params, state, 0.5);
    EXPECT_EQ(theta.vec(), before);
}

TEST(Adam, NonFiniteGradientNamesTheParameter) {
    Tensor<double> theta = Tensor<double>::from_data({2}, {1.0, 2.0});
    theta.set_requires_grad(true);
    theta.ensure_grad();
    theta.grad().data()[1] = std::numeric_limits<double>::quiet_NaN();
    std::vector<ParamRef<double>> params = {{"enc.0.w", theta}};
    AdamState<double> state;
    try {
        adam_step(params, state, 0.1);
        FAIL() << "expected NumericalError";
    } catch (const NumericalError& e) {
        EXPECT_NE(std::string(e.what()).find("enc.0.w"), std::string::npos);
    }
}

TEST(Adam, SecondStepUsesMomentum) {
    Tensor<double> theta = Tensor<double>::from_data({1}, {0.0});
    theta.set_requires_grad(true);
    theta.ensure_grad();
    std::vector<ParamRef<double>> params = {{"theta", theta}};
    AdamState<double> state;
    theta.grad().data()[0] = 1.0;
    adam_step(params, state, 0.1);
    double after_one = theta.data()[0];
    theta.grad().data()[0] = 1.0;
    adam_step(params, state, 0.1);
    // Constant gradient keeps mhat = vhat = 1, so each step is the same size.
    EXPECT_NEAR(theta.data()[0], 2.0 * after_one, 1e-12);
}

TEST(Checkpoint, SaveLoadSaveIsByteIdentical) {
    std::string dir = make_temp_dir("ckpt_rt");
    SolarNet<double> a(tiny_config<double>(3));
    // Perturb buffers so the round trip covers non-initial running stats.
    SampleTile tile = make_synthetic_tile({1, 8, 4}, 1);
    { NoGradGuard g; a.forward(image_to_tensor<double>(tile.image), Mode::train); }
    save_checkpoint<double>(a, dir + "/a.emsg");

    SolarNet<double> b(tiny_config<double>(99));
    load_checkpoint<double>(b, dir + "/a.emsg");
    save_checkpoint<double>(b, dir + "/b.emsg");
    std::string bytes_a = read_file(dir + "/a.emsg");
    std::string bytes_b = read_file(dir + "/b.emsg");
    ASSERT_FALSE(bytes_a.empty());
    EXPECT_EQ(bytes_a, bytes_b);
}

TEST(Checkpoint, LoadedModelReproducesForwards) {
    std::string dir = make_temp_dir("ckpt_fwd");
    SolarNet<float> a(tiny_config<float>(3));
    save_checkpoint<float>(a, dir + "/a.emsg");
    SolarNet<float> b(tiny_config<float>(1234));
    load_checkpoint<float>(b, dir + "/a.emsg");

    SampleTile tile = make_synthetic_tile({1, 8, 7}, 2);
    Tensor<float> x = image_to_tensor<float>(tile.image);
    NoGradGuard guard;
    auto oa = a.forward(x, Mode::eval);
    auto ob = b.forward(x, Mode::eval);
    for (size_t i = 0; i < oa.seg_logits.numel(); ++i)
        ASSERT_NEAR(oa.seg_logits.data()[i], ob.seg_logits.data()[i], 1e-6);
    for (size_t i = 0; i < 2; ++i)
        ASSERT_NEAR(oa.cls_logits.data()[i], ob.cls_logits.data()[i], 1e-6);
}

TEST(Checkpoint, MalformedFilesThrowFormatError) {
    std::string dir = make_temp_dir("ckpt_bad");
    {
        std::ofstream out(dir + "/magic.emsg", std::ios::binary);
        out << "NOPE1234";
    }
    SolarNet<double> m(tiny_config<double>());
    EXPECT_THROW(load_checkpoint<double>(m, dir + "/magic.emsg"), FormatError);

    save_checkpoint<double>(m, dir + "/good.emsg");
    std::string bytes = read_file(dir + "/good.emsg");
    {
        std::string bumped = bytes;
        bumped[4] = 9;  // version field
        std::ofstream out(dir + "/version.emsg", std::ios::binary);
        out.write(bumped.data(), static_cast<std::streamsize>(bumped.size()));
    }
    EXPECT_THROW(load_checkpoint<double>(m, dir + "/version.emsg"), FormatError);
    {
        std::ofstream out(dir + "/truncated.emsg", std::ios::binary);
        out.write(bytes.data(), static_cast<std::streamsize>(bytes.size() / 2));
    }
    EXPECT_THROW(load_checkpoint<double>(m, dir + "/truncated.emsg"), FormatError);
    EXPECT_THROW(load_checkpoint<double>(m, dir + "/absent.emsg"), FormatError);
}

TEST(Checkpoint, ArchitectureMismatchIsRejected) {
    std::string dir = make_temp_dir("ckpt_arch");
    SolarNet<double> a(tiny_config<double>());
    save_checkpoint<double>(a, dir + "/a.emsg");

    auto cfg = tiny_config<double>();
    cfg.encoder.channels = {4, 4};
    SolarNet<double> wider(cfg);
    EXPECT_THROW(load_checkpoint<double>(wider, dir + "/a.emsg"), ShapeError);

    auto deeper = tiny_config<double>();
    deeper.encoder.channels = {3, 4, 4};
    deeper.encoder.strides = {2, 2, 1};
    SolarNet<double> extra(deeper);
    EXPECT_THROW(load_checkpoint<double>(extra, dir + "/a.emsg"), FormatError);
}

TEST(Training, SameSeedIsBitReproducible) {
    auto tiles = synth_tiles(4, 16, 51);
    TrainConfig cfg;
    cfg.max_iterations = 3;
    cfg.batch_size = 2;
    cfg.seed = 7;
    cfg.log_every = 1;

    std::string d1 = make_temp_dir("det1");
    std::string d2 = make_temp_dir("det2");
    SolarNet<double> m1(tiny_config<double>(4));
    SolarNet<double> m2(tiny_config<double>(4));
    train_model<double>(m1, tiles, cfg, d1);
    train_model<double>(m2, tiles, cfg, d2);

    EXPECT_EQ(read_file(d1 + "/metrics.csv"), read_file(d2 + "/metrics.csv"));
    std::string c1 = read_file(d1 + "/checkpoint_final.emsg");
    std::string c2 = read_file(d2 + "/checkpoint_final.emsg");
    ASSERT_FALSE(c1.empty());
    EXPECT_EQ(c1, c2);
}

TEST(Training, FirstIterationLossIsNearLogTwo) {
    auto tiles = synth_tiles(4, 16, 52);
    TrainConfig cfg;
    cfg.max_iterations = 1;
    cfg.batch_size = 2;
    cfg.seed = 3;
    std::string dir = make_temp_dir("ln2");
    SolarNet<double> model(tiny_config<double>(8));
    TrainResult res = train_model<double>(model, tiles, cfg, dir);
    EXPECT_NEAR(res.final_loss, std::log(2.0), 0.2);
}

TEST(Training, LossFallsOnFixedBatch) {
    auto tiles = synth_tiles(2, 16, 53);
    TrainConfig cfg;
    cfg.max_iterations = 40;
    cfg.batch_size = 2;
    cfg.learning_rate = 5e-3;
    cfg.augment = false;
    cfg.log_every = 1;
    cfg.seed = 1;
    std::string dir = make_temp_dir("falls");
    SolarNet<double> model(tiny_config<double>(6));
    TrainResult res = train_model<double>(model, tiles, cfg, dir);

    std::ifstream in(res.metrics_path);
    std::string line;
    std::getline(in, line);
    EXPECT_EQ(line, "iter,loss_total,loss_cls,loss_seg,lr");
    double first_loss = 0.0;
    std::getline(in, line);
    ASSERT_EQ(std::sscanf(line.c_str(), "%*d,%lf", &first_loss), 1);
    EXPECT_LT(res.final_loss, first_loss);
    EXPECT_LT(res.final_loss, 0.6);
}

TEST(Training, UNetPathUsesPureSegmentationLoss) {
    auto tiles = synth_tiles(2, 16, 54);
    TrainConfig cfg;
    cfg.max_iterations = 2;
    cfg.batch_size = 1;
    cfg.log_every = 1;
    UNet<double>::Config ucfg;
    ucfg.base_channels = 2;
    ucfg.seed = 9;
    UNet<double> model(ucfg);
    std::string dir = make_temp_dir("unet");
    TrainResult res = train_model<double>(model, tiles, cfg, dir);
    EXPECT_EQ(res.iterations, 2);

    std::ifstream in(res.metrics_path);
    std::string line;
    std::getline(in, line);
    while (std::getline(in, line)) {
        int iter;
        double total, cls, seg;
        ASSERT_EQ(std::sscanf(line.c_str(), "%d,%lf,%lf,%lf", &iter, &total, &cls, &seg), 4);
        EXPECT_EQ(cls, 0.0);
        EXPECT_EQ(total, seg);
    }
    EXPECT_TRUE(fs::exists(res.checkpoint_path));
}

TEST(Training, CheckpointCadenceAndEarlyStop) {
    auto tiles = synth_tiles(2, 16, 55);
    TrainConfig cfg;
    cfg.max_iterations = 9;
    cfg.batch_size = 1;
    cfg.checkpoint_every = 2;
    cfg.eval_every = 2;
    std::string dir = make_temp_dir("cadence");
    SolarNet<double> model(tiny_config<double>(2));
    int hook_calls = 0;
    TrainResult res = train_model<double>(
        model, tiles, cfg, dir, [&](SolarNet<double>&, int iter) {
            ++hook_calls;
            return iter < 4;
        });
    EXPECT_EQ(res.iterations, 4);
    EXPECT_EQ(hook_calls, 2);
    EXPECT_TRUE(fs::exists(dir + "/checkpoint_000002.emsg"));
    EXPECT_TRUE(fs::exists(dir + "/checkpoint_000004.emsg"));
    EXPECT_FALSE(fs::exists(dir + "/checkpoint_000006.emsg"));
    EXPECT_TRUE(fs::exists(dir + "/checkpoint_final.emsg"));
}

TEST(Training, EmptyDatasetIsRejected) {
    TrainConfig cfg;
    SolarNet<double> model(tiny_config<double>());
    EXPECT_THROW(train_model<double>(model, {}, cfg, make_temp_dir("empty")), ConfigError);
}
