// Model assembly: a configurable strided conv encoder feeding the EM
// attention block with segmentation and classification heads sharing that
// trunk, plus the 17-conv UNet baseline.
#pragma once

#include <string>
#include <vector>

#include "emseg/emau.hpp"

namespace emseg {

// Named handle onto a model tensor, used by the optimizer and checkpoints.
template <class R>
struct ParamRef {
    std::string name;
    Tensor<R> tensor;
};

// 3x3 conv + batchnorm + relu, the building block of every stage.
template <class R>
struct ConvBnRelu {
    Tensor<R> w, b;
    BatchNormState<R> bn;
    int stride = 1;

    // The conv carries no trainable bias: batchnorm's beta plays that role,
    // and a bias ahead of the normalization would receive zero gradient.
    static ConvBnRelu create(int cin, int cout, int stride, uint64_t seed) {
        ConvBnRelu blk;
        blk.w = tensor_create<R>({cout, cin, 3, 3}, Fill<R>::kaiming(cin * 9), seed);
        blk.b = Tensor<R>::zeros({cout});
        blk.bn = BatchNormState<R>::create(cout);
        blk.stride = stride;
        blk.w.set_requires_grad(true);
        return blk;
    }

    Tensor<R> forward(const Tensor<R>& x, Mode mode) {
        return relu(batchnorm2d(conv2d(x, w, b, stride, Pad::same), bn, mode));
    }

    // One normalization pass over a whole batch: per-sample convolutions are
    // laid side by side so their statistics are pooled, then split apart
    // again. Equal heights required; a batch of one matches forward exactly.
    std::vector<Tensor<R>> forward_batch(const std::vector<Tensor<R>>& xs, Mode mode) {
        std::vector<Tensor<R>> conv_out;
        conv_out.reserve(xs.size());
        for (const auto& x : xs) conv_out.push_back(conv2d(x, w, b, stride, Pad::same));
        Tensor<R> joint = relu(batchnorm2d(concat_width(conv_out), bn, mode));
        std::vector<Tensor<R>> ys;
        ys.reserve(xs.size());
        int off = 0;
        for (const auto& co : conv_out) {
            ys.push_back(slice_width(joint, off, co.dim(2)));
            off += co.dim(2);
        }
        return ys;
    }

    void collect(const std::string& prefix, std::vector<ParamRef<R>>& params,
                 std::vector<ParamRef<R>>& buffers) {
        params.push_back({prefix + ".w", w});
        params.push_back({prefix + ".gamma", bn.gamma});
        params.push_back({prefix + ".beta", bn.beta});
        buffers.push_back({prefix + ".rmean", bn.running_mean});
        buffers.push_back({prefix + ".rvar", bn.running_var});
    }
};

// Stand-in for a pretrained deep backbone: per stage, a strided 3x3 conv
// block followed by a stride-1 one. Total stride is the product of the
// per-stage strides and must be 4, 8, or 16.
struct EncoderConfig {
    std::vector<int> channels = {16, 32, 48};
    std::vector<int> strides = {2, 2, 2};

    int total_stride() const {
        int s = 1;
        for (int v : strides) s *= v;
        return s;
    }

    void validate() const {
        if (channels.empty() || channels.size() != strides.size())
            throw ConfigError("encoder: channels and strides must be equal-length and nonempty");
        for (int c : channels)
            if (c < 1) throw ConfigError("encoder: channel counts must be >= 1");
        for (int s : strides)
            if (s != 1 && s != 2) throw ConfigError("encoder: per-stage strides must be 1 or 2");
        int s = total_stride();
        if (s != 4 && s != 8 && s != 16)
            throw ConfigError("encoder: total stride must be 4, 8, or 16, got " + std::to_string(s));
    }
};

template <class R>
class SolarNet {
  public:
    struct Config {
        EncoderConfig encoder;
        EmauConfig emau;
        uint64_t seed = 0;
    };

    struct Output {
        Tensor<R> seg_logits;  // [2,H,W]
        Tensor<R> cls_logits;  // [2]
        Tensor<R> mu_t;        // detached post-iteration bases
    };

    explicit SolarNet(const Config& cfg) : cfg_(cfg) {
        cfg_.encoder.validate();
        cfg_.emau.validate();
        uint64_t seed = cfg_.seed * 1000003;
        int cin = 3;
        for (size_t i = 0; i < cfg_.encoder.channels.size(); ++i) {
            int cout = cfg_.encoder.channels[i];
            stages_.push_back(ConvBnRelu<R>::create(cin, cout, cfg_.encoder.strides[i], seed++));
            stages_.push_back(ConvBnRelu<R>::create(cout, cout, 1, seed++));
            cin = cout;
        }
        feat_channels_ = cin;
        bases_ = kaiming_init_bases<R>(cfg_.emau.bases, feat_channels_, cfg_.emau.seed);
        emau_params_ = EmauParams<R>::create(feat_channels_, seed);
        seed += 2;

        // Heads start small so untrained logits sit near zero (uniform
        // class probabilities) while still carrying gradient everywhere.
        seg_w_ = tensor_create<R>({2, feat_channels_, 1, 1}, Fill<R>::kaiming(feat_channels_), seed++);
        for (auto& v : seg_w_.vec()) v *= R(0.1);
        seg_b_ = Tensor<R>::zeros({2});
        cls_w_ = tensor_create<R>({2, feat_channels_}, Fill<R>::kaiming(feat_channels_), seed++);
        for (auto& v : cls_w_.vec()) v *= R(0.1);
        cls_b_ = Tensor<R>::zeros({2});
        for (Tensor<R>* t : {&seg_w_, &seg_b_, &cls_w_, &cls_b_}) t->set_requires_grad(true);
    }

    Output forward(const Tensor<R>& image, Mode mode) {
        check_input(image);
        Tensor<R> f = image;
        for (auto& stage : stages_) f = stage.forward(f, mode);
        return heads(f, mode);
    }

    // Batched variant used by training: encoder stages pool their
    // normalization statistics across the batch, attention and heads stay
    // per sample.
    std::vector<Output> forward_batch(const std::vector<Tensor<R>>& images, Mode mode) {
        for (const auto& image : images) check_input(image);
        std::vector<Tensor<R>> fs = images;
        for (auto& stage : stages_) fs = stage.forward_batch(fs, mode);
        std::vector<Output> outs;
        outs.reserve(fs.size());
        for (auto& f : fs) outs.push_back(heads(f, mode));
        return outs;
    }

    // Moving-average base refresh, called once per training batch.
    void apply_base_update(const Tensor<R>& mu_t) {
        update_bases_moving_average(bases_, mu_t, cfg_.emau.alpha);
    }

    std::vector<ParamRef<R>> parameters() {
        std::vector<ParamRef<R>> params, buffers;
        collect(params, buffers);
        return params;
    }

    std::vector<ParamRef<R>> buffers() {
        std::vector<ParamRef<R>> params, buffers;
        collect(params, buffers);
        return buffers;
    }

    int total_stride() const { return cfg_.encoder.total_stride(); }
    int feature_channels() const { return feat_channels_; }
    const Config& config() const { return cfg_; }
    Bases<R>& bases() { return bases_; }
    EmauParams<R>& emau_params() { return emau_params_; }
    Tensor<R>& seg_weight() { return seg_w_; }
    Tensor<R>& cls_weight() { return cls_w_; }
    std::vector<ConvBnRelu<R>>& encoder_stages() { return stages_; }

  private:
    void check_input(const Tensor<R>& image) const {
        require_shape(image.ndim() == 3 && image.dim(0) == 3,
                      "solarnet: input must be [3,H,W], got " + shape_str(image.shape()));
        const int S = total_stride();
        const int H = image.dim(1), W = image.dim(2);
        if (H % S != 0 || W % S != 0)
            throw ShapeError("solarnet: input " + std::to_string(H) + "x" + std::to_string(W) +
                             " not divisible by encoder stride " + std::to_string(S));
    }

    Output heads(const Tensor<R>& f, Mode mode) {
        auto [y, mu_t] = emau_forward(f, bases_, cfg_.emau, emau_params_, mode);
        Tensor<R> seg = conv2d(y, seg_w_, seg_b_);
        for (int s = total_stride(); s > 1; s /= 2) seg = upsample2x(seg, Upsample::bilinear);
        Tensor<R> cls = linear(global_avg_pool(y), cls_w_, cls_b_);
        return {seg, cls, mu_t};
    }

    void collect(std::vector<ParamRef<R>>& params, std::vector<ParamRef<R>>& buffers) {
        for (size_t i = 0; i < stages_.size(); ++i)
            stages_[i].collect("enc." + std::to_string(i), params, buffers);
        params.push_back({"emau.in.w", emau_params_.conv_in_w});
        params.push_back({"emau.in.b", emau_params_.conv_in_b});
        params.push_back({"emau.out.w", emau_params_.conv_out_w});
        params.push_back({"emau.out.b", emau_params_.conv_out_b});
        params.push_back({"seg.w", seg_w_});
        params.push_back({"seg.b", seg_b_});
        params.push_back({"cls.w", cls_w_});
        params.push_back({"cls.b", cls_b_});
        buffers.push_back({"emau.mu", bases_.mu});
    }

    Config cfg_;
    std::vector<ConvBnRelu<R>> stages_;
    int feat_channels_ = 0;
    Bases<R> bases_;
    EmauParams<R> emau_params_;
    Tensor<R> seg_w_, seg_b_, cls_w_, cls_b_;
};

// Encoder-decoder baseline: four down blocks (two 3x3 convs + 2x2 pool),
// four up blocks (upsample + mirror-stage skip concat + two 3x3 convs),
// one final 1x1 conv. 17 convolutions in total.
template <class R>
class UNet {
  public:
    struct Config {
        int base_channels = 64;
        uint64_t seed = 0;
    };

    explicit UNet(const Config& cfg) : cfg_(cfg) {
        if (cfg_.base_channels < 1) throw ConfigError("unet: base_channels must be >= 1");
        const int b = cfg_.base_channels;
        const int widths[4] = {b, 2 * b, 4 * b, 8 * b};
        uint64_t seed = cfg_.seed * 7000003 + 1;
        int cin = 3;
        for (int i = 0; i < 4; ++i) {
            down_.push_back(ConvBnRelu<R>::create(cin, widths[i], 1, seed++));
            down_.push_back(ConvBnRelu<R>::create(widths[i], widths[i], 1, seed++));
            cin = widths[i];
        }
        for (int i = 0; i < 4; ++i) {
            int skip = widths[3 - i];
            int in_ch = cin + skip;
            int out_ch = widths[3 - i];
            up_.push_back(ConvBnRelu<R>::create(in_ch, out_ch, 1, seed++));
            up_.push_back(ConvBnRelu<R>::create(out_ch, out_ch, 1, seed++));
            cin = out_ch;
        }
        final_w_ = tensor_create<R>({2, cin, 1, 1}, Fill<R>::kaiming(cin), seed++);
        for (auto& v : final_w_.vec()) v *= R(0.1);
        final_b_ = Tensor<R>::zeros({2});
        final_w_.set_requires_grad(true);
        final_b_.set_requires_grad(true);
    }

    Tensor<R> forward(const Tensor<R>& image, Mode mode) {
        check_input(image);
        std::vector<Tensor<R>> skips;
        Tensor<R> f = image;
        for (int i = 0; i < 4; ++i) {
            f = down_[2 * i].forward(f, mode);
            f = down_[2 * i + 1].forward(f, mode);
            skips.push_back(f);
            f = maxpool2x(f);
        }
        for (int i = 0; i < 4; ++i) {
            f = upsample2x(f, Upsample::bilinear);
            f = concat_channels(skips[static_cast<size_t>(3 - i)], f);
            f = up_[2 * i].forward(f, mode);
            f = up_[2 * i + 1].forward(f, mode);
        }
        return conv2d(f, final_w_, final_b_);
    }

    // Batched variant used by training: every conv block pools its
    // normalization statistics across the batch.
    std::vector<Tensor<R>> forward_batch(const std::vector<Tensor<R>>& images, Mode mode) {
        for (const auto& image : images) check_input(image);
        std::vector<Tensor<R>> fs = images;
        std::vector<std::vector<Tensor<R>>> skips;
        for (int i = 0; i < 4; ++i) {
            fs = down_[2 * i].forward_batch(fs, mode);
            fs = down_[2 * i + 1].forward_batch(fs, mode);
            skips.push_back(fs);
            for (auto& f : fs) f = maxpool2x(f);
        }
        for (int i = 0; i < 4; ++i) {
            const auto& skip = skips[static_cast<size_t>(3 - i)];
            for (size_t s = 0; s < fs.size(); ++s) {
                fs[s] = upsample2x(fs[s], Upsample::bilinear);
                fs[s] = concat_channels(skip[s], fs[s]);
            }
            fs = up_[2 * i].forward_batch(fs, mode);
            fs = up_[2 * i + 1].forward_batch(fs, mode);
        }
        for (auto& f : fs) f = conv2d(f, final_w_, final_b_);
        return fs;
    }

    int conv_layer_count() const {
        return static_cast<int>(down_.size() + up_.size()) + 1;
    }

    std::vector<ParamRef<R>> parameters() {
        std::vector<ParamRef<R>> params, buffers;
        collect(params, buffers);
        return params;
    }

    std::vector<ParamRef<R>> buffers() {
        std::vector<ParamRef<R>> params, buffers;
        collect(params, buffers);
        return buffers;
    }

    const Config& config() const { return cfg_; }
    std::vector<ConvBnRelu<R>>& down_blocks() { return down_; }

  private:
    void check_input(const Tensor<R>& image) const {
        require_shape(image.ndim() == 3 && image.dim(0) == 3,
                      "unet: input must be [3,H,W], got " + shape_str(image.shape()));
        const int H = image.dim(1), W = image.dim(2);
        if (H % 16 != 0 || W % 16 != 0)
            throw ShapeError("unet: input " + std::to_string(H) + "x" + std::to_string(W) +
                             " not divisible by 16");
    }

    void collect(std::vector<ParamRef<R>>& params, std::vector<ParamRef<R>>& buffers) {
        for (size_t i = 0; i < down_.size(); ++i)
            down_[i].collect("down." + std::to_string(i), params, buffers);
        for (size_t i = 0; i < up_.size(); ++i)
            up_[i].collect("up." + std::to_string(i), params, buffers);
        params.push_back({"final.w", final_w_});
        params.push_back({"final.b", final_b_});
    }

    Config cfg_;
    std::vector<ConvBnRelu<R>> down_, up_;
    Tensor<R> final_w_, final_b_;
};

// An image is labeled positive iff its mask has any positive pixel.
inline int derive_image_label(const std::vector<uint8_t>& mask) {
    for (uint8_t v : mask)
        if (v != 0) return 1;
    return 0;
}

}  // namespace emseg
