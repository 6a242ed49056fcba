// Segmentation metrics and model evaluation: dataset-aggregated confusion
// counts, mean IoU, pixel accuracy, tiled whole-image inference, and
// prediction mask / overlay rendering.
#pragma once

#include "emseg/data.hpp"

namespace emseg {

// Counts indexed [truth][prediction], aggregated over evaluated pixels.
struct ConfusionMatrix {
    long long counts[2][2] = {{0, 0}, {0, 0}};

    long long total() const {
        return counts[0][0] + counts[0][1] + counts[1][0] + counts[1][1];
    }

    void merge(const ConfusionMatrix& other) {
        for (int t = 0; t < 2; ++t)
            for (int p = 0; p < 2; ++p) counts[t][p] += other.counts[t][p];
    }
};

inline void confusion_update(ConfusionMatrix& cm, const std::vector<uint8_t>& pred,
                             const std::vector<uint8_t>& truth) {
    if (pred.size() != truth.size())
        throw ShapeError("confusion: pred has " + std::to_string(pred.size()) +
                         " pixels, truth " + std::to_string(truth.size()));
    for (size_t i = 0; i < pred.size(); ++i) {
        if (pred[i] > 1 || truth[i] > 1)
            throw MaskError("confusion: masks must be binary");
        ++cm.counts[truth[i]][pred[i]];
    }
}

// Mean over the two classes of TP/(TP+FP+FN). A class absent from both
// truth and prediction contributes IoU 1.
inline double miou(const ConfusionMatrix& cm) {
    if (cm.total() == 0) throw MetricError("miou: empty confusion matrix");
    double sum = 0.0;
    for (int c = 0; c < 2; ++c) {
        long long tp = cm.counts[c][c];
        long long fp = cm.counts[1 - c][c];
        long long fn = cm.counts[c][1 - c];
        long long denom = tp + fp + fn;
        sum += denom == 0 ? 1.0 : static_cast<double>(tp) / static_cast<double>(denom);
    }
    return 0.5 * sum;
}

inline double pixel_acc(const ConfusionMatrix& cm) {
    if (cm.total() == 0) throw MetricError("pixel_acc: empty confusion matrix");
    return static_cast<double>(cm.counts[0][0] + cm.counts[1][1]) /
           static_cast<double>(cm.total());
}

// Per-pixel argmax over the two logit planes; ties go to background.
template <class R>
std::vector<uint8_t> argmax_mask(const Tensor<R>& seg_logits) {
    require_shape(seg_logits.ndim() == 3 && seg_logits.dim(0) == 2,
                  "argmax: logits must be [2,H,W], got " + shape_str(seg_logits.shape()));
    const int H = seg_logits.dim(1), W = seg_logits.dim(2);
    std::vector<uint8_t> mask(static_cast<size_t>(H) * W);
    const R* p = seg_logits.data();
    for (size_t i = 0; i < mask.size(); ++i)
        mask[i] = p[mask.size() + i] > p[i] ? 1 : 0;
    return mask;
}

// Tiled eval-mode inference over one full image: tile, forward, stitch.
template <class R, class Model>
Tensor<R> predict_logits(Model& model, const ImageU8& image, int tile, int stride) {
    constexpr bool has_cls = requires(Model& m, const Tensor<R>& t) {
        m.forward(t, Mode::eval).cls_logits;
    };
    NoGradGuard guard;
    std::vector<std::pair<Tensor<R>, std::pair<int, int>>> pieces;
    for (const SampleTile& t : tile_image(image, nullptr, tile, stride)) {
        Tensor<R> x = image_to_tensor<R>(t.image);
        Tensor<R> seg;
        if constexpr (has_cls)
            seg = model.forward(x, Mode::eval).seg_logits;
        else
            seg = model.forward(x, Mode::eval);
        pieces.push_back({seg, {t.row, t.col}});
    }
    return stitch_logits(pieces, image.height, image.width);
}

struct EvalResult {
    double miou = 0.0;
    double pixel_acc = 0.0;
    long long images = 0;
    long long pixels = 0;
    ConfusionMatrix cm;
};

// Evaluates a model over a manifest with one dataset-level confusion
// matrix (counts aggregated across images, not averaged per image).
template <class R, class Model>
EvalResult evaluate_model(Model& model, const DatasetManifest& manifest, int tile, int stride) {
    if (manifest.empty()) throw MetricError("evaluate: empty manifest");
    EvalResult result;
    for (const auto& entry : manifest.entries) {
        SampleTile sample = load_sample(entry);
        Tensor<R> logits = predict_logits<R>(model, sample.image, tile, stride);
        confusion_update(result.cm, argmax_mask(logits), sample.mask);
        ++result.images;
    }
    result.pixels = result.cm.total();
    result.miou = miou(result.cm);
    result.pixel_acc = pixel_acc(result.cm);
    return result;
}

// Appends one row to the results CSV, writing the header first when the
// file is new or empty.
inline void append_results_row(const std::string& path, const std::string& model_name,
                               const std::string& dataset_name, const EvalResult& result) {
    namespace fs = std::filesystem;
    bool need_header = !fs::exists(path) || fs::file_size(path) == 0;
    std::ofstream out(path, std::ios::app);
    if (!out) throw FormatError("results: cannot write " + path);
    if (need_header) out << "model,dataset,miou,pixel_acc,images,pixels\n";
    char row[256];
    std::snprintf(row, sizeof row, "%s,%s,%.9g,%.9g,%lld,%lld\n", model_name.c_str(),
                  dataset_name.c_str(), result.miou, result.pixel_acc, result.images,
                  result.pixels);
    out << row;
    if (!out.good()) throw FormatError("results: write failed for " + path);
}

// Argmax prediction as a binary PGM with values {0,255}.
template <class R>
void write_mask(const Tensor<R>& seg_logits, const std::string& path) {
    std::vector<uint8_t> mask = argmax_mask(seg_logits);
    ImageU8 img;
    img.height = seg_logits.dim(1);
    img.width = seg_logits.dim(2);
    img.channels = 1;
    img.pixels.resize(mask.size());
    for (size_t i = 0; i < mask.size(); ++i) img.pixels[i] = mask[i] ? 255 : 0;
    write_image(path, img);
}

// RGB overlay: predicted pixels blend 40% blue over the input; background
// pixels pass through untouched.
template <class R>
void write_overlay(const Tensor<R>& seg_logits, const ImageU8& image, const std::string& path) {
    if (image.channels != 3) throw FormatError("overlay: expected an RGB image");
    require_shape(seg_logits.dim(1) == image.height && seg_logits.dim(2) == image.width,
                  "overlay: logits " + shape_str(seg_logits.shape()) + " do not match image");
    std::vector<uint8_t> mask = argmax_mask(seg_logits);
    ImageU8 out = image;
    for (int y = 0; y < image.height; ++y)
        for (int x = 0; x < image.width; ++x) {
            if (!mask[static_cast<size_t>(y) * image.width + x]) continue;
            const double blue[3] = {0.0, 0.0, 255.0};
            for (int c = 0; c < 3; ++c)
                out.at(y, x, c) = static_cast<uint8_t>(
                    std::lround(0.6 * image.at(y, x, c) + 0.4 * blue[c]));
        }
    write_image(path, out);
}

}  // namespace emseg
