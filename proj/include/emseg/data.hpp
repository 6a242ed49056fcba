// Dataset loading, train/test splitting, large-raster tiling and
// stitching, and the training augmentations.
//
// Layout on disk: root/images/<stem>.ppm (RGB) + root/masks/<stem>.pgm
// (binary, values 0 or 255). Masks are held in memory as {0,1}.
#pragma once

#include <filesystem>
#include <optional>
#include <utility>

#include "emseg/image.hpp"
#include "emseg/models.hpp"

namespace emseg {

struct SampleTile {
    ImageU8 image;               // RGB
    std::vector<uint8_t> mask;   // {0,1}, height*width; empty when unlabeled
    int label = 0;               // 1 iff mask has any positive pixel
    int source_id = 0;
    int row = 0, col = 0;        // tile origin in the source raster

    int height() const { return image.height; }
    int width() const { return image.width; }
};

struct ManifestEntry {
    std::string stem;
    std::string image_path;
    std::string mask_path;
};

struct DatasetManifest {
    std::vector<ManifestEntry> entries;
    size_t size() const { return entries.size(); }
    bool empty() const { return entries.empty(); }
};

// Scans root/images, pairs each image with its mask, and validates every
// pair (equal dims, strictly binary mask). Deterministic lexicographic
// order.
inline DatasetManifest load_dataset(const std::string& root) {
    namespace fs = std::filesystem;
    DatasetManifest manifest;
    fs::path images_dir = fs::path(root) / "images";
    fs::path masks_dir = fs::path(root) / "masks";
    if (!fs::exists(images_dir)) return manifest;

    std::vector<fs::path> image_files;
    for (const auto& entry : fs::directory_iterator(images_dir))
        if (entry.is_regular_file() && entry.path().extension() == ".ppm")
            image_files.push_back(entry.path());
    std::sort(image_files.begin(), image_files.end());

    for (const auto& img_path : image_files) {
        std::string stem = img_path.stem().string();
        fs::path mask_path = masks_dir / (stem + ".pgm");
        if (!fs::exists(mask_path))
            throw ManifestError("no mask for image " + img_path.string());
        ImageU8 img = read_image(img_path.string());
        ImageU8 mask = read_image(mask_path.string());
        if (img.channels != 3) throw FormatError(img_path.string() + ": expected RGB");
        if (mask.channels != 1) throw FormatError(mask_path.string() + ": expected grayscale");
        if (img.width != mask.width || img.height != mask.height)
            throw ShapeError(stem + ": image " + std::to_string(img.width) + "x" +
                             std::to_string(img.height) + " vs mask " + std::to_string(mask.width) +
                             "x" + std::to_string(mask.height));
        for (uint8_t v : mask.pixels)
            if (v != 0 && v != 255)
                throw MaskError(mask_path.string() + ": non-binary value " + std::to_string(v));
        manifest.entries.push_back({stem, img_path.string(), mask_path.string()});
    }
    return manifest;
}

// Loads one manifest entry as a labeled sample (mask mapped 255 -> 1).
inline SampleTile load_sample(const ManifestEntry& entry, int source_id = 0) {
    SampleTile s;
    s.image = read_image(entry.image_path);
    ImageU8 mask = read_image(entry.mask_path);
    s.mask.resize(mask.pixels.size());
    for (size_t i = 0; i < mask.pixels.size(); ++i) s.mask[i] = mask.pixels[i] ? 1 : 0;
    s.label = derive_image_label(s.mask);
    s.source_id = source_id;
    return s;
}

// Seeded shuffle, then the first round(fraction*n) entries become the test
// set. Disjoint and exhaustive.
inline std::pair<DatasetManifest, DatasetManifest> split(const DatasetManifest& manifest,
                                                         double test_fraction, uint64_t seed) {
    if (test_fraction <= 0.0 || test_fraction >= 1.0)
        throw ConfigError("split: test fraction must lie strictly between 0 and 1");
    const size_t n = manifest.size();
    if (n < 2) throw ConfigError("split: need at least 2 entries, got " + std::to_string(n));
    size_t n_test = static_cast<size_t>(std::llround(test_fraction * static_cast<double>(n)));
    n_test = std::min(std::max<size_t>(n_test, 1), n - 1);

    std::vector<size_t> order(n);
    for (size_t i = 0; i < n; ++i) order[i] = i;
    Rng rng(seed);
    rng.shuffle(order);

    DatasetManifest train, test;
    for (size_t i = 0; i < n; ++i) {
        const auto& e = manifest.entries[order[i]];
        (i < n_test ? test : train).entries.push_back(e);
    }
    return {train, test};
}

namespace detail {

// Mirror an index into [0, n) about the edge pixels (no edge repeat).
inline int reflect_index(int idx, int n) {
    if (n == 1) return 0;
    while (idx < 0 || idx >= n) {
        if (idx < 0) idx = -idx;
        if (idx >= n) idx = 2 * n - 2 - idx;
    }
    return idx;
}

// Tile origins along one axis: multiples of stride, stopping once a tile
// reaches the far edge (or once the next origin would start outside the
// raster, which leaves a gap for the stitcher to report).
inline std::vector<int> grid_origins(int extent, int tile, int stride) {
    std::vector<int> origins;
    int pos = 0;
    while (true) {
        origins.push_back(pos);
        if (pos + tile >= extent) break;
        pos += stride;
        if (pos >= extent) break;
    }
    return origins;
}

}  // namespace detail

// Raster-scan windows of size tile stepped by stride; windows reaching past
// the bottom/right edges are filled by reflection. Origins are recorded so
// predictions can be stitched back.
inline std::vector<SampleTile> tile_image(const ImageU8& image, const std::vector<uint8_t>* mask,
                                          int tile, int stride, int source_id = 0) {
    if (image.channels != 3) throw FormatError("tile_image: expected an RGB image");
    if (tile < 1 || stride < 1) throw ConfigError("tile_image: tile and stride must be positive");
    const int H = image.height, W = image.width;
    if (mask && static_cast<int>(mask->size()) != H * W)
        throw ShapeError("tile_image: mask size does not match image");

    std::vector<SampleTile> tiles;
    for (int oy : detail::grid_origins(H, tile, stride)) {
        for (int ox : detail::grid_origins(W, tile, stride)) {
            SampleTile t;
            t.image.width = tile;
            t.image.height = tile;
            t.image.channels = 3;
            t.image.pixels.resize(static_cast<size_t>(tile) * tile * 3);
            if (mask) t.mask.resize(static_cast<size_t>(tile) * tile);
            for (int y = 0; y < tile; ++y) {
                int sy = detail::reflect_index(oy + y, H);
                for (int x = 0; x < tile; ++x) {
                    int sx = detail::reflect_index(ox + x, W);
                    for (int c = 0; c < 3; ++c) t.image.at(y, x, c) = image.at(sy, sx, c);
                    if (mask) t.mask[static_cast<size_t>(y) * tile + x] =
                        (*mask)[static_cast<size_t>(sy) * W + sx];
                }
            }
            if (mask) t.label = derive_image_label(t.mask);
            t.source_id = source_id;
            t.row = oy;
            t.col = ox;
            tiles.push_back(std::move(t));
        }
    }
    return tiles;
}

// Reassembles per-tile logit maps into a full-raster logit map, averaging
// where tiles overlap and discarding reflected padding.
template <class R>
Tensor<R> stitch_logits(const std::vector<std::pair<Tensor<R>, std::pair<int, int>>>& tiles, int H,
                        int W) {
    if (tiles.empty()) throw StitchError("stitch: no tiles");
    const int C = tiles.front().first.dim(0);
    Tensor<R> out = Tensor<R>::zeros({C, H, W});
    std::vector<int> count(static_cast<size_t>(H) * W, 0);

    for (const auto& [logits, origin] : tiles) {
        require_shape(logits.ndim() == 3 && logits.dim(0) == C,
                      "stitch: tile logits must be [C,t,t], got " + shape_str(logits.shape()));
        const int th = logits.dim(1), tw = logits.dim(2);
        const auto [oy, ox] = origin;
        for (int y = 0; y < th; ++y) {
            int gy = oy + y;
            if (gy < 0 || gy >= H) continue;
            for (int x = 0; x < tw; ++x) {
                int gx = ox + x;
                if (gx < 0 || gx >= W) continue;
                for (int c = 0; c < C; ++c)
                    out.at({c, gy, gx}) += logits.at({c, y, x});
                ++count[static_cast<size_t>(gy) * W + gx];
            }
        }
    }
    for (int y = 0; y < H; ++y)
        for (int x = 0; x < W; ++x) {
            int n = count[static_cast<size_t>(y) * W + x];
            if (n == 0)
                throw StitchError("stitch: pixel (" + std::to_string(y) + "," + std::to_string(x) +
                                  ") not covered by any tile");
            if (n > 1)
                for (int c = 0; c < C; ++c) out.at({c, y, x}) /= static_cast<R>(n);
        }
    return out;
}

// ---------------------------------------------------------------------------
// Augmentations

enum class AugOp { crop, scale, rotate, flip_h, flip_v };

namespace detail {

// Warp by the inverse affine map src = A*(dst - c) + c + t. Image channels
// are sampled bilinearly with reflected borders; the mask uses nearest
// neighbor so it stays binary.
inline SampleTile warp_affine(const SampleTile& s, double a00, double a01, double a10, double a11,
                              double tx, double ty) {
    const int H = s.height(), W = s.width();
    const double cy = 0.5 * (H - 1), cx = 0.5 * (W - 1);
    SampleTile out;
    out.image.width = W;
    out.image.height = H;
    out.image.channels = 3;
    out.image.pixels.resize(s.image.pixels.size());
    if (!s.mask.empty()) out.mask.resize(s.mask.size());
    out.source_id = s.source_id;
    out.row = s.row;
    out.col = s.col;

    for (int y = 0; y < H; ++y) {
        for (int x = 0; x < W; ++x) {
            double dx = x - cx, dy = y - cy;
            double sx = a00 * dx + a01 * dy + cx + tx;
            double sy = a10 * dx + a11 * dy + cy + ty;

            int x0 = static_cast<int>(std::floor(sx)), y0 = static_cast<int>(std::floor(sy));
            double fx = sx - x0, fy = sy - y0;
            int x0r = reflect_index(x0, W), x1r = reflect_index(x0 + 1, W);
            int y0r = reflect_index(y0, H), y1r = reflect_index(y0 + 1, H);
            for (int c = 0; c < 3; ++c) {
                double top = (1 - fx) * s.image.at(y0r, x0r, c) + fx * s.image.at(y0r, x1r, c);
                double bot = (1 - fx) * s.image.at(y1r, x0r, c) + fx * s.image.at(y1r, x1r, c);
                double v = (1 - fy) * top + fy * bot;
                out.image.at(y, x, c) = static_cast<uint8_t>(std::lround(std::min(255.0, std::max(0.0, v))));
            }
            if (!s.mask.empty()) {
                int nx = reflect_index(static_cast<int>(std::lround(sx)), W);
                int ny = reflect_index(static_cast<int>(std::lround(sy)), H);
                out.mask[static_cast<size_t>(y) * W + x] = s.mask[static_cast<size_t>(ny) * W + nx];
            }
        }
    }
    if (!out.mask.empty()) out.label = derive_image_label(out.mask);
    return out;
}

inline SampleTile flip(const SampleTile& s, bool horizontal) {
    const int H = s.height(), W = s.width();
    SampleTile out = s;
    for (int y = 0; y < H; ++y)
        for (int x = 0; x < W; ++x) {
            int sy = horizontal ? y : H - 1 - y;
            int sx = horizontal ? W - 1 - x : x;
            for (int c = 0; c < 3; ++c) out.image.at(y, x, c) = s.image.at(sy, sx, c);
            if (!s.mask.empty())
                out.mask[static_cast<size_t>(y) * W + x] = s.mask[static_cast<size_t>(sy) * W + sx];
        }
    if (!out.mask.empty()) out.label = derive_image_label(out.mask);
    return out;
}

}  // namespace detail

// One augmentation step. crop picks a random region covering 0.6 to 1.0 of
// each side and rescales it to the original size; scale resamples by a
// factor in (0.8, 1.2) about the center; rotate turns by a uniform angle in
// (-180, 180) degrees. Out-of-frame samples use reflected borders, masks
// stay binary, and the label is recomputed.
inline SampleTile augment(const SampleTile& sample, AugOp op, Rng& rng) {
    const int H = sample.height(), W = sample.width();
    switch (op) {
        case AugOp::flip_h:
            return detail::flip(sample, true);
        case AugOp::flip_v:
            return detail::flip(sample, false);
        case AugOp::crop: {
            double f = rng.uniform(0.6, 1.0);
            int ch = std::max(1, static_cast<int>(std::lround(f * H)));
            int cw = std::max(1, static_cast<int>(std::lround(f * W)));
            int oy = rng.uniform_int(0, H - ch);
            int ox = rng.uniform_int(0, W - cw);
            // Map output pixel centers onto the crop window.
            double sy_scale = static_cast<double>(ch) / H;
            double sx_scale = static_cast<double>(cw) / W;
            double cy = 0.5 * (H - 1), cx = 0.5 * (W - 1);
            double ty = (oy + 0.5 * (ch - 1)) - cy;
            double tx = (ox + 0.5 * (cw - 1)) - cx;
            return detail::warp_affine(sample, sx_scale, 0.0, 0.0, sy_scale, tx, ty);
        }
        case AugOp::scale: {
            double s = rng.uniform(0.8, 1.2);
            double inv = 1.0 / s;
            return detail::warp_affine(sample, inv, 0.0, 0.0, inv, 0.0, 0.0);
        }
        case AugOp::rotate: {
            double theta = rng.uniform(-180.0, 180.0) * M_PI / 180.0;
            double c = std::cos(theta), s = std::sin(theta);
            // Inverse of a rotation by theta is a rotation by -theta.
            return detail::warp_affine(sample, c, s, -s, c, 0.0, 0.0);
        }
    }
    throw Error("augment: unknown op");
}

// Training policy: draw one of the five ops uniformly.
inline SampleTile augment_random(const SampleTile& sample, Rng& rng) {
    static const AugOp ops[5] = {AugOp::crop, AugOp::scale, AugOp::rotate, AugOp::flip_h,
                                 AugOp::flip_v};
    return augment(sample, ops[rng.uniform_int(0, 4)], rng);
}

// [3,H,W] float tensor in [0,1] from an RGB sample.
template <class R>
Tensor<R> image_to_tensor(const ImageU8& image) {
    if (image.channels != 3) throw FormatError("image_to_tensor: expected RGB");
    const int H = image.height, W = image.width;
    Tensor<R> t = Tensor<R>::zeros({3, H, W});
    for (int c = 0; c < 3; ++c)
        for (int y = 0; y < H; ++y)
            for (int x = 0; x < W; ++x)
                t.at({c, y, x}) = static_cast<R>(image.at(y, x, c)) / R(255);
    return t;
}

}  // namespace emseg
