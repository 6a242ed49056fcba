// Synthetic aerial-imagery generator. Each tile is produced purely from
// (seed, index), so a corpus is reproducible byte for byte: backgrounds are
// multi-octave lattice value noise (sand, rock, or water), and about 70% of
// tiles contain a solar farm drawn as rotated rows of dark blue-gray panels
// with lighter ground gaps. The emitted mask is the farm footprint
// rectangle; the row gaps are texture inside it, the way areal ground-truth
// labels farms rather than individual panels.
#pragma once

#include <cstdio>
#include <filesystem>
#include <fstream>

#include "emseg/data.hpp"

namespace emseg {

struct SynthConfig {
    int count = 80;
    int size = 64;
    uint64_t seed = 42;
    double farm_probability = 0.7;
    double difficulty = 0.5;  // density of farm-like distractors, 0..1
};

namespace detail {

inline double smoothstep(double t) { return t * t * (3.0 - 2.0 * t); }

// Lattice value noise in roughly [0,1], centered at 0.5.
inline double value_noise(uint64_t key, double y, double x, int octaves) {
    double total = 0.0, amp = 1.0, norm = 0.0;
    double freq = 1.0 / 16.0;
    for (int o = 0; o < octaves; ++o) {
        double fy = y * freq, fx = x * freq;
        int y0 = static_cast<int>(std::floor(fy)), x0 = static_cast<int>(std::floor(fx));
        double ty = smoothstep(fy - y0), tx = smoothstep(fx - x0);
        auto lattice = [&](int yi, int xi) {
            uint64_t k = hash_combine(key, static_cast<uint64_t>(o));
            k = hash_combine(k, static_cast<uint64_t>(static_cast<int64_t>(yi)));
            k = hash_combine(k, static_cast<uint64_t>(static_cast<int64_t>(xi)));
            return hash_unit(k);
        };
        double v00 = lattice(y0, x0), v01 = lattice(y0, x0 + 1);
        double v10 = lattice(y0 + 1, x0), v11 = lattice(y0 + 1, x0 + 1);
        double v = (1 - ty) * ((1 - tx) * v00 + tx * v01) + ty * ((1 - tx) * v10 + tx * v11);
        total += amp * (v - 0.5);
        norm += amp;
        amp *= 0.5;
        freq *= 2.0;
    }
    return 0.5 + total / norm;
}

inline uint8_t clamp_u8(double v) {
    return static_cast<uint8_t>(std::lround(std::min(255.0, std::max(0.0, v))));
}

}  // namespace detail

// One synthetic tile: RGB image plus footprint mask, reproducible from
// (cfg.seed, index) alone.
inline SampleTile make_synthetic_tile(const SynthConfig& cfg, int index) {
    const int N = cfg.size;
    const uint64_t tile_key = hash_combine(cfg.seed, static_cast<uint64_t>(index));
    Rng rng(tile_key);

    SampleTile t;
    t.image.width = N;
    t.image.height = N;
    t.image.channels = 3;
    t.image.pixels.resize(static_cast<size_t>(N) * N * 3);
    t.mask.assign(static_cast<size_t>(N) * N, 0);
    t.source_id = index;

    // Background terrain.
    const int terrain = rng.uniform_int(0, 2);
    double base[3], amp;
    int octaves;
    switch (terrain) {
        case 0:  // sand
            base[0] = 201; base[1] = 178; base[2] = 134; amp = 52; octaves = 4; break;
        case 1:  // rock
            base[0] = 118; base[1] = 112; base[2] = 106; amp = 68; octaves = 4; break;
        default:  // water
            base[0] = 46; base[1] = 84; base[2] = 122; amp = 26; octaves = 3; break;
    }
    const uint64_t noise_key = hash_combine(tile_key, 0xb16b00b5ULL);
    const double hue_jitter[3] = {rng.uniform(-10, 10), rng.uniform(-10, 10),
                                  rng.uniform(-10, 10)};
    for (int y = 0; y < N; ++y)
        for (int x = 0; x < N; ++x) {
            double n = detail::value_noise(noise_key, y, x, octaves) - 0.5;
            double shade = detail::value_noise(hash_combine(noise_key, 7), y * 0.5, x * 0.5, 2) - 0.5;
            for (int c = 0; c < 3; ++c)
                t.image.at(y, x, c) =
                    detail::clamp_u8(base[c] + hue_jitter[c] + amp * n + 30.0 * shade);
        }

    // Farm-like distractors: dark irregular blobs without row texture.
    const int n_distract = static_cast<int>(std::lround(cfg.difficulty * 3.0));
    for (int d = 0; d < n_distract; ++d) {
        double cy = rng.uniform(6.0, N - 6.0), cx = rng.uniform(6.0, N - 6.0);
        double ry = rng.uniform(2.5, 6.5), rx = rng.uniform(2.5, 6.5);
        double ang = rng.uniform(0.0, M_PI);
        double ca = std::cos(ang), sa = std::sin(ang);
        double tone = rng.uniform(-8.0, 8.0);
        for (int y = 0; y < N; ++y)
            for (int x = 0; x < N; ++x) {
                double u = (x - cx) * ca + (y - cy) * sa;
                double v = -(x - cx) * sa + (y - cy) * ca;
                double r2 = (u * u) / (rx * rx) + (v * v) / (ry * ry);
                if (r2 > 1.0) continue;
                double n = detail::value_noise(hash_combine(noise_key, 100 + d), y, x, 2) - 0.5;
                t.image.at(y, x, 0) = detail::clamp_u8(54 + tone + 14 * n);
                t.image.at(y, x, 1) = detail::clamp_u8(58 + tone + 14 * n);
                t.image.at(y, x, 2) = detail::clamp_u8(64 + tone + 14 * n);
            }
    }

    // Solar farm.
    if (rng.bernoulli(cfg.farm_probability)) {
        double frac = rng.uniform(0.05, 0.40);
        double aspect = rng.uniform(0.5, 2.0);
        double area = frac * N * N;
        double w = std::sqrt(area * aspect), h = std::sqrt(area / aspect);
        double theta = rng.uniform(-M_PI, M_PI);
        double ct = std::cos(theta), st = std::sin(theta);
        // Shrink until the rotated rectangle fits fully inside the frame.
        double bx, by;
        for (;;) {
            bx = 0.5 * (w * std::abs(ct) + h * std::abs(st));
            by = 0.5 * (w * std::abs(st) + h * std::abs(ct));
            if (2.0 * bx + 2.0 < N && 2.0 * by + 2.0 < N) break;
            w *= 0.9;
            h *= 0.9;
        }
        double cx = rng.uniform(bx + 1.0, N - 1.0 - bx);
        double cy = rng.uniform(by + 1.0, N - 1.0 - by);

        double row_period = rng.uniform(5.0, 9.0);
        double gap_width = row_period * rng.uniform(0.2, 0.3);
        double col_period = rng.uniform(10.0, 14.0);
        double phase = rng.uniform(0.0, row_period);
        double panel_tone = rng.uniform(-6.0, 6.0);

        for (int y = 0; y < N; ++y)
            for (int x = 0; x < N; ++x) {
                double du = (x - cx) * ct + (y - cy) * st;
                double dv = -(x - cx) * st + (y - cy) * ct;
                if (std::abs(du) > 0.5 * w || std::abs(dv) > 0.5 * h) continue;
                t.mask[static_cast<size_t>(y) * N + x] = 1;
                double rpos = std::fmod(dv + phase + 1000.0 * row_period, row_period);
                double n = detail::value_noise(hash_combine(noise_key, 999), y, x, 2) - 0.5;
                if (rpos < gap_width) {
                    // Ground visible between panel rows.
                    t.image.at(y, x, 0) = detail::clamp_u8(122 + 18 * n);
                    t.image.at(y, x, 1) = detail::clamp_u8(112 + 18 * n);
                    t.image.at(y, x, 2) = detail::clamp_u8(98 + 18 * n);
                } else {
                    double cpos = std::fmod(du + 1000.0 * col_period, col_period);
                    double seam = cpos < 0.9 ? 14.0 : 0.0;
                    t.image.at(y, x, 0) = detail::clamp_u8(36 + panel_tone + seam + 10 * n);
                    t.image.at(y, x, 1) = detail::clamp_u8(43 + panel_tone + seam + 10 * n);
                    t.image.at(y, x, 2) = detail::clamp_u8(62 + panel_tone + seam + 10 * n);
                }
            }
    }

    // Per-pixel sensor noise.
    for (int y = 0; y < N; ++y)
        for (int x = 0; x < N; ++x) {
            uint64_t pk = hash_combine(hash_combine(tile_key, 0x5e150aULL),
                                       static_cast<uint64_t>(y) * N + x);
            for (int c = 0; c < 3; ++c) {
                double n = hash_unit(hash_combine(pk, static_cast<uint64_t>(c))) - 0.5;
                t.image.at(y, x, c) =
                    detail::clamp_u8(static_cast<double>(t.image.at(y, x, c)) + 5.0 * n);
            }
        }

    t.label = derive_image_label(t.mask);
    return t;
}

inline double positive_fraction(const SampleTile& t) {
    if (t.mask.empty()) return 0.0;
    size_t pos = 0;
    for (uint8_t v : t.mask) pos += v;
    return static_cast<double>(pos) / static_cast<double>(t.mask.size());
}

// Writes images/, masks/, and manifest.csv under root.
inline void generate_synthetic_dataset(const std::string& root, const SynthConfig& cfg) {
    namespace fs = std::filesystem;
    if (cfg.count < 1 || cfg.size < 8) throw ConfigError("synth: count >= 1 and size >= 8 required");
    fs::create_directories(fs::path(root) / "images");
    fs::create_directories(fs::path(root) / "masks");

    std::ofstream manifest(fs::path(root) / "manifest.csv");
    if (!manifest) throw FormatError("synth: cannot write manifest.csv under " + root);
    manifest << "stem,label,positive_pixel_fraction\n";

    for (int i = 0; i < cfg.count; ++i) {
        SampleTile t = make_synthetic_tile(cfg, i);
        char stem[32];
        std::snprintf(stem, sizeof stem, "synth_%05d", i);
        write_image((fs::path(root) / "images" / (std::string(stem) + ".ppm")).string(), t.image);

        ImageU8 mask;
        mask.width = t.width();
        mask.height = t.height();
        mask.channels = 1;
        mask.pixels.resize(t.mask.size());
        for (size_t p = 0; p < t.mask.size(); ++p) mask.pixels[p] = t.mask[p] ? 255 : 0;
        write_image((fs::path(root) / "masks" / (std::string(stem) + ".pgm")).string(), mask);

        char row[64];
        std::snprintf(row, sizeof row, "%s,%d,%.6f\n", stem, t.label, positive_fraction(t));
        manifest << row;
    }
    if (!manifest.good()) throw FormatError("synth: manifest write failed under " + root);
}

}  // namespace emseg
