// Neural-network ops on [C,H,W] feature maps and [N,K] matrices.
//
// Convolution is im2col + matmul; the backward pass rebuilds the patch
// matrix instead of storing it, trading FLOPs for memory. Pooling records
// argmax positions; upsampling backward is the transpose of the forward
// interpolation map. All ops record on the active Tape (see tensor.hpp).
#pragma once

#include <cstring>
#include <string>

#include "emseg/tensor.hpp"

namespace emseg {

enum class Pad { same, valid };

namespace detail {

inline int conv_out_dim(int in, int k, int stride, Pad pad) {
    if (pad == Pad::same) return (in + stride - 1) / stride;
    return (in - k) / stride + 1;
}

// Patch matrix: cols[(ci*k+dy)*k+dx, p] = x[ci, r0+dy, c0+dx], zero outside.
template <class R>
void im2col(const R* x, int C, int H, int W, int k, int stride, int pad_top, int pad_left,
            int Ho, int Wo, R* cols) {
    const int P = Ho * Wo;
    for (int ci = 0; ci < C; ++ci) {
        for (int dy = 0; dy < k; ++dy) {
            for (int dx = 0; dx < k; ++dx) {
                R* row = cols + static_cast<size_t>((ci * k + dy) * k + dx) * P;
                for (int oy = 0; oy < Ho; ++oy) {
                    int iy = oy * stride - pad_top + dy;
                    if (iy < 0 || iy >= H) {
                        std::fill(row + oy * Wo, row + (oy + 1) * Wo, R(0));
                        continue;
                    }
                    const R* src = x + (static_cast<size_t>(ci) * H + iy) * W;
                    for (int ox = 0; ox < Wo; ++ox) {
                        int ix = ox * stride - pad_left + dx;
                        row[oy * Wo + ox] = (ix < 0 || ix >= W) ? R(0) : src[ix];
                    }
                }
            }
        }
    }
}

template <class R>
void col2im_add(const R* cols, int C, int H, int W, int k, int stride, int pad_top, int pad_left,
                int Ho, int Wo, R* dx) {
    const int P = Ho * Wo;
    for (int ci = 0; ci < C; ++ci) {
        for (int dy = 0; dy < k; ++dy) {
            for (int dx_ = 0; dx_ < k; ++dx_) {
                const R* row = cols + static_cast<size_t>((ci * k + dy) * k + dx_) * P;
                for (int oy = 0; oy < Ho; ++oy) {
                    int iy = oy * stride - pad_top + dy;
                    if (iy < 0 || iy >= H) continue;
                    R* dst = dx + (static_cast<size_t>(ci) * H + iy) * W;
                    for (int ox = 0; ox < Wo; ++ox) {
                        int ix = ox * stride - pad_left + dx_;
                        if (ix >= 0 && ix < W) dst[ix] += row[oy * Wo + ox];
                    }
                }
            }
        }
    }
}

}  // namespace detail

// Cross-correlation of x[Cin,H,W] with w[Cout,Cin,k,k] plus bias[Cout].
// pad=same keeps H'=ceil(H/stride) (asymmetric: extra padding goes bottom/right).
template <class R>
Tensor<R> conv2d(const Tensor<R>& x, const Tensor<R>& w, const Tensor<R>& bias, int stride = 1,
                 Pad pad = Pad::same) {
    require_shape(x.ndim() == 3, "conv2d: input must be [C,H,W], got " + shape_str(x.shape()));
    require_shape(w.ndim() == 4, "conv2d: weight must be [Cout,Cin,k,k], got " + shape_str(w.shape()));
    const int Cin = x.dim(0), H = x.dim(1), W = x.dim(2);
    const int Cout = w.dim(0), k = w.dim(2);
    require_shape(w.dim(1) == Cin, "conv2d: weight Cin " + std::to_string(w.dim(1)) +
                                       " vs input C " + std::to_string(Cin));
    require_shape(w.dim(3) == k, "conv2d: kernel must be square");
    require_shape(k == 1 || k == 3, "conv2d: kernel size must be 1 or 3");
    require_shape(stride == 1 || stride == 2, "conv2d: stride must be 1 or 2");
    require_shape(bias.ndim() == 1 && bias.dim(0) == Cout, "conv2d: bias must be [Cout]");
    if (pad == Pad::valid && (H < k || W < k))
        throw ShapeError("conv2d: kernel " + std::to_string(k) + " exceeds input " + shape_str(x.shape()));

    const int Ho = detail::conv_out_dim(H, k, stride, pad);
    const int Wo = detail::conv_out_dim(W, k, stride, pad);
    int pad_top = 0, pad_left = 0;
    if (pad == Pad::same) {
        pad_top = std::max((Ho - 1) * stride + k - H, 0) / 2;
        pad_left = std::max((Wo - 1) * stride + k - W, 0) / 2;
    }
    const int P = Ho * Wo, CKK = Cin * k * k;

    std::vector<R> cols(static_cast<size_t>(CKK) * P);
    detail::im2col(x.data(), Cin, H, W, k, stride, pad_top, pad_left, Ho, Wo, cols.data());

    Tensor<R> out = Tensor<R>::zeros({Cout, Ho, Wo});
    mm_nn(w.data(), cols.data(), out.data(), Cout, CKK, P);
    for (int co = 0; co < Cout; ++co) {
        R b = bias.data()[co];
        R* dst = out.data() + static_cast<size_t>(co) * P;
        for (int p = 0; p < P; ++p) dst[p] += b;
    }

    Tensor<R> xc = x, wc = w, bc = bias;
    return detail::maybe_record<R>(
        out, {&x, &w, &bias},
        [xc, wc, bc, out, Cin, H, W, Cout, k, stride, pad_top, pad_left, Ho, Wo]() mutable {
            if (!out.has_grad()) return;
            const int P = Ho * Wo, CKK = Cin * k * k;
            const R* g = out.grad_ref().data();
            if (bc.requires_grad()) {
                auto& db = bc.grad();
                for (int co = 0; co < Cout; ++co) {
                    R acc = 0;
                    const R* src = g + static_cast<size_t>(co) * P;
                    for (int p = 0; p < P; ++p) acc += src[p];
                    db[co] += acc;
                }
            }
            if (wc.requires_grad() || xc.requires_grad()) {
                std::vector<R> cols(static_cast<size_t>(CKK) * P);
                if (wc.requires_grad()) {
                    detail::im2col(xc.data(), Cin, H, W, k, stride, pad_top, pad_left, Ho, Wo,
                                   cols.data());
                    // dW[Cout,CKK] += g[Cout,P] * cols[CKK,P]^T
                    mm_nt(g, cols.data(), wc.grad().data(), Cout, P, CKK, /*accumulate=*/true);
                }
                if (xc.requires_grad()) {
                    // dcols[CKK,P] = w[Cout,CKK]^T * g[Cout,P]
                    mm_tn(wc.data(), g, cols.data(), CKK, Cout, P);
                    detail::col2im_add(cols.data(), Cin, H, W, k, stride, pad_top, pad_left, Ho, Wo,
                                       xc.grad().data());
                }
            }
        });
}

// 2x2 max pooling, stride 2. Odd edges keep a clamped window (replication
// padding gives the same max). Gradient goes to the argmax; ties break
// toward the first position in row-major scan order.
template <class R>
Tensor<R> maxpool2x(const Tensor<R>& x) {
    require_shape(x.ndim() == 3, "maxpool2x: input must be [C,H,W], got " + shape_str(x.shape()));
    const int C = x.dim(0), H = x.dim(1), W = x.dim(2);
    const int Ho = (H + 1) / 2, Wo = (W + 1) / 2;
    Tensor<R> out = Tensor<R>::zeros({C, Ho, Wo});
    std::vector<int64_t> argmax(static_cast<size_t>(C) * Ho * Wo);
    const R* px = x.data();
    R* po = out.data();
    for (int c = 0; c < C; ++c) {
        for (int oy = 0; oy < Ho; ++oy) {
            for (int ox = 0; ox < Wo; ++ox) {
                int r1 = std::min(2 * oy + 2, H), c1 = std::min(2 * ox + 2, W);
                R best = 0;
                int64_t best_at = -1;
                for (int r = 2 * oy; r < r1; ++r) {
                    for (int cc = 2 * ox; cc < c1; ++cc) {
                        int64_t at = (static_cast<int64_t>(c) * H + r) * W + cc;
                        if (best_at < 0 || px[at] > best) {
                            best = px[at];
                            best_at = at;
                        }
                    }
                }
                size_t o = (static_cast<size_t>(c) * Ho + oy) * Wo + ox;
                po[o] = best;
                argmax[o] = best_at;
            }
        }
    }
    Tensor<R> xc = x;
    return detail::maybe_record<R>(out, {&x}, [xc, out, argmax = std::move(argmax)]() mutable {
        if (!out.has_grad() || !xc.requires_grad()) return;
        const auto& g = out.grad_ref();
        auto& dx = xc.grad();
        for (size_t o = 0; o < argmax.size(); ++o) dx[static_cast<size_t>(argmax[o])] += g[o];
    });
}

enum class Upsample { nearest, bilinear };

// Doubles spatial dims. Bilinear uses the align_corners=false convention:
// src = (dst + 0.5)/2 - 0.5, clamped to the valid range.
template <class R>
Tensor<R> upsample2x(const Tensor<R>& x, Upsample mode) {
    require_shape(x.ndim() == 3, "upsample2x: input must be [C,H,W], got " + shape_str(x.shape()));
    const int C = x.dim(0), H = x.dim(1), W = x.dim(2);
    const int Ho = 2 * H, Wo = 2 * W;
    Tensor<R> out = Tensor<R>::zeros({C, Ho, Wo});
    const R* px = x.data();
    R* po = out.data();

    if (mode == Upsample::nearest) {
        for (int c = 0; c < C; ++c)
            for (int oy = 0; oy < Ho; ++oy) {
                const R* src = px + (static_cast<size_t>(c) * H + oy / 2) * W;
                R* dst = po + (static_cast<size_t>(c) * Ho + oy) * Wo;
                for (int ox = 0; ox < Wo; ++ox) dst[ox] = src[ox / 2];
            }
        Tensor<R> xc = x;
        return detail::maybe_record<R>(out, {&x}, [xc, out, C, H, W, Ho, Wo]() mutable {
            if (!out.has_grad() || !xc.requires_grad()) return;
            const auto& g = out.grad_ref();
            auto& dx = xc.grad();
            for (int c = 0; c < C; ++c)
                for (int oy = 0; oy < Ho; ++oy)
                    for (int ox = 0; ox < Wo; ++ox)
                        dx[(static_cast<size_t>(c) * H + oy / 2) * W + ox / 2] +=
                            g[(static_cast<size_t>(c) * Ho + oy) * Wo + ox];
        });
    }

    // Per output coordinate: two source indices and a blend weight.
    std::vector<int> y0(Ho), y1(Ho), x0(Wo), x1(Wo);
    std::vector<double> wy(Ho), wx(Wo);
    auto setup = [](int n_out, int n_in, std::vector<int>& i0, std::vector<int>& i1,
                    std::vector<double>& w) {
        for (int d = 0; d < n_out; ++d) {
            double s = (d + 0.5) / 2.0 - 0.5;
            s = std::max(0.0, std::min(s, static_cast<double>(n_in - 1)));
            i0[d] = static_cast<int>(s);
            i1[d] = std::min(i0[d] + 1, n_in - 1);
            w[d] = s - i0[d];
        }
    };
    setup(Ho, H, y0, y1, wy);
    setup(Wo, W, x0, x1, wx);

    for (int c = 0; c < C; ++c) {
        const R* base = px + static_cast<size_t>(c) * H * W;
        for (int oy = 0; oy < Ho; ++oy) {
            const R* r0 = base + static_cast<size_t>(y0[oy]) * W;
            const R* r1 = base + static_cast<size_t>(y1[oy]) * W;
            double fy = wy[oy];
            R* dst = po + (static_cast<size_t>(c) * Ho + oy) * Wo;
            for (int ox = 0; ox < Wo; ++ox) {
                double fx = wx[ox];
                double top = (1 - fx) * r0[x0[ox]] + fx * r0[x1[ox]];
                double bot = (1 - fx) * r1[x0[ox]] + fx * r1[x1[ox]];
                dst[ox] = static_cast<R>((1 - fy) * top + fy * bot);
            }
        }
    }
    Tensor<R> xc = x;
    return detail::maybe_record<R>(
        out, {&x}, [xc, out, C, H, W, Ho, Wo, y0, y1, x0, x1, wy, wx]() mutable {
            if (!out.has_grad() || !xc.requires_grad()) return;
            const auto& g = out.grad_ref();
            auto& dx = xc.grad();
            for (int c = 0; c < C; ++c) {
                R* base = dx.data() + static_cast<size_t>(c) * H * W;
                for (int oy = 0; oy < Ho; ++oy) {
                    double fy = wy[oy];
                    const R* gr = g.data() + (static_cast<size_t>(c) * Ho + oy) * Wo;
                    for (int ox = 0; ox < Wo; ++ox) {
                        double fx = wx[ox];
                        double gv = gr[ox];
                        base[static_cast<size_t>(y0[oy]) * W + x0[ox]] +=
                            static_cast<R>((1 - fy) * (1 - fx) * gv);
                        base[static_cast<size_t>(y0[oy]) * W + x1[ox]] += static_cast<R>((1 - fy) * fx * gv);
                        base[static_cast<size_t>(y1[oy]) * W + x0[ox]] += static_cast<R>(fy * (1 - fx) * gv);
                        base[static_cast<size_t>(y1[oy]) * W + x1[ox]] += static_cast<R>(fy * fx * gv);
                    }
                }
            }
        });
}

// Per-channel normalization state shared by train and eval passes.
template <class R>
struct BatchNormState {
    Tensor<R> gamma, beta;          // learned
    Tensor<R> running_mean, running_var;  // buffers
    static BatchNormState create(int channels) {
        BatchNormState s;
        s.gamma = Tensor<R>::full({channels}, R(1));
        s.beta = Tensor<R>::zeros({channels});
        s.running_mean = Tensor<R>::zeros({channels});
        s.running_var = Tensor<R>::full({channels}, R(1));
        s.gamma.set_requires_grad(true);
        s.beta.set_requires_grad(true);
        return s;
    }
};

// Accepts [C,H,W] (a batch of one) or [B,C,H,W]. Train mode normalizes by
// batch statistics (biased variance) and updates running stats with the
// unbiased variance; eval normalizes by the running stats.
template <class R>
Tensor<R> batchnorm2d(const Tensor<R>& x, BatchNormState<R>& bn, Mode mode, double momentum = 0.1,
                      double eps = 1e-5) {
    require_shape(x.ndim() == 3 || x.ndim() == 4,
                  "batchnorm2d: input must be [C,H,W] or [B,C,H,W], got " + shape_str(x.shape()));
    const bool batched = x.ndim() == 4;
    const int B = batched ? x.dim(0) : 1;
    const int C = batched ? x.dim(1) : x.dim(0);
    const int H = batched ? x.dim(2) : x.dim(1);
    const int W = batched ? x.dim(3) : x.dim(2);
    require_shape(bn.gamma.dim(0) == C, "batchnorm2d: state has " + std::to_string(bn.gamma.dim(0)) +
                                            " channels, input has " + std::to_string(C));
    const int64_t m = static_cast<int64_t>(B) * H * W;
    if (mode == Mode::train && m < 2)
        throw DegenerateBatch("batchnorm2d: need at least 2 values per channel, got " +
                              std::to_string(m));

    std::vector<double> mean(C), var(C);
    const R* px = x.data();
    auto chan = [&](int b, int c) {
        return px + ((static_cast<size_t>(b) * C + c) * H) * W;
    };
    if (mode == Mode::train) {
        for (int c = 0; c < C; ++c) {
            double s = 0;
            for (int b = 0; b < B; ++b) {
                const R* p = chan(b, c);
                for (int64_t i = 0; i < static_cast<int64_t>(H) * W; ++i) s += p[i];
            }
            mean[c] = s / static_cast<double>(m);
            double v = 0;
            for (int b = 0; b < B; ++b) {
                const R* p = chan(b, c);
                for (int64_t i = 0; i < static_cast<int64_t>(H) * W; ++i) {
                    double d = p[i] - mean[c];
                    v += d * d;
                }
            }
            var[c] = v / static_cast<double>(m);
        }
        for (int c = 0; c < C; ++c) {
            double unbiased = var[c] * static_cast<double>(m) / static_cast<double>(m - 1);
            bn.running_mean.data()[c] =
                static_cast<R>((1 - momentum) * bn.running_mean.data()[c] + momentum * mean[c]);
            bn.running_var.data()[c] =
                static_cast<R>((1 - momentum) * bn.running_var.data()[c] + momentum * unbiased);
        }
    } else {
        for (int c = 0; c < C; ++c) {
            mean[c] = bn.running_mean.data()[c];
            var[c] = bn.running_var.data()[c];
        }
    }

    Tensor<R> out = Tensor<R>::zeros(x.shape());
    std::vector<double> inv_std(C);
    for (int c = 0; c < C; ++c) inv_std[c] = 1.0 / std::sqrt(var[c] + eps);
    R* po = out.data();
    for (int b = 0; b < B; ++b)
        for (int c = 0; c < C; ++c) {
            const R* p = chan(b, c);
            R* q = po + ((static_cast<size_t>(b) * C + c) * H) * W;
            double gm = bn.gamma.data()[c], bt = bn.beta.data()[c];
            for (int64_t i = 0; i < static_cast<int64_t>(H) * W; ++i)
                q[i] = static_cast<R>(gm * (p[i] - mean[c]) * inv_std[c] + bt);
        }

    Tensor<R> xc = x, gammac = bn.gamma, betac = bn.beta;
    bool train_stats = mode == Mode::train;
    return detail::maybe_record<R>(
        out, {&x, &bn.gamma, &bn.beta},
        [xc, gammac, betac, out, B, C, H, W, mean, inv_std, m, train_stats]() mutable {
            if (!out.has_grad()) return;
            const R* g = out.grad_ref().data();
            const R* px = xc.data();
            const int64_t HW = static_cast<int64_t>(H) * W;
            for (int c = 0; c < C; ++c) {
                double sum_g = 0, sum_gx = 0;  // gx: g * xhat
                for (int b = 0; b < B; ++b) {
                    const R* gp = g + ((static_cast<size_t>(b) * C + c) * H) * W;
                    const R* xp = px + ((static_cast<size_t>(b) * C + c) * H) * W;
                    for (int64_t i = 0; i < HW; ++i) {
                        double xhat = (xp[i] - mean[c]) * inv_std[c];
                        sum_g += gp[i];
                        sum_gx += gp[i] * xhat;
                    }
                }
                if (gammac.requires_grad()) gammac.grad()[c] += static_cast<R>(sum_gx);
                if (betac.requires_grad()) betac.grad()[c] += static_cast<R>(sum_g);
                if (xc.requires_grad()) {
                    double gm = gammac.data()[c];
                    double mg = sum_g / static_cast<double>(m);
                    double mgx = sum_gx / static_cast<double>(m);
                    for (int b = 0; b < B; ++b) {
                        R* dxp = xc.grad().data() + ((static_cast<size_t>(b) * C + c) * H) * W;
                        const R* gp = g + ((static_cast<size_t>(b) * C + c) * H) * W;
                        const R* xp = px + ((static_cast<size_t>(b) * C + c) * H) * W;
                        for (int64_t i = 0; i < HW; ++i) {
                            double xhat = (xp[i] - mean[c]) * inv_std[c];
                            double d = train_stats ? (gp[i] - mg - xhat * mgx) : gp[i];
                            dxp[i] += static_cast<R>(gm * inv_std[c] * d);
                        }
                    }
                }
            }
        });
}

template <class R>
Tensor<R> relu(const Tensor<R>& x) {
    Tensor<R> out = Tensor<R>::zeros(x.shape());
    const R* px = x.data();
    R* po = out.data();
    for (int64_t i = 0; i < x.numel(); ++i) po[i] = px[i] > R(0) ? px[i] : R(0);
    Tensor<R> xc = x;
    return detail::maybe_record<R>(out, {&x}, [xc, out]() mutable {
        if (!out.has_grad() || !xc.requires_grad()) return;
        const auto& g = out.grad_ref();
        auto& dx = xc.grad();
        const R* px = xc.data();
        for (size_t i = 0; i < dx.size(); ++i)
            if (px[i] > R(0)) dx[i] += g[i];
    });
}

// Row-wise softmax of an [N,K] matrix, stabilized by the row max.
template <class R>
Tensor<R> softmax_rows(const Tensor<R>& x) {
    require_shape(x.ndim() == 2, "softmax_rows: input must be [N,K], got " + shape_str(x.shape()));
    const int N = x.dim(0), K = x.dim(1);
    Tensor<R> out = Tensor<R>::zeros({N, K});
    const R* px = x.data();
    R* po = out.data();
    for (int n = 0; n < N; ++n) {
        const R* row = px + static_cast<size_t>(n) * K;
        R* orow = po + static_cast<size_t>(n) * K;
        R mx = row[0];
        for (int k = 1; k < K; ++k) mx = std::max(mx, row[k]);
        double denom = 0;
        for (int k = 0; k < K; ++k) {
            double e = std::exp(static_cast<double>(row[k] - mx));
            orow[k] = static_cast<R>(e);
            denom += e;
        }
        for (int k = 0; k < K; ++k) orow[k] = static_cast<R>(orow[k] / denom);
    }
    Tensor<R> xc = x;
    return detail::maybe_record<R>(out, {&x}, [xc, out, N, K]() mutable {
        if (!out.has_grad() || !xc.requires_grad()) return;
        const auto& g = out.grad_ref();
        const R* py = out.data();
        auto& dx = xc.grad();
        for (int n = 0; n < N; ++n) {
            const R* yrow = py + static_cast<size_t>(n) * K;
            const R* grow = g.data() + static_cast<size_t>(n) * K;
            double dot = 0;
            for (int k = 0; k < K; ++k) dot += static_cast<double>(grow[k]) * yrow[k];
            R* drow = dx.data() + static_cast<size_t>(n) * K;
            for (int k = 0; k < K; ++k)
                drow[k] += static_cast<R>(yrow[k] * (grow[k] - dot));
        }
    });
}

// Mean negative log-likelihood over rows, fused log-sum-exp. Optional
// per-class weights turn the mean into a weighted mean.
template <class R>
Tensor<R> cross_entropy_from_logits(const Tensor<R>& logits, const std::vector<int>& targets,
                                    const std::vector<double>& class_weights = {}) {
    require_shape(logits.ndim() == 2, "cross_entropy: logits must be [M,C], got " + shape_str(logits.shape()));
    const int M = logits.dim(0), C = logits.dim(1);
    require_shape(M >= 1, "cross_entropy: empty batch");
    if (static_cast<int>(targets.size()) != M)
        throw ShapeError("cross_entropy: " + std::to_string(targets.size()) + " targets for " +
                         std::to_string(M) + " rows");
    for (int t : targets)
        if (t < 0 || t >= C)
            throw LabelError("cross_entropy: target " + std::to_string(t) + " outside [0," +
                             std::to_string(C) + ")");
    if (!class_weights.empty() && static_cast<int>(class_weights.size()) != C)
        throw ShapeError("cross_entropy: class_weights size mismatch");

    const R* pl = logits.data();
    std::vector<double> lse(M), wrow(M);
    double wsum = 0, loss = 0;
    for (int i = 0; i < M; ++i) {
        const R* row = pl + static_cast<size_t>(i) * C;
        double mx = row[0];
        for (int c = 1; c < C; ++c) mx = std::max(mx, static_cast<double>(row[c]));
        double s = 0;
        for (int c = 0; c < C; ++c) s += std::exp(row[c] - mx);
        lse[i] = mx + std::log(s);
        wrow[i] = class_weights.empty() ? 1.0 : class_weights[static_cast<size_t>(targets[i])];
        wsum += wrow[i];
        loss += wrow[i] * (lse[i] - row[targets[i]]);
    }
    Tensor<R> out = Tensor<R>::full({1}, static_cast<R>(loss / wsum));

    Tensor<R> lc = logits;
    return detail::maybe_record<R>(out, {&logits},
                                   [lc, out, targets, lse, wrow, wsum, M, C]() mutable {
        if (!out.has_grad() || !lc.requires_grad()) return;
        double g = out.grad_ref()[0];
        const R* pl = lc.data();
        auto& dl = lc.grad();
        for (int i = 0; i < M; ++i) {
            const R* row = pl + static_cast<size_t>(i) * C;
            R* drow = dl.data() + static_cast<size_t>(i) * C;
            double scale = g * wrow[i] / wsum;
            for (int c = 0; c < C; ++c) {
                double p = std::exp(row[c] - lse[i]);
                drow[c] += static_cast<R>(scale * (p - (c == targets[i] ? 1.0 : 0.0)));
            }
        }
    });
}

// Mean over spatial dims: [C,H,W] -> [C].
template <class R>
Tensor<R> global_avg_pool(const Tensor<R>& x) {
    require_shape(x.ndim() == 3, "global_avg_pool: input must be [C,H,W], got " + shape_str(x.shape()));
    const int C = x.dim(0);
    const int64_t HW = static_cast<int64_t>(x.dim(1)) * x.dim(2);
    Tensor<R> out = Tensor<R>::zeros({C});
    const R* px = x.data();
    for (int c = 0; c < C; ++c) {
        double s = 0;
        for (int64_t i = 0; i < HW; ++i) s += px[static_cast<size_t>(c) * HW + i];
        out.data()[c] = static_cast<R>(s / static_cast<double>(HW));
    }
    Tensor<R> xc = x;
    return detail::maybe_record<R>(out, {&x}, [xc, out, C, HW]() mutable {
        if (!out.has_grad() || !xc.requires_grad()) return;
        const auto& g = out.grad_ref();
        auto& dx = xc.grad();
        R inv = static_cast<R>(1.0 / static_cast<double>(HW));
        for (int c = 0; c < C; ++c)
            for (int64_t i = 0; i < HW; ++i) dx[static_cast<size_t>(c) * HW + i] += g[c] * inv;
    });
}

// Fully connected layer on a vector: y = W x + b, W [Out,In].
template <class R>
Tensor<R> linear(const Tensor<R>& x, const Tensor<R>& w, const Tensor<R>& b) {
    require_shape(x.ndim() == 1, "linear: input must be a vector, got " + shape_str(x.shape()));
    require_shape(w.ndim() == 2 && w.dim(1) == x.dim(0),
                  "linear: weight " + shape_str(w.shape()) + " vs input " + shape_str(x.shape()));
    const int Out = w.dim(0), In = w.dim(1);
    require_shape(b.ndim() == 1 && b.dim(0) == Out, "linear: bias must be [Out]");
    Tensor<R> out = Tensor<R>::zeros({Out});
    const R* px = x.data();
    const R* pw = w.data();
    for (int o = 0; o < Out; ++o) {
        double s = b.data()[o];
        const R* row = pw + static_cast<size_t>(o) * In;
        for (int i = 0; i < In; ++i) s += row[i] * px[i];
        out.data()[o] = static_cast<R>(s);
    }
    Tensor<R> xc = x, wc = w, bc = b;
    return detail::maybe_record<R>(out, {&x, &w, &b}, [xc, wc, bc, out, Out, In]() mutable {
        if (!out.has_grad()) return;
        const auto& g = out.grad_ref();
        if (bc.requires_grad())
            for (int o = 0; o < Out; ++o) bc.grad()[o] += g[o];
        if (wc.requires_grad()) {
            auto& dw = wc.grad();
            const R* px = xc.data();
            for (int o = 0; o < Out; ++o)
                for (int i = 0; i < In; ++i) dw[static_cast<size_t>(o) * In + i] += g[o] * px[i];
        }
        if (xc.requires_grad()) {
            auto& dx = xc.grad();
            const R* pw = wc.data();
            for (int o = 0; o < Out; ++o)
                for (int i = 0; i < In; ++i) dx[i] += g[o] * pw[static_cast<size_t>(o) * In + i];
        }
    });
}

// [C,H,W] -> [N,C] with row n the feature vector at pixel (n/W, n%W).
template <class R>
Tensor<R> flatten_spatial(const Tensor<R>& x) {
    require_shape(x.ndim() == 3, "flatten_spatial: input must be [C,H,W], got " + shape_str(x.shape()));
    const int C = x.dim(0), H = x.dim(1), W = x.dim(2);
    const int N = H * W;
    Tensor<R> out = Tensor<R>::zeros({N, C});
    const R* px = x.data();
    R* po = out.data();
    for (int c = 0; c < C; ++c)
        for (int n = 0; n < N; ++n) po[static_cast<size_t>(n) * C + c] = px[static_cast<size_t>(c) * N + n];
    Tensor<R> xc = x;
    return detail::maybe_record<R>(out, {&x}, [xc, out, C, N]() mutable {
        if (!out.has_grad() || !xc.requires_grad()) return;
        const auto& g = out.grad_ref();
        auto& dx = xc.grad();
        for (int c = 0; c < C; ++c)
            for (int n = 0; n < N; ++n)
                dx[static_cast<size_t>(c) * N + n] += g[static_cast<size_t>(n) * C + c];
    });
}

// Inverse of flatten_spatial.
template <class R>
Tensor<R> unflatten_spatial(const Tensor<R>& x, int C, int H, int W) {
    require_shape(x.ndim() == 2, "unflatten_spatial: input must be [N,C], got " + shape_str(x.shape()));
    require_shape(x.dim(0) == H * W && x.dim(1) == C,
                  "unflatten_spatial: " + shape_str(x.shape()) + " does not match C=" +
                      std::to_string(C) + " H=" + std::to_string(H) + " W=" + std::to_string(W));
    const int N = H * W;
    Tensor<R> out = Tensor<R>::zeros({C, H, W});
    const R* px = x.data();
    R* po = out.data();
    for (int c = 0; c < C; ++c)
        for (int n = 0; n < N; ++n) po[static_cast<size_t>(c) * N + n] = px[static_cast<size_t>(n) * C + c];
    Tensor<R> xc = x;
    return detail::maybe_record<R>(out, {&x}, [xc, out, C, N]() mutable {
        if (!out.has_grad() || !xc.requires_grad()) return;
        const auto& g = out.grad_ref();
        auto& dx = xc.grad();
        for (int c = 0; c < C; ++c)
            for (int n = 0; n < N; ++n)
                dx[static_cast<size_t>(n) * C + c] += g[static_cast<size_t>(c) * N + n];
    });
}

// Column sums of an [N,K] matrix -> [K].
template <class R>
Tensor<R> colsum(const Tensor<R>& x) {
    require_shape(x.ndim() == 2, "colsum: input must be [N,K], got " + shape_str(x.shape()));
    const int N = x.dim(0), K = x.dim(1);
    Tensor<R> out = Tensor<R>::zeros({K});
    const R* px = x.data();
    for (int n = 0; n < N; ++n)
        for (int k = 0; k < K; ++k) out.data()[k] += px[static_cast<size_t>(n) * K + k];
    Tensor<R> xc = x;
    return detail::maybe_record<R>(out, {&x}, [xc, out, N, K]() mutable {
        if (!out.has_grad() || !xc.requires_grad()) return;
        const auto& g = out.grad_ref();
        auto& dx = xc.grad();
        for (int n = 0; n < N; ++n)
            for (int k = 0; k < K; ++k) dx[static_cast<size_t>(n) * K + k] += g[k];
    });
}

// Divide row k of m [K,C] by d[k]. Used for the responsibility-weighted mean.
template <class R>
Tensor<R> divide_rows_by(const Tensor<R>& m, const Tensor<R>& d) {
    require_shape(m.ndim() == 2, "divide_rows_by: matrix must be [K,C], got " + shape_str(m.shape()));
    require_shape(d.ndim() == 1 && d.dim(0) == m.dim(0),
                  "divide_rows_by: divisor " + shape_str(d.shape()) + " vs matrix " + shape_str(m.shape()));
    const int K = m.dim(0), C = m.dim(1);
    for (int k = 0; k < K; ++k)
        if (d.data()[k] == R(0))
            throw DegenerateCluster("divide_rows_by: zero denominator at row " + std::to_string(k));
    Tensor<R> out = Tensor<R>::zeros({K, C});
    const R* pm = m.data();
    R* po = out.data();
    for (int k = 0; k < K; ++k) {
        R inv = R(1) / d.data()[k];
        for (int c = 0; c < C; ++c) po[static_cast<size_t>(k) * C + c] = pm[static_cast<size_t>(k) * C + c] * inv;
    }
    Tensor<R> mc = m, dc = d;
    return detail::maybe_record<R>(out, {&m, &d}, [mc, dc, out, K, C]() mutable {
        if (!out.has_grad()) return;
        const auto& g = out.grad_ref();
        const R* py = out.data();
        for (int k = 0; k < K; ++k) {
            R inv = R(1) / dc.data()[k];
            if (mc.requires_grad()) {
                R* dm = mc.grad().data() + static_cast<size_t>(k) * C;
                const R* gr = g.data() + static_cast<size_t>(k) * C;
                for (int c = 0; c < C; ++c) dm[c] += gr[c] * inv;
            }
            if (dc.requires_grad()) {
                double s = 0;
                const R* gr = g.data() + static_cast<size_t>(k) * C;
                const R* yr = py + static_cast<size_t>(k) * C;
                for (int c = 0; c < C; ++c) s += static_cast<double>(gr[c]) * yr[c];
                dc.grad()[k] += static_cast<R>(-s * inv);
            }
        }
    });
}

// Scale each row of an [K,C] matrix to unit l2 norm.
template <class R>
Tensor<R> normalize_rows(const Tensor<R>& m) {
    require_shape(m.ndim() == 2, "normalize_rows: input must be [K,C], got " + shape_str(m.shape()));
    const int K = m.dim(0), C = m.dim(1);
    Tensor<R> out = Tensor<R>::zeros({K, C});
    std::vector<double> inv_norm(K);
    const R* pm = m.data();
    R* po = out.data();
    for (int k = 0; k < K; ++k) {
        double s = 0;
        const R* row = pm + static_cast<size_t>(k) * C;
        for (int c = 0; c < C; ++c) s += static_cast<double>(row[c]) * row[c];
        if (s == 0.0) throw DegenerateBase("normalize_rows: zero row " + std::to_string(k));
        inv_norm[k] = 1.0 / std::sqrt(s);
        R* orow = po + static_cast<size_t>(k) * C;
        for (int c = 0; c < C; ++c) orow[c] = static_cast<R>(row[c] * inv_norm[k]);
    }
    Tensor<R> mc = m;
    return detail::maybe_record<R>(out, {&m}, [mc, out, K, C, inv_norm]() mutable {
        if (!out.has_grad() || !mc.requires_grad()) return;
        const auto& g = out.grad_ref();
        const R* py = out.data();
        auto& dm = mc.grad();
        for (int k = 0; k < K; ++k) {
            const R* gr = g.data() + static_cast<size_t>(k) * C;
            const R* yr = py + static_cast<size_t>(k) * C;
            double dot = 0;
            for (int c = 0; c < C; ++c) dot += static_cast<double>(gr[c]) * yr[c];
            R* dr = dm.data() + static_cast<size_t>(k) * C;
            for (int c = 0; c < C; ++c)
                dr[c] += static_cast<R>(inv_norm[k] * (gr[c] - dot * yr[c]));
        }
    });
}

// Stack two [.,H,W] maps along the channel axis.
template <class R>
Tensor<R> concat_channels(const Tensor<R>& a, const Tensor<R>& b) {
    require_shape(a.ndim() == 3 && b.ndim() == 3, "concat_channels: inputs must be [C,H,W]");
    require_shape(a.dim(1) == b.dim(1) && a.dim(2) == b.dim(2),
                  "concat_channels: spatial dims differ " + shape_str(a.shape()) + " vs " +
                      shape_str(b.shape()));
    const int Ca = a.dim(0), Cb = b.dim(0), H = a.dim(1), W = a.dim(2);
    Tensor<R> out = Tensor<R>::zeros({Ca + Cb, H, W});
    const size_t na = static_cast<size_t>(Ca) * H * W, nb = static_cast<size_t>(Cb) * H * W;
    std::memcpy(out.data(), a.data(), na * sizeof(R));
    std::memcpy(out.data() + na, b.data(), nb * sizeof(R));
    Tensor<R> ac = a, bc = b;
    return detail::maybe_record<R>(out, {&a, &b}, [ac, bc, out, na, nb]() mutable {
        if (!out.has_grad()) return;
        const auto& g = out.grad_ref();
        if (ac.requires_grad()) {
            auto& da = ac.grad();
            for (size_t i = 0; i < na; ++i) da[i] += g[i];
        }
        if (bc.requires_grad()) {
            auto& db = bc.grad();
            for (size_t i = 0; i < nb; ++i) db[i] += g[na + i];
        }
    });
}

// Lay same-height [C,H,W_i] maps side by side along the width axis, so one
// normalization pass can see a whole batch of activations at once.
template <class R>
Tensor<R> concat_width(const std::vector<Tensor<R>>& xs) {
    if (xs.empty()) throw ShapeError("concat_width: need at least one input");
    require_shape(xs[0].ndim() == 3, "concat_width: inputs must be [C,H,W]");
    const int C = xs[0].dim(0), H = xs[0].dim(1);
    int total_w = 0;
    for (const auto& x : xs) {
        require_shape(x.ndim() == 3 && x.dim(0) == C && x.dim(1) == H,
                      "concat_width: incompatible shapes " + shape_str(xs[0].shape()) + " vs " +
                          shape_str(x.shape()));
        total_w += x.dim(2);
    }
    Tensor<R> out = Tensor<R>::zeros({C, H, total_w});
    R* po = out.data();
    int off = 0;
    for (const auto& x : xs) {
        const int W = x.dim(2);
        const R* px = x.data();
        for (int c = 0; c < C; ++c)
            for (int h = 0; h < H; ++h)
                std::memcpy(po + (static_cast<size_t>(c) * H + h) * total_w + off,
                            px + (static_cast<size_t>(c) * H + h) * W,
                            static_cast<size_t>(W) * sizeof(R));
        off += W;
    }
    std::vector<const Tensor<R>*> ins;
    for (const auto& x : xs) ins.push_back(&x);
    std::vector<Tensor<R>> copies = xs;
    return detail::maybe_record<R>(out, ins, [copies, out, C, H, total_w]() mutable {
        if (!out.has_grad()) return;
        const auto& g = out.grad_ref();
        int off = 0;
        for (auto& x : copies) {
            const int W = x.dim(2);
            if (x.requires_grad()) {
                auto& dx = x.grad();
                for (int c = 0; c < C; ++c)
                    for (int h = 0; h < H; ++h) {
                        const R* gr = g.data() + (static_cast<size_t>(c) * H + h) * total_w + off;
                        R* dr = dx.data() + (static_cast<size_t>(c) * H + h) * W;
                        for (int i = 0; i < W; ++i) dr[i] += gr[i];
                    }
            }
            off += W;
        }
    });
}

template <class R>
Tensor<R> concat_width(std::initializer_list<Tensor<R>> xs) {
    return concat_width(std::vector<Tensor<R>>(xs));
}

// Copy columns [start, start+width) out of a [C,H,W] map.
template <class R>
Tensor<R> slice_width(const Tensor<R>& x, int start, int width) {
    require_shape(x.ndim() == 3, "slice_width: input must be [C,H,W]");
    const int C = x.dim(0), H = x.dim(1), W = x.dim(2);
    if (start < 0 || width < 1 || start + width > W)
        throw ShapeError("slice_width: columns [" + std::to_string(start) + "," +
                         std::to_string(start + width) + ") outside width " + std::to_string(W));
    Tensor<R> out = Tensor<R>::zeros({C, H, width});
    R* po = out.data();
    const R* px = x.data();
    for (int c = 0; c < C; ++c)
        for (int h = 0; h < H; ++h)
            std::memcpy(po + (static_cast<size_t>(c) * H + h) * width,
                        px + (static_cast<size_t>(c) * H + h) * W + start,
                        static_cast<size_t>(width) * sizeof(R));
    Tensor<R> xc = x;
    return detail::maybe_record<R>(out, {&x}, [xc, out, C, H, W, start, width]() mutable {
        if (!out.has_grad() || !xc.requires_grad()) return;
        const auto& g = out.grad_ref();
        auto& dx = xc.grad();
        for (int c = 0; c < C; ++c)
            for (int h = 0; h < H; ++h) {
                const R* gr = g.data() + (static_cast<size_t>(c) * H + h) * width;
                R* dr = dx.data() + (static_cast<size_t>(c) * H + h) * W + start;
                for (int i = 0; i < width; ++i) dr[i] += gr[i];
            }
    });
}

}  // namespace emseg
