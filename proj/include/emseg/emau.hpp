// Expectation-maximization attention: T unrolled soft-clustering rounds
// over the flattened feature map, a low-rank reconstruction from the
// resulting responsibilities, and a residual wrapper of two 1x1 convs.
//
// The cluster bases are not trained by backprop. Gradients flow through
// the unrolled iterations into the features and conv parameters, but the
// stored bases only move via the moving-average update applied after each
// training batch. Backprop through to the stored bases would be prone to
// vanishing or exploding over the unrolled rounds.
#pragma once

#include <iostream>

#include "emseg/ops.hpp"

namespace emseg {

// K cluster bases in feature space, one per row.
template <class R>
struct Bases {
    Tensor<R> mu;  // [K,C]
    int count() const { return mu.dim(0); }
    int channels() const { return mu.dim(1); }
};

struct EmauConfig {
    int bases = 64;          // K
    int iterations = 10;     // T
    double alpha = 0.9;      // moving-average momentum for the base update
    bool normalize_bases = true;
    uint64_t seed = 0;

    void validate() const {
        if (bases < 1) throw ConfigError("emau: bases must be >= 1");
        if (iterations < 1) throw ConfigError("emau: iterations must be >= 1");
        if (alpha < 0.0 || alpha > 1.0) throw ConfigError("emau: alpha must lie in [0,1]");
    }
};

// Rows drawn normal(0, sqrt(2/C)), then scaled to unit length.
template <class R>
Bases<R> kaiming_init_bases(int K, int C, uint64_t seed) {
    if (K < 1 || C < 1) throw InvalidShape("bases need K >= 1 and C >= 1");
    Bases<R> b;
    b.mu = tensor_create<R>({K, C}, Fill<R>::kaiming(C), seed);
    NoGradGuard ng;
    b.mu = normalize_rows(b.mu);
    return b;
}

// Soft assignment of each row of x to each base: softmax over exp(x_n . mu_k).
template <class R>
Tensor<R> e_step(const Tensor<R>& x, const Tensor<R>& mu) {
    require_shape(x.ndim() == 2 && mu.ndim() == 2 && x.dim(1) == mu.dim(1),
                  "e_step: x " + shape_str(x.shape()) + " vs bases " + shape_str(mu.shape()));
    return softmax_rows(matmul(x, transpose(mu)));
}

// Responsibility-weighted means: mu_k = sum_n z[n,k] x_n / sum_m z[m,k].
template <class R>
Tensor<R> m_step(const Tensor<R>& z, const Tensor<R>& x) {
    require_shape(z.ndim() == 2 && x.ndim() == 2 && z.dim(0) == x.dim(0),
                  "m_step: z " + shape_str(z.shape()) + " vs x " + shape_str(x.shape()));
    return divide_rows_by(matmul(transpose(z), x), colsum(z));
}

// T rounds of e/m (plus base normalization when enabled), then a final
// e_step so the returned responsibilities match the returned bases.
template <class R>
std::pair<Tensor<R>, Tensor<R>> run_em(const Tensor<R>& x, const Tensor<R>& mu0, int T,
                                       bool normalize = true) {
    if (T < 1) throw ConfigError("run_em: need at least one iteration");
    Tensor<R> mu = mu0;
    for (int t = 0; t < T; ++t) {
        Tensor<R> z = e_step(x, mu);
        mu = m_step(z, x);
        if (normalize) mu = normalize_rows(mu);
    }
    Tensor<R> z = e_step(x, mu);
    return {z, mu};
}

// X_hat = z . mu, a rank <= K approximation of x.
template <class R>
Tensor<R> reconstruct(const Tensor<R>& z, const Tensor<R>& mu) {
    return matmul(z, mu);
}

// The two 1x1 convolutions wrapping the attention block.
template <class R>
struct EmauParams {
    Tensor<R> conv_in_w, conv_in_b;
    Tensor<R> conv_out_w, conv_out_b;

    static EmauParams create(int channels, uint64_t seed) {
        EmauParams p;
        p.conv_in_w = tensor_create<R>({channels, channels, 1, 1}, Fill<R>::kaiming(channels), seed);
        p.conv_in_b = Tensor<R>::zeros({channels});
        p.conv_out_w =
            tensor_create<R>({channels, channels, 1, 1}, Fill<R>::kaiming(channels), seed + 1);
        p.conv_out_b = Tensor<R>::zeros({channels});
        for (Tensor<R>* t : {&p.conv_in_w, &p.conv_in_b, &p.conv_out_w, &p.conv_out_b})
            t->set_requires_grad(true);
        return p;
    }
};

// Residual attention block. Returns the output map and a detached copy of
// the post-iteration bases for the moving-average update.
template <class R>
std::pair<Tensor<R>, Tensor<R>> emau_forward(const Tensor<R>& x, const Bases<R>& bases,
                                             const EmauConfig& cfg, const EmauParams<R>& params,
                                             Mode mode) {
    (void)mode;  // iterations are identical in train and eval; only the base update differs
    require_shape(x.ndim() == 3, "emau_forward: input must be [C,H,W], got " + shape_str(x.shape()));
    const int C = x.dim(0), H = x.dim(1), W = x.dim(2);
    require_shape(bases.channels() == C, "emau_forward: bases have " +
                                             std::to_string(bases.channels()) + " channels, input " +
                                             std::to_string(C));
    if (bases.count() > H * W) {
        static bool warned = false;
        if (!warned) {
            warned = true;
            std::cerr << "emau_forward: more bases (" << bases.count() << ") than pixels (" << H * W
                      << "); clustering is overcomplete\n";
        }
    }

    Tensor<R> inner = conv2d(x, params.conv_in_w, params.conv_in_b);
    Tensor<R> flat = flatten_spatial(inner);
    auto [z, mu_t] = run_em(flat, bases.mu, cfg.iterations, cfg.normalize_bases);
    Tensor<R> rebuilt = unflatten_spatial(reconstruct(z, mu_t), C, H, W);
    Tensor<R> y = add(x, conv2d(rebuilt, params.conv_out_w, params.conv_out_b));
    return {y, mu_t.clone()};
}

// mu0 <- normalize(alpha mu0 + (1-alpha) mu_T), outside any tape. alpha=1
// short-circuits so frozen bases stay bit-identical.
template <class R>
void update_bases_moving_average(Bases<R>& bases, const Tensor<R>& mu_t, double alpha) {
    if (alpha < 0.0 || alpha > 1.0) throw ConfigError("base update: alpha must lie in [0,1]");
    if (alpha == 1.0) return;
    require_shape(bases.mu.shape() == mu_t.shape(),
                  "base update: " + shape_str(bases.mu.shape()) + " vs " + shape_str(mu_t.shape()));
    NoGradGuard ng;
    Tensor<R> blended = add(scale(bases.mu, static_cast<R>(alpha)),
                            scale(mu_t, static_cast<R>(1.0 - alpha)));
    bases.mu = normalize_rows(blended);
}

template <class R>
void normalize_bases(Bases<R>& bases) {
    NoGradGuard ng;
    bases.mu = normalize_rows(bases.mu);
}

}  // namespace emseg
