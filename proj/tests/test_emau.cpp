#include <gtest/gtest.h>

#include <array>

#include "emseg/emau.hpp"
#include "emseg/gradcheck.hpp"

using namespace emseg;
using T = Tensor<double>;

namespace {

// Independent reference: plain loops, no stabilization, no shared code
// with the library path beyond std::exp.
struct LoopOracle {
    static std::vector<std::vector<double>> e_step(const std::vector<std::vector<double>>& x,
                                                   const std::vector<std::vector<double>>& mu) {
        size_t N = x.size(), K = mu.size(), C = x[0].size();
        std::vector<std::vector<double>> z(N, std::vector<double>(K));
        for (size_t n = 0; n < N; ++n) {
            double denom = 0;
            for (size_t k = 0; k < K; ++k) {
                double dot = 0;
                for (size_t c = 0; c < C; ++c) dot += x[n][c] * mu[k][c];
                z[n][k] = std::exp(dot);
                denom += z[n][k];
            }
            for (size_t k = 0; k < K; ++k) z[n][k] /= denom;
        }
        return z;
    }

    static std::vector<std::vector<double>> m_step(const std::vector<std::vector<double>>& z,
                                                   const std::vector<std::vector<double>>& x) {
        size_t N = x.size(), K = z[0].size(), C = x[0].size();
        std::vector<std::vector<double>> mu(K, std::vector<double>(C, 0.0));
        for (size_t k = 0; k < K; ++k) {
            double wsum = 0;
            for (size_t n = 0; n < N; ++n) wsum += z[n][k];
            for (size_t c = 0; c < C; ++c) {
                double s = 0;
                for (size_t n = 0; n < N; ++n) s += z[n][k] * x[n][c];
                mu[k][c] = s / wsum;
            }
        }
        return mu;
    }

    static void normalize(std::vector<std::vector<double>>& mu) {
        for (auto& row : mu) {
            double s = 0;
            for (double v : row) s += v * v;
            double inv = 1.0 / std::sqrt(s);
            for (double& v : row) v *= inv;
        }
    }
};

std::vector<std::vector<double>> to_rows(const T& m) {
    std::vector<std::vector<double>> out(m.dim(0), std::vector<double>(m.dim(1)));
    for (int i = 0; i < m.dim(0); ++i)
        for (int j = 0; j < m.dim(1); ++j) out[i][j] = m.at({i, j});
    return out;
}

// Singular values via cyclic Jacobi on the Gram matrix A^T A.
std::vector<double> singular_values(const T& a) {
    const int N = a.dim(0), C = a.dim(1);
    std::vector<std::vector<double>> g(C, std::vector<double>(C, 0.0));
    for (int i = 0; i < C; ++i)
        for (int j = 0; j < C; ++j) {
            double s = 0;
            for (int n = 0; n < N; ++n) s += a.at({n, i}) * a.at({n, j});
            g[i][j] = s;
        }
    for (int sweep = 0; sweep < 60; ++sweep) {
        double off = 0;
        for (int p = 0; p < C; ++p)
            for (int q = p + 1; q < C; ++q) off += g[p][q] * g[p][q];
        if (off < 1e-26) break;
        for (int p = 0; p < C; ++p)
            for (int q = p + 1; q < C; ++q) {
                if (std::fabs(g[p][q]) < 1e-30) continue;
                double theta = (g[q][q] - g[p][p]) / (2.0 * g[p][q]);
                double t = (theta >= 0 ? 1.0 : -1.0) /
                           (std::fabs(theta) + std::sqrt(1.0 + theta * theta));
                double c = 1.0 / std::sqrt(1.0 + t * t), s = t * c;
                for (int i = 0; i < C; ++i) {
                    double gip = g[i][p], giq = g[i][q];
                    g[i][p] = c * gip - s * giq;
                    g[i][q] = s * gip + c * giq;
                }
                for (int i = 0; i < C; ++i) {
                    double gpi = g[p][i], gqi = g[q][i];
                    g[p][i] = c * gpi - s * gqi;
                    g[q][i] = s * gpi + c * gqi;
                }
            }
    }
    std::vector<double> sv(C);
    for (int i = 0; i < C; ++i) sv[i] = std::sqrt(std::max(0.0, g[i][i]));
    std::sort(sv.begin(), sv.end(), std::greater<>());
    return sv;
}

T random_matrix(const Shape& shape, uint64_t seed, double lo = -1.0, double hi = 1.0) {
    return tensor_create<double>(shape, Fill<double>::uniform(lo, hi), seed);
}

}  // namespace

TEST(Bases, KaimingRowsAreUnitNorm) {
    auto b = kaiming_init_bases<double>(16, 8, 3);
    for (int k = 0; k < 16; ++k) {
        double s = 0;
        for (int c = 0; c < 8; ++c) s += b.mu.at({k, c}) * b.mu.at({k, c});
        EXPECT_NEAR(std::sqrt(s), 1.0, 1e-9);
    }
}

TEST(Bases, DeterministicPerSeedDistinctAcrossSeeds) {
    auto a = kaiming_init_bases<double>(8, 4, 11);
    auto b = kaiming_init_bases<double>(8, 4, 11);
    auto c = kaiming_init_bases<double>(8, 4, 12);
    for (int64_t i = 0; i < a.mu.numel(); ++i) EXPECT_EQ(a.mu.data()[i], b.mu.data()[i]);
    int differs = 0;
    for (int64_t i = 0; i < a.mu.numel(); ++i) differs += (a.mu.data()[i] != c.mu.data()[i]);
    EXPECT_GT(differs, 24);
}

TEST(EStep, SingleBaseAssignsEverything) {
    auto x = random_matrix({6, 3}, 21);
    auto mu = random_matrix({1, 3}, 22);
    auto z = e_step(x, mu);
    for (int n = 0; n < 6; ++n) EXPECT_DOUBLE_EQ(z.at({n, 0}), 1.0);
}

TEST(EStep, SymmetricInputsGiveUniform) {
    auto x = T::full({4, 3}, 0.7);
    auto mu = T::full({5, 3}, -0.2);
    auto z = e_step(x, mu);
    for (int64_t i = 0; i < z.numel(); ++i) EXPECT_NEAR(z.data()[i], 0.2, 1e-12);
}

TEST(EStep, HandValueIdentityPair) {
    auto x = T::from_data({2, 2}, {1, 0, 0, 1});
    auto mu = T::from_data({2, 2}, {1, 0, 0, 1});
    auto z = e_step(x, mu);
    double e = std::exp(1.0);
    EXPECT_NEAR(z.at({0, 0}), e / (e + 1), 1e-12);
    EXPECT_NEAR(z.at({0, 1}), 1 / (e + 1), 1e-12);
    EXPECT_NEAR(z.at({1, 0}), 1 / (e + 1), 1e-12);
    EXPECT_NEAR(z.at({1, 1}), e / (e + 1), 1e-12);
    EXPECT_NEAR(z.at({0, 0}), 0.7311, 1e-4);
    EXPECT_NEAR(z.at({0, 1}), 0.2689, 1e-4);
}

TEST(EStep, RowsSumToOneOverManyCases) {
    for (uint64_t trial = 0; trial < 100; ++trial) {
        auto x = random_matrix({7, 5}, 1000 + trial, -3.0, 3.0);
        auto mu = random_matrix({4, 5}, 2000 + trial, -3.0, 3.0);
        auto z = e_step(x, mu);
        for (int n = 0; n < 7; ++n) {
            double s = 0;
            for (int k = 0; k < 4; ++k) s += z.at({n, k});
            EXPECT_NEAR(s, 1.0, 1e-9);
        }
    }
}

TEST(EStep, StabilizerShiftDoesNotChangeResult) {
    auto x = random_matrix({5, 4}, 31, -2.0, 2.0);
    auto mu = random_matrix({3, 4}, 32, -2.0, 2.0);
    auto z = e_step(x, mu);
    // Reference with an arbitrary per-row shift inside the softmax.
    for (int n = 0; n < 5; ++n) {
        std::array<double, 3> scores{};
        for (int k = 0; k < 3; ++k)
            for (int c = 0; c < 4; ++c) scores[k] += x.at({n, c}) * mu.at({k, c});
        double shift = 13.75 * (n + 1);
        double denom = 0;
        std::array<double, 3> e{};
        for (int k = 0; k < 3; ++k) {
            e[k] = std::exp(scores[k] - shift);
            denom += e[k];
        }
        for (int k = 0; k < 3; ++k) EXPECT_NEAR(z.at({n, k}), e[k] / denom, 1e-12);
    }
}

TEST(MStep, OneHotGivesClusterMean) {
    auto x = random_matrix({5, 3}, 41);
    auto z = T::zeros({5, 2});
    for (int n = 0; n < 5; ++n) z.at({n, 0}) = 1.0;
    // Base 1 never selected: zero column sum must be rejected.
    EXPECT_THROW(m_step(z, x), DegenerateCluster);

    z.at({4, 0}) = 0.0;
    z.at({4, 1}) = 1.0;
    auto mu = m_step(z, x);
    for (int c = 0; c < 3; ++c) {
        double mean = 0;
        for (int n = 0; n < 4; ++n) mean += x.at({n, c});
        EXPECT_NEAR(mu.at({0, c}), mean / 4.0, 1e-12);
        EXPECT_NEAR(mu.at({1, c}), x.at({4, c}), 1e-12);
    }
}

TEST(MStep, UniformResponsibilitiesGiveGlobalMean) {
    auto x = random_matrix({6, 3}, 42);
    auto z = T::full({6, 4}, 0.25);
    auto mu = m_step(z, x);
    for (int k = 0; k < 4; ++k)
        for (int c = 0; c < 3; ++c) {
            double mean = 0;
            for (int n = 0; n < 6; ++n) mean += x.at({n, c});
            EXPECT_NEAR(mu.at({k, c}), mean / 6.0, 1e-12);
        }
}

TEST(MStep, MatchesLoopOracle) {
    auto x = random_matrix({6, 3}, 43);
    auto raw = random_matrix({6, 4}, 44, 0.1, 1.0);
    auto z = softmax_rows(raw);  // any row-stochastic matrix
    auto mu = m_step(z, x);
    auto want = LoopOracle::m_step(to_rows(z), to_rows(x));
    for (int k = 0; k < 4; ++k)
        for (int c = 0; c < 3; ++c) EXPECT_NEAR(mu.at({k, c}), want[k][c], 1e-12);
}

TEST(RunEm, MatchesFullLoopOracle) {
    const int N = 32, C = 8, K = 4, T_iters = 5;
    auto x = random_matrix({N, C}, 51, -1.5, 1.5);
    auto mu0 = kaiming_init_bases<double>(K, C, 52);

    auto [z, mu] = run_em(x, mu0.mu, T_iters);

    auto xr = to_rows(x);
    auto mur = to_rows(mu0.mu);
    for (int t = 0; t < T_iters; ++t) {
        auto zr = LoopOracle::e_step(xr, mur);
        mur = LoopOracle::m_step(zr, xr);
        LoopOracle::normalize(mur);
    }
    auto zr = LoopOracle::e_step(xr, mur);

    for (int k = 0; k < K; ++k)
        for (int c = 0; c < C; ++c) EXPECT_NEAR(mu.at({k, c}), mur[k][c], 1e-9);
    for (int n = 0; n < N; ++n)
        for (int k = 0; k < K; ++k) EXPECT_NEAR(z.at({n, k}), zr[n][k], 1e-9);
}

TEST(RunEm, TEqualsOneManualRound) {
    auto x = random_matrix({10, 4}, 61);
    auto mu0 = kaiming_init_bases<double>(3, 4, 62);
    auto [z1, mu1] = run_em(x, mu0.mu, 1);
    auto manual_mu = normalize_rows(m_step(e_step(x, mu0.mu), x));
    auto manual_z = e_step(x, manual_mu);
    for (int64_t i = 0; i < mu1.numel(); ++i) EXPECT_DOUBLE_EQ(mu1.data()[i], manual_mu.data()[i]);
    for (int64_t i = 0; i < z1.numel(); ++i) EXPECT_DOUBLE_EQ(z1.data()[i], manual_z.data()[i]);
}

namespace {

// Two tight clusters at 20*e0 and 20*e1: assignments saturate, so EM must
// land on the (normalized) cluster means.
T separable_data(int per_cluster, int C, uint64_t seed) {
    Rng rng(seed);
    auto x = T::zeros({2 * per_cluster, C});
    for (int n = 0; n < 2 * per_cluster; ++n) {
        int axis = n < per_cluster ? 0 : 1;
        for (int c = 0; c < C; ++c) x.at({n, c}) = 0.001 * rng.normal();
        x.at({n, axis}) += 20.0;
    }
    return x;
}

}  // namespace

TEST(RunEm, RecoversSeparableClusters) {
    const int per = 8, C = 4;
    auto x = separable_data(per, C, 71);
    auto mu0 = T::zeros({2, C});
    mu0.at({0, 0}) = 1.0;  // near cluster directions
    mu0.at({1, 1}) = 1.0;
    auto [z, mu] = run_em(x, mu0, 10);

    for (int k = 0; k < 2; ++k) {
        std::vector<double> mean(C, 0.0);
        for (int n = k * per; n < (k + 1) * per; ++n)
            for (int c = 0; c < C; ++c) mean[c] += x.at({n, c});
        double norm = 0;
        for (int c = 0; c < C; ++c) {
            mean[c] /= per;
            norm += mean[c] * mean[c];
        }
        norm = std::sqrt(norm);
        for (int c = 0; c < C; ++c) EXPECT_NEAR(mu.at({k, c}), mean[c] / norm, 1e-6);
    }
    // Assignments reproduce the ground-truth clustering.
    for (int n = 0; n < 2 * per; ++n) {
        int want = n < per ? 0 : 1;
        EXPECT_GT(z.at({n, want}), z.at({n, 1 - want}));
    }
}

TEST(RunEm, ConvergedBasesAreAFixedPoint) {
    auto x = separable_data(8, 4, 72);
    auto mu0 = T::zeros({2, 4});
    mu0.at({0, 0}) = 1.0;
    mu0.at({1, 1}) = 1.0;
    auto mu1 = run_em(x, mu0, 10).second;
    auto mu2 = run_em(x, mu1, 10).second;
    for (int64_t i = 0; i < mu1.numel(); ++i) EXPECT_NEAR(mu1.data()[i], mu2.data()[i], 1e-6);
}

TEST(Reconstruct, RankOneAndIdentity) {
    auto x = random_matrix({5, 3}, 81);
    auto mu1 = random_matrix({1, 3}, 82);
    auto z1 = e_step(x, mu1);
    auto rec = reconstruct(z1, mu1);
    for (int n = 0; n < 5; ++n)
        for (int c = 0; c < 3; ++c) EXPECT_DOUBLE_EQ(rec.at({n, c}), mu1.at({0, c}));

    auto mu = random_matrix({4, 3}, 83);
    auto eye = T::zeros({4, 4});
    for (int i = 0; i < 4; ++i) eye.at({i, i}) = 1.0;
    auto recon = reconstruct(eye, mu);
    for (int64_t i = 0; i < mu.numel(); ++i) EXPECT_DOUBLE_EQ(recon.data()[i], mu.data()[i]);
}

TEST(Reconstruct, LowRankSingularValues) {
    for (uint64_t trial = 0; trial < 20; ++trial) {
        const int N = 24, C = 8, K = 3;
        auto x = random_matrix({N, C}, 9000 + trial, -2.0, 2.0);
        auto mu0 = kaiming_init_bases<double>(K, C, 9100 + trial);
        auto [z, mu] = run_em(x, mu0.mu, 4);
        auto rec = reconstruct(z, mu);
        auto sv = singular_values(rec);
        ASSERT_GT(sv[0], 0.0);
        EXPECT_LE(sv[K] / sv[0], 1e-6) << "trial " << trial << " sigma_{K+1}/sigma_1 too large";
    }
}

TEST(EmauForward, ZeroOutputConvIsIdentity) {
    EmauConfig cfg;
    cfg.bases = 4;
    cfg.iterations = 3;
    auto x = tensor_create<double>({4, 5, 5}, Fill<double>::uniform(-1, 1), 91);
    auto bases = kaiming_init_bases<double>(cfg.bases, 4, 92);
    auto params = EmauParams<double>::create(4, 93);
    std::fill(params.conv_out_w.vec().begin(), params.conv_out_w.vec().end(), 0.0);
    std::fill(params.conv_out_b.vec().begin(), params.conv_out_b.vec().end(), 0.0);
    auto [y, mu_t] = emau_forward(x, bases, cfg, params, Mode::train);
    for (int64_t i = 0; i < x.numel(); ++i) EXPECT_DOUBLE_EQ(y.data()[i], x.data()[i]);
    EXPECT_EQ(y.shape(), x.shape());
    EXPECT_EQ(mu_t.shape(), bases.mu.shape());
}

TEST(EmauForward, OutputShapeMatchesAnyInput) {
    EmauConfig cfg;
    cfg.bases = 3;
    cfg.iterations = 2;
    for (auto hw : {std::pair{2, 7}, std::pair{6, 3}, std::pair{1, 9}}) {
        auto x = tensor_create<double>({3, hw.first, hw.second}, Fill<double>::uniform(-1, 1), 94);
        auto bases = kaiming_init_bases<double>(3, 3, 95);
        auto params = EmauParams<double>::create(3, 96);
        auto y = emau_forward(x, bases, cfg, params, Mode::eval).first;
        EXPECT_EQ(y.shape(), x.shape());
    }
}

TEST(EmauForward, GradientCheckThroughUnrolledIterations) {
    EmauConfig cfg;
    cfg.bases = 3;
    cfg.iterations = 3;
    auto x = tensor_create<double>({4, 4, 4}, Fill<double>::uniform(-1, 1), 101);
    auto bases = kaiming_init_bases<double>(cfg.bases, 4, 102);
    auto params = EmauParams<double>::create(4, 103);
    auto readout = tensor_create<double>({4, 4, 4}, Fill<double>::uniform(0.5, 1.5), 104);

    auto f = [&]() {
        auto y = emau_forward(x, bases, cfg, params, Mode::train).first;
        return sum(mul(y, readout));
    };
    auto report = check_gradients<double>(
        f, {x, params.conv_in_w, params.conv_in_b, params.conv_out_w, params.conv_out_b}, 1e-4,
        1e-3);
    EXPECT_TRUE(report.passed) << report.summary();
}

TEST(EmauForward, NoGradientReachesBases) {
    EmauConfig cfg;
    cfg.bases = 3;
    cfg.iterations = 2;
    auto x = tensor_create<double>({3, 4, 4}, Fill<double>::uniform(-1, 1), 111);
    auto bases = kaiming_init_bases<double>(cfg.bases, 3, 112);
    auto params = EmauParams<double>::create(3, 113);
    auto before = bases.mu.clone();
    {
        Tape<double> tape;
        x.set_requires_grad(true);
        auto y = emau_forward(x, bases, cfg, params, Mode::train).first;
        tape.backward(sum(y));
    }
    EXPECT_FALSE(bases.mu.has_grad());
    for (int64_t i = 0; i < before.numel(); ++i) EXPECT_EQ(bases.mu.data()[i], before.data()[i]);
    EXPECT_TRUE(x.has_grad());
    double gx = 0;
    for (double v : x.grad()) gx += std::fabs(v);
    EXPECT_GT(gx, 0.0);
}

TEST(BaseUpdate, AlphaOneIsBitIdentical) {
    auto bases = kaiming_init_bases<double>(5, 3, 121);
    auto before = bases.mu.clone();
    auto mu_t = random_matrix({5, 3}, 122);
    update_bases_moving_average(bases, mu_t, 1.0);
    EXPECT_EQ(0, std::memcmp(bases.mu.data(), before.data(), sizeof(double) * 15));
}

TEST(BaseUpdate, AlphaZeroAdoptsNormalizedNewBases) {
    auto bases = kaiming_init_bases<double>(4, 3, 123);
    auto mu_t = random_matrix({4, 3}, 124, 0.5, 2.0);
    update_bases_moving_average(bases, mu_t, 0.0);
    NoGradGuard ng;
    auto want = normalize_rows(mu_t);
    for (int64_t i = 0; i < want.numel(); ++i) EXPECT_NEAR(bases.mu.data()[i], want.data()[i], 1e-12);
}

TEST(BaseUpdate, HandArithmeticAlphaPointNine) {
    Bases<double> bases;
    bases.mu = T::from_data({1, 2}, {1.0, 0.0});
    auto mu_t = T::from_data({1, 2}, {0.0, 1.0});
    update_bases_moving_average(bases, mu_t, 0.9);
    // blend = (0.9, 0.1); norm = sqrt(0.81 + 0.01)
    double norm = std::sqrt(0.82);
    EXPECT_NEAR(bases.mu.at({0, 0}), 0.9 / norm, 1e-12);
    EXPECT_NEAR(bases.mu.at({0, 1}), 0.1 / norm, 1e-12);
}

TEST(BaseUpdate, RejectsBadAlpha) {
    auto bases = kaiming_init_bases<double>(2, 2, 125);
    auto mu_t = random_matrix({2, 2}, 126);
    EXPECT_THROW(update_bases_moving_average(bases, mu_t, -0.1), ConfigError);
    EXPECT_THROW(update_bases_moving_average(bases, mu_t, 1.5), ConfigError);
}

TEST(EmauConfig, Validation) {
    EmauConfig cfg;
    EXPECT_NO_THROW(cfg.validate());
    cfg.bases = 0;
    EXPECT_THROW(cfg.validate(), ConfigError);
    cfg.bases = 4;
    cfg.iterations = 0;
    EXPECT_THROW(cfg.validate(), ConfigError);
    cfg.iterations = 2;
    cfg.alpha = 1.2;
    EXPECT_THROW(cfg.validate(), ConfigError);
}
