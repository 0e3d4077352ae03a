#include <gtest/gtest.h>

#include "helpers.hpp"

using namespace icl;
using icl::testing::random_tensor;

TEST(Schedule, EmptyProductAndMonotone) {
    auto s = make_schedule(1000);
    EXPECT_EQ(s.alpha_bar[0], 1.0);
    for (int t = 1; t <= 1000; t++) {
        EXPECT_LT(s.alpha_bar[static_cast<size_t>(t)], s.alpha_bar[static_cast<size_t>(t) - 1]);
        EXPECT_GT(s.beta[static_cast<size_t>(t)], 0.0);
        EXPECT_LT(s.beta[static_cast<size_t>(t)], 1.0);
        if (t > 1) EXPECT_GE(s.beta[static_cast<size_t>(t)], s.beta[static_cast<size_t>(t) - 1]);
    }
    EXPECT_DOUBLE_EQ(s.beta[1], 1e-4);
    EXPECT_DOUBLE_EQ(s.beta[1000], 0.02);
    EXPECT_THROW(make_schedule(0), std::invalid_argument);
}

TEST(Schedule, AlphaBarMatchesHighPrecisionProduct) {
    auto s = make_schedule(1000);
    // Independent product in long double with betas from the closed form.
    long double prod = 1.0L;
    for (int t = 1; t <= 1000; t++) {
        long double b = 1e-4L + (0.02L - 1e-4L) * static_cast<long double>(t - 1) / 999.0L;
        prod *= 1.0L - b;
    }
    const double rel = std::abs(static_cast<double>((static_cast<long double>(s.alpha_bar[1000]) - prod) / prod));
    EXPECT_LE(rel, 1e-10);
}

TEST(QSample, ClosedForm) {
    auto s = make_schedule(1000);
    Rng rng(1);
    auto x0  = random_tensor({2, 3, 4, 4}, rng);
    auto eps = random_tensor({2, 3, 4, 4}, rng);
    auto z0  = q_sample(s, x0, {0, 0}, eps);
    EXPECT_EQ(z0.data, x0.data);

    Tensor<double> zero(x0.shape);
    auto zt = q_sample(s, zero, {10, 900}, eps);
    const int64_t per = 48;
    for (int64_t i = 0; i < zt.size(); i++) {
        const int t = i < per ? 10 : 900;
        EXPECT_DOUBLE_EQ(zt[i], std::sqrt(1 - s.alpha_bar[static_cast<size_t>(t)]) * eps[i]);
    }

    Tensor<float> xf({2, 3, 4, 4}), ef({2, 3, 4, 4});
    for (int64_t i = 0; i < xf.size(); i++) {
        xf[i] = static_cast<float>(x0[i]);
        ef[i] = static_cast<float>(eps[i]);
    }
    auto zf = q_sample(s, xf, {137, 1000}, ef);
    for (int64_t i = 0; i < zf.size(); i++) {
        const int t      = i < per ? 137 : 1000;
        const double ab  = s.alpha_bar[static_cast<size_t>(t)];
        const double ref = std::sqrt(ab) * static_cast<double>(xf[i]) + std::sqrt(1 - ab) * static_cast<double>(ef[i]);
        EXPECT_NEAR(zf[i], ref, 1e-6);
    }
    EXPECT_THROW(q_sample(s, x0, {0, 1001}, eps), std::out_of_range);
    EXPECT_THROW(q_sample(s, x0, {-1, 3}, eps), std::out_of_range);
    EXPECT_THROW(q_sample(s, x0, {1, 2}, random_tensor({2, 3, 4, 3}, rng)), ShapeError);
}

TEST(QSample, MarginalStatistics) {
    auto s = make_schedule(1000);
    Rng rng(2);
    const int N = 10000;
    for (int t : {50, 400, 900}) {
        Tensor<double> x0({N, 1}), eps({N, 1});
        for (int i = 0; i < N; i++) {
            x0[i]  = 0.3 + 0.5 * rng.normal();
            eps[i] = rng.normal();
        }
        auto z = q_sample(s, x0, std::vector<int>(N, t), eps);
        double mx = 0, mz = 0;
        for (int i = 0; i < N; i++) {
            mx += x0[i] / N;
            mz += z[i] / N;
        }
        double vx = 0, vz = 0;
        for (int i = 0; i < N; i++) {
            vx += (x0[i] - mx) * (x0[i] - mx) / (N - 1);
            vz += (z[i] - mz) * (z[i] - mz) / (N - 1);
        }
        const double ab = s.alpha_bar[static_cast<size_t>(t)];
        // Given x0, the mean of z carries only the noise term's sampling error.
        const double sigma_mean = std::sqrt((1 - ab) / N);
        EXPECT_NEAR(mz, std::sqrt(ab) * mx, 3 * sigma_mean) << t;
        const double want_var = 1 - ab + ab * vx;
        EXPECT_NEAR(vz / want_var, 1.0, 0.05) << t;
    }
}

TEST(Loss, ZeroModelIsAboutOne) {
    auto s = make_schedule(1000);
    Rng rng(3);
    auto x0  = random_tensor({4, 3, 25, 25}, rng, 0.5);  // 7500 pixels
    auto eps = random_tensor(x0.shape, rng);
    std::vector<int> ts = {1, 250, 500, 1000};
    auto loss = training_loss(s, x0, ts, eps, [](const Tensor<double>& z, const std::vector<int>&) {
        return constant(Tensor<double>(z.shape));
    });
    EXPECT_NEAR(loss.value()[0], 1.0, 0.05);

    auto oracle = training_loss(s, x0, ts, eps, [&](const Tensor<double>&, const std::vector<int>&) { return constant(eps); });
    EXPECT_EQ(oracle.value()[0], 0.0);
}

TEST(Loss, InvariantToItemOrder) {
    auto s = make_schedule(1000);
    Rng rng(4);
    auto x0  = random_tensor({3, 2, 2, 2}, rng);
    auto eps = random_tensor(x0.shape, rng);
    auto w   = random_tensor(x0.shape, rng);
    // A per-item "model" that scales its input.
    auto model = [](const Tensor<double>& z, const std::vector<int>& t) {
        Tensor<double> out(z.shape);
        const int64_t per = z.size() / z.dim(0);
        for (int64_t i = 0; i < z.size(); i++) out[i] = 0.1 * t[static_cast<size_t>(i / per)] / 1000.0 + 0.5 * z[i];
        return constant(out);
    };
    auto a = training_loss(s, x0, {5, 50, 500}, eps, model).value()[0];
    Tensor<double> x1(x0.shape), e1(x0.shape);
    const int perm[3] = {2, 0, 1};
    for (int b = 0; b < 3; b++) {
        std::copy_n(x0.ptr() + perm[b] * 8, 8, x1.ptr() + b * 8);
        std::copy_n(eps.ptr() + perm[b] * 8, 8, e1.ptr() + b * 8);
    }
    auto b = training_loss(s, x1, {500, 5, 50}, e1, model).value()[0];
    EXPECT_NEAR(a, b, 1e-14);
}

TEST(Loss, NonFiniteNamesTheItem) {
    auto s = make_schedule(10);
    Rng rng(5);
    auto x0  = random_tensor({2, 1, 2, 2}, rng);
    auto eps = random_tensor(x0.shape, rng);
    try {
        training_loss(
            s, x0, {1, 2}, eps,
            [](const Tensor<double>& z, const std::vector<int>&) {
                Tensor<double> out(z.shape);
                out[5] = std::numeric_limits<double>::infinity();
                return constant(out);
            },
            {"img2edge/11", "img2seg/22"});
        FAIL();
    } catch (const NonFiniteLossError& e) {
        EXPECT_NE(std::string(e.what()).find("img2seg/22"), std::string::npos);
        EXPECT_EQ(std::string(e.what()).find("img2edge/11"), std::string::npos);
    }
}

TEST(Cfg, Arithmetic) {
    Tensor<double> c({1}, 2.0), u({1}, 1.0);
    EXPECT_EQ(cfg_noise(c, u, 3.0)[0], 4.0);
    Rng rng(6);
    auto a = random_tensor({5}, rng), b = random_tensor({5}, rng);
    EXPECT_EQ(cfg_noise(a, b, 1.0).data, a.data);
    EXPECT_EQ(cfg_noise(a, b, 0.0).data, b.data);
    EXPECT_THROW(cfg_noise(a, random_tensor({4}, rng), 2.0), ShapeError);
}

TEST(Ddim, TimestepsStrictlyDecrease) {
    for (int steps : {1, 7, 20, 50, 1000}) {
        auto ts = ddim_timesteps(1000, steps);
        ASSERT_EQ(static_cast<int>(ts.size()), steps);
        EXPECT_EQ(ts.front(), 1000);
        for (size_t i = 1; i < ts.size(); i++) {
            EXPECT_LT(ts[i], ts[i - 1]);
        }
        EXPECT_GE(ts.back(), 1);
    }
    EXPECT_THROW(ddim_timesteps(1000, 0), std::out_of_range);
    EXPECT_THROW(ddim_timesteps(1000, 1001), std::out_of_range);
}

TEST(Ddim, OneStepOracleRecoversX0) {
    auto s = make_schedule(1000);
    Rng rng(7);
    Tensor<double> x0({1, 3, 4, 4});
    for (auto& v : x0.data) v = rng.uniform(-0.9, 0.9);
    auto eps = random_tensor(x0.shape, rng);
    auto zT  = q_sample(s, x0, {1000}, eps);
    std::function<Tensor<double>(const Tensor<double>&, int)> oracle = [&](const Tensor<double>&, int) { return eps; };
    auto out = ddim_sample(s, zT, 1, 1.0, oracle, {});
    for (int64_t i = 0; i < out.size(); i++) {
        EXPECT_NEAR(out[i], (x0[i] + 1) / 2, 1e-5);
    }
}

TEST(Ddim, DeterministicAndScaleOneSkipsUnconditional) {
    auto s = make_schedule(1000);
    int uncond_calls = 0;
    std::function<Tensor<float>(const Tensor<float>&, int)> cond = [](const Tensor<float>& x, int t) {
        Tensor<float> e(x.shape);
        for (int64_t i = 0; i < x.size(); i++) e[i] = 0.3f * x[i] + 0.001f * static_cast<float>(t % 7);
        return e;
    };
    std::function<Tensor<float>(const Tensor<float>&, int)> uncond = [&](const Tensor<float>& x, int) {
        uncond_calls++;
        return Tensor<float>(x.shape, 0.1f);
    };
    auto noise = initial_noise<float>({2, 3, 4, 4}, {11, 12});
    auto a = ddim_sample(s, noise, 10, 1.0, cond, uncond);
    EXPECT_EQ(uncond_calls, 0);
    auto b = ddim_sample(s, noise, 10, 1.0, cond, {});
    EXPECT_TRUE(icl::testing::bitwise_equal(a, b));
    auto g1 = ddim_sample(s, noise, 10, 3.0, cond, uncond);
    auto g2 = ddim_sample(s, initial_noise<float>({2, 3, 4, 4}, {11, 12}), 10, 3.0, cond, uncond);
    EXPECT_EQ(uncond_calls, 20);
    EXPECT_TRUE(icl::testing::bitwise_equal(g1, g2));
    for (float v : g1.data) {
        EXPECT_GE(v, 0.0f);
        EXPECT_LE(v, 1.0f);
    }
}

TEST(Ddim, InitialNoisePerItemSeed) {
    auto a = initial_noise<float>({2, 1, 2, 2}, {5, 6});
    auto b = initial_noise<float>({1, 1, 2, 2}, {6});
    for (int i = 0; i < 4; i++) {
        EXPECT_EQ(a[4 + i], b[i]);
    }
}
