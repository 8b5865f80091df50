#include <doctest.h>

#include <cmath>
#include <cstdlib>

#include "layerforge/numkernel.hpp"
#include "layerforge/rng.hpp"
#include "support.hpp"

using namespace layerforge;
using namespace testsupport;

TEST_SUITE_BEGIN("numkernel");

TEST_CASE("matmul identity and projector") {
    Tensor eye = Tensor::from_data({2, 2}, {1, 0, 0, 1});
    Tensor m = Tensor::from_data({2, 2}, {1, 2, 3, 4});
    Tensor r = numkernel::matmul(eye, m);
    CHECK(r.bit_equal(m));

    Tensor proj = Tensor::from_data({2, 2}, {1, 0, 0, 0});
    Tensor b = Tensor::from_data({2, 2}, {5, 6, 7, 8});
    Tensor p = numkernel::matmul(proj, b);
    CHECK(p.at(0, 0) == doctest::Approx(5));
    CHECK(p.at(0, 1) == doctest::Approx(6));
    CHECK(p.at(1, 0) == 0.0f);
    CHECK(p.at(1, 1) == 0.0f);
}

TEST_CASE("matmul matches naive triple-loop oracle") {
    Rng rng(11);
    Tensor a = random_tensor(rng, {8, 8});
    Tensor b = random_tensor(rng, {8, 8});
    Tensor c = numkernel::matmul(a, b);

    std::vector<double> ad(a.data(), a.data() + a.numel());
    std::vector<double> bd(b.data(), b.data() + b.numel());
    auto cd = naive_matmul(ad, bd, 8, 8, 8);
    for (int64_t i = 0; i < 64; ++i) {
        CHECK(std::abs(static_cast<double>(c.data()[i]) - cd[static_cast<size_t>(i)]) <= 1e-5);
    }
}

TEST_CASE("matmul_nt and matmul_tn agree with matmul on transposed inputs") {
    Rng rng(12);
    Tensor a = random_tensor(rng, {5, 7});
    Tensor b = random_tensor(rng, {7, 4});
    Tensor bt({4, 7});
    for (int64_t i = 0; i < 7; ++i) {
        for (int64_t j = 0; j < 4; ++j) bt.at(j, i) = b.at(i, j);
    }
    Tensor at({7, 5});
    for (int64_t i = 0; i < 5; ++i) {
        for (int64_t j = 0; j < 7; ++j) at.at(j, i) = a.at(i, j);
    }
    Tensor ref = numkernel::matmul(a, b);
    Tensor nt = numkernel::matmul_nt(a, bt);
    Tensor tn = numkernel::matmul_tn(at, b);
    for (int64_t i = 0; i < ref.numel(); ++i) {
        CHECK(std::abs(ref.data()[i] - nt.data()[i]) <= 1e-5f);
        CHECK(std::abs(ref.data()[i] - tn.data()[i]) <= 1e-5f);
    }
}

TEST_CASE("matmul shape mismatch raises dimension error") {
    Tensor a({2, 3});
    Tensor b({4, 2});
    CHECK_THROWS_AS(numkernel::matmul(a, b), DimensionError);
}

TEST_CASE("svd_thin on diagonal and zero matrices") {
    Tensor d = Tensor::from_data({2, 2}, {3, 0, 0, 2});
    auto svd = numkernel::svd_thin(d);
    REQUIRE(svd.sigma.size() == 2);
    CHECK(svd.sigma[0] == doctest::Approx(3).epsilon(1e-6));
    CHECK(svd.sigma[1] == doctest::Approx(2).epsilon(1e-6));

    Tensor z({3, 5});
    auto zsvd = numkernel::svd_thin(z);
    REQUIRE(zsvd.sigma.size() == 3);
    for (float s : zsvd.sigma) CHECK(s == 0.0f);
    // vt rows must be orthonormal even for zero singular values.
    for (int64_t i = 0; i < 3; ++i) {
        for (int64_t j = 0; j < 3; ++j) {
            double dot = 0;
            for (int64_t k = 0; k < 5; ++k) {
                dot += static_cast<double>(zsvd.vt.at(i, k)) * zsvd.vt.at(j, k);
            }
            CHECK(std::abs(dot - (i == j ? 1.0 : 0.0)) <= 1e-4);
        }
    }
}

namespace {

void check_svd_contract(const Tensor& w) {
    const int64_t d1 = w.dim(0), m = w.dim(1);
    const int64_t r = std::min(d1, m);
    auto svd = numkernel::svd_thin(w);
    REQUIRE(static_cast<int64_t>(svd.sigma.size()) == r);

    for (size_t i = 0; i + 1 < svd.sigma.size(); ++i) {
        CHECK(svd.sigma[i] >= svd.sigma[i + 1]);
    }
    for (float s : svd.sigma) CHECK(s >= 0.0f);

    // Orthonormality within 1e-4 (max norm).
    for (int64_t i = 0; i < r; ++i) {
        for (int64_t j = i; j < r; ++j) {
            double du = 0, dv = 0;
            for (int64_t k = 0; k < d1; ++k) {
                du += static_cast<double>(svd.u.at(k, i)) * svd.u.at(k, j);
            }
            for (int64_t k = 0; k < m; ++k) {
                dv += static_cast<double>(svd.vt.at(i, k)) * svd.vt.at(j, k);
            }
            const double want = i == j ? 1.0 : 0.0;
            CHECK(std::abs(du - want) <= 1e-4);
            CHECK(std::abs(dv - want) <= 1e-4);
        }
    }

    // Reconstruction: ||W - U diag(s) Vt||_F / ||W||_F <= 1e-4.
    double num = 0, den = 0;
    for (int64_t i = 0; i < d1; ++i) {
        for (int64_t j = 0; j < m; ++j) {
            double rec = 0;
            for (int64_t k = 0; k < r; ++k) {
                rec += static_cast<double>(svd.u.at(i, k)) * svd.sigma[static_cast<size_t>(k)] *
                       svd.vt.at(k, j);
            }
            const double v = w.at(i, j);
            num += (v - rec) * (v - rec);
            den += v * v;
        }
    }
    CHECK(std::sqrt(num) / std::max(std::sqrt(den), 1e-12) <= 1e-4);

    // Sign convention: largest-magnitude entry of each vt row is positive.
    for (int64_t i = 0; i < r; ++i) {
        double best = 0;
        int64_t arg = 0;
        for (int64_t j = 0; j < m; ++j) {
            if (std::abs(static_cast<double>(svd.vt.at(i, j))) > best) {
                best = std::abs(static_cast<double>(svd.vt.at(i, j)));
                arg = j;
            }
        }
        CHECK(svd.vt.at(i, arg) >= 0.0f);
    }
}

}  // namespace

TEST_CASE("svd_thin contract over randomized rectangular cases") {
    Rng rng(21);
    for (int64_t d1 : {8, 16, 64}) {
        for (int64_t factor : {1, 4, 32}) {
            const int64_t m = d1 * factor;
            Tensor w = random_tensor(rng, {d1, m});
            check_svd_contract(w);
        }
    }
    // Tall orientation too (d1 > m).
    Tensor tall = random_tensor(rng, {24, 6});
    check_svd_contract(tall);
}

TEST_CASE("svd_thin cross-checked against eigendecomposition of W W^T") {
    Rng rng(22);
    Tensor w = random_tensor(rng, {16, 64});
    auto svd = numkernel::svd_thin(w);

    // Oracle: eigenvalues of W W^T are the squared singular values.
    std::vector<double> gram(16 * 16, 0.0);
    for (int64_t i = 0; i < 16; ++i) {
        for (int64_t j = 0; j < 16; ++j) {
            double s = 0;
            for (int64_t k = 0; k < 64; ++k) {
                s += static_cast<double>(w.at(i, k)) * w.at(j, k);
            }
            gram[static_cast<size_t>(i * 16 + j)] = s;
        }
    }
    std::vector<double> eigvals, eigvecs;
    jacobi_eigh(gram, 16, eigvals, eigvecs);
    for (int64_t i = 0; i < 16; ++i) {
        const double sv = std::sqrt(std::max(eigvals[static_cast<size_t>(i)], 0.0));
        CHECK(rel_err(sv, svd.sigma[static_cast<size_t>(i)]) <= 1e-4);
    }
}

TEST_CASE("svd_thin is bit-deterministic across repeated runs") {
    Rng rng(23);
    Tensor w = random_tensor(rng, {12, 40});
    auto a = numkernel::svd_thin(w);
    auto b = numkernel::svd_thin(w);
    CHECK(a.u.bit_equal(b.u));
    CHECK(a.vt.bit_equal(b.vt));
    CHECK(a.sigma == b.sigma);
}

TEST_CASE("svd_thin rejects non-finite input") {
    Tensor w({2, 2});
    w.data()[1] = std::numeric_limits<float>::quiet_NaN();
    CHECK_THROWS_AS(numkernel::svd_thin(w), NumericError);
}

namespace {

// Scalar AdamW reference, one parameter, tracked across steps.
struct ScalarAdamRef {
    double m = 0, v = 0;
    int64_t t = 0;
    double step(double theta, double g, const numkernel::AdamWConfig& c) {
        t += 1;
        m = c.beta1 * m + (1 - c.beta1) * g;
        v = c.beta2 * v + (1 - c.beta2) * g * g;
        const double mhat = m / (1 - std::pow(c.beta1, static_cast<double>(t)));
        const double vhat = v / (1 - std::pow(c.beta2, static_cast<double>(t)));
        return theta - c.lr * c.weight_decay * theta - c.lr * mhat / (std::sqrt(vhat) + c.eps);
    }
};

}  // namespace

TEST_CASE("adamw_step matches the scalar closed form") {
    numkernel::AdamWConfig cfg{0.1, 0.9, 0.999, 1e-8, 0.01};
    Tensor param = Tensor::from_data({1}, {1.0f});
    Tensor grad = Tensor::from_data({1}, {0.5f});
    auto state = numkernel::make_adamw_state({1});
    numkernel::adamw_step(param, grad, state, cfg);
    CHECK(std::abs(static_cast<double>(param.data()[0]) - 0.89900) <= 1e-5);
    CHECK(state.step_count == 1);
}

TEST_CASE("adamw_step randomized scalars match reference over 3 steps") {
    Rng rng(31);
    for (int trial = 0; trial < 10; ++trial) {
        numkernel::AdamWConfig cfg{0.05 * (trial + 1) / 10.0, 0.9, 0.999, 1e-8, 0.01};
        double theta = rng.normal(0, 1);
        Tensor param = Tensor::from_data({1}, {static_cast<float>(theta)});
        theta = param.data()[0];
        auto state = numkernel::make_adamw_state({1});
        ScalarAdamRef ref;
        for (int step = 0; step < 3; ++step) {
            const double g = rng.normal(0, 1);
            Tensor grad = Tensor::from_data({1}, {static_cast<float>(g)});
            theta = ref.step(theta, static_cast<double>(grad.data()[0]), cfg);
            numkernel::adamw_step(param, grad, state, cfg);
            CHECK(std::abs(static_cast<double>(param.data()[0]) - theta) <= 1e-5);
        }
        CHECK(state.step_count == 3);
    }
}

TEST_CASE("adamw_step edge cases") {
    SUBCASE("zero gradient, zero decay leaves parameters unchanged") {
        numkernel::AdamWConfig cfg{0.1, 0.9, 0.999, 1e-8, 0.0};
        Tensor param = Tensor::from_data({3}, {1.0f, -2.0f, 0.5f});
        Tensor before = param;
        Tensor grad({3});
        auto state = numkernel::make_adamw_state({3});
        numkernel::adamw_step(param, grad, state, cfg);
        CHECK(param.bit_equal(before));
    }
    SUBCASE("pure decay halves the parameter") {
        numkernel::AdamWConfig cfg{1.0, 0.9, 0.999, 1e-8, 0.5};
        Tensor param = Tensor::from_data({1}, {0.8f});
        Tensor grad({1});
        auto state = numkernel::make_adamw_state({1});
        numkernel::adamw_step(param, grad, state, cfg);
        CHECK(param.data()[0] == doctest::Approx(0.4f));
    }
    SUBCASE("non-finite gradient raises numeric error") {
        numkernel::AdamWConfig cfg;
        Tensor param({1});
        Tensor grad = Tensor::from_data({1}, {std::numeric_limits<float>::infinity()});
        auto state = numkernel::make_adamw_state({1});
        CHECK_THROWS_AS(numkernel::adamw_step(param, grad, state, cfg), NumericError);
    }
}

TEST_CASE("rng_normal basics") {
    SUBCASE("std 0 yields a constant tensor") {
        Rng rng(5);
        Tensor t = rng_normal(rng, {4, 4}, 2.5, 0.0);
        for (int64_t i = 0; i < t.numel(); ++i) CHECK(t.data()[i] == 2.5f);
    }
    SUBCASE("same seed gives bit-identical tensors") {
        Rng a(99), b(99);
        Tensor ta = rng_normal(a, {100}, 0, 1);
        Tensor tb = rng_normal(b, {100}, 0, 1);
        CHECK(ta.bit_equal(tb));
    }
    SUBCASE("statistical oracle: 1e5 samples, mean and std within 2%") {
        Rng rng(7);
        Tensor t = rng_normal(rng, {100000}, 0, 1);
        double sum = 0;
        for (int64_t i = 0; i < t.numel(); ++i) sum += t.data()[i];
        const double mean = sum / 1e5;
        CHECK(mean >= -0.02);
        CHECK(mean <= 0.02);
        double ss = 0;
        for (int64_t i = 0; i < t.numel(); ++i) {
            ss += (t.data()[i] - mean) * (t.data()[i] - mean);
        }
        const double stddev = std::sqrt(ss / 1e5);
        CHECK(stddev >= 0.98);
        CHECK(stddev <= 1.02);
    }
}

TEST_CASE("matmul result is independent of the thread cap") {
    // The cap cannot exceed hardware concurrency, but the partition path
    // still differs between 1 and n>1 workers.
    Rng rng(41);
    Tensor a = random_tensor(rng, {33, 17});
    Tensor b = random_tensor(rng, {17, 29});
    Tensor r1 = numkernel::matmul(a, b);
    Tensor r2 = numkernel::matmul(a, b);
    CHECK(r1.bit_equal(r2));
}

TEST_SUITE_END();
