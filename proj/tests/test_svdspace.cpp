#include <doctest.h>

#include <cmath>

#include "layerforge/lfck.hpp"
#include "layerforge/numkernel.hpp"
#include "layerforge/svdspace.hpp"
#include "support.hpp"

using namespace layerforge;
using namespace testsupport;
using checkpoint::MatrixFamily;

TEST_SUITE_BEGIN("svdspace");

TEST_CASE("concat_layers shape and block slicing") {
    Rng rng(1);
    std::vector<Tensor> mats;
    for (int i = 0; i < 4; ++i) mats.push_back(random_tensor(rng, {2, 3}));
    Tensor cat = svdspace::concat_layers(mats);
    REQUIRE(cat.shape() == std::vector<int64_t>{2, 12});
    for (int b = 0; b < 4; ++b) {
        for (int64_t i = 0; i < 2; ++i) {
            for (int64_t j = 0; j < 3; ++j) {
                CHECK(cat.at(i, b * 3 + j) == mats[b].at(i, j));
            }
        }
    }
}

TEST_CASE("concat_layers input validation") {
    std::vector<Tensor> one = {Tensor({2, 2})};
    CHECK_THROWS_AS(svdspace::concat_layers(one), ArgumentError);
    std::vector<Tensor> mixed = {Tensor({2, 2}), Tensor({2, 3})};
    CHECK_THROWS_AS(svdspace::concat_layers(mixed), DimensionError);
}

TEST_CASE("decompose of identical layers yields identical coefficient blocks") {
    // d1 <= d2 keeps the concatenation at full row rank; directions tied to
    // zero singular values get an arbitrary orthonormal completion and are
    // not expected to be block-symmetric.
    Rng rng(2);
    Tensor m = random_tensor(rng, {5, 6});
    std::vector<Tensor> mats(4, m);
    auto space = svdspace::decompose(MatrixFamily::q_proj, mats);
    REQUIRE(space.coeffs.size() == 4);
    for (float s : space.sigma) CHECK(s > 0.0f);
    for (size_t i = 1; i < 4; ++i) {
        for (int64_t k = 0; k < space.coeffs[0].numel(); ++k) {
            CHECK(std::abs(space.coeffs[i].data()[k] - space.coeffs[0].data()[k]) <= 1e-6f);
        }
    }
}

TEST_CASE("decompose of orthonormal rows gives equal singular values") {
    // Gram-Schmidt a random 8x(8*16) row set in the test itself, giving a
    // wide matrix with all singular values 1; its column blocks are the
    // layer matrices.
    const int64_t d1 = 8, d2 = 16, L = 8;
    const int64_t m = L * d2;
    Rng rng(3);
    std::vector<std::vector<double>> rows(d1, std::vector<double>(m));
    for (auto& row : rows) {
        for (auto& v : row) v = rng.normal(0, 1);
    }
    for (int64_t i = 0; i < d1; ++i) {
        for (int64_t j = 0; j < i; ++j) {
            double dot = 0;
            for (int64_t k = 0; k < m; ++k) dot += rows[i][k] * rows[j][k];
            for (int64_t k = 0; k < m; ++k) rows[i][k] -= dot * rows[j][k];
        }
        double nn = 0;
        for (double v : rows[i]) nn += v * v;
        const double inv = 1.0 / std::sqrt(nn);
        for (double& v : rows[i]) v *= inv;
    }
    std::vector<Tensor> mats;
    for (int64_t b = 0; b < L; ++b) {
        Tensor t({d1, d2});
        for (int64_t i = 0; i < d1; ++i) {
            for (int64_t j = 0; j < d2; ++j) {
                t.at(i, j) = static_cast<float>(rows[i][b * d2 + j]);
            }
        }
        mats.push_back(std::move(t));
    }
    auto space = svdspace::decompose(MatrixFamily::q_proj, mats);
    for (float s : space.sigma) CHECK(std::abs(s - 1.0f) <= 1e-4f);
}

TEST_CASE("slicing is lossless: concatenated coeffs equal vt bit-exactly") {
    Rng rng(4);
    std::vector<Tensor> mats;
    for (int i = 0; i < 8; ++i) mats.push_back(random_tensor(rng, {16, 32}));
    Tensor cat = svdspace::concat_layers(mats);
    auto svd = numkernel::svd_thin(cat);
    auto space = svdspace::decompose(MatrixFamily::k_proj, mats);

    REQUIRE(space.rank == static_cast<int64_t>(svd.sigma.size()));
    for (int64_t b = 0; b < 8; ++b) {
        for (int64_t i = 0; i < space.rank; ++i) {
            for (int64_t j = 0; j < 32; ++j) {
                CHECK(space.coeffs[b].at(i, j) == svd.vt.at(i, b * 32 + j));
            }
        }
    }
}

TEST_CASE("per-layer reconstruction residual within 1e-4") {
    Rng rng(5);
    std::vector<Tensor> mats;
    for (int i = 0; i < 8; ++i) mats.push_back(random_tensor(rng, {16, 32}));
    auto space = svdspace::decompose(MatrixFamily::v_proj, mats);
    for (int64_t b = 0; b < 8; ++b) {
        Tensor rec = svdspace::reconstruct_layer(space, space.coeffs[b]);
        double num = 0, den = 0;
        for (int64_t k = 0; k < rec.numel(); ++k) {
            const double d = rec.data()[k] - mats[b].data()[k];
            num += d * d;
            den += static_cast<double>(mats[b].data()[k]) * mats[b].data()[k];
        }
        CHECK(std::sqrt(num / den) <= 1e-4);
    }
}

TEST_CASE("reconstruct_layer edge cases and linearity") {
    Rng rng(6);
    std::vector<Tensor> mats;
    for (int i = 0; i < 4; ++i) mats.push_back(random_tensor(rng, {8, 8}));
    auto space = svdspace::decompose(MatrixFamily::o_proj, mats);

    SUBCASE("zero coefficients give the zero matrix") {
        Tensor zero({space.rank, space.d2});
        Tensor rec = svdspace::reconstruct_layer(space, zero);
        for (int64_t k = 0; k < rec.numel(); ++k) CHECK(rec.data()[k] == 0.0f);
    }
    SUBCASE("shape mismatch raises") {
        CHECK_THROWS_AS(svdspace::reconstruct_layer(space, Tensor({1, 1})), DimensionError);
    }
    SUBCASE("linearity: midpoint of coefficients reconstructs midpoint of layers") {
        Tensor mid({space.rank, space.d2});
        for (int64_t k = 0; k < mid.numel(); ++k) {
            mid.data()[k] = 0.5f * (space.coeffs[0].data()[k] + space.coeffs[1].data()[k]);
        }
        Tensor rec = svdspace::reconstruct_layer(space, mid);
        double num = 0, den = 0;
        for (int64_t k = 0; k < rec.numel(); ++k) {
            const double want = 0.5 * (static_cast<double>(mats[0].data()[k]) + mats[1].data()[k]);
            num += (rec.data()[k] - want) * (rec.data()[k] - want);
            den += want * want;
        }
        CHECK(std::sqrt(num / den) <= 1e-4);
    }
}

TEST_CASE("decompose_family matches manual family gathering") {
    auto cfg = tiny_config(4, 8, 2, 12, 11);
    Rng rng(7);
    auto model = checkpoint::random_checkpoint(cfg, rng, 0.5);
    auto space = svdspace::decompose_family(model, MatrixFamily::gate_proj);
    CHECK(space.d1 == 12);
    CHECK(space.d2 == 8);
    CHECK(space.n_layers == 4);
    CHECK(space.rank == std::min<int64_t>(12, 32));
}

TEST_CASE("dump_space writes a readable container") {
    Rng rng(8);
    std::vector<Tensor> mats;
    for (int i = 0; i < 3; ++i) mats.push_back(random_tensor(rng, {4, 6}));
    auto space = svdspace::decompose(MatrixFamily::up_proj, mats);
    auto dir = fresh_tmp_dir("space");
    svdspace::dump_space(space, dir / "s.lfck");
    auto c = lfck::read_container(dir / "s.lfck");
    CHECK(c.find("u") != nullptr);
    CHECK(c.find("sigma") != nullptr);
    CHECK(c.find("coeffs.0") != nullptr);
    CHECK(c.find("coeffs.2") != nullptr);
    CHECK(c.find("u")->bit_equal(space.u));
    std::filesystem::remove_all(dir);
}

TEST_SUITE_END();
