#include <doctest.h>

#include <fstream>

#include "layerforge/checkpoint.hpp"
#include "layerforge/lfck.hpp"
#include "support.hpp"

using namespace layerforge;
using namespace testsupport;
namespace fs = std::filesystem;

TEST_SUITE_BEGIN("checkpoint");

TEST_CASE("model config validation") {
    auto cfg = tiny_config();
    CHECK_NOTHROW(cfg.validate());
    cfg.n_heads = 3;  // does not divide d_model = 8
    CHECK_THROWS_AS(cfg.validate(), ValidationError);
    cfg = tiny_config();
    cfg.vocab_size = 1;
    CHECK_THROWS_AS(cfg.validate(), ValidationError);
}

TEST_CASE("family shapes derive from the config") {
    auto cfg = tiny_config(2, 8, 2, 12, 11);
    using checkpoint::MatrixFamily;
    CHECK(checkpoint::family_shape(cfg, MatrixFamily::q_proj) == std::pair<int64_t, int64_t>{8, 8});
    CHECK(checkpoint::family_shape(cfg, MatrixFamily::gate_proj) ==
          std::pair<int64_t, int64_t>{12, 8});
    CHECK(checkpoint::family_shape(cfg, MatrixFamily::down_proj) ==
          std::pair<int64_t, int64_t>{8, 12});
    CHECK(checkpoint::kAllFamilies.size() == 7);
    CHECK(checkpoint::family_from_name("o_proj") == MatrixFamily::o_proj);
    CHECK_THROWS_AS(checkpoint::family_from_name("router"), ArgumentError);
}

TEST_CASE("save/load round trip is bit-exact across randomized configs") {
    Rng seed_rng(77);
    for (int trial = 0; trial < 4; ++trial) {
        checkpoint::ModelConfig cfg;
        cfg.n_layers = 1 + static_cast<int64_t>(seed_rng.bounded(4));
        cfg.n_heads = 1 + static_cast<int64_t>(seed_rng.bounded(3));
        cfg.d_model = cfg.n_heads * 2 * (1 + static_cast<int64_t>(seed_rng.bounded(3)));
        cfg.d_ff = 4 + static_cast<int64_t>(seed_rng.bounded(17));
        cfg.vocab_size = 2 + static_cast<int64_t>(seed_rng.bounded(40));
        cfg.max_seq_len = 8 + static_cast<int64_t>(seed_rng.bounded(50));

        Rng rng(100 + trial);
        auto model = checkpoint::random_checkpoint(cfg, rng, 0.3);
        auto dir = fresh_tmp_dir("ckpt");
        const auto path = dir / "m.lfck";
        checkpoint::save_checkpoint(model, path);
        auto loaded = checkpoint::load_checkpoint(path);

        CHECK(loaded.config == model.config);
        CHECK(loaded.embed.bit_equal(model.embed));
        CHECK(loaded.final_norm.bit_equal(model.final_norm));
        CHECK(loaded.lm_head.bit_equal(model.lm_head));
        for (int64_t l = 0; l < cfg.n_layers; ++l) {
            for (auto f : checkpoint::kAllFamilies) {
                CHECK(loaded.family(l, f).bit_equal(model.family(l, f)));
            }
            CHECK(loaded.layers[l].input_norm.bit_equal(model.layers[l].input_norm));
            CHECK(loaded.layers[l].post_attn_norm.bit_equal(model.layers[l].post_attn_norm));
        }
        fs::remove_all(dir);
    }
}

TEST_CASE("file size equals preamble + header + 4 bytes per parameter") {
    auto cfg = tiny_config(2, 8, 2, 12, 11);
    Rng rng(3);
    auto model = checkpoint::random_checkpoint(cfg, rng);
    auto dir = fresh_tmp_dir("size");
    const auto path = dir / "m.lfck";
    checkpoint::save_checkpoint(model, path);

    int64_t param_count = model.embed.numel() + model.final_norm.numel() + model.lm_head.numel();
    for (const auto& lw : model.layers) {
        param_count += lw.q_proj.numel() + lw.k_proj.numel() + lw.v_proj.numel() +
                       lw.o_proj.numel() + lw.gate_proj.numel() + lw.up_proj.numel() +
                       lw.down_proj.numel() + lw.input_norm.numel() + lw.post_attn_norm.numel();
    }
    const int64_t file_size = static_cast<int64_t>(fs::file_size(path));

    // Recover the header length from the preamble to check the arithmetic.
    std::ifstream in(path, std::ios::binary);
    in.seekg(8);
    uint64_t hlen = 0;
    in.read(reinterpret_cast<char*>(&hlen), 8);
    CHECK(file_size == 16 + static_cast<int64_t>(hlen) + 4 * param_count);
    fs::remove_all(dir);
}

TEST_CASE("loader rejects malformed files") {
    auto cfg = tiny_config();
    Rng rng(4);
    auto model = checkpoint::random_checkpoint(cfg, rng);
    auto dir = fresh_tmp_dir("bad");
    const auto path = dir / "m.lfck";
    checkpoint::save_checkpoint(model, path);

    SUBCASE("corrupted magic") {
        std::fstream f(path, std::ios::in | std::ios::out | std::ios::binary);
        f.seekp(0);
        f.write("XXXX", 4);
        f.close();
        CHECK_THROWS_AS(checkpoint::load_checkpoint(path), FormatError);
    }
    SUBCASE("truncated data") {
        const auto size = fs::file_size(path);
        fs::resize_file(path, size - 10);
        CHECK_THROWS_AS(checkpoint::load_checkpoint(path), IoError);
    }
    SUBCASE("missing file") {
        CHECK_THROWS_AS(checkpoint::load_checkpoint(dir / "nope.lfck"), IoError);
    }
    SUBCASE("extra tensor rejected") {
        lfck::Container c = lfck::read_container(path);
        c.tensors.push_back({"layers.0.router", Tensor({2, 2})});
        lfck::write_container(path, c);
        CHECK_THROWS_AS(checkpoint::load_checkpoint(path), ValidationError);
    }
    SUBCASE("missing tensor rejected") {
        lfck::Container c = lfck::read_container(path);
        c.tensors.pop_back();
        lfck::write_container(path, c);
        CHECK_THROWS_AS(checkpoint::load_checkpoint(path), ValidationError);
    }
    SUBCASE("shape inconsistent with config rejected") {
        lfck::Container c = lfck::read_container(path);
        c.tensors[0].tensor = Tensor({3, 3});  // embed should be [vocab, d_model]
        lfck::write_container(path, c);
        CHECK_THROWS_AS(checkpoint::load_checkpoint(path), ValidationError);
    }
    fs::remove_all(dir);
}

TEST_CASE("save to unwritable path raises io error") {
    auto cfg = tiny_config();
    Rng rng(5);
    auto model = checkpoint::random_checkpoint(cfg, rng);
    CHECK_THROWS_AS(checkpoint::save_checkpoint(model, "/nonexistent_dir_zz/m.lfck"), IoError);
}

TEST_SUITE_END();
