#include "layerforge/checkpoint.hpp"

#include <json.hpp>

#include "layerforge/lfck.hpp"

namespace layerforge::checkpoint {

using nlohmann::json;

void ModelConfig::validate() const {
    if (n_layers < 1) throw ValidationError("n_layers must be >= 1");
    if (d_model < 1) throw ValidationError("d_model must be >= 1");
    if (n_heads < 1) throw ValidationError("n_heads must be >= 1");
    if (d_model % n_heads != 0) throw ValidationError("d_model must be divisible by n_heads");
    if (d_ff < 1) throw ValidationError("d_ff must be >= 1");
    if (vocab_size < 2) throw ValidationError("vocab_size must be >= 2");
    if (max_seq_len < 1) throw ValidationError("max_seq_len must be >= 1");
    if (!(rope_theta > 0.0f)) throw ValidationError("rope_theta must be positive");
}

std::string_view family_name(MatrixFamily f) {
    switch (f) {
        case MatrixFamily::q_proj: return "q_proj";
        case MatrixFamily::k_proj: return "k_proj";
        case MatrixFamily::v_proj: return "v_proj";
        case MatrixFamily::o_proj: return "o_proj";
        case MatrixFamily::up_proj: return "up_proj";
        case MatrixFamily::down_proj: return "down_proj";
        case MatrixFamily::gate_proj: return "gate_proj";
    }
    throw ArgumentError("unknown matrix family");
}

MatrixFamily family_from_name(std::string_view name) {
    for (MatrixFamily f : kAllFamilies) {
        if (family_name(f) == name) return f;
    }
    throw ArgumentError("unknown matrix family name: " + std::string(name));
}

std::pair<int64_t, int64_t> family_shape(const ModelConfig& cfg, MatrixFamily f) {
    switch (f) {
        case MatrixFamily::q_proj:
        case MatrixFamily::k_proj:
        case MatrixFamily::v_proj:
        case MatrixFamily::o_proj: return {cfg.d_model, cfg.d_model};
        case MatrixFamily::gate_proj:
        case MatrixFamily::up_proj: return {cfg.d_ff, cfg.d_model};
        case MatrixFamily::down_proj: return {cfg.d_model, cfg.d_ff};
    }
    throw ArgumentError("unknown matrix family");
}

Tensor& TransformerCheckpoint::family(int64_t layer, MatrixFamily f) {
    return const_cast<Tensor&>(std::as_const(*this).family(layer, f));
}

const Tensor& TransformerCheckpoint::family(int64_t layer, MatrixFamily f) const {
    const LayerWeights& lw = layers.at(static_cast<size_t>(layer));
    switch (f) {
        case MatrixFamily::q_proj: return lw.q_proj;
        case MatrixFamily::k_proj: return lw.k_proj;
        case MatrixFamily::v_proj: return lw.v_proj;
        case MatrixFamily::o_proj: return lw.o_proj;
        case MatrixFamily::up_proj: return lw.up_proj;
        case MatrixFamily::down_proj: return lw.down_proj;
        case MatrixFamily::gate_proj: return lw.gate_proj;
    }
    throw ArgumentError("unknown matrix family");
}

namespace {

void check_shape(const Tensor& t, const std::vector<int64_t>& want, const std::string& name) {
    if (t.shape() != want) {
        throw ValidationError("tensor '" + name + "' has shape " + shape_string(t.shape()) +
                              ", expected " + shape_string(want));
    }
}

}  // namespace

void TransformerCheckpoint::validate() const {
    config.validate();
    if (static_cast<int64_t>(layers.size()) != config.n_layers) {
        throw ValidationError("checkpoint has " + std::to_string(layers.size()) +
                              " layers, config says " + std::to_string(config.n_layers));
    }
    check_shape(embed, {config.vocab_size, config.d_model}, "embed");
    check_shape(final_norm, {config.d_model}, "final_norm");
    check_shape(lm_head, {config.vocab_size, config.d_model}, "lm_head");
    for (int64_t l = 0; l < config.n_layers; ++l) {
        const std::string prefix = "layers." + std::to_string(l) + ".";
        for (MatrixFamily f : kAllFamilies) {
            auto [d1, d2] = family_shape(config, f);
            check_shape(family(l, f), {d1, d2}, prefix + std::string(family_name(f)));
        }
        check_shape(layers[static_cast<size_t>(l)].input_norm, {config.d_model},
                    prefix + "input_norm");
        check_shape(layers[static_cast<size_t>(l)].post_attn_norm, {config.d_model},
                    prefix + "post_attn_norm");
    }
}

TransformerCheckpoint random_checkpoint(const ModelConfig& cfg, Rng& rng, double init_std) {
    cfg.validate();
    TransformerCheckpoint m;
    m.config = cfg;
    m.embed = rng_normal(rng, {cfg.vocab_size, cfg.d_model}, 0.0, init_std);
    m.layers.resize(static_cast<size_t>(cfg.n_layers));
    for (auto& lw : m.layers) {
        lw.q_proj = rng_normal(rng, {cfg.d_model, cfg.d_model}, 0.0, init_std);
        lw.k_proj = rng_normal(rng, {cfg.d_model, cfg.d_model}, 0.0, init_std);
        lw.v_proj = rng_normal(rng, {cfg.d_model, cfg.d_model}, 0.0, init_std);
        lw.o_proj = rng_normal(rng, {cfg.d_model, cfg.d_model}, 0.0, init_std);
        lw.gate_proj = rng_normal(rng, {cfg.d_ff, cfg.d_model}, 0.0, init_std);
        lw.up_proj = rng_normal(rng, {cfg.d_ff, cfg.d_model}, 0.0, init_std);
        lw.down_proj = rng_normal(rng, {cfg.d_model, cfg.d_ff}, 0.0, init_std);
        lw.input_norm = Tensor::full({cfg.d_model}, 1.0f);
        lw.post_attn_norm = Tensor::full({cfg.d_model}, 1.0f);
    }
    m.final_norm = Tensor::full({cfg.d_model}, 1.0f);
    m.lm_head = rng_normal(rng, {cfg.vocab_size, cfg.d_model}, 0.0, init_std);
    return m;
}

std::string config_to_json(const ModelConfig& cfg) {
    json j;
    j["n_layers"] = cfg.n_layers;
    j["d_model"] = cfg.d_model;
    j["n_heads"] = cfg.n_heads;
    j["d_ff"] = cfg.d_ff;
    j["vocab_size"] = cfg.vocab_size;
    j["max_seq_len"] = cfg.max_seq_len;
    j["rope_theta"] = cfg.rope_theta;
    return j.dump();
}

ModelConfig config_from_json(const std::string& json_text) {
    json j = json::parse(json_text, nullptr, false);
    if (j.is_discarded() || !j.is_object()) {
        throw FormatError("model config block is not a JSON object");
    }
    const char* required[] = {"n_layers", "d_model", "n_heads",    "d_ff",
                              "vocab_size", "max_seq_len", "rope_theta"};
    for (const char* key : required) {
        if (!j.contains(key)) throw FormatError(std::string("model config missing '") + key + "'");
    }
    ModelConfig cfg;
    cfg.n_layers = j["n_layers"].get<int64_t>();
    cfg.d_model = j["d_model"].get<int64_t>();
    cfg.n_heads = j["n_heads"].get<int64_t>();
    cfg.d_ff = j["d_ff"].get<int64_t>();
    cfg.vocab_size = j["vocab_size"].get<int64_t>();
    cfg.max_seq_len = j["max_seq_len"].get<int64_t>();
    cfg.rope_theta = j["rope_theta"].get<float>();
    cfg.validate();
    return cfg;
}

namespace {

// Canonical header order: embed, per-layer tensors, final_norm, lm_head.
std::vector<std::pair<std::string, const Tensor*>> named_tensors(
    const TransformerCheckpoint& m) {
    std::vector<std::pair<std::string, const Tensor*>> out;
    out.emplace_back("embed", &m.embed);
    for (int64_t l = 0; l < m.config.n_layers; ++l) {
        const std::string prefix = "layers." + std::to_string(l) + ".";
        const LayerWeights& lw = m.layers[static_cast<size_t>(l)];
        out.emplace_back(prefix + "q_proj", &lw.q_proj);
        out.emplace_back(prefix + "k_proj", &lw.k_proj);
        out.emplace_back(prefix + "v_proj", &lw.v_proj);
        out.emplace_back(prefix + "o_proj", &lw.o_proj);
        out.emplace_back(prefix + "gate_proj", &lw.gate_proj);
        out.emplace_back(prefix + "up_proj", &lw.up_proj);
        out.emplace_back(prefix + "down_proj", &lw.down_proj);
        out.emplace_back(prefix + "input_norm", &lw.input_norm);
        out.emplace_back(prefix + "post_attn_norm", &lw.post_attn_norm);
    }
    out.emplace_back("final_norm", &m.final_norm);
    out.emplace_back("lm_head", &m.lm_head);
    return out;
}

}  // namespace

void save_checkpoint(const TransformerCheckpoint& model, const std::filesystem::path& path) {
    model.validate();
    lfck::Container c;
    c.config_json = config_to_json(model.config);
    for (auto& [name, tensor] : named_tensors(model)) {
        c.tensors.push_back({name, *tensor});
    }
    lfck::write_container(path, c);
}

TransformerCheckpoint load_checkpoint(const std::filesystem::path& path) {
    lfck::Container c = lfck::read_container(path);
    TransformerCheckpoint m;
    m.config = config_from_json(c.config_json);
    m.layers.resize(static_cast<size_t>(m.config.n_layers));

    // The file must contain exactly the canonical set, nothing else.
    TransformerCheckpoint canonical;
    canonical.config = m.config;
    canonical.layers.resize(static_cast<size_t>(m.config.n_layers));
    size_t cursor = 0;
    auto take = [&](const std::string& name) -> const Tensor& {
        if (cursor >= c.tensors.size()) {
            throw ValidationError("missing tensor '" + name + "' in " + path.string());
        }
        const auto& nt = c.tensors[cursor++];
        if (nt.name != name) {
            throw ValidationError("unexpected tensor '" + nt.name + "', expected '" + name +
                                  "' in " + path.string());
        }
        return nt.tensor;
    };

    m.embed = take("embed");
    for (int64_t l = 0; l < m.config.n_layers; ++l) {
        const std::string prefix = "layers." + std::to_string(l) + ".";
        LayerWeights& lw = m.layers[static_cast<size_t>(l)];
        lw.q_proj = take(prefix + "q_proj");
        lw.k_proj = take(prefix + "k_proj");
        lw.v_proj = take(prefix + "v_proj");
        lw.o_proj = take(prefix + "o_proj");
        lw.gate_proj = take(prefix + "gate_proj");
        lw.up_proj = take(prefix + "up_proj");
        lw.down_proj = take(prefix + "down_proj");
        lw.input_norm = take(prefix + "input_norm");
        lw.post_attn_norm = take(prefix + "post_attn_norm");
    }
    m.final_norm = take("final_norm");
    m.lm_head = take("lm_head");
    if (cursor != c.tensors.size()) {
        throw ValidationError("extra tensor '" + c.tensors[cursor].name + "' in " + path.string());
    }
    m.validate();
    return m;
}

}  // namespace layerforge::checkpoint
