#include "layerforge/expansion.hpp"

#include <cmath>
#include <fstream>

#include <json.hpp>

#include "layerforge/numkernel.hpp"
#include "layerforge/svdspace.hpp"

namespace layerforge::expansion {

using nlohmann::json;

std::string_view strategy_name(Strategy s) {
    switch (s) {
        case Strategy::lesa: return "lesa";
        case Strategy::lesa_raw: return "lesa_raw";
        case Strategy::interpolation: return "interpolation";
        case Strategy::stack: return "stack";
        case Strategy::pro: return "pro";
        case Strategy::solar: return "solar";
    }
    throw ArgumentError("unknown strategy");
}

Strategy strategy_from_name(std::string_view name) {
    for (Strategy s : {Strategy::lesa, Strategy::lesa_raw, Strategy::interpolation,
                       Strategy::stack, Strategy::pro, Strategy::solar}) {
        if (strategy_name(s) == name) return s;
    }
    throw ArgumentError("unknown strategy name: " + std::string(name));
}

std::vector<int64_t> ExpansionPlan::new_layer_indices() const {
    std::vector<int64_t> out;
    for (size_t i = 0; i < layers.size(); ++i) {
        if (layers[i].kind != LayerEntry::Kind::original) out.push_back(static_cast<int64_t>(i));
    }
    return out;
}

std::vector<int64_t> ExpansionPlan::original_layer_indices() const {
    std::vector<int64_t> out;
    for (size_t i = 0; i < layers.size(); ++i) {
        if (layers[i].kind == LayerEntry::Kind::original) out.push_back(static_cast<int64_t>(i));
    }
    return out;
}

ExpansionPlan plan_expansion(const ModelConfig& cfg, Strategy strategy,
                             const ExpansionParams& params_in) {
    cfg.validate();
    const int64_t L = cfg.n_layers;
    ExpansionPlan plan;
    plan.strategy = strategy;
    plan.n_original = L;
    plan.params = params_in;
    ExpansionParams& p = plan.params;

    using Kind = LayerEntry::Kind;
    switch (strategy) {
        case Strategy::lesa:
        case Strategy::lesa_raw: {
            if (p.interval_a < 1 || p.interval_b < p.interval_a || p.interval_b > L) {
                throw ArgumentError("lesa interval [" + std::to_string(p.interval_a) + ", " +
                                    std::to_string(p.interval_b) + "] out of range for " +
                                    std::to_string(L) + " layers");
            }
            for (int64_t l = 1; l <= L; ++l) {
                plan.layers.push_back({Kind::original, l - 1, 0});
                if (l >= p.interval_a && l < p.interval_b) {
                    plan.layers.push_back({Kind::synth, l - 1, l});
                }
            }
            break;
        }
        case Strategy::interpolation: {
            for (int64_t l = 0; l < L; ++l) {
                plan.layers.push_back({Kind::original, l, 0});
                plan.layers.push_back({Kind::copy, l, 0});
            }
            break;
        }
        case Strategy::stack: {
            if (p.group_size == 0) p.group_size = L;
            if (p.group_size < 1 || p.group_size > L) {
                throw ArgumentError("stack group_size out of range");
            }
            for (int64_t start = 0; start < L; start += p.group_size) {
                const int64_t end = std::min(L, start + p.group_size);
                for (int64_t l = start; l < end; ++l) plan.layers.push_back({Kind::original, l, 0});
                for (int64_t l = start; l < end; ++l) plan.layers.push_back({Kind::copy, l, 0});
            }
            break;
        }
        case Strategy::pro: {
            if (p.n_copies == 0) p.n_copies = (L + 3) / 4;
            if (p.n_copies < 1 || p.n_copies > L) {
                throw ArgumentError("pro n_copies out of range");
            }
            // Split into n_copies groups as evenly as possible; append a
            // copy of each group's last layer.
            const int64_t base = L / p.n_copies;
            const int64_t extra = L % p.n_copies;
            int64_t cursor = 0;
            for (int64_t g = 0; g < p.n_copies; ++g) {
                const int64_t size = base + (g < extra ? 1 : 0);
                for (int64_t i = 0; i < size; ++i) {
                    plan.layers.push_back({Kind::original, cursor + i, 0});
                }
                plan.layers.push_back({Kind::copy, cursor + size - 1, 0});
                cursor += size;
            }
            break;
        }
        case Strategy::solar: {
            if (p.n_overlap == 0) p.n_overlap = (3 * L + 3) / 4;
            const int64_t n = p.n_overlap;
            if (n < 1 || n > L || 2 * n < L) {
                throw ArgumentError("solar n_overlap must satisfy L/2 <= n <= L");
            }
            for (int64_t l = 0; l < n; ++l) plan.layers.push_back({Kind::original, l, 0});
            for (int64_t l = L - n; l < L; ++l) {
                // Repeated indices are copies; the trailing fresh ones stay
                // original so every source appears as original exactly once.
                plan.layers.push_back({l < n ? LayerEntry{Kind::copy, l, 0}
                                             : LayerEntry{Kind::original, l, 0}});
            }
            break;
        }
    }
    return plan;
}

namespace {

Tensor mean_of(const Tensor& a, const Tensor& b) {
    Tensor out(a.shape());
    const float* pa = a.data();
    const float* pb = b.data();
    float* po = out.data();
    for (int64_t i = 0; i < out.numel(); ++i) {
        po[i] = 0.5f * (pa[i] + pb[i]);
    }
    return out;
}

checkpoint::LayerWeights copy_layer(const checkpoint::LayerWeights& src) { return src; }

}  // namespace

TransformerCheckpoint expand_lesa(const TransformerCheckpoint& model,
                                  const std::map<MatrixFamily, PredictorNet>& predictors,
                                  const ExpansionPlan& plan, bool use_svd) {
    model.validate();
    if (plan.strategy != Strategy::lesa && plan.strategy != Strategy::lesa_raw) {
        throw ArgumentError("expand_lesa requires a lesa/lesa_raw plan");
    }
    for (MatrixFamily f : checkpoint::kAllFamilies) {
        if (!predictors.count(f)) {
            throw ValidationError("missing predictor for family " +
                                  std::string(checkpoint::family_name(f)));
        }
    }

    // Per-family spaces once (synthesis happens in coefficient space).
    std::map<MatrixFamily, svdspace::SvdSpace> spaces;
    if (use_svd) {
        for (MatrixFamily f : checkpoint::kAllFamilies) {
            spaces.emplace(f, svdspace::decompose_family(model, f));
        }
    }

    TransformerCheckpoint out;
    out.config = model.config;
    out.config.n_layers = static_cast<int64_t>(plan.layers.size());
    out.embed = model.embed;
    out.final_norm = model.final_norm;
    out.lm_head = model.lm_head;
    out.layers.reserve(plan.layers.size());

    for (const LayerEntry& e : plan.layers) {
        if (e.kind == LayerEntry::Kind::original || e.kind == LayerEntry::Kind::copy) {
            out.layers.push_back(copy_layer(model.layers[static_cast<size_t>(e.src_a)]));
            continue;
        }
        const int64_t la = e.src_a, lb = e.src_b;
        checkpoint::LayerWeights lw;
        for (MatrixFamily f : checkpoint::kAllFamilies) {
            const PredictorNet& net = predictors.at(f);
            Tensor synth;
            if (use_svd) {
                const auto& space = spaces.at(f);
                Tensor coeffs = predictor::predict_intermediate(
                    net, space.coeffs[static_cast<size_t>(la)],
                    space.coeffs[static_cast<size_t>(lb)]);
                synth = svdspace::reconstruct_layer(space, coeffs);
            } else {
                synth = predictor::predict_intermediate(net, model.family(la, f),
                                                        model.family(lb, f));
            }
            if (!synth.all_finite()) {
                throw NumericError("synthesized weights are non-finite for family " +
                                   std::string(checkpoint::family_name(f)));
            }
            switch (f) {
                case MatrixFamily::q_proj: lw.q_proj = std::move(synth); break;
                case MatrixFamily::k_proj: lw.k_proj = std::move(synth); break;
                case MatrixFamily::v_proj: lw.v_proj = std::move(synth); break;
                case MatrixFamily::o_proj: lw.o_proj = std::move(synth); break;
                case MatrixFamily::up_proj: lw.up_proj = std::move(synth); break;
                case MatrixFamily::down_proj: lw.down_proj = std::move(synth); break;
                case MatrixFamily::gate_proj: lw.gate_proj = std::move(synth); break;
            }
        }
        const auto& a = model.layers[static_cast<size_t>(la)];
        const auto& b = model.layers[static_cast<size_t>(lb)];
        lw.input_norm = mean_of(a.input_norm, b.input_norm);
        lw.post_attn_norm = mean_of(a.post_attn_norm, b.post_attn_norm);
        out.layers.push_back(std::move(lw));
    }
    out.validate();
    return out;
}

TransformerCheckpoint expand_baseline(const TransformerCheckpoint& model,
                                      const ExpansionPlan& plan) {
    model.validate();
    if (plan.strategy == Strategy::lesa || plan.strategy == Strategy::lesa_raw) {
        throw ArgumentError("expand_baseline requires a duplication-strategy plan");
    }
    TransformerCheckpoint out;
    out.config = model.config;
    out.config.n_layers = static_cast<int64_t>(plan.layers.size());
    out.embed = model.embed;
    out.final_norm = model.final_norm;
    out.lm_head = model.lm_head;
    out.layers.reserve(plan.layers.size());
    for (const LayerEntry& e : plan.layers) {
        checkpoint::LayerWeights lw = copy_layer(model.layers[static_cast<size_t>(e.src_a)]);
        if (e.kind == LayerEntry::Kind::copy && plan.strategy == Strategy::pro &&
            plan.params.identity_init) {
            // Zeroed output projections make the copied block an identity
            // map on the residual stream.
            lw.o_proj = Tensor(lw.o_proj.shape());
            lw.down_proj = Tensor(lw.down_proj.shape());
        }
        out.layers.push_back(std::move(lw));
    }
    out.validate();
    return out;
}

namespace {

double mean_column_norm(const Tensor& w) {
    const int64_t d1 = w.dim(0), d2 = w.dim(1);
    double acc = 0.0;
    for (int64_t j = 0; j < d2; ++j) {
        double ss = 0.0;
        for (int64_t i = 0; i < d1; ++i) {
            const double v = w.data()[i * d2 + j];
            ss += v * v;
        }
        acc += std::sqrt(ss);
    }
    return acc / static_cast<double>(d2);
}

}  // namespace

std::vector<NormReportRow> norm_report(const TransformerCheckpoint& expanded,
                                       const ExpansionPlan& plan) {
    if (static_cast<int64_t>(plan.layers.size()) != expanded.config.n_layers) {
        throw ArgumentError("norm_report: plan does not match expanded checkpoint");
    }
    const auto originals = plan.original_layer_indices();
    const auto synths = plan.new_layer_indices();
    if (synths.empty()) {
        throw ArgumentError("norm_report: plan contains no new layers");
    }
    std::vector<NormReportRow> rows;
    for (MatrixFamily f : checkpoint::kAllFamilies) {
        NormReportRow row;
        row.family = f;
        double o = 0.0;
        for (int64_t l : originals) o += mean_column_norm(expanded.family(l, f));
        row.original_mean_norm = o / static_cast<double>(originals.size());
        double s = 0.0;
        for (int64_t l : synths) s += mean_column_norm(expanded.family(l, f));
        row.synth_mean_norm = s / static_cast<double>(synths.size());
        row.ratio = row.synth_mean_norm / std::max(row.original_mean_norm, 1e-12);
        rows.push_back(row);
    }
    return rows;
}

void write_norm_report_csv(const std::vector<NormReportRow>& rows,
                           const std::filesystem::path& path) {
    std::ofstream out(path);
    if (!out) throw IoError("cannot open for writing: " + path.string());
    out << "family,original_mean_norm,synth_mean_norm,ratio\n";
    char buf[160];
    for (const auto& r : rows) {
        std::snprintf(buf, sizeof(buf), "%s,%.17g,%.17g,%.17g\n",
                      std::string(checkpoint::family_name(r.family)).c_str(),
                      r.original_mean_norm, r.synth_mean_norm, r.ratio);
        out << buf;
    }
    if (!out) throw IoError("write failed: " + path.string());
}

void write_provenance(const ExpansionPlan& plan, const std::filesystem::path& path) {
    json j;
    j["strategy"] = std::string(strategy_name(plan.strategy));
    j["n_original"] = plan.n_original;
    json params;
    params["interval_a"] = plan.params.interval_a;
    params["interval_b"] = plan.params.interval_b;
    params["group_size"] = plan.params.group_size;
    params["n_copies"] = plan.params.n_copies;
    params["identity_init"] = plan.params.identity_init;
    params["n_overlap"] = plan.params.n_overlap;
    j["params"] = std::move(params);
    json layers = json::array();
    for (const auto& e : plan.layers) {
        json le;
        le["kind"] = e.kind == LayerEntry::Kind::original ? "original"
                     : e.kind == LayerEntry::Kind::synth  ? "synth"
                                                          : "copy";
        le["src_a"] = e.src_a;
        le["src_b"] = e.src_b;
        layers.push_back(std::move(le));
    }
    j["layers"] = std::move(layers);

    std::ofstream out(path);
    if (!out) throw IoError("cannot open for writing: " + path.string());
    out << j.dump(2) << "\n";
    if (!out) throw IoError("write failed: " + path.string());
}

ExpansionPlan read_provenance(const std::filesystem::path& path) {
    std::ifstream in(path);
    if (!in) throw IoError("cannot open for reading: " + path.string());
    json j = json::parse(in, nullptr, false);
    if (j.is_discarded() || !j.is_object() || !j.contains("strategy") || !j.contains("layers")) {
        throw FormatError("malformed provenance file: " + path.string());
    }
    ExpansionPlan plan;
    plan.strategy = strategy_from_name(j["strategy"].get<std::string>());
    plan.n_original = j.value("n_original", int64_t(0));
    if (j.contains("params")) {
        const auto& p = j["params"];
        plan.params.interval_a = p.value("interval_a", int64_t(0));
        plan.params.interval_b = p.value("interval_b", int64_t(0));
        plan.params.group_size = p.value("group_size", int64_t(0));
        plan.params.n_copies = p.value("n_copies", int64_t(0));
        plan.params.identity_init = p.value("identity_init", false);
        plan.params.n_overlap = p.value("n_overlap", int64_t(0));
    }
    for (const auto& le : j["layers"]) {
        LayerEntry e;
        const std::string kind = le.value("kind", "original");
        e.kind = kind == "original" ? LayerEntry::Kind::original
                 : kind == "synth"  ? LayerEntry::Kind::synth
                                    : LayerEntry::Kind::copy;
        e.src_a = le.value("src_a", int64_t(0));
        e.src_b = le.value("src_b", int64_t(0));
        plan.layers.push_back(e);
    }
    return plan;
}

}  // namespace layerforge::expansion
