// layerforge CLI: end-to-end pipeline for training toy decoder models,
// decomposing their weights, training layer predictors, expanding depth,
// continual pre-training, and comparing expansion strategies.

#include <cstdio>
#include <filesystem>
#include <fstream>
#include <iostream>
#include <map>
#include <string>
#include <vector>

#include <CLI11.hpp>
#include <json.hpp>

#include "layerforge/analysis.hpp"
#include "layerforge/checkpoint.hpp"
#include "layerforge/expansion.hpp"
#include "layerforge/lm.hpp"
#include "layerforge/predictor.hpp"
#include "layerforge/svdspace.hpp"
#include "layerforge/trainpipe.hpp"

namespace {

namespace fs = std::filesystem;
using json = nlohmann::json;
using namespace layerforge;

struct RunConfig {
    uint64_t seed = 0;

    // model
    int64_t n_layers = 12, d_model = 64, n_heads = 4, d_ff = 192;
    int64_t vocab_size = trainpipe::kByteVocab, max_seq_len = 256;
    double rope_theta = 10000.0, model_init_std = 0.02;

    // predictor
    double pred_lr = 1e-3;
    int pred_epochs = 5;
    double lambda = 5e-5;
    int64_t pred_hidden = 256;
    double pred_init_std = 0.02;
    double holdout_frac = 0.2;
    bool use_svd = true;

    // train
    double lr = 5e-5;
    double warmup_ratio = 0.1;
    int64_t batch_size = 4, grad_accum_steps = 4, cutoff_len = 256, total_steps = 100;
    std::string freeze = "new";  // new | none

    // expansion
    std::string strategy = "lesa";
    int64_t interval_a = 0, interval_b = 0;
    int64_t group_size = 0, n_copies = 0, n_overlap = 0;
    bool identity_init = false;

    // eval / analysis
    int64_t eval_count = 500, eval_seq_len = 128;
    double tsne_perplexity = 5.0;
    int64_t tsne_iterations = 1000;

    // compare
    std::vector<std::string> strategies = {"lesa", "solar"};
    std::vector<uint64_t> seeds = {1, 2, 3};

    // paths
    std::string data, ckpt, base, out, predictors_dir, family = "all";
    std::vector<std::string> extra_ckpts;
};

json materialize(const RunConfig& c) {
    json j;
    j["seed"] = c.seed;
    j["model"] = {{"n_layers", c.n_layers},       {"d_model", c.d_model},
                  {"n_heads", c.n_heads},         {"d_ff", c.d_ff},
                  {"vocab_size", c.vocab_size},   {"max_seq_len", c.max_seq_len},
                  {"rope_theta", c.rope_theta},   {"init_std", c.model_init_std}};
    j["predictor"] = {{"lr", c.pred_lr},         {"epochs", c.pred_epochs},
                      {"lambda", c.lambda},      {"hidden", c.pred_hidden},
                      {"init_std", c.pred_init_std}, {"holdout_frac", c.holdout_frac},
                      {"use_svd", c.use_svd}};
    j["train"] = {{"lr", c.lr},
                  {"warmup_ratio", c.warmup_ratio},
                  {"batch_size", c.batch_size},
                  {"grad_accum_steps", c.grad_accum_steps},
                  {"cutoff_len", c.cutoff_len},
                  {"total_steps", c.total_steps},
                  {"freeze", c.freeze}};
    j["expansion"] = {{"strategy", c.strategy},   {"interval_a", c.interval_a},
                      {"interval_b", c.interval_b}, {"group_size", c.group_size},
                      {"n_copies", c.n_copies},   {"n_overlap", c.n_overlap},
                      {"identity_init", c.identity_init}};
    j["eval"] = {{"count", c.eval_count},
                 {"seq_len", c.eval_seq_len},
                 {"tsne_perplexity", c.tsne_perplexity},
                 {"tsne_iterations", c.tsne_iterations}};
    json comp;
    comp["strategies"] = c.strategies;
    comp["seeds"] = c.seeds;
    j["compare"] = std::move(comp);
    j["paths"] = {{"data", c.data},       {"ckpt", c.ckpt},
                  {"base", c.base},       {"out", c.out},
                  {"predictors", c.predictors_dir}, {"family", c.family},
                  {"extra_ckpts", c.extra_ckpts}};
    return j;
}

void reject_unknown(const json& obj, const std::vector<std::string>& known,
                    const std::string& where) {
    for (auto it = obj.begin(); it != obj.end(); ++it) {
        if (std::find(known.begin(), known.end(), it.key()) == known.end()) {
            throw ArgumentError("unknown config key '" + where + it.key() + "'");
        }
    }
}

void apply_config_file(RunConfig& c, const fs::path& path) {
    std::ifstream in(path);
    if (!in) throw IoError("cannot open config file: " + path.string());
    json j = json::parse(in, nullptr, false);
    if (j.is_discarded() || !j.is_object()) {
        throw FormatError("config file is not a JSON object: " + path.string());
    }
    reject_unknown(j, {"seed", "model", "predictor", "train", "expansion", "eval", "compare",
                       "paths"},
                   "");
    if (j.contains("seed")) c.seed = j["seed"].get<uint64_t>();
    if (j.contains("model")) {
        const auto& m = j["model"];
        reject_unknown(m, {"n_layers", "d_model", "n_heads", "d_ff", "vocab_size", "max_seq_len",
                           "rope_theta", "init_std"},
                       "model.");
        if (m.contains("n_layers")) c.n_layers = m["n_layers"].get<int64_t>();
        if (m.contains("d_model")) c.d_model = m["d_model"].get<int64_t>();
        if (m.contains("n_heads")) c.n_heads = m["n_heads"].get<int64_t>();
        if (m.contains("d_ff")) c.d_ff = m["d_ff"].get<int64_t>();
        if (m.contains("vocab_size")) c.vocab_size = m["vocab_size"].get<int64_t>();
        if (m.contains("max_seq_len")) c.max_seq_len = m["max_seq_len"].get<int64_t>();
        if (m.contains("rope_theta")) c.rope_theta = m["rope_theta"].get<double>();
        if (m.contains("init_std")) c.model_init_std = m["init_std"].get<double>();
    }
    if (j.contains("predictor")) {
        const auto& p = j["predictor"];
        reject_unknown(p, {"lr", "epochs", "lambda", "hidden", "init_std", "holdout_frac",
                           "use_svd"},
                       "predictor.");
        if (p.contains("lr")) c.pred_lr = p["lr"].get<double>();
        if (p.contains("epochs")) c.pred_epochs = p["epochs"].get<int>();
        if (p.contains("lambda")) c.lambda = p["lambda"].get<double>();
        if (p.contains("hidden")) c.pred_hidden = p["hidden"].get<int64_t>();
        if (p.contains("init_std")) c.pred_init_std = p["init_std"].get<double>();
        if (p.contains("holdout_frac")) c.holdout_frac = p["holdout_frac"].get<double>();
        if (p.contains("use_svd")) c.use_svd = p["use_svd"].get<bool>();
    }
    if (j.contains("train")) {
        const auto& t = j["train"];
        reject_unknown(t, {"lr", "warmup_ratio", "batch_size", "grad_accum_steps", "cutoff_len",
                           "total_steps", "freeze"},
                       "train.");
        if (t.contains("lr")) c.lr = t["lr"].get<double>();
        if (t.contains("warmup_ratio")) c.warmup_ratio = t["warmup_ratio"].get<double>();
        if (t.contains("batch_size")) c.batch_size = t["batch_size"].get<int64_t>();
        if (t.contains("grad_accum_steps")) c.grad_accum_steps = t["grad_accum_steps"].get<int64_t>();
        if (t.contains("cutoff_len")) c.cutoff_len = t["cutoff_len"].get<int64_t>();
        if (t.contains("total_steps")) c.total_steps = t["total_steps"].get<int64_t>();
        if (t.contains("freeze")) c.freeze = t["freeze"].get<std::string>();
    }
    if (j.contains("expansion")) {
        const auto& e = j["expansion"];
        reject_unknown(e, {"strategy", "interval_a", "interval_b", "group_size", "n_copies",
                           "n_overlap", "identity_init"},
                       "expansion.");
        if (e.contains("strategy")) c.strategy = e["strategy"].get<std::string>();
        if (e.contains("interval_a")) c.interval_a = e["interval_a"].get<int64_t>();
        if (e.contains("interval_b")) c.interval_b = e["interval_b"].get<int64_t>();
        if (e.contains("group_size")) c.group_size = e["group_size"].get<int64_t>();
        if (e.contains("n_copies")) c.n_copies = e["n_copies"].get<int64_t>();
        if (e.contains("n_overlap")) c.n_overlap = e["n_overlap"].get<int64_t>();
        if (e.contains("identity_init")) c.identity_init = e["identity_init"].get<bool>();
    }
    if (j.contains("eval")) {
        const auto& e = j["eval"];
        reject_unknown(e, {"count", "seq_len", "tsne_perplexity", "tsne_iterations"}, "eval.");
        if (e.contains("count")) c.eval_count = e["count"].get<int64_t>();
        if (e.contains("seq_len")) c.eval_seq_len = e["seq_len"].get<int64_t>();
        if (e.contains("tsne_perplexity")) c.tsne_perplexity = e["tsne_perplexity"].get<double>();
        if (e.contains("tsne_iterations")) c.tsne_iterations = e["tsne_iterations"].get<int64_t>();
    }
    if (j.contains("compare")) {
        const auto& e = j["compare"];
        reject_unknown(e, {"strategies", "seeds"}, "compare.");
        if (e.contains("strategies")) c.strategies = e["strategies"].get<std::vector<std::string>>();
        if (e.contains("seeds")) c.seeds = e["seeds"].get<std::vector<uint64_t>>();
    }
    if (j.contains("paths")) {
        const auto& p = j["paths"];
        reject_unknown(p, {"data", "ckpt", "base", "out", "predictors", "family", "extra_ckpts"},
                       "paths.");
        if (p.contains("data")) c.data = p["data"].get<std::string>();
        if (p.contains("ckpt")) c.ckpt = p["ckpt"].get<std::string>();
        if (p.contains("base")) c.base = p["base"].get<std::string>();
        if (p.contains("out")) c.out = p["out"].get<std::string>();
        if (p.contains("predictors")) c.predictors_dir = p["predictors"].get<std::string>();
        if (p.contains("family")) c.family = p["family"].get<std::string>();
        if (p.contains("extra_ckpts")) c.extra_ckpts = p["extra_ckpts"].get<std::vector<std::string>>();
    }
}

// File outputs get a sibling "<out>.runconfig.json"; directory outputs get
// "<dir>/run_config.json".
void write_runconfig(const RunConfig& c, const fs::path& out, bool out_is_dir) {
    fs::path target;
    if (out_is_dir) {
        fs::create_directories(out);
        target = out / "run_config.json";
    } else {
        if (out.has_parent_path()) fs::create_directories(out.parent_path());
        target = out;
        target += ".runconfig.json";
    }
    std::ofstream f(target);
    if (!f) throw IoError("cannot write run config: " + target.string());
    f << materialize(c).dump(2) << "\n";
}

checkpoint::ModelConfig model_config_of(const RunConfig& c) {
    checkpoint::ModelConfig m;
    m.n_layers = c.n_layers;
    m.d_model = c.d_model;
    m.n_heads = c.n_heads;
    m.d_ff = c.d_ff;
    m.vocab_size = c.vocab_size;
    m.max_seq_len = c.max_seq_len;
    m.rope_theta = static_cast<float>(c.rope_theta);
    return m;
}

trainpipe::TrainConfig train_config_of(const RunConfig& c) {
    trainpipe::TrainConfig t;
    t.lr = c.lr;
    t.warmup_ratio = c.warmup_ratio;
    t.batch_size = c.batch_size;
    t.grad_accum_steps = c.grad_accum_steps;
    t.cutoff_len = c.cutoff_len;
    t.total_steps = c.total_steps;
    t.seed = c.seed;
    if (c.freeze == "new") {
        t.freeze_mode = trainpipe::TrainConfig::FreezeMode::new_layers_only;
    } else if (c.freeze == "none") {
        t.freeze_mode = trainpipe::TrainConfig::FreezeMode::none;
    } else {
        throw ArgumentError("freeze must be 'new' or 'none', got '" + c.freeze + "'");
    }
    return t;
}

predictor::PredictorTrainConfig predictor_config_of(const RunConfig& c) {
    predictor::PredictorTrainConfig p;
    p.lr = c.pred_lr;
    p.epochs = c.pred_epochs;
    p.lambda = c.lambda;
    p.seed = c.seed;
    p.init_std = c.pred_init_std;
    return p;
}

std::pair<int64_t, int64_t> parse_interval(const std::string& s) {
    const auto colon = s.find(':');
    if (colon == std::string::npos) {
        throw ArgumentError("interval must be 'a:b', got '" + s + "'");
    }
    try {
        return {std::stoll(s.substr(0, colon)), std::stoll(s.substr(colon + 1))};
    } catch (const std::exception&) {
        throw ArgumentError("interval must be 'a:b' with integers, got '" + s + "'");
    }
}

std::vector<checkpoint::MatrixFamily> families_of(const std::string& name) {
    if (name == "all") {
        return {checkpoint::kAllFamilies.begin(), checkpoint::kAllFamilies.end()};
    }
    return {checkpoint::family_from_name(name)};
}

// ---------------------------------------------------------------- commands

int cmd_train_toy(RunConfig& c) {
    trainpipe::Corpus corpus = trainpipe::ingest(c.data, c.eval_count, c.eval_seq_len);

    Rng rng(c.seed);
    auto model = checkpoint::random_checkpoint(model_config_of(c), rng, c.model_init_std);

    trainpipe::TrainConfig tcfg = train_config_of(c);
    tcfg.freeze_mode = trainpipe::TrainConfig::FreezeMode::none;
    auto result = trainpipe::pretrain(model, corpus, tcfg, {});

    checkpoint::save_checkpoint(result.model, c.out);
    trainpipe::write_losscurve_csv(result.curve, c.out + ".losscurve.csv");
    write_runconfig(c, c.out, false);
    const double ppl = c.eval_count > 0 ? lm::perplexity(result.model, corpus.eval_sequences) : 0.0;
    std::printf("trained %lld steps, final raw loss %.4f, eval ppl %.4f\n",
                static_cast<long long>(tcfg.total_steps), result.curve.points.back().raw_loss,
                ppl);
    return 0;
}

int cmd_analyze(RunConfig& c) {
    auto model = checkpoint::load_checkpoint(c.ckpt);
    fs::create_directories(c.out);

    for (auto family : families_of(c.family)) {
        const std::string fname{checkpoint::family_name(family)};
        const fs::path dir = fs::path(c.out) / fname;
        fs::create_directories(dir);

        auto space = svdspace::decompose_family(model, family);
        auto sigs = analysis::layer_signatures(space);
        {
            std::ofstream f(dir / "signatures.csv");
            if (!f) throw IoError("cannot write signatures.csv");
            f << "layer";
            for (int64_t j = 0; j < space.d2; ++j) f << ",v" << j;
            f << "\n";
            for (const auto& s : sigs) {
                f << s.layer_index;
                char buf[32];
                for (float v : s.vec) {
                    std::snprintf(buf, sizeof(buf), ",%.8g", static_cast<double>(v));
                    f << buf;
                }
                f << "\n";
            }
        }

        auto rows = analysis::signature_rows(sigs);
        std::vector<int64_t> ids;
        for (const auto& s : sigs) ids.push_back(s.layer_index);

        auto pca = analysis::pca2d(rows, ids);
        analysis::export_projection(pca, dir / "pca.csv", dir / "pca.svg");

        double perp = c.tsne_perplexity;
        const double max_perp = (static_cast<double>(rows.size()) - 1.0) / 3.0;
        if (perp >= max_perp) {
            perp = max_perp - 0.01;
            if (perp >= 1.0) {
                std::fprintf(stderr, "note: clamping t-SNE perplexity to %.2f for %zu layers\n",
                             perp, rows.size());
            }
        }
        if (perp >= 1.0) {
            auto tsne = analysis::tsne2d(rows, perp, c.tsne_iterations, c.seed, ids);
            analysis::export_projection(tsne, dir / "tsne.csv", dir / "tsne.svg");
        } else {
            std::fprintf(stderr, "note: skipping t-SNE, %zu layers admit no feasible perplexity\n",
                         rows.size());
        }

        svdspace::dump_space(space, dir / "space.lfck");
    }
    write_runconfig(c, c.out, true);
    return 0;
}

int cmd_train_predictor(RunConfig& c) {
    std::vector<checkpoint::TransformerCheckpoint> models;
    models.push_back(checkpoint::load_checkpoint(c.ckpt));
    for (const auto& extra : c.extra_ckpts) {
        models.push_back(checkpoint::load_checkpoint(extra));
    }
    fs::create_directories(c.out);

    std::ofstream summary(fs::path(c.out) / "eval_summary.csv");
    if (!summary) throw IoError("cannot write eval_summary.csv");
    summary << "family,split,L,L1,L2\n";

    predictor::PredictorTrainConfig pcfg = predictor_config_of(c);
    for (auto family : checkpoint::kAllFamilies) {
        predictor::TripletDataset pooled;
        for (size_t i = 0; i < models.size(); ++i) {
            predictor::TripletDataset ds;
            if (c.use_svd) {
                auto space = svdspace::decompose_family(models[i], family);
                ds = predictor::build_triplets(space, static_cast<int64_t>(i));
            } else {
                ds = predictor::build_raw_triplets(models[i], family, static_cast<int64_t>(i));
            }
            predictor::append_dataset(pooled, ds);
        }
        auto [train_ds, holdout_ds] = predictor::split_dataset(pooled, c.holdout_frac, c.seed);

        auto trained = predictor::train_predictor(family, train_ds, pcfg, c.pred_hidden);
        const std::string fname{checkpoint::family_name(family)};
        predictor::save_predictor(trained.net, fs::path(c.out) / ("predictor_" + fname + ".lfck"));
        predictor::write_loss_history_csv(trained.history,
                                          fs::path(c.out) / ("losshistory_" + fname + ".csv"));

        auto report = [&](const char* split, const predictor::LossParts& parts) {
            char buf[200];
            std::snprintf(buf, sizeof(buf), "%s,%s,%.17g,%.17g,%.17g\n", fname.c_str(), split,
                          parts.total, parts.mse, parts.norm);
            summary << buf;
        };
        report("train", predictor::evaluate_predictor(trained.net, train_ds, c.lambda));
        if (!holdout_ds.samples.empty()) {
            report("holdout", predictor::evaluate_predictor(trained.net, holdout_ds, c.lambda));
        }
    }
    write_runconfig(c, c.out, true);
    return 0;
}

int cmd_expand(RunConfig& c) {
    auto model = checkpoint::load_checkpoint(c.ckpt);
    const auto strategy = expansion::strategy_from_name(c.strategy);

    expansion::ExpansionParams params;
    params.interval_a = c.interval_a;
    params.interval_b = c.interval_b;
    if ((strategy == expansion::Strategy::lesa || strategy == expansion::Strategy::lesa_raw) &&
        params.interval_a == 0 && params.interval_b == 0) {
        std::tie(params.interval_a, params.interval_b) =
            trainpipe::default_lesa_interval(model.config.n_layers);
    }
    params.group_size = c.group_size;
    params.n_copies = c.n_copies;
    params.identity_init = c.identity_init;
    params.n_overlap = c.n_overlap;

    auto plan = expansion::plan_expansion(model.config, strategy, params);
    checkpoint::TransformerCheckpoint expanded;
    if (strategy == expansion::Strategy::lesa || strategy == expansion::Strategy::lesa_raw) {
        if (c.predictors_dir.empty()) {
            throw ArgumentError("expand with lesa/lesa_raw needs --predictors");
        }
        std::map<checkpoint::MatrixFamily, predictor::PredictorNet> nets;
        for (auto family : checkpoint::kAllFamilies) {
            const fs::path p = fs::path(c.predictors_dir) /
                               ("predictor_" + std::string(checkpoint::family_name(family)) +
                                ".lfck");
            nets.emplace(family, predictor::load_predictor(p));
        }
        expanded = expansion::expand_lesa(model, nets, plan,
                                          strategy == expansion::Strategy::lesa);
    } else {
        expanded = expansion::expand_baseline(model, plan);
    }

    checkpoint::save_checkpoint(expanded, c.out);
    expansion::write_provenance(plan, c.out + ".provenance.json");
    write_runconfig(c, c.out, false);
    std::printf("expanded %lld -> %lld layers (%s)\n",
                static_cast<long long>(model.config.n_layers),
                static_cast<long long>(expanded.config.n_layers), c.strategy.c_str());
    return 0;
}

int cmd_pretrain(RunConfig& c) {
    auto model = checkpoint::load_checkpoint(c.ckpt);
    trainpipe::Corpus corpus = trainpipe::ingest(c.data, c.eval_count, c.eval_seq_len);
    trainpipe::TrainConfig tcfg = train_config_of(c);

    std::vector<int64_t> frozen;
    if (tcfg.freeze_mode == trainpipe::TrainConfig::FreezeMode::new_layers_only) {
        const fs::path prov = c.ckpt + ".provenance.json";
        if (!fs::exists(prov)) {
            throw ArgumentError("--freeze new needs the provenance sidecar " + prov.string());
        }
        frozen = expansion::read_provenance(prov).original_layer_indices();
    }
    auto result = trainpipe::pretrain(model, corpus, tcfg, frozen);
    for (const auto& w : result.warnings) std::fprintf(stderr, "warning: %s\n", w.c_str());

    fs::create_directories(c.out);
    checkpoint::save_checkpoint(result.model, fs::path(c.out) / "model.lfck");
    trainpipe::write_losscurve_csv(result.curve, fs::path(c.out) / "losscurve.csv");
    write_runconfig(c, c.out, true);
    const double ppl = c.eval_count > 0 ? lm::perplexity(result.model, corpus.eval_sequences) : 0.0;
    std::printf("pretrained %lld steps, final raw loss %.4f, eval ppl %.4f\n",
                static_cast<long long>(tcfg.total_steps), result.curve.points.back().raw_loss,
                ppl);
    return 0;
}

int cmd_eval_ppl(RunConfig& c) {
    auto model = checkpoint::load_checkpoint(c.ckpt);
    trainpipe::Corpus corpus = trainpipe::ingest(c.data, c.eval_count, c.eval_seq_len);
    const double ppl = lm::perplexity(model, corpus.eval_sequences);
    std::printf("ppl=%.10g\n", ppl);
    if (!c.out.empty()) {
        fs::create_directories(c.out);
        std::ofstream f(fs::path(c.out) / "ppl.json");
        f << "{\"ppl\": " << ppl << "}\n";
        write_runconfig(c, c.out, true);
    }
    return 0;
}

int cmd_compare(RunConfig& c) {
    auto base = checkpoint::load_checkpoint(c.base);
    trainpipe::Corpus corpus = trainpipe::ingest(c.data, c.eval_count, c.eval_seq_len);

    std::vector<expansion::Strategy> strategies;
    for (const auto& s : c.strategies) strategies.push_back(expansion::strategy_from_name(s));

    trainpipe::CompareOptions options;
    options.interval_a = c.interval_a;
    options.interval_b = c.interval_b;
    options.solar_overlap = c.n_overlap;
    options.stack_group = c.group_size;
    options.pro_copies = c.n_copies;
    options.pro_identity_init = c.identity_init;
    options.predictor_cfg = predictor_config_of(c);
    options.predictor_hidden = c.pred_hidden;

    auto report = trainpipe::compare_strategies(base, corpus, strategies, c.seeds,
                                                train_config_of(c), options);
    trainpipe::write_report(report, c.out);
    write_runconfig(c, c.out, true);
    std::printf("wrote %zu cells to %s\n", report.cells.size(), c.out.c_str());
    return 0;
}

int run_cli(int argc, char** argv) {
    RunConfig c;

    // --config applies first so explicit flags override it.
    for (int i = 1; i + 1 < argc; ++i) {
        if (std::string(argv[i]) == "--config") {
            apply_config_file(c, argv[i + 1]);
        }
    }

    CLI::App app{"layerforge: learnable transformer depth scaling-up toolkit"};
    app.require_subcommand(1);
    std::string config_path, interval;

    auto add_common = [&](CLI::App* sub) {
        sub->add_option("--config", config_path, "JSON run config (flags override it)");
        sub->add_option("--seed", c.seed, "RNG seed");
    };

    CLI::App* train_toy = app.add_subcommand("train-toy", "from-scratch toy pre-training");
    add_common(train_toy);
    train_toy->add_option("--data", c.data, "text directory")->required();
    train_toy->add_option("--out", c.out, "output checkpoint path")->required();
    train_toy->add_option("--layers", c.n_layers);
    train_toy->add_option("--d-model", c.d_model);
    train_toy->add_option("--n-heads", c.n_heads);
    train_toy->add_option("--d-ff", c.d_ff);
    train_toy->add_option("--max-seq-len", c.max_seq_len);
    train_toy->add_option("--steps", c.total_steps);
    train_toy->add_option("--batch-size", c.batch_size);
    train_toy->add_option("--grad-accum", c.grad_accum_steps);
    train_toy->add_option("--cutoff-len", c.cutoff_len);
    train_toy->add_option("--warmup-ratio", c.warmup_ratio);
    train_toy->add_option("--eval-count", c.eval_count);
    train_toy->add_option("--eval-seq-len", c.eval_seq_len);
    double toy_lr = 3e-4;  // from-scratch default
    train_toy->add_option("--lr", toy_lr);

    CLI::App* analyze = app.add_subcommand("analyze", "SVD patterns, signatures, 2-D projections");
    add_common(analyze);
    analyze->add_option("--ckpt", c.ckpt)->required();
    analyze->add_option("--family", c.family, "family name or 'all'");
    analyze->add_option("--out", c.out)->required();
    analyze->add_option("--tsne-perplexity", c.tsne_perplexity);
    analyze->add_option("--tsne-iterations", c.tsne_iterations);

    CLI::App* train_pred = app.add_subcommand("train-predictor", "train per-family G_W networks");
    add_common(train_pred);
    train_pred->add_option("--ckpt", c.ckpt)->required();
    train_pred->add_option("--extra-ckpts", c.extra_ckpts, "additional checkpoints to pool");
    train_pred->add_option("--out", c.out)->required();
    train_pred->add_option("--lambda", c.lambda);
    train_pred->add_option("--epochs", c.pred_epochs);
    train_pred->add_option("--lr", c.pred_lr);
    train_pred->add_option("--hidden", c.pred_hidden);
    train_pred->add_option("--init-std", c.pred_init_std);
    train_pred->add_option("--holdout-frac", c.holdout_frac);
    train_pred->add_flag("--no-svd", "train on raw weight columns");

    CLI::App* expand = app.add_subcommand("expand", "build a deeper checkpoint");
    add_common(expand);
    expand->add_option("--ckpt", c.ckpt)->required();
    expand->add_option("--strategy", c.strategy,
                       "lesa|lesa_raw|interpolation|stack|pro|solar");
    expand->add_option("--interval", interval, "a:b original 1-based layer interval");
    expand->add_option("--predictors", c.predictors_dir, "directory from train-predictor");
    expand->add_flag("--identity-init", c.identity_init, "pro: zero copied output projections");
    expand->add_option("--group-size", c.group_size, "stack");
    expand->add_option("--n-copies", c.n_copies, "pro");
    expand->add_option("--n-overlap", c.n_overlap, "solar");
    expand->add_option("--out", c.out)->required();

    CLI::App* pretrain = app.add_subcommand("pretrain", "continual pre-training");
    add_common(pretrain);
    pretrain->add_option("--ckpt", c.ckpt)->required();
    pretrain->add_option("--data", c.data)->required();
    pretrain->add_option("--freeze", c.freeze, "new|none");
    pretrain->add_option("--steps", c.total_steps);
    pretrain->add_option("--lr", c.lr);
    pretrain->add_option("--batch-size", c.batch_size);
    pretrain->add_option("--grad-accum", c.grad_accum_steps);
    pretrain->add_option("--cutoff-len", c.cutoff_len);
    pretrain->add_option("--warmup-ratio", c.warmup_ratio);
    pretrain->add_option("--eval-count", c.eval_count);
    pretrain->add_option("--eval-seq-len", c.eval_seq_len);
    pretrain->add_option("--out", c.out)->required();

    CLI::App* eval_ppl = app.add_subcommand("eval-ppl", "perplexity on the eval split");
    add_common(eval_ppl);
    eval_ppl->add_option("--ckpt", c.ckpt)->required();
    eval_ppl->add_option("--data", c.data)->required();
    eval_ppl->add_option("--eval-count", c.eval_count);
    eval_ppl->add_option("--eval-seq-len", c.eval_seq_len);
    eval_ppl->add_option("--out", c.out, "optional output directory");

    CLI::App* compare = app.add_subcommand("compare", "strategy comparison grid");
    add_common(compare);
    compare->add_option("--base", c.base)->required();
    compare->add_option("--data", c.data)->required();
    compare->add_option("--strategies", c.strategies);
    compare->add_option("--seeds", c.seeds);
    compare->add_option("--steps", c.total_steps);
    compare->add_option("--lr", c.lr);
    compare->add_option("--batch-size", c.batch_size);
    compare->add_option("--grad-accum", c.grad_accum_steps);
    compare->add_option("--cutoff-len", c.cutoff_len);
    compare->add_option("--warmup-ratio", c.warmup_ratio);
    compare->add_option("--interval", interval);
    compare->add_option("--n-overlap", c.n_overlap);
    compare->add_option("--eval-count", c.eval_count);
    compare->add_option("--eval-seq-len", c.eval_seq_len);
    compare->add_option("--pred-epochs", c.pred_epochs);
    compare->add_option("--pred-lr", c.pred_lr);
    compare->add_option("--lambda", c.lambda);
    compare->add_option("--hidden", c.pred_hidden);
    compare->add_option("--out", c.out)->required();

    try {
        app.parse(argc, argv);
    } catch (const CLI::CallForHelp& e) {
        return app.exit(e);
    } catch (const CLI::ParseError& e) {
        std::cerr << "ERROR 2: " << e.what() << "\n";
        return 2;
    }

    if (!interval.empty()) std::tie(c.interval_a, c.interval_b) = parse_interval(interval);
    if (train_pred->count("--no-svd") > 0) c.use_svd = false;

    if (train_toy->parsed()) {
        if (train_toy->count("--lr") || c.lr == 5e-5) c.lr = toy_lr;
        c.freeze = "none";
        return cmd_train_toy(c);
    }
    if (analyze->parsed()) return cmd_analyze(c);
    if (train_pred->parsed()) return cmd_train_predictor(c);
    if (expand->parsed()) return cmd_expand(c);
    if (pretrain->parsed()) return cmd_pretrain(c);
    if (eval_ppl->parsed()) return cmd_eval_ppl(c);
    if (compare->parsed()) return cmd_compare(c);
    return 2;
}

}  // namespace

int main(int argc, char** argv) {
    try {
        return run_cli(argc, argv);
    } catch (const layerforge::Error& e) {
        std::cerr << "ERROR " << e.exit_code() << ": " << e.what() << "\n";
        return e.exit_code();
    } catch (const std::exception& e) {
        std::cerr << "ERROR 2: " << e.what() << "\n";
        return 2;
    }
}
