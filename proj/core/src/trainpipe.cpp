#include "layerforge/trainpipe.hpp"

#include <algorithm>
#include <chrono>
#include <cmath>
#include <cstring>
#include <fstream>
#include <numbers>
#include <set>

#include "layerforge/lm.hpp"
#include "layerforge/numkernel.hpp"
#include "layerforge/rng.hpp"
#include "layerforge/svdspace.hpp"

namespace layerforge::trainpipe {

std::vector<int32_t> tokenize(std::span<const uint8_t> bytes) {
    std::vector<int32_t> out(bytes.size());
    for (size_t i = 0; i < bytes.size(); ++i) out[i] = static_cast<int32_t>(bytes[i]);
    return out;
}

std::vector<uint8_t> detokenize(std::span<const int32_t> tokens) {
    std::vector<uint8_t> out;
    out.reserve(tokens.size());
    for (int32_t t : tokens) {
        if (t < 0 || t >= kByteVocab) {
            throw ArgumentError("detokenize: token " + std::to_string(t) + " out of range");
        }
        if (t < 256) out.push_back(static_cast<uint8_t>(t));
    }
    return out;
}

TrainConfig TrainConfig::from_scratch_defaults() {
    TrainConfig cfg;
    cfg.lr = 3e-4;
    cfg.freeze_mode = FreezeMode::none;
    return cfg;
}

void TrainConfig::validate() const {
    if (warmup_ratio < 0.0 || warmup_ratio > 0.5) {
        throw ArgumentError("warmup_ratio must be in [0, 0.5]");
    }
    if (total_steps < 1) throw ArgumentError("total_steps must be >= 1");
    if (batch_size < 1) throw ArgumentError("batch_size must be >= 1");
    if (grad_accum_steps < 1) throw ArgumentError("grad_accum_steps must be >= 1");
    if (cutoff_len < 2) throw ArgumentError("cutoff_len must be >= 2");
}

double lr_at(const TrainConfig& cfg, int64_t step) {
    const double w = cfg.warmup_ratio * static_cast<double>(cfg.total_steps);
    const double t = static_cast<double>(step);
    if (w >= 1e-12 && t <= w) {
        return cfg.lr * t / w;
    }
    const double total = static_cast<double>(cfg.total_steps);
    if (total - w < 1e-12) return 0.0;
    return cfg.lr * 0.5 * (1.0 + std::cos(std::numbers::pi * (t - w) / (total - w)));
}

Corpus ingest(const std::filesystem::path& path, int64_t eval_count, int64_t eval_seq_len) {
    if (eval_count < 0 || eval_seq_len < 2) {
        throw ArgumentError("ingest: eval_count must be >= 0 and eval_seq_len >= 2");
    }
    std::vector<std::filesystem::path> files;
    std::error_code ec;
    if (std::filesystem::is_directory(path, ec)) {
        for (const auto& entry : std::filesystem::recursive_directory_iterator(path)) {
            if (entry.is_regular_file()) files.push_back(entry.path());
        }
    } else if (std::filesystem::is_regular_file(path, ec)) {
        files.push_back(path);
    }
    if (files.empty()) {
        throw IoError("ingest: no readable files under " + path.string());
    }
    std::sort(files.begin(), files.end(),
              [](const auto& a, const auto& b) { return a.string() < b.string(); });

    std::vector<uint8_t> bytes;
    for (const auto& f : files) {
        std::ifstream in(f, std::ios::binary);
        if (!in) throw IoError("ingest: cannot open " + f.string());
        in.seekg(0, std::ios::end);
        const std::streamoff len = in.tellg();
        in.seekg(0);
        const size_t old = bytes.size();
        bytes.resize(old + static_cast<size_t>(len));
        in.read(reinterpret_cast<char*>(bytes.data() + old), len);
        if (!in) throw IoError("ingest: read failed for " + f.string());
    }

    // Eval split carved from the tail: eval_count windows of
    // (eval_seq_len - 1) bytes each, BOS-prefixed.
    const int64_t eval_bytes = eval_count * (eval_seq_len - 1);
    if (eval_bytes > static_cast<int64_t>(bytes.size())) {
        throw ArgumentError("ingest: corpus has " + std::to_string(bytes.size()) +
                            " bytes, eval split needs " + std::to_string(eval_bytes));
    }
    Corpus corpus;
    const size_t train_len = bytes.size() - static_cast<size_t>(eval_bytes);
    corpus.train_bytes.assign(bytes.begin(), bytes.begin() + static_cast<int64_t>(train_len));
    for (int64_t i = 0; i < eval_count; ++i) {
        const size_t off = train_len + static_cast<size_t>(i * (eval_seq_len - 1));
        std::vector<int32_t> seq;
        seq.reserve(static_cast<size_t>(eval_seq_len));
        seq.push_back(kBosToken);
        for (int64_t j = 0; j + 1 < eval_seq_len; ++j) {
            seq.push_back(static_cast<int32_t>(bytes[off + static_cast<size_t>(j)]));
        }
        corpus.eval_sequences.push_back(std::move(seq));
    }
    return corpus;
}

void write_losscurve_csv(const LossCurve& curve, const std::filesystem::path& path) {
    std::ofstream out(path);
    if (!out) throw IoError("cannot open for writing: " + path.string());
    out << "step,raw_loss,smoothed_loss,lr\n";
    char buf[160];
    for (const auto& p : curve.points) {
        std::snprintf(buf, sizeof(buf), "%lld,%.17g,%.17g,%.17g\n",
                      static_cast<long long>(p.step), p.raw_loss, p.smoothed_loss, p.lr);
        out << buf;
    }
    if (!out) throw IoError("write failed: " + path.string());
}

std::string config_hash(const TrainConfig& cfg) {
    char buf[320];
    std::snprintf(buf, sizeof(buf), "%.17g|%.17g|%lld|%lld|%lld|%lld|%llu|%d|%.17g|%.17g|%.17g|%.17g",
                  cfg.lr, cfg.warmup_ratio, static_cast<long long>(cfg.batch_size),
                  static_cast<long long>(cfg.grad_accum_steps),
                  static_cast<long long>(cfg.cutoff_len), static_cast<long long>(cfg.total_steps),
                  static_cast<unsigned long long>(cfg.seed), static_cast<int>(cfg.freeze_mode),
                  cfg.beta1, cfg.beta2, cfg.eps, cfg.weight_decay);
    uint64_t h = 0xcbf29ce484222325ULL;
    for (const char* p = buf; *p; ++p) {
        h ^= static_cast<uint64_t>(static_cast<unsigned char>(*p));
        h *= 0x100000001b3ULL;
    }
    char hex[17];
    std::snprintf(hex, sizeof(hex), "%016llx", static_cast<unsigned long long>(h));
    return hex;
}

namespace {

struct AdamBuffers {
    std::vector<float> m, v;
};

void fill_batch(lm::TokenBatch& batch, const std::vector<uint8_t>& stream, Rng& rng,
                int64_t batch_size, int64_t cutoff_len) {
    const int64_t window = cutoff_len - 1;  // bytes per sequence after BOS
    const int64_t max_offset = static_cast<int64_t>(stream.size()) - window;
    batch.batch = batch_size;
    batch.seq = cutoff_len;
    batch.lengths.clear();
    batch.tokens.resize(static_cast<size_t>(batch_size * cutoff_len));
    for (int64_t b = 0; b < batch_size; ++b) {
        const int64_t off = static_cast<int64_t>(rng.bounded(static_cast<uint64_t>(max_offset + 1)));
        int32_t* row = batch.tokens.data() + b * cutoff_len;
        row[0] = kBosToken;
        for (int64_t j = 0; j < window; ++j) {
            row[1 + j] = static_cast<int32_t>(stream[static_cast<size_t>(off + j)]);
        }
    }
}

}  // namespace

PretrainResult pretrain(const TransformerCheckpoint& model, const Corpus& corpus,
                        const TrainConfig& cfg, const std::vector<int64_t>& frozen_layers) {
    cfg.validate();
    model.validate();
    if (model.config.vocab_size < kByteVocab) {
        throw ValidationError("model vocab_size must cover the byte tokenizer (>= " +
                              std::to_string(kByteVocab) + ")");
    }
    if (model.config.max_seq_len < cfg.cutoff_len) {
        throw ValidationError("cutoff_len exceeds the model's max_seq_len");
    }
    std::set<int64_t> frozen(frozen_layers.begin(), frozen_layers.end());
    for (int64_t l : frozen) {
        if (l < 0 || l >= model.config.n_layers) {
            throw ArgumentError("frozen layer index " + std::to_string(l) + " out of range");
        }
    }
    const int64_t window = cfg.cutoff_len - 1;
    if (static_cast<int64_t>(corpus.train_bytes.size()) < window) {
        throw ArgumentError("training stream shorter than one cutoff_len window");
    }

    PretrainResult result;
    result.model = model;
    result.curve.seed = cfg.seed;
    result.curve.config_hash = config_hash(cfg);

    auto params = lm::ModelParams<float>::from_checkpoint(model);
    auto grads = lm::ModelParams<float>::zeros_like(params);

    const bool freeze_aux = cfg.freeze_mode == TrainConfig::FreezeMode::new_layers_only;
    struct Slot {
        std::vector<float>* param;
        std::vector<float>* grad;
        AdamBuffers adam;
    };
    std::vector<Slot> trainable;
    {
        std::vector<std::pair<std::string, std::vector<float>*>> gptrs;
        grads.for_each_param([&](const std::string& name, std::vector<float>& vec, int64_t) {
            gptrs.emplace_back(name, &vec);
        });
        size_t gi = 0;
        params.for_each_param([&](const std::string&, std::vector<float>& vec, int64_t layer) {
            std::vector<float>* gp = gptrs[gi++].second;
            const bool aux = layer < 0;
            const bool fr = aux ? freeze_aux : frozen.count(layer) > 0;
            if (!fr) {
                trainable.push_back(
                    Slot{&vec, gp,
                         AdamBuffers{std::vector<float>(vec.size(), 0.0f),
                                     std::vector<float>(vec.size(), 0.0f)}});
            }
        });
    }
    if (trainable.empty()) {
        const std::string w = "freeze mask covers every parameter; training is a no-op";
        result.warnings.push_back(w);
    }

    Rng rng(cfg.seed);
    lm::TokenBatch batch;
    lm::ForwardCache<float> cache;
    numkernel::AdamWConfig adam{cfg.lr, cfg.beta1, cfg.beta2, cfg.eps, cfg.weight_decay};
    double smoothed = 0.0;

    for (int64_t step = 1; step <= cfg.total_steps; ++step) {
        grads.for_each_param([&](const std::string&, std::vector<float>& g, int64_t) {
            std::fill(g.begin(), g.end(), 0.0f);
        });
        double loss_sum = 0.0;
        for (int64_t micro = 0; micro < cfg.grad_accum_steps; ++micro) {
            fill_batch(batch, corpus.train_bytes, rng, cfg.batch_size, cfg.cutoff_len);
            loss_sum += lm::loss_and_backward(params, batch, cache, grads);
        }
        const double raw = loss_sum / static_cast<double>(cfg.grad_accum_steps);
        if (!std::isfinite(raw)) {
            throw NumericError("pretrain: non-finite loss at step " + std::to_string(step));
        }
        const float inv_accum = 1.0f / static_cast<float>(cfg.grad_accum_steps);
        adam.lr = lr_at(cfg, step);
        for (auto& slot : trainable) {
            std::vector<float>& g = *slot.grad;
            for (float& x : g) x *= inv_accum;
            numkernel::adamw_step_span(*slot.param, g, slot.adam.m, slot.adam.v, step - 1, adam);
        }
        smoothed = step == 1 ? raw : 0.98 * smoothed + 0.02 * raw;
        result.curve.points.push_back({step, raw, smoothed, adam.lr});
    }

    params.write_back(result.model);
    return result;
}

std::pair<int64_t, int64_t> default_lesa_interval(int64_t n_layers) {
    const int64_t inserted = (n_layers + 1) / 2;  // 1.5x depth
    const int64_t b = n_layers - 1;
    const int64_t a = b - inserted;
    if (a < 1) throw ArgumentError("model too shallow for the default 1.5x interval");
    return {a, b};
}

namespace {

std::map<checkpoint::MatrixFamily, predictor::PredictorNet> train_predictor_set(
    const TransformerCheckpoint& base, const predictor::PredictorTrainConfig& pcfg,
    int64_t hidden, bool use_svd) {
    std::map<checkpoint::MatrixFamily, predictor::PredictorNet> nets;
    for (checkpoint::MatrixFamily f : checkpoint::kAllFamilies) {
        predictor::TripletDataset ds;
        if (use_svd) {
            auto space = svdspace::decompose_family(base, f);
            ds = predictor::build_triplets(space);
        } else {
            ds = predictor::build_raw_triplets(base, f);
        }
        auto trained = predictor::train_predictor(f, ds, pcfg, hidden);
        nets.emplace(f, std::move(trained.net));
    }
    return nets;
}

}  // namespace

CompareReport compare_strategies(const TransformerCheckpoint& base, const Corpus& corpus,
                                 const std::vector<expansion::Strategy>& strategies,
                                 const std::vector<uint64_t>& seeds, const TrainConfig& cfg,
                                 const CompareOptions& options) {
    using expansion::Strategy;
    base.validate();
    if (strategies.empty() || seeds.empty()) {
        throw ArgumentError("compare_strategies: need at least one strategy and one seed");
    }

    CompareReport report;
    for (Strategy strategy : strategies) {
        for (uint64_t seed : seeds) {
            const auto t0 = std::chrono::steady_clock::now();

            expansion::ExpansionParams params;
            auto [ia, ib] = options.interval_a > 0
                                ? std::pair<int64_t, int64_t>{options.interval_a,
                                                              options.interval_b}
                                : default_lesa_interval(base.config.n_layers);
            params.interval_a = ia;
            params.interval_b = ib;
            params.group_size = options.stack_group;
            params.n_copies = options.pro_copies;
            params.identity_init = options.pro_identity_init;
            params.n_overlap = options.solar_overlap;

            expansion::ExpansionPlan plan = expansion::plan_expansion(base.config, strategy, params);
            TransformerCheckpoint expanded;
            if (strategy == Strategy::lesa || strategy == Strategy::lesa_raw) {
                predictor::PredictorTrainConfig pcfg = options.predictor_cfg;
                pcfg.seed = seed;
                auto nets = train_predictor_set(base, pcfg, options.predictor_hidden,
                                                strategy == Strategy::lesa);
                expanded = expansion::expand_lesa(base, nets, plan, strategy == Strategy::lesa);
            } else {
                expanded = expansion::expand_baseline(base, plan);
            }

            CompareCell cell;
            cell.strategy = std::string(expansion::strategy_name(strategy));
            cell.seed = seed;
            cell.init_ppl = lm::perplexity(expanded, corpus.eval_sequences);

            TrainConfig run_cfg = cfg;
            run_cfg.seed = seed;
            run_cfg.freeze_mode = strategy == Strategy::solar
                                      ? TrainConfig::FreezeMode::none
                                      : TrainConfig::FreezeMode::new_layers_only;
            std::vector<int64_t> frozen =
                strategy == Strategy::solar ? std::vector<int64_t>{}
                                            : plan.original_layer_indices();
            PretrainResult trained = pretrain(expanded, corpus, run_cfg, frozen);
            cell.final_ppl = lm::perplexity(trained.model, corpus.eval_sequences);
            cell.curve = std::move(trained.curve);
            cell.curve.strategy = cell.strategy;
            cell.wall_clock_s = std::chrono::duration<double>(std::chrono::steady_clock::now() - t0)
                                    .count();
            report.cells.push_back(std::move(cell));
        }
    }

    // steps_to_threshold: first step at which a cell's smoothed loss reaches
    // the final smoothed loss of the same-seed solar cell.
    for (auto& cell : report.cells) {
        const CompareCell* ref = nullptr;
        for (const auto& other : report.cells) {
            if (other.strategy == "solar" && other.seed == cell.seed) {
                ref = &other;
                break;
            }
        }
        if (!ref || ref->curve.points.empty()) continue;
        const double threshold = ref->curve.points.back().smoothed_loss;
        for (const auto& p : cell.curve.points) {
            if (p.smoothed_loss <= threshold) {
                cell.steps_to_threshold = p.step;
                break;
            }
        }
    }
    return report;
}

void write_report(const CompareReport& report, const std::filesystem::path& dir) {
    std::filesystem::create_directories(dir);
    {
        std::ofstream out(dir / "report.csv");
        if (!out) throw IoError("cannot open for writing: " + (dir / "report.csv").string());
        out << "strategy,seed,init_ppl,final_ppl,steps_to_threshold,wall_clock_s\n";
        char buf[240];
        for (const auto& c : report.cells) {
            std::snprintf(buf, sizeof(buf), "%s,%llu,%.17g,%.17g,%lld,%.3f\n", c.strategy.c_str(),
                          static_cast<unsigned long long>(c.seed), c.init_ppl, c.final_ppl,
                          static_cast<long long>(c.steps_to_threshold), c.wall_clock_s);
            out << buf;
        }
    }
    for (const auto& c : report.cells) {
        write_losscurve_csv(c.curve, dir / ("losscurve_" + c.strategy + "_seed" +
                                            std::to_string(c.seed) + ".csv"));
    }

    std::ofstream md(dir / "report.md");
    if (!md) throw IoError("cannot open for writing: " + (dir / "report.md").string());
    md << "# Strategy comparison\n\n";
    md << "| strategy | seed | init PPL | final PPL | steps to solar-final | wall clock (s) |\n";
    md << "|---|---|---|---|---|---|\n";
    char buf[240];
    for (const auto& c : report.cells) {
        std::snprintf(buf, sizeof(buf), "| %s | %llu | %.4f | %.4f | %lld | %.1f |\n",
                      c.strategy.c_str(), static_cast<unsigned long long>(c.seed), c.init_ppl,
                      c.final_ppl, static_cast<long long>(c.steps_to_threshold), c.wall_clock_s);
        md << buf;
    }

    // Majority-of-seeds orderings for each strategy pair, by init PPL and
    // by initial raw loss.
    std::vector<std::string> names;
    for (const auto& c : report.cells) {
        if (std::find(names.begin(), names.end(), c.strategy) == names.end()) {
            names.push_back(c.strategy);
        }
    }
    md << "\n## Majority orderings\n\n";
    for (size_t i = 0; i < names.size(); ++i) {
        for (size_t j = i + 1; j < names.size(); ++j) {
            int init_wins = 0, loss_wins = 0, total = 0;
            for (const auto& a : report.cells) {
                if (a.strategy != names[i]) continue;
                for (const auto& b : report.cells) {
                    if (b.strategy != names[j] || b.seed != a.seed) continue;
                    ++total;
                    if (a.init_ppl < b.init_ppl) ++init_wins;
                    if (!a.curve.points.empty() && !b.curve.points.empty() &&
                        a.curve.points.front().raw_loss < b.curve.points.front().raw_loss) {
                        ++loss_wins;
                    }
                }
            }
            if (total == 0) continue;
            md << "- " << names[i] << " beats " << names[j] << " on init PPL in " << init_wins
               << "/" << total << " seeds; on initial raw loss in " << loss_wins << "/" << total
               << " seeds\n";
        }
    }
    if (!md) throw IoError("write failed: " + (dir / "report.md").string());
}

}  // namespace layerforge::trainpipe
