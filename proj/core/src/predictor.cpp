#include "layerforge/predictor.hpp"

#include <cmath>
#include <cstring>
#include <fstream>

#include "layerforge/lfck.hpp"
#include "layerforge/numkernel.hpp"
#include "layerforge/rng.hpp"
#include "gemm_kernels.hpp"

namespace layerforge::predictor {

int64_t PredictorNet::parameter_count() const {
    return w1.numel() + b1.numel() + w2.numel() + b2.numel() + w3.numel() + b3.numel();
}

void PredictorTrainConfig::validate() const {
    if (lambda < 0.0 || lambda > 1.0) throw ArgumentError("lambda must be in [0, 1]");
    if (epochs < 1) throw ArgumentError("epochs must be >= 1");
    if (!(lr > 0.0) && lr != 0.0) throw ArgumentError("lr must be >= 0");
    if (init_std < 0.0) throw ArgumentError("init_std must be >= 0");
}

TripletDataset build_triplets(const SvdSpace& space, int64_t checkpoint_id) {
    if (space.n_layers < 3) {
        throw ArgumentError("need at least 3 layers to form triplets, got " +
                            std::to_string(space.n_layers));
    }
    TripletDataset ds;
    for (int64_t i = 1; i + 1 < space.n_layers; ++i) {
        TripletSample s;
        s.prev = space.coeffs[static_cast<size_t>(i - 1)];
        s.mid = space.coeffs[static_cast<size_t>(i)];
        s.next = space.coeffs[static_cast<size_t>(i + 1)];
        s.layer_index = i;
        s.checkpoint_id = checkpoint_id;
        ds.samples.push_back(std::move(s));
    }
    return ds;
}

TripletDataset build_raw_triplets(const TransformerCheckpoint& model, MatrixFamily family,
                                  int64_t checkpoint_id) {
    const int64_t L = model.config.n_layers;
    if (L < 3) throw ArgumentError("need at least 3 layers to form triplets");
    TripletDataset ds;
    for (int64_t i = 1; i + 1 < L; ++i) {
        TripletSample s;
        s.prev = model.family(i - 1, family);
        s.mid = model.family(i, family);
        s.next = model.family(i + 1, family);
        s.layer_index = i;
        s.checkpoint_id = checkpoint_id;
        ds.samples.push_back(std::move(s));
    }
    return ds;
}

void append_dataset(TripletDataset& dst, const TripletDataset& src) {
    dst.samples.insert(dst.samples.end(), src.samples.begin(), src.samples.end());
}

std::pair<TripletDataset, TripletDataset> split_dataset(const TripletDataset& ds,
                                                        double holdout_frac, uint64_t seed) {
    if (holdout_frac < 0.0 || holdout_frac >= 1.0) {
        throw ArgumentError("holdout_frac must be in [0, 1)");
    }
    std::vector<size_t> idx(ds.samples.size());
    for (size_t i = 0; i < idx.size(); ++i) idx[i] = i;
    Rng rng(seed);
    rng.shuffle(idx);
    size_t held = static_cast<size_t>(holdout_frac * static_cast<double>(idx.size()));
    if (held >= idx.size() && !idx.empty()) held = idx.size() - 1;
    TripletDataset train, holdout;
    for (size_t i = 0; i < idx.size(); ++i) {
        (i < idx.size() - held ? train : holdout).samples.push_back(ds.samples[idx[i]]);
    }
    return {std::move(train), std::move(holdout)};
}

PredictorNet build_predictor(MatrixFamily family, int64_t input_rank, int64_t hidden,
                             uint64_t seed, double init_std) {
    if (input_rank < 1 || hidden < 1) {
        throw ArgumentError("build_predictor requires input_rank >= 1 and hidden >= 1");
    }
    Rng rng(seed);
    PredictorNet net;
    net.family = family;
    net.input_rank = input_rank;
    net.hidden = hidden;
    net.w1 = rng_normal(rng, {hidden, 2 * input_rank}, 0.0, init_std);
    net.b1 = Tensor({hidden});
    net.w2 = rng_normal(rng, {hidden, hidden}, 0.0, init_std);
    net.b2 = Tensor({hidden});
    net.w3 = rng_normal(rng, {input_rank, hidden}, 0.0, init_std);
    net.b3 = Tensor({input_rank});
    return net;
}

namespace detail {

template <typename Real>
NetBuf<Real> to_buf(const PredictorNet& net) {
    NetBuf<Real> b;
    b.r = net.input_rank;
    b.h = net.hidden;
    auto conv = [](const Tensor& t) {
        std::vector<Real> v(static_cast<size_t>(t.numel()));
        for (int64_t i = 0; i < t.numel(); ++i) v[static_cast<size_t>(i)] = static_cast<Real>(t.data()[i]);
        return v;
    };
    b.w1 = conv(net.w1);
    b.b1 = conv(net.b1);
    b.w2 = conv(net.w2);
    b.b2 = conv(net.b2);
    b.w3 = conv(net.w3);
    b.b3 = conv(net.b3);
    return b;
}

template <typename Real>
void from_buf(const NetBuf<Real>& buf, PredictorNet& net) {
    auto conv = [](const std::vector<Real>& v, Tensor& t) {
        for (size_t i = 0; i < v.size(); ++i) t.data()[i] = static_cast<float>(v[i]);
    };
    conv(buf.w1, net.w1);
    conv(buf.b1, net.b1);
    conv(buf.w2, net.w2);
    conv(buf.b2, net.b2);
    conv(buf.w3, net.w3);
    conv(buf.b3, net.b3);
}

template <typename Real>
void forward_buf(const NetBuf<Real>& net, const std::vector<Real>& x, int64_t n,
                 std::vector<Real>& h1, std::vector<Real>& h2, std::vector<Real>& out) {
    const int64_t r = net.r, h = net.h;
    h1.assign(static_cast<size_t>(n * h), Real(0));
    h2.assign(static_cast<size_t>(n * h), Real(0));
    out.assign(static_cast<size_t>(n * r), Real(0));

    layerforge::detail::gemm_nt<Real, Real>(x.data(), net.w1.data(), h1.data(), n, 2 * r, h);
    for (int64_t i = 0; i < n; ++i) {
        Real* row = h1.data() + i * h;
        for (int64_t j = 0; j < h; ++j) {
            row[j] += net.b1[static_cast<size_t>(j)];
            if (row[j] < Real(0)) row[j] = Real(0);
        }
    }
    layerforge::detail::gemm_nt<Real, Real>(h1.data(), net.w2.data(), h2.data(), n, h, h);
    for (int64_t i = 0; i < n; ++i) {
        Real* row = h2.data() + i * h;
        for (int64_t j = 0; j < h; ++j) {
            row[j] += net.b2[static_cast<size_t>(j)];
            if (row[j] < Real(0)) row[j] = Real(0);
        }
    }
    layerforge::detail::gemm_nt<Real, Real>(h2.data(), net.w3.data(), out.data(), n, h, r);
    for (int64_t i = 0; i < n; ++i) {
        Real* row = out.data() + i * r;
        for (int64_t j = 0; j < r; ++j) row[j] += net.b3[static_cast<size_t>(j)];
    }
}

template <typename Real>
LossParts loss_and_grad_buf(const NetBuf<Real>& net, const std::vector<Real>& x,
                            const std::vector<Real>& target, int64_t n, double lambda,
                            NetBuf<Real>& gout, std::vector<Real>& h1, std::vector<Real>& h2,
                            std::vector<Real>& out) {
    const int64_t r = net.r, h = net.h;
    forward_buf(net, x, n, h1, h2, out);

    // Rows of `out` are the column samples; norms are per-row here.
    LossParts parts;
    std::vector<Real> dout(static_cast<size_t>(n * r), Real(0));
    double mse_acc = 0.0, norm_acc = 0.0;
    const double inv_rn = 1.0 / static_cast<double>(r * n);
    const double inv_n = 1.0 / static_cast<double>(n);
    for (int64_t i = 0; i < n; ++i) {
        const Real* orow = out.data() + i * r;
        const Real* trow = target.data() + i * r;
        Real* drow = dout.data() + i * r;
        double on2 = 0.0, tn2 = 0.0;
        for (int64_t j = 0; j < r; ++j) {
            const double d = static_cast<double>(orow[j]) - static_cast<double>(trow[j]);
            mse_acc += d * d;
            on2 += static_cast<double>(orow[j]) * static_cast<double>(orow[j]);
            tn2 += static_cast<double>(trow[j]) * static_cast<double>(trow[j]);
            drow[j] = static_cast<Real>((1.0 - lambda) * 2.0 * d * inv_rn);
        }
        const double on = std::sqrt(on2), tn = std::sqrt(tn2);
        const double gap = on - tn;
        norm_acc += gap * gap;
        if (on > 1e-30) {
            const double scale = lambda * 2.0 * gap * inv_n / on;
            for (int64_t j = 0; j < r; ++j) {
                drow[j] += static_cast<Real>(scale * static_cast<double>(orow[j]));
            }
        }
    }
    parts.mse = mse_acc * inv_rn;
    parts.norm = norm_acc * inv_n;
    parts.total = (1.0 - lambda) * parts.mse + lambda * parts.norm;

    // Backward through the three affine maps.
    std::vector<Real> dh2(static_cast<size_t>(n * h), Real(0));
    layerforge::detail::gemm_tn_acc<Real, Real>(dout.data(), h2.data(), gout.w3.data(), n, r, h);
    for (int64_t i = 0; i < n; ++i) {
        const Real* drow = dout.data() + i * r;
        for (int64_t j = 0; j < r; ++j) gout.b3[static_cast<size_t>(j)] += drow[j];
    }
    layerforge::detail::gemm_nn<Real, Real>(dout.data(), net.w3.data(), dh2.data(), n, r, h);
    for (int64_t i = 0; i < n * h; ++i) {
        if (h2[static_cast<size_t>(i)] <= Real(0)) dh2[static_cast<size_t>(i)] = Real(0);
    }

    std::vector<Real> dh1(static_cast<size_t>(n * h), Real(0));
    layerforge::detail::gemm_tn_acc<Real, Real>(dh2.data(), h1.data(), gout.w2.data(), n, h, h);
    for (int64_t i = 0; i < n; ++i) {
        const Real* drow = dh2.data() + i * h;
        for (int64_t j = 0; j < h; ++j) gout.b2[static_cast<size_t>(j)] += drow[j];
    }
    layerforge::detail::gemm_nn<Real, Real>(dh2.data(), net.w2.data(), dh1.data(), n, h, h);
    for (int64_t i = 0; i < n * h; ++i) {
        if (h1[static_cast<size_t>(i)] <= Real(0)) dh1[static_cast<size_t>(i)] = Real(0);
    }

    layerforge::detail::gemm_tn_acc<Real, Real>(dh1.data(), x.data(), gout.w1.data(), n, h, 2 * r);
    for (int64_t i = 0; i < n; ++i) {
        const Real* drow = dh1.data() + i * h;
        for (int64_t j = 0; j < h; ++j) gout.b1[static_cast<size_t>(j)] += drow[j];
    }
    return parts;
}

template NetBuf<float> to_buf<float>(const PredictorNet&);
template NetBuf<double> to_buf<double>(const PredictorNet&);
template void from_buf<float>(const NetBuf<float>&, PredictorNet&);
template void from_buf<double>(const NetBuf<double>&, PredictorNet&);
template void forward_buf<float>(const NetBuf<float>&, const std::vector<float>&, int64_t,
                                 std::vector<float>&, std::vector<float>&, std::vector<float>&);
template void forward_buf<double>(const NetBuf<double>&, const std::vector<double>&, int64_t,
                                  std::vector<double>&, std::vector<double>&,
                                  std::vector<double>&);
template LossParts loss_and_grad_buf<float>(const NetBuf<float>&, const std::vector<float>&,
                                            const std::vector<float>&, int64_t, double,
                                            NetBuf<float>&, std::vector<float>&,
                                            std::vector<float>&, std::vector<float>&);
template LossParts loss_and_grad_buf<double>(const NetBuf<double>&, const std::vector<double>&,
                                             const std::vector<double>&, int64_t, double,
                                             NetBuf<double>&, std::vector<double>&,
                                             std::vector<double>&, std::vector<double>&);

}  // namespace detail

namespace {

// Stack two [r, n] coefficient blocks into row-major samples [n, 2r]:
// row j = concat(prev[:, j], next[:, j]).
template <typename Real>
std::vector<Real> stack_columns(const Tensor& prev, const Tensor& next) {
    const int64_t r = prev.dim(0), n = prev.dim(1);
    std::vector<Real> x(static_cast<size_t>(n * 2 * r));
    for (int64_t j = 0; j < n; ++j) {
        Real* row = x.data() + j * 2 * r;
        for (int64_t i = 0; i < r; ++i) row[i] = static_cast<Real>(prev.data()[i * n + j]);
        for (int64_t i = 0; i < r; ++i) row[r + i] = static_cast<Real>(next.data()[i * n + j]);
    }
    return x;
}

template <typename Real>
std::vector<Real> transpose_to_rows(const Tensor& t) {
    const int64_t r = t.dim(0), n = t.dim(1);
    std::vector<Real> x(static_cast<size_t>(n * r));
    for (int64_t j = 0; j < n; ++j) {
        Real* row = x.data() + j * r;
        for (int64_t i = 0; i < r; ++i) row[i] = static_cast<Real>(t.data()[i * n + j]);
    }
    return x;
}

void check_pair(const PredictorNet& net, const Tensor& a, const Tensor& b, const char* what) {
    if (a.rank() != 2 || b.rank() != 2 || a.shape() != b.shape()) {
        throw DimensionError(std::string(what) + ": inputs must be 2-D with equal shapes");
    }
    if (a.dim(0) != net.input_rank) {
        throw DimensionError(std::string(what) + ": input rank " + std::to_string(a.dim(0)) +
                             " does not match net rank " + std::to_string(net.input_rank));
    }
}

}  // namespace

Tensor forward_columns(const PredictorNet& net, const Tensor& prev_cols,
                       const Tensor& next_cols) {
    check_pair(net, prev_cols, next_cols, "forward_columns");
    const int64_t r = net.input_rank, n = prev_cols.dim(1);
    auto x = stack_columns<float>(prev_cols, next_cols);
    auto buf = detail::to_buf<float>(net);
    std::vector<float> h1, h2, out;
    detail::forward_buf(buf, x, n, h1, h2, out);
    Tensor result({r, n});
    for (int64_t j = 0; j < n; ++j) {
        for (int64_t i = 0; i < r; ++i) {
            result.data()[i * n + j] = out[static_cast<size_t>(j * r + i)];
        }
    }
    if (!result.all_finite()) throw NumericError("forward_columns produced non-finite values");
    return result;
}

LossParts combined_loss(const Tensor& pred, const Tensor& target, double lambda) {
    if (pred.shape() != target.shape() || pred.rank() != 2) {
        throw DimensionError("combined_loss: pred/target must be 2-D with equal shapes");
    }
    const int64_t r = pred.dim(0), n = pred.dim(1);
    double mse_acc = 0.0, norm_acc = 0.0;
    for (int64_t j = 0; j < n; ++j) {
        double pn2 = 0.0, tn2 = 0.0;
        for (int64_t i = 0; i < r; ++i) {
            const double p = pred.data()[i * n + j];
            const double t = target.data()[i * n + j];
            const double d = p - t;
            mse_acc += d * d;
            pn2 += p * p;
            tn2 += t * t;
        }
        const double gap = std::sqrt(pn2) - std::sqrt(tn2);
        norm_acc += gap * gap;
    }
    LossParts parts;
    parts.mse = mse_acc / static_cast<double>(r * n);
    parts.norm = norm_acc / static_cast<double>(n);
    parts.total = (1.0 - lambda) * parts.mse + lambda * parts.norm;
    return parts;
}

TrainResult train_predictor(MatrixFamily family, const TripletDataset& dataset,
                            const PredictorTrainConfig& cfg, int64_t hidden) {
    cfg.validate();
    if (dataset.samples.empty()) throw ArgumentError("train_predictor: dataset is empty");
    const int64_t r = dataset.samples.front().prev.dim(0);
    for (const auto& s : dataset.samples) {
        if (s.prev.dim(0) != r || s.mid.dim(0) != r || s.next.dim(0) != r) {
            throw DimensionError("train_predictor: non-uniform input rank across samples");
        }
    }

    TrainResult result;
    result.net = build_predictor(family, r, hidden, cfg.seed, cfg.init_std);
    auto net = detail::to_buf<float>(result.net);

    // Pre-stack every sample once.
    std::vector<std::vector<float>> xs, ts;
    std::vector<int64_t> ns;
    xs.reserve(dataset.samples.size());
    for (const auto& s : dataset.samples) {
        xs.push_back(stack_columns<float>(s.prev, s.next));
        ts.push_back(transpose_to_rows<float>(s.mid));
        ns.push_back(s.prev.dim(1));
    }

    detail::NetBuf<float> grads = net;
    auto zero_grads = [&] {
        std::fill(grads.w1.begin(), grads.w1.end(), 0.0f);
        std::fill(grads.b1.begin(), grads.b1.end(), 0.0f);
        std::fill(grads.w2.begin(), grads.w2.end(), 0.0f);
        std::fill(grads.b2.begin(), grads.b2.end(), 0.0f);
        std::fill(grads.w3.begin(), grads.w3.end(), 0.0f);
        std::fill(grads.b3.begin(), grads.b3.end(), 0.0f);
    };

    numkernel::AdamWConfig adam{cfg.lr, cfg.beta1, cfg.beta2, cfg.eps, cfg.weight_decay};
    struct SpanState {
        std::vector<float> m, v;
    };
    auto mk_state = [](size_t len) { return SpanState{std::vector<float>(len, 0.0f), std::vector<float>(len, 0.0f)}; };
    SpanState sw1 = mk_state(net.w1.size()), sb1 = mk_state(net.b1.size());
    SpanState sw2 = mk_state(net.w2.size()), sb2 = mk_state(net.b2.size());
    SpanState sw3 = mk_state(net.w3.size()), sb3 = mk_state(net.b3.size());
    int64_t step_count = 0;

    std::vector<size_t> order(dataset.samples.size());
    for (size_t i = 0; i < order.size(); ++i) order[i] = i;
    // Separate stream from the init draw so epoch order is not correlated
    // with the weight initialization.
    Rng shuffle_rng(cfg.seed ^ 0x9e3779b97f4a7c15ULL);
    std::vector<float> h1, h2, out;

    for (int epoch = 0; epoch < cfg.epochs; ++epoch) {
        shuffle_rng.shuffle(order);
        for (size_t oi = 0; oi < order.size(); ++oi) {
            const size_t si = order[oi];
            zero_grads();
            LossParts parts = detail::loss_and_grad_buf<float>(net, xs[si], ts[si], ns[si],
                                                               cfg.lambda, grads, h1, h2, out);
            if (!std::isfinite(parts.total)) {
                throw NumericError("train_predictor: non-finite loss at epoch " +
                                   std::to_string(epoch) + ", sample " + std::to_string(si));
            }
            auto step = [&](std::vector<float>& p, const std::vector<float>& g, SpanState& s) {
                numkernel::adamw_step_span(p, g, s.m, s.v, step_count, adam);
            };
            step(net.w1, grads.w1, sw1);
            step(net.b1, grads.b1, sb1);
            step(net.w2, grads.w2, sw2);
            step(net.b2, grads.b2, sb2);
            step(net.w3, grads.w3, sw3);
            step(net.b3, grads.b3, sb3);
            ++step_count;
            result.history.push_back({epoch, static_cast<int>(si), parts.total, parts.mse,
                                      parts.norm});
        }
    }
    detail::from_buf(net, result.net);
    return result;
}

LossParts evaluate_predictor(const PredictorNet& net, const TripletDataset& dataset,
                             double lambda) {
    if (dataset.samples.empty()) throw ArgumentError("evaluate_predictor: dataset is empty");
    double L = 0, L1 = 0, L2 = 0;
    for (const auto& s : dataset.samples) {
        Tensor pred = forward_columns(net, s.prev, s.next);
        LossParts parts = combined_loss(pred, s.mid, lambda);
        L += parts.total;
        L1 += parts.mse;
        L2 += parts.norm;
    }
    const double inv = 1.0 / static_cast<double>(dataset.samples.size());
    return {L * inv, L1 * inv, L2 * inv};
}

Tensor predict_intermediate(const PredictorNet& net, const Tensor& v_a, const Tensor& v_b) {
    return forward_columns(net, v_a, v_b);
}

void save_predictor(const PredictorNet& net, const std::filesystem::path& path) {
    lfck::Container c;
    c.config_json = std::string("{\"family\":\"") +
                    std::string(checkpoint::family_name(net.family)) +
                    "\",\"input_rank\":" + std::to_string(net.input_rank) +
                    ",\"hidden\":" + std::to_string(net.hidden) + "}";
    c.tensors.push_back({"w1", net.w1});
    c.tensors.push_back({"b1", net.b1});
    c.tensors.push_back({"w2", net.w2});
    c.tensors.push_back({"b2", net.b2});
    c.tensors.push_back({"w3", net.w3});
    c.tensors.push_back({"b3", net.b3});
    lfck::write_container(path, c);
}

PredictorNet load_predictor(const std::filesystem::path& path) {
    lfck::Container c = lfck::read_container(path);
    PredictorNet net;
    // Minimal hand-rolled parse of the three config fields.
    const std::string& cj = c.config_json;
    auto grab_int = [&](const std::string& key) -> int64_t {
        auto pos = cj.find("\"" + key + "\":");
        if (pos == std::string::npos) throw FormatError("predictor config missing " + key);
        return std::stoll(cj.substr(pos + key.size() + 3));
    };
    auto fam_pos = cj.find("\"family\":\"");
    if (fam_pos == std::string::npos) throw FormatError("predictor config missing family");
    auto fam_start = fam_pos + 10;
    auto fam_end = cj.find('"', fam_start);
    net.family = checkpoint::family_from_name(cj.substr(fam_start, fam_end - fam_start));
    net.input_rank = grab_int("input_rank");
    net.hidden = grab_int("hidden");

    auto need = [&](const char* name) {
        const Tensor* t = c.find(name);
        if (!t) throw ValidationError(std::string("predictor file missing tensor ") + name);
        return *t;
    };
    net.w1 = need("w1");
    net.b1 = need("b1");
    net.w2 = need("w2");
    net.b2 = need("b2");
    net.w3 = need("w3");
    net.b3 = need("b3");
    if (net.w1.shape() != std::vector<int64_t>{net.hidden, 2 * net.input_rank} ||
        net.w3.shape() != std::vector<int64_t>{net.input_rank, net.hidden}) {
        throw ValidationError("predictor tensor shapes disagree with config");
    }
    return net;
}

void write_loss_history_csv(const std::vector<LossRecord>& history,
                            const std::filesystem::path& path) {
    std::ofstream out(path);
    if (!out) throw IoError("cannot open for writing: " + path.string());
    out << "epoch,sample,L,L1,L2\n";
    char buf[160];
    for (const auto& rec : history) {
        std::snprintf(buf, sizeof(buf), "%d,%d,%.17g,%.17g,%.17g\n", rec.epoch, rec.sample, rec.L,
                      rec.L1, rec.L2);
        out << buf;
    }
    if (!out) throw IoError("write failed: " + path.string());
}

}  // namespace layerforge::predictor
