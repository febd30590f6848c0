// ============================================================================
// flow.hpp - affine-coupling normalizing flow over feature vectors: forward /
//            inverse transforms, exact log-determinant, likelihood training
// ============================================================================

#pragma once

#include <cmath>
#include <cstdint>
#include <fstream>
#include <string>
#include <utility>
#include <vector>

#include "texflow/common.hpp"
#include "texflow/features.hpp"
#include "texflow/linalg.hpp"

namespace texflow {

constexpr double kLogTwoPi = 1.8378770664093454836;

// ----------------------------------------------------------------------------
// Coupling layer: out1 = k1, out2 = k2 * exp(s) + shift with s = clamp(l(k1))
// and shift = n(k1). The exponential keeps every scale coefficient non-zero,
// so the map is invertible by construction.
// ----------------------------------------------------------------------------

// Two affine layers with a ReLU between; hidden width equals the flow
// dimension. The closing layer starts at zero so a fresh flow is the identity.
struct FlowSubnet {
    Affine a1;  // half -> hidden
    Affine a2;  // hidden -> half

    Vec forward(const Vec& x) const {
        Vec h = a1.forward(x);
        for (auto& v : h) v = v > 0.0 ? v : 0.0;
        return a2.forward(h);
    }

    void forward_cached(const Vec& x, Vec& h_pre, Vec& h_post, Vec& out) const {
        h_pre = a1.forward(x);
        h_post = h_pre;
        for (auto& v : h_post) v = v > 0.0 ? v : 0.0;
        out = a2.forward(h_post);
    }

    struct Grads {
        Vec w1, b1, w2, b2;
        explicit Grads(const FlowSubnet& s)
            : w1(s.a1.w.size(), 0.0),
              b1(s.a1.b.size(), 0.0),
              w2(s.a2.w.size(), 0.0),
              b2(s.a2.b.size(), 0.0) {}
    };

    Vec backward(const Vec& x, const Vec& h_pre, const Vec& h_post, const Vec& dout,
                 Grads& g) const {
        Vec dh = a2.backward(h_post, dout, g.w2, g.b2);
        for (std::size_t i = 0; i < dh.size(); ++i)
            if (h_pre[i] <= 0.0) dh[i] = 0.0;
        return a1.backward(x, dh, g.w1, g.b1);
    }
};

struct CouplingLayer {
    int dim = 0;
    int split = 0;  // |k1|; k2 holds the remaining dim - split entries
    double s_max = 3.0;
    FlowSubnet scale_net;  // l: produces the raw log-scale
    FlowSubnet shift_net;  // n: produces the additive shift

    // Smooth clamp keeps s ~ raw near zero while bounding |s| by s_max, so
    // exp(s) cannot overflow.
    double clamp_scale(double raw) const { return s_max * std::tanh(raw / s_max); }
    double clamp_scale_grad(double raw) const {
        const double t = std::tanh(raw / s_max);
        return 1.0 - t * t;
    }
};

inline CouplingLayer make_coupling(int dim, double s_max, Rng& rng) {
    if (dim < 2) throw ParameterError("coupling layer needs dim >= 2");
    CouplingLayer layer;
    layer.dim = dim;
    layer.split = dim / 2;
    layer.s_max = s_max;
    const int half_in = layer.split;
    const int half_out = dim - layer.split;
    const int hidden = dim;
    for (FlowSubnet* net : {&layer.scale_net, &layer.shift_net}) {
        net->a1 = Affine(half_in, hidden);
        net->a2 = Affine(hidden, half_out);
        const double bound = 1.0 / std::sqrt(double(half_in));
        for (auto& v : net->a1.w) v = rng.uniform(-bound, bound);
        // a2 stays zero: the layer starts as the identity map.
    }
    return layer;
}

struct CoupleCache {
    Vec v, a, b;
    Vec scale_h_pre, scale_h_post, u, s, e;
    Vec shift_h_pre, shift_h_post, shift;
    Vec out;
};

inline void couple_forward_cached(const CouplingLayer& layer, const Vec& v, CoupleCache& c,
                                  double& logdet) {
    if (int(v.size()) != layer.dim)
        throw ParameterError("couple_forward: dimension mismatch");
    c.v = v;
    c.a.assign(v.begin(), v.begin() + layer.split);
    c.b.assign(v.begin() + layer.split, v.end());
    layer.scale_net.forward_cached(c.a, c.scale_h_pre, c.scale_h_post, c.u);
    layer.shift_net.forward_cached(c.a, c.shift_h_pre, c.shift_h_post, c.shift);
    const std::size_t nb = c.b.size();
    c.s.resize(nb);
    c.e.resize(nb);
    c.out.resize(v.size());
    logdet = 0.0;
    for (std::size_t i = 0; i < nb; ++i) {
        c.s[i] = layer.clamp_scale(c.u[i]);
        c.e[i] = std::exp(c.s[i]);
        logdet += c.s[i];
    }
    for (int i = 0; i < layer.split; ++i) c.out[i] = c.a[i];
    for (std::size_t i = 0; i < nb; ++i) c.out[layer.split + i] = c.b[i] * c.e[i] + c.shift[i];
}

inline std::pair<Vec, double> couple_forward(const CouplingLayer& layer, const Vec& v) {
    CoupleCache c;
    double logdet = 0.0;
    couple_forward_cached(layer, v, c, logdet);
    return {std::move(c.out), logdet};
}

inline Vec couple_inverse(const CouplingLayer& layer, const Vec& w) {
    if (int(w.size()) != layer.dim)
        throw ParameterError("couple_inverse: dimension mismatch");
    const Vec a(w.begin(), w.begin() + layer.split);
    const Vec u = layer.scale_net.forward(a);
    const Vec shift = layer.shift_net.forward(a);
    Vec v(w.size());
    for (int i = 0; i < layer.split; ++i) v[i] = a[i];
    for (std::size_t i = 0; i + layer.split < w.size(); ++i) {
        const double s = layer.clamp_scale(u[i]);
        v[layer.split + i] = (w[layer.split + i] - shift[i]) * std::exp(-s);
    }
    return v;
}

// ----------------------------------------------------------------------------
// FlowModel: eight (by default) coupling blocks, each preceded by a fixed
// seeded permutation that reshuffles which dimensions sit in the identity
// branch.
// ----------------------------------------------------------------------------

struct FlowModel {
    int dim = 0;
    double s_max = 3.0;
    std::vector<std::vector<std::uint32_t>> perms;  // one per layer, y[i] = x[perm[i]]
    std::vector<CouplingLayer> layers;

    std::size_t layer_count() const { return layers.size(); }
};

inline FlowModel make_flow(int dim, int n_layers, double s_max, std::uint64_t seed) {
    if (dim < 2) throw ParameterError("make_flow: dim must be >= 2");
    if (n_layers < 1) throw ParameterError("make_flow: need at least one layer");
    FlowModel f;
    f.dim = dim;
    f.s_max = s_max;
    Rng rng(stage_seed(seed, "flow-init"));
    for (int l = 0; l < n_layers; ++l) {
        f.perms.push_back(rng.permutation(std::size_t(dim)));
        f.layers.push_back(make_coupling(dim, s_max, rng));
    }
    return f;
}

inline Vec apply_perm(const std::vector<std::uint32_t>& perm, const Vec& x) {
    Vec y(x.size());
    for (std::size_t i = 0; i < x.size(); ++i) y[i] = x[perm[i]];
    return y;
}

inline Vec apply_perm_inverse(const std::vector<std::uint32_t>& perm, const Vec& y) {
    Vec x(y.size());
    for (std::size_t i = 0; i < y.size(); ++i) x[perm[i]] = y[i];
    return x;
}

struct FlowCache {
    std::vector<CoupleCache> layers;
    Vec t;
    double logdet = 0.0;
};

inline void flow_forward_cached(const FlowModel& f, const Vec& x, FlowCache& cache) {
    if (int(x.size()) != f.dim) throw ParameterError("flow_forward: dimension mismatch");
    cache.layers.resize(f.layers.size());
    Vec cur = x;
    cache.logdet = 0.0;
    for (std::size_t l = 0; l < f.layers.size(); ++l) {
        const Vec permuted = apply_perm(f.perms[l], cur);
        double ld = 0.0;
        couple_forward_cached(f.layers[l], permuted, cache.layers[l], ld);
        cache.logdet += ld;
        cur = cache.layers[l].out;
        for (double v : cur)
            if (!std::isfinite(v))
                throw NumericError("flow_forward: non-finite output at layer " +
                                   std::to_string(l));
    }
    cache.t = std::move(cur);
}

// Returns (latent t, log|det J|); permutations contribute zero log-det.
inline std::pair<Vec, double> flow_forward(const FlowModel& f, const Vec& x) {
    FlowCache cache;
    flow_forward_cached(f, x, cache);
    return {std::move(cache.t), cache.logdet};
}

inline Vec flow_inverse(const FlowModel& f, const Vec& t) {
    if (int(t.size()) != f.dim) throw ParameterError("flow_inverse: dimension mismatch");
    Vec cur = t;
    for (std::size_t l = f.layers.size(); l-- > 0;) {
        cur = couple_inverse(f.layers[l], cur);
        cur = apply_perm_inverse(f.perms[l], cur);
    }
    return cur;
}

// log p_x(x) = -D/2 log(2pi) - ||t||^2 / 2 + log|det J|
inline double log_likelihood(const FlowModel& f, const Vec& x) {
    const auto [t, logdet] = flow_forward(f, x);
    const double ll = -0.5 * double(f.dim) * kLogTwoPi - 0.5 * dot(t, t) + logdet;
    if (!std::isfinite(ll)) throw NumericError("log_likelihood: non-finite result");
    return ll;
}

// Per-sample training loss ||t||^2/2 - logdet; equals -log p_x minus the
// constant D/2 log(2pi).
inline double nf_sample_loss(const FlowModel& f, const Vec& x) {
    const auto [t, logdet] = flow_forward(f, x);
    return 0.5 * dot(t, t) - logdet;
}

inline double nf_loss(const FlowModel& f, const PatchFeatureSet& batch) {
    if (batch.count() == 0) throw ParameterError("nf_loss: empty batch");
    double total = 0.0;
    for (std::size_t k = 0; k < batch.count(); ++k) total += nf_sample_loss(f, batch.row(k));
    return total / double(batch.count());
}

// ----------------------------------------------------------------------------
// Training
// ----------------------------------------------------------------------------

struct FlowGrads {
    std::vector<FlowSubnet::Grads> scale, shift;

    explicit FlowGrads(const FlowModel& f) {
        for (const auto& layer : f.layers) {
            scale.emplace_back(layer.scale_net);
            shift.emplace_back(layer.shift_net);
        }
    }
};

// Backprop of the per-sample loss ||t||^2/2 - logdet through the composition.
inline void flow_backward(const FlowModel& f, const FlowCache& cache, FlowGrads& g) {
    Vec dout = cache.t;  // d(||t||^2/2)/dt = t
    const double dlogdet = -1.0;
    for (std::size_t l = f.layers.size(); l-- > 0;) {
        const CouplingLayer& layer = f.layers[l];
        const CoupleCache& c = cache.layers[l];
        const std::size_t nb = c.b.size();

        Vec dout1(dout.begin(), dout.begin() + layer.split);
        Vec dout2(dout.begin() + layer.split, dout.end());

        Vec db(nb), du(nb);
        for (std::size_t i = 0; i < nb; ++i) {
            db[i] = dout2[i] * c.e[i];
            const double ds = dout2[i] * c.b[i] * c.e[i] + dlogdet;
            du[i] = ds * layer.clamp_scale_grad(c.u[i]);
        }
        const Vec da_scale =
            layer.scale_net.backward(c.a, c.scale_h_pre, c.scale_h_post, du, g.scale[l]);
        const Vec da_shift =
            layer.shift_net.backward(c.a, c.shift_h_pre, c.shift_h_post, dout2, g.shift[l]);

        Vec dv(layer.dim);
        for (int i = 0; i < layer.split; ++i) dv[i] = dout1[i] + da_scale[i] + da_shift[i];
        for (std::size_t i = 0; i < nb; ++i) dv[layer.split + i] = db[i];

        // undo the permutation that preceded this layer
        dout = apply_perm_inverse(f.perms[l], dv);
    }
}

template <typename Fn>
void flow_for_each_param(FlowModel& f, Fn&& fn) {
    for (std::size_t l = 0; l < f.layers.size(); ++l) {
        const std::string p = "layer" + std::to_string(l);
        fn(p + ".scale.w1", f.layers[l].scale_net.a1.w);
        fn(p + ".scale.b1", f.layers[l].scale_net.a1.b);
        fn(p + ".scale.w2", f.layers[l].scale_net.a2.w);
        fn(p + ".scale.b2", f.layers[l].scale_net.a2.b);
        fn(p + ".shift.w1", f.layers[l].shift_net.a1.w);
        fn(p + ".shift.b1", f.layers[l].shift_net.a1.b);
        fn(p + ".shift.w2", f.layers[l].shift_net.a2.w);
        fn(p + ".shift.b2", f.layers[l].shift_net.a2.b);
    }
}

template <typename Fn>
void flow_for_each_grad(FlowGrads& g, Fn&& fn) {
    for (std::size_t l = 0; l < g.scale.size(); ++l) {
        const std::string p = "layer" + std::to_string(l);
        fn(p + ".scale.w1", g.scale[l].w1);
        fn(p + ".scale.b1", g.scale[l].b1);
        fn(p + ".scale.w2", g.scale[l].w2);
        fn(p + ".scale.b2", g.scale[l].b2);
        fn(p + ".shift.w1", g.shift[l].w1);
        fn(p + ".shift.b1", g.shift[l].b1);
        fn(p + ".shift.w2", g.shift[l].w2);
        fn(p + ".shift.b2", g.shift[l].b2);
    }
}

struct Adam {
    double lr = 1e-2;
    double beta1 = 0.9, beta2 = 0.999, eps = 1e-8;
    int t = 0;
    std::vector<Vec> m, v;

    void step(FlowModel& model, FlowGrads& grads) {
        std::vector<Vec*> params, gs;
        flow_for_each_param(model, [&](const std::string&, Vec& p) { params.push_back(&p); });
        flow_for_each_grad(grads, [&](const std::string&, Vec& g) { gs.push_back(&g); });
        if (m.empty()) {
            for (auto* p : params) {
                m.emplace_back(p->size(), 0.0);
                v.emplace_back(p->size(), 0.0);
            }
        }
        ++t;
        const double bc1 = 1.0 - std::pow(beta1, t);
        const double bc2 = 1.0 - std::pow(beta2, t);
        for (std::size_t i = 0; i < params.size(); ++i) {
            Vec& p = *params[i];
            const Vec& g = *gs[i];
            for (std::size_t j = 0; j < p.size(); ++j) {
                m[i][j] = beta1 * m[i][j] + (1.0 - beta1) * g[j];
                v[i][j] = beta2 * v[i][j] + (1.0 - beta2) * g[j] * g[j];
                p[j] -= lr * (m[i][j] / bc1) / (std::sqrt(v[i][j] / bc2) + eps);
            }
        }
    }
};

struct FlowTrainResult {
    FlowModel model;
    std::vector<double> loss_history;  // mean Eq-style loss per epoch
};

// Maximum-likelihood training of the coupling parameters. Deterministic for
// a fixed seed; Adam updates, minibatches reshuffled per epoch.
inline FlowTrainResult train_flow(FlowModel f, const PatchFeatureSet& feats, int epochs,
                                  double lr, int batch, std::uint64_t seed) {
    if (feats.count() == 0) throw ParameterError("train_flow: empty feature set");
    if (int(feats.dim) != f.dim)
        throw ParameterError("train_flow: feature dim does not match flow dim");
    if (epochs < 1) throw ParameterError("train_flow: epochs must be >= 1");
    if (batch < 1) throw ParameterError("train_flow: batch must be >= 1");
    for (float v : feats.values)
        if (!std::isfinite(v)) throw ParameterError("train_flow: non-finite feature");

    Rng order_rng(stage_seed(seed, "flow-order"));
    Adam opt;
    opt.lr = lr;
    std::vector<double> history;

    std::vector<std::size_t> order(feats.count());
    for (std::size_t i = 0; i < order.size(); ++i) order[i] = i;

    for (int epoch = 0; epoch < epochs; ++epoch) {
        order_rng.shuffle(order);
        double epoch_loss = 0.0;
        std::size_t seen = 0;
        for (std::size_t start = 0; start < order.size(); start += std::size_t(batch)) {
            const std::size_t stop = std::min(order.size(), start + std::size_t(batch));
            FlowGrads grads(f);
            double batch_loss = 0.0;
            for (std::size_t k = start; k < stop; ++k) {
                FlowCache cache;
                flow_forward_cached(f, feats.row(order[k]), cache);
                batch_loss += 0.5 * dot(cache.t, cache.t) - cache.logdet;
                flow_backward(f, cache, grads);
            }
            if (!std::isfinite(batch_loss))
                throw TrainingDivergedError("train_flow: non-finite loss", epoch);
            const double inv = 1.0 / double(stop - start);
            flow_for_each_grad(grads, [&](const std::string&, Vec& g) {
                for (auto& v : g) v *= inv;
            });
            if (lr != 0.0) opt.step(f, grads);
            epoch_loss += batch_loss;
            seen += stop - start;
        }
        history.push_back(epoch_loss / double(seen));
    }
    return {std::move(f), std::move(history)};
}

// ----------------------------------------------------------------------------
// Latent transforms and NLL statistics
// ----------------------------------------------------------------------------

inline PatchFeatureSet transform_to_latent(const FlowModel& f, const PatchFeatureSet& feats,
                                           int threads = 1) {
    PatchFeatureSet out;
    out.dim = feats.dim;
    out.values.resize(feats.values.size());
    out.provenance = feats.provenance;
    parallel_for(feats.count(), threads, [&](std::size_t k) {
        const Vec t = flow_forward(f, feats.row(k)).first;
        for (std::size_t j = 0; j < out.dim; ++j) out.values[k * out.dim + j] = float(t[j]);
    });
    return out;
}

// Median/IQR of the negative log-likelihood over a reference (training) set;
// frozen after training and reused to normalize NLL at scoring time.
struct NllStats {
    double median = 0.0;
    double iqr = 1.0;
};

inline double percentile_sorted(const std::vector<double>& sorted, double q) {
    if (sorted.empty()) throw ParameterError("percentile of empty set");
    if (sorted.size() == 1) return sorted[0];
    const double pos = q * double(sorted.size() - 1);
    const std::size_t lo = std::size_t(pos);
    const std::size_t hi = std::min(lo + 1, sorted.size() - 1);
    const double frac = pos - double(lo);
    return sorted[lo] * (1.0 - frac) + sorted[hi] * frac;
}

inline NllStats compute_nll_stats(const FlowModel& f, const PatchFeatureSet& feats) {
    if (feats.count() == 0) throw ParameterError("compute_nll_stats: empty feature set");
    std::vector<double> nll(feats.count());
    for (std::size_t k = 0; k < feats.count(); ++k) nll[k] = -log_likelihood(f, feats.row(k));
    std::sort(nll.begin(), nll.end());
    NllStats st;
    st.median = percentile_sorted(nll, 0.5);
    st.iqr = std::max(percentile_sorted(nll, 0.75) - percentile_sorted(nll, 0.25), 1e-12);
    return st;
}

// ----------------------------------------------------------------------------
// TXNF checkpoint: magic "TXNF", version u16, D u32, layer count u32,
// s_max f64, then per layer the permutation (u32 x D) and the subnet tensors
// as little-endian f64.
// ----------------------------------------------------------------------------

inline void save_flow(const FlowModel& f, const std::string& path) {
    std::ofstream out(path, std::ios::binary);
    if (!out) throw ParameterError("save_flow: cannot open " + path);
    out.write("TXNF", 4);
    write_le<std::uint16_t>(out, 1);
    write_le<std::uint32_t>(out, std::uint32_t(f.dim));
    write_le<std::uint32_t>(out, std::uint32_t(f.layers.size()));
    write_le<double>(out, f.s_max);
    for (std::size_t l = 0; l < f.layers.size(); ++l) {
        for (std::uint32_t p : f.perms[l]) write_le<std::uint32_t>(out, p);
        for (const FlowSubnet* net : {&f.layers[l].scale_net, &f.layers[l].shift_net})
            for (const Vec* v : {&net->a1.w, &net->a1.b, &net->a2.w, &net->a2.b})
                for (double x : *v) write_le<double>(out, x);
    }
    if (!out) throw ParameterError("save_flow: short write to " + path);
}

inline FlowModel load_flow(const std::string& path) {
    std::ifstream in(path, std::ios::binary);
    if (!in) throw ParameterError("load_flow: cannot open " + path);
    std::size_t offset = 0;
    expect_magic(in, offset, "TXNF", "flow checkpoint");
    const auto version = read_le<std::uint16_t>(in, offset, "version");
    if (version != 1)
        throw FormatError("unsupported TXNF version " + std::to_string(version), offset - 2);
    const int dim = int(read_le<std::uint32_t>(in, offset, "dim"));
    const int n_layers = int(read_le<std::uint32_t>(in, offset, "layer count"));
    const double s_max = read_le<double>(in, offset, "s_max");
    if (dim < 2 || n_layers < 1) throw FormatError("TXNF with invalid geometry", offset);

    Rng dummy(0);
    FlowModel f;
    f.dim = dim;
    f.s_max = s_max;
    for (int l = 0; l < n_layers; ++l) {
        std::vector<std::uint32_t> perm(dim);
        std::vector<bool> seen(dim, false);
        for (auto& p : perm) {
            p = read_le<std::uint32_t>(in, offset, "permutation entry");
            if (p >= std::uint32_t(dim) || seen[p])
                throw FormatError("TXNF permutation is not a bijection", offset);
            seen[p] = true;
        }
        f.perms.push_back(std::move(perm));
        CouplingLayer layer = make_coupling(dim, s_max, dummy);
        for (FlowSubnet* net : {&layer.scale_net, &layer.shift_net})
            for (Vec* v : {&net->a1.w, &net->a1.b, &net->a2.w, &net->a2.b})
                for (auto& x : *v) x = read_le<double>(in, offset, "flow tensor");
        f.layers.push_back(std::move(layer));
    }
    return f;
}

// Writes "epoch,loss" rows; shared by the pretext and flow trainers.
inline void write_loss_history_csv(const std::vector<double>& history, const std::string& path) {
    std::ofstream out(path);
    if (!out) throw ParameterError("cannot write loss history: " + path);
    out << "epoch,loss\n";
    for (std::size_t i = 0; i < history.size(); ++i)
        out << i << ',' << fmt_double(history[i]) << '\n';
}

}  // namespace texflow
