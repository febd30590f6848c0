// ============================================================================
// features.hpp - patch feature extraction with a small conv net trained on
//                the CutPaste binary pretext task; TXAF feature interchange
// ============================================================================

#pragma once

#include <array>
#include <cmath>
#include <cstdint>
#include <fstream>
#include <optional>
#include <sstream>
#include <string>
#include <utility>
#include <vector>

#include "texflow/common.hpp"
#include "texflow/image.hpp"
#include "texflow/linalg.hpp"
#include "texflow/texgen.hpp"

namespace texflow {

// ----------------------------------------------------------------------------
// Feature containers
// ----------------------------------------------------------------------------

struct FeatureProvenance {
    std::string image_id;
    Rect rect;
};

// K x D feature matrix with per-row provenance. Values are stored as float32
// so TXAF export/import round-trips bit-exactly.
struct PatchFeatureSet {
    std::size_t dim = 0;
    std::vector<float> values;  // row-major, K x dim
    std::vector<FeatureProvenance> provenance;

    std::size_t count() const { return provenance.size(); }

    Vec row(std::size_t k) const {
        Vec v(dim);
        for (std::size_t j = 0; j < dim; ++j) v[j] = values[k * dim + j];
        return v;
    }

    void append(const Vec& v, FeatureProvenance p) {
        if (dim == 0) dim = v.size();
        if (v.size() != dim)
            throw ParameterError("PatchFeatureSet: inconsistent feature dimension");
        for (double x : v) {
            if (!std::isfinite(x)) throw ParameterError("PatchFeatureSet: non-finite feature");
            values.push_back(float(x));
        }
        provenance.push_back(std::move(p));
    }
};

// ----------------------------------------------------------------------------
// Layers (double precision, explicit backward passes)
// ----------------------------------------------------------------------------

// C x H x W tensor, contiguous.
struct Tensor3 {
    int c = 0, h = 0, w = 0;
    Vec data;

    Tensor3() = default;
    Tensor3(int c_, int h_, int w_) : c(c_), h(h_), w(w_), data(std::size_t(c_) * h_ * w_, 0.0) {}

    double& at(int ci, int y, int x) { return data[(std::size_t(ci) * h + y) * w + x]; }
    double at(int ci, int y, int x) const { return data[(std::size_t(ci) * h + y) * w + x]; }
};

// 3x3 convolution, stride 1, zero padding 1.
struct Conv2d {
    int in_c = 0, out_c = 0;
    Vec w;  // [out][in][3][3]
    Vec b;  // [out]

    Conv2d() = default;
    Conv2d(int in, int out) : in_c(in), out_c(out), w(std::size_t(out) * in * 9, 0.0), b(out, 0.0) {}

    double wt(int oc, int ic, int ky, int kx) const {
        return w[((std::size_t(oc) * in_c + ic) * 3 + ky) * 3 + kx];
    }

    Tensor3 forward(const Tensor3& x) const {
        Tensor3 y(out_c, x.h, x.w);
        for (int oc = 0; oc < out_c; ++oc) {
            for (int i = 0; i < x.h; ++i) {
                for (int j = 0; j < x.w; ++j) {
                    double s = b[oc];
                    for (int ic = 0; ic < in_c; ++ic) {
                        for (int ky = 0; ky < 3; ++ky) {
                            const int yy = i + ky - 1;
                            if (yy < 0 || yy >= x.h) continue;
                            for (int kx = 0; kx < 3; ++kx) {
                                const int xx = j + kx - 1;
                                if (xx < 0 || xx >= x.w) continue;
                                s += wt(oc, ic, ky, kx) * x.at(ic, yy, xx);
                            }
                        }
                    }
                    y.at(oc, i, j) = s;
                }
            }
        }
        return y;
    }

    // Accumulates parameter gradients into gw/gb and returns dL/dx.
    Tensor3 backward(const Tensor3& x, const Tensor3& dy, Vec& gw, Vec& gb) const {
        Tensor3 dx(x.c, x.h, x.w);
        for (int oc = 0; oc < out_c; ++oc) {
            for (int i = 0; i < x.h; ++i) {
                for (int j = 0; j < x.w; ++j) {
                    const double g = dy.at(oc, i, j);
                    if (g == 0.0) continue;
                    gb[oc] += g;
                    for (int ic = 0; ic < in_c; ++ic) {
                        for (int ky = 0; ky < 3; ++ky) {
                            const int yy = i + ky - 1;
                            if (yy < 0 || yy >= x.h) continue;
                            for (int kx = 0; kx < 3; ++kx) {
                                const int xx = j + kx - 1;
                                if (xx < 0 || xx >= x.w) continue;
                                const std::size_t wi =
                                    ((std::size_t(oc) * in_c + ic) * 3 + ky) * 3 + kx;
                                gw[wi] += g * x.at(ic, yy, xx);
                                dx.at(ic, yy, xx) += g * w[wi];
                            }
                        }
                    }
                }
            }
        }
        return dx;
    }
};

// y = W x + b with W stored row-major (out x in).
struct Affine {
    int in = 0, out = 0;
    Vec w, b;

    Affine() = default;
    Affine(int in_, int out_) : in(in_), out(out_), w(std::size_t(in_) * out_, 0.0), b(out_, 0.0) {}

    Vec forward(const Vec& x) const {
        Vec y(out);
        for (int o = 0; o < out; ++o) {
            double s = b[o];
            const double* row = &w[std::size_t(o) * in];
            for (int i = 0; i < in; ++i) s += row[i] * x[i];
            y[o] = s;
        }
        return y;
    }

    Vec backward(const Vec& x, const Vec& dy, Vec& gw, Vec& gb) const {
        Vec dx(in, 0.0);
        for (int o = 0; o < out; ++o) {
            const double g = dy[o];
            gb[o] += g;
            const double* row = &w[std::size_t(o) * in];
            double* grow = &gw[std::size_t(o) * in];
            for (int i = 0; i < in; ++i) {
                grow[i] += g * x[i];
                dx[i] += g * row[i];
            }
        }
        return dx;
    }
};

inline Tensor3 relu(const Tensor3& x) {
    Tensor3 y = x;
    for (auto& v : y.data) v = v > 0.0 ? v : 0.0;
    return y;
}

inline Tensor3 relu_backward(const Tensor3& pre, const Tensor3& dy) {
    Tensor3 dx = dy;
    for (std::size_t i = 0; i < dx.data.size(); ++i)
        if (pre.data[i] <= 0.0) dx.data[i] = 0.0;
    return dx;
}

// 2x2 average pooling, stride 2.
inline Tensor3 avgpool2(const Tensor3& x) {
    Tensor3 y(x.c, x.h / 2, x.w / 2);
    for (int c = 0; c < x.c; ++c)
        for (int i = 0; i < y.h; ++i)
            for (int j = 0; j < y.w; ++j)
                y.at(c, i, j) = 0.25 * (x.at(c, 2 * i, 2 * j) + x.at(c, 2 * i, 2 * j + 1) +
                                        x.at(c, 2 * i + 1, 2 * j) + x.at(c, 2 * i + 1, 2 * j + 1));
    return y;
}

inline Tensor3 avgpool2_backward(const Tensor3& x, const Tensor3& dy) {
    Tensor3 dx(x.c, x.h, x.w);
    for (int c = 0; c < x.c; ++c)
        for (int i = 0; i < dy.h; ++i)
            for (int j = 0; j < dy.w; ++j) {
                const double g = 0.25 * dy.at(c, i, j);
                dx.at(c, 2 * i, 2 * j) += g;
                dx.at(c, 2 * i, 2 * j + 1) += g;
                dx.at(c, 2 * i + 1, 2 * j) += g;
                dx.at(c, 2 * i + 1, 2 * j + 1) += g;
            }
    return dx;
}

inline Vec global_avgpool(const Tensor3& x) {
    Vec y(x.c, 0.0);
    const double inv = 1.0 / (double(x.h) * x.w);
    for (int c = 0; c < x.c; ++c) {
        double s = 0.0;
        for (int i = 0; i < x.h; ++i)
            for (int j = 0; j < x.w; ++j) s += x.at(c, i, j);
        y[c] = s * inv;
    }
    return y;
}

inline Tensor3 global_avgpool_backward(const Tensor3& x, const Vec& dy) {
    Tensor3 dx(x.c, x.h, x.w);
    const double inv = 1.0 / (double(x.h) * x.w);
    for (int c = 0; c < x.c; ++c) {
        const double g = dy[c] * inv;
        for (int i = 0; i < x.h; ++i)
            for (int j = 0; j < x.w; ++j) dx.at(c, i, j) = g;
    }
    return dx;
}

// ----------------------------------------------------------------------------
// Extractor: conv(8) -> pool -> conv(16) -> pool -> conv(32) -> pool ->
//            global avg pool -> affine(D) features; a 2-way affine head is
//            attached only for the pretext task.
// ----------------------------------------------------------------------------

struct ExtractorConfig {
    int input_size = 32;  // must be divisible by 8 (three stride-2 pools)
    int in_channels = 1;
    std::array<int, 3> widths{8, 16, 32};
    int feature_dim = 64;
};

class Extractor {
public:
    ExtractorConfig cfg;
    Conv2d conv1, conv2, conv3;
    Affine fc;    // widths[2] -> feature_dim
    Affine head;  // feature_dim -> 2, pretext training only

    // Test hook: scales one gradient group in backward_batch to exercise the
    // grad_check failure path.
    int debug_fault_group = -1;
    double debug_fault_scale = 1.0;

    static Extractor init(const ExtractorConfig& cfg, std::uint64_t seed) {
        if (cfg.input_size < 8 || cfg.input_size % 8 != 0)
            throw ParameterError("Extractor: input size must be a positive multiple of 8");
        if (cfg.in_channels != 1 && cfg.in_channels != 3)
            throw ParameterError("Extractor: channels must be 1 or 3");
        if (cfg.feature_dim < 1) throw ParameterError("Extractor: feature_dim must be >= 1");

        Extractor ex;
        ex.cfg = cfg;
        ex.conv1 = Conv2d(cfg.in_channels, cfg.widths[0]);
        ex.conv2 = Conv2d(cfg.widths[0], cfg.widths[1]);
        ex.conv3 = Conv2d(cfg.widths[1], cfg.widths[2]);
        ex.fc = Affine(cfg.widths[2], cfg.feature_dim);
        ex.head = Affine(cfg.feature_dim, 2);

        Rng rng(seed);
        // He-style uniform fan-in scaling keeps activation variance stable
        // through the ReLU stack.
        auto fill_fan_in = [&rng](Vec& w, int fan_in) {
            const double bound = std::sqrt(6.0 / double(fan_in));
            for (auto& v : w) v = rng.uniform(-bound, bound);
        };
        fill_fan_in(ex.conv1.w, cfg.in_channels * 9);
        fill_fan_in(ex.conv2.w, cfg.widths[0] * 9);
        fill_fan_in(ex.conv3.w, cfg.widths[1] * 9);
        fill_fan_in(ex.fc.w, cfg.widths[2]);
        fill_fan_in(ex.head.w, cfg.feature_dim);
        return ex;
    }

    Tensor3 to_tensor(const Image& patch) const {
        if (patch.height != cfg.input_size || patch.width != cfg.input_size ||
            patch.channels != cfg.in_channels)
            throw ParameterError("Extractor: patch dims do not match configured input size");
        Tensor3 t(cfg.in_channels, patch.height, patch.width);
        // center intensities so the conv stack is not dominated by the DC level
        for (int y = 0; y < patch.height; ++y)
            for (int x = 0; x < patch.width; ++x)
                for (int c = 0; c < patch.channels; ++c)
                    t.at(c, y, x) = patch.at(y, x, c) - 0.5;
        return t;
    }

    struct Cache {
        Tensor3 x0, z1, a1, p1, z2, a2, p2, z3, a3, p3;
        Vec gap, feat, logits;
    };

    void forward_cached(const Image& patch, Cache& c) const {
        c.x0 = to_tensor(patch);
        c.z1 = conv1.forward(c.x0);
        c.a1 = relu(c.z1);
        c.p1 = avgpool2(c.a1);
        c.z2 = conv2.forward(c.p1);
        c.a2 = relu(c.z2);
        c.p2 = avgpool2(c.a2);
        c.z3 = conv3.forward(c.p2);
        c.a3 = relu(c.z3);
        c.p3 = avgpool2(c.a3);
        c.gap = global_avgpool(c.p3);
        c.feat = fc.forward(c.gap);
        c.logits = head.forward(c.feat);
        for (double v : c.feat)
            if (!std::isfinite(v)) throw NumericError("Extractor: non-finite feature output");
    }

    // Deterministic pure function of (parameters, patch).
    Vec forward(const Image& patch) const {
        Cache c;
        forward_cached(patch, c);
        return c.feat;
    }

    Vec forward_logits(const Image& patch) const {
        Cache c;
        forward_cached(patch, c);
        return c.logits;
    }

    struct Grads {
        Vec conv1_w, conv1_b, conv2_w, conv2_b, conv3_w, conv3_b, fc_w, fc_b, head_w, head_b;

        explicit Grads(const Extractor& ex)
            : conv1_w(ex.conv1.w.size(), 0.0),
              conv1_b(ex.conv1.b.size(), 0.0),
              conv2_w(ex.conv2.w.size(), 0.0),
              conv2_b(ex.conv2.b.size(), 0.0),
              conv3_w(ex.conv3.w.size(), 0.0),
              conv3_b(ex.conv3.b.size(), 0.0),
              fc_w(ex.fc.w.size(), 0.0),
              fc_b(ex.fc.b.size(), 0.0),
              head_w(ex.head.w.size(), 0.0),
              head_b(ex.head.b.size(), 0.0) {}
    };

    // Backprop of dL/dlogits through the whole stack; accumulates into g.
    void backward(const Cache& c, const Vec& dlogits, Grads& g) const {
        Vec dfeat = head.backward(c.feat, dlogits, g.head_w, g.head_b);
        Vec dgap = fc.backward(c.gap, dfeat, g.fc_w, g.fc_b);
        Tensor3 dp3 = global_avgpool_backward(c.p3, dgap);
        Tensor3 da3 = avgpool2_backward(c.a3, dp3);
        Tensor3 dz3 = relu_backward(c.z3, da3);
        Tensor3 dp2 = conv3.backward(c.p2, dz3, g.conv3_w, g.conv3_b);
        Tensor3 da2 = avgpool2_backward(c.a2, dp2);
        Tensor3 dz2 = relu_backward(c.z2, da2);
        Tensor3 dp1 = conv2.backward(c.p1, dz2, g.conv2_w, g.conv2_b);
        Tensor3 da1 = avgpool2_backward(c.a1, dp1);
        Tensor3 dz1 = relu_backward(c.z1, da1);
        conv1.backward(c.x0, dz1, g.conv1_w, g.conv1_b);
        if (debug_fault_group >= 0) {
            int idx = 0;
            for_each_grad(g, [&](const char*, Vec& v) {
                if (idx++ == debug_fault_group)
                    for (auto& x : v) x *= debug_fault_scale;
            });
        }
    }

    template <typename Fn>
    void for_each_param(Fn&& fn) {
        fn("conv1.w", conv1.w);
        fn("conv1.b", conv1.b);
        fn("conv2.w", conv2.w);
        fn("conv2.b", conv2.b);
        fn("conv3.w", conv3.w);
        fn("conv3.b", conv3.b);
        fn("fc.w", fc.w);
        fn("fc.b", fc.b);
        fn("head.w", head.w);
        fn("head.b", head.b);
    }

    template <typename Fn>
    void for_each_param(Fn&& fn) const {
        fn("conv1.w", conv1.w);
        fn("conv1.b", conv1.b);
        fn("conv2.w", conv2.w);
        fn("conv2.b", conv2.b);
        fn("conv3.w", conv3.w);
        fn("conv3.b", conv3.b);
        fn("fc.w", fc.w);
        fn("fc.b", fc.b);
        fn("head.w", head.w);
        fn("head.b", head.b);
    }

    template <typename Fn>
    static void for_each_grad(Grads& g, Fn&& fn) {
        fn("conv1.w", g.conv1_w);
        fn("conv1.b", g.conv1_b);
        fn("conv2.w", g.conv2_w);
        fn("conv2.b", g.conv2_b);
        fn("conv3.w", g.conv3_w);
        fn("conv3.b", g.conv3_b);
        fn("fc.w", g.fc_w);
        fn("fc.b", g.fc_b);
        fn("head.w", g.head_w);
        fn("head.b", g.head_b);
    }
};

// ----------------------------------------------------------------------------
// Losses
// ----------------------------------------------------------------------------

// Numerically stable 2-class cross entropy; returns (loss, dlogits).
inline std::pair<double, Vec> cross_entropy2(const Vec& logits, int label) {
    const double m = std::max(logits[0], logits[1]);
    const double e0 = std::exp(logits[0] - m);
    const double e1 = std::exp(logits[1] - m);
    const double z = e0 + e1;
    const double loss = -(logits[label] - m) + std::log(z);
    Vec d{e0 / z, e1 / z};
    d[label] -= 1.0;
    return {loss, std::move(d)};
}

// Quadratic probe loss 0.5*||logits||^2, used by gradient checks: its
// gradient vanishes identically for the all-zero network, and it exercises
// every layer when parameters are non-zero.
inline std::pair<double, Vec> quadratic_logit_loss(const Vec& logits) {
    double loss = 0.0;
    for (double v : logits) loss += 0.5 * v * v;
    return {loss, logits};
}

// ----------------------------------------------------------------------------
// Gradient check
// ----------------------------------------------------------------------------

struct GradCheckGroup {
    std::string name;
    double max_rel_err = 0.0;
    std::size_t checked = 0;
};

struct GradCheckReport {
    std::vector<GradCheckGroup> groups;
    double worst_err = 0.0;
    std::string worst_group;
};

// Central finite differences (step 1e-5) on 0.5*||logits||^2 against the
// analytic backward pass. Throws CheckFailedError naming the worst parameter
// group when the relative error exceeds `tolerance`.
inline GradCheckReport grad_check(const Extractor& ex, const Image& patch, double tolerance,
                                  std::size_t max_coords_per_group = 192) {
    const double h = 1e-5;

    Extractor::Cache cache;
    ex.forward_cached(patch, cache);
    auto [loss0, dlogits] = quadratic_logit_loss(cache.logits);
    (void)loss0;
    Extractor::Grads analytic(ex);
    ex.backward(cache, dlogits, analytic);

    Extractor probe = ex;
    auto loss_at = [&]() {
        Extractor::Cache c;
        probe.forward_cached(patch, c);
        return quadratic_logit_loss(c.logits).first;
    };

    GradCheckReport report;
    std::vector<std::pair<std::string, Vec*>> groups;
    probe.for_each_param([&](const char* name, Vec& v) { groups.emplace_back(name, &v); });
    std::vector<Vec*> agrads;
    Extractor::for_each_grad(analytic, [&](const char*, Vec& v) { agrads.push_back(&v); });

    for (std::size_t gi = 0; gi < groups.size(); ++gi) {
        Vec& params = *groups[gi].second;
        const Vec& ag = *agrads[gi];
        GradCheckGroup grp;
        grp.name = groups[gi].first;

        std::vector<std::size_t> coords(params.size());
        for (std::size_t i = 0; i < coords.size(); ++i) coords[i] = i;
        if (coords.size() > max_coords_per_group) {
            Rng rng(0x5EEDULL + gi);
            rng.shuffle(coords);
            coords.resize(max_coords_per_group);
        }

        double max_abs_diff = 0.0;
        double scale = 0.0;
        for (std::size_t ci : coords) {
            const double saved = params[ci];
            params[ci] = saved + h;
            const double lp = loss_at();
            params[ci] = saved - h;
            const double lm = loss_at();
            params[ci] = saved;
            const double fd = (lp - lm) / (2.0 * h);
            max_abs_diff = std::max(max_abs_diff, std::fabs(ag[ci] - fd));
            scale = std::max({scale, std::fabs(ag[ci]), std::fabs(fd)});
        }
        grp.checked = coords.size();
        grp.max_rel_err = max_abs_diff / std::max(scale, 1e-10);
        if (grp.max_rel_err > report.worst_err) {
            report.worst_err = grp.max_rel_err;
            report.worst_group = grp.name;
        }
        report.groups.push_back(std::move(grp));
    }

    if (report.worst_err > tolerance)
        throw CheckFailedError("gradient check failed: worst parameter group " +
                               report.worst_group + " relative error " +
                               fmt_double(report.worst_err));
    return report;
}

// ----------------------------------------------------------------------------
// Pretext training (CutPaste binary classification)
// ----------------------------------------------------------------------------

struct PretextParams {
    CutPasteParams cutpaste;
    int epochs = 270;
    double lr = 1e-2;
    double momentum = 0.9;
    int batch = 2;  // must be even: half original, half cutpasted
};

struct PretextView {
    Image patch;
    int label = 0;  // 0 = original, 1 = cutpasted
};

// Builds the two views of one training image: a random input-sized crop and
// its cutpasted counterpart.
inline std::pair<PretextView, PretextView> make_pretext_pair(const Image& img,
                                                             const ExtractorConfig& cfg,
                                                             const CutPasteParams& cp,
                                                             std::uint64_t seed) {
    Rng rng(seed);
    const int s = cfg.input_size;
    if (img.height < s || img.width < s)
        throw ParameterError("pretext: image smaller than extractor input size");
    const Rect window{int(rng.uniform_int(0, img.width - s)),
                      int(rng.uniform_int(0, img.height - s)), s, s};
    Image view = crop(img, window);
    CutPasteResult cpr = cutpaste(view, cp, rng.next_u64());
    return {PretextView{std::move(view), 0}, PretextView{std::move(cpr.image), 1}};
}

struct SgdMomentum {
    double lr, momentum;
    std::vector<Vec> velocity;

    void step(Extractor& ex, Extractor::Grads& grads) {
        std::vector<Vec*> params, gs;
        ex.for_each_param([&](const char*, Vec& v) { params.push_back(&v); });
        Extractor::for_each_grad(grads, [&](const char*, Vec& v) { gs.push_back(&v); });
        if (velocity.empty())
            for (auto* p : params) velocity.emplace_back(p->size(), 0.0);
        for (std::size_t i = 0; i < params.size(); ++i) {
            Vec& v = velocity[i];
            Vec& p = *params[i];
            const Vec& g = *gs[i];
            for (std::size_t j = 0; j < p.size(); ++j) {
                v[j] = momentum * v[j] - lr * g[j];
                p[j] += v[j];
            }
        }
    }
};

// Mean cross-entropy over a fixed, seed-derived set of (original, cutpasted)
// views; used for the per-epoch loss history so it depends only on the
// parameters, not on the training batch order.
inline double pretext_eval_loss(const Extractor& ex, const LabeledDataset& images,
                                const PretextParams& pp, std::uint64_t eval_seed) {
    double total = 0.0;
    std::size_t n = 0;
    for (std::size_t i = 0; i < images.items.size(); ++i) {
        auto [orig, cut] = make_pretext_pair(images.items[i].image, ex.cfg, pp.cutpaste,
                                             stage_seed(eval_seed, "eval-" + std::to_string(i)));
        total += cross_entropy2(ex.forward_logits(orig.patch), orig.label).first;
        total += cross_entropy2(ex.forward_logits(cut.patch), cut.label).first;
        n += 2;
    }
    return total / double(n);
}

struct PretextResult {
    Extractor extractor;
    std::vector<double> loss_history;  // one entry per epoch
};

// Trains the 2-way CutPaste discriminator with SGD + momentum. Every batch
// holds equal counts of original and cutpasted views. Deterministic for a
// fixed seed.
inline PretextResult pretext_train(Extractor ex, const LabeledDataset& images,
                                   const PretextParams& pp, std::uint64_t seed) {
    if (images.items.empty()) throw ParameterError("pretext_train: empty dataset");
    for (const auto& it : images.items)
        if (it.anomalous) throw ParameterError("pretext_train: dataset must be normal-only");
    if (pp.epochs < 1) throw ParameterError("pretext_train: epochs must be >= 1");
    if (pp.batch < 2 || pp.batch % 2 != 0)
        throw ParameterError("pretext_train: batch size must be even and >= 2");

    const std::uint64_t eval_seed = stage_seed(seed, "pretext-eval");
    Rng order_rng(stage_seed(seed, "pretext-order"));
    Rng view_rng(stage_seed(seed, "pretext-views"));
    SgdMomentum opt{pp.lr, pp.momentum, {}};

    std::vector<double> history;
    const std::size_t pairs_per_batch = std::size_t(pp.batch) / 2;

    for (int epoch = 0; epoch < pp.epochs; ++epoch) {
        std::vector<std::size_t> order(images.items.size());
        for (std::size_t i = 0; i < order.size(); ++i) order[i] = i;
        order_rng.shuffle(order);

        for (std::size_t start = 0; start < order.size(); start += pairs_per_batch) {
            const std::size_t stop = std::min(order.size(), start + pairs_per_batch);
            Extractor::Grads grads(ex);
            double batch_loss = 0.0;
            std::size_t batch_n = 0;
            for (std::size_t k = start; k < stop; ++k) {
                auto [orig, cut] = make_pretext_pair(images.items[order[k]].image, ex.cfg,
                                                     pp.cutpaste, view_rng.next_u64());
                for (const PretextView* view : {&orig, &cut}) {
                    Extractor::Cache cache;
                    ex.forward_cached(view->patch, cache);
                    auto [loss, dlogits] = cross_entropy2(cache.logits, view->label);
                    batch_loss += loss;
                    ex.backward(cache, dlogits, grads);
                    ++batch_n;
                }
            }
            if (!std::isfinite(batch_loss))
                throw TrainingDivergedError("pretext_train: non-finite loss", epoch);
            const double inv = 1.0 / double(batch_n);
            Extractor::for_each_grad(grads, [&](const char*, Vec& g) {
                for (auto& v : g) v *= inv;
            });
            opt.step(ex, grads);
        }

        const double epoch_loss = pretext_eval_loss(ex, images, pp, eval_seed);
        if (!std::isfinite(epoch_loss))
            throw TrainingDivergedError("pretext_train: non-finite evaluation loss", epoch);
        history.push_back(epoch_loss);
    }
    return {std::move(ex), std::move(history)};
}

// ----------------------------------------------------------------------------
// Feature extraction over patch grids
// ----------------------------------------------------------------------------

inline PatchFeatureSet extract_features(const Extractor& ex, const Image& img,
                                        const std::string& image_id, int stride,
                                        int threads = 1) {
    const auto patches = extract_patches(img, ex.cfg.input_size, stride);
    PatchFeatureSet fs;
    fs.dim = std::size_t(ex.cfg.feature_dim);
    fs.values.resize(patches.size() * fs.dim);
    fs.provenance.resize(patches.size());
    parallel_for(patches.size(), threads, [&](std::size_t i) {
        const Vec f = ex.forward(patches[i].second);
        for (std::size_t j = 0; j < fs.dim; ++j) fs.values[i * fs.dim + j] = float(f[j]);
        fs.provenance[i] = FeatureProvenance{image_id, patches[i].first};
    });
    return fs;
}

inline void append_features(PatchFeatureSet& dst, const PatchFeatureSet& src) {
    if (dst.dim == 0) dst.dim = src.dim;
    if (dst.dim != src.dim) throw ParameterError("append_features: dimension mismatch");
    dst.values.insert(dst.values.end(), src.values.begin(), src.values.end());
    dst.provenance.insert(dst.provenance.end(), src.provenance.begin(), src.provenance.end());
}

// ----------------------------------------------------------------------------
// TXAF feature file: magic "TXAF", version u16, K u32, D u32, K*D f32 LE,
// provenance CSV block (image_id,x0,y0,w,h per row).
// ----------------------------------------------------------------------------

inline void export_features(const PatchFeatureSet& fs, const std::string& path) {
    if (fs.count() == 0) throw ParameterError("export_features: empty feature set");
    std::ofstream out(path, std::ios::binary);
    if (!out) throw ParameterError("export_features: cannot open " + path);
    out.write("TXAF", 4);
    write_le<std::uint16_t>(out, 1);
    write_le<std::uint32_t>(out, std::uint32_t(fs.count()));
    write_le<std::uint32_t>(out, std::uint32_t(fs.dim));
    for (float v : fs.values) write_le<float>(out, v);
    for (const auto& p : fs.provenance)
        out << p.image_id << ',' << p.rect.x0 << ',' << p.rect.y0 << ',' << p.rect.w << ','
            << p.rect.h << '\n';
    if (!out) throw ParameterError("export_features: short write to " + path);
}

inline PatchFeatureSet import_features(const std::string& path) {
    std::ifstream in(path, std::ios::binary);
    if (!in) throw ParameterError("import_features: cannot open " + path);
    std::size_t offset = 0;
    expect_magic(in, offset, "TXAF", "feature file");
    const auto version = read_le<std::uint16_t>(in, offset, "version");
    if (version != 1)
        throw FormatError("unsupported TXAF version " + std::to_string(version), offset - 2);
    const auto k = read_le<std::uint32_t>(in, offset, "row count");
    const auto d = read_le<std::uint32_t>(in, offset, "feature dimension");
    if (k == 0 || d == 0) throw FormatError("TXAF with zero rows or dimension", offset);

    PatchFeatureSet fs;
    fs.dim = d;
    fs.values.resize(std::size_t(k) * d);
    for (auto& v : fs.values) v = read_le<float>(in, offset, "feature value");

    fs.provenance.reserve(k);
    std::string line;
    while (std::getline(in, line) && fs.provenance.size() < k) {
        std::stringstream ss(line);
        FeatureProvenance p;
        std::string field;
        if (!std::getline(ss, p.image_id, ',')) break;
        try {
            std::getline(ss, field, ',');
            p.rect.x0 = std::stoi(field);
            std::getline(ss, field, ',');
            p.rect.y0 = std::stoi(field);
            std::getline(ss, field, ',');
            p.rect.w = std::stoi(field);
            std::getline(ss, field, ',');
            p.rect.h = std::stoi(field);
        } catch (const std::exception&) {
            throw FormatError("bad provenance row in TXAF", offset);
        }
        offset += line.size() + 1;
        fs.provenance.push_back(std::move(p));
    }
    if (fs.provenance.size() != k)
        throw FormatError("TXAF provenance truncated: expected " + std::to_string(k) +
                              " rows, got " + std::to_string(fs.provenance.size()),
                          offset);
    return fs;
}

// ----------------------------------------------------------------------------
// TXEX extractor checkpoint: magic "TXEX", version u16, geometry u32 fields,
// then parameter tensors as little-endian f64 in declaration order.
// ----------------------------------------------------------------------------

inline void save_extractor(const Extractor& ex, const std::string& path) {
    std::ofstream out(path, std::ios::binary);
    if (!out) throw ParameterError("save_extractor: cannot open " + path);
    out.write("TXEX", 4);
    write_le<std::uint16_t>(out, 1);
    write_le<std::uint32_t>(out, std::uint32_t(ex.cfg.input_size));
    write_le<std::uint32_t>(out, std::uint32_t(ex.cfg.in_channels));
    for (int w : ex.cfg.widths) write_le<std::uint32_t>(out, std::uint32_t(w));
    write_le<std::uint32_t>(out, std::uint32_t(ex.cfg.feature_dim));
    ex.for_each_param([&](const char*, const Vec& v) {
        for (double x : v) write_le<double>(out, x);
    });
    if (!out) throw ParameterError("save_extractor: short write to " + path);
}

inline Extractor load_extractor(const std::string& path) {
    std::ifstream in(path, std::ios::binary);
    if (!in) throw ParameterError("load_extractor: cannot open " + path);
    std::size_t offset = 0;
    expect_magic(in, offset, "TXEX", "extractor checkpoint");
    const auto version = read_le<std::uint16_t>(in, offset, "version");
    if (version != 1)
        throw FormatError("unsupported TXEX version " + std::to_string(version), offset - 2);
    ExtractorConfig cfg;
    cfg.input_size = int(read_le<std::uint32_t>(in, offset, "input size"));
    cfg.in_channels = int(read_le<std::uint32_t>(in, offset, "channels"));
    for (auto& w : cfg.widths) w = int(read_le<std::uint32_t>(in, offset, "width"));
    cfg.feature_dim = int(read_le<std::uint32_t>(in, offset, "feature dim"));
    Extractor ex = Extractor::init(cfg, 0);
    ex.for_each_param([&](const char* name, Vec& v) {
        for (auto& x : v) x = read_le<double>(in, offset, std::string("tensor ") + name);
    });
    return ex;
}

}  // namespace texflow
