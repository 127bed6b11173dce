#include "lfusion/autonet.hpp"

#include <algorithm>
#include <cmath>
#include <cstdio>
#include <cstring>
#include <fstream>
#include <sstream>

namespace lfusion {

namespace {

constexpr double kBnEps = 1e-5;
constexpr double kBnMomentum = 0.1;

void require(bool ok, const std::string& msg) {
    if (!ok) throw DataError(msg);
}

// ---- layer bookkeeping ----------------------------------------------------

const char* kind_name(LayerKind k) {
    switch (k) {
        case LayerKind::Conv2d: return "conv2d";
        case LayerKind::Conv3d: return "conv3d";
        case LayerKind::BatchNorm2d: return "batchnorm2d";
        case LayerKind::BatchNorm3d: return "batchnorm3d";
        case LayerKind::Relu: return "relu";
        case LayerKind::Upsample2x: return "upsample2x";
        case LayerKind::Dropout: return "dropout";
        case LayerKind::Bias: return "bias";
    }
    return "?";
}

std::vector<std::size_t> layer_output_shape(const LayerSpec& L,
                                            const std::vector<std::size_t>& in) {
    auto conv_extent = [&](std::size_t e) {
        int p = (L.kernel - 1) / 2;
        long long out = (static_cast<long long>(e) + 2 * p - L.kernel) / L.stride + 1;
        require(out >= 1, "conv output extent collapsed to zero");
        return static_cast<std::size_t>(out);
    };
    switch (L.kind) {
        case LayerKind::Conv2d:
            require(in.size() == 3 && in[0] == static_cast<std::size_t>(L.in_channels),
                    "conv2d input shape mismatch");
            return {static_cast<std::size_t>(L.out_channels), conv_extent(in[1]),
                    conv_extent(in[2])};
        case LayerKind::Conv3d:
            require(in.size() == 4 && in[0] == static_cast<std::size_t>(L.in_channels),
                    "conv3d input shape mismatch");
            return {static_cast<std::size_t>(L.out_channels), in[1], conv_extent(in[2]),
                    conv_extent(in[3])};
        case LayerKind::BatchNorm2d:
            require(in.size() == 3 && in[0] == static_cast<std::size_t>(L.in_channels),
                    "batchnorm2d input shape mismatch");
            return in;
        case LayerKind::BatchNorm3d:
            require(in.size() == 4 && in[0] == static_cast<std::size_t>(L.in_channels),
                    "batchnorm3d input shape mismatch");
            return in;
        case LayerKind::Relu:
            return in;
        case LayerKind::Upsample2x: {
            require(in.size() >= 2, "upsample2x needs at least two axes");
            auto out = in;
            out[in.size() - 2] *= 2;
            out[in.size() - 1] *= 2;
            return out;
        }
        case LayerKind::Dropout:
            return in;
        case LayerKind::Bias:
            require(!in.empty() && in[0] == static_cast<std::size_t>(L.in_channels),
                    "bias input shape mismatch");
            return in;
    }
    throw DataError("unknown layer kind");
}

std::vector<std::vector<std::size_t>> param_shapes(const LayerSpec& L) {
    std::size_t ci = static_cast<std::size_t>(L.in_channels);
    std::size_t co = static_cast<std::size_t>(L.out_channels);
    std::size_t k = static_cast<std::size_t>(L.kernel);
    switch (L.kind) {
        case LayerKind::Conv2d: return {{co, ci, k, k}, {co}};
        case LayerKind::Conv3d: return {{co, ci, k, k, k}, {co}};
        case LayerKind::BatchNorm2d:
        case LayerKind::BatchNorm3d: return {{ci}, {ci}};
        case LayerKind::Bias: return {{ci}};
        default: return {};
    }
}

std::vector<std::vector<std::size_t>> buffer_shapes(const LayerSpec& L) {
    if (L.kind == LayerKind::BatchNorm2d || L.kind == LayerKind::BatchNorm3d) {
        std::size_t c = static_cast<std::size_t>(L.in_channels);
        return {{c}, {c}};
    }
    return {};
}

Network network_skeleton(const std::vector<LayerSpec>& layers) {
    Network net;
    net.layers = layers;
    net.params.resize(layers.size());
    net.buffers.resize(layers.size());
    for (std::size_t i = 0; i < layers.size(); ++i) {
        for (const auto& s : param_shapes(layers[i])) net.params[i].emplace_back(s, 0.0f);
        for (const auto& s : buffer_shapes(layers[i])) net.buffers[i].emplace_back(s, 0.0f);
        const LayerSpec& L = layers[i];
        if (L.kind == LayerKind::BatchNorm2d || L.kind == LayerKind::BatchNorm3d) {
            net.params[i][0].fill(1.0f);   // gamma
            net.buffers[i][1].fill(1.0f);  // running variance
        }
    }
    return net;
}

// ---- convolution kernels --------------------------------------------------

// Valid output-column range for input width w: lo <= ox < hi such that
// 0 <= ox*stride + off < w.
void col_bounds(int w, int ow, int stride, int off, int& lo, int& hi) {
    lo = off < 0 ? (-off + stride - 1) / stride : 0;
    int last = w - 1 - off;
    hi = last < 0 ? lo : std::min(ow, last / stride + 1);
    if (hi < lo) hi = lo;
}

void conv2d_fwd(const float* x, float* y, const float* W, const float* b, int ci, int h,
                int w, int co, int k, int s, int oh, int ow) {
    int p = (k - 1) / 2;
    for (int o = 0; o < co; ++o) {
        float bo = b ? b[o] : 0.0f;
        float* yo = y + static_cast<std::size_t>(o) * oh * ow;
        std::fill(yo, yo + static_cast<std::size_t>(oh) * ow, bo);
    }
    for (int o = 0; o < co; ++o) {
        float* yo = y + static_cast<std::size_t>(o) * oh * ow;
        for (int i = 0; i < ci; ++i) {
            const float* xi = x + static_cast<std::size_t>(i) * h * w;
            const float* wk = W + (static_cast<std::size_t>(o) * ci + i) * k * k;
            for (int ky = 0; ky < k; ++ky)
                for (int kx = 0; kx < k; ++kx) {
                    float wv = wk[ky * k + kx];
                    int off = kx - p;
                    int lo, hi;
                    col_bounds(w, ow, s, off, lo, hi);
                    for (int oy = 0; oy < oh; ++oy) {
                        int iy = oy * s + ky - p;
                        if (iy < 0 || iy >= h) continue;
                        const float* xr = xi + static_cast<std::size_t>(iy) * w;
                        float* yr = yo + static_cast<std::size_t>(oy) * ow;
                        if (s == 1) {
                            const float* xo = xr + off;
                            for (int ox = lo; ox < hi; ++ox) yr[ox] += wv * xo[ox];
                        } else {
                            for (int ox = lo; ox < hi; ++ox) yr[ox] += wv * xr[ox * s + off];
                        }
                    }
                }
        }
    }
}

void conv2d_bwd(const float* x, const float* gy, const float* W, float* gW, float* gb,
                float* gx, int ci, int h, int w, int co, int k, int s, int oh, int ow) {
    int p = (k - 1) / 2;
    for (int o = 0; o < co; ++o) {
        const float* gyo = gy + static_cast<std::size_t>(o) * oh * ow;
        double acc = 0.0;
        for (int i = 0; i < oh * ow; ++i) acc += gyo[i];
        gb[o] += static_cast<float>(acc);
    }
    for (int o = 0; o < co; ++o) {
        const float* gyo = gy + static_cast<std::size_t>(o) * oh * ow;
        for (int i = 0; i < ci; ++i) {
            const float* xi = x + static_cast<std::size_t>(i) * h * w;
            float* gxi = gx + static_cast<std::size_t>(i) * h * w;
            const float* wk = W + (static_cast<std::size_t>(o) * ci + i) * k * k;
            float* gwk = gW + (static_cast<std::size_t>(o) * ci + i) * k * k;
            for (int ky = 0; ky < k; ++ky)
                for (int kx = 0; kx < k; ++kx) {
                    float wv = wk[ky * k + kx];
                    int off = kx - p;
                    int lo, hi;
                    col_bounds(w, ow, s, off, lo, hi);
                    double gwv = 0.0;
                    for (int oy = 0; oy < oh; ++oy) {
                        int iy = oy * s + ky - p;
                        if (iy < 0 || iy >= h) continue;
                        const float* xr = xi + static_cast<std::size_t>(iy) * w;
                        float* gxr = gxi + static_cast<std::size_t>(iy) * w;
                        const float* gyr = gyo + static_cast<std::size_t>(oy) * ow;
                        for (int ox = lo; ox < hi; ++ox) {
                            int ix = ox * s + off;
                            gwv += static_cast<double>(gyr[ox]) * xr[ix];
                            gxr[ix] += wv * gyr[ox];
                        }
                    }
                    gwk[ky * k + kx] += static_cast<float>(gwv);
                }
        }
    }
}

void conv3d_fwd(const float* x, float* y, const float* W, const float* b, int ci, int T,
                int h, int w, int co, int k, int s, int oh, int ow) {
    int p = (k - 1) / 2;
    std::size_t oplane = static_cast<std::size_t>(oh) * ow;
    std::size_t iplane = static_cast<std::size_t>(h) * w;
    for (int o = 0; o < co; ++o) {
        float bo = b ? b[o] : 0.0f;
        float* yo = y + static_cast<std::size_t>(o) * T * oplane;
        std::fill(yo, yo + static_cast<std::size_t>(T) * oplane, bo);
    }
    for (int o = 0; o < co; ++o) {
        float* yo = y + static_cast<std::size_t>(o) * T * oplane;
        for (int i = 0; i < ci; ++i) {
            const float* xi = x + static_cast<std::size_t>(i) * T * iplane;
            const float* wk = W + (static_cast<std::size_t>(o) * ci + i) * k * k * k;
            for (int kt = 0; kt < k; ++kt)
                for (int ky = 0; ky < k; ++ky)
                    for (int kx = 0; kx < k; ++kx) {
                        float wv = wk[(kt * k + ky) * k + kx];
                        int off = kx - p;
                        int lo, hi;
                        col_bounds(w, ow, s, off, lo, hi);
                        for (int t = 0; t < T; ++t) {
                            int it = t + kt - p;  // temporal stride fixed at 1
                            if (it < 0 || it >= T) continue;
                            const float* xt = xi + static_cast<std::size_t>(it) * iplane;
                            float* yt = yo + static_cast<std::size_t>(t) * oplane;
                            for (int oy = 0; oy < oh; ++oy) {
                                int iy = oy * s + ky - p;
                                if (iy < 0 || iy >= h) continue;
                                const float* xr = xt + static_cast<std::size_t>(iy) * w;
                                float* yr = yt + static_cast<std::size_t>(oy) * ow;
                                if (s == 1) {
                                    const float* xo = xr + off;
                                    for (int ox = lo; ox < hi; ++ox) yr[ox] += wv * xo[ox];
                                } else {
                                    for (int ox = lo; ox < hi; ++ox)
                                        yr[ox] += wv * xr[ox * s + off];
                                }
                            }
                        }
                    }
        }
    }
}

void conv3d_bwd(const float* x, const float* gy, const float* W, float* gW, float* gb,
                float* gx, int ci, int T, int h, int w, int co, int k, int s, int oh,
                int ow) {
    int p = (k - 1) / 2;
    std::size_t oplane = static_cast<std::size_t>(oh) * ow;
    std::size_t iplane = static_cast<std::size_t>(h) * w;
    for (int o = 0; o < co; ++o) {
        const float* gyo = gy + static_cast<std::size_t>(o) * T * oplane;
        double acc = 0.0;
        for (std::size_t i = 0; i < static_cast<std::size_t>(T) * oplane; ++i) acc += gyo[i];
        gb[o] += static_cast<float>(acc);
    }
    for (int o = 0; o < co; ++o) {
        const float* gyo = gy + static_cast<std::size_t>(o) * T * oplane;
        for (int i = 0; i < ci; ++i) {
            const float* xi = x + static_cast<std::size_t>(i) * T * iplane;
            float* gxi = gx + static_cast<std::size_t>(i) * T * iplane;
            const float* wk = W + (static_cast<std::size_t>(o) * ci + i) * k * k * k;
            float* gwk = gW + (static_cast<std::size_t>(o) * ci + i) * k * k * k;
            for (int kt = 0; kt < k; ++kt)
                for (int ky = 0; ky < k; ++ky)
                    for (int kx = 0; kx < k; ++kx) {
                        float wv = wk[(kt * k + ky) * k + kx];
                        int off = kx - p;
                        int lo, hi;
                        col_bounds(w, ow, s, off, lo, hi);
                        double gwv = 0.0;
                        for (int t = 0; t < T; ++t) {
                            int it = t + kt - p;
                            if (it < 0 || it >= T) continue;
                            const float* xt = xi + static_cast<std::size_t>(it) * iplane;
                            float* gxt = gxi + static_cast<std::size_t>(it) * iplane;
                            const float* gyt = gyo + static_cast<std::size_t>(t) * oplane;
                            for (int oy = 0; oy < oh; ++oy) {
                                int iy = oy * s + ky - p;
                                if (iy < 0 || iy >= h) continue;
                                const float* xr = xt + static_cast<std::size_t>(iy) * w;
                                float* gxr = gxt + static_cast<std::size_t>(iy) * w;
                                const float* gyr = gyt + static_cast<std::size_t>(oy) * ow;
                                for (int ox = lo; ox < hi; ++ox) {
                                    int ix = ox * s + off;
                                    gwv += static_cast<double>(gyr[ox]) * xr[ix];
                                    gxr[ix] += wv * gyr[ox];
                                }
                            }
                        }
                        gwk[(kt * k + ky) * k + kx] += static_cast<float>(gwv);
                    }
        }
    }
}

// ---- elementwise layers ---------------------------------------------------

void upsample_fwd(const Tensor& x, Tensor& y) {
    std::size_t nd = x.ndim();
    std::size_t h = x.extent(nd - 2), w = x.extent(nd - 1);
    std::size_t lead = x.numel() / (h * w);
    for (std::size_t c = 0; c < lead; ++c) {
        const float* xi = x.data() + c * h * w;
        float* yo = y.data() + c * 4 * h * w;
        for (std::size_t oy = 0; oy < 2 * h; ++oy) {
            const float* xr = xi + (oy / 2) * w;
            float* yr = yo + oy * 2 * w;
            for (std::size_t ox = 0; ox < 2 * w; ++ox) yr[ox] = xr[ox / 2];
        }
    }
}

void upsample_bwd(const Tensor& gy, Tensor& gx) {
    std::size_t nd = gx.ndim();
    std::size_t h = gx.extent(nd - 2), w = gx.extent(nd - 1);
    std::size_t lead = gx.numel() / (h * w);
    for (std::size_t c = 0; c < lead; ++c) {
        float* gxi = gx.data() + c * h * w;
        const float* gyo = gy.data() + c * 4 * h * w;
        for (std::size_t oy = 0; oy < 2 * h; ++oy) {
            float* gxr = gxi + (oy / 2) * w;
            const float* gyr = gyo + oy * 2 * w;
            for (std::size_t ox = 0; ox < 2 * w; ++ox) gxr[ox / 2] += gyr[ox];
        }
    }
}

// Per-channel batch mean/variance (biased) over all trailing axes.
void bn_batch_stats(const Tensor& x, std::size_t c, std::vector<double>& mean,
                    std::vector<double>& var) {
    std::size_t n = x.numel() / c;
    mean.assign(c, 0.0);
    var.assign(c, 0.0);
    for (std::size_t ch = 0; ch < c; ++ch) {
        const float* p = x.data() + ch * n;
        double s = 0.0, s2 = 0.0;
        for (std::size_t i = 0; i < n; ++i) {
            s += p[i];
            s2 += static_cast<double>(p[i]) * p[i];
        }
        mean[ch] = s / static_cast<double>(n);
        var[ch] = std::max(0.0, s2 / static_cast<double>(n) - mean[ch] * mean[ch]);
    }
}

}  // namespace

// ---- LayerSpec factories --------------------------------------------------

LayerSpec LayerSpec::conv2d(int in_c, int out_c, int kernel, int stride) {
    if (in_c < 1 || out_c < 1 || kernel < 1 || kernel % 2 == 0 || stride < 1)
        throw ConfigError("conv2d needs positive channels, odd kernel, positive stride");
    return {LayerKind::Conv2d, in_c, out_c, kernel, stride, 0.0};
}

LayerSpec LayerSpec::conv3d(int in_c, int out_c, int kernel, int stride) {
    if (in_c < 1 || out_c < 1 || kernel < 1 || kernel % 2 == 0 || stride < 1)
        throw ConfigError("conv3d needs positive channels, odd kernel, positive stride");
    return {LayerKind::Conv3d, in_c, out_c, kernel, stride, 0.0};
}

LayerSpec LayerSpec::batchnorm2d(int channels) {
    if (channels < 1) throw ConfigError("batchnorm2d needs positive channels");
    return {LayerKind::BatchNorm2d, channels, channels, 1, 1, 0.0};
}

LayerSpec LayerSpec::batchnorm3d(int channels) {
    if (channels < 1) throw ConfigError("batchnorm3d needs positive channels");
    return {LayerKind::BatchNorm3d, channels, channels, 1, 1, 0.0};
}

LayerSpec LayerSpec::relu() { return {LayerKind::Relu, 0, 0, 1, 1, 0.0}; }

LayerSpec LayerSpec::upsample2x() { return {LayerKind::Upsample2x, 0, 0, 1, 1, 0.0}; }

LayerSpec LayerSpec::dropout(double rate) {
    if (!(rate >= 0.0 && rate < 1.0)) throw ConfigError("dropout rate must be in [0, 1)");
    return {LayerKind::Dropout, 0, 0, 1, 1, rate};
}

LayerSpec LayerSpec::bias(int channels) {
    if (channels < 1) throw ConfigError("bias needs positive channels");
    return {LayerKind::Bias, channels, channels, 1, 1, 0.0};
}

// ---- Network --------------------------------------------------------------

std::size_t Network::param_count() const {
    std::size_t n = 0;
    for (const auto& group : params)
        for (const auto& t : group) n += t.numel();
    return n;
}

std::uint64_t Network::signature() const {
    std::uint64_t h = 0xcbf29ce484222325ULL;
    for (const auto& L : layers) {
        std::uint64_t fields[5] = {static_cast<std::uint64_t>(L.kind),
                                   static_cast<std::uint64_t>(L.in_channels),
                                   static_cast<std::uint64_t>(L.out_channels),
                                   static_cast<std::uint64_t>(L.kernel),
                                   static_cast<std::uint64_t>(L.stride)};
        h = fnv1a64(fields, sizeof(fields), h);
        double r = L.rate;
        h = fnv1a64(&r, sizeof(r), h);
    }
    return h;
}

Network network_new(const std::vector<LayerSpec>& layers, RngStream& init_rng) {
    Network net = network_skeleton(layers);
    for (std::size_t i = 0; i < layers.size(); ++i) {
        const LayerSpec& L = layers[i];
        if (L.kind == LayerKind::Conv2d || L.kind == LayerKind::Conv3d) {
            Tensor& W = net.params[i][0];
            std::size_t fan_in = W.numel() / static_cast<std::size_t>(L.out_channels);
            double scale = std::sqrt(2.0 / static_cast<double>(fan_in));
            for (std::size_t j = 0; j < W.numel(); ++j)
                W[j] = static_cast<float>(scale * rng_normal(init_rng));
        }
    }
    return net;
}

// ---- forward --------------------------------------------------------------

Activations forward(Network& net, const Tensor& x, Mode mode, RngStream* rng) {
    bool needs_rng = false;
    if (mode != Mode::Eval)
        for (const auto& L : net.layers)
            if (L.kind == LayerKind::Dropout && L.rate > 0.0) needs_rng = true;
    if (needs_rng && rng == nullptr)
        throw ConfigError("forward: dropout is active but no rng stream was given");

    Activations A;
    A.mode = mode;
    A.net_signature = net.signature();
    A.acts.reserve(net.layers.size() + 1);
    A.acts.push_back(x);
    A.masks.resize(net.layers.size());
    A.bn_mean.resize(net.layers.size());
    A.bn_var.resize(net.layers.size());

    for (std::size_t li = 0; li < net.layers.size(); ++li) {
        const LayerSpec& L = net.layers[li];
        const Tensor& in = A.acts.back();
        Tensor out(layer_output_shape(L, in.shape()), 0.0f);

        switch (L.kind) {
            case LayerKind::Conv2d: {
                conv2d_fwd(in.data(), out.data(), net.params[li][0].data(),
                           net.params[li][1].data(), L.in_channels,
                           static_cast<int>(in.extent(1)), static_cast<int>(in.extent(2)),
                           L.out_channels, L.kernel, L.stride,
                           static_cast<int>(out.extent(1)), static_cast<int>(out.extent(2)));
                break;
            }
            case LayerKind::Conv3d: {
                conv3d_fwd(in.data(), out.data(), net.params[li][0].data(),
                           net.params[li][1].data(), L.in_channels,
                           static_cast<int>(in.extent(1)), static_cast<int>(in.extent(2)),
                           static_cast<int>(in.extent(3)), L.out_channels, L.kernel,
                           L.stride, static_cast<int>(out.extent(2)),
                           static_cast<int>(out.extent(3)));
                break;
            }
            case LayerKind::BatchNorm2d:
            case LayerKind::BatchNorm3d: {
                std::size_t c = in.extent(0);
                std::size_t n = in.numel() / c;
                const float* gamma = net.params[li][0].data();
                const float* beta = net.params[li][1].data();
                if (mode == Mode::Eval) {
                    const float* rm = net.buffers[li][0].data();
                    const float* rv = net.buffers[li][1].data();
                    for (std::size_t ch = 0; ch < c; ++ch) {
                        float inv = static_cast<float>(1.0 / std::sqrt(rv[ch] + kBnEps));
                        const float* pi = in.data() + ch * n;
                        float* po = out.data() + ch * n;
                        for (std::size_t i = 0; i < n; ++i)
                            po[i] = gamma[ch] * (pi[i] - rm[ch]) * inv + beta[ch];
                    }
                } else {
                    std::vector<double> mean, var;
                    bn_batch_stats(in, c, mean, var);
                    Tensor mt({c}, 0.0f), vt({c}, 0.0f);
                    for (std::size_t ch = 0; ch < c; ++ch) {
                        mt[ch] = static_cast<float>(mean[ch]);
                        vt[ch] = static_cast<float>(var[ch]);
                        float inv = static_cast<float>(1.0 / std::sqrt(var[ch] + kBnEps));
                        float m = static_cast<float>(mean[ch]);
                        const float* pi = in.data() + ch * n;
                        float* po = out.data() + ch * n;
                        for (std::size_t i = 0; i < n; ++i)
                            po[i] = gamma[ch] * (pi[i] - m) * inv + beta[ch];
                    }
                    A.bn_mean[li] = mt;
                    A.bn_var[li] = vt;
                    if (mode == Mode::Train) {
                        float* rm = net.buffers[li][0].data();
                        float* rv = net.buffers[li][1].data();
                        for (std::size_t ch = 0; ch < c; ++ch) {
                            rm[ch] = static_cast<float>((1.0 - kBnMomentum) * rm[ch] +
                                                        kBnMomentum * mean[ch]);
                            rv[ch] = static_cast<float>((1.0 - kBnMomentum) * rv[ch] +
                                                        kBnMomentum * var[ch]);
                        }
                    }
                }
                break;
            }
            case LayerKind::Relu: {
                for (std::size_t i = 0; i < in.numel(); ++i)
                    out[i] = in[i] > 0.0f ? in[i] : 0.0f;
                break;
            }
            case LayerKind::Upsample2x: {
                upsample_fwd(in, out);
                break;
            }
            case LayerKind::Dropout: {
                if (mode == Mode::Eval || L.rate == 0.0) {
                    out = in;
                } else {
                    float inv_keep = static_cast<float>(1.0 / (1.0 - L.rate));
                    Tensor mask(in.shape(), 0.0f);
                    for (std::size_t i = 0; i < in.numel(); ++i) {
                        bool keep = rng_uniform(*rng) >= L.rate;
                        mask[i] = keep ? 1.0f : 0.0f;
                        out[i] = keep ? in[i] * inv_keep : 0.0f;
                    }
                    A.masks[li] = std::move(mask);
                }
                break;
            }
            case LayerKind::Bias: {
                std::size_t c = in.extent(0);
                std::size_t n = in.numel() / c;
                const float* b = net.params[li][0].data();
                for (std::size_t ch = 0; ch < c; ++ch) {
                    const float* pi = in.data() + ch * n;
                    float* po = out.data() + ch * n;
                    for (std::size_t i = 0; i < n; ++i) po[i] = pi[i] + b[ch];
                }
                break;
            }
        }
        ensure_finite(out, std::string("activation after ") + kind_name(L.kind));
        A.acts.push_back(std::move(out));
    }
    return A;
}

Tensor forward_eval(const Network& net, const Tensor& x) {
    // Eval mode never mutates parameters or running statistics.
    Activations A = forward(const_cast<Network&>(net), x, Mode::Eval, nullptr);
    return std::move(A.acts.back());
}

// ---- backward -------------------------------------------------------------

GradBundle backward(const Network& net, const Activations& A, const Tensor& grad_out) {
    if (A.net_signature != net.signature() || A.acts.size() != net.layers.size() + 1)
        throw DataError("backward: activations do not belong to this network");
    if (!grad_out.same_shape(A.acts.back()))
        throw DataError("backward: grad_out shape mismatch");

    GradBundle g;
    g.param_grads.resize(net.layers.size());
    for (std::size_t i = 0; i < net.layers.size(); ++i)
        for (const auto& p : net.params[i]) g.param_grads[i].emplace_back(p.shape(), 0.0f);

    Tensor gy = grad_out;
    for (std::size_t s = net.layers.size(); s-- > 0;) {
        const LayerSpec& L = net.layers[s];
        const Tensor& in = A.acts[s];
        Tensor gx(in.shape(), 0.0f);

        switch (L.kind) {
            case LayerKind::Conv2d: {
                conv2d_bwd(in.data(), gy.data(), net.params[s][0].data(),
                           g.param_grads[s][0].data(), g.param_grads[s][1].data(),
                           gx.data(), L.in_channels, static_cast<int>(in.extent(1)),
                           static_cast<int>(in.extent(2)), L.out_channels, L.kernel,
                           L.stride, static_cast<int>(gy.extent(1)),
                           static_cast<int>(gy.extent(2)));
                break;
            }
            case LayerKind::Conv3d: {
                conv3d_bwd(in.data(), gy.data(), net.params[s][0].data(),
                           g.param_grads[s][0].data(), g.param_grads[s][1].data(),
                           gx.data(), L.in_channels, static_cast<int>(in.extent(1)),
                           static_cast<int>(in.extent(2)), static_cast<int>(in.extent(3)),
                           L.out_channels, L.kernel, L.stride,
                           static_cast<int>(gy.extent(2)), static_cast<int>(gy.extent(3)));
                break;
            }
            case LayerKind::BatchNorm2d:
            case LayerKind::BatchNorm3d: {
                std::size_t c = in.extent(0);
                std::size_t n = in.numel() / c;
                const float* gamma = net.params[s][0].data();
                float* ggamma = g.param_grads[s][0].data();
                float* gbeta = g.param_grads[s][1].data();
                bool train_stats = A.mode != Mode::Eval && A.bn_mean[s].has_value();
                for (std::size_t ch = 0; ch < c; ++ch) {
                    const float* pi = in.data() + ch * n;
                    const float* pg = gy.data() + ch * n;
                    float* pgx = gx.data() + ch * n;
                    double m, v;
                    if (train_stats) {
                        m = (*A.bn_mean[s])[ch];
                        v = (*A.bn_var[s])[ch];
                    } else {
                        m = net.buffers[s][0][ch];
                        v = net.buffers[s][1][ch];
                    }
                    double inv = 1.0 / std::sqrt(v + kBnEps);
                    double sum_g = 0.0, sum_gx = 0.0;
                    for (std::size_t i = 0; i < n; ++i) {
                        double xh = (pi[i] - m) * inv;
                        sum_g += pg[i];
                        sum_gx += pg[i] * xh;
                    }
                    gbeta[ch] += static_cast<float>(sum_g);
                    ggamma[ch] += static_cast<float>(sum_gx);
                    if (train_stats) {
                        // d/dx of the full normalization (mean and variance
                        // both depend on x).
                        double mg = sum_g / static_cast<double>(n);
                        double mgx = sum_gx / static_cast<double>(n);
                        for (std::size_t i = 0; i < n; ++i) {
                            double xh = (pi[i] - m) * inv;
                            pgx[i] = static_cast<float>(gamma[ch] * inv *
                                                        (pg[i] - mg - xh * mgx));
                        }
                    } else {
                        // Frozen statistics: plain affine map.
                        for (std::size_t i = 0; i < n; ++i)
                            pgx[i] = static_cast<float>(gamma[ch] * inv * pg[i]);
                    }
                }
                break;
            }
            case LayerKind::Relu: {
                for (std::size_t i = 0; i < in.numel(); ++i)
                    gx[i] = in[i] > 0.0f ? gy[i] : 0.0f;
                break;
            }
            case LayerKind::Upsample2x: {
                upsample_bwd(gy, gx);
                break;
            }
            case LayerKind::Dropout: {
                bool active = A.mode != Mode::Eval && L.rate > 0.0;
                if (!active) {
                    gx = gy;
                } else {
                    if (!A.masks[s].has_value())
                        throw DataError("backward: dropout mask missing from activations");
                    const Tensor& mask = *A.masks[s];
                    if (!mask.same_shape(in))
                        throw DataError("backward: dropout mask shape mismatch");
                    float inv_keep = static_cast<float>(1.0 / (1.0 - L.rate));
                    for (std::size_t i = 0; i < in.numel(); ++i)
                        gx[i] = gy[i] * mask[i] * inv_keep;
                }
                break;
            }
            case LayerKind::Bias: {
                std::size_t c = in.extent(0);
                std::size_t n = in.numel() / c;
                float* gb = g.param_grads[s][0].data();
                for (std::size_t ch = 0; ch < c; ++ch) {
                    const float* pg = gy.data() + ch * n;
                    double acc = 0.0;
                    for (std::size_t i = 0; i < n; ++i) acc += pg[i];
                    gb[ch] += static_cast<float>(acc);
                }
                gx = gy;
                break;
            }
        }
        gy = std::move(gx);
    }
    g.input_grad = std::move(gy);
    return g;
}

void GradBundle::accumulate(const GradBundle& other, double scale) {
    for (std::size_t i = 0; i < param_grads.size(); ++i)
        for (std::size_t j = 0; j < param_grads[i].size(); ++j)
            param_grads[i][j].add_scaled(other.param_grads[i][j],
                                         static_cast<float>(scale));
    if (!input_grad.empty() && input_grad.same_shape(other.input_grad))
        input_grad.add_scaled(other.input_grad, static_cast<float>(scale));
}

// ---- optimizer ------------------------------------------------------------

void optimizer_step(Network& net, const GradBundle& grads, const OptimConfig& cfg,
                    OptimState& state) {
    if (state.velocity.empty()) {
        state.velocity.resize(net.params.size());
        for (std::size_t i = 0; i < net.params.size(); ++i)
            for (const auto& p : net.params[i])
                state.velocity[i].emplace_back(p.shape(), 0.0f);
    }
    for (std::size_t i = 0; i < net.params.size(); ++i) {
        for (std::size_t j = 0; j < net.params[i].size(); ++j) {
            Tensor& th = net.params[i][j];
            Tensor& v = state.velocity[i][j];
            const Tensor& gr = grads.param_grads[i][j];
            if (!th.same_shape(gr)) throw DataError("optimizer_step: gradient shape mismatch");
            for (std::size_t e = 0; e < th.numel(); ++e) {
                double g = gr[e] + cfg.weight_decay * th[e];
                double vel = cfg.momentum * v[e] + g;
                v[e] = static_cast<float>(vel);
                th[e] = static_cast<float>(th[e] - cfg.lr * vel);
            }
            if (!th.all_finite()) throw NumericError("optimizer_step: non-finite update");
        }
    }
}

// ---- flatten / load -------------------------------------------------------

Tensor params_flatten(const Network& net) {
    Tensor flat({std::max<std::size_t>(net.param_count(), 1)}, 0.0f);
    std::size_t off = 0;
    for (const auto& group : net.params)
        for (const auto& t : group) {
            std::copy(t.data(), t.data() + t.numel(), flat.data() + off);
            off += t.numel();
        }
    return flat;
}

void params_load(Network& net, const Tensor& flat) {
    if (flat.numel() != std::max<std::size_t>(net.param_count(), 1))
        throw DataError("params_load: vector length mismatch");
    std::size_t off = 0;
    for (auto& group : net.params)
        for (auto& t : group) {
            std::copy(flat.data() + off, flat.data() + off + t.numel(), t.data());
            off += t.numel();
        }
}

// ---- jacobian products ----------------------------------------------------

Tensor jvp(const Network& net, const Tensor& x, const Tensor& tangent,
           const Tensor* input_tangent) {
    if (tangent.numel() != std::max<std::size_t>(net.param_count(), 1))
        throw DataError("jvp: tangent length mismatch");
    if (input_tangent != nullptr && !input_tangent->same_shape(x))
        throw DataError("jvp: input tangent shape mismatch");
    Activations A = forward(const_cast<Network&>(net), x, Mode::Eval, nullptr);

    // Offset of each layer's parameter block in the flat vector.
    std::vector<std::size_t> offsets(net.layers.size(), 0);
    std::size_t off = 0;
    for (std::size_t i = 0; i < net.layers.size(); ++i) {
        offsets[i] = off;
        for (const auto& p : net.params[i]) off += p.numel();
    }

    // tangent of the current activation
    Tensor dx = input_tangent != nullptr ? *input_tangent : Tensor(x.shape(), 0.0f);
    for (std::size_t li = 0; li < net.layers.size(); ++li) {
        const LayerSpec& L = net.layers[li];
        const Tensor& in = A.acts[li];
        const Tensor& out_val = A.acts[li + 1];
        Tensor dy(out_val.shape(), 0.0f);
        const float* tp = tangent.data() + offsets[li];

        switch (L.kind) {
            case LayerKind::Conv2d: {
                std::size_t wn = net.params[li][0].numel();
                int h = static_cast<int>(in.extent(1)), w = static_cast<int>(in.extent(2));
                int oh = static_cast<int>(dy.extent(1)), ow = static_cast<int>(dy.extent(2));
                // dW * x + db, then + W * dx
                conv2d_fwd(in.data(), dy.data(), tp, tp + wn, L.in_channels, h, w,
                           L.out_channels, L.kernel, L.stride, oh, ow);
                Tensor term2(dy.shape(), 0.0f);
                conv2d_fwd(dx.data(), term2.data(), net.params[li][0].data(), nullptr,
                           L.in_channels, h, w, L.out_channels, L.kernel, L.stride, oh, ow);
                dy.add_scaled(term2, 1.0f);
                break;
            }
            case LayerKind::Conv3d: {
                std::size_t wn = net.params[li][0].numel();
                int T = static_cast<int>(in.extent(1));
                int h = static_cast<int>(in.extent(2)), w = static_cast<int>(in.extent(3));
                int oh = static_cast<int>(dy.extent(2)), ow = static_cast<int>(dy.extent(3));
                conv3d_fwd(in.data(), dy.data(), tp, tp + wn, L.in_channels, T, h, w,
                           L.out_channels, L.kernel, L.stride, oh, ow);
                Tensor term2(dy.shape(), 0.0f);
                conv3d_fwd(dx.data(), term2.data(), net.params[li][0].data(), nullptr,
                           L.in_channels, T, h, w, L.out_channels, L.kernel, L.stride, oh,
                           ow);
                dy.add_scaled(term2, 1.0f);
                break;
            }
            case LayerKind::BatchNorm2d:
            case LayerKind::BatchNorm3d: {
                std::size_t c = in.extent(0);
                std::size_t n = in.numel() / c;
                const float* gamma = net.params[li][0].data();
                const float* dgamma = tp;
                const float* dbeta = tp + c;
                const float* rm = net.buffers[li][0].data();
                const float* rv = net.buffers[li][1].data();
                for (std::size_t ch = 0; ch < c; ++ch) {
                    double inv = 1.0 / std::sqrt(rv[ch] + kBnEps);
                    const float* pi = in.data() + ch * n;
                    const float* pdx = dx.data() + ch * n;
                    float* pdy = dy.data() + ch * n;
                    for (std::size_t i = 0; i < n; ++i) {
                        double xh = (pi[i] - rm[ch]) * inv;
                        pdy[i] = static_cast<float>(dgamma[ch] * xh +
                                                    gamma[ch] * inv * pdx[i] + dbeta[ch]);
                    }
                }
                break;
            }
            case LayerKind::Relu: {
                for (std::size_t i = 0; i < in.numel(); ++i)
                    dy[i] = in[i] > 0.0f ? dx[i] : 0.0f;
                break;
            }
            case LayerKind::Upsample2x: {
                upsample_fwd(dx, dy);
                break;
            }
            case LayerKind::Dropout: {
                dy = dx;  // eval mode: identity
                break;
            }
            case LayerKind::Bias: {
                std::size_t c = in.extent(0);
                std::size_t n = in.numel() / c;
                for (std::size_t ch = 0; ch < c; ++ch) {
                    const float* pdx = dx.data() + ch * n;
                    float* pdy = dy.data() + ch * n;
                    for (std::size_t i = 0; i < n; ++i) pdy[i] = pdx[i] + tp[ch];
                }
                break;
            }
        }
        dx = std::move(dy);
    }
    return dx;
}

Tensor vjp(const Network& net, const Tensor& x, const Tensor& cotangent) {
    Activations A = forward(const_cast<Network&>(net), x, Mode::Eval, nullptr);
    if (!cotangent.same_shape(A.acts.back()))
        throw DataError("vjp: cotangent shape mismatch");
    GradBundle g = backward(net, A, cotangent);
    Tensor flat({std::max<std::size_t>(net.param_count(), 1)}, 0.0f);
    std::size_t off = 0;
    for (const auto& group : g.param_grads)
        for (const auto& t : group) {
            std::copy(t.data(), t.data() + t.numel(), flat.data() + off);
            off += t.numel();
        }
    return flat;
}

// ---- checkpoints ----------------------------------------------------------

namespace {

void write_u32le(std::ostream& os, std::uint32_t v) {
    unsigned char b[4] = {static_cast<unsigned char>(v), static_cast<unsigned char>(v >> 8),
                          static_cast<unsigned char>(v >> 16),
                          static_cast<unsigned char>(v >> 24)};
    os.write(reinterpret_cast<const char*>(b), 4);
}

std::uint32_t read_u32le(std::istream& is, const std::string& origin) {
    unsigned char b[4];
    if (!is.read(reinterpret_cast<char*>(b), 4))
        throw DataError("truncated checkpoint: " + origin);
    return static_cast<std::uint32_t>(b[0]) | (static_cast<std::uint32_t>(b[1]) << 8) |
           (static_cast<std::uint32_t>(b[2]) << 16) |
           (static_cast<std::uint32_t>(b[3]) << 24);
}

std::string layer_line(const LayerSpec& L) {
    char buf[128];
    switch (L.kind) {
        case LayerKind::Conv2d:
        case LayerKind::Conv3d:
            std::snprintf(buf, sizeof(buf), "%s in=%d out=%d kernel=%d stride=%d",
                          kind_name(L.kind), L.in_channels, L.out_channels, L.kernel,
                          L.stride);
            break;
        case LayerKind::BatchNorm2d:
        case LayerKind::BatchNorm3d:
        case LayerKind::Bias:
            std::snprintf(buf, sizeof(buf), "%s channels=%d", kind_name(L.kind),
                          L.in_channels);
            break;
        case LayerKind::Dropout:
            std::snprintf(buf, sizeof(buf), "dropout rate=%.17g", L.rate);
            break;
        case LayerKind::Relu:
        case LayerKind::Upsample2x:
            std::snprintf(buf, sizeof(buf), "%s", kind_name(L.kind));
            break;
    }
    return buf;
}

LayerSpec parse_layer_line(const std::string& line) {
    std::istringstream ss(line);
    std::string kind;
    ss >> kind;
    auto fields = [&] {
        std::vector<std::pair<std::string, std::string>> kv;
        std::string tok;
        while (ss >> tok) {
            auto eq = tok.find('=');
            if (eq == std::string::npos)
                throw DataError("checkpoint manifest: bad token '" + tok + "'");
            kv.emplace_back(tok.substr(0, eq), tok.substr(eq + 1));
        }
        return kv;
    }();
    auto get = [&](const std::string& key) -> std::string {
        for (const auto& [k, v] : fields)
            if (k == key) return v;
        throw DataError("checkpoint manifest: missing field '" + key + "' in " + kind);
    };
    if (kind == "conv2d")
        return LayerSpec::conv2d(std::stoi(get("in")), std::stoi(get("out")),
                                 std::stoi(get("kernel")), std::stoi(get("stride")));
    if (kind == "conv3d")
        return LayerSpec::conv3d(std::stoi(get("in")), std::stoi(get("out")),
                                 std::stoi(get("kernel")), std::stoi(get("stride")));
    if (kind == "batchnorm2d") return LayerSpec::batchnorm2d(std::stoi(get("channels")));
    if (kind == "batchnorm3d") return LayerSpec::batchnorm3d(std::stoi(get("channels")));
    if (kind == "bias") return LayerSpec::bias(std::stoi(get("channels")));
    if (kind == "dropout") return LayerSpec::dropout(std::stod(get("rate")));
    if (kind == "relu") return LayerSpec::relu();
    if (kind == "upsample2x") return LayerSpec::upsample2x();
    throw DataError("checkpoint manifest: unknown layer kind '" + kind + "'");
}

}  // namespace

void checkpoint_save(const Network& net, const std::string& path) {
    std::ofstream os(path, std::ios::binary);
    if (!os) throw DataError("cannot open checkpoint for writing: " + path);
    os.write("LFC1", 4);
    write_u32le(os, static_cast<std::uint32_t>(net.layers.size()));
    for (const auto& L : net.layers) {
        std::string line = layer_line(L);
        write_u32le(os, static_cast<std::uint32_t>(line.size()));
        os.write(line.data(), static_cast<std::streamsize>(line.size()));
    }
    std::uint32_t n_tensors = 0;
    for (std::size_t i = 0; i < net.layers.size(); ++i)
        n_tensors += static_cast<std::uint32_t>(net.params[i].size() + net.buffers[i].size());
    write_u32le(os, n_tensors);
    for (std::size_t i = 0; i < net.layers.size(); ++i) {
        for (const auto& t : net.params[i]) tensor_write(t, os);
        for (const auto& t : net.buffers[i]) tensor_write(t, os);
    }
    if (!os) throw DataError("checkpoint write failed: " + path);
}

Network checkpoint_load(const std::string& path) {
    std::ifstream is(path, std::ios::binary);
    if (!is) throw DataError("cannot open checkpoint: " + path);
    char magic[4];
    if (!is.read(magic, 4) || std::memcmp(magic, "LFC1", 4) != 0)
        throw DataError("bad checkpoint magic: " + path);
    std::uint32_t n_layers = read_u32le(is, path);
    std::vector<LayerSpec> specs;
    specs.reserve(n_layers);
    for (std::uint32_t i = 0; i < n_layers; ++i) {
        std::uint32_t len = read_u32le(is, path);
        std::string line(len, '\0');
        if (!is.read(line.data(), len)) throw DataError("truncated checkpoint: " + path);
        specs.push_back(parse_layer_line(line));
    }
    Network net = network_skeleton(specs);
    std::uint32_t n_tensors = read_u32le(is, path);
    std::uint32_t expect = 0;
    for (std::size_t i = 0; i < specs.size(); ++i)
        expect += static_cast<std::uint32_t>(net.params[i].size() + net.buffers[i].size());
    if (n_tensors != expect)
        throw DataError("checkpoint tensor count mismatch: " + path);
    for (std::size_t i = 0; i < specs.size(); ++i) {
        for (auto& t : net.params[i]) {
            Tensor loaded = tensor_read(is, path);
            if (!loaded.same_shape(t))
                throw DataError("checkpoint tensor shape mismatch: " + path);
            t = std::move(loaded);
        }
        for (auto& t : net.buffers[i]) {
            Tensor loaded = tensor_read(is, path);
            if (!loaded.same_shape(t))
                throw DataError("checkpoint tensor shape mismatch: " + path);
            t = std::move(loaded);
        }
    }
    if (is.peek() != EOF) throw DataError("trailing bytes in checkpoint: " + path);
    return net;
}

}  // namespace lfusion
