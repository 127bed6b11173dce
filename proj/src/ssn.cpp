#include "lfusion/ssn.hpp"

#include <algorithm>
#include <cmath>
#include <cstring>
#include <fstream>

namespace lfusion {

namespace {

double softplus(double x) {
    // log(1+e^x) without overflow on either side
    return x > 0.0 ? x + std::log1p(std::exp(-x)) : std::log1p(std::exp(x));
}

double sigmoid(double x) { return x > 0.0 ? 1.0 / (1.0 + std::exp(-x)) : std::exp(x) / (1.0 + std::exp(x)); }

// log sigma(eta) = -softplus(-eta); log(1-sigma(eta)) = -softplus(eta)
double bernoulli_loglik(double eta, double y) {
    return -(y * softplus(-eta) + (1.0 - y) * softplus(eta));
}

void check_dist(const LowRankGaussian& dist, const char* where) {
    if (dist.P.ndim() != 2 || dist.P.extent(0) != dist.n())
        throw DataError(std::string(where) + ": factor rows must match logit count");
    if (dist.d_raw.ndim() != 1 || dist.d_raw.extent(0) != dist.n())
        throw DataError(std::string(where) + ": diagonal length must match logit count");
}

struct Samples {
    // doubles, row per sample
    std::vector<double> eta;  // T x n
    std::vector<double> z;    // T x r
    std::vector<double> eps;  // T x n
};

Samples draw_samples(const LowRankGaussian& dist, int m, RngStream& rng) {
    std::size_t n = dist.n(), r = dist.rank();
    Samples s;
    s.eta.resize(static_cast<std::size_t>(m) * n);
    s.z.resize(static_cast<std::size_t>(m) * r);
    s.eps.resize(static_cast<std::size_t>(m) * n);
    std::vector<double> sd(n);
    for (std::size_t i = 0; i < n; ++i)
        sd[i] = std::sqrt(softplus(dist.d_raw[i]) + kDiagFloor);
    for (int j = 0; j < m; ++j) {
        double* zj = s.z.data() + static_cast<std::size_t>(j) * r;
        double* ej = s.eps.data() + static_cast<std::size_t>(j) * n;
        double* hj = s.eta.data() + static_cast<std::size_t>(j) * n;
        for (std::size_t k = 0; k < r; ++k) zj[k] = rng_normal(rng);
        for (std::size_t i = 0; i < n; ++i) ej[i] = rng_normal(rng);
        for (std::size_t i = 0; i < n; ++i) {
            double acc = dist.mu[i] + sd[i] * ej[i];
            const float* prow = dist.P.data() + i * r;
            for (std::size_t k = 0; k < r; ++k) acc += prow[k] * zj[k];
            hj[i] = acc;
        }
    }
    return s;
}

}  // namespace

Tensor lrg_diag(const LowRankGaussian& dist) {
    check_dist(dist, "lrg_diag");
    Tensor d({dist.n()}, 0.0f);
    for (std::size_t i = 0; i < dist.n(); ++i)
        d[i] = static_cast<float>(softplus(dist.d_raw[i]) + kDiagFloor);
    return d;
}

Tensor lrg_variance_diag(const LowRankGaussian& dist) {
    Tensor v = lrg_diag(dist);
    std::size_t r = dist.rank();
    for (std::size_t i = 0; i < dist.n(); ++i) {
        const float* prow = dist.P.data() + i * r;
        double acc = v[i];
        for (std::size_t k = 0; k < r; ++k) acc += static_cast<double>(prow[k]) * prow[k];
        v[i] = static_cast<float>(acc);
    }
    return v;
}

namespace {

LowRankGaussian assemble_dist(const Tensor& mu_out, const Tensor& p_out,
                              const Tensor& d_out, int classes, int rank) {
    // mu_out (C,H,W); p_out (C*rank,H,W); d_out (C,H,W)
    std::size_t C = static_cast<std::size_t>(classes), R = static_cast<std::size_t>(rank);
    if (mu_out.extent(0) != C || d_out.extent(0) != C || p_out.extent(0) != C * R)
        throw DataError("ssn_forward: branch channel counts inconsistent with (classes, rank)");
    std::size_t H = mu_out.extent(1), W = mu_out.extent(2);
    std::size_t n = C * H * W;

    LowRankGaussian dist;
    dist.mu = mu_out;
    dist.d_raw = d_out.reshaped({n});
    dist.P = Tensor({n, R}, 0.0f);
    for (std::size_t c = 0; c < C; ++c)
        for (std::size_t k = 0; k < R; ++k) {
            const float* src = p_out.data() + (c * R + k) * H * W;
            for (std::size_t px = 0; px < H * W; ++px)
                dist.P[(c * H * W + px) * R + k] = src[px];
        }
    return dist;
}

}  // namespace

LowRankGaussian ssn_forward(const SsnHead& head, const Tensor& f) {
    Tensor h = forward_eval(head.trunk, f);
    Tensor mu_out = forward_eval(head.mu_branch, h);
    Tensor p_out = forward_eval(head.p_branch, h);
    Tensor d_out = forward_eval(head.d_branch, h);
    return assemble_dist(mu_out, p_out, d_out, head.classes, head.rank);
}

SsnTrainState ssn_forward_train(SsnHead& head, const Tensor& f) {
    SsnTrainState st;
    st.trunk_acts = forward(head.trunk, f, Mode::Train, nullptr);
    const Tensor& h = st.trunk_acts.output();
    st.mu_acts = forward(head.mu_branch, h, Mode::Train, nullptr);
    st.p_acts = forward(head.p_branch, h, Mode::Train, nullptr);
    st.d_acts = forward(head.d_branch, h, Mode::Train, nullptr);
    st.dist = assemble_dist(st.mu_acts.output(), st.p_acts.output(), st.d_acts.output(),
                            head.classes, head.rank);
    return st;
}

SsnGrads ssn_head_backward(const SsnHead& head, const SsnTrainState& st, const Tensor& g_mu,
                           const Tensor& g_P, const Tensor& g_draw) {
    std::size_t C = static_cast<std::size_t>(head.classes);
    std::size_t R = static_cast<std::size_t>(head.rank);
    const Tensor& mu_out = st.mu_acts.output();
    std::size_t H = mu_out.extent(1), W = mu_out.extent(2);

    Tensor g_mu_t = g_mu.reshaped(mu_out.shape());
    Tensor g_d_t = g_draw.reshaped(mu_out.shape());
    Tensor g_p_t({C * R, H, W}, 0.0f);
    for (std::size_t c = 0; c < C; ++c)
        for (std::size_t k = 0; k < R; ++k) {
            float* dst = g_p_t.data() + (c * R + k) * H * W;
            for (std::size_t px = 0; px < H * W; ++px)
                dst[px] = g_P[(c * H * W + px) * R + k];
        }

    SsnGrads g;
    g.mu = backward(head.mu_branch, st.mu_acts, g_mu_t);
    g.p = backward(head.p_branch, st.p_acts, g_p_t);
    g.d = backward(head.d_branch, st.d_acts, g_d_t);
    Tensor trunk_cot = g.mu.input_grad;
    trunk_cot.add_scaled(g.p.input_grad, 1.0f);
    trunk_cot.add_scaled(g.d.input_grad, 1.0f);
    g.trunk = backward(head.trunk, st.trunk_acts, trunk_cot);
    return g;
}

Tensor ssn_sample(const LowRankGaussian& dist, int m, RngStream& rng) {
    check_dist(dist, "ssn_sample");
    if (m < 1) throw ConfigError("ssn_sample: need at least one sample");
    std::size_t n = dist.n();
    Samples s = draw_samples(dist, m, rng);
    Tensor out({static_cast<std::size_t>(m), n}, 0.0f);
    for (std::size_t i = 0; i < out.numel(); ++i) out[i] = static_cast<float>(s.eta[i]);
    return out;
}

Tensor seg_sample(const Tensor& logits, SegTask task, RngStream* rng, bool categorical) {
    if (logits.ndim() != 3) throw DataError("seg_sample: logits must be (C, H, W)");
    std::size_t C = logits.extent(0), H = logits.extent(1), W = logits.extent(2);
    Tensor mask({H, W}, 0.0f);
    if (task == SegTask::Binary) {
        if (C != 1) throw DataError("seg_sample: binary task needs exactly one channel");
        if (rng == nullptr) throw ConfigError("seg_sample: binary draw needs an rng stream");
        for (std::size_t px = 0; px < H * W; ++px) {
            double p = sigmoid(logits[px]);
            mask[px] = rng_uniform(*rng) < p ? 1.0f : 0.0f;
        }
        return mask;
    }
    if (C < 2) throw DataError("seg_sample: multiclass task needs at least two channels");
    if (categorical && rng == nullptr)
        throw ConfigError("seg_sample: categorical draw needs an rng stream");
    for (std::size_t px = 0; px < H * W; ++px) {
        if (!categorical) {
            std::size_t best = 0;
            float bv = logits[px];
            for (std::size_t c = 1; c < C; ++c) {
                float v = logits[c * H * W + px];
                if (v > bv) {
                    bv = v;
                    best = c;
                }
            }
            mask[px] = static_cast<float>(best);
        } else {
            // softmax draw via max-subtracted exponentials
            double mx = logits[px];
            for (std::size_t c = 1; c < C; ++c)
                mx = std::max(mx, static_cast<double>(logits[c * H * W + px]));
            double total = 0.0;
            std::vector<double> w(C);
            for (std::size_t c = 0; c < C; ++c) {
                w[c] = std::exp(logits[c * H * W + px] - mx);
                total += w[c];
            }
            double u = rng_uniform(*rng) * total;
            std::size_t pick = C - 1;
            double acc = 0.0;
            for (std::size_t c = 0; c < C; ++c) {
                acc += w[c];
                if (u <= acc) {
                    pick = c;
                    break;
                }
            }
            mask[px] = static_cast<float>(pick);
        }
    }
    return mask;
}

double logsumexp(const std::vector<double>& v) {
    double mx = -std::numeric_limits<double>::infinity();
    for (double x : v) mx = std::max(mx, x);
    if (!std::isfinite(mx)) return mx;  // all -inf (or a nan propagates)
    double acc = 0.0;
    for (double x : v) acc += std::exp(x - mx);
    return mx + std::log(acc);
}

SsnNll ssn_nll(const LowRankGaussian& dist, const Tensor& target, int T, RngStream& rng) {
    check_dist(dist, "ssn_nll");
    if (T < 1) throw ConfigError("ssn_nll: need at least one inner sample");
    std::size_t n = dist.n(), r = dist.rank();
    if (target.numel() != n) throw DataError("ssn_nll: target size mismatch");
    if (dist.mu.extent(0) != 1)
        throw ConfigError("ssn_nll: only binary (single-channel) targets are supported");
    for (std::size_t i = 0; i < n; ++i)
        if (target[i] != 0.0f && target[i] != 1.0f)
            throw DataError("ssn_nll: target must be a 0/1 mask");

    // Degenerate-likelihood guard: a distribution with no spread anywhere
    // cannot produce a finite Monte-Carlo marginal.
    double dmax = 0.0, pmax = 0.0;
    for (std::size_t i = 0; i < n; ++i)
        dmax = std::max(dmax, softplus(dist.d_raw[i]) + kDiagFloor);
    for (std::size_t i = 0; i < dist.P.numel(); ++i)
        pmax = std::max(pmax, std::fabs(static_cast<double>(dist.P[i])));
    if (!(dmax > 0.0) && pmax == 0.0)
        throw DataError("ssn_nll: degenerate distribution (zero covariance)");

    Samples s = draw_samples(dist, T, rng);
    std::vector<double> ll(T);
    for (int t = 0; t < T; ++t) {
        const double* hj = s.eta.data() + static_cast<std::size_t>(t) * n;
        double acc = 0.0;
        for (std::size_t i = 0; i < n; ++i) acc += bernoulli_loglik(hj[i], target[i]);
        ll[t] = acc;
    }
    double lse = logsumexp(ll);

    SsnNll out;
    out.loss = -(lse - std::log(static_cast<double>(T)));
    out.g_mu = Tensor(dist.mu.shape(), 0.0f);
    out.g_P = Tensor({n, r}, 0.0f);
    out.g_draw = Tensor({n}, 0.0f);

    std::vector<double> gmu(n, 0.0), gdr(n, 0.0);
    std::vector<double> gP(n * r, 0.0);
    for (int t = 0; t < T; ++t) {
        double w = std::exp(ll[t] - lse);  // softmax over inner samples
        const double* hj = s.eta.data() + static_cast<std::size_t>(t) * n;
        const double* zj = s.z.data() + static_cast<std::size_t>(t) * r;
        const double* ej = s.eps.data() + static_cast<std::size_t>(t) * n;
        for (std::size_t i = 0; i < n; ++i) {
            double delta = w * (sigmoid(hj[i]) - target[i]);  // d(-ll)/d(eta)
            gmu[i] += delta;
            double d = softplus(dist.d_raw[i]) + kDiagFloor;
            gdr[i] += delta * ej[i] * sigmoid(dist.d_raw[i]) / (2.0 * std::sqrt(d));
            double* gr = gP.data() + i * r;
            for (std::size_t k = 0; k < r; ++k) gr[k] += delta * zj[k];
        }
    }
    for (std::size_t i = 0; i < n; ++i) {
        out.g_mu[i] = static_cast<float>(gmu[i]);
        out.g_draw[i] = static_cast<float>(gdr[i]);
    }
    for (std::size_t i = 0; i < n * r; ++i) out.g_P[i] = static_cast<float>(gP[i]);
    return out;
}

Tensor dist_cov_dense(const LowRankGaussian& dist) {
    check_dist(dist, "dist_cov_dense");
    std::size_t n = dist.n(), r = dist.rank();
    if (n > 4096) throw DataError("dist_cov_dense: refusing n > 4096");
    Tensor d = lrg_diag(dist);
    Tensor cov({n, n}, 0.0f);
    for (std::size_t i = 0; i < n; ++i) {
        const float* pi = dist.P.data() + i * r;
        for (std::size_t j = 0; j <= i; ++j) {
            const float* pj = dist.P.data() + j * r;
            double acc = 0.0;
            for (std::size_t k = 0; k < r; ++k) acc += static_cast<double>(pi[k]) * pj[k];
            if (i == j) acc += d[i];
            float v = static_cast<float>(acc);
            cov[i * n + j] = v;
            cov[j * n + i] = v;
        }
    }
    return cov;
}

void lrg_save(const LowRankGaussian& dist, const std::string& path) {
    check_dist(dist, "lrg_save");
    std::ofstream os(path, std::ios::binary);
    if (!os) throw DataError("cannot open for writing: " + path);
    os.write("LFG1", 4);
    unsigned char nd = static_cast<unsigned char>(dist.mu.ndim());
    os.put(static_cast<char>(nd));
    for (std::size_t a = 0; a < dist.mu.ndim(); ++a) {
        std::uint32_t e = static_cast<std::uint32_t>(dist.mu.extent(a));
        unsigned char b[4] = {static_cast<unsigned char>(e),
                              static_cast<unsigned char>(e >> 8),
                              static_cast<unsigned char>(e >> 16),
                              static_cast<unsigned char>(e >> 24)};
        os.write(reinterpret_cast<const char*>(b), 4);
    }
    std::uint32_t rk = static_cast<std::uint32_t>(dist.rank());
    unsigned char rb[4] = {static_cast<unsigned char>(rk), static_cast<unsigned char>(rk >> 8),
                           static_cast<unsigned char>(rk >> 16),
                           static_cast<unsigned char>(rk >> 24)};
    os.write(reinterpret_cast<const char*>(rb), 4);
    tensor_write(dist.mu, os);
    tensor_write(dist.P, os);
    tensor_write(dist.d_raw, os);
    if (!os) throw DataError("write failed: " + path);
}

LowRankGaussian lrg_load(const std::string& path) {
    std::ifstream is(path, std::ios::binary);
    if (!is) throw DataError("cannot open: " + path);
    char magic[4];
    if (!is.read(magic, 4) || std::memcmp(magic, "LFG1", 4) != 0)
        throw DataError("bad LFG1 magic: " + path);
    int nd = is.get();
    if (nd <= 0 || nd > 8) throw DataError("bad LFG1 header: " + path);
    std::vector<std::size_t> shape(static_cast<std::size_t>(nd));
    auto read_u32 = [&]() {
        unsigned char b[4];
        if (!is.read(reinterpret_cast<char*>(b), 4))
            throw DataError("truncated LFG1 header: " + path);
        return static_cast<std::uint32_t>(b[0]) | (static_cast<std::uint32_t>(b[1]) << 8) |
               (static_cast<std::uint32_t>(b[2]) << 16) |
               (static_cast<std::uint32_t>(b[3]) << 24);
    };
    for (auto& e : shape) e = read_u32();
    std::uint32_t rk = read_u32();
    LowRankGaussian dist;
    dist.mu = tensor_read(is, path);
    dist.P = tensor_read(is, path);
    dist.d_raw = tensor_read(is, path);
    if (is.peek() != EOF) throw DataError("trailing bytes in LFG1 file: " + path);
    if (dist.mu.shape() != shape)
        throw DataError("LFG1 header does not match mu block: " + path);
    if (dist.P.ndim() != 2 || dist.P.extent(0) != dist.mu.numel() || dist.P.extent(1) != rk)
        throw DataError("LFG1 factor block inconsistent: " + path);
    if (dist.d_raw.ndim() != 1 || dist.d_raw.extent(0) != dist.mu.numel())
        throw DataError("LFG1 diagonal block inconsistent: " + path);
    return dist;
}

}  // namespace lfusion
