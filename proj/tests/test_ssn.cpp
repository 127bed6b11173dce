#define DOCTEST_CONFIG_IMPLEMENT_WITH_MAIN
#include <doctest.h>

#include <cmath>
#include <cstdio>
#include <vector>

#include "lfusion/metrics.hpp"
#include "lfusion/ssn.hpp"

using namespace lfusion;

namespace {

double softplus_ref(double x) { return std::log1p(std::exp(x)); }

Tensor randn(RngStream& rng, std::vector<std::size_t> shape, double scale = 1.0) {
    Tensor t(shape, 0.0f);
    for (std::size_t i = 0; i < t.numel(); ++i)
        t[i] = static_cast<float>(scale * rng_normal(rng));
    return t;
}

float quant(double v) { return static_cast<float>(std::round(v * 32.0) / 32.0); }

Tensor qrandn(RngStream& rng, std::vector<std::size_t> shape) {
    Tensor t(shape, 0.0f);
    for (std::size_t i = 0; i < t.numel(); ++i) t[i] = quant(rng_normal(rng));
    return t;
}

void quantize_params(Network& net) {
    Tensor th = params_flatten(net);
    for (std::size_t i = 0; i < th.numel(); ++i) th[i] = quant(th[i]);
    params_load(net, th);
}

// Cyclic Jacobi eigenvalues of a small symmetric matrix (independent oracle).
std::vector<double> sym_eigenvalues(std::vector<std::vector<double>> A) {
    std::size_t n = A.size();
    for (int sweep = 0; sweep < 100; ++sweep) {
        double off = 0.0;
        for (std::size_t i = 0; i < n; ++i)
            for (std::size_t j = i + 1; j < n; ++j) off += A[i][j] * A[i][j];
        if (off < 1e-24) break;
        for (std::size_t p = 0; p < n; ++p)
            for (std::size_t q = p + 1; q < n; ++q) {
                if (std::fabs(A[p][q]) < 1e-18) continue;
                double theta = (A[q][q] - A[p][p]) / (2.0 * A[p][q]);
                double t = (theta >= 0 ? 1.0 : -1.0) /
                           (std::fabs(theta) + std::sqrt(theta * theta + 1.0));
                double c = 1.0 / std::sqrt(t * t + 1.0), s = t * c;
                for (std::size_t k = 0; k < n; ++k) {
                    double akp = A[k][p], akq = A[k][q];
                    A[k][p] = c * akp - s * akq;
                    A[k][q] = s * akp + c * akq;
                }
                for (std::size_t k = 0; k < n; ++k) {
                    double apk = A[p][k], aqk = A[q][k];
                    A[p][k] = c * apk - s * aqk;
                    A[q][k] = s * apk + c * aqk;
                }
            }
    }
    std::vector<double> ev(n);
    for (std::size_t i = 0; i < n; ++i) ev[i] = A[i][i];
    return ev;
}

SsnHead make_head(RngStream& rng, int in_c, int hidden, int classes, int rank) {
    SsnHead head;
    head.classes = classes;
    head.rank = rank;
    head.trunk = network_new({LayerSpec::conv2d(in_c, hidden, 3, 1), LayerSpec::relu()}, rng);
    head.mu_branch = network_new({LayerSpec::conv2d(hidden, classes, 1, 1)}, rng);
    head.p_branch = network_new({LayerSpec::conv2d(hidden, classes * rank, 1, 1)}, rng);
    head.d_branch = network_new({LayerSpec::conv2d(hidden, classes, 1, 1)}, rng);
    return head;
}

LowRankGaussian toy_dist(std::vector<float> mu, std::vector<float> P_colmajor_rows,
                         std::vector<float> d_raw, std::size_t r) {
    LowRankGaussian d;
    std::size_t n = mu.size();
    d.mu = Tensor::from_data({1, 1, n}, std::move(mu));
    d.P = Tensor::from_data({n, r}, std::move(P_colmajor_rows));
    d.d_raw = Tensor::from_data({n}, std::move(d_raw));
    return d;
}

}  // namespace

TEST_CASE("zero-weight branches give closed-form distribution") {
    RngStream rng(7, 0);
    SsnHead head = make_head(rng, 2, 4, 1, 3);
    for (auto* b : {&head.mu_branch, &head.p_branch, &head.d_branch}) {
        b->params[0][0].fill(0.0f);
        for (std::size_t i = 0; i < b->params[0][1].numel(); ++i)
            b->params[0][1][i] = 0.25f * static_cast<float>(i + 1);
    }
    Tensor f = randn(rng, {2, 3, 3});
    LowRankGaussian dist = ssn_forward(head, f);
    REQUIRE(dist.n() == 9);
    REQUIRE(dist.rank() == 3);
    Tensor d = lrg_diag(dist);
    for (std::size_t i = 0; i < 9; ++i) {
        CHECK(dist.mu[i] == 0.25f);
        CHECK(d[i] == doctest::Approx(softplus_ref(0.25) + 1e-6).epsilon(1e-6));
        for (std::size_t k = 0; k < 3; ++k)
            CHECK(dist.P[i * 3 + k] == 0.25f * static_cast<float>(k + 1));
    }
}

TEST_CASE("ssn_forward is deterministic") {
    RngStream rng(7, 1);
    SsnHead head = make_head(rng, 1, 4, 1, 2);
    Tensor f = randn(rng, {1, 4, 4});
    LowRankGaussian a = ssn_forward(head, f);
    LowRankGaussian b = ssn_forward(head, f);
    for (std::size_t i = 0; i < a.mu.numel(); ++i) CHECK(a.mu[i] == b.mu[i]);
    for (std::size_t i = 0; i < a.P.numel(); ++i) CHECK(a.P[i] == b.P[i]);
    for (std::size_t i = 0; i < a.d_raw.numel(); ++i) CHECK(a.d_raw[i] == b.d_raw[i]);
}

TEST_CASE("toy head covariance is symmetric positive definite") {
    RngStream rng(7, 2);
    SsnHead head = make_head(rng, 1, 4, 2, 2);  // n = 2*2*2 = 8
    Tensor f = randn(rng, {1, 2, 2});
    LowRankGaussian dist = ssn_forward(head, f);
    REQUIRE(dist.n() == 8);
    Tensor cov = dist_cov_dense(dist);
    for (std::size_t i = 0; i < 8; ++i)
        for (std::size_t j = 0; j < 8; ++j) CHECK(cov[i * 8 + j] == cov[j * 8 + i]);

    std::vector<std::vector<double>> A(8, std::vector<double>(8));
    for (std::size_t i = 0; i < 8; ++i)
        for (std::size_t j = 0; j < 8; ++j) A[i][j] = cov[i * 8 + j];
    for (double ev : sym_eigenvalues(A)) CHECK(ev >= 1e-6 * 0.999);
}

TEST_CASE("dist_cov_dense closed forms") {
    LowRankGaussian zero = toy_dist({0, 0}, {0, 0}, {-40, -40}, 1);
    Tensor cov = dist_cov_dense(zero);
    CHECK(cov[0] == doctest::Approx(1e-6));
    CHECK(cov[1] == 0.0f);
    CHECK(cov[2] == 0.0f);
    CHECK(cov[3] == doctest::Approx(1e-6));

    LowRankGaussian ones = toy_dist({0, 0}, {1, 1}, {-40, -40}, 1);
    Tensor c2 = dist_cov_dense(ones);
    CHECK(c2[0] == doctest::Approx(1.0 + 1e-6));
    CHECK(c2[1] == doctest::Approx(1.0));
    CHECK(c2[2] == doctest::Approx(1.0));
    CHECK(c2[3] == doctest::Approx(1.0 + 1e-6));

    LowRankGaussian big = toy_dist(std::vector<float>(4097, 0.0f),
                                   std::vector<float>(4097, 0.0f),
                                   std::vector<float>(4097, 0.0f), 1);
    CHECK_THROWS_AS(dist_cov_dense(big), DataError);
}

TEST_CASE("degenerate covariance samples hug the mean") {
    LowRankGaussian d = toy_dist({1.0f, -2.0f, 0.5f, 3.0f}, {0, 0, 0, 0}, {-40, -40, -40, -40}, 1);
    RngStream rng(8, 0);
    Tensor s = ssn_sample(d, 200, rng);
    double bound = 5.0 * std::sqrt(1e-6);
    for (int j = 0; j < 200; ++j)
        for (std::size_t i = 0; i < 4; ++i)
            CHECK(std::fabs(s[j * 4 + i] - d.mu[i]) < bound);
}

TEST_CASE("empirical covariance of 200k samples matches P P^T + D") {
    LowRankGaussian d =
        toy_dist({0.3f, -0.7f, 1.2f, 0.0f}, {0.8f, -0.5f, 0.3f, 1.1f}, {0.2f, -1.0f, 0.5f, -0.3f}, 1);
    Tensor cov = dist_cov_dense(d);
    const int m = 200000;
    RngStream rng(9, 0);
    Tensor s = ssn_sample(d, m, rng);
    double mean[4] = {0, 0, 0, 0};
    for (int j = 0; j < m; ++j)
        for (int i = 0; i < 4; ++i) mean[i] += s[j * 4 + i];
    for (int i = 0; i < 4; ++i) mean[i] /= m;
    double emp[4][4] = {};
    for (int j = 0; j < m; ++j)
        for (int a = 0; a < 4; ++a)
            for (int b = 0; b < 4; ++b)
                emp[a][b] += (s[j * 4 + a] - mean[a]) * (s[j * 4 + b] - mean[b]);
    double cmax = 0.0;
    for (std::size_t i = 0; i < 16; ++i) cmax = std::max(cmax, std::fabs((double)cov[i]));
    for (int a = 0; a < 4; ++a)
        for (int b = 0; b < 4; ++b) {
            double e = emp[a][b] / (m - 1);
            CHECK(std::fabs(e - cov[a * 4 + b]) < 0.02 * cmax);
        }
}

TEST_CASE("fixed rng reproduces the sample stack bitwise") {
    LowRankGaussian d = toy_dist({0.1f, 0.2f, 0.3f}, {1, 2, 3, 4, 5, 6}, {0, 0, 0}, 2);
    RngStream r1(10, 5), r2(10, 5);
    Tensor a = ssn_sample(d, 7, r1);
    Tensor b = ssn_sample(d, 7, r2);
    for (std::size_t i = 0; i < a.numel(); ++i) CHECK(a[i] == b[i]);
    CHECK(r1.counter == r2.counter);
}

TEST_CASE("seg_sample saturation and frequency") {
    Tensor hot({1, 4, 4}, 20.0f);
    RngStream rng(11, 0);
    Tensor m = seg_sample(hot, SegTask::Binary, &rng);
    for (std::size_t i = 0; i < 16; ++i) CHECK(m[i] == 1.0f);

    Tensor zero({1, 1, 1}, 0.0f);
    int ones = 0;
    const int draws = 10000;
    for (int i = 0; i < draws; ++i)
        ones += seg_sample(zero, SegTask::Binary, &rng)[0] == 1.0f ? 1 : 0;
    double freq = ones / static_cast<double>(draws);
    CHECK(std::fabs(freq - 0.5) < 3.0 * std::sqrt(0.25 / draws));
}

TEST_CASE("seg_sample multiclass argmax and errors") {
    Tensor logits({3, 2, 2}, 0.0f);
    // pixel 0 -> class 2, pixel 1 -> class 0, pixel 2 -> class 1, pixel 3 -> class 2
    logits[2 * 4 + 0] = 20.0f;
    logits[0 * 4 + 1] = 20.0f;
    logits[1 * 4 + 2] = 20.0f;
    logits[2 * 4 + 3] = 20.0f;
    Tensor m = seg_sample(logits, SegTask::Multiclass);
    CHECK(m[0] == 2.0f);
    CHECK(m[1] == 0.0f);
    CHECK(m[2] == 1.0f);
    CHECK(m[3] == 2.0f);

    RngStream rng(11, 1);
    Tensor mc = seg_sample(logits, SegTask::Multiclass, &rng, true);
    for (std::size_t i = 0; i < 4; ++i) CHECK(mc[i] == m[i]);  // saturated softmax

    CHECK_THROWS_AS(seg_sample(logits, SegTask::Binary, &rng), DataError);
    CHECK_THROWS_AS(seg_sample(Tensor({1, 2, 2}, 0.0f), SegTask::Multiclass), DataError);
    CHECK_THROWS_AS(seg_sample(Tensor({1, 2, 2}, 0.0f), SegTask::Binary, nullptr),
                    ConfigError);
}

TEST_CASE("nll with T=1 and degenerate covariance collapses to cross-entropy") {
    RngStream rng(12, 0);
    std::size_t n = 9;
    LowRankGaussian d;
    d.mu = randn(rng, {1, 3, 3});
    d.P = Tensor({n, 2}, 0.0f);
    d.d_raw = Tensor({n}, -40.0f);
    Tensor target({1, 3, 3}, 0.0f);
    for (std::size_t i = 0; i < n; ++i) target[i] = rng_uniform(rng) < 0.5 ? 1.0f : 0.0f;

    RngStream lr(12, 1);
    SsnNll res = ssn_nll(d, target, 1, lr);
    double bce = 0.0;
    for (std::size_t i = 0; i < n; ++i) {
        double mu = d.mu[i], y = target[i];
        bce += y * softplus_ref(-mu) + (1.0 - y) * softplus_ref(mu);
    }
    CHECK(std::fabs(res.loss / n - bce / n) < 1e-3);
}

TEST_CASE("nll is finite and non-negative on random inputs") {
    RngStream rng(13, 0);
    for (int rep = 0; rep < 5; ++rep) {
        std::size_t n = 12;
        LowRankGaussian d;
        d.mu = randn(rng, {1, 3, 4}, 2.0);
        d.P = randn(rng, {n, 3}, 0.7);
        d.d_raw = randn(rng, {n}, 1.5);
        Tensor target({1, 3, 4}, 0.0f);
        for (std::size_t i = 0; i < n; ++i) target[i] = rng_uniform(rng) < 0.5 ? 1.0f : 0.0f;
        RngStream lr(13, static_cast<std::uint64_t>(rep) + 1);
        SsnNll res = ssn_nll(d, target, 6, lr);
        CHECK(std::isfinite(res.loss));
        CHECK(res.loss >= 0.0);
    }
}

TEST_CASE("logsumexp is stable and shift invariant") {
    std::vector<double> v{-1.5, 0.3, 2.0, -0.7};
    double base = logsumexp(v);
    for (double c : {1.0, 100.0, 1e6, -1e6}) {
        std::vector<double> shifted(v);
        for (auto& x : shifted) x += c;
        CHECK(std::fabs((logsumexp(shifted) - c) - base) < 1e-6);
    }
    CHECK(std::isfinite(logsumexp({-1e308, -1e308})));
    CHECK(logsumexp({-700.0, -700.0}) == doctest::Approx(-700.0 + std::log(2.0)));
}

TEST_CASE("two-pixel toy gradient matches finite differences") {
    LowRankGaussian d = toy_dist({0.4f, -0.9f}, {0.6f, -0.3f}, {0.2f, -0.5f}, 1);
    Tensor target = Tensor::from_data({1, 1, 2}, {1.0f, 0.0f});
    const int T = 5;
    RngStream base(14, 0);

    auto loss_of = [&](const LowRankGaussian& dd) {
        RngStream r = base;  // common random numbers across evaluations
        return ssn_nll(dd, target, T, r).loss;
    };

    RngStream r0 = base;
    SsnNll res = ssn_nll(d, target, T, r0);

    std::vector<double> an, fd;
    auto push_fd = [&](Tensor& field, std::size_t idx) {
        float keep = field[idx];
        const double h = 1e-3;
        field[idx] = static_cast<float>(keep + h);
        double lp = loss_of(d);
        field[idx] = static_cast<float>(keep - h);
        double lm = loss_of(d);
        field[idx] = keep;
        fd.push_back((lp - lm) / (2.0 * h));
    };
    for (std::size_t i = 0; i < 2; ++i) {
        an.push_back(res.g_mu[i]);
        push_fd(d.mu, i);
    }
    for (std::size_t i = 0; i < 2; ++i) {
        an.push_back(res.g_P[i]);
        push_fd(d.P, i);
    }
    for (std::size_t i = 0; i < 2; ++i) {
        an.push_back(res.g_draw[i]);
        push_fd(d.d_raw, i);
    }

    double gmax = 1e-6;
    for (double g : an) gmax = std::max(gmax, std::fabs(g));
    for (std::size_t i = 0; i < an.size(); ++i) {
        double rel = std::fabs(fd[i] - an[i]) /
                     std::max({std::fabs(fd[i]), std::fabs(an[i]), 0.05 * gmax});
        CAPTURE(i);
        CAPTURE(rel);
        CHECK(rel < 1e-3);
    }
}

TEST_CASE("head-chain gradient matches finite differences") {
    RngStream rng(33, 0);
    SsnHead head = make_head(rng, 2, 4, 1, 2);
    for (auto* net : {&head.trunk, &head.mu_branch, &head.p_branch, &head.d_branch})
        quantize_params(*net);
    Tensor f = qrandn(rng, {2, 4, 4});
    Tensor target({1, 4, 4}, 0.0f);
    for (std::size_t i = 0; i < 16; ++i) target[i] = rng_uniform(rng) < 0.5 ? 1.0f : 0.0f;
    const int T = 4;
    RngStream base(33, 1);

    {
        // The finite-difference step must not push any pre-relu value across
        // zero; this seed was chosen to keep a comfortable margin.
        Activations probe = forward(head.trunk, f, Mode::Eval, nullptr);
        double margin = 1e9;
        const Tensor& pre = probe.acts[1];
        for (std::size_t i = 0; i < pre.numel(); ++i)
            margin = std::min(margin, static_cast<double>(std::fabs(pre[i])));
        REQUIRE(margin > 0.03);
    }

    auto loss_now = [&]() {
        LowRankGaussian d = ssn_forward(head, f);
        RngStream r = base;
        return ssn_nll(d, target, T, r).loss;
    };

    SsnTrainState st = ssn_forward_train(head, f);
    RngStream r0 = base;
    SsnNll res = ssn_nll(st.dist, target, T, r0);
    SsnGrads g = ssn_head_backward(head, st, res.g_mu, res.g_P, res.g_draw);

    std::vector<double> an;
    auto push_bundle = [&](const GradBundle& b) {
        for (const auto& group : b.param_grads)
            for (const auto& t : group)
                for (std::size_t i = 0; i < t.numel(); ++i) an.push_back(t[i]);
    };
    push_bundle(g.trunk);
    push_bundle(g.mu);
    push_bundle(g.p);
    push_bundle(g.d);

    std::vector<double> fd;
    const double h = 1.0 / 256.0;
    for (auto* net : {&head.trunk, &head.mu_branch, &head.p_branch, &head.d_branch}) {
        Tensor theta = params_flatten(*net);
        for (std::size_t i = 0; i < theta.numel(); ++i) {
            float keep = theta[i];
            theta[i] = static_cast<float>(keep + h);
            params_load(*net, theta);
            double lp = loss_now();
            theta[i] = static_cast<float>(keep - h);
            params_load(*net, theta);
            double lm = loss_now();
            theta[i] = keep;
            fd.push_back((lp - lm) / (2.0 * h));
        }
        params_load(*net, theta);
    }

    REQUIRE(an.size() == fd.size());
    double gmax = 1e-6;
    for (double v : an) gmax = std::max(gmax, std::fabs(v));
    double worst = 0.0;
    for (std::size_t i = 0; i < an.size(); ++i) {
        double rel = std::fabs(fd[i] - an[i]) /
                     std::max({std::fabs(fd[i]), std::fabs(an[i]), 0.05 * gmax});
        worst = std::max(worst, rel);
    }
    CAPTURE(worst);
    CHECK(worst < 1e-3);
}

TEST_CASE("training a head on a separable toy problem") {
    RngStream rng(16, 0);
    SsnHead head = make_head(rng, 1, 8, 1, 2);
    Tensor f = randn(rng, {1, 8, 8});
    Tensor target({1, 8, 8}, 0.0f);
    for (std::size_t i = 0; i < 64; ++i) target[i] = f[i] > 0.0f ? 1.0f : 0.0f;

    OptimState st_t, st_m, st_p, st_d;
    OptimConfig cfg{.lr = 0.02, .momentum = 0.9, .weight_decay = 0.0};
    RngStream lr(16, 1);
    std::vector<double> losses;
    for (int step = 0; step < 400; ++step) {
        SsnTrainState st = ssn_forward_train(head, f);
        SsnNll res = ssn_nll(st.dist, target, 8, lr);
        losses.push_back(res.loss);
        SsnGrads g = ssn_head_backward(head, st, res.g_mu, res.g_P, res.g_draw);
        optimizer_step(head.trunk, g.trunk, cfg, st_t);
        optimizer_step(head.mu_branch, g.mu, cfg, st_m);
        optimizer_step(head.p_branch, g.p, cfg, st_p);
        optimizer_step(head.d_branch, g.d, cfg, st_d);
    }
    double head_mean = 0.0, tail_mean = 0.0;
    for (int i = 0; i < 20; ++i) {
        head_mean += losses[i] / 20.0;
        tail_mean += losses[losses.size() - 20 + i] / 20.0;
    }
    CHECK(tail_mean < head_mean);

    LowRankGaussian d = ssn_forward(head, f);
    Tensor pred({8, 8}, 0.0f);
    for (std::size_t i = 0; i < 64; ++i) pred[i] = d.mu[i] > 0.0f ? 1.0f : 0.0f;
    Tensor truth = target.reshaped({8, 8});
    CHECK(dice(pred, truth) >= 0.99);
}

TEST_CASE("lfg1 round trip and corruption errors") {
    RngStream rng(17, 0);
    LowRankGaussian d;
    d.mu = randn(rng, {1, 3, 4});
    d.P = randn(rng, {12, 3});
    d.d_raw = randn(rng, {12});
    std::string path = "/tmp/lfusion_test_dist.lfg";
    lrg_save(d, path);
    LowRankGaussian back = lrg_load(path);
    CHECK(back.mu.shape() == d.mu.shape());
    for (std::size_t i = 0; i < d.mu.numel(); ++i) CHECK(back.mu[i] == d.mu[i]);
    for (std::size_t i = 0; i < d.P.numel(); ++i) CHECK(back.P[i] == d.P[i]);
    for (std::size_t i = 0; i < d.d_raw.numel(); ++i) CHECK(back.d_raw[i] == d.d_raw[i]);

    {
        std::FILE* fp = std::fopen("/tmp/lfusion_bad_dist.lfg", "wb");
        std::fwrite("XXXX", 1, 4, fp);
        std::fclose(fp);
        CHECK_THROWS_AS(lrg_load("/tmp/lfusion_bad_dist.lfg"), DataError);
    }
    {
        // trailing garbage after the last block
        std::FILE* fp = std::fopen(path.c_str(), "ab");
        std::fputc(0, fp);
        std::fclose(fp);
        CHECK_THROWS_AS(lrg_load(path), DataError);
    }
}
