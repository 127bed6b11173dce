#include "lfusion/laplace.hpp"

#include <algorithm>
#include <cmath>
#include <cstdio>
#include <cstring>
#include <fstream>
#include <limits>
#include <sstream>

namespace lfusion {

namespace {

constexpr double kPrecisionFloor = 1e-8;
constexpr double kPi = 3.14159265358979323846;

double softplus(double x) {
    return x > 0.0 ? x + std::log1p(std::exp(-x)) : std::log1p(std::exp(x));
}

double sigmoid(double x) {
    return x > 0.0 ? 1.0 / (1.0 + std::exp(-x)) : std::exp(x) / (1.0 + std::exp(x));
}

RngStream child_stream(std::uint64_t root, std::uint64_t base_id, std::string_view tag,
                       std::uint64_t idx) {
    std::uint64_t id =
        rng_mix64(base_id ^ fnv1a64(tag) ^ (0x9e3779b97f4a7c15ull * (idx + 1)));
    return RngStream(root, id);
}

Tensor hflip(const Tensor& t) {
    Tensor out(t.shape(), 0.0f);
    std::size_t w = t.extent(t.ndim() - 1);
    std::size_t rows = t.numel() / w;
    for (std::size_t r = 0; r < rows; ++r) {
        const float* src = t.data() + r * w;
        float* dst = out.data() + r * w;
        for (std::size_t x = 0; x < w; ++x) dst[x] = src[w - 1 - x];
    }
    return out;
}

// ---- small dense linear algebra (double, k is tiny) -----------------------

// Cyclic Jacobi on a symmetric n x n matrix. A is destroyed; its diagonal
// holds the eigenvalues on return and V's columns hold the eigenvectors.
void jacobi_eig(std::vector<double>& A, std::vector<double>& V, std::size_t n) {
    V.assign(n * n, 0.0);
    for (std::size_t i = 0; i < n; ++i) V[i * n + i] = 1.0;
    for (int sweep = 0; sweep < 100; ++sweep) {
        double off = 0.0;
        for (std::size_t i = 0; i < n; ++i)
            for (std::size_t j = i + 1; j < n; ++j) off += A[i * n + j] * A[i * n + j];
        if (off < 1e-26) break;
        for (std::size_t p = 0; p < n; ++p)
            for (std::size_t q = p + 1; q < n; ++q) {
                if (std::fabs(A[p * n + q]) < 1e-300) continue;
                double theta = (A[q * n + q] - A[p * n + p]) / (2.0 * A[p * n + q]);
                double t = (theta >= 0 ? 1.0 : -1.0) /
                           (std::fabs(theta) + std::sqrt(theta * theta + 1.0));
                double c = 1.0 / std::sqrt(t * t + 1.0), s = t * c;
                for (std::size_t k = 0; k < n; ++k) {
                    double akp = A[k * n + p], akq = A[k * n + q];
                    A[k * n + p] = c * akp - s * akq;
                    A[k * n + q] = s * akp + c * akq;
                }
                for (std::size_t k = 0; k < n; ++k) {
                    double apk = A[p * n + k], aqk = A[q * n + k];
                    A[p * n + k] = c * apk - s * aqk;
                    A[q * n + k] = s * apk + c * aqk;
                }
                for (std::size_t k = 0; k < n; ++k) {
                    double vkp = V[k * n + p], vkq = V[k * n + q];
                    V[k * n + p] = c * vkp - s * vkq;
                    V[k * n + q] = s * vkp + c * vkq;
                }
            }
    }
}

// In-place Cholesky factor (lower triangle) of an SPD n x n matrix.
void cholesky(std::vector<double>& A, std::size_t n) {
    for (std::size_t i = 0; i < n; ++i) {
        for (std::size_t j = 0; j <= i; ++j) {
            double acc = A[i * n + j];
            for (std::size_t k = 0; k < j; ++k) acc -= A[i * n + k] * A[j * n + k];
            if (i == j) {
                if (!(acc > 0.0)) throw NumericError("posterior precision lost definiteness");
                A[i * n + i] = std::sqrt(acc);
            } else {
                A[i * n + j] = acc / A[j * n + j];
            }
        }
        for (std::size_t j = i + 1; j < n; ++j) A[i * n + j] = 0.0;
    }
}

// Solves L L^T y = b with L from cholesky(); b is overwritten with y.
void chol_solve(const std::vector<double>& L, std::vector<double>& b, std::size_t n) {
    for (std::size_t i = 0; i < n; ++i) {
        double acc = b[i];
        for (std::size_t k = 0; k < i; ++k) acc -= L[i * n + k] * b[k];
        b[i] = acc / L[i * n + i];
    }
    for (std::size_t ii = n; ii-- > 0;) {
        double acc = b[ii];
        for (std::size_t k = ii + 1; k < n; ++k) acc -= L[k * n + ii] * b[k];
        b[ii] = acc / L[ii * n + ii];
    }
}

// Modified Gram-Schmidt on the columns of a p x k matrix (row-major), with a
// second projection pass for numerical orthogonality. A column whose residual
// collapses relative to its original norm is linearly dependent on its
// predecessors; it is replenished from the given stream and retried, keeping
// the basis well conditioned even when the applied operator is rank deficient.
void orthonormalize(std::vector<double>& V, std::size_t p, std::size_t k, RngStream& rng) {
    for (std::size_t l = 0; l < k; ++l) {
        for (int attempt = 0; attempt < 16; ++attempt) {
            double orig = 0.0;
            for (std::size_t i = 0; i < p; ++i) orig += V[i * k + l] * V[i * k + l];
            orig = std::sqrt(orig);
            for (int pass = 0; pass < 2; ++pass)
                for (std::size_t j = 0; j < l; ++j) {
                    double dot = 0.0;
                    for (std::size_t i = 0; i < p; ++i) dot += V[i * k + l] * V[i * k + j];
                    for (std::size_t i = 0; i < p; ++i) V[i * k + l] -= dot * V[i * k + j];
                }
            double norm = 0.0;
            for (std::size_t i = 0; i < p; ++i) norm += V[i * k + l] * V[i * k + l];
            norm = std::sqrt(norm);
            if (norm > 1e-12 && norm > 1e-7 * std::max(orig, 1e-300)) {
                for (std::size_t i = 0; i < p; ++i) V[i * k + l] /= norm;
                break;
            }
            for (std::size_t i = 0; i < p; ++i) V[i * k + l] = rng_normal(rng);
        }
    }
}

// Y = F V with F = sum_s g_s g_s^T, never forming F.
void fisher_apply(const std::vector<Tensor>& grads, const std::vector<double>& V,
                  std::vector<double>& Y, std::size_t p, std::size_t k) {
    std::fill(Y.begin(), Y.end(), 0.0);
    std::vector<double> c(k);
    for (const Tensor& g : grads) {
        std::fill(c.begin(), c.end(), 0.0);
        for (std::size_t i = 0; i < p; ++i) {
            double gi = g[i];
            for (std::size_t l = 0; l < k; ++l) c[l] += gi * V[i * k + l];
        }
        for (std::size_t i = 0; i < p; ++i) {
            double gi = g[i];
            for (std::size_t l = 0; l < k; ++l) Y[i * k + l] += gi * c[l];
        }
    }
}

// Top-k eigenpairs of the empirical Fisher via subspace iteration with a
// final Rayleigh-Ritz rotation. Columns of B come back scaled by the square
// root of their eigenvalue; eigenvalues are returned sorted descending.
void fisher_topk(const std::vector<Tensor>& grads, std::size_t p, std::size_t k,
                 Tensor& B_out, std::vector<double>& eig_out) {
    RngStream init(0x5eedf00dULL, 0);
    std::vector<double> V(p * k), Y(p * k);
    for (auto& v : V) v = rng_normal(init);
    orthonormalize(V, p, k, init);

    std::vector<double> ray(k, 0.0), prev(k, 0.0);
    for (int it = 0; it < 60; ++it) {
        fisher_apply(grads, V, Y, p, k);
        for (std::size_t l = 0; l < k; ++l) {
            double r = 0.0;
            for (std::size_t i = 0; i < p; ++i) r += V[i * k + l] * Y[i * k + l];
            ray[l] = r;
        }
        V = Y;
        orthonormalize(V, p, k, init);
        if (it > 0) {
            double drift = 0.0, scale = 1e-300;
            for (std::size_t l = 0; l < k; ++l) {
                drift = std::max(drift, std::fabs(ray[l] - prev[l]));
                scale = std::max(scale, std::fabs(ray[l]));
            }
            if (drift <= 1e-12 * scale) break;
        }
        prev = ray;
    }

    // Rayleigh-Ritz: diagonalize V^T F V and rotate the basis.
    fisher_apply(grads, V, Y, p, k);
    std::vector<double> M(k * k, 0.0);
    for (std::size_t l = 0; l < k; ++l)
        for (std::size_t m = 0; m < k; ++m) {
            double acc = 0.0;
            for (std::size_t i = 0; i < p; ++i) acc += V[i * k + l] * Y[i * k + m];
            M[l * k + m] = acc;
        }
    for (std::size_t l = 0; l < k; ++l)
        for (std::size_t m = l + 1; m < k; ++m) {
            double sym = 0.5 * (M[l * k + m] + M[m * k + l]);
            M[l * k + m] = M[m * k + l] = sym;
        }
    std::vector<double> U;
    jacobi_eig(M, U, k);
    std::vector<std::size_t> order(k);
    for (std::size_t l = 0; l < k; ++l) order[l] = l;
    std::sort(order.begin(), order.end(),
              [&](std::size_t a, std::size_t b) { return M[a * k + a] > M[b * k + b]; });

    B_out = Tensor({p, k}, 0.0f);
    eig_out.resize(k);
    for (std::size_t l = 0; l < k; ++l) {
        std::size_t src = order[l];
        double ev = std::max(M[src * k + src], 0.0);
        eig_out[l] = ev;
        double scale = std::sqrt(ev);
        for (std::size_t i = 0; i < p; ++i) {
            double acc = 0.0;
            for (std::size_t m = 0; m < k; ++m) acc += V[i * k + m] * U[m * k + src];
            B_out[i * k + l] = static_cast<float>(scale * acc);
        }
    }
}

std::vector<double> precision_diagonal(const HeadPosterior& post) {
    std::size_t p = post.param_count();
    if (post.fisher_diag.numel() != p)
        throw DataError("posterior diagonal length does not match parameter count");
    std::vector<double> d(p);
    for (std::size_t i = 0; i < p; ++i)
        d[i] = std::max(static_cast<double>(post.fisher_diag[i]) + post.prior_precision,
                        kPrecisionFloor);
    return d;
}

void check_posterior(const HeadPosterior& post) {
    if (!(post.prior_precision > 0.0))
        throw ConfigError("prior precision must be positive");
    std::size_t p = post.param_count();
    if (post.fisher_diag.numel() != p)
        throw DataError("posterior diagonal length does not match parameter count");
    if (post.mode == HessianMode::LowRank) {
        if (post.fisher_factor.ndim() != 2 || post.fisher_factor.extent(0) != p)
            throw DataError("posterior factor shape does not match parameter count");
    }
    for (std::size_t i = 0; i < p; ++i)
        if (post.fisher_diag[i] < 0.0f)
            throw DataError("posterior Fisher diagonal must be non-negative");
}

// I + B^T D^{-1} B, ready for cholesky().
std::vector<double> woodbury_core(const HeadPosterior& post, const std::vector<double>& d) {
    std::size_t p = post.param_count(), k = post.factor_rank();
    std::vector<double> C(k * k, 0.0);
    for (std::size_t i = 0; i < p; ++i) {
        const float* row = post.fisher_factor.data() + i * k;
        double inv = 1.0 / d[i];
        for (std::size_t l = 0; l < k; ++l)
            for (std::size_t m = l; m < k; ++m)
                C[l * k + m] += row[l] * inv * row[m];
    }
    for (std::size_t l = 0; l < k; ++l) {
        for (std::size_t m = 0; m < l; ++m) C[l * k + m] = C[m * k + l];
        C[l * k + l] += 1.0;
    }
    return C;
}

void flatten_into(const GradBundle& g, float* dst, std::size_t expect) {
    std::size_t off = 0;
    for (const auto& group : g.param_grads)
        for (const auto& t : group) {
            std::copy(t.data(), t.data() + t.numel(), dst + off);
            off += t.numel();
        }
    if (off != expect) throw DataError("gradient bundle does not match parameter count");
}

void check_binary_mask(const Tensor& mask, std::size_t n, const char* where) {
    if (mask.numel() != n) throw DataError(std::string(where) + ": mask size mismatch");
    for (std::size_t i = 0; i < n; ++i)
        if (mask[i] != 0.0f && mask[i] != 1.0f)
            throw DataError(std::string(where) + ": mask must be 0/1 valued");
}

void stack_probs(PredictiveStack& stack, std::size_t C, std::size_t HW) {
    stack.probs = Tensor(stack.logits.shape(), 0.0f);
    std::size_t outer = static_cast<std::size_t>(stack.m) * stack.n_inner;
    for (std::size_t o = 0; o < outer; ++o) {
        const float* lg = stack.logits.data() + o * C * HW;
        float* pr = stack.probs.data() + o * C * HW;
        if (C == 1) {
            for (std::size_t i = 0; i < HW; ++i) pr[i] = static_cast<float>(sigmoid(lg[i]));
        } else {
            for (std::size_t px = 0; px < HW; ++px) {
                double mx = lg[px];
                for (std::size_t c = 1; c < C; ++c)
                    mx = std::max(mx, static_cast<double>(lg[c * HW + px]));
                double total = 0.0;
                for (std::size_t c = 0; c < C; ++c) total += std::exp(lg[c * HW + px] - mx);
                for (std::size_t c = 0; c < C; ++c)
                    pr[c * HW + px] =
                        static_cast<float>(std::exp(lg[c * HW + px] - mx) / total);
            }
        }
    }
}

}  // namespace

// ---- parameter packing ----------------------------------------------------

std::size_t ssn_param_count(const SsnHead& head) {
    return head.trunk.param_count() + head.mu_branch.param_count() +
           head.p_branch.param_count() + head.d_branch.param_count();
}

Tensor ssn_params_flatten(const SsnHead& head) {
    Tensor flat({std::max<std::size_t>(ssn_param_count(head), 1)}, 0.0f);
    std::size_t off = 0;
    for (const Network* net :
         {&head.trunk, &head.mu_branch, &head.p_branch, &head.d_branch}) {
        Tensor part = params_flatten(*net);
        std::copy(part.data(), part.data() + net->param_count(), flat.data() + off);
        off += net->param_count();
    }
    return flat;
}

void ssn_params_load(SsnHead& head, const Tensor& flat) {
    if (flat.numel() != std::max<std::size_t>(ssn_param_count(head), 1))
        throw DataError("ssn_params_load: vector length mismatch");
    std::size_t off = 0;
    for (Network* net : {&head.trunk, &head.mu_branch, &head.p_branch, &head.d_branch}) {
        std::size_t c = net->param_count();
        Tensor part({std::max<std::size_t>(c, 1)}, 0.0f);
        std::copy(flat.data() + off, flat.data() + off + c, part.data());
        params_load(*net, part);
        off += c;
    }
}

Tensor ssn_grads_flatten(const SsnHead& head, const SsnGrads& grads) {
    Tensor flat({std::max<std::size_t>(ssn_param_count(head), 1)}, 0.0f);
    flatten_into(grads.trunk, flat.data(), head.trunk.param_count());
    std::size_t off = head.trunk.param_count();
    flatten_into(grads.mu, flat.data() + off, head.mu_branch.param_count());
    off += head.mu_branch.param_count();
    flatten_into(grads.p, flat.data() + off, head.p_branch.param_count());
    off += head.p_branch.param_count();
    flatten_into(grads.d, flat.data() + off, head.d_branch.param_count());
    return flat;
}

// ---- MAP training ---------------------------------------------------------

FitReport fit_map(SsnHead& head, const Network& encoder, const Dataset& train,
                  const FitConfig& cfg) {
    if (train.empty()) throw DataError("fit_map: empty training set");
    if (cfg.epochs < 0 || cfg.lr < 0.0 || cfg.t_inner < 1)
        throw ConfigError("fit_map: invalid training configuration");

    std::size_t N = train.size();
    std::vector<Tensor> feats(N), feats_flip, masks_flip;
    for (std::size_t i = 0; i < N; ++i) feats[i] = forward_eval(encoder, train[i].image);
    if (cfg.augment_hflip) {
        feats_flip.resize(N);
        masks_flip.resize(N);
        for (std::size_t i = 0; i < N; ++i) {
            feats_flip[i] = forward_eval(encoder, hflip(train[i].image));
            masks_flip[i] = hflip(train[i].mask);
        }
    }

    OptimConfig oc{cfg.lr, cfg.momentum, cfg.weight_decay};
    OptimState st_t, st_m, st_p, st_d;
    std::uint64_t base = fnv1a64("fit_map");
    FitReport rep;
    for (int ep = 0; ep < cfg.epochs; ++ep) {
        double total = 0.0;
        for (std::size_t i = 0; i < N; ++i) {
            std::uint64_t step = static_cast<std::uint64_t>(ep) * N + i;
            bool flip = false;
            if (cfg.augment_hflip) {
                RngStream fs = child_stream(cfg.seed, base, "flip", step);
                flip = rng_uniform(fs) < 0.5;
            }
            const Tensor& f = flip ? feats_flip[i] : feats[i];
            const Tensor& y = flip ? masks_flip[i] : train[i].mask;

            SsnTrainState ts = ssn_forward_train(head, f);
            RngStream nr = child_stream(cfg.seed, base, "nll", step);
            SsnNll res = ssn_nll(ts.dist, y, cfg.t_inner, nr);
            if (!std::isfinite(res.loss)) {
                std::ostringstream msg;
                msg << "fit_map: loss diverged at epoch " << ep << ", image " << i
                    << " (loss=" << res.loss << ")";
                throw NumericError(msg.str());
            }
            total += res.loss;
            SsnGrads g = ssn_head_backward(head, ts, res.g_mu, res.g_P, res.g_draw);
            optimizer_step(head.trunk, g.trunk, oc, st_t);
            optimizer_step(head.mu_branch, g.mu, oc, st_m);
            optimizer_step(head.p_branch, g.p, oc, st_p);
            optimizer_step(head.d_branch, g.d, oc, st_d);
        }
        rep.epoch_loss.push_back(total / static_cast<double>(N));
    }
    return rep;
}

FitReport fit_map_dropout(Network& head, const Network& encoder, const Dataset& train,
                          const FitConfig& cfg) {
    if (train.empty()) throw DataError("fit_map_dropout: empty training set");
    if (cfg.epochs < 0 || cfg.lr < 0.0)
        throw ConfigError("fit_map_dropout: invalid training configuration");

    std::size_t N = train.size();
    std::vector<Tensor> feats(N), feats_flip, masks_flip;
    for (std::size_t i = 0; i < N; ++i) feats[i] = forward_eval(encoder, train[i].image);
    if (cfg.augment_hflip) {
        feats_flip.resize(N);
        masks_flip.resize(N);
        for (std::size_t i = 0; i < N; ++i) {
            feats_flip[i] = forward_eval(encoder, hflip(train[i].image));
            masks_flip[i] = hflip(train[i].mask);
        }
    }

    OptimConfig oc{cfg.lr, cfg.momentum, cfg.weight_decay};
    OptimState st;
    std::uint64_t base = fnv1a64("fit_map_dropout");
    FitReport rep;
    for (int ep = 0; ep < cfg.epochs; ++ep) {
        double total = 0.0;
        for (std::size_t i = 0; i < N; ++i) {
            std::uint64_t step = static_cast<std::uint64_t>(ep) * N + i;
            bool flip = false;
            if (cfg.augment_hflip) {
                RngStream fs = child_stream(cfg.seed, base, "flip", step);
                flip = rng_uniform(fs) < 0.5;
            }
            const Tensor& f = flip ? feats_flip[i] : feats[i];
            const Tensor& y = flip ? masks_flip[i] : train[i].mask;

            RngStream dr = child_stream(cfg.seed, base, "drop", step);
            Activations acts = forward(head, f, Mode::Train, &dr);
            const Tensor& eta = acts.output();
            if (eta.extent(0) != 1)
                throw ConfigError("fit_map_dropout: head must emit one logit channel");
            check_binary_mask(y, eta.numel(), "fit_map_dropout");

            double loss = 0.0;
            Tensor gout(eta.shape(), 0.0f);
            for (std::size_t px = 0; px < eta.numel(); ++px) {
                double e = eta[px], yy = y[px];
                loss += yy * softplus(-e) + (1.0 - yy) * softplus(e);
                gout[px] = static_cast<float>(sigmoid(e) - yy);
            }
            if (!std::isfinite(loss)) {
                std::ostringstream msg;
                msg << "fit_map_dropout: loss diverged at epoch " << ep << ", image " << i;
                throw NumericError(msg.str());
            }
            total += loss;
            GradBundle g = backward(head, acts, gout);
            optimizer_step(head, g, oc, st);
        }
        rep.epoch_loss.push_back(total / static_cast<double>(N));
    }
    return rep;
}

// ---- Fisher estimation ----------------------------------------------------

HeadPosterior fit_hessian_from_grads(const Tensor& theta_map,
                                     const std::vector<Tensor>& per_sample_grads,
                                     HessianMode mode, int k, double lambda) {
    if (per_sample_grads.empty()) throw DataError("fit_hessian: empty dataset");
    if (!(lambda > 0.0)) throw ConfigError("fit_hessian: prior precision must be positive");
    std::size_t p = theta_map.numel();
    for (const Tensor& g : per_sample_grads)
        if (g.numel() != p)
            throw DataError("fit_hessian: gradient length does not match parameter count");

    std::vector<double> diag(p, 0.0);
    for (const Tensor& g : per_sample_grads)
        for (std::size_t i = 0; i < p; ++i) diag[i] += static_cast<double>(g[i]) * g[i];

    HeadPosterior post;
    post.theta_map = theta_map;
    post.mode = mode;
    post.prior_precision = lambda;
    if (mode == HessianMode::Diag) {
        post.fisher_diag = Tensor({p}, 0.0f);
        for (std::size_t i = 0; i < p; ++i)
            post.fisher_diag[i] = static_cast<float>(diag[i]);
        return post;
    }

    if (k < 1 || static_cast<std::size_t>(k) > p)
        throw ConfigError("fit_hessian: factor rank must be between 1 and the parameter count");
    std::vector<double> eig;
    fisher_topk(per_sample_grads, p, static_cast<std::size_t>(k), post.fisher_factor, eig);
    post.fisher_diag = Tensor({p}, 0.0f);
    std::size_t kk = static_cast<std::size_t>(k);
    for (std::size_t i = 0; i < p; ++i) {
        double captured = 0.0;
        const float* row = post.fisher_factor.data() + i * kk;
        for (std::size_t l = 0; l < kk; ++l)
            captured += static_cast<double>(row[l]) * row[l];
        post.fisher_diag[i] = static_cast<float>(std::max(diag[i] - captured, 0.0));
    }
    return post;
}

HeadPosterior fit_hessian(const SsnHead& head, const Network& encoder,
                          const Dataset& data, HessianMode mode, int k, double lambda,
                          int t_inner, const RngStream& rng) {
    if (data.empty()) throw DataError("fit_hessian: empty dataset");
    if (t_inner < 1) throw ConfigError("fit_hessian: need at least one inner sample");
    SsnHead work = head;
    std::vector<Tensor> grads;
    grads.reserve(data.size());
    for (const Sample& s : data) {
        Tensor f = forward_eval(encoder, s.image);
        SsnTrainState ts = ssn_forward_train(work, f);
        // Key the likelihood draws by content, not position, so the Fisher is
        // invariant under dataset reordering.
        std::uint64_t key = fnv1a64(s.mask.data(), s.mask.numel() * sizeof(float),
                                    fnv1a64(s.image.data(), s.image.numel() * sizeof(float)));
        RngStream sr(rng.root_seed, rng_mix64(rng.stream_id ^ fnv1a64("fisher") ^ key));
        SsnNll res = ssn_nll(ts.dist, s.mask, t_inner, sr);
        SsnGrads g = ssn_head_backward(work, ts, res.g_mu, res.g_P, res.g_draw);
        grads.push_back(ssn_grads_flatten(work, g));
    }
    return fit_hessian_from_grads(ssn_params_flatten(head), grads, mode, k, lambda);
}

// ---- posterior access -----------------------------------------------------

Tensor posterior_sample(const HeadPosterior& post, RngStream& rng) {
    check_posterior(post);
    std::size_t p = post.param_count();
    std::vector<double> d = precision_diagonal(post);
    Tensor out(post.theta_map.shape(), 0.0f);

    std::vector<double> z(p);
    for (std::size_t i = 0; i < p; ++i) z[i] = rng_normal(rng);

    if (post.mode == HessianMode::Diag) {
        for (std::size_t i = 0; i < p; ++i)
            out[i] = static_cast<float>(post.theta_map[i] + z[i] / std::sqrt(d[i]));
        return out;
    }

    // H = B B^T + D. With W = D^{-1/2} B, a draw is
    //   theta = map + D^{-1/2} (I + W W^T)^{-1/2} z,
    // and the matrix square root acts only inside span(W).
    std::size_t k = post.factor_rank();
    std::vector<double> W(p * k);
    for (std::size_t i = 0; i < p; ++i) {
        double inv_sqrt = 1.0 / std::sqrt(d[i]);
        const float* row = post.fisher_factor.data() + i * k;
        for (std::size_t l = 0; l < k; ++l) W[i * k + l] = row[l] * inv_sqrt;
    }
    std::vector<double> S(k * k, 0.0);
    for (std::size_t i = 0; i < p; ++i)
        for (std::size_t l = 0; l < k; ++l)
            for (std::size_t m = l; m < k; ++m)
                S[l * k + m] += W[i * k + l] * W[i * k + m];
    for (std::size_t l = 0; l < k; ++l)
        for (std::size_t m = 0; m < l; ++m) S[l * k + m] = S[m * k + l];

    std::vector<double> U;
    jacobi_eig(S, U, k);

    std::vector<double> t(k, 0.0);
    for (std::size_t i = 0; i < p; ++i)
        for (std::size_t l = 0; l < k; ++l) t[l] += W[i * k + l] * z[i];
    std::vector<double> a(k, 0.0);
    for (std::size_t l = 0; l < k; ++l)
        for (std::size_t m = 0; m < k; ++m) a[l] += U[m * k + l] * t[m];
    for (std::size_t l = 0; l < k; ++l) {
        double sig = std::max(S[l * k + l], 0.0);
        double c = sig > 1e-12 ? (1.0 / std::sqrt(1.0 + sig) - 1.0) / sig
                               : -0.5 + 0.375 * sig;
        a[l] *= c;
    }
    std::vector<double> b(k, 0.0);
    for (std::size_t l = 0; l < k; ++l)
        for (std::size_t m = 0; m < k; ++m) b[l] += U[l * k + m] * a[m];

    for (std::size_t i = 0; i < p; ++i) {
        double y = z[i];
        for (std::size_t l = 0; l < k; ++l) y += W[i * k + l] * b[l];
        out[i] = static_cast<float>(post.theta_map[i] + y / std::sqrt(d[i]));
    }
    return out;
}

Tensor posterior_variance_rows(const HeadPosterior& post, const std::vector<Tensor>& rows) {
    check_posterior(post);
    std::size_t p = post.param_count();
    std::vector<double> d = precision_diagonal(post);
    Tensor out({std::max<std::size_t>(rows.size(), 1)}, 0.0f);

    if (post.mode == HessianMode::Diag) {
        for (std::size_t t = 0; t < rows.size(); ++t) {
            const Tensor& r = rows[t];
            if (r.numel() != p) throw DataError("posterior_variance_rows: row length mismatch");
            double acc = 0.0;
            for (std::size_t i = 0; i < p; ++i)
                acc += static_cast<double>(r[i]) * r[i] / d[i];
            out[t] = static_cast<float>(acc);
        }
        return out;
    }

    std::size_t k = post.factor_rank();
    std::vector<double> C = woodbury_core(post, d);
    cholesky(C, k);
    std::vector<double> w(k);
    for (std::size_t t = 0; t < rows.size(); ++t) {
        const Tensor& r = rows[t];
        if (r.numel() != p) throw DataError("posterior_variance_rows: row length mismatch");
        double acc = 0.0;
        std::fill(w.begin(), w.end(), 0.0);
        for (std::size_t i = 0; i < p; ++i) {
            double ri = r[i];
            double inv = 1.0 / d[i];
            acc += ri * ri * inv;
            const float* row = post.fisher_factor.data() + i * k;
            for (std::size_t l = 0; l < k; ++l) w[l] += row[l] * inv * ri;
        }
        std::vector<double> y(w);
        chol_solve(C, y, k);
        double corr = 0.0;
        for (std::size_t l = 0; l < k; ++l) corr += w[l] * y[l];
        out[t] = static_cast<float>(std::max(acc - corr, 0.0));
    }
    return out;
}

// ---- Jacobian products of the mean-logit field ----------------------------

Tensor ssn_mu_jvp(const SsnHead& head, const Tensor& f, const Tensor& tangent) {
    std::size_t p = ssn_param_count(head);
    if (tangent.numel() != p) throw DataError("ssn_mu_jvp: tangent length mismatch");
    std::size_t tc = head.trunk.param_count(), mc = head.mu_branch.param_count();

    Tensor tt({std::max<std::size_t>(tc, 1)}, 0.0f);
    std::copy(tangent.data(), tangent.data() + tc, tt.data());
    Tensor tm({std::max<std::size_t>(mc, 1)}, 0.0f);
    std::copy(tangent.data() + tc, tangent.data() + tc + mc, tm.data());

    Tensor h = forward_eval(head.trunk, f);
    Tensor dh = jvp(head.trunk, f, tt);
    return jvp(head.mu_branch, h, tm, &dh);
}

Tensor ssn_mu_vjp(const SsnHead& head, const Tensor& f, const Tensor& cotangent) {
    Activations at = forward(const_cast<Network&>(head.trunk), f, Mode::Eval, nullptr);
    Activations am =
        forward(const_cast<Network&>(head.mu_branch), at.output(), Mode::Eval, nullptr);
    if (!cotangent.same_shape(am.output()))
        throw DataError("ssn_mu_vjp: cotangent shape mismatch");
    GradBundle gm = backward(head.mu_branch, am, cotangent);
    GradBundle gt = backward(head.trunk, at, gm.input_grad);

    Tensor flat({std::max<std::size_t>(ssn_param_count(head), 1)}, 0.0f);
    flatten_into(gt, flat.data(), head.trunk.param_count());
    flatten_into(gm, flat.data() + head.trunk.param_count(),
                 head.mu_branch.param_count());
    return flat;
}

// ---- linearized predictive ------------------------------------------------

namespace {

void require_map_match(const HeadPosterior& post, const SsnHead& head, const char* where) {
    Tensor theta = ssn_params_flatten(head);
    if (theta.numel() != std::max<std::size_t>(post.param_count(), 1))
        throw DataError(std::string(where) + ": posterior does not match head size");
    for (std::size_t i = 0; i < post.param_count(); ++i)
        if (theta[i] != post.theta_map[i])
            throw DataError(std::string(where) + ": head parameters differ from the MAP");
}

}  // namespace

LinearizedPredictive linearized_predictive(const HeadPosterior& post, const SsnHead& head,
                                           const Tensor& f, AleatoricForm form) {
    check_posterior(post);
    require_map_match(post, head, "linearized_predictive");
    std::size_t p = post.param_count();

    LinearizedPredictive out;
    LowRankGaussian dist = ssn_forward(head, f);
    out.mean_logits = dist.mu;
    Tensor alea = form == AleatoricForm::FullDiag ? lrg_variance_diag(dist) : lrg_diag(dist);
    out.aleatoric_var = alea.reshaped(dist.mu.shape());

    std::size_t n = dist.mu.numel();
    std::vector<double> d = precision_diagonal(post);
    std::vector<double> epi(n, 0.0);

    // diag(J D^{-1} J^T) from p forward-mode columns.
    Tensor basis({p}, 0.0f);
    for (std::size_t j = 0; j < p; ++j) {
        basis[j] = 1.0f;
        Tensor col = ssn_mu_jvp(head, f, basis);
        basis[j] = 0.0f;
        double inv = 1.0 / d[j];
        for (std::size_t i = 0; i < n; ++i)
            epi[i] += static_cast<double>(col[i]) * col[i] * inv;
    }

    if (post.mode == HessianMode::LowRank) {
        // Woodbury correction: -diag(M C^{-1} M^T) with M = J D^{-1} B.
        std::size_t k = post.factor_rank();
        std::vector<double> M(n * k);
        Tensor t({p}, 0.0f);
        for (std::size_t l = 0; l < k; ++l) {
            for (std::size_t i = 0; i < p; ++i)
                t[i] = static_cast<float>(post.fisher_factor[i * k + l] / d[i]);
            Tensor col = ssn_mu_jvp(head, f, t);
            for (std::size_t i = 0; i < n; ++i) M[i * k + l] = col[i];
        }
        std::vector<double> C = woodbury_core(post, d);
        cholesky(C, k);
        std::vector<double> w(k);
        for (std::size_t i = 0; i < n; ++i) {
            for (std::size_t l = 0; l < k; ++l) w[l] = M[i * k + l];
            std::vector<double> y(w);
            chol_solve(C, y, k);
            double corr = 0.0;
            for (std::size_t l = 0; l < k; ++l) corr += w[l] * y[l];
            epi[i] -= corr;
        }
    }

    out.epistemic_var = Tensor(dist.mu.shape(), 0.0f);
    for (std::size_t i = 0; i < n; ++i)
        out.epistemic_var[i] = static_cast<float>(std::max(epi[i], 0.0));
    return out;
}

// ---- sampling-based predictive --------------------------------------------

PredictiveStack predictive_samples(const Network& encoder, const SsnHead& head,
                                   const HeadPosterior& post, const Tensor& image, int m,
                                   int n_inner, RngStream& rng) {
    if (m < 1 || n_inner < 1)
        throw ConfigError("predictive_samples: need m >= 1 and n_inner >= 1");
    check_posterior(post);
    require_map_match(post, head, "predictive_samples");

    Tensor f = forward_eval(encoder, image);
    LowRankGaussian probe = ssn_forward(head, f);
    std::size_t C = probe.mu.extent(0), H = probe.mu.extent(1), W = probe.mu.extent(2);
    std::size_t n = probe.mu.numel();

    PredictiveStack stack;
    stack.m = m;
    stack.n_inner = n_inner;
    stack.root_seed = rng.root_seed;
    stack.draw_streams.resize(static_cast<std::size_t>(m));
    stack.logits = Tensor({static_cast<std::size_t>(m), static_cast<std::size_t>(n_inner),
                           C, H, W},
                          0.0f);

    parallel_for(static_cast<std::size_t>(m), default_jobs(), [&](std::size_t j) {
        RngStream s = child_stream(rng.root_seed, rng.stream_id, "draw", j);
        stack.draw_streams[j] = s.stream_id;
        Tensor theta = posterior_sample(post, s);
        SsnHead hj = head;
        ssn_params_load(hj, theta);
        LowRankGaussian dj = ssn_forward(hj, f);
        Tensor draws = ssn_sample(dj, n_inner, s);  // (n_inner, n)
        float* dst = stack.logits.data() + j * static_cast<std::size_t>(n_inner) * n;
        std::copy(draws.data(), draws.data() + draws.numel(), dst);
    });

    ensure_finite(stack.logits, "predictive logits");
    stack_probs(stack, C, H * W);
    return stack;
}

PredictiveStack predictive_samples_dropout(const Network& encoder, Network& head,
                                           const Tensor& image, int m, RngStream& rng) {
    if (m < 1) throw ConfigError("predictive_samples_dropout: need m >= 1");
    bool has_dropout = false;
    for (const LayerSpec& L : head.layers) {
        if (L.kind == LayerKind::Dropout && L.rate > 0.0) has_dropout = true;
        if (L.kind == LayerKind::BatchNorm2d || L.kind == LayerKind::BatchNorm3d)
            throw ConfigError(
                "predictive_samples_dropout: batchnorm is not supported in mc-dropout heads");
    }
    if (!has_dropout)
        throw ConfigError("predictive_samples_dropout: head has no active dropout layer");

    Tensor f = forward_eval(encoder, image);
    Tensor probe = forward_eval(head, f);
    std::size_t C = probe.extent(0), H = probe.extent(1), W = probe.extent(2);
    std::size_t n = probe.numel();

    PredictiveStack stack;
    stack.m = m;
    stack.n_inner = 1;
    stack.root_seed = rng.root_seed;
    stack.draw_streams.resize(static_cast<std::size_t>(m));
    stack.logits = Tensor({static_cast<std::size_t>(m), 1, C, H, W}, 0.0f);

    for (std::size_t j = 0; j < static_cast<std::size_t>(m); ++j) {
        RngStream s = child_stream(rng.root_seed, rng.stream_id, "mc-drop", j);
        stack.draw_streams[j] = s.stream_id;
        Activations acts = forward(head, f, Mode::Train, &s);
        const Tensor& eta = acts.output();
        std::copy(eta.data(), eta.data() + n, stack.logits.data() + j * n);
    }

    ensure_finite(stack.logits, "predictive logits");
    stack_probs(stack, C, H * W);
    return stack;
}

// ---- prior tuning ---------------------------------------------------------

double tune_prior(HeadPosterior& post, const SsnHead& head, const Network& encoder,
                  const Dataset& val, const std::vector<double>& grid,
                  std::size_t pixel_subset, RngStream& rng) {
    if (grid.empty()) throw ConfigError("tune_prior: empty grid");
    for (double g : grid)
        if (!(g > 0.0)) throw ConfigError("tune_prior: prior precisions must be positive");
    if (val.empty()) throw DataError("tune_prior: empty validation set");
    check_posterior(post);
    require_map_match(post, head, "tune_prior");

    // Jacobian rows, mean logits, aleatoric variances and targets for every
    // scored pixel; all independent of lambda, so computed exactly once.
    std::vector<Tensor> rows;
    std::vector<double> mu_v, alea_v, y_v;
    for (std::size_t si = 0; si < val.size(); ++si) {
        Tensor f = forward_eval(encoder, val[si].image);
        LowRankGaussian dist = ssn_forward(head, f);
        std::size_t n = dist.mu.numel();
        check_binary_mask(val[si].mask, n, "tune_prior");
        Tensor alea = lrg_variance_diag(dist);

        std::vector<std::size_t> idx(n);
        for (std::size_t i = 0; i < n; ++i) idx[i] = i;
        std::size_t take = (pixel_subset == 0 || pixel_subset >= n) ? n : pixel_subset;
        if (take < n) {
            RngStream ps = child_stream(rng.root_seed, rng.stream_id, "pixels", si);
            for (std::size_t t = 0; t < take; ++t) {
                std::size_t j =
                    t + static_cast<std::size_t>(rng_uniform(ps) * static_cast<double>(n - t));
                if (j >= n) j = n - 1;
                std::swap(idx[t], idx[j]);
            }
        }

        Tensor cot(dist.mu.shape(), 0.0f);
        for (std::size_t t = 0; t < take; ++t) {
            std::size_t px = idx[t];
            cot[px] = 1.0f;
            rows.push_back(ssn_mu_vjp(head, f, cot));
            cot[px] = 0.0f;
            mu_v.push_back(dist.mu[px]);
            alea_v.push_back(alea[px]);
            y_v.push_back(val[si].mask[px]);
        }
    }

    std::vector<double> sorted(grid);
    std::sort(sorted.begin(), sorted.end());
    double best_ll = -std::numeric_limits<double>::infinity();
    double best_lambda = sorted.front();
    for (double lambda : sorted) {
        HeadPosterior trial = post;
        trial.prior_precision = lambda;
        Tensor vars = posterior_variance_rows(trial, rows);
        double ll = 0.0;
        for (std::size_t t = 0; t < rows.size(); ++t) {
            double v = static_cast<double>(vars[t]) + alea_v[t];
            double a = mu_v[t] / std::sqrt(1.0 + kPi * v / 8.0);
            ll -= y_v[t] * softplus(-a) + (1.0 - y_v[t]) * softplus(a);
        }
        ll /= static_cast<double>(rows.size());
        if (ll >= best_ll) {  // scanning ascending, so ties go to the larger lambda
            best_ll = ll;
            best_lambda = lambda;
        }
    }
    post.prior_precision = best_lambda;
    return best_lambda;
}

// ---- persistence ----------------------------------------------------------

void posterior_save(const HeadPosterior& post, const std::string& path) {
    check_posterior(post);
    std::ofstream os(path, std::ios::binary);
    if (!os) throw DataError("cannot open for writing: " + path);
    os.write("LFP1", 4);
    char line[128];
    int len;
    if (post.mode == HessianMode::Diag)
        len = std::snprintf(line, sizeof line, "mode=diag lambda=%.17g", post.prior_precision);
    else
        len = std::snprintf(line, sizeof line, "mode=lowrank k=%zu lambda=%.17g",
                            post.factor_rank(), post.prior_precision);
    std::uint32_t n = static_cast<std::uint32_t>(len);
    unsigned char lb[4] = {static_cast<unsigned char>(n), static_cast<unsigned char>(n >> 8),
                           static_cast<unsigned char>(n >> 16),
                           static_cast<unsigned char>(n >> 24)};
    os.write(reinterpret_cast<const char*>(lb), 4);
    os.write(line, len);
    tensor_write(post.theta_map, os);
    tensor_write(post.fisher_diag, os);
    if (post.mode == HessianMode::LowRank) tensor_write(post.fisher_factor, os);
    if (!os) throw DataError("write failed: " + path);
}

HeadPosterior posterior_load(const std::string& path) {
    std::ifstream is(path, std::ios::binary);
    if (!is) throw DataError("cannot open: " + path);
    char magic[4];
    if (!is.read(magic, 4) || std::memcmp(magic, "LFP1", 4) != 0)
        throw DataError("bad LFP1 magic: " + path);
    unsigned char lb[4];
    if (!is.read(reinterpret_cast<char*>(lb), 4))
        throw DataError("truncated LFP1 header: " + path);
    std::uint32_t len = static_cast<std::uint32_t>(lb[0]) |
                        (static_cast<std::uint32_t>(lb[1]) << 8) |
                        (static_cast<std::uint32_t>(lb[2]) << 16) |
                        (static_cast<std::uint32_t>(lb[3]) << 24);
    if (len > 4096) throw DataError("implausible LFP1 header: " + path);
    std::string line(len, '\0');
    if (!is.read(line.data(), len)) throw DataError("truncated LFP1 header: " + path);

    HeadPosterior post;
    long parsed_k = -1;
    bool have_mode = false, have_lambda = false;
    std::istringstream ls(line);
    std::string tok;
    while (ls >> tok) {
        std::size_t eq = tok.find('=');
        if (eq == std::string::npos) throw DataError("bad LFP1 metadata: " + path);
        std::string key = tok.substr(0, eq), val = tok.substr(eq + 1);
        if (key == "mode") {
            if (val == "diag") post.mode = HessianMode::Diag;
            else if (val == "lowrank") post.mode = HessianMode::LowRank;
            else throw DataError("bad LFP1 mode: " + path);
            have_mode = true;
        } else if (key == "k") {
            parsed_k = std::strtol(val.c_str(), nullptr, 10);
        } else if (key == "lambda") {
            post.prior_precision = std::strtod(val.c_str(), nullptr);
            have_lambda = true;
        } else {
            throw DataError("unknown LFP1 metadata key: " + path);
        }
    }
    if (!have_mode || !have_lambda || !(post.prior_precision > 0.0))
        throw DataError("incomplete LFP1 metadata: " + path);

    post.theta_map = tensor_read(is, path);
    post.fisher_diag = tensor_read(is, path);
    if (post.mode == HessianMode::LowRank) {
        post.fisher_factor = tensor_read(is, path);
        if (parsed_k < 1 || post.fisher_factor.ndim() != 2 ||
            post.fisher_factor.extent(1) != static_cast<std::size_t>(parsed_k))
            throw DataError("LFP1 factor block inconsistent: " + path);
    }
    if (is.peek() != EOF) throw DataError("trailing bytes in LFP1 file: " + path);
    check_posterior(post);
    return post;
}

}  // namespace lfusion
