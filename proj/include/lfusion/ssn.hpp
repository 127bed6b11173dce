#pragma once

#include <string>
#include <vector>

#include "lfusion/autonet.hpp"
#include "lfusion/rng.hpp"
#include "lfusion/tensor.hpp"

namespace lfusion {

// Aleatoric logit model: a head mapping (frozen) features to a
// low-rank-plus-diagonal Gaussian over per-pixel logits,
//     eta | f  ~  N(mu, P P^T + diag(d)),   d = softplus(d_raw) + 1e-6,
// with reparameterized sampling and a Monte-Carlo marginal-likelihood loss.

constexpr double kDiagFloor = 1e-6;

struct LowRankGaussian {
    Tensor mu;     // logits in natural (C, H, W) shape; n = mu.numel()
    Tensor P;      // (n, r) shared low-rank factor (flattened across classes)
    Tensor d_raw;  // (n) diagonal pre-activation

    std::size_t n() const { return mu.numel(); }
    std::size_t rank() const { return P.extent(1); }
};

// softplus(d_raw) + floor, elementwise (n).
Tensor lrg_diag(const LowRankGaussian& dist);
// diag(P P^T + D): per-logit marginal variance (n).
Tensor lrg_variance_diag(const LowRankGaussian& dist);

// Head = shared conv trunk plus three 1x1 output branches. The factor
// branch emits classes*rank channels; column k of P for pixel (c,y,x) lives
// in branch channel c*rank + k.
struct SsnHead {
    Network trunk;
    Network mu_branch;
    Network p_branch;
    Network d_branch;
    int classes = 1;
    int rank = 10;
};

// Deterministic (eval-mode) head evaluation.
LowRankGaussian ssn_forward(const SsnHead& head, const Tensor& f);

// Training-mode evaluation keeping every activation for the backward pass.
struct SsnTrainState {
    Activations trunk_acts, mu_acts, p_acts, d_acts;
    LowRankGaussian dist;
};
SsnTrainState ssn_forward_train(SsnHead& head, const Tensor& f);

// Pushes distribution-level cotangents (g_mu in logit shape, g_P (n,r),
// g_draw (n)) back through branches and trunk.
struct SsnGrads {
    GradBundle trunk, mu, p, d;
};
SsnGrads ssn_head_backward(const SsnHead& head, const SsnTrainState& state,
                           const Tensor& g_mu, const Tensor& g_P, const Tensor& g_draw);

// m reparameterized logit samples, one per row: eta_j = mu + P z_j + sqrt(d) eps_j.
// Draw order per sample: z (r normals) then eps (n normals).
Tensor ssn_sample(const LowRankGaussian& dist, int m, RngStream& rng);

enum class SegTask { Binary, Multiclass };

// Binary: per-pixel Bernoulli(sigmoid(eta)) draw -> (H, W) 0/1 mask.
// Multiclass: per-pixel argmax (deterministic) or, with categorical=true,
// a categorical draw from the softmax -> (H, W) class indices.
Tensor seg_sample(const Tensor& logits, SegTask task, RngStream* rng = nullptr,
                  bool categorical = false);

// Monte-Carlo marginal likelihood: loss = -log( (1/T) sum_t p(target|eta_t) )
// with T reparameterized samples, plus analytic gradients with respect to
// the distribution parameters (for chaining through the head networks).
struct SsnNll {
    double loss = 0.0;
    Tensor g_mu;    // logit shape
    Tensor g_P;     // (n, r)
    Tensor g_draw;  // (n)
};
SsnNll ssn_nll(const LowRankGaussian& dist, const Tensor& target, int T, RngStream& rng);

// Dense covariance P P^T + diag(d); guarded to n <= 4096.
Tensor dist_cov_dense(const LowRankGaussian& dist);

// Stable max-subtraction log(sum(exp(v))).
double logsumexp(const std::vector<double>& v);

// "LFG1" container: magic, logit-shape header, rank, then mu / P / d_raw as
// three LFT1 blocks.
void lrg_save(const LowRankGaussian& dist, const std::string& path);
LowRankGaussian lrg_load(const std::string& path);

}  // namespace lfusion
