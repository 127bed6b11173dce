#pragma once

#include <cstdint>
#include <string>
#include <vector>

#include "lfusion/autonet.hpp"
#include "lfusion/ssn.hpp"

namespace lfusion {

// Gaussian posterior over the flattened head parameters, centred at the MAP
// estimate. The precision is lambda*I plus an empirical-Fisher estimate that
// is either a full diagonal or a low-rank factor with a residual diagonal:
//
//   Diag:    H* = diag(fisher_diag) + lambda*I
//   LowRank: H* = B B^T + diag(fisher_diag) + lambda*I
//
// where B = fisher_factor has its columns scaled by the square root of the
// corresponding Fisher eigenvalue.
enum class HessianMode { Diag, LowRank };

struct HeadPosterior {
    Tensor theta_map;    // (p)
    HessianMode mode = HessianMode::Diag;
    Tensor fisher_diag;  // (p); residual diagonal in LowRank mode
    Tensor fisher_factor;  // (p, k) in LowRank mode, unused otherwise
    double prior_precision = 1.0;

    std::size_t param_count() const { return theta_map.numel(); }
    std::size_t factor_rank() const {
        return mode == HessianMode::LowRank ? fisher_factor.extent(1) : 0;
    }
};

// One labelled training/validation element. The mask lives at the head's
// output resolution and must be 0/1 valued.
struct Sample {
    Tensor image;  // (C, H, W)
    Tensor mask;   // (H_out, W_out)
};
using Dataset = std::vector<Sample>;

struct FitConfig {
    int epochs = 100;
    double lr = 0.02;
    double momentum = 0.9;
    double weight_decay = 0.0;
    int t_inner = 10;  // Monte-Carlo samples inside the marginal likelihood
    bool augment_hflip = false;
    std::uint64_t seed = 0;
};

struct FitReport {
    std::vector<double> epoch_loss;  // mean per-image loss, one entry per epoch
};

// Flat parameter layout for a whole head: trunk, mu branch, factor branch,
// diagonal branch, each in autonet's own flattening order.
std::size_t ssn_param_count(const SsnHead& head);
Tensor ssn_params_flatten(const SsnHead& head);
void ssn_params_load(SsnHead& head, const Tensor& flat);
Tensor ssn_grads_flatten(const SsnHead& head, const SsnGrads& grads);

// MAP training of a head on top of a frozen encoder. The encoder is applied
// once per image up front and is never modified.
FitReport fit_map(SsnHead& head, const Network& encoder, const Dataset& train,
                  const FitConfig& cfg);
// Same, for a plain logit-producing head trained with cross-entropy; dropout
// layers stay live during training.
FitReport fit_map_dropout(Network& head, const Network& encoder, const Dataset& train,
                          const FitConfig& cfg);

// Empirical-Fisher posterior from explicit per-sample loss gradients. k is
// the factor rank and is only read in LowRank mode, where 1 <= k <= p - 1.
HeadPosterior fit_hessian_from_grads(const Tensor& theta_map,
                                     const std::vector<Tensor>& per_sample_grads,
                                     HessianMode mode, int k, double lambda);

// Convenience wrapper computing the per-sample gradients of the marginal
// likelihood at the head's current parameters. Per-sample RNG streams are
// keyed by the sample content, so the result is independent of dataset order.
HeadPosterior fit_hessian(const SsnHead& head, const Network& encoder,
                          const Dataset& data, HessianMode mode, int k, double lambda,
                          int t_inner, const RngStream& rng);

// One parameter vector drawn from N(theta_map, H*^{-1}).
Tensor posterior_sample(const HeadPosterior& post, RngStream& rng);

// r^T H*^{-1} r for each row r, evaluated through the Woodbury identity in
// LowRank mode. Rows must have length p.
Tensor posterior_variance_rows(const HeadPosterior& post, const std::vector<Tensor>& rows);

// Jacobian products of the mean-logit field mu(theta; f) with respect to the
// flattened head parameters.
Tensor ssn_mu_jvp(const SsnHead& head, const Tensor& f, const Tensor& tangent);
Tensor ssn_mu_vjp(const SsnHead& head, const Tensor& f, const Tensor& cotangent);

// Which part of the distribution counts as aleatoric logit variance:
// the full per-pixel variance diag(P P^T + D) or the diagonal term only.
enum class AleatoricForm { FullDiag, DOnly };

struct LinearizedPredictive {
    Tensor mean_logits;    // mu at the MAP (C, H, W)
    Tensor epistemic_var;  // diag(J H*^{-1} J^T), same shape
    Tensor aleatoric_var;  // same shape
};

// Closed-form predictive from the local linearization of mu(theta) around the
// MAP. Exact in the parameters (no sampling); costs p + k Jacobian products.
LinearizedPredictive linearized_predictive(const HeadPosterior& post, const SsnHead& head,
                                           const Tensor& f,
                                           AleatoricForm form = AleatoricForm::FullDiag);

// m outer parameter draws, each with n_inner logit samples from the head's
// output distribution.
struct PredictiveStack {
    Tensor logits;  // (m, n_inner, C, H, W)
    Tensor probs;   // sigmoid (binary) or per-pixel softmax (multiclass)
    int m = 0;
    int n_inner = 0;
    std::uint64_t root_seed = 0;
    std::vector<std::uint64_t> draw_streams;  // stream id used for each draw
};

PredictiveStack predictive_samples(const Network& encoder, const SsnHead& head,
                                   const HeadPosterior& post, const Tensor& image, int m,
                                   int n_inner, RngStream& rng);

// MC-dropout counterpart: m stochastic forward passes, one logit map each.
PredictiveStack predictive_samples_dropout(const Network& encoder, Network& head,
                                           const Tensor& image, int m, RngStream& rng);

// Selects the prior precision maximizing the mean validation log-likelihood
// of the probit-adjusted linearized predictive; ties go to the larger lambda.
// pixel_subset limits how many pixels per image contribute (0 = all). The
// Jacobian rows are computed once and reused across the whole grid. Updates
// post.prior_precision and returns the winner.
double tune_prior(HeadPosterior& post, const SsnHead& head, const Network& encoder,
                  const Dataset& val, const std::vector<double>& grid,
                  std::size_t pixel_subset, RngStream& rng);

void posterior_save(const HeadPosterior& post, const std::string& path);
HeadPosterior posterior_load(const std::string& path);

}  // namespace lfusion
