#pragma once

#include <map>
#include <string>
#include <vector>

#include "lfusion/laplace.hpp"

namespace lfusion {

// Pixel-wise uncertainty measures over predictive stacks, the inter-path
// fusion score, measure calibration against ID/OOD labels, and counterfactual
// mask extraction. All entropies are in nats; probabilities are clamped to
// [1e-7, 1 - 1e-7] before any logarithm.

enum class Measure { EE, MI, EPKL, PV, TotalH, Fused };
enum class PathId { L, D, Inter };
enum class Reduction { Mean, TopkMean };

std::string measure_name(Measure m);
std::string path_name(PathId p);
Measure parse_measure(const std::string& name);
PathId parse_path(const std::string& name);
Reduction parse_reduction(const std::string& name);

struct UncertaintyMaps {
    std::map<Measure, Tensor> maps;
    PathId path = PathId::L;
    int m = 0;
    int n_inner = 0;
};

// Mean over samples of each sample's prediction entropy (aleatoric part).
Tensor expected_entropy(const PredictiveStack& stack);
// Entropy of the mean probability over all samples.
Tensor total_entropy(const PredictiveStack& stack);
// total - expected, clamped at zero. A stack with m < 2 carries no parameter
// disagreement, so the map is identically zero (with a warning).
Tensor mutual_information(const PredictiveStack& stack);
// Expected pairwise KL divergence over ordered sample pairs.
Tensor epkl(const PredictiveStack& stack);
// Population variance of the probability across samples (mean over classes).
Tensor pixel_variance(const PredictiveStack& stack);

// Convenience bundle of the five per-path maps plus provenance metadata.
UncertaintyMaps uncertainty_maps(const PredictiveStack& stack, PathId path);

struct FuseResult {
    Tensor fused;
    Tensor term1;    // sqrt of per-pixel variance of the paired logit gap
    Tensor term2;    // entropy of the pooled two-path mean probability
    Tensor aux_map;  // the selected auxiliary measure map
    double weight = 0.0;  // over-pixels variance of aux_map
};

// Inter-path fusion: FUSED = term1 * term2 * weight per pixel. Sample j of
// the first stack is paired with sample j of the second, so both stacks must
// flatten to the same sample count and share spatial extents. The auxiliary
// measure must be one of EE, MI, EPKL, PV and may be computed from either
// path or from the pooled samples of both (PathId::Inter).
FuseResult fuse(const PredictiveStack& stack_l, const PredictiveStack& stack_d,
                Measure aux_measure, PathId aux_source);

// Scalar per-image score: mean of the whole map, or mean of the top
// q-fraction of pixels (at least one pixel).
double image_score(const Tensor& map, Reduction reduction, double q = 0.05);

struct MeasureKey {
    Measure measure = Measure::EE;
    PathId path = PathId::L;
};
bool operator<(const MeasureKey& a, const MeasureKey& b);
bool operator==(const MeasureKey& a, const MeasureKey& b);

struct CalItem {
    std::map<MeasureKey, Tensor> maps;
    bool is_ood = false;
};

struct AucRow {
    MeasureKey key;
    double auc = 0.0;
    std::size_t n_id = 0;
    std::size_t n_ood = 0;
};

struct Calibration {
    MeasureKey best;
    std::vector<AucRow> table;
};

// AUROC of each candidate measure's image scores against the ID/OOD labels
// (OOD is the positive class). The best key is the argmax; ties go to the
// earliest key in canonical order (EE < MI < EPKL < PV, then L < D < inter).
Calibration calibrate(const std::vector<CalItem>& items,
                      Reduction reduction = Reduction::Mean, double q = 0.05);

// Thresholded sample masks from the dropout stack whose pixel disagreement
// with the reference is at least min_diff_fraction, ordered by disagreement
// descending (stable for ties). May be empty.
std::vector<Tensor> counterfactuals(const PredictiveStack& stack_d,
                                    const Tensor& reference_mask,
                                    double min_diff_fraction);

// 8-bit binary PGM of a 2-D map, min-max normalized (constant maps render
// black).
void write_pgm(const Tensor& map, const std::string& path);
void write_auc_csv(const Calibration& cal, const std::string& path);

}  // namespace lfusion
