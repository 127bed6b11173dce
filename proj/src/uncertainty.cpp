#include "lfusion/uncertainty.hpp"

#include "lfusion/metrics.hpp"

#include <algorithm>
#include <cmath>
#include <cstdio>
#include <cstring>
#include <limits>

namespace lfusion {

namespace {

constexpr double kProbFloor = 1e-7;

double clamp_prob(double p) {
    return std::min(std::max(p, kProbFloor), 1.0 - kProbFloor);
}

// -p log p with the probability clamped away from {0, 1}.
double entropy_term(double p) {
    p = clamp_prob(p);
    return -p * std::log(p);
}

// Flattened view over a stack: s = m * n_inner samples, each a (C, spatial)
// block laid out contiguously.
struct StackView {
    std::size_t s = 0;
    std::size_t classes = 0;
    std::size_t npix = 0;
    std::vector<std::size_t> spatial;
    const float* probs = nullptr;
    const float* logits = nullptr;
};

StackView view_of(const PredictiveStack& stack) {
    if (stack.m < 1 || stack.n_inner < 1 || stack.probs.numel() == 0)
        throw DataError("empty predictive stack");
    if (stack.probs.ndim() < 4)
        throw DataError("predictive stack tensors must be (m, n_inner, C, spatial...)");
    StackView v;
    v.s = stack.probs.extent(0) * stack.probs.extent(1);
    v.classes = stack.probs.extent(2);
    v.npix = 1;
    for (std::size_t d = 3; d < stack.probs.ndim(); ++d) {
        v.spatial.push_back(stack.probs.extent(d));
        v.npix *= stack.probs.extent(d);
    }
    v.probs = stack.probs.data();
    v.logits = stack.logits.data();
    return v;
}

double prob_at(const StackView& v, std::size_t j, std::size_t c, std::size_t px) {
    return v.probs[(j * v.classes + c) * v.npix + px];
}

Tensor measure_map(const PredictiveStack& stack, Measure m) {
    switch (m) {
        case Measure::EE: return expected_entropy(stack);
        case Measure::MI: return mutual_information(stack);
        case Measure::EPKL: return epkl(stack);
        case Measure::PV: return pixel_variance(stack);
        default: throw ConfigError("unknown auxiliary measure for fusion");
    }
}

// Both stacks reshaped to one flat draw axis and concatenated.
PredictiveStack pooled_stack(const PredictiveStack& a, const PredictiveStack& b,
                             const StackView& va, const StackView& vb) {
    PredictiveStack out;
    std::vector<std::size_t> shape{va.s + vb.s, 1, va.classes};
    for (std::size_t e : va.spatial) shape.push_back(e);
    out.logits = Tensor(shape, 0.0f);
    out.probs = Tensor(shape, 0.0f);
    std::size_t block_a = a.probs.numel(), block_b = b.probs.numel();
    std::memcpy(out.logits.data(), a.logits.data(), block_a * sizeof(float));
    std::memcpy(out.logits.data() + block_a, b.logits.data(), block_b * sizeof(float));
    std::memcpy(out.probs.data(), a.probs.data(), block_a * sizeof(float));
    std::memcpy(out.probs.data() + block_a, b.probs.data(), block_b * sizeof(float));
    out.m = static_cast<int>(va.s + vb.s);
    out.n_inner = 1;
    return out;
}

double population_variance(const float* vals, std::size_t n) {
    double mean = 0.0;
    for (std::size_t i = 0; i < n; ++i) mean += vals[i];
    mean /= static_cast<double>(n);
    double var = 0.0;
    for (std::size_t i = 0; i < n; ++i) {
        double d = vals[i] - mean;
        var += d * d;
    }
    return var / static_cast<double>(n);
}

}  // namespace

std::string measure_name(Measure m) {
    switch (m) {
        case Measure::EE: return "EE";
        case Measure::MI: return "MI";
        case Measure::EPKL: return "EPKL";
        case Measure::PV: return "PV";
        case Measure::TotalH: return "TOTAL_H";
        case Measure::Fused: return "FUSED";
    }
    throw ConfigError("unknown measure id");
}

std::string path_name(PathId p) {
    switch (p) {
        case PathId::L: return "L";
        case PathId::D: return "D";
        case PathId::Inter: return "inter";
    }
    throw ConfigError("unknown path id");
}

Measure parse_measure(const std::string& name) {
    for (Measure m : {Measure::EE, Measure::MI, Measure::EPKL, Measure::PV,
                      Measure::TotalH, Measure::Fused})
        if (measure_name(m) == name) return m;
    throw ConfigError("unknown measure id: " + name);
}

PathId parse_path(const std::string& name) {
    for (PathId p : {PathId::L, PathId::D, PathId::Inter})
        if (path_name(p) == name) return p;
    throw ConfigError("unknown path id: " + name);
}

Reduction parse_reduction(const std::string& name) {
    if (name == "mean") return Reduction::Mean;
    if (name == "topk_mean") return Reduction::TopkMean;
    throw ConfigError("unknown reduction: " + name);
}

Tensor expected_entropy(const PredictiveStack& stack) {
    StackView v = view_of(stack);
    std::vector<double> acc(v.npix, 0.0);
    for (std::size_t j = 0; j < v.s; ++j)
        for (std::size_t px = 0; px < v.npix; ++px) {
            double h = 0.0;
            if (v.classes == 1) {
                double p = prob_at(v, j, 0, px);
                h = entropy_term(p) + entropy_term(1.0 - p);
            } else {
                for (std::size_t c = 0; c < v.classes; ++c)
                    h += entropy_term(prob_at(v, j, c, px));
            }
            acc[px] += h;
        }
    Tensor out(v.spatial, 0.0f);
    for (std::size_t px = 0; px < v.npix; ++px)
        out[px] = static_cast<float>(acc[px] / static_cast<double>(v.s));
    return out;
}

Tensor total_entropy(const PredictiveStack& stack) {
    StackView v = view_of(stack);
    std::size_t nc = v.classes == 1 ? 1 : v.classes;
    std::vector<double> mean(nc * v.npix, 0.0);
    for (std::size_t j = 0; j < v.s; ++j)
        for (std::size_t c = 0; c < nc; ++c)
            for (std::size_t px = 0; px < v.npix; ++px)
                mean[c * v.npix + px] += clamp_prob(prob_at(v, j, c, px));
    Tensor out(v.spatial, 0.0f);
    for (std::size_t px = 0; px < v.npix; ++px) {
        double h = 0.0;
        if (v.classes == 1) {
            double pm = mean[px] / static_cast<double>(v.s);
            h = entropy_term(pm) + entropy_term(1.0 - pm);
        } else {
            for (std::size_t c = 0; c < nc; ++c)
                h += entropy_term(mean[c * v.npix + px] / static_cast<double>(v.s));
        }
        out[px] = static_cast<float>(h);
    }
    return out;
}

Tensor mutual_information(const PredictiveStack& stack) {
    StackView v = view_of(stack);
    if (stack.m < 2) {
        std::fprintf(stderr,
                     "[lfusion] warning: mutual information needs at least two outer "
                     "samples (m=%d); returning a zero map\n",
                     stack.m);
        return Tensor(v.spatial, 0.0f);
    }
    Tensor tot = total_entropy(stack);
    Tensor ee = expected_entropy(stack);
    Tensor out(v.spatial, 0.0f);
    for (std::size_t px = 0; px < v.npix; ++px)
        out[px] = std::max(tot[px] - ee[px], 0.0f);
    return out;
}

Tensor epkl(const PredictiveStack& stack) {
    StackView v = view_of(stack);
    if (v.s < 2) throw DataError("expected pairwise KL needs at least two samples");
    // For each class, sum_{i != j} p_i (log p_i - log p_j) collapses to
    // s * sum_i p_i log p_i - (sum_i p_i)(sum_i log p_i): one pass per class
    // instead of the quadratic double loop.
    std::size_t nc = v.classes == 1 ? 2 : v.classes;
    std::vector<double> acc(v.npix, 0.0), A(v.npix), sp(v.npix), sl(v.npix);
    for (std::size_t c = 0; c < nc; ++c) {
        std::fill(A.begin(), A.end(), 0.0);
        std::fill(sp.begin(), sp.end(), 0.0);
        std::fill(sl.begin(), sl.end(), 0.0);
        for (std::size_t j = 0; j < v.s; ++j)
            for (std::size_t px = 0; px < v.npix; ++px) {
                double p = v.classes == 1
                               ? (c == 0 ? prob_at(v, j, 0, px) : 1.0 - prob_at(v, j, 0, px))
                               : prob_at(v, j, c, px);
                p = clamp_prob(p);
                double lp = std::log(p);
                A[px] += p * lp;
                sp[px] += p;
                sl[px] += lp;
            }
        for (std::size_t px = 0; px < v.npix; ++px)
            acc[px] += static_cast<double>(v.s) * A[px] - sp[px] * sl[px];
    }
    double pairs = static_cast<double>(v.s) * static_cast<double>(v.s - 1);
    Tensor out(v.spatial, 0.0f);
    for (std::size_t px = 0; px < v.npix; ++px)
        out[px] = static_cast<float>(std::max(acc[px] / pairs, 0.0));
    return out;
}

Tensor pixel_variance(const PredictiveStack& stack) {
    StackView v = view_of(stack);
    if (v.s < 2) throw DataError("pixel variance needs at least two samples");
    std::vector<double> acc(v.npix, 0.0), mean(v.npix);
    for (std::size_t c = 0; c < v.classes; ++c) {
        std::fill(mean.begin(), mean.end(), 0.0);
        for (std::size_t j = 0; j < v.s; ++j)
            for (std::size_t px = 0; px < v.npix; ++px)
                mean[px] += prob_at(v, j, c, px);
        for (std::size_t px = 0; px < v.npix; ++px)
            mean[px] /= static_cast<double>(v.s);
        for (std::size_t j = 0; j < v.s; ++j)
            for (std::size_t px = 0; px < v.npix; ++px) {
                double d = prob_at(v, j, c, px) - mean[px];
                acc[px] += d * d;
            }
    }
    double denom = static_cast<double>(v.s) * static_cast<double>(v.classes);
    Tensor out(v.spatial, 0.0f);
    for (std::size_t px = 0; px < v.npix; ++px)
        out[px] = static_cast<float>(acc[px] / denom);
    return out;
}

UncertaintyMaps uncertainty_maps(const PredictiveStack& stack, PathId path) {
    UncertaintyMaps um;
    um.path = path;
    um.m = stack.m;
    um.n_inner = stack.n_inner;
    um.maps[Measure::EE] = expected_entropy(stack);
    um.maps[Measure::TotalH] = total_entropy(stack);
    um.maps[Measure::MI] = mutual_information(stack);
    um.maps[Measure::EPKL] = epkl(stack);
    um.maps[Measure::PV] = pixel_variance(stack);
    return um;
}

FuseResult fuse(const PredictiveStack& stack_l, const PredictiveStack& stack_d,
                Measure aux_measure, PathId aux_source) {
    StackView vl = view_of(stack_l);
    StackView vd = view_of(stack_d);
    if (vl.s != vd.s || vl.classes != vd.classes || vl.spatial != vd.spatial)
        throw DataError("fusion stacks are not sample-aligned");
    if (aux_measure != Measure::EE && aux_measure != Measure::MI &&
        aux_measure != Measure::EPKL && aux_measure != Measure::PV)
        throw ConfigError("unknown auxiliary measure for fusion");

    FuseResult res;

    // term1: sqrt of the per-pixel population variance of the paired logit gap
    std::vector<double> mean(vl.npix), var(vl.npix, 0.0);
    for (std::size_t c = 0; c < vl.classes; ++c) {
        std::fill(mean.begin(), mean.end(), 0.0);
        for (std::size_t j = 0; j < vl.s; ++j)
            for (std::size_t px = 0; px < vl.npix; ++px) {
                std::size_t at = (j * vl.classes + c) * vl.npix + px;
                mean[px] += static_cast<double>(vl.logits[at]) - vd.logits[at];
            }
        for (std::size_t px = 0; px < vl.npix; ++px)
            mean[px] /= static_cast<double>(vl.s);
        for (std::size_t j = 0; j < vl.s; ++j)
            for (std::size_t px = 0; px < vl.npix; ++px) {
                std::size_t at = (j * vl.classes + c) * vl.npix + px;
                double d = static_cast<double>(vl.logits[at]) - vd.logits[at] - mean[px];
                var[px] += d * d;
            }
    }
    res.term1 = Tensor(vl.spatial, 0.0f);
    double denom = static_cast<double>(vl.s) * static_cast<double>(vl.classes);
    for (std::size_t px = 0; px < vl.npix; ++px)
        res.term1[px] = static_cast<float>(std::sqrt(var[px] / denom));

    // term2: entropy of the pooled mean probability over both stacks
    std::size_t nc = vl.classes == 1 ? 1 : vl.classes;
    std::vector<double> pooled(nc * vl.npix, 0.0);
    for (const StackView* v : {&vl, &vd})
        for (std::size_t j = 0; j < v->s; ++j)
            for (std::size_t c = 0; c < nc; ++c)
                for (std::size_t px = 0; px < vl.npix; ++px)
                    pooled[c * vl.npix + px] += clamp_prob(prob_at(*v, j, c, px));
    res.term2 = Tensor(vl.spatial, 0.0f);
    double total = 2.0 * static_cast<double>(vl.s);
    for (std::size_t px = 0; px < vl.npix; ++px) {
        double h = 0.0;
        if (vl.classes == 1) {
            double pm = pooled[px] / total;
            h = entropy_term(pm) + entropy_term(1.0 - pm);
        } else {
            for (std::size_t c = 0; c < nc; ++c)
                h += entropy_term(pooled[c * vl.npix + px] / total);
        }
        res.term2[px] = static_cast<float>(h);
    }

    switch (aux_source) {
        case PathId::L: res.aux_map = measure_map(stack_l, aux_measure); break;
        case PathId::D: res.aux_map = measure_map(stack_d, aux_measure); break;
        case PathId::Inter:
            res.aux_map = measure_map(pooled_stack(stack_l, stack_d, vl, vd), aux_measure);
            break;
    }
    res.weight = population_variance(res.aux_map.data(), res.aux_map.numel());

    res.fused = Tensor(vl.spatial, 0.0f);
    for (std::size_t px = 0; px < vl.npix; ++px)
        res.fused[px] =
            static_cast<float>(static_cast<double>(res.term1[px]) * res.term2[px] * res.weight);
    return res;
}

double image_score(const Tensor& map, Reduction reduction, double q) {
    if (map.numel() == 0) throw DataError("image_score: empty map");
    std::size_t n = map.numel();
    if (reduction == Reduction::Mean) {
        double acc = 0.0;
        for (std::size_t i = 0; i < n; ++i) acc += map[i];
        return acc / static_cast<double>(n);
    }
    if (!(q > 0.0 && q <= 1.0))
        throw ConfigError("image_score: top fraction must be in (0, 1]");
    std::size_t count =
        std::max<std::size_t>(1, static_cast<std::size_t>(q * static_cast<double>(n)));
    count = std::min(count, n);
    std::vector<float> vals(map.data(), map.data() + n);
    std::nth_element(vals.begin(), vals.begin() + (count - 1), vals.end(),
                     std::greater<float>());
    double acc = 0.0;
    for (std::size_t i = 0; i < count; ++i) acc += vals[i];
    return acc / static_cast<double>(count);
}

bool operator<(const MeasureKey& a, const MeasureKey& b) {
    if (a.measure != b.measure) return static_cast<int>(a.measure) < static_cast<int>(b.measure);
    return static_cast<int>(a.path) < static_cast<int>(b.path);
}

bool operator==(const MeasureKey& a, const MeasureKey& b) {
    return a.measure == b.measure && a.path == b.path;
}

Calibration calibrate(const std::vector<CalItem>& items, Reduction reduction, double q) {
    if (items.empty()) throw DataError("calibrate: empty validation set");
    std::size_t n_ood = 0;
    for (const CalItem& it : items) n_ood += it.is_ood ? 1 : 0;
    std::size_t n_id = items.size() - n_ood;
    if (n_id == 0 || n_ood == 0)
        throw DataError("calibrate: validation set needs both ID and OOD items");

    Calibration cal;
    double best_auc = -1.0;
    for (const auto& [key, first_map] : items[0].maps) {
        (void)first_map;
        std::vector<double> scores;
        std::vector<int> labels;
        scores.reserve(items.size());
        labels.reserve(items.size());
        for (const CalItem& it : items) {
            auto found = it.maps.find(key);
            if (found == it.maps.end())
                throw DataError("calibrate: items carry different measure sets");
            scores.push_back(image_score(found->second, reduction, q));
            labels.push_back(it.is_ood ? 1 : 0);
        }
        AucRow row{key, auroc(scores, labels), n_id, n_ood};
        cal.table.push_back(row);
        if (row.auc > best_auc) {
            best_auc = row.auc;
            cal.best = key;
        }
    }
    for (const CalItem& it : items)
        if (it.maps.size() != items[0].maps.size())
            throw DataError("calibrate: items carry different measure sets");
    return cal;
}

std::vector<Tensor> counterfactuals(const PredictiveStack& stack_d,
                                    const Tensor& reference_mask,
                                    double min_diff_fraction) {
    StackView v = view_of(stack_d);
    if (reference_mask.numel() != v.npix)
        throw DataError("counterfactuals: reference mask does not match the stack extent");

    struct Entry {
        double frac;
        Tensor mask;
    };
    std::vector<Entry> kept;
    for (std::size_t j = 0; j < v.s; ++j) {
        Tensor mask(v.spatial, 0.0f);
        if (v.classes == 1) {
            for (std::size_t px = 0; px < v.npix; ++px)
                mask[px] = prob_at(v, j, 0, px) > 0.5 ? 1.0f : 0.0f;
        } else {
            for (std::size_t px = 0; px < v.npix; ++px) {
                std::size_t arg = 0;
                double best = prob_at(v, j, 0, px);
                for (std::size_t c = 1; c < v.classes; ++c)
                    if (prob_at(v, j, c, px) > best) {
                        best = prob_at(v, j, c, px);
                        arg = c;
                    }
                mask[px] = static_cast<float>(arg);
            }
        }
        std::size_t diff = 0;
        for (std::size_t px = 0; px < v.npix; ++px) {
            float ref = v.classes == 1 ? (reference_mask[px] > 0.5f ? 1.0f : 0.0f)
                                       : reference_mask[px];
            if (mask[px] != ref) ++diff;
        }
        double frac = static_cast<double>(diff) / static_cast<double>(v.npix);
        if (frac >= min_diff_fraction) kept.push_back({frac, std::move(mask)});
    }
    std::stable_sort(kept.begin(), kept.end(),
                     [](const Entry& a, const Entry& b) { return a.frac > b.frac; });
    std::vector<Tensor> out;
    out.reserve(kept.size());
    for (Entry& e : kept) out.push_back(std::move(e.mask));
    return out;
}

void write_pgm(const Tensor& map, const std::string& path) {
    if (map.ndim() != 2) throw DataError("write_pgm: map must be 2-D");
    ensure_finite(map, "uncertainty map");
    float mn = std::numeric_limits<float>::max(), mx = std::numeric_limits<float>::lowest();
    for (std::size_t i = 0; i < map.numel(); ++i) {
        mn = std::min(mn, map[i]);
        mx = std::max(mx, map[i]);
    }
    std::FILE* fp = std::fopen(path.c_str(), "wb");
    if (!fp) throw DataError("cannot open " + path + " for writing");
    std::fprintf(fp, "P5\n%zu %zu\n255\n", map.extent(1), map.extent(0));
    for (std::size_t i = 0; i < map.numel(); ++i) {
        int byte = 0;
        if (mx > mn)
            byte = static_cast<int>(std::lround(255.0 * (map[i] - mn) / (mx - mn)));
        std::fputc(std::min(std::max(byte, 0), 255), fp);
    }
    std::fclose(fp);
}

void write_auc_csv(const Calibration& cal, const std::string& path) {
    std::FILE* fp = std::fopen(path.c_str(), "wb");
    if (!fp) throw DataError("cannot open " + path + " for writing");
    std::fprintf(fp, "measure,path,auc,n_id,n_ood\n");
    for (const AucRow& r : cal.table)
        std::fprintf(fp, "%s,%s,%.10g,%zu,%zu\n", measure_name(r.key.measure).c_str(),
                     path_name(r.key.path).c_str(), r.auc, r.n_id, r.n_ood);
    std::fclose(fp);
}

}  // namespace lfusion
