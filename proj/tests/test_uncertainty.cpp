#define DOCTEST_CONFIG_IMPLEMENT_WITH_MAIN
#include <doctest.h>

#include <cmath>
#include <cstdio>
#include <string>
#include <vector>

#include "lfusion/uncertainty.hpp"

using namespace lfusion;

namespace {

constexpr double kLn2 = 0.6931471805599453;

double sigmoid_ref(double x) { return 1.0 / (1.0 + std::exp(-x)); }

double clamp_ref(double p) { return std::min(std::max(p, 1e-7), 1.0 - 1e-7); }

double entropy_ref(double p) {
    p = clamp_ref(p);
    double q = clamp_ref(1.0 - p);
    return -(p * std::log(p) + q * std::log(q));
}

// Stack from explicit probabilities, shape (m, n, C, H, W); logits via logit.
PredictiveStack stack_from_probs(std::vector<float> probs, int m, int n,
                                 std::size_t c, std::size_t h, std::size_t w) {
    PredictiveStack st;
    st.probs = Tensor::from_data({static_cast<std::size_t>(m),
                                  static_cast<std::size_t>(n), c, h, w},
                                 probs);
    st.logits = Tensor(st.probs.shape(), 0.0f);
    for (std::size_t i = 0; i < st.probs.numel(); ++i) {
        double p = clamp_ref(st.probs[i]);
        st.logits[i] = static_cast<float>(std::log(p / (1.0 - p)));
    }
    st.m = m;
    st.n_inner = n;
    return st;
}

// Stack from explicit logits; probs via sigmoid.
PredictiveStack stack_from_logits(std::vector<float> logits, int m, int n,
                                  std::size_t h, std::size_t w) {
    PredictiveStack st;
    st.logits = Tensor::from_data({static_cast<std::size_t>(m),
                                   static_cast<std::size_t>(n), 1, h, w},
                                  logits);
    st.probs = Tensor(st.logits.shape(), 0.0f);
    for (std::size_t i = 0; i < st.logits.numel(); ++i)
        st.probs[i] = static_cast<float>(sigmoid_ref(st.logits[i]));
    st.m = m;
    st.n_inner = n;
    return st;
}

PredictiveStack random_binary_stack(RngStream& rng, int m, int n, std::size_t h,
                                    std::size_t w) {
    std::vector<float> probs(static_cast<std::size_t>(m) * n * h * w);
    for (float& p : probs) p = static_cast<float>(rng_uniform(rng));
    return stack_from_probs(probs, m, n, 1, h, w);
}

PredictiveStack random_multiclass_stack(RngStream& rng, int m, int n, std::size_t c,
                                        std::size_t h, std::size_t w) {
    std::size_t s = static_cast<std::size_t>(m) * n;
    std::size_t npix = h * w;
    std::vector<float> probs(s * c * npix);
    for (std::size_t j = 0; j < s; ++j)
        for (std::size_t px = 0; px < npix; ++px) {
            std::vector<double> z(c);
            double mx = -1e30;
            for (std::size_t cc = 0; cc < c; ++cc) {
                z[cc] = 2.0 * rng_normal(rng);
                mx = std::max(mx, z[cc]);
            }
            double denom = 0.0;
            for (std::size_t cc = 0; cc < c; ++cc) denom += std::exp(z[cc] - mx);
            for (std::size_t cc = 0; cc < c; ++cc)
                probs[(j * c + cc) * npix + px] =
                    static_cast<float>(std::exp(z[cc] - mx) / denom);
        }
    return stack_from_probs(probs, m, n, c, h, w);
}

// Same samples, reversed draw order.
PredictiveStack reversed_samples(const PredictiveStack& st) {
    std::size_t s = st.probs.extent(0) * st.probs.extent(1);
    std::size_t block = st.probs.numel() / s;
    PredictiveStack out;
    std::vector<std::size_t> shape{s, 1};
    for (std::size_t d = 2; d < st.probs.ndim(); ++d) shape.push_back(st.probs.extent(d));
    out.probs = Tensor(shape, 0.0f);
    out.logits = Tensor(shape, 0.0f);
    for (std::size_t j = 0; j < s; ++j)
        for (std::size_t i = 0; i < block; ++i) {
            out.probs[j * block + i] = st.probs[(s - 1 - j) * block + i];
            out.logits[j * block + i] = st.logits[(s - 1 - j) * block + i];
        }
    out.m = static_cast<int>(s);
    out.n_inner = 1;
    return out;
}

double brute_epkl_binary(const std::vector<double>& ps) {
    std::size_t s = ps.size();
    double acc = 0.0;
    for (std::size_t i = 0; i < s; ++i)
        for (std::size_t j = 0; j < s; ++j) {
            if (i == j) continue;
            double pi = clamp_ref(ps[i]), pj = clamp_ref(ps[j]);
            acc += pi * std::log(pi / pj) + (1.0 - pi) * std::log((1.0 - pi) / (1.0 - pj));
        }
    return acc / (static_cast<double>(s) * (s - 1));
}

}  // namespace

TEST_CASE("expected entropy closed forms") {
    PredictiveStack half = stack_from_probs({0.5f, 0.5f, 0.5f, 0.5f}, 2, 2, 1, 1, 1);
    Tensor ee = expected_entropy(half);
    CHECK(ee[0] == doctest::Approx(kLn2).epsilon(1e-6));

    PredictiveStack hard = stack_from_probs({0.0f, 1.0f, 1.0f, 0.0f}, 2, 2, 1, 1, 1);
    Tensor ee_hard = expected_entropy(hard);
    CHECK(ee_hard[0] >= 0.0f);
    CHECK(ee_hard[0] < 1e-5f);

    PredictiveStack pair = stack_from_probs({0.3f, 0.7f}, 2, 1, 1, 1, 1);
    Tensor ee_pair = expected_entropy(pair);
    CHECK(ee_pair[0] == doctest::Approx(0.6108643020548935).epsilon(1e-6));

    PredictiveStack uniform3 =
        stack_from_probs({1.0f / 3, 1.0f / 3, 1.0f / 3}, 1, 1, 3, 1, 1);
    Tensor ee3 = expected_entropy(uniform3);
    CHECK(ee3[0] == doctest::Approx(std::log(3.0)).epsilon(1e-6));

    CHECK_THROWS_AS(expected_entropy(PredictiveStack{}), DataError);
}

TEST_CASE("entropy decomposition and mutual information") {
    // identical samples: no disagreement at all
    PredictiveStack same = stack_from_probs({0.25f, 0.25f, 0.25f, 0.25f}, 2, 2, 1, 1, 1);
    Tensor mi_same = mutual_information(same);
    CHECK(mi_same[0] == 0.0f);

    // maximal disagreement
    PredictiveStack split = stack_from_probs({0.0f, 1.0f}, 2, 1, 1, 1, 1);
    CHECK(total_entropy(split)[0] == doctest::Approx(kLn2).epsilon(1e-6));
    CHECK(expected_entropy(split)[0] < 1e-5f);
    CHECK(mutual_information(split)[0] == doctest::Approx(kLn2).epsilon(1e-4));

    // random stacks: TOTAL_H = MI + EE per pixel, everything nonnegative
    RngStream rng(301, 0);
    PredictiveStack st = random_binary_stack(rng, 3, 2, 4, 4);
    Tensor tot = total_entropy(st), ee = expected_entropy(st), mi = mutual_information(st);
    for (std::size_t px = 0; px < 16; ++px) {
        CHECK(std::fabs(tot[px] - (mi[px] + ee[px])) <= 1e-5);
        CHECK(mi[px] >= 0.0f);
        CHECK(mi[px] <= tot[px] + 1e-6f);
        CHECK(tot[px] <= static_cast<float>(kLn2) + 1e-6f);
    }

    PredictiveStack mc = random_multiclass_stack(rng, 2, 2, 3, 3, 3);
    Tensor tot3 = total_entropy(mc), ee3 = expected_entropy(mc), mi3 = mutual_information(mc);
    for (std::size_t px = 0; px < 9; ++px) {
        CHECK(std::fabs(tot3[px] - (mi3[px] + ee3[px])) <= 1e-5);
        CHECK(tot3[px] <= static_cast<float>(std::log(3.0)) + 1e-5f);
    }

    // a single posterior draw carries no epistemic signal
    PredictiveStack single = stack_from_probs({0.2f, 0.9f}, 1, 2, 1, 1, 1);
    Tensor mi1 = mutual_information(single);
    CHECK(mi1[0] == 0.0f);
}

TEST_CASE("expected pairwise KL") {
    PredictiveStack same = stack_from_probs({0.25f, 0.25f, 0.25f}, 3, 1, 1, 1, 1);
    CHECK(std::fabs(epkl(same)[0]) < 1e-9);

    PredictiveStack even = stack_from_probs({0.5f, 0.5f}, 2, 1, 1, 1, 1);
    CHECK(std::fabs(epkl(even)[0]) < 1e-12);

    PredictiveStack pair = stack_from_probs({0.2f, 0.8f}, 2, 1, 1, 1, 1);
    CHECK(epkl(pair)[0] == doctest::Approx(0.8317766166719343).epsilon(1e-6));

    // one-pass rearrangement against the brute-force double loop at s = 5
    RngStream rng(302, 0);
    std::vector<float> probs(5 * 4);
    for (float& p : probs) p = static_cast<float>(rng_uniform(rng));
    PredictiveStack st = stack_from_probs(probs, 5, 1, 1, 2, 2);
    Tensor got = epkl(st);
    for (std::size_t px = 0; px < 4; ++px) {
        std::vector<double> ps;
        for (std::size_t j = 0; j < 5; ++j) ps.push_back(probs[j * 4 + px]);
        double want = brute_epkl_binary(ps);
        CHECK(std::fabs(got[px] - want) <= 1e-6 * std::max(want, 1.0));
        CHECK(got[px] >= 0.0f);
    }

    // multiclass against the generic double loop
    PredictiveStack mc = random_multiclass_stack(rng, 4, 1, 3, 1, 2);
    Tensor got3 = epkl(mc);
    for (std::size_t px = 0; px < 2; ++px) {
        double want = 0.0;
        for (std::size_t i = 0; i < 4; ++i)
            for (std::size_t j = 0; j < 4; ++j) {
                if (i == j) continue;
                for (std::size_t c = 0; c < 3; ++c) {
                    double pi = clamp_ref(mc.probs[(i * 3 + c) * 2 + px]);
                    double pj = clamp_ref(mc.probs[(j * 3 + c) * 2 + px]);
                    want += pi * std::log(pi / pj);
                }
            }
        want /= 4.0 * 3.0;
        CHECK(std::fabs(got3[px] - want) <= 1e-6 * std::max(want, 1.0));
    }

    PredictiveStack one = stack_from_probs({0.4f}, 1, 1, 1, 1, 1);
    CHECK_THROWS_AS(epkl(one), DataError);
}

TEST_CASE("pixel variance") {
    PredictiveStack same = stack_from_probs({0.375f, 0.375f, 0.375f, 0.375f}, 4, 1, 1, 1, 1);
    CHECK(pixel_variance(same)[0] == 0.0f);

    PredictiveStack alt = stack_from_probs({0.0f, 1.0f, 0.0f, 1.0f}, 4, 1, 1, 1, 1);
    CHECK(pixel_variance(alt)[0] == 0.25f);

    RngStream rng(303, 0);
    PredictiveStack st = random_binary_stack(rng, 3, 3, 2, 3);
    Tensor got = pixel_variance(st);
    for (std::size_t px = 0; px < 6; ++px) {
        double mean = 0.0;
        for (std::size_t j = 0; j < 9; ++j) mean += st.probs[j * 6 + px];
        mean /= 9.0;
        double var = 0.0;
        for (std::size_t j = 0; j < 9; ++j) {
            double d = st.probs[j * 6 + px] - mean;
            var += d * d;
        }
        var /= 9.0;
        CHECK(std::fabs(got[px] - var) <= 1e-7);
        CHECK(got[px] >= 0.0f);
        CHECK(got[px] <= 0.25f + 1e-7f);
    }

    PredictiveStack one = stack_from_probs({0.4f}, 1, 1, 1, 1, 1);
    CHECK_THROWS_AS(pixel_variance(one), DataError);
}

TEST_CASE("sample permutation invariance of the per-path measures") {
    RngStream rng(304, 0);
    PredictiveStack st = random_binary_stack(rng, 4, 2, 3, 3);
    PredictiveStack rev = reversed_samples(st);
    Tensor a[4] = {expected_entropy(st), mutual_information(st), epkl(st),
                   pixel_variance(st)};
    Tensor b[4] = {expected_entropy(rev), mutual_information(rev), epkl(rev),
                   pixel_variance(rev)};
    for (int k = 0; k < 4; ++k)
        for (std::size_t px = 0; px < 9; ++px)
            CHECK(std::fabs(a[k][px] - b[k][px]) <= 1e-6);
}

TEST_CASE("fusion hand case with a constant auxiliary map") {
    PredictiveStack sl = stack_from_logits({0.0f, 0.0f, 2.0f, 2.0f}, 2, 1, 1, 2);
    PredictiveStack sd = stack_from_logits({1.0f, 1.0f, 1.0f, 1.0f}, 2, 1, 1, 2);
    FuseResult res = fuse(sl, sd, Measure::PV, PathId::L);
    // logit gaps per pixel are {-1, +1}: zero mean, unit variance
    CHECK(res.term1[0] == 1.0f);
    CHECK(res.term1[1] == 1.0f);
    // pooled mean of sigmoid{0, 2, 1, 1} = 0.7107285588
    CHECK(res.term2[0] == doctest::Approx(0.6014980530475545).epsilon(1e-6));
    CHECK(res.term2[1] == doctest::Approx(0.6014980530475545).epsilon(1e-6));
    // both pixels see the same sample probabilities: constant PV map
    CHECK(res.aux_map[0] == res.aux_map[1]);
    CHECK(res.aux_map[0] == doctest::Approx(0.036251603649123346).epsilon(1e-5));
    CHECK(res.weight == 0.0);
    CHECK(res.fused[0] == 0.0f);
    CHECK(res.fused[1] == 0.0f);
}

TEST_CASE("fusion hand case with a nonzero weight") {
    PredictiveStack sl = stack_from_logits({0.0f, 1.0f, 3.0f, 2.0f}, 2, 1, 1, 2);
    PredictiveStack sd = stack_from_logits({1.0f, 0.0f, 1.0f, 0.0f}, 2, 1, 1, 2);
    FuseResult res = fuse(sl, sd, Measure::PV, PathId::L);
    // pixel 0 gaps {-1, 2} -> sd 1.5 ; pixel 1 gaps {1, 2} -> sd 0.5
    CHECK(res.term1[0] == 1.5f);
    CHECK(res.term1[1] == 0.5f);
    CHECK(res.term2[0] == doctest::Approx(0.5845744186019345).epsilon(1e-6));
    CHECK(res.term2[1] == doctest::Approx(0.6455925274118738).epsilon(1e-6));
    CHECK(res.aux_map[0] == doctest::Approx(0.051205835067272).epsilon(1e-5));
    CHECK(res.aux_map[1] == doctest::Approx(0.0056054045467385715).epsilon(1e-5));
    CHECK(res.weight == doctest::Approx(0.0005198498159144991).epsilon(1e-4));
    CHECK(res.fused[0] == doctest::Approx(0.0004558363558478115).epsilon(1e-4));
    CHECK(res.fused[1] == doctest::Approx(0.00016780557826541942).epsilon(1e-4));
    for (std::size_t px = 0; px < 2; ++px) CHECK(res.fused[px] >= 0.0f);
}

TEST_CASE("fusion of identical paths vanishes") {
    RngStream rng(305, 0);
    PredictiveStack st = random_binary_stack(rng, 3, 2, 3, 3);
    FuseResult res = fuse(st, st, Measure::EE, PathId::Inter);
    for (std::size_t px = 0; px < 9; ++px) {
        CHECK(res.term1[px] == 0.0f);
        CHECK(res.fused[px] == 0.0f);
    }
}

TEST_CASE("fusion pairs samples and is order sensitive") {
    PredictiveStack sl = stack_from_logits({0.0f, 1.0f, 3.0f, 2.0f}, 2, 1, 1, 2);
    PredictiveStack sd = stack_from_logits({1.0f, 0.0f, 0.0f, 1.0f}, 2, 1, 1, 2);
    PredictiveStack sd_swapped = stack_from_logits({0.0f, 1.0f, 1.0f, 0.0f}, 2, 1, 1, 2);
    FuseResult a = fuse(sl, sd, Measure::PV, PathId::L);
    FuseResult b = fuse(sl, sd_swapped, Measure::PV, PathId::L);
    bool differs = false;
    for (std::size_t px = 0; px < 2; ++px)
        differs = differs || std::fabs(a.term1[px] - b.term1[px]) > 1e-3;
    CHECK(differs);
}

TEST_CASE("fusion auxiliary sources and validation") {
    RngStream rng(306, 0);
    PredictiveStack sl = random_binary_stack(rng, 2, 2, 3, 3);
    PredictiveStack sd = random_binary_stack(rng, 4, 1, 3, 3);  // same s after flattening
    FuseResult inter = fuse(sl, sd, Measure::PV, PathId::Inter);
    // the inter auxiliary equals the measure on the pooled draw set
    PredictiveStack pooled;
    std::vector<std::size_t> shape{8, 1, 1, 3, 3};
    pooled.probs = Tensor(shape, 0.0f);
    pooled.logits = Tensor(shape, 0.0f);
    for (std::size_t i = 0; i < 36; ++i) {
        pooled.probs[i] = sl.probs[i];
        pooled.probs[36 + i] = sd.probs[i];
    }
    pooled.m = 8;
    pooled.n_inner = 1;
    Tensor want = pixel_variance(pooled);
    for (std::size_t px = 0; px < 9; ++px) CHECK(inter.aux_map[px] == want[px]);

    FuseResult from_d = fuse(sl, sd, Measure::MI, PathId::D);
    Tensor mi_d = mutual_information(sd);
    for (std::size_t px = 0; px < 9; ++px) CHECK(from_d.aux_map[px] == mi_d[px]);

    PredictiveStack small = random_binary_stack(rng, 2, 2, 2, 2);
    CHECK_THROWS_AS(fuse(sl, small, Measure::PV, PathId::L), DataError);
    PredictiveStack fewer = random_binary_stack(rng, 3, 1, 3, 3);
    CHECK_THROWS_AS(fuse(sl, fewer, Measure::PV, PathId::L), DataError);
    CHECK_THROWS_AS(fuse(sl, sd, Measure::TotalH, PathId::L), ConfigError);
    CHECK_THROWS_AS(fuse(sl, sd, Measure::Fused, PathId::L), ConfigError);
}

TEST_CASE("uncertainty map bundle") {
    RngStream rng(307, 0);
    PredictiveStack st = random_binary_stack(rng, 3, 2, 4, 4);
    UncertaintyMaps um = uncertainty_maps(st, PathId::L);
    CHECK(um.m == 3);
    CHECK(um.n_inner == 2);
    CHECK(um.path == PathId::L);
    REQUIRE(um.maps.count(Measure::EE) == 1);
    REQUIRE(um.maps.count(Measure::MI) == 1);
    REQUIRE(um.maps.count(Measure::EPKL) == 1);
    REQUIRE(um.maps.count(Measure::PV) == 1);
    REQUIRE(um.maps.count(Measure::TotalH) == 1);
    for (const auto& [id, map] : um.maps) {
        (void)id;
        CHECK(map.shape() == std::vector<std::size_t>{4, 4});
        for (std::size_t px = 0; px < 16; ++px) CHECK(map[px] >= 0.0f);
    }
    const Tensor& tot = um.maps.at(Measure::TotalH);
    const Tensor& mi = um.maps.at(Measure::MI);
    const Tensor& ee = um.maps.at(Measure::EE);
    for (std::size_t px = 0; px < 16; ++px)
        CHECK(std::fabs(tot[px] - (mi[px] + ee[px])) <= 1e-5);
}

TEST_CASE("image score reductions") {
    Tensor constant({2, 2}, 0.75f);
    CHECK(image_score(constant, Reduction::Mean) == doctest::Approx(0.75).epsilon(1e-9));
    CHECK(image_score(constant, Reduction::TopkMean, 0.5) ==
          doctest::Approx(0.75).epsilon(1e-9));

    Tensor spike = Tensor::from_data({4}, {0.0f, 0.0f, 0.0f, 10.0f});
    CHECK(image_score(spike, Reduction::TopkMean, 0.25) == doctest::Approx(10.0));
    CHECK(image_score(spike, Reduction::TopkMean, 0.5) == doctest::Approx(5.0));
    CHECK(image_score(spike, Reduction::TopkMean, 1.0) == doctest::Approx(2.5));
    CHECK(image_score(spike, Reduction::Mean) == doctest::Approx(2.5));

    RngStream rng(308, 0);
    Tensor rnd({7, 5}, 0.0f);
    double want = 0.0;
    for (std::size_t i = 0; i < 35; ++i) {
        rnd[i] = static_cast<float>(rng_uniform(rng));
        want += rnd[i];
    }
    want /= 35.0;
    CHECK(std::fabs(image_score(rnd, Reduction::Mean) - want) < 1e-6);

    CHECK_THROWS_AS(image_score(spike, Reduction::TopkMean, 0.0), ConfigError);
    CHECK_THROWS_AS(image_score(spike, Reduction::TopkMean, -0.2), ConfigError);
    CHECK_THROWS_AS(image_score(spike, Reduction::TopkMean, 1.5), ConfigError);
    CHECK_THROWS_AS(image_score(Tensor{}, Reduction::Mean), DataError);
}

TEST_CASE("calibration selects the separating measure") {
    RngStream rng(309, 0);
    std::vector<CalItem> items;
    for (int i = 0; i < 12; ++i) {
        CalItem it;
        it.is_ood = i >= 6;
        // EE:L separates perfectly; PV:L is identically distributed
        float ee_level = it.is_ood ? 0.8f + 0.01f * i : 0.1f + 0.01f * i;
        it.maps[{Measure::EE, PathId::L}] = Tensor({2, 2}, ee_level);
        it.maps[{Measure::PV, PathId::L}] = Tensor({2, 2}, 0.5f);
        items.push_back(it);
    }
    Calibration cal = calibrate(items);
    CHECK(cal.best == MeasureKey{Measure::EE, PathId::L});
    REQUIRE(cal.table.size() == 2);
    CHECK(cal.table[0].key == MeasureKey{Measure::EE, PathId::L});
    CHECK(cal.table[0].auc == doctest::Approx(1.0));
    CHECK(cal.table[1].auc == doctest::Approx(0.5));
    CHECK(cal.table[0].n_id == 6);
    CHECK(cal.table[0].n_ood == 6);
}

TEST_CASE("calibration AUC table matches pairwise counting") {
    RngStream rng(310, 0);
    std::vector<CalItem> items;
    std::vector<double> scores;
    std::vector<int> labels;
    for (int i = 0; i < 50; ++i) {
        CalItem it;
        it.is_ood = i % 2 == 0;
        float v = static_cast<float>(rng_uniform(rng));
        it.maps[{Measure::MI, PathId::D}] = Tensor({1, 1}, v);
        items.push_back(it);
        scores.push_back(v);
        labels.push_back(it.is_ood ? 1 : 0);
    }
    Calibration cal = calibrate(items);
    double num = 0.0;
    std::size_t pairs = 0;
    for (std::size_t i = 0; i < 50; ++i)
        for (std::size_t j = 0; j < 50; ++j) {
            if (labels[i] != 1 || labels[j] != 0) continue;
            ++pairs;
            if (scores[i] > scores[j]) num += 1.0;
            else if (scores[i] == scores[j]) num += 0.5;
        }
    CHECK(cal.table[0].auc == doctest::Approx(num / pairs).epsilon(1e-12));
}

TEST_CASE("calibration tie-break and rank invariance") {
    std::vector<CalItem> items;
    for (int i = 0; i < 8; ++i) {
        CalItem it;
        it.is_ood = i >= 4;
        float v = it.is_ood ? 1.0f + i : 0.1f * i;
        // same scores under four keys: canonical order must win
        it.maps[{Measure::EE, PathId::L}] = Tensor({1, 1}, v);
        it.maps[{Measure::EE, PathId::D}] = Tensor({1, 1}, v);
        it.maps[{Measure::MI, PathId::L}] = Tensor({1, 1}, v);
        it.maps[{Measure::PV, PathId::Inter}] = Tensor({1, 1}, v);
        items.push_back(it);
    }
    Calibration cal = calibrate(items);
    CHECK(cal.best == MeasureKey{Measure::EE, PathId::L});
    for (const AucRow& r : cal.table) CHECK(r.auc == doctest::Approx(1.0));

    // strictly increasing transform of one measure's scores changes nothing
    for (CalItem& it : items) {
        Tensor& t = it.maps[{Measure::MI, PathId::L}];
        for (std::size_t i = 0; i < t.numel(); ++i) t[i] = 3.0f * t[i] + 7.0f;
    }
    Calibration cal2 = calibrate(items);
    CHECK(cal2.best == cal.best);
    for (std::size_t i = 0; i < cal.table.size(); ++i)
        CHECK(cal2.table[i].auc == doctest::Approx(cal.table[i].auc).epsilon(1e-12));
}

TEST_CASE("calibration input validation") {
    CHECK_THROWS_AS(calibrate({}), DataError);

    std::vector<CalItem> oneclass;
    for (int i = 0; i < 4; ++i) {
        CalItem it;
        it.is_ood = false;
        it.maps[{Measure::EE, PathId::L}] = Tensor({1, 1}, 0.5f);
        oneclass.push_back(it);
    }
    CHECK_THROWS_AS(calibrate(oneclass), DataError);

    std::vector<CalItem> ragged = oneclass;
    ragged[0].is_ood = true;
    ragged[1].maps[{Measure::PV, PathId::L}] = Tensor({1, 1}, 0.1f);
    CHECK_THROWS_AS(calibrate(ragged), DataError);
}

TEST_CASE("counterfactual extraction") {
    // 10-pixel reference, all zeros
    Tensor ref({2, 5}, 0.0f);
    std::vector<float> probs;
    auto add_sample = [&](std::initializer_list<int> on) {
        std::vector<float> p(10, 0.1f);
        for (int i : on) p[static_cast<std::size_t>(i)] = 0.9f;
        probs.insert(probs.end(), p.begin(), p.end());
    };
    add_sample({});            // identical to reference
    add_sample({0});           // 10% off
    add_sample({1, 4, 7});     // 30% off
    add_sample({});            // identical again
    add_sample({2});           // 10% off
    PredictiveStack st = stack_from_probs(probs, 5, 1, 1, 2, 5);

    std::vector<Tensor> cf = counterfactuals(st, ref, 0.2);
    REQUIRE(cf.size() == 1);
    CHECK(cf[0][1] == 1.0f);
    CHECK(cf[0][4] == 1.0f);
    CHECK(cf[0][7] == 1.0f);
    CHECK(cf[0][0] == 0.0f);

    std::vector<Tensor> all = counterfactuals(st, ref, 0.0);
    REQUIRE(all.size() == 5);
    CHECK(all[0][1] == 1.0f);  // most different first
    // ties keep draw order: the two 10%-off samples, then the two exact ones
    CHECK(all[1][0] == 1.0f);
    CHECK(all[2][2] == 1.0f);
    CHECK(all[3].max_value() == 0.0f);
    CHECK(all[4].max_value() == 0.0f);

    std::vector<Tensor> none =
        counterfactuals(stack_from_probs({0.1f, 0.1f}, 2, 1, 1, 1, 1), Tensor({1, 1}, 0.0f),
                        0.01);
    CHECK(none.empty());

    CHECK_THROWS_AS(counterfactuals(st, Tensor({3, 3}, 0.0f), 0.1), DataError);
}

TEST_CASE("pgm export") {
    Tensor map = Tensor::from_data({2, 3}, {0.0f, 1.0f, 2.0f, 3.0f, 4.0f, 10.0f});
    std::string path = "/tmp/lfusion_test_map.pgm";
    write_pgm(map, path);
    std::FILE* fp = std::fopen(path.c_str(), "rb");
    REQUIRE(fp != nullptr);
    char magic[3] = {0};
    int w = 0, h = 0, maxv = 0;
    REQUIRE(std::fscanf(fp, "%2s %d %d %d", magic, &w, &h, &maxv) == 4);
    std::fgetc(fp);  // single whitespace after the header
    CHECK(std::string(magic) == "P5");
    CHECK(w == 3);
    CHECK(h == 2);
    CHECK(maxv == 255);
    unsigned char bytes[6];
    REQUIRE(std::fread(bytes, 1, 6, fp) == 6);
    CHECK(std::fgetc(fp) == EOF);
    std::fclose(fp);
    int want[6] = {0, 26, 51, 77, 102, 255};
    for (int i = 0; i < 6; ++i) CHECK(static_cast<int>(bytes[i]) == want[i]);

    Tensor flat({2, 2}, 5.0f);
    write_pgm(flat, path);
    fp = std::fopen(path.c_str(), "rb");
    REQUIRE(std::fscanf(fp, "%2s %d %d %d", magic, &w, &h, &maxv) == 4);
    std::fgetc(fp);
    unsigned char cbytes[4];
    REQUIRE(std::fread(cbytes, 1, 4, fp) == 4);
    std::fclose(fp);
    for (int i = 0; i < 4; ++i) CHECK(static_cast<int>(cbytes[i]) == 0);

    CHECK_THROWS_AS(write_pgm(Tensor({2, 2, 2}, 0.0f), path), DataError);
}

TEST_CASE("auc csv export") {
    Calibration cal;
    cal.best = {Measure::MI, PathId::D};
    cal.table.push_back({{Measure::EE, PathId::L}, 0.75, 10, 8});
    cal.table.push_back({{Measure::MI, PathId::D}, 0.9375, 10, 8});
    std::string path = "/tmp/lfusion_test_auc.csv";
    write_auc_csv(cal, path);
    std::FILE* fp = std::fopen(path.c_str(), "rb");
    REQUIRE(fp != nullptr);
    char line[256];
    REQUIRE(std::fgets(line, sizeof(line), fp) != nullptr);
    CHECK(std::string(line) == "measure,path,auc,n_id,n_ood\n");
    REQUIRE(std::fgets(line, sizeof(line), fp) != nullptr);
    CHECK(std::string(line) == "EE,L,0.75,10,8\n");
    REQUIRE(std::fgets(line, sizeof(line), fp) != nullptr);
    CHECK(std::string(line) == "MI,D,0.9375,10,8\n");
    CHECK(std::fgets(line, sizeof(line), fp) == nullptr);
    std::fclose(fp);
}

TEST_CASE("measure and path names round trip") {
    for (Measure m : {Measure::EE, Measure::MI, Measure::EPKL, Measure::PV,
                      Measure::TotalH, Measure::Fused})
        CHECK(parse_measure(measure_name(m)) == m);
    for (PathId p : {PathId::L, PathId::D, PathId::Inter})
        CHECK(parse_path(path_name(p)) == p);
    CHECK(parse_reduction("mean") == Reduction::Mean);
    CHECK(parse_reduction("topk_mean") == Reduction::TopkMean);
    CHECK(measure_name(Measure::TotalH) == "TOTAL_H");
    CHECK(path_name(PathId::Inter) == "inter");
    CHECK_THROWS_AS(parse_measure("XX"), ConfigError);
    CHECK_THROWS_AS(parse_path("Q"), ConfigError);
    CHECK_THROWS_AS(parse_reduction("median"), ConfigError);
}
