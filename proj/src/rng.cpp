#include "lfusion/rng.hpp"

#include <cmath>

namespace lfusion {

std::uint64_t rng_mix64(std::uint64_t x) {
    x ^= x >> 30;
    x *= 0xbf58476d1ce4e5b9ULL;
    x ^= x >> 27;
    x *= 0x94d049bb133111ebULL;
    x ^= x >> 31;
    return x;
}

namespace {
constexpr std::uint64_t kGolden = 0x9e3779b97f4a7c15ULL;

std::uint64_t stream_key(const RngStream& s) {
    return rng_mix64(s.root_seed ^ rng_mix64(s.stream_id ^ kGolden));
}
}  // namespace

std::uint64_t rng_word_at(const RngStream& s, std::uint64_t counter) {
    return rng_mix64(stream_key(s) + counter * kGolden);
}

std::uint64_t rng_next_u64(RngStream& s) {
    return rng_word_at(s, s.counter++);
}

double rng_uniform(RngStream& s) {
    return (static_cast<double>(rng_next_u64(s) >> 11) + 0.5) * 0x1p-53;
}

// Wichura's AS241 PPND16 rational approximation, |error| < 1e-15 on (0,1).
double normal_inverse_cdf(double p) {
    static const double a[8] = {
        3.3871328727963666080e0,  1.3314166789178437745e2, 1.9715909503065514427e3,
        1.3731693765509461125e4,  4.5921953931549871457e4, 6.7265770927008700853e4,
        3.3430575583588128105e4,  2.5090809287301226727e3};
    static const double b[8] = {
        1.0,                      4.2313330701600911252e1, 6.8718700749205790830e2,
        5.3941960214247511077e3,  2.1213794301586595867e4, 3.9307895800092710610e4,
        2.8729085735721942674e4,  5.2264952788528545610e3};
    static const double c[8] = {
        1.42343711074968357734e0,  4.63033784615654529590e0,
        5.76949722146069140550e0,  3.64784832476320460504e0,
        1.27045825245236838258e0,  2.41780725177450611770e-1,
        2.27238449892691845833e-2, 7.74545014278341407640e-4};
    static const double d[8] = {
        1.0,                       2.05319162663775882187e0,
        1.67638483018380384940e0,  6.89767334985100004550e-1,
        1.48103976427480074590e-1, 1.51986665636164571966e-2,
        5.47593808499534494600e-4, 1.05075007164441684324e-9};
    static const double e[8] = {
        6.65790464350110377720e0,  5.46378491116411436990e0,
        1.78482653991729133580e0,  2.96560571828504891230e-1,
        2.65321895265761230930e-2, 1.24266094738807843860e-3,
        2.71155556874348757815e-5, 2.01033439929228813265e-7};
    static const double f[8] = {
        1.0,                       5.99832206555887937690e-1,
        1.36929880922735805310e-1, 1.48753612908506148525e-2,
        7.86869131145613259100e-4, 1.84631831751005468180e-5,
        1.42151175831644588870e-7, 2.04426310338993978564e-15};

    auto horner = [](const double* k, double r) {
        return ((((((k[7] * r + k[6]) * r + k[5]) * r + k[4]) * r + k[3]) * r + k[2]) * r +
                k[1]) * r + k[0];
    };

    const double q = p - 0.5;
    if (std::fabs(q) <= 0.425) {
        const double r = 0.180625 - q * q;
        return q * horner(a, r) / horner(b, r);
    }
    double r = q < 0.0 ? p : 1.0 - p;
    if (r <= 0.0) return q < 0.0 ? -HUGE_VAL : HUGE_VAL;
    r = std::sqrt(-std::log(r));
    double val;
    if (r <= 5.0) {
        r -= 1.6;
        val = horner(c, r) / horner(d, r);
    } else {
        r -= 5.0;
        val = horner(e, r) / horner(f, r);
    }
    return q < 0.0 ? -val : val;
}

double rng_normal(RngStream& s) {
    return normal_inverse_cdf(rng_uniform(s));
}

Tensor rng_standard_normal(RngStream& s, const std::vector<std::size_t>& shape) {
    Tensor t(shape);
    for (std::size_t i = 0; i < t.numel(); ++i)
        t[i] = static_cast<float>(rng_normal(s));
    return t;
}

Tensor rng_uniform01(RngStream& s, const std::vector<std::size_t>& shape) {
    Tensor t(shape);
    for (std::size_t i = 0; i < t.numel(); ++i)
        t[i] = static_cast<float>(rng_uniform(s));
    return t;
}

RngStream derive_stream(std::uint64_t root_seed, std::string_view purpose,
                        std::uint64_t index) {
    std::uint64_t sid = rng_mix64(fnv1a64(purpose) ^ rng_mix64(index + 0x6a09e667f3bcc909ULL));
    return RngStream(root_seed, sid);
}

}  // namespace lfusion
