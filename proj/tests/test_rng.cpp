#define DOCTEST_CONFIG_IMPLEMENT_WITH_MAIN
#include <doctest.h>

#include <cmath>
#include <fstream>
#include <sstream>

#include "lfusion/rng.hpp"

using namespace lfusion;

TEST_CASE("frozen cross-platform vectors") {
    std::ifstream is(std::string(LFUSION_TEST_DATA_DIR) + "/rng_vectors.csv");
    REQUIRE(is.good());
    std::string line;
    std::getline(is, line);  // header
    int checked = 0;
    while (std::getline(is, line)) {
        if (line.empty()) continue;
        std::stringstream ss(line);
        std::string field;
        std::getline(ss, field, ',');
        std::uint64_t root = std::stoull(field);
        std::getline(ss, field, ',');
        std::uint64_t stream = std::stoull(field);
        std::getline(ss, field, ',');
        std::uint64_t counter = std::stoull(field);
        std::getline(ss, field, ',');
        std::uint64_t expect_word = std::stoull(field);
        std::getline(ss, field, ',');
        double expect_uniform = std::stod(field);
        std::getline(ss, field, ',');
        double expect_normal = std::stod(field);

        RngStream s(root, stream);
        CHECK(rng_word_at(s, counter) == expect_word);
        s.counter = counter;
        double u = rng_uniform(s);
        CHECK(u == expect_uniform);
        CHECK(normal_inverse_cdf(u) == doctest::Approx(expect_normal).epsilon(1e-12));
        ++checked;
    }
    CHECK(checked >= 10);
}

TEST_CASE("same stream replays identically") {
    RngStream a(123, 456), b(123, 456);
    Tensor ta = rng_standard_normal(a, {32, 32});
    Tensor tb = rng_standard_normal(b, {32, 32});
    for (std::size_t i = 0; i < ta.numel(); ++i) CHECK(ta[i] == tb[i]);
    CHECK(a.counter == 1024);
}

TEST_CASE("distinct streams differ") {
    RngStream a(123, 1), b(123, 2);
    CHECK(rng_next_u64(a) != rng_next_u64(b));
    RngStream c = derive_stream(9, "fisher", 0);
    RngStream d = derive_stream(9, "fisher", 1);
    RngStream e = derive_stream(9, "sample", 0);
    CHECK(c.stream_id != d.stream_id);
    CHECK(c.stream_id != e.stream_id);
}

TEST_CASE("standard normal moments over 1e6 draws") {
    RngStream s(2024, 77);
    double sum = 0.0, sum_sq = 0.0;
    const int n = 1000000;
    for (int i = 0; i < n; ++i) {
        double z = rng_normal(s);
        sum += z;
        sum_sq += z * z;
    }
    double mean = sum / n;
    double var = sum_sq / n - mean * mean;
    CHECK(mean > -0.01);
    CHECK(mean < 0.01);
    CHECK(var > 0.99);
    CHECK(var < 1.01);
}

TEST_CASE("uniform draws stay inside open interval") {
    RngStream s(5, 5);
    for (int i = 0; i < 10000; ++i) {
        double u = rng_uniform(s);
        CHECK(u > 0.0);
        CHECK(u < 1.0);
    }
}

TEST_CASE("inverse cdf round trips the median and symmetry") {
    CHECK(normal_inverse_cdf(0.5) == 0.0);
    CHECK(normal_inverse_cdf(0.75) == doctest::Approx(0.6744897501960817).epsilon(1e-12));
    CHECK(normal_inverse_cdf(0.25) == doctest::Approx(-0.6744897501960817).epsilon(1e-12));
    CHECK(normal_inverse_cdf(1e-9) == doctest::Approx(-5.9978070150076865).epsilon(1e-9));
}
