#include <cmath>
#include <set>

#include "doctest.h"
#include "outlierlab/common.hpp"

using namespace outlierlab;

TEST_CASE("splitmix64 matches published reference outputs") {
    // First outputs of the reference generator for state 0 and 1.
    CHECK(splitmix64(0) == 0xE220A8397B1DCDAFULL);
    CHECK(splitmix64(1) == 0x910A2DEC89025CC1ULL);
}

TEST_CASE("fnv1a64 matches published reference outputs") {
    CHECK(fnv1a64("") == 0xcbf29ce484222325ULL);
    CHECK(fnv1a64("a") == 0xaf63dc4c8601ec8cULL);
    CHECK(fnv1a64("foobar") == 0x85944171f73967e8ULL);
}

TEST_CASE("derive_seed separates stages and masters") {
    CHECK(derive_seed(1, "corpus") == derive_seed(1, "corpus"));
    CHECK(derive_seed(1, "corpus") != derive_seed(1, "train"));
    CHECK(derive_seed(1, "corpus") != derive_seed(2, "corpus"));
}

TEST_CASE("uniform stays in [0,1) with sane first moments") {
    Rng rng(42);
    double sum = 0.0;
    const int n = 200000;
    for (int i = 0; i < n; ++i) {
        const double u = rng.uniform();
        REQUIRE(u >= 0.0);
        REQUIRE(u < 1.0);
        sum += u;
    }
    CHECK(sum / n == doctest::Approx(0.5).epsilon(0.01));
}

TEST_CASE("uniform_int covers its range") {
    Rng rng(7);
    std::set<std::uint64_t> seen;
    for (int i = 0; i < 1000; ++i) {
        const std::uint64_t v = rng.uniform_int(10);
        REQUIRE(v < 10);
        seen.insert(v);
    }
    CHECK(seen.size() == 10);
}

TEST_CASE("normal has roughly standard moments") {
    Rng rng(3);
    double sum = 0.0, sumsq = 0.0;
    const int n = 200000;
    for (int i = 0; i < n; ++i) {
        const double z = rng.normal();
        sum += z;
        sumsq += z * z;
    }
    CHECK(sum / n == doctest::Approx(0.0).epsilon(1).scale(0.02));
    CHECK(sumsq / n == doctest::Approx(1.0).epsilon(0.02));
}

TEST_CASE("truncated_normal respects the clip") {
    Rng rng(11);
    for (int i = 0; i < 50000; ++i) {
        const double v = rng.truncated_normal(0.02, 2.0);
        REQUIRE(std::abs(v) <= 0.04);
    }
}

TEST_CASE("rng is deterministic per seed") {
    Rng a(99), b(99), c(100);
    bool all_equal = true, any_diff = false;
    for (int i = 0; i < 100; ++i) {
        const auto va = a.next_u64();
        all_equal = all_equal && (va == b.next_u64());
        any_diff = any_diff || (va != c.next_u64());
    }
    CHECK(all_equal);
    CHECK(any_diff);
}

TEST_CASE("discrete sampler tracks its target distribution") {
    // oracle distribution [2/3, 1/3]
    DiscreteSampler sampler({2.0 / 3.0, 1.0 / 3.0});
    Rng rng(5);
    int counts[2] = {0, 0};
    const int n = 90000;
    for (int i = 0; i < n; ++i) ++counts[sampler.sample(rng)];
    CHECK(static_cast<double>(counts[0]) / n == doctest::Approx(2.0 / 3.0).epsilon(0.01));
    CHECK(static_cast<double>(counts[1]) / n == doctest::Approx(1.0 / 3.0).epsilon(0.02));
}

TEST_CASE("discrete sampler never returns out-of-range indices") {
    DiscreteSampler sampler({0.25, 0.25, 0.5});
    Rng rng(8);
    for (int i = 0; i < 10000; ++i) REQUIRE(sampler.sample(rng) < 3);
}
