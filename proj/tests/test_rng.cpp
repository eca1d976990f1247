#include <doctest.h>

#include <cmath>
#include <numeric>
#include <vector>

#include "idg/rng.hpp"

using idg::Rng;

TEST_CASE("rng streams are deterministic per seed") {
    Rng a(42), b(42), c(43);
    std::vector<double> va, vb, vc;
    for (int i = 0; i < 100; ++i) {
        va.push_back(a.normal());
        vb.push_back(b.normal());
        vc.push_back(c.normal());
    }
    CHECK(va == vb);
    CHECK(va != vc);
}

TEST_CASE("named substreams are independent and reproducible") {
    Rng root(7);
    Rng s1 = root.substream("noise");
    Rng s2 = root.substream("init");
    Rng s1b = Rng(7).substream("noise");
    CHECK(s1.next_u64() == s1b.next_u64());
    CHECK(s1.seed() != s2.seed());
    Rng i0 = root.substream("epoch", 0);
    Rng i1 = root.substream("epoch", 1);
    CHECK(i0.seed() != i1.seed());
}

TEST_CASE("normal draws have roughly standard moments") {
    Rng rng(123);
    const int n = 200000;
    double sum = 0, sum2 = 0;
    for (int i = 0; i < n; ++i) {
        double v = rng.normal();
        sum += v;
        sum2 += v * v;
    }
    const double mean = sum / n;
    const double var = sum2 / n - mean * mean;
    CHECK(std::abs(mean) < 0.01);
    CHECK(std::abs(var - 1.0) < 0.02);
}

TEST_CASE("uniform_int covers its range without bias at the edges") {
    Rng rng(5);
    std::vector<int> counts(7, 0);
    for (int i = 0; i < 70000; ++i) ++counts[static_cast<std::size_t>(rng.uniform_int(7))];
    for (int c : counts) CHECK(c > 9000);
    CHECK(std::accumulate(counts.begin(), counts.end(), 0) == 70000);
}

TEST_CASE("shuffle is a permutation and seed-stable") {
    std::vector<int> v(50);
    std::iota(v.begin(), v.end(), 0);
    auto w = v;
    Rng r1(9), r2(9);
    r1.shuffle(v);
    r2.shuffle(w);
    CHECK(v == w);
    std::vector<int> sorted = v;
    std::sort(sorted.begin(), sorted.end());
    for (int i = 0; i < 50; ++i) CHECK(sorted[static_cast<std::size_t>(i)] == i);
}
