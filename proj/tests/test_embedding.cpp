#include <doctest.h>

#include <span>
#include <vector>

#include "idg/embedding.hpp"
#include "idg/rng.hpp"

using idg::EmbeddedImage;
using idg::EmbeddingParams;
using idg::PadCheck;
using idg::Rng;
using idg::SignalWindow;
using idg::Tensor;

namespace {

std::vector<float> random_signal(Rng& rng, std::int64_t len) {
    std::vector<float> s(static_cast<std::size_t>(len));
    for (auto& v : s) v = static_cast<float>(rng.normal());
    return s;
}

SignalWindow random_window(Rng& rng, std::int64_t len) {
    SignalWindow w;
    w.samples = Tensor<float>({3, len});
    rng.fill_normal(w.samples);
    return w;
}

}  // namespace

TEST_CASE("column starts: reference parameters give 64 columns ending anchored") {
    EmbeddingParams p{15, 64, 1024};
    CHECK(p.q() == 64);  // ceil(960/15)
    const auto starts = p.column_starts();
    REQUIRE(starts.size() == 64);
    CHECK(starts[0] == 0);
    CHECK(starts[1] == 15);
    CHECK(starts[62] == 930);
    CHECK(starts[63] == 960);  // anchored at L-n
    CHECK_NOTHROW(p.validate());
}

TEST_CASE("small worked example: 10 samples, n=4, m=2") {
    EmbeddingParams p{2, 4, 10};
    CHECK(p.q() == 3);
    std::vector<double> x{1, 2, 3, 4, 5, 6, 7, 8, 9, 10};
    Tensor<double> m = idg::embed(std::span<const double>(x), p);
    REQUIRE(m.shape() == idg::Shape{4, 3});
    // columns: (1..4), (3..6), (7..10)
    const double expect[4][3] = {{1, 3, 7}, {2, 4, 8}, {3, 5, 9}, {4, 6, 10}};
    for (int r = 0; r < 4; ++r) {
        for (int c = 0; c < 3; ++c) CHECK(m[r * 3 + c] == expect[r][c]);
    }
    // sample 5 (1-based) is read back from column 2, row 3 (1-based).
    CHECK(m[2 * 3 + 1] == 5);
    auto back = idg::invert(m, p);
    CHECK(back == x);
}

TEST_CASE("embedding of zeros is zeros and round-trips") {
    EmbeddingParams p{15, 64, 1024};
    std::vector<float> zeros(1024, 0.f);
    auto m = idg::embed(std::span<const float>(zeros), p);
    for (auto v : m.values()) CHECK(v == 0.f);
    CHECK(idg::invert(m, p) == zeros);
}

TEST_CASE("round-trip is bit-exact over random signals and parameters") {
    Rng rng(2024);
    // reference parameters
    EmbeddingParams paper{15, 64, 1024};
    for (int i = 0; i < 200; ++i) {
        auto x = random_signal(rng, 1024);
        auto m = idg::embed(std::span<const float>(x), paper);
        CHECK(idg::invert(m, paper) == x);
    }
    // randomized valid parameterizations, including L == n
    int tested = 0;
    while (tested < 100) {
        const std::int64_t n = 2 + rng.uniform_int(63);
        const std::int64_t m = 1 + rng.uniform_int(n);
        const std::int64_t L = n + rng.uniform_int(400);
        EmbeddingParams p{m, n, L};
        try {
            p.validate();
        } catch (const std::invalid_argument&) {
            continue;
        }
        auto x = random_signal(rng, L);
        auto mat = idg::embed(std::span<const float>(x), p);
        CHECK(mat.shape() == idg::Shape{n, p.q()});
        CHECK(idg::invert(mat, p) == x);
        CHECK(idg::consistency_check(mat, p) == 0.f);
        ++tested;
    }
}

TEST_CASE("embedding is linear in the signal") {
    Rng rng(7);
    EmbeddingParams p{5, 16, 100};
    auto x = random_signal(rng, 100);
    auto y = random_signal(rng, 100);
    const float a = 2.5f, b = -1.25f;
    std::vector<float> combo(100);
    for (int i = 0; i < 100; ++i) combo[static_cast<std::size_t>(i)] = a * x[static_cast<std::size_t>(i)] + b * y[static_cast<std::size_t>(i)];
    auto mc = idg::embed(std::span<const float>(combo), p);
    auto mx = idg::embed(std::span<const float>(x), p);
    auto my = idg::embed(std::span<const float>(y), p);
    for (std::int64_t i = 0; i < mc.numel(); ++i) CHECK(mc[i] == a * mx[i] + b * my[i]);
}

TEST_CASE("consistency check reports disagreement on tampered matrices") {
    EmbeddingParams p{2, 4, 10};
    std::vector<double> x{1, 2, 3, 4, 5, 6, 7, 8, 9, 10};
    auto m = idg::embed(std::span<const double>(x), p);
    CHECK(idg::consistency_check(m, p) == 0.0);
    m[0 * 3 + 1] += 0.75;  // column 1 row 0 duplicates sample 3
    CHECK(idg::consistency_check(m, p) == doctest::Approx(0.75));
}

TEST_CASE("invalid parameterizations are rejected with offending indices") {
    CHECK_THROWS_AS((EmbeddingParams{0, 4, 10}.validate()), std::invalid_argument);
    CHECK_THROWS_AS((EmbeddingParams{5, 4, 10}.validate()), std::invalid_argument);
    CHECK_THROWS_AS((EmbeddingParams{4, 4, 11}.validate()), std::invalid_argument);  // uncovered interior
    // m = n with exact divisibility drops an interior column -> gap 2m > n
    CHECK_THROWS_WITH_AS((EmbeddingParams{16, 16, 272}.validate()), doctest::Contains("gap"),
                         std::invalid_argument);
    CHECK_NOTHROW((EmbeddingParams{8, 16, 144}.validate()));
    CHECK_NOTHROW((EmbeddingParams{1, 4, 4}.validate()));  // single column when L == n
    CHECK((EmbeddingParams{1, 4, 4}.q()) == 1);
}

TEST_CASE("length mismatch is an error") {
    EmbeddingParams p{2, 4, 10};
    std::vector<float> x(9, 0.f);
    CHECK_THROWS(idg::embed(std::span<const float>(x), p));
}

TEST_CASE("embed_window stacks channels, pads bottom/right, and inverts") {
    Rng rng(55);
    EmbeddingParams p{15, 64, 1024};
    SignalWindow w = random_window(rng, 1024);

    auto img = idg::embed_window(w, p, 64, 64);
    CHECK(img.pixels.shape() == idg::Shape{3, 64, 64});
    CHECK(img.pad.bottom == 0);
    CHECK(img.pad.right == 0);
    CHECK(img.channel_order == std::vector<std::string>{"x", "y", "z"});

    auto wide = idg::embed_window(w, p, 64, 72);
    CHECK(wide.pixels.shape() == idg::Shape{3, 64, 72});
    CHECK(wide.pad.right == 8);
    for (std::int64_t c = 0; c < 3; ++c) {
        for (std::int64_t r = 0; r < 64; ++r) {
            for (std::int64_t col = 64; col < 72; ++col) CHECK(wide.pixels[(c * 64 + r) * 72 + col] == 0.f);
        }
    }

    SignalWindow back = idg::invert_image(wide);
    CHECK(back.samples == w.samples);

    // channel order: channel 0 of the image inverts to the x channel
    auto x_only = idg::invert_channels(img);
    for (std::int64_t i = 0; i < 1024; ++i) CHECK(x_only[i] == w.samples[i]);
}

TEST_CASE("nonzero padding is an error by default, a warning when configured") {
    Rng rng(56);
    EmbeddingParams p{15, 64, 1024};
    SignalWindow w = random_window(rng, 1024);
    auto img = idg::embed_window(w, p, 64, 72);
    img.pixels[(0 * 64 + 3) * 72 + 70] = 1.f;  // inside recorded pad region
    CHECK_THROWS_WITH_AS(idg::invert_image(img), doctest::Contains("padding"), std::runtime_error);
    CHECK_NOTHROW(idg::invert_image(img, PadCheck::warn));
    CHECK_NOTHROW(idg::invert_image(img, PadCheck::ignore));
}

TEST_CASE("inconsistent pad metadata is rejected") {
    Rng rng(57);
    EmbeddingParams p{15, 64, 1024};
    SignalWindow w = random_window(rng, 1024);
    auto img = idg::embed_window(w, p, 64, 72);
    img.pad.right = 4;  // no longer matches pixel width
    CHECK_THROWS_WITH_AS(idg::invert_image(img), doctest::Contains("pad metadata"), std::invalid_argument);
}

TEST_CASE("inversion is total on generated (non-embedding) images") {
    Rng rng(58);
    EmbeddingParams p{15, 64, 1024};
    EmbeddedImage<float> img;
    img.params = p;
    img.pad = idg::Pad{};
    img.pixels = Tensor<float>({3, 64, 64});
    rng.fill_normal(img.pixels);
    img.channel_order = {"x", "y", "z"};
    SignalWindow w = idg::invert_image(img);
    CHECK(w.samples.shape() == idg::Shape{3, 1024});
    CHECK(w.samples.all_finite());
    // mean-of-covering-entries mode is also total and differs in overlaps
    SignalWindow m = idg::invert_image(img, PadCheck::strict, idg::InversionRule::mean);
    CHECK(m.samples.all_finite());
}
