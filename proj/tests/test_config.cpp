#include <doctest.h>

#include "idg/config.hpp"

using idg::RunConfig;

TEST_CASE("defaults carry the reference training setup") {
    RunConfig c;
    CHECK(c.embedding.m == 15);
    CHECK(c.embedding.n == 64);
    CHECK(c.embedding.length == 1024);
    CHECK(c.diffusion.sigma_min == doctest::Approx(0.002));
    CHECK(c.diffusion.sigma_max == doctest::Approx(80.0));
    CHECK(c.diffusion.sigma_data == doctest::Approx(0.5));
    CHECK(c.diffusion.steps == 18);
    CHECK(c.diffusion.lr == doctest::Approx(1e-4));
    CHECK(c.diffusion.batch == 128);
    CHECK(c.diffusion.epochs == 1000);
    CHECK(c.backbone.model_channels == 64);
    CHECK(c.backbone.channel_multipliers == std::vector<int>{1, 2, 2, 2});
    CHECK(c.classifier.lr == doctest::Approx(0.001));
    CHECK(c.classifier.weight_decay == doctest::Approx(1e-5));
    CHECK(c.classifier.patience == 10);
    CHECK(c.data.window == 1024);
    CHECK(c.data.overlap == doctest::Approx(0.5));
    CHECK(c.data.drop == 1500);
    CHECK(c.data.train_fraction == doctest::Approx(0.70));
}

TEST_CASE("parse applies overrides and rejects unknown keys") {
    const char* text = R"(
# comment
[embedding]
m = 8
n = 16
length = 144
target_height = 16
target_width = 16

[diffusion]
epochs = 5
)";
    RunConfig c = RunConfig::parse(text);
    CHECK(c.embedding.m == 8);
    CHECK(c.embedding.length == 144);
    CHECK(c.diffusion.epochs == 5);
    CHECK(c.diffusion.batch == 128);  // untouched default

    CHECK_THROWS_WITH_AS(RunConfig::parse("[embedding]\nbogus = 1\n"), doctest::Contains("unknown key"),
                         std::invalid_argument);
    CHECK_THROWS_WITH_AS(RunConfig::parse("[nosuch]\nm = 1\n"), doctest::Contains("unknown section"),
                         std::invalid_argument);
    CHECK_THROWS(RunConfig::parse("[embedding]\nm 15\n"));
}

TEST_CASE("echo emits every effective key and reparses to the same state") {
    RunConfig c;
    c.embedding.m = 8;
    c.embedding.n = 16;
    c.embedding.length = 144;
    c.diffusion.lr = 3e-4;
    const std::string ini = c.to_ini();
    RunConfig d = RunConfig::parse(ini);
    CHECK(d.to_ini() == ini);
    CHECK(d.embedding.m == 8);
    CHECK(d.diffusion.lr == doctest::Approx(3e-4));
}

TEST_CASE("validation catches malformed embeddings and split fractions") {
    CHECK_THROWS(RunConfig::parse("[embedding]\nm = 100\nn = 10\n"));
    CHECK_THROWS_WITH_AS(RunConfig::parse("[data]\ntrain_fraction = 0.9\n"), doctest::Contains("sum to 1"),
                         std::invalid_argument);
    CHECK_THROWS(RunConfig::parse("[diffusion]\nsigma_min = -1\n"));
}
