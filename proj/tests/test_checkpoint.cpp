#include <doctest.h>

#include <cstdio>

#include "idg/checkpoint.hpp"
#include "idg/rng.hpp"

using idg::Container;
using idg::Tensor;

TEST_CASE("container round-trips tensors and metadata byte-exactly") {
    Container c;
    c.set_meta("created_by", "test");
    c.set_meta("seed", "17");
    idg::Rng rng(1);
    Tensor<float> a({3, 4});
    rng.fill_normal(a);
    Tensor<double> b({2, 2, 2});
    rng.fill_normal(b);
    c.put("weights/a", a);
    c.put("weights/b", b);

    const auto bytes = c.serialize();
    Container d = Container::deserialize(bytes);
    CHECK(d.serialize() == bytes);

    CHECK(d.meta("seed") == std::string("17"));
    CHECK(d.get<float>("weights/a") == a);
    CHECK(d.get<double>("weights/b") == b);
    CHECK(d.tensor_names() == std::vector<std::string>{"weights/a", "weights/b"});
    CHECK(d.dtype_of("weights/a") == Container::Dtype::f32);
}

TEST_CASE("container rejects wrong dtype, unknown names, bad magic") {
    Container c;
    c.put("t", Tensor<float>({2}));
    CHECK_THROWS(c.get<double>("t"));
    CHECK_THROWS(c.get<float>("missing"));
    CHECK_THROWS(c.put("t", Tensor<float>({2})));

    auto bytes = c.serialize();
    bytes[0] = 'X';
    CHECK_THROWS_WITH_AS(Container::deserialize(bytes), doctest::Contains("magic"), std::runtime_error);
}

TEST_CASE("container rejects unknown versions and truncated payloads") {
    Container c;
    c.put("t", Tensor<float>({4}));
    auto bytes = c.serialize();
    auto bumped = bytes;
    bumped[4] = 9;  // version field
    CHECK_THROWS_WITH_AS(Container::deserialize(bumped), doctest::Contains("version"), std::runtime_error);

    auto cut = bytes;
    cut.resize(cut.size() - 3);
    CHECK_THROWS(Container::deserialize(cut));
}

TEST_CASE("container file io") {
    const std::string path = "test_container_tmp.idgc";
    Container c;
    c.set_meta("k", "v");
    c.put("x", Tensor<float>({2, 2}, {1.f, 2.f, 3.f, 4.f}));
    c.save(path);
    Container d = Container::load(path);
    CHECK(d.serialize() == c.serialize());
    std::remove(path.c_str());
}
