#include <doctest.h>

#include "idg/checkpoint.hpp"
#include "idg/optimizer.hpp"

using idg::Adam;
using idg::AdamConfig;
using idg::ParamStore;
using idg::Tensor;

namespace {

ParamStore<double> single_param(double value) {
    ParamStore<double> ps;
    ps.add("p", Tensor<double>({1}, {value}));
    return ps;
}

}  // namespace

TEST_CASE("first Adam step with unit gradient moves by ~lr") {
    ParamStore<double> ps = single_param(1.0);
    AdamConfig cfg;
    cfg.lr = 0.1;
    Adam<double> opt(ps, cfg);
    ps.find("p")->grad[0] = 1.0;
    opt.step();
    // m_hat = v_hat = 1 at step 1, so the update is lr/(1+eps)
    CHECK(ps.find("p")->value[0] == doctest::Approx(0.9).epsilon(1e-7));
    CHECK(opt.step_count() == 1);
}

TEST_CASE("decoupled weight decay subtracts lr*decay*p on top") {
    ParamStore<double> ps = single_param(1.0);
    AdamConfig cfg;
    cfg.lr = 0.1;
    cfg.weight_decay = 0.01;
    cfg.decoupled = true;
    Adam<double> opt(ps, cfg);
    ps.find("p")->grad[0] = 1.0;
    opt.step();
    CHECK(ps.find("p")->value[0] == doctest::Approx(0.899).epsilon(1e-7));
}

TEST_CASE("coupled decay folds into the gradient instead") {
    ParamStore<double> ps = single_param(1.0);
    AdamConfig cfg;
    cfg.lr = 0.1;
    cfg.weight_decay = 0.01;
    cfg.decoupled = false;
    Adam<double> opt(ps, cfg);
    ps.find("p")->grad[0] = 1.0;
    opt.step();
    // g' = 1.01, m_hat = 1.01, v_hat = 1.01^2 -> update ~ lr
    CHECK(ps.find("p")->value[0] == doctest::Approx(1.0 - 0.1).epsilon(1e-6));
}

TEST_CASE("zero gradient with zero decay is a fixed point") {
    ParamStore<double> ps = single_param(3.5);
    Adam<double> opt(ps, AdamConfig{});
    for (int i = 0; i < 5; ++i) opt.step();
    CHECK(ps.find("p")->value[0] == 3.5);
}

TEST_CASE("non-finite gradients trap or skip per config") {
    ParamStore<double> ps = single_param(1.0);
    AdamConfig cfg;
    Adam<double> opt(ps, cfg);
    ps.find("p")->grad[0] = std::numeric_limits<double>::quiet_NaN();
    CHECK_THROWS(opt.step());

    AdamConfig skip_cfg;
    skip_cfg.on_nonfinite = AdamConfig::OnNonFinite::skip;
    ParamStore<double> ps2 = single_param(1.0);
    Adam<double> opt2(ps2, skip_cfg);
    ps2.find("p")->grad[0] = std::numeric_limits<double>::quiet_NaN();
    opt2.step();
    CHECK(ps2.find("p")->value[0] == 1.0);
    CHECK(opt2.step_count() == 0);
    CHECK(opt2.skipped_steps() == 1);
}

TEST_CASE("optimizer state round-trips through a container, counter resumes") {
    ParamStore<double> ps = single_param(1.0);
    AdamConfig cfg;
    cfg.lr = 0.05;
    Adam<double> opt(ps, cfg);
    for (int i = 0; i < 3; ++i) {
        ps.zero_grads();
        ps.find("p")->grad[0] = 0.2;
        opt.step();
    }
    idg::Container c;
    opt.save(c);

    ParamStore<double> ps2 = single_param(ps.find("p")->value[0]);
    Adam<double> opt2(ps2, cfg);
    opt2.load(c);
    CHECK(opt2.step_count() == 3);

    // continuing from restored state matches continuing the original
    for (auto* o : {&opt, &opt2}) {
        auto* store = o == &opt ? &ps : &ps2;
        store->zero_grads();
        store->find("p")->grad[0] = 0.2;
        o->step();
    }
    CHECK(ps.find("p")->value[0] == ps2.find("p")->value[0]);
}

TEST_CASE("buffers (non-trainable parameters) are not updated") {
    ParamStore<double> ps;
    ps.add("w", Tensor<double>({1}, {1.0}));
    ps.add("running", Tensor<double>({1}, {5.0}), false);
    Adam<double> opt(ps, AdamConfig{});
    ps.find("w")->grad[0] = 1.0;
    ps.find("running")->grad[0] = 1.0;
    opt.step();
    CHECK(ps.find("running")->value[0] == 5.0);
    CHECK(ps.find("w")->value[0] < 1.0);
}
