#pragma once

#include <cstdint>
#include <stdexcept>
#include <vector>

#include "idg/checkpoint.hpp"
#include "idg/nn.hpp"

namespace idg {

struct AdamConfig {
    double lr = 1e-3;
    double beta1 = 0.9;
    double beta2 = 0.999;
    double eps = 1e-8;
    double weight_decay = 0.0;
    bool decoupled = false;  // true: AdamW; false: L2 folded into the gradient
    enum class OnNonFinite { trap, skip } on_nonfinite = OnNonFinite::trap;
};

/// Adam / AdamW over a ParamStore's trainable parameters. Moments live in
/// store order; the step counter is shared and strictly increasing.
template <typename T>
class Adam {
public:
    Adam(ParamStore<T>& params, AdamConfig config) : params_(&params), cfg_(config) {
        for (auto& p : params) {
            if (!p.trainable) continue;
            slots_.push_back(Slot{&p, Tensor<T>(p.value.shape()), Tensor<T>(p.value.shape())});
        }
    }

    const AdamConfig& config() const { return cfg_; }
    AdamConfig& config() { return cfg_; }
    std::int64_t step_count() const { return step_; }
    std::int64_t skipped_steps() const { return skipped_; }

    /// One update from the gradients currently held by the parameters.
    void step() {
        for (auto& s : slots_) {
            if (!s.param->grad.all_finite()) {
                if (cfg_.on_nonfinite == AdamConfig::OnNonFinite::trap) {
                    throw std::runtime_error("optimizer: non-finite gradient for '" + s.param->name + "'");
                }
                ++skipped_;
                return;
            }
        }
        ++step_;
        const double bc1 = 1.0 - std::pow(cfg_.beta1, static_cast<double>(step_));
        const double bc2 = 1.0 - std::pow(cfg_.beta2, static_cast<double>(step_));
        for (auto& s : slots_) {
            auto& p = s.param->value.values();
            const auto& g = s.param->grad.values();
            auto& m = s.m.values();
            auto& v = s.v.values();
            for (std::size_t i = 0; i < p.size(); ++i) {
                double gi = static_cast<double>(g[i]);
                if (cfg_.weight_decay != 0.0 && !cfg_.decoupled) gi += cfg_.weight_decay * static_cast<double>(p[i]);
                const double mi = cfg_.beta1 * static_cast<double>(m[i]) + (1.0 - cfg_.beta1) * gi;
                const double vi = cfg_.beta2 * static_cast<double>(v[i]) + (1.0 - cfg_.beta2) * gi * gi;
                m[i] = static_cast<T>(mi);
                v[i] = static_cast<T>(vi);
                const double mhat = mi / bc1;
                const double vhat = vi / bc2;
                double update = cfg_.lr * mhat / (std::sqrt(vhat) + cfg_.eps);
                if (cfg_.weight_decay != 0.0 && cfg_.decoupled) {
                    update += cfg_.lr * cfg_.weight_decay * static_cast<double>(p[i]);
                }
                p[i] = static_cast<T>(static_cast<double>(p[i]) - update);
            }
        }
    }

    void save(Container& c, const std::string& prefix = "optim/") const {
        c.set_meta(prefix + "step", std::to_string(step_));
        for (const auto& s : slots_) {
            c.put(prefix + s.param->name + "/m", s.m);
            c.put(prefix + s.param->name + "/v", s.v);
        }
    }

    void load(const Container& c, const std::string& prefix = "optim/") {
        step_ = std::stoll(c.meta_or_throw(prefix + "step"));
        for (auto& s : slots_) {
            s.m = c.get<T>(prefix + s.param->name + "/m");
            s.v = c.get<T>(prefix + s.param->name + "/v");
        }
    }

private:
    struct Slot {
        Parameter<T>* param;
        Tensor<T> m;
        Tensor<T> v;
    };

    ParamStore<T>* params_;
    AdamConfig cfg_;
    std::vector<Slot> slots_;
    std::int64_t step_ = 0;
    std::int64_t skipped_ = 0;
};

}  // namespace idg
