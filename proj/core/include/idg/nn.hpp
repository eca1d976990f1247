#pragma once

#include <deque>
#include <numeric>
#include <string>

#include "idg/checkpoint.hpp"
#include "idg/tape.hpp"

namespace idg {

enum class Mode { train, eval };

/// Owns a model's named parameters and buffers at stable addresses.
template <typename T>
class ParamStore {
public:
    Parameter<T>& add(const std::string& name, Tensor<T> init, bool trainable = true) {
        if (find(name)) throw std::invalid_argument("params: duplicate name '" + name + "'");
        params_.push_back(Parameter<T>{name, std::move(init), Tensor<T>{}, trainable});
        params_.back().grad = Tensor<T>(params_.back().value.shape());
        return params_.back();
    }

    Parameter<T>* find(const std::string& name) {
        for (auto& p : params_) {
            if (p.name == name) return &p;
        }
        return nullptr;
    }

    auto begin() { return params_.begin(); }
    auto end() { return params_.end(); }
    auto begin() const { return params_.begin(); }
    auto end() const { return params_.end(); }
    std::size_t count() const { return params_.size(); }

    std::int64_t scalar_count(bool trainable_only = true) const {
        std::int64_t n = 0;
        for (const auto& p : params_) {
            if (!trainable_only || p.trainable) n += p.value.numel();
        }
        return n;
    }

    void zero_grads() {
        for (auto& p : params_) p.grad.fill(T{0});
    }

    /// Deep copy of all values (early-stopping snapshots).
    std::vector<Tensor<T>> snapshot_values() const {
        std::vector<Tensor<T>> out;
        out.reserve(params_.size());
        for (const auto& p : params_) out.push_back(p.value);
        return out;
    }

    void restore_values(const std::vector<Tensor<T>>& snap) {
        if (snap.size() != params_.size()) throw std::invalid_argument("params: snapshot size mismatch");
        for (std::size_t i = 0; i < snap.size(); ++i) params_[i].value = snap[i];
    }

    void save(Container& c, const std::string& prefix = "") const {
        for (const auto& p : params_) c.put(prefix + p.name, p.value);
    }

    void load(const Container& c, const std::string& prefix = "") {
        for (auto& p : params_) {
            Tensor<T> v = c.get<T>(prefix + p.name);
            if (!v.same_shape(p.value)) {
                throw std::runtime_error("params: checkpoint shape " + shape_str(v.shape()) + " for '" + p.name +
                                         "' does not match model " + shape_str(p.value.shape()));
            }
            p.value = std::move(v);
        }
    }

private:
    std::deque<Parameter<T>> params_;  // deque keeps addresses stable
};

namespace nn {

/// Fan-in scaled normal init; preserves activation scale through linear maps.
template <typename T>
Tensor<T> init_normal(Shape shape, std::int64_t fan_in, Rng& rng, double gain = 1.0) {
    Tensor<T> t(std::move(shape));
    rng.fill_normal(t, 0.0, gain / std::sqrt(static_cast<double>(fan_in)));
    return t;
}

template <typename T>
struct Linear {
    Parameter<T>* w = nullptr;
    Parameter<T>* b = nullptr;

    Linear() = default;
    Linear(ParamStore<T>& ps, const std::string& name, std::int64_t in, std::int64_t out, Rng& rng,
           bool zero_init = false) {
        Tensor<T> wv = zero_init ? Tensor<T>({out, in}) : init_normal<T>({out, in}, in, rng);
        w = &ps.add(name + "/weight", std::move(wv));
        b = &ps.add(name + "/bias", Tensor<T>({out}));
    }

    int forward(Tape<T>& t, int x) const { return ops::linear(t, x, t.param(*w), t.param(*b)); }
};

template <typename T>
struct Conv2d {
    Parameter<T>* w = nullptr;
    Parameter<T>* b = nullptr;
    std::int64_t stride = 1, pad = 0;

    Conv2d() = default;
    Conv2d(ParamStore<T>& ps, const std::string& name, std::int64_t cin, std::int64_t cout, std::int64_t kernel,
           std::int64_t stride_, std::int64_t pad_, Rng& rng, bool zero_init = false)
        : stride(stride_), pad(pad_) {
        const std::int64_t fan_in = cin * kernel * kernel;
        Tensor<T> wv = zero_init ? Tensor<T>({cout, cin, kernel, kernel})
                                 : init_normal<T>({cout, cin, kernel, kernel}, fan_in, rng);
        w = &ps.add(name + "/weight", std::move(wv));
        b = &ps.add(name + "/bias", Tensor<T>({cout}));
    }

    int forward(Tape<T>& t, int x) const { return ops::conv2d(t, x, t.param(*w), t.param(*b), stride, pad); }
};

template <typename T>
struct Conv1d {
    Parameter<T>* w = nullptr;
    Parameter<T>* b = nullptr;
    std::int64_t stride = 1, pad = 0;

    Conv1d() = default;
    Conv1d(ParamStore<T>& ps, const std::string& name, std::int64_t cin, std::int64_t cout, std::int64_t kernel,
           std::int64_t stride_, std::int64_t pad_, Rng& rng)
        : stride(stride_), pad(pad_) {
        w = &ps.add(name + "/weight", init_normal<T>({cout, cin, kernel}, cin * kernel, rng));
        b = &ps.add(name + "/bias", Tensor<T>({cout}));
    }

    int forward(Tape<T>& t, int x) const { return ops::conv1d(t, x, t.param(*w), t.param(*b), stride, pad); }
};

/// Batch norm layer owning affine parameters and running-stat buffers.
/// Momentum 0.1 and eps 1e-5.
template <typename T>
struct BatchNorm {
    Parameter<T>* gamma = nullptr;
    Parameter<T>* beta = nullptr;
    Parameter<T>* running_mean = nullptr;  // buffers; not trainable
    Parameter<T>* running_var = nullptr;
    T momentum = T{0.1};
    T eps = T{1e-5};

    BatchNorm() = default;
    BatchNorm(ParamStore<T>& ps, const std::string& name, std::int64_t channels) {
        gamma = &ps.add(name + "/gamma", Tensor<T>::full({channels}, T{1}));
        beta = &ps.add(name + "/beta", Tensor<T>({channels}));
        running_mean = &ps.add(name + "/running_mean", Tensor<T>({channels}), false);
        running_var = &ps.add(name + "/running_var", Tensor<T>::full({channels}, T{1}), false);
    }

    int forward(Tape<T>& t, int x, Mode mode) const {
        return ops::batch_norm(t, x, t.param(*gamma), t.param(*beta), running_mean->value, running_var->value,
                               mode == Mode::train, momentum, eps);
    }
};

template <typename T>
struct GroupNorm {
    Parameter<T>* gamma = nullptr;
    Parameter<T>* beta = nullptr;
    std::int64_t groups = 8;
    T eps = T{1e-5};

    GroupNorm() = default;
    GroupNorm(ParamStore<T>& ps, const std::string& name, std::int64_t channels, std::int64_t groups_)
        : groups(std::gcd(groups_, channels)) {
        gamma = &ps.add(name + "/gamma", Tensor<T>::full({channels}, T{1}));
        beta = &ps.add(name + "/beta", Tensor<T>({channels}));
    }

    int forward(Tape<T>& t, int x) const {
        return ops::group_norm(t, x, t.param(*gamma), t.param(*beta), groups, eps);
    }
};

template <typename T>
struct Embedding {
    Parameter<T>* table = nullptr;

    Embedding() = default;
    Embedding(ParamStore<T>& ps, const std::string& name, std::int64_t vocab, std::int64_t dim, Rng& rng,
              double stddev = 0.1) {
        Tensor<T> init({vocab, dim});
        rng.fill_normal(init, 0.0, stddev);
        table = &ps.add(name + "/table", std::move(init));
    }

    int forward(Tape<T>& t, const std::vector<int>& ids) const {
        return ops::embedding_lookup(t, t.param(*table), ids);
    }
};

}  // namespace nn

}  // namespace idg
