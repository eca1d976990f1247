#pragma once

#include <functional>
#include <string>
#include <vector>

#include "idg/rng.hpp"
#include "idg/tape.hpp"
#include "idg/tensor.hpp"

namespace idg::testing {

/// Builds a scalar-loss graph over the given differentiable leaves.
using GraphFn = std::function<int(Tape<double>&, const std::vector<int>&)>;

struct GradCheckResult {
    double max_rel_error = 0.0;
    int probes = 0;
    std::string worst_at;
};

inline double eval_loss(const std::vector<Tensor<double>>& inputs, const GraphFn& fn) {
    Tape<double> tape;
    std::vector<int> ids;
    ids.reserve(inputs.size());
    for (const auto& in : inputs) ids.push_back(tape.leaf(in, true));
    const int loss = fn(tape, ids);
    return tape.value(loss)[0];
}

/// Central-difference comparison against reverse-mode gradients: the
/// independent oracle for every tape primitive. Probes random coordinates
/// of every input tensor.
inline GradCheckResult gradcheck(std::vector<Tensor<double>> inputs, const GraphFn& fn, int probes = 200,
                                 std::uint64_t seed = 31337, double h = 1e-5) {
    Tape<double> tape;
    std::vector<int> ids;
    for (const auto& in : inputs) ids.push_back(tape.leaf(in, true));
    const int loss = fn(tape, ids);
    tape.backward(loss);
    std::vector<Tensor<double>> analytic;
    analytic.reserve(inputs.size());
    for (int id : ids) analytic.push_back(tape.grad(id));

    GradCheckResult result;
    Rng rng(seed);
    std::int64_t total = 0;
    for (const auto& in : inputs) total += in.numel();
    for (int p = 0; p < probes; ++p) {
        std::int64_t flat = rng.uniform_int(total);
        std::size_t which = 0;
        while (flat >= inputs[which].numel()) {
            flat -= inputs[which].numel();
            ++which;
        }
        const double orig = inputs[which][flat];
        inputs[which][flat] = orig + h;
        const double fp = eval_loss(inputs, fn);
        inputs[which][flat] = orig - h;
        const double fm = eval_loss(inputs, fn);
        inputs[which][flat] = orig;

        const double numeric = (fp - fm) / (2.0 * h);
        const double a = analytic[which][flat];
        const double denom = std::max({std::abs(a), std::abs(numeric), 1e-6});
        const double rel = std::abs(a - numeric) / denom;
        if (rel > result.max_rel_error) {
            result.max_rel_error = rel;
            result.worst_at = "input " + std::to_string(which) + "[" + std::to_string(flat) + "] analytic=" +
                              std::to_string(a) + " numeric=" + std::to_string(numeric);
        }
        ++result.probes;
    }
    return result;
}

inline Tensor<double> random_tensor(Rng& rng, Shape shape, double stddev = 1.0) {
    Tensor<double> t(std::move(shape));
    rng.fill_normal(t, 0.0, stddev);
    return t;
}

/// Random tensor with values pushed away from zero (for kinked ops).
inline Tensor<double> random_tensor_no_kink(Rng& rng, Shape shape, double margin = 0.05) {
    Tensor<double> t = random_tensor(rng, std::move(shape));
    for (auto& v : t.values()) {
        if (std::abs(v) < margin) v = v < 0 ? v - margin : v + margin;
    }
    return t;
}

/// Random-weight scalar reduction; gives each output element a distinct
/// adjoint so backward errors cannot cancel.
inline int weighted_sum(Tape<double>& t, int x, std::uint64_t seed = 99) {
    Rng rng(seed);
    Tensor<double> w(t.value(x).shape());
    rng.fill_normal(w);
    const int wid = t.leaf(std::move(w), false);
    return ops::sum(t, ops::mul(t, x, wid));
}

}  // namespace idg::testing
