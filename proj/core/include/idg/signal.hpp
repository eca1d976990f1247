#pragma once

#include <array>
#include <string>

#include "idg/tensor.hpp"

namespace idg {

enum class Source { real, synthetic };

inline const char* source_name(Source s) { return s == Source::real ? "real" : "synthetic"; }

/// One fixed-length tri-axial specific-force segment. `samples` is (3, L).
/// `normalized` records whether channel statistics have been applied, so a
/// consumer can tell raw m/s^2 values from standardized ones.
struct SignalWindow {
    Tensor<float> samples;
    int label = 0;
    Source source = Source::real;
    std::string provenance;
    bool normalized = false;

    std::int64_t length() const { return samples.rank() == 2 ? samples.dim(1) : 0; }
    std::int64_t channels() const { return samples.rank() == 2 ? samples.dim(0) : 0; }
};

}  // namespace idg
