#pragma once

#include <array>
#include <span>
#include <string>
#include <vector>

#include "idg/signal.hpp"
#include "idg/tensor.hpp"

namespace idg {

/// Delay-embedding configuration: columns of height `n` are taken from the
/// signal at starts 0, m, 2m, ... with the final column anchored at L-n so
/// every sample is covered and the transform inverts exactly.
struct EmbeddingParams {
    std::int64_t m = 15;       // skip / time delay between column starts
    std::int64_t n = 64;       // column height (embedding dimension)
    std::int64_t length = 1024;  // signal length L

    /// Number of columns: ceil((L-n)/m), or 1 when L == n.
    std::int64_t q() const;

    /// Column start indices; starts[0]=0, gaps <= n, starts.back() = L-n.
    std::vector<std::int64_t> column_starts() const;

    /// Throws std::invalid_argument if the parameterization is malformed or
    /// leaves part of the signal uncovered.
    void validate() const;
};

struct Pad {
    std::int64_t top = 0, bottom = 0, left = 0, right = 0;
};

/// A delay-embedded multi-channel image together with everything needed to
/// invert it exactly: the embedding parameters, the recorded zero padding,
/// and the channel ordering.
template <typename T>
struct EmbeddedImage {
    Tensor<T> pixels;  // (channels, n + pad.top + pad.bottom, q + pad.left + pad.right)
    Pad pad;
    EmbeddingParams params;
    std::vector<std::string> channel_order;
};

/// How invert_image treats nonzero values inside the recorded padding region.
/// Generated images are not true embeddings, so their padding carries noise;
/// callers that invert generated output use `ignore`.
enum class PadCheck { strict, warn, ignore };

/// How duplicated sample positions are resolved when inverting an arbitrary
/// matrix. `first_column` preserves bit-exact round-trips; `mean` averages
/// every entry covering the sample.
enum class InversionRule { first_column, mean };

/// Arrange a length-L signal into the n x q delay-embedding matrix.
template <typename T>
Tensor<T> embed(std::span<const T> signal, const EmbeddingParams& params);

/// Reconstruct the signal from an n x q matrix. Under `first_column` each
/// sample is read from the lowest-index column covering it, so
/// invert(embed(x)) == x bit-exactly.
template <typename T>
std::vector<T> invert(const Tensor<T>& matrix, const EmbeddingParams& params,
                      InversionRule rule = InversionRule::first_column);

/// Max absolute disagreement between matrix entries that refer to the same
/// sample index; 0 for true embeddings.
template <typename T>
T consistency_check(const Tensor<T>& matrix, const EmbeddingParams& params);

/// Embed each channel of a (C, L) tensor independently and stack, zero-padding
/// bottom/right up to target_h x target_w (pass 0 to keep n x q).
template <typename T>
EmbeddedImage<T> embed_channels(const Tensor<T>& channels, const EmbeddingParams& params,
                                std::int64_t target_h = 0, std::int64_t target_w = 0);

/// Strip padding and invert every channel back to a (C, L) tensor.
template <typename T>
Tensor<T> invert_channels(const EmbeddedImage<T>& image, PadCheck pad_check = PadCheck::strict,
                          InversionRule rule = InversionRule::first_column);

/// SignalWindow-level wrappers used by the pipeline (float precision).
EmbeddedImage<float> embed_window(const SignalWindow& window, const EmbeddingParams& params,
                                  std::int64_t target_h = 0, std::int64_t target_w = 0);
SignalWindow invert_image(const EmbeddedImage<float>& image, PadCheck pad_check = PadCheck::strict,
                          InversionRule rule = InversionRule::first_column);

extern const std::array<const char*, 3> kChannelNames;  // {"x","y","z"}

}  // namespace idg
