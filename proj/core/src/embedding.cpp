#include "idg/embedding.hpp"

#include <algorithm>
#include <iostream>
#include <stdexcept>

namespace idg {

const std::array<const char*, 3> kChannelNames = {"x", "y", "z"};

std::int64_t EmbeddingParams::q() const {
    if (length == n) return 1;
    return (length - n + m - 1) / m;  // ceil((L-n)/m)
}

std::vector<std::int64_t> EmbeddingParams::column_starts() const {
    const std::int64_t cols = q();
    std::vector<std::int64_t> starts(static_cast<std::size_t>(cols));
    for (std::int64_t j = 0; j + 1 < cols; ++j) starts[static_cast<std::size_t>(j)] = j * m;
    starts.back() = length - n;
    return starts;
}

void EmbeddingParams::validate() const {
    if (!(1 <= m && m <= n && n <= length)) {
        throw std::invalid_argument("embedding: requires 1 <= m <= n <= L, got m=" + std::to_string(m) +
                                    " n=" + std::to_string(n) + " L=" + std::to_string(length));
    }
    const auto starts = column_starts();
    if (starts.front() != 0) {
        throw std::invalid_argument("embedding: first column start is " + std::to_string(starts.front()) +
                                    ", leaving samples [0," + std::to_string(starts.front()) + ") uncovered");
    }
    for (std::size_t j = 0; j + 1 < starts.size(); ++j) {
        const std::int64_t gap = starts[j + 1] - starts[j];
        if (gap > n) {
            throw std::invalid_argument("embedding: gap " + std::to_string(gap) + " between column starts " +
                                        std::to_string(starts[j]) + " and " + std::to_string(starts[j + 1]) +
                                        " (columns " + std::to_string(j) + "," + std::to_string(j + 1) +
                                        ") exceeds n=" + std::to_string(n));
        }
        if (gap <= 0) {
            throw std::invalid_argument("embedding: column starts not increasing at column " + std::to_string(j));
        }
    }
}

template <typename T>
Tensor<T> embed(std::span<const T> signal, const EmbeddingParams& params) {
    params.validate();
    if (static_cast<std::int64_t>(signal.size()) != params.length) {
        throw std::invalid_argument("embed: signal length " + std::to_string(signal.size()) +
                                    " does not match L=" + std::to_string(params.length));
    }
    const auto starts = params.column_starts();
    const std::int64_t n = params.n;
    const std::int64_t cols = static_cast<std::int64_t>(starts.size());
    Tensor<T> matrix({n, cols});
    T* out = matrix.data();
    for (std::int64_t j = 0; j < cols; ++j) {
        const T* src = signal.data() + starts[static_cast<std::size_t>(j)];
        for (std::int64_t r = 0; r < n; ++r) out[r * cols + j] = src[r];
    }
    return matrix;
}

template <typename T>
std::vector<T> invert(const Tensor<T>& matrix, const EmbeddingParams& params, InversionRule rule) {
    params.validate();
    const std::int64_t cols = params.q();
    if (matrix.rank() != 2 || matrix.dim(0) != params.n || matrix.dim(1) != cols) {
        throw std::invalid_argument("invert: matrix shape " + shape_str(matrix.shape()) +
                                    " does not match embedding " + std::to_string(params.n) + "x" +
                                    std::to_string(cols));
    }
    const auto starts = params.column_starts();
    std::vector<T> signal(static_cast<std::size_t>(params.length), T{0});
    const T* in = matrix.data();
    if (rule == InversionRule::first_column) {
        // Walk columns in order; a sample is written only by the first
        // column covering it, which makes round-trips value-copies.
        std::int64_t next = 0;
        for (std::int64_t j = 0; j < cols; ++j) {
            const std::int64_t s = starts[static_cast<std::size_t>(j)];
            for (std::int64_t k = std::max(next, s); k < s + params.n; ++k) {
                signal[static_cast<std::size_t>(k)] = in[(k - s) * cols + j];
            }
            next = std::max(next, s + params.n);
        }
    } else {
        std::vector<std::int64_t> hits(static_cast<std::size_t>(params.length), 0);
        std::vector<double> acc(static_cast<std::size_t>(params.length), 0.0);
        for (std::int64_t j = 0; j < cols; ++j) {
            const std::int64_t s = starts[static_cast<std::size_t>(j)];
            for (std::int64_t r = 0; r < params.n; ++r) {
                acc[static_cast<std::size_t>(s + r)] += static_cast<double>(in[r * cols + j]);
                ++hits[static_cast<std::size_t>(s + r)];
            }
        }
        for (std::size_t k = 0; k < signal.size(); ++k) {
            signal[k] = static_cast<T>(acc[k] / static_cast<double>(hits[k]));
        }
    }
    return signal;
}

template <typename T>
T consistency_check(const Tensor<T>& matrix, const EmbeddingParams& params) {
    params.validate();
    const std::int64_t cols = params.q();
    if (matrix.rank() != 2 || matrix.dim(0) != params.n || matrix.dim(1) != cols) {
        throw std::invalid_argument("consistency_check: matrix shape " + shape_str(matrix.shape()) +
                                    " does not match embedding");
    }
    const auto starts = params.column_starts();
    const T* in = matrix.data();
    std::vector<T> lo(static_cast<std::size_t>(params.length), T{0});
    std::vector<T> hi(static_cast<std::size_t>(params.length), T{0});
    std::vector<bool> seen(static_cast<std::size_t>(params.length), false);
    for (std::int64_t j = 0; j < cols; ++j) {
        const std::int64_t s = starts[static_cast<std::size_t>(j)];
        for (std::int64_t r = 0; r < params.n; ++r) {
            const auto k = static_cast<std::size_t>(s + r);
            const T v = in[r * cols + j];
            if (!seen[k]) {
                seen[k] = true;
                lo[k] = hi[k] = v;
            } else {
                lo[k] = std::min(lo[k], v);
                hi[k] = std::max(hi[k], v);
            }
        }
    }
    T worst = T{0};
    for (std::size_t k = 0; k < seen.size(); ++k) {
        if (seen[k]) worst = std::max(worst, static_cast<T>(hi[k] - lo[k]));
    }
    return worst;
}

template <typename T>
EmbeddedImage<T> embed_channels(const Tensor<T>& channels, const EmbeddingParams& params,
                                std::int64_t target_h, std::int64_t target_w) {
    if (channels.rank() != 2) {
        throw std::invalid_argument("embed_channels: expected (C, L) tensor, got " + shape_str(channels.shape()));
    }
    const std::int64_t C = channels.dim(0);
    const std::int64_t n = params.n;
    const std::int64_t cols = params.q();
    const std::int64_t H = target_h > 0 ? target_h : n;
    const std::int64_t W = target_w > 0 ? target_w : cols;
    if (H < n || W < cols) {
        throw std::invalid_argument("embed_channels: target " + std::to_string(H) + "x" + std::to_string(W) +
                                    " smaller than embedding " + std::to_string(n) + "x" + std::to_string(cols));
    }

    EmbeddedImage<T> image;
    image.params = params;
    image.pad = Pad{0, H - n, 0, W - cols};
    image.pixels = Tensor<T>({C, H, W});
    for (std::int64_t c = 0; c < C; ++c) {
        if (c < static_cast<std::int64_t>(kChannelNames.size())) {
            image.channel_order.push_back(kChannelNames[static_cast<std::size_t>(c)]);
        } else {
            image.channel_order.push_back("ch" + std::to_string(c));
        }
        std::span<const T> sig(channels.data() + c * params.length, static_cast<std::size_t>(params.length));
        Tensor<T> m = embed(sig, params);
        T* dst = image.pixels.data() + c * H * W;
        const T* src = m.data();
        for (std::int64_t r = 0; r < n; ++r) {
            std::copy(src + r * cols, src + (r + 1) * cols, dst + r * W);
        }
    }
    return image;
}

template <typename T>
Tensor<T> invert_channels(const EmbeddedImage<T>& image, PadCheck pad_check, InversionRule rule) {
    const EmbeddingParams& params = image.params;
    params.validate();
    if (image.pixels.rank() != 3) {
        throw std::invalid_argument("invert_channels: expected (C, H, W) pixels, got " +
                                    shape_str(image.pixels.shape()));
    }
    const std::int64_t C = image.pixels.dim(0);
    const std::int64_t H = image.pixels.dim(1);
    const std::int64_t W = image.pixels.dim(2);
    const std::int64_t cols = params.q();
    if (H != params.n + image.pad.top + image.pad.bottom || W != cols + image.pad.left + image.pad.right) {
        throw std::invalid_argument("invert_channels: pad metadata inconsistent with pixel dims " +
                                    shape_str(image.pixels.shape()) + " (embedding " + std::to_string(params.n) +
                                    "x" + std::to_string(cols) + ")");
    }

    if (pad_check != PadCheck::ignore && (image.pad.top | image.pad.bottom | image.pad.left | image.pad.right)) {
        for (std::int64_t c = 0; c < C; ++c) {
            const T* px = image.pixels.data() + c * H * W;
            for (std::int64_t r = 0; r < H; ++r) {
                const bool row_pad = r < image.pad.top || r >= image.pad.top + params.n;
                for (std::int64_t w = 0; w < W; ++w) {
                    const bool col_pad = w < image.pad.left || w >= image.pad.left + cols;
                    if ((row_pad || col_pad) && px[r * W + w] != T{0}) {
                        const std::string msg = "invert_channels: nonzero value in padding region at channel " +
                                                std::to_string(c) + ", row " + std::to_string(r) + ", col " +
                                                std::to_string(w);
                        if (pad_check == PadCheck::strict) throw std::runtime_error(msg);
                        std::cerr << "warning: " << msg << "\n";
                        goto pad_scan_done;  // one warning is enough
                    }
                }
            }
        }
    }
pad_scan_done:

    Tensor<T> out({C, params.length});
    for (std::int64_t c = 0; c < C; ++c) {
        Tensor<T> m({params.n, cols});
        const T* px = image.pixels.data() + c * H * W;
        T* dst = m.data();
        for (std::int64_t r = 0; r < params.n; ++r) {
            const T* row = px + (r + image.pad.top) * W + image.pad.left;
            std::copy(row, row + cols, dst + r * cols);
        }
        std::vector<T> sig = invert(m, params, rule);
        std::copy(sig.begin(), sig.end(), out.data() + c * params.length);
    }
    return out;
}

EmbeddedImage<float> embed_window(const SignalWindow& window, const EmbeddingParams& params,
                                  std::int64_t target_h, std::int64_t target_w) {
    if (window.channels() != 3 || window.length() != params.length) {
        throw std::invalid_argument("embed_window: window shape " + shape_str(window.samples.shape()) +
                                    " does not match 3x" + std::to_string(params.length));
    }
    return embed_channels(window.samples, params, target_h, target_w);
}

SignalWindow invert_image(const EmbeddedImage<float>& image, PadCheck pad_check, InversionRule rule) {
    SignalWindow w;
    w.samples = invert_channels(image, pad_check, rule);
    return w;
}

template Tensor<float> embed<float>(std::span<const float>, const EmbeddingParams&);
template Tensor<double> embed<double>(std::span<const double>, const EmbeddingParams&);
template std::vector<float> invert<float>(const Tensor<float>&, const EmbeddingParams&, InversionRule);
template std::vector<double> invert<double>(const Tensor<double>&, const EmbeddingParams&, InversionRule);
template float consistency_check<float>(const Tensor<float>&, const EmbeddingParams&);
template double consistency_check<double>(const Tensor<double>&, const EmbeddingParams&);
template EmbeddedImage<float> embed_channels<float>(const Tensor<float>&, const EmbeddingParams&, std::int64_t,
                                                    std::int64_t);
template EmbeddedImage<double> embed_channels<double>(const Tensor<double>&, const EmbeddingParams&, std::int64_t,
                                                      std::int64_t);
template Tensor<float> invert_channels<float>(const EmbeddedImage<float>&, PadCheck, InversionRule);
template Tensor<double> invert_channels<double>(const EmbeddedImage<double>&, PadCheck, InversionRule);

}  // namespace idg
