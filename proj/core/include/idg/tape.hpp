#pragma once

#include <algorithm>
#include <cstdint>
#include <functional>
#include <limits>
#include <string>
#include <utility>
#include <vector>

#include "idg/gemm.hpp"
#include "idg/rng.hpp"
#include "idg/tensor.hpp"

namespace idg {

/// A named trainable (or buffer) tensor with its gradient accumulator.
template <typename T>
struct Parameter {
    std::string name;
    Tensor<T> value;
    Tensor<T> grad;
    bool trainable = true;
};

/// Define-by-run gradient tape. Forward calls push nodes holding the computed
/// value plus a closure that folds the node's output gradient back into its
/// parents; backward replays the record in reverse creation order, which is
/// a valid reverse topological order by construction. Nodes bound to a
/// Parameter deposit their gradient into it at the end of the sweep.
///
/// Single-threaded per tape; independent tapes may run on separate threads.
template <typename T>
class Tape {
public:
    using BackwardFn = std::function<void(Tape&, int)>;

    bool trap_non_finite = false;

    int leaf(Tensor<T> value, bool needs_grad = false) {
        nodes_.push_back(Node{std::move(value), {}, nullptr, needs_grad, "leaf", nullptr});
        return static_cast<int>(nodes_.size()) - 1;
    }

    int param(Parameter<T>& p) {
        nodes_.push_back(Node{p.value, {}, nullptr, true, "param", &p});
        return static_cast<int>(nodes_.size()) - 1;
    }

    int push(const char* op, Tensor<T> value, std::vector<int> parents, BackwardFn backward) {
        bool needs = false;
        for (int pid : parents) needs = needs || nodes_[static_cast<std::size_t>(pid)].needs_grad;
        if (trap_non_finite && !value.all_finite()) {
            throw std::runtime_error(std::string("non-finite values in output of '") + op + "'");
        }
        nodes_.push_back(Node{std::move(value), std::move(parents), std::move(backward), needs, op, nullptr});
        return static_cast<int>(nodes_.size()) - 1;
    }

    const Tensor<T>& value(int id) const { return nodes_[static_cast<std::size_t>(id)].value; }

    /// Gradient accumulator for a node; allocated as zeros on first touch.
    Tensor<T>& grad(int id) {
        auto& g = grads_[static_cast<std::size_t>(id)];
        if (g.empty()) g = Tensor<T>(nodes_[static_cast<std::size_t>(id)].value.shape());
        return g;
    }

    bool has_grad(int id) const {
        return static_cast<std::size_t>(id) < grads_.size() && !grads_[static_cast<std::size_t>(id)].empty();
    }

    bool needs_grad(int id) const { return nodes_[static_cast<std::size_t>(id)].needs_grad; }

    /// Reverse sweep from a scalar node. Parameter gradients accumulate, so
    /// callers zero them between optimizer steps.
    void backward(int loss_id) {
        if (value(loss_id).numel() != 1) {
            throw std::invalid_argument("backward: loss must be scalar, got " +
                                        shape_str(value(loss_id).shape()));
        }
        grads_.assign(nodes_.size(), Tensor<T>{});
        grad(loss_id)[0] = T{1};
        for (int i = loss_id; i >= 0; --i) {
            auto& node = nodes_[static_cast<std::size_t>(i)];
            if (!node.needs_grad || !has_grad(i)) continue;
            if (node.backward) node.backward(*this, i);
        }
        for (std::size_t i = 0; i < nodes_.size(); ++i) {
            auto& node = nodes_[i];
            if (node.bound && has_grad(static_cast<int>(i))) {
                auto& dst = node.bound->grad.values();
                const auto& src = grads_[i].values();
                for (std::size_t k = 0; k < dst.size(); ++k) dst[k] += src[k];
            }
        }
    }

    std::size_t size() const { return nodes_.size(); }
    const char* op_name(int id) const { return nodes_[static_cast<std::size_t>(id)].op; }

private:
    struct Node {
        Tensor<T> value;
        std::vector<int> parents;
        BackwardFn backward;
        bool needs_grad;
        const char* op;
        Parameter<T>* bound;
    };

    std::vector<Node> nodes_;
    std::vector<Tensor<T>> grads_;
};

namespace ops {

namespace detail_ops {

template <typename T>
void accumulate(Tensor<T>& dst, const Tensor<T>& src) {
    auto& d = dst.values();
    const auto& s = src.values();
    for (std::size_t i = 0; i < d.size(); ++i) d[i] += s[i];
}

template <typename T>
void check_same_shape(const char* op, const Tensor<T>& a, const Tensor<T>& b) {
    if (!a.same_shape(b)) {
        throw std::invalid_argument(std::string(op) + ": shape mismatch " + shape_str(a.shape()) + " vs " +
                                    shape_str(b.shape()));
    }
}

inline std::int64_t conv_out_dim(std::int64_t in, std::int64_t kernel, std::int64_t stride, std::int64_t pad) {
    return (in + 2 * pad - kernel) / stride + 1;
}

/// im2col for one sample: x (Cin,H,W) -> cols (Cin*kh*kw, Ho*Wo).
template <typename T>
void im2col(const T* x, std::int64_t Cin, std::int64_t H, std::int64_t W, std::int64_t kh, std::int64_t kw,
            std::int64_t stride, std::int64_t pad, std::int64_t Ho, std::int64_t Wo, T* cols) {
    const std::int64_t P = Ho * Wo;
    for (std::int64_t c = 0; c < Cin; ++c) {
        for (std::int64_t u = 0; u < kh; ++u) {
            for (std::int64_t v = 0; v < kw; ++v) {
                T* row = cols + ((c * kh + u) * kw + v) * P;
                for (std::int64_t oh = 0; oh < Ho; ++oh) {
                    const std::int64_t ih = oh * stride - pad + u;
                    T* dst = row + oh * Wo;
                    if (ih < 0 || ih >= H) {
                        for (std::int64_t ow = 0; ow < Wo; ++ow) dst[ow] = T{0};
                        continue;
                    }
                    const T* src = x + (c * H + ih) * W;
                    for (std::int64_t ow = 0; ow < Wo; ++ow) {
                        const std::int64_t iw = ow * stride - pad + v;
                        dst[ow] = (iw >= 0 && iw < W) ? src[iw] : T{0};
                    }
                }
            }
        }
    }
}

/// Scatter-add of cols back onto one sample's input gradient.
template <typename T>
void col2im_add(const T* cols, std::int64_t Cin, std::int64_t H, std::int64_t W, std::int64_t kh, std::int64_t kw,
                std::int64_t stride, std::int64_t pad, std::int64_t Ho, std::int64_t Wo, T* gx) {
    const std::int64_t P = Ho * Wo;
    for (std::int64_t c = 0; c < Cin; ++c) {
        for (std::int64_t u = 0; u < kh; ++u) {
            for (std::int64_t v = 0; v < kw; ++v) {
                const T* row = cols + ((c * kh + u) * kw + v) * P;
                for (std::int64_t oh = 0; oh < Ho; ++oh) {
                    const std::int64_t ih = oh * stride - pad + u;
                    if (ih < 0 || ih >= H) continue;
                    T* dst = gx + (c * H + ih) * W;
                    const T* src = row + oh * Wo;
                    for (std::int64_t ow = 0; ow < Wo; ++ow) {
                        const std::int64_t iw = ow * stride - pad + v;
                        if (iw >= 0 && iw < W) dst[iw] += src[ow];
                    }
                }
            }
        }
    }
}

}  // namespace detail_ops

template <typename T>
int add(Tape<T>& t, int a, int b) {
    detail_ops::check_same_shape("add", t.value(a), t.value(b));
    Tensor<T> out(t.value(a).shape());
    const auto& av = t.value(a).values();
    const auto& bv = t.value(b).values();
    for (std::size_t i = 0; i < av.size(); ++i) out[static_cast<std::int64_t>(i)] = av[i] + bv[i];
    return t.push("add", std::move(out), {a, b}, [a, b](Tape<T>& tp, int self) {
        const auto& go = tp.grad(self);
        if (tp.needs_grad(a)) detail_ops::accumulate(tp.grad(a), go);
        if (tp.needs_grad(b)) detail_ops::accumulate(tp.grad(b), go);
    });
}

template <typename T>
int sub(Tape<T>& t, int a, int b) {
    detail_ops::check_same_shape("sub", t.value(a), t.value(b));
    Tensor<T> out(t.value(a).shape());
    const auto& av = t.value(a).values();
    const auto& bv = t.value(b).values();
    for (std::size_t i = 0; i < av.size(); ++i) out[static_cast<std::int64_t>(i)] = av[i] - bv[i];
    return t.push("sub", std::move(out), {a, b}, [a, b](Tape<T>& tp, int self) {
        const auto& go = tp.grad(self);
        if (tp.needs_grad(a)) detail_ops::accumulate(tp.grad(a), go);
        if (tp.needs_grad(b)) {
            auto& gb = tp.grad(b).values();
            const auto& g = go.values();
            for (std::size_t i = 0; i < gb.size(); ++i) gb[i] -= g[i];
        }
    });
}

template <typename T>
int mul(Tape<T>& t, int a, int b) {
    detail_ops::check_same_shape("mul", t.value(a), t.value(b));
    Tensor<T> out(t.value(a).shape());
    const auto& av = t.value(a).values();
    const auto& bv = t.value(b).values();
    for (std::size_t i = 0; i < av.size(); ++i) out[static_cast<std::int64_t>(i)] = av[i] * bv[i];
    return t.push("mul", std::move(out), {a, b}, [a, b](Tape<T>& tp, int self) {
        const auto& go = tp.grad(self).values();
        const auto& av = tp.value(a).values();
        const auto& bv = tp.value(b).values();
        if (tp.needs_grad(a)) {
            auto& ga = tp.grad(a).values();
            for (std::size_t i = 0; i < ga.size(); ++i) ga[i] += go[i] * bv[i];
        }
        if (tp.needs_grad(b)) {
            auto& gb = tp.grad(b).values();
            for (std::size_t i = 0; i < gb.size(); ++i) gb[i] += go[i] * av[i];
        }
    });
}

template <typename T>
int scale(Tape<T>& t, int a, T factor) {
    Tensor<T> out(t.value(a).shape());
    const auto& av = t.value(a).values();
    for (std::size_t i = 0; i < av.size(); ++i) out[static_cast<std::int64_t>(i)] = av[i] * factor;
    return t.push("scale", std::move(out), {a}, [a, factor](Tape<T>& tp, int self) {
        const auto& go = tp.grad(self).values();
        auto& ga = tp.grad(a).values();
        for (std::size_t i = 0; i < ga.size(); ++i) ga[i] += go[i] * factor;
    });
}

/// Multiply each sample slice x[i, ...] by weights[i]; the weights are
/// constants (per-sample loss weighting, EDM coefficients).
template <typename T>
int sample_scale(Tape<T>& t, int x, std::vector<T> weights) {
    const auto& xv = t.value(x);
    if (xv.rank() < 1 || xv.dim(0) != static_cast<std::int64_t>(weights.size())) {
        throw std::invalid_argument("sample_scale: weight count " + std::to_string(weights.size()) +
                                    " does not match leading dim of " + shape_str(xv.shape()));
    }
    const std::int64_t N = xv.dim(0);
    const std::int64_t S = xv.numel() / N;
    Tensor<T> out(xv.shape());
    for (std::int64_t n = 0; n < N; ++n) {
        const T w = weights[static_cast<std::size_t>(n)];
        for (std::int64_t s = 0; s < S; ++s) out[n * S + s] = xv[n * S + s] * w;
    }
    return t.push("sample_scale", std::move(out), {x},
                  [x, w = std::move(weights), N, S](Tape<T>& tp, int self) {
                      const auto& go = tp.grad(self);
                      auto& gx = tp.grad(x);
                      for (std::int64_t n = 0; n < N; ++n) {
                          const T wn = w[static_cast<std::size_t>(n)];
                          for (std::int64_t s = 0; s < S; ++s) gx[n * S + s] += go[n * S + s] * wn;
                      }
                  });
}

/// x (N, C, spatial...) plus per-sample per-channel bias e (N, C).
template <typename T>
int add_channel_bias(Tape<T>& t, int x, int e) {
    const auto& xv = t.value(x);
    const auto& ev = t.value(e);
    if (xv.rank() < 2 || ev.rank() != 2 || xv.dim(0) != ev.dim(0) || xv.dim(1) != ev.dim(1)) {
        throw std::invalid_argument("add_channel_bias: incompatible shapes " + shape_str(xv.shape()) + " and " +
                                    shape_str(ev.shape()));
    }
    const std::int64_t N = xv.dim(0), C = xv.dim(1);
    const std::int64_t S = xv.numel() / (N * C);
    Tensor<T> out(xv.shape());
    for (std::int64_t n = 0; n < N; ++n) {
        for (std::int64_t c = 0; c < C; ++c) {
            const T b = ev[n * C + c];
            const std::int64_t base = (n * C + c) * S;
            for (std::int64_t s = 0; s < S; ++s) out[base + s] = xv[base + s] + b;
        }
    }
    return t.push("add_channel_bias", std::move(out), {x, e}, [x, e, N, C, S](Tape<T>& tp, int self) {
        const auto& go = tp.grad(self);
        if (tp.needs_grad(x)) detail_ops::accumulate(tp.grad(x), go);
        if (tp.needs_grad(e)) {
            auto& ge = tp.grad(e);
            for (std::int64_t n = 0; n < N; ++n) {
                for (std::int64_t c = 0; c < C; ++c) {
                    T acc{0};
                    const std::int64_t base = (n * C + c) * S;
                    for (std::int64_t s = 0; s < S; ++s) acc += go[base + s];
                    ge[n * C + c] += acc;
                }
            }
        }
    });
}

template <typename T>
int sum(Tape<T>& t, int a) {
    T acc{0};
    for (T v : t.value(a).values()) acc += v;
    return t.push("sum", Tensor<T>::scalar(acc), {a}, [a](Tape<T>& tp, int self) {
        const T g = tp.grad(self)[0];
        auto& ga = tp.grad(a).values();
        for (auto& v : ga) v += g;
    });
}

template <typename T>
int mean(Tape<T>& t, int a) {
    const std::int64_t n = t.value(a).numel();
    T acc{0};
    for (T v : t.value(a).values()) acc += v;
    acc /= static_cast<T>(n);
    return t.push("mean", Tensor<T>::scalar(acc), {a}, [a, n](Tape<T>& tp, int self) {
        const T g = tp.grad(self)[0] / static_cast<T>(n);
        auto& ga = tp.grad(a).values();
        for (auto& v : ga) v += g;
    });
}

template <typename T>
int reshape(Tape<T>& t, int a, Shape shape) {
    Tensor<T> out = t.value(a).reshaped(std::move(shape));
    return t.push("reshape", std::move(out), {a}, [a](Tape<T>& tp, int self) {
        const auto& go = tp.grad(self).values();
        auto& ga = tp.grad(a).values();
        for (std::size_t i = 0; i < ga.size(); ++i) ga[i] += go[i];
    });
}

template <typename T>
int relu(Tape<T>& t, int a) {
    Tensor<T> out(t.value(a).shape());
    const auto& av = t.value(a).values();
    for (std::size_t i = 0; i < av.size(); ++i) out[static_cast<std::int64_t>(i)] = av[i] > T{0} ? av[i] : T{0};
    return t.push("relu", std::move(out), {a}, [a](Tape<T>& tp, int self) {
        const auto& go = tp.grad(self).values();
        const auto& av = tp.value(a).values();
        auto& ga = tp.grad(a).values();
        for (std::size_t i = 0; i < ga.size(); ++i) {
            if (av[i] > T{0}) ga[i] += go[i];
        }
    });
}

template <typename T>
int silu(Tape<T>& t, int a) {
    Tensor<T> out(t.value(a).shape());
    const auto& av = t.value(a).values();
    for (std::size_t i = 0; i < av.size(); ++i) {
        const T s = T{1} / (T{1} + std::exp(-av[i]));
        out[static_cast<std::int64_t>(i)] = av[i] * s;
    }
    return t.push("silu", std::move(out), {a}, [a](Tape<T>& tp, int self) {
        const auto& go = tp.grad(self).values();
        const auto& av = tp.value(a).values();
        auto& ga = tp.grad(a).values();
        for (std::size_t i = 0; i < ga.size(); ++i) {
            const T s = T{1} / (T{1} + std::exp(-av[i]));
            ga[i] += go[i] * s * (T{1} + av[i] * (T{1} - s));
        }
    });
}

/// x (N, Fin) . w^T (Fin, Fout) + b; pass b = -1 for no bias.
template <typename T>
int linear(Tape<T>& t, int x, int w, int b) {
    const auto& xv = t.value(x);
    const auto& wv = t.value(w);
    if (xv.rank() != 2 || wv.rank() != 2 || xv.dim(1) != wv.dim(1)) {
        throw std::invalid_argument("linear: x " + shape_str(xv.shape()) + " incompatible with w " +
                                    shape_str(wv.shape()));
    }
    const std::int64_t N = xv.dim(0), Fin = xv.dim(1), Fout = wv.dim(0);
    Tensor<T> out({N, Fout});
    detail::mm_nt(N, Fout, Fin, xv.data(), wv.data(), out.data(), false);
    if (b >= 0) {
        const auto& bv = t.value(b);
        if (bv.numel() != Fout) {
            throw std::invalid_argument("linear: bias " + shape_str(bv.shape()) + " does not match Fout=" +
                                        std::to_string(Fout));
        }
        for (std::int64_t n = 0; n < N; ++n) {
            for (std::int64_t f = 0; f < Fout; ++f) out[n * Fout + f] += bv[f];
        }
    }
    std::vector<int> parents = b >= 0 ? std::vector<int>{x, w, b} : std::vector<int>{x, w};
    return t.push("linear", std::move(out), std::move(parents), [x, w, b, N, Fin, Fout](Tape<T>& tp, int self) {
        const auto& go = tp.grad(self);
        if (tp.needs_grad(x)) {
            detail::mm_nn(N, Fin, Fout, go.data(), tp.value(w).data(), tp.grad(x).data(), true);
        }
        if (tp.needs_grad(w)) {
            detail::mm_tn(Fout, Fin, N, go.data(), tp.value(x).data(), tp.grad(w).data(), true);
        }
        if (b >= 0 && tp.needs_grad(b)) {
            auto& gb = tp.grad(b);
            for (std::int64_t n = 0; n < N; ++n) {
                for (std::int64_t f = 0; f < Fout; ++f) gb[f] += go[n * Fout + f];
            }
        }
    });
}

/// 2D convolution: x (N,Cin,H,W), w (Cout,Cin,kh,kw), zero padding, square
/// stride. Forward and backward run through im2col + GEMM; tests check the
/// result against the direct-loop oracle.
template <typename T>
int conv2d(Tape<T>& t, int x, int w, int b, std::int64_t stride = 1, std::int64_t pad = 0) {
    const auto& xv = t.value(x);
    const auto& wv = t.value(w);
    if (xv.rank() != 4 || wv.rank() != 4 || xv.dim(1) != wv.dim(1)) {
        throw std::invalid_argument("conv2d: x " + shape_str(xv.shape()) + " incompatible with w " +
                                    shape_str(wv.shape()));
    }
    const std::int64_t N = xv.dim(0), Cin = xv.dim(1), H = xv.dim(2), W = xv.dim(3);
    const std::int64_t Cout = wv.dim(0), kh = wv.dim(2), kw = wv.dim(3);
    const std::int64_t Ho = detail_ops::conv_out_dim(H, kh, stride, pad);
    const std::int64_t Wo = detail_ops::conv_out_dim(W, kw, stride, pad);
    if (Ho <= 0 || Wo <= 0) {
        throw std::invalid_argument("conv2d: kernel " + shape_str(wv.shape()) + " too large for input " +
                                    shape_str(xv.shape()));
    }
    const std::int64_t CKK = Cin * kh * kw, P = Ho * Wo;

    Tensor<T> out({N, Cout, Ho, Wo});
    {
        std::vector<T> cols(static_cast<std::size_t>(CKK * P));
        for (std::int64_t n = 0; n < N; ++n) {
            detail_ops::im2col(xv.data() + n * Cin * H * W, Cin, H, W, kh, kw, stride, pad, Ho, Wo, cols.data());
            detail::mm_nn(Cout, P, CKK, wv.data(), cols.data(), out.data() + n * Cout * P, false);
        }
    }
    if (b >= 0) {
        const auto& bv = t.value(b);
        if (bv.numel() != Cout) {
            throw std::invalid_argument("conv2d: bias " + shape_str(bv.shape()) + " does not match Cout=" +
                                        std::to_string(Cout));
        }
        for (std::int64_t n = 0; n < N; ++n) {
            for (std::int64_t c = 0; c < Cout; ++c) {
                T* dst = out.data() + (n * Cout + c) * P;
                const T bias = bv[c];
                for (std::int64_t p = 0; p < P; ++p) dst[p] += bias;
            }
        }
    }

    std::vector<int> parents = b >= 0 ? std::vector<int>{x, w, b} : std::vector<int>{x, w};
    return t.push("conv2d", std::move(out), std::move(parents),
                  [x, w, b, N, Cin, H, W, Cout, kh, kw, stride, pad, Ho, Wo, CKK, P](Tape<T>& tp, int self) {
                      const auto& go = tp.grad(self);
                      const bool need_x = tp.needs_grad(x);
                      const bool need_w = tp.needs_grad(w);
                      std::vector<T> cols(static_cast<std::size_t>(CKK * P));
                      std::vector<T> dcols(need_x ? static_cast<std::size_t>(CKK * P) : 0);
                      for (std::int64_t n = 0; n < N; ++n) {
                          const T* gon = go.data() + n * Cout * P;
                          if (need_w) {
                              detail_ops::im2col(tp.value(x).data() + n * Cin * H * W, Cin, H, W, kh, kw, stride,
                                                 pad, Ho, Wo, cols.data());
                              detail::mm_nt(Cout, CKK, P, gon, cols.data(), tp.grad(w).data(), true);
                          }
                          if (need_x) {
                              detail::mm_tn(CKK, P, Cout, tp.value(w).data(), gon, dcols.data(), false);
                              detail_ops::col2im_add(dcols.data(), Cin, H, W, kh, kw, stride, pad, Ho, Wo,
                                                     tp.grad(x).data() + n * Cin * H * W);
                          }
                      }
                      if (b >= 0 && tp.needs_grad(b)) {
                          auto& gb = tp.grad(b);
                          for (std::int64_t n = 0; n < N; ++n) {
                              for (std::int64_t c = 0; c < Cout; ++c) {
                                  const T* src = go.data() + (n * Cout + c) * P;
                                  T acc{0};
                                  for (std::int64_t p = 0; p < P; ++p) acc += src[p];
                                  gb[c] += acc;
                              }
                          }
                      }
                  });
}

/// 1D convolution: x (N,Cin,L), w (Cout,Cin,k). Implemented as conv2d with
/// height 1 would hide shape errors, so it gets its own direct kernels.
template <typename T>
int conv1d(Tape<T>& t, int x, int w, int b, std::int64_t stride = 1, std::int64_t pad = 0) {
    const auto& xv = t.value(x);
    const auto& wv = t.value(w);
    if (xv.rank() != 3 || wv.rank() != 3 || xv.dim(1) != wv.dim(1)) {
        throw std::invalid_argument("conv1d: x " + shape_str(xv.shape()) + " incompatible with w " +
                                    shape_str(wv.shape()));
    }
    const std::int64_t N = xv.dim(0), Cin = xv.dim(1), L = xv.dim(2);
    const std::int64_t Cout = wv.dim(0), k = wv.dim(2);
    const std::int64_t Lo = detail_ops::conv_out_dim(L, k, stride, pad);
    if (Lo <= 0) {
        throw std::invalid_argument("conv1d: kernel " + shape_str(wv.shape()) + " too large for input " +
                                    shape_str(xv.shape()));
    }
    const std::int64_t CK = Cin * k;

    auto im2col1d = [Cin, L, k, stride, pad, Lo](const T* xs, T* cols) {
        for (std::int64_t c = 0; c < Cin; ++c) {
            for (std::int64_t u = 0; u < k; ++u) {
                T* row = cols + (c * k + u) * Lo;
                const T* src = xs + c * L;
                for (std::int64_t o = 0; o < Lo; ++o) {
                    const std::int64_t i = o * stride - pad + u;
                    row[o] = (i >= 0 && i < L) ? src[i] : T{0};
                }
            }
        }
    };

    Tensor<T> out({N, Cout, Lo});
    {
        std::vector<T> cols(static_cast<std::size_t>(CK * Lo));
        for (std::int64_t n = 0; n < N; ++n) {
            im2col1d(xv.data() + n * Cin * L, cols.data());
            detail::mm_nn(Cout, Lo, CK, wv.data(), cols.data(), out.data() + n * Cout * Lo, false);
        }
    }
    if (b >= 0) {
        const auto& bv = t.value(b);
        if (bv.numel() != Cout) {
            throw std::invalid_argument("conv1d: bias " + shape_str(bv.shape()) + " does not match Cout=" +
                                        std::to_string(Cout));
        }
        for (std::int64_t n = 0; n < N; ++n) {
            for (std::int64_t c = 0; c < Cout; ++c) {
                T* dst = out.data() + (n * Cout + c) * Lo;
                for (std::int64_t o = 0; o < Lo; ++o) dst[o] += bv[c];
            }
        }
    }

    std::vector<int> parents = b >= 0 ? std::vector<int>{x, w, b} : std::vector<int>{x, w};
    return t.push("conv1d", std::move(out), std::move(parents),
                  [x, w, b, N, Cin, L, Cout, k, stride, pad, Lo, CK, im2col1d](Tape<T>& tp, int self) {
                      const auto& go = tp.grad(self);
                      const bool need_x = tp.needs_grad(x);
                      const bool need_w = tp.needs_grad(w);
                      std::vector<T> cols(static_cast<std::size_t>(CK * Lo));
                      std::vector<T> dcols(need_x ? static_cast<std::size_t>(CK * Lo) : 0);
                      for (std::int64_t n = 0; n < N; ++n) {
                          const T* gon = go.data() + n * Cout * Lo;
                          if (need_w) {
                              im2col1d(tp.value(x).data() + n * Cin * L, cols.data());
                              detail::mm_nt(Cout, CK, Lo, gon, cols.data(), tp.grad(w).data(), true);
                          }
                          if (need_x) {
                              detail::mm_tn(CK, Lo, Cout, tp.value(w).data(), gon, dcols.data(), false);
                              T* gx = tp.grad(x).data() + n * Cin * L;
                              for (std::int64_t c = 0; c < Cin; ++c) {
                                  for (std::int64_t u = 0; u < k; ++u) {
                                      const T* row = dcols.data() + (c * k + u) * Lo;
                                      for (std::int64_t o = 0; o < Lo; ++o) {
                                          const std::int64_t i = o * stride - pad + u;
                                          if (i >= 0 && i < L) gx[c * L + i] += row[o];
                                      }
                                  }
                              }
                          }
                      }
                      if (b >= 0 && tp.needs_grad(b)) {
                          auto& gb = tp.grad(b);
                          for (std::int64_t n = 0; n < N; ++n) {
                              for (std::int64_t c = 0; c < Cout; ++c) {
                                  const T* src = go.data() + (n * Cout + c) * Lo;
                                  T acc{0};
                                  for (std::int64_t o = 0; o < Lo; ++o) acc += src[o];
                                  gb[c] += acc;
                              }
                          }
                      }
                  });
}

/// Non-overlapping max pooling, kernel == stride. Input extents must divide.
template <typename T>
int maxpool2d(Tape<T>& t, int x, std::int64_t k) {
    const auto& xv = t.value(x);
    if (xv.rank() != 4) throw std::invalid_argument("maxpool2d: expected (N,C,H,W), got " + shape_str(xv.shape()));
    const std::int64_t N = xv.dim(0), C = xv.dim(1), H = xv.dim(2), W = xv.dim(3);
    if (H % k || W % k) {
        throw std::invalid_argument("maxpool2d: input " + shape_str(xv.shape()) + " not divisible by pool " +
                                    std::to_string(k));
    }
    const std::int64_t Ho = H / k, Wo = W / k;
    Tensor<T> out({N, C, Ho, Wo});
    std::vector<std::int64_t> argmax(static_cast<std::size_t>(out.numel()));
    for (std::int64_t nc = 0; nc < N * C; ++nc) {
        const T* src = xv.data() + nc * H * W;
        T* dst = out.data() + nc * Ho * Wo;
        std::int64_t* am = argmax.data() + nc * Ho * Wo;
        for (std::int64_t oh = 0; oh < Ho; ++oh) {
            for (std::int64_t ow = 0; ow < Wo; ++ow) {
                std::int64_t best = (oh * k) * W + ow * k;
                T bv = src[best];
                for (std::int64_t u = 0; u < k; ++u) {
                    for (std::int64_t v = 0; v < k; ++v) {
                        const std::int64_t idx = (oh * k + u) * W + ow * k + v;
                        if (src[idx] > bv) {
                            bv = src[idx];
                            best = idx;
                        }
                    }
                }
                dst[oh * Wo + ow] = bv;
                am[oh * Wo + ow] = nc * H * W + best;
            }
        }
    }
    return t.push("maxpool2d", std::move(out), {x}, [x, argmax = std::move(argmax)](Tape<T>& tp, int self) {
        const auto& go = tp.grad(self);
        auto& gx = tp.grad(x);
        for (std::size_t i = 0; i < argmax.size(); ++i) gx[argmax[i]] += go[static_cast<std::int64_t>(i)];
    });
}

template <typename T>
int maxpool1d(Tape<T>& t, int x, std::int64_t k) {
    const auto& xv = t.value(x);
    if (xv.rank() != 3) throw std::invalid_argument("maxpool1d: expected (N,C,L), got " + shape_str(xv.shape()));
    const std::int64_t N = xv.dim(0), C = xv.dim(1), L = xv.dim(2);
    if (L % k) {
        throw std::invalid_argument("maxpool1d: input " + shape_str(xv.shape()) + " not divisible by pool " +
                                    std::to_string(k));
    }
    const std::int64_t Lo = L / k;
    Tensor<T> out({N, C, Lo});
    std::vector<std::int64_t> argmax(static_cast<std::size_t>(out.numel()));
    for (std::int64_t nc = 0; nc < N * C; ++nc) {
        const T* src = xv.data() + nc * L;
        T* dst = out.data() + nc * Lo;
        std::int64_t* am = argmax.data() + nc * Lo;
        for (std::int64_t o = 0; o < Lo; ++o) {
            std::int64_t best = o * k;
            T bv = src[best];
            for (std::int64_t u = 1; u < k; ++u) {
                if (src[o * k + u] > bv) {
                    bv = src[o * k + u];
                    best = o * k + u;
                }
            }
            dst[o] = bv;
            am[o] = nc * L + best;
        }
    }
    return t.push("maxpool1d", std::move(out), {x}, [x, argmax = std::move(argmax)](Tape<T>& tp, int self) {
        const auto& go = tp.grad(self);
        auto& gx = tp.grad(x);
        for (std::size_t i = 0; i < argmax.size(); ++i) gx[argmax[i]] += go[static_cast<std::int64_t>(i)];
    });
}

namespace detail_ops {
/// PyTorch-style adaptive bins: [floor(i*in/out), ceil((i+1)*in/out)).
inline std::pair<std::int64_t, std::int64_t> adaptive_bin(std::int64_t i, std::int64_t in, std::int64_t out) {
    const std::int64_t lo = (i * in) / out;
    const std::int64_t hi = ((i + 1) * in + out - 1) / out;
    return {lo, hi};
}
}  // namespace detail_ops

template <typename T>
int adaptive_avg_pool2d(Tape<T>& t, int x, std::int64_t oh, std::int64_t ow) {
    const auto& xv = t.value(x);
    if (xv.rank() != 4)
        throw std::invalid_argument("adaptive_avg_pool2d: expected (N,C,H,W), got " + shape_str(xv.shape()));
    const std::int64_t N = xv.dim(0), C = xv.dim(1), H = xv.dim(2), W = xv.dim(3);
    Tensor<T> out({N, C, oh, ow});
    for (std::int64_t nc = 0; nc < N * C; ++nc) {
        const T* src = xv.data() + nc * H * W;
        T* dst = out.data() + nc * oh * ow;
        for (std::int64_t i = 0; i < oh; ++i) {
            auto [h0, h1] = detail_ops::adaptive_bin(i, H, oh);
            for (std::int64_t j = 0; j < ow; ++j) {
                auto [w0, w1] = detail_ops::adaptive_bin(j, W, ow);
                T acc{0};
                for (std::int64_t hh = h0; hh < h1; ++hh) {
                    for (std::int64_t wwi = w0; wwi < w1; ++wwi) acc += src[hh * W + wwi];
                }
                dst[i * ow + j] = acc / static_cast<T>((h1 - h0) * (w1 - w0));
            }
        }
    }
    return t.push("adaptive_avg_pool2d", std::move(out), {x}, [x, N, C, H, W, oh, ow](Tape<T>& tp, int self) {
        const auto& go = tp.grad(self);
        auto& gx = tp.grad(x);
        for (std::int64_t nc = 0; nc < N * C; ++nc) {
            const T* gsrc = go.data() + nc * oh * ow;
            T* gdst = gx.data() + nc * H * W;
            for (std::int64_t i = 0; i < oh; ++i) {
                auto [h0, h1] = detail_ops::adaptive_bin(i, H, oh);
                for (std::int64_t j = 0; j < ow; ++j) {
                    auto [w0, w1] = detail_ops::adaptive_bin(j, W, ow);
                    const T g = gsrc[i * ow + j] / static_cast<T>((h1 - h0) * (w1 - w0));
                    for (std::int64_t hh = h0; hh < h1; ++hh) {
                        for (std::int64_t wwi = w0; wwi < w1; ++wwi) gdst[hh * W + wwi] += g;
                    }
                }
            }
        }
    });
}

template <typename T>
int adaptive_avg_pool1d(Tape<T>& t, int x, std::int64_t ol) {
    const auto& xv = t.value(x);
    if (xv.rank() != 3)
        throw std::invalid_argument("adaptive_avg_pool1d: expected (N,C,L), got " + shape_str(xv.shape()));
    const std::int64_t N = xv.dim(0), C = xv.dim(1), L = xv.dim(2);
    Tensor<T> out({N, C, ol});
    for (std::int64_t nc = 0; nc < N * C; ++nc) {
        const T* src = xv.data() + nc * L;
        T* dst = out.data() + nc * ol;
        for (std::int64_t i = 0; i < ol; ++i) {
            auto [l0, l1] = detail_ops::adaptive_bin(i, L, ol);
            T acc{0};
            for (std::int64_t p = l0; p < l1; ++p) acc += src[p];
            dst[i] = acc / static_cast<T>(l1 - l0);
        }
    }
    return t.push("adaptive_avg_pool1d", std::move(out), {x}, [x, N, C, L, ol](Tape<T>& tp, int self) {
        const auto& go = tp.grad(self);
        auto& gx = tp.grad(x);
        for (std::int64_t nc = 0; nc < N * C; ++nc) {
            const T* gsrc = go.data() + nc * ol;
            T* gdst = gx.data() + nc * L;
            for (std::int64_t i = 0; i < ol; ++i) {
                auto [l0, l1] = detail_ops::adaptive_bin(i, L, ol);
                const T g = gsrc[i] / static_cast<T>(l1 - l0);
                for (std::int64_t p = l0; p < l1; ++p) gdst[p] += g;
            }
        }
    });
}

template <typename T>
int upsample_nearest2d(Tape<T>& t, int x, std::int64_t factor) {
    const auto& xv = t.value(x);
    if (xv.rank() != 4)
        throw std::invalid_argument("upsample_nearest2d: expected (N,C,H,W), got " + shape_str(xv.shape()));
    const std::int64_t N = xv.dim(0), C = xv.dim(1), H = xv.dim(2), W = xv.dim(3);
    const std::int64_t Ho = H * factor, Wo = W * factor;
    Tensor<T> out({N, C, Ho, Wo});
    for (std::int64_t nc = 0; nc < N * C; ++nc) {
        const T* src = xv.data() + nc * H * W;
        T* dst = out.data() + nc * Ho * Wo;
        for (std::int64_t oh = 0; oh < Ho; ++oh) {
            const T* srow = src + (oh / factor) * W;
            T* drow = dst + oh * Wo;
            for (std::int64_t ow = 0; ow < Wo; ++ow) drow[ow] = srow[ow / factor];
        }
    }
    return t.push("upsample_nearest2d", std::move(out), {x}, [x, N, C, H, W, factor](Tape<T>& tp, int self) {
        const auto& go = tp.grad(self);
        auto& gx = tp.grad(x);
        const std::int64_t Ho = H * factor, Wo = W * factor;
        for (std::int64_t nc = 0; nc < N * C; ++nc) {
            const T* gsrc = go.data() + nc * Ho * Wo;
            T* gdst = gx.data() + nc * H * W;
            for (std::int64_t oh = 0; oh < Ho; ++oh) {
                T* drow = gdst + (oh / factor) * W;
                const T* srow = gsrc + oh * Wo;
                for (std::int64_t ow = 0; ow < Wo; ++ow) drow[ow / factor] += srow[ow];
            }
        }
    });
}

/// Batch normalization over channel axis 1 for (N,C,...) inputs. In train
/// mode normalizes with batch statistics and updates the running buffers
/// (biased variance normalizes, unbiased feeds the running estimate); eval
/// mode uses the frozen running statistics.
template <typename T>
int batch_norm(Tape<T>& t, int x, int gamma, int beta, Tensor<T>& running_mean, Tensor<T>& running_var,
               bool train, T momentum = T{0.1}, T eps = T{1e-5}) {
    const auto& xv = t.value(x);
    if (xv.rank() < 2) throw std::invalid_argument("batch_norm: expected (N,C,...), got " + shape_str(xv.shape()));
    const std::int64_t N = xv.dim(0), C = xv.dim(1);
    const std::int64_t S = xv.numel() / (N * C);
    const std::int64_t R = N * S;  // reduction count per channel
    if (t.value(gamma).numel() != C || t.value(beta).numel() != C || running_mean.numel() != C ||
        running_var.numel() != C) {
        throw std::invalid_argument("batch_norm: parameter size does not match C=" + std::to_string(C));
    }

    std::vector<T> mean_c(static_cast<std::size_t>(C)), inv_c(static_cast<std::size_t>(C));
    if (train) {
        for (std::int64_t c = 0; c < C; ++c) {
            T m{0};
            for (std::int64_t n = 0; n < N; ++n) {
                const T* src = xv.data() + (n * C + c) * S;
                for (std::int64_t s = 0; s < S; ++s) m += src[s];
            }
            m /= static_cast<T>(R);
            T v{0};
            for (std::int64_t n = 0; n < N; ++n) {
                const T* src = xv.data() + (n * C + c) * S;
                for (std::int64_t s = 0; s < S; ++s) {
                    const T d = src[s] - m;
                    v += d * d;
                }
            }
            v /= static_cast<T>(R);
            mean_c[static_cast<std::size_t>(c)] = m;
            inv_c[static_cast<std::size_t>(c)] = T{1} / std::sqrt(v + eps);
            const T unbiased = R > 1 ? v * static_cast<T>(R) / static_cast<T>(R - 1) : v;
            running_mean[c] = (T{1} - momentum) * running_mean[c] + momentum * m;
            running_var[c] = (T{1} - momentum) * running_var[c] + momentum * unbiased;
        }
    } else {
        for (std::int64_t c = 0; c < C; ++c) {
            mean_c[static_cast<std::size_t>(c)] = running_mean[c];
            inv_c[static_cast<std::size_t>(c)] = T{1} / std::sqrt(running_var[c] + eps);
        }
    }

    Tensor<T> xhat(xv.shape());
    Tensor<T> out(xv.shape());
    const auto& gv = t.value(gamma);
    const auto& bv = t.value(beta);
    for (std::int64_t n = 0; n < N; ++n) {
        for (std::int64_t c = 0; c < C; ++c) {
            const T m = mean_c[static_cast<std::size_t>(c)], inv = inv_c[static_cast<std::size_t>(c)];
            const T g = gv[c], be = bv[c];
            const std::int64_t base = (n * C + c) * S;
            for (std::int64_t s = 0; s < S; ++s) {
                const T xh = (xv[base + s] - m) * inv;
                xhat[base + s] = xh;
                out[base + s] = g * xh + be;
            }
        }
    }

    return t.push("batch_norm", std::move(out), {x, gamma, beta},
                  [x, gamma, beta, N, C, S, R, train, xhat = std::move(xhat),
                   inv_c = std::move(inv_c)](Tape<T>& tp, int self) {
                      const auto& go = tp.grad(self);
                      const auto& gv = tp.value(gamma);
                      for (std::int64_t c = 0; c < C; ++c) {
                          T sum_go{0}, sum_goxh{0};
                          for (std::int64_t n = 0; n < N; ++n) {
                              const std::int64_t base = (n * C + c) * S;
                              for (std::int64_t s = 0; s < S; ++s) {
                                  sum_go += go[base + s];
                                  sum_goxh += go[base + s] * xhat[base + s];
                              }
                          }
                          if (tp.needs_grad(beta)) tp.grad(beta)[c] += sum_go;
                          if (tp.needs_grad(gamma)) tp.grad(gamma)[c] += sum_goxh;
                          if (tp.needs_grad(x)) {
                              auto& gx = tp.grad(x);
                              const T ginv = gv[c] * inv_c[static_cast<std::size_t>(c)];
                              if (train) {
                                  const T mean_go = sum_go / static_cast<T>(R);
                                  const T mean_goxh = sum_goxh / static_cast<T>(R);
                                  for (std::int64_t n = 0; n < N; ++n) {
                                      const std::int64_t base = (n * C + c) * S;
                                      for (std::int64_t s = 0; s < S; ++s) {
                                          gx[base + s] +=
                                              ginv * (go[base + s] - mean_go - xhat[base + s] * mean_goxh);
                                      }
                                  }
                              } else {
                                  for (std::int64_t n = 0; n < N; ++n) {
                                      const std::int64_t base = (n * C + c) * S;
                                      for (std::int64_t s = 0; s < S; ++s) gx[base + s] += ginv * go[base + s];
                                  }
                              }
                          }
                      }
                  });
}

/// Group normalization for (N,C,...) inputs; per-sample per-group statistics.
template <typename T>
int group_norm(Tape<T>& t, int x, int gamma, int beta, std::int64_t groups, T eps = T{1e-5}) {
    const auto& xv = t.value(x);
    if (xv.rank() < 2) throw std::invalid_argument("group_norm: expected (N,C,...), got " + shape_str(xv.shape()));
    const std::int64_t N = xv.dim(0), C = xv.dim(1);
    const std::int64_t S = xv.numel() / (N * C);
    if (groups <= 0 || C % groups) {
        throw std::invalid_argument("group_norm: C=" + std::to_string(C) + " not divisible by groups=" +
                                    std::to_string(groups));
    }
    if (t.value(gamma).numel() != C || t.value(beta).numel() != C) {
        throw std::invalid_argument("group_norm: parameter size does not match C=" + std::to_string(C));
    }
    const std::int64_t CG = C / groups;   // channels per group
    const std::int64_t GS = CG * S;       // elements per (sample, group)

    Tensor<T> xhat(xv.shape());
    Tensor<T> out(xv.shape());
    std::vector<T> inv_ng(static_cast<std::size_t>(N * groups));
    const auto& gv = t.value(gamma);
    const auto& bv = t.value(beta);
    for (std::int64_t n = 0; n < N; ++n) {
        for (std::int64_t g = 0; g < groups; ++g) {
            const std::int64_t base = (n * C + g * CG) * S;
            T m{0};
            for (std::int64_t i = 0; i < GS; ++i) m += xv[base + i];
            m /= static_cast<T>(GS);
            T v{0};
            for (std::int64_t i = 0; i < GS; ++i) {
                const T d = xv[base + i] - m;
                v += d * d;
            }
            v /= static_cast<T>(GS);
            const T inv = T{1} / std::sqrt(v + eps);
            inv_ng[static_cast<std::size_t>(n * groups + g)] = inv;
            for (std::int64_t cc = 0; cc < CG; ++cc) {
                const std::int64_t c = g * CG + cc;
                const std::int64_t cb = (n * C + c) * S;
                for (std::int64_t s = 0; s < S; ++s) {
                    const T xh = (xv[cb + s] - m) * inv;
                    xhat[cb + s] = xh;
                    out[cb + s] = gv[c] * xh + bv[c];
                }
            }
        }
    }

    return t.push("group_norm", std::move(out), {x, gamma, beta},
                  [x, gamma, beta, N, C, S, groups, CG, GS, xhat = std::move(xhat),
                   inv_ng = std::move(inv_ng)](Tape<T>& tp, int self) {
                      const auto& go = tp.grad(self);
                      const auto& gv = tp.value(gamma);
                      if (tp.needs_grad(gamma) || tp.needs_grad(beta)) {
                          for (std::int64_t c = 0; c < C; ++c) {
                              T sg{0}, sb{0};
                              for (std::int64_t n = 0; n < N; ++n) {
                                  const std::int64_t base = (n * C + c) * S;
                                  for (std::int64_t s = 0; s < S; ++s) {
                                      sg += go[base + s] * xhat[base + s];
                                      sb += go[base + s];
                                  }
                              }
                              if (tp.needs_grad(gamma)) tp.grad(gamma)[c] += sg;
                              if (tp.needs_grad(beta)) tp.grad(beta)[c] += sb;
                          }
                      }
                      if (!tp.needs_grad(x)) return;
                      auto& gx = tp.grad(x);
                      for (std::int64_t n = 0; n < N; ++n) {
                          for (std::int64_t g = 0; g < groups; ++g) {
                              const T inv = inv_ng[static_cast<std::size_t>(n * groups + g)];
                              // h = go * gamma (per channel); then the usual
                              // normalization backward within the group.
                              T mean_h{0}, mean_hxh{0};
                              for (std::int64_t cc = 0; cc < CG; ++cc) {
                                  const std::int64_t c = g * CG + cc;
                                  const std::int64_t cb = (n * C + c) * S;
                                  for (std::int64_t s = 0; s < S; ++s) {
                                      const T h = go[cb + s] * gv[c];
                                      mean_h += h;
                                      mean_hxh += h * xhat[cb + s];
                                  }
                              }
                              mean_h /= static_cast<T>(GS);
                              mean_hxh /= static_cast<T>(GS);
                              for (std::int64_t cc = 0; cc < CG; ++cc) {
                                  const std::int64_t c = g * CG + cc;
                                  const std::int64_t cb = (n * C + c) * S;
                                  for (std::int64_t s = 0; s < S; ++s) {
                                      const T h = go[cb + s] * gv[c];
                                      gx[cb + s] += inv * (h - mean_h - xhat[cb + s] * mean_hxh);
                                  }
                              }
                          }
                      }
                  });
}

/// Inverted dropout; identity in eval mode.
template <typename T>
int dropout(Tape<T>& t, int x, double p, bool train, Rng& rng) {
    if (p < 0.0 || p >= 1.0) throw std::invalid_argument("dropout: p must be in [0,1)");
    if (!train || p == 0.0) {
        Tensor<T> out = t.value(x);
        return t.push("dropout", std::move(out), {x}, [x](Tape<T>& tp, int self) {
            detail_ops::accumulate(tp.grad(x), tp.grad(self));
        });
    }
    const auto& xv = t.value(x);
    std::vector<std::uint8_t> mask(static_cast<std::size_t>(xv.numel()));
    const T inv_keep = static_cast<T>(1.0 / (1.0 - p));
    Tensor<T> out(xv.shape());
    for (std::size_t i = 0; i < mask.size(); ++i) {
        mask[i] = rng.uniform() >= p ? 1 : 0;
        out[static_cast<std::int64_t>(i)] = mask[i] ? xv[static_cast<std::int64_t>(i)] * inv_keep : T{0};
    }
    return t.push("dropout", std::move(out), {x}, [x, mask = std::move(mask), inv_keep](Tape<T>& tp, int self) {
        const auto& go = tp.grad(self);
        auto& gx = tp.grad(x);
        for (std::size_t i = 0; i < mask.size(); ++i) {
            if (mask[i]) gx[static_cast<std::int64_t>(i)] += go[static_cast<std::int64_t>(i)] * inv_keep;
        }
    });
}

/// Softmax over the last axis.
template <typename T>
int softmax(Tape<T>& t, int x) {
    const auto& xv = t.value(x);
    if (xv.rank() < 1) throw std::invalid_argument("softmax: scalar input");
    const std::int64_t C = xv.dim(xv.rank() - 1);
    const std::int64_t Rows = xv.numel() / C;
    Tensor<T> out(xv.shape());
    for (std::int64_t r = 0; r < Rows; ++r) {
        const T* src = xv.data() + r * C;
        T* dst = out.data() + r * C;
        T mx = src[0];
        for (std::int64_t c = 1; c < C; ++c) mx = std::max(mx, src[c]);
        T z{0};
        for (std::int64_t c = 0; c < C; ++c) {
            dst[c] = std::exp(src[c] - mx);
            z += dst[c];
        }
        for (std::int64_t c = 0; c < C; ++c) dst[c] /= z;
    }
    return t.push("softmax", std::move(out), {x}, [x, C, Rows](Tape<T>& tp, int self) {
        const auto& go = tp.grad(self);
        const auto& y = tp.value(self);
        auto& gx = tp.grad(x);
        for (std::int64_t r = 0; r < Rows; ++r) {
            const T* gr = go.data() + r * C;
            const T* yr = y.data() + r * C;
            T dot{0};
            for (std::int64_t c = 0; c < C; ++c) dot += gr[c] * yr[c];
            T* gxr = gx.data() + r * C;
            for (std::int64_t c = 0; c < C; ++c) gxr[c] += (gr[c] - dot) * yr[c];
        }
    });
}

/// Mean cross-entropy over the batch from raw logits (N,C).
template <typename T>
int cross_entropy(Tape<T>& t, int logits, const std::vector<int>& labels) {
    const auto& lv = t.value(logits);
    if (lv.rank() != 2) throw std::invalid_argument("cross_entropy: expected (N,C) logits");
    const std::int64_t N = lv.dim(0), C = lv.dim(1);
    if (static_cast<std::int64_t>(labels.size()) != N)
        throw std::invalid_argument("cross_entropy: label count mismatch");
    Tensor<T> probs({N, C});
    T loss{0};
    for (std::int64_t n = 0; n < N; ++n) {
        const int lbl = labels[static_cast<std::size_t>(n)];
        if (lbl < 0 || lbl >= C) throw std::invalid_argument("cross_entropy: label out of range");
        const T* src = lv.data() + n * C;
        T* dst = probs.data() + n * C;
        T mx = src[0];
        for (std::int64_t c = 1; c < C; ++c) mx = std::max(mx, src[c]);
        T z{0};
        for (std::int64_t c = 0; c < C; ++c) {
            dst[c] = std::exp(src[c] - mx);
            z += dst[c];
        }
        for (std::int64_t c = 0; c < C; ++c) dst[c] /= z;
        loss -= std::log(std::max(dst[lbl], std::numeric_limits<T>::min()));
    }
    loss /= static_cast<T>(N);
    return t.push("cross_entropy", Tensor<T>::scalar(loss), {logits},
                  [logits, labels, probs = std::move(probs), N, C](Tape<T>& tp, int self) {
                      const T g = tp.grad(self)[0] / static_cast<T>(N);
                      auto& gl = tp.grad(logits);
                      for (std::int64_t n = 0; n < N; ++n) {
                          const int lbl = labels[static_cast<std::size_t>(n)];
                          for (std::int64_t c = 0; c < C; ++c) {
                              T d = probs[n * C + c];
                              if (c == lbl) d -= T{1};
                              gl[n * C + c] += g * d;
                          }
                      }
                  });
}

/// Concatenate along the channel axis (axis 1).
template <typename T>
int concat_channels(Tape<T>& t, int a, int b) {
    const auto& av = t.value(a);
    const auto& bv = t.value(b);
    if (av.rank() != bv.rank() || av.rank() < 2 || av.dim(0) != bv.dim(0)) {
        throw std::invalid_argument("concat: incompatible shapes " + shape_str(av.shape()) + " and " +
                                    shape_str(bv.shape()));
    }
    for (int d = 2; d < av.rank(); ++d) {
        if (av.dim(d) != bv.dim(d)) {
            throw std::invalid_argument("concat: incompatible shapes " + shape_str(av.shape()) + " and " +
                                        shape_str(bv.shape()));
        }
    }
    const std::int64_t N = av.dim(0), Ca = av.dim(1), Cb = bv.dim(1);
    const std::int64_t S = av.numel() / (N * Ca);
    Shape oshape = av.shape();
    oshape[1] = Ca + Cb;
    Tensor<T> out(oshape);
    for (std::int64_t n = 0; n < N; ++n) {
        std::copy(av.data() + n * Ca * S, av.data() + (n + 1) * Ca * S, out.data() + n * (Ca + Cb) * S);
        std::copy(bv.data() + n * Cb * S, bv.data() + (n + 1) * Cb * S, out.data() + n * (Ca + Cb) * S + Ca * S);
    }
    return t.push("concat", std::move(out), {a, b}, [a, b, N, Ca, Cb, S](Tape<T>& tp, int self) {
        const auto& go = tp.grad(self);
        if (tp.needs_grad(a)) {
            auto& ga = tp.grad(a);
            for (std::int64_t n = 0; n < N; ++n) {
                const T* src = go.data() + n * (Ca + Cb) * S;
                T* dst = ga.data() + n * Ca * S;
                for (std::int64_t i = 0; i < Ca * S; ++i) dst[i] += src[i];
            }
        }
        if (tp.needs_grad(b)) {
            auto& gb = tp.grad(b);
            for (std::int64_t n = 0; n < N; ++n) {
                const T* src = go.data() + n * (Ca + Cb) * S + Ca * S;
                T* dst = gb.data() + n * Cb * S;
                for (std::int64_t i = 0; i < Cb * S; ++i) dst[i] += src[i];
            }
        }
    });
}

/// Row lookup: table (V,D), ids (N) -> (N,D). Gradient scatter-adds rows.
template <typename T>
int embedding_lookup(Tape<T>& t, int table, const std::vector<int>& ids) {
    const auto& tv = t.value(table);
    if (tv.rank() != 2) throw std::invalid_argument("embedding_lookup: expected (V,D) table");
    const std::int64_t V = tv.dim(0), D = tv.dim(1);
    const std::int64_t N = static_cast<std::int64_t>(ids.size());
    Tensor<T> out({N, D});
    for (std::int64_t n = 0; n < N; ++n) {
        const int id = ids[static_cast<std::size_t>(n)];
        if (id < 0 || id >= V) {
            throw std::invalid_argument("embedding_lookup: id " + std::to_string(id) + " outside table of " +
                                        std::to_string(V));
        }
        std::copy(tv.data() + id * D, tv.data() + (id + 1) * D, out.data() + n * D);
    }
    return t.push("embedding_lookup", std::move(out), {table}, [table, ids, N, D](Tape<T>& tp, int self) {
        const auto& go = tp.grad(self);
        auto& gt = tp.grad(table);
        for (std::int64_t n = 0; n < N; ++n) {
            const int id = ids[static_cast<std::size_t>(n)];
            for (std::int64_t d = 0; d < D; ++d) gt[id * D + d] += go[n * D + d];
        }
    });
}

/// Scaled dot-product self-attention over flattened spatial positions.
/// q, k, v are (N, C, P); attention weights are softmax rows of q^T k / sqrt(C).
template <typename T>
int attention(Tape<T>& t, int q, int k, int v) {
    const auto& qv = t.value(q);
    detail_ops::check_same_shape("attention", qv, t.value(k));
    detail_ops::check_same_shape("attention", qv, t.value(v));
    if (qv.rank() != 3) throw std::invalid_argument("attention: expected (N,C,P), got " + shape_str(qv.shape()));
    const std::int64_t N = qv.dim(0), C = qv.dim(1), P = qv.dim(2);
    const T scale_f = static_cast<T>(1.0 / std::sqrt(static_cast<double>(C)));

    Tensor<T> weights({N, P, P});
    Tensor<T> out({N, C, P});
    for (std::int64_t n = 0; n < N; ++n) {
        const T* qn = qv.data() + n * C * P;
        const T* kn = t.value(k).data() + n * C * P;
        const T* vn = t.value(v).data() + n * C * P;
        T* an = weights.data() + n * P * P;
        detail::mm_tn(P, P, C, qn, kn, an, false);
        for (std::int64_t i = 0; i < P; ++i) {
            T* row = an + i * P;
            T mx = row[0] * scale_f;
            for (std::int64_t j = 0; j < P; ++j) {
                row[j] *= scale_f;
                mx = std::max(mx, row[j]);
            }
            T z{0};
            for (std::int64_t j = 0; j < P; ++j) {
                row[j] = std::exp(row[j] - mx);
                z += row[j];
            }
            for (std::int64_t j = 0; j < P; ++j) row[j] /= z;
        }
        detail::mm_nt(C, P, P, vn, an, out.data() + n * C * P, false);
    }

    return t.push("attention", std::move(out), {q, k, v},
                  [q, k, v, N, C, P, scale_f, weights = std::move(weights)](Tape<T>& tp, int self) {
                      const auto& go = tp.grad(self);
                      std::vector<T> dA(static_cast<std::size_t>(P * P));
                      std::vector<T> dS(static_cast<std::size_t>(P * P));
                      for (std::int64_t n = 0; n < N; ++n) {
                          const T* gon = go.data() + n * C * P;
                          const T* an = weights.data() + n * P * P;
                          // dV = dY . A
                          if (tp.needs_grad(v)) {
                              detail::mm_nn(C, P, P, gon, an, tp.grad(v).data() + n * C * P, true);
                          }
                          if (!(tp.needs_grad(q) || tp.needs_grad(k))) continue;
                          // dA = dY^T . V, then softmax backward row-wise -> dS
                          detail::mm_tn(P, P, C, gon, tp.value(v).data() + n * C * P, dA.data(), false);
                          for (std::int64_t i = 0; i < P; ++i) {
                              const T* arow = an + i * P;
                              const T* darow = dA.data() + i * P;
                              T dot{0};
                              for (std::int64_t j = 0; j < P; ++j) dot += darow[j] * arow[j];
                              T* dsrow = dS.data() + i * P;
                              for (std::int64_t j = 0; j < P; ++j) dsrow[j] = (darow[j] - dot) * arow[j] * scale_f;
                          }
                          if (tp.needs_grad(q)) {
                              detail::mm_nt(C, P, P, tp.value(k).data() + n * C * P, dS.data(),
                                            tp.grad(q).data() + n * C * P, true);
                          }
                          if (tp.needs_grad(k)) {
                              detail::mm_nn(C, P, P, tp.value(q).data() + n * C * P, dS.data(),
                                            tp.grad(k).data() + n * C * P, true);
                          }
                      }
                  });
}

}  // namespace ops

}  // namespace idg
