#pragma once

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <string>
#include <vector>

#include "mgic/errors.hpp"
#include "mgic/tape.hpp"
#include "mgic/tensor.hpp"

#ifdef _OPENMP
#include <omp.h>
#endif

namespace mgic::ops {

// ---------------------------------------------------------------------------
// Small GEMM kernels (row-major, accumulate into C). Serial by design: all
// parallelism lives at the convolution group/chunk level so results do not
// depend on thread count.
// ---------------------------------------------------------------------------

template <typename T>
void gemm_nn(std::int64_t M, std::int64_t K, std::int64_t N, const T* A, const T* B, T* C) {
    for (std::int64_t i = 0; i < M; ++i) {
        T* c = C + i * N;
        const T* a = A + i * K;
        for (std::int64_t k = 0; k < K; ++k) {
            const T av = a[k];
            const T* b = B + k * N;
            for (std::int64_t j = 0; j < N; ++j) c[j] += av * b[j];
        }
    }
}

// C += A * B^T, A is M x K, B is N x K.
template <typename T>
void gemm_nt(std::int64_t M, std::int64_t K, std::int64_t N, const T* A, const T* B, T* C) {
    for (std::int64_t i = 0; i < M; ++i) {
        const T* a = A + i * K;
        T* c = C + i * N;
        for (std::int64_t j = 0; j < N; ++j) {
            const T* b = B + j * K;
            T s = 0;
            for (std::int64_t k = 0; k < K; ++k) s += a[k] * b[k];
            c[j] += s;
        }
    }
}

// C += A^T * B, A is K x M, B is K x N.
template <typename T>
void gemm_tn(std::int64_t M, std::int64_t K, std::int64_t N, const T* A, const T* B, T* C) {
    for (std::int64_t k = 0; k < K; ++k) {
        const T* a = A + k * M;
        const T* b = B + k * N;
        for (std::int64_t i = 0; i < M; ++i) {
            const T av = a[i];
            T* c = C + i * N;
            for (std::int64_t j = 0; j < N; ++j) c[j] += av * b[j];
        }
    }
}

// Leading-dimension variants operating on sub-matrices in place.
template <typename T>
void gemm_nn_ld(std::int64_t M, std::int64_t K, std::int64_t N, const T* A, std::int64_t lda,
                const T* B, std::int64_t ldb, T* C, std::int64_t ldc) {
    for (std::int64_t i = 0; i < M; ++i) {
        T* c = C + i * ldc;
        const T* a = A + i * lda;
        for (std::int64_t k = 0; k < K; ++k) {
            const T av = a[k];
            const T* b = B + k * ldb;
            for (std::int64_t j = 0; j < N; ++j) c[j] += av * b[j];
        }
    }
}

template <typename T>
void gemm_tn_ld(std::int64_t M, std::int64_t K, std::int64_t N, const T* A, std::int64_t lda,
                const T* B, std::int64_t ldb, T* C, std::int64_t ldc) {
    for (std::int64_t k = 0; k < K; ++k) {
        const T* a = A + k * lda;
        const T* b = B + k * ldb;
        for (std::int64_t i = 0; i < M; ++i) {
            const T av = a[i];
            T* c = C + i * ldc;
            for (std::int64_t j = 0; j < N; ++j) c[j] += av * b[j];
        }
    }
}

// ---------------------------------------------------------------------------
// Node recording helper.
// ---------------------------------------------------------------------------

template <typename T>
Tensor<T> record_op(Tape<T>& tape, std::string op, std::vector<Tensor<T>> inputs, Tensor<T> out,
                    std::function<void(Tape<T>&, const typename Tape<T>::Node&)> backward,
                    std::function<std::vector<T>(const std::vector<const std::vector<T>*>&)> replay) {
    typename Tape<T>::Node n;
    n.op = std::move(op);
    bool any_grad = false;
    for (auto& in : inputs) {
        n.inputs.push_back(in.node);
        any_grad = any_grad || in.requires_grad;
    }
    out.requires_grad = any_grad;
    n.output = out;
    n.backward = std::move(backward);
    n.replay = std::move(replay);
    NodeId id = tape.record(std::move(n));
    out.node = id;
    return out;
}

// ---------------------------------------------------------------------------
// Elementwise arithmetic.
// ---------------------------------------------------------------------------

namespace detail {

template <typename T>
void check_same_shape(const Tensor<T>& a, const Tensor<T>& b, const char* op) {
    if (!a.same_shape(b)) {
        throw DimensionError(std::string(op) + ": shape mismatch " + shape_str(a.shape()) +
                             " vs " + shape_str(b.shape()));
    }
}

}  // namespace detail

template <typename T>
Tensor<T> add(Tape<T>& tape, const Tensor<T>& a_, const Tensor<T>& b_) {
    Tensor<T> a = tape.adopt(a_), b = tape.adopt(b_);
    detail::check_same_shape(a, b, "add");
    Tensor<T> out(a.shape());
    const T* pa = a.data();
    const T* pb = b.data();
    T* po = out.mutable_data();
    for (std::int64_t i = 0; i < a.numel(); ++i) po[i] = pa[i] + pb[i];
    return record_op<T>(
        tape, "add", {a, b}, out,
        [a, b](Tape<T>& t, const typename Tape<T>::Node& n) {
            const auto& g = t.grad(n.output.node);
            if (a.requires_grad) t.add_grad(n.inputs[0], g.data(), a.numel());
            if (b.requires_grad) t.add_grad(n.inputs[1], g.data(), b.numel());
        },
        [](const std::vector<const std::vector<T>*>& in) {
            std::vector<T> r(in[0]->size());
            for (std::size_t i = 0; i < r.size(); ++i) r[i] = (*in[0])[i] + (*in[1])[i];
            return r;
        });
}

template <typename T>
Tensor<T> sub(Tape<T>& tape, const Tensor<T>& a_, const Tensor<T>& b_) {
    Tensor<T> a = tape.adopt(a_), b = tape.adopt(b_);
    detail::check_same_shape(a, b, "sub");
    Tensor<T> out(a.shape());
    const T* pa = a.data();
    const T* pb = b.data();
    T* po = out.mutable_data();
    for (std::int64_t i = 0; i < a.numel(); ++i) po[i] = pa[i] - pb[i];
    return record_op<T>(
        tape, "sub", {a, b}, out,
        [a, b](Tape<T>& t, const typename Tape<T>::Node& n) {
            const auto& g = t.grad(n.output.node);
            if (a.requires_grad) t.add_grad(n.inputs[0], g.data(), a.numel());
            if (b.requires_grad) {
                std::vector<T> neg(g.size());
                for (std::size_t i = 0; i < g.size(); ++i) neg[i] = -g[i];
                t.add_grad(n.inputs[1], neg.data(), b.numel());
            }
        },
        [](const std::vector<const std::vector<T>*>& in) {
            std::vector<T> r(in[0]->size());
            for (std::size_t i = 0; i < r.size(); ++i) r[i] = (*in[0])[i] - (*in[1])[i];
            return r;
        });
}

template <typename T>
Tensor<T> mul(Tape<T>& tape, const Tensor<T>& a_, const Tensor<T>& b_) {
    Tensor<T> a = tape.adopt(a_), b = tape.adopt(b_);
    detail::check_same_shape(a, b, "mul");
    Tensor<T> out(a.shape());
    const T* pa = a.data();
    const T* pb = b.data();
    T* po = out.mutable_data();
    for (std::int64_t i = 0; i < a.numel(); ++i) po[i] = pa[i] * pb[i];
    return record_op<T>(
        tape, "mul", {a, b}, out,
        [a, b](Tape<T>& t, const typename Tape<T>::Node& n) {
            const auto& g = t.grad(n.output.node);
            std::vector<T> buf(g.size());
            if (a.requires_grad) {
                const T* pb2 = b.data();
                for (std::size_t i = 0; i < g.size(); ++i) buf[i] = g[i] * pb2[i];
                t.add_grad(n.inputs[0], buf.data(), a.numel());
            }
            if (b.requires_grad) {
                const T* pa2 = a.data();
                for (std::size_t i = 0; i < g.size(); ++i) buf[i] = g[i] * pa2[i];
                t.add_grad(n.inputs[1], buf.data(), b.numel());
            }
        },
        [](const std::vector<const std::vector<T>*>& in) {
            std::vector<T> r(in[0]->size());
            for (std::size_t i = 0; i < r.size(); ++i) r[i] = (*in[0])[i] * (*in[1])[i];
            return r;
        });
}

template <typename T>
Tensor<T> scale(Tape<T>& tape, const Tensor<T>& a_, double k) {
    Tensor<T> a = tape.adopt(a_);
    Tensor<T> out(a.shape());
    const T* pa = a.data();
    T* po = out.mutable_data();
    const T kk = static_cast<T>(k);
    for (std::int64_t i = 0; i < a.numel(); ++i) po[i] = pa[i] * kk;
    return record_op<T>(
        tape, "scale", {a}, out,
        [a, kk](Tape<T>& t, const typename Tape<T>::Node& n) {
            if (!a.requires_grad) return;
            const auto& g = t.grad(n.output.node);
            std::vector<T> buf(g.size());
            for (std::size_t i = 0; i < g.size(); ++i) buf[i] = g[i] * kk;
            t.add_grad(n.inputs[0], buf.data(), a.numel());
        },
        [kk](const std::vector<const std::vector<T>*>& in) {
            std::vector<T> r(in[0]->size());
            for (std::size_t i = 0; i < r.size(); ++i) r[i] = (*in[0])[i] * kk;
            return r;
        });
}

template <typename T>
Tensor<T> relu(Tape<T>& tape, const Tensor<T>& x_) {
    Tensor<T> x = tape.adopt(x_);
    Tensor<T> out(x.shape());
    const T* px = x.data();
    T* po = out.mutable_data();
    for (std::int64_t i = 0; i < x.numel(); ++i) po[i] = px[i] > T(0) ? px[i] : T(0);
    return record_op<T>(
        tape, "relu", {x}, out,
        [x](Tape<T>& t, const typename Tape<T>::Node& n) {
            if (!x.requires_grad) return;
            const auto& g = t.grad(n.output.node);
            const T* px2 = x.data();
            std::vector<T> buf(g.size());
            // subgradient at 0 is 0
            for (std::size_t i = 0; i < g.size(); ++i) buf[i] = px2[i] > T(0) ? g[i] : T(0);
            t.add_grad(n.inputs[0], buf.data(), x.numel());
        },
        [](const std::vector<const std::vector<T>*>& in) {
            std::vector<T> r(in[0]->size());
            for (std::size_t i = 0; i < r.size(); ++i) r[i] = (*in[0])[i] > T(0) ? (*in[0])[i] : T(0);
            return r;
        });
}

template <typename T>
Tensor<T> reshape(Tape<T>& tape, const Tensor<T>& x_, std::vector<std::int64_t> shape) {
    Tensor<T> x = tape.adopt(x_);
    Tensor<T> out = x.clone().reshaped(std::move(shape));
    return record_op<T>(
        tape, "reshape", {x}, out,
        [x](Tape<T>& t, const typename Tape<T>::Node& n) {
            if (!x.requires_grad) return;
            const auto& g = t.grad(n.output.node);
            t.add_grad(n.inputs[0], g.data(), x.numel());
        },
        [](const std::vector<const std::vector<T>*>& in) { return *in[0]; });
}

// ---------------------------------------------------------------------------
// Matrix multiplication (rank-2 tensors).
// ---------------------------------------------------------------------------

template <typename T>
Tensor<T> matmul(Tape<T>& tape, const Tensor<T>& a_, const Tensor<T>& b_) {
    Tensor<T> a = tape.adopt(a_), b = tape.adopt(b_);
    if (a.rank() != 2 || b.rank() != 2 || a.dim(1) != b.dim(0)) {
        throw DimensionError("matmul: incompatible shapes " + shape_str(a.shape()) + " vs " +
                             shape_str(b.shape()));
    }
    const std::int64_t M = a.dim(0), K = a.dim(1), N = b.dim(1);
    Tensor<T> out({M, N});
    gemm_nn(M, K, N, a.data(), b.data(), out.mutable_data());
    return record_op<T>(
        tape, "matmul", {a, b}, out,
        [a, b, M, K, N](Tape<T>& t, const typename Tape<T>::Node& n) {
            const auto& g = t.grad(n.output.node);
            if (a.requires_grad) {
                std::vector<T> da(static_cast<std::size_t>(M * K), T(0));
                gemm_nt(M, N, K, g.data(), b.data(), da.data());
                t.add_grad(n.inputs[0], da.data(), M * K);
            }
            if (b.requires_grad) {
                std::vector<T> db(static_cast<std::size_t>(K * N), T(0));
                gemm_tn(K, M, N, a.data(), g.data(), db.data());
                t.add_grad(n.inputs[1], db.data(), K * N);
            }
        },
        [M, K, N](const std::vector<const std::vector<T>*>& in) {
            std::vector<T> r(static_cast<std::size_t>(M * N), T(0));
            gemm_nn(M, K, N, in[0]->data(), in[1]->data(), r.data());
            return r;
        });
}

// y = x * W^T + b with x: [N, c_in], W: [c_out, c_in], b: [c_out].
template <typename T>
Tensor<T> linear(Tape<T>& tape, const Tensor<T>& x_, const Tensor<T>& w_, const Tensor<T>* bias) {
    Tensor<T> x = tape.adopt(x_), w = tape.adopt(w_);
    if (x.rank() != 2 || w.rank() != 2 || x.dim(1) != w.dim(1)) {
        throw DimensionError("linear: incompatible shapes " + shape_str(x.shape()) + " vs weight " +
                             shape_str(w.shape()));
    }
    const std::int64_t N = x.dim(0), K = x.dim(1), M = w.dim(0);
    Tensor<T> out({N, M});
    gemm_nt(N, K, M, x.data(), w.data(), out.mutable_data());
    std::vector<Tensor<T>> inputs = {x, w};
    Tensor<T> b;
    const bool has_bias = bias != nullptr;
    if (has_bias) {
        b = tape.adopt(*bias);
        if (b.numel() != M) {
            throw DimensionError("linear: bias length " + std::to_string(b.numel()) +
                                 " vs c_out " + std::to_string(M));
        }
        T* po = out.mutable_data();
        const T* pb = b.data();
        for (std::int64_t i = 0; i < N; ++i)
            for (std::int64_t j = 0; j < M; ++j) po[i * M + j] += pb[j];
        inputs.push_back(b);
    }
    return record_op<T>(
        tape, "linear", inputs, out,
        [x, w, b, has_bias, N, K, M](Tape<T>& t, const typename Tape<T>::Node& n) {
            const auto& g = t.grad(n.output.node);
            if (x.requires_grad) {
                std::vector<T> dx(static_cast<std::size_t>(N * K), T(0));
                gemm_nn(N, M, K, g.data(), w.data(), dx.data());
                t.add_grad(n.inputs[0], dx.data(), N * K);
            }
            if (w.requires_grad) {
                std::vector<T> dw(static_cast<std::size_t>(M * K), T(0));
                gemm_tn(M, N, K, g.data(), x.data(), dw.data());
                t.add_grad(n.inputs[1], dw.data(), M * K);
            }
            if (has_bias && b.requires_grad) {
                std::vector<T> db(static_cast<std::size_t>(M), T(0));
                for (std::int64_t i = 0; i < N; ++i)
                    for (std::int64_t j = 0; j < M; ++j) db[static_cast<std::size_t>(j)] += g[static_cast<std::size_t>(i * M + j)];
                t.add_grad(n.inputs[2], db.data(), M);
            }
        },
        [has_bias, N, K, M](const std::vector<const std::vector<T>*>& in) {
            std::vector<T> r(static_cast<std::size_t>(N * M), T(0));
            gemm_nt(N, K, M, in[0]->data(), in[1]->data(), r.data());
            if (has_bias) {
                for (std::int64_t i = 0; i < N; ++i)
                    for (std::int64_t j = 0; j < M; ++j) r[static_cast<std::size_t>(i * M + j)] += (*in[2])[static_cast<std::size_t>(j)];
            }
            return r;
        });
}

// ---------------------------------------------------------------------------
// Grouped 2-D convolution, im2col + GEMM fast path. The direct nested-loop
// reference used to validate this kernel lives with the tests.
// ---------------------------------------------------------------------------

struct ConvGeom {
    std::int64_t N, C, H, W;        // input
    std::int64_t Co, Cig, kH, kW;   // weight [Co, Cig, kH, kW]
    std::int64_t stride, pad, groups;
    std::int64_t Ho, Wo;
    std::int64_t Cog() const { return Co / groups; }
};

inline ConvGeom conv_geometry(const std::vector<std::int64_t>& xs,
                              const std::vector<std::int64_t>& ws, std::int64_t stride,
                              std::int64_t pad, std::int64_t groups) {
    if (xs.size() != 4) throw DimensionError("conv2d: input must be rank 4, got " + shape_str(xs));
    if (ws.size() != 4) throw DimensionError("conv2d: weight must be rank 4, got " + shape_str(ws));
    if (stride < 1) throw ConfigError("conv2d: stride must be positive");
    if (pad < 0) throw ConfigError("conv2d: padding must be non-negative");
    if (groups < 1) throw ConfigError("conv2d: groups must be positive");
    ConvGeom g;
    g.N = xs[0]; g.C = xs[1]; g.H = xs[2]; g.W = xs[3];
    g.Co = ws[0]; g.Cig = ws[1]; g.kH = ws[2]; g.kW = ws[3];
    g.stride = stride; g.pad = pad; g.groups = groups;
    if (g.C % groups != 0) {
        throw ConfigError("conv2d: groups=" + std::to_string(groups) +
                          " does not divide input channels C=" + std::to_string(g.C));
    }
    if (g.Co % groups != 0) {
        throw ConfigError("conv2d: groups=" + std::to_string(groups) +
                          " does not divide output channels c_out=" + std::to_string(g.Co));
    }
    if (g.Cig * groups != g.C) {
        throw DimensionError("conv2d: weight expects c_in=" + std::to_string(g.Cig * groups) +
                             " (shape " + shape_str(ws) + ", groups=" + std::to_string(groups) +
                             ") but input has C=" + std::to_string(g.C));
    }
    g.Ho = (g.H + 2 * pad - g.kH) / stride + 1;
    g.Wo = (g.W + 2 * pad - g.kW) / stride + 1;
    if (g.H + 2 * pad < g.kH || g.W + 2 * pad < g.kW || g.Ho < 1 || g.Wo < 1) {
        throw DimensionError("conv2d: non-positive output extent for input " + shape_str(xs) +
                             ", kernel " + shape_str(ws) + ", stride " + std::to_string(stride) +
                             ", pad " + std::to_string(pad));
    }
    return g;
}

namespace detail {

// Writes one sample's patches into its column block of a [Cig*kH*kW x N*Ho*Wo]
// matrix whose rows span the whole batch (row_stride = N*Ho*Wo).
template <typename T>
void im2col_strided(const T* x, const ConvGeom& g, std::int64_t n, std::int64_t group, T* cols,
                    std::int64_t row_stride) {
    const T* base = x + (n * g.C + group * g.Cig) * g.H * g.W;
    std::int64_t row = 0;
    for (std::int64_t c = 0; c < g.Cig; ++c) {
        const T* plane = base + c * g.H * g.W;
        for (std::int64_t ki = 0; ki < g.kH; ++ki) {
            for (std::int64_t kj = 0; kj < g.kW; ++kj, ++row) {
                T* out = cols + row * row_stride;
                for (std::int64_t oh = 0; oh < g.Ho; ++oh) {
                    const std::int64_t ih = oh * g.stride + ki - g.pad;
                    for (std::int64_t ow = 0; ow < g.Wo; ++ow) {
                        const std::int64_t iw = ow * g.stride + kj - g.pad;
                        out[oh * g.Wo + ow] =
                            (ih >= 0 && ih < g.H && iw >= 0 && iw < g.W) ? plane[ih * g.W + iw]
                                                                         : T(0);
                    }
                }
            }
        }
    }
}

template <typename T>
void col2im_add_strided(const T* cols, const ConvGeom& g, std::int64_t n, std::int64_t group,
                        T* dx, std::int64_t row_stride) {
    T* base = dx + (n * g.C + group * g.Cig) * g.H * g.W;
    std::int64_t row = 0;
    for (std::int64_t c = 0; c < g.Cig; ++c) {
        T* plane = base + c * g.H * g.W;
        for (std::int64_t ki = 0; ki < g.kH; ++ki) {
            for (std::int64_t kj = 0; kj < g.kW; ++kj, ++row) {
                const T* in = cols + row * row_stride;
                for (std::int64_t oh = 0; oh < g.Ho; ++oh) {
                    const std::int64_t ih = oh * g.stride + ki - g.pad;
                    if (ih < 0 || ih >= g.H) continue;
                    for (std::int64_t ow = 0; ow < g.Wo; ++ow) {
                        const std::int64_t iw = ow * g.stride + kj - g.pad;
                        if (iw >= 0 && iw < g.W) plane[ih * g.W + iw] += in[oh * g.Wo + ow];
                    }
                }
            }
        }
    }
}

// Pointwise stride-1 pad-0 convolutions reduce to one GEMM per group over the
// whole batch; this gathers group channels into a [Cig x N*P] matrix.
template <typename T>
void pack_pointwise(const T* x, const ConvGeom& g, std::int64_t group, std::int64_t cpg, T* out) {
    const std::int64_t P = g.H * g.W;
    for (std::int64_t c = 0; c < cpg; ++c) {
        for (std::int64_t n = 0; n < g.N; ++n) {
            const T* src = x + (n * g.C + group * cpg + c) * P;
            std::copy(src, src + P, out + (c * g.N + n) * P);
        }
    }
}

// Scatters a [cog x N*P] group result into the [N, Co, Ho, Wo] output.
template <typename T>
void unpack_pointwise_set(const T* packed, const ConvGeom& g, std::int64_t group, T* y) {
    const std::int64_t P = g.Ho * g.Wo;
    const std::int64_t cog = g.Cog();
    for (std::int64_t c = 0; c < cog; ++c) {
        for (std::int64_t n = 0; n < g.N; ++n) {
            T* dst = y + (n * g.Co + group * cog + c) * P;
            const T* src = packed + (c * g.N + n) * P;
            std::copy(src, src + P, dst);
        }
    }
}

template <typename T>
void unpack_pointwise_add(const T* packed, const ConvGeom& g, std::int64_t group, T* dx) {
    const std::int64_t P = g.H * g.W;
    for (std::int64_t c = 0; c < g.Cig; ++c) {
        for (std::int64_t n = 0; n < g.N; ++n) {
            T* dst = dx + (n * g.C + group * g.Cig + c) * P;
            const T* src = packed + (c * g.N + n) * P;
            for (std::int64_t p = 0; p < P; ++p) dst[p] += src[p];
        }
    }
}

// dy is laid out [N, Co, P]; gather one group's rows as [cog x N*P].
template <typename T>
void pack_pointwise_grad(const T* dy, const ConvGeom& g, std::int64_t group, T* out) {
    const std::int64_t P = g.Ho * g.Wo;
    const std::int64_t cog = g.Cog();
    for (std::int64_t c = 0; c < cog; ++c) {
        for (std::int64_t n = 0; n < g.N; ++n) {
            const T* src = dy + (n * g.Co + group * cog + c) * P;
            std::copy(src, src + P, out + (c * g.N + n) * P);
        }
    }
}

template <typename T>
bool pointwise_fast_path(const ConvGeom& g) {
    return g.kH == 1 && g.kW == 1 && g.stride == 1 && g.pad == 0;
}

// Pointwise convolutions on 1x1 spatial data are plain per-group matrix
// products on sub-blocks of the [N, C] layout; no packing at all.
template <typename T>
void conv2d_p1_forward(const T* x, const T* w, T* y, const ConvGeom& g) {
    const std::int64_t cog = g.Cog();
    std::vector<T> wt(static_cast<std::size_t>(g.Cig * cog));
    for (std::int64_t q = 0; q < g.groups; ++q) {
        const T* wg = w + q * cog * g.Cig;
        for (std::int64_t o = 0; o < cog; ++o)
            for (std::int64_t i = 0; i < g.Cig; ++i) wt[static_cast<std::size_t>(i * cog + o)] = wg[o * g.Cig + i];
        T* yg = y + q * cog;
        for (std::int64_t n = 0; n < g.N; ++n) std::fill(yg + n * g.Co, yg + n * g.Co + cog, T(0));
        gemm_nn_ld(g.N, g.Cig, cog, x + q * g.Cig, g.C, wt.data(), cog, yg, g.Co);
    }
}

template <typename T>
void conv2d_p1_backward(const T* x, const T* w, const T* dy, T* dx, T* dw, const ConvGeom& g) {
    const std::int64_t cog = g.Cog();
    for (std::int64_t q = 0; q < g.groups; ++q) {
        const T* wg = w + q * cog * g.Cig;
        const T* dyg = dy + q * cog;
        if (dw) {
            gemm_tn_ld(cog, g.N, g.Cig, dyg, g.Co, x + q * g.Cig, g.C, dw + q * cog * g.Cig,
                       g.Cig);
        }
        if (dx) {
            gemm_nn_ld(g.N, cog, g.Cig, dyg, g.Co, wg, g.Cig, dx + q * g.Cig, g.C);
        }
    }
}

// Both kernels assemble one [kk x N*P] patch matrix per group covering the
// whole batch, so each group costs a single GEMM instead of N small ones.
template <typename T>
void conv2d_forward_kernel(const T* x, const T* w, T* y, const ConvGeom& g) {
    const std::int64_t P = g.Ho * g.Wo;
    if (P == 1 && g.H == 1 && g.W == 1 && g.kH == 1 && g.kW == 1) {
        conv2d_p1_forward(x, w, y, g);
        return;
    }
    const std::int64_t cog = g.Cog();
    const std::int64_t kk = g.Cig * g.kH * g.kW;
    const std::int64_t cols = g.N * P;
    const bool pointwise = pointwise_fast_path<T>(g);
    // parallel only when each group carries real work; the fork/join cost
    // dwarfs sub-100k-flop groups
    const bool parallel = g.groups > 1 && cog * kk * cols >= (1 << 17);
    (void)parallel;
#ifdef _OPENMP
#pragma omp parallel for schedule(static) if (parallel)
#endif
    for (std::int64_t q = 0; q < g.groups; ++q) {
        std::vector<T> xp(static_cast<std::size_t>(kk * cols));
        std::vector<T> yp(static_cast<std::size_t>(cog * cols), T(0));
        if (pointwise) {
            pack_pointwise(x, g, q, g.Cig, xp.data());
        } else {
            for (std::int64_t n = 0; n < g.N; ++n)
                im2col_strided(x, g, n, q, xp.data() + n * P, cols);
        }
        gemm_nn(cog, kk, cols, w + q * cog * kk, xp.data(), yp.data());
        unpack_pointwise_set(yp.data(), g, q, y);
    }
}

template <typename T>
void conv2d_backward_kernel(const T* x, const T* w, const T* dy, T* dx, T* dw, const ConvGeom& g) {
    const std::int64_t P = g.Ho * g.Wo;
    if (P == 1 && g.H == 1 && g.W == 1 && g.kH == 1 && g.kW == 1) {
        conv2d_p1_backward(x, w, dy, dx, dw, g);
        return;
    }
    const std::int64_t cog = g.Cog();
    const std::int64_t kk = g.Cig * g.kH * g.kW;
    const std::int64_t cols = g.N * P;
    const bool pointwise = pointwise_fast_path<T>(g);
    const bool parallel = g.groups > 1 && cog * kk * cols >= (1 << 16);
    (void)parallel;
#ifdef _OPENMP
#pragma omp parallel for schedule(static) if (parallel)
#endif
    for (std::int64_t q = 0; q < g.groups; ++q) {
        std::vector<T> gp(static_cast<std::size_t>(cog * cols));
        pack_pointwise_grad(dy, g, q, gp.data());
        if (dw) {
            std::vector<T> xp(static_cast<std::size_t>(kk * cols));
            if (pointwise) {
                pack_pointwise(x, g, q, g.Cig, xp.data());
            } else {
                for (std::int64_t n = 0; n < g.N; ++n)
                    im2col_strided(x, g, n, q, xp.data() + n * P, cols);
            }
            gemm_nt(cog, cols, kk, gp.data(), xp.data(), dw + q * cog * kk);
        }
        if (dx) {
            std::vector<T> dxp(static_cast<std::size_t>(kk * cols), T(0));
            gemm_tn(kk, cog, cols, w + q * cog * kk, gp.data(), dxp.data());
            if (pointwise) {
                unpack_pointwise_add(dxp.data(), g, q, dx);
            } else {
                for (std::int64_t n = 0; n < g.N; ++n)
                    col2im_add_strided(dxp.data() + n * P, g, n, q, dx, cols);
            }
        }
    }
}

}  // namespace detail

template <typename T>
Tensor<T> conv2d(Tape<T>& tape, const Tensor<T>& x_, const Tensor<T>& w_, std::int64_t stride,
                 std::int64_t pad, std::int64_t groups) {
    Tensor<T> x = tape.adopt(x_), w = tape.adopt(w_);
    const ConvGeom g = conv_geometry(x.shape(), w.shape(), stride, pad, groups);
    Tensor<T> out({g.N, g.Co, g.Ho, g.Wo});
    detail::conv2d_forward_kernel(x.data(), w.data(), out.mutable_data(), g);
    return record_op<T>(
        tape, "conv2d", {x, w}, out,
        [x, w, g](Tape<T>& t, const typename Tape<T>::Node& n) {
            const auto& gout = t.grad(n.output.node);
            std::vector<T> dx, dw;
            if (x.requires_grad) dx.assign(static_cast<std::size_t>(x.numel()), T(0));
            if (w.requires_grad) dw.assign(static_cast<std::size_t>(w.numel()), T(0));
            if (dx.empty() && dw.empty()) return;
            detail::conv2d_backward_kernel(x.data(), w.data(), gout.data(),
                                           dx.empty() ? nullptr : dx.data(),
                                           dw.empty() ? nullptr : dw.data(), g);
            if (!dx.empty()) t.add_grad(n.inputs[0], dx.data(), x.numel());
            if (!dw.empty()) t.add_grad(n.inputs[1], dw.data(), w.numel());
        },
        [g](const std::vector<const std::vector<T>*>& in) {
            std::vector<T> r(static_cast<std::size_t>(g.N * g.Co * g.Ho * g.Wo));
            detail::conv2d_forward_kernel(in[0]->data(), in[1]->data(), r.data(), g);
            return r;
        });
}

// Adds a per-channel bias to an NCHW (or NC) tensor.
template <typename T>
Tensor<T> bias_channels(Tape<T>& tape, const Tensor<T>& x_, const Tensor<T>& b_) {
    Tensor<T> x = tape.adopt(x_), b = tape.adopt(b_);
    if (x.rank() < 2 || b.numel() != x.dim(1)) {
        throw DimensionError("bias: channel count " + std::to_string(b.numel()) +
                             " does not match input " + shape_str(x.shape()));
    }
    const std::int64_t N = x.dim(0), C = x.dim(1), P = x.numel() / (x.dim(0) * x.dim(1));
    Tensor<T> out(x.shape());
    const T* px = x.data();
    const T* pb = b.data();
    T* po = out.mutable_data();
    for (std::int64_t n = 0; n < N; ++n)
        for (std::int64_t c = 0; c < C; ++c) {
            const T bv = pb[c];
            const T* src = px + (n * C + c) * P;
            T* dst = po + (n * C + c) * P;
            for (std::int64_t p = 0; p < P; ++p) dst[p] = src[p] + bv;
        }
    return record_op<T>(
        tape, "bias", {x, b}, out,
        [x, b, N, C, P](Tape<T>& t, const typename Tape<T>::Node& n) {
            const auto& g = t.grad(n.output.node);
            if (x.requires_grad) t.add_grad(n.inputs[0], g.data(), x.numel());
            if (b.requires_grad) {
                std::vector<T> db(static_cast<std::size_t>(C), T(0));
                for (std::int64_t i = 0; i < N; ++i)
                    for (std::int64_t c = 0; c < C; ++c) {
                        T s = 0;
                        const T* src = g.data() + (i * C + c) * P;
                        for (std::int64_t p = 0; p < P; ++p) s += src[p];
                        db[static_cast<std::size_t>(c)] += s;
                    }
                t.add_grad(n.inputs[1], db.data(), C);
            }
        },
        [N, C, P](const std::vector<const std::vector<T>*>& in) {
            std::vector<T> r(in[0]->size());
            for (std::int64_t n = 0; n < N; ++n)
                for (std::int64_t c = 0; c < C; ++c) {
                    const T bv = (*in[1])[static_cast<std::size_t>(c)];
                    for (std::int64_t p = 0; p < P; ++p) {
                        const std::size_t i = static_cast<std::size_t>((n * C + c) * P + p);
                        r[i] = (*in[0])[i] + bv;
                    }
                }
            return r;
        });
}

// ---------------------------------------------------------------------------
// Batch normalization.
// ---------------------------------------------------------------------------

namespace detail {

// Two-pass per-channel statistics over (N, H, W); double accumulation keeps
// float graphs well conditioned and results thread-count independent. Loops
// run n-outer / c-inner so the common P == 1 case streams contiguously.
template <typename T>
void bn_batch_stats(const T* x, std::int64_t N, std::int64_t C, std::int64_t P, double* mean,
                    double* var) {
    const std::int64_t m = N * P;
    std::fill(mean, mean + C, 0.0);
    std::fill(var, var + C, 0.0);
    for (std::int64_t n = 0; n < N; ++n)
        for (std::int64_t c = 0; c < C; ++c) {
            const T* src = x + (n * C + c) * P;
            double s = 0;
            for (std::int64_t p = 0; p < P; ++p) s += static_cast<double>(src[p]);
            mean[c] += s;
        }
    for (std::int64_t c = 0; c < C; ++c) mean[c] /= static_cast<double>(m);
    for (std::int64_t n = 0; n < N; ++n)
        for (std::int64_t c = 0; c < C; ++c) {
            const T* src = x + (n * C + c) * P;
            double v = 0;
            for (std::int64_t p = 0; p < P; ++p) {
                const double d = static_cast<double>(src[p]) - mean[c];
                v += d * d;
            }
            var[c] += v;
        }
    for (std::int64_t c = 0; c < C; ++c) var[c] /= static_cast<double>(m);  // biased
}

template <typename T>
void bn_apply(const T* x, const T* gamma, const T* beta, const double* mean,
              const double* inv_std, std::int64_t N, std::int64_t C, std::int64_t P, T* y) {
    std::vector<T> a(static_cast<std::size_t>(C)), b(static_cast<std::size_t>(C));
    for (std::int64_t c = 0; c < C; ++c) {
        a[static_cast<std::size_t>(c)] = static_cast<T>(static_cast<double>(gamma[c]) * inv_std[c]);
        b[static_cast<std::size_t>(c)] = static_cast<T>(
            static_cast<double>(beta[c]) - static_cast<double>(gamma[c]) * inv_std[c] * mean[c]);
    }
    for (std::int64_t n = 0; n < N; ++n)
        for (std::int64_t c = 0; c < C; ++c) {
            const T ac = a[static_cast<std::size_t>(c)];
            const T bc = b[static_cast<std::size_t>(c)];
            const T* src = x + (n * C + c) * P;
            T* dst = y + (n * C + c) * P;
            for (std::int64_t p = 0; p < P; ++p) dst[p] = ac * src[p] + bc;
        }
}

}  // namespace detail

struct BnSaved {
    std::vector<double> mean;
    std::vector<double> var;
};

// Train-mode batchnorm primitive: standardizes with batch statistics. The
// layer wrapper owns running-buffer updates; this op is pure.
template <typename T>
Tensor<T> batchnorm_train(Tape<T>& tape, const Tensor<T>& x_, const Tensor<T>& gamma_,
                          const Tensor<T>& beta_, double eps, BnSaved* saved_out = nullptr) {
    Tensor<T> x = tape.adopt(x_), gamma = tape.adopt(gamma_), beta = tape.adopt(beta_);
    if (x.rank() < 2) throw DimensionError("batchnorm: input must have a channel axis");
    const std::int64_t N = x.dim(0), C = x.dim(1), P = x.numel() / (N * C);
    if (gamma.numel() != C || beta.numel() != C) {
        throw DimensionError("batchnorm: parameter length does not match channels " +
                             std::to_string(C));
    }
    if (N * P <= 1) {
        throw NumericalError("batchnorm: degenerate batch (N*H*W = " + std::to_string(N * P) +
                             ") in train mode");
    }
    std::vector<double> mean(static_cast<std::size_t>(C)), var(static_cast<std::size_t>(C));
    detail::bn_batch_stats(x.data(), N, C, P, mean.data(), var.data());
    std::vector<double> inv_std(static_cast<std::size_t>(C));
    for (std::int64_t c = 0; c < C; ++c) inv_std[static_cast<std::size_t>(c)] = 1.0 / std::sqrt(var[static_cast<std::size_t>(c)] + eps);
    if (saved_out) {
        saved_out->mean = mean;
        saved_out->var = var;  // biased batch variance
    }
    Tensor<T> out(x.shape());
    detail::bn_apply(x.data(), gamma.data(), beta.data(), mean.data(), inv_std.data(), N, C, P,
                     out.mutable_data());
    auto mean_c = mean;
    auto inv_c = inv_std;
    return record_op<T>(
        tape, "batchnorm_train", {x, gamma, beta}, out,
        [x, gamma, beta, mean_c, inv_c, N, C, P](Tape<T>& t, const typename Tape<T>::Node& n) {
            const auto& g = t.grad(n.output.node);
            const double m = static_cast<double>(N * P);
            const T* px = x.data();
            std::vector<double> s1(static_cast<std::size_t>(C), 0.0), s2(static_cast<std::size_t>(C), 0.0);
            for (std::int64_t i = 0; i < N; ++i)
                for (std::int64_t c = 0; c < C; ++c) {
                    const T* srcx = px + (i * C + c) * P;
                    const T* srcg = g.data() + (i * C + c) * P;
                    double a = 0, b = 0;
                    for (std::int64_t p = 0; p < P; ++p) {
                        const double xh = (static_cast<double>(srcx[p]) - mean_c[static_cast<std::size_t>(c)]) * inv_c[static_cast<std::size_t>(c)];
                        a += static_cast<double>(srcg[p]);
                        b += static_cast<double>(srcg[p]) * xh;
                    }
                    s1[static_cast<std::size_t>(c)] += a;
                    s2[static_cast<std::size_t>(c)] += b;
                }
            if (gamma.requires_grad) {
                std::vector<T> dg(static_cast<std::size_t>(C));
                for (std::int64_t c = 0; c < C; ++c) dg[static_cast<std::size_t>(c)] = static_cast<T>(s2[static_cast<std::size_t>(c)]);
                t.add_grad(n.inputs[1], dg.data(), C);
            }
            if (beta.requires_grad) {
                std::vector<T> db(static_cast<std::size_t>(C));
                for (std::int64_t c = 0; c < C; ++c) db[static_cast<std::size_t>(c)] = static_cast<T>(s1[static_cast<std::size_t>(c)]);
                t.add_grad(n.inputs[2], db.data(), C);
            }
            if (x.requires_grad) {
                std::vector<T> dx(static_cast<std::size_t>(x.numel()));
                for (std::int64_t i = 0; i < N; ++i)
                    for (std::int64_t c = 0; c < C; ++c) {
                        const double ga = static_cast<double>(gamma.data()[c]);
                        const double k = ga * inv_c[static_cast<std::size_t>(c)];
                        const T* srcx = px + (i * C + c) * P;
                        const T* srcg = g.data() + (i * C + c) * P;
                        T* dst = dx.data() + (i * C + c) * P;
                        for (std::int64_t p = 0; p < P; ++p) {
                            const double xh = (static_cast<double>(srcx[p]) - mean_c[static_cast<std::size_t>(c)]) * inv_c[static_cast<std::size_t>(c)];
                            dst[p] = static_cast<T>(
                                k * (static_cast<double>(srcg[p]) - s1[static_cast<std::size_t>(c)] / m - xh * s2[static_cast<std::size_t>(c)] / m));
                        }
                    }
                t.add_grad(n.inputs[0], dx.data(), x.numel());
            }
        },
        [N, C, P, eps](const std::vector<const std::vector<T>*>& in) {
            std::vector<double> mean(static_cast<std::size_t>(C)), var(static_cast<std::size_t>(C)), inv(static_cast<std::size_t>(C));
            detail::bn_batch_stats(in[0]->data(), N, C, P, mean.data(), var.data());
            for (std::int64_t c = 0; c < C; ++c) inv[static_cast<std::size_t>(c)] = 1.0 / std::sqrt(var[static_cast<std::size_t>(c)] + eps);
            std::vector<T> r(in[0]->size());
            detail::bn_apply(in[0]->data(), in[1]->data(), in[2]->data(), mean.data(), inv.data(),
                             N, C, P, r.data());
            return r;
        });
}

// Eval-mode batchnorm: affine per-channel map from frozen running statistics.
template <typename T>
Tensor<T> batchnorm_eval(Tape<T>& tape, const Tensor<T>& x_, const Tensor<T>& gamma_,
                         const Tensor<T>& beta_, const std::vector<T>& running_mean,
                         const std::vector<T>& running_var, double eps) {
    Tensor<T> x = tape.adopt(x_), gamma = tape.adopt(gamma_), beta = tape.adopt(beta_);
    const std::int64_t N = x.dim(0), C = x.dim(1), P = x.numel() / (N * C);
    if (gamma.numel() != C || static_cast<std::int64_t>(running_mean.size()) != C) {
        throw DimensionError("batchnorm: parameter length does not match channels " +
                             std::to_string(C));
    }
    std::vector<double> mean(static_cast<std::size_t>(C)), inv(static_cast<std::size_t>(C));
    for (std::int64_t c = 0; c < C; ++c) {
        mean[static_cast<std::size_t>(c)] = static_cast<double>(running_mean[static_cast<std::size_t>(c)]);
        inv[static_cast<std::size_t>(c)] = 1.0 / std::sqrt(static_cast<double>(running_var[static_cast<std::size_t>(c)]) + eps);
    }
    Tensor<T> out(x.shape());
    detail::bn_apply(x.data(), gamma.data(), beta.data(), mean.data(), inv.data(), N, C, P,
                     out.mutable_data());
    auto mean_c = mean;
    auto inv_c = inv;
    return record_op<T>(
        tape, "batchnorm_eval", {x, gamma, beta}, out,
        [x, gamma, beta, mean_c, inv_c, N, C, P](Tape<T>& t, const typename Tape<T>::Node& n) {
            const auto& g = t.grad(n.output.node);
            const T* px = x.data();
            if (x.requires_grad) {
                std::vector<T> dx(static_cast<std::size_t>(x.numel()));
                for (std::int64_t i = 0; i < N; ++i)
                    for (std::int64_t c = 0; c < C; ++c) {
                        const double k = static_cast<double>(gamma.data()[c]) * inv_c[static_cast<std::size_t>(c)];
                        const T* srcg = g.data() + (i * C + c) * P;
                        T* dst = dx.data() + (i * C + c) * P;
                        for (std::int64_t p = 0; p < P; ++p) dst[p] = static_cast<T>(k * static_cast<double>(srcg[p]));
                    }
                t.add_grad(n.inputs[0], dx.data(), x.numel());
            }
            if (gamma.requires_grad || beta.requires_grad) {
                std::vector<T> dg(static_cast<std::size_t>(C), T(0)), db(static_cast<std::size_t>(C), T(0));
                for (std::int64_t i = 0; i < N; ++i)
                    for (std::int64_t c = 0; c < C; ++c) {
                        const T* srcx = px + (i * C + c) * P;
                        const T* srcg = g.data() + (i * C + c) * P;
                        double a = 0, b = 0;
                        for (std::int64_t p = 0; p < P; ++p) {
                            const double xh = (static_cast<double>(srcx[p]) - mean_c[static_cast<std::size_t>(c)]) * inv_c[static_cast<std::size_t>(c)];
                            a += static_cast<double>(srcg[p]) * xh;
                            b += static_cast<double>(srcg[p]);
                        }
                        dg[static_cast<std::size_t>(c)] += static_cast<T>(a);
                        db[static_cast<std::size_t>(c)] += static_cast<T>(b);
                    }
                if (gamma.requires_grad) t.add_grad(n.inputs[1], dg.data(), C);
                if (beta.requires_grad) t.add_grad(n.inputs[2], db.data(), C);
            }
        },
        [mean_c, inv_c, N, C, P](const std::vector<const std::vector<T>*>& in) {
            std::vector<T> r(in[0]->size());
            detail::bn_apply(in[0]->data(), in[1]->data(), in[2]->data(), mean_c.data(),
                             inv_c.data(), N, C, P, r.data());
            return r;
        });
}

// ---------------------------------------------------------------------------
// Pooling.
// ---------------------------------------------------------------------------

template <typename T>
Tensor<T> maxpool(Tape<T>& tape, const Tensor<T>& x_, std::int64_t window, std::int64_t stride) {
    Tensor<T> x = tape.adopt(x_);
    if (x.rank() != 4) throw DimensionError("maxpool: input must be rank 4");
    const std::int64_t N = x.dim(0), C = x.dim(1), H = x.dim(2), W = x.dim(3);
    const std::int64_t Ho = (H - window) / stride + 1, Wo = (W - window) / stride + 1;
    if (Ho < 1 || Wo < 1) throw DimensionError("maxpool: window larger than input");
    Tensor<T> out({N, C, Ho, Wo});
    auto arg = std::make_shared<std::vector<std::int64_t>>(static_cast<std::size_t>(out.numel()));
    const T* px = x.data();
    T* po = out.mutable_data();
    std::int64_t oi = 0;
    for (std::int64_t n = 0; n < N; ++n)
        for (std::int64_t c = 0; c < C; ++c) {
            const T* plane = px + (n * C + c) * H * W;
            for (std::int64_t oh = 0; oh < Ho; ++oh)
                for (std::int64_t ow = 0; ow < Wo; ++ow, ++oi) {
                    T best = plane[oh * stride * W + ow * stride];
                    std::int64_t bi = oh * stride * W + ow * stride;
                    for (std::int64_t i = 0; i < window; ++i)
                        for (std::int64_t j = 0; j < window; ++j) {
                            const std::int64_t idx = (oh * stride + i) * W + (ow * stride + j);
                            if (plane[idx] > best) { best = plane[idx]; bi = idx; }
                        }
                    po[oi] = best;
                    (*arg)[static_cast<std::size_t>(oi)] = (n * C + c) * H * W + bi;
                }
        }
    return record_op<T>(
        tape, "maxpool", {x}, out,
        [x, arg](Tape<T>& t, const typename Tape<T>::Node& n) {
            if (!x.requires_grad) return;
            const auto& g = t.grad(n.output.node);
            std::vector<T> dx(static_cast<std::size_t>(x.numel()), T(0));
            for (std::size_t i = 0; i < g.size(); ++i) dx[static_cast<std::size_t>((*arg)[i])] += g[i];
            t.add_grad(n.inputs[0], dx.data(), x.numel());
        },
        [N, C, H, W, Ho, Wo, window, stride](const std::vector<const std::vector<T>*>& in) {
            std::vector<T> r(static_cast<std::size_t>(N * C * Ho * Wo));
            const T* px = in[0]->data();
            std::int64_t oi = 0;
            for (std::int64_t n = 0; n < N; ++n)
                for (std::int64_t c = 0; c < C; ++c) {
                    const T* plane = px + (n * C + c) * H * W;
                    for (std::int64_t oh = 0; oh < Ho; ++oh)
                        for (std::int64_t ow = 0; ow < Wo; ++ow, ++oi) {
                            T best = plane[oh * stride * W + ow * stride];
                            for (std::int64_t i = 0; i < window; ++i)
                                for (std::int64_t j = 0; j < window; ++j) {
                                    const T v = plane[(oh * stride + i) * W + (ow * stride + j)];
                                    if (v > best) best = v;
                                }
                            r[static_cast<std::size_t>(oi)] = best;
                        }
                }
            return r;
        });
}

template <typename T>
Tensor<T> avgpool(Tape<T>& tape, const Tensor<T>& x_, std::int64_t window, std::int64_t stride) {
    Tensor<T> x = tape.adopt(x_);
    if (x.rank() != 4) throw DimensionError("avgpool: input must be rank 4");
    const std::int64_t N = x.dim(0), C = x.dim(1), H = x.dim(2), W = x.dim(3);
    const std::int64_t Ho = (H - window) / stride + 1, Wo = (W - window) / stride + 1;
    if (Ho < 1 || Wo < 1) throw DimensionError("avgpool: window larger than input");
    const T inv = T(1) / static_cast<T>(window * window);
    Tensor<T> out({N, C, Ho, Wo});
    const T* px = x.data();
    T* po = out.mutable_data();
    std::int64_t oi = 0;
    for (std::int64_t n = 0; n < N; ++n)
        for (std::int64_t c = 0; c < C; ++c) {
            const T* plane = px + (n * C + c) * H * W;
            for (std::int64_t oh = 0; oh < Ho; ++oh)
                for (std::int64_t ow = 0; ow < Wo; ++ow, ++oi) {
                    T s = 0;
                    for (std::int64_t i = 0; i < window; ++i)
                        for (std::int64_t j = 0; j < window; ++j)
                            s += plane[(oh * stride + i) * W + (ow * stride + j)];
                    po[oi] = s * inv;
                }
        }
    return record_op<T>(
        tape, "avgpool", {x}, out,
        [x, N, C, H, W, Ho, Wo, window, stride, inv](Tape<T>& t, const typename Tape<T>::Node& n) {
            if (!x.requires_grad) return;
            const auto& g = t.grad(n.output.node);
            std::vector<T> dx(static_cast<std::size_t>(x.numel()), T(0));
            std::int64_t oi = 0;
            for (std::int64_t nn = 0; nn < N; ++nn)
                for (std::int64_t c = 0; c < C; ++c) {
                    T* plane = dx.data() + (nn * C + c) * H * W;
                    for (std::int64_t oh = 0; oh < Ho; ++oh)
                        for (std::int64_t ow = 0; ow < Wo; ++ow, ++oi) {
                            const T gv = g[static_cast<std::size_t>(oi)] * inv;
                            for (std::int64_t i = 0; i < window; ++i)
                                for (std::int64_t j = 0; j < window; ++j)
                                    plane[(oh * stride + i) * W + (ow * stride + j)] += gv;
                        }
                }
            t.add_grad(n.inputs[0], dx.data(), x.numel());
        },
        [N, C, H, W, Ho, Wo, window, stride, inv](const std::vector<const std::vector<T>*>& in) {
            std::vector<T> r(static_cast<std::size_t>(N * C * Ho * Wo));
            const T* px = in[0]->data();
            std::int64_t oi = 0;
            for (std::int64_t n = 0; n < N; ++n)
                for (std::int64_t c = 0; c < C; ++c) {
                    const T* plane = px + (n * C + c) * H * W;
                    for (std::int64_t oh = 0; oh < Ho; ++oh)
                        for (std::int64_t ow = 0; ow < Wo; ++ow, ++oi) {
                            T s = 0;
                            for (std::int64_t i = 0; i < window; ++i)
                                for (std::int64_t j = 0; j < window; ++j)
                                    s += plane[(oh * stride + i) * W + (ow * stride + j)];
                            r[static_cast<std::size_t>(oi)] = s * inv;
                        }
                }
            return r;
        });
}

// Keeps the first `k` columns of a rank-2 tensor.
template <typename T>
Tensor<T> slice_cols(Tape<T>& tape, const Tensor<T>& x_, std::int64_t k) {
    Tensor<T> x = tape.adopt(x_);
    if (x.rank() != 2 || k < 1 || k > x.dim(1)) {
        throw DimensionError("slice_cols: cannot take " + std::to_string(k) + " columns of " +
                             shape_str(x.shape()));
    }
    const std::int64_t N = x.dim(0), C = x.dim(1);
    Tensor<T> out({N, k});
    for (std::int64_t i = 0; i < N; ++i)
        for (std::int64_t j = 0; j < k; ++j)
            out.mutable_data()[i * k + j] = x.data()[i * C + j];
    return record_op<T>(
        tape, "slice_cols", {x}, out,
        [x, N, C, k](Tape<T>& t, const typename Tape<T>::Node& n) {
            if (!x.requires_grad) return;
            const auto& g = t.grad(n.output.node);
            std::vector<T> dx(static_cast<std::size_t>(x.numel()), T(0));
            for (std::int64_t i = 0; i < N; ++i)
                for (std::int64_t j = 0; j < k; ++j)
                    dx[static_cast<std::size_t>(i * C + j)] = g[static_cast<std::size_t>(i * k + j)];
            t.add_grad(n.inputs[0], dx.data(), x.numel());
        },
        [N, C, k](const std::vector<const std::vector<T>*>& in) {
            std::vector<T> r(static_cast<std::size_t>(N * k));
            for (std::int64_t i = 0; i < N; ++i)
                for (std::int64_t j = 0; j < k; ++j)
                    r[static_cast<std::size_t>(i * k + j)] = (*in[0])[static_cast<std::size_t>(i * C + j)];
            return r;
        });
}

// ---------------------------------------------------------------------------
// Reductions and losses.
// ---------------------------------------------------------------------------

template <typename T>
Tensor<T> sum(Tape<T>& tape, const Tensor<T>& x_) {
    Tensor<T> x = tape.adopt(x_);
    double s = 0;
    for (std::int64_t i = 0; i < x.numel(); ++i) s += static_cast<double>(x.data()[i]);
    Tensor<T> out({1}, {static_cast<T>(s)});
    return record_op<T>(
        tape, "sum", {x}, out,
        [x](Tape<T>& t, const typename Tape<T>::Node& n) {
            if (!x.requires_grad) return;
            const T g = t.grad(n.output.node)[0];
            std::vector<T> dx(static_cast<std::size_t>(x.numel()), g);
            t.add_grad(n.inputs[0], dx.data(), x.numel());
        },
        [](const std::vector<const std::vector<T>*>& in) {
            double s = 0;
            for (T v : *in[0]) s += static_cast<double>(v);
            return std::vector<T>{static_cast<T>(s)};
        });
}

template <typename T>
Tensor<T> mean(Tape<T>& tape, const Tensor<T>& x_) {
    Tensor<T> s = sum(tape, x_);
    return scale(tape, s, 1.0 / static_cast<double>(x_.numel()));
}

// Mean squared error against a constant target.
template <typename T>
Tensor<T> mse(Tape<T>& tape, const Tensor<T>& pred_, const Tensor<T>& target) {
    Tensor<T> pred = tape.adopt(pred_);
    detail::check_same_shape(pred, target, "mse");
    const std::int64_t n = pred.numel();
    double s = 0;
    for (std::int64_t i = 0; i < n; ++i) {
        const double d = static_cast<double>(pred.data()[i]) - static_cast<double>(target.data()[i]);
        s += d * d;
    }
    Tensor<T> out({1}, {static_cast<T>(s / static_cast<double>(n))});
    Tensor<T> tgt = target;
    return record_op<T>(
        tape, "mse", {pred}, out,
        [pred, tgt, n](Tape<T>& t, const typename Tape<T>::Node& nd) {
            if (!pred.requires_grad) return;
            const T g = t.grad(nd.output.node)[0];
            std::vector<T> dp(static_cast<std::size_t>(n));
            const T k = g * T(2) / static_cast<T>(n);
            for (std::int64_t i = 0; i < n; ++i)
                dp[static_cast<std::size_t>(i)] = k * (pred.data()[i] - tgt.data()[i]);
            t.add_grad(nd.inputs[0], dp.data(), n);
        },
        [tgt, n](const std::vector<const std::vector<T>*>& in) {
            double s = 0;
            for (std::int64_t i = 0; i < n; ++i) {
                const double d = static_cast<double>((*in[0])[static_cast<std::size_t>(i)]) -
                                 static_cast<double>(tgt.data()[i]);
                s += d * d;
            }
            return std::vector<T>{static_cast<T>(s / static_cast<double>(n))};
        });
}

// Softmax cross-entropy over logits [N, K] with integer class labels.
template <typename T>
Tensor<T> softmax_cross_entropy(Tape<T>& tape, const Tensor<T>& logits_,
                                const std::vector<int>& labels) {
    Tensor<T> logits = tape.adopt(logits_);
    if (logits.rank() != 2 || logits.dim(0) != static_cast<std::int64_t>(labels.size())) {
        throw DimensionError("cross_entropy: logits " + shape_str(logits.shape()) + " vs " +
                             std::to_string(labels.size()) + " labels");
    }
    const std::int64_t N = logits.dim(0), K = logits.dim(1);
    for (int y : labels) {
        if (y < 0 || y >= K) {
            throw ConfigError("cross_entropy: label " + std::to_string(y) +
                              " out of range for " + std::to_string(K) + " classes");
        }
    }
    auto softmax = std::make_shared<std::vector<T>>(static_cast<std::size_t>(N * K));
    double loss = 0;
    const T* pz = logits.data();
    for (std::int64_t i = 0; i < N; ++i) {
        const T* row = pz + i * K;
        double mx = static_cast<double>(row[0]);
        for (std::int64_t k = 1; k < K; ++k) mx = std::max(mx, static_cast<double>(row[k]));
        double denom = 0;
        for (std::int64_t k = 0; k < K; ++k) denom += std::exp(static_cast<double>(row[k]) - mx);
        for (std::int64_t k = 0; k < K; ++k)
            (*softmax)[static_cast<std::size_t>(i * K + k)] =
                static_cast<T>(std::exp(static_cast<double>(row[k]) - mx) / denom);
        loss += std::log(denom) - (static_cast<double>(row[labels[static_cast<std::size_t>(i)]]) - mx);
    }
    Tensor<T> out({1}, {static_cast<T>(loss / static_cast<double>(N))});
    return record_op<T>(
        tape, "softmax_ce", {logits}, out,
        [logits, softmax, labels, N, K](Tape<T>& t, const typename Tape<T>::Node& nd) {
            if (!logits.requires_grad) return;
            const T g = t.grad(nd.output.node)[0];
            std::vector<T> dz(static_cast<std::size_t>(N * K));
            const T invn = g / static_cast<T>(N);
            for (std::int64_t i = 0; i < N; ++i)
                for (std::int64_t k = 0; k < K; ++k) {
                    T v = (*softmax)[static_cast<std::size_t>(i * K + k)];
                    if (k == labels[static_cast<std::size_t>(i)]) v -= T(1);
                    dz[static_cast<std::size_t>(i * K + k)] = v * invn;
                }
            t.add_grad(nd.inputs[0], dz.data(), N * K);
        },
        [labels, N, K](const std::vector<const std::vector<T>*>& in) {
            double loss = 0;
            for (std::int64_t i = 0; i < N; ++i) {
                const T* row = in[0]->data() + i * K;
                double mx = static_cast<double>(row[0]);
                for (std::int64_t k = 1; k < K; ++k) mx = std::max(mx, static_cast<double>(row[k]));
                double denom = 0;
                for (std::int64_t k = 0; k < K; ++k) denom += std::exp(static_cast<double>(row[k]) - mx);
                loss += std::log(denom) - (static_cast<double>(row[labels[static_cast<std::size_t>(i)]]) - mx);
            }
            return std::vector<T>{static_cast<T>(loss / static_cast<double>(N))};
        });
}

}  // namespace mgic::ops
