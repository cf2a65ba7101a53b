#pragma once

// Differentiable operator set: convolution, pooling, activations, channel
// concatenation and elementwise arithmetic. Every op records its backward
// rule on the active Tape when one of its inputs requires a gradient.

#include "desnow/tensor.hpp"

#include <Eigen/Core>

#include <algorithm>

#include <limits>
#include <span>
#include <vector>

namespace desnow {

enum class Padding { same, valid };

struct ConvSpec {
    int kernel_h = 1;
    int kernel_w = 1;
    int stride = 1;
    int dilation = 1;
    Padding padding = Padding::same;
};

namespace detail {

struct Bchw {
    std::int64_t b, c, h, w;
};

template <class T>
Bchw bchw(const Tensor<T>& t, const char* op)
{
    if (t.rank() != 4)
        throw ShapeError(std::string(op) + ": expected a BxCxHxW tensor, got " + to_string(t.shape()));
    return {t.dim(0), t.dim(1), t.dim(2), t.dim(3)};
}

/// Channel axis: 1 for batched tensors, 0 otherwise.
inline std::size_t channel_axis(std::size_t rank) { return rank == 4 ? 1 : 0; }

template <class S>
using RowMatrix = Eigen::Matrix<S, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>;

struct ConvGeometry {
    std::int64_t in_c, h, w, kh, kw, dilation, pad_top, pad_left;
    std::int64_t k_rows() const { return in_c * kh * kw; }
};

/// One kernel tap (c, i, j) and the output region it touches: output rows
/// [y0, y1) and columns [x0, x1) read input at (y + dy, x + dx).
struct Tap {
    std::int64_t c, i, j, dy, dx, y0, y1, x0, x1;
};

template <class Fn>
void for_each_tap(const ConvGeometry& g, Fn&& fn)
{
    for (std::int64_t c = 0; c < g.in_c; ++c)
        for (std::int64_t i = 0; i < g.kh; ++i) {
            const std::int64_t dy = i * g.dilation - g.pad_top;
            for (std::int64_t j = 0; j < g.kw; ++j) {
                const std::int64_t dx = j * g.dilation - g.pad_left;
                fn(Tap{c, i, j, dy, dx, std::clamp<std::int64_t>(-dy, 0, g.h), std::clamp<std::int64_t>(g.h - dy, 0, g.h),
                       std::clamp<std::int64_t>(-dx, 0, g.w), std::clamp<std::int64_t>(g.w - dx, 0, g.w)});
            }
        }
}

/// im2col restricted to output rows [r0, r1); `col` is k_rows x ((r1-r0)*w).
template <class T>
void im2col_rows(const T* image, const ConvGeometry& g, std::int64_t r0, std::int64_t r1, T* col)
{
    const std::int64_t hw = g.h * g.w;
    const std::int64_t cols = (r1 - r0) * g.w;
    for_each_tap(g, [&](const Tap& t) {
        T* row = col + ((t.c * g.kh + t.i) * g.kw + t.j) * cols;
        const T* plane = image + t.c * hw;
        for (std::int64_t y = r0; y < r1; ++y) {
            T* dst = row + (y - r0) * g.w;
            if (y < t.y0 || y >= t.y1) {
                std::fill(dst, dst + g.w, T(0));
                continue;
            }
            const T* src = plane + (y + t.dy) * g.w + t.dx;
            std::fill(dst, dst + t.x0, T(0));
            std::copy(src + t.x0, src + t.x1, dst + t.x0);
            std::fill(dst + t.x1, dst + g.w, T(0));
        }
    });
}

/// Adjoint of im2col_rows: scatters `col` back into `image`.
template <class T>
void col2im_rows_add(const T* col, const ConvGeometry& g, std::int64_t r0, std::int64_t r1, T* image)
{
    const std::int64_t hw = g.h * g.w;
    const std::int64_t cols = (r1 - r0) * g.w;
    for_each_tap(g, [&](const Tap& t) {
        const T* row = col + ((t.c * g.kh + t.i) * g.kw + t.j) * cols;
        T* plane = image + t.c * hw;
        for (std::int64_t y = std::max(r0, t.y0); y < std::min(r1, t.y1); ++y) {
            T* __restrict dst = plane + (y + t.dy) * g.w + t.dx;
            const T* __restrict src = row + (y - r0) * g.w;
            for (std::int64_t x = t.x0; x < t.x1; ++x)
                dst[x] += src[x];
        }
    });
}

/// Output rows per im2col tile, sized so a tile stays cache resident.
template <class T>
std::int64_t tile_rows(const ConvGeometry& g)
{
    constexpr std::int64_t budget = (256 * 1024) / sizeof(T);
    return std::clamp<std::int64_t>(budget / std::max<std::int64_t>(1, g.k_rows() * g.w), 1, g.h);
}

template <class T, class S>
void add_into_grad(const Tensor<T>& t, std::span<const S> delta, std::size_t offset = 0)
{
    auto g = t.mutable_grad();
    for (std::size_t i = 0; i < delta.size(); ++i)
        g[offset + i] += static_cast<T>(delta[i]);
}

} // namespace detail

namespace detail {

/// Convolutions with at most this many output channels skip im2col and
/// accumulate shifted input planes directly.
inline constexpr std::int64_t kDirectConvMaxOut = 4;

/// Planes widened by `pad` zero columns on each side, plus `pad` guard
/// elements at both ends of the buffer. A horizontal shift of up to `pad`
/// then never leaves the buffer, so each tap is one contiguous span and the
/// padding columns of a result are simply discarded.
template <class T>
struct WidePlanes {
    std::int64_t channels = 0, h = 0, w = 0, pad = 0;
    std::vector<T> buf;

    WidePlanes(std::int64_t channels_, std::int64_t h_, std::int64_t w_, std::int64_t pad_)
        : channels(channels_), h(h_), w(w_), pad(pad_), buf(static_cast<std::size_t>(channels_ * h_ * wide() + 2 * pad_))
    {
    }
    std::int64_t wide() const { return w + 2 * pad; }
    T* at(std::int64_t c, std::int64_t y) { return buf.data() + pad + (c * h + y) * wide() + pad; }

    void load(const T* src)
    {
        for (std::int64_t c = 0; c < channels; ++c)
            for (std::int64_t y = 0; y < h; ++y)
                std::copy(src + (c * h + y) * w, src + (c * h + y + 1) * w, at(c, y));
    }
    void store_add(T* dst)
    {
        for (std::int64_t c = 0; c < channels; ++c)
            for (std::int64_t y = 0; y < h; ++y) {
                const T* row = at(c, y);
                T* d = dst + (c * h + y) * w;
                for (std::int64_t x = 0; x < w; ++x)
                    d[x] += row[x];
            }
    }
};

inline std::int64_t direct_pad(const ConvGeometry& g)
{
    return std::max(g.pad_left, g.dilation * (g.kw - 1) - g.pad_left);
}

template <class T>
void conv_direct_forward(const T* image, const T* kernel, const ConvGeometry& g, std::int64_t out_c, T* out)
{
    using Array = Eigen::Array<T, Eigen::Dynamic, 1>;
    WidePlanes<T> src(g.in_c, g.h, g.w, direct_pad(g));
    WidePlanes<T> dst(out_c, g.h, g.w, src.pad);
    src.load(image);
    const std::int64_t wide = src.wide();
    for_each_tap(g, [&](const Tap& t) {
        if (t.y1 <= t.y0)
            return;
        const std::int64_t n = (t.y1 - t.y0) * wide;
        Eigen::Map<const Array> in(src.at(t.c, t.y0 + t.dy) + t.dx, n);
        for (std::int64_t o = 0; o < out_c; ++o) {
            const T wv = kernel[((o * g.in_c + t.c) * g.kh + t.i) * g.kw + t.j];
            Eigen::Map<Array>(dst.at(o, t.y0), n) += wv * in;
        }
    });
    dst.store_add(out);
}

template <class T>
void conv_direct_backward(const T* image, const T* kernel, const T* dout, const ConvGeometry& g,
                          std::int64_t out_c, T* dkernel, T* dimage)
{
    using Array = Eigen::Array<T, Eigen::Dynamic, 1>;
    WidePlanes<T> src(g.in_c, g.h, g.w, direct_pad(g));
    WidePlanes<T> gout(out_c, g.h, g.w, src.pad);
    WidePlanes<T> gin(dimage ? g.in_c : 0, g.h, g.w, src.pad);
    src.load(image);
    gout.load(dout);
    const std::int64_t wide = src.wide();
    for_each_tap(g, [&](const Tap& t) {
        if (t.y1 <= t.y0)
            return;
        const std::int64_t n = (t.y1 - t.y0) * wide;
        Eigen::Map<const Array> in(src.at(t.c, t.y0 + t.dy) + t.dx, n);
        for (std::int64_t o = 0; o < out_c; ++o) {
            const std::int64_t widx = ((o * g.in_c + t.c) * g.kh + t.i) * g.kw + t.j;
            Eigen::Map<const Array> go(gout.at(o, t.y0), n);
            if (dkernel)
                dkernel[widx] += (go * in).sum();
            if (dimage)
                Eigen::Map<Array>(gin.at(t.c, t.y0 + t.dy) + t.dx, n) += kernel[widx] * go;
        }
    });
    if (dimage)
        gin.store_add(dimage);
}

} // namespace detail

/// Stride-1 2-D convolution with zero same-padding.
///
/// `weights` is out_ch x in_ch x kh x kw, `bias` has out_ch elements (or is
/// undefined for no bias). Dilation is applied by striding the input index,
/// so the effective receptive field per axis is dilation*(k-1)+1. Wide
/// layers go through a row-tiled im2col and Eigen's GEMM; narrow ones
/// (the recovery heads) accumulate shifted rows directly.
template <class T>
Tensor<T> conv2d(const Tensor<T>& input, const Tensor<T>& weights, const Tensor<T>& bias,
                 const ConvSpec& spec)
{
    using Matrix = detail::RowMatrix<T>;
    using ConstMap = Eigen::Map<const Matrix>;
    using MutMap = Eigen::Map<Matrix>;
    using OuterStride = Eigen::OuterStride<>;
    using StridedMap = Eigen::Map<Matrix, 0, OuterStride>;
    using ConstStridedMap = Eigen::Map<const Matrix, 0, OuterStride>;

    const auto in = detail::bchw(input, "conv2d");
    if (weights.rank() != 4)
        throw ShapeError("conv2d: weights must be out x in x kh x kw, got " + to_string(weights.shape()));
    const std::int64_t out_c = weights.dim(0);
    if (weights.dim(1) != in.c)
        throw ShapeError("conv2d: input has " + std::to_string(in.c) + " channels but weights expect " +
                         std::to_string(weights.dim(1)));
    if (weights.dim(2) != spec.kernel_h || weights.dim(3) != spec.kernel_w)
        throw ShapeError("conv2d: weight kernel extents do not match ConvSpec");
    if (spec.dilation <= 0)
        throw ShapeError("conv2d: dilation must be positive");
    if (spec.stride != 1)
        throw ShapeError("conv2d: only stride 1 is supported");
    if (spec.padding != Padding::same)
        throw ShapeError("conv2d: only same padding is supported");
    if (bias.defined() && static_cast<std::int64_t>(bias.numel()) != out_c)
        throw ShapeError("conv2d: bias must have one element per output channel");

    const detail::ConvGeometry g{in.c,
                                 in.h,
                                 in.w,
                                 spec.kernel_h,
                                 spec.kernel_w,
                                 spec.dilation,
                                 spec.dilation * (spec.kernel_h - 1) / 2,
                                 spec.dilation * (spec.kernel_w - 1) / 2};
    const std::int64_t hw = in.h * in.w;
    const std::int64_t k_rows = g.k_rows();
    const bool pointwise = spec.kernel_h == 1 && spec.kernel_w == 1;
    const bool direct = !pointwise && out_c <= detail::kDirectConvMaxOut;
    const std::int64_t tile = detail::tile_rows<T>(g);

    ConstMap kernel(weights.data(), out_c, k_rows);
    auto out = Tensor<T>::uninitialized(Shape{in.b, out_c, in.h, in.w});
    Matrix col;
    for (std::int64_t b = 0; b < in.b; ++b) {
        const T* image = input.data() + b * in.c * hw;
        T* dst = out.mutable_data() + b * out_c * hw;
        if (pointwise) {
            MutMap(dst, out_c, hw).noalias() = kernel * ConstMap(image, k_rows, hw);
        } else if (direct) {
            std::fill(dst, dst + out_c * hw, T(0));
            detail::conv_direct_forward(image, weights.data(), g, out_c, dst);
        } else {
            for (std::int64_t r0 = 0; r0 < in.h; r0 += tile) {
                const std::int64_t r1 = std::min(in.h, r0 + tile);
                const std::int64_t cols = (r1 - r0) * in.w;
                col.resize(k_rows, cols);
                detail::im2col_rows(image, g, r0, r1, col.data());
                StridedMap(dst + r0 * in.w, out_c, cols, OuterStride(hw)).noalias() = kernel * col;
            }
        }
        if (bias.defined())
            for (std::int64_t o = 0; o < out_c; ++o) {
                const T bo = bias[static_cast<std::size_t>(o)];
                for (std::int64_t p = 0; p < hw; ++p)
                    dst[o * hw + p] += bo;
            }
    }
    detail::check_finite(out, "conv2d");

    if (auto* tape = detail::recording_tape<T>({&input, &weights, &bias})) {
        tape->record(out, [input, weights, bias, out, g, in, out_c, hw, k_rows, pointwise, direct, tile]() {
            if (!out.has_grad())
                return;
            const bool need_in = input.requires_grad();
            const bool need_w = weights.requires_grad();
            const bool need_b = bias.defined() && bias.requires_grad();
            ConstMap kernel(weights.data(), out_c, k_rows);
            Matrix col, dcol;
            Matrix dw = Matrix::Zero(out_c, k_rows);
            std::vector<accum_t> db(static_cast<std::size_t>(out_c), 0);
            std::span<T> grad_in;
            if (need_in)
                grad_in = input.mutable_grad();
            for (std::int64_t b = 0; b < in.b; ++b) {
                const T* go = out.grad().data() + b * out_c * hw;
                const T* image = input.data() + b * in.c * hw;
                T* gi = need_in ? grad_in.data() + b * in.c * hw : nullptr;
                if (need_b)
                    for (std::int64_t o = 0; o < out_c; ++o) {
                        accum_t acc = 0;
                        for (std::int64_t p = 0; p < hw; ++p)
                            acc += go[o * hw + p];
                        db[static_cast<std::size_t>(o)] += acc;
                    }
                if (pointwise) {
                    ConstMap dout(go, out_c, hw);
                    if (need_w)
                        dw.noalias() += dout * ConstMap(image, k_rows, hw).transpose();
                    if (need_in)
                        MutMap(gi, k_rows, hw).noalias() += kernel.transpose() * dout;
                } else if (direct) {
                    detail::conv_direct_backward(image, weights.data(), go, g, out_c,
                                                 need_w ? dw.data() : nullptr, gi);
                } else {
                    for (std::int64_t r0 = 0; r0 < in.h; r0 += tile) {
                        const std::int64_t r1 = std::min(in.h, r0 + tile);
                        const std::int64_t cols = (r1 - r0) * in.w;
                        ConstStridedMap dout(go + r0 * in.w, out_c, cols, OuterStride(hw));
                        if (need_w) {
                            col.resize(k_rows, cols);
                            detail::im2col_rows(image, g, r0, r1, col.data());
                            dw.noalias() += dout * col.transpose();
                        }
                        if (need_in) {
                            dcol.resize(k_rows, cols);
                            dcol.noalias() = kernel.transpose() * dout;
                            detail::col2im_rows_add(dcol.data(), g, r0, r1, gi);
                        }
                    }
                }
            }
            if (need_w)
                detail::add_into_grad<T, T>(weights, {dw.data(), static_cast<std::size_t>(dw.size())});
            if (need_b)
                detail::add_into_grad<T, accum_t>(bias, db);
        });
    }
    return out;
}

/// 2-D max pooling over CHW or BCHW input.
///
/// Padding::same pads with -inf so the output keeps H x W (stride 1 only);
/// Padding::valid drops trailing rows/columns that do not fill a window.
/// Backward routes each output gradient to the first maximal input in
/// row-major window order.
template <class T>
Tensor<T> maxpool2d(const Tensor<T>& input, int kernel, int stride, Padding padding = Padding::valid)
{
    if (input.rank() != 3 && input.rank() != 4)
        throw ShapeError("maxpool2d: expected CxHxW or BxCxHxW input, got " + to_string(input.shape()));
    const bool batched = input.rank() == 4;
    const detail::Bchw in{batched ? input.dim(0) : 1, input.dim(batched ? 1 : 0), input.dim(batched ? 2 : 1),
                          input.dim(batched ? 3 : 2)};
    if (kernel < 1 || stride < 1)
        throw ShapeError("maxpool2d: kernel and stride must be >= 1");
    std::int64_t out_h, out_w, pad_top = 0, pad_left = 0;
    if (padding == Padding::same) {
        if (stride != 1)
            throw ShapeError("maxpool2d: same padding requires stride 1");
        out_h = in.h;
        out_w = in.w;
        pad_top = pad_left = (kernel - 1) / 2;
    } else {
        if (kernel > in.h || kernel > in.w)
            throw ShapeError("maxpool2d: kernel " + std::to_string(kernel) + " larger than input " +
                             to_string(input.shape()));
        out_h = (in.h - kernel) / stride + 1;
        out_w = (in.w - kernel) / stride + 1;
    }

    auto out = Tensor<T>::uninitialized(batched ? Shape{in.b, in.c, out_h, out_w} : Shape{in.c, out_h, out_w});
    std::vector<std::int64_t> argmax(out.numel());
    const T* src = input.data();
    T* dst = out.mutable_data();
    const auto pick = detail::branches(out.numel());
    std::size_t o = 0;
    for (std::int64_t plane = 0; plane < in.b * in.c; ++plane) {
        const std::int64_t base = plane * in.h * in.w;
        for (std::int64_t oy = 0; oy < out_h; ++oy)
            for (std::int64_t ox = 0; ox < out_w; ++ox, ++o) {
                const std::uint32_t win = pick.choose(o, [&] {
                    T best = -std::numeric_limits<T>::infinity();
                    std::int64_t best_k = -1;
                    for (std::int64_t ky = 0; ky < kernel; ++ky) {
                        const std::int64_t y = oy * stride + ky - pad_top;
                        if (y < 0 || y >= in.h)
                            continue;
                        for (std::int64_t kx = 0; kx < kernel; ++kx) {
                            const std::int64_t x = ox * stride + kx - pad_left;
                            if (x < 0 || x >= in.w)
                                continue;
                            const T v = src[base + y * in.w + x];
                            if (best_k < 0 || v > best) {
                                best = v;
                                best_k = ky * kernel + kx;
                            }
                        }
                    }
                    return best_k;
                });
                const std::int64_t idx =
                    base + (oy * stride + win / kernel - pad_top) * in.w + ox * stride + win % kernel - pad_left;
                dst[o] = src[idx];
                argmax[o] = idx;
            }
    }

    if (auto* tape = detail::recording_tape<T>({&input})) {
        tape->record(out, [input, out, argmax = std::move(argmax)]() mutable {
            if (!out.has_grad())
                return;
            auto gi = input.mutable_grad();
            auto go = out.grad();
            for (std::size_t i = 0; i < go.size(); ++i)
                gi[static_cast<std::size_t>(argmax[i])] += go[i];
        });
    }
    return out;
}

/// Rectifier used inside the backbone.
template <class T>
Tensor<T> relu(const Tensor<T>& input)
{
    auto out = Tensor<T>::uninitialized(input.shape());
    auto src = input.values();
    auto dst = out.mutable_values();
    const auto pick = detail::branches(src.size());
    for (std::size_t i = 0; i < src.size(); ++i)
        dst[i] = pick.choose(i, [&] { return src[i] > T(0); }) ? src[i] : T(0);
    if (auto* tape = detail::recording_tape<T>({&input})) {
        tape->record(out, [input, out]() mutable {
            if (!out.has_grad())
                return;
            auto gi = input.mutable_grad();
            auto go = out.grad();
            auto x = input.values();
            for (std::size_t i = 0; i < go.size(); ++i)
                if (x[i] > T(0))
                    gi[i] += go[i];
        });
    }
    return out;
}

/// Parametric rectifier with one learnable negative-side slope per channel.
/// The channel axis is 1 for rank-4 tensors and 0 otherwise.
template <class T>
Tensor<T> prelu(const Tensor<T>& input, const Tensor<T>& slope)
{
    const std::size_t axis = detail::channel_axis(input.rank());
    const std::int64_t channels = input.dim(axis);
    if (static_cast<std::int64_t>(slope.numel()) != channels)
        throw ShapeError("prelu: slope has " + std::to_string(slope.numel()) + " elements for " +
                         std::to_string(channels) + " channels");
    std::int64_t inner = 1;
    for (std::size_t d = axis + 1; d < input.rank(); ++d)
        inner *= input.dim(d);
    const std::int64_t outer = static_cast<std::int64_t>(input.numel()) / (channels * inner);

    auto out = Tensor<T>::uninitialized(input.shape());
    auto x = input.values();
    auto y = out.mutable_values();
    const auto pick = detail::branches(x.size());
    for (std::int64_t o = 0; o < outer; ++o)
        for (std::int64_t c = 0; c < channels; ++c) {
            const T s = slope[static_cast<std::size_t>(c)];
            const std::size_t base = static_cast<std::size_t>((o * channels + c) * inner);
            for (std::int64_t i = 0; i < inner; ++i) {
                const T v = x[base + i];
                y[base + i] = pick.choose(base + i, [&] { return v >= T(0); }) ? v : s * v;
            }
        }

    if (auto* tape = detail::recording_tape<T>({&input, &slope})) {
        tape->record(out, [input, slope, out, outer, channels, inner]() mutable {
            if (!out.has_grad())
                return;
            auto go = out.grad();
            auto x = input.values();
            std::vector<accum_t> ds(static_cast<std::size_t>(channels), 0);
            std::span<T> gi;
            if (input.requires_grad())
                gi = input.mutable_grad();
            for (std::int64_t o = 0; o < outer; ++o)
                for (std::int64_t c = 0; c < channels; ++c) {
                    const T s = slope[static_cast<std::size_t>(c)];
                    const std::size_t base = static_cast<std::size_t>((o * channels + c) * inner);
                    for (std::int64_t i = 0; i < inner; ++i) {
                        const T v = x[base + i];
                        const T g = go[base + i];
                        if (v >= T(0)) {
                            if (!gi.empty())
                                gi[base + i] += g;
                        } else {
                            if (!gi.empty())
                                gi[base + i] += s * g;
                            ds[static_cast<std::size_t>(c)] += static_cast<accum_t>(v) * g;
                        }
                    }
                }
            if (slope.requires_grad())
                detail::add_into_grad<T, accum_t>(slope, ds);
        });
    }
    return out;
}

/// Clamp to [lo, hi]; the gradient passes through inside the closed interval
/// and is zero outside it.
template <class T>
Tensor<T> clamp(const Tensor<T>& input, T lo, T hi)
{
    auto out = Tensor<T>::uninitialized(input.shape());
    auto x = input.values();
    auto y = out.mutable_values();
    const auto pick = detail::branches(x.size());
    for (std::size_t i = 0; i < x.size(); ++i) {
        const auto region = pick.choose(i, [&] { return x[i] < lo ? 0 : x[i] > hi ? 2 : 1; });
        y[i] = region == 0 ? lo : region == 2 ? hi : x[i];
    }
    if (auto* tape = detail::recording_tape<T>({&input})) {
        tape->record(out, [input, out, lo, hi]() mutable {
            if (!out.has_grad())
                return;
            auto gi = input.mutable_grad();
            auto go = out.grad();
            auto x = input.values();
            for (std::size_t i = 0; i < go.size(); ++i)
                if (x[i] >= lo && x[i] <= hi)
                    gi[i] += go[i];
        });
    }
    return out;
}

namespace detail {

struct ChannelLayout {
    std::int64_t outer, channels, inner;
};

template <class T>
ChannelLayout channel_layout(const Tensor<T>& t)
{
    const std::size_t axis = channel_axis(t.rank());
    std::int64_t outer = 1, inner = 1;
    for (std::size_t d = 0; d < axis; ++d)
        outer *= t.dim(d);
    for (std::size_t d = axis + 1; d < t.rank(); ++d)
        inner *= t.dim(d);
    return {outer, t.dim(axis), inner};
}

} // namespace detail

/// Concatenate along the channel axis; part k occupies a contiguous slab in
/// the order given.
template <class T>
Tensor<T> concat_channels(const std::vector<Tensor<T>>& parts)
{
    if (parts.empty())
        throw ShapeError("concat_channels: no parts");
    const std::size_t axis = detail::channel_axis(parts[0].rank());
    Shape shape = parts[0].shape();
    std::int64_t total = 0;
    for (const auto& p : parts) {
        if (p.rank() != shape.size())
            throw ShapeError("concat_channels: rank mismatch");
        for (std::size_t d = 0; d < shape.size(); ++d)
            if (d != axis && p.dim(d) != shape[d])
                throw ShapeError("concat_channels: spatial mismatch " + to_string(p.shape()) + " vs " +
                                 to_string(shape));
        total += p.dim(axis);
    }
    shape[axis] = total;
    auto out = Tensor<T>::uninitialized(shape);
    const auto lay = detail::channel_layout(out);
    std::vector<std::int64_t> offsets;
    std::int64_t offset = 0;
    for (const auto& p : parts) {
        offsets.push_back(offset);
        const auto pl = detail::channel_layout(p);
        const std::int64_t slab = pl.channels * pl.inner;
        for (std::int64_t o = 0; o < lay.outer; ++o)
            std::copy_n(p.data() + o * slab, slab, out.mutable_data() + (o * lay.channels + offset) * lay.inner);
        offset += pl.channels;
    }

    bool any = false;
    for (const auto& p : parts)
        any = any || p.requires_grad();
    auto* tape = Tape<T>::active();
    if (tape && any) {
        tape->record(out, [parts, out, offsets = std::move(offsets), lay]() mutable {
            if (!out.has_grad())
                return;
            for (std::size_t k = 0; k < parts.size(); ++k) {
                auto& p = parts[k];
                if (!p.requires_grad())
                    continue;
                const auto pl = detail::channel_layout(p);
                const std::int64_t slab = pl.channels * pl.inner;
                auto gp = p.mutable_grad();
                auto go = out.grad();
                for (std::int64_t o = 0; o < lay.outer; ++o) {
                    const std::size_t src = static_cast<std::size_t>((o * lay.channels + offsets[k]) * lay.inner);
                    const std::size_t dst = static_cast<std::size_t>(o * slab);
                    for (std::int64_t i = 0; i < slab; ++i)
                        gp[dst + i] += go[src + i];
                }
            }
        });
    }
    return out;
}

/// Channels [begin, end) of `input`.
template <class T>
Tensor<T> slice_channels(const Tensor<T>& input, std::int64_t begin, std::int64_t end)
{
    const auto lay = detail::channel_layout(input);
    if (begin < 0 || end > lay.channels || begin >= end)
        throw ShapeError("slice_channels: invalid range");
    Shape shape = input.shape();
    shape[detail::channel_axis(input.rank())] = end - begin;
    auto out = Tensor<T>::uninitialized(shape);
    const std::int64_t slab = (end - begin) * lay.inner;
    for (std::int64_t o = 0; o < lay.outer; ++o)
        std::copy_n(input.data() + (o * lay.channels + begin) * lay.inner, slab, out.mutable_data() + o * slab);
    if (auto* tape = detail::recording_tape<T>({&input})) {
        tape->record(out, [input, out, lay, begin, slab]() mutable {
            if (!out.has_grad())
                return;
            auto gi = input.mutable_grad();
            auto go = out.grad();
            for (std::int64_t o = 0; o < lay.outer; ++o) {
                const std::size_t dst = static_cast<std::size_t>((o * lay.channels + begin) * lay.inner);
                for (std::int64_t i = 0; i < slab; ++i)
                    gi[dst + i] += go[static_cast<std::size_t>(o * slab + i)];
            }
        });
    }
    return out;
}

enum class BinaryOp { add, sub, mul, div, max };

/// Pointwise binary op on identically shaped tensors. Division by an exact
/// zero is an error; max routes ties to `a`.
template <class T>
Tensor<T> elementwise(BinaryOp op, const Tensor<T>& a, const Tensor<T>& b)
{
    detail::require_same_shape(a, b, "elementwise");
    auto out = Tensor<T>::uninitialized(a.shape());
    auto x = a.values();
    auto y = b.values();
    auto z = out.mutable_values();
    switch (op) {
    case BinaryOp::add:
        for (std::size_t i = 0; i < z.size(); ++i)
            z[i] = x[i] + y[i];
        break;
    case BinaryOp::sub:
        for (std::size_t i = 0; i < z.size(); ++i)
            z[i] = x[i] - y[i];
        break;
    case BinaryOp::mul:
        for (std::size_t i = 0; i < z.size(); ++i)
            z[i] = x[i] * y[i];
        break;
    case BinaryOp::div:
        for (std::size_t i = 0; i < z.size(); ++i) {
            if (y[i] == T(0))
                throw NumericError("elementwise div: zero denominator");
            z[i] = x[i] / y[i];
        }
        break;
    case BinaryOp::max: {
        const auto pick = detail::branches(z.size());
        for (std::size_t i = 0; i < z.size(); ++i)
            z[i] = pick.choose(i, [&] { return x[i] >= y[i]; }) ? x[i] : y[i];
        break;
    }
    }
    detail::check_finite(out, "elementwise");

    if (auto* tape = detail::recording_tape<T>({&a, &b})) {
        tape->record(out, [op, a, b, out]() mutable {
            if (!out.has_grad())
                return;
            auto go = out.grad();
            auto x = a.values();
            auto y = b.values();
            std::span<T> ga, gb;
            if (a.requires_grad())
                ga = a.mutable_grad();
            if (b.requires_grad())
                gb = b.mutable_grad();
            for (std::size_t i = 0; i < go.size(); ++i) {
                const T g = go[i];
                T da = 0, db = 0;
                switch (op) {
                case BinaryOp::add: da = g; db = g; break;
                case BinaryOp::sub: da = g; db = -g; break;
                case BinaryOp::mul: da = g * y[i]; db = g * x[i]; break;
                case BinaryOp::div: da = g / y[i]; db = -g * x[i] / (y[i] * y[i]); break;
                case BinaryOp::max:
                    if (x[i] >= y[i])
                        da = g;
                    else
                        db = g;
                    break;
                }
                if (!ga.empty())
                    ga[i] += da;
                if (!gb.empty())
                    gb[i] += db;
            }
        });
    }
    return out;
}

/// out = scale * input + shift, the scalar variants of add/sub/mul.
template <class T>
Tensor<T> affine(const Tensor<T>& input, T scale, T shift)
{
    auto out = Tensor<T>::uninitialized(input.shape());
    auto x = input.values();
    auto y = out.mutable_values();
    for (std::size_t i = 0; i < x.size(); ++i)
        y[i] = scale * x[i] + shift;
    if (auto* tape = detail::recording_tape<T>({&input})) {
        tape->record(out, [input, out, scale]() mutable {
            if (!out.has_grad())
                return;
            auto gi = input.mutable_grad();
            auto go = out.grad();
            for (std::size_t i = 0; i < go.size(); ++i)
                gi[i] += scale * go[i];
        });
    }
    return out;
}

template <class T>
Tensor<T> operator+(const Tensor<T>& a, const Tensor<T>& b) { return elementwise(BinaryOp::add, a, b); }
template <class T>
Tensor<T> operator-(const Tensor<T>& a, const Tensor<T>& b) { return elementwise(BinaryOp::sub, a, b); }
template <class T>
Tensor<T> operator*(const Tensor<T>& a, const Tensor<T>& b) { return elementwise(BinaryOp::mul, a, b); }
template <class T>
Tensor<T> operator/(const Tensor<T>& a, const Tensor<T>& b) { return elementwise(BinaryOp::div, a, b); }
template <class T>
Tensor<T> maximum(const Tensor<T>& a, const Tensor<T>& b) { return elementwise(BinaryOp::max, a, b); }

template <class T>
Tensor<T> operator+(const Tensor<T>& a, T s) { return affine(a, T(1), s); }
template <class T>
Tensor<T> operator-(const Tensor<T>& a, T s) { return affine(a, T(1), -s); }
template <class T>
Tensor<T> operator-(T s, const Tensor<T>& a) { return affine(a, T(-1), s); }
template <class T>
Tensor<T> operator*(const Tensor<T>& a, T s) { return affine(a, s, T(0)); }
template <class T>
Tensor<T> operator*(T s, const Tensor<T>& a) { return affine(a, s, T(0)); }

/// Sum of all elements as a one-element tensor.
template <class T>
Tensor<T> sum(const Tensor<T>& input)
{
    accum_t acc = 0;
    for (T v : input.values())
        acc += v;
    Tensor<T> out = Tensor<T>::scalar(static_cast<T>(acc));
    detail::check_finite(out, "sum");
    if (auto* tape = detail::recording_tape<T>({&input})) {
        tape->record(out, [input, out]() mutable {
            if (!out.has_grad())
                return;
            const T g = out.grad()[0];
            for (auto& v : input.mutable_grad())
                v += g;
        });
    }
    return out;
}

/// Sum of squared elements as a one-element tensor.
template <class T>
Tensor<T> sum_squares(const Tensor<T>& input)
{
    accum_t acc = 0;
    for (T v : input.values())
        acc += static_cast<accum_t>(v) * v;
    Tensor<T> out = Tensor<T>::scalar(static_cast<T>(acc));
    detail::check_finite(out, "sum_squares");
    if (auto* tape = detail::recording_tape<T>({&input})) {
        tape->record(out, [input, out]() mutable {
            if (!out.has_grad())
                return;
            const T g = out.grad()[0];
            auto gi = input.mutable_grad();
            auto x = input.values();
            for (std::size_t i = 0; i < gi.size(); ++i)
                gi[i] += T(2) * g * x[i];
        });
    }
    return out;
}

} // namespace desnow
