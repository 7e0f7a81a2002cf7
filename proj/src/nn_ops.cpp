#include "sqseg/nn_ops.hpp"

#include <algorithm>
#include <cmath>
#include <limits>
#include <stdexcept>
#include <string>

namespace sqseg {

namespace {

int div_floor(int a, int b) {  // b > 0
    int q = a / b;
    if ((a % b != 0) && ((a < 0) != (b < 0))) --q;
    return q;
}

int div_ceil(int a, int b) {  // b > 0
    return -div_floor(-a, b);
}

void check_conv_args(const char* op, const TensorT<float>*, const ConvSpec& spec) {
    (void)op;
    (void)spec;
}

template <class T>
void validate_conv(const char* op, const TensorT<T>& x, const TensorT<T>& w,
                   std::span<const T> bias, const ConvSpec& spec, bool transposed) {
    if (spec.kh < 1 || spec.kw < 1 || spec.stride < 1 || spec.pad < 0) {
        throw std::invalid_argument(std::string(op) + ": bad spec (k=" + std::to_string(spec.kh) +
                                    "x" + std::to_string(spec.kw) + ", s=" +
                                    std::to_string(spec.stride) + ", p=" + std::to_string(spec.pad) +
                                    ")");
    }
    const int expect_first = transposed ? x.c : spec.out_channels;
    const int expect_second = transposed ? spec.out_channels : x.c;
    if (w.n != expect_first || w.c != expect_second || w.h != spec.kh || w.w != spec.kw) {
        throw std::invalid_argument(std::string(op) + ": weight dims " +
                                    dims_to_string(w.n, w.c, w.h, w.w) + " do not match input " +
                                    dims_to_string(x.n, x.c, x.h, x.w) + " and spec");
    }
    if (static_cast<int>(bias.size()) != spec.out_channels) {
        throw std::invalid_argument(std::string(op) + ": bias length " +
                                    std::to_string(bias.size()) + " != out channels " +
                                    std::to_string(spec.out_channels));
    }
}

}  // namespace

template <class T>
TensorT<T> conv2d_forward(const TensorT<T>& x, const TensorT<T>& w, std::span<const T> bias,
                          const ConvSpec& spec) {
    validate_conv("conv2d_forward", x, w, bias, spec, false);
    const int s = spec.stride, p = spec.pad, kh = spec.kh, kw = spec.kw;
    const int oh = conv_out_size(x.h, kh, s, p);
    const int ow = conv_out_size(x.w, kw, s, p);
    if (oh < 1 || ow < 1) {
        throw std::invalid_argument("conv2d_forward: non-positive output size for input " +
                                    dims_to_string(x.n, x.c, x.h, x.w));
    }
    TensorT<T> y(x.n, spec.out_channels, oh, ow);

    for (int n = 0; n < x.n; ++n) {
        for (int o = 0; o < spec.out_channels; ++o) {
            T* yp = y.plane(n, o);
            std::fill_n(yp, static_cast<std::size_t>(oh) * ow, bias[o]);
            for (int c = 0; c < x.c; ++c) {
                const T* xp = x.plane(n, c);
                for (int u = 0; u < kh; ++u) {
                    const int i_lo = std::max(0, div_ceil(p - u, s));
                    const int i_hi = std::min(oh - 1, div_floor(x.h - 1 + p - u, s));
                    for (int v = 0; v < kw; ++v) {
                        const T wv = w.at(o, c, u, v);
                        const int j_lo = std::max(0, div_ceil(p - v, s));
                        const int j_hi = std::min(ow - 1, div_floor(x.w - 1 + p - v, s));
                        for (int i = i_lo; i <= i_hi; ++i) {
                            const T* xrow = xp + static_cast<std::size_t>(i * s - p + u) * x.w;
                            T* yrow = yp + static_cast<std::size_t>(i) * ow;
                            if (s == 1) {
                                const int off = v - p;
                                for (int j = j_lo; j <= j_hi; ++j) yrow[j] += wv * xrow[j + off];
                            } else {
                                for (int j = j_lo; j <= j_hi; ++j)
                                    yrow[j] += wv * xrow[j * s - p + v];
                            }
                        }
                    }
                }
            }
        }
    }
    return y;
}

template <class T>
ConvGrads<T> conv2d_backward(const TensorT<T>& x, const TensorT<T>& w, const ConvSpec& spec,
                             const TensorT<T>& grad_y) {
    std::vector<T> dummy_bias(static_cast<std::size_t>(spec.out_channels), T(0));
    validate_conv("conv2d_backward", x, w, std::span<const T>(dummy_bias), spec, false);
    const int s = spec.stride, p = spec.pad, kh = spec.kh, kw = spec.kw;
    const int oh = conv_out_size(x.h, kh, s, p);
    const int ow = conv_out_size(x.w, kw, s, p);
    if (grad_y.n != x.n || grad_y.c != spec.out_channels || grad_y.h != oh || grad_y.w != ow) {
        throw std::invalid_argument("conv2d_backward: grad_y dims " +
                                    dims_to_string(grad_y.n, grad_y.c, grad_y.h, grad_y.w) +
                                    " do not match forward output");
    }

    ConvGrads<T> g;
    g.grad_x = TensorT<T>(x.n, x.c, x.h, x.w);
    g.grad_w = TensorT<T>(w.n, w.c, w.h, w.w);
    g.grad_b.assign(static_cast<std::size_t>(spec.out_channels), T(0));

    for (int n = 0; n < x.n; ++n) {
        for (int o = 0; o < spec.out_channels; ++o) {
            const T* gyp = grad_y.plane(n, o);

            T bacc = 0;
            for (std::size_t k = 0; k < static_cast<std::size_t>(oh) * ow; ++k) bacc += gyp[k];
            g.grad_b[o] += bacc;

            for (int c = 0; c < x.c; ++c) {
                const T* xp = x.plane(n, c);
                T* gxp = g.grad_x.plane(n, c);
                for (int u = 0; u < kh; ++u) {
                    const int i_lo = std::max(0, div_ceil(p - u, s));
                    const int i_hi = std::min(oh - 1, div_floor(x.h - 1 + p - u, s));
                    for (int v = 0; v < kw; ++v) {
                        const int j_lo = std::max(0, div_ceil(p - v, s));
                        const int j_hi = std::min(ow - 1, div_floor(x.w - 1 + p - v, s));
                        const T wv = w.at(o, c, u, v);
                        T wacc = 0;
                        for (int i = i_lo; i <= i_hi; ++i) {
                            const T* xrow = xp + static_cast<std::size_t>(i * s - p + u) * x.w;
                            T* gxrow = gxp + static_cast<std::size_t>(i * s - p + u) * x.w;
                            const T* gyrow = gyp + static_cast<std::size_t>(i) * ow;
                            if (s == 1) {
                                const int off = v - p;
                                for (int j = j_lo; j <= j_hi; ++j) {
                                    wacc += gyrow[j] * xrow[j + off];
                                    gxrow[j + off] += wv * gyrow[j];
                                }
                            } else {
                                for (int j = j_lo; j <= j_hi; ++j) {
                                    wacc += gyrow[j] * xrow[j * s - p + v];
                                    gxrow[j * s - p + v] += wv * gyrow[j];
                                }
                            }
                        }
                        g.grad_w.at(o, c, u, v) += wacc;
                    }
                }
            }
        }
    }
    return g;
}

template <class T>
TensorT<T> deconv2d_forward(const TensorT<T>& x, const TensorT<T>& w, std::span<const T> bias,
                            const ConvSpec& spec) {
    validate_conv("deconv2d_forward", x, w, bias, spec, true);
    const int s = spec.stride, p = spec.pad, kh = spec.kh, kw = spec.kw;
    const int oh = deconv_out_size(x.h, kh, s, p);
    const int ow = deconv_out_size(x.w, kw, s, p);
    if (oh < 1 || ow < 1) {
        throw std::invalid_argument("deconv2d_forward: non-positive output size for input " +
                                    dims_to_string(x.n, x.c, x.h, x.w));
    }

    if (p <= std::min(kh, kw) - 1) {
        // Equivalent stride-1 convolution over the zero-stuffed input with the
        // flipped, transposed kernel; reuses the vectorized conv path.
        const int sh = (x.h - 1) * s + 1;
        const int sw = (x.w - 1) * s + 1;
        TensorT<T> stuffed(x.n, x.c, sh, sw);
        for (int n = 0; n < x.n; ++n) {
            for (int c = 0; c < x.c; ++c) {
                const T* xp = x.plane(n, c);
                T* sp = stuffed.plane(n, c);
                for (int i = 0; i < x.h; ++i) {
                    for (int j = 0; j < x.w; ++j) {
                        sp[static_cast<std::size_t>(i * s) * sw + j * s] =
                            xp[static_cast<std::size_t>(i) * x.w + j];
                    }
                }
            }
        }
        TensorT<T> wflip(spec.out_channels, x.c, kh, kw);
        for (int c = 0; c < x.c; ++c) {
            for (int o = 0; o < spec.out_channels; ++o) {
                for (int u = 0; u < kh; ++u) {
                    for (int v = 0; v < kw; ++v) {
                        wflip.at(o, c, kh - 1 - u, kw - 1 - v) = w.at(c, o, u, v);
                    }
                }
            }
        }
        ConvSpec eq{spec.out_channels, kh, kw, 1, 0};
        eq.pad = std::min(kh, kw) - 1 - p;
        // kh == kw everywhere in this toolkit; assert rather than silently
        // mis-pad a rectangular kernel.
        if (kh != kw) {
            eq.pad = kh - 1 - p;
            if (kw - 1 - p != eq.pad) {
                throw std::invalid_argument("deconv2d_forward: rectangular kernels unsupported");
            }
        }
        return conv2d_forward(stuffed, wflip, bias, eq);
    }

    // Scatter fallback for exotic padding.
    TensorT<T> y(x.n, spec.out_channels, oh, ow);
    for (int n = 0; n < x.n; ++n) {
        for (int o = 0; o < spec.out_channels; ++o) {
            T* yp = y.plane(n, o);
            std::fill_n(yp, static_cast<std::size_t>(oh) * ow, bias[o]);
            for (int c = 0; c < x.c; ++c) {
                const T* xp = x.plane(n, c);
                for (int u = 0; u < kh; ++u) {
                    for (int v = 0; v < kw; ++v) {
                        const T wv = w.at(c, o, u, v);
                        for (int i = 0; i < x.h; ++i) {
                            const int oi = i * s - p + u;
                            if (oi < 0 || oi >= oh) continue;
                            T* yrow = yp + static_cast<std::size_t>(oi) * ow;
                            const T* xrow = xp + static_cast<std::size_t>(i) * x.w;
                            for (int j = 0; j < x.w; ++j) {
                                const int oj = j * s - p + v;
                                if (oj < 0 || oj >= ow) continue;
                                yrow[oj] += wv * xrow[j];
                            }
                        }
                    }
                }
            }
        }
    }
    return y;
}

template <class T>
ConvGrads<T> deconv2d_backward(const TensorT<T>& x, const TensorT<T>& w, const ConvSpec& spec,
                               const TensorT<T>& grad_y) {
    std::vector<T> dummy_bias(static_cast<std::size_t>(spec.out_channels), T(0));
    validate_conv("deconv2d_backward", x, w, std::span<const T>(dummy_bias), spec, true);
    const int s = spec.stride, p = spec.pad, kh = spec.kh, kw = spec.kw;
    const int oh = deconv_out_size(x.h, kh, s, p);
    const int ow = deconv_out_size(x.w, kw, s, p);
    if (grad_y.n != x.n || grad_y.c != spec.out_channels || grad_y.h != oh || grad_y.w != ow) {
        throw std::invalid_argument("deconv2d_backward: grad_y dims " +
                                    dims_to_string(grad_y.n, grad_y.c, grad_y.h, grad_y.w) +
                                    " do not match forward output");
    }

    ConvGrads<T> g;
    // grad_x is an ordinary strided convolution of grad_y with w, whose
    // (in_c, out_c, kh, kw) layout already matches conv2d_forward's
    // (out, in, kh, kw) expectation for this direction.
    std::vector<T> zeros(static_cast<std::size_t>(x.c), T(0));
    ConvSpec back{x.c, kh, kw, s, p};
    g.grad_x = conv2d_forward(grad_y, w, std::span<const T>(zeros), back);

    g.grad_w = TensorT<T>(w.n, w.c, w.h, w.w);
    g.grad_b.assign(static_cast<std::size_t>(spec.out_channels), T(0));
    for (int n = 0; n < x.n; ++n) {
        for (int o = 0; o < spec.out_channels; ++o) {
            const T* gyp = grad_y.plane(n, o);
            T bacc = 0;
            for (std::size_t k = 0; k < static_cast<std::size_t>(oh) * ow; ++k) bacc += gyp[k];
            g.grad_b[o] += bacc;
        }
        for (int c = 0; c < x.c; ++c) {
            const T* xp = x.plane(n, c);
            for (int o = 0; o < spec.out_channels; ++o) {
                const T* gyp = grad_y.plane(n, o);
                for (int u = 0; u < kh; ++u) {
                    for (int v = 0; v < kw; ++v) {
                        T acc = 0;
                        for (int i = 0; i < x.h; ++i) {
                            const int oi = i * s - p + u;
                            if (oi < 0 || oi >= oh) continue;
                            const T* xrow = xp + static_cast<std::size_t>(i) * x.w;
                            const T* gyrow = gyp + static_cast<std::size_t>(oi) * ow;
                            for (int j = 0; j < x.w; ++j) {
                                const int oj = j * s - p + v;
                                if (oj < 0 || oj >= ow) continue;
                                acc += xrow[j] * gyrow[oj];
                            }
                        }
                        g.grad_w.at(c, o, u, v) += acc;
                    }
                }
            }
        }
    }
    return g;
}

template <class T>
std::pair<TensorT<T>, PoolRecord> maxpool_forward(const TensorT<T>& x, int k, int stride) {
    if (k < 1 || stride < 1 || stride > k) {
        throw std::invalid_argument("maxpool_forward: need 1 <= stride <= kernel");
    }
    if (x.h < k || x.w < k) {
        throw std::invalid_argument("maxpool_forward: input " +
                                    dims_to_string(x.n, x.c, x.h, x.w) + " smaller than kernel " +
                                    std::to_string(k));
    }
    PoolRecord rec;
    rec.n = x.n;
    rec.c = x.c;
    rec.in_h = x.h;
    rec.in_w = x.w;
    rec.out_h = pool_out_size_ceil(x.h, k, stride);
    rec.out_w = pool_out_size_ceil(x.w, k, stride);
    rec.indices.resize(static_cast<std::size_t>(x.n) * x.c * rec.out_h * rec.out_w);

    TensorT<T> y(x.n, x.c, rec.out_h, rec.out_w);
    for (int n = 0; n < x.n; ++n) {
        for (int c = 0; c < x.c; ++c) {
            const T* xp = x.plane(n, c);
            T* yp = y.plane(n, c);
            std::int32_t* ip = rec.indices.data() + rec.index(n, c, 0, 0);
            for (int oy = 0; oy < rec.out_h; ++oy) {
                const int y0 = oy * stride;
                const int y1 = std::min(y0 + k, x.h);
                for (int ox = 0; ox < rec.out_w; ++ox) {
                    const int x0 = ox * stride;
                    const int x1 = std::min(x0 + k, x.w);
                    T best = xp[static_cast<std::size_t>(y0) * x.w + x0];
                    std::int32_t best_idx = static_cast<std::int32_t>(y0 * x.w + x0);
                    for (int iy = y0; iy < y1; ++iy) {
                        for (int ix = x0; ix < x1; ++ix) {
                            const T v = xp[static_cast<std::size_t>(iy) * x.w + ix];
                            if (v > best) {
                                best = v;
                                best_idx = static_cast<std::int32_t>(iy * x.w + ix);
                            }
                        }
                    }
                    yp[static_cast<std::size_t>(oy) * rec.out_w + ox] = best;
                    ip[static_cast<std::size_t>(oy) * rec.out_w + ox] = best_idx;
                }
            }
        }
    }
    return {std::move(y), std::move(rec)};
}

namespace {

void validate_pooled_dims(const char* op, const PoolRecord& rec, int n, int c, int h, int w) {
    if (n != rec.n || c != rec.c || h != rec.out_h || w != rec.out_w) {
        throw std::invalid_argument(std::string(op) + ": tensor " + dims_to_string(n, c, h, w) +
                                    " does not match record " +
                                    dims_to_string(rec.n, rec.c, rec.out_h, rec.out_w));
    }
}

}  // namespace

template <class T>
TensorT<T> maxpool_backward(const PoolRecord& rec, const TensorT<T>& grad_y) {
    validate_pooled_dims("maxpool_backward", rec, grad_y.n, grad_y.c, grad_y.h, grad_y.w);
    TensorT<T> gx(rec.n, rec.c, rec.in_h, rec.in_w);
    const std::size_t in_plane = static_cast<std::size_t>(rec.in_h) * rec.in_w;
    const std::size_t out_plane = static_cast<std::size_t>(rec.out_h) * rec.out_w;
    for (int n = 0; n < rec.n; ++n) {
        for (int c = 0; c < rec.c; ++c) {
            const T* gyp = grad_y.plane(n, c);
            T* gxp = gx.plane(n, c);
            const std::int32_t* ip = rec.indices.data() + rec.index(n, c, 0, 0);
            for (std::size_t k = 0; k < out_plane; ++k) {
                const std::int32_t idx = ip[k];
                if (idx < 0 || static_cast<std::size_t>(idx) >= in_plane) {
                    throw std::invalid_argument("maxpool_backward: corrupt record index " +
                                                std::to_string(idx));
                }
                gxp[idx] += gyp[k];
            }
        }
    }
    return gx;
}

template <class T>
TensorT<T> max_unpool(const TensorT<T>& x, const PoolRecord& rec) {
    validate_pooled_dims("max_unpool", rec, x.n, x.c, x.h, x.w);
    TensorT<T> y(rec.n, rec.c, rec.in_h, rec.in_w);
    const std::size_t in_plane = static_cast<std::size_t>(rec.in_h) * rec.in_w;
    const std::size_t out_plane = static_cast<std::size_t>(rec.out_h) * rec.out_w;
    for (int n = 0; n < rec.n; ++n) {
        for (int c = 0; c < rec.c; ++c) {
            const T* xp = x.plane(n, c);
            T* yp = y.plane(n, c);
            const std::int32_t* ip = rec.indices.data() + rec.index(n, c, 0, 0);
            for (std::size_t k = 0; k < out_plane; ++k) {
                const std::int32_t idx = ip[k];
                if (idx < 0 || static_cast<std::size_t>(idx) >= in_plane) {
                    throw std::invalid_argument("max_unpool: corrupt record index " +
                                                std::to_string(idx));
                }
                yp[idx] = xp[k];  // row-major scan; duplicate targets keep the last write
            }
        }
    }
    return y;
}

template <class T>
TensorT<T> max_unpool_backward(const PoolRecord& rec, const TensorT<T>& grad_y) {
    if (grad_y.n != rec.n || grad_y.c != rec.c || grad_y.h != rec.in_h || grad_y.w != rec.in_w) {
        throw std::invalid_argument("max_unpool_backward: grad dims " +
                                    dims_to_string(grad_y.n, grad_y.c, grad_y.h, grad_y.w) +
                                    " do not match record target " +
                                    dims_to_string(rec.n, rec.c, rec.in_h, rec.in_w));
    }
    TensorT<T> gx(rec.n, rec.c, rec.out_h, rec.out_w);
    const std::size_t in_plane = static_cast<std::size_t>(rec.in_h) * rec.in_w;
    const std::size_t out_plane = static_cast<std::size_t>(rec.out_h) * rec.out_w;
    // Replays the forward scan to find, per target position, the pooled element
    // whose write survived; only that element receives gradient.
    std::vector<std::int32_t> winner(in_plane);
    for (int n = 0; n < rec.n; ++n) {
        for (int c = 0; c < rec.c; ++c) {
            std::fill(winner.begin(), winner.end(), -1);
            const std::int32_t* ip = rec.indices.data() + rec.index(n, c, 0, 0);
            for (std::size_t k = 0; k < out_plane; ++k) {
                const std::int32_t idx = ip[k];
                if (idx < 0 || static_cast<std::size_t>(idx) >= in_plane) {
                    throw std::invalid_argument("max_unpool_backward: corrupt record index " +
                                                std::to_string(idx));
                }
                winner[idx] = static_cast<std::int32_t>(k);
            }
            const T* gyp = grad_y.plane(n, c);
            T* gxp = gx.plane(n, c);
            for (std::size_t k = 0; k < out_plane; ++k) {
                const std::int32_t idx = ip[k];
                gxp[k] = (winner[idx] == static_cast<std::int32_t>(k)) ? gyp[idx] : T(0);
            }
        }
    }
    return gx;
}

template <class T>
TensorT<T> relu(const TensorT<T>& x) {
    TensorT<T> y(x.n, x.c, x.h, x.w);
    for (std::size_t i = 0; i < x.data.size(); ++i) y.data[i] = x.data[i] > T(0) ? x.data[i] : T(0);
    return y;
}

template <class T>
TensorT<T> relu_backward(const TensorT<T>& x, const TensorT<T>& grad_y) {
    if (!x.same_dims(grad_y)) throw std::invalid_argument("relu_backward: dims mismatch");
    TensorT<T> gx(x.n, x.c, x.h, x.w);
    for (std::size_t i = 0; i < x.data.size(); ++i)
        gx.data[i] = x.data[i] > T(0) ? grad_y.data[i] : T(0);
    return gx;
}

template <class T>
TensorT<T> relu_backward_from_act(const TensorT<T>& act, const TensorT<T>& grad_y) {
    return relu_backward(act, grad_y);
}

template <class T>
TensorT<T> crop_center(const TensorT<T>& x, int border) {
    if (border < 0) throw std::invalid_argument("crop_center: negative border");
    if (border == 0) return x;
    if (x.h <= 2 * border || x.w <= 2 * border) {
        throw std::invalid_argument("crop_center: border " + std::to_string(border) +
                                    " leaves no interior of " + dims_to_string(x.n, x.c, x.h, x.w));
    }
    TensorT<T> y(x.n, x.c, x.h - 2 * border, x.w - 2 * border);
    for (int n = 0; n < x.n; ++n) {
        for (int c = 0; c < x.c; ++c) {
            const T* xp = x.plane(n, c);
            T* yp = y.plane(n, c);
            for (int i = 0; i < y.h; ++i) {
                std::copy_n(xp + static_cast<std::size_t>(i + border) * x.w + border, y.w,
                            yp + static_cast<std::size_t>(i) * y.w);
            }
        }
    }
    return y;
}

template <class T>
TensorT<T> crop_center_backward(const TensorT<T>& grad_y, int border) {
    if (border < 0) throw std::invalid_argument("crop_center_backward: negative border");
    if (border == 0) return grad_y;
    TensorT<T> gx(grad_y.n, grad_y.c, grad_y.h + 2 * border, grad_y.w + 2 * border);
    for (int n = 0; n < grad_y.n; ++n) {
        for (int c = 0; c < grad_y.c; ++c) {
            const T* gp = grad_y.plane(n, c);
            T* xp = gx.plane(n, c);
            for (int i = 0; i < grad_y.h; ++i) {
                std::copy_n(gp + static_cast<std::size_t>(i) * grad_y.w, grad_y.w,
                            xp + static_cast<std::size_t>(i + border) * gx.w + border);
            }
        }
    }
    return gx;
}

template <class T>
std::pair<TensorT<T>, TensorT<T>> dropout(const TensorT<T>& x, double p, Rng& rng, bool training) {
    if (p < 0.0 || p >= 1.0) throw std::invalid_argument("dropout: p must be in [0, 1)");
    TensorT<T> mask(x.n, x.c, x.h, x.w, T(1));
    if (!training || p == 0.0) {
        return {x, std::move(mask)};
    }
    const T scale = static_cast<T>(1.0 / (1.0 - p));
    TensorT<T> y(x.n, x.c, x.h, x.w);
    for (std::size_t i = 0; i < x.data.size(); ++i) {
        const T m = rng.next_double() < p ? T(0) : scale;
        mask.data[i] = m;
        y.data[i] = x.data[i] * m;
    }
    return {std::move(y), std::move(mask)};
}

template <class T>
TensorT<T> dropout_backward(const TensorT<T>& mask, const TensorT<T>& grad_y) {
    if (!mask.same_dims(grad_y)) throw std::invalid_argument("dropout_backward: dims mismatch");
    TensorT<T> gx(mask.n, mask.c, mask.h, mask.w);
    for (std::size_t i = 0; i < mask.data.size(); ++i) gx.data[i] = mask.data[i] * grad_y.data[i];
    return gx;
}

template <class T>
LossOutput<T> softmax_cross_entropy(const TensorT<T>& logits, const LabelMap& labels,
                                    std::span<const T> class_weights, int ignore_id) {
    const int K = logits.c;
    if (labels.n != logits.n || labels.h != logits.h || labels.w != logits.w) {
        throw std::invalid_argument("softmax_cross_entropy: label grid " +
                                    dims_to_string(labels.n, 1, labels.h, labels.w) +
                                    " does not match logits " +
                                    dims_to_string(logits.n, logits.c, logits.h, logits.w));
    }
    if (static_cast<int>(class_weights.size()) != K) {
        throw std::invalid_argument("softmax_cross_entropy: weight vector length " +
                                    std::to_string(class_weights.size()) + " != classes " +
                                    std::to_string(K));
    }
    for (T wk : class_weights) {
        if (!(wk >= T(0))) throw std::invalid_argument("softmax_cross_entropy: negative weight");
    }

    LossOutput<T> out;
    out.grad_logits = TensorT<T>(logits.n, logits.c, logits.h, logits.w);
    const std::size_t plane = static_cast<std::size_t>(logits.h) * logits.w;

    double loss_sum = 0.0;
    double weight_sum = 0.0;

    // First pass stores per-pixel probabilities into grad_logits; ignored
    // pixels stay zero. Second pass rescales once the weight sum is known.
    for (int n = 0; n < logits.n; ++n) {
        for (int iy = 0; iy < logits.h; ++iy) {
            for (int ix = 0; ix < logits.w; ++ix) {
                const std::int32_t label = labels.at(n, iy, ix);
                if (label == ignore_id) continue;
                if (label < 0 || label >= K) {
                    throw std::invalid_argument(
                        "softmax_cross_entropy: label id " + std::to_string(label) +
                        " out of range [0," + std::to_string(K) + ") at pixel (" +
                        std::to_string(n) + "," + std::to_string(iy) + "," + std::to_string(ix) +
                        ")");
                }
                const std::size_t base = logits.index(n, 0, iy, ix);
                double m = -std::numeric_limits<double>::infinity();
                for (int k = 0; k < K; ++k) {
                    m = std::max(m, static_cast<double>(logits.data[base + k * plane]));
                }
                double expsum = 0.0;
                for (int k = 0; k < K; ++k) {
                    expsum += std::exp(static_cast<double>(logits.data[base + k * plane]) - m);
                }
                const double log_expsum = std::log(expsum);
                for (int k = 0; k < K; ++k) {
                    const double z = static_cast<double>(logits.data[base + k * plane]) - m;
                    out.grad_logits.data[base + k * plane] =
                        static_cast<T>(std::exp(z) / expsum);
                }
                const double zl = static_cast<double>(logits.data[base + label * plane]) - m;
                const double wl = static_cast<double>(class_weights[label]);
                loss_sum += wl * (log_expsum - zl);
                weight_sum += wl;
                ++out.counted_pixels;
            }
        }
    }

    if (weight_sum <= 0.0) {
        std::fill(out.grad_logits.data.begin(), out.grad_logits.data.end(), T(0));
        out.loss = 0.0;
        return out;
    }

    out.loss = loss_sum / weight_sum;
    for (int n = 0; n < logits.n; ++n) {
        for (int iy = 0; iy < logits.h; ++iy) {
            for (int ix = 0; ix < logits.w; ++ix) {
                const std::int32_t label = labels.at(n, iy, ix);
                const std::size_t base = logits.index(n, 0, iy, ix);
                if (label == ignore_id) continue;
                const T scale = static_cast<T>(static_cast<double>(class_weights[label]) /
                                               weight_sum);
                for (int k = 0; k < K; ++k) {
                    T g = out.grad_logits.data[base + k * plane];
                    if (k == label) g -= T(1);
                    out.grad_logits.data[base + k * plane] = g * scale;
                }
            }
        }
    }
    return out;
}

template <class T>
LabelMap argmax_channels(const TensorT<T>& logits) {
    LabelMap out(logits.n, logits.h, logits.w);
    const std::size_t plane = static_cast<std::size_t>(logits.h) * logits.w;
    for (int n = 0; n < logits.n; ++n) {
        for (int iy = 0; iy < logits.h; ++iy) {
            for (int ix = 0; ix < logits.w; ++ix) {
                const std::size_t base = logits.index(n, 0, iy, ix);
                int best = 0;
                T best_v = logits.data[base];
                for (int k = 1; k < logits.c; ++k) {
                    const T v = logits.data[base + k * plane];
                    if (v > best_v) {
                        best_v = v;
                        best = k;
                    }
                }
                out.at(n, iy, ix) = best;
            }
        }
    }
    return out;
}

#define SQSEG_INSTANTIATE_NN(T)                                                                    \
    template TensorT<T> conv2d_forward<T>(const TensorT<T>&, const TensorT<T>&,                    \
                                          std::span<const T>, const ConvSpec&);                    \
    template ConvGrads<T> conv2d_backward<T>(const TensorT<T>&, const TensorT<T>&,                 \
                                             const ConvSpec&, const TensorT<T>&);                  \
    template TensorT<T> deconv2d_forward<T>(const TensorT<T>&, const TensorT<T>&,                  \
                                            std::span<const T>, const ConvSpec&);                  \
    template ConvGrads<T> deconv2d_backward<T>(const TensorT<T>&, const TensorT<T>&,               \
                                               const ConvSpec&, const TensorT<T>&);                \
    template std::pair<TensorT<T>, PoolRecord> maxpool_forward<T>(const TensorT<T>&, int, int);    \
    template TensorT<T> maxpool_backward<T>(const PoolRecord&, const TensorT<T>&);                 \
    template TensorT<T> max_unpool<T>(const TensorT<T>&, const PoolRecord&);                       \
    template TensorT<T> max_unpool_backward<T>(const PoolRecord&, const TensorT<T>&);              \
    template TensorT<T> relu<T>(const TensorT<T>&);                                                \
    template TensorT<T> relu_backward<T>(const TensorT<T>&, const TensorT<T>&);                    \
    template TensorT<T> relu_backward_from_act<T>(const TensorT<T>&, const TensorT<T>&);           \
    template TensorT<T> crop_center<T>(const TensorT<T>&, int);                                    \
    template TensorT<T> crop_center_backward<T>(const TensorT<T>&, int);                           \
    template std::pair<TensorT<T>, TensorT<T>> dropout<T>(const TensorT<T>&, double, Rng&, bool);  \
    template TensorT<T> dropout_backward<T>(const TensorT<T>&, const TensorT<T>&);                 \
    template LossOutput<T> softmax_cross_entropy<T>(const TensorT<T>&, const LabelMap&,            \
                                                    std::span<const T>, int);                      \
    template LabelMap argmax_channels<T>(const TensorT<T>&);

SQSEG_INSTANTIATE_NN(float)
SQSEG_INSTANTIATE_NN(double)

#undef SQSEG_INSTANTIATE_NN

}  // namespace sqseg
