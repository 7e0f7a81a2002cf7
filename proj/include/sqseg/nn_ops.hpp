#pragma once

#include <cstdint>
#include <span>
#include <utility>
#include <vector>

#include "sqseg/tensor.hpp"

namespace sqseg {

// Geometry of a convolution or deconvolution layer. Weight layout is
// (out_c, in_c, kh, kw) for convolution and (in_c, out_c, kh, kw) for
// deconvolution; bias has one entry per output channel.
struct ConvSpec {
    int out_channels = 0;
    int kh = 1, kw = 1;
    int stride = 1;
    int pad = 0;
};

// Argmax bookkeeping of one max-pool application: for every pooled element the
// flat h*w position of the selected maximum inside its (n, c) source plane,
// plus the pre-pool spatial size the paired unpool restores.
struct PoolRecord {
    int n = 0, c = 0;
    int out_h = 0, out_w = 0;
    int in_h = 0, in_w = 0;
    std::vector<std::int32_t> indices;  // n*c*out_h*out_w entries

    std::size_t index(int in, int ic, int oy, int ox) const {
        return ((static_cast<std::size_t>(in) * c + ic) * out_h + oy) * out_w + ox;
    }
};

template <class T>
struct ConvGrads {
    TensorT<T> grad_x;
    TensorT<T> grad_w;
    std::vector<T> grad_b;
};

template <class T>
struct LossOutput {
    double loss = 0.0;
    TensorT<T> grad_logits;
    long long counted_pixels = 0;
};

// Per-pixel class ids, shaped (n, h, w). Values are ids in [0, K) or the
// ignore id (255 throughout this toolkit).
struct LabelMap {
    int n = 1, h = 0, w = 0;
    std::vector<std::int32_t> ids;

    LabelMap() = default;
    LabelMap(int n_, int h_, int w_, std::int32_t fill = 0)
        : n(n_), h(h_), w(w_), ids(static_cast<std::size_t>(n_) * h_ * w_, fill) {}
    std::size_t index(int in, int iy, int ix) const {
        return (static_cast<std::size_t>(in) * h + iy) * w + ix;
    }
    std::int32_t& at(int in, int iy, int ix) { return ids[index(in, iy, ix)]; }
    std::int32_t at(int in, int iy, int ix) const { return ids[index(in, iy, ix)]; }
};

inline int conv_out_size(int in, int k, int stride, int pad) {
    return (in + 2 * pad - k) / stride + 1;
}
inline int deconv_out_size(int in, int k, int stride, int pad) {
    return (in - 1) * stride + k - 2 * pad;
}
// Ceil-mode pooling size; border windows are clipped at the input edge.
inline int pool_out_size_ceil(int in, int k, int stride) {
    return static_cast<int>((static_cast<long long>(in) - k + stride - 1) / stride) + 1;
}

// y[n,o,i,j] = b[o] + sum_{c,u,v} x[n,c,i*s-p+u,j*s-p+v] * w[o,c,u,v];
// out-of-range input positions contribute zero.
template <class T>
TensorT<T> conv2d_forward(const TensorT<T>& x, const TensorT<T>& w, std::span<const T> bias,
                          const ConvSpec& spec);

template <class T>
ConvGrads<T> conv2d_backward(const TensorT<T>& x, const TensorT<T>& w, const ConvSpec& spec,
                             const TensorT<T>& grad_y);

// Fractionally strided (transposed) convolution; each input element scatters
// its kernel-weighted contribution. Weight layout (in_c, out_c, kh, kw).
template <class T>
TensorT<T> deconv2d_forward(const TensorT<T>& x, const TensorT<T>& w, std::span<const T> bias,
                            const ConvSpec& spec);

template <class T>
ConvGrads<T> deconv2d_backward(const TensorT<T>& x, const TensorT<T>& w, const ConvSpec& spec,
                               const TensorT<T>& grad_y);

// Ceil-mode max pooling with argmax capture. Ties go to the smallest flat
// index within the window.
template <class T>
std::pair<TensorT<T>, PoolRecord> maxpool_forward(const TensorT<T>& x, int k = 3, int stride = 2);

// Contributions from every window that selected a position accumulate there.
template <class T>
TensorT<T> maxpool_backward(const PoolRecord& rec, const TensorT<T>& grad_y);

// Index-sharing upsample: each pooled value lands at its recorded position,
// zero elsewhere. When two pooled elements share a target, the later one in
// row-major scan order wins.
template <class T>
TensorT<T> max_unpool(const TensorT<T>& x, const PoolRecord& rec);

// Adjoint of max_unpool under the duplicate-index rule: only the element whose
// write survived receives gradient.
template <class T>
TensorT<T> max_unpool_backward(const PoolRecord& rec, const TensorT<T>& grad_y);

template <class T>
TensorT<T> relu(const TensorT<T>& x);

// Derivative at exactly zero is defined as zero.
template <class T>
TensorT<T> relu_backward(const TensorT<T>& x, const TensorT<T>& grad_y);

// Same mask as relu_backward but keyed on the post-activation value; for
// y = relu(x), y > 0 iff x > 0.
template <class T>
TensorT<T> relu_backward_from_act(const TensorT<T>& act, const TensorT<T>& grad_y);

template <class T>
TensorT<T> crop_center(const TensorT<T>& x, int border);

// Embeds the gradient back into a zero border of the given pre-crop size.
template <class T>
TensorT<T> crop_center_backward(const TensorT<T>& grad_y, int border);

// Training mode: elements are zeroed i.i.d. with probability p and survivors
// scaled by 1/(1-p); the returned mask holds those scale factors so backward
// is a plain elementwise product. Eval mode (or p = 0) is the identity.
template <class T>
std::pair<TensorT<T>, TensorT<T>> dropout(const TensorT<T>& x, double p, Rng& rng, bool training);

template <class T>
TensorT<T> dropout_backward(const TensorT<T>& mask, const TensorT<T>& grad_y);

// Mean weighted softmax cross-entropy with ignore label. The per-pixel
// contribution weight[label] * (-log softmax(logits)[label]) is normalized by
// the sum of applied weights, which keeps the loss scale invariant under
// common rescaling of the weight vector.
template <class T>
LossOutput<T> softmax_cross_entropy(const TensorT<T>& logits, const LabelMap& labels,
                                    std::span<const T> class_weights, int ignore_id);

// Per-pixel argmax over channels; ties break toward the lowest class id.
template <class T>
LabelMap argmax_channels(const TensorT<T>& logits);

}  // namespace sqseg
