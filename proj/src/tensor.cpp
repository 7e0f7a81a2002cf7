#include "sqseg/tensor.hpp"

#include <cmath>
#include <limits>
#include <numbers>
#include <stdexcept>

namespace sqseg {

namespace {

std::size_t checked_numel(int n, int c, int h, int w) {
    if (n < 1 || c < 1 || h < 1 || w < 1) {
        throw std::invalid_argument("tensor dims must all be >= 1, got " +
                                    dims_to_string(n, c, h, w));
    }
    const std::uint64_t limit = std::uint64_t(1) << 34;  // 64 GiB of floats is past any use here
    std::uint64_t numel = 1;
    for (std::uint64_t d : {std::uint64_t(n), std::uint64_t(c), std::uint64_t(h), std::uint64_t(w)}) {
        numel *= d;
        if (numel > limit) {
            throw std::invalid_argument("tensor dims overflow: " + dims_to_string(n, c, h, w));
        }
    }
    return static_cast<std::size_t>(numel);
}

}  // namespace

std::string dims_to_string(int n, int c, int h, int w) {
    return "(" + std::to_string(n) + "," + std::to_string(c) + "," + std::to_string(h) + "," +
           std::to_string(w) + ")";
}

template <class T>
TensorT<T>::TensorT(int n_, int c_, int h_, int w_, T fill)
    : n(n_), c(c_), h(h_), w(w_), data(checked_numel(n_, c_, h_, w_), fill) {}

template <class T>
double TensorT<T>::sum() const {
    double s = 0.0;
    for (T v : data) s += static_cast<double>(v);
    return s;
}

template <class T>
T TensorT<T>::max_abs() const {
    T m = 0;
    for (T v : data) m = std::max(m, std::abs(v));
    return m;
}

template <class T>
bool TensorT<T>::all_finite() const {
    for (T v : data) {
        if (!std::isfinite(static_cast<double>(v))) return false;
    }
    return true;
}

std::uint64_t Rng::next_u64() {
    // splitmix64 (Steele, Lea, Flood 2014); fixed constants, no platform variance.
    state_ += 0x9e3779b97f4a7c15ULL;
    std::uint64_t z = state_;
    z = (z ^ (z >> 30)) * 0xbf58476d1ce4e5b9ULL;
    z = (z ^ (z >> 27)) * 0x94d049bb133111ebULL;
    return z ^ (z >> 31);
}

double Rng::next_double() {
    return static_cast<double>(next_u64() >> 11) * 0x1.0p-53;
}

double Rng::next_normal() {
    if (has_spare_) {
        has_spare_ = false;
        return spare_;
    }
    // 1 - u keeps the argument of log strictly positive.
    const double u1 = 1.0 - next_double();
    const double u2 = next_double();
    const double r = std::sqrt(-2.0 * std::log(u1));
    const double theta = 2.0 * std::numbers::pi * u2;
    spare_ = r * std::sin(theta);
    has_spare_ = true;
    return r * std::cos(theta);
}

std::uint64_t Rng::next_below(std::uint64_t n) {
    if (n == 0) throw std::invalid_argument("Rng::next_below: n must be positive");
    return next_u64() % n;
}

template <class T>
TensorT<T> tensor_new(int n, int c, int h, int w, T fill) {
    return TensorT<T>(n, c, h, w, fill);
}

template <class T>
TensorT<T> concat_channels(const TensorT<T>& a, const TensorT<T>& b) {
    if (a.n != b.n || a.h != b.h || a.w != b.w) {
        throw std::invalid_argument("concat_channels: dims mismatch " +
                                    dims_to_string(a.n, a.c, a.h, a.w) + " vs " +
                                    dims_to_string(b.n, b.c, b.h, b.w));
    }
    TensorT<T> out(a.n, a.c + b.c, a.h, a.w);
    const std::size_t plane = static_cast<std::size_t>(a.h) * a.w;
    for (int in = 0; in < a.n; ++in) {
        std::copy_n(a.plane(in, 0), plane * a.c, out.plane(in, 0));
        std::copy_n(b.plane(in, 0), plane * b.c, out.plane(in, a.c));
    }
    return out;
}

template <class T>
TensorT<T> slice_channels(const TensorT<T>& x, int c0, int c1) {
    if (c0 < 0 || c1 <= c0 || c1 > x.c) {
        throw std::invalid_argument("slice_channels: bad range [" + std::to_string(c0) + "," +
                                    std::to_string(c1) + ") for c=" + std::to_string(x.c));
    }
    TensorT<T> out(x.n, c1 - c0, x.h, x.w);
    const std::size_t plane = static_cast<std::size_t>(x.h) * x.w;
    for (int in = 0; in < x.n; ++in) {
        std::copy_n(x.plane(in, c0), plane * (c1 - c0), out.plane(in, 0));
    }
    return out;
}

template <class T>
TensorT<T> he_init(int n, int c, int h, int w, long long fan_in, Rng& rng) {
    if (fan_in < 1) throw std::invalid_argument("he_init: fan_in must be >= 1");
    TensorT<T> out(n, c, h, w);
    const double sigma = std::sqrt(2.0 / static_cast<double>(fan_in));
    for (T& v : out.data) v = static_cast<T>(sigma * rng.next_normal());
    return out;
}

template struct TensorT<float>;
template struct TensorT<double>;

template TensorT<float> tensor_new<float>(int, int, int, int, float);
template TensorT<double> tensor_new<double>(int, int, int, int, double);
template TensorT<float> concat_channels<float>(const TensorT<float>&, const TensorT<float>&);
template TensorT<double> concat_channels<double>(const TensorT<double>&, const TensorT<double>&);
template TensorT<float> slice_channels<float>(const TensorT<float>&, int, int);
template TensorT<double> slice_channels<double>(const TensorT<double>&, int, int);
template TensorT<float> he_init<float>(int, int, int, int, long long, Rng&);
template TensorT<double> he_init<double>(int, int, int, int, long long, Rng&);

}  // namespace sqseg
