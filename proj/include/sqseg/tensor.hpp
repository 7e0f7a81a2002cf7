#pragma once

#include <array>
#include <cstddef>
#include <cstdint>
#include <span>
#include <string>
#include <vector>

namespace sqseg {

// Dense rank-4 array in row-major (n, c, h, w) order, the value type every
// layer consumes and produces. Instantiated for float (the storage precision)
// and double (used by the gradient-check harnesses).
template <class T>
struct TensorT {
    int n = 0, c = 0, h = 0, w = 0;
    std::vector<T> data;

    TensorT() = default;
    TensorT(int n_, int c_, int h_, int w_, T fill = T(0));

    std::size_t size() const { return data.size(); }
    std::array<int, 4> dims() const { return {n, c, h, w}; }
    bool same_dims(const TensorT& o) const {
        return n == o.n && c == o.c && h == o.h && w == o.w;
    }

    std::size_t index(int in, int ic, int iy, int ix) const {
        return ((static_cast<std::size_t>(in) * c + ic) * h + iy) * w + ix;
    }
    T& at(int in, int ic, int iy, int ix) { return data[index(in, ic, iy, ix)]; }
    const T& at(int in, int ic, int iy, int ix) const { return data[index(in, ic, iy, ix)]; }

    T* plane(int in, int ic) { return data.data() + index(in, ic, 0, 0); }
    const T* plane(int in, int ic) const { return data.data() + index(in, ic, 0, 0); }

    double sum() const;
    T max_abs() const;
    bool all_finite() const;
};

using Tensor = TensorT<float>;

std::string dims_to_string(int n, int c, int h, int w);

// Splitmix64 stream. The generator is pinned (not std::mt19937, whose
// distributions are implementation-defined) so that a seed produces the same
// values on every platform. Normal deviates come from Box-Muller over the
// 53-bit uniform, with the usual spare-value cache.
class Rng {
  public:
    explicit Rng(std::uint64_t seed) : state_(seed) {}

    std::uint64_t next_u64();
    // Uniform in [0, 1), 53 bits of mantissa.
    double next_double();
    // Standard normal via Box-Muller.
    double next_normal();
    // Uniform integer in [0, n). Modulo reduction; bias is < n / 2^64.
    std::uint64_t next_below(std::uint64_t n);

  private:
    std::uint64_t state_;
    bool has_spare_ = false;
    double spare_ = 0.0;
};

template <class T>
TensorT<T> tensor_new(int n, int c, int h, int w, T fill);

// Stacks b's channels after a's. Spatial and batch dims must agree.
template <class T>
TensorT<T> concat_channels(const TensorT<T>& a, const TensorT<T>& b);

// Channels [c0, c1) of x as a new tensor.
template <class T>
TensorT<T> slice_channels(const TensorT<T>& x, int c0, int c1);

// He initialization: N(0, sqrt(2 / fan_in)), drawn element-sequentially from
// rng so results are reproducible bit-for-bit given the seed.
template <class T>
TensorT<T> he_init(int n, int c, int h, int w, long long fan_in, Rng& rng);

}  // namespace sqseg
