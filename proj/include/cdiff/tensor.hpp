#pragma once

#include <cmath>
#include <cstdint>
#include <numeric>
#include <random>
#include <sstream>
#include <stdexcept>
#include <string>
#include <vector>

namespace cdiff {

// Error with a short machine-parsable code ("shape", "config", "io", ...)
// plus a human message. The CLI prints these as "E_<CODE>: <msg>".
struct Error : std::runtime_error {
    std::string code;
    Error(std::string code_, const std::string& msg)
        : std::runtime_error(msg), code(std::move(code_)) {}
};

[[noreturn]] inline void fail(const std::string& code, const std::string& msg) {
    throw Error(code, msg);
}

inline std::string shape_str(const std::vector<int>& s) {
    std::ostringstream os;
    os << "[";
    for (size_t i = 0; i < s.size(); i++) os << (i ? "," : "") << s[i];
    os << "]";
    return os.str();
}

// Dense row-major n-dimensional tensor. Plain value type, no gradient
// tracking here; see graph.hpp for the autodiff tape.
template <typename T>
struct TensorT {
    std::vector<int> shape;
    std::vector<T> data;

    TensorT() = default;
    explicit TensorT(std::vector<int> shape_, T fill = T(0))
        : shape(std::move(shape_)) {
        data.assign(count(shape), fill);
    }
    TensorT(std::vector<int> shape_, std::vector<T> data_)
        : shape(std::move(shape_)), data(std::move(data_)) {
        if (count(shape) != (int64_t)data.size())
            fail("shape", "tensor data size " + std::to_string(data.size()) +
                              " does not match shape " + shape_str(shape));
    }

    static int64_t count(const std::vector<int>& s) {
        int64_t n = 1;
        for (int d : s) {
            if (d < 0) fail("shape", "negative extent in shape " + shape_str(s));
            n *= d;
        }
        return n;
    }

    int64_t numel() const { return (int64_t)data.size(); }
    int dim(int i) const { return shape[(size_t)i]; }
    int rank() const { return (int)shape.size(); }

    T& at(int64_t i) { return data[(size_t)i]; }
    const T& at(int64_t i) const { return data[(size_t)i]; }
    T& at2(int i, int j) { return data[(size_t)i * shape[1] + j]; }
    const T& at2(int i, int j) const { return data[(size_t)i * shape[1] + j]; }
    T& at3(int i, int j, int k) {
        return data[((size_t)i * shape[1] + j) * shape[2] + k];
    }
    const T& at3(int i, int j, int k) const {
        return data[((size_t)i * shape[1] + j) * shape[2] + k];
    }

    bool same_shape(const TensorT& o) const { return shape == o.shape; }

    TensorT reshaped(std::vector<int> new_shape) const {
        if (count(new_shape) != numel())
            fail("shape", "cannot reshape " + shape_str(shape) + " to " + shape_str(new_shape));
        TensorT out;
        out.shape = std::move(new_shape);
        out.data = data;
        return out;
    }

    bool all_finite() const {
        for (T v : data)
            if (!std::isfinite((double)v)) return false;
        return true;
    }

    template <typename U>
    TensorT<U> cast() const {
        TensorT<U> out;
        out.shape = shape;
        out.data.resize(data.size());
        for (size_t i = 0; i < data.size(); i++) out.data[i] = (U)data[i];
        return out;
    }
};

using Tensor = TensorT<float>;
using TensorD = TensorT<double>;

// A named, long-lived learnable tensor. Models own these; per-step graphs
// bind them as leaves. `trainable` is toggled by the training mode.
template <typename T>
struct ParameterT {
    std::string name;
    TensorT<T> value;
    bool trainable = true;
};

using Parameter = ParameterT<float>;

inline uint64_t hash64(uint64_t a, uint64_t b = 0x9e3779b97f4a7c15ull) {
    // splitmix64 over the pair; used to derive independent RNG streams
    uint64_t z = a + 0x9e3779b97f4a7c15ull + b * 0xbf58476d1ce4e5b9ull;
    z = (z ^ (z >> 30)) * 0xbf58476d1ce4e5b9ull;
    z = (z ^ (z >> 27)) * 0x94d049bb133111ebull;
    return z ^ (z >> 31);
}

inline uint64_t hash64_str(const std::string& s, uint64_t seed = 1469598103934665603ull) {
    uint64_t h = seed;
    for (unsigned char c : s) {
        h ^= c;
        h *= 1099511628211ull;  // FNV-1a
    }
    return h;
}

// Deterministic RNG: mt19937_64 plus an explicit Box-Muller normal so the
// byte stream does not depend on the standard library's distributions.
struct Rng {
    std::mt19937_64 eng;
    bool has_spare = false;
    double spare = 0.0;

    explicit Rng(uint64_t seed = 0) : eng(seed) {}

    static Rng stream(uint64_t seed, uint64_t stream_id) {
        return Rng(hash64(seed, stream_id));
    }

    double uniform() {  // [0,1)
        return (double)(eng() >> 11) * (1.0 / 9007199254740992.0);
    }

    double normal() {
        if (has_spare) {
            has_spare = false;
            return spare;
        }
        double u1 = 0.0, u2 = 0.0;
        do {
            u1 = uniform();
        } while (u1 <= 1e-300);
        u2 = uniform();
        double r = std::sqrt(-2.0 * std::log(u1));
        double a = 6.283185307179586476925286766559 * u2;
        spare = r * std::sin(a);
        has_spare = true;
        return r * std::cos(a);
    }

    // uniform integer in [0, n)
    int64_t below(int64_t n) { return (int64_t)(uniform() * (double)n) % n; }

    std::string state_str() const {
        std::ostringstream os;
        os << eng << " " << has_spare << " " << spare;
        return os.str();
    }
    void load_state(const std::string& s) {
        std::istringstream is(s);
        is >> eng >> has_spare >> spare;
        if (is.fail()) fail("io", "malformed RNG state string");
    }
};

template <typename T>
TensorT<T> randn(std::vector<int> shape, Rng& rng, T stddev = T(1)) {
    TensorT<T> t(std::move(shape));
    for (auto& v : t.data) v = (T)(rng.normal() * (double)stddev);
    return t;
}

inline Tensor randn_like(const std::vector<int>& shape, Rng& rng) {
    return randn<float>(shape, rng);
}

}  // namespace cdiff
