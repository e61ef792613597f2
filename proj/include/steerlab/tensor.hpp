#pragma once

#include <cstddef>
#include <initializer_list>
#include <sstream>
#include <string>
#include <vector>

#include "steerlab/common.hpp"
#include "steerlab/rng.hpp"

namespace steerlab {

using Shape = std::vector<int>;

inline size_t shape_numel(const Shape& s) {
    size_t n = 1;
    for (int d : s) n *= static_cast<size_t>(d);
    return n;
}

inline std::string shape_str(const Shape& s) {
    std::ostringstream os;
    os << "[";
    for (size_t i = 0; i < s.size(); ++i) os << (i ? "x" : "") << s[i];
    os << "]";
    return os.str();
}

// Dense row-major tensor. Plain value type; autodiff state lives on the tape,
// not here.
template <class S>
struct TensorT {
    Shape shape;
    std::vector<S> data;
    bool requires_grad = false;

    TensorT() = default;
    explicit TensorT(Shape sh) : shape(std::move(sh)), data(shape_numel(shape), S(0)) {}
    TensorT(Shape sh, std::vector<S> d) : shape(std::move(sh)), data(std::move(d)) {
        if (data.size() != shape_numel(shape))
            throw ShapeError("tensor data length " + std::to_string(data.size()) +
                             " does not match shape " + shape_str(shape));
    }

    size_t numel() const { return data.size(); }
    int dim(int i) const { return shape[static_cast<size_t>(i)]; }
    int rank() const { return static_cast<int>(shape.size()); }

    S& at(int i) { return data[static_cast<size_t>(i)]; }
    S at(int i) const { return data[static_cast<size_t>(i)]; }
    S& at(int i, int j) { return data[static_cast<size_t>(i) * dim(1) + j]; }
    S at(int i, int j) const { return data[static_cast<size_t>(i) * dim(1) + j]; }

    S* row(int i) { return data.data() + static_cast<size_t>(i) * dim(1); }
    const S* row(int i) const { return data.data() + static_cast<size_t>(i) * dim(1); }

    static TensorT zeros(Shape sh) { return TensorT(std::move(sh)); }

    static TensorT full(Shape sh, S v) {
        TensorT t(std::move(sh));
        for (auto& x : t.data) x = v;
        return t;
    }

    static TensorT randn(Shape sh, Rng& rng, S std_dev = S(1)) {
        TensorT t(std::move(sh));
        for (auto& x : t.data) x = static_cast<S>(rng.normal()) * std_dev;
        return t;
    }

    template <class U>
    TensorT<U> cast() const {
        TensorT<U> out;
        out.shape = shape;
        out.requires_grad = requires_grad;
        out.data.resize(data.size());
        for (size_t i = 0; i < data.size(); ++i) out.data[i] = static_cast<U>(data[i]);
        return out;
    }
};

using Tensor = TensorT<float>;
using TensorD = TensorT<double>;

template <class S>
bool same_shape(const TensorT<S>& a, const TensorT<S>& b) {
    return a.shape == b.shape;
}

template <class S>
bool bitwise_equal(const TensorT<S>& a, const TensorT<S>& b) {
    if (a.shape != b.shape) return false;
    for (size_t i = 0; i < a.data.size(); ++i)
        if (!(a.data[i] == b.data[i])) return false;
    return true;
}

template <class S>
uint64_t tensor_hash(const TensorT<S>& t, uint64_t h = 0xcbf29ce484222325ull) {
    h = fnv1a64(t.shape.data(), t.shape.size() * sizeof(int), h);
    return fnv1a64(t.data.data(), t.data.size() * sizeof(S), h);
}

} // namespace steerlab
