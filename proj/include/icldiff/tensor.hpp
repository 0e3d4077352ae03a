#pragma once

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <numeric>
#include <sstream>
#include <stdexcept>
#include <string>
#include <utility>
#include <vector>

namespace icl {

using Shape = std::vector<int64_t>;

/// Raised when tensor shapes or argument ranges do not satisfy an operation's contract.
class ShapeError : public std::invalid_argument {
public:
    using std::invalid_argument::invalid_argument;
};

inline int64_t numel(const Shape& shape) {
    int64_t n = 1;
    for (auto d : shape) {
        n *= d;
    }
    return n;
}

inline std::string shape_str(const Shape& shape) {
    std::ostringstream os;
    os << "[";
    for (size_t i = 0; i < shape.size(); i++) {
        os << (i ? ", " : "") << shape[i];
    }
    os << "]";
    return os.str();
}

inline void check_shape(bool ok, const std::string& what) {
    if (!ok) {
        throw ShapeError(what);
    }
}

/// Dense row-major tensor owning its storage.
template <typename T>
struct Tensor {
    Shape shape;
    std::vector<T> data;

    Tensor() = default;

    explicit Tensor(Shape s, T fill = T(0))
        : shape(std::move(s)), data(static_cast<size_t>(numel(shape)), fill) {}

    Tensor(Shape s, std::vector<T> values)
        : shape(std::move(s)), data(std::move(values)) {
        check_shape(static_cast<int64_t>(data.size()) == numel(shape),
                    "tensor data size " + std::to_string(data.size()) + " does not match shape " + shape_str(shape));
    }

    int64_t size() const { return static_cast<int64_t>(data.size()); }
    int rank() const { return static_cast<int>(shape.size()); }
    bool empty() const { return data.empty(); }

    int64_t dim(int i) const {
        if (i < 0) {
            i += rank();
        }
        check_shape(i >= 0 && i < rank(), "dim index out of range for shape " + shape_str(shape));
        return shape[static_cast<size_t>(i)];
    }

    T* ptr() { return data.data(); }
    const T* ptr() const { return data.data(); }

    T& operator[](int64_t i) { return data[static_cast<size_t>(i)]; }
    const T& operator[](int64_t i) const { return data[static_cast<size_t>(i)]; }

    Tensor reshaped(Shape s) const {
        check_shape(numel(s) == size(), "cannot reshape " + shape_str(shape) + " to " + shape_str(s));
        return Tensor(std::move(s), data);
    }

    void fill(T v) { std::fill(data.begin(), data.end(), v); }

    template <typename U>
    Tensor<U> cast() const {
        Tensor<U> out(shape);
        for (int64_t i = 0; i < size(); i++) {
            out[i] = static_cast<U>(data[static_cast<size_t>(i)]);
        }
        return out;
    }

    bool operator==(const Tensor& other) const { return shape == other.shape && data == other.data; }
};

template <typename T>
T max_abs_diff(const Tensor<T>& a, const Tensor<T>& b) {
    check_shape(a.shape == b.shape, "max_abs_diff: shape mismatch " + shape_str(a.shape) + " vs " + shape_str(b.shape));
    T m = 0;
    for (int64_t i = 0; i < a.size(); i++) {
        m = std::max(m, static_cast<T>(std::abs(a[i] - b[i])));
    }
    return m;
}

}  // namespace icl
