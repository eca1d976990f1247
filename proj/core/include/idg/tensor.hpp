#pragma once

#include <cmath>
#include <cstdint>
#include <sstream>
#include <stdexcept>
#include <string>
#include <vector>

namespace idg {

using Shape = std::vector<std::int64_t>;

inline std::int64_t shape_numel(const Shape& shape) {
    std::int64_t n = 1;
    for (auto d : shape) n *= d;
    return n;
}

inline std::string shape_str(const Shape& shape) {
    std::ostringstream os;
    os << '(';
    for (std::size_t i = 0; i < shape.size(); ++i) {
        if (i) os << ',';
        os << shape[i];
    }
    os << ')';
    return os.str();
}

/// Dense row-major tensor with value semantics. The scalar type is float for
/// the pipeline and double for verification builds and metric code.
template <typename T>
class Tensor {
public:
    Tensor() = default;

    explicit Tensor(Shape shape) : shape_(std::move(shape)) {
        check_shape(shape_);
        data_.assign(static_cast<std::size_t>(shape_numel(shape_)), T{0});
    }

    Tensor(Shape shape, std::vector<T> values) : shape_(std::move(shape)), data_(std::move(values)) {
        check_shape(shape_);
        if (static_cast<std::int64_t>(data_.size()) != shape_numel(shape_)) {
            throw std::invalid_argument("tensor: " + std::to_string(data_.size()) +
                                        " values do not fill shape " + shape_str(shape_));
        }
    }

    static Tensor zeros(Shape shape) { return Tensor(std::move(shape)); }

    static Tensor full(Shape shape, T value) {
        Tensor t(std::move(shape));
        std::fill(t.data_.begin(), t.data_.end(), value);
        return t;
    }

    static Tensor scalar(T value) { return Tensor({1}, {value}); }

    const Shape& shape() const { return shape_; }
    int rank() const { return static_cast<int>(shape_.size()); }
    std::int64_t dim(int axis) const { return shape_.at(static_cast<std::size_t>(axis)); }
    std::int64_t numel() const { return static_cast<std::int64_t>(data_.size()); }
    bool empty() const { return data_.empty(); }

    T* data() { return data_.data(); }
    const T* data() const { return data_.data(); }
    std::vector<T>& values() { return data_; }
    const std::vector<T>& values() const { return data_; }

    T& operator[](std::int64_t i) { return data_[static_cast<std::size_t>(i)]; }
    const T& operator[](std::int64_t i) const { return data_[static_cast<std::size_t>(i)]; }

    T& at(std::int64_t i) {
        if (i < 0 || i >= numel()) throw std::out_of_range("tensor index " + std::to_string(i));
        return data_[static_cast<std::size_t>(i)];
    }

    bool same_shape(const Tensor& other) const { return shape_ == other.shape_; }

    Tensor reshaped(Shape shape) const {
        if (shape_numel(shape) != numel()) {
            throw std::invalid_argument("reshape: " + shape_str(shape_) + " -> " + shape_str(shape) +
                                        " changes element count");
        }
        return Tensor(std::move(shape), data_);
    }

    template <typename U>
    Tensor<U> cast() const {
        std::vector<U> out(data_.size());
        for (std::size_t i = 0; i < data_.size(); ++i) out[i] = static_cast<U>(data_[i]);
        return Tensor<U>(shape_, std::move(out));
    }

    bool all_finite() const {
        for (T v : data_) {
            if (!std::isfinite(static_cast<double>(v))) return false;
        }
        return true;
    }

    void fill(T value) { std::fill(data_.begin(), data_.end(), value); }

private:
    static void check_shape(const Shape& shape) {
        for (auto d : shape) {
            if (d <= 0) throw std::invalid_argument("tensor: non-positive extent in " + shape_str(shape));
        }
    }

    Shape shape_;
    std::vector<T> data_;
};

template <typename T>
bool operator==(const Tensor<T>& a, const Tensor<T>& b) {
    return a.shape() == b.shape() && a.values() == b.values();
}

}  // namespace idg
