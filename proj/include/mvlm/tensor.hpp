#pragma once

#include <cstdint>
#include <initializer_list>
#include <numeric>
#include <stdexcept>
#include <string>
#include <vector>

namespace mvlm {

// Dense row-major tensor of rank 1..3. Rank-3 shapes are read as
// (batch, rows, cols); rank-2 as (rows, cols).
template <typename S>
struct Tensor {
    std::vector<std::int64_t> shape;
    std::vector<S> data;

    Tensor() = default;
    explicit Tensor(std::vector<std::int64_t> sh) : shape(std::move(sh)) {
        data.assign(static_cast<std::size_t>(numel_of(shape)), S(0));
    }

    static std::int64_t numel_of(const std::vector<std::int64_t>& sh) {
        std::int64_t n = 1;
        for (auto d : sh) {
            if (d < 0) throw std::invalid_argument("negative tensor dimension");
            n *= d;
        }
        return n;
    }

    std::int64_t numel() const { return static_cast<std::int64_t>(data.size()); }
    int rank() const { return static_cast<int>(shape.size()); }

    std::int64_t batch() const { return rank() == 3 ? shape[0] : 1; }
    std::int64_t rows() const {
        if (rank() == 3) return shape[1];
        if (rank() == 2) return shape[0];
        return 1;
    }
    std::int64_t cols() const {
        if (rank() == 0) throw std::logic_error("cols() on rank-0 tensor");
        return shape.back();
    }

    S* batch_ptr(std::int64_t b) { return data.data() + b * rows() * cols(); }
    const S* batch_ptr(std::int64_t b) const { return data.data() + b * rows() * cols(); }

    S& at(std::int64_t i) { return data[static_cast<std::size_t>(i)]; }
    S at(std::int64_t i) const { return data[static_cast<std::size_t>(i)]; }

    bool same_shape(const Tensor& o) const { return shape == o.shape; }

    static Tensor scalar(S v) {
        Tensor t({1});
        t.data[0] = v;
        return t;
    }

    template <typename T>
    Tensor<T> cast() const {
        Tensor<T> out;
        out.shape = shape;
        out.data.resize(data.size());
        for (std::size_t i = 0; i < data.size(); ++i) out.data[i] = static_cast<T>(data[i]);
        return out;
    }
};

inline std::string shape_string(const std::vector<std::int64_t>& sh) {
    std::string s = "(";
    for (std::size_t i = 0; i < sh.size(); ++i) {
        if (i) s += ",";
        s += std::to_string(sh[i]);
    }
    return s + ")";
}

// Integer index tensor used for token ids, labels and gather indices.
struct IndexTensor {
    std::vector<std::int64_t> shape;
    std::vector<std::int32_t> data;

    IndexTensor() = default;
    explicit IndexTensor(std::vector<std::int64_t> sh) : shape(std::move(sh)) {
        data.assign(static_cast<std::size_t>(Tensor<float>::numel_of(shape)), 0);
    }
    std::int64_t rows() const { return shape.size() == 2 ? shape[0] : 1; }
    std::int64_t cols() const { return shape.back(); }
};

// Boolean mask tensor (stored as bytes).
struct MaskTensor {
    std::vector<std::int64_t> shape;
    std::vector<std::uint8_t> data;

    MaskTensor() = default;
    explicit MaskTensor(std::vector<std::int64_t> sh, std::uint8_t fill = 0) : shape(std::move(sh)) {
        data.assign(static_cast<std::size_t>(Tensor<float>::numel_of(shape)), fill);
    }
    std::int64_t rows() const { return shape.size() == 2 ? shape[0] : 1; }
    std::int64_t cols() const { return shape.back(); }
};

using TensorF = Tensor<float>;
using TensorD = Tensor<double>;

}  // namespace mvlm
