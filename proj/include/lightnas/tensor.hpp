#pragma once

#include <cstddef>
#include <initializer_list>
#include <numeric>
#include <stdexcept>
#include <string>
#include <vector>

namespace lightnas {

// Dense row-major tensor of 64-bit floats. Rank is dynamic but nearly all
// uses are 2-D (sequence length x feature dim) or 3-D (conv kernels).
struct Tensor {
    std::vector<std::size_t> shape;
    std::vector<double> data;

    Tensor() = default;

    explicit Tensor(std::vector<std::size_t> s) : shape(std::move(s)) {
        data.assign(numel_of(shape), 0.0);
    }

    Tensor(std::initializer_list<std::size_t> s) : Tensor(std::vector<std::size_t>(s)) {}

    static std::size_t numel_of(const std::vector<std::size_t>& s) {
        std::size_t n = 1;
        for (std::size_t d : s) n *= d;
        return n;
    }

    std::size_t numel() const { return data.size(); }
    std::size_t rows() const { return shape.empty() ? 0 : shape[0]; }
    std::size_t cols() const { return shape.size() < 2 ? 1 : shape[1]; }

    double& at(std::size_t r, std::size_t c) { return data[r * cols() + c]; }
    double at(std::size_t r, std::size_t c) const { return data[r * cols() + c]; }

    // 3-D accessor for conv kernels stored as {K, I, O}.
    double& at3(std::size_t a, std::size_t b, std::size_t c) {
        return data[(a * shape[1] + b) * shape[2] + c];
    }
    double at3(std::size_t a, std::size_t b, std::size_t c) const {
        return data[(a * shape[1] + b) * shape[2] + c];
    }

    bool same_shape(const Tensor& other) const { return shape == other.shape; }

    void fill(double v) { std::fill(data.begin(), data.end(), v); }

    std::string shape_str() const {
        std::string s = "[";
        for (std::size_t i = 0; i < shape.size(); ++i) {
            if (i) s += "x";
            s += std::to_string(shape[i]);
        }
        return s + "]";
    }
};

inline void require_shape(const Tensor& t, std::size_t r, std::size_t c, const char* what) {
    if (t.shape.size() != 2 || t.shape[0] != r || t.shape[1] != c) {
        throw std::invalid_argument(std::string(what) + ": expected [" + std::to_string(r) + "x" +
                                    std::to_string(c) + "], got " + t.shape_str());
    }
}

}  // namespace lightnas
