#pragma once

#include <cstddef>
#include <initializer_list>
#include <string>
#include <vector>

#include "swm/error.hpp"

namespace swm {

// Shape of a dense array, rank <= 3. Kept inline to avoid allocations.
struct Shape {
    int rank = 0;
    std::size_t d[3] = {1, 1, 1};

    Shape() = default;
    Shape(std::size_t a) : rank(1) { d[0] = a; }
    Shape(std::size_t a, std::size_t b) : rank(2) {
        d[0] = a;
        d[1] = b;
    }
    Shape(std::size_t a, std::size_t b, std::size_t c) : rank(3) {
        d[0] = a;
        d[1] = b;
        d[2] = c;
    }

    std::size_t numel() const { return d[0] * d[1] * d[2]; }
    std::size_t last() const { return rank == 0 ? 1 : d[rank - 1]; }
    // product of all dims except the last
    std::size_t rows() const { return rank == 0 ? 1 : numel() / last(); }

    bool operator==(const Shape& o) const {
        return rank == o.rank && d[0] == o.d[0] && d[1] == o.d[1] && d[2] == o.d[2];
    }
    bool operator!=(const Shape& o) const { return !(*this == o); }

    std::string str() const;
};

// Dense row-major array of doubles, rank <= 3. Plain value type: copyable,
// movable, no interior mutability.
struct Tensor {
    Shape shape;
    std::vector<double> data;

    Tensor() = default;
    explicit Tensor(Shape s, double fill = 0.0) : shape(s), data(s.numel(), fill) {}

    static Tensor zeros(Shape s) { return Tensor(s); }
    static Tensor full(Shape s, double v) { return Tensor(s, v); }
    static Tensor scalar(double v) {
        Tensor t{Shape{std::size_t(1)}};
        t.data[0] = v;
        return t;
    }
    static Tensor of(std::initializer_list<double> v) {
        Tensor t{Shape{v.size()}};
        std::size_t i = 0;
        for (double x : v) t.data[i++] = x;
        return t;
    }

    std::size_t numel() const { return data.size(); }

    double& operator()(std::size_t i) { return data[i]; }
    double operator()(std::size_t i) const { return data[i]; }
    double& operator()(std::size_t i, std::size_t j) { return data[i * shape.d[1] + j]; }
    double operator()(std::size_t i, std::size_t j) const { return data[i * shape.d[1] + j]; }
    double& operator()(std::size_t i, std::size_t j, std::size_t k) {
        return data[(i * shape.d[1] + j) * shape.d[2] + k];
    }
    double operator()(std::size_t i, std::size_t j, std::size_t k) const {
        return data[(i * shape.d[1] + j) * shape.d[2] + k];
    }

    // scalar extraction; contract: numel() == 1
    double item() const {
        if (numel() != 1) throw ContractError("item() on tensor of size " + std::to_string(numel()));
        return data[0];
    }

    bool finite() const;
    double abs_max() const;

    void fill(double v) {
        for (double& x : data) x = v;
    }
};

// max_i |a_i - b_i|; shapes must match
double max_abs_diff(const Tensor& a, const Tensor& b);

}  // namespace swm
