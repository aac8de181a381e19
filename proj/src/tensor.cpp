#include "swm/tensor.hpp"

#include <cmath>

namespace swm {

std::string Shape::str() const {
    std::string s = "[";
    for (int i = 0; i < rank; ++i) {
        if (i) s += "x";
        s += std::to_string(d[i]);
    }
    return s + "]";
}

bool Tensor::finite() const {
    for (double x : data)
        if (!std::isfinite(x)) return false;
    return true;
}

double Tensor::abs_max() const {
    double m = 0.0;
    for (double x : data) m = std::max(m, std::fabs(x));
    return m;
}

double max_abs_diff(const Tensor& a, const Tensor& b) {
    if (a.shape != b.shape)
        throw ContractError("max_abs_diff: shape mismatch " + a.shape.str() + " vs " + b.shape.str());
    double m = 0.0;
    for (std::size_t i = 0; i < a.data.size(); ++i)
        m = std::max(m, std::fabs(a.data[i] - b.data[i]));
    return m;
}

}  // namespace swm
