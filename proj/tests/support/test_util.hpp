// SPDX-License-Identifier: Apache-2.0
#pragma once

#include <cstdint>
#include <vector>

#include "qgrade/rng.hpp"
#include "qgrade/tensor.hpp"

namespace qgrade::test {

inline Tensor random_tensor(std::vector<std::size_t> shape, Rng& rng, double scale = 1.0,
                            bool requires_grad = false) {
    Tensor t = Tensor::zeros(std::move(shape), requires_grad);
    for (std::size_t i = 0; i < t.size(); ++i) t.data()[i] = scale * rng.gaussian();
    return t;
}

inline double max_abs_diff(const Tensor& a, const Tensor& b) {
    double m = 0.0;
    for (std::size_t i = 0; i < a.size(); ++i) {
        m = std::max(m, std::abs(a.data()[i] - b.data()[i]));
    }
    return m;
}

} // namespace qgrade::test
