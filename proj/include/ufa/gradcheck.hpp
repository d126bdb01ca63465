#pragma once

#include <functional>
#include <vector>

#include "ufa/tensor.hpp"

namespace ufa {

// Compares reverse-mode gradients of a scalar function against central
// differences (f(x + eps e_i) - f(x - eps e_i)) / (2 eps), coordinate by
// coordinate. Returns the largest relative error, with denominator
// max(|analytic|, |numeric|, 1e-8).
double finite_difference_check(const std::function<Tensor<double>(const Tensor<double>&)>& f,
                               Tensor<double> x, double eps);

// Same check over every coordinate of several leaves of a closed-over
// function, e.g. all parameters of a model.
double finite_difference_check(const std::function<Tensor<double>()>& f,
                               std::vector<Tensor<double>> leaves, double eps);

}  // namespace ufa
