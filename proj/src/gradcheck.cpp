#include "ufa/gradcheck.hpp"

#include <algorithm>
#include <cmath>

#include "ufa/error.hpp"

namespace ufa {

double finite_difference_check(const std::function<Tensor<double>()>& f,
                               std::vector<Tensor<double>> leaves, double eps) {
  if (!(eps > 0.0)) throw ContractError("finite_difference_check: eps must be positive");
  std::vector<bool> saved_flags;
  for (auto& leaf : leaves) {
    saved_flags.push_back(leaf.requires_grad());
    leaf.zero_grad();
    leaf.set_requires_grad(true);
  }
  {
    Tape<double> tape;
    Tensor<double> loss;
    {
      TapeScope<double> scope(tape);
      loss = f();
    }
    if (loss.requires_grad()) tape.backward(loss);
  }

  double worst = 0.0;
  for (auto& leaf : leaves) {
    std::vector<double> analytic(leaf.size(), 0.0);
    if (leaf.has_grad()) std::copy(leaf.grad().begin(), leaf.grad().end(), analytic.begin());
    for (std::size_t i = 0; i < leaf.size(); ++i) {
      const double orig = leaf[i];
      leaf[i] = orig + eps;
      const double up = f().item();
      leaf[i] = orig - eps;
      const double down = f().item();
      leaf[i] = orig;
      const double numeric = (up - down) / (2.0 * eps);
      const double denom = std::max({std::abs(analytic[i]), std::abs(numeric), 1e-8});
      worst = std::max(worst, std::abs(analytic[i] - numeric) / denom);
    }
  }
  for (std::size_t j = 0; j < leaves.size(); ++j) {
    leaves[j].zero_grad();
    leaves[j].set_requires_grad(saved_flags[j]);
  }
  return worst;
}

double finite_difference_check(const std::function<Tensor<double>(const Tensor<double>&)>& f,
                               Tensor<double> x, double eps) {
  return finite_difference_check([&] { return f(x); }, {x}, eps);
}

}  // namespace ufa
