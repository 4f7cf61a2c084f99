#include "sdfp/gradcheck.hpp"

#include <algorithm>
#include <cmath>
#include <numeric>
#include <random>

namespace sdfp {

GradCheckResult check_gradients(const Objective& f, std::span<const Tensor> inputs,
                                const GradCheckOptions& options) {
  Tape tape;
  std::vector<Tensor> tracked;
  tracked.reserve(inputs.size());
  for (const auto& x : inputs) tracked.push_back(tape.watch(x));
  const Tensor root = f(tracked);
  const Gradients grads = tape.backward(root);

  std::mt19937_64 rng(options.seed);
  std::vector<Tensor> probe(inputs.begin(), inputs.end());
  GradCheckResult result;
  for (std::size_t i = 0; i < inputs.size(); ++i) {
    const auto analytic = grads.of(tracked[i]).to_vector();
    std::vector<std::size_t> coords(inputs[i].size());
    std::iota(coords.begin(), coords.end(), std::size_t{0});
    if (options.max_coords != 0 && coords.size() > options.max_coords) {
      std::shuffle(coords.begin(), coords.end(), rng);
      coords.resize(options.max_coords);
    }
    double diff2 = 0.0, ad2 = 0.0, fd2 = 0.0;
    std::vector<double> base = inputs[i].to_vector();
    for (std::size_t c : coords) {
      const double x0 = base[c];
      base[c] = x0 + options.step;
      probe[i] = Tensor(inputs[i].shape(), base);
      const double up = f(probe).item();
      base[c] = x0 - options.step;
      probe[i] = Tensor(inputs[i].shape(), base);
      const double down = f(probe).item();
      base[c] = x0;
      const double fd = (up - down) / (2.0 * options.step);
      diff2 += (analytic[c] - fd) * (analytic[c] - fd);
      ad2 += analytic[c] * analytic[c];
      fd2 += fd * fd;
    }
    probe[i] = inputs[i];
    const double denom = std::max(std::sqrt(std::max(ad2, fd2)), options.floor);
    const double err = denom > 0.0 ? std::sqrt(diff2) / denom : std::sqrt(diff2);
    result.relative_error.push_back(err);
    result.max_relative_error = std::max(result.max_relative_error, err);
  }
  return result;
}

}  // namespace sdfp
