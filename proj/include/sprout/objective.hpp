#pragma once

#include <algorithm>
#include <span>
#include <vector>

#include "sprout/diffusion.hpp"
#include "sprout/parallel.hpp"
#include "sprout/udit.hpp"

namespace sprout {

// Weighted denoising loss of model(xt, t) against target, with gradients
// w.r.t. every weight accumulated into `grads` (overwritten). Per-sample
// gradients are summed in sample order, so the result is independent of the
// worker count. A non-finite loss is returned as is; callers decide.
template <class T>
double denoising_loss_and_grad(const UDiT<T>& model, const Tensor<T>& xt, std::span<const double> t,
                               const Tensor<T>& target, const LossWeighting& weighting, const NoiseSchedule& sched,
                               std::span<T> grads) {
  model.check_input(xt, t);
  require_same_shape(xt, target, "denoising_loss_and_grad");
  if (grads.size() != model.param_count()) throw ShapeError("gradient buffer does not match parameter count");
  std::fill(grads.begin(), grads.end(), T(0));

  const std::size_t B = xt.dim(0), H = xt.dim(2), W = xt.dim(3);
  const std::size_t C = xt.dim(1);
  const std::size_t chunk = std::max<std::size_t>(1, std::min(B, max_threads()));
  std::vector<std::vector<T>> buffers(chunk, std::vector<T>(model.param_count()));
  std::vector<double> sample_loss(B, 0.0);

  for (std::size_t start = 0; start < B; start += chunk) {
    const std::size_t count = std::min(chunk, B - start);
    parallel_for(count, [&](std::size_t k) {
      const std::size_t i = start + k;
      auto& buf = buffers[k];
      std::fill(buf.begin(), buf.end(), T(0));
      UDiTTrace<T> trace;
      nn::Mat<T> pred = model.forward_sample(xt.item(i), H, W, t[i], trace);
      nn::ConstMatMap<T> r(target.item(i).data(), C, H * W);
      const double lambda = weighting(t[i], sched);
      const double n = static_cast<double>(C * H * W);
      nn::Mat<T> diff = pred - r;
      sample_loss[i] = lambda * diff.template cast<double>().squaredNorm() / n;
      nn::Mat<T> dout = diff * static_cast<T>(2.0 * lambda / (n * static_cast<double>(B)));
      model.backward_sample(trace, dout, std::span<T>(buf));
    });
    for (std::size_t k = 0; k < count; ++k)
      for (std::size_t j = 0; j < grads.size(); ++j) grads[j] += buffers[k][j];
  }

  double total = 0.0;
  for (double l : sample_loss) total += l;
  return total / static_cast<double>(B);
}

}  // namespace sprout
