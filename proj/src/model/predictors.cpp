#include "m2m/model/predictors.hpp"

#include <algorithm>

#include "m2m/nn/ops.hpp"

namespace m2m::model {

namespace {

template <typename Fn>
std::vector<RealGrid> chunked(std::span<const RealGrid> inputs, int max_batch, Fn&& run) {
  std::vector<RealGrid> out;
  out.reserve(inputs.size());
  const std::size_t step = static_cast<std::size_t>(std::max(1, max_batch));
  for (std::size_t begin = 0; begin < inputs.size(); begin += step) {
    const std::size_t n = std::min(step, inputs.size() - begin);
    auto part = run(inputs.subspan(begin, n));
    for (auto& g : part) out.push_back(std::move(g));
  }
  return out;
}

}  // namespace

std::vector<RealGrid> DenoiserAdapter::predict(std::span<const RealGrid> inputs, int t) const {
  nn::NoGradGuard guard;
  return chunked(inputs, max_batch_, [&](std::span<const RealGrid> part) {
    std::vector<int> steps(part.size(), t);
    return tensor_to_grids(net_.forward(grids_to_tensor<float>(part), steps));
  });
}

std::vector<RealGrid> DecoderAdapter::probabilities(std::span<const RealGrid> y1) const {
  nn::NoGradGuard guard;
  return chunked(y1, max_batch_, [&](std::span<const RealGrid> part) {
    return tensor_to_grids(nn::sigmoid(net_.logits(grids_to_tensor<float>(part))));
  });
}

}  // namespace m2m::model
