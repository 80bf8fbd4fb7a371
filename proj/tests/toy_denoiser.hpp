#pragma once

#include "rgbdf/diffusion.hpp"
#include "rgbdf/ops.hpp"

namespace rgbdf::testing {

/// conv3x3 -> GeLU -> conv1x1 over [x_t, condition]; channel 0 is eps, channel 1 the raw variance head.
struct ToyDenoiser {
  static Shape w1_shape() { return {4, 2, 3, 3}; }
  static Shape w2_shape() { return {2, 4, 1, 1}; }

  template <class T>
  static ModelOutput<T> forward(const Var<T>& w1, const Var<T>& w2, const Tensor<T>& xt, const Tensor<T>& cond) {
    auto in = ops::concat_channels<T>({Var<T>(xt), Var<T>(cond)});
    auto raw = ops::conv2d(ops::gelu(ops::conv2d(in, w1)), w2);
    return {ops::slice_channels(raw, 0, 1), ops::unit_squash(ops::slice_channels(raw, 1, 2))};
  }
};

}  // namespace rgbdf::testing
