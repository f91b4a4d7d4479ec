#pragma once

#include <Eigen/Dense>

#include <algorithm>
#include <cmath>
#include <limits>
#include <span>
#include <vector>

#include "r3p/common.hpp"
#include "r3p/tensor.hpp"

namespace r3p {

enum class Activation : std::uint8_t { none = 0, relu = 1, sigmoid = 2 };

struct LayerSpec {
  enum class Kind : std::uint8_t { conv = 0, max_pool = 1 };
  Kind kind = Kind::conv;
  int out_channels = 0;  // conv only
  int kernel = 3;        // conv only, odd, "same" padding
  Activation activation = Activation::relu;

  static LayerSpec conv(int out, int kernel, Activation act) {
    return {Kind::conv, out, kernel, act};
  }
  static LayerSpec pool() { return {Kind::max_pool, 0, 2, Activation::none}; }

  friend bool operator==(const LayerSpec&, const LayerSpec&) = default;
};

inline double sigmoid(double x) {
  if (x >= 0) return 1.0 / (1.0 + std::exp(-x));
  const double e = std::exp(x);
  return e / (1.0 + e);
}

using RowMatrix = Eigen::Matrix<double, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>;
using RowMatrixMap = Eigen::Map<RowMatrix>;
using ConstRowMatrixMap = Eigen::Map<const RowMatrix>;

// Intermediate values a backward pass needs, one entry per layer.
struct StackTrace {
  std::vector<Tensor> inputs;
  std::vector<Tensor> outputs;
  std::vector<RowMatrix> columns;
  std::vector<std::vector<int>> pool_argmax;
};

// A feed-forward stack of "same"-padded stride-1 convolutions and 2x2 max
// pools. All weights live in one flat vector so optimizers, checkpoints and
// bit-for-bit audits can treat the stack as a single parameter block.
class ConvStack {
 public:
  struct Slot {
    int in_channels = 0;
    int out_channels = 0;
    int kernel = 0;
    std::size_t weight_offset = 0;  // out x (in * k * k), row-major
    std::size_t bias_offset = 0;
  };

  ConvStack() = default;

  ConvStack(int in_channels, std::vector<LayerSpec> layers)
      : in_channels_(in_channels), layers_(std::move(layers)) {
    require(in_channels_ > 0, "conv stack needs at least one input channel");
    int channels = in_channels_;
    std::size_t offset = 0;
    for (const auto& layer : layers_) {
      Slot slot;
      if (layer.kind == LayerSpec::Kind::conv) {
        require(layer.out_channels > 0 && layer.kernel > 0 && layer.kernel % 2 == 1,
                "conv layer needs positive channels and an odd kernel");
        slot.in_channels = channels;
        slot.out_channels = layer.out_channels;
        slot.kernel = layer.kernel;
        slot.weight_offset = offset;
        offset += static_cast<std::size_t>(layer.out_channels) * channels * layer.kernel *
                  layer.kernel;
        slot.bias_offset = offset;
        offset += layer.out_channels;
        channels = layer.out_channels;
      } else {
        slot.in_channels = slot.out_channels = channels;
      }
      slots_.push_back(slot);
    }
    out_channels_ = channels;
    params_.assign(offset, 0.0);
  }

  // He-normal weights for rectified layers, Glorot-normal otherwise; zero bias.
  void initialize(Rng& rng) {
    for (std::size_t i = 0; i < layers_.size(); ++i) {
      if (layers_[i].kind != LayerSpec::Kind::conv) continue;
      const Slot& s = slots_[i];
      const double fan_in = static_cast<double>(s.in_channels) * s.kernel * s.kernel;
      const double fan_out = static_cast<double>(s.out_channels) * s.kernel * s.kernel;
      const double stddev = layers_[i].activation == Activation::relu
                                ? std::sqrt(2.0 / fan_in)
                                : std::sqrt(2.0 / (fan_in + fan_out));
      std::normal_distribution<double> normal(0.0, stddev);
      const std::size_t count = s.bias_offset - s.weight_offset;
      for (std::size_t k = 0; k < count; ++k) params_[s.weight_offset + k] = normal(rng);
      for (int k = 0; k < s.out_channels; ++k) params_[s.bias_offset + k] = 0.0;
    }
  }

  int in_channels() const { return in_channels_; }
  int out_channels() const { return out_channels_; }
  const std::vector<LayerSpec>& layers() const { return layers_; }
  const std::vector<Slot>& slots() const { return slots_; }
  std::vector<double>& params() { return params_; }
  const std::vector<double>& params() const { return params_; }

  std::pair<int, int> output_size(int height, int width) const {
    for (const auto& layer : layers_)
      if (layer.kind == LayerSpec::Kind::max_pool) {
        height /= 2;
        width /= 2;
      }
    return {height, width};
  }

  Tensor forward(const Tensor& input, StackTrace* trace = nullptr) const {
    require(input.channels == in_channels_, "conv stack expects ", in_channels_,
            " input channels, got ", input.channels);
    if (trace) {
      trace->inputs.clear();
      trace->outputs.clear();
      trace->columns.assign(layers_.size(), RowMatrix());
      trace->pool_argmax.assign(layers_.size(), {});
    }
    Tensor x = input;
    for (std::size_t i = 0; i < layers_.size(); ++i) {
      if (trace) trace->inputs.push_back(x);
      if (layers_[i].kind == LayerSpec::Kind::conv) {
        RowMatrix cols = im2col(x, slots_[i].kernel);
        x = conv_forward(i, x, cols);
        if (trace) trace->columns[i] = std::move(cols);
      } else {
        x = pool_forward(x, trace ? &trace->pool_argmax[i] : nullptr);
      }
      if (trace) trace->outputs.push_back(x);
    }
    return x;
  }

  // Accumulates parameter gradients into grad_params. Writes the gradient with
  // respect to the stack input when grad_input is non-null.
  void backward(const StackTrace& trace, Tensor grad, std::span<double> grad_params,
                Tensor* grad_input = nullptr) const {
    require(grad_params.size() == params_.size(), "gradient buffer size mismatch");
    for (std::size_t i = layers_.size(); i-- > 0;) {
      const bool need_input_grad = i > 0 || grad_input != nullptr;
      if (layers_[i].kind == LayerSpec::Kind::conv) {
        apply_activation_derivative(layers_[i].activation, trace.outputs[i], grad);
        grad = conv_backward(i, trace.inputs[i], trace.columns[i], grad, grad_params,
                             need_input_grad);
      } else {
        grad = pool_backward(trace.inputs[i], trace.pool_argmax[i], grad);
      }
      if (!need_input_grad) return;
    }
    if (grad_input) *grad_input = std::move(grad);
  }

 private:
  static RowMatrix im2col(const Tensor& x, int kernel) {
    const int pad = kernel / 2;
    const int hw = x.height * x.width;
    RowMatrix cols(static_cast<Eigen::Index>(x.channels) * kernel * kernel, hw);
    if (kernel == 1) {
      cols = ConstRowMatrixMap(x.values.data(), x.channels, hw);
      return cols;
    }
    for (int c = 0; c < x.channels; ++c)
      for (int ky = 0; ky < kernel; ++ky)
        for (int kx = 0; kx < kernel; ++kx) {
          double* row = cols.row((c * kernel + ky) * kernel + kx).data();
          for (int y = 0; y < x.height; ++y) {
            const int sy = y + ky - pad;
            for (int xx = 0; xx < x.width; ++xx) {
              const int sx = xx + kx - pad;
              row[y * x.width + xx] = (sy < 0 || sy >= x.height || sx < 0 || sx >= x.width)
                                          ? 0.0
                                          : x(c, sy, sx);
            }
          }
        }
    return cols;
  }

  static Tensor col2im(const RowMatrix& cols, int channels, int height, int width,
                       int kernel) {
    Tensor out(channels, height, width);
    if (kernel == 1) {
      RowMatrixMap(out.values.data(), channels, static_cast<Eigen::Index>(height) * width) =
          cols;
      return out;
    }
    const int pad = kernel / 2;
    for (int c = 0; c < channels; ++c)
      for (int ky = 0; ky < kernel; ++ky)
        for (int kx = 0; kx < kernel; ++kx) {
          const double* row = cols.row((c * kernel + ky) * kernel + kx).data();
          for (int y = 0; y < height; ++y) {
            const int sy = y + ky - pad;
            if (sy < 0 || sy >= height) continue;
            for (int xx = 0; xx < width; ++xx) {
              const int sx = xx + kx - pad;
              if (sx < 0 || sx >= width) continue;
              out(c, sy, sx) += row[y * width + xx];
            }
          }
        }
    return out;
  }

  Tensor conv_forward(std::size_t i, const Tensor& x, const RowMatrix& cols) const {
    const Slot& s = slots_[i];
    const int hw = x.height * x.width;
    ConstRowMatrixMap weights(params_.data() + s.weight_offset, s.out_channels,
                              static_cast<Eigen::Index>(s.in_channels) * s.kernel * s.kernel);
    Eigen::Map<const Eigen::VectorXd> bias(params_.data() + s.bias_offset, s.out_channels);
    Tensor out(s.out_channels, x.height, x.width);
    RowMatrixMap result(out.values.data(), s.out_channels, hw);
    result.noalias() = weights * cols;
    result.colwise() += bias;
    switch (layers_[i].activation) {
      case Activation::relu:
        for (double& v : out.values) v = v > 0.0 ? v : 0.0;
        break;
      case Activation::sigmoid:
        for (double& v : out.values) v = sigmoid(v);
        break;
      case Activation::none:
        break;
    }
    return out;
  }

  static void apply_activation_derivative(Activation act, const Tensor& output, Tensor& grad) {
    switch (act) {
      case Activation::relu:
        for (std::size_t k = 0; k < grad.values.size(); ++k)
          if (output.values[k] <= 0.0) grad.values[k] = 0.0;
        break;
      case Activation::sigmoid:
        for (std::size_t k = 0; k < grad.values.size(); ++k) {
          const double s = output.values[k];
          grad.values[k] *= s * (1.0 - s);
        }
        break;
      case Activation::none:
        break;
    }
  }

  Tensor conv_backward(std::size_t i, const Tensor& input, const RowMatrix& cols,
                       const Tensor& grad, std::span<double> grad_params,
                       bool need_input_grad) const {
    const Slot& s = slots_[i];
    const int hw = input.height * input.width;
    const Eigen::Index fan = static_cast<Eigen::Index>(s.in_channels) * s.kernel * s.kernel;
    ConstRowMatrixMap g(grad.values.data(), s.out_channels, hw);
    RowMatrixMap dweights(grad_params.data() + s.weight_offset, s.out_channels, fan);
    dweights.noalias() += g * cols.transpose();
    // Plain loop: Eigen's vectorized reductions over unaligned maps sum in an
    // address-dependent order, which breaks run-to-run reproducibility.
    for (int o = 0; o < s.out_channels; ++o) {
      const double* row = grad.values.data() + static_cast<std::size_t>(o) * hw;
      double total = 0.0;
      for (int k = 0; k < hw; ++k) total += row[k];
      grad_params[s.bias_offset + o] += total;
    }
    if (!need_input_grad) return {};
    ConstRowMatrixMap weights(params_.data() + s.weight_offset, s.out_channels, fan);
    RowMatrix dcols = weights.transpose() * g;
    return col2im(dcols, s.in_channels, input.height, input.width, s.kernel);
  }

  static Tensor pool_forward(const Tensor& x, std::vector<int>* argmax) {
    const int oh = x.height / 2, ow = x.width / 2;
    Tensor out(x.channels, oh, ow);
    if (argmax) argmax->assign(out.size(), 0);
    std::size_t k = 0;
    for (int c = 0; c < x.channels; ++c)
      for (int y = 0; y < oh; ++y)
        for (int xx = 0; xx < ow; ++xx, ++k) {
          double best = -std::numeric_limits<double>::infinity();
          int best_index = 0;
          for (int dy = 0; dy < 2; ++dy)
            for (int dx = 0; dx < 2; ++dx) {
              const int sy = 2 * y + dy, sx = 2 * xx + dx;
              const double v = x(c, sy, sx);
              if (v > best) {
                best = v;
                best_index = (c * x.height + sy) * x.width + sx;
              }
            }
          out.values[k] = best;
          if (argmax) (*argmax)[k] = best_index;
        }
    return out;
  }

  static Tensor pool_backward(const Tensor& input, const std::vector<int>& argmax,
                              const Tensor& grad) {
    Tensor out(input.channels, input.height, input.width);
    for (std::size_t k = 0; k < grad.values.size(); ++k) out.values[argmax[k]] += grad.values[k];
    return out;
  }

  int in_channels_ = 0;
  int out_channels_ = 0;
  std::vector<LayerSpec> layers_;
  std::vector<Slot> slots_;
  std::vector<double> params_;
};

// Adam over a flat parameter block.
struct Adam {
  double learning_rate = 1e-3;
  double beta1 = 0.9;
  double beta2 = 0.999;
  double epsilon = 1e-8;
  std::vector<double> first_moment;
  std::vector<double> second_moment;
  long steps = 0;

  explicit Adam(double lr = 1e-3) : learning_rate(lr) {}

  void step(std::span<double> params, std::span<const double> grads) {
    require(params.size() == grads.size(), "optimizer gradient size mismatch");
    if (first_moment.size() != params.size()) {
      first_moment.assign(params.size(), 0.0);
      second_moment.assign(params.size(), 0.0);
      steps = 0;
    }
    ++steps;
    const double c1 = 1.0 - std::pow(beta1, static_cast<double>(steps));
    const double c2 = 1.0 - std::pow(beta2, static_cast<double>(steps));
    for (std::size_t k = 0; k < params.size(); ++k) {
      first_moment[k] = beta1 * first_moment[k] + (1.0 - beta1) * grads[k];
      second_moment[k] = beta2 * second_moment[k] + (1.0 - beta2) * grads[k] * grads[k];
      params[k] -= learning_rate * (first_moment[k] / c1) /
                   (std::sqrt(second_moment[k] / c2) + epsilon);
    }
  }
};

}  // namespace r3p
