#pragma once

#include <cstdint>
#include <functional>
#include <span>
#include <string>
#include <unordered_map>
#include <vector>

#include "pialnn/common.hpp"

namespace pialnn {

// A named parameter array paired with a gradient buffer of the same shape.
struct Tensor {
  std::string name;
  std::vector<int> shape;
  std::vector<double> value;
  std::vector<double> grad;

  size_t size() const { return value.size(); }
};

// Ordered collection of parameters; the order defines the checkpoint payload
// layout.
struct ParamStore {
  std::vector<Tensor> tensors;
  uint64_t init_seed = 0;

  Tensor& add(const std::string& name, std::vector<int> shape);
  Tensor& at(const std::string& name);
  const Tensor& at(const std::string& name) const;
  bool has(const std::string& name) const;

  size_t total_size() const;
  void zero_grads();
  // Returns the name of the first tensor with a non-finite gradient, or "".
  std::string first_nonfinite_grad() const;

 private:
  std::unordered_map<std::string, size_t> index_;
};

// y[n x out] = x[n x in] * W + b. W is (in x out) row-major.
void dense_forward(const double* x, int n, int in, int out, const double* W,
                   const double* b, double* y);

// Gradients of the dense layer. dW/db accumulate (+=); dx is overwritten and
// may be nullptr when the input gradient is not needed.
void dense_backward(const double* x, const double* dy, int n, int in, int out,
                    const double* W, double* dx, double* dW_acc,
                    double* db_acc);

void leaky_relu_forward(const double* z, double* y, size_t count, double slope);
void leaky_relu_backward(const double* z, const double* dy, double* dz,
                         size_t count, double slope);

// Valid convolution of a K-kernel over a K cube: one spatial position, so
// out[v][c] = <kernel[c], cube[v]> + bias[c]. kernel is (c_out x width)
// row-major with width = channels*K^3 flattened like the cube entries.
void cube_conv_forward(const double* cubes, int n, int width, int c_out,
                       const double* kernel, const double* bias, double* out);
void cube_conv_backward(const double* cubes, const double* dout, int n,
                        int width, int c_out, const double* kernel,
                        double* dcubes, double* dkernel_acc, double* dbias_acc);

struct LayerSpec {
  enum Kind { kDense, kLeakyRelu, kCubeConv } kind = kDense;
  std::string name;
  int in = 0;
  int out = 0;
  double slope = 0.2;
};

// Weights uniform in +-sqrt(1/fan_in), biases zero, deterministic in seed.
// Dense tensors are named "<name>/W" and "<name>/b"; cube_conv uses the same
// convention with W of shape (in x out) ready for row-major products.
ParamStore init_params(const std::vector<LayerSpec>& specs, uint64_t seed);

// Central-difference gradient check. `loss` evaluates the scalar objective
// without touching gradients; `compute_grads` runs forward+backward filling
// the gradient spans. Every coordinate of every (value, grad) pair is probed
// with x +- eps; returns the worst relative error
// |analytic - numeric| / max(floor, |numeric|).
struct GradCheckTarget {
  std::function<double()> loss;
  std::function<void()> compute_grads;
  std::vector<std::span<double>> values;
  std::vector<std::span<double>> grads;
};

double grad_check(GradCheckTarget& target, double eps = 1e-5,
                  double floor = 1e-6);

}  // namespace pialnn
