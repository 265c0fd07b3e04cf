#include "pialnn/nn.hpp"

#include <cmath>

#include "pialnn/kernels.hpp"
#include "pialnn/rng.hpp"

namespace pialnn {

Tensor& ParamStore::add(const std::string& name, std::vector<int> shape) {
  if (has(name)) throw format_error("duplicate parameter name: " + name);
  size_t count = 1;
  for (int d : shape) {
    if (d <= 0) throw format_error("parameter " + name + ": bad shape");
    count *= (size_t)d;
  }
  index_[name] = tensors.size();
  Tensor& t = tensors.emplace_back();
  t.name = name;
  t.shape = std::move(shape);
  t.value.assign(count, 0.0);
  t.grad.assign(count, 0.0);
  return t;
}

Tensor& ParamStore::at(const std::string& name) {
  auto it = index_.find(name);
  if (it == index_.end()) throw format_error("unknown parameter: " + name);
  return tensors[it->second];
}

const Tensor& ParamStore::at(const std::string& name) const {
  auto it = index_.find(name);
  if (it == index_.end()) throw format_error("unknown parameter: " + name);
  return tensors[it->second];
}

bool ParamStore::has(const std::string& name) const {
  return index_.count(name) != 0;
}

size_t ParamStore::total_size() const {
  size_t n = 0;
  for (const Tensor& t : tensors) n += t.size();
  return n;
}

void ParamStore::zero_grads() {
  for (Tensor& t : tensors) std::fill(t.grad.begin(), t.grad.end(), 0.0);
}

std::string ParamStore::first_nonfinite_grad() const {
  for (const Tensor& t : tensors)
    for (double g : t.grad)
      if (!std::isfinite(g)) return t.name;
  return "";
}

void dense_forward(const double* x, int n, int in, int out, const double* W,
                   const double* b, double* y) {
  kernels::gemm_nn(x, in, W, out, b, y, out, n, in, out);
}

void dense_backward(const double* x, const double* dy, int n, int in, int out,
                    const double* W, double* dx, double* dW_acc,
                    double* db_acc) {
  if (dW_acc) kernels::gemm_tn_acc(x, in, dy, out, dW_acc, out, n, in, out);
  if (db_acc) kernels::colsum_acc(dy, out, db_acc, n, out);
  if (dx) kernels::gemm_nt(dy, out, W, out, nullptr, dx, in, n, out, in);
}

void leaky_relu_forward(const double* z, double* y, size_t count,
                        double slope) {
  kernels::leaky_relu(z, y, count, slope);
}

void leaky_relu_backward(const double* z, const double* dy, double* dz,
                         size_t count, double slope) {
  kernels::leaky_relu_grad(z, dy, dz, count, slope);
}

void cube_conv_forward(const double* cubes, int n, int width, int c_out,
                       const double* kernel, const double* bias, double* out) {
  kernels::gemm_nt(cubes, width, kernel, width, bias, out, c_out, n, width,
                   c_out);
}

void cube_conv_backward(const double* cubes, const double* dout, int n,
                        int width, int c_out, const double* kernel,
                        double* dcubes, double* dkernel_acc,
                        double* dbias_acc) {
  // dkernel[c][d] += sum_v dout[v][c]*cubes[v][d]
  if (dkernel_acc)
    kernels::gemm_tn_acc(dout, c_out, cubes, width, dkernel_acc, width, n,
                         c_out, width);
  if (dbias_acc) kernels::colsum_acc(dout, c_out, dbias_acc, n, c_out);
  // dcubes[v][d] = sum_c dout[v][c]*kernel[c][d]
  if (dcubes)
    kernels::gemm_nn(dout, c_out, kernel, width, nullptr, dcubes, width, n,
                     c_out, width);
}

ParamStore init_params(const std::vector<LayerSpec>& specs, uint64_t seed) {
  ParamStore store;
  store.init_seed = seed;
  uint64_t tensor_index = 0;
  for (const LayerSpec& spec : specs) {
    if (spec.kind == LayerSpec::kLeakyRelu) continue;
    Tensor& W = store.add(spec.name + "/W", {spec.in, spec.out});
    const double bound = std::sqrt(1.0 / spec.in);
    Rng rng(subkey(seed, 0x494E4954ull + tensor_index));  // "INIT"
    for (double& w : W.value) w = rng.uniform(-bound, bound);
    store.add(spec.name + "/b", {spec.out});
    ++tensor_index;
  }
  return store;
}

double grad_check(GradCheckTarget& target, double eps, double floor) {
  target.compute_grads();
  std::vector<std::vector<double>> analytic;
  analytic.reserve(target.grads.size());
  for (auto g : target.grads) analytic.emplace_back(g.begin(), g.end());

  double worst = 0;
  for (size_t t = 0; t < target.values.size(); ++t) {
    auto vals = target.values[t];
    for (size_t i = 0; i < vals.size(); ++i) {
      const double saved = vals[i];
      vals[i] = saved + eps;
      const double fp = target.loss();
      vals[i] = saved - eps;
      const double fm = target.loss();
      vals[i] = saved;
      const double numeric = (fp - fm) / (2 * eps);
      const double a = analytic[t][i];
      const double denom = std::max(floor, std::abs(numeric));
      const double rel = std::abs(a - numeric) / denom;
      if (rel > worst) worst = rel;
    }
  }
  return worst;
}

}  // namespace pialnn
