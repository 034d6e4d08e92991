#pragma once

#include <functional>
#include <map>
#include <string>
#include <vector>

#include "dvp/rng.hpp"
#include "dvp/tensor.hpp"

namespace dvp::nn {

using dvp::NamedParam;
using dvp::Rng;
using dvp::Tape;
using dvp::Tensor;

enum class OutAct { Identity, Sigmoid, Softplus };

// 3-layer MLP, hidden width 256, GELU hidden activations.
struct MlpParams {
  Tensor w1, b1, w2, b2, w3, b3;  // w[out,in]
  OutAct act = OutAct::Identity;

  int in_dim() const { return w1.dim(1); }
  int out_dim() const { return w3.dim(0); }
};

MlpParams make_mlp(int in, int hidden, int out, OutAct act, Rng& rng);
Tensor mlp_forward(Tape& t, const MlpParams& p, const Tensor& x);
void collect_mlp(const MlpParams& p, const std::string& prefix,
                 std::vector<NamedParam>& out);

Tensor linear(Tape& t, const Tensor& x, const Tensor& w, const Tensor& b);

// U(-sqrt(6/fan_in), sqrt(6/fan_in))
void kaiming_uniform(Tensor& w, int fan_in, Rng& rng);

struct AdamState {
  float lr = 1e-4f;
  float beta1 = 0.9f;
  float beta2 = 0.999f;
  float eps = 1e-8f;
  int64_t step = 0;
  struct Moments {
    std::vector<float> m, v;
  };
  std::map<std::string, Moments> moments;
};

// In-place Adam update over params' grads. Throws on missing or non-finite
// gradients. Params absent from the list are untouched (that is how frozen
// tensors are excluded).
void adam_step(std::vector<NamedParam>& params, AdamState& s);

// Scales the listed gradients so their global L2 norm is at most max_norm.
// Returns the pre-clip norm. Norm accumulates in 64-bit.
double clip_grad_norm(const std::vector<Tensor>& tensors, double max_norm);

// Max relative error between analytic and central-difference gradients of a
// scalar function, checked over every coordinate of x.
double grad_check(const std::function<Tensor(Tape&, const Tensor&)>& f,
                  const Tensor& x, double h);

// Same check against a set of probe tensors (parameters), sampling
// coordinates when a tensor is large.
double grad_check_many(const std::function<Tensor(Tape&)>& f,
                       const std::vector<Tensor>& probes, double h,
                       int samples_per_tensor, uint64_t seed);

}  // namespace dvp::nn
