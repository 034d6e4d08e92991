#include "dvp/nn.hpp"

#include <cmath>
#include <stdexcept>

#include "dvp/kernels.hpp"
#include "dvp/ops.hpp"

namespace dvp::nn {

void kaiming_uniform(Tensor& w, int fan_in, Rng& rng) {
  const double bound = std::sqrt(6.0 / fan_in);
  for (auto& v : w.values()) v = static_cast<float>(rng.uniform(-bound, bound));
}

MlpParams make_mlp(int in, int hidden, int out, OutAct act, Rng& rng) {
  MlpParams p;
  p.w1 = Tensor::zeros({hidden, in}, true);
  p.b1 = Tensor::zeros({hidden}, true);
  p.w2 = Tensor::zeros({hidden, hidden}, true);
  p.b2 = Tensor::zeros({hidden}, true);
  p.w3 = Tensor::zeros({out, hidden}, true);
  p.b3 = Tensor::zeros({out}, true);
  kaiming_uniform(p.w1, in, rng);
  kaiming_uniform(p.w2, hidden, rng);
  kaiming_uniform(p.w3, hidden, rng);
  p.act = act;
  return p;
}

Tensor linear(Tape& t, const Tensor& x, const Tensor& w, const Tensor& b) {
  return ops::add_bias_rows(t, ops::matmul_nt(t, x, w), b);
}

Tensor mlp_forward(Tape& t, const MlpParams& p, const Tensor& x) {
  if (x.ndim() != 2 || x.dim(1) != p.in_dim())
    throw std::invalid_argument("mlp_forward: input width mismatch");
  Tensor h = ops::gelu(t, linear(t, x, p.w1, p.b1));
  h = ops::gelu(t, linear(t, h, p.w2, p.b2));
  Tensor y = linear(t, h, p.w3, p.b3);
  switch (p.act) {
    case OutAct::Identity:
      return y;
    case OutAct::Sigmoid:
      return ops::sigmoid(t, y);
    case OutAct::Softplus:
      return ops::softplus(t, y);
  }
  return y;
}

void collect_mlp(const MlpParams& p, const std::string& prefix,
                 std::vector<NamedParam>& out) {
  out.push_back({prefix + ".l1.w", p.w1});
  out.push_back({prefix + ".l1.b", p.b1});
  out.push_back({prefix + ".l2.w", p.w2});
  out.push_back({prefix + ".l2.b", p.b2});
  out.push_back({prefix + ".l3.w", p.w3});
  out.push_back({prefix + ".l3.b", p.b3});
}

void adam_step(std::vector<NamedParam>& params, AdamState& s) {
  for (auto& np : params) {
    if (!np.t.has_grad())
      throw std::invalid_argument("adam_step: missing grad for " + np.name);
    if (!kernels::all_finite(np.t.grad().data(), np.t.numel()))
      throw std::runtime_error("adam_step: non-finite grad for " + np.name);
  }
  s.step += 1;
  const double bc1 = 1.0 - std::pow(double(s.beta1), double(s.step));
  const double bc2 = 1.0 - std::pow(double(s.beta2), double(s.step));
  for (auto& np : params) {
    auto& mom = s.moments[np.name];
    const int64_t n = np.t.numel();
    if (mom.m.empty()) {
      mom.m.assign(n, 0.0f);
      mom.v.assign(n, 0.0f);
    }
    float* p = np.t.data();
    const float* g = np.t.grad().data();
    float* m = mom.m.data();
    float* v = mom.v.data();
    const float b1 = s.beta1, b2 = s.beta2, eps = s.eps;
    const float lr = s.lr;
    const float ibc1 = static_cast<float>(1.0 / bc1);
    const float ibc2 = static_cast<float>(1.0 / bc2);
    constexpr int64_t kChunk = 8192;
    kernels::parallel_for((n + kChunk - 1) / kChunk, [&](int64_t ch) {
      const int64_t lo = ch * kChunk, hi = std::min(n, lo + kChunk);
#pragma omp simd
      for (int64_t i = lo; i < hi; ++i) {
        m[i] = b1 * m[i] + (1.0f - b1) * g[i];
        v[i] = b2 * v[i] + (1.0f - b2) * g[i] * g[i];
        const float mhat = m[i] * ibc1;
        const float vhat = v[i] * ibc2;
        p[i] -= lr * mhat / (std::sqrt(vhat) + eps);
      }
    });
  }
}

double clip_grad_norm(const std::vector<Tensor>& tensors, double max_norm) {
  if (tensors.empty())
    throw std::invalid_argument("clip_grad_norm: empty tensor list");
  if (!(max_norm > 0.0))
    throw std::invalid_argument("clip_grad_norm: max_norm must be > 0");
  double ss = 0.0;
  for (const auto& t : tensors) {
    if (!t.has_grad())
      throw std::invalid_argument("clip_grad_norm: tensor missing grad");
    ss += kernels::sum_squares(t.grad().data(), t.numel());
  }
  const double norm = std::sqrt(ss);
  if (norm > max_norm) {
    const float c = static_cast<float>(max_norm / norm);
    for (const auto& t : tensors) {
      auto& g = const_cast<Tensor&>(t).grad();
      for (auto& x : g) x *= c;
    }
  }
  return norm;
}

double grad_check(const std::function<Tensor(Tape&, const Tensor&)>& f,
                  const Tensor& x, double h) {
  if (!(h >= 1e-5 && h <= 1e-2))
    throw std::invalid_argument("grad_check: h must be in [1e-5, 1e-2]");
  Tensor probe = x;
  probe.set_requires_grad(true);
  probe.drop_grad();
  {
    Tape t;
    Tensor loss = f(t, probe);
    if (loss.numel() != 1)
      throw std::invalid_argument("grad_check: f must be scalar-valued");
    backward(t, loss);
  }
  std::vector<float> analytic = probe.grad();
  double max_rel = 0.0;
  for (int64_t i = 0; i < probe.numel(); ++i) {
    const float orig = probe.data()[i];
    Tape t;
    t.enabled = false;
    probe.data()[i] = static_cast<float>(orig + h);
    const double fp = f(t, probe).item();
    probe.data()[i] = static_cast<float>(orig - h);
    const double fm = f(t, probe).item();
    probe.data()[i] = orig;
    if (!std::isfinite(fp) || !std::isfinite(fm))
      throw std::runtime_error("grad_check: non-finite function value");
    const double cd = (fp - fm) / (2.0 * h);
    const double a = analytic[i];
    const double rel = std::fabs(a - cd) / (std::fabs(a) + std::fabs(cd) + 1e-8);
    max_rel = std::max(max_rel, rel);
  }
  return max_rel;
}

double grad_check_many(const std::function<Tensor(Tape&)>& f,
                       const std::vector<Tensor>& probes, double h,
                       int samples_per_tensor, uint64_t seed) {
  for (const auto& p : probes) const_cast<Tensor&>(p).drop_grad();
  {
    Tape t;
    Tensor loss = f(t);
    if (loss.numel() != 1)
      throw std::invalid_argument("grad_check_many: f must be scalar-valued");
    backward(t, loss);
  }
  std::vector<std::vector<float>> analytic;
  analytic.reserve(probes.size());
  for (const auto& p : probes)
    analytic.push_back(p.has_grad() ? p.grad() : std::vector<float>(p.numel(), 0.0f));

  Rng rng(seed);
  double max_rel = 0.0;
  for (size_t pi = 0; pi < probes.size(); ++pi) {
    Tensor probe = probes[pi];
    const int64_t n = probe.numel();
    std::vector<int64_t> idx;
    if (samples_per_tensor <= 0 || n <= samples_per_tensor) {
      for (int64_t i = 0; i < n; ++i) idx.push_back(i);
    } else {
      for (int s = 0; s < samples_per_tensor; ++s)
        idx.push_back(rng.next() % static_cast<uint64_t>(n));
    }
    for (int64_t i : idx) {
      const float orig = probe.data()[i];
      Tape t;
      t.enabled = false;
      probe.data()[i] = static_cast<float>(orig + h);
      const double fp = f(t).item();
      probe.data()[i] = static_cast<float>(orig - h);
      const double fm = f(t).item();
      probe.data()[i] = orig;
      const double cd = (fp - fm) / (2.0 * h);
      const double a = analytic[pi][i];
      const double rel =
          std::fabs(a - cd) / (std::fabs(a) + std::fabs(cd) + 1e-8);
      max_rel = std::max(max_rel, rel);
    }
  }
  return max_rel;
}

}  // namespace dvp::nn
