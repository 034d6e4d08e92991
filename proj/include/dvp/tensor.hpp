#pragma once

#include <cstdint>
#include <functional>
#include <memory>
#include <string>
#include <vector>

namespace dvp {

struct TensorNode {
  std::vector<int> shape;
  std::vector<float> v;
  std::vector<float> g;  // empty until a backward pass touches this node
  bool requires_grad = false;

  int64_t numel() const {
    int64_t n = 1;
    for (int d : shape) n *= d;
    return n;
  }
  void ensure_grad() {
    if (g.empty()) g.assign(v.size(), 0.0f);
  }
};

// Shared handle to a node of the computation graph. Copies alias.
class Tensor {
 public:
  Tensor() = default;
  explicit Tensor(std::shared_ptr<TensorNode> n) : n_(std::move(n)) {}

  static Tensor zeros(std::vector<int> shape, bool requires_grad = false);
  static Tensor full(std::vector<int> shape, float value,
                     bool requires_grad = false);
  static Tensor from(std::vector<int> shape, std::vector<float> data,
                     bool requires_grad = false);

  bool defined() const { return n_ != nullptr; }
  const std::vector<int>& shape() const { return n_->shape; }
  int dim(int i) const { return n_->shape[i]; }
  int ndim() const { return static_cast<int>(n_->shape.size()); }
  int64_t numel() const { return n_->numel(); }

  float* data() { return n_->v.data(); }
  const float* data() const { return n_->v.data(); }
  std::vector<float>& values() { return n_->v; }
  const std::vector<float>& values() const { return n_->v; }

  bool requires_grad() const { return n_->requires_grad; }
  void set_requires_grad(bool b) { n_->requires_grad = b; }
  bool has_grad() const { return !n_->g.empty(); }
  std::vector<float>& grad() { return n_->g; }
  const std::vector<float>& grad() const { return n_->g; }
  void zero_grad() { n_->g.assign(n_->v.size(), 0.0f); }
  void drop_grad() { n_->g.clear(); }

  float item() const { return n_->v.at(0); }

  TensorNode* node() const { return n_.get(); }
  const std::shared_ptr<TensorNode>& ptr() const { return n_; }

 private:
  std::shared_ptr<TensorNode> n_;
};

struct NamedParam {
  std::string name;
  Tensor t;
};

// Ordered record of executed primitive ops; backward replays it in reverse.
// One tape is single-threaded by contract (kernels may parallelize inside).
class Tape {
 public:
  bool enabled = true;        // false: ops run forward-only (eval mode)
  bool check_finite = true;   // verify every op output is finite

  void record(std::shared_ptr<TensorNode> out, std::function<void()> bwd) {
    if (enabled) recs_.push_back({std::move(out), std::move(bwd)});
  }
  void clear() { recs_.clear(); }
  size_t size() const { return recs_.size(); }
  bool produced(const TensorNode* n) const {
    for (const auto& r : recs_)
      if (r.out.get() == n) return true;
    return false;
  }
  void run_backward();

 private:
  struct Rec {
    std::shared_ptr<TensorNode> out;
    std::function<void()> bwd;
  };
  std::vector<Rec> recs_;
};

// Seeds d(loss)=1 and propagates through the tape in reverse order.
// loss must be scalar and produced on t.
void backward(Tape& t, const Tensor& loss);

}  // namespace dvp
