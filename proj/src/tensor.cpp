#include "dvp/tensor.hpp"

#include <stdexcept>

namespace dvp {

Tensor Tensor::zeros(std::vector<int> shape, bool requires_grad) {
  auto n = std::make_shared<TensorNode>();
  n->shape = std::move(shape);
  n->v.assign(n->numel(), 0.0f);
  n->requires_grad = requires_grad;
  return Tensor(std::move(n));
}

Tensor Tensor::full(std::vector<int> shape, float value, bool requires_grad) {
  auto n = std::make_shared<TensorNode>();
  n->shape = std::move(shape);
  n->v.assign(n->numel(), value);
  n->requires_grad = requires_grad;
  return Tensor(std::move(n));
}

Tensor Tensor::from(std::vector<int> shape, std::vector<float> data,
                    bool requires_grad) {
  auto n = std::make_shared<TensorNode>();
  n->shape = std::move(shape);
  n->v = std::move(data);
  if (static_cast<int64_t>(n->v.size()) != n->numel())
    throw std::invalid_argument("Tensor::from: data length != product(shape)");
  n->requires_grad = requires_grad;
  return Tensor(std::move(n));
}

void Tape::run_backward() {
  for (auto it = recs_.rbegin(); it != recs_.rend(); ++it) {
    if (it->out->g.empty()) continue;  // not reachable from the loss
    it->bwd();
  }
}

void backward(Tape& t, const Tensor& loss) {
  if (!loss.defined() || loss.numel() != 1)
    throw std::invalid_argument("backward: loss must be a defined scalar");
  if (!t.produced(loss.node()))
    throw std::invalid_argument("backward: loss was not produced on this tape");
  loss.node()->ensure_grad();
  loss.node()->g[0] = 1.0f;
  t.run_backward();
}

}  // namespace dvp
