#pragma once

#include <cstdint>
#include <functional>
#include <initializer_list>
#include <memory>
#include <vector>

#include "ifan/common.hpp"

namespace ifan {

using Shape = std::vector<int>;

int numel_of(const Shape& s);

struct TensorData {
  Shape shape;
  std::vector<double> v;
  bool requires_grad = false;
  std::vector<double> grad;  // persistent; accumulated across backward calls

  // transient per-backward-pass adjoint, stamped with the pass id
  std::vector<double> adj;
  std::uint64_t adj_pass = 0;
};

using DataPtr = std::shared_ptr<TensorData>;

// Dense n-dimensional tensor of doubles, row-major. Copying a Tensor copies
// the handle, not the storage.
class Tensor {
 public:
  Tensor() = default;

  static Tensor zeros(Shape shape, bool requires_grad = false);
  static Tensor full(Shape shape, double value, bool requires_grad = false);
  static Tensor scalar(double value);
  static Tensor of(Shape shape, std::vector<double> values, bool requires_grad = false);

  bool defined() const { return static_cast<bool>(data); }
  const Shape& shape() const { return data->shape; }
  int rank() const { return static_cast<int>(data->shape.size()); }
  int dim(int i) const { return data->shape[static_cast<size_t>(i)]; }
  int numel() const { return static_cast<int>(data->v.size()); }

  std::vector<double>& values() { return data->v; }
  const std::vector<double>& values() const { return data->v; }
  double value() const;  // scalar tensors only

  bool requires_grad() const { return data->requires_grad; }
  Tensor& set_requires_grad(bool rg) {
    data->requires_grad = rg;
    return *this;
  }

  bool has_grad() const { return !data->grad.empty(); }
  // Zero-filled on first access.
  std::vector<double>& grad();
  const std::vector<double>& grad() const;
  void zero_grad();

  // Value copy with no graph history and no gradient requirement.
  Tensor detached() const;

  bool all_finite() const;

  DataPtr data;
};

// Reverse-mode tape. Nodes are replayed in exact reverse creation order on
// backward(). Constructing a Tape makes it the active recording target for
// the current thread; destruction restores the previous one.
class Tape {
 public:
  struct Node {
    const char* op;
    std::vector<DataPtr> inputs;
    DataPtr output;
    std::function<void(Tape&)> backward;
  };

  Tape();
  ~Tape();
  Tape(const Tape&) = delete;
  Tape& operator=(const Tape&) = delete;

  static Tape* active();

  void record(const char* op, std::vector<DataPtr> inputs, DataPtr output,
              std::function<void(Tape&)> backward);

  // Seeds d(loss)/d(loss) = 1, replays the tape in reverse creation order and
  // then adds each requires_grad tensor's adjoint into its persistent grad.
  // Repeated calls accumulate.
  void backward(const Tensor& loss);

  size_t size() const { return nodes_.size(); }

  // Adjoint buffer for this pass, zero-initialized and stamped on first use.
  std::vector<double>& adj(const DataPtr& t);
  // Null if the tensor received no gradient so far in this pass.
  const std::vector<double>* adj_if(const DataPtr& t) const;

 private:
  std::vector<Node> nodes_;
  std::vector<TensorData*> touched_;
  std::uint64_t pass_ = 0;
  Tape* prev_ = nullptr;
};

namespace ops {

// elementwise, same shape
Tensor add(const Tensor& a, const Tensor& b);
Tensor sub(const Tensor& a, const Tensor& b);
Tensor mul(const Tensor& a, const Tensor& b);

Tensor scale(const Tensor& x, double c);
Tensor add_const(const Tensor& x, double c);
Tensor neg(const Tensor& x);

Tensor relu(const Tensor& x);
Tensor sigmoid(const Tensor& x);
Tensor square(const Tensor& x);
Tensor sqrt(const Tensor& x);  // derivative at 0 defined as 0
Tensor log(const Tensor& x);
// 0.5 x^2 for |x| < 1, |x| - 0.5 otherwise
Tensor smooth_l1(const Tensor& x);

Tensor sum(const Tensor& x);
Tensor mean(const Tensor& x);

// [N, M] -> [N, M], rows sum to 1
Tensor softmax_rows(const Tensor& x);
// mean over rows of -log softmax(logits)[target]; numerically stable
Tensor cross_entropy_mean(const Tensor& logits, const std::vector<int>& targets);

// x: [N, in], w: [out, in], b: [out] -> [N, out]
Tensor linear(const Tensor& x, const Tensor& w, const Tensor& b);

// x: [N, C, H, W], w: [K, C, kh, kw], b: [K]; cross-correlation
Tensor conv2d(const Tensor& x, const Tensor& w, const Tensor& b, int stride, int pad);

// 2x2 window, stride 2; spatial dims must be even
Tensor max_pool2x2(const Tensor& x);

// identity forward; backward multiplies the gradient by -lambda
Tensor grl(const Tensor& x, double lambda);

Tensor reshape(const Tensor& x, Shape shape);
// each input flattened to one row -> [N, numel]
Tensor concat_rows(const std::vector<Tensor>& rows);
// x: [N, D] -> [D]
Tensor slice_row(const Tensor& x, int row);
// x: [N, D] -> [K, D]
Tensor select_rows(const Tensor& x, const std::vector<int>& rows);
Tensor pick(const Tensor& x, int flat_index);  // -> scalar
// x: [N, C, H, W] -> [N, C], mean over spatial positions
Tensor spatial_mean(const Tensor& x);

}  // namespace ops

// Row-major GEMM on doubles (OpenBLAS underneath, pinned to one thread so
// results are reproducible and training runs can be parallelized at the
// process level).
void dgemm_rm(bool trans_a, bool trans_b, int m, int n, int k, double alpha,
              const double* a, int lda, const double* b, int ldb, double beta,
              double* c, int ldc);

}  // namespace ifan
