#pragma once

#include <cstddef>
#include <deque>
#include <functional>
#include <span>
#include <vector>

#include <Eigen/Core>

namespace volseg::ad {

/// Aligned storage: Eigen's vectorised reductions pick their summation order from the
/// pointer alignment, so unaligned buffers would make results depend on the allocator.
using Buffer = std::vector<double, Eigen::aligned_allocator<double>>;

/// Row-major 2D array of doubles. Grids are stored as [voxels x channels].
struct Tensor {
  int rows = 0;
  int cols = 0;
  Buffer data;

  Tensor() = default;
  Tensor(int r, int c, double fill = 0.0) : rows(r), cols(c), data(static_cast<std::size_t>(r) * c, fill) {}

  std::size_t size() const { return data.size(); }
  double& operator()(int r, int c) { return data[static_cast<std::size_t>(r) * cols + c]; }
  double operator()(int r, int c) const { return data[static_cast<std::size_t>(r) * cols + c]; }
  bool same_shape(const Tensor& o) const { return rows == o.rows && cols == o.cols; }
  bool operator==(const Tensor&) const = default;
};

using RowMajor = Eigen::Matrix<double, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>;

inline Eigen::Map<RowMajor> map(Tensor& t) { return {t.data.data(), t.rows, t.cols}; }
inline Eigen::Map<const RowMajor> map(const Tensor& t) { return {t.data.data(), t.rows, t.cols}; }

class Tape;

/// Handle to a value recorded on a Tape.
struct Var {
  Tape* tape = nullptr;
  int id = -1;

  const Tensor& value() const;
};

/// Reverse-mode tape. A tape built with record=false keeps values only.
class Tape {
 public:
  explicit Tape(bool record = true) : record_(record) {}
  Tape(const Tape&) = delete;
  Tape& operator=(const Tape&) = delete;

  bool recording() const { return record_; }

  Var constant(Tensor value);
  /// Borrowed leaf; gradients are accumulated into *grad_sink during backward().
  Var parameter(const Tensor& value, Tensor* grad_sink);

  const Tensor& value(Var v) const;
  bool requires_grad(Var v) const { return nodes_[v.id].requires_grad; }
  /// Lazily zero-initialised gradient buffer.
  Tensor& grad(Var v);

  void backward(Var root);

  /// Called with the output handle; reads grad(self) and accumulates into input grads.
  using Backward = std::function<void(Tape&, Var self)>;
  Var push(Tensor value, std::span<const Var> inputs, Backward back);

 private:
  struct Node {
    Tensor owned;
    const Tensor* borrowed = nullptr;
    Tensor grad;
    Tensor* sink = nullptr;
    bool requires_grad = false;
    Backward back;
  };
  bool record_;
  std::deque<Node> nodes_;  // stable addresses across push
};

Var matmul(Var a, Var b, bool transpose_b = false);
Var add(Var a, Var b);
/// Adds a [1 x cols] row to every row of a.
Var add_row(Var a, Var row);
Var linear(Var x, Var weight, Var bias);
Var layer_norm(Var x, Var gamma, Var beta, double eps = 1e-6);
Var gelu(Var x);
Var sigmoid(Var x);
Var mean(Var x);
/// Multi-head scaled dot-product attention over already-projected q, k, v.
Var attention(Var q, Var k, Var v, int heads);
Var concat_rows(std::span<const Var> parts);
Var slice_rows(Var x, int begin, int count);
Var gather_rows(Var table, std::vector<int> indices);
/// [g^3 x s^3*c] -> [(g*s)^3 x c]; column index is offset*c + channel, offsets x-fastest.
Var upsample_shuffle(Var x, int grid, int stride, int channels);
/// dice_w * soft-Dice loss + ce_w * mean binary cross-entropy, on a [V x 1] logit column.
Var dice_bce_loss(Var logits, const Tensor& target, double dice_w, double ce_w, double smooth = 1.0);

}  // namespace volseg::ad
