#include "volseg/autodiff.hpp"

#include <algorithm>
#include <array>
#include <cmath>
#include <memory>
#include <numbers>

#include "volseg/error.hpp"

namespace volseg::ad {

const Tensor& Var::value() const { return tape->value(*this); }

Var Tape::constant(Tensor value) {
  Node n;
  n.owned = std::move(value);
  nodes_.push_back(std::move(n));
  return {this, static_cast<int>(nodes_.size()) - 1};
}

Var Tape::parameter(const Tensor& value, Tensor* grad_sink) {
  Node n;
  n.borrowed = &value;
  n.sink = record_ ? grad_sink : nullptr;
  n.requires_grad = n.sink != nullptr;
  nodes_.push_back(std::move(n));
  return {this, static_cast<int>(nodes_.size()) - 1};
}

const Tensor& Tape::value(Var v) const {
  const Node& n = nodes_[v.id];
  return n.borrowed != nullptr ? *n.borrowed : n.owned;
}

Tensor& Tape::grad(Var v) {
  Node& n = nodes_[v.id];
  if (n.grad.size() == 0) {
    const Tensor& val = value(v);
    n.grad = Tensor(val.rows, val.cols, 0.0);
  }
  return n.grad;
}

Var Tape::push(Tensor value, std::span<const Var> inputs, Backward back) {
  Node n;
  n.owned = std::move(value);
  if (record_) {
    n.requires_grad = std::any_of(inputs.begin(), inputs.end(), [&](Var in) { return requires_grad(in); });
    if (n.requires_grad) n.back = std::move(back);
  }
  nodes_.push_back(std::move(n));
  return {this, static_cast<int>(nodes_.size()) - 1};
}

void Tape::backward(Var root) {
  if (!record_) throw Error(Errc::config, "backward on a non-recording tape");
  if (value(root).size() != 1) throw Error(Errc::shape, "backward root must be a scalar");
  if (!nodes_[root.id].requires_grad) return;
  grad(root).data[0] = 1.0;
  for (int id = root.id; id >= 0; --id) {
    Node& n = nodes_[id];
    if (!n.requires_grad || n.grad.size() == 0) continue;
    if (n.sink != nullptr) {
      if (!n.sink->same_shape(n.grad)) *n.sink = Tensor(n.grad.rows, n.grad.cols, 0.0);
      map(*n.sink) += map(n.grad);
    } else if (n.back) {
      n.back(*this, Var{this, id});
    }
    n.grad = Tensor();
  }
}

namespace {

void check(bool ok, const char* what) {
  if (!ok) throw Error(Errc::shape, what);
}

template <std::size_t N>
Var emit(Tensor out, const std::array<Var, N>& in, Tape::Backward back) {
  return in[0].tape->push(std::move(out), in, std::move(back));
}

double gelu_value(double x) { return 0.5 * x * (1.0 + std::erf(x * std::numbers::sqrt2 / 2.0)); }

double gelu_slope(double x) {
  const double cdf = 0.5 * (1.0 + std::erf(x * std::numbers::sqrt2 / 2.0));
  const double pdf = std::exp(-0.5 * x * x) / std::sqrt(2.0 * std::numbers::pi);
  return cdf + x * pdf;
}

double sigmoid_value(double x) {
  if (x >= 0.0) return 1.0 / (1.0 + std::exp(-x));
  const double e = std::exp(x);
  return e / (1.0 + e);
}

}  // namespace

Var matmul(Var a, Var b, bool transpose_b) {
  const Tensor& A = a.value();
  const Tensor& B = b.value();
  check(A.cols == (transpose_b ? B.cols : B.rows), "matmul: inner dimension mismatch");
  Tensor C(A.rows, transpose_b ? B.rows : B.cols);
  if (transpose_b) {
    map(C).noalias() = map(A) * map(B).transpose();
  } else {
    map(C).noalias() = map(A) * map(B);
  }
  return emit<2>(std::move(C), {a, b}, [a, b, transpose_b](Tape& t, Var self) {
    const Tensor& dC = t.grad(self);
    if (t.requires_grad(a)) {
      if (transpose_b) {
        map(t.grad(a)).noalias() += map(dC) * map(b.value());
      } else {
        map(t.grad(a)).noalias() += map(dC) * map(b.value()).transpose();
      }
    }
    if (t.requires_grad(b)) {
      if (transpose_b) {
        map(t.grad(b)).noalias() += map(dC).transpose() * map(a.value());
      } else {
        map(t.grad(b)).noalias() += map(a.value()).transpose() * map(dC);
      }
    }
  });
}

Var add(Var a, Var b) {
  const Tensor& A = a.value();
  const Tensor& B = b.value();
  check(A.same_shape(B), "add: shape mismatch");
  Tensor C = A;
  map(C) += map(B);
  return emit<2>(std::move(C), {a, b}, [a, b](Tape& t, Var self) {
    const Tensor& g = t.grad(self);
    if (t.requires_grad(a)) map(t.grad(a)) += map(g);
    if (t.requires_grad(b)) map(t.grad(b)) += map(g);
  });
}

Var add_row(Var a, Var row) {
  const Tensor& A = a.value();
  const Tensor& R = row.value();
  check(R.rows == 1 && R.cols == A.cols, "add_row: row shape mismatch");
  Tensor C = A;
  map(C).rowwise() += map(R).row(0);
  return emit<2>(std::move(C), {a, row}, [a, row](Tape& t, Var self) {
    const Tensor& g = t.grad(self);
    if (t.requires_grad(a)) map(t.grad(a)) += map(g);
    if (t.requires_grad(row)) map(t.grad(row)).row(0) += map(g).colwise().sum();
  });
}

Var linear(Var x, Var weight, Var bias) { return add_row(matmul(x, weight), bias); }

Var layer_norm(Var x, Var gamma, Var beta, double eps) {
  const Tensor& X = x.value();
  const Tensor& G = gamma.value();
  const Tensor& B = beta.value();
  check(G.rows == 1 && G.cols == X.cols && B.same_shape(G), "layer_norm: affine shape mismatch");
  const int n = X.rows;
  const int c = X.cols;
  auto xhat = std::make_shared<Tensor>(n, c);
  auto inv_std = std::make_shared<std::vector<double>>(n);
  Tensor Y(n, c);
  for (int r = 0; r < n; ++r) {
    const double* xr = &X.data[static_cast<std::size_t>(r) * c];
    double mu = 0.0;
    for (int j = 0; j < c; ++j) mu += xr[j];
    mu /= c;
    double var = 0.0;
    for (int j = 0; j < c; ++j) var += (xr[j] - mu) * (xr[j] - mu);
    var /= c;
    const double is = 1.0 / std::sqrt(var + eps);
    (*inv_std)[r] = is;
    double* hr = &xhat->data[static_cast<std::size_t>(r) * c];
    double* yr = &Y.data[static_cast<std::size_t>(r) * c];
    for (int j = 0; j < c; ++j) {
      hr[j] = (xr[j] - mu) * is;
      yr[j] = hr[j] * G.data[j] + B.data[j];
    }
  }
  return emit<3>(std::move(Y), {x, gamma, beta}, [x, gamma, beta, xhat, inv_std](Tape& t, Var self) {
    const Tensor& dY = t.grad(self);
    const int rows = dY.rows;
    const int cols = dY.cols;
    if (t.requires_grad(gamma)) {
      map(t.grad(gamma)).row(0) += (map(dY).array() * map(*xhat).array()).matrix().colwise().sum();
    }
    if (t.requires_grad(beta)) map(t.grad(beta)).row(0) += map(dY).colwise().sum();
    if (!t.requires_grad(x)) return;
    const Tensor& G = gamma.value();
    Tensor& dX = t.grad(x);
    std::vector<double> dh(cols);
    for (int r = 0; r < rows; ++r) {
      const double* gr = &dY.data[static_cast<std::size_t>(r) * cols];
      const double* hr = &xhat->data[static_cast<std::size_t>(r) * cols];
      double m1 = 0.0;
      double m2 = 0.0;
      for (int j = 0; j < cols; ++j) {
        dh[j] = gr[j] * G.data[j];
        m1 += dh[j];
        m2 += dh[j] * hr[j];
      }
      m1 /= cols;
      m2 /= cols;
      double* out = &dX.data[static_cast<std::size_t>(r) * cols];
      const double is = (*inv_std)[r];
      for (int j = 0; j < cols; ++j) out[j] += is * (dh[j] - m1 - hr[j] * m2);
    }
  });
}

Var gelu(Var x) {
  const Tensor& X = x.value();
  Tensor Y(X.rows, X.cols);
  for (std::size_t i = 0; i < X.size(); ++i) Y.data[i] = gelu_value(X.data[i]);
  return emit<1>(std::move(Y), {x}, [x](Tape& t, Var self) {
    const Tensor& g = t.grad(self);
    const Tensor& X = x.value();
    Tensor& dX = t.grad(x);
    for (std::size_t i = 0; i < X.size(); ++i) dX.data[i] += g.data[i] * gelu_slope(X.data[i]);
  });
}

Var sigmoid(Var x) {
  const Tensor& X = x.value();
  Tensor Y(X.rows, X.cols);
  for (std::size_t i = 0; i < X.size(); ++i) Y.data[i] = sigmoid_value(X.data[i]);
  return emit<1>(std::move(Y), {x}, [x](Tape& t, Var self) {
    const Tensor& g = t.grad(self);
    const Tensor& Y = t.value(self);
    Tensor& dX = t.grad(x);
    for (std::size_t i = 0; i < Y.size(); ++i) dX.data[i] += g.data[i] * Y.data[i] * (1.0 - Y.data[i]);
  });
}

Var mean(Var x) {
  const Tensor& X = x.value();
  check(X.size() > 0, "mean of empty tensor");
  Tensor Y(1, 1, map(X).sum() / static_cast<double>(X.size()));
  return emit<1>(std::move(Y), {x}, [x](Tape& t, Var self) {
    const double g = t.grad(self).data[0];
    Tensor& dX = t.grad(x);
    const double share = g / static_cast<double>(dX.size());
    for (auto& v : dX.data) v += share;
  });
}

Var attention(Var q, Var k, Var v, int heads) {
  const Tensor& Q = q.value();
  const Tensor& K = k.value();
  const Tensor& V = v.value();
  check(Q.cols == K.cols && K.same_shape(V), "attention: q/k/v shape mismatch");
  check(heads > 0 && Q.cols % heads == 0, "attention: width not divisible by heads");
  const int dh = Q.cols / heads;
  const double scale = 1.0 / std::sqrt(static_cast<double>(dh));
  auto probs = std::make_shared<std::vector<RowMajor>>(heads);
  Tensor O(Q.rows, Q.cols);
  for (int h = 0; h < heads; ++h) {
    RowMajor s = (map(Q).middleCols(h * dh, dh) * map(K).middleCols(h * dh, dh).transpose()) * scale;
    for (int r = 0; r < s.rows(); ++r) {
      const double mx = s.row(r).maxCoeff();
      s.row(r) = (s.row(r).array() - mx).exp().matrix();
      s.row(r) /= s.row(r).sum();
    }
    map(O).middleCols(h * dh, dh).noalias() = s * map(V).middleCols(h * dh, dh);
    (*probs)[h] = std::move(s);
  }
  return emit<3>(std::move(O), {q, k, v}, [q, k, v, heads, dh, scale, probs](Tape& t, Var self) {
    const Tensor& dO = t.grad(self);
    const bool gq = t.requires_grad(q);
    const bool gk = t.requires_grad(k);
    const bool gv = t.requires_grad(v);
    for (int h = 0; h < heads; ++h) {
      const RowMajor& p = (*probs)[h];
      auto dOh = map(dO).middleCols(h * dh, dh);
      if (gv) map(t.grad(v)).middleCols(h * dh, dh).noalias() += p.transpose() * dOh;
      if (!gq && !gk) continue;
      RowMajor dp = dOh * map(v.value()).middleCols(h * dh, dh).transpose();
      const Eigen::VectorXd rowdot = (dp.array() * p.array()).rowwise().sum();
      RowMajor ds = (p.array() * (dp.array().colwise() - rowdot.array())).matrix() * scale;
      if (gq) map(t.grad(q)).middleCols(h * dh, dh).noalias() += ds * map(k.value()).middleCols(h * dh, dh);
      if (gk) map(t.grad(k)).middleCols(h * dh, dh).noalias() += ds.transpose() * map(q.value()).middleCols(h * dh, dh);
    }
  });
}

Var concat_rows(std::span<const Var> parts) {
  check(!parts.empty(), "concat_rows: no inputs");
  const int cols = parts[0].value().cols;
  int rows = 0;
  for (const auto& p : parts) {
    check(p.value().cols == cols, "concat_rows: column mismatch");
    rows += p.value().rows;
  }
  Tensor out(rows, cols);
  std::vector<int> offsets;
  int at = 0;
  for (const auto& p : parts) {
    const Tensor& v = p.value();
    std::copy(v.data.begin(), v.data.end(), out.data.begin() + static_cast<std::ptrdiff_t>(at) * cols);
    offsets.push_back(at);
    at += v.rows;
  }
  std::vector<Var> inputs(parts.begin(), parts.end());
  Tape* tape = parts[0].tape;
  return tape->push(std::move(out), inputs, [inputs, offsets](Tape& t, Var self) {
    const Tensor& g = t.grad(self);
    for (std::size_t i = 0; i < inputs.size(); ++i) {
      if (!t.requires_grad(inputs[i])) continue;
      Tensor& d = t.grad(inputs[i]);
      map(d) += map(g).middleRows(offsets[i], d.rows);
    }
  });
}

Var slice_rows(Var x, int begin, int count) {
  const Tensor& X = x.value();
  check(begin >= 0 && count >= 0 && begin + count <= X.rows, "slice_rows: out of range");
  Tensor out(count, X.cols);
  map(out) = map(X).middleRows(begin, count);
  return emit<1>(std::move(out), {x}, [x, begin, count](Tape& t, Var self) {
    map(t.grad(x)).middleRows(begin, count) += map(t.grad(self));
  });
}

Var gather_rows(Var table, std::vector<int> indices) {
  const Tensor& T = table.value();
  Tensor out(static_cast<int>(indices.size()), T.cols);
  for (std::size_t r = 0; r < indices.size(); ++r) {
    check(indices[r] >= 0 && indices[r] < T.rows, "gather_rows: index out of range");
    map(out).row(static_cast<int>(r)) = map(T).row(indices[r]);
  }
  return emit<1>(std::move(out), {table}, [table, indices = std::move(indices)](Tape& t, Var self) {
    const Tensor& g = t.grad(self);
    Tensor& d = t.grad(table);
    for (std::size_t r = 0; r < indices.size(); ++r) map(d).row(indices[r]) += map(g).row(static_cast<int>(r));
  });
}

namespace {

// Output row for (input row, offset) of a stride-s shuffle on a g^3 grid.
std::vector<int> shuffle_rows(int grid, int stride) {
  const int fine = grid * stride;
  const int s3 = stride * stride * stride;
  std::vector<int> rows(static_cast<std::size_t>(grid) * grid * grid * s3);
  std::size_t at = 0;
  for (int bz = 0; bz < grid; ++bz) {
    for (int by = 0; by < grid; ++by) {
      for (int bx = 0; bx < grid; ++bx) {
        for (int oz = 0; oz < stride; ++oz) {
          for (int oy = 0; oy < stride; ++oy) {
            for (int ox = 0; ox < stride; ++ox) {
              const int x = bx * stride + ox;
              const int y = by * stride + oy;
              const int z = bz * stride + oz;
              rows[at++] = x + fine * (y + fine * z);
            }
          }
        }
      }
    }
  }
  return rows;
}

}  // namespace

Var upsample_shuffle(Var x, int grid, int stride, int channels) {
  const Tensor& X = x.value();
  const int s3 = stride * stride * stride;
  check(X.rows == grid * grid * grid && X.cols == s3 * channels, "upsample_shuffle: shape mismatch");
  const int fine = grid * stride;
  auto rows = std::make_shared<std::vector<int>>(shuffle_rows(grid, stride));
  Tensor out(fine * fine * fine, channels);
  const std::size_t n = rows->size();
  for (std::size_t i = 0; i < n; ++i) {
    const double* src = &X.data[i * channels];
    std::copy(src, src + channels, &out.data[static_cast<std::size_t>((*rows)[i]) * channels]);
  }
  return emit<1>(std::move(out), {x}, [x, rows, channels](Tape& t, Var self) {
    const Tensor& g = t.grad(self);
    Tensor& d = t.grad(x);
    for (std::size_t i = 0; i < rows->size(); ++i) {
      const double* src = &g.data[static_cast<std::size_t>((*rows)[i]) * channels];
      double* dst = &d.data[i * channels];
      for (int c = 0; c < channels; ++c) dst[c] += src[c];
    }
  });
}

Var dice_bce_loss(Var logits, const Tensor& target, double dice_w, double ce_w, double smooth) {
  const Tensor& X = logits.value();
  check(X.same_shape(target), "loss: logits/target shape mismatch");
  const std::size_t n = X.size();
  double inter = 0.0;
  double sum_p = 0.0;
  double sum_g = 0.0;
  double bce = 0.0;
  for (std::size_t i = 0; i < n; ++i) {
    const double x = X.data[i];
    const double g = target.data[i];
    const double p = sigmoid_value(x);
    inter += p * g;
    sum_p += p;
    sum_g += g;
    bce += std::max(x, 0.0) - x * g + std::log1p(std::exp(-std::abs(x)));
  }
  const double denom = sum_p + sum_g + smooth;
  const double soft_dice = (2.0 * inter + smooth) / denom;
  const double loss = dice_w * (1.0 - soft_dice) + ce_w * bce / static_cast<double>(n);
  auto tgt = std::make_shared<Tensor>(target);
  return emit<1>(Tensor(1, 1, loss), {logits},
                 [logits, tgt, inter, denom, dice_w, ce_w, smooth](Tape& t, Var self) {
                   const double up = t.grad(self).data[0];
                   const Tensor& X = logits.value();
                   Tensor& dX = t.grad(logits);
                   const double n = static_cast<double>(X.size());
                   const double num = 2.0 * inter + smooth;
                   for (std::size_t i = 0; i < X.size(); ++i) {
                     const double p = sigmoid_value(X.data[i]);
                     const double g = tgt->data[i];
                     const double d_dice_dp = (2.0 * g * denom - num) / (denom * denom);
                     const double d_loss_dx = -dice_w * d_dice_dp * p * (1.0 - p) + ce_w * (p - g) / n;
                     dX.data[i] += up * d_loss_dx;
                   }
                 });
}

}  // namespace volseg::ad
