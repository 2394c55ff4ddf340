#include <gtest/gtest.h>

#include <cmath>
#include <functional>
#include <random>

#include "volseg/autodiff.hpp"
#include "volseg/error.hpp"

using namespace volseg;
using ad::Tape;
using ad::Tensor;
using ad::Var;

namespace {

Tensor random_tensor(int r, int c, std::mt19937_64& rng, double scale = 1.0) {
  std::normal_distribution<double> n(0.0, scale);
  Tensor t(r, c);
  for (auto& x : t.data) x = n(rng);
  return t;
}

// sum(y * w) with a hand-written backward, so any output shape reduces to a scalar
Var weighted_sum(Var y, const Tensor& w) {
  double s = 0.0;
  for (std::size_t i = 0; i < w.size(); ++i) s += y.value().data[i] * w.data[i];
  auto wp = std::make_shared<Tensor>(w);
  const Var in[] = {y};
  return y.tape->push(Tensor(1, 1, s), in, [y, wp](Tape& t, Var self) {
    const double up = t.grad(self).data[0];
    Tensor& g = t.grad(y);
    for (std::size_t i = 0; i < wp->size(); ++i) g.data[i] += up * wp->data[i];
  });
}

using Fn = std::function<Var(Tape&, std::vector<Var>&)>;

double evaluate(const Fn& f, const std::vector<Tensor>& inputs, const Tensor* w) {
  Tape tape(false);
  std::vector<Var> vars;
  for (const auto& t : inputs) vars.push_back(tape.constant(t));
  const Var y = f(tape, vars);
  if (w == nullptr) return y.value().data[0];
  double s = 0.0;
  for (std::size_t i = 0; i < w->size(); ++i) s += y.value().data[i] * w->data[i];
  return s;
}

// Central differences against the tape, max abs error scaled by max(1, |grad|).
void check_gradients(const Fn& f, std::vector<Tensor> inputs, std::uint64_t seed, double tol = 1e-6) {
  std::mt19937_64 rng(seed);
  std::vector<Tensor> grads(inputs.size());
  Tensor w;
  {
    Tape tape(true);
    std::vector<Var> vars;
    for (std::size_t i = 0; i < inputs.size(); ++i) vars.push_back(tape.parameter(inputs[i], &grads[i]));
    const Var y = f(tape, vars);
    Var root = y;
    if (y.value().size() != 1) {
      w = random_tensor(y.value().rows, y.value().cols, rng);
      root = weighted_sum(y, w);
    }
    tape.backward(root);
  }
  const Tensor* wp = w.size() ? &w : nullptr;
  const double h = 1e-5;
  for (std::size_t i = 0; i < inputs.size(); ++i) {
    ASSERT_TRUE(grads[i].same_shape(inputs[i])) << "input " << i;
    for (std::size_t e = 0; e < inputs[i].size(); ++e) {
      auto plus = inputs, minus = inputs;
      plus[i].data[e] += h;
      minus[i].data[e] -= h;
      const double fd = (evaluate(f, plus, wp) - evaluate(f, minus, wp)) / (2 * h);
      const double an = grads[i].data[e];
      ASSERT_NEAR(an, fd, tol * std::max(1.0, std::abs(fd))) << "input " << i << " element " << e;
    }
  }
}

}  // namespace

TEST(AutodiffGrad, Matmul) {
  std::mt19937_64 rng(1);
  check_gradients([](Tape&, std::vector<Var>& v) { return ad::matmul(v[0], v[1]); },
                  {random_tensor(3, 4, rng), random_tensor(4, 5, rng)}, 1);
  check_gradients([](Tape&, std::vector<Var>& v) { return ad::matmul(v[0], v[1], true); },
                  {random_tensor(3, 4, rng), random_tensor(6, 4, rng)}, 2);
}

TEST(AutodiffGrad, AddAndRowBroadcast) {
  std::mt19937_64 rng(2);
  check_gradients([](Tape&, std::vector<Var>& v) { return ad::add(v[0], v[1]); },
                  {random_tensor(3, 4, rng), random_tensor(3, 4, rng)}, 3);
  check_gradients([](Tape&, std::vector<Var>& v) { return ad::add_row(v[0], v[1]); },
                  {random_tensor(5, 3, rng), random_tensor(1, 3, rng)}, 4);
  check_gradients([](Tape&, std::vector<Var>& v) { return ad::linear(v[0], v[1], v[2]); },
                  {random_tensor(5, 3, rng), random_tensor(3, 4, rng), random_tensor(1, 4, rng)}, 5);
}

TEST(AutodiffGrad, Pointwise) {
  std::mt19937_64 rng(3);
  check_gradients([](Tape&, std::vector<Var>& v) { return ad::gelu(v[0]); }, {random_tensor(4, 5, rng, 2.0)}, 6);
  check_gradients([](Tape&, std::vector<Var>& v) { return ad::sigmoid(v[0]); }, {random_tensor(4, 5, rng, 2.0)}, 7);
  check_gradients([](Tape&, std::vector<Var>& v) { return ad::mean(v[0]); }, {random_tensor(4, 5, rng)}, 8);
}

TEST(AutodiffGrad, LayerNorm) {
  std::mt19937_64 rng(4);
  check_gradients([](Tape&, std::vector<Var>& v) { return ad::layer_norm(v[0], v[1], v[2]); },
                  {random_tensor(4, 6, rng, 3.0), random_tensor(1, 6, rng), random_tensor(1, 6, rng)}, 9);
}

TEST(AutodiffGrad, Attention) {
  std::mt19937_64 rng(5);
  for (int heads : {1, 2}) {
    check_gradients([heads](Tape&, std::vector<Var>& v) { return ad::attention(v[0], v[1], v[2], heads); },
                    {random_tensor(3, 4, rng), random_tensor(5, 4, rng), random_tensor(5, 4, rng)}, 10 + heads);
  }
  // self-attention: the same input feeds q, k and v
  check_gradients([](Tape&, std::vector<Var>& v) { return ad::attention(v[0], v[0], v[0], 2); },
                  {random_tensor(4, 4, rng)}, 13);
}

TEST(AutodiffGrad, RowOps) {
  std::mt19937_64 rng(6);
  check_gradients(
      [](Tape&, std::vector<Var>& v) {
        const Var parts[] = {v[0], v[1], v[0]};
        return ad::concat_rows(parts);
      },
      {random_tensor(2, 3, rng), random_tensor(4, 3, rng)}, 14);
  check_gradients([](Tape&, std::vector<Var>& v) { return ad::slice_rows(v[0], 1, 3); }, {random_tensor(5, 2, rng)},
                  15);
  check_gradients([](Tape&, std::vector<Var>& v) { return ad::gather_rows(v[0], {2, 0, 2, 1}); },
                  {random_tensor(3, 4, rng)}, 16);
  check_gradients([](Tape&, std::vector<Var>& v) { return ad::upsample_shuffle(v[0], 2, 2, 3); },
                  {random_tensor(8, 24, rng)}, 17);
}

TEST(AutodiffGrad, DiceBceLoss) {
  std::mt19937_64 rng(7);
  Tensor target(27, 1);
  for (std::size_t i = 0; i < target.size(); ++i) target.data[i] = i % 3 == 0 ? 1.0 : 0.0;
  for (auto [dw, cw] : {std::pair{1.0, 1.0}, std::pair{1.0, 0.0}, std::pair{0.0, 1.0}, std::pair{0.3, 2.0}}) {
    check_gradients([&](Tape&, std::vector<Var>& v) { return ad::dice_bce_loss(v[0], target, dw, cw); },
                    {random_tensor(27, 1, rng, 2.0)}, 18);
  }
}

TEST(AutodiffGrad, ComposedChain) {
  std::mt19937_64 rng(8);
  check_gradients(
      [](Tape&, std::vector<Var>& v) {
        auto h = ad::layer_norm(v[0], v[3], v[4]);
        auto a = ad::attention(h, h, h, 2);
        auto y = ad::gelu(ad::linear(ad::add(a, v[0]), v[1], v[2]));
        return ad::mean(ad::sigmoid(y));
      },
      {random_tensor(5, 4, rng), random_tensor(4, 3, rng), random_tensor(1, 3, rng), random_tensor(1, 4, rng),
       random_tensor(1, 4, rng)},
      19);
}

TEST(AutodiffForward, ValuesMatchClosedForms) {
  Tape t(false);
  Tensor x(1, 3);
  x.data = {-1.0, 0.0, 2.0};
  const auto g = ad::gelu(t.constant(x)).value();
  for (int i = 0; i < 3; ++i) EXPECT_NEAR(g.data[i], 0.5 * x.data[i] * (1 + std::erf(x.data[i] / std::sqrt(2.0))), 1e-12);
  const auto s = ad::sigmoid(t.constant(x)).value();
  EXPECT_NEAR(s.data[2], 1 / (1 + std::exp(-2.0)), 1e-15);

  std::mt19937_64 rng(9);
  const auto ln = ad::layer_norm(t.constant(random_tensor(3, 8, rng, 5.0)), t.constant(Tensor(1, 8, 1.0)),
                                 t.constant(Tensor(1, 8, 0.0)))
                      .value();
  for (int r = 0; r < 3; ++r) {
    double mu = 0, var = 0;
    for (int c = 0; c < 8; ++c) mu += ln(r, c) / 8;
    for (int c = 0; c < 8; ++c) var += (ln(r, c) - mu) * (ln(r, c) - mu) / 8;
    EXPECT_NEAR(mu, 0.0, 1e-12);
    EXPECT_NEAR(var, 1.0, 1e-4);
  }
}

TEST(AutodiffForward, AttentionMatchesSoftmaxOracle) {
  std::mt19937_64 rng(10);
  const auto Q = random_tensor(2, 4, rng), K = random_tensor(3, 4, rng), V = random_tensor(3, 4, rng);
  Tape t(false);
  const auto O = ad::attention(t.constant(Q), t.constant(K), t.constant(V), 2).value();
  for (int h = 0; h < 2; ++h)
    for (int r = 0; r < 2; ++r) {
      double w[3], z = 0;
      for (int j = 0; j < 3; ++j) {
        double dot = 0;
        for (int c = 0; c < 2; ++c) dot += Q(r, 2 * h + c) * K(j, 2 * h + c);
        w[j] = std::exp(dot / std::sqrt(2.0));
        z += w[j];
      }
      for (int c = 0; c < 2; ++c) {
        double o = 0;
        for (int j = 0; j < 3; ++j) o += w[j] / z * V(j, 2 * h + c);
        EXPECT_NEAR(O(r, 2 * h + c), o, 1e-12);
      }
    }
}

TEST(AutodiffForward, UpsampleShuffleLayout) {
  // coarse cell (gx,gy,gz), offset (ox,oy,oz) lands at fine voxel (gx*s+ox, ...), fine grid x-fastest
  const int g = 2, s = 2, c = 2, f = g * s;
  Tensor x(g * g * g, s * s * s * c);
  for (int cell = 0; cell < g * g * g; ++cell)
    for (int col = 0; col < s * s * s * c; ++col) x(cell, col) = 1000 * cell + col;
  Tape t(false);
  const auto y = ad::upsample_shuffle(t.constant(x), g, s, c).value();
  for (int gz = 0; gz < g; ++gz)
    for (int gy = 0; gy < g; ++gy)
      for (int gx = 0; gx < g; ++gx)
        for (int oz = 0; oz < s; ++oz)
          for (int oy = 0; oy < s; ++oy)
            for (int ox = 0; ox < s; ++ox)
              for (int ch = 0; ch < c; ++ch) {
                const int cell = gx + g * (gy + g * gz);
                const int off = ox + s * (oy + s * oz);
                const int fine = (gx * s + ox) + f * ((gy * s + oy) + f * (gz * s + oz));
                EXPECT_EQ(y(fine, ch), x(cell, off * c + ch));
              }
}

TEST(AutodiffTape, Errors) {
  Tape nr(false);
  const auto a = nr.constant(Tensor(1, 1, 2.0));
  EXPECT_THROW(nr.backward(a), Error);
  Tape t(true);
  Tensor sink;
  const Tensor value(2, 3, 1.0);
  const auto p = t.parameter(value, &sink);
  EXPECT_THROW(t.backward(p), Error);
  EXPECT_THROW(ad::matmul(p, t.constant(Tensor(2, 3))), Error);
  EXPECT_THROW(ad::add(p, t.constant(Tensor(3, 2))), Error);
  EXPECT_THROW(ad::attention(p, p, p, 2), Error);
  EXPECT_THROW(ad::dice_bce_loss(p, Tensor(3, 2), 1, 1), Error);
}

TEST(AutodiffTape, ConstantsReceiveNoGradient) {
  Tape t(true);
  Tensor sink;
  const Tensor value(2, 2, 1.0);
  const auto p = t.parameter(value, &sink);
  const auto c = t.constant(Tensor(2, 2, 3.0));
  t.backward(ad::mean(ad::add(p, c)));
  ASSERT_TRUE(sink.same_shape(Tensor(2, 2)));
  for (double x : sink.data) EXPECT_DOUBLE_EQ(x, 0.25);
  EXPECT_FALSE(t.requires_grad(c));
}
