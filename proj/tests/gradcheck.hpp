// Central finite differences of the training loss (soft-Dice + BCE on the forward logits) against the tape,
// per parameter tensor.
#pragma once

#include <cmath>
#include <random>
#include <string>
#include <vector>

#include "volseg/net3d.hpp"

namespace testsupport {

struct GroupError {
  std::string name;
  double analytic_norm = 0.0;
  double numeric_norm = 0.0;
  double relative_error = 0.0;
};

inline volseg::ad::Var objective(volseg::ad::Tape& tape, volseg::net::ModelState& state,
                                 const volseg::ad::Tensor& patch, const std::vector<volseg::PointPrompt>& points,
                                 const volseg::ad::Tensor& target) {
  return volseg::ad::dice_bce_loss(volseg::net::forward_logits(tape, patch, points, state), target, 1.0, 1.0);
}

inline double objective_value(volseg::net::ModelState& state, const volseg::ad::Tensor& patch,
                              const std::vector<volseg::PointPrompt>& points, const volseg::ad::Tensor& target) {
  volseg::ad::Tape tape(false);
  return objective(tape, state, patch, points, target).value().data[0];
}

// Norm-wise relative error ||a - n|| / max(||a||, ||n||, floor) for every trainable tensor.
inline std::vector<GroupError> gradient_check(volseg::net::ModelState& state, const volseg::ad::Tensor& patch,
                                              const std::vector<volseg::PointPrompt>& points,
                                              const volseg::ad::Tensor& target, double h = 1e-6,
                                              double floor = 1e-7) {
  state.zero_grad();
  {
    volseg::ad::Tape tape(true);
    tape.backward(objective(tape, state, patch, points, target));
  }
  std::vector<GroupError> out;
  for (auto& p : state.params()) {
    if (!p.trainable) continue;
    GroupError e{p.name, 0, 0, 0};
    double diff = 0.0;
    for (std::size_t i = 0; i < p.value.size(); ++i) {
      const double keep = p.value.data[i];
      p.value.data[i] = keep + h;
      const double up = objective_value(state, patch, points, target);
      p.value.data[i] = keep - h;
      const double down = objective_value(state, patch, points, target);
      p.value.data[i] = keep;
      const double fd = (up - down) / (2 * h);
      const double an = p.grad.size() ? p.grad.data[i] : 0.0;
      e.analytic_norm += an * an;
      e.numeric_norm += fd * fd;
      diff += (an - fd) * (an - fd);
    }
    e.analytic_norm = std::sqrt(e.analytic_norm);
    e.numeric_norm = std::sqrt(e.numeric_norm);
    e.relative_error = std::sqrt(diff) / std::max({e.analytic_norm, e.numeric_norm, floor});
    out.push_back(e);
  }
  return out;
}

inline volseg::ad::Tensor random_patch(int p, std::mt19937_64& rng) {
  std::normal_distribution<double> n(0.0, 1.0);
  volseg::ad::Tensor t(p * p * p, 1);
  for (auto& x : t.data) x = n(rng);
  return t;
}

// Binary target column: voxels of the patch inside a centred ball of the given radius.
inline volseg::ad::Tensor ball_target(int p, double radius) {
  volseg::ad::Tensor t(p * p * p, 1);
  const double c = (p - 1) / 2.0;
  for (int k = 0; k < p; ++k)
    for (int j = 0; j < p; ++j)
      for (int i = 0; i < p; ++i) {
        const double d2 = (i - c) * (i - c) + (j - c) * (j - c) + (k - c) * (k - c);
        t((k * p + j) * p + i, 0) = d2 <= radius * radius ? 1.0 : 0.0;
      }
  return t;
}

}  // namespace testsupport
