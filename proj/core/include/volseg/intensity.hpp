#pragma once

#include <nlohmann/json.hpp>

#include "volseg/voxgrid.hpp"

namespace volseg::intensity {

/// Clip to percentile bounds, then z-score over the whole volume.
struct Policy {
  double lower_percentile = 0.5;
  double upper_percentile = 99.5;

  bool operator==(const Policy&) const = default;
};

void to_json(nlohmann::json& j, const Policy& p);
void from_json(const nlohmann::json& j, Policy& p);

/// Linear-interpolated percentile of the values, q in [0, 100].
double percentile(std::vector<float> values, double q);

Volume normalize(const Volume& v, const Policy& policy = {});

}  // namespace volseg::intensity
