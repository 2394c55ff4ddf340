#include "volseg/intensity.hpp"

#include <algorithm>
#include <cmath>

namespace volseg::intensity {

void to_json(nlohmann::json& j, const Policy& p) {
  j = nlohmann::json{{"lower_percentile", p.lower_percentile}, {"upper_percentile", p.upper_percentile}};
}

void from_json(const nlohmann::json& j, Policy& p) {
  p.lower_percentile = j.value("lower_percentile", 0.5);
  p.upper_percentile = j.value("upper_percentile", 99.5);
}

double percentile(std::vector<float> values, double q) {
  if (values.empty()) throw Error(Errc::shape, "percentile of empty set");
  q = std::clamp(q, 0.0, 100.0);
  const double pos = q / 100.0 * static_cast<double>(values.size() - 1);
  const auto lo = static_cast<std::size_t>(std::floor(pos));
  const std::size_t hi = std::min(lo + 1, values.size() - 1);
  std::nth_element(values.begin(), values.begin() + static_cast<std::ptrdiff_t>(lo), values.end());
  const double a = values[lo];
  if (hi == lo) return a;
  const double b = *std::min_element(values.begin() + static_cast<std::ptrdiff_t>(lo) + 1, values.end());
  return a + (pos - static_cast<double>(lo)) * (b - a);
}

Volume normalize(const Volume& v, const Policy& policy) {
  if (policy.lower_percentile > policy.upper_percentile) throw Error(Errc::config, "percentile bounds reversed");
  const double lo = percentile(v.data, policy.lower_percentile);
  const double hi = percentile(v.data, policy.upper_percentile);
  double sum = 0.0;
  double sq = 0.0;
  for (float x : v.data) {
    const double c = std::clamp(static_cast<double>(x), lo, hi);
    sum += c;
    sq += c * c;
  }
  const double n = static_cast<double>(v.data.size());
  const double mu = sum / n;
  const double var = std::max(0.0, sq / n - mu * mu);
  const double sd = var > 1e-12 ? std::sqrt(var) : 1.0;
  Volume out = v;
  for (std::size_t i = 0; i < v.data.size(); ++i) {
    out.data[i] = static_cast<float>((std::clamp(static_cast<double>(v.data[i]), lo, hi) - mu) / sd);
  }
  return out;
}

}  // namespace volseg::intensity
