#pragma once

#include <stdexcept>
#include <string>
#include <string_view>

namespace volseg {

enum class Errc {
  shape,
  empty_mask,
  empty_target,
  converged,
  out_of_bounds,
  out_of_patch,
  version,
  io,
  parse,
  config,
  unsupported_budget,
  protocol,
  not_ready,
  busy,
  nothing_to_undo,
  non_finite,
  payload_too_large,
  not_found,
};

std::string_view to_string(Errc code);

/// Single exception type for the library; callers branch on code().
class Error : public std::runtime_error {
 public:
  Error(Errc code, const std::string& what)
      : std::runtime_error(std::string(to_string(code)) + ": " + what), code_(code) {}

  Errc code() const noexcept { return code_; }

 private:
  Errc code_;
};

}  // namespace volseg
