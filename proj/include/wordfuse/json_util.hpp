#pragma once

#include <cmath>
#include <limits>
#include <optional>
#include <string>

#include <json.hpp>

#include "wordfuse/errors.hpp"

namespace wordfuse {

using json = nlohmann::json;

/// JSON has no encoding for non-finite numbers; they travel as the strings
/// "-inf", "inf" and "nan". Finite doubles are printed with round-trip
/// precision.
inline json encode_real(double value) {
  if (std::isfinite(value)) return value;
  if (std::isnan(value)) return "nan";
  return value < 0 ? "-inf" : "inf";
}

inline json encode_real(const std::optional<double>& value) {
  return value ? encode_real(*value) : json(nullptr);
}

inline double decode_real(const json& j) {
  if (j.is_number()) return j.get<double>();
  if (j.is_string()) {
    const auto& s = j.get_ref<const std::string&>();
    if (s == "-inf") return -std::numeric_limits<double>::infinity();
    if (s == "inf") return std::numeric_limits<double>::infinity();
    if (s == "nan") return std::numeric_limits<double>::quiet_NaN();
  }
  throw Error("expected a real number, got " + j.dump());
}

inline std::optional<double> decode_optional_real(const json& j) {
  if (j.is_null()) return std::nullopt;
  return decode_real(j);
}

}  // namespace wordfuse
