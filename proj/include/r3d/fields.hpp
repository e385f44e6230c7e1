#pragma once

#include <charconv>
#include <cstdint>
#include <cstdio>
#include <string>
#include <type_traits>

#include "r3d/tensor.hpp"

// Text conversion for config structs exposing
//   template <typename F> void fields(F&& f)
// which calls f(name, member) for every field.
namespace r3d {

template <typename T>
std::string format_field(const T& v) {
  if constexpr (std::is_same_v<T, bool>) {
    return v ? "true" : "false";
  } else if constexpr (std::is_floating_point_v<T>) {
    char buf[32];
    std::snprintf(buf, sizeof buf, "%.17g", v);
    return buf;
  } else {
    return std::to_string(v);
  }
}

template <typename T>
void parse_field(const std::string& key, const std::string& text, T& out) {
  auto bad = [&] { throw ConfigError("config: invalid value '" + text + "' for " + key); };
  if constexpr (std::is_same_v<T, bool>) {
    if (text == "true" || text == "1") out = true;
    else if (text == "false" || text == "0") out = false;
    else bad();
  } else if constexpr (std::is_floating_point_v<T>) {
    std::size_t used = 0;
    try {
      out = std::stod(text, &used);
    } catch (const std::exception&) {
      bad();
    }
    if (used != text.size()) bad();
  } else {
    if constexpr (std::is_unsigned_v<T>) {
      if (!text.empty() && text[0] == '-') bad();
    }
    const auto [ptr, ec] = std::from_chars(text.data(), text.data() + text.size(), out);
    if (ec != std::errc() || ptr != text.data() + text.size()) bad();
  }
}

// Appends "prefix + name = value" lines.
template <typename Cfg>
std::string fields_to_text(const Cfg& cfg, const std::string& prefix = "") {
  std::string text;
  Cfg copy = cfg;
  copy.fields([&](const char* name, const auto& v) { text += prefix + name + " = " + format_field(v) + "\n"; });
  return text;
}

// Sets the field called name; false if there is none.
template <typename Cfg>
bool set_field(Cfg& cfg, const std::string& name, const std::string& value) {
  bool found = false;
  cfg.fields([&](const char* field, auto& v) {
    if (!found && name == field) {
      parse_field(name, value, v);
      found = true;
    }
  });
  return found;
}

}  // namespace r3d
