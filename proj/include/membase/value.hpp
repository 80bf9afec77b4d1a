#pragma once

#include <charconv>
#include <cmath>
#include <cstdint>
#include <map>
#include <optional>
#include <string>
#include <variant>

#include <json.hpp>

namespace membase {

using Json = nlohmann::json;
using OrderedJson = nlohmann::ordered_json;

using EpochMs = std::int64_t;

constexpr EpochMs kSecondMs = 1000;
constexpr EpochMs kMinuteMs = 60 * kSecondMs;
constexpr EpochMs kHourMs = 60 * kMinuteMs;
constexpr EpochMs kDayMs = 24 * kHourMs;
constexpr EpochMs kWeekMs = 7 * kDayMs;

// A typed property value. Timestamps are carried as int64 epoch milliseconds.
using Value = std::variant<std::string, double, std::int64_t, bool>;
using PropertyMap = std::map<std::string, Value>;

inline bool is_numeric(const Value& v) {
    return std::holds_alternative<double>(v) || std::holds_alternative<std::int64_t>(v);
}

inline std::optional<double> as_number(const Value& v) {
    if (const auto* d = std::get_if<double>(&v)) return *d;
    if (const auto* i = std::get_if<std::int64_t>(&v)) return static_cast<double>(*i);
    return std::nullopt;
}

inline std::string format_number(double d) {
    if (std::isfinite(d) && d == std::floor(d) && std::fabs(d) < 1e15) {
        return std::to_string(static_cast<std::int64_t>(d));
    }
    char buf[64];
    auto res = std::to_chars(buf, buf + sizeof(buf), d);
    return std::string(buf, res.ptr);
}

// Canonical text rendering used in prompts, group keys and searchable text.
inline std::string render(const Value& v) {
    return std::visit(
        [](const auto& x) -> std::string {
            using T = std::decay_t<decltype(x)>;
            if constexpr (std::is_same_v<T, std::string>) {
                return x;
            } else if constexpr (std::is_same_v<T, bool>) {
                return x ? "true" : "false";
            } else if constexpr (std::is_same_v<T, double>) {
                return format_number(x);
            } else {
                return std::to_string(x);
            }
        },
        v);
}

template <class J>
J value_to_json(const Value& v) {
    return std::visit([](const auto& x) { return J(x); }, v);
}

// Maps JSON scalars onto Value. Objects, arrays and null yield nullopt.
template <class J>
std::optional<Value> value_from_json(const J& j) {
    if (j.is_string()) return Value{j.template get<std::string>()};
    if (j.is_boolean()) return Value{j.template get<bool>()};
    if (j.is_number_integer()) return Value{j.template get<std::int64_t>()};
    if (j.is_number_float()) return Value{j.template get<double>()};
    return std::nullopt;
}

}  // namespace membase
