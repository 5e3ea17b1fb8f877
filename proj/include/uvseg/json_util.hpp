#pragma once

#include "uvseg/error.hpp"

#include "json.hpp"

#include <initializer_list>
#include <string>
#include <string_view>

namespace uvs {

/// Throws ConfigError if `j` is not an object or holds a key outside `allowed`.
inline void reject_unknown_keys(const nlohmann::json& j, std::initializer_list<std::string_view> allowed,
                                const std::string& where)
{
    if (!j.is_object()) throw ConfigError(where + " must be a JSON object");
    for (const auto& [key, _] : j.items()) {
        bool ok = false;
        for (auto a : allowed) ok = ok || key == a;
        if (!ok) throw ConfigError("unknown key '" + key + "' in " + where);
    }
}

/// Reads an optional field, converting type errors into ConfigError.
template <typename T>
void read_field(const nlohmann::json& j, const char* key, T& out, const std::string& where)
{
    if (!j.contains(key)) return;
    try {
        out = j.at(key).get<T>();
    } catch (const nlohmann::json::exception& e) {
        throw ConfigError(where + "." + key + ": " + e.what());
    }
}

} // namespace uvs
