#pragma once

#include <initializer_list>
#include <string>
#include <string_view>

#include <json.hpp>

#include "looplab/errors.hpp"

namespace looplab {

// Rejects any key of `j` outside `allowed`; `where` prefixes the message.
inline void require_known_keys(const nlohmann::json& j, std::string_view where,
                               std::initializer_list<std::string_view> allowed) {
    if (!j.is_object()) throw ValidationError(std::string(where) + ": expected an object");
    for (const auto& [key, _] : j.items()) {
        bool ok = false;
        for (auto a : allowed) ok = ok || key == a;
        if (!ok) throw ValidationError(std::string(where) + ": unknown key '" + key + "'");
    }
}

// Reads j[key] into out when present.
template <class T>
void read_optional(const nlohmann::json& j, const char* key, T& out) {
    if (auto it = j.find(key); it != j.end()) {
        try {
            out = it->template get<T>();
        } catch (const nlohmann::json::exception& e) {
            throw ValidationError(std::string("key '") + key + "': " + e.what());
        }
    }
}

} // namespace looplab
