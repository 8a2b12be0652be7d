#pragma once

#include <fstream>
#include <initializer_list>
#include <string>

#include <json.hpp>

#include "mgic/errors.hpp"

namespace mgic {

using json = nlohmann::json;

struct SchemaField {
    enum Type { Int, Num, Str, Bool, Obj, Arr };
    const char* name;
    Type type;
    bool required = false;
};

// Checks an object against an allowed field list: unknown keys are rejected
// and types verified. `pointer` is the JSON pointer used in error messages.
inline void validate_object(const json& j, const std::string& pointer,
                            std::initializer_list<SchemaField> fields) {
    if (!j.is_object()) {
        throw ConfigError("config: expected an object at " + (pointer.empty() ? "/" : pointer));
    }
    for (const auto& item : j.items()) {
        const SchemaField* match = nullptr;
        for (const auto& f : fields) {
            if (item.key() == f.name) {
                match = &f;
                break;
            }
        }
        const std::string at = pointer + "/" + item.key();
        if (!match) throw ConfigError("config: unknown key at " + at);
        const json& v = item.value();
        bool ok = true;
        switch (match->type) {
            case SchemaField::Int: ok = v.is_number_integer(); break;
            case SchemaField::Num: ok = v.is_number(); break;
            case SchemaField::Str: ok = v.is_string(); break;
            case SchemaField::Bool: ok = v.is_boolean(); break;
            case SchemaField::Obj: ok = v.is_object(); break;
            case SchemaField::Arr: ok = v.is_array(); break;
        }
        if (!ok) throw ConfigError("config: wrong type at " + at);
    }
    for (const auto& f : fields) {
        if (f.required && !j.contains(f.name)) {
            throw ConfigError("config: missing required key at " + pointer + "/" + f.name);
        }
    }
}

inline json load_json_file(const std::string& path) {
    std::ifstream f(path);
    if (!f) throw IoError("cannot open config file " + path);
    json j;
    try {
        f >> j;
    } catch (const json::parse_error& e) {
        throw ConfigError("config: parse error in " + path + ": " + e.what());
    }
    return j;
}

inline std::uint64_t fnv1a64(const std::string& s) {
    std::uint64_t h = 0xcbf29ce484222325ULL;
    for (unsigned char c : s) {
        h ^= c;
        h *= 0x100000001b3ULL;
    }
    return h;
}

inline std::string hex64(std::uint64_t v) {
    static const char* digits = "0123456789abcdef";
    std::string out(16, '0');
    for (int i = 15; i >= 0; --i) {
        out[static_cast<std::size_t>(i)] = digits[v & 0xf];
        v >>= 4;
    }
    return out;
}

}  // namespace mgic
