#pragma once

// Canonical JSON emission and strict JSON reading.
//
// All text artifacts (scenarios, configs, manifests, logs) are JSON.
// Parsing goes through nlohmann::json; writing goes through the canonical
// emitter below so a given document always produces identical bytes:
// fixed key order (insertion order), 9-significant-digit numbers, fixed
// indentation. Readers reject unknown keys with the offending key path.

#include <fstream>
#include <initializer_list>
#include <set>
#include <sstream>
#include <string>

#include <json.hpp>

#include "clsim/common.hpp"

namespace clsim {

using Json = nlohmann::ordered_json;

namespace jsonio {

inline bool is_scalar_array(const Json& a) {
    for (const auto& e : a) {
        if (e.is_structured()) return false;
    }
    return true;
}

inline void write_escaped(std::ostream& os, const std::string& s) {
    os << '"';
    for (char c : s) {
        switch (c) {
            case '"': os << "\\\""; break;
            case '\\': os << "\\\\"; break;
            case '\n': os << "\\n"; break;
            case '\t': os << "\\t"; break;
            case '\r': os << "\\r"; break;
            default:
                if (static_cast<unsigned char>(c) < 0x20) {
                    char buf[8];
                    std::snprintf(buf, sizeof(buf), "\\u%04x", c);
                    os << buf;
                } else {
                    os << c;
                }
        }
    }
    os << '"';
}

inline void write_number(std::ostream& os, const Json& v) {
    if (v.is_number_integer()) {
        os << v.get<long long>();
    } else if (v.is_number_unsigned()) {
        os << v.get<unsigned long long>();
    } else {
        double d = v.get<double>();
        os << fmt_g9(d);
    }
}

inline void write_value(std::ostream& os, const Json& v, int indent) {
    const std::string pad(static_cast<std::size_t>(indent) * 2, ' ');
    const std::string pad1(static_cast<std::size_t>(indent + 1) * 2, ' ');
    if (v.is_object()) {
        if (v.empty()) {
            os << "{}";
            return;
        }
        os << "{\n";
        std::size_t i = 0;
        for (auto it = v.begin(); it != v.end(); ++it, ++i) {
            os << pad1;
            write_escaped(os, it.key());
            os << ": ";
            write_value(os, it.value(), indent + 1);
            if (i + 1 < v.size()) os << ',';
            os << '\n';
        }
        os << pad << '}';
    } else if (v.is_array()) {
        if (v.empty()) {
            os << "[]";
            return;
        }
        if (is_scalar_array(v)) {
            os << '[';
            for (std::size_t i = 0; i < v.size(); ++i) {
                if (i) os << ", ";
                write_value(os, v[i], indent);
            }
            os << ']';
        } else {
            os << "[\n";
            for (std::size_t i = 0; i < v.size(); ++i) {
                os << pad1;
                write_value(os, v[i], indent + 1);
                if (i + 1 < v.size()) os << ',';
                os << '\n';
            }
            os << pad << ']';
        }
    } else if (v.is_string()) {
        write_escaped(os, v.get<std::string>());
    } else if (v.is_boolean()) {
        os << (v.get<bool>() ? "true" : "false");
    } else if (v.is_null()) {
        os << "null";
    } else {
        write_number(os, v);
    }
}

}  // namespace jsonio

// Canonical text for a document. Terminated by a newline.
inline std::string to_canonical_text(const Json& doc) {
    std::ostringstream os;
    jsonio::write_value(os, doc, 0);
    os << '\n';
    return os.str();
}

inline void write_json_file(const std::string& path, const Json& doc) {
    std::ofstream f(path, std::ios::binary);
    if (!f) throw IoError("cannot open for writing: " + path);
    f << to_canonical_text(doc);
    if (!f) throw IoError("write failed: " + path);
}

inline Json parse_json_text(const std::string& text, const std::string& origin) {
    try {
        return Json::parse(text);
    } catch (const nlohmann::json::exception& e) {
        throw ParseError(origin + ": " + e.what());
    }
}

inline Json read_json_file(const std::string& path) {
    std::ifstream f(path, std::ios::binary);
    if (!f) throw IoError("cannot open: " + path);
    std::ostringstream buf;
    buf << f.rdbuf();
    return parse_json_text(buf.str(), path);
}

// --- strict object access -------------------------------------------------

// Rejects keys outside `allowed`, reporting the full key path.
inline void require_keys(const Json& obj, const std::string& path,
                         std::initializer_list<const char*> allowed) {
    std::set<std::string> ok(allowed.begin(), allowed.end());
    for (auto it = obj.begin(); it != obj.end(); ++it) {
        if (!ok.count(it.key())) {
            throw ParseError("unknown key '" + path + "." + it.key() + "'");
        }
    }
}

inline const Json& get_field(const Json& obj, const std::string& path, const char* key) {
    auto it = obj.find(key);
    if (it == obj.end()) {
        throw ParseError("missing key '" + path + "." + key + "'");
    }
    return *it;
}

inline double get_double(const Json& obj, const std::string& path, const char* key) {
    const Json& v = get_field(obj, path, key);
    if (!v.is_number()) throw ParseError("key '" + path + "." + key + "' must be a number");
    return v.get<double>();
}

inline long long get_int(const Json& obj, const std::string& path, const char* key) {
    const Json& v = get_field(obj, path, key);
    if (!v.is_number_integer() && !v.is_number_unsigned()) {
        throw ParseError("key '" + path + "." + key + "' must be an integer");
    }
    return v.get<long long>();
}

inline std::string get_string(const Json& obj, const std::string& path, const char* key) {
    const Json& v = get_field(obj, path, key);
    if (!v.is_string()) throw ParseError("key '" + path + "." + key + "' must be a string");
    return v.get<std::string>();
}

inline bool get_bool(const Json& obj, const std::string& path, const char* key) {
    const Json& v = get_field(obj, path, key);
    if (!v.is_boolean()) throw ParseError("key '" + path + "." + key + "' must be a boolean");
    return v.get<bool>();
}

}  // namespace clsim
