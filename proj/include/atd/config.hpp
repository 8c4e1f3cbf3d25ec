#pragma once

// Flat key=value configuration text with typed readers. One map drives every
// subcommand: defaults, then file values, then command-line overrides, later
// writers winning. Keys are dotted lowercase ("train.learning_rate").

#include <cctype>
#include <fstream>
#include <map>
#include <sstream>
#include <string>

#include <json.hpp>

#include "atd/common.hpp"

namespace atd::config {

using Flat = std::map<std::string, std::string>;

inline std::string trim(const std::string& s) {
    std::size_t a = 0, b = s.size();
    while (a < b && std::isspace(static_cast<unsigned char>(s[a]))) ++a;
    while (b > a && std::isspace(static_cast<unsigned char>(s[b - 1]))) --b;
    return s.substr(a, b - a);
}

/// Parses "key = value" lines; '#' starts a comment, blank lines are skipped.
/// Duplicate keys keep the last value (file order wins within one file).
inline Flat parse_flat(std::istream& in) {
    Flat out;
    std::string line;
    int line_no = 0;
    while (std::getline(in, line)) {
        ++line_no;
        const std::size_t hash = line.find('#');
        if (hash != std::string::npos) line.erase(hash);
        const std::string body = trim(line);
        if (body.empty()) continue;
        const std::size_t eq = body.find('=');
        require(eq != std::string::npos, "config line ", line_no, ": expected key = value, got '",
                body, "'");
        const std::string key = trim(body.substr(0, eq));
        const std::string value = trim(body.substr(eq + 1));
        require(!key.empty(), "config line ", line_no, ": empty key");
        out[key] = value;
    }
    return out;
}

/// Loads a config file. A .json file is read as a saved run manifest (or any
/// JSON object with a string-valued "config" map), so a manifest re-runs the
/// exact resolved configuration it recorded.
inline Flat load_file(const std::string& path) {
    std::ifstream in(path);
    if (!in) throw IoError("config: cannot open " + path);
    if (path.size() >= 5 && path.substr(path.size() - 5) == ".json") {
        nlohmann::json j;
        try {
            in >> j;
        } catch (const nlohmann::json::exception& e) {
            throw IoError("config: " + path + ": " + e.what());
        }
        const nlohmann::json& conf = j.contains("config") ? j.at("config") : j;
        require(conf.is_object(), "config: ", path, " holds no config object");
        Flat out;
        for (const auto& [k, v] : conf.items())
            out[k] = v.is_string() ? v.get<std::string>() : v.dump();
        return out;
    }
    return parse_flat(in);
}

/// overlay wins on key collisions.
inline Flat merge(Flat base, const Flat& overlay) {
    for (const auto& [k, v] : overlay) base[k] = v;
    return base;
}

inline std::string get_str(const Flat& c, const std::string& key, const std::string& fallback) {
    auto it = c.find(key);
    return it == c.end() ? fallback : it->second;
}

inline double get_double(const Flat& c, const std::string& key, double fallback) {
    auto it = c.find(key);
    if (it == c.end()) return fallback;
    std::size_t used = 0;
    double v = 0.0;
    try {
        v = std::stod(it->second, &used);
    } catch (const std::exception&) {
        fail("config: ", key, " = '", it->second, "' is not a number");
    }
    require(used == it->second.size(), "config: ", key, " = '", it->second,
            "' has trailing characters");
    return v;
}

inline long long get_int(const Flat& c, const std::string& key, long long fallback) {
    auto it = c.find(key);
    if (it == c.end()) return fallback;
    std::size_t used = 0;
    long long v = 0;
    try {
        v = std::stoll(it->second, &used);
    } catch (const std::exception&) {
        fail("config: ", key, " = '", it->second, "' is not an integer");
    }
    require(used == it->second.size(), "config: ", key, " = '", it->second,
            "' has trailing characters");
    return v;
}

inline bool get_bool(const Flat& c, const std::string& key, bool fallback) {
    auto it = c.find(key);
    if (it == c.end()) return fallback;
    const std::string& v = it->second;
    if (v == "true" || v == "1" || v == "yes" || v == "on") return true;
    if (v == "false" || v == "0" || v == "no" || v == "off") return false;
    fail("config: ", key, " = '", v, "' is not a boolean");
}

inline nlohmann::json to_json(const Flat& c) {
    nlohmann::json j = nlohmann::json::object();
    for (const auto& [k, v] : c) j[k] = v;
    return j;
}

inline std::string to_text(const Flat& c) {
    std::ostringstream os;
    for (const auto& [k, v] : c) os << k << " = " << v << "\n";
    return os.str();
}

}  // namespace atd::config
