#pragma once

#include <nlohmann/json.hpp>

#include <filesystem>
#include <fstream>
#include <set>
#include <string>
#include <system_error>

#include "uga/error.hpp"

namespace uga {

using json = nlohmann::json;

/// Reads optional fields out of a JSON object section, keeping defaults for
/// absent keys. Type errors and unknown keys raise ConfigError naming the
/// full key path.
class SectionReader {
public:
    SectionReader(const json& j, std::string path) : j_(j), path_(std::move(path)) {
        if (!j_.is_object()) throw ConfigError(path_ + ": expected an object");
    }

    template <class T>
    SectionReader& get(const char* key, T& out) {
        seen_.insert(key);
        if (!j_.contains(key)) return *this;
        try {
            out = j_.at(key).get<T>();
        } catch (const nlohmann::json::exception& e) {
            throw ConfigError(key_path(key) + ": " + e.what());
        }
        return *this;
    }

    const json* child(const char* key) {
        seen_.insert(key);
        return j_.contains(key) ? &j_.at(key) : nullptr;
    }

    std::string key_path(const std::string& key) const { return path_.empty() ? key : path_ + "." + key; }

    void finish() const {
        for (const auto& [k, v] : j_.items())
            if (!seen_.contains(k)) throw ConfigError(key_path(k) + ": unknown key");
    }

private:
    const json& j_;
    std::string path_;
    std::set<std::string> seen_;
};

inline json read_json_file(const std::filesystem::path& path) {
    std::ifstream in(path);
    if (!in) throw MissingArtifact(path.string());
    try {
        return json::parse(in);
    } catch (const json::parse_error& e) {
        throw DataError(path.string() + ": " + e.what());
    }
}

/// Writes via a temporary file and rename so readers never see a torn file.
inline void write_text_atomic(const std::filesystem::path& path, const std::string& text) {
    if (path.has_parent_path()) std::filesystem::create_directories(path.parent_path());
    auto tmp = path;
    tmp += ".tmp";
    {
        std::ofstream out(tmp, std::ios::binary);
        if (!out) throw DataError("cannot write file: " + tmp.string());
        out << text;
        if (!out) throw DataError("write failed: " + tmp.string());
    }
    std::filesystem::rename(tmp, path);
}

inline void write_json_file(const std::filesystem::path& path, const json& j) {
    write_text_atomic(path, j.dump(2) + "\n");
}

} // namespace uga
