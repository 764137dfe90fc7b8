#pragma once

#include <stdexcept>
#include <string>

namespace uga {

/// Invalid configuration or usage. The message starts with the offending key
/// when there is one (e.g. "cohort.lesion_class_mix: ...").
class ConfigError : public std::invalid_argument {
public:
    using std::invalid_argument::invalid_argument;
};

/// Malformed, missing or inconsistent data (files, masks, dimensions).
class DataError : public std::runtime_error {
public:
    using std::runtime_error::runtime_error;
};

/// A pipeline stage was invoked before the artifact it depends on exists.
class MissingArtifact : public std::runtime_error {
public:
    explicit MissingArtifact(const std::string& path)
        : std::runtime_error("missing artifact: " + path), path_(path) {}

    const std::string& path() const noexcept { return path_; }

private:
    std::string path_;
};

} // namespace uga
