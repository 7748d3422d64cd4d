#pragma once

#include <filesystem>
#include <iosfwd>
#include <map>
#include <optional>
#include <string>
#include <string_view>
#include <vector>

namespace unifar::io {

std::string read_file(const std::filesystem::path& path);
// Writes to a sibling temp file and renames it over `path`.
void write_file_atomic(const std::filesystem::path& path, std::string_view contents);

// Lines without trailing '\n' / '\r'.
std::vector<std::string> read_lines(const std::filesystem::path& path);

void append_floats_le(std::string& out, const std::vector<float>& values);
std::vector<float> parse_floats_le(std::string_view bytes);

// Shortest text that parses back to the same double.
std::string format_double(double value);
double parse_double(std::string_view text);

// `key = value` lines; '#' starts a comment. Values are trimmed.
class KeyValueConfig {
public:
    KeyValueConfig() = default;
    static KeyValueConfig parse(std::string_view text, const std::string& source = "<config>");
    static KeyValueConfig load(const std::filesystem::path& path);

    bool has(std::string_view key) const;
    std::optional<std::string> get(std::string_view key) const;
    std::string get_string(std::string_view key, std::string fallback) const;
    double get_double(std::string_view key, double fallback) const;
    long long get_int(std::string_view key, long long fallback) const;
    bool get_bool(std::string_view key, bool fallback) const;
    void set(std::string key, std::string value) { values_[std::move(key)] = std::move(value); }

    // Throws ConfigError naming any key outside `known`.
    void reject_unknown(const std::vector<std::string>& known) const;
    const std::map<std::string, std::string, std::less<>>& values() const { return values_; }

private:
    std::map<std::string, std::string, std::less<>> values_;
    std::string source_;
};

}  // namespace unifar::io
