#pragma once

#include <filesystem>
#include <map>
#include <string>
#include <string_view>
#include <vector>

namespace shiftlab::textio {

/// 17 significant digits; parses back to the identical double.
std::string format_double(double value);

/// Strict parse of the whole token; throws DataError on failure.
double parse_double(std::string_view token);
long long parse_int(std::string_view token);

std::vector<std::string_view> split(std::string_view text, char sep);
/// Splits on runs of spaces/tabs.
std::vector<std::string_view> tokens(std::string_view line);
std::string_view trim(std::string_view text);

/// Parses "k1=v1 k2=v2 ..." into an ordered map. Throws DataError on a token
/// without '=' or on a duplicated key.
std::map<std::string, std::string> parse_record(std::string_view line);

std::string read_file(const std::filesystem::path& path);
void write_file(const std::filesystem::path& path, std::string_view content);
std::vector<std::string> read_lines(const std::filesystem::path& path);

std::string sha256_hex(std::string_view data);

}  // namespace shiftlab::textio
