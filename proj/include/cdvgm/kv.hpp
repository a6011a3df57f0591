#pragma once

#include <cstddef>
#include <cstdint>
#include <map>
#include <string>

// Flat key = value text documents shared by run configs and checkpoint headers.
namespace cdvgm::kv {

using Document = std::map<std::string, std::string>;

// Round-trip exact (17 significant digits).
std::string format_double(double v);
std::string format_bool(bool v);

double parse_double(const std::string& key, const std::string& value);
std::size_t parse_size(const std::string& key, const std::string& value);
std::uint64_t parse_u64(const std::string& key, const std::string& value);
bool parse_bool(const std::string& key, const std::string& value);

// Lines of "key = value"; '#' starts a comment; blank lines are skipped.
// Duplicate keys and lines without '=' are ConfigErrors.
Document parse(const std::string& text, const std::string& source = "config");
std::string serialize(const Document& doc);

}  // namespace cdvgm::kv
