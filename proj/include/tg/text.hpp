#pragma once

#include <string>
#include <vector>

#include "tg/tensor.hpp"

// Value parsers for "key = value" text. Errors name the key.
namespace tg::text {

std::string trim(const std::string& s);
Index parse_index(const std::string& key, const std::string& v);
double parse_double(const std::string& key, const std::string& v);
bool parse_bool(const std::string& key, const std::string& v);
std::vector<Index> parse_index_list(const std::string& key, const std::string& v);
/// Shortest text that reads back to the same double.
std::string format_double(double v);

}  // namespace tg::text
