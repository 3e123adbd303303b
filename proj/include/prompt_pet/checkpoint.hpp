#pragma once

#include <filesystem>
#include <map>
#include <span>
#include <string>

#include "prompt_pet/autograd.hpp"

namespace prompt_pet {

// Named-array container. On disk: magic "PPETARR1", u64 count, then per
// array u32 name length, name bytes, u64 rows, u64 cols, rows*cols
// little-endian IEEE-754 doubles.
using ArrayMap = std::map<std::string, Matrix>;

void save_arrays(const std::filesystem::path& path, const ArrayMap& arrays);
ArrayMap load_arrays(const std::filesystem::path& path);

ArrayMap collect_arrays(std::span<Parameter* const> params);
// Copies arrays into parameters by name; every parameter must be present
// with a matching shape.
void assign_arrays(std::span<Parameter* const> params, const ArrayMap& arrays);

void write_text_file(const std::filesystem::path& path, const std::string& text);
std::string read_text_file(const std::filesystem::path& path);

}  // namespace prompt_pet
