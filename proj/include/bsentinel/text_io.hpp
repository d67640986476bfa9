#pragma once

#include <cstdio>
#include <filesystem>
#include <fstream>
#include <string>

#include "errors.hpp"

namespace bsentinel::detail {

/// Shortest round-trippable decimal form of a double.
inline std::string csv_number(double v) {
    char buf[64];
    std::snprintf(buf, sizeof buf, "%.17g", v);
    return buf;
}

inline void write_text(const std::filesystem::path& path, const std::string& text) {
    std::ofstream out(path, std::ios::trunc | std::ios::binary);
    if (!out) throw IoError("cannot open '" + path.string() + "' for writing");
    out << text;
    if (!out) throw IoError("failed writing '" + path.string() + "'");
}

}  // namespace bsentinel::detail
