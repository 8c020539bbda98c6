#pragma once

#include <string>

#include "skattn/pose.hpp"

namespace skattn {

/// 8-bit PNG with 1 (gray) or 3 (RGB) channels. Throws IoError.
void write_png(const std::string& path, const Image& image);
/// Decodes to 8-bit gray or RGB; alpha is dropped, palettes expanded.
Image read_png(const std::string& path);

}  // namespace skattn
