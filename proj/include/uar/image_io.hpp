#pragma once

#include <cstdint>
#include <string>
#include <vector>

#include "uar/lsu.hpp"

namespace uar::io {

// 8-bit grayscale; multi-channel tensors are averaged.
void write_png_gray(const std::string& path, const ImageTensor& image);
// Interleaved 8-bit RGB, row-major.
void write_png_rgb(const std::string& path, int height, int width, const std::vector<std::uint8_t>& rgb);
// Any libpng-readable image converted to single-channel [0,1].
// Throws MissingFile or ParseError.
ImageTensor read_png(const std::string& path);

}  // namespace uar::io
