#pragma once

#include <filesystem>
#include <string>

#include "max360iq/sphere.hpp"
#include "max360iq/tensor.hpp"

namespace max360iq {

// PNG (8/16-bit, gray/RGB, alpha dropped) or binary PPM (P6, maxval 255).
// Values are mapped to [0,1]. Throws DataError on unreadable input.
ErpImage read_image(const std::filesystem::path& path);

// 3xHxW tensor, values clamped to [0,1] and quantized to 8 bits.
void write_png(const std::filesystem::path& path, const Tensor& chw);
void write_ppm(const std::filesystem::path& path, const Tensor& chw);

// Writes through a sibling temp file and renames over `path`.
void write_file_atomic(const std::filesystem::path& path, const std::string& bytes);
std::string read_file(const std::filesystem::path& path);

}  // namespace max360iq
