#pragma once

#include "decq/tensor.hpp"

#include <filesystem>
#include <optional>

namespace decq {

/// Decodes any format OpenCV understands, resizes to size x size and maps
/// pixels to [-1, 1]. Returns nullopt when the file cannot be decoded.
std::optional<Matrix<float>> read_image(const std::filesystem::path& path, Index size);

/// Tiles a batch into one image with `columns` tiles per row.
ImageBatch<float> make_grid(const ImageBatch<float>& images, Index columns, Index padding = 1);

/// Writes the first image of the batch losslessly (format from extension,
/// PNG recommended). Values in [-1, 1] are mapped to 8-bit.
void write_image(const std::filesystem::path& path, const ImageBatch<float>& images);

}  // namespace decq
