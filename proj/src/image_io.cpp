#include "decq/image_io.hpp"

#include <opencv2/imgcodecs.hpp>
#include <opencv2/imgproc.hpp>

#include <algorithm>
#include <cmath>

namespace decq {

std::optional<Matrix<float>> read_image(const std::filesystem::path& path, Index size) {
  cv::Mat bgr = cv::imread(path.string(), cv::IMREAD_COLOR);
  if (bgr.empty()) return std::nullopt;
  cv::Mat resized;
  cv::resize(bgr, resized, cv::Size(static_cast<int>(size), static_cast<int>(size)), 0, 0, cv::INTER_AREA);
  Matrix<float> out(size * size, 3);
  for (int y = 0; y < resized.rows; ++y)
    for (int x = 0; x < resized.cols; ++x) {
      const auto px = resized.at<cv::Vec3b>(y, x);
      for (int c = 0; c < 3; ++c) out(y * size + x, c) = static_cast<float>(px[2 - c]) / 127.5f - 1.0f;
    }
  return out;
}

ImageBatch<float> make_grid(const ImageBatch<float>& images, Index columns, Index padding) {
  const Index n = images.batch;
  columns = std::max<Index>(1, std::min(columns, n));
  const Index rows = (n + columns - 1) / columns;
  const Index h = images.height, w = images.width;
  const Index gh = rows * h + (rows + 1) * padding;
  const Index gw = columns * w + (columns + 1) * padding;
  ImageBatch<float> grid(Matrix<float>::Constant(gh * gw, images.channels(), -1.0f), 1, gh, gw);
  for (Index i = 0; i < n; ++i) {
    const Index oy = padding + (i / columns) * (h + padding);
    const Index ox = padding + (i % columns) * (w + padding);
    for (Index y = 0; y < h; ++y)
      for (Index x = 0; x < w; ++x) grid.data.row((oy + y) * gw + ox + x) = images.data.row((i * h + y) * w + x);
  }
  return grid;
}

void write_image(const std::filesystem::path& path, const ImageBatch<float>& images) {
  if (images.batch < 1) throw ShapeError("write_image: empty batch");
  cv::Mat out(static_cast<int>(images.height), static_cast<int>(images.width), CV_8UC3);
  for (Index y = 0; y < images.height; ++y)
    for (Index x = 0; x < images.width; ++x) {
      cv::Vec3b px;
      for (Index c = 0; c < 3; ++c) {
        const float v = images.channels() == 3 ? images.at(0, y, x, c) : images.at(0, y, x, 0);
        px[static_cast<int>(2 - c)] = static_cast<unsigned char>(std::lround(std::clamp((v + 1.0f) * 127.5f, 0.0f, 255.0f)));
      }
      out.at<cv::Vec3b>(static_cast<int>(y), static_cast<int>(x)) = px;
    }
  if (path.has_parent_path()) std::filesystem::create_directories(path.parent_path());
  if (!cv::imwrite(path.string(), out)) throw std::runtime_error("failed to write image " + path.string());
}

}  // namespace decq
