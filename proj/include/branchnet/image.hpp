#pragma once

#include <cstdint>
#include <vector>

namespace branchnet {

/// 8-bit RGB image, interleaved HWC.
struct ByteImage {
  int height = 0;
  int width = 0;
  std::vector<std::uint8_t> pixels;

  ByteImage() = default;
  ByteImage(int h, int w) : height(h), width(w), pixels(static_cast<std::size_t>(h) * w * 3, 0) {}

  std::uint8_t& at(int y, int x, int c) { return pixels[(static_cast<std::size_t>(y) * width + x) * 3 + c]; }
  std::uint8_t at(int y, int x, int c) const {
    return pixels[(static_cast<std::size_t>(y) * width + x) * 3 + c];
  }
  bool operator==(const ByteImage&) const = default;
};

/// Floating-point RGB image with values nominally in [0, 255], interleaved HWC.
struct Image {
  int height = 0;
  int width = 0;
  std::vector<double> pixels;

  Image() = default;
  Image(int h, int w, double fill = 0.0)
      : height(h), width(w), pixels(static_cast<std::size_t>(h) * w * 3, fill) {}

  double& at(int y, int x, int c) { return pixels[(static_cast<std::size_t>(y) * width + x) * 3 + c]; }
  double at(int y, int x, int c) const { return pixels[(static_cast<std::size_t>(y) * width + x) * 3 + c]; }
  bool operator==(const Image&) const = default;
};

Image to_float(const ByteImage& image);
/// Rounds to nearest and clamps to [0, 255].
ByteImage to_bytes(const Image& image);

}  // namespace branchnet
