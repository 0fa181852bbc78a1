#pragma once

#include <cstdint>
#include <filesystem>
#include <string>
#include <vector>

namespace vasc {

/// Interleaved (HWC) float image. Pixel values are nominally in [0, 1].
struct Image {
  int width = 0;
  int height = 0;
  int channels = 0;
  std::vector<float> data;

  Image() = default;
  Image(int w, int h, int c, float fill = 0.0f)
      : width(w), height(h), channels(c),
        data(static_cast<std::size_t>(w) * h * c, fill) {}

  bool empty() const { return data.empty(); }
  std::size_t size() const { return data.size(); }

  float& at(int x, int y, int c) {
    return data[(static_cast<std::size_t>(y) * width + x) * channels + c];
  }
  const float& at(int x, int y, int c) const {
    return data[(static_cast<std::size_t>(y) * width + x) * channels + c];
  }

  /// Clamped lookup (nearest-edge replication outside the frame).
  float clamped(int x, int y, int c) const;

  /// Bilinear sample at continuous pixel-center coordinates with edge clamping.
  float bilinear(double x, double y, int c) const;

  bool operator==(const Image&) const = default;
};

/// Reads binary PPM (P6) or PGM (P5), 8-bit. Throws Error{Load} on malformed input.
Image read_pnm(const std::filesystem::path& path);
Image decode_pnm(const std::string& bytes);

/// Writes 8-bit P6 (3 channels) or P5 (1 channel); values are clamped to [0,1].
void write_pnm(const std::filesystem::path& path, const Image& image);
std::string encode_pnm(const Image& image);

/// 24-bit uncompressed BMP (browsers display it natively). Grayscale images
/// are replicated to three channels.
std::string encode_bmp(const Image& image);

/// Direct bilinear rescale to (width, height), no aspect preservation.
/// Uses half-pixel centers: src = (dst + 0.5) * scale - 0.5.
Image resize_bilinear(const Image& image, int width, int height);

}  // namespace vasc
