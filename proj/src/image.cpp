#include "vasc/image.hpp"

#include <algorithm>
#include <cmath>
#include <fstream>
#include <sstream>

#include "vasc/error.hpp"

namespace vasc {

float Image::clamped(int x, int y, int c) const {
  x = std::clamp(x, 0, width - 1);
  y = std::clamp(y, 0, height - 1);
  return at(x, y, c);
}

float Image::bilinear(double x, double y, int c) const {
  const double fx = std::floor(x);
  const double fy = std::floor(y);
  const int x0 = static_cast<int>(fx);
  const int y0 = static_cast<int>(fy);
  const double ax = x - fx;
  const double ay = y - fy;
  const double top = (1.0 - ax) * clamped(x0, y0, c) + ax * clamped(x0 + 1, y0, c);
  const double bottom =
      (1.0 - ax) * clamped(x0, y0 + 1, c) + ax * clamped(x0 + 1, y0 + 1, c);
  return static_cast<float>((1.0 - ay) * top + ay * bottom);
}

namespace {

// Skips whitespace and '#' comments between header tokens.
void skip_header_space(std::istream& in) {
  while (true) {
    const int ch = in.peek();
    if (ch == '#') {
      std::string ignored;
      std::getline(in, ignored);
    } else if (ch != EOF && std::isspace(ch)) {
      in.get();
    } else {
      return;
    }
  }
}

int read_header_int(std::istream& in) {
  skip_header_space(in);
  int value = -1;
  if (!(in >> value) || value <= 0) {
    throw Error(ErrorKind::Load, "malformed netpbm header");
  }
  return value;
}

}  // namespace

Image decode_pnm(const std::string& bytes) {
  std::istringstream in(bytes);
  char magic[2] = {0, 0};
  in.read(magic, 2);
  if (!in || magic[0] != 'P' || (magic[1] != '5' && magic[1] != '6')) {
    throw Error(ErrorKind::Load, "not a binary PPM/PGM image");
  }
  const int channels = magic[1] == '6' ? 3 : 1;
  const int width = read_header_int(in);
  const int height = read_header_int(in);
  const int maxval = read_header_int(in);
  if (maxval > 255) {
    throw Error(ErrorKind::Load, "16-bit netpbm images are not supported");
  }
  in.get();  // single whitespace before the raster
  const std::size_t count = static_cast<std::size_t>(width) * height * channels;
  std::string raster(count, '\0');
  in.read(raster.data(), static_cast<std::streamsize>(count));
  if (static_cast<std::size_t>(in.gcount()) != count) {
    throw Error(ErrorKind::Load, "truncated netpbm raster");
  }
  Image image(width, height, channels);
  const float scale = 1.0f / static_cast<float>(maxval);
  for (std::size_t i = 0; i < count; ++i) {
    image.data[i] = static_cast<unsigned char>(raster[i]) * scale;
  }
  return image;
}

Image read_pnm(const std::filesystem::path& path) {
  std::ifstream file(path, std::ios::binary);
  if (!file) {
    throw Error(ErrorKind::Load, "cannot open image " + path.string());
  }
  std::ostringstream buffer;
  buffer << file.rdbuf();
  try {
    return decode_pnm(buffer.str());
  } catch (const Error& e) {
    throw Error(ErrorKind::Load, path.string() + ": " + e.what());
  }
}

std::string encode_pnm(const Image& image) {
  if (image.channels != 1 && image.channels != 3) {
    throw Error(ErrorKind::Channel, "netpbm output needs 1 or 3 channels");
  }
  std::ostringstream out;
  out << (image.channels == 3 ? "P6" : "P5") << '\n'
      << image.width << ' ' << image.height << "\n255\n";
  std::string raster(image.size(), '\0');
  for (std::size_t i = 0; i < image.size(); ++i) {
    const float v = std::clamp(image.data[i], 0.0f, 1.0f);
    raster[i] = static_cast<char>(static_cast<unsigned char>(std::lround(v * 255.0f)));
  }
  out << raster;
  return out.str();
}

std::string encode_bmp(const Image& image) {
  if (image.channels != 1 && image.channels != 3) {
    throw Error(ErrorKind::Channel, "bmp output needs 1 or 3 channels");
  }
  const std::size_t row = (static_cast<std::size_t>(image.width) * 3 + 3) & ~std::size_t{3};
  const std::size_t pixels = row * static_cast<std::size_t>(image.height);
  std::string out;
  auto u16 = [&](unsigned v) { out.push_back(char(v & 0xff)); out.push_back(char((v >> 8) & 0xff)); };
  auto u32 = [&](std::uint32_t v) { u16(v & 0xffff); u16(v >> 16); };
  out += "BM";
  u32(static_cast<std::uint32_t>(54 + pixels));
  u32(0);
  u32(54);
  u32(40);
  u32(static_cast<std::uint32_t>(image.width));
  u32(static_cast<std::uint32_t>(image.height));
  u16(1);
  u16(24);
  u32(0);
  u32(static_cast<std::uint32_t>(pixels));
  u32(2835);
  u32(2835);
  u32(0);
  u32(0);
  auto byte = [](float v) {
    return static_cast<char>(static_cast<unsigned char>(std::lround(std::clamp(v, 0.0f, 1.0f) * 255.0f)));
  };
  // Rows bottom-up, pixels as B, G, R.
  for (int y = image.height - 1; y >= 0; --y) {
    std::size_t written = 0;
    for (int x = 0; x < image.width; ++x) {
      for (int c = 2; c >= 0; --c) out.push_back(byte(image.at(x, y, image.channels == 3 ? c : 0)));
      written += 3;
    }
    out.append(row - written, '\0');
  }
  return out;
}

void write_pnm(const std::filesystem::path& path, const Image& image) {
  std::ofstream file(path, std::ios::binary);
  if (!file) {
    throw Error(ErrorKind::Io, "cannot write " + path.string());
  }
  const std::string bytes = encode_pnm(image);
  file.write(bytes.data(), static_cast<std::streamsize>(bytes.size()));
}

Image resize_bilinear(const Image& image, int width, int height) {
  if (image.width == width && image.height == height) {
    return image;
  }
  struct Tap {
    int i0, i1;
    float w;
  };
  auto taps = [](int src, int dst) {
    std::vector<Tap> out(static_cast<std::size_t>(dst));
    const double scale = static_cast<double>(src) / dst;
    for (int d = 0; d < dst; ++d) {
      const double pos = (d + 0.5) * scale - 0.5;
      const double f = std::floor(pos);
      const int i0 = static_cast<int>(f);
      out[static_cast<std::size_t>(d)] = {std::clamp(i0, 0, src - 1), std::clamp(i0 + 1, 0, src - 1),
                                          static_cast<float>(pos - f)};
    }
    return out;
  };
  const auto xs = taps(image.width, width);
  const auto ys = taps(image.height, height);
  const int ch = image.channels;
  Image out(width, height, ch);
  for (int y = 0; y < height; ++y) {
    const Tap ty = ys[static_cast<std::size_t>(y)];
    const float* r0 = &image.data[static_cast<std::size_t>(ty.i0) * image.width * ch];
    const float* r1 = &image.data[static_cast<std::size_t>(ty.i1) * image.width * ch];
    float* dst = &out.data[static_cast<std::size_t>(y) * width * ch];
    for (int x = 0; x < width; ++x) {
      const Tap tx = xs[static_cast<std::size_t>(x)];
      for (int c = 0; c < ch; ++c) {
        const float top = (1.0f - tx.w) * r0[tx.i0 * ch + c] + tx.w * r0[tx.i1 * ch + c];
        const float bottom = (1.0f - tx.w) * r1[tx.i0 * ch + c] + tx.w * r1[tx.i1 * ch + c];
        dst[x * ch + c] = (1.0f - ty.w) * top + ty.w * bottom;
      }
    }
  }
  return out;
}

}  // namespace vasc
