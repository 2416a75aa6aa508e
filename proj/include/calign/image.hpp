#pragma once

#include <png.h>

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <filesystem>
#include <fstream>
#include <string>
#include <vector>

#include "calign/autograd.hpp"
#include "calign/error.hpp"

namespace calign {

/// Interleaved HxWxC image with values in [0, 1].
struct Image {
  int height = 0;
  int width = 0;
  int channels = 0;
  std::vector<double> pixels;

  Image() = default;
  Image(int h, int w, int c, double fill = 0.0)
      : height(h), width(w), channels(c),
        pixels(static_cast<std::size_t>(h) * w * c, fill) {}

  double& at(int y, int x, int c) {
    return pixels[(static_cast<std::size_t>(y) * width + x) * channels + c];
  }
  double at(int y, int x, int c) const {
    return pixels[(static_cast<std::size_t>(y) * width + x) * channels + c];
  }

  /// (H*W) x C view used as the encoder's input map.
  Mat to_matrix() const {
    Mat m(height * width, channels);
    std::copy(pixels.begin(), pixels.end(), m.data());
    return m;
  }

  bool operator==(const Image&) const = default;
};

/// Rounds every value to the nearest multiple of 1/255.
inline void quantize8(Image& img) {
  for (auto& v : img.pixels) v = std::round(std::clamp(v, 0.0, 1.0) * 255.0) / 255.0;
}

inline Image resize_bilinear(const Image& src, int height, int width) {
  if (src.height == height && src.width == width) return src;
  Image out(height, width, src.channels);
  const double sy = static_cast<double>(src.height) / height;
  const double sx = static_cast<double>(src.width) / width;
  for (int y = 0; y < height; ++y) {
    const double fy = std::clamp((y + 0.5) * sy - 0.5, 0.0, src.height - 1.0);
    const int y0 = static_cast<int>(fy);
    const int y1 = std::min(y0 + 1, src.height - 1);
    const double wy = fy - y0;
    for (int x = 0; x < width; ++x) {
      const double fx = std::clamp((x + 0.5) * sx - 0.5, 0.0, src.width - 1.0);
      const int x0 = static_cast<int>(fx);
      const int x1 = std::min(x0 + 1, src.width - 1);
      const double wx = fx - x0;
      for (int c = 0; c < src.channels; ++c) {
        const double top = src.at(y0, x0, c) * (1 - wx) + src.at(y0, x1, c) * wx;
        const double bot = src.at(y1, x0, c) * (1 - wx) + src.at(y1, x1, c) * wx;
        out.at(y, x, c) = top * (1 - wy) + bot * wy;
      }
    }
  }
  return out;
}

namespace detail {
inline std::vector<std::uint8_t> to_bytes(const Image& img) {
  std::vector<std::uint8_t> bytes(img.pixels.size());
  for (std::size_t i = 0; i < bytes.size(); ++i) {
    bytes[i] = static_cast<std::uint8_t>(std::lround(std::clamp(img.pixels[i], 0.0, 1.0) * 255.0));
  }
  return bytes;
}

inline Image from_bytes(const std::uint8_t* data, int h, int w, int c) {
  Image img(h, w, c);
  for (std::size_t i = 0; i < img.pixels.size(); ++i) img.pixels[i] = data[i] / 255.0;
  return img;
}
}  // namespace detail

/// Binary PPM (P6), or PGM (P5) for single-channel images.
inline void write_ppm(const std::filesystem::path& path, const Image& img) {
  if (img.channels != 3 && img.channels != 1) throw IngestionError("ppm: need 1 or 3 channels");
  std::ofstream out(path, std::ios::binary);
  if (!out) throw IngestionError("cannot write " + path.string());
  out << (img.channels == 3 ? "P6\n" : "P5\n") << img.width << ' ' << img.height << "\n255\n";
  const auto bytes = detail::to_bytes(img);
  out.write(reinterpret_cast<const char*>(bytes.data()), static_cast<std::streamsize>(bytes.size()));
}

inline Image read_ppm(const std::filesystem::path& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw IngestionError("cannot open " + path.string());
  std::string magic;
  in >> magic;
  if (magic != "P6" && magic != "P5") throw IngestionError("not a binary PPM/PGM: " + path.string());
  auto next_int = [&in, &path]() {
    int v = 0;
    in >> std::ws;
    while (in.peek() == '#') {
      std::string skip;
      std::getline(in, skip);
      in >> std::ws;
    }
    if (!(in >> v)) throw IngestionError("bad PPM header: " + path.string());
    return v;
  };
  const int w = next_int();
  const int h = next_int();
  const int maxval = next_int();
  if (maxval != 255) throw IngestionError("PPM maxval must be 255: " + path.string());
  in.get();
  const int c = magic == "P6" ? 3 : 1;
  std::vector<std::uint8_t> bytes(static_cast<std::size_t>(w) * h * c);
  in.read(reinterpret_cast<char*>(bytes.data()), static_cast<std::streamsize>(bytes.size()));
  if (in.gcount() != static_cast<std::streamsize>(bytes.size())) {
    throw IngestionError("truncated PPM: " + path.string());
  }
  return detail::from_bytes(bytes.data(), h, w, c);
}

inline void write_png(const std::filesystem::path& path, const Image& img) {
  if (img.channels != 3 && img.channels != 1) throw IngestionError("png: need 1 or 3 channels");
  png_image info{};
  info.version = PNG_IMAGE_VERSION;
  info.width = static_cast<png_uint_32>(img.width);
  info.height = static_cast<png_uint_32>(img.height);
  info.format = img.channels == 3 ? PNG_FORMAT_RGB : PNG_FORMAT_GRAY;
  const auto bytes = detail::to_bytes(img);
  if (!png_image_write_to_file(&info, path.string().c_str(), 0, bytes.data(), 0, nullptr)) {
    throw IngestionError("cannot write " + path.string() + ": " + info.message);
  }
}

/// Decodes any PNG to 8-bit RGB.
inline Image read_png(const std::filesystem::path& path) {
  png_image info{};
  info.version = PNG_IMAGE_VERSION;
  if (!png_image_begin_read_from_file(&info, path.string().c_str())) {
    throw IngestionError("cannot read " + path.string() + ": " + info.message);
  }
  info.format = PNG_FORMAT_RGB;
  std::vector<std::uint8_t> bytes(PNG_IMAGE_SIZE(info));
  if (!png_image_finish_read(&info, nullptr, bytes.data(), 0, nullptr)) {
    png_image_free(&info);
    throw IngestionError("cannot decode " + path.string() + ": " + info.message);
  }
  return detail::from_bytes(bytes.data(), static_cast<int>(info.height),
                            static_cast<int>(info.width), 3);
}

/// Loads a PNG or PPM/PGM file, chosen by extension. Grayscale inputs are
/// expanded to `channels` copies.
inline Image load_image(const std::filesystem::path& path, int channels = 3) {
  if (!std::filesystem::exists(path)) throw IngestionError("missing image file: " + path.string());
  auto ext = path.extension().string();
  std::transform(ext.begin(), ext.end(), ext.begin(), [](unsigned char ch) { return std::tolower(ch); });
  Image img;
  if (ext == ".png") {
    img = read_png(path);
  } else if (ext == ".ppm" || ext == ".pgm" || ext == ".pnm") {
    img = read_ppm(path);
  } else {
    throw IngestionError("unsupported image format: " + path.string());
  }
  if (img.channels == channels) return img;
  if (img.channels == 1) {
    Image out(img.height, img.width, channels);
    for (int y = 0; y < img.height; ++y)
      for (int x = 0; x < img.width; ++x)
        for (int c = 0; c < channels; ++c) out.at(y, x, c) = img.at(y, x, 0);
    return out;
  }
  if (channels == 1) {
    Image out(img.height, img.width, 1);
    for (int y = 0; y < img.height; ++y)
      for (int x = 0; x < img.width; ++x) {
        double s = 0;
        for (int c = 0; c < img.channels; ++c) s += img.at(y, x, c);
        out.at(y, x, 0) = s / img.channels;
      }
    return out;
  }
  throw IngestionError("cannot convert channel count for " + path.string());
}

}  // namespace calign
