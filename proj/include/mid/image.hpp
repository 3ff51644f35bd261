#pragma once

// Binary PGM (P5) and PPM (P6) 8-bit image io plus bilinear resize. Pixel
// values live in [0,1], layout [C,H,W].

#include <cstdio>
#include <string>
#include <vector>

#include "mid/common.hpp"

namespace mid {

struct Image {
  int channels = 0;
  int height = 0;
  int width = 0;
  std::vector<float> pix;  // [C,H,W], values in [0,1]

  float& at(int c, int h, int w) { return pix[(size_t(c) * height + h) * width + w]; }
  float at(int c, int h, int w) const { return pix[(size_t(c) * height + h) * width + w]; }
};

inline Image make_image(int channels, int height, int width, float fill = 0.0f) {
  MID_CHECK(channels >= 1 && height >= 1 && width >= 1, "make_image: bad dims");
  Image im;
  im.channels = channels;
  im.height = height;
  im.width = width;
  im.pix.assign(size_t(channels) * height * width, fill);
  return im;
}

namespace detail {

inline int pnm_read_token(std::FILE* f) {
  // skips whitespace and '#' comments, returns a non-negative integer
  int c = std::fgetc(f);
  while (c != EOF) {
    if (c == '#') {
      while (c != EOF && c != '\n') c = std::fgetc(f);
    } else if (std::isspace(c)) {
      c = std::fgetc(f);
    } else {
      break;
    }
  }
  MID_CHECK(c != EOF && std::isdigit(c), "malformed PNM header");
  int v = 0;
  while (c != EOF && std::isdigit(c)) {
    v = v * 10 + (c - '0');
    MID_CHECK(v < (1 << 28), "implausible PNM header value");
    c = std::fgetc(f);
  }
  return v;
}

}  // namespace detail

inline Image read_pnm(const std::string& path) {
  std::FILE* f = std::fopen(path.c_str(), "rb");
  MID_CHECK(f != nullptr, "cannot open image '" << path << "'");
  char magic[2];
  MID_CHECK(std::fread(magic, 1, 2, f) == 2 && magic[0] == 'P' &&
                (magic[1] == '5' || magic[1] == '6'),
            "'" << path << "' is not a binary PGM/PPM file");
  const int channels = magic[1] == '5' ? 1 : 3;
  const int w = detail::pnm_read_token(f);
  const int h = detail::pnm_read_token(f);
  const int maxval = detail::pnm_read_token(f);
  MID_CHECK(maxval == 255, "'" << path << "': only 8-bit images supported, maxval=" << maxval);
  MID_CHECK(w >= 1 && h >= 1 && w <= 1 << 14 && h <= 1 << 14, "'" << path << "': bad dimensions");
  std::vector<unsigned char> raw(size_t(channels) * h * w);
  MID_CHECK(std::fread(raw.data(), 1, raw.size(), f) == raw.size(),
            "'" << path << "': truncated pixel data");
  std::fclose(f);
  Image im = make_image(channels, h, w);
  // file order is interleaved rows; ours is planar
  for (int y = 0; y < h; ++y)
    for (int x = 0; x < w; ++x)
      for (int c = 0; c < channels; ++c)
        im.at(c, y, x) = float(raw[(size_t(y) * w + x) * channels + c]) / 255.0f;
  return im;
}

inline void write_pnm(const std::string& path, const Image& im) {
  MID_CHECK(im.channels == 1 || im.channels == 3,
            "write_pnm: " << im.channels << "-channel images unsupported");
  std::FILE* f = std::fopen(path.c_str(), "wb");
  MID_CHECK(f != nullptr, "cannot open '" << path << "' for writing");
  std::fprintf(f, "P%c\n%d %d\n255\n", im.channels == 1 ? '5' : '6', im.width, im.height);
  std::vector<unsigned char> raw(size_t(im.channels) * im.height * im.width);
  for (int y = 0; y < im.height; ++y)
    for (int x = 0; x < im.width; ++x)
      for (int c = 0; c < im.channels; ++c) {
        float v = im.at(c, y, x);
        v = v < 0.0f ? 0.0f : (v > 1.0f ? 1.0f : v);
        raw[(size_t(y) * im.width + x) * im.channels + c] =
            static_cast<unsigned char>(std::lround(v * 255.0f));
      }
  MID_CHECK(std::fwrite(raw.data(), 1, raw.size(), f) == raw.size(), "image write failed");
  MID_CHECK(std::fclose(f) == 0, "image close failed");
}

inline Image bilinear_resize(const Image& im, int out_h, int out_w) {
  MID_CHECK(out_h >= 1 && out_w >= 1, "bilinear_resize: bad target size");
  if (out_h == im.height && out_w == im.width) return im;
  Image out = make_image(im.channels, out_h, out_w);
  const float sy = float(im.height) / float(out_h);
  const float sx = float(im.width) / float(out_w);
  for (int y = 0; y < out_h; ++y) {
    float fy = (float(y) + 0.5f) * sy - 0.5f;
    fy = std::max(0.0f, std::min(fy, float(im.height - 1)));
    const int y0 = int(fy);
    const int y1 = std::min(y0 + 1, im.height - 1);
    const float wy = fy - float(y0);
    for (int x = 0; x < out_w; ++x) {
      float fx = (float(x) + 0.5f) * sx - 0.5f;
      fx = std::max(0.0f, std::min(fx, float(im.width - 1)));
      const int x0 = int(fx);
      const int x1 = std::min(x0 + 1, im.width - 1);
      const float wx = fx - float(x0);
      for (int c = 0; c < im.channels; ++c) {
        const float top = im.at(c, y0, x0) * (1.0f - wx) + im.at(c, y0, x1) * wx;
        const float bot = im.at(c, y1, x0) * (1.0f - wx) + im.at(c, y1, x1) * wx;
        out.at(c, y, x) = top * (1.0f - wy) + bot * wy;
      }
    }
  }
  return out;
}

}  // namespace mid
