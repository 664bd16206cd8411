// SPDX-License-Identifier: Apache-2.0
#include "cellprompt/pnm.hpp"

#include <algorithm>
#include <cctype>
#include <cmath>
#include <fstream>
#include <iterator>
#include <sstream>

#include "cellprompt/errors.hpp"

namespace cellprompt {

namespace {

class HeaderReader {
 public:
  HeaderReader(const std::vector<char>& bytes, const std::string& path) : bytes_(bytes), path_(path) {}

  std::string magic() {
    if (bytes_.size() < 2) fail("file too short");
    pos_ = 2;
    return std::string(bytes_.begin(), bytes_.begin() + 2);
  }

  unsigned long number() {
    skip_space_and_comments();
    if (pos_ >= bytes_.size() || !std::isdigit(static_cast<unsigned char>(bytes_[pos_]))) {
      fail("expected a number");
    }
    unsigned long v = 0;
    while (pos_ < bytes_.size() && std::isdigit(static_cast<unsigned char>(bytes_[pos_]))) {
      v = v * 10 + static_cast<unsigned long>(bytes_[pos_++] - '0');
      if (v > 1u << 24) fail("header value out of range");
    }
    return v;
  }

  // Exactly one whitespace byte separates the header from binary data.
  std::size_t data_start() {
    if (pos_ >= bytes_.size() || !std::isspace(static_cast<unsigned char>(bytes_[pos_]))) {
      fail("missing whitespace after header");
    }
    return pos_ + 1;
  }

  std::size_t pos() const { return pos_; }

  [[noreturn]] void fail(const std::string& what) const {
    throw FormatError(path_ + ": " + what + " at offset " + std::to_string(pos_));
  }

 private:
  void skip_space_and_comments() {
    while (pos_ < bytes_.size()) {
      const char c = bytes_[pos_];
      if (c == '#') {
        while (pos_ < bytes_.size() && bytes_[pos_] != '\n') ++pos_;
      } else if (std::isspace(static_cast<unsigned char>(c))) {
        ++pos_;
      } else {
        break;
      }
    }
  }

  const std::vector<char>& bytes_;
  const std::string& path_;
  std::size_t pos_ = 0;
};

std::vector<char> slurp(const std::string& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw FormatError("cannot open " + path);
  return std::vector<char>(std::istreambuf_iterator<char>(in), {});
}

void write_bytes(const std::string& path, const std::string& header, const std::vector<std::uint8_t>& body) {
  std::ofstream out(path, std::ios::binary);
  if (!out) throw FormatError("cannot write " + path);
  out << header;
  out.write(reinterpret_cast<const char*>(body.data()), static_cast<std::streamsize>(body.size()));
  if (!out) throw FormatError("write failed for " + path);
}

}  // namespace

GrayImage read_pgm(const std::string& path) {
  const std::vector<char> bytes = slurp(path);
  HeaderReader hr(bytes, path);
  const std::string magic = hr.magic();
  if (magic != "P5" && magic != "P2") hr.fail("not a PGM (magic " + magic + ")");
  GrayImage img;
  img.width = hr.number();
  img.height = hr.number();
  const unsigned long maxval = hr.number();
  if (img.width == 0 || img.height == 0) hr.fail("zero image dimension");
  if (maxval == 0 || maxval > 65535) hr.fail("maxval out of range");
  img.maxval = static_cast<unsigned>(maxval);
  const std::size_t n = img.width * img.height;
  img.pixels.resize(n);
  if (magic == "P2") {
    for (std::size_t i = 0; i < n; ++i) {
      const unsigned long v = hr.number();
      if (v > maxval) hr.fail("sample exceeds maxval");
      img.pixels[i] = static_cast<std::uint16_t>(v);
    }
    return img;
  }
  const std::size_t start = hr.data_start();
  const std::size_t bps = maxval > 255 ? 2 : 1;
  if (bytes.size() < start + n * bps) {
    throw FormatError(path + ": truncated pixel data at offset " + std::to_string(bytes.size()));
  }
  for (std::size_t i = 0; i < n; ++i) {
    const auto* p = reinterpret_cast<const std::uint8_t*>(bytes.data() + start + i * bps);
    const unsigned v = bps == 2 ? (static_cast<unsigned>(p[0]) << 8) | p[1] : p[0];
    if (v > maxval) throw FormatError(path + ": sample exceeds maxval at offset " + std::to_string(start + i * bps));
    img.pixels[i] = static_cast<std::uint16_t>(v);
  }
  return img;
}

void write_pgm(const std::string& path, const GrayImage& img) {
  if (img.pixels.size() != img.width * img.height) throw DimensionError("write_pgm: pixel count mismatch");
  std::ostringstream hdr;
  hdr << "P5\n" << img.width << ' ' << img.height << '\n' << img.maxval << '\n';
  std::vector<std::uint8_t> body;
  const bool wide = img.maxval > 255;
  body.reserve(img.pixels.size() * (wide ? 2 : 1));
  for (std::uint16_t v : img.pixels) {
    if (wide) body.push_back(static_cast<std::uint8_t>(v >> 8));
    body.push_back(static_cast<std::uint8_t>(v & 0xff));
  }
  write_bytes(path, hdr.str(), body);
}

RgbImage read_ppm(const std::string& path) {
  const std::vector<char> bytes = slurp(path);
  HeaderReader hr(bytes, path);
  if (hr.magic() != "P6") hr.fail("not a binary PPM");
  RgbImage img;
  img.width = hr.number();
  img.height = hr.number();
  if (hr.number() != 255) hr.fail("only maxval 255 supported");
  const std::size_t start = hr.data_start();
  const std::size_t n = 3 * img.width * img.height;
  if (bytes.size() < start + n) throw FormatError(path + ": truncated pixel data");
  img.rgb.assign(bytes.begin() + static_cast<std::ptrdiff_t>(start),
                 bytes.begin() + static_cast<std::ptrdiff_t>(start + n));
  return img;
}

void write_ppm(const std::string& path, const RgbImage& img) {
  if (img.rgb.size() != 3 * img.width * img.height) throw DimensionError("write_ppm: pixel count mismatch");
  std::ostringstream hdr;
  hdr << "P6\n" << img.width << ' ' << img.height << "\n255\n";
  write_bytes(path, hdr.str(), img.rgb);
}

Tensor gray_to_tensor(const GrayImage& img) {
  Tensor t({img.height, img.width});
  for (std::size_t i = 0; i < t.size(); ++i) t[i] = static_cast<double>(img.pixels[i]) / img.maxval;
  return t;
}

GrayImage tensor_to_gray(const Tensor& values, unsigned maxval) {
  if (values.ndim() != 2) throw DimensionError("expected H×W values, got " + shape_str(values.shape()));
  GrayImage img{values.dim(1), values.dim(0), maxval, std::vector<std::uint16_t>(values.size())};
  for (std::size_t i = 0; i < values.size(); ++i) {
    const double v = std::clamp(values[i], 0.0, 1.0);
    img.pixels[i] = static_cast<std::uint16_t>(std::lround(v * maxval));
  }
  return img;
}

void write_pgm8(const std::string& path, const Tensor& values) { write_pgm(path, tensor_to_gray(values, 255)); }

void write_pgm16(const std::string& path, const Tensor& values) {
  write_pgm(path, tensor_to_gray(values, 65535));
}

void write_mask_pgm(const std::string& path, const Tensor& mask) {
  Tensor m = mask;
  for (std::size_t i = 0; i < m.size(); ++i) m[i] = mask[i] != 0.0 ? 1.0 : 0.0;
  write_pgm8(path, m);
}

Tensor read_mask_pgm(const std::string& path) {
  const GrayImage img = read_pgm(path);
  Tensor t({img.height, img.width});
  for (std::size_t i = 0; i < t.size(); ++i) t[i] = img.pixels[i] ? 1.0 : 0.0;
  return t;
}

}  // namespace cellprompt
