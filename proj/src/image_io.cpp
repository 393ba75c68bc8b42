#include "wdfq/image_io.hpp"

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <fstream>
#include <vector>

#include "wdfq/errors.hpp"

namespace wdfq {

namespace {

// Netpbm header token: whitespace separated, '#' comments run to end of line.
std::string next_token(std::istream& in, const std::string& path) {
  std::string tok;
  int c = in.get();
  while (c != EOF) {
    if (c == '#') {
      while (c != EOF && c != '\n') c = in.get();
    } else if (std::isspace(c)) {
      c = in.get();
    } else {
      break;
    }
  }
  while (c != EOF && !std::isspace(c) && c != '#') {
    tok.push_back(static_cast<char>(c));
    c = in.get();
  }
  if (c == '#') in.unget();
  if (tok.empty())
    raise(ErrorCode::Format, "truncated image header in '" + path + "'");
  return tok;
}

std::int64_t header_int(std::istream& in, const std::string& path, const char* what) {
  const std::string tok = next_token(in, path);
  std::size_t used = 0;
  std::int64_t v = 0;
  try {
    v = std::stoll(tok, &used);
  } catch (const std::exception&) {
    used = 0;
  }
  if (used != tok.size() || v <= 0)
    raise(ErrorCode::Format, std::string("bad ") + what + " '" + tok + "' in '" + path + "'");
  return v;
}

void write_bytes(const std::string& path, const std::string& header,
                 const std::vector<unsigned char>& bytes) {
  std::ofstream out(path, std::ios::binary | std::ios::trunc);
  if (!out) raise(ErrorCode::Io, "cannot open '" + path + "' for writing");
  out.write(header.data(), static_cast<std::streamsize>(header.size()));
  out.write(reinterpret_cast<const char*>(bytes.data()), static_cast<std::streamsize>(bytes.size()));
  if (!out) raise(ErrorCode::Io, "short write to '" + path + "'");
}

unsigned char to_byte(double v) {
  const double clamped = std::clamp(v, 0.0, 1.0);
  return static_cast<unsigned char>(std::lround(clamped * 255.0));
}

}  // namespace

Tensor read_image(const std::string& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) raise(ErrorCode::Io, "cannot open image '" + path + "'");
  const std::string magic = next_token(in, path);
  if (magic != "P5" && magic != "P6")
    raise(ErrorCode::Format, "image '" + path + "' is not binary PGM/PPM (magic '" + magic + "')");
  const bool color = magic == "P6";
  const std::int64_t w = header_int(in, path, "width");
  const std::int64_t h = header_int(in, path, "height");
  const std::int64_t maxval = header_int(in, path, "maxval");
  if (maxval > 255)
    raise(ErrorCode::Format, "image '" + path + "' has maxval " + std::to_string(maxval) +
                                 "; only single-byte samples are supported");
  in.get();  // the single whitespace byte after the header

  const std::int64_t samples = (color ? 3 : 1) * h * w;
  std::vector<unsigned char> raw(static_cast<std::size_t>(samples));
  in.read(reinterpret_cast<char*>(raw.data()), static_cast<std::streamsize>(samples));
  if (in.gcount() != samples)
    raise(ErrorCode::Format, "image '" + path + "' payload is truncated");

  Tensor out({1, 3, h, w});
  const double scale = 1.0 / static_cast<double>(maxval);
  for (std::int64_t y = 0; y < h; ++y)
    for (std::int64_t x = 0; x < w; ++x) {
      if (color) {
        const std::size_t base = static_cast<std::size_t>(3 * (y * w + x));
        for (std::int64_t c = 0; c < 3; ++c)
          out.at(0, c, y, x) = static_cast<double>(raw[base + static_cast<std::size_t>(c)]) * scale;
      } else {
        const double v = static_cast<double>(raw[static_cast<std::size_t>(y * w + x)]) * scale;
        for (std::int64_t c = 0; c < 3; ++c) out.at(0, c, y, x) = v;
      }
    }
  return out;
}

LoadedPair load_pair(const std::string& rgb_path, const std::string& ir_path) {
  LoadedPair pair;
  pair.rgb = read_image(rgb_path);
  pair.ir = read_image(ir_path);
  const std::int64_t h = pair.rgb.extent(2), w = pair.rgb.extent(3);
  if (pair.ir.extent(2) != h || pair.ir.extent(3) != w)
    raise(ErrorCode::Pairing, "paired images disagree on extent: rgb " +
                                  std::to_string(h) + "x" + std::to_string(w) + " vs ir " +
                                  std::to_string(pair.ir.extent(2)) + "x" +
                                  std::to_string(pair.ir.extent(3)));
  if (h % 64 != 0 || w % 64 != 0)
    raise(ErrorCode::Divisibility, "image extents must be divisible by 64, got " +
                                       std::to_string(h) + "x" + std::to_string(w));
  return pair;
}

void write_pgm(const std::string& path, const Tensor& gray) {
  if (gray.rank() != 2)
    raise(ErrorCode::Shape, "write_pgm expects [H,W], got " + shape_str(gray.shape()));
  const std::int64_t h = gray.extent(0), w = gray.extent(1);
  std::vector<unsigned char> bytes(static_cast<std::size_t>(h * w));
  for (std::int64_t i = 0; i < gray.size(); ++i) bytes[static_cast<std::size_t>(i)] = to_byte(gray[i]);
  write_bytes(path, "P5\n" + std::to_string(w) + " " + std::to_string(h) + "\n255\n", bytes);
}

void write_ppm(const std::string& path, const Tensor& rgb) {
  if (rgb.rank() != 3 || rgb.extent(0) != 3)
    raise(ErrorCode::Shape, "write_ppm expects [3,H,W], got " + shape_str(rgb.shape()));
  const std::int64_t h = rgb.extent(1), w = rgb.extent(2);
  std::vector<unsigned char> bytes(static_cast<std::size_t>(3 * h * w));
  std::size_t k = 0;
  for (std::int64_t y = 0; y < h; ++y)
    for (std::int64_t x = 0; x < w; ++x)
      for (std::int64_t c = 0; c < 3; ++c) bytes[k++] = to_byte(rgb.at(c, y, x));
  write_bytes(path, "P6\n" + std::to_string(w) + " " + std::to_string(h) + "\n255\n", bytes);
}

void export_heatmap(const Tensor& feature, const std::string& path) {
  if (feature.rank() != 4)
    raise(ErrorCode::Shape, "export_heatmap expects [N,C,H,W], got " + shape_str(feature.shape()));
  const std::int64_t c = feature.extent(1), h = feature.extent(2), w = feature.extent(3);
  Tensor mean({h, w});
  for (std::int64_t y = 0; y < h; ++y)
    for (std::int64_t x = 0; x < w; ++x) {
      double acc = 0.0;
      for (std::int64_t ci = 0; ci < c; ++ci) acc += feature.at(0, ci, y, x);
      mean.at(y, x) = acc / static_cast<double>(c);
    }
  double lo = mean[0], hi = mean[0];
  for (std::int64_t i = 0; i < mean.size(); ++i) {
    lo = std::min(lo, mean[i]);
    hi = std::max(hi, mean[i]);
  }
  std::vector<unsigned char> bytes(static_cast<std::size_t>(h * w), 0);
  if (hi > lo) {
    const double scale = 255.0 / (hi - lo);
    for (std::int64_t i = 0; i < mean.size(); ++i)
      bytes[static_cast<std::size_t>(i)] =
          static_cast<unsigned char>(std::lround((mean[i] - lo) * scale));
  }
  write_bytes(path, "P5\n" + std::to_string(w) + " " + std::to_string(h) + "\n255\n", bytes);
}

}  // namespace wdfq
