#include "max360iq/image_io.hpp"

#include <png.h>

#include <algorithm>
#include <cctype>
#include <cmath>
#include <cstring>
#include <fstream>
#include <sstream>
#include <vector>

#include "max360iq/errors.hpp"

namespace max360iq {

namespace fs = std::filesystem;

std::string read_file(const fs::path& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw DataError("cannot open " + path.string());
  std::ostringstream ss;
  ss << in.rdbuf();
  return ss.str();
}

void write_file_atomic(const fs::path& path, const std::string& bytes) {
  if (path.has_parent_path()) fs::create_directories(path.parent_path());
  fs::path tmp = path;
  tmp += ".tmp";
  {
    std::ofstream out(tmp, std::ios::binary | std::ios::trunc);
    if (!out) throw DataError("cannot write " + tmp.string());
    out.write(bytes.data(), static_cast<std::streamsize>(bytes.size()));
    if (!out) throw DataError("write failed for " + tmp.string());
  }
  fs::rename(tmp, path);
}

namespace {

struct PngReadState {
  const std::string* bytes;
  std::size_t pos;
};

void png_read_mem(png_structp png, png_bytep out, png_size_t n) {
  auto* st = static_cast<PngReadState*>(png_get_io_ptr(png));
  if (st->pos + n > st->bytes->size()) png_error(png, "truncated PNG");
  std::memcpy(out, st->bytes->data() + st->pos, n);
  st->pos += n;
}

void png_write_mem(png_structp png, png_bytep data, png_size_t n) {
  auto* out = static_cast<std::string*>(png_get_io_ptr(png));
  out->append(reinterpret_cast<const char*>(data), n);
}

void png_flush_noop(png_structp) {}

ErpImage decode_png(const std::string& bytes, const fs::path& path) {
  png_structp png = png_create_read_struct(PNG_LIBPNG_VER_STRING, nullptr, nullptr, nullptr);
  if (!png) throw DataError("libpng init failed");
  png_infop info = png_create_info_struct(png);
  if (!info) {
    png_destroy_read_struct(&png, nullptr, nullptr);
    throw DataError("libpng init failed");
  }
  PngReadState st{&bytes, 0};
  std::vector<unsigned char> raw;
  png_uint_32 w = 0, h = 0;
  int bit_depth = 0;
  std::size_t rowbytes = 0;
  if (setjmp(png_jmpbuf(png))) {
    png_destroy_read_struct(&png, &info, nullptr);
    throw DataError("malformed PNG: " + path.string());
  }
  png_set_read_fn(png, &st, png_read_mem);
  png_read_info(png, info);
  w = png_get_image_width(png, info);
  h = png_get_image_height(png, info);
  const int color = png_get_color_type(png, info);
  bit_depth = png_get_bit_depth(png, info);
  if (color == PNG_COLOR_TYPE_PALETTE) png_set_palette_to_rgb(png);
  if (color == PNG_COLOR_TYPE_GRAY && bit_depth < 8) png_set_expand_gray_1_2_4_to_8(png);
  if (color == PNG_COLOR_TYPE_GRAY || color == PNG_COLOR_TYPE_GRAY_ALPHA) png_set_gray_to_rgb(png);
  if (color & PNG_COLOR_MASK_ALPHA) png_set_strip_alpha(png);
  if (png_get_valid(png, info, PNG_INFO_tRNS)) png_set_strip_alpha(png);
  if (bit_depth == 16) png_set_swap(png);  // little-endian 16-bit samples
  png_read_update_info(png, info);
  bit_depth = png_get_bit_depth(png, info);
  rowbytes = png_get_rowbytes(png, info);
  raw.resize(rowbytes * h);
  std::vector<png_bytep> rows(h);
  for (png_uint_32 y = 0; y < h; ++y) rows[y] = raw.data() + y * rowbytes;
  png_read_image(png, rows.data());
  png_destroy_read_struct(&png, &info, nullptr);

  Tensor px({3, h, w});
  const double maxval = bit_depth == 16 ? 65535.0 : 255.0;
  for (png_uint_32 y = 0; y < h; ++y)
    for (png_uint_32 x = 0; x < w; ++x)
      for (std::size_t c = 0; c < 3; ++c) {
        double v;
        if (bit_depth == 16) {
          const unsigned char* p = raw.data() + y * rowbytes + (x * 3 + c) * 2;
          v = static_cast<double>(p[0] | (p[1] << 8));
        } else {
          v = raw[y * rowbytes + x * 3 + c];
        }
        px[(c * h + y) * w + x] = v / maxval;
      }
  return ErpImage(std::move(px));
}

ErpImage decode_ppm(const std::string& bytes, const fs::path& path) {
  std::size_t pos = 2;
  auto next_token = [&]() -> long {
    while (pos < bytes.size()) {
      if (bytes[pos] == '#') {
        while (pos < bytes.size() && bytes[pos] != '\n') ++pos;
      } else if (std::isspace(static_cast<unsigned char>(bytes[pos]))) {
        ++pos;
      } else {
        break;
      }
    }
    long v = 0;
    bool any = false;
    while (pos < bytes.size() && std::isdigit(static_cast<unsigned char>(bytes[pos]))) {
      v = v * 10 + (bytes[pos] - '0');
      ++pos;
      any = true;
    }
    if (!any) throw DataError("malformed PPM header: " + path.string());
    return v;
  };
  const long w = next_token(), h = next_token(), maxval = next_token();
  if (maxval != 255) throw DataError("PPM maxval must be 255: " + path.string());
  if (w <= 0 || h <= 0) throw DataError("PPM has empty extent: " + path.string());
  ++pos;  // single whitespace before raster
  const std::size_t need = static_cast<std::size_t>(w * h * 3);
  if (bytes.size() < pos + need) throw DataError("truncated PPM raster: " + path.string());
  Tensor px({3, static_cast<std::size_t>(h), static_cast<std::size_t>(w)});
  for (long y = 0; y < h; ++y)
    for (long x = 0; x < w; ++x)
      for (long c = 0; c < 3; ++c)
        px[(c * h + y) * w + x] =
            static_cast<unsigned char>(bytes[pos + (y * w + x) * 3 + c]) / 255.0;
  return ErpImage(std::move(px));
}

std::vector<unsigned char> to_rgb8(const Tensor& chw) {
  if (chw.rank() != 3 || chw.dim(0) != 3)
    throw PreconditionError("expected a 3xHxW tensor, got " + shape_str(chw.shape()));
  const std::size_t h = chw.dim(1), w = chw.dim(2);
  std::vector<unsigned char> rgb(h * w * 3);
  for (std::size_t y = 0; y < h; ++y)
    for (std::size_t x = 0; x < w; ++x)
      for (std::size_t c = 0; c < 3; ++c) {
        const double v = std::clamp(chw[(c * h + y) * w + x], 0.0, 1.0);
        rgb[(y * w + x) * 3 + c] = static_cast<unsigned char>(std::lround(v * 255.0));
      }
  return rgb;
}

}  // namespace

ErpImage read_image(const fs::path& path) {
  if (!fs::exists(path)) throw DataError("missing image: " + path.string());
  const std::string bytes = read_file(path);
  if (bytes.size() >= 8 && png_sig_cmp(reinterpret_cast<png_const_bytep>(bytes.data()), 0, 8) == 0)
    return decode_png(bytes, path);
  if (bytes.size() >= 2 && bytes[0] == 'P' && bytes[1] == '6') return decode_ppm(bytes, path);
  throw DataError("unsupported image format: " + path.string());
}

void write_png(const fs::path& path, const Tensor& chw) {
  const std::vector<unsigned char> rgb = to_rgb8(chw);
  const std::size_t h = chw.dim(1), w = chw.dim(2);
  std::string out;
  png_structp png = png_create_write_struct(PNG_LIBPNG_VER_STRING, nullptr, nullptr, nullptr);
  if (!png) throw DataError("libpng init failed");
  png_infop info = png_create_info_struct(png);
  if (!info || setjmp(png_jmpbuf(png))) {
    png_destroy_write_struct(&png, info ? &info : nullptr);
    throw DataError("PNG encoding failed for " + path.string());
  }
  png_set_write_fn(png, &out, png_write_mem, png_flush_noop);
  png_set_IHDR(png, info, static_cast<png_uint_32>(w), static_cast<png_uint_32>(h), 8,
               PNG_COLOR_TYPE_RGB, PNG_INTERLACE_NONE, PNG_COMPRESSION_TYPE_DEFAULT,
               PNG_FILTER_TYPE_DEFAULT);
  png_write_info(png, info);
  for (std::size_t y = 0; y < h; ++y)
    png_write_row(png, const_cast<png_bytep>(rgb.data() + y * w * 3));
  png_write_end(png, nullptr);
  png_destroy_write_struct(&png, &info);
  write_file_atomic(path, out);
}

void write_ppm(const fs::path& path, const Tensor& chw) {
  const std::vector<unsigned char> rgb = to_rgb8(chw);
  std::string out = "P6\n" + std::to_string(chw.dim(2)) + " " + std::to_string(chw.dim(1)) +
                    "\n255\n";
  out.append(reinterpret_cast<const char*>(rgb.data()), rgb.size());
  write_file_atomic(path, out);
}

}  // namespace max360iq
