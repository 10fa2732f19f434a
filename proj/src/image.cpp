#include "hsds/image.hpp"

#include <jpeglib.h>
#include <png.h>

#include <cctype>
#include <csetjmp>
#include <cstdio>
#include <memory>
#include <vector>

namespace hsds {

Image::Image(Index height, Index width, Index channels, Eigen::ArrayXd pixels)
    : height_(height), width_(width), channels_(channels), pixels_(std::move(pixels)) {
  if (channels != 1 && channels != 3) throw ImageError("image must have 1 or 3 channels");
  if (height < kMinSide || width < kMinSide)
    throw ImageError("image must be at least 8x8, got " + std::to_string(height) + "x" + std::to_string(width));
  if (pixels_.size() != height * width * channels) throw ImageError("pixel buffer does not match extent");
  if (!pixels_.allFinite() || (pixels_.size() > 0 && (pixels_.minCoeff() < 0.0 || pixels_.maxCoeff() > 1.0)))
    throw ImageError("pixel values must lie in [0,1]");
}

Image::Image(Index height, Index width, Index channels, double fill)
    : Image(height, width, channels, Eigen::ArrayXd::Constant(height * width * channels, fill)) {}

Image Image::crop(Index y, Index x, Index h, Index w) const {
  if (y < 0 || x < 0 || y + h > height_ || x + w > width_) throw ImageError("crop window out of bounds");
  Eigen::ArrayXd out(h * w * channels_);
  for (Index c = 0; c < channels_; ++c)
    for (Index i = 0; i < h; ++i)
      out.segment((c * h + i) * w, w) = pixels_.segment((c * height_ + y + i) * width_ + x, w);
  return Image(h, w, channels_, std::move(out));
}

Image Image::to_rgb() const {
  if (channels_ == 3) return *this;
  Eigen::ArrayXd out(3 * pixels_.size());
  out << pixels_, pixels_, pixels_;
  return Image(height_, width_, 3, std::move(out));
}

Eigen::ArrayXXd Image::luminance() const {
  const Index n = height_ * width_;
  Eigen::ArrayXd y;
  if (channels_ == 1) {
    y = pixels_;
  } else {
    y = 0.299 * pixels_.segment(0, n) + 0.587 * pixels_.segment(n, n) + 0.114 * pixels_.segment(2 * n, n);
  }
  // Row-major plane into a column-major Eigen array.
  Eigen::ArrayXXd out(height_, width_);
  for (Index i = 0; i < height_; ++i)
    for (Index j = 0; j < width_; ++j) out(i, j) = y[i * width_ + j];
  return out;
}

namespace {

struct FileCloser {
  void operator()(std::FILE* f) const {
    if (f) std::fclose(f);
  }
};
using FilePtr = std::unique_ptr<std::FILE, FileCloser>;

FilePtr open_file(const std::filesystem::path& path, const char* mode) {
  FilePtr f(std::fopen(path.c_str(), mode));
  if (!f) throw DecodeError("cannot open " + path.string());
  return f;
}

Image read_png(const std::filesystem::path& path) {
  FilePtr file = open_file(path, "rb");
  unsigned char sig[8];
  if (std::fread(sig, 1, 8, file.get()) != 8 || png_sig_cmp(sig, 0, 8) != 0)
    throw DecodeError(path.string() + ": not a PNG file");

  png_structp png = png_create_read_struct(PNG_LIBPNG_VER_STRING, nullptr, nullptr, nullptr);
  png_infop info = png ? png_create_info_struct(png) : nullptr;
  if (!info) {
    png_destroy_read_struct(&png, nullptr, nullptr);
    throw DecodeError("libpng initialisation failed");
  }
  if (setjmp(png_jmpbuf(png))) {
    png_destroy_read_struct(&png, &info, nullptr);
    throw DecodeError(path.string() + ": corrupt PNG data");
  }
  png_init_io(png, file.get());
  png_set_sig_bytes(png, 8);
  png_read_png(png, info, PNG_TRANSFORM_EXPAND | PNG_TRANSFORM_STRIP_ALPHA, nullptr);

  const Index w = png_get_image_width(png, info);
  const Index h = png_get_image_height(png, info);
  const int depth = png_get_bit_depth(png, info);
  const int color = png_get_color_type(png, info);
  const Index c = (color & PNG_COLOR_MASK_COLOR) ? 3 : 1;
  png_bytepp rows = png_get_rows(png, info);

  const double scale = depth == 16 ? 65535.0 : 255.0;
  Eigen::ArrayXd px(h * w * c);
  for (Index y = 0; y < h; ++y)
    for (Index x = 0; x < w; ++x)
      for (Index k = 0; k < c; ++k) {
        double v;
        if (depth == 16) {
          const png_bytep p = rows[y] + 2 * (x * c + k);
          v = static_cast<double>((p[0] << 8) | p[1]);
        } else {
          v = static_cast<double>(rows[y][x * c + k]);
        }
        px[(k * h + y) * w + x] = v / scale;
      }
  png_destroy_read_struct(&png, &info, nullptr);
  return Image(h, w, c, std::move(px));
}

struct JpegError {
  jpeg_error_mgr mgr;
  std::jmp_buf jump;
};

void jpeg_error_exit(j_common_ptr cinfo) {
  auto* err = reinterpret_cast<JpegError*>(cinfo->err);
  std::longjmp(err->jump, 1);
}

Image read_jpeg(const std::filesystem::path& path) {
  FilePtr file = open_file(path, "rb");
  jpeg_decompress_struct cinfo{};
  JpegError err{};
  cinfo.err = jpeg_std_error(&err.mgr);
  err.mgr.error_exit = jpeg_error_exit;
  std::vector<unsigned char> buf;
  Index w = 0, h = 0, c = 0;
  if (setjmp(err.jump)) {
    jpeg_destroy_decompress(&cinfo);
    throw DecodeError(path.string() + ": corrupt JPEG data");
  }
  jpeg_create_decompress(&cinfo);
  jpeg_stdio_src(&cinfo, file.get());
  jpeg_read_header(&cinfo, TRUE);
  cinfo.out_color_space = cinfo.num_components == 1 ? JCS_GRAYSCALE : JCS_RGB;
  jpeg_start_decompress(&cinfo);
  w = cinfo.output_width;
  h = cinfo.output_height;
  c = cinfo.output_components;
  buf.resize(static_cast<std::size_t>(w * h * c));
  while (cinfo.output_scanline < cinfo.output_height) {
    unsigned char* row = buf.data() + static_cast<std::size_t>(cinfo.output_scanline) * w * c;
    jpeg_read_scanlines(&cinfo, &row, 1);
  }
  jpeg_finish_decompress(&cinfo);
  jpeg_destroy_decompress(&cinfo);

  Eigen::ArrayXd px(h * w * c);
  for (Index y = 0; y < h; ++y)
    for (Index x = 0; x < w; ++x)
      for (Index k = 0; k < c; ++k) px[(k * h + y) * w + x] = buf[static_cast<std::size_t>((y * w + x) * c + k)] / 255.0;
  return Image(h, w, c, std::move(px));
}

std::string lower_extension(const std::filesystem::path& p) {
  std::string ext = p.extension().string();
  for (char& ch : ext) ch = static_cast<char>(std::tolower(static_cast<unsigned char>(ch)));
  return ext;
}

}  // namespace

Image read_image(const std::filesystem::path& path) {
  const std::string ext = lower_extension(path);
  try {
    if (ext == ".png") return read_png(path);
    if (ext == ".jpg" || ext == ".jpeg") return read_jpeg(path);
  } catch (const DecodeError&) {
    throw;
  } catch (const ImageError& e) {
    throw DecodeError(path.string() + ": " + e.what());
  }
  throw DecodeError(path.string() + ": unsupported image format '" + ext + "'");
}

void write_png(const std::filesystem::path& path, const Image& img) {
  FilePtr file(std::fopen(path.c_str(), "wb"));
  if (!file) throw ImageError("cannot write " + path.string());
  png_structp png = png_create_write_struct(PNG_LIBPNG_VER_STRING, nullptr, nullptr, nullptr);
  png_infop info = png ? png_create_info_struct(png) : nullptr;
  if (!info) {
    png_destroy_write_struct(&png, nullptr);
    throw ImageError("libpng initialisation failed");
  }
  const Index h = img.height(), w = img.width(), c = img.channels();
  std::vector<unsigned char> buf(static_cast<std::size_t>(h * w * c));
  for (Index y = 0; y < h; ++y)
    for (Index x = 0; x < w; ++x)
      for (Index k = 0; k < c; ++k) buf[static_cast<std::size_t>((y * w + x) * c + k)] = quantize8(img.at(k, y, x));
  std::vector<png_bytep> rows(static_cast<std::size_t>(h));
  for (Index y = 0; y < h; ++y) rows[static_cast<std::size_t>(y)] = buf.data() + y * w * c;

  if (setjmp(png_jmpbuf(png))) {
    png_destroy_write_struct(&png, &info);
    throw ImageError("failed writing " + path.string());
  }
  png_init_io(png, file.get());
  png_set_IHDR(png, info, static_cast<png_uint_32>(w), static_cast<png_uint_32>(h), 8,
               c == 3 ? PNG_COLOR_TYPE_RGB : PNG_COLOR_TYPE_GRAY, PNG_INTERLACE_NONE, PNG_COMPRESSION_TYPE_DEFAULT,
               PNG_FILTER_TYPE_DEFAULT);
  png_set_rows(png, info, rows.data());
  png_write_png(png, info, PNG_TRANSFORM_IDENTITY, nullptr);
  png_destroy_write_struct(&png, &info);
}

}  // namespace hsds
