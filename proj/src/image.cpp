#include "crtnet/image.hpp"

#include <algorithm>
#include <cmath>
#include <fstream>
#include <sstream>

#include "crtnet/errors.hpp"

namespace crtnet {

void BoundingBox::validate(int width, int height) const {
  if (w < 1 || h < 1)
    throw InputError("degenerate bounding box (w=" + std::to_string(w) + ", h=" + std::to_string(h) + ")");
  if (x < 0 || y < 0 || x + w > width || y + h > height)
    throw InputError("bounding box (" + std::to_string(x) + "," + std::to_string(y) + "," +
                     std::to_string(w) + "," + std::to_string(h) + ") outside " + std::to_string(width) +
                     "x" + std::to_string(height) + " image");
}

BoundingBox box_union(const BoundingBox& a, const BoundingBox& b) {
  const int x0 = std::min(a.x, b.x), y0 = std::min(a.y, b.y);
  const int x1 = std::max(a.right(), b.right()), y1 = std::max(a.bottom(), b.bottom());
  return {x0, y0, x1 - x0, y1 - y0};
}

Image::Image(int width, int height, Rgb fill)
    : width_(width), height_(height), data_(static_cast<std::size_t>(3) * width * height) {
  if (width < 1 || height < 1) throw InputError("image extents must be positive");
  for (int c = 0; c < 3; ++c)
    std::fill_n(data_.begin() + static_cast<std::size_t>(c) * width * height,
                static_cast<std::size_t>(width) * height, fill[c]);
}

void Image::set_pixel(int x, int y, const Rgb& rgb) {
  for (int c = 0; c < 3; ++c) at(c, y, x) = rgb[c];
}

void Image::fill_rect(int x, int y, int w, int h, const Rgb& rgb) {
  const int x0 = std::max(0, x), y0 = std::max(0, y);
  const int x1 = std::min(width_, x + w), y1 = std::min(height_, y + h);
  for (int yy = y0; yy < y1; ++yy)
    for (int xx = x0; xx < x1; ++xx) set_pixel(xx, yy, rgb);
}

Tensor Image::to_tensor() const {
  return Tensor({3, static_cast<std::size_t>(height_), static_cast<std::size_t>(width_)}, data_);
}

Image Image::from_tensor(const Tensor& t) {
  if (t.rank() != 3 || t.dim(0) != 3) throw DimensionError("image tensor must be 3xHxW, got " + shape_str(t.shape()));
  Image img(static_cast<int>(t.dim(2)), static_cast<int>(t.dim(1)));
  std::copy(t.data().begin(), t.data().end(), img.data_.begin());
  return img;
}

Tensor crop_resize_bilinear(const Tensor& image, const BoundingBox& window, int out_h, int out_w) {
  if (image.rank() != 3 || image.dim(0) != 3)
    throw DimensionError("crop_resize_bilinear: expected 3xHxW, got " + shape_str(image.shape()));
  const int ih = static_cast<int>(image.dim(1)), iw = static_cast<int>(image.dim(2));
  window.validate(iw, ih);
  if (out_h < 1 || out_w < 1) throw DimensionError("crop_resize_bilinear: output extents must be positive");

  struct Tap {
    int i0, i1;
    double frac;
  };
  auto taps = [](int in, int out, int offset) {
    std::vector<Tap> t(static_cast<std::size_t>(out));
    const double ratio = static_cast<double>(in) / out;
    for (int d = 0; d < out; ++d) {
      double s = (d + 0.5) * ratio - 0.5;
      s = std::clamp(s, 0.0, static_cast<double>(in - 1));
      const int i0 = static_cast<int>(std::floor(s));
      const int i1 = std::min(i0 + 1, in - 1);
      t[static_cast<std::size_t>(d)] = {offset + i0, offset + i1, s - i0};
    }
    return t;
  };
  const auto ty = taps(window.h, out_h, window.y);
  const auto tx = taps(window.w, out_w, window.x);

  const auto src = image.data();
  std::vector<double> out(static_cast<std::size_t>(3) * out_h * out_w);
  for (int c = 0; c < 3; ++c) {
    const double* plane = src.data() + static_cast<std::size_t>(c) * ih * iw;
    for (int oy = 0; oy < out_h; ++oy) {
      const Tap& a = ty[static_cast<std::size_t>(oy)];
      const double* r0 = plane + static_cast<std::size_t>(a.i0) * iw;
      const double* r1 = plane + static_cast<std::size_t>(a.i1) * iw;
      for (int ox = 0; ox < out_w; ++ox) {
        const Tap& b = tx[static_cast<std::size_t>(ox)];
        const double top = r0[b.i0] + (r0[b.i1] - r0[b.i0]) * b.frac;
        const double bot = r1[b.i0] + (r1[b.i1] - r1[b.i0]) * b.frac;
        out[(static_cast<std::size_t>(c) * out_h + oy) * out_w + ox] = top + (bot - top) * a.frac;
      }
    }
  }
  return Tensor({3, static_cast<std::size_t>(out_h), static_cast<std::size_t>(out_w)}, std::move(out));
}

namespace {

unsigned char to_byte(double v) {
  return static_cast<unsigned char>(std::lround(std::clamp(v, 0.0, 1.0) * 255.0));
}

}  // namespace

std::string encode_ppm(const Image& image) {
  std::string header = "P6\n" + std::to_string(image.width()) + " " + std::to_string(image.height()) + "\n255\n";
  std::string out = header;
  out.reserve(header.size() + static_cast<std::size_t>(3) * image.width() * image.height());
  for (int y = 0; y < image.height(); ++y)
    for (int x = 0; x < image.width(); ++x)
      for (int c = 0; c < 3; ++c) out.push_back(static_cast<char>(to_byte(image.at(c, y, x))));
  return out;
}

Image decode_ppm(const std::string& bytes) {
  std::istringstream in(bytes);
  std::string magic;
  int w = 0, h = 0, maxval = 0;
  in >> magic;
  auto skip_comments = [&] {
    in >> std::ws;
    while (in.peek() == '#') {
      std::string line;
      std::getline(in, line);
      in >> std::ws;
    }
  };
  skip_comments();
  in >> w;
  skip_comments();
  in >> h;
  skip_comments();
  in >> maxval;
  if (magic != "P6" || !in || w < 1 || h < 1 || maxval != 255)
    throw ParseError("not an 8-bit binary PPM (P6, maxval 255)");
  in.get();  // single whitespace before raster
  const std::size_t offset = static_cast<std::size_t>(in.tellg());
  const std::size_t need = static_cast<std::size_t>(3) * w * h;
  if (bytes.size() < offset + need) throw ParseError("truncated PPM raster");
  Image img(w, h);
  const auto* raster = reinterpret_cast<const unsigned char*>(bytes.data() + offset);
  for (int y = 0; y < h; ++y)
    for (int x = 0; x < w; ++x)
      for (int c = 0; c < 3; ++c)
        img.at(c, y, x) = raster[(static_cast<std::size_t>(y) * w + x) * 3 + c] / 255.0;
  return img;
}

void write_ppm(const std::filesystem::path& path, const Image& image) {
  std::ofstream out(path, std::ios::binary);
  if (!out) throw IoError("cannot open " + path.string() + " for writing");
  const std::string bytes = encode_ppm(image);
  out.write(bytes.data(), static_cast<std::streamsize>(bytes.size()));
  if (!out) throw IoError("failed writing " + path.string());
}

Image read_ppm(const std::filesystem::path& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw IoError("cannot open " + path.string());
  std::ostringstream buf;
  buf << in.rdbuf();
  return decode_ppm(buf.str());
}

Image quantize8(const Image& image) {
  Image out = image;
  for (double& v : out.data()) v = to_byte(v) / 255.0;
  return out;
}

}  // namespace crtnet
