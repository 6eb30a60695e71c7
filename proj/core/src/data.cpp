#include "vqnerv/data.hpp"

#include <algorithm>
#include <cctype>
#include <cmath>
#include <fstream>
#include <map>
#include <numbers>

#include <png.h>

#include "vqnerv/errors.hpp"
#include "vqnerv/rng.hpp"

namespace vqnerv {

namespace fs = std::filesystem;

Tensor center_crop(const Tensor& frame, int height, int width) {
  require_rank(frame, 3, "center_crop");
  const int c = frame.dim(0), h = frame.dim(1), w = frame.dim(2);
  if (height <= 0 || width <= 0 || height > h || width > w)
    throw ParameterError("center_crop: " + std::to_string(height) + "x" + std::to_string(width) +
                         " does not fit " + shape_str(frame.shape()));
  const int top = (h - height) / 2, left = (w - width) / 2;
  Tensor out({c, height, width});
  for (int ch = 0; ch < c; ++ch)
    for (int i = 0; i < height; ++i)
      for (int j = 0; j < width; ++j) out.at(ch, i, j) = frame.at(ch, top + i, left + j);
  return out;
}

Tensor read_png(const fs::path& path) {
  png_image image{};
  image.version = PNG_IMAGE_VERSION;
  if (!png_image_begin_read_from_file(&image, path.c_str()))
    throw DataError("cannot read " + path.string() + ": " + image.message);
  image.format = PNG_FORMAT_RGB;
  std::vector<png_byte> buffer(PNG_IMAGE_SIZE(image));
  if (!png_image_finish_read(&image, nullptr, buffer.data(), 0, nullptr)) {
    png_image_free(&image);
    throw DataError("cannot decode " + path.string() + ": " + image.message);
  }
  const int h = static_cast<int>(image.height), w = static_cast<int>(image.width);
  Tensor out({3, h, w});
  for (int i = 0; i < h; ++i)
    for (int j = 0; j < w; ++j)
      for (int ch = 0; ch < 3; ++ch)
        out.at(ch, i, j) = buffer[(static_cast<std::size_t>(i) * w + j) * 3 + ch] / 255.0f;
  return out;
}

void write_png(const fs::path& path, const Tensor& frame) {
  require_rank(frame, 3, "write_png");
  if (frame.dim(0) != 3) throw DimensionError("write_png: expected 3 channels");
  const int h = frame.dim(1), w = frame.dim(2);
  std::vector<png_byte> buffer(static_cast<std::size_t>(h) * w * 3);
  for (int i = 0; i < h; ++i)
    for (int j = 0; j < w; ++j)
      for (int ch = 0; ch < 3; ++ch) {
        const float v = std::clamp(frame.at(ch, i, j), 0.0f, 1.0f);
        buffer[(static_cast<std::size_t>(i) * w + j) * 3 + ch] =
            static_cast<png_byte>(std::lround(v * 255.0f));
      }
  png_image image{};
  image.version = PNG_IMAGE_VERSION;
  image.width = static_cast<png_uint_32>(w);
  image.height = static_cast<png_uint_32>(h);
  image.format = PNG_FORMAT_RGB;
  if (!png_image_write_to_file(&image, path.c_str(), 0, buffer.data(), 0, nullptr))
    throw DataError("cannot write " + path.string() + ": " + image.message);
}

namespace {

Tensor read_raw(const fs::path& path, RawFormat raw) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw DataError("cannot open " + path.string());
  const std::size_t n = static_cast<std::size_t>(raw.height) * raw.width * 3;
  std::vector<unsigned char> bytes(n);
  in.read(reinterpret_cast<char*>(bytes.data()), static_cast<std::streamsize>(n));
  if (static_cast<std::size_t>(in.gcount()) != n || in.peek() != std::char_traits<char>::eof())
    throw DataError(path.string() + " is not " + std::to_string(raw.height) + "x" +
                    std::to_string(raw.width) + " planar RGB");
  Tensor out({3, raw.height, raw.width});
  for (std::size_t i = 0; i < n; ++i) out[i] = bytes[i] / 255.0f;
  return out;
}

// Trailing integer of the file stem, e.g. "frame_0012" -> 12.
std::optional<long> frame_number(const fs::path& p) {
  const std::string stem = p.stem().string();
  std::size_t end = stem.size(), begin = end;
  while (begin > 0 && std::isdigit(static_cast<unsigned char>(stem[begin - 1]))) --begin;
  if (begin == end) return std::nullopt;
  return std::stol(stem.substr(begin, end - begin));
}

}  // namespace

VideoDataset load_frames(const fs::path& dir, Crop crop, std::optional<RawFormat> raw) {
  if (!fs::is_directory(dir)) throw DataError("not a directory: " + dir.string());
  const std::string ext = raw ? ".rgb" : ".png";
  std::map<long, fs::path> numbered;
  for (const auto& entry : fs::directory_iterator(dir)) {
    if (!entry.is_regular_file() || entry.path().extension() != ext) continue;
    auto idx = frame_number(entry.path());
    if (!idx) throw DataError("frame file without index: " + entry.path().string());
    if (!numbered.emplace(*idx, entry.path()).second)
      throw DataError("duplicate frame index " + std::to_string(*idx) + " in " + dir.string());
  }
  if (numbered.empty()) throw DataError("no " + ext + " frames in " + dir.string());

  VideoDataset ds;
  long expected = numbered.begin()->first;
  for (const auto& [idx, path] : numbered) {
    if (idx != expected)
      throw DataError("missing frame index " + std::to_string(expected) + " (next is " +
                      path.filename().string() + ")");
    ++expected;
    Tensor frame = raw ? read_raw(path, *raw) : read_png(path);
    if (ds.frames.empty()) {
      ds.height = frame.dim(1);
      ds.width = frame.dim(2);
    } else if (frame.dim(1) != ds.height || frame.dim(2) != ds.width) {
      throw DataError(path.string() + " is " + std::to_string(frame.dim(1)) + "x" +
                      std::to_string(frame.dim(2)) + ", expected " + std::to_string(ds.height) +
                      "x" + std::to_string(ds.width));
    }
    ds.frames.push_back(std::move(frame));
    ds.files.push_back(path);
  }
  if (crop.height > 0 && crop.width > 0) {
    if (crop.height > ds.height || crop.width > ds.width)
      throw DataError("crop " + std::to_string(crop.height) + "x" + std::to_string(crop.width) +
                      " exceeds frames of " + std::to_string(ds.height) + "x" +
                      std::to_string(ds.width));
    for (Tensor& f : ds.frames) f = center_crop(f, crop.height, crop.width);
    ds.height = crop.height;
    ds.width = crop.width;
  }
  return ds;
}

std::vector<Tensor> synthetic_video(int frames, int height, int width, std::uint64_t seed) {
  if (frames < 0 || height <= 0 || width <= 0) throw ParameterError("synthetic_video: bad size");
  Rng rng(seed);
  constexpr double two_pi = 2.0 * std::numbers::pi;
  struct Wave {
    double fx, fy, ft, phase, amp;
  };
  struct Blob {
    double x, y, vx, vy, radius;
    double color[3];
  };
  std::vector<Wave> waves[3];
  for (auto& channel : waves)
    for (int k = 0; k < 4; ++k) {
      const double scale = 1.0 + k;
      channel.push_back({rng.uniform(-2.0f, 2.0f) * scale, rng.uniform(-1.5f, 1.5f) * scale,
                         rng.uniform(-0.1f, 0.1f), rng.uniform(0.0f, 6.28f),
                         rng.uniform(0.05f, 0.1f) / std::sqrt(scale)});
    }
  std::vector<Blob> blobs(6);
  for (Blob& b : blobs) {
    b.x = rng.uniform(0.1f, 0.9f) * width;
    b.y = rng.uniform(0.1f, 0.9f) * height;
    b.vx = rng.uniform(-2.5f, 2.5f);
    b.vy = rng.uniform(-1.5f, 1.5f);
    b.radius = rng.uniform(0.05f, 0.14f) * height;
    for (double& c : b.color) c = rng.uniform(-0.35f, 0.35f);
  }
  // Band-limited texture translating with a global pan.
  std::vector<Wave> texture;
  for (int k = 0; k < 24; ++k)
    texture.push_back({rng.uniform(-12.0f, 12.0f), rng.uniform(-6.0f, 6.0f), 0.0,
                       rng.uniform(0.0f, 6.28f), rng.uniform(0.01f, 0.035f)});
  const double pan_x = rng.uniform(-0.02f, 0.02f), pan_y = rng.uniform(-0.02f, 0.02f);
  double tint[3];
  for (double& c : tint) c = rng.uniform(0.5f, 1.0f);
  std::vector<Tensor> video;
  for (int t = 0; t < frames; ++t) {
    Tensor f({3, height, width});
    for (int i = 0; i < height; ++i)
      for (int j = 0; j < width; ++j) {
        const double u = static_cast<double>(j) / width, v = static_cast<double>(i) / height;
        double tex = 0.0;
        for (const Wave& w : texture)
          tex += w.amp * std::sin(two_pi * (w.fx * (u + pan_x * t) + w.fy * (v + pan_y * t)) + w.phase);
        for (int ch = 0; ch < 3; ++ch) {
          double val = 0.5 + tint[ch] * tex;
          for (const Wave& w : waves[ch])
            val += w.amp * std::sin(two_pi * (w.fx * u + w.fy * v + w.ft * t) + w.phase);
          for (const Blob& b : blobs) {
            const double dx = j - (b.x + b.vx * t), dy = i - (b.y + b.vy * t);
            val += b.color[ch] * std::exp(-(dx * dx + dy * dy) / (2.0 * b.radius * b.radius));
          }
          f.at(ch, i, j) = static_cast<float>(std::clamp(val, 0.0, 1.0));
        }
      }
    video.push_back(std::move(f));
  }
  return video;
}

std::vector<Tensor> static_video(int frames, int height, int width, std::uint64_t seed) {
  std::vector<Tensor> one = synthetic_video(1, height, width, seed);
  return std::vector<Tensor>(static_cast<std::size_t>(frames), one.front());
}

Tensor make_box_mask(int height, int width, int boxes, int box_width, std::uint64_t seed) {
  if (boxes < 0) throw ParameterError("box count must be >= 0");
  if (box_width < 1 || box_width > std::min(height, width))
    throw ParameterError("box width " + std::to_string(box_width) + " does not fit " +
                         std::to_string(height) + "x" + std::to_string(width));
  Rng rng(seed);
  Tensor mask({height, width});
  for (int b = 0; b < boxes; ++b) {
    const int top = rng.index(height - box_width + 1);
    const int left = rng.index(width - box_width + 1);
    for (int i = top; i < top + box_width; ++i)
      for (int j = left; j < left + box_width; ++j)
        mask[static_cast<std::size_t>(i) * width + j] = 1.0f;
  }
  return mask;
}

int scaled_box_width(int width, int reference_width, int reference_box) {
  const long scaled = std::lround(static_cast<double>(reference_box) * width / reference_width);
  return std::max(1, static_cast<int>(scaled));
}

Tensor make_disperse_mask(int height, int width, float fraction, std::uint64_t seed) {
  if (fraction < 0.0f || fraction > 1.0f) throw ParameterError("dropout fraction outside [0,1]");
  Rng rng(seed);
  Tensor mask({height, width});
  for (float& m : mask.data()) m = rng.uniform() < fraction ? 1.0f : 0.0f;
  return mask;
}

Tensor apply_mask(const Tensor& frame, const Tensor& mask) {
  require_rank(frame, 3, "apply_mask");
  require_rank(mask, 2, "apply_mask mask");
  if (mask.dim(0) != frame.dim(1) || mask.dim(1) != frame.dim(2))
    throw DimensionError("mask " + shape_str(mask.shape()) + " does not match frame " +
                         shape_str(frame.shape()));
  Tensor out = frame;
  const std::size_t plane = mask.size();
  for (int c = 0; c < frame.dim(0); ++c)
    for (std::size_t i = 0; i < plane; ++i)
      if (mask[i] > 0.5f) out[c * plane + i] = 0.0f;
  return out;
}

Split even_odd_split(int frames) {
  Split s;
  for (int i = 0; i < frames; ++i) (i % 2 ? s.test : s.train).push_back(i);
  return s;
}

Split all_split(int frames) {
  Split s;
  for (int i = 0; i < frames; ++i) s.train.push_back(i);
  return s;
}

}  // namespace vqnerv
