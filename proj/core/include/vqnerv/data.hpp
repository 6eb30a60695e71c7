#pragma once

#include <cstdint>
#include <filesystem>
#include <optional>
#include <string>
#include <vector>

#include "vqnerv/tensor.hpp"

namespace vqnerv {

struct Crop {
  int height = 0;
  int width = 0;  // 0 x 0 keeps the full frame
};

struct RawFormat {
  int height = 0;
  int width = 0;  // planar 8-bit RGB, R plane then G then B
};

struct VideoDataset {
  std::vector<Tensor> frames;  // [3,H,W] in [0,1]
  std::vector<std::filesystem::path> files;
  int height = 0;
  int width = 0;

  std::size_t size() const { return frames.size(); }
};

// Reads numbered PNG (or .rgb raw planar) frames in numeric filename order.
// Throws DataError on gaps, mixed dimensions or unreadable files.
VideoDataset load_frames(const std::filesystem::path& dir, Crop crop = {},
                         std::optional<RawFormat> raw = std::nullopt);

// Center window of a [C,H,W] tensor.
Tensor center_crop(const Tensor& frame, int height, int width);

Tensor read_png(const std::filesystem::path& path);
void write_png(const std::filesystem::path& path, const Tensor& frame);

// Smooth drifting gradients with soft moving blobs; deterministic in seed.
std::vector<Tensor> synthetic_video(int frames, int height, int width, std::uint64_t seed);
std::vector<Tensor> static_video(int frames, int height, int width, std::uint64_t seed);

// [H,W] mask, 1 = distorted. Boxes are square and may overlap.
Tensor make_box_mask(int height, int width, int boxes, int box_width, std::uint64_t seed);
// Box width used at desk scale: 50 px per 1920 columns, at least 1.
int scaled_box_width(int width, int reference_width = 1920, int reference_box = 50);
// Seeded pixel dropout marking `fraction` of pixels.
Tensor make_disperse_mask(int height, int width, float fraction, std::uint64_t seed);
// Frame with masked pixels zeroed.
Tensor apply_mask(const Tensor& frame, const Tensor& mask);

struct Split {
  std::vector<int> train;
  std::vector<int> test;
};
Split even_odd_split(int frames);
Split all_split(int frames);

}  // namespace vqnerv
