#pragma once

// Float image and depth-map containers shared by the renderer, the
// autoencoder, metrics, and file I/O. Images are channel-major [C,H,W]
// with values in [0,1].

#include <cstdint>
#include <stdexcept>
#include <vector>

namespace lsnerf {

struct Image {
  int width = 0, height = 0, channels = 0;
  std::vector<float> data;  // [C,H,W]

  Image() = default;
  Image(int w, int h, int c) : width(w), height(h), channels(c),
                               data(static_cast<size_t>(w) * h * c, 0.f) {}

  float& at(int ch, int row, int col) {
    return data[(static_cast<size_t>(ch) * height + row) * width + col];
  }
  float at(int ch, int row, int col) const {
    return data[(static_cast<size_t>(ch) * height + row) * width + col];
  }
  bool same_size(const Image& o) const {
    return width == o.width && height == o.height && channels == o.channels;
  }
};

struct DepthMap {
  int width = 0, height = 0;
  std::vector<float> depth;    // expected termination distance along the ray
  std::vector<uint8_t> valid;  // 1 where accumulated opacity passed the mask threshold

  DepthMap() = default;
  DepthMap(int w, int h) : width(w), height(h),
                           depth(static_cast<size_t>(w) * h, 0.f),
                           valid(static_cast<size_t>(w) * h, 0) {}

  float& at(int row, int col) { return depth[static_cast<size_t>(row) * width + col]; }
  float at(int row, int col) const { return depth[static_cast<size_t>(row) * width + col]; }
  bool is_valid(int row, int col) const { return valid[static_cast<size_t>(row) * width + col] != 0; }
};

// Rendered latent feature map at 1/8 of the target RGB resolution.
struct LatentImage {
  int width = 0, height = 0, channels = 0;
  std::vector<float> values;  // [C,H,W], same layout as Image

  LatentImage() = default;
  LatentImage(int w, int h, int c) : width(w), height(h), channels(c),
                                     values(static_cast<size_t>(w) * h * c, 0.f) {}

  float& at(int ch, int row, int col) {
    return values[(static_cast<size_t>(ch) * height + row) * width + col];
  }
  float at(int ch, int row, int col) const {
    return values[(static_cast<size_t>(ch) * height + row) * width + col];
  }
};

}  // namespace lsnerf
