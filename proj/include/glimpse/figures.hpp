#pragma once
// Figure rendering for episode dumps: input composites, predictions, entropy
// grids, and anchor overlays. Everything lands as portable pixmap/graymap so
// tests can audit emitted bytes exactly.

#include <cmath>
#include <string>
#include <vector>

#include "glimpse/data.hpp"
#include "glimpse/model.hpp"
#include "glimpse/policy.hpp"

namespace glimpse {

// Any-channel image to a 3-channel view (grayscale replicates).
inline Image to_rgb(const Image& img) {
  if (img.channels == 3) return img;
  if (img.channels != 1)
    throw ContractError("to_rgb: expected 1 or 3 channels, got " + std::to_string(img.channels));
  Image out(3, img.height, img.width);
  for (int c = 0; c < 3; ++c)
    for (int y = 0; y < img.height; ++y)
      for (int x = 0; x < img.width; ++x) out.at(c, y, x) = img.at(0, y, x);
  return out;
}

// Per-patch prediction rows back to an image (reconstruction-shaped heads).
inline Image prediction_image(const std::vector<float>& pred_patches, const ModelConfig& cfg) {
  if (cfg.head_out_dim() != cfg.patch_dim())
    throw ContractError("prediction_image: head does not predict pixels");
  const std::size_t want =
      static_cast<std::size_t>(cfg.num_patches()) * static_cast<std::size_t>(cfg.patch_dim());
  if (pred_patches.size() != want)
    throw ShapeError("prediction_image: " + std::to_string(pred_patches.size()) +
                     " values for " + std::to_string(want));
  Tensor<double> rows({static_cast<std::size_t>(cfg.num_patches()),
                       static_cast<std::size_t>(cfg.patch_dim())});
  for (std::size_t i = 0; i < pred_patches.size(); ++i)
    rows.at(i) = static_cast<double>(pred_patches[i]);
  return unpatchify(rows, cfg.image_h, cfg.image_w, cfg.patch, cfg.channels);
}

// Segmentation logits to the argmax class grid (height*width ints).
inline std::vector<int> class_grid(const std::vector<float>& pred_patches,
                                   const ModelConfig& cfg) {
  if (cfg.task != Task::segmentation)
    throw ContractError("class_grid: model does not segment");
  const std::size_t want =
      static_cast<std::size_t>(cfg.num_patches()) * static_cast<std::size_t>(cfg.head_out_dim());
  if (pred_patches.size() != want)
    throw ShapeError("class_grid: " + std::to_string(pred_patches.size()) + " values for " +
                     std::to_string(want));
  const int P = cfg.patch, gw = cfg.grid_w(), C = cfg.seg_classes;
  std::vector<int> grid(static_cast<std::size_t>(cfg.image_h) * cfg.image_w);
  for (int y = 0; y < cfg.image_h; ++y)
    for (int x = 0; x < cfg.image_w; ++x) {
      const std::size_t patch_i = static_cast<std::size_t>(y / P) * gw + (x / P);
      const std::size_t base = static_cast<std::size_t>(y % P) * P + (x % P);
      const std::size_t row = patch_i * static_cast<std::size_t>(cfg.head_out_dim());
      float mx = pred_patches[row + base];
      int arg = 0;
      for (int c = 1; c < C; ++c) {
        const float v = pred_patches[row + static_cast<std::size_t>(c) * P * P + base];
        if (v > mx) {
          mx = v;
          arg = c;
        }
      }
      grid[static_cast<std::size_t>(y) * cfg.image_w + x] = arg;
    }
  return grid;
}

// Class ids spread over the full gray range for a viewable PGM.
inline std::vector<unsigned char> class_grid_bytes(const std::vector<int>& grid, int classes) {
  if (classes < 2) throw ContractError("class_grid_bytes: need at least two classes");
  std::vector<unsigned char> bytes(grid.size());
  for (std::size_t i = 0; i < grid.size(); ++i)
    bytes[i] = static_cast<unsigned char>(grid[i] * 255 / (classes - 1));
  return bytes;
}

// Entropy grid normalized to bytes; exact zeros stay exactly zero, so known
// patches are auditable in the emitted file.
inline std::vector<unsigned char> entropy_bytes(const std::vector<double>& values) {
  double mx = 0;
  for (double v : values) mx = std::max(mx, v);
  std::vector<unsigned char> bytes(values.size(), 0);
  if (mx > 0) {
    for (std::size_t i = 0; i < values.size(); ++i)
      bytes[i] = static_cast<unsigned char>(std::lround(values[i] / mx * 255.0));
  }
  return bytes;
}

// Copy of the composite with a red frame around the chosen glimpse.
inline Image anchor_overlay(const Image& composite, int anchor, const GlimpseSpec& spec,
                            int patch, int grid_w) {
  Image out = to_rgb(composite);
  const int side = spec.glimpse_px;
  const int ay = (anchor / grid_w) * patch, ax = (anchor % grid_w) * patch;
  if (ay + side > out.height || ax + side > out.width)
    throw ContractError("anchor_overlay: glimpse leaves the image");
  auto paint = [&](int y, int x) {
    out.at(0, y, x) = 1.f;
    out.at(1, y, x) = 0.f;
    out.at(2, y, x) = 0.f;
  };
  for (int d = 0; d < side; ++d) {
    paint(ay, ax + d);
    paint(ay + side - 1, ax + d);
    paint(ay + d, ax);
    paint(ay + d, ax + side - 1);
  }
  return out;
}

}  // namespace glimpse
