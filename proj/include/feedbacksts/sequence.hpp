#pragma once

#include <cstdint>
#include <filesystem>
#include <random>
#include <string>
#include <vector>

#include <torch/torch.h>

#include "feedbacksts/plane.hpp"

namespace fsts {

/// Ordered stack of grayscale frames in [0,1] with optional binary masks.
struct FrameSequence {
  std::string name;
  std::vector<FloatPlane> frames;
  std::vector<MaskPlane> masks;  // empty when unannotated

  int frame_count() const { return static_cast<int>(frames.size()); }
  bool has_masks() const { return !masks.empty(); }
  int height() const { return frames.empty() ? 0 : frames.front().height; }
  int width() const { return frames.empty() ? 0 : frames.front().width; }

  /// Throws ValidationError if any structural invariant is broken.
  void validate() const;
};

enum class PaddingPolicy { None, ReflectTail };

/// Fixed-length view into a sequence. Positions past `real_frames` are
/// reflect-padded copies and must not contribute to losses or metrics.
struct SlidingWindow {
  const FrameSequence* sequence = nullptr;
  int start = 0;
  int length = 0;
  int real_frames = 0;
  PaddingPolicy padding = PaddingPolicy::None;

  bool padded() const { return padding != PaddingPolicy::None; }
  /// Source frame index for window position `pos`.
  int source_index(int pos) const;
};

/// Non-overlapping windows of length `length` tiling `seq`; the tail remainder
/// (if any) becomes one reflect-padded window.
std::vector<SlidingWindow> split_windows(const FrameSequence& seq, int length);

enum class SpatialOp { HFlip, VFlip, Transpose };

struct WindowData {
  std::vector<FloatPlane> frames;
  std::vector<MaskPlane> masks;
  std::vector<uint8_t> valid;  // 1 for real frames, 0 for padding
};

/// Copies the frames (and masks) a window refers to, resolving padding.
WindowData materialize_window(const SlidingWindow& window);

/// Applies `ops` in order to every frame and mask of the window.
void augment(WindowData& window, const std::vector<SpatialOp>& ops);

enum class PrepareMode { CropThenResize, ResizeOnly };

/// Brings a window to `out_size` x `out_size`. Crop offsets come from `rng`.
WindowData prepare_input(const WindowData& window, PrepareMode mode, int out_size, std::mt19937_64& rng);

struct WindowTensors {
  torch::Tensor frames;  // [1, D, H, W] float
  torch::Tensor masks;   // [1, D, H, W] float in {0,1}; undefined without masks
  torch::Tensor valid;   // [D] float in {0,1}
};

WindowTensors to_tensors(const WindowData& window);

/// Bilinear resize for frames, nearest-neighbour for masks.
FloatPlane resize_bilinear(const FloatPlane& src, int height, int width);
MaskPlane resize_nearest(const MaskPlane& src, int height, int width);

PrepareMode parse_prepare_mode(const std::string& s);
std::string to_string(PrepareMode mode);

}  // namespace fsts
