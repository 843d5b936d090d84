#include "feedbacksts/sequence.hpp"

#include <algorithm>
#include <cmath>

#include "feedbacksts/error.hpp"

namespace fsts {

void FrameSequence::validate() const {
  if (frames.empty()) throw ValidationError("sequence '" + name + "' has no frames");
  const auto& first = frames.front();
  for (const auto& f : frames) {
    if (!f.same_shape(first)) throw ValidationError("sequence '" + name + "' mixes frame sizes");
    for (float v : f.data) {
      if (!(v >= 0.0f && v <= 1.0f)) throw ValidationError("sequence '" + name + "' has pixel outside [0,1]");
    }
  }
  if (!masks.empty()) {
    if (masks.size() != frames.size()) {
      throw ValidationError("sequence '" + name + "': count mismatch (" + std::to_string(frames.size()) +
                            " frames, " + std::to_string(masks.size()) + " masks)");
    }
    for (const auto& m : masks) {
      if (!m.same_shape(first)) throw ValidationError("sequence '" + name + "': mask size differs from frame size");
      for (uint8_t v : m.data) {
        if (v > 1) throw ValidationError("sequence '" + name + "': mask pixel not in {0,1}");
      }
    }
  }
}

int SlidingWindow::source_index(int pos) const {
  const int n = sequence->frame_count();
  int idx = start + pos;
  if (idx < n) return idx;
  if (n == 1) return 0;
  // Mirror about the last frame, repeating periodically for very short sequences.
  const int period = 2 * (n - 1);
  int k = idx % period;
  return k < n ? k : period - k;
}

std::vector<SlidingWindow> split_windows(const FrameSequence& seq, int length) {
  if (length <= 0) throw ValidationError("window length must be >= 1, got " + std::to_string(length));
  std::vector<SlidingWindow> out;
  const int n = seq.frame_count();
  for (int start = 0; start < n; start += length) {
    SlidingWindow w;
    w.sequence = &seq;
    w.start = start;
    w.length = length;
    w.real_frames = std::min(length, n - start);
    w.padding = w.real_frames < length ? PaddingPolicy::ReflectTail : PaddingPolicy::None;
    out.push_back(w);
  }
  return out;
}

WindowData materialize_window(const SlidingWindow& window) {
  WindowData out;
  const FrameSequence& seq = *window.sequence;
  out.frames.reserve(window.length);
  for (int p = 0; p < window.length; ++p) {
    const int src = window.source_index(p);
    out.frames.push_back(seq.frames[src]);
    if (seq.has_masks()) out.masks.push_back(seq.masks[src]);
    out.valid.push_back(p < window.real_frames ? 1 : 0);
  }
  return out;
}

namespace {

template <typename T>
Plane<T> apply_op(const Plane<T>& src, SpatialOp op) {
  switch (op) {
    case SpatialOp::HFlip: {
      Plane<T> dst(src.height, src.width);
      for (int y = 0; y < src.height; ++y)
        for (int x = 0; x < src.width; ++x) dst.at(y, x) = src.at(y, src.width - 1 - x);
      return dst;
    }
    case SpatialOp::VFlip: {
      Plane<T> dst(src.height, src.width);
      for (int y = 0; y < src.height; ++y)
        for (int x = 0; x < src.width; ++x) dst.at(y, x) = src.at(src.height - 1 - y, x);
      return dst;
    }
    case SpatialOp::Transpose: {
      Plane<T> dst(src.width, src.height);
      for (int y = 0; y < src.height; ++y)
        for (int x = 0; x < src.width; ++x) dst.at(x, y) = src.at(y, x);
      return dst;
    }
  }
  return src;
}

}  // namespace

void augment(WindowData& window, const std::vector<SpatialOp>& ops) {
  for (SpatialOp op : ops) {
    for (auto& f : window.frames) f = apply_op(f, op);
    for (auto& m : window.masks) m = apply_op(m, op);
  }
}

FloatPlane resize_bilinear(const FloatPlane& src, int height, int width) {
  if (src.height == height && src.width == width) return src;
  FloatPlane dst(height, width);
  const double sy = static_cast<double>(src.height) / height;
  const double sx = static_cast<double>(src.width) / width;
  for (int y = 0; y < height; ++y) {
    double fy = std::clamp((y + 0.5) * sy - 0.5, 0.0, static_cast<double>(src.height - 1));
    int y0 = static_cast<int>(std::floor(fy));
    int y1 = std::min(y0 + 1, src.height - 1);
    double wy = fy - y0;
    for (int x = 0; x < width; ++x) {
      double fx = std::clamp((x + 0.5) * sx - 0.5, 0.0, static_cast<double>(src.width - 1));
      int x0 = static_cast<int>(std::floor(fx));
      int x1 = std::min(x0 + 1, src.width - 1);
      double wx = fx - x0;
      double v = (1 - wy) * ((1 - wx) * src.at(y0, x0) + wx * src.at(y0, x1)) +
                 wy * ((1 - wx) * src.at(y1, x0) + wx * src.at(y1, x1));
      dst.at(y, x) = static_cast<float>(std::clamp(v, 0.0, 1.0));
    }
  }
  return dst;
}

MaskPlane resize_nearest(const MaskPlane& src, int height, int width) {
  if (src.height == height && src.width == width) return src;
  MaskPlane dst(height, width);
  for (int y = 0; y < height; ++y) {
    // floor(y * src / dst): integer upscaling replicates each pixel exactly.
    int sy = static_cast<int>((static_cast<int64_t>(y) * src.height) / height);
    for (int x = 0; x < width; ++x) {
      int sx = static_cast<int>((static_cast<int64_t>(x) * src.width) / width);
      dst.at(y, x) = src.at(sy, sx);
    }
  }
  return dst;
}

namespace {

constexpr int kCropAttempts = 20;

bool crop_has_target(const WindowData& w, int oy, int ox, int size) {
  for (const auto& m : w.masks)
    for (int y = oy; y < oy + size; ++y)
      for (int x = ox; x < ox + size; ++x)
        if (m.at(y, x)) return true;
  return false;
}

template <typename T>
Plane<T> crop(const Plane<T>& src, int oy, int ox, int size) {
  Plane<T> dst(size, size);
  for (int y = 0; y < size; ++y)
    for (int x = 0; x < size; ++x) dst.at(y, x) = src.at(oy + y, ox + x);
  return dst;
}

}  // namespace

WindowData prepare_input(const WindowData& window, PrepareMode mode, int out_size, std::mt19937_64& rng) {
  if (window.frames.empty()) throw ValidationError("prepare_input: empty window");
  if (out_size <= 0) throw ValidationError("prepare_input: out_size must be positive");
  const int h = window.frames.front().height;
  const int w = window.frames.front().width;
  WindowData out;
  out.valid = window.valid;

  if (mode == PrepareMode::CropThenResize) {
    if (h < out_size || w < out_size) {
      throw ValidationError("crop of " + std::to_string(out_size) + "x" + std::to_string(out_size) +
                            " requested on " + std::to_string(h) + "x" + std::to_string(w) + " frames");
    }
    std::uniform_int_distribution<int> dy(0, h - out_size);
    std::uniform_int_distribution<int> dx(0, w - out_size);
    int oy = 0, ox = 0;
    for (int attempt = 0; attempt < kCropAttempts; ++attempt) {
      oy = dy(rng);
      ox = dx(rng);
      if (window.masks.empty() || crop_has_target(window, oy, ox, out_size)) break;
    }
    for (const auto& f : window.frames) out.frames.push_back(crop(f, oy, ox, out_size));
    for (const auto& m : window.masks) out.masks.push_back(crop(m, oy, ox, out_size));
    return out;
  }

  for (const auto& f : window.frames) out.frames.push_back(resize_bilinear(f, out_size, out_size));
  for (const auto& m : window.masks) out.masks.push_back(resize_nearest(m, out_size, out_size));
  return out;
}

WindowTensors to_tensors(const WindowData& window) {
  const int d = static_cast<int>(window.frames.size());
  const int h = window.frames.front().height;
  const int w = window.frames.front().width;
  WindowTensors t;
  t.frames = torch::empty({1, d, h, w}, torch::kFloat32);
  auto fa = t.frames.accessor<float, 4>();
  for (int i = 0; i < d; ++i)
    for (int y = 0; y < h; ++y)
      for (int x = 0; x < w; ++x) fa[0][i][y][x] = window.frames[i].at(y, x);
  if (!window.masks.empty()) {
    t.masks = torch::empty({1, d, h, w}, torch::kFloat32);
    auto ma = t.masks.accessor<float, 4>();
    for (int i = 0; i < d; ++i)
      for (int y = 0; y < h; ++y)
        for (int x = 0; x < w; ++x) ma[0][i][y][x] = window.masks[i].at(y, x) ? 1.0f : 0.0f;
  }
  t.valid = torch::empty({d}, torch::kFloat32);
  for (int i = 0; i < d; ++i) t.valid[i] = static_cast<float>(window.valid[i]);
  return t;
}

PrepareMode parse_prepare_mode(const std::string& s) {
  if (s == "crop_then_resize") return PrepareMode::CropThenResize;
  if (s == "resize_only") return PrepareMode::ResizeOnly;
  throw ValidationError("unknown prepare mode '" + s + "' (expected crop_then_resize or resize_only)");
}

std::string to_string(PrepareMode mode) {
  return mode == PrepareMode::CropThenResize ? "crop_then_resize" : "resize_only";
}

}  // namespace fsts
