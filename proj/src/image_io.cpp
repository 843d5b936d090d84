#include "feedbacksts/image_io.hpp"

#include <algorithm>
#include <cstdio>

#include <opencv2/imgcodecs.hpp>

#include "feedbacksts/error.hpp"

namespace fsts {

Split parse_split(const std::string& s) {
  if (s == "train") return Split::Train;
  if (s == "test") return Split::Test;
  throw ValidationError("unknown split '" + s + "' (expected train or test)");
}

namespace {

cv::Mat read_raw(const fs::path& path) {
  cv::Mat m = cv::imread(path.string(), cv::IMREAD_ANYDEPTH | cv::IMREAD_GRAYSCALE);
  if (m.empty()) throw RuntimeFailure("cannot read image " + path.string());
  if (m.depth() != CV_8U && m.depth() != CV_16U)
    throw RuntimeFailure("unsupported bit depth in " + path.string() + " (need 8 or 16 bit)");
  return m;
}

double full_scale(const cv::Mat& m) { return m.depth() == CV_16U ? 65535.0 : 255.0; }

template <typename Pix, typename Fn>
void for_each_pixel(const cv::Mat& m, Fn&& fn) {
  for (int y = 0; y < m.rows; ++y) {
    const Pix* row = m.ptr<Pix>(y);
    for (int x = 0; x < m.cols; ++x) fn(y, x, static_cast<double>(row[x]));
  }
}

void ensure_parent(const fs::path& path) {
  if (path.has_parent_path()) fs::create_directories(path.parent_path());
}

}  // namespace

FloatPlane read_gray(const fs::path& path) {
  cv::Mat m = read_raw(path);
  FloatPlane out(m.rows, m.cols);
  const double scale = full_scale(m);
  auto put = [&](int y, int x, double v) { out.at(y, x) = static_cast<float>(v / scale); };
  if (m.depth() == CV_16U) for_each_pixel<uint16_t>(m, put);
  else for_each_pixel<uint8_t>(m, put);
  return out;
}

MaskPlane read_mask(const fs::path& path) {
  cv::Mat m = read_raw(path);
  MaskPlane out(m.rows, m.cols);
  const double half = 0.5 * full_scale(m);
  auto put = [&](int y, int x, double v) { out.at(y, x) = v >= half ? 1 : 0; };
  if (m.depth() == CV_16U) for_each_pixel<uint16_t>(m, put);
  else for_each_pixel<uint8_t>(m, put);
  return out;
}

void write_gray16(const fs::path& path, const FloatPlane& img) {
  cv::Mat m(img.height, img.width, CV_16U);
  for (int y = 0; y < img.height; ++y) {
    auto* row = m.ptr<uint16_t>(y);
    for (int x = 0; x < img.width; ++x)
      row[x] = static_cast<uint16_t>(std::lround(std::clamp(img.at(y, x), 0.0f, 1.0f) * 65535.0f));
  }
  ensure_parent(path);
  if (!cv::imwrite(path.string(), m)) throw RuntimeFailure("cannot write image " + path.string());
}

void write_mask(const fs::path& path, const MaskPlane& mask) {
  cv::Mat m(mask.height, mask.width, CV_8U);
  for (int y = 0; y < mask.height; ++y) {
    auto* row = m.ptr<uint8_t>(y);
    for (int x = 0; x < mask.width; ++x) row[x] = mask.at(y, x) ? 255 : 0;
  }
  ensure_parent(path);
  if (!cv::imwrite(path.string(), m)) throw RuntimeFailure("cannot write mask " + path.string());
}

std::vector<fs::path> list_images(const fs::path& dir) {
  std::vector<fs::path> out;
  if (!fs::is_directory(dir)) return out;
  for (const auto& e : fs::directory_iterator(dir)) {
    if (!e.is_regular_file()) continue;
    std::string ext = e.path().extension().string();
    std::transform(ext.begin(), ext.end(), ext.begin(), [](unsigned char c) { return std::tolower(c); });
    if (ext == ".png" || ext == ".tif" || ext == ".tiff" || ext == ".bmp") out.push_back(e.path());
  }
  std::sort(out.begin(), out.end(), [](const fs::path& a, const fs::path& b) {
    return a.filename().string() < b.filename().string();
  });
  return out;
}

FrameSequence load_sequence(const fs::path& dir, bool require_masks) {
  FrameSequence seq;
  seq.name = dir.filename().string();
  const fs::path images = dir / "images";
  const fs::path masks = dir / "masks";
  if (!fs::is_directory(images)) throw ValidationError("sequence '" + seq.name + "' has no images folder");
  auto image_files = list_images(images);
  if (image_files.empty()) throw ValidationError("sequence '" + seq.name + "' has no image files");
  for (const auto& p : image_files) seq.frames.push_back(read_gray(p));

  if (fs::is_directory(masks)) {
    auto mask_files = list_images(masks);
    if (mask_files.size() != image_files.size()) {
      throw ValidationError("sequence '" + seq.name + "': count mismatch (" + std::to_string(image_files.size()) +
                            " images, " + std::to_string(mask_files.size()) + " masks)");
    }
    for (const auto& p : mask_files) seq.masks.push_back(read_mask(p));
  } else if (require_masks) {
    throw ValidationError("sequence '" + seq.name + "' has no masks folder (required for training)");
  }
  seq.validate();
  return seq;
}

std::vector<FrameSequence> load_dataset(const fs::path& root, Split split) {
  if (!fs::is_directory(root)) throw ValidationError("dataset root " + root.string() + " is not a directory");
  std::vector<fs::path> dirs;
  for (const auto& e : fs::directory_iterator(root))
    if (e.is_directory()) dirs.push_back(e.path());
  std::sort(dirs.begin(), dirs.end());
  std::vector<FrameSequence> out;
  for (const auto& d : dirs) out.push_back(load_sequence(d, split == Split::Train));
  return out;
}

std::string frame_filename(int index) {
  char buf[32];
  std::snprintf(buf, sizeof(buf), "%05d.png", index);
  return buf;
}

void write_sequence(const fs::path& dir, const FrameSequence& seq) {
  for (int i = 0; i < seq.frame_count(); ++i) {
    write_gray16(dir / "images" / frame_filename(i), seq.frames[i]);
    if (seq.has_masks()) write_mask(dir / "masks" / frame_filename(i), seq.masks[i]);
  }
}

void dump_feature_volume(const fs::path& dir, const torch::Tensor& volume, int frame_offset, int frames_to_write) {
  torch::Tensor v = volume.detach().to(torch::kCPU, torch::kFloat32);
  if (v.dim() == 5) v = v[0];
  if (v.dim() != 4) throw ValidationError("feature dump expects [C, D, H, W]");
  v = v.mean(0);  // [D, H, W]
  const int64_t d = v.size(0);
  const int64_t n = frames_to_write < 0 ? d : std::min<int64_t>(d, frames_to_write);
  fs::create_directories(dir);
  for (int64_t i = 0; i < n; ++i) {
    torch::Tensor f = v[i];
    const float lo = f.min().item<float>(), hi = f.max().item<float>();
    torch::Tensor norm = hi > lo ? (f - lo) / (hi - lo) : torch::zeros_like(f);
    norm = (norm * 255.0f).round().to(torch::kUInt8).contiguous();
    cv::Mat m(static_cast<int>(norm.size(0)), static_cast<int>(norm.size(1)), CV_8U, norm.data_ptr<uint8_t>());
    const fs::path p = dir / frame_filename(frame_offset + static_cast<int>(i));
    if (!cv::imwrite(p.string(), m)) throw RuntimeFailure("cannot write feature dump " + p.string());
  }
}

}  // namespace fsts
