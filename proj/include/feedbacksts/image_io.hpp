#pragma once

#include <filesystem>
#include <string>
#include <vector>

#include <torch/torch.h>

#include "feedbacksts/plane.hpp"
#include "feedbacksts/sequence.hpp"

namespace fsts {

namespace fs = std::filesystem;

enum class Split { Train, Test };
Split parse_split(const std::string& s);

/// Reads an 8- or 16-bit grayscale file, rescaled by its full-scale value.
FloatPlane read_gray(const fs::path& path);
/// Reads a mask file and binarizes at half of full scale.
MaskPlane read_mask(const fs::path& path);

void write_gray16(const fs::path& path, const FloatPlane& img);
void write_mask(const fs::path& path, const MaskPlane& mask);

/// Image files (png/tif/tiff/bmp) in `dir`, sorted by filename.
std::vector<fs::path> list_images(const fs::path& dir);

/// Loads `<root>/<seq>/images` (+ `masks`) for every sequence directory.
std::vector<FrameSequence> load_dataset(const fs::path& root, Split split);
/// Loads a single `<dir>/images` (+ optional `masks`) sequence.
FrameSequence load_sequence(const fs::path& dir, bool require_masks);

/// Writes the dataset layout used by `load_dataset`.
void write_sequence(const fs::path& dir, const FrameSequence& seq);

/// Writes one min-max normalized grayscale PNG per frame of `volume`
/// ([C, D, H, W] or [1, C, D, H, W]; channels are averaged) into `dir`.
void dump_feature_volume(const fs::path& dir, const torch::Tensor& volume, int frame_offset = 0,
                         int frames_to_write = -1);

std::string frame_filename(int index);

}  // namespace fsts
