#pragma once

#include <filesystem>
#include <string>
#include <vector>

#include "feedbacksts/metrics.hpp"

namespace fsts {

/// Entry point of the `feedbacksts` tool. Returns the process exit code:
/// 0 success, 2 validation error, 3 runtime failure.
int run_cli(int argc, const char* const* argv);
int run_cli(const std::vector<std::string>& args);

/// Renders a Pd-vs-Fa plot from stored ROC points into a PNG.
void render_roc_plot(const RocCurve& curve, const std::filesystem::path& out_png, const std::string& title);

}  // namespace fsts
