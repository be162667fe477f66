#pragma once

#include <filesystem>
#include <span>

#include "npx/gan_training.hpp"
#include "npx/image.hpp"

namespace npx {

/// ground | noisy | generated, left to right, with a gutter and captions.
/// Inputs may be byte or unit_signed; gray and rgb may be mixed.
void plot_triplet_panel(const ImageTensor& ground, const ImageTensor& noisy, const ImageTensor& generated,
                        const std::filesystem::path& out_path);

struct LossPlotInfo {
  int width;
  int height;
  std::int64_t x_min;
  std::int64_t x_max;  // last step index
  double y_max;
  int series;
};

/// Line chart of loss_D and loss_G against step.
LossPlotInfo plot_loss_curves(std::span<const HistoryRecord> history, const std::filesystem::path& out_path);

}  // namespace npx
