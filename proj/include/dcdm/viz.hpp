#pragma once

#include <filesystem>
#include <string>
#include <vector>

#include "dcdm/imaging.hpp"
#include "dcdm/metrics.hpp"
#include "dcdm/model.hpp"

namespace dcdm {

inline constexpr std::uint8_t kDegenerateGray = 128;

/// Geometry of a square grid of equally sized tiles with 1 px separators.
struct GridLayout {
    std::size_t count = 0;  // tiles in use
    std::size_t side = 0;   // ceil(sqrt(count)) tiles per row and column
    std::size_t tile_width = 0;
    std::size_t tile_height = 0;

    std::size_t image_width() const { return side * tile_width + (side - 1); }
    std::size_t image_height() const { return side * tile_height + (side - 1); }
    std::size_t tile_x(std::size_t i) const { return (i % side) * (tile_width + 1); }
    std::size_t tile_y(std::size_t i) const { return (i / side) * (tile_height + 1); }
};

GridLayout grid_layout(std::size_t count, std::size_t tile_width, std::size_t tile_height);

/// Min-max scale to [0,255]; a constant input maps to mid-gray.
std::vector<std::uint8_t> normalize_to_bytes(std::span<const double> values);

/// Tiles the channels of a [C,H,W] tensor, each normalized on its own.
/// Separators and unused tiles are white.
template <typename T>
ImageBuffer tile_feature_maps(const Tensor<T>& maps);

struct FeatureGrid {
    std::string layer;
    std::size_t channels = 0;
    GridLayout layout;
    ImageBuffer image;
};

/// Post-ReLU maps of the requested conv layers (1-based conv indices).
template <typename T>
std::vector<FeatureGrid> extract_feature_maps(const Model<T>& model, const Tensor<T>& image,
                                              const std::vector<std::size_t>& conv_indices);

inline constexpr std::size_t kFilterScale = 16;

/// Kernels of one conv layer (1-based conv index) upscaled 16x. Layers with
/// three input channels render each kernel as an RGB patch; deeper layers
/// render the per-filter mean over input channels in gray.
template <typename T>
ImageBuffer visualize_filters(const Model<T>& model, std::size_t conv_index);

struct ConfusionLayout {
    std::size_t k = 0;
    std::size_t cell = 0;
    std::size_t origin_x = 0;  // left edge of column 0
    std::size_t origin_y = 0;  // top edge of row 0

    std::size_t cell_center_x(std::size_t pred) const { return origin_x + pred * cell + cell / 2; }
    std::size_t cell_center_y(std::size_t truth) const { return origin_y + truth * cell + cell / 2; }
};

ConfusionLayout confusion_layout(std::size_t k);

/// Gray value of a heatmap cell: 255 * (1 - count / row max), white for empty rows.
std::uint8_t confusion_cell_gray(const ConfusionMatrix& cm, std::size_t truth, std::size_t pred);

/// Heatmap with class-index labels along both axes (rows = true class).
ImageBuffer render_confusion(const ConfusionMatrix& cm);

// Training curves.

void write_curves_csv(const TrainHistory& history, const std::filesystem::path& path);
TrainHistory read_curves_csv(const std::filesystem::path& path);
std::string curves_csv(const TrainHistory& history);
TrainHistory parse_curves_csv(const std::string& text);

struct PlotPanel {
    std::size_t left = 0, top = 0, width = 0, height = 0;
    double y_min = 0.0, y_max = 1.0;
    double x_min = 1.0, x_max = 1.0;

    double x_pixel(double epoch) const;
    double y_pixel(double value) const;
};

struct CurvePlot {
    ImageBuffer image;
    PlotPanel accuracy;
    PlotPanel loss;
};

inline constexpr std::uint8_t kTrainColor[3] = {31, 119, 180};
inline constexpr std::uint8_t kValColor[3] = {255, 127, 14};

/// Two panels (accuracy, loss), train and validation curves in each.
CurvePlot plot_curves(const TrainHistory& history);

/// CSV always; PNG too when plot_path is non-empty.
void export_curves(const TrainHistory& history, const std::filesystem::path& csv_path,
                   const std::filesystem::path& plot_path = {});

}  // namespace dcdm
