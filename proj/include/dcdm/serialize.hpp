#pragma once

#include <cstdint>
#include <filesystem>
#include <span>
#include <string>
#include <vector>

#include "dcdm/model.hpp"

namespace dcdm {

inline constexpr std::uint32_t kWeightFormatVersion = 1;

/// Name of the extra f32 [2] tensor that records the input height and width.
inline constexpr const char* kInputSizeTensor = "input_hw";

/// Binary weight file, little-endian: "DCDM", u32 version, u32 num_classes,
/// u32 tensor count, then per tensor u16 name length, name, u8 dtype
/// (0 = f32, 1 = f64), u8 ndim, u32 dims, raw data.
template <typename T>
std::vector<std::uint8_t> serialize_weights(const Model<T>& model);

/// Rebuilds the architecture from the header and input_hw, then checks every
/// tensor name and shape against it. Throws FormatError on any mismatch;
/// nothing is returned on failure.
template <typename T>
Model<T> deserialize_weights(std::span<const std::uint8_t> bytes);

/// Written through a temporary file and renamed into place.
template <typename T>
void save_weights(const Model<T>& model, const std::filesystem::path& path);

template <typename T>
Model<T> load_weights(const std::filesystem::path& path);

/// "model.dcdm" -> "model.labels.json".
std::filesystem::path labels_path_for(const std::filesystem::path& weights_path);

/// JSON array of class-name strings in index order.
void save_labels(const std::vector<std::string>& names, const std::filesystem::path& path);
std::vector<std::string> load_labels(const std::filesystem::path& path);

/// Weights plus the labels sidecar when one exists next to them.
template <typename T>
void save_model(const Model<T>& model, const std::filesystem::path& path);

template <typename T>
Model<T> load_model(const std::filesystem::path& path);

/// FNV-1a 64 over the architecture description and all parameter bytes.
template <typename T>
std::uint64_t fingerprint(const Model<T>& model);

std::string fingerprint_hex(std::uint64_t fp);

}  // namespace dcdm
