#pragma once

#include <filesystem>
#include <mutex>
#include <optional>
#include <vector>

#include "dcdm/dataset.hpp"
#include "dcdm/imaging.hpp"
#include "dcdm/model.hpp"

namespace dcdm {

/// Manifest records of one split, decoded and registered on demand.
class ImageFileSamples final : public SampleSource<float> {
public:
    /// `split_tag` selects records; std::nullopt takes every record.
    ImageFileSamples(std::filesystem::path root, const DatasetManifest& manifest, std::optional<SplitTag> split_tag,
                     InputSize input, bool cache_decoded = false);

    std::size_t size() const override { return records_.size(); }
    std::size_t label(std::size_t i) const override { return records_.at(i).class_index; }
    Tensor<float> load(std::size_t i) const override;

    const ManifestRecord& record(std::size_t i) const { return records_.at(i); }

private:
    std::filesystem::path root_;
    std::vector<ManifestRecord> records_;
    InputSize input_;
    bool cache_;
    mutable std::mutex mutex_;
    mutable std::vector<std::optional<ImageBuffer>> cached_;
};

}  // namespace dcdm
