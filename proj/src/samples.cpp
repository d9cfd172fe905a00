#include "dcdm/samples.hpp"

namespace dcdm {

ImageFileSamples::ImageFileSamples(std::filesystem::path root, const DatasetManifest& manifest,
                                   std::optional<SplitTag> split_tag, InputSize input, bool cache_decoded)
    : root_(std::move(root)), input_(input), cache_(cache_decoded) {
    for (const auto& r : manifest.records)
        if (!split_tag || r.split == *split_tag) records_.push_back(r);
    cached_.resize(records_.size());
}

Tensor<float> ImageFileSamples::load(std::size_t i) const {
    const ManifestRecord& r = records_.at(i);
    if (cache_) {
        std::lock_guard lock(mutex_);
        if (cached_[i]) return to_tensor<float>(*cached_[i]);
    }
    ImageBuffer img = register_image(read_image(root_ / r.path), input_.height, input_.width);
    Tensor<float> t = to_tensor<float>(img);
    if (cache_) {
        std::lock_guard lock(mutex_);
        cached_[i] = std::move(img);
    }
    return t;
}

}  // namespace dcdm
