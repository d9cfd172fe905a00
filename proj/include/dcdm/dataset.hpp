#pragma once

#include <cstdint>
#include <filesystem>
#include <optional>
#include <string>
#include <vector>

#include "dcdm/error.hpp"

namespace dcdm {

/// One row of the 25-class leaf disease table.
struct ClassEntry {
    std::size_t index = 0;
    std::string plant;
    std::string plant_botanical;
    std::string disease;  // empty for healthy classes
    std::string disease_botanical;
    bool is_healthy = false;
    std::size_t training_images = 0;
    std::size_t validation_images = 0;

    /// Directory name used in dataset layouts, e.g. "tomato_septoria_leaf_spot".
    std::string slug() const;
    /// "Apple Scab", "Tomato (Healthy)".
    std::string display_name() const;
};

/// The class table in index order (25 entries).
const std::vector<ClassEntry>& class_table();

/// Index of the class with the given slug, if any.
std::optional<std::size_t> class_index_for_slug(const std::string& slug);

enum class SplitTag { Unassigned, Train, Test };

std::string to_string(SplitTag tag);
SplitTag parse_split_tag(const std::string& text);

struct ManifestRecord {
    std::string path;  // relative to the dataset root
    std::size_t class_index = 0;
    SplitTag split = SplitTag::Unassigned;
    std::string group_id;

    friend bool operator==(const ManifestRecord&, const ManifestRecord&) = default;
};

struct DatasetManifest {
    std::vector<ManifestRecord> records;
    std::optional<std::uint64_t> seed;  // seed of the split that produced the tags

    std::size_t count(SplitTag tag) const;
    std::vector<std::size_t> indices(SplitTag tag) const;

    friend bool operator==(const DatasetManifest&, const DatasetManifest&) = default;
};

/// Default grouping rule: the file stem up to the first '_' ("leaf42_shot2.jpg" -> "leaf42").
std::string default_group_id(const std::filesystem::path& file);

struct ManifestBuildOptions {
    /// When set, the first capture group of this regex applied to the file
    /// stem is the group id (whole match if there is no group).
    std::optional<std::string> group_regex;
    /// Only classes below this index are accepted (reduced builds).
    std::size_t num_classes = 25;
};

struct ManifestBuildResult {
    DatasetManifest manifest;
    std::vector<std::string> skipped;  // files that failed to decode
};

/// Scans root/<class-slug>/<image files>. Every file is decoded once to make
/// sure it is usable; failures are skipped and reported.
ManifestBuildResult build_manifest(const std::filesystem::path& root, const ManifestBuildOptions& options = {});

struct SplitResult {
    DatasetManifest manifest;
    std::vector<std::string> warnings;
};

/// Stratified per-class split. The global train count is round(fraction*N)
/// and each class lands within one record of its exact share. With
/// group_aware, records that share a group_id never straddle the split.
SplitResult split(const DatasetManifest& manifest, double train_fraction, std::uint64_t seed, bool group_aware = false);

/// Seeded permutation of [0, n) for one epoch.
std::vector<std::size_t> epoch_order(std::size_t n, std::uint64_t seed, std::size_t epoch);

/// Mini-batches of manifest record indices from one split for one epoch.
std::vector<std::vector<std::size_t>> batches(const DatasetManifest& manifest, SplitTag split_tag,
                                              std::size_t batch_size, std::uint64_t shuffle_seed,
                                              std::size_t epoch_index);

// CSV persistence: "#seed=N" comment, header "path,class_index,split,group_id", one row per record.
std::string manifest_to_csv(const DatasetManifest& manifest);
DatasetManifest manifest_from_csv(const std::string& text);
void save_manifest(const DatasetManifest& manifest, const std::filesystem::path& path);
DatasetManifest load_manifest(const std::filesystem::path& path);

}  // namespace dcdm
