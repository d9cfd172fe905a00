#include "dcdm/dataset.hpp"

#include <algorithm>
#include <cctype>
#include <cmath>
#include <fstream>
#include <map>
#include <numeric>
#include <random>
#include <regex>
#include <set>
#include <sstream>

#include "dcdm/imaging.hpp"

namespace dcdm {

namespace {

std::vector<ClassEntry> make_table() {
    struct Row {
        const char* plant;
        const char* plant_botanical;
        const char* disease;
        const char* disease_botanical;
        std::size_t train, val;
    };
    static const Row rows[] = {
        {"Apple", "Malus Domestica", "Scab", "Venturia inaequalis", 1504, 326},
        {"Apple", "Malus Domestica", "Black rot", "Botryosphaeria obtusa", 1496, 325},
        {"Apple", "Malus Domestica", "Cedar apple rust", "Gymnosporangium juniperivirginianae", 1220, 455},
        {"Apple", "Malus Domestica", "", "", 1395, 329},
        {"Grapes", "Vitis vinifera", "Black rot", "Guignardia bidwellii", 1944, 236},
        {"Grapes", "Vitis vinifera", "Esca", "Phaeomoniella chlamydospora", 1107, 276},
        {"Grapes", "Vitis vinifera", "Leaf blight", "Pseudocercospora vitis", 1860, 215},
        {"Grapes", "Vitis vinifera", "", "", 1339, 484},
        {"Peach", "Prunus persica", "Bacterial spot", "Xanthomonas campestris", 1838, 459},
        {"Peach", "Prunus persica", "", "", 1288, 572},
        {"Potato", "Solanum tuberosum", "Early blight", "Alternaria solani", 1800, 200},
        {"Potato", "Solanum tuberosum", "Late blight", "Phytophthora infestans", 1800, 200},
        {"Potato", "Solanum tuberosum", "", "", 1121, 531},
        {"Strawberry", "Fragaria spp.", "Leaf scorch", "Diplocarpon earlianum", 1887, 350},
        {"Strawberry", "Fragaria spp.", "", "", 1364, 492},
        {"Tomato", "Lycopersicum esculentum", "Bacterial spot", "Xanthomonas campestris pv. Vesicatoria", 1710, 425},
        {"Tomato", "Lycopersicum esculentum", "Early blight", "Alternaria solani", 1800, 457},
        {"Tomato", "Lycopersicum esculentum", "Late blight", "Phytophthora infestans", 1527, 382},
        {"Tomato", "Lycopersicum esculentum", "Leaf mold", "Fulvia fulva", 1761, 491},
        {"Tomato", "Lycopersicum esculentum", "Septoria leaf spot", "Septoria lycopersici", 1417, 454},
        {"Tomato", "Lycopersicum esculentum", "Spider mites", "Tetranychus urticae", 1340, 335},
        {"Tomato", "Lycopersicum esculentum", "Target spot", "Corynespora cassiicola", 1123, 481},
        {"Tomato", "Lycopersicum esculentum", "Leaf curl virus", "", 3286, 571},
        {"Tomato", "Lycopersicum esculentum", "Mosaic virus", "Tomato mosaic virus", 1800, 574},
        {"Tomato", "Lycopersicum esculentum", "", "", 1273, 380},
    };
    std::vector<ClassEntry> table;
    for (const Row& r : rows) {
        ClassEntry e;
        e.index = table.size();
        e.plant = r.plant;
        e.plant_botanical = r.plant_botanical;
        e.disease = r.disease;
        e.disease_botanical = r.disease_botanical;
        e.is_healthy = e.disease.empty();
        e.training_images = r.train;
        e.validation_images = r.val;
        table.push_back(std::move(e));
    }
    return table;
}

std::string slugify(const std::string& text) {
    std::string out;
    for (char ch : text) {
        const auto c = static_cast<unsigned char>(ch);
        if (std::isalnum(c)) {
            out += static_cast<char>(std::tolower(c));
        } else if (!out.empty() && out.back() != '_') {
            out += '_';
        }
    }
    while (!out.empty() && out.back() == '_') out.pop_back();
    return out;
}

std::mt19937_64 seeded(std::uint64_t seed, std::uint64_t salt) {
    std::seed_seq seq{static_cast<std::uint32_t>(seed), static_cast<std::uint32_t>(seed >> 32),
                      static_cast<std::uint32_t>(salt), static_cast<std::uint32_t>(salt >> 32)};
    return std::mt19937_64(seq);
}

bool is_image_name(const std::filesystem::path& p) {
    std::string ext = p.extension().string();
    std::transform(ext.begin(), ext.end(), ext.begin(), [](unsigned char c) { return std::tolower(c); });
    static const std::set<std::string> exts = {".png", ".jpg", ".jpeg", ".ppm", ".pgm", ".pnm"};
    return exts.count(ext) > 0;
}

std::string csv_field(const std::string& s) {
    if (s.find_first_of(",\"\n\r") == std::string::npos) return s;
    std::string out = "\"";
    for (char c : s) {
        if (c == '"') out += '"';
        out += c;
    }
    return out + "\"";
}

std::vector<std::string> csv_split(const std::string& line, std::size_t line_no) {
    std::vector<std::string> fields(1);
    bool quoted = false;
    for (std::size_t i = 0; i < line.size(); ++i) {
        const char c = line[i];
        if (quoted) {
            if (c == '"' && i + 1 < line.size() && line[i + 1] == '"') {
                fields.back() += '"';
                ++i;
            } else if (c == '"') {
                quoted = false;
            } else {
                fields.back() += c;
            }
        } else if (c == '"') {
            quoted = true;
        } else if (c == ',') {
            fields.emplace_back();
        } else {
            fields.back() += c;
        }
    }
    if (quoted) throw FormatError("manifest line " + std::to_string(line_no) + ": unterminated quote");
    return fields;
}

}  // namespace

std::string ClassEntry::slug() const {
    return slugify(plant + " " + (is_healthy ? std::string("healthy") : disease));
}

std::string ClassEntry::display_name() const {
    return is_healthy ? plant + " (Healthy)" : plant + " " + disease;
}

const std::vector<ClassEntry>& class_table() {
    static const std::vector<ClassEntry> table = make_table();
    return table;
}

std::optional<std::size_t> class_index_for_slug(const std::string& slug) {
    for (const auto& e : class_table())
        if (e.slug() == slug) return e.index;
    return std::nullopt;
}

std::string to_string(SplitTag tag) {
    switch (tag) {
        case SplitTag::Train: return "train";
        case SplitTag::Test: return "test";
        default: return "unassigned";
    }
}

SplitTag parse_split_tag(const std::string& text) {
    if (text == "train") return SplitTag::Train;
    if (text == "test") return SplitTag::Test;
    if (text == "unassigned" || text.empty()) return SplitTag::Unassigned;
    throw FormatError("unknown split tag '" + text + "'");
}

std::size_t DatasetManifest::count(SplitTag tag) const {
    return static_cast<std::size_t>(
        std::count_if(records.begin(), records.end(), [&](const ManifestRecord& r) { return r.split == tag; }));
}

std::vector<std::size_t> DatasetManifest::indices(SplitTag tag) const {
    std::vector<std::size_t> out;
    for (std::size_t i = 0; i < records.size(); ++i)
        if (records[i].split == tag) out.push_back(i);
    return out;
}

std::string default_group_id(const std::filesystem::path& file) {
    const std::string stem = file.stem().string();
    return stem.substr(0, stem.find('_'));
}

ManifestBuildResult build_manifest(const std::filesystem::path& root, const ManifestBuildOptions& options) {
    namespace fs = std::filesystem;
    if (!fs::is_directory(root)) throw IoError("dataset root " + root.string() + " is not a directory");
    std::optional<std::regex> group_re;
    if (options.group_regex) {
        try {
            group_re.emplace(*options.group_regex);
        } catch (const std::regex_error& e) {
            throw DataError("invalid group regex '" + *options.group_regex + "': " + e.what());
        }
    }

    std::vector<fs::path> class_dirs;
    for (const auto& entry : fs::directory_iterator(root))
        if (entry.is_directory()) class_dirs.push_back(entry.path());
    std::sort(class_dirs.begin(), class_dirs.end());

    std::vector<std::string> unknown;
    for (const auto& dir : class_dirs) {
        const auto idx = class_index_for_slug(dir.filename().string());
        if (!idx || *idx >= options.num_classes) unknown.push_back(dir.filename().string());
    }
    if (!unknown.empty()) {
        std::string list;
        for (const auto& u : unknown) list += (list.empty() ? "" : ", ") + u;
        throw DataError("unknown class directories under " + root.string() + ": " + list);
    }

    ManifestBuildResult result;
    for (const auto& dir : class_dirs) {
        const std::size_t cls = *class_index_for_slug(dir.filename().string());
        std::vector<fs::path> files;
        for (const auto& entry : fs::directory_iterator(dir))
            if (entry.is_regular_file()) files.push_back(entry.path());
        std::sort(files.begin(), files.end());
        for (const auto& file : files) {
            const std::string rel = dir.filename().string() + "/" + file.filename().string();
            if (!is_image_name(file)) {
                result.skipped.push_back(rel + ": not an image file");
                continue;
            }
            try {
                (void)read_image(file);
            } catch (const Error& e) {
                result.skipped.push_back(rel + ": " + e.what());
                continue;
            }
            ManifestRecord rec;
            rec.path = rel;
            rec.class_index = cls;
            if (group_re) {
                std::smatch m;
                const std::string stem = file.stem().string();
                rec.group_id = std::regex_search(stem, m, *group_re) ? (m.size() > 1 ? m[1].str() : m[0].str()) : stem;
            } else {
                rec.group_id = default_group_id(file);
            }
            result.manifest.records.push_back(std::move(rec));
        }
    }
    if (result.manifest.records.empty()) {
        throw DataError("no decodable images found under " + root.string());
    }
    return result;
}

SplitResult split(const DatasetManifest& manifest, double train_fraction, std::uint64_t seed, bool group_aware) {
    if (!(train_fraction > 0.0 && train_fraction < 1.0)) {
        throw DataError("train fraction must be in (0,1), got " + std::to_string(train_fraction));
    }
    SplitResult result;
    result.manifest = manifest;
    result.manifest.seed = seed;
    auto& recs = result.manifest.records;
    if (recs.empty()) throw DataError("cannot split an empty manifest");

    std::map<std::size_t, std::vector<std::size_t>> by_class;
    for (std::size_t i = 0; i < recs.size(); ++i) by_class[recs[i].class_index].push_back(i);

    // Per-class train targets: floors of the exact shares, with the remainder
    // of the global total handed out by largest fractional part.
    const auto global = static_cast<std::size_t>(std::llround(train_fraction * static_cast<double>(recs.size())));
    std::map<std::size_t, std::size_t> target;
    std::vector<std::pair<double, std::size_t>> fractions;
    std::size_t assigned = 0;
    for (const auto& [cls, ids] : by_class) {
        const double exact = train_fraction * static_cast<double>(ids.size());
        target[cls] = static_cast<std::size_t>(std::floor(exact));
        assigned += target[cls];
        fractions.emplace_back(exact - std::floor(exact), cls);
    }
    std::stable_sort(fractions.begin(), fractions.end(),
                     [](const auto& a, const auto& b) { return a.first > b.first; });
    for (std::size_t i = 0; assigned < global && i < fractions.size(); ++i, ++assigned) ++target[fractions[i].second];

    std::map<std::string, SplitTag> group_side;
    for (auto& [cls, ids] : by_class) {
        std::mt19937_64 rng = seeded(seed, cls);
        if (!group_aware) {
            std::vector<std::size_t> order = ids;
            std::shuffle(order.begin(), order.end(), rng);
            for (std::size_t j = 0; j < order.size(); ++j) {
                recs[order[j]].split = j < target[cls] ? SplitTag::Train : SplitTag::Test;
            }
            continue;
        }
        if (ids.size() < 2) {
            result.warnings.push_back("class " + std::to_string(cls) + " has fewer than 2 records; all go to train");
            for (std::size_t i : ids) {
                recs[i].split = SplitTag::Train;
                group_side.emplace(recs[i].group_id, SplitTag::Train);
            }
            continue;
        }
        std::map<std::string, std::vector<std::size_t>> groups;
        for (std::size_t i : ids) groups[recs[i].group_id].push_back(i);
        std::vector<std::string> names;
        for (const auto& [g, members] : groups) names.push_back(g);
        std::shuffle(names.begin(), names.end(), rng);

        std::size_t train_count = 0;
        for (const auto& g : names) {
            const auto& members = groups[g];
            SplitTag side;
            if (auto it = group_side.find(g); it != group_side.end()) {
                side = it->second;
            } else {
                side = train_count + members.size() <= target[cls] ? SplitTag::Train : SplitTag::Test;
                group_side.emplace(g, side);
            }
            if (side == SplitTag::Train) train_count += members.size();
            for (std::size_t i : members) recs[i].split = side;
        }
        if (train_count == 0 || train_count == ids.size()) {
            result.warnings.push_back("class " + std::to_string(cls) + " could not be split without breaking a group");
        }
    }
    return result;
}

std::vector<std::size_t> epoch_order(std::size_t n, std::uint64_t seed, std::size_t epoch) {
    std::vector<std::size_t> order(n);
    std::iota(order.begin(), order.end(), std::size_t{0});
    std::mt19937_64 rng = seeded(seed, 0x9e3779b97f4a7c15ULL ^ epoch);
    std::shuffle(order.begin(), order.end(), rng);
    return order;
}

std::vector<std::vector<std::size_t>> batches(const DatasetManifest& manifest, SplitTag split_tag,
                                              std::size_t batch_size, std::uint64_t shuffle_seed,
                                              std::size_t epoch_index) {
    if (batch_size < 1) throw DataError("batch size must be >= 1");
    const auto members = manifest.indices(split_tag);
    if (members.empty()) throw DataError("split '" + to_string(split_tag) + "' is empty");
    const auto order = epoch_order(members.size(), shuffle_seed, epoch_index);
    std::vector<std::vector<std::size_t>> out;
    for (std::size_t start = 0; start < order.size(); start += batch_size) {
        std::vector<std::size_t> b;
        for (std::size_t j = start; j < std::min(order.size(), start + batch_size); ++j) b.push_back(members[order[j]]);
        out.push_back(std::move(b));
    }
    return out;
}

std::string manifest_to_csv(const DatasetManifest& manifest) {
    std::ostringstream out;
    if (manifest.seed) out << "#seed=" << *manifest.seed << "\n";
    out << "path,class_index,split,group_id\n";
    for (const auto& r : manifest.records) {
        out << csv_field(r.path) << ',' << r.class_index << ',' << to_string(r.split) << ',' << csv_field(r.group_id)
            << "\n";
    }
    return out.str();
}

DatasetManifest manifest_from_csv(const std::string& text) {
    DatasetManifest m;
    std::istringstream in(text);
    std::string line;
    std::size_t line_no = 0;
    bool header_seen = false;
    while (std::getline(in, line)) {
        ++line_no;
        if (!line.empty() && line.back() == '\r') line.pop_back();
        if (line.empty()) continue;
        if (line[0] == '#') {
            if (line.rfind("#seed=", 0) == 0) {
                try {
                    std::size_t used = 0;
                    m.seed = std::stoull(line.substr(6), &used);
                    if (used != line.size() - 6) throw std::invalid_argument("trailing");
                } catch (const std::exception&) {
                    throw FormatError("manifest line " + std::to_string(line_no) + ": bad seed comment");
                }
            }
            continue;
        }
        if (!header_seen) {
            if (line != "path,class_index,split,group_id") {
                throw FormatError("manifest line " + std::to_string(line_no) +
                                  ": expected header 'path,class_index,split,group_id'");
            }
            header_seen = true;
            continue;
        }
        const auto f = csv_split(line, line_no);
        if (f.size() != 4) {
            throw FormatError("manifest line " + std::to_string(line_no) + ": expected 4 fields, got " +
                              std::to_string(f.size()));
        }
        ManifestRecord r;
        r.path = f[0];
        if (r.path.empty()) throw FormatError("manifest line " + std::to_string(line_no) + ": empty path");
        try {
            std::size_t used = 0;
            r.class_index = std::stoul(f[1], &used);
            if (used != f[1].size()) throw std::invalid_argument("trailing");
        } catch (const std::exception&) {
            throw FormatError("manifest line " + std::to_string(line_no) + ": bad class index '" + f[1] + "'");
        }
        if (r.class_index >= class_table().size()) {
            throw FormatError("manifest line " + std::to_string(line_no) + ": class index " + f[1] + " out of range");
        }
        try {
            r.split = parse_split_tag(f[2]);
        } catch (const FormatError& e) {
            throw FormatError("manifest line " + std::to_string(line_no) + ": " + e.what());
        }
        r.group_id = f[3];
        m.records.push_back(std::move(r));
    }
    if (!header_seen) throw FormatError("manifest has no header line");
    return m;
}

void save_manifest(const DatasetManifest& manifest, const std::filesystem::path& path) {
    const std::string text = manifest_to_csv(manifest);
    write_file_bytes(path, std::span(reinterpret_cast<const std::uint8_t*>(text.data()), text.size()));
}

DatasetManifest load_manifest(const std::filesystem::path& path) {
    const auto bytes = read_file_bytes(path);
    try {
        return manifest_from_csv(std::string(bytes.begin(), bytes.end()));
    } catch (const FormatError& e) {
        throw FormatError(path.string() + ": " + e.what());
    }
}

}  // namespace dcdm
