#include "dcdm/serialize.hpp"

#include <bit>
#include <cstring>
#include <fstream>
#include <iomanip>
#include <sstream>

#include <json.hpp>

#include "dcdm/imaging.hpp"

namespace dcdm {

static_assert(std::endian::native == std::endian::little, "weight files are read and written in host order");

namespace {

constexpr char kMagic[4] = {'D', 'C', 'D', 'M'};

template <typename T>
constexpr std::uint8_t dtype_code() {
    return std::is_same_v<T, float> ? 0 : 1;
}

class Writer {
public:
    explicit Writer(std::vector<std::uint8_t>& out) : out_(out) {}

    void bytes(const void* p, std::size_t n) {
        const auto* b = static_cast<const std::uint8_t*>(p);
        out_.insert(out_.end(), b, b + n);
    }
    template <typename U>
    void scalar(U v) {
        bytes(&v, sizeof v);
    }

    template <typename V>
    void tensor(const std::string& name, const Tensor<V>& t) {
        scalar(static_cast<std::uint16_t>(name.size()));
        bytes(name.data(), name.size());
        scalar(dtype_code<V>());
        scalar(static_cast<std::uint8_t>(t.rank()));
        for (std::size_t d = 0; d < t.rank(); ++d) scalar(static_cast<std::uint32_t>(t.dim(d)));
        bytes(t.ptr(), t.numel() * sizeof(V));
    }

private:
    std::vector<std::uint8_t>& out_;
};

class Reader {
public:
    explicit Reader(std::span<const std::uint8_t> in) : in_(in) {}

    const std::uint8_t* take(std::size_t n, const char* what) {
        if (in_.size() - pos_ < n) {
            throw FormatError(std::string("weight file truncated while reading ") + what + " at byte " +
                              std::to_string(pos_));
        }
        const std::uint8_t* p = in_.data() + pos_;
        pos_ += n;
        return p;
    }
    template <typename U>
    U scalar(const char* what) {
        U v;
        std::memcpy(&v, take(sizeof v, what), sizeof v);
        return v;
    }
    bool done() const { return pos_ == in_.size(); }

private:
    std::span<const std::uint8_t> in_;
    std::size_t pos_ = 0;
};

struct RawTensor {
    std::string name;
    std::uint8_t dtype = 0;
    std::vector<std::size_t> dims;
    const std::uint8_t* data = nullptr;
};

RawTensor read_tensor(Reader& r) {
    RawTensor t;
    const auto len = r.scalar<std::uint16_t>("tensor name length");
    const auto* name = r.take(len, "tensor name");
    t.name.assign(reinterpret_cast<const char*>(name), len);
    t.dtype = r.scalar<std::uint8_t>("dtype");
    if (t.dtype > 1) throw FormatError("tensor '" + t.name + "' has unknown dtype " + std::to_string(t.dtype));
    const auto ndim = r.scalar<std::uint8_t>("rank");
    if (ndim < 1 || ndim > 4) throw FormatError("tensor '" + t.name + "' has invalid rank " + std::to_string(ndim));
    std::size_t n = 1;
    for (std::uint8_t d = 0; d < ndim; ++d) {
        const auto v = r.scalar<std::uint32_t>("dims");
        if (v == 0) throw FormatError("tensor '" + t.name + "' has a zero dimension");
        t.dims.push_back(v);
        n *= v;
        if (n > (std::size_t{1} << 40)) throw FormatError("tensor '" + t.name + "' is implausibly large");
    }
    t.data = r.take(n * (t.dtype == 0 ? 4 : 8), "tensor data");
    return t;
}

template <typename T>
Tensor<T> materialize(const RawTensor& raw) {
    const Shape shape(raw.dims);
    if (raw.dtype == dtype_code<T>()) {
        std::vector<T> data(shape.numel());
        std::memcpy(data.data(), raw.data, data.size() * sizeof(T));
        return Tensor<T>(shape, std::move(data));
    }
    std::vector<T> data(shape.numel());
    if (raw.dtype == 0) {
        for (std::size_t i = 0; i < data.size(); ++i) {
            float v;
            std::memcpy(&v, raw.data + i * 4, 4);
            data[i] = static_cast<T>(v);
        }
    } else {
        for (std::size_t i = 0; i < data.size(); ++i) {
            double v;
            std::memcpy(&v, raw.data + i * 8, 8);
            data[i] = static_cast<T>(v);
        }
    }
    return Tensor<T>(shape, std::move(data));
}

std::string shape_text(const std::vector<std::size_t>& dims) {
    std::string s = "[";
    for (std::size_t i = 0; i < dims.size(); ++i) s += (i ? "," : "") + std::to_string(dims[i]);
    return s + "]";
}

}  // namespace

template <typename T>
std::vector<std::uint8_t> serialize_weights(const Model<T>& model) {
    const auto params = model.named_parameters();
    std::size_t total = 16;
    for (const auto& [name, t] : params) total += 2 + name.size() + 2 + 4 * t->rank() + t->numel() * sizeof(T);
    std::vector<std::uint8_t> out;
    out.reserve(total + 64);
    Writer w(out);
    w.bytes(kMagic, 4);
    w.scalar(kWeightFormatVersion);
    w.scalar(static_cast<std::uint32_t>(model.num_classes));
    w.scalar(static_cast<std::uint32_t>(params.size() + 1));
    w.tensor(kInputSizeTensor, Tensor<float>(Shape{2}, {static_cast<float>(model.input.height),
                                                        static_cast<float>(model.input.width)}));
    for (const auto& [name, t] : params) w.tensor(name, *t);
    return out;
}

template <typename T>
Model<T> deserialize_weights(std::span<const std::uint8_t> bytes) {
    Reader r(bytes);
    if (std::memcmp(r.take(4, "magic"), kMagic, 4) != 0) throw FormatError("not a DCDM weight file (bad magic)");
    const auto version = r.scalar<std::uint32_t>("version");
    if (version != kWeightFormatVersion) {
        throw FormatError("unsupported weight file version " + std::to_string(version) + " (expected " +
                          std::to_string(kWeightFormatVersion) + ")");
    }
    const auto num_classes = r.scalar<std::uint32_t>("class count");
    const auto count = r.scalar<std::uint32_t>("tensor count");

    std::vector<RawTensor> raws;
    for (std::uint32_t i = 0; i < count; ++i) raws.push_back(read_tensor(r));
    if (!r.done()) throw FormatError("weight file has trailing bytes after the last tensor");

    if (raws.empty() || raws[0].name != kInputSizeTensor || raws[0].dims != std::vector<std::size_t>{2}) {
        throw FormatError(std::string("weight file lacks the leading '") + kInputSizeTensor + "' tensor");
    }
    const Tensor<double> hw = materialize<double>(raws[0]);
    const double h = hw[0], w = hw[1];
    if (!(h >= 1 && w >= 1 && h == std::floor(h) && w == std::floor(w) && h < 1e6 && w < 1e6)) {
        throw FormatError("weight file records an invalid input size");
    }

    Model<T> model;
    try {
        model = dcdm_architecture<T>(num_classes, InputSize{static_cast<std::size_t>(h), static_cast<std::size_t>(w)});
    } catch (const Error& e) {
        throw FormatError(std::string("weight file declares an impossible architecture: ") + e.what());
    }
    auto params = model.named_parameters();
    if (params.size() + 1 != raws.size()) {
        throw FormatError("shape table lists " + std::to_string(raws.size() - 1) + " parameter tensors, architecture has " +
                          std::to_string(params.size()));
    }
    for (std::size_t i = 0; i < params.size(); ++i) {
        const RawTensor& raw = raws[i + 1];
        auto& [name, t] = params[i];
        if (raw.name != name) {
            throw FormatError("shape table entry " + std::to_string(i + 1) + " is '" + raw.name + "', expected '" +
                              name + "'");
        }
        if (Shape(raw.dims) != t->shape()) {
            throw FormatError("tensor '" + name + "' has shape " + shape_text(raw.dims) + ", architecture expects " +
                              t->shape().to_string());
        }
    }
    for (std::size_t i = 0; i < params.size(); ++i) {
        *params[i].second = materialize<T>(raws[i + 1]);
        if (!params[i].second->all_finite()) throw FormatError("tensor '" + params[i].first + "' holds non-finite values");
    }
    return model;
}

template <typename T>
void save_weights(const Model<T>& model, const std::filesystem::path& path) {
    const auto bytes = serialize_weights(model);
    auto tmp = path;
    tmp += ".tmp";
    write_file_bytes(tmp, bytes);
    std::error_code ec;
    std::filesystem::rename(tmp, path, ec);
    if (ec) throw IoError("cannot move " + tmp.string() + " to " + path.string() + ": " + ec.message());
}

template <typename T>
Model<T> load_weights(const std::filesystem::path& path) {
    const auto bytes = read_file_bytes(path);
    try {
        return deserialize_weights<T>(bytes);
    } catch (const FormatError& e) {
        throw FormatError(path.string() + ": " + e.what());
    }
}

std::filesystem::path labels_path_for(const std::filesystem::path& weights_path) {
    auto p = weights_path;
    p.replace_extension(".labels.json");
    return p;
}

void save_labels(const std::vector<std::string>& names, const std::filesystem::path& path) {
    const std::string text = nlohmann::json(names).dump(2) + "\n";
    write_file_bytes(path, std::span(reinterpret_cast<const std::uint8_t*>(text.data()), text.size()));
}

std::vector<std::string> load_labels(const std::filesystem::path& path) {
    const auto bytes = read_file_bytes(path);
    try {
        const auto j = nlohmann::json::parse(bytes.begin(), bytes.end());
        if (!j.is_array()) throw FormatError("labels file must hold a JSON array");
        std::vector<std::string> names;
        for (const auto& v : j) {
            if (!v.is_string()) throw FormatError("labels file entries must be strings");
            names.push_back(v.get<std::string>());
        }
        return names;
    } catch (const nlohmann::json::exception& e) {
        throw FormatError(path.string() + ": " + e.what());
    }
}

template <typename T>
void save_model(const Model<T>& model, const std::filesystem::path& path) {
    save_weights(model, path);
    save_labels(model.class_names, labels_path_for(path));
}

template <typename T>
Model<T> load_model(const std::filesystem::path& path) {
    Model<T> model = load_weights<T>(path);
    const auto labels = labels_path_for(path);
    if (std::filesystem::exists(labels)) {
        auto names = load_labels(labels);
        if (names.size() != model.num_classes) {
            throw FormatError(labels.string() + " lists " + std::to_string(names.size()) + " classes, model has " +
                              std::to_string(model.num_classes));
        }
        model.class_names = std::move(names);
    }
    return model;
}

template <typename T>
std::uint64_t fingerprint(const Model<T>& model) {
    std::uint64_t h = 0xcbf29ce484222325ULL;
    auto mix = [&](const void* p, std::size_t n) {
        const auto* b = static_cast<const std::uint8_t*>(p);
        for (std::size_t i = 0; i < n; ++i) {
            h ^= b[i];
            h *= 0x100000001b3ULL;
        }
    };
    std::ostringstream arch;
    arch << model.channels << 'x' << model.input.height << 'x' << model.input.width << ';' << model.num_classes;
    for (const auto& l : model.layers) arch << ';' << l.name << ':' << to_string(l.spec.kind) << ':' << l.spec.in << ':' << l.spec.out;
    const std::string a = arch.str();
    mix(a.data(), a.size());
    for (const auto& [name, t] : model.named_parameters()) mix(t->ptr(), t->numel() * sizeof(T));
    return h;
}

std::string fingerprint_hex(std::uint64_t fp) {
    std::ostringstream s;
    s << std::hex << std::setw(16) << std::setfill('0') << fp;
    return s.str();
}

#define DCDM_INSTANTIATE_SERIALIZE(T)                                                \
    template std::vector<std::uint8_t> serialize_weights(const Model<T>&);           \
    template Model<T> deserialize_weights<T>(std::span<const std::uint8_t>);         \
    template void save_weights(const Model<T>&, const std::filesystem::path&);       \
    template Model<T> load_weights<T>(const std::filesystem::path&);                 \
    template void save_model(const Model<T>&, const std::filesystem::path&);         \
    template Model<T> load_model<T>(const std::filesystem::path&);                   \
    template std::uint64_t fingerprint(const Model<T>&);

DCDM_INSTANTIATE_SERIALIZE(float)
DCDM_INSTANTIATE_SERIALIZE(double)

}  // namespace dcdm
