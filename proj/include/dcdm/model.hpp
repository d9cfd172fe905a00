#pragma once

#include <functional>
#include <map>
#include <optional>
#include <string>
#include <utility>
#include <vector>

#include "dcdm/layers.hpp"

namespace dcdm {

inline constexpr std::size_t kDefaultClasses = 25;
inline constexpr std::size_t kDefaultHeight = 272;
inline constexpr std::size_t kDefaultWidth = 363;
inline constexpr std::size_t kMinInputSide = 32;  // five 2x2 pools must leave at least one cell

struct InputSize {
    std::size_t height = kDefaultHeight;
    std::size_t width = kDefaultWidth;
    friend bool operator==(const InputSize&, const InputSize&) = default;
};

template <typename T>
struct Layer {
    std::string name;
    LayerSpec spec;
    std::optional<LayerParams<T>> params;

    friend bool operator==(const Layer&, const Layer&) = default;
};

/// Per-sample output shape of one layer.
struct StageShape {
    std::string name;
    LayerKind kind;
    Shape shape;
};

template <typename T>
struct Model {
    std::size_t channels = 3;
    InputSize input;
    std::size_t num_classes = kDefaultClasses;
    std::vector<Layer<T>> layers;
    std::vector<std::string> class_names;

    Shape sample_shape() const { return Shape{channels, input.height, input.width}; }

    std::size_t param_count() const;
    std::vector<StageShape> stage_shapes() const;

    /// Every trainable tensor with its persistent name ("conv1.weight", ...),
    /// in layer order, weight before bias.
    std::vector<std::pair<std::string, Tensor<T>*>> named_parameters();
    std::vector<std::pair<std::string, const Tensor<T>*>> named_parameters() const;

    const Layer<T>& layer(const std::string& name) const;
    Layer<T>& layer(const std::string& name);

    /// Names of the convolution layers in order (conv1..conv6 for DCDM).
    std::vector<std::string> conv_layer_names() const;

    template <typename U>
    Model<U> cast() const;

    friend bool operator==(const Model&, const Model&) = default;
};

/// Display names ("Apple Scab", "Tomato (Healthy)", ...) of the first k classes.
std::vector<std::string> default_class_names(std::size_t k);

/// Layer stack with zero-filled parameters.
template <typename T>
Model<T> dcdm_architecture(std::size_t num_classes = kDefaultClasses, InputSize input = {});

/// The six-conv / three-dense DCDM network. Parameters are He-initialized
/// (Glorot for the output layer) from `seed`.
template <typename T>
Model<T> build_dcdm(std::size_t num_classes = kDefaultClasses, InputSize input = {}, std::uint64_t seed = 0);

template <typename T>
std::size_t param_count(const Model<T>& model) {
    return model.param_count();
}

template <typename T>
struct ForwardResult {
    Tensor<T> logits;                         // [N, num_classes]
    std::vector<ForwardCache<T>> caches;      // one per layer, training mode only
    std::map<std::string, Tensor<T>> taps;    // captured post-activation outputs
};

/// Runs the stack up to (not including) the softmax layer. `batch` is
/// [N,C,H,W] or a single [C,H,W]. A layer named in `capture` records its
/// output; for conv/dense layers directly followed by ReLU the post-ReLU
/// tensor is recorded.
template <typename T>
ForwardResult<T> forward(const Model<T>& model, const Tensor<T>& batch, bool training, Rng* rng = nullptr,
                         const std::vector<std::string>& capture = {});

template <typename T>
struct LossAndGradients {
    double loss = 0.0;
    Tensor<T> probs;
    std::vector<Tensor<T>> grads;  // aligned with named_parameters()
};

/// Mean cross-entropy over the batch and its gradient w.r.t. every parameter.
template <typename T>
LossAndGradients<T> compute_gradients(const Model<T>& model, const Tensor<T>& batch,
                                      std::span<const std::size_t> targets, bool training, Rng* rng);

// ---------------------------------------------------------------------------
// training

struct TrainConfig {
    std::size_t epochs = 50;
    std::size_t batch_size = 32;
    OptimizerConfig optimizer;
    double dropout_p = 0.5;
    std::uint64_t seed = 0;

    void validate() const;
};

struct EpochRecord {
    std::size_t epoch = 0;  // 1-based
    double train_loss = 0.0;
    double train_acc = 0.0;
    double val_loss = 0.0;
    double val_acc = 0.0;
    double wall_time = 0.0;  // seconds

    friend bool operator==(const EpochRecord&, const EpochRecord&) = default;
};

using TrainHistory = std::vector<EpochRecord>;

/// Indexable labeled images; loading may decode from disk.
template <typename T>
class SampleSource {
public:
    virtual ~SampleSource() = default;
    virtual std::size_t size() const = 0;
    virtual std::size_t label(std::size_t i) const = 0;
    virtual Tensor<T> load(std::size_t i) const = 0;
};

template <typename T>
class InMemorySamples final : public SampleSource<T> {
public:
    InMemorySamples() = default;
    InMemorySamples(std::vector<Tensor<T>> images, std::vector<std::size_t> labels);

    void add(Tensor<T> image, std::size_t label);
    std::size_t size() const override { return images_.size(); }
    std::size_t label(std::size_t i) const override { return labels_.at(i); }
    Tensor<T> load(std::size_t i) const override { return images_.at(i); }

private:
    std::vector<Tensor<T>> images_;
    std::vector<std::size_t> labels_;
};

/// Called after each epoch; returning false stops training early.
template <typename T>
using EpochCallback = std::function<bool(const EpochRecord&, const Model<T>&)>;

/// Shuffled mini-batch training with cross-entropy loss. The shuffle order,
/// dropout masks, and therefore the result are fixed by config.seed. A
/// non-finite loss throws NumericError naming the epoch and batch.
template <typename T>
TrainHistory train_model(Model<T>& model, const SampleSource<T>& train_set, const SampleSource<T>* val_set,
                         const TrainConfig& config, const EpochCallback<T>& on_epoch = {});

struct EvalResult {
    double loss = 0.0;
    double accuracy = 0.0;
    std::vector<std::size_t> predictions;
};

/// Inference-mode pass over a sample source.
template <typename T>
EvalResult evaluate(const Model<T>& model, const SampleSource<T>& samples, std::size_t batch_size = 16);

// ---------------------------------------------------------------------------
// prediction

struct Prediction {
    std::size_t class_index = 0;
    double confidence = 0.0;
    std::vector<std::pair<std::size_t, double>> top_k;  // descending probability, ties by lower index
    std::vector<double> probs;
};

/// Top-k from a probability vector. Ties resolve to the lowest class index.
Prediction rank_probabilities(std::span<const double> probs, std::size_t k = 5);

template <typename T>
Prediction predict(const Model<T>& model, const Tensor<T>& image, std::size_t k = 5);

}  // namespace dcdm
