#include "dcdm/model.hpp"

#include <algorithm>
#include <chrono>
#include <cmath>
#include <numeric>

#include "dcdm/dataset.hpp"

namespace dcdm {

template <typename T>
std::size_t Model<T>::param_count() const {
    std::size_t n = 0;
    for (const auto& l : layers)
        if (l.params) n += l.params->count();
    return n;
}

template <typename T>
std::vector<StageShape> Model<T>::stage_shapes() const {
    std::vector<StageShape> out;
    std::vector<std::size_t> cur{channels, input.height, input.width};
    for (const auto& l : layers) {
        const LayerSpec& s = l.spec;
        switch (s.kind) {
            case LayerKind::Conv3x3:
                if (cur.size() != 3 || cur[0] != s.in) {
                    throw ShapeError(l.name + ": expects " + std::to_string(s.in) + " input channels");
                }
                cur[0] = s.out;
                break;
            case LayerKind::MaxPool2x2:
                if (cur.size() != 3 || cur[1] < 2 || cur[2] < 2) throw ShapeError(l.name + ": input too small to pool");
                cur[1] /= 2;
                cur[2] /= 2;
                break;
            case LayerKind::Flatten:
                cur = {std::accumulate(cur.begin(), cur.end(), std::size_t{1}, std::multiplies<>())};
                break;
            case LayerKind::Dense:
                if (cur.size() != 1 || cur[0] != s.in) {
                    throw ShapeError(l.name + ": expects " + std::to_string(s.in) + " input units");
                }
                cur = {s.out};
                break;
            default:
                break;
        }
        out.push_back({l.name, s.kind, Shape(cur)});
    }
    return out;
}

template <typename T>
std::vector<std::pair<std::string, Tensor<T>*>> Model<T>::named_parameters() {
    std::vector<std::pair<std::string, Tensor<T>*>> out;
    for (auto& l : layers) {
        if (!l.params) continue;
        out.emplace_back(l.name + ".weight", &l.params->weights);
        out.emplace_back(l.name + ".bias", &l.params->bias);
    }
    return out;
}

template <typename T>
std::vector<std::pair<std::string, const Tensor<T>*>> Model<T>::named_parameters() const {
    std::vector<std::pair<std::string, const Tensor<T>*>> out;
    for (const auto& l : layers) {
        if (!l.params) continue;
        out.emplace_back(l.name + ".weight", &l.params->weights);
        out.emplace_back(l.name + ".bias", &l.params->bias);
    }
    return out;
}

template <typename T>
const Layer<T>& Model<T>::layer(const std::string& name) const {
    for (const auto& l : layers)
        if (l.name == name) return l;
    throw DataError("model has no layer named '" + name + "'");
}

template <typename T>
Layer<T>& Model<T>::layer(const std::string& name) {
    return const_cast<Layer<T>&>(std::as_const(*this).layer(name));
}

template <typename T>
std::vector<std::string> Model<T>::conv_layer_names() const {
    std::vector<std::string> names;
    for (const auto& l : layers)
        if (l.spec.kind == LayerKind::Conv3x3) names.push_back(l.name);
    return names;
}

template <typename T>
template <typename U>
Model<U> Model<T>::cast() const {
    Model<U> m;
    m.channels = channels;
    m.input = input;
    m.num_classes = num_classes;
    m.class_names = class_names;
    for (const auto& l : layers) {
        Layer<U> c{l.name, l.spec, std::nullopt};
        if (l.params) c.params = LayerParams<U>{l.params->weights.template cast<U>(), l.params->bias.template cast<U>()};
        m.layers.push_back(std::move(c));
    }
    return m;
}

std::vector<std::string> default_class_names(std::size_t k) {
    const auto& table = class_table();
    std::vector<std::string> names;
    for (std::size_t i = 0; i < k; ++i) {
        names.push_back(i < table.size() ? table[i].display_name() : "class " + std::to_string(i));
    }
    return names;
}

template <typename T>
Model<T> dcdm_architecture(std::size_t num_classes, InputSize input) {
    if (num_classes < 2) throw DataError("DCDM needs at least 2 classes, got " + std::to_string(num_classes));
    if (input.height < kMinInputSide || input.width < kMinInputSide) {
        throw ShapeError("input " + std::to_string(input.height) + "x" + std::to_string(input.width) +
                         " is too small for five 2x2 poolings (minimum " + std::to_string(kMinInputSide) + "x" +
                         std::to_string(kMinInputSide) + ")");
    }
    Model<T> m;
    m.input = input;
    m.num_classes = num_classes;
    m.class_names = default_class_names(num_classes);

    auto& L = m.layers;
    std::size_t relu_n = 0, pool_n = 0;
    auto relu = [&] { L.push_back({"relu" + std::to_string(++relu_n), LayerSpec::relu(), std::nullopt}); };
    auto pool = [&] { L.push_back({"pool" + std::to_string(++pool_n), LayerSpec::maxpool2x2(), std::nullopt}); };
    auto conv = [&](int i, std::size_t in, std::size_t out) {
        L.push_back({"conv" + std::to_string(i), LayerSpec::conv3x3(in, out), std::nullopt});
        relu();
    };

    conv(1, 3, 64);
    conv(2, 64, 64);
    pool();
    conv(3, 64, 128);
    pool();
    conv(4, 128, 256);
    pool();
    conv(5, 256, 512);
    pool();
    conv(6, 512, 512);
    pool();
    L.push_back({"flatten", LayerSpec::flatten(), std::nullopt});
    const std::size_t flat = 512 * (input.height >> 5) * (input.width >> 5);
    L.push_back({"dense1", LayerSpec::dense(flat, 1024), std::nullopt});
    relu();
    L.push_back({"dropout1", LayerSpec::dropout(0.5), std::nullopt});
    L.push_back({"dense2", LayerSpec::dense(1024, 1024), std::nullopt});
    relu();
    L.push_back({"dropout2", LayerSpec::dropout(0.5), std::nullopt});
    L.push_back({"dense3", LayerSpec::dense(1024, num_classes), std::nullopt});
    L.push_back({"softmax", LayerSpec::softmax(), std::nullopt});

    for (auto& l : L) {
        if (l.spec.has_params()) {
            l.params = LayerParams<T>{Tensor<T>(l.spec.weight_shape()), Tensor<T>(l.spec.bias_shape())};
        }
    }
    (void)m.stage_shapes();  // validates the chain
    return m;
}

template <typename T>
Model<T> build_dcdm(std::size_t num_classes, InputSize input, std::uint64_t seed) {
    Model<T> m = dcdm_architecture<T>(num_classes, input);
    Rng rng(seed);
    for (auto& l : m.layers) {
        if (!l.spec.has_params()) continue;
        const bool output_layer = l.name == "dense3";
        l.params = init_params<T>(l.spec, output_layer ? InitScheme::Glorot : InitScheme::He, rng);
    }
    return m;
}

// ---------------------------------------------------------------------------

namespace {

template <typename T>
Tensor<T> as_batch(const Model<T>& model, const Tensor<T>& x) {
    const Shape sample = model.sample_shape();
    if (x.rank() == 3 && x.shape() == sample) return x.reshaped(Shape{1, sample[0], sample[1], sample[2]});
    if (x.rank() == 4 && x.dim(1) == sample[0] && x.dim(2) == sample[1] && x.dim(3) == sample[2]) return x;
    throw ShapeError("model expects input " + sample.to_string() + " (optionally batched), got " +
                     x.shape().to_string());
}

std::size_t argmax_lowest(const double* p, std::size_t k) {
    std::size_t best = 0;
    for (std::size_t i = 1; i < k; ++i)
        if (p[i] > p[best]) best = i;
    return best;
}

template <typename T>
std::size_t argmax_lowest(const T* p, std::size_t k) {
    std::size_t best = 0;
    for (std::size_t i = 1; i < k; ++i)
        if (p[i] > p[best]) best = i;
    return best;
}

}  // namespace

template <typename T>
ForwardResult<T> forward(const Model<T>& model, const Tensor<T>& batch, bool training, Rng* rng,
                         const std::vector<std::string>& capture) {
    if (training && rng == nullptr) throw Error("forward: training mode needs a random generator for dropout");
    ForwardResult<T> r;
    Tensor<T> x = as_batch(model, batch);
    if (training) r.caches.resize(model.layers.size());
    auto wanted = [&](const std::string& name) { return std::find(capture.begin(), capture.end(), name) != capture.end(); };

    std::string pending_tap;  // conv/dense tap waiting for its ReLU
    for (std::size_t i = 0; i < model.layers.size(); ++i) {
        const Layer<T>& l = model.layers[i];
        ForwardCache<T>* cache = training ? &r.caches[i] : nullptr;
        switch (l.spec.kind) {
            case LayerKind::Conv3x3: x = conv3x3_forward(x, *l.params, cache); break;
            case LayerKind::Dense: x = dense_forward(x, *l.params, cache); break;
            case LayerKind::MaxPool2x2: x = maxpool2x2_forward(x, cache); break;
            case LayerKind::Relu: x = relu_forward(x, cache); break;
            case LayerKind::Flatten: x = flatten_forward(x, cache); break;
            case LayerKind::Dropout: {
                Rng unused(0);
                x = dropout_forward(x, l.spec.dropout_p, training, rng ? *rng : unused, cache);
                break;
            }
            case LayerKind::Softmax: break;
        }
        if (!pending_tap.empty()) {  // always the ReLU right after the tapped layer
            r.taps[pending_tap] = x;
            pending_tap.clear();
        }
        if (wanted(l.name)) {
            const bool has_act = i + 1 < model.layers.size() && model.layers[i + 1].spec.kind == LayerKind::Relu &&
                                 (l.spec.kind == LayerKind::Conv3x3 || l.spec.kind == LayerKind::Dense);
            if (has_act) {
                pending_tap = l.name;
            } else {
                r.taps[l.name] = x;
            }
        }
    }
    for (const auto& name : capture) {
        if (!r.taps.count(name)) throw DataError("forward: no layer named '" + name + "' to capture");
    }
    r.logits = std::move(x);
    return r;
}

template <typename T>
LossAndGradients<T> compute_gradients(const Model<T>& model, const Tensor<T>& batch,
                                      std::span<const std::size_t> targets, bool training, Rng* rng) {
    Rng fallback(0);
    ForwardResult<T> fr;
    if (training) {
        fr = forward(model, batch, true, rng ? rng : &fallback);
    } else {
        // Gradient of the inference-mode network: dropout disabled.
        Model<T> frozen = model;
        for (auto& l : frozen.layers)
            if (l.spec.kind == LayerKind::Dropout) l.spec.dropout_p = 0.0;
        fr = forward(frozen, batch, true, &fallback);
    }

    const std::size_t softmax_at = model.layers.size() - 1;
    if (model.layers[softmax_at].spec.kind != LayerKind::Softmax) throw Error("model must end in a softmax layer");
    SoftmaxLoss<T> sl = softmax_cross_entropy(fr.logits, targets, &fr.caches[softmax_at]);

    LossAndGradients<T> out;
    out.loss = sl.loss;
    out.probs = std::move(sl.probs);

    std::size_t n_params = 0;
    for (const auto& l : model.layers)
        if (l.params) n_params += 2;
    out.grads.resize(n_params);
    std::size_t slot = n_params;

    Tensor<T> dy(Shape{1}, T(1));
    for (std::size_t i = model.layers.size(); i-- > 0;) {
        const Layer<T>& l = model.layers[i];
        const LayerParams<T>* p = l.params ? &*l.params : nullptr;
        Gradients<T> g = backward(l.spec, fr.caches[i], dy, p);
        if (l.params) {
            slot -= 2;
            out.grads[slot] = std::move(g.dweights);
            out.grads[slot + 1] = std::move(g.dbias);
        }
        dy = std::move(g.dx);
    }
    return out;
}

// ---------------------------------------------------------------------------

void TrainConfig::validate() const {
    if (epochs < 1) throw DataError("epochs must be >= 1");
    if (batch_size < 1) throw DataError("batch_size must be >= 1");
    if (!(dropout_p >= 0.0 && dropout_p < 1.0)) throw DataError("dropout_p must be in [0,1)");
    if (!(optimizer.lr >= 0.0)) throw DataError("learning rate must be >= 0");
}

template <typename T>
InMemorySamples<T>::InMemorySamples(std::vector<Tensor<T>> images, std::vector<std::size_t> labels)
    : images_(std::move(images)), labels_(std::move(labels)) {
    if (images_.size() != labels_.size()) throw DataError("image and label counts differ");
}

template <typename T>
void InMemorySamples<T>::add(Tensor<T> image, std::size_t label) {
    images_.push_back(std::move(image));
    labels_.push_back(label);
}

namespace {

template <typename T>
Tensor<T> stack(const Model<T>& model, const SampleSource<T>& src, std::span<const std::size_t> ids) {
    const Shape sample = model.sample_shape();
    const std::size_t per = sample.numel();
    Tensor<T> batch(Shape{ids.size(), sample[0], sample[1], sample[2]});
    for (std::size_t b = 0; b < ids.size(); ++b) {
        Tensor<T> img = src.load(ids[b]);
        if (img.shape() != sample) {
            throw ShapeError("sample " + std::to_string(ids[b]) + " has shape " + img.shape().to_string() +
                             ", model expects " + sample.to_string());
        }
        std::copy(img.ptr(), img.ptr() + per, batch.ptr() + b * per);
    }
    return batch;
}

template <typename T>
void check_labels(const SampleSource<T>& src, std::size_t num_classes, const char* which) {
    for (std::size_t i = 0; i < src.size(); ++i) {
        if (src.label(i) >= num_classes) {
            throw DataError(std::string(which) + " sample " + std::to_string(i) + " has label " +
                            std::to_string(src.label(i)) + " >= num_classes " + std::to_string(num_classes));
        }
    }
}

}  // namespace

template <typename T>
EvalResult evaluate(const Model<T>& model, const SampleSource<T>& samples, std::size_t batch_size) {
    EvalResult r;
    if (samples.size() == 0) return r;
    check_labels(samples, model.num_classes, "evaluation");
    const std::size_t k = model.num_classes;
    double loss_sum = 0.0;
    std::size_t correct = 0;
    std::vector<std::size_t> ids;
    for (std::size_t start = 0; start < samples.size(); start += batch_size) {
        ids.clear();
        for (std::size_t i = start; i < std::min(samples.size(), start + batch_size); ++i) ids.push_back(i);
        std::vector<std::size_t> targets;
        for (std::size_t i : ids) targets.push_back(samples.label(i));
        ForwardResult<T> fr = forward(model, stack(model, samples, ids), false);
        SoftmaxLoss<T> sl = softmax_cross_entropy(fr.logits, std::span<const std::size_t>(targets));
        loss_sum += sl.loss * static_cast<double>(ids.size());
        for (std::size_t b = 0; b < ids.size(); ++b) {
            const std::size_t pred = argmax_lowest(sl.probs.ptr() + b * k, k);
            r.predictions.push_back(pred);
            if (pred == targets[b]) ++correct;
        }
    }
    r.loss = loss_sum / static_cast<double>(samples.size());
    r.accuracy = static_cast<double>(correct) / static_cast<double>(samples.size());
    return r;
}

template <typename T>
TrainHistory train_model(Model<T>& model, const SampleSource<T>& train_set, const SampleSource<T>* val_set,
                         const TrainConfig& config, const EpochCallback<T>& on_epoch) {
    config.validate();
    if (train_set.size() == 0) throw DataError("training set is empty");
    check_labels(train_set, model.num_classes, "training");
    if (val_set) check_labels(*val_set, model.num_classes, "validation");

    for (auto& l : model.layers)
        if (l.spec.kind == LayerKind::Dropout) l.spec.dropout_p = config.dropout_p;

    std::vector<Tensor<T>*> params;
    for (auto& [name, t] : model.named_parameters()) params.push_back(t);
    OptimizerState<T> state;
    const std::size_t k = model.num_classes;

    TrainHistory history;
    for (std::size_t epoch = 1; epoch <= config.epochs; ++epoch) {
        const auto t0 = std::chrono::steady_clock::now();
        std::seed_seq seq{static_cast<std::uint32_t>(config.seed), static_cast<std::uint32_t>(config.seed >> 32),
                          static_cast<std::uint32_t>(epoch)};
        Rng rng(seq);
        const std::vector<std::size_t> order = epoch_order(train_set.size(), config.seed, epoch - 1);

        double loss_sum = 0.0;
        std::size_t correct = 0, batch_no = 0;
        for (std::size_t start = 0; start < order.size(); start += config.batch_size, ++batch_no) {
            const std::span<const std::size_t> ids(order.data() + start,
                                                   std::min(config.batch_size, order.size() - start));
            std::vector<std::size_t> targets;
            for (std::size_t i : ids) targets.push_back(train_set.label(i));

            LossAndGradients<T> lg;
            try {
                lg = compute_gradients(model, stack(model, train_set, ids), std::span<const std::size_t>(targets),
                                       true, &rng);
            } catch (const NumericError& e) {
                throw NumericError("epoch " + std::to_string(epoch) + " batch " + std::to_string(batch_no + 1) +
                                   ": " + e.what());
            }
            if (!std::isfinite(lg.loss)) {
                throw NumericError("epoch " + std::to_string(epoch) + " batch " + std::to_string(batch_no + 1) +
                                   ": loss is not finite");
            }
            loss_sum += lg.loss * static_cast<double>(ids.size());
            for (std::size_t b = 0; b < ids.size(); ++b)
                if (argmax_lowest(lg.probs.ptr() + b * k, k) == targets[b]) ++correct;

            std::vector<const Tensor<T>*> grads;
            for (const auto& g : lg.grads) grads.push_back(&g);
            optimizer_step(std::span<Tensor<T>* const>(params), std::span<const Tensor<T>* const>(grads), state,
                           config.optimizer);
        }
        for (Tensor<T>* p : params) {
            if (!p->all_finite()) {
                throw NumericError("epoch " + std::to_string(epoch) + ": parameters became non-finite");
            }
        }

        EpochRecord rec;
        rec.epoch = epoch;
        rec.train_loss = loss_sum / static_cast<double>(order.size());
        rec.train_acc = static_cast<double>(correct) / static_cast<double>(order.size());
        if (val_set && val_set->size() > 0) {
            const EvalResult ev = evaluate(model, *val_set, config.batch_size);
            rec.val_loss = ev.loss;
            rec.val_acc = ev.accuracy;
        }
        rec.wall_time = std::chrono::duration<double>(std::chrono::steady_clock::now() - t0).count();
        history.push_back(rec);
        if (on_epoch && !on_epoch(rec, model)) break;
    }
    return history;
}

// ---------------------------------------------------------------------------

Prediction rank_probabilities(std::span<const double> probs, std::size_t k) {
    if (probs.empty()) throw DataError("rank_probabilities: empty probability vector");
    Prediction p;
    p.probs.assign(probs.begin(), probs.end());
    p.class_index = argmax_lowest(probs.data(), probs.size());
    p.confidence = probs[p.class_index];
    std::vector<std::size_t> order(probs.size());
    std::iota(order.begin(), order.end(), std::size_t{0});
    std::stable_sort(order.begin(), order.end(), [&](std::size_t a, std::size_t b) { return probs[a] > probs[b]; });
    order.resize(std::min(k, order.size()));
    for (std::size_t i : order) p.top_k.emplace_back(i, probs[i]);
    return p;
}

template <typename T>
Prediction predict(const Model<T>& model, const Tensor<T>& image, std::size_t k) {
    if (image.shape() != model.sample_shape()) {
        throw ShapeError("predict expects " + model.sample_shape().to_string() + ", got " + image.shape().to_string());
    }
    ForwardResult<T> fr = forward(model, image, false);
    const Tensor<double> logits = fr.logits.template cast<double>().reshaped(Shape{model.num_classes});
    const Tensor<double> probs = softmax(logits);
    return rank_probabilities(probs.data(), k);
}

// ---------------------------------------------------------------------------

#define DCDM_INSTANTIATE_MODEL(T)                                                                              \
    template struct Model<T>;                                                                                  \
    template Model<T> dcdm_architecture(std::size_t, InputSize);                                               \
    template Model<T> build_dcdm(std::size_t, InputSize, std::uint64_t);                                      \
    template ForwardResult<T> forward(const Model<T>&, const Tensor<T>&, bool, Rng*, const std::vector<std::string>&); \
    template LossAndGradients<T> compute_gradients(const Model<T>&, const Tensor<T>&, std::span<const std::size_t>, \
                                                   bool, Rng*);                                                \
    template class InMemorySamples<T>;                                                                         \
    template EvalResult evaluate(const Model<T>&, const SampleSource<T>&, std::size_t);                        \
    template TrainHistory train_model(Model<T>&, const SampleSource<T>&, const SampleSource<T>*, const TrainConfig&, \
                                      const EpochCallback<T>&);                                                \
    template Prediction predict(const Model<T>&, const Tensor<T>&, std::size_t);

DCDM_INSTANTIATE_MODEL(float)
DCDM_INSTANTIATE_MODEL(double)

template Model<double> Model<float>::cast<double>() const;
template Model<float> Model<double>::cast<float>() const;
template Model<float> Model<float>::cast<float>() const;
template Model<double> Model<double>::cast<double>() const;

}  // namespace dcdm
