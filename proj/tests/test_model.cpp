#include <gtest/gtest.h>

#include <random>

#include "dcdm/model.hpp"
#include "support.hpp"

using namespace dcdm;
namespace ts = testsupport;

namespace {

// Independent count: weights + biases of every conv and dense layer.
std::size_t parameter_oracle(std::size_t classes, InputSize hw) {
    std::size_t total = 0;
    std::size_t in = 3;
    for (std::size_t out : {64, 64, 128, 256, 512, 512}) {
        total += out * in * 3 * 3 + out;
        in = out;
    }
    std::size_t h = hw.height, w = hw.width;
    for (int pool = 0; pool < 5; ++pool) {
        h /= 2;
        w /= 2;
    }
    std::size_t units = 512 * h * w;
    for (std::size_t out : {std::size_t{1024}, std::size_t{1024}, classes}) {
        total += units * out + out;
        units = out;
    }
    return total;
}

}  // namespace

TEST(Architecture, DefaultParameterCount) {
    const auto m = dcdm_architecture<float>();
    EXPECT_EQ(m.param_count(), 51161305u);
    EXPECT_EQ(parameter_oracle(25, {272, 363}), 51161305u);
    EXPECT_EQ(param_count(m), m.param_count());
}

TEST(Architecture, ReducedBuildsMatchOracle) {
    for (std::size_t k : {2, 4, 10}) {
        for (InputSize hw : {InputSize{32, 32}, InputSize{64, 64}, InputSize{100, 70}, InputSize{63, 129}}) {
            EXPECT_EQ(dcdm_architecture<float>(k, hw).param_count(), parameter_oracle(k, hw))
                << k << " classes " << hw.height << "x" << hw.width;
        }
    }
}

TEST(Architecture, LayerNamesAndOrder) {
    const auto m = dcdm_architecture<float>();
    std::vector<std::string> names;
    for (const auto& l : m.layers) names.push_back(l.name);
    const std::vector<std::string> expected = {
        "conv1", "relu1", "conv2", "relu2", "pool1", "conv3",  "relu3",    "pool2", "conv4",    "relu4",
        "pool3", "conv5", "relu5", "pool4", "conv6", "relu6",  "pool5",    "flatten", "dense1", "relu7",
        "dropout1", "dense2", "relu8", "dropout2", "dense3", "softmax"};
    EXPECT_EQ(names, expected);
    EXPECT_EQ(m.conv_layer_names(), (std::vector<std::string>{"conv1", "conv2", "conv3", "conv4", "conv5", "conv6"}));
    EXPECT_EQ(m.layer("dropout1").spec.dropout_p, 0.5);
    EXPECT_THROW(m.layer("conv7"), DataError);
}

TEST(Architecture, FlattenSizeFollowsInput) {
    for (InputSize hw : {InputSize{32, 32}, InputSize{272, 363}, InputSize{95, 64}}) {
        const auto shapes = dcdm_architecture<float>(3, hw).stage_shapes();
        const auto it = std::find_if(shapes.begin(), shapes.end(), [](const auto& s) { return s.name == "flatten"; });
        ASSERT_NE(it, shapes.end());
        EXPECT_EQ(it->shape, Shape({512 * (hw.height >> 5) * (hw.width >> 5)}));
        EXPECT_EQ(shapes.back().shape, Shape({3}));
    }
}

TEST(Architecture, RejectsTooSmallInputAndSingleClass) {
    EXPECT_THROW(dcdm_architecture<float>(25, {31, 64}), ShapeError);
    EXPECT_THROW(dcdm_architecture<float>(1, {64, 64}), DataError);
}

TEST(Architecture, DefaultClassNames) {
    const auto names = default_class_names(25);
    ASSERT_EQ(names.size(), 25u);
    EXPECT_EQ(names.front(), "Apple Scab");
    EXPECT_EQ(names.back(), "Tomato (Healthy)");
    EXPECT_EQ(default_class_names(27)[26], "class 26");
}

TEST(Build, SeededAndInitialized) {
    const auto a = build_dcdm<float>(3, {32, 32}, 5);
    const auto b = build_dcdm<float>(3, {32, 32}, 5);
    const auto c = build_dcdm<float>(3, {32, 32}, 6);
    EXPECT_EQ(a, b);
    EXPECT_FALSE(a == c);
    for (const auto& [name, t] : a.named_parameters()) {
        EXPECT_TRUE(t->all_finite()) << name;
        if (name.ends_with(".bias")) {
            for (float v : t->data()) ASSERT_EQ(v, 0.0f) << name;
        }
    }
    EXPECT_EQ(a.named_parameters().size(), 18u);
}

TEST(Forward, LogitShapesAndCaptures) {
    const auto m = build_dcdm<float>(4, {40, 36}, 1);
    std::mt19937_64 g(1);
    const auto one = ts::random_tensor<float>(m.sample_shape(), g, 0, 1);
    const auto r = forward(m, one, false, nullptr, {"conv1", "pool5", "dense3"});
    EXPECT_EQ(r.logits.shape(), Shape({1, 4}));
    EXPECT_EQ(r.taps.at("conv1").shape(), Shape({1, 64, 40, 36}));
    for (float v : r.taps.at("conv1").data()) ASSERT_GE(v, 0.0f);  // post-ReLU
    EXPECT_EQ(r.taps.at("pool5").shape(), Shape({1, 512, 1, 1}));
    EXPECT_THROW(forward(m, one, false, nullptr, {"nope"}), DataError);
    EXPECT_THROW(forward(m, Tensor<float>(Shape{3, 41, 36}), false), ShapeError);
}

TEST(Forward, BatchRowsEqualSingleImages) {
    const auto m = build_dcdm<float>(3, {32, 32}, 2);
    const auto s = ts::synthetic_samples<float>(3, 1, {32, 32});
    Tensor<float> batch(Shape{3, 3, 32, 32});
    for (std::size_t i = 0; i < 3; ++i) std::copy_n(s.load(i).ptr(), 3 * 32 * 32, batch.ptr() + i * 3 * 32 * 32);
    const auto all = forward(m, batch, false).logits;
    for (std::size_t i = 0; i < 3; ++i) {
        const auto one = forward(m, s.load(i), false).logits;
        for (std::size_t k = 0; k < 3; ++k) EXPECT_NEAR(all[i * 3 + k], one[k], 1e-5f);
    }
}

TEST(Gradients, WholeModelMatchesFiniteDifferences) {
    auto m = build_dcdm<double>(3, {32, 32}, 21);
    // Non-zero biases so every parameter class is exercised.
    std::mt19937_64 g(21);
    for (auto& [name, t] : m.named_parameters())
        if (name.ends_with(".bias")) *t = ts::random_tensor<double>(t->shape(), g, -0.05, 0.05);
    // Continuous random pixels: flat image regions would put exact ties into
    // pooling windows, where the loss is not differentiable.
    const auto batch = ts::random_tensor<double>(Shape{2, 3, 32, 32}, g, 0.0, 1.0);
    const std::vector<std::size_t> targets = {0, 2};

    const auto lg = compute_gradients<double>(m, batch, targets, false, nullptr);
    auto params = m.named_parameters();
    ASSERT_EQ(lg.grads.size(), params.size());
    auto loss = [&] { return compute_gradients<double>(m, batch, targets, false, nullptr).loss; };
    // Tens of thousands of ReLU and pooling units sit downstream of conv1; a
    // 1e-5 stencil regularly straddles one of their kinks, a 1e-7 one does not.
    const double kEps = 1e-7;
    std::size_t checked = 0;
    for (std::size_t p = 0; p < params.size(); ++p) {
        Tensor<double>& t = *params[p].second;
        std::uniform_int_distribution<std::size_t> pick(0, t.numel() - 1);
        for (int i = 0; i < 3; ++i) {
            const std::size_t idx = pick(g);
            const double saved = t[idx];
            t[idx] = saved + kEps;
            const double up = loss();
            t[idx] = saved - kEps;
            const double down = loss();
            t[idx] = saved;
            const double numeric = (up - down) / (2 * kEps);
            EXPECT_LT(ts::relative_error(lg.grads[p][idx], numeric), 1e-4)
                << params[p].first << "[" << idx << "] analytic " << lg.grads[p][idx] << " numeric " << numeric;
            ++checked;
        }
    }
    EXPECT_EQ(checked, 54u);
}

TEST(Training, ZeroLearningRateIsIdentity) {
    auto m = build_dcdm<float>(2, {32, 32}, 3);
    const auto before = m;
    const auto s = ts::synthetic_samples<float>(2, 3, {32, 32});
    TrainConfig cfg;
    cfg.epochs = 2;
    cfg.batch_size = 4;
    cfg.optimizer.lr = 0.0;
    const auto h = train_model<float>(m, s, &s, cfg);
    EXPECT_EQ(m, before);
    ASSERT_EQ(h.size(), 2u);
    EXPECT_EQ(h[0].epoch, 1u);
    EXPECT_DOUBLE_EQ(h[0].val_loss, h[1].val_loss);
}

TEST(Training, SeededRunsAreReproducible) {
    const auto s = ts::synthetic_samples<float>(2, 3, {32, 32});
    TrainConfig cfg;
    cfg.epochs = 2;
    cfg.batch_size = 4;
    cfg.optimizer.lr = 1e-3;
    cfg.seed = 99;
    auto a = build_dcdm<float>(2, {32, 32}, 1), b = a;
    auto ha = train_model<float>(a, s, nullptr, cfg);
    auto hb = train_model<float>(b, s, nullptr, cfg);
    EXPECT_EQ(a, b);
    for (std::size_t i = 0; i < ha.size(); ++i) EXPECT_EQ(ha[i].train_loss, hb[i].train_loss);
}

TEST(Training, OverfitsTinySet) {
    const auto s = ts::synthetic_samples<float>(2, 4, {32, 32});
    auto m = build_dcdm<float>(2, {32, 32}, 4);
    TrainConfig cfg;
    cfg.epochs = 40;
    cfg.batch_size = 4;
    cfg.optimizer.lr = 3e-4;
    std::size_t epochs = 0;
    train_model<float>(m, s, nullptr, cfg, [&](const EpochRecord& r, const Model<float>& model) {
        epochs = r.epoch;
        return evaluate(model, s).accuracy < 1.0;
    });
    EXPECT_EQ(evaluate(m, s).accuracy, 1.0) << "after " << epochs << " epochs";
}

TEST(Training, CallbackStopsEarly) {
    const auto s = ts::synthetic_samples<float>(2, 2, {32, 32});
    auto m = build_dcdm<float>(2, {32, 32}, 4);
    TrainConfig cfg;
    cfg.epochs = 10;
    const auto h = train_model<float>(m, s, nullptr, cfg, [](const EpochRecord& r, const Model<float>&) { return r.epoch < 2; });
    EXPECT_EQ(h.size(), 2u);
}

TEST(Training, NonFiniteInputRaisesNumericError) {
    InMemorySamples<float> s;
    Tensor<float> bad(Shape{3, 32, 32}, 0.5f);
    bad[7] = std::numeric_limits<float>::quiet_NaN();
    s.add(bad, 0);
    s.add(Tensor<float>(Shape{3, 32, 32}, 0.1f), 1);
    auto m = build_dcdm<float>(2, {32, 32}, 4);
    TrainConfig cfg;
    cfg.epochs = 1;
    try {
        train_model<float>(m, s, nullptr, cfg);
        FAIL() << "expected NumericError";
    } catch (const NumericError& e) {
        EXPECT_NE(std::string(e.what()).find("epoch 1"), std::string::npos) << e.what();
    }
}

TEST(Training, ConfigValidation) {
    TrainConfig cfg;
    cfg.batch_size = 0;
    EXPECT_THROW(cfg.validate(), DataError);
    cfg = {};
    cfg.dropout_p = 1.0;
    EXPECT_THROW(cfg.validate(), DataError);
    cfg = {};
    cfg.optimizer.lr = -1;
    EXPECT_THROW(cfg.validate(), DataError);
}

TEST(Precision, DoubleCastAgreesWithFloat) {
    const auto mf = build_dcdm<float>(5, {32, 48}, 8);
    const auto md = mf.cast<double>();
    EXPECT_EQ(md.param_count(), mf.param_count());
    std::size_t agree = 0;
    for (std::size_t c = 0; c < 5; ++c) {
        for (std::size_t v = 0; v < 4; ++v) {
            const auto img = ts::synthetic_leaf(c, v, 48, 32);
            const auto pf = predict(mf, to_tensor<float>(img));
            const auto pd = predict(md, to_tensor<double>(img));
            agree += pf.class_index == pd.class_index;
            for (std::size_t k = 0; k < 5; ++k) EXPECT_NEAR(pf.probs[k], pd.probs[k], 1e-4);
        }
    }
    EXPECT_EQ(agree, 20u);
    EXPECT_EQ(md.cast<float>(), mf);
}

TEST(Prediction, RankingAndTies) {
    const std::vector<double> probs = {0.1, 0.3, 0.3, 0.05, 0.25};
    const auto p = rank_probabilities(probs, 3);
    EXPECT_EQ(p.class_index, 1u);
    EXPECT_DOUBLE_EQ(p.confidence, 0.3);
    ASSERT_EQ(p.top_k.size(), 3u);
    EXPECT_EQ(p.top_k[0].first, 1u);
    EXPECT_EQ(p.top_k[1].first, 2u);
    EXPECT_EQ(p.top_k[2].first, 4u);
    EXPECT_EQ(rank_probabilities(probs, 10).top_k.size(), 5u);
}

TEST(Prediction, ProbabilitiesSumToOne) {
    const auto m = build_dcdm<float>(25, {32, 32}, 8);
    const auto p = predict(m, to_tensor<float>(ts::synthetic_leaf(0, 0, 32, 32)));
    double sum = 0;
    for (double v : p.probs) sum += v;
    EXPECT_NEAR(sum, 1.0, 1e-5);
    EXPECT_EQ(p.top_k.size(), 5u);
    for (std::size_t i = 1; i < p.top_k.size(); ++i) EXPECT_GE(p.top_k[i - 1].second, p.top_k[i].second);
}
