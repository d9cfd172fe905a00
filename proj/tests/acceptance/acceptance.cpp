// Acceptance checks, one PASS/FAIL line per criterion.
//
//   dcdm_acceptance            criteria 1-9
//   dcdm_acceptance --only N   a single criterion (10 is only run this way)

#include <chrono>
#include <cmath>
#include <cstdio>
#include <cstring>
#include <functional>
#include <map>
#include <numeric>
#include <set>
#include <sstream>
#include <string>
#include <thread>
#include <vector>

#include <httplib.h>
#include <json.hpp>

#include "dcdm/dataset.hpp"
#include "dcdm/imaging.hpp"
#include "dcdm/metrics.hpp"
#include "dcdm/model.hpp"
#include "dcdm/serialize.hpp"
#include "dcdm/service.hpp"
#include "../support.hpp"

using namespace dcdm;
using json = nlohmann::json;
namespace ts = testsupport;

namespace {

constexpr int kSkip = 77;

struct Outcome {
    bool pass = false;
    std::string detail;
    bool skipped = false;
};

std::string fmt(const char* f, auto... args) {
    char buf[512];
    std::snprintf(buf, sizeof buf, f, args...);
    return buf;
}

// 1 ---------------------------------------------------------------------------

std::size_t summed_parameter_oracle(std::size_t classes, InputSize hw) {
    // Conv: (3*3*in + 1) * out; dense: (in + 1) * out. Written out by hand.
    const std::size_t convs[][2] = {{3, 64}, {64, 64}, {64, 128}, {128, 256}, {256, 512}, {512, 512}};
    std::size_t total = 0;
    for (const auto& c : convs) total += (9 * c[0] + 1) * c[1];
    const std::size_t flat = 512 * (hw.height / 32) * (hw.width / 32);
    total += (flat + 1) * 1024;
    total += (1024 + 1) * 1024;
    total += (1024 + 1) * classes;
    return total;
}

Outcome criterion_param_count() {
    const Model<float> m = dcdm_architecture<float>();
    const std::size_t reported = m.param_count();
    const std::size_t oracle = summed_parameter_oracle(kDefaultClasses, {});
    return {reported == 51161305 && oracle == 51161305,
            fmt("build reports %zu, layer-by-layer oracle %zu, expected 51161305", reported, oracle)};
}

// 2 ---------------------------------------------------------------------------

Outcome criterion_shape_chain() {
    const std::vector<Shape> expected = {
        Shape{64, 272, 363}, Shape{64, 136, 181}, Shape{128, 136, 181}, Shape{128, 68, 90},
        Shape{256, 68, 90},  Shape{256, 34, 45},  Shape{512, 34, 45},   Shape{512, 17, 22},
        Shape{512, 17, 22},  Shape{512, 8, 11},   Shape{45056}};
    // Block outputs: after conv2 (pre-pool), then each (pool, conv) pair, then flatten.
    const std::vector<std::string> names = {"conv2", "pool1", "conv3", "pool2", "conv4", "pool3",
                                            "conv5", "pool4", "conv6", "pool5", "flatten"};
    const Model<float> m = dcdm_architecture<float>();
    std::map<std::string, Shape> shapes;
    for (const auto& s : m.stage_shapes()) shapes[s.name] = s.shape;
    std::size_t matched = 0;
    std::string first_mismatch;
    for (std::size_t i = 0; i < names.size(); ++i) {
        if (shapes.count(names[i]) && shapes[names[i]] == expected[i]) {
            ++matched;
        } else if (first_mismatch.empty()) {
            first_mismatch = " first mismatch at " + names[i];
        }
    }
    return {matched == expected.size(), fmt("%zu/11 stage shapes match%s", matched, first_mismatch.c_str())};
}

// 3 ---------------------------------------------------------------------------

Outcome criterion_gradients() {
    constexpr std::size_t kInstances = 20;
    double worst = 0.0;
    std::string worst_layer;
    std::size_t checked = 0;
    for (LayerKind kind : ts::all_layer_kinds()) {
        for (std::size_t i = 0; i < kInstances; ++i) {
            const double e = ts::layer_gradient_error(kind, 1000 * static_cast<std::uint64_t>(kind) + i);
            if (e > worst) {
                worst = e;
                worst_layer = to_string(kind);
            }
            ++checked;
        }
    }
    return {worst < 1e-4, fmt("%zu instances over 7 layer kinds, max relative error %.2e (%s)", checked, worst,
                              worst_layer.c_str())};
}

// 4 ---------------------------------------------------------------------------

Outcome criterion_learning() {
    const InputSize hw{64, 64};
    const auto samples = ts::synthetic_samples<float>(4, 10, hw);
    Model<float> model = build_dcdm<float>(4, hw, 7);
    TrainConfig cfg;
    cfg.epochs = 100;
    cfg.batch_size = 8;
    cfg.optimizer.lr = 1e-4;
    cfg.seed = 7;
    // Keep going for a while after the target is hit so the loss trend is
    // observed over a meaningful window. The trend is read from the loss over
    // the whole training set in inference mode; the running mini-batch loss
    // carries dropout noise far above 5% once it is small.
    constexpr std::size_t kMinEpochs = 15;
    double final_acc = 0.0;
    std::size_t reached_at = 0;
    std::vector<double> losses;
    const auto history = train_model<float>(model, samples, nullptr, cfg, [&](const EpochRecord& r, const Model<float>& m) {
        const EvalResult ev = evaluate(m, samples);
        final_acc = ev.accuracy;
        losses.push_back(ev.loss);
        if (final_acc >= 0.99 && reached_at == 0) reached_at = r.epoch;
        return reached_at == 0 || r.epoch < kMinEpochs;
    });
    bool trend_ok = losses.size() > 5;
    std::size_t bad_epoch = 0;
    double running_min = trend_ok ? losses[4] : 0.0;
    for (std::size_t e = 5; e < losses.size(); ++e) {
        if (losses[e] > 1.05 * running_min) {
            trend_ok = false;
            bad_epoch = e + 1;
            break;
        }
        running_min = std::min(running_min, losses[e]);
    }
    std::string series;
    for (double l : losses) series += fmt("%s%.2g", series.empty() ? "" : " ", l);
    return {reached_at > 0 && reached_at <= 100 && trend_ok,
            fmt("train accuracy %.1f%% after %zu epochs (99%% first reached at epoch %zu); loss trend %s (%s)",
                100.0 * final_acc, history.size(), reached_at,
                trend_ok ? "non-increasing" : fmt("rises at epoch %zu", bad_epoch).c_str(), series.c_str())};
}

// 5 ---------------------------------------------------------------------------

Outcome criterion_metrics() {
    std::mt19937_64 rng(5);
    std::size_t mismatches = 0;
    for (int trial = 0; trial < 200; ++trial) {
        const std::size_t k = std::uniform_int_distribution<std::size_t>(2, 10)(rng);
        const std::size_t n = std::uniform_int_distribution<std::size_t>(1, 400)(rng);
        std::uniform_int_distribution<std::size_t> cls(0, k - 1);
        std::vector<std::pair<std::size_t, std::size_t>> pairs;
        ConfusionMatrix cm(k);
        for (std::size_t i = 0; i < n; ++i) {
            // Bias toward the diagonal so precision and recall vary.
            const std::size_t t = cls(rng);
            const std::size_t p = std::bernoulli_distribution(0.6)(rng) ? t : cls(rng);
            pairs.emplace_back(t, p);
            cm.update(t, p);
        }
        const MetricsReport r = compute_metrics(cm);
        double sum_p = 0.0, sum_r = 0.0;
        for (std::size_t c = 0; c < k; ++c) {
            std::uint64_t tp = 0, fp = 0, fn = 0, tn = 0;
            for (const auto& [t, p] : pairs) {
                if (t == c && p == c) ++tp;
                else if (t != c && p == c) ++fp;
                else if (t == c && p != c) ++fn;
                else ++tn;
            }
            const double precision = tp + fp ? double(tp) / double(tp + fp) : 0.0;
            const double recall = tp + fn ? double(tp) / double(tp + fn) : 0.0;
            const double f1 = precision + recall > 0 ? 2.0 * precision * recall / (precision + recall) : 0.0;
            const double accuracy = double(tp + tn) / double(n);
            const ClassMetrics& m = r.per_class[c];
            if (m.tp != tp || m.fp != fp || m.fn != fn || m.tn != tn || m.precision != precision ||
                m.recall != recall || m.f1 != f1 || m.accuracy != accuracy)
                ++mismatches;
            sum_p += precision;
            sum_r += recall;
        }
        const double macro_p = sum_p / double(k), macro_r = sum_r / double(k);
        if (r.macro_precision != macro_p || r.macro_recall != macro_r ||
            r.macro_f1 != 2.0 * macro_p * macro_r / (macro_p + macro_r))
            ++mismatches;
    }
    const double f1 = f1_score(0.9838, 0.9798);
    const bool f1_ok = std::abs(f1 - 0.9817) <= 0.0002;
    return {mismatches == 0 && f1_ok,
            fmt("200 random matrices, %zu mismatches against enumeration; f1(0.9838, 0.9798) = %.5f", mismatches, f1)};
}

// 6 ---------------------------------------------------------------------------

Outcome criterion_augmentation() {
    std::vector<std::string> failures;
    const std::vector<std::pair<std::size_t, std::size_t>> sizes = {{97, 61}, {64, 64}, {363, 272}, {1, 5}};
    for (std::size_t s = 0; s < sizes.size(); ++s) {
        const ImageBuffer img = ts::synthetic_leaf(s, s, sizes[s].first, sizes[s].second);
        AugmentSpec h{AugmentOp::HFlip}, v{AugmentOp::VFlip}, rot{AugmentOp::Rotate};
        if (augment(augment(img, h), h) != img) failures.push_back("hflip involution");
        if (augment(augment(img, v), v) != img) failures.push_back("vflip involution");
        rot.angle_deg = 0.0;
        if (augment(img, rot) != img) failures.push_back("rotate(0) identity");
        for (AugmentOp op : all_augment_ops()) {
            for (std::uint64_t seed : {1u, 2u, 3u}) {
                const AugmentSpec spec = random_spec(op, seed);
                const ImageBuffer a = augment(img, spec);
                const ImageBuffer b = augment(img, random_spec(op, seed));
                if (a.width != img.width || a.height != img.height) failures.push_back(to_string(op) + " size");
                if (a != b) failures.push_back(to_string(op) + " determinism");
            }
        }
    }
    std::string detail = fmt("%zu ops on %zu image sizes", all_augment_ops().size(), sizes.size());
    if (!failures.empty()) detail += "; failed: " + failures.front();
    return {failures.empty(), detail};
}

// 7 ---------------------------------------------------------------------------

DatasetManifest table_sized_manifest() {
    DatasetManifest m;
    for (const ClassEntry& e : class_table()) {
        const std::size_t n = e.training_images + e.validation_images;
        for (std::size_t i = 0; i < n; ++i)
            m.records.push_back({e.slug() + "/img" + std::to_string(i) + ".jpg", e.index, SplitTag::Unassigned,
                                 e.slug() + std::to_string(i)});
    }
    return m;
}

Outcome criterion_split() {
    const DatasetManifest base = table_sized_manifest();
    const std::vector<std::pair<double, std::size_t>> cases = {{0.8, 40000}, {0.7, 35000}, {0.6, 30000}};
    std::vector<std::string> failures;
    std::string counts;
    if (base.records.size() != 50000) failures.push_back("manifest has " + std::to_string(base.records.size()));
    for (const auto& [fraction, expected_train] : cases) {
        const auto a = split(base, fraction, 42).manifest;
        const auto b = split(base, fraction, 42).manifest;
        const std::size_t train = a.count(SplitTag::Train), test = a.count(SplitTag::Test);
        counts += fmt("%s%zu/%zu", counts.empty() ? "" : ", ", train, test);
        if (train != expected_train || test != 50000 - expected_train) failures.push_back("totals");
        if (a != b) failures.push_back("determinism");
        // Disjoint: each record has exactly one tag and the path sets do not meet.
        std::set<std::string> train_paths;
        for (const auto& r : a.records)
            if (r.split == SplitTag::Train) train_paths.insert(r.path);
        for (const auto& r : a.records)
            if (r.split == SplitTag::Test && train_paths.count(r.path)) failures.push_back("overlap");
        std::vector<std::size_t> per_class(kDefaultClasses, 0), class_size(kDefaultClasses, 0);
        for (const auto& r : a.records) {
            ++class_size[r.class_index];
            if (r.split == SplitTag::Train) ++per_class[r.class_index];
        }
        for (std::size_t c = 0; c < kDefaultClasses; ++c)
            if (std::abs(double(per_class[c]) - fraction * double(class_size[c])) > 1.0)
                failures.push_back("stratification class " + std::to_string(c));
    }
    std::string detail = "train/test " + counts;
    if (!failures.empty()) detail += "; failed: " + failures.front();
    return {failures.empty(), detail};
}

// 8 ---------------------------------------------------------------------------

Outcome criterion_serialization() {
    ts::TempDir dir("dcdm_accept");
    std::vector<std::string> failures;
    std::size_t rejected = 0, cases = 0;
    {
        const Model<float> model = build_dcdm<float>(kDefaultClasses, {}, 3);
        const auto path = dir / "default.dcdm";
        save_weights(model, path);
        const Model<float> loaded = load_weights<float>(path);
        if (!(loaded == model)) failures.push_back("round trip differs");
        if (serialize_weights(loaded) != read_file_bytes(path)) failures.push_back("re-serialized bytes differ");
    }

    // Corruptions of a small model file; the target must keep its contents.
    const Model<float> small = build_dcdm<float>(3, {32, 32}, 4);
    const std::vector<std::uint8_t> good = serialize_weights(small);
    std::vector<std::pair<std::string, std::vector<std::uint8_t>>> corrupt;
    auto with = [&](const std::string& what, auto edit) {
        auto bytes = good;
        edit(bytes);
        corrupt.emplace_back(what, std::move(bytes));
    };
    with("bad magic", [](auto& b) { b[0] = 'X'; });
    with("bad version", [](auto& b) { b[4] = 99; });
    with("truncated header", [](auto& b) { b.resize(10); });
    with("truncated data", [](auto& b) { b.resize(b.size() / 2); });
    with("trailing bytes", [](auto& b) { b.push_back(0); });
    with("wrong class count", [](auto& b) { b[8] = 7; });
    with("renamed tensor", [](auto& b) {
        const char* key = "conv1.weight";
        auto it = std::search(b.begin(), b.end(), key, key + std::strlen(key));
        *(it + 4) = 'X';
    });
    with("non-finite weight", [](auto& b) {
        const float nan = std::numeric_limits<float>::quiet_NaN();
        std::memcpy(b.data() + b.size() - 4, &nan, 4);
    });
    with("empty", [](auto& b) { b.clear(); });

    for (const auto& [what, bytes] : corrupt) {
        ++cases;
        const auto path = dir / "corrupt.dcdm";
        write_file_bytes(path, bytes);
        Model<float> target = small;
        try {
            target = load_weights<float>(path);
            failures.push_back("accepted " + what);
        } catch (const FormatError&) {
            ++rejected;
        } catch (const std::exception& e) {
            failures.push_back(what + " raised a non-format error: " + e.what());
        }
        if (!(target == small)) failures.push_back(what + " left partial state");
    }
    std::string detail = fmt("default model round trip, %zu/%zu corrupt files rejected", rejected, cases);
    if (!failures.empty()) detail += "; failed: " + failures.front();
    return {failures.empty(), detail};
}

// 9 ---------------------------------------------------------------------------

Model<float> overfit_tiny_model(const InMemorySamples<float>& samples) {
    Model<float> model = build_dcdm<float>(2, {32, 32}, 11);
    TrainConfig cfg;
    cfg.epochs = 60;
    cfg.batch_size = 4;
    cfg.optimizer.lr = 3e-4;
    cfg.seed = 11;
    train_model<float>(model, samples, nullptr, cfg, [&](const EpochRecord&, const Model<float>& m) {
        return evaluate(m, samples).accuracy < 1.0;
    });
    return model;
}

bool has_keys(const json& j, std::initializer_list<const char*> keys) {
    for (const char* k : keys)
        if (!j.contains(k)) return false;
    return true;
}

Outcome criterion_service() {
    std::vector<std::string> failures;
    const InputSize hw{32, 32};
    const auto samples = ts::synthetic_samples<float>(2, 4, hw);
    Model<float> model = overfit_tiny_model(samples);
    const bool overfit = evaluate(model, samples).accuracy == 1.0;
    if (!overfit) failures.push_back("tiny model did not overfit");
    model.class_names = {"Apple Scab", "Tomato (Healthy)"};
    auto engine = std::make_shared<const InferenceEngine>(std::move(model));

    ServiceConfig cfg;
    cfg.port = 0;
    cfg.threads = 4;
    cfg.max_request_bytes = 64 * 1024;
    InferenceServer server(engine, cfg);
    const int port = server.start();
    httplib::Client client("127.0.0.1", port);
    client.set_read_timeout(30, 0);

    if (auto r = client.Get("/v1/health"); !r || r->status != 200) {
        failures.push_back("health status");
    } else {
        const json j = json::parse(r->body);
        if (j != json{{"status", "ok"}, {"model_loaded", true}}) failures.push_back("health body " + r->body);
    }
    if (auto r = client.Get("/v1/model"); !r || r->status != 200) {
        failures.push_back("model status");
    } else {
        const json j = json::parse(r->body);
        if (!has_keys(j, {"param_count", "num_classes", "input_hw", "fingerprint"}) ||
            j["param_count"] != engine->model().param_count() || j["num_classes"] != 2 ||
            j["input_hw"] != json::array({32, 32}) || j["fingerprint"] != engine->fingerprint())
            failures.push_back("model body " + r->body);
    }

    // Training images, sent as PNG, come back with their training labels.
    std::vector<std::vector<std::uint8_t>> payloads;
    std::vector<std::size_t> labels;
    for (std::size_t i = 0; i < samples.size(); ++i) {
        payloads.push_back(encode_png(from_tensor(samples.load(i))));
        labels.push_back(samples.label(i));
    }
    std::vector<json> reference;
    for (std::size_t i = 0; i < payloads.size(); ++i) {
        const std::string body(payloads[i].begin(), payloads[i].end());
        auto r = client.Post("/v1/classify", body, "image/png");
        if (!r || r->status != 200) {
            failures.push_back("classify status");
            reference.emplace_back();
            continue;
        }
        json j = json::parse(r->body);
        if (!has_keys(j, {"class_index", "class_name", "plant", "disease", "confidence", "top_k", "latency_ms",
                          "model_fingerprint"}) ||
            j["top_k"].size() != 2 || !has_keys(j["top_k"][0], {"index", "name", "prob"}))
            failures.push_back("classify schema " + r->body);
        if (j.value("class_index", std::size_t{99}) != labels[i]) failures.push_back("overfit label mismatch");
        j.erase("latency_ms");
        reference.push_back(j);
    }

    // Error contract.
    if (auto r = client.Post("/v1/classify", "", "image/png"); !r || r->status != 400) failures.push_back("empty != 400");
    if (auto r = client.Post("/v1/classify", "hello", "text/plain"); !r || r->status != 415)
        failures.push_back("text/plain != 415");
    if (auto r = client.Post("/v1/classify", std::string(1000, 'x'), "image/png"); !r || r->status != 415)
        failures.push_back("undecodable != 415");
    if (auto r = client.Post("/v1/classify", std::string(cfg.max_request_bytes + 1, 'x'), "image/png");
        !r || r->status != 413)
        failures.push_back("oversize != 413");

    // 100 concurrent requests with nonces.
    constexpr std::size_t kConcurrent = 100;
    std::vector<std::string> bodies(kConcurrent);
    std::vector<int> statuses(kConcurrent, 0);
    std::vector<std::thread> workers;
    for (std::size_t i = 0; i < kConcurrent; ++i) {
        workers.emplace_back([&, i] {
            httplib::Client c("127.0.0.1", port);
            c.set_read_timeout(60, 0);
            c.set_connection_timeout(30, 0);
            const auto& p = payloads[i % payloads.size()];
            auto r = c.Post("/v1/classify", {{"X-Request-Nonce", "n" + std::to_string(i)}},
                            std::string(p.begin(), p.end()), "image/png");
            if (r) {
                statuses[i] = r->status;
                bodies[i] = r->body;
            }
        });
    }
    for (auto& t : workers) t.join();
    std::size_t matched = 0;
    for (std::size_t i = 0; i < kConcurrent; ++i) {
        if (statuses[i] != 200) continue;
        json j = json::parse(bodies[i]);
        const bool nonce_ok = j.value("nonce", "") == "n" + std::to_string(i);
        j.erase("latency_ms");
        j.erase("nonce");
        if (nonce_ok && j == reference[i % reference.size()]) ++matched;
    }
    if (matched != kConcurrent) failures.push_back(fmt("%zu/100 concurrent responses matched", matched));
    server.stop();

    std::string detail = fmt("%zu/100 concurrent responses match sequential outputs, tiny model %s", matched,
                             overfit ? "overfit" : "did not overfit");
    if (!failures.empty()) detail += "; failed: " + failures.front();
    return {failures.empty(), detail};
}

// 10 --------------------------------------------------------------------------

Outcome criterion_performance() {
    const unsigned cores = std::thread::hardware_concurrency();
    const Model<float> model = build_dcdm<float>();
    const BenchResult single = benchmark_forward(model, 3, 1);
    std::string detail = fmt("single-thread mean latency %.0f ms (reference 349 ms)", single.mean_ms);
    if (cores < 4) {
        detail += fmt("; %u core(s) available, the 4-thread speedup needs at least 4", cores);
        return {false, detail, true};
    }
    const BenchResult quad = benchmark_forward(model, 3, 4);
    const double speedup = quad.throughput / single.throughput;
    detail += fmt("; 4-thread throughput %.2fx single-thread", speedup);
    return {speedup >= 1.5, detail};
}

}  // namespace

int main(int argc, char** argv) {
    int only = 0;
    for (int i = 1; i + 1 < argc; ++i)
        if (std::strcmp(argv[i], "--only") == 0) only = std::atoi(argv[i + 1]);

    const std::vector<std::pair<std::string, std::function<Outcome()>>> criteria = {
        {"parameter count", criterion_param_count},  {"shape chain", criterion_shape_chain},
        {"gradient check", criterion_gradients},     {"end-to-end learning", criterion_learning},
        {"metrics oracle", criterion_metrics},       {"augmentation properties", criterion_augmentation},
        {"split harness", criterion_split},          {"serialization", criterion_serialization},
        {"service contract", criterion_service},     {"forward throughput scaling", criterion_performance},
    };

    int failed = 0, skipped = 0;
    for (std::size_t i = 0; i < criteria.size(); ++i) {
        const int number = static_cast<int>(i) + 1;
        if (only ? number != only : number == 10) continue;
        const auto start = std::chrono::steady_clock::now();
        Outcome o;
        try {
            o = criteria[i].second();
        } catch (const std::exception& e) {
            o = {false, std::string("exception: ") + e.what()};
        }
        const double secs = std::chrono::duration<double>(std::chrono::steady_clock::now() - start).count();
        const char* verdict = o.skipped ? "SKIP" : o.pass ? "PASS" : "FAIL";
        std::printf("%s %2d %s: %s [%.1f s]\n", verdict, number, criteria[i].first.c_str(), o.detail.c_str(), secs);
        std::fflush(stdout);
        if (o.skipped) ++skipped;
        else if (!o.pass) ++failed;
    }
    if (failed) return 1;
    return skipped ? kSkip : 0;
}
