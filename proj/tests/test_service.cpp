#include <gtest/gtest.h>
#include <httplib.h>

#include <fstream>
#include <json.hpp>
#include <sstream>
#include <thread>

#include "dcdm/serialize.hpp"
#include "dcdm/service.hpp"
#include "support.hpp"

using namespace dcdm;
namespace ts = testsupport;
using json = nlohmann::json;

namespace {

std::shared_ptr<const InferenceEngine> small_engine(std::uint64_t seed = 7) {
    auto m = build_dcdm<float>(4, {32, 32}, seed);
    return std::make_shared<const InferenceEngine>(std::move(m));
}

std::vector<std::uint8_t> leaf_png(std::size_t cls, std::size_t w = 40, std::size_t h = 30) {
    return encode_png(ts::synthetic_leaf(cls, 0, w, h));
}

}  // namespace

TEST(Classify, ResponseSchema) {
    const auto engine = small_engine();
    const auto r = engine->classify(leaf_png(1), 3);
    const auto j = json::parse(to_json(r));
    for (const char* key : {"class_index", "class_name", "plant", "disease", "confidence", "top_k", "latency_ms",
                            "model_fingerprint"}) {
        EXPECT_TRUE(j.contains(key)) << key;
    }
    EXPECT_FALSE(j.contains("nonce"));
    ASSERT_EQ(j["top_k"].size(), 3u);
    EXPECT_EQ(j["top_k"][0]["index"], j["class_index"]);
    EXPECT_DOUBLE_EQ(j["top_k"][0]["prob"].get<double>(), r.confidence);
    for (std::size_t i = 1; i < 3; ++i) EXPECT_LE(j["top_k"][i]["prob"], j["top_k"][i - 1]["prob"]);
    EXPECT_GT(r.latency_ms, 0.0);
    EXPECT_EQ(r.model_fingerprint, fingerprint_hex(fingerprint(engine->model())));
    EXPECT_EQ(r.class_name, engine->model().class_names[r.class_index]);
    EXPECT_FALSE(r.plant.empty());
}

TEST(Classify, DeterministicAcrossCallsAndThreads) {
    const auto engine = small_engine();
    const auto bytes = leaf_png(2);
    const auto first = engine->classify(bytes);
    std::vector<ClassifyResponse> seen(4);
    std::vector<std::thread> pool;
    for (std::size_t i = 0; i < seen.size(); ++i) pool.emplace_back([&, i] { seen[i] = engine->classify(bytes); });
    for (auto& t : pool) t.join();
    for (const auto& r : seen) {
        EXPECT_EQ(r.class_index, first.class_index);
        EXPECT_EQ(r.confidence, first.confidence);
    }
}

TEST(Classify, HandlerStatusCodes) {
    const auto engine = small_engine();
    const auto png = leaf_png(0);
    auto status = [&](std::span<const std::uint8_t> body, const std::string& type, std::size_t max = 1 << 20) {
        return handle_classify(*engine, body, type, std::nullopt, 5, max).status;
    };
    EXPECT_EQ(status(png, "image/png"), 200);
    EXPECT_EQ(status(png, "image/jpeg"), 200);  // the container is sniffed, not trusted
    EXPECT_EQ(status(png, "IMAGE/PNG; charset=binary"), 200);
    EXPECT_EQ(status({}, "image/png"), 400);
    EXPECT_EQ(status(png, "text/plain"), 415);
    EXPECT_EQ(status(png, ""), 415);
    EXPECT_EQ(status(png, "image/png", png.size() - 1), 413);
    EXPECT_EQ(status(png, "image/png", png.size()), 200);
    const std::vector<std::uint8_t> junk(100, 0x42);
    EXPECT_EQ(status(junk, "image/png"), 415);
    auto cut = png;
    cut.resize(cut.size() / 2);
    const auto reply = handle_classify(*engine, cut, "image/png", std::nullopt, 5, 1 << 20);
    EXPECT_EQ(reply.status, 415);
    EXPECT_TRUE(json::parse(reply.body).contains("error"));
}

TEST(Classify, NonceIsEchoed) {
    const auto engine = small_engine();
    const auto reply = handle_classify(*engine, leaf_png(3), "image/png", std::string("abc-123"), 2, 1 << 20);
    ASSERT_EQ(reply.status, 200);
    const auto j = json::parse(reply.body);
    EXPECT_EQ(j["nonce"], "abc-123");
    EXPECT_EQ(j["top_k"].size(), 2u);
}

TEST(Engine, LoadsFromDiskWithLabels) {
    ts::TempDir dir;
    auto m = build_dcdm<float>(3, {32, 32}, 1);
    m.class_names = {"x", "y", "z"};
    save_model(m, dir / "m.dcdm");
    const auto engine = InferenceEngine::load(dir / "m.dcdm");
    EXPECT_EQ(engine->model().class_names, m.class_names);
    const auto info = json::parse(engine->model_info_json());
    EXPECT_EQ(info["param_count"], m.param_count());
    EXPECT_EQ(info["num_classes"], 3);
    EXPECT_EQ(info["input_hw"], json::array({32, 32}));
    EXPECT_EQ(info["fingerprint"], engine->fingerprint());
    EXPECT_ANY_THROW(InferenceEngine::load(dir / "missing.dcdm"));
}

TEST(Server, EndpointsOverHttp) {
    ServiceConfig cfg;
    cfg.port = 0;
    cfg.threads = 2;
    cfg.max_request_bytes = 64 * 1024;
    InferenceServer server(small_engine(), cfg);
    const int port = server.start();
    ASSERT_GT(port, 0);
    httplib::Client cli("127.0.0.1", port);
    cli.set_read_timeout(30, 0);

    auto health = cli.Get("/v1/health");
    ASSERT_TRUE(health);
    EXPECT_EQ(health->status, 200);
    EXPECT_EQ(json::parse(health->body), json::parse(R"({"status":"ok","model_loaded":true})"));

    auto model = cli.Get("/v1/model");
    ASSERT_TRUE(model);
    EXPECT_EQ(json::parse(model->body)["num_classes"], 4);

    const auto png = leaf_png(1);
    httplib::Headers headers = {{"X-Request-Nonce", "n-1"}};
    auto ok = cli.Post("/v1/classify", headers, std::string(png.begin(), png.end()), "image/png");
    ASSERT_TRUE(ok);
    EXPECT_EQ(ok->status, 200);
    EXPECT_EQ(ok->get_header_value("X-Request-Nonce"), "n-1");
    EXPECT_EQ(json::parse(ok->body)["nonce"], "n-1");

    auto bad_type = cli.Post("/v1/classify", std::string(png.begin(), png.end()), "application/octet-stream");
    ASSERT_TRUE(bad_type);
    EXPECT_EQ(bad_type->status, 415);

    auto big = cli.Post("/v1/classify", std::string(70 * 1024, 'a'), "image/png");
    ASSERT_TRUE(big);
    EXPECT_EQ(big->status, 413);

    auto missing = cli.Get("/v1/nothing");
    ASSERT_TRUE(missing);
    EXPECT_EQ(missing->status, 404);
    EXPECT_TRUE(json::parse(missing->body).contains("error"));
    server.stop();
}

TEST(Watch, ClassifiesEachStableFileOnce) {
    ts::TempDir dir;
    std::filesystem::create_directories(dir / "in");
    const auto engine = small_engine();
    for (std::size_t i = 0; i < 3; ++i) write_file_bytes(dir / "in" / ("f" + std::to_string(i) + ".png"), leaf_png(i));
    write_file_bytes(dir / "in" / "broken.png", std::vector<std::uint8_t>(50, 7));
    std::ofstream(dir / "in" / "notes.txt") << "not an image";

    WatchOptions opt;
    opt.dir = dir / "in";
    opt.log_path = dir / "log.jsonl";
    opt.poll_interval = std::chrono::milliseconds(20);
    opt.idle_exit = std::chrono::milliseconds(150);
    std::atomic<bool> stop{false};
    std::ostringstream echo;
    const auto summary = watch_stream(*engine, opt, stop, &echo);
    EXPECT_EQ(summary.frames, 3u);
    EXPECT_EQ(summary.errors, 1u);
    EXPECT_GT(summary.mean_latency_ms, 0.0);

    std::ifstream log(dir / "log.jsonl");
    std::vector<json> lines;
    for (std::string l; std::getline(log, l);) lines.push_back(json::parse(l));
    ASSERT_EQ(lines.size(), 5u);
    std::size_t with_class = 0;
    for (std::size_t i = 0; i < 4; ++i) with_class += lines[i].contains("class_index");
    EXPECT_EQ(with_class, 3u);
    EXPECT_EQ(lines.back()["summary"], true);
    EXPECT_EQ(lines.back()["frames"], 3);
    EXPECT_EQ(lines.back()["reference_latency_ms"], 349.0);
    const std::string echoed = echo.str();
    EXPECT_EQ(std::count(echoed.begin(), echoed.end(), '\n'), 5);
}

TEST(Watch, HonorsFrameLimitAndMissingDirectory) {
    ts::TempDir dir;
    const auto engine = small_engine();
    for (std::size_t i = 0; i < 4; ++i) write_file_bytes(dir / ("f" + std::to_string(i) + ".png"), leaf_png(i));
    WatchOptions opt;
    opt.dir = dir.path();
    opt.poll_interval = std::chrono::milliseconds(10);
    opt.max_frames = 2;
    std::atomic<bool> stop{false};
    EXPECT_EQ(watch_stream(*engine, opt, stop).frames, 2u);
    opt.dir = dir / "nope";
    EXPECT_THROW(watch_stream(*engine, opt, stop), IoError);
}

TEST(Bench, ReportsConsistentStatistics) {
    const auto m = build_dcdm<float>(4, {32, 32}, 1);
    const auto r = benchmark_forward(m, 5, 1);
    EXPECT_EQ(r.iterations, 5u);
    EXPECT_LE(r.p50_ms, r.p95_ms);
    EXPECT_GT(r.throughput, 0.0);
    const auto j = json::parse(to_json(r));
    for (const char* key :
         {"iterations", "threads", "mean_ms", "p50_ms", "p95_ms", "throughput_per_s", "reference_latency_ms"}) {
        EXPECT_TRUE(j.contains(key)) << key;
    }
    EXPECT_THROW(benchmark_forward(m, 0, 1), DataError);
}
