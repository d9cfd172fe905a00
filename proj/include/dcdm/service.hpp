#pragma once

#include <atomic>
#include <chrono>
#include <filesystem>
#include <memory>
#include <optional>
#include <ostream>
#include <span>
#include <string>
#include <vector>

#include "dcdm/model.hpp"

namespace dcdm {

struct ServiceConfig {
    std::string host = "127.0.0.1";
    int port = 8080;  // 0 picks a free port
    std::filesystem::path model_path;
    std::filesystem::path labels_path;  // empty: sidecar next to the weights, if any
    std::size_t threads = 1;            // request workers
    std::size_t top_k = 5;
    std::size_t max_request_bytes = 16u << 20;
};

struct RankedClass {
    std::size_t index = 0;
    std::string name;
    double prob = 0.0;
};

struct ClassifyResponse {
    std::size_t class_index = 0;
    std::string class_name;
    std::string plant;
    std::string disease;
    double confidence = 0.0;
    std::vector<RankedClass> top_k;
    double latency_ms = 0.0;  // decode + register + forward
    std::string model_fingerprint;
    std::optional<std::string> nonce;
};

/// Serialized with keys class_index, class_name, plant, disease, confidence,
/// top_k [{index, name, prob}], latency_ms, model_fingerprint and nonce when set.
std::string to_json(const ClassifyResponse& response);

/// One loaded model, immutable after construction and shared by all handlers.
class InferenceEngine {
public:
    explicit InferenceEngine(Model<float> model);

    /// Loads weights (and labels from labels_path or the sidecar).
    static std::shared_ptr<const InferenceEngine> load(const std::filesystem::path& model_path,
                                                       const std::filesystem::path& labels_path = {});

    const Model<float>& model() const { return model_; }
    const std::string& fingerprint() const { return fingerprint_; }

    /// Full pipeline on encoded image bytes. Throws DecodeError for bad images.
    ClassifyResponse classify(std::span<const std::uint8_t> image_bytes, std::size_t top_k = 5) const;
    ClassifyResponse classify_tensor(const Tensor<float>& image, std::size_t top_k = 5) const;

    std::string model_info_json() const;

private:
    Model<float> model_;
    std::string fingerprint_;
};

struct HttpReply {
    int status = 200;
    std::string body;  // JSON
};

/// Request handling without the network: size, emptiness and media-type
/// checks, then classification. Never throws.
HttpReply handle_classify(const InferenceEngine& engine, std::span<const std::uint8_t> body,
                          const std::string& content_type, const std::optional<std::string>& nonce,
                          std::size_t top_k, std::size_t max_bytes);

bool is_supported_image_type(const std::string& content_type);

/// HTTP front end: GET /v1/health, GET /v1/model, POST /v1/classify.
class InferenceServer {
public:
    InferenceServer(std::shared_ptr<const InferenceEngine> engine, ServiceConfig config);
    ~InferenceServer();
    InferenceServer(const InferenceServer&) = delete;
    InferenceServer& operator=(const InferenceServer&) = delete;

    /// Binds the socket; returns the bound port. Throws IoError on failure.
    int bind();
    /// Serves until stop() is called. Requires bind().
    void run();
    /// bind() + run() on a background thread; returns the port once listening.
    int start();
    /// Stops accepting connections and waits for in-flight requests.
    void stop();

private:
    struct Impl;
    std::unique_ptr<Impl> impl_;
};

struct WatchOptions {
    std::filesystem::path dir;
    std::filesystem::path log_path;  // JSON Lines, appended; empty: only `echo`
    std::chrono::milliseconds poll_interval{200};
    std::size_t max_frames = 0;                   // 0: unlimited
    std::chrono::milliseconds idle_exit{0};       // 0: never
    std::size_t top_k = 5;
};

struct WatchSummary {
    std::size_t frames = 0;  // classified successfully
    std::size_t errors = 0;
    double mean_latency_ms = 0.0;
};

/// Classifies image files as they appear in a directory, oldest first. A file
/// is picked up once its size is stable across two polls and is never
/// processed twice (keyed by name and size). Ends on `stop`, max_frames or
/// idle timeout and appends a summary line.
WatchSummary watch_stream(const InferenceEngine& engine, const WatchOptions& options, const std::atomic<bool>& stop,
                          std::ostream* echo = nullptr);

struct BenchResult {
    std::size_t iterations = 0;
    std::size_t threads = 0;
    double mean_ms = 0.0;
    double p50_ms = 0.0;
    double p95_ms = 0.0;
    double throughput = 0.0;  // images per second
};

/// Timed single-image forward passes on a fixed random input.
BenchResult benchmark_forward(const Model<float>& model, std::size_t iterations, std::size_t threads,
                              std::size_t warmup = 1);

std::string to_json(const BenchResult& result);

}  // namespace dcdm
