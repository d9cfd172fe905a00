#include "dcdm/service.hpp"

#include <algorithm>
#include <cmath>
#include <fstream>
#include <map>
#include <mutex>
#include <numeric>
#include <thread>

#define CPPHTTPLIB_LISTEN_BACKLOG 256
#include <httplib.h>
#include <json.hpp>

#include "dcdm/dataset.hpp"
#include "dcdm/imaging.hpp"
#include "dcdm/serialize.hpp"

namespace dcdm {

using json = nlohmann::ordered_json;

namespace {

using Clock = std::chrono::steady_clock;

double ms_since(Clock::time_point t0) {
    return std::chrono::duration<double, std::milli>(Clock::now() - t0).count();
}

std::string error_body(const std::string& message) {
    json j;
    j["error"] = message;
    return j.dump();
}

std::string lower(std::string s) {
    std::transform(s.begin(), s.end(), s.begin(), [](unsigned char c) { return std::tolower(c); });
    return s;
}

}  // namespace

std::string to_json(const ClassifyResponse& r) {
    json j;
    j["class_index"] = r.class_index;
    j["class_name"] = r.class_name;
    j["plant"] = r.plant;
    j["disease"] = r.disease;
    j["confidence"] = r.confidence;
    json top = json::array();
    for (const auto& t : r.top_k) top.push_back(json{{"index", t.index}, {"name", t.name}, {"prob", t.prob}});
    j["top_k"] = top;
    j["latency_ms"] = r.latency_ms;
    j["model_fingerprint"] = r.model_fingerprint;
    if (r.nonce) j["nonce"] = *r.nonce;
    return j.dump();
}

InferenceEngine::InferenceEngine(Model<float> model)
    : model_(std::move(model)), fingerprint_(fingerprint_hex(dcdm::fingerprint(model_))) {}

std::shared_ptr<const InferenceEngine> InferenceEngine::load(const std::filesystem::path& model_path,
                                                             const std::filesystem::path& labels_path) {
    Model<float> m = load_model<float>(model_path);
    if (!labels_path.empty()) {
        auto names = load_labels(labels_path);
        if (names.size() != m.num_classes) {
            throw FormatError(labels_path.string() + " lists " + std::to_string(names.size()) +
                              " classes, model has " + std::to_string(m.num_classes));
        }
        m.class_names = std::move(names);
    }
    return std::make_shared<const InferenceEngine>(std::move(m));
}

ClassifyResponse InferenceEngine::classify_tensor(const Tensor<float>& image, std::size_t top_k) const {
    const Prediction p = predict(model_, image, top_k);
    ClassifyResponse r;
    r.class_index = p.class_index;
    r.class_name = model_.class_names.at(p.class_index);
    if (p.class_index < class_table().size()) {
        const ClassEntry& e = class_table()[p.class_index];
        r.plant = e.plant;
        r.disease = e.is_healthy ? "healthy" : e.disease;
    }
    r.confidence = p.confidence;
    for (const auto& [idx, prob] : p.top_k) r.top_k.push_back({idx, model_.class_names.at(idx), prob});
    r.model_fingerprint = fingerprint_;
    return r;
}

ClassifyResponse InferenceEngine::classify(std::span<const std::uint8_t> image_bytes, std::size_t top_k) const {
    const auto t0 = Clock::now();
    const ImageBuffer img = register_image(decode_image(image_bytes), model_.input.height, model_.input.width);
    ClassifyResponse r = classify_tensor(to_tensor<float>(img), top_k);
    r.latency_ms = std::max(ms_since(t0), 1e-6);
    return r;
}

std::string InferenceEngine::model_info_json() const {
    json j;
    j["param_count"] = model_.param_count();
    j["num_classes"] = model_.num_classes;
    j["input_hw"] = {model_.input.height, model_.input.width};
    j["fingerprint"] = fingerprint_;
    return j.dump();
}

bool is_supported_image_type(const std::string& content_type) {
    const std::string base = lower(content_type.substr(0, content_type.find(';')));
    auto trimmed = base;
    trimmed.erase(std::remove_if(trimmed.begin(), trimmed.end(), [](unsigned char c) { return std::isspace(c); }),
                  trimmed.end());
    return trimmed == "image/png" || trimmed == "image/jpeg" || trimmed == "image/jpg" ||
           trimmed == "image/x-portable-pixmap" || trimmed == "image/x-portable-graymap";
}

HttpReply handle_classify(const InferenceEngine& engine, std::span<const std::uint8_t> body,
                          const std::string& content_type, const std::optional<std::string>& nonce,
                          std::size_t top_k, std::size_t max_bytes) {
    try {
        if (body.size() > max_bytes) {
            return {413, error_body("payload of " + std::to_string(body.size()) + " bytes exceeds the limit of " +
                                    std::to_string(max_bytes))};
        }
        if (body.empty()) return {400, error_body("empty request body")};
        if (!is_supported_image_type(content_type)) {
            return {415, error_body("unsupported content type '" + content_type +
                                    "' (expected image/png, image/jpeg or image/x-portable-pixmap)")};
        }
        ClassifyResponse r;
        try {
            r = engine.classify(body, top_k);
        } catch (const DecodeError& e) {
            return {415, error_body(std::string("cannot decode image: ") + e.what())};
        }
        r.nonce = nonce;
        return {200, to_json(r)};
    } catch (const std::exception& e) {
        return {500, error_body(std::string("internal error: ") + e.what())};
    }
}

// ---------------------------------------------------------------------------

struct InferenceServer::Impl {
    std::shared_ptr<const InferenceEngine> engine;
    ServiceConfig config;
    httplib::Server server;
    std::thread thread;
    int port = -1;
};

InferenceServer::InferenceServer(std::shared_ptr<const InferenceEngine> engine, ServiceConfig config)
    : impl_(std::make_unique<Impl>()) {
    if (!engine) throw DataError("server needs a loaded model");
    if (config.threads < 1) throw DataError("server needs at least one worker thread");
    impl_->engine = std::move(engine);
    impl_->config = std::move(config);
    Impl* self = impl_.get();
    auto& srv = self->server;
    const std::size_t workers = self->config.threads;
    srv.new_task_queue = [workers] { return new httplib::ThreadPool(workers); };
    // Let oversize bodies reach the handler so the reply carries a JSON body;
    // httplib's own cap sits just above it.
    srv.set_payload_max_length(self->config.max_request_bytes + 1);

    srv.Get("/v1/health", [self](const httplib::Request&, httplib::Response& res) {
        json j;
        j["status"] = "ok";
        j["model_loaded"] = self->engine != nullptr;
        res.set_content(j.dump(), "application/json");
    });
    srv.Get("/v1/model", [self](const httplib::Request&, httplib::Response& res) {
        res.set_content(self->engine->model_info_json(), "application/json");
    });
    srv.Post("/v1/classify", [self, workers](const httplib::Request& req, httplib::Response& res) {
        std::optional<std::string> nonce;
        if (req.has_header("X-Request-Nonce")) nonce = req.get_header_value("X-Request-Nonce");
        // Concurrent requests each get one kernel thread; a single worker may use them all.
        std::optional<ThreadScope> scope;
        if (workers > 1) scope.emplace(1);
        const auto* data = reinterpret_cast<const std::uint8_t*>(req.body.data());
        const HttpReply reply = handle_classify(*self->engine, std::span(data, req.body.size()),
                                                req.get_header_value("Content-Type"), nonce, self->config.top_k,
                                                self->config.max_request_bytes);
        res.status = reply.status;
        if (nonce) res.set_header("X-Request-Nonce", *nonce);
        res.set_content(reply.body, "application/json");
    });
    srv.set_exception_handler([](const httplib::Request&, httplib::Response& res, std::exception_ptr ep) {
        std::string what = "unknown error";
        try {
            std::rethrow_exception(ep);
        } catch (const std::exception& e) {
            what = e.what();
        } catch (...) {
        }
        res.status = 500;
        res.set_content(error_body("internal error: " + what), "application/json");
    });
    srv.set_error_handler([](const httplib::Request&, httplib::Response& res) {
        if (res.body.empty()) {
            res.set_content(error_body("HTTP " + std::to_string(res.status)), "application/json");
        }
    });
}

InferenceServer::~InferenceServer() { stop(); }

int InferenceServer::bind() {
    auto& cfg = impl_->config;
    if (cfg.port == 0) {
        impl_->port = impl_->server.bind_to_any_port(cfg.host);
    } else {
        impl_->port = impl_->server.bind_to_port(cfg.host, cfg.port) ? cfg.port : -1;
    }
    if (impl_->port < 0) {
        throw IoError("cannot bind " + cfg.host + ":" + std::to_string(cfg.port));
    }
    return impl_->port;
}

void InferenceServer::run() {
    if (impl_->port < 0) throw Error("InferenceServer::run called before bind");
    impl_->server.listen_after_bind();
}

int InferenceServer::start() {
    const int port = bind();
    impl_->thread = std::thread([this] { impl_->server.listen_after_bind(); });
    impl_->server.wait_until_ready();
    return port;
}

void InferenceServer::stop() {
    if (!impl_) return;
    impl_->server.stop();
    if (impl_->thread.joinable()) impl_->thread.join();
}

// ---------------------------------------------------------------------------

namespace {

bool looks_like_image(const std::filesystem::path& p) {
    const std::string ext = lower(p.extension().string());
    return ext == ".png" || ext == ".jpg" || ext == ".jpeg" || ext == ".ppm" || ext == ".pgm" || ext == ".pnm";
}

class JsonLines {
public:
    JsonLines(const std::filesystem::path& path, std::ostream* echo) : echo_(echo) {
        if (!path.empty()) {
            file_.open(path, std::ios::app);
            if (!file_) throw IoError("cannot open " + path.string() + " for appending");
        }
    }
    void write(const json& j) {
        const std::string line = j.dump();
        if (file_.is_open()) {
            file_ << line << '\n';
            file_.flush();
        }
        if (echo_) *echo_ << line << std::endl;
    }

private:
    std::ofstream file_;
    std::ostream* echo_;
};

}  // namespace

WatchSummary watch_stream(const InferenceEngine& engine, const WatchOptions& options, const std::atomic<bool>& stop,
                          std::ostream* echo) {
    namespace fs = std::filesystem;
    if (!fs::is_directory(options.dir)) throw IoError("watch directory " + options.dir.string() + " does not exist");
    JsonLines out(options.log_path, echo);

    WatchSummary summary;
    double latency_sum = 0.0;
    std::map<std::string, std::uintmax_t> done;     // name -> size already handled
    std::map<std::string, std::uintmax_t> pending;  // name -> size seen on the previous poll
    auto last_activity = Clock::now();

    auto finished = [&] {
        return stop.load() || (options.max_frames > 0 && summary.frames + summary.errors >= options.max_frames);
    };
    while (!finished()) {
        struct Candidate {
            fs::file_time_type mtime;
            std::string name;
            fs::path path;
            std::uintmax_t size;
        };
        std::vector<Candidate> ready;
        std::map<std::string, std::uintmax_t> seen;
        std::error_code ec;
        for (const auto& entry : fs::directory_iterator(options.dir, ec)) {
            std::error_code e2;
            if (!entry.is_regular_file(e2) || !looks_like_image(entry.path())) continue;
            const std::string name = entry.path().filename().string();
            const auto size = entry.file_size(e2);
            if (e2) continue;
            if (auto it = done.find(name); it != done.end() && it->second == size) continue;
            seen[name] = size;
            if (auto it = pending.find(name); it != pending.end() && it->second == size) {
                ready.push_back({entry.last_write_time(e2), name, entry.path(), size});
            }
        }
        pending = std::move(seen);
        std::sort(ready.begin(), ready.end(), [](const Candidate& a, const Candidate& b) {
            return a.mtime != b.mtime ? a.mtime < b.mtime : a.name < b.name;
        });
        for (const auto& c : ready) {
            if (finished()) break;
            done[c.name] = c.size;
            pending.erase(c.name);
            last_activity = Clock::now();
            json line;
            line["path"] = c.path.string();
            try {
                const auto bytes = read_file_bytes(c.path);
                const ClassifyResponse r = engine.classify(bytes, options.top_k);
                line["class_index"] = r.class_index;
                line["class_name"] = r.class_name;
                line["confidence"] = r.confidence;
                line["latency_ms"] = r.latency_ms;
                latency_sum += r.latency_ms;
                ++summary.frames;
            } catch (const std::exception& e) {
                line["error"] = e.what();
                ++summary.errors;
            }
            out.write(line);
        }
        if (finished()) break;
        if (options.idle_exit.count() > 0 && pending.empty() && Clock::now() - last_activity >= options.idle_exit) break;
        std::this_thread::sleep_for(options.poll_interval);
    }
    summary.mean_latency_ms = summary.frames ? latency_sum / static_cast<double>(summary.frames) : 0.0;
    json s;
    s["summary"] = true;
    s["frames"] = summary.frames;
    s["errors"] = summary.errors;
    s["mean_latency_ms"] = summary.mean_latency_ms;
    s["reference_latency_ms"] = 349.0;
    out.write(s);
    return summary;
}

// ---------------------------------------------------------------------------

BenchResult benchmark_forward(const Model<float>& model, std::size_t iterations, std::size_t threads,
                              std::size_t warmup) {
    if (iterations < 1) throw DataError("bench needs at least one iteration");
    if (threads < 1) throw DataError("bench needs at least one thread");
    ThreadScope scope(static_cast<int>(threads));
    Rng rng(12345);
    std::uniform_real_distribution<float> u(0.0f, 1.0f);
    Tensor<float> image(model.sample_shape());
    for (float& v : image.data()) v = u(rng);

    for (std::size_t i = 0; i < warmup; ++i) (void)forward(model, image, false);
    std::vector<double> times;
    const auto start = Clock::now();
    for (std::size_t i = 0; i < iterations; ++i) {
        const auto t0 = Clock::now();
        (void)forward(model, image, false);
        times.push_back(ms_since(t0));
    }
    const double total_ms = ms_since(start);
    BenchResult r;
    r.iterations = iterations;
    r.threads = threads;
    r.mean_ms = std::accumulate(times.begin(), times.end(), 0.0) / static_cast<double>(times.size());
    std::vector<double> sorted = times;
    std::sort(sorted.begin(), sorted.end());
    auto pct = [&](double q) {
        const double pos = q * static_cast<double>(sorted.size() - 1);
        const auto lo = static_cast<std::size_t>(std::floor(pos));
        const auto hi = std::min(lo + 1, sorted.size() - 1);
        return sorted[lo] + (pos - static_cast<double>(lo)) * (sorted[hi] - sorted[lo]);
    };
    r.p50_ms = pct(0.5);
    r.p95_ms = pct(0.95);
    r.throughput = static_cast<double>(iterations) / (total_ms / 1000.0);
    return r;
}

std::string to_json(const BenchResult& r) {
    json j;
    j["iterations"] = r.iterations;
    j["threads"] = r.threads;
    j["mean_ms"] = r.mean_ms;
    j["p50_ms"] = r.p50_ms;
    j["p95_ms"] = r.p95_ms;
    j["throughput_per_s"] = r.throughput;
    j["reference_latency_ms"] = 349.0;
    return j.dump();
}

}  // namespace dcdm
