// Command-line driver: prepare, split, augment, train, eval, infer, serve,
// watch, viz, bench, inspect.

#include <atomic>
#include <chrono>
#include <csignal>
#include <cstdio>
#include <cstdlib>
#include <iostream>
#include <thread>

#include <CLI11.hpp>

#include "dcdm/dataset.hpp"
#include "dcdm/imaging.hpp"
#include "dcdm/metrics.hpp"
#include "dcdm/model.hpp"
#include "dcdm/samples.hpp"
#include "dcdm/serialize.hpp"
#include "dcdm/service.hpp"
#include "dcdm/viz.hpp"

namespace fs = std::filesystem;
using namespace dcdm;

namespace {

enum ExitCode { kOk = 0, kUsage = 1, kDataError = 2, kNumericError = 3 };

std::atomic<bool> g_stop{false};

extern "C" void on_signal(int) { g_stop.store(true); }

void install_signal_handlers() {
    std::signal(SIGINT, on_signal);
    std::signal(SIGTERM, on_signal);
}

InputSize parse_hw(const std::string& text) {
    const auto x = text.find_first_of("xX");
    if (x == std::string::npos) throw CLI::ValidationError("--input-hw", "expected HxW, got '" + text + "'");
    try {
        std::size_t a = 0, b = 0;
        const unsigned long h = std::stoul(text.substr(0, x), &a);
        const unsigned long w = std::stoul(text.substr(x + 1), &b);
        if (a != x || b != text.size() - x - 1) throw std::invalid_argument("trailing");
        return {h, w};
    } catch (const std::exception&) {
        throw CLI::ValidationError("--input-hw", "expected HxW, got '" + text + "'");
    }
}

double parse_ratio(const std::string& text) {
    const auto colon = text.find(':');
    try {
        if (colon == std::string::npos) throw std::invalid_argument("no colon");
        std::size_t a = 0, b = 0;
        const double train = std::stod(text.substr(0, colon), &a);
        const double test = std::stod(text.substr(colon + 1), &b);
        if (a != colon || b != text.size() - colon - 1 || train <= 0 || test <= 0) throw std::invalid_argument("bad");
        return train / (train + test);
    } catch (const std::exception&) {
        throw CLI::ValidationError("--ratio", "expected TRAIN:TEST such as 80:20, got '" + text + "'");
    }
}

std::pair<std::string, int> parse_addr(const std::string& text) {
    const auto colon = text.rfind(':');
    try {
        if (colon == std::string::npos) throw std::invalid_argument("no colon");
        std::size_t used = 0;
        const int port = std::stoi(text.substr(colon + 1), &used);
        if (used != text.size() - colon - 1 || port < 0 || port > 65535) throw std::invalid_argument("port");
        return {text.substr(0, colon), port};
    } catch (const std::exception&) {
        throw CLI::ValidationError("--addr", "expected HOST:PORT, got '" + text + "'");
    }
}

std::uint64_t mix_seed(std::uint64_t seed, const std::string& key, std::uint64_t j) {
    std::uint64_t h = 0xcbf29ce484222325ULL ^ seed;
    for (unsigned char c : key) h = (h ^ c) * 0x100000001b3ULL;
    h = (h ^ j) * 0x100000001b3ULL;
    return h;
}

fs::path checkpoint_path(const fs::path& out, std::size_t epoch) {
    fs::path p = out;
    p.replace_filename(out.stem().string() + ".ep" + std::to_string(epoch) + out.extension().string());
    return p;
}

void apply_threads(int threads) {
    if (threads > 0) set_num_threads(threads);
}

// ---------------------------------------------------------------------------

struct PrepareArgs {
    std::string root, out, group_regex;
    std::size_t classes = kDefaultClasses;
};

int cmd_prepare(const PrepareArgs& a) {
    ManifestBuildOptions opt;
    if (!a.group_regex.empty()) opt.group_regex = a.group_regex;
    opt.num_classes = a.classes;
    const auto result = build_manifest(a.root, opt);
    save_manifest(result.manifest, a.out);
    for (const auto& s : result.skipped) std::cerr << "skipped " << s << "\n";
    std::cout << "records: " << result.manifest.records.size() << "\nskipped: " << result.skipped.size() << "\n";
    return kOk;
}

struct SplitArgs {
    std::string manifest, out, ratio = "80:20";
    std::uint64_t seed = 0;
    bool group_aware = false;
};

int cmd_split(const SplitArgs& a) {
    const double fraction = parse_ratio(a.ratio);
    const auto result = split(load_manifest(a.manifest), fraction, a.seed, a.group_aware);
    save_manifest(result.manifest, a.out.empty() ? a.manifest : a.out);
    for (const auto& w : result.warnings) std::cerr << "warning: " << w << "\n";
    std::cout << "train: " << result.manifest.count(SplitTag::Train) << "\ntest: " << result.manifest.count(SplitTag::Test)
              << "\n";
    return kOk;
}

struct AugmentArgs {
    std::string in, out, ops = "hflip,vflip,rotate,blur,gaussian_noise";
    std::size_t per_image = 1;
    std::uint64_t seed = 0;
};

int cmd_augment(const AugmentArgs& a) {
    std::vector<AugmentOp> ops;
    std::stringstream ss(a.ops);
    for (std::string name; std::getline(ss, name, ',');)
        if (!name.empty()) ops.push_back(parse_augment_op(name));
    if (ops.empty()) throw DataError("--ops lists no operations");
    if (!fs::is_directory(a.in)) throw IoError("input directory " + a.in + " does not exist");

    std::vector<fs::path> files;
    for (const auto& e : fs::recursive_directory_iterator(a.in))
        if (e.is_regular_file()) files.push_back(e.path());
    std::sort(files.begin(), files.end());
    std::size_t written = 0, skipped = 0;
    for (const auto& file : files) {
        const fs::path rel = fs::relative(file, a.in);
        ImageBuffer img;
        try {
            img = read_image(file);
        } catch (const Error& e) {
            std::cerr << "skipped " << rel.string() << ": " << e.what() << "\n";
            ++skipped;
            continue;
        }
        const fs::path dir = fs::path(a.out) / rel.parent_path();
        fs::create_directories(dir);
        for (std::size_t j = 0; j < a.per_image; ++j) {
            const AugmentOp op = ops[j % ops.size()];
            const AugmentSpec spec = random_spec(op, mix_seed(a.seed, rel.generic_string(), j));
            const fs::path target = dir / (rel.stem().string() + "_aug" + std::to_string(j) + "_" + to_string(op) + ".png");
            write_png(augment(img, spec), target);
            ++written;
        }
    }
    std::cout << "written: " << written << "\nskipped: " << skipped << "\n";
    return kOk;
}

struct TrainArgs {
    std::string manifest, root, out = "model.dcdm", history = "history.csv", plot, input_hw = "272x363", optimizer = "adam";
    std::size_t epochs = 50, batch = 32, classes = kDefaultClasses;
    double lr = 1e-4, dropout = 0.5;
    std::uint64_t seed = 0;
    bool cache = false;
};

int cmd_train(const TrainArgs& a) {
    const InputSize hw = parse_hw(a.input_hw);
    TrainConfig cfg;
    cfg.epochs = a.epochs;
    cfg.batch_size = a.batch;
    cfg.optimizer.lr = a.lr;
    cfg.optimizer.kind = a.optimizer == "sgd" ? OptimizerKind::Sgd : OptimizerKind::Adam;
    cfg.dropout_p = a.dropout;
    cfg.seed = a.seed;
    cfg.validate();

    const DatasetManifest manifest = load_manifest(a.manifest);
    const fs::path root = a.root.empty() ? fs::path(a.manifest).parent_path() : fs::path(a.root);
    const bool has_split = manifest.count(SplitTag::Train) > 0;
    if (!has_split) std::cerr << "warning: manifest has no train split; training on every record\n";
    ImageFileSamples train_set(root, manifest, has_split ? std::optional(SplitTag::Train) : std::nullopt, hw, a.cache);
    ImageFileSamples val_set(root, manifest, SplitTag::Test, hw, a.cache);

    Model<float> model = build_dcdm<float>(a.classes, hw, a.seed);
    const fs::path out(a.out);
    const auto history = train_model<float>(
        model, train_set, val_set.size() > 0 ? &val_set : nullptr, cfg,
        [&](const EpochRecord& r, const Model<float>& m) {
            std::fprintf(stderr, "epoch %zu/%zu  loss %.4f  acc %.4f  val_loss %.4f  val_acc %.4f  (%.1f s)\n", r.epoch,
                         cfg.epochs, r.train_loss, r.train_acc, r.val_loss, r.val_acc, r.wall_time);
            if (r.epoch % 10 == 0 && r.epoch < cfg.epochs) save_model(m, checkpoint_path(out, r.epoch));
            return !g_stop.load();
        });
    save_model(model, out);
    export_curves(history, a.history, a.plot);
    std::cout << "saved " << out.string() << " (fingerprint " << fingerprint_hex(fingerprint(model)) << ")\n";
    return kOk;
}

struct EvalArgs {
    std::string model, manifest, root, report = "report.json", confusion, split = "test";
    std::size_t batch = 16;
};

int cmd_eval(const EvalArgs& a) {
    const Model<float> model = load_model<float>(a.model);
    const DatasetManifest manifest = load_manifest(a.manifest);
    const fs::path root = a.root.empty() ? fs::path(a.manifest).parent_path() : fs::path(a.root);
    std::optional<SplitTag> tag;
    if (a.split != "all") tag = parse_split_tag(a.split);
    ImageFileSamples samples(root, manifest, tag, model.input);
    if (samples.size() == 0) throw DataError("no records in split '" + a.split + "'");
    const EvalResult ev = evaluate(model, samples, a.batch);
    ConfusionMatrix cm(model.num_classes);
    for (std::size_t i = 0; i < samples.size(); ++i) cm.update(samples.label(i), ev.predictions[i]);
    const MetricsReport report = compute_metrics(cm, model.class_names);
    const std::string json = render_report(report, ReportFormat::Json);
    write_file_bytes(a.report, std::span(reinterpret_cast<const std::uint8_t*>(json.data()), json.size()));
    if (!a.confusion.empty()) write_png(render_confusion(cm), a.confusion);
    std::cout << render_report(report, ReportFormat::Text);
    return kOk;
}

struct InferArgs {
    std::string model, image, labels;
    std::size_t top_k = 5;
};

int cmd_infer(const InferArgs& a) {
    const auto engine = InferenceEngine::load(a.model, a.labels);
    const auto bytes = read_file_bytes(a.image);
    std::cout << to_json(engine->classify(bytes, a.top_k)) << "\n";
    return kOk;
}

struct ServeArgs {
    std::string model, labels, addr = "127.0.0.1:8080";
    std::size_t threads = 1, top_k = 5, max_bytes = 16u << 20;
};

int cmd_serve(const ServeArgs& a) {
    const auto [host, port] = parse_addr(a.addr);
    const auto engine = InferenceEngine::load(a.model, a.labels);  // fails before binding
    ServiceConfig cfg;
    cfg.host = host;
    cfg.port = port;
    cfg.model_path = a.model;
    cfg.labels_path = a.labels;
    cfg.threads = a.threads;
    cfg.top_k = a.top_k;
    cfg.max_request_bytes = a.max_bytes;
    InferenceServer server(engine, cfg);
    install_signal_handlers();
    const int bound = server.start();
    std::cout << "listening on " << host << ":" << bound << " (model " << engine->fingerprint() << ")" << std::endl;
    while (!g_stop.load()) std::this_thread::sleep_for(std::chrono::milliseconds(100));
    server.stop();
    std::cout << "stopped" << std::endl;
    return kOk;
}

struct WatchArgs {
    std::string model, labels, dir, log;
    std::size_t interval_ms = 200, max_frames = 0, idle_exit_ms = 0, top_k = 5;
};

int cmd_watch(const WatchArgs& a) {
    const auto engine = InferenceEngine::load(a.model, a.labels);
    WatchOptions opt;
    opt.dir = a.dir;
    opt.log_path = a.log;
    opt.poll_interval = std::chrono::milliseconds(a.interval_ms);
    opt.max_frames = a.max_frames;
    opt.idle_exit = std::chrono::milliseconds(a.idle_exit_ms);
    opt.top_k = a.top_k;
    install_signal_handlers();
    watch_stream(*engine, opt, g_stop, &std::cout);
    return kOk;
}

struct VizArgs {
    std::string model, image, out = ".";
    std::size_t layer = 1;
};

int cmd_viz_features(const VizArgs& a) {
    if (a.image.empty()) throw CLI::ValidationError("--image", "viz features needs --image");
    const Model<float> model = load_model<float>(a.model);
    const Tensor<float> x =
        to_tensor<float>(register_image(read_image(a.image), model.input.height, model.input.width));
    fs::create_directories(a.out);
    for (const auto& g : extract_feature_maps(model, x, {a.layer})) {
        const fs::path p = fs::path(a.out) / ("features_" + g.layer + ".png");
        write_png(g.image, p);
        std::cout << p.string() << " (" << g.channels << " maps, " << g.layout.side << "x" << g.layout.side
                  << " grid)\n";
    }
    return kOk;
}

int cmd_viz_filters(const VizArgs& a) {
    const Model<float> model = load_model<float>(a.model);
    fs::create_directories(a.out);
    const ImageBuffer img = visualize_filters(model, a.layer);
    const fs::path p = fs::path(a.out) / ("filters_conv" + std::to_string(a.layer) + ".png");
    write_png(img, p);
    std::cout << p.string() << "\n";
    return kOk;
}

struct BenchArgs {
    std::string model;
    std::size_t iters = 50, threads = 0;
};

int cmd_bench(const BenchArgs& a) {
    const Model<float> model = a.model.empty() ? build_dcdm<float>() : load_model<float>(a.model);
    const std::size_t threads = a.threads > 0 ? a.threads : static_cast<std::size_t>(num_threads());
    const BenchResult r = benchmark_forward(model, a.iters, threads);
    std::printf("threads %zu  iters %zu  mean %.1f ms  p50 %.1f ms  p95 %.1f ms  throughput %.3f img/s  "
                "(reference 349 ms per image)\n",
                r.threads, r.iterations, r.mean_ms, r.p50_ms, r.p95_ms, r.throughput);
    std::cout << to_json(r) << "\n";
    return kOk;
}

struct InspectArgs {
    std::string model, input_hw = "272x363";
    std::size_t classes = kDefaultClasses;
    std::uint64_t seed = 0;
};

int cmd_inspect(const InspectArgs& a) {
    const Model<float> model =
        a.model.empty() ? build_dcdm<float>(a.classes, parse_hw(a.input_hw), a.seed) : load_model<float>(a.model);
    std::printf("input      %zux%zux%zu\n", model.channels, model.input.height, model.input.width);
    std::printf("%-10s %-10s %-16s %s\n", "layer", "kind", "output", "params");
    for (const auto& s : model.stage_shapes()) {
        std::string dims;
        for (std::size_t d = 0; d < s.shape.rank(); ++d) dims += (d ? "x" : "") + std::to_string(s.shape[d]);
        const auto& l = model.layer(s.name);
        std::printf("%-10s %-10s %-16s %zu\n", s.name.c_str(), to_string(s.kind).c_str(), dims.c_str(),
                    l.params ? l.params->count() : std::size_t{0});
    }
    std::printf("classes    %zu\n", model.num_classes);
    std::printf("param_count %zu\n", model.param_count());
    std::printf("fingerprint %s\n", fingerprint_hex(fingerprint(model)).c_str());
    return kOk;
}

}  // namespace

int main(int argc, char** argv) {
    if (const char* env = std::getenv("DCDM_THREADS")) {
        try {
            apply_threads(std::stoi(env));
        } catch (const std::exception&) {
            std::cerr << "ignoring invalid DCDM_THREADS='" << env << "'\n";
        }
    }

    CLI::App app{"DCDM leaf disease classifier"};
    app.require_subcommand(1);
    int threads = 0;
    app.add_option("--threads", threads, "kernel threads (default: DCDM_THREADS or all cores)");

    PrepareArgs prep;
    auto* c_prep = app.add_subcommand("prepare", "scan ROOT/<class-slug>/ into a manifest");
    c_prep->add_option("--root", prep.root)->required();
    c_prep->add_option("--out", prep.out)->required();
    c_prep->add_option("--group-regex", prep.group_regex, "group id regex applied to file stems");
    c_prep->add_option("--classes", prep.classes)->check(CLI::Range(2, 25));

    SplitArgs sp;
    auto* c_split = app.add_subcommand("split", "stratified train/test split");
    c_split->add_option("--manifest", sp.manifest)->required();
    c_split->add_option("--ratio", sp.ratio, "TRAIN:TEST, e.g. 80:20");
    c_split->add_option("--seed", sp.seed);
    c_split->add_option("--out", sp.out, "output manifest (default: overwrite input)");
    c_split->add_flag("--group-aware", sp.group_aware);

    AugmentArgs au;
    auto* c_aug = app.add_subcommand("augment", "write augmented copies of every image");
    c_aug->add_option("--in", au.in)->required();
    c_aug->add_option("--out", au.out)->required();
    c_aug->add_option("--ops", au.ops, "comma-separated op names");
    c_aug->add_option("--per-image", au.per_image)->check(CLI::PositiveNumber);
    c_aug->add_option("--seed", au.seed);

    TrainArgs tr;
    auto* c_train = app.add_subcommand("train", "train a model from a manifest");
    c_train->add_option("--manifest", tr.manifest)->required();
    c_train->add_option("--root", tr.root, "dataset root (default: manifest directory)");
    c_train->add_option("--epochs", tr.epochs)->check(CLI::PositiveNumber);
    c_train->add_option("--batch", tr.batch)->check(CLI::PositiveNumber);
    c_train->add_option("--lr", tr.lr)->check(CLI::NonNegativeNumber);
    c_train->add_option("--optimizer", tr.optimizer)->check(CLI::IsMember({"adam", "sgd"}));
    c_train->add_option("--dropout", tr.dropout);
    c_train->add_option("--seed", tr.seed);
    c_train->add_option("--out", tr.out);
    c_train->add_option("--history", tr.history);
    c_train->add_option("--plot", tr.plot, "training curves PNG");
    c_train->add_option("--input-hw", tr.input_hw, "HxW");
    c_train->add_option("--classes", tr.classes)->check(CLI::Range(2, 1000));
    c_train->add_flag("--cache", tr.cache, "keep decoded images in memory");

    EvalArgs ev;
    auto* c_eval = app.add_subcommand("eval", "metrics report and confusion heatmap");
    c_eval->add_option("--model", ev.model)->required();
    c_eval->add_option("--manifest", ev.manifest)->required();
    c_eval->add_option("--root", ev.root);
    c_eval->add_option("--split", ev.split)->check(CLI::IsMember({"test", "train", "all"}));
    c_eval->add_option("--report", ev.report);
    c_eval->add_option("--confusion", ev.confusion);
    c_eval->add_option("--batch", ev.batch)->check(CLI::PositiveNumber);

    InferArgs in;
    auto* c_infer = app.add_subcommand("infer", "classify one image");
    c_infer->add_option("--model", in.model)->required();
    c_infer->add_option("--image", in.image)->required();
    c_infer->add_option("--labels", in.labels);
    c_infer->add_option("--top-k", in.top_k)->check(CLI::PositiveNumber);

    ServeArgs sv;
    auto* c_serve = app.add_subcommand("serve", "HTTP classification service");
    c_serve->add_option("--model", sv.model)->required();
    c_serve->add_option("--labels", sv.labels);
    c_serve->add_option("--addr", sv.addr, "HOST:PORT");
    c_serve->add_option("--threads", sv.threads, "request workers")->check(CLI::PositiveNumber);
    c_serve->add_option("--top-k", sv.top_k)->check(CLI::PositiveNumber);
    c_serve->add_option("--max-bytes", sv.max_bytes)->check(CLI::PositiveNumber);

    WatchArgs wa;
    auto* c_watch = app.add_subcommand("watch", "classify frames dropped into a directory");
    c_watch->add_option("--model", wa.model)->required();
    c_watch->add_option("--labels", wa.labels);
    c_watch->add_option("--dir", wa.dir)->required();
    c_watch->add_option("--log", wa.log, "JSON Lines output");
    c_watch->add_option("--interval-ms", wa.interval_ms)->check(CLI::PositiveNumber);
    c_watch->add_option("--max-frames", wa.max_frames);
    c_watch->add_option("--idle-exit-ms", wa.idle_exit_ms);
    c_watch->add_option("--top-k", wa.top_k)->check(CLI::PositiveNumber);

    VizArgs vf, vk;
    auto* c_viz = app.add_subcommand("viz", "feature maps and filters");
    c_viz->require_subcommand(1);
    auto* c_feat = c_viz->add_subcommand("features", "post-ReLU feature maps of one conv layer");
    c_feat->add_option("--model", vf.model)->required();
    c_feat->add_option("--image", vf.image)->required();
    c_feat->add_option("--layer", vf.layer, "conv layer 1-6")->required();
    c_feat->add_option("--out", vf.out);
    auto* c_filt = c_viz->add_subcommand("filters", "kernels of one conv layer");
    c_filt->add_option("--model", vk.model)->required();
    c_filt->add_option("--layer", vk.layer, "conv layer 1-6")->required();
    c_filt->add_option("--out", vk.out);

    BenchArgs be;
    auto* c_bench = app.add_subcommand("bench", "single-image forward latency");
    c_bench->add_option("--model", be.model, "weights (default: freshly built default model)");
    c_bench->add_option("--iters", be.iters)->check(CLI::PositiveNumber);
    c_bench->add_option("--threads", be.threads)->check(CLI::PositiveNumber);

    InspectArgs ins;
    auto* c_inspect = app.add_subcommand("inspect", "stage shapes, parameter count, fingerprint");
    c_inspect->add_option("--model", ins.model, "weights (default: freshly built model)");
    c_inspect->add_option("--input-hw", ins.input_hw);
    c_inspect->add_option("--classes", ins.classes)->check(CLI::Range(2, 1000));
    c_inspect->add_option("--seed", ins.seed);

    try {
        app.parse(argc, argv);
    } catch (const CLI::CallForHelp& e) {
        return app.exit(e);
    } catch (const CLI::CallForAllHelp& e) {
        return app.exit(e);
    } catch (const CLI::ParseError& e) {
        std::cerr << "error: " << e.what() << "\n\n" << app.help();
        return kUsage;
    }

    try {
        apply_threads(threads);
        if (*c_prep) return cmd_prepare(prep);
        if (*c_split) return cmd_split(sp);
        if (*c_aug) return cmd_augment(au);
        if (*c_train) return cmd_train(tr);
        if (*c_eval) return cmd_eval(ev);
        if (*c_infer) return cmd_infer(in);
        if (*c_serve) return cmd_serve(sv);
        if (*c_watch) return cmd_watch(wa);
        if (*c_feat) return cmd_viz_features(vf);
        if (*c_filt) return cmd_viz_filters(vk);
        if (*c_bench) return cmd_bench(be);
        if (*c_inspect) return cmd_inspect(ins);
    } catch (const CLI::ParseError& e) {
        std::cerr << "error: " << e.what() << "\n";
        return kUsage;
    } catch (const NumericError& e) {
        std::cerr << "numeric failure: " << e.what() << "\n";
        return kNumericError;
    } catch (const std::exception& e) {
        std::cerr << "error: " << e.what() << "\n";
        return kDataError;
    }
    return kUsage;
}
