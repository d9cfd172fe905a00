#include "dcdm/viz.hpp"

#include <algorithm>
#include <charconv>
#include <cmath>
#include <limits>
#include <sstream>

namespace dcdm {

namespace {

void fill_rect(ImageBuffer& img, long x0, long y0, long w, long h, const std::uint8_t rgb[3]) {
    for (long y = std::max(0L, y0); y < std::min<long>(static_cast<long>(img.height), y0 + h); ++y)
        for (long x = std::max(0L, x0); x < std::min<long>(static_cast<long>(img.width), x0 + w); ++x)
            for (std::size_t c = 0; c < 3; ++c) img.at(static_cast<std::size_t>(x), static_cast<std::size_t>(y), c) = rgb[c];
}

void put(ImageBuffer& img, long x, long y, const std::uint8_t rgb[3]) { fill_rect(img, x, y, 1, 1, rgb); }

void line(ImageBuffer& img, long x0, long y0, long x1, long y1, const std::uint8_t rgb[3]) {
    const long dx = std::abs(x1 - x0), dy = -std::abs(y1 - y0);
    const long sx = x0 < x1 ? 1 : -1, sy = y0 < y1 ? 1 : -1;
    long err = dx + dy;
    while (true) {
        put(img, x0, y0, rgb);
        if (x0 == x1 && y0 == y1) break;
        const long e2 = 2 * err;
        if (e2 >= dy) {
            err += dy;
            x0 += sx;
        }
        if (e2 <= dx) {
            err += dx;
            y0 += sy;
        }
    }
}

// 3x5 bitmaps for 0-9, one row per 3-bit group, top row first.
constexpr std::uint16_t kDigits[10] = {
    0b111101101101111, 0b010110010010111, 0b111001111100111, 0b111001111001111, 0b101101111001001,
    0b111100111001111, 0b111100111101111, 0b111001001001001, 0b111101111101111, 0b111101111001111,
};

constexpr std::size_t kGlyphScale = 2;
constexpr std::size_t kGlyphAdvance = 4 * kGlyphScale;

void draw_number(ImageBuffer& img, long x, long y, std::size_t value, const std::uint8_t rgb[3]) {
    const std::string s = std::to_string(value);
    for (char ch : s) {
        const std::uint16_t bits = kDigits[ch - '0'];
        for (long row = 0; row < 5; ++row)
            for (long col = 0; col < 3; ++col)
                if (bits & (1u << (14 - (row * 3 + col)))) {
                    fill_rect(img, x + col * static_cast<long>(kGlyphScale), y + row * static_cast<long>(kGlyphScale),
                              kGlyphScale, kGlyphScale, rgb);
                }
        x += static_cast<long>(kGlyphAdvance);
    }
}

constexpr std::uint8_t kBlack[3] = {0, 0, 0};
constexpr std::uint8_t kGrid[3] = {220, 220, 220};

std::string format_double(double v) {
    char buf[64];
    const auto res = std::to_chars(buf, buf + sizeof buf, v);
    return std::string(buf, res.ptr);
}

double parse_double(const std::string& s, std::size_t line_no) {
    double v = 0.0;
    const auto res = std::from_chars(s.data(), s.data() + s.size(), v);
    if (res.ec != std::errc() || res.ptr != s.data() + s.size()) {
        throw FormatError("curves line " + std::to_string(line_no) + ": bad number '" + s + "'");
    }
    return v;
}

}  // namespace

GridLayout grid_layout(std::size_t count, std::size_t tile_width, std::size_t tile_height) {
    if (count == 0 || tile_width == 0 || tile_height == 0) throw DataError("grid needs at least one non-empty tile");
    GridLayout g;
    g.count = count;
    g.side = static_cast<std::size_t>(std::ceil(std::sqrt(static_cast<double>(count))));
    while (g.side * g.side < count) ++g.side;
    while (g.side > 1 && (g.side - 1) * (g.side - 1) >= count) --g.side;
    g.tile_width = tile_width;
    g.tile_height = tile_height;
    return g;
}

std::vector<std::uint8_t> normalize_to_bytes(std::span<const double> values) {
    std::vector<std::uint8_t> out(values.size(), kDegenerateGray);
    if (values.empty()) return out;
    const auto [lo, hi] = std::minmax_element(values.begin(), values.end());
    const double mn = *lo, mx = *hi;
    if (!(mx > mn)) return out;
    for (std::size_t i = 0; i < values.size(); ++i) {
        out[i] = static_cast<std::uint8_t>(std::lround(255.0 * (values[i] - mn) / (mx - mn)));
    }
    return out;
}

template <typename T>
ImageBuffer tile_feature_maps(const Tensor<T>& maps) {
    if (maps.rank() != 3) throw ShapeError("feature maps must be [C,H,W], got " + maps.shape().to_string());
    const std::size_t c = maps.dim(0), h = maps.dim(1), w = maps.dim(2);
    const GridLayout g = grid_layout(c, w, h);
    ImageBuffer img(g.image_width(), g.image_height(), 255);
    std::vector<double> plane(h * w);
    for (std::size_t ch = 0; ch < c; ++ch) {
        const T* src = maps.ptr() + ch * h * w;
        std::copy(src, src + h * w, plane.begin());
        const auto bytes = normalize_to_bytes(plane);
        const std::size_t ox = g.tile_x(ch), oy = g.tile_y(ch);
        for (std::size_t y = 0; y < h; ++y)
            for (std::size_t x = 0; x < w; ++x)
                for (std::size_t k = 0; k < 3; ++k) img.at(ox + x, oy + y, k) = bytes[y * w + x];
    }
    return img;
}

namespace {

template <typename T>
const Layer<T>& conv_by_index(const Model<T>& model, std::size_t conv_index) {
    const auto names = model.conv_layer_names();
    if (conv_index < 1 || conv_index > names.size()) {
        throw DataError("invalid conv layer index " + std::to_string(conv_index) + " (model has " +
                        std::to_string(names.size()) + " conv layers)");
    }
    return model.layer(names[conv_index - 1]);
}

}  // namespace

template <typename T>
std::vector<FeatureGrid> extract_feature_maps(const Model<T>& model, const Tensor<T>& image,
                                              const std::vector<std::size_t>& conv_indices) {
    std::vector<std::string> names;
    for (std::size_t i : conv_indices) names.push_back(conv_by_index(model, i).name);
    const ForwardResult<T> fr = forward(model, image, false, nullptr, names);
    std::vector<FeatureGrid> out;
    for (const auto& name : names) {
        const Tensor<T>& tap = fr.taps.at(name);
        const Tensor<T> maps = tap.reshaped(Shape{tap.dim(1), tap.dim(2), tap.dim(3)});
        FeatureGrid g;
        g.layer = name;
        g.channels = maps.dim(0);
        g.layout = grid_layout(maps.dim(0), maps.dim(2), maps.dim(1));
        g.image = tile_feature_maps(maps);
        out.push_back(std::move(g));
    }
    return out;
}

template <typename T>
ImageBuffer visualize_filters(const Model<T>& model, std::size_t conv_index) {
    const Layer<T>& layer = conv_by_index(model, conv_index);
    const Tensor<T>& w = layer.params->weights;  // [out, in, 3, 3]
    const std::size_t out_c = w.dim(0), in_c = w.dim(1);
    const bool rgb = in_c == 3;
    const std::size_t side = 3 * kFilterScale;
    const GridLayout g = grid_layout(out_c, side, side);
    ImageBuffer img(g.image_width(), g.image_height(), 255);
    for (std::size_t o = 0; o < out_c; ++o) {
        const T* k = w.ptr() + o * in_c * 9;
        std::vector<double> vals;
        if (rgb) {
            vals.assign(k, k + 27);  // [c][ky][kx]
        } else {
            vals.assign(9, 0.0);
            for (std::size_t c = 0; c < in_c; ++c)
                for (std::size_t t = 0; t < 9; ++t) vals[t] += static_cast<double>(k[c * 9 + t]);
            for (auto& v : vals) v /= static_cast<double>(in_c);
        }
        const auto bytes = normalize_to_bytes(vals);
        const std::size_t ox = g.tile_x(o), oy = g.tile_y(o);
        for (std::size_t y = 0; y < side; ++y)
            for (std::size_t x = 0; x < side; ++x) {
                const std::size_t t = (y / kFilterScale) * 3 + x / kFilterScale;
                for (std::size_t c = 0; c < 3; ++c) img.at(ox + x, oy + y, c) = rgb ? bytes[c * 9 + t] : bytes[t];
            }
    }
    return img;
}

ConfusionLayout confusion_layout(std::size_t k) {
    ConfusionLayout l;
    l.k = k;
    l.cell = k <= 10 ? 32 : 20;
    const std::size_t digits = std::to_string(k > 0 ? k - 1 : 0).size();
    l.origin_x = 8 + digits * kGlyphAdvance + 6;
    l.origin_y = 8 + 5 * kGlyphScale + 6;
    return l;
}

std::uint8_t confusion_cell_gray(const ConfusionMatrix& cm, std::size_t truth, std::size_t pred) {
    const std::uint64_t mx = cm.row_max(truth);
    if (mx == 0) return 255;
    const double v = static_cast<double>(cm.count(truth, pred)) / static_cast<double>(mx);
    return static_cast<std::uint8_t>(std::lround(255.0 * (1.0 - v)));
}

ImageBuffer render_confusion(const ConfusionMatrix& cm) {
    const std::size_t k = cm.k();
    if (k < 2) throw DataError("confusion heatmap needs k >= 2");
    const ConfusionLayout l = confusion_layout(k);
    ImageBuffer img(l.origin_x + k * l.cell + 8, l.origin_y + k * l.cell + 8, 255);
    for (std::size_t t = 0; t < k; ++t) {
        for (std::size_t p = 0; p < k; ++p) {
            const std::uint8_t g = confusion_cell_gray(cm, t, p);
            const std::uint8_t rgb[3] = {g, g, g};
            fill_rect(img, static_cast<long>(l.origin_x + p * l.cell), static_cast<long>(l.origin_y + t * l.cell),
                      static_cast<long>(l.cell), static_cast<long>(l.cell), rgb);
        }
    }
    // cell borders
    const long right = static_cast<long>(l.origin_x + k * l.cell), bottom = static_cast<long>(l.origin_y + k * l.cell);
    for (std::size_t i = 0; i <= k; ++i) {
        const long x = static_cast<long>(l.origin_x + i * l.cell), y = static_cast<long>(l.origin_y + i * l.cell);
        line(img, x, static_cast<long>(l.origin_y), x, bottom, kGrid);
        line(img, static_cast<long>(l.origin_x), y, right, y, kGrid);
    }
    for (std::size_t i = 0; i < k; ++i) {
        const long label_w = static_cast<long>(std::to_string(i).size() * kGlyphAdvance);
        draw_number(img, static_cast<long>(l.origin_x - 6) - label_w,
                    static_cast<long>(l.cell_center_y(i)) - static_cast<long>(5 * kGlyphScale / 2), i, kBlack);
        draw_number(img, static_cast<long>(l.cell_center_x(i)) - label_w / 2, 8, i, kBlack);
    }
    return img;
}

// ---------------------------------------------------------------------------

std::string curves_csv(const TrainHistory& history) {
    std::ostringstream out;
    out << "epoch,train_loss,train_acc,val_loss,val_acc\n";
    for (const auto& r : history) {
        out << r.epoch << ',' << format_double(r.train_loss) << ',' << format_double(r.train_acc) << ','
            << format_double(r.val_loss) << ',' << format_double(r.val_acc) << '\n';
    }
    return out.str();
}

TrainHistory parse_curves_csv(const std::string& text) {
    std::istringstream in(text);
    std::string line;
    std::size_t line_no = 0;
    TrainHistory h;
    while (std::getline(in, line)) {
        ++line_no;
        if (!line.empty() && line.back() == '\r') line.pop_back();
        if (line_no == 1) {
            if (line != "epoch,train_loss,train_acc,val_loss,val_acc") throw FormatError("curves file has a bad header");
            continue;
        }
        if (line.empty()) continue;
        std::vector<std::string> f;
        std::stringstream ls(line);
        std::string cell;
        while (std::getline(ls, cell, ',')) f.push_back(cell);
        if (f.size() != 5) throw FormatError("curves line " + std::to_string(line_no) + ": expected 5 fields");
        EpochRecord r;
        const double e = parse_double(f[0], line_no);
        if (e < 1 || e != std::floor(e)) throw FormatError("curves line " + std::to_string(line_no) + ": bad epoch");
        r.epoch = static_cast<std::size_t>(e);
        r.train_loss = parse_double(f[1], line_no);
        r.train_acc = parse_double(f[2], line_no);
        r.val_loss = parse_double(f[3], line_no);
        r.val_acc = parse_double(f[4], line_no);
        h.push_back(r);
    }
    if (line_no == 0) throw FormatError("curves file is empty");
    return h;
}

void write_curves_csv(const TrainHistory& history, const std::filesystem::path& path) {
    const std::string text = curves_csv(history);
    write_file_bytes(path, std::span(reinterpret_cast<const std::uint8_t*>(text.data()), text.size()));
}

TrainHistory read_curves_csv(const std::filesystem::path& path) {
    const auto bytes = read_file_bytes(path);
    return parse_curves_csv(std::string(bytes.begin(), bytes.end()));
}

double PlotPanel::x_pixel(double epoch) const {
    const double span = static_cast<double>(width - 1);
    if (x_max == x_min) return static_cast<double>(left) + span / 2.0;
    return static_cast<double>(left) + (epoch - x_min) / (x_max - x_min) * span;
}

double PlotPanel::y_pixel(double value) const {
    const double span = static_cast<double>(height - 1);
    const double t = y_max == y_min ? 0.5 : (value - y_min) / (y_max - y_min);
    return static_cast<double>(top) + (1.0 - std::clamp(t, 0.0, 1.0)) * span;
}

CurvePlot plot_curves(const TrainHistory& history) {
    if (history.empty()) throw DataError("cannot plot an empty history");
    CurvePlot p;
    p.image = ImageBuffer(900, 380, 255);
    const double e0 = static_cast<double>(history.front().epoch), e1 = static_cast<double>(history.back().epoch);
    double loss_max = 0.0;
    for (const auto& r : history) loss_max = std::max({loss_max, r.train_loss, r.val_loss});
    if (!(loss_max > 0.0) || !std::isfinite(loss_max)) loss_max = 1.0;

    p.accuracy = PlotPanel{50, 30, 380, 300, 0.0, 1.0, e0, e1};
    p.loss = PlotPanel{500, 30, 380, 300, 0.0, loss_max * 1.05, e0, e1};

    auto draw_panel = [&](const PlotPanel& panel, auto train_value, auto val_value) {
        const long l = static_cast<long>(panel.left), t = static_cast<long>(panel.top);
        const long r = l + static_cast<long>(panel.width), b = t + static_cast<long>(panel.height);
        line(p.image, l - 1, t - 1, r, t - 1, kBlack);
        line(p.image, l - 1, b, r, b, kBlack);
        line(p.image, l - 1, t - 1, l - 1, b, kBlack);
        line(p.image, r, t - 1, r, b, kBlack);
        for (int pass = 0; pass < 2; ++pass) {
            const std::uint8_t* color = pass == 0 ? kTrainColor : kValColor;
            long px = 0, py = 0;
            for (std::size_t i = 0; i < history.size(); ++i) {
                const double v = pass == 0 ? train_value(history[i]) : val_value(history[i]);
                const long x = std::lround(panel.x_pixel(static_cast<double>(history[i].epoch)));
                const long y = std::lround(panel.y_pixel(v));
                if (i > 0) line(p.image, px, py, x, y, color);
                px = x;
                py = y;
            }
        }
        draw_number(p.image, l, b + 6, static_cast<std::size_t>(e0), kBlack);
        const std::string last = std::to_string(static_cast<std::size_t>(e1));
        draw_number(p.image, r - static_cast<long>(last.size() * kGlyphAdvance), b + 6, static_cast<std::size_t>(e1),
                    kBlack);
    };
    draw_panel(p.accuracy, [](const EpochRecord& r) { return r.train_acc; },
               [](const EpochRecord& r) { return r.val_acc; });
    draw_panel(p.loss, [](const EpochRecord& r) { return r.train_loss; },
               [](const EpochRecord& r) { return r.val_loss; });
    // Legend swatches: train then validation.
    fill_rect(p.image, 50, 8, 24, 10, kTrainColor);
    fill_rect(p.image, 90, 8, 24, 10, kValColor);
    return p;
}

void export_curves(const TrainHistory& history, const std::filesystem::path& csv_path,
                   const std::filesystem::path& plot_path) {
    if (history.empty()) throw DataError("cannot export an empty history");
    write_curves_csv(history, csv_path);
    if (!plot_path.empty()) write_png(plot_curves(history).image, plot_path);
}

template ImageBuffer tile_feature_maps(const Tensor<float>&);
template ImageBuffer tile_feature_maps(const Tensor<double>&);
template std::vector<FeatureGrid> extract_feature_maps(const Model<float>&, const Tensor<float>&,
                                                       const std::vector<std::size_t>&);
template std::vector<FeatureGrid> extract_feature_maps(const Model<double>&, const Tensor<double>&,
                                                       const std::vector<std::size_t>&);
template ImageBuffer visualize_filters(const Model<float>&, std::size_t);
template ImageBuffer visualize_filters(const Model<double>&, std::size_t);

}  // namespace dcdm
