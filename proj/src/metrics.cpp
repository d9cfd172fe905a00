#include "dcdm/metrics.hpp"

#include <algorithm>
#include <cstdio>
#include <sstream>

#include <json.hpp>

#include "dcdm/dataset.hpp"

namespace dcdm {

using ordered_json = nlohmann::ordered_json;

ConfusionMatrix::ConfusionMatrix(std::size_t k) : k_(k), counts_(k * k, 0) {}

void ConfusionMatrix::update(std::size_t true_class, std::size_t predicted_class) {
    if (true_class >= k_ || predicted_class >= k_) {
        throw DataError("confusion update (" + std::to_string(true_class) + ", " + std::to_string(predicted_class) +
                        ") out of range for k=" + std::to_string(k_));
    }
    ++counts_[true_class * k_ + predicted_class];
}

void ConfusionMatrix::merge(const ConfusionMatrix& other) {
    if (other.k_ != k_) throw ShapeError("cannot merge confusion matrices of different sizes");
    for (std::size_t i = 0; i < counts_.size(); ++i) counts_[i] += other.counts_[i];
}

std::uint64_t ConfusionMatrix::count(std::size_t t, std::size_t p) const {
    if (t >= k_ || p >= k_) throw DataError("confusion index out of range");
    return counts_[t * k_ + p];
}

std::uint64_t ConfusionMatrix::total() const {
    std::uint64_t s = 0;
    for (auto c : counts_) s += c;
    return s;
}

std::uint64_t ConfusionMatrix::trace() const {
    std::uint64_t s = 0;
    for (std::size_t i = 0; i < k_; ++i) s += counts_[i * k_ + i];
    return s;
}

std::uint64_t ConfusionMatrix::row_sum(std::size_t t) const {
    std::uint64_t s = 0;
    for (std::size_t p = 0; p < k_; ++p) s += count(t, p);
    return s;
}

std::uint64_t ConfusionMatrix::col_sum(std::size_t p) const {
    std::uint64_t s = 0;
    for (std::size_t t = 0; t < k_; ++t) s += count(t, p);
    return s;
}

std::uint64_t ConfusionMatrix::row_max(std::size_t t) const {
    std::uint64_t m = 0;
    for (std::size_t p = 0; p < k_; ++p) m = std::max(m, count(t, p));
    return m;
}

double f1_score(double precision, double recall) {
    const double s = precision + recall;
    return s > 0.0 ? 2.0 * precision * recall / s : 0.0;
}

MetricsReport compute_metrics(const ConfusionMatrix& cm, const std::vector<std::string>& class_names) {
    const std::size_t k = cm.k();
    if (k == 0) throw DataError("confusion matrix has no classes");
    const std::uint64_t total = cm.total();
    if (total == 0) throw DataError("confusion matrix is empty");
    if (!class_names.empty() && class_names.size() != k) {
        throw DataError("got " + std::to_string(class_names.size()) + " class names for k=" + std::to_string(k));
    }

    MetricsReport r;
    r.k = k;
    r.total = total;
    const auto& table = class_table();
    for (std::size_t c = 0; c < k; ++c) {
        r.class_names.push_back(!class_names.empty() ? class_names[c]
                                : c < table.size()   ? table[c].display_name()
                                                     : "class " + std::to_string(c));
    }
    double sum_p = 0.0, sum_r = 0.0;
    for (std::size_t c = 0; c < k; ++c) {
        ClassMetrics m;
        m.tp = cm.count(c, c);
        m.fp = cm.col_sum(c) - m.tp;
        m.fn = cm.row_sum(c) - m.tp;
        m.tn = total - m.tp - m.fp - m.fn;
        if (m.tp + m.fp > 0) {
            m.precision = static_cast<double>(m.tp) / static_cast<double>(m.tp + m.fp);
        } else {
            m.precision_undefined = true;
        }
        if (m.tp + m.fn > 0) {
            m.recall = static_cast<double>(m.tp) / static_cast<double>(m.tp + m.fn);
        } else {
            m.recall_undefined = true;
        }
        m.f1 = f1_score(m.precision, m.recall);
        m.f1_undefined = m.precision + m.recall == 0.0;
        m.accuracy = static_cast<double>(m.tp + m.tn) / static_cast<double>(total);
        sum_p += m.precision;
        sum_r += m.recall;
        r.per_class.push_back(m);
    }
    r.macro_precision = sum_p / static_cast<double>(k);
    r.macro_recall = sum_r / static_cast<double>(k);
    r.macro_f1 = f1_score(r.macro_precision, r.macro_recall);
    r.global_accuracy = static_cast<double>(cm.trace()) / static_cast<double>(total);
    r.confusion.assign(k, std::vector<std::uint64_t>(k));
    for (std::size_t t = 0; t < k; ++t)
        for (std::size_t p = 0; p < k; ++p) r.confusion[t][p] = cm.count(t, p);
    return r;
}

namespace {

ordered_json to_json(const MetricsReport& r) {
    ordered_json j;
    j["num_classes"] = r.k;
    j["total"] = r.total;
    j["global_accuracy"] = r.global_accuracy;
    j["macro_precision"] = r.macro_precision;
    j["macro_recall"] = r.macro_recall;
    j["macro_f1"] = r.macro_f1;
    ordered_json per = ordered_json::array();
    for (std::size_t c = 0; c < r.per_class.size(); ++c) {
        const ClassMetrics& m = r.per_class[c];
        ordered_json e;
        e["index"] = c;
        e["name"] = r.class_names.at(c);
        e["tp"] = m.tp;
        e["fp"] = m.fp;
        e["fn"] = m.fn;
        e["tn"] = m.tn;
        e["precision"] = m.precision;
        e["recall"] = m.recall;
        e["f1"] = m.f1;
        e["accuracy"] = m.accuracy;
        ordered_json undef = ordered_json::array();
        if (m.precision_undefined) undef.push_back("precision");
        if (m.recall_undefined) undef.push_back("recall");
        if (m.f1_undefined) undef.push_back("f1");
        e["undefined"] = undef;
        per.push_back(e);
    }
    j["per_class"] = per;
    j["confusion"] = r.confusion;
    return j;
}

std::string pct(double v) {
    char buf[32];
    std::snprintf(buf, sizeof buf, "%.2f%%", v * 100.0);
    return buf;
}

}  // namespace

std::string render_report(const MetricsReport& r, ReportFormat format) {
    if (format == ReportFormat::Json) return to_json(r).dump(2) + "\n";

    std::ostringstream out;
    out << "classes: " << r.k << "  samples: " << r.total << "\n";
    out << "global accuracy: " << pct(r.global_accuracy) << "\n";
    out << "macro precision: " << pct(r.macro_precision) << "\n";
    out << "macro recall:    " << pct(r.macro_recall) << "\n";
    out << "macro F1:        " << pct(r.macro_f1) << "\n\n";
    char line[256];
    std::snprintf(line, sizeof line, "%-4s %-34s %8s %8s %8s %8s %10s %10s %10s %10s\n", "idx", "class", "tp", "fp",
                  "fn", "tn", "precision", "recall", "f1", "accuracy");
    out << line;
    for (std::size_t c = 0; c < r.per_class.size(); ++c) {
        const ClassMetrics& m = r.per_class[c];
        auto cell = [](double v, bool undefined) { return undefined ? std::string("n/a") : pct(v); };
        std::snprintf(line, sizeof line, "%-4zu %-34.34s %8llu %8llu %8llu %8llu %10s %10s %10s %10s\n", c,
                      r.class_names.at(c).c_str(), static_cast<unsigned long long>(m.tp),
                      static_cast<unsigned long long>(m.fp), static_cast<unsigned long long>(m.fn),
                      static_cast<unsigned long long>(m.tn), cell(m.precision, m.precision_undefined).c_str(),
                      cell(m.recall, m.recall_undefined).c_str(), cell(m.f1, m.f1_undefined).c_str(),
                      pct(m.accuracy).c_str());
        out << line;
    }
    return out.str();
}

MetricsReport parse_report(const std::string& text) {
    try {
        const auto j = ordered_json::parse(text);
        MetricsReport r;
        r.k = j.at("num_classes").get<std::size_t>();
        r.total = j.at("total").get<std::uint64_t>();
        r.global_accuracy = j.at("global_accuracy").get<double>();
        r.macro_precision = j.at("macro_precision").get<double>();
        r.macro_recall = j.at("macro_recall").get<double>();
        r.macro_f1 = j.at("macro_f1").get<double>();
        for (const auto& e : j.at("per_class")) {
            ClassMetrics m;
            r.class_names.push_back(e.at("name").get<std::string>());
            m.tp = e.at("tp").get<std::uint64_t>();
            m.fp = e.at("fp").get<std::uint64_t>();
            m.fn = e.at("fn").get<std::uint64_t>();
            m.tn = e.at("tn").get<std::uint64_t>();
            m.precision = e.at("precision").get<double>();
            m.recall = e.at("recall").get<double>();
            m.f1 = e.at("f1").get<double>();
            m.accuracy = e.at("accuracy").get<double>();
            for (const auto& u : e.at("undefined")) {
                const auto name = u.get<std::string>();
                if (name == "precision") m.precision_undefined = true;
                else if (name == "recall") m.recall_undefined = true;
                else if (name == "f1") m.f1_undefined = true;
                else throw FormatError("unknown undefined marker '" + name + "'");
            }
            r.per_class.push_back(m);
        }
        r.confusion = j.at("confusion").get<std::vector<std::vector<std::uint64_t>>>();
        if (r.per_class.size() != r.k || r.confusion.size() != r.k) {
            throw FormatError("report lists a different number of classes than num_classes");
        }
        return r;
    } catch (const nlohmann::json::exception& e) {
        throw FormatError(std::string("malformed metrics report: ") + e.what());
    }
}

}  // namespace dcdm
