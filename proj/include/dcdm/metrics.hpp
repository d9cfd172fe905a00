#pragma once

#include <cstdint>
#include <string>
#include <vector>

#include "dcdm/error.hpp"

namespace dcdm {

/// k x k counts, rows = true class, columns = predicted class.
class ConfusionMatrix {
public:
    explicit ConfusionMatrix(std::size_t k = 0);

    std::size_t k() const { return k_; }
    void update(std::size_t true_class, std::size_t predicted_class);
    void merge(const ConfusionMatrix& other);

    std::uint64_t count(std::size_t true_class, std::size_t predicted_class) const;
    std::uint64_t total() const;
    std::uint64_t trace() const;
    std::uint64_t row_sum(std::size_t true_class) const;
    std::uint64_t col_sum(std::size_t predicted_class) const;
    std::uint64_t row_max(std::size_t true_class) const;

    friend bool operator==(const ConfusionMatrix&, const ConfusionMatrix&) = default;

private:
    std::size_t k_ = 0;
    std::vector<std::uint64_t> counts_;
};

struct ClassMetrics {
    std::uint64_t tp = 0, fp = 0, fn = 0, tn = 0;
    double precision = 0.0;
    double recall = 0.0;
    double f1 = 0.0;
    double accuracy = 0.0;  // (tp + tn) / total
    bool precision_undefined = false;
    bool recall_undefined = false;
    bool f1_undefined = false;

    friend bool operator==(const ClassMetrics&, const ClassMetrics&) = default;
};

struct MetricsReport {
    std::size_t k = 0;
    std::uint64_t total = 0;
    std::vector<std::string> class_names;
    std::vector<ClassMetrics> per_class;
    double macro_precision = 0.0;
    double macro_recall = 0.0;
    double macro_f1 = 0.0;  // harmonic mean of the macro precision and recall
    double global_accuracy = 0.0;  // trace / total
    std::vector<std::vector<std::uint64_t>> confusion;

    friend bool operator==(const MetricsReport&, const MetricsReport&) = default;
};

/// 2PR/(P+R), or 0 when P+R is 0.
double f1_score(double precision, double recall);

/// One-vs-rest counts and ratios per class plus macro aggregates. Zero
/// denominators give 0 with the matching undefined flag set. Names default to
/// the class table (or "class i" beyond it).
MetricsReport compute_metrics(const ConfusionMatrix& cm, const std::vector<std::string>& class_names = {});

enum class ReportFormat { Json, Text };

std::string render_report(const MetricsReport& report, ReportFormat format);

/// Inverse of render_report(..., Json).
MetricsReport parse_report(const std::string& json);

}  // namespace dcdm
