#pragma once

#include <cstddef>
#include <map>
#include <span>
#include <string>
#include <vector>

#include "ttgan/tensor.hpp"

namespace ttgan {

/// One-vs-rest counts for a single positive class.
struct ConfusionCounts {
    std::size_t tp = 0, tn = 0, fp = 0, fn = 0;
    std::size_t total() const noexcept { return tp + tn + fp + fn; }
};

ConfusionCounts confusion(std::span<const std::size_t> labels, std::span<const std::size_t> predictions,
                          std::size_t positive_class);

/// A ratio metric. A zero denominator gives value 0 with `degenerate` set.
struct Ratio {
    double value = 0.0;
    bool degenerate = false;
};

Ratio precision(const ConfusionCounts& c);
Ratio recall(const ConfusionCounts& c);
Ratio f1(const ConfusionCounts& c);
Ratio accuracy(const ConfusionCounts& c);

struct RocPoint {
    double fpr = 0.0;
    double tpr = 0.0;
};

struct RocResult {
    double auc = 0.0;
    std::vector<RocPoint> roc;  // from (0,0) to (1,1), one point per distinct threshold
};

/// Area under the ROC curve by threshold sweep; ties count one half.
/// Labels equal to `positive_class` are positives, everything else negatives.
RocResult roc_auc(std::span<const double> scores, std::span<const std::size_t> labels, std::size_t positive_class = 1);

struct ClassReport {
    Ratio precision, recall, f1;
    double auc = 0.0;
    ConfusionCounts counts;
};

struct MetricsReport {
    std::vector<ClassReport> classes;
    double accuracy = 0.0;
    double auc = 0.0;  // binary: class 1 vs class 0; otherwise the macro one-vs-rest mean
    std::vector<RocPoint> roc;  // binary positive-class curve (class 1 for binary, class 0 otherwise)
    double macro_precision = 0.0, macro_recall = 0.0, macro_f1 = 0.0;
};

/// Report for class probabilities `probs` [N, K] against labels; predictions are row argmaxes.
MetricsReport evaluate_predictions(const DenseTensor& probs, std::span<const std::size_t> labels);

/// `metric=value` lines, values printed with round-trip precision.
std::string report_to_text(const MetricsReport& r);
std::map<std::string, double> parse_report_text(const std::string& text);
std::map<std::string, double> report_values(const MetricsReport& r);

/// Per-class table in percent, followed by accuracy and AUC.
std::string report_table(const MetricsReport& r);

}  // namespace ttgan
