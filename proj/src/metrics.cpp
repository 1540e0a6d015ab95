#include "ttgan/metrics.hpp"

#include <fmt/format.h>

#include <algorithm>
#include <numeric>
#include <sstream>

#include "ttgan/errors.hpp"

namespace ttgan {

namespace {

Ratio ratio(double num, double den) {
    if (den == 0.0) return {0.0, true};
    return {num / den, false};
}

}  // namespace

ConfusionCounts confusion(std::span<const std::size_t> labels, std::span<const std::size_t> predictions,
                          std::size_t positive_class) {
    if (labels.size() != predictions.size()) {
        throw ArgumentError("confusion: " + std::to_string(labels.size()) + " labels vs " +
                            std::to_string(predictions.size()) + " predictions");
    }
    ConfusionCounts c;
    for (std::size_t i = 0; i < labels.size(); ++i) {
        const bool actual = labels[i] == positive_class;
        const bool predicted = predictions[i] == positive_class;
        if (actual && predicted) ++c.tp;
        else if (actual) ++c.fn;
        else if (predicted) ++c.fp;
        else ++c.tn;
    }
    return c;
}

Ratio precision(const ConfusionCounts& c) { return ratio(double(c.tp), double(c.tp + c.fp)); }
Ratio recall(const ConfusionCounts& c) { return ratio(double(c.tp), double(c.tp + c.fn)); }
Ratio accuracy(const ConfusionCounts& c) { return ratio(double(c.tp + c.tn), double(c.total())); }

Ratio f1(const ConfusionCounts& c) {
    const Ratio p = precision(c), r = recall(c);
    Ratio out = ratio(2.0 * p.value * r.value, p.value + r.value);
    out.degenerate = out.degenerate || p.degenerate || r.degenerate;
    return out;
}

RocResult roc_auc(std::span<const double> scores, std::span<const std::size_t> labels, std::size_t positive_class) {
    if (scores.size() != labels.size()) throw ArgumentError("roc_auc: scores and labels differ in length");
    std::size_t pos = 0;
    for (auto l : labels) pos += l == positive_class;
    const std::size_t neg = labels.size() - pos;
    if (pos == 0 || neg == 0) throw ArgumentError("roc_auc: needs at least one positive and one negative label");

    std::vector<std::size_t> order(scores.size());
    std::iota(order.begin(), order.end(), 0);
    std::stable_sort(order.begin(), order.end(), [&](std::size_t a, std::size_t b) { return scores[a] > scores[b]; });

    RocResult out;
    out.roc.push_back({0.0, 0.0});
    // Twice the area in units of one positive-negative pair, so every partial sum is an integer.
    double twice_area = 0.0;
    std::size_t tp = 0, fp = 0;
    for (std::size_t i = 0; i < order.size();) {
        std::size_t dtp = 0, dfp = 0;
        const double s = scores[order[i]];
        for (; i < order.size() && scores[order[i]] == s; ++i) {
            if (labels[order[i]] == positive_class) ++dtp;
            else ++dfp;
        }
        twice_area += static_cast<double>(dfp) * static_cast<double>(2 * tp + dtp);
        tp += dtp;
        fp += dfp;
        out.roc.push_back({static_cast<double>(fp) / double(neg), static_cast<double>(tp) / double(pos)});
    }
    out.auc = twice_area / (2.0 * static_cast<double>(pos) * static_cast<double>(neg));
    return out;
}

MetricsReport evaluate_predictions(const DenseTensor& probs, std::span<const std::size_t> labels) {
    if (probs.rank() != 2 || probs.dim(0) != labels.size()) {
        throw ShapeError("evaluate_predictions: probabilities " + shape_to_string(probs.shape()) + " for " +
                         std::to_string(labels.size()) + " labels");
    }
    const std::size_t n = probs.dim(0), k = probs.dim(1);
    if (n == 0 || k < 2) throw ArgumentError("evaluate_predictions: need samples and at least two classes");
    std::vector<std::size_t> pred(n);
    for (std::size_t i = 0; i < n; ++i) {
        const double* row = probs.data().data() + i * k;
        pred[i] = static_cast<std::size_t>(std::max_element(row, row + k) - row);
        if (labels[i] >= k) throw ArgumentError("evaluate_predictions: label out of range");
    }
    MetricsReport r;
    std::size_t correct = 0;
    for (std::size_t i = 0; i < n; ++i) correct += pred[i] == labels[i];
    r.accuracy = static_cast<double>(correct) / static_cast<double>(n);
    std::vector<double> column(n);
    for (std::size_t c = 0; c < k; ++c) {
        ClassReport cr;
        cr.counts = confusion(labels, pred, c);
        cr.precision = precision(cr.counts);
        cr.recall = recall(cr.counts);
        cr.f1 = f1(cr.counts);
        for (std::size_t i = 0; i < n; ++i) column[i] = probs[i * k + c];
        auto roc = roc_auc(column, labels, c);
        cr.auc = roc.auc;
        if ((k == 2 && c == 1) || (k > 2 && c == 0)) r.roc = std::move(roc.roc);
        r.classes.push_back(cr);
    }
    for (const auto& c : r.classes) {
        r.macro_precision += c.precision.value;
        r.macro_recall += c.recall.value;
        r.macro_f1 += c.f1.value;
    }
    const double kk = static_cast<double>(k);
    r.macro_precision /= kk;
    r.macro_recall /= kk;
    r.macro_f1 /= kk;
    if (k == 2) {
        r.auc = r.classes[1].auc;
    } else {
        for (const auto& c : r.classes) r.auc += c.auc;
        r.auc /= kk;
    }
    return r;
}

std::map<std::string, double> report_values(const MetricsReport& r) {
    std::map<std::string, double> v;
    v["accuracy"] = r.accuracy;
    v["auc"] = r.auc;
    v["macro_precision"] = r.macro_precision;
    v["macro_recall"] = r.macro_recall;
    v["macro_f1"] = r.macro_f1;
    for (std::size_t c = 0; c < r.classes.size(); ++c) {
        const std::string p = "class" + std::to_string(c) + ".";
        v[p + "precision"] = r.classes[c].precision.value;
        v[p + "recall"] = r.classes[c].recall.value;
        v[p + "f1"] = r.classes[c].f1.value;
        v[p + "auc"] = r.classes[c].auc;
    }
    return v;
}

std::string report_to_text(const MetricsReport& r) {
    std::string out;
    for (const auto& [k, v] : report_values(r)) out += fmt::format("{}={}\n", k, v);
    return out;
}

std::map<std::string, double> parse_report_text(const std::string& text) {
    std::map<std::string, double> out;
    std::istringstream in(text);
    std::string line;
    std::size_t lineno = 0;
    while (std::getline(in, line)) {
        ++lineno;
        if (line.empty()) continue;
        const auto eq = line.find('=');
        if (eq == std::string::npos || eq == 0) {
            throw ArgumentError("report line " + std::to_string(lineno) + ": expected metric=value");
        }
        std::size_t used = 0;
        const std::string value = line.substr(eq + 1);
        double d = 0.0;
        try {
            d = std::stod(value, &used);
        } catch (const std::exception&) {
            used = 0;
        }
        if (used == 0 || used != value.size()) {
            throw ArgumentError("report line " + std::to_string(lineno) + ": bad value '" + value + "'");
        }
        out[line.substr(0, eq)] = d;
    }
    return out;
}

std::string report_table(const MetricsReport& r) {
    std::string out = fmt::format("{:<8}{:>14}{:>12}{:>14}\n", "class", "precision(%)", "recall(%)", "f1-score(%)");
    for (std::size_t c = 0; c < r.classes.size(); ++c) {
        const auto& cr = r.classes[c];
        out += fmt::format("{:<8}{:>14.2f}{:>12.2f}{:>14.2f}\n", c, 100.0 * cr.precision.value,
                           100.0 * cr.recall.value, 100.0 * cr.f1.value);
    }
    out += fmt::format("accuracy(%) {:.2f}\nAUC(%) {:.2f}\n", 100.0 * r.accuracy, 100.0 * r.auc);
    return out;
}

}  // namespace ttgan
