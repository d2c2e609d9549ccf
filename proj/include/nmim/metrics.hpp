#pragma once

#include <algorithm>
#include <cstdint>
#include <vector>

#include <json.hpp>

#include "nmim/common.hpp"

namespace nmim {

struct Metrics {
    int num_classes = 0;
    std::vector<std::vector<int64_t>> confusion; // [true class][predicted class]
    std::vector<int64_t> support;                // row sums of the confusion matrix
    std::vector<double> precision, recall, f1;
    double macro_f1 = 0.0;
    double accuracy = 0.0;
    int64_t total = 0;
    std::vector<double> train_loss_trace;
};

// Standard multi-class scores; per-class F1 is 0 whenever precision and
// recall are both 0.
inline Metrics evaluate_metrics(const std::vector<int>& predictions,
                                const std::vector<int>& labels, int num_classes = 0) {
    require(!labels.empty(), "evaluate_metrics: empty input");
    require(predictions.size() == labels.size(), "evaluate_metrics: ", predictions.size(),
            " predictions for ", labels.size(), " labels");
    int max_id = 0;
    for (size_t i = 0; i < labels.size(); ++i) {
        require(labels[i] >= 0 && predictions[i] >= 0,
                "evaluate_metrics: negative class id at position ", i);
        max_id = std::max({max_id, labels[i], predictions[i]});
    }
    Metrics m;
    m.num_classes = num_classes > 0 ? num_classes : max_id + 1;
    require(max_id < m.num_classes, "evaluate_metrics: class id ", max_id,
            " outside the declared ", m.num_classes, " classes");
    m.total = static_cast<int64_t>(labels.size());
    m.confusion.assign(static_cast<size_t>(m.num_classes),
                       std::vector<int64_t>(static_cast<size_t>(m.num_classes), 0));
    for (size_t i = 0; i < labels.size(); ++i) {
        m.confusion[static_cast<size_t>(labels[i])][static_cast<size_t>(predictions[i])] += 1;
    }
    m.support.assign(static_cast<size_t>(m.num_classes), 0);
    m.precision.assign(static_cast<size_t>(m.num_classes), 0.0);
    m.recall.assign(static_cast<size_t>(m.num_classes), 0.0);
    m.f1.assign(static_cast<size_t>(m.num_classes), 0.0);

    int64_t correct = 0;
    for (int c = 0; c < m.num_classes; ++c) {
        int64_t tp = m.confusion[static_cast<size_t>(c)][static_cast<size_t>(c)];
        int64_t row = 0, col = 0;
        for (int j = 0; j < m.num_classes; ++j) {
            row += m.confusion[static_cast<size_t>(c)][static_cast<size_t>(j)];
            col += m.confusion[static_cast<size_t>(j)][static_cast<size_t>(c)];
        }
        m.support[static_cast<size_t>(c)] = row;
        correct += tp;
        const double p = col > 0 ? static_cast<double>(tp) / col : 0.0;
        const double r = row > 0 ? static_cast<double>(tp) / row : 0.0;
        m.precision[static_cast<size_t>(c)] = p;
        m.recall[static_cast<size_t>(c)] = r;
        m.f1[static_cast<size_t>(c)] = (p + r) > 0.0 ? 2.0 * p * r / (p + r) : 0.0;
    }
    m.accuracy = static_cast<double>(correct) / m.total;
    double f1_sum = 0.0;
    for (double f : m.f1) f1_sum += f;
    m.macro_f1 = f1_sum / m.num_classes;
    return m;
}

inline nlohmann::json metrics_to_json(const Metrics& m) {
    nlohmann::json j;
    j["num_classes"] = m.num_classes;
    j["accuracy"] = m.accuracy;
    j["macro_f1"] = m.macro_f1;
    j["total"] = m.total;
    j["precision"] = m.precision;
    j["recall"] = m.recall;
    j["f1"] = m.f1;
    j["support"] = m.support;
    j["confusion"] = m.confusion;
    return j;
}

} // namespace nmim
