#pragma once

#include <algorithm>
#include <cctype>
#include <map>
#include <optional>
#include <string>
#include <vector>

#include "json.hpp"
#include "qalens/data.hpp"
#include "qalens/errors.hpp"
#include "qalens/model.hpp"

namespace qalens {

constexpr std::size_t kMaxAnswerTokens = 30;

struct QAPrediction {
    AnswerKind category = AnswerKind::No;
    std::size_t span_start = 0;  // token indices, valid when category == Span
    std::size_t span_end = 0;
    std::string span_text;
    double category_prob = 0.0;
    double span_score = 0.0;
    bool span_fallback = false;  // no feasible span existed
};

// Argmax answer category (ties -> lowest index); for Span, the (s, e) pair
// maximizing f_s[s] * f_e[e] with s <= e, length <= max_answer_len, both
// inside the context region. Ties go to the lexicographically first pair.
inline QAPrediction decode(const ModelConfig& config, const ModelOutputs& outputs,
                           const EncodedSample& sample,
                           std::size_t max_answer_len = kMaxAnswerTokens) {
    QAPrediction pred;
    std::size_t best_cat = 0;
    for (std::size_t i = 1; i < outputs.f_a.size(); ++i) {
        if (outputs.f_a[i] > outputs.f_a[best_cat]) best_cat = i;
    }
    pred.category = category_from_index(config, best_cat);
    pred.category_prob = outputs.f_a[best_cat];
    if (pred.category != AnswerKind::Span) return pred;

    double best = -1.0;
    std::size_t bs = 0, be = 0;
    for (std::size_t s = sample.context_start; s < sample.context_end; ++s) {
        const std::size_t emax = std::min(sample.context_end, s + max_answer_len);
        for (std::size_t e = s; e < emax; ++e) {
            const double score = outputs.f_s[s] * outputs.f_e[e];
            if (score > best) {
                best = score;
                bs = s;
                be = e;
            }
        }
    }
    if (best < 0.0) {
        pred.category = AnswerKind::NoAnswer;
        pred.span_fallback = true;
        return pred;
    }
    pred.span_start = bs;
    pred.span_end = be;
    pred.span_score = best;
    pred.span_text = decode_tokens(sample.token_ids, bs, be);
    return pred;
}

namespace detail {

// SQuAD-style normalization: lowercase, drop punctuation, drop articles,
// split on whitespace.
inline std::vector<std::string> normalize_answer(const std::string& text) {
    std::string clean;
    clean.reserve(text.size());
    for (char c : text) {
        const unsigned char u = static_cast<unsigned char>(c);
        if (std::ispunct(u)) continue;
        clean.push_back(static_cast<char>(std::tolower(u)));
    }
    std::vector<std::string> tokens;
    std::size_t i = 0;
    while (i < clean.size()) {
        while (i < clean.size() && std::isspace(static_cast<unsigned char>(clean[i]))) ++i;
        std::size_t j = i;
        while (j < clean.size() && !std::isspace(static_cast<unsigned char>(clean[j]))) ++j;
        if (j > i) {
            std::string tok = clean.substr(i, j - i);
            if (tok != "a" && tok != "an" && tok != "the") tokens.push_back(std::move(tok));
        }
        i = j;
    }
    return tokens;
}

inline double f1_against_one(const std::vector<std::string>& pred,
                             const std::vector<std::string>& gold) {
    if (pred.empty() && gold.empty()) return 1.0;
    if (pred.empty() || gold.empty()) return 0.0;
    std::map<std::string, std::size_t> counts;
    for (const std::string& t : gold) ++counts[t];
    std::size_t common = 0;
    for (const std::string& t : pred) {
        auto it = counts.find(t);
        if (it != counts.end() && it->second > 0) {
            --it->second;
            ++common;
        }
    }
    if (common == 0) return 0.0;
    const double precision = static_cast<double>(common) / static_cast<double>(pred.size());
    const double recall = static_cast<double>(common) / static_cast<double>(gold.size());
    return 2.0 * precision * recall / (precision + recall);
}

}  // namespace detail

// Token-overlap F1 over normalized token multisets; max over gold texts.
// Both sides empty (NoAnswer vs NoAnswer) scores 1.
inline double token_f1(const std::string& predicted, const std::vector<std::string>& gold_texts) {
    if (gold_texts.empty()) throw UsageError("token_f1: no gold texts");
    const std::vector<std::string> pred = detail::normalize_answer(predicted);
    double best = 0.0;
    for (const std::string& g : gold_texts) {
        best = std::max(best, detail::f1_against_one(pred, detail::normalize_answer(g)));
    }
    return best;
}

struct Metrics {
    std::optional<double> boolq_accuracy;
    std::optional<double> squad_f1;
    std::size_t n_samples = 0;
    std::size_t n_boolean = 0;
    std::size_t n_extractive = 0;
    // gold->predicted category counts, keyed "gold:pred".
    std::map<std::string, std::size_t> confusion;

    // The metric in raw points (x100), as plotted in importance matrices.
    double metric_points(const std::string& metric) const {
        if (metric == "accuracy") {
            if (!boolq_accuracy) throw UsageError("no boolean samples: accuracy undefined");
            return *boolq_accuracy * 100.0;
        }
        if (metric == "f1") {
            if (!squad_f1) throw UsageError("no extractive samples: f1 undefined");
            return *squad_f1 * 100.0;
        }
        throw UsageError("unknown metric " + metric);
    }

    nlohmann::json to_json(const std::string& task = "") const {
        nlohmann::json j;
        j["task"] = task;
        j["n"] = n_samples;
        if (boolq_accuracy) j["accuracy"] = *boolq_accuracy;
        if (squad_f1) j["f1"] = *squad_f1;
        nlohmann::json conf = nlohmann::json::object();
        for (const auto& [k, v] : confusion) conf[k] = v;
        j["confusion"] = conf;
        return j;
    }
};

// Per-sample scoring with cross-regime penalties: a boolean gold label is
// correct only on exact category match; an extractive gold scores token F1
// only when the model answered in the extractive regime (NoAnswer/NoAnswer
// counts as F1 1, anything else against a NoAnswer gold as 0).
inline double score_extractive(const QAPrediction& pred, const EncodedSample& sample) {
    if (sample.label.kind == AnswerKind::NoAnswer) {
        return pred.category == AnswerKind::NoAnswer ? 1.0 : 0.0;
    }
    if (pred.category != AnswerKind::Span) return 0.0;
    std::vector<std::string> golds = sample.gold_texts;
    if (golds.empty()) {
        golds.push_back(
            decode_tokens(sample.token_ids, sample.label.span_start, sample.label.span_end));
    }
    return token_f1(pred.span_text, golds);
}

inline Metrics evaluate(const ModelParams& params, const Dataset& dataset, const HeadMask& mask) {
    if (dataset.samples.empty()) throw UsageError("evaluate: empty dataset");
    mask.check(params.config);
    Metrics m;
    double f1_sum = 0.0;
    std::size_t correct = 0;
    for (const EncodedSample& sample : dataset.samples) {
        const ModelOutputs out = forward(params, sample, mask);
        const QAPrediction pred = decode(params.config, out, sample);
        ++m.confusion[std::string(answer_kind_name(sample.label.kind)) + ":" +
                      answer_kind_name(pred.category)];
        if (sample.task == TaskKind::Boolean) {
            ++m.n_boolean;
            if (pred.category == sample.label.kind) ++correct;
        } else {
            ++m.n_extractive;
            f1_sum += score_extractive(pred, sample);
        }
        ++m.n_samples;
    }
    if (m.n_boolean > 0) {
        m.boolq_accuracy = static_cast<double>(correct) / static_cast<double>(m.n_boolean);
    }
    if (m.n_extractive > 0) m.squad_f1 = f1_sum / static_cast<double>(m.n_extractive);
    return m;
}

inline Metrics evaluate(const ModelParams& params, const Dataset& dataset) {
    return evaluate(params, dataset, HeadMask::all_keep(params.config));
}

}  // namespace qalens
