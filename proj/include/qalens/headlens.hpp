#pragma once

#include <algorithm>
#include <atomic>
#include <cstdio>
#include <fstream>
#include <numeric>
#include <sstream>
#include <string>
#include <thread>
#include <vector>

#include "json.hpp"
#include "qalens/errors.hpp"
#include "qalens/eval.hpp"
#include "qalens/model.hpp"

namespace qalens {

// deltas[l][h] = metric(masked l,h) - metric(unmasked), in raw metric points
// (accuracy or F1 x100). Negative delta = important head.
struct ImportanceMatrix {
    std::size_t layers = 0;
    std::size_t heads = 0;
    std::vector<double> deltas;   // row-major L x H
    std::vector<double> masked;   // metric value under each single-head mask
    std::string metric;           // "accuracy" or "f1"
    double baseline = 0.0;
    std::string checkpoint_id;
    std::string dataset_id;

    double delta(std::size_t l, std::size_t h) const { return deltas[l * heads + h]; }
    double masked_at(std::size_t l, std::size_t h) const { return masked[l * heads + h]; }
};

// Leave-one-out ranking: one unmasked baseline evaluation, then exactly
// L x H evaluations each masking a single head. The masked evaluations are
// independent and may run on `workers` threads; results land in fixed
// (layer, head) slots, so the matrix is identical for any worker count.
inline ImportanceMatrix rank_heads(const ModelParams& params, const Dataset& dataset,
                                   const std::string& metric, std::size_t workers = 1) {
    if (metric != "accuracy" && metric != "f1") {
        throw UsageError("rank_heads: metric must be accuracy or f1");
    }
    const ModelConfig& c = params.config;
    ImportanceMatrix m;
    m.layers = c.n_layers;
    m.heads = c.n_heads;
    m.metric = metric;
    m.dataset_id = dataset.provenance;
    m.baseline = evaluate(params, dataset).metric_points(metric);
    const std::size_t total = count_heads(c);
    m.deltas.assign(total, 0.0);
    m.masked.assign(total, 0.0);

    std::atomic<std::size_t> next{0};
    auto worker = [&]() {
        for (;;) {
            const std::size_t i = next.fetch_add(1);
            if (i >= total) return;
            const std::size_t layer = i / c.n_heads;
            const std::size_t head = i % c.n_heads;
            const Metrics res =
                evaluate(params, dataset, HeadMask::single_masked(c, layer, head));
            m.masked[i] = res.metric_points(metric);
            m.deltas[i] = m.masked[i] - m.baseline;
        }
    };
    if (workers <= 1) {
        worker();
    } else {
        std::vector<std::thread> pool;
        for (std::size_t t = 0; t < std::min(workers, total); ++t) pool.emplace_back(worker);
        for (std::thread& t : pool) t.join();
    }
    return m;
}

struct RankedHead {
    std::size_t layer = 0;
    std::size_t head = 0;
    double delta = 0.0;
};

// Ascending by delta (most negative first = most important); ties broken by
// (layer, head) order.
inline std::vector<RankedHead> top_heads(const ImportanceMatrix& m, std::size_t k) {
    if (k > m.layers * m.heads) throw UsageError("top_heads: k exceeds head count");
    std::vector<RankedHead> all;
    all.reserve(m.layers * m.heads);
    for (std::size_t l = 0; l < m.layers; ++l) {
        for (std::size_t h = 0; h < m.heads; ++h) all.push_back({l, h, m.delta(l, h)});
    }
    std::stable_sort(all.begin(), all.end(), [](const RankedHead& a, const RankedHead& b) {
        return a.delta < b.delta;
    });
    all.resize(k);
    return all;
}

namespace detail {

// Fractional (average) ranks, so ties do not break monotone invariance.
inline std::vector<double> fractional_ranks(const std::vector<double>& v) {
    const std::size_t n = v.size();
    std::vector<std::size_t> idx(n);
    std::iota(idx.begin(), idx.end(), 0);
    std::sort(idx.begin(), idx.end(), [&](std::size_t a, std::size_t b) { return v[a] < v[b]; });
    std::vector<double> ranks(n);
    std::size_t i = 0;
    while (i < n) {
        std::size_t j = i;
        while (j + 1 < n && v[idx[j + 1]] == v[idx[i]]) ++j;
        const double avg = (static_cast<double>(i) + static_cast<double>(j)) / 2.0 + 1.0;
        for (std::size_t k = i; k <= j; ++k) ranks[idx[k]] = avg;
        i = j + 1;
    }
    return ranks;
}

inline double pearson(const std::vector<double>& a, const std::vector<double>& b) {
    const double n = static_cast<double>(a.size());
    double ma = 0, mb = 0;
    for (std::size_t i = 0; i < a.size(); ++i) {
        ma += a[i];
        mb += b[i];
    }
    ma /= n;
    mb /= n;
    double cov = 0, va = 0, vb = 0;
    for (std::size_t i = 0; i < a.size(); ++i) {
        cov += (a[i] - ma) * (b[i] - mb);
        va += (a[i] - ma) * (a[i] - ma);
        vb += (b[i] - mb) * (b[i] - mb);
    }
    if (va == 0.0 || vb == 0.0) return 0.0;
    return cov / std::sqrt(va * vb);
}

}  // namespace detail

inline double spearman(const std::vector<double>& a, const std::vector<double>& b) {
    if (a.size() != b.size() || a.empty()) throw UsageError("spearman: size mismatch");
    return detail::pearson(detail::fractional_ranks(a), detail::fractional_ranks(b));
}

struct SpecializationReport {
    double spearman_rho = 0.0;
    RankedHead top1_a;
    RankedHead top1_b;
    std::size_t top10pct_k = 0;
    std::size_t top10pct_overlap = 0;
    // 1-based rank of task A's top head inside task B's ordering.
    std::size_t cross_rank = 0;

    nlohmann::json to_json() const {
        return nlohmann::json{
            {"spearman", spearman_rho},
            {"top1_a", {{"layer", top1_a.layer}, {"head", top1_a.head}, {"delta", top1_a.delta}}},
            {"top1_b", {{"layer", top1_b.layer}, {"head", top1_b.head}, {"delta", top1_b.delta}}},
            {"top10pct_k", top10pct_k},
            {"top10pct_overlap", top10pct_overlap},
            {"cross_rank", cross_rank}};
    }
};

inline SpecializationReport compare_tasks(const ImportanceMatrix& a, const ImportanceMatrix& b) {
    if (a.layers != b.layers || a.heads != b.heads) {
        throw UsageError("compare_tasks: importance matrices have different shapes");
    }
    if (!a.checkpoint_id.empty() && !b.checkpoint_id.empty() &&
        a.checkpoint_id != b.checkpoint_id) {
        throw UsageError("compare_tasks: matrices come from different checkpoints");
    }
    SpecializationReport r;
    r.spearman_rho = spearman(a.deltas, b.deltas);
    const std::size_t total = a.layers * a.heads;
    const std::size_t k = std::max<std::size_t>(
        1, static_cast<std::size_t>(std::ceil(0.1 * static_cast<double>(total))));
    r.top10pct_k = k;
    const std::vector<RankedHead> ta = top_heads(a, total);
    const std::vector<RankedHead> tb = top_heads(b, total);
    r.top1_a = ta.front();
    r.top1_b = tb.front();
    for (std::size_t i = 0; i < k; ++i) {
        for (std::size_t j = 0; j < k; ++j) {
            if (ta[i].layer == tb[j].layer && ta[i].head == tb[j].head) ++r.top10pct_overlap;
        }
    }
    for (std::size_t j = 0; j < total; ++j) {
        if (tb[j].layer == r.top1_a.layer && tb[j].head == r.top1_a.head) {
            r.cross_rank = j + 1;
            break;
        }
    }
    return r;
}

struct LayerSummary {
    struct Row {
        double min, q25, median, q75, max;
    };
    std::vector<Row> layers;

    nlohmann::json to_json() const {
        nlohmann::json arr = nlohmann::json::array();
        for (const Row& r : layers) {
            arr.push_back({{"min", r.min},
                           {"p25", r.q25},
                           {"median", r.median},
                           {"p75", r.q75},
                           {"max", r.max}});
        }
        return nlohmann::json{{"layers", arr}};
    }
};

namespace detail {
// Linear interpolation between closest ranks.
inline double percentile(const std::vector<double>& sorted, double p) {
    const double pos = p * static_cast<double>(sorted.size() - 1);
    const std::size_t lo = static_cast<std::size_t>(pos);
    if (lo + 1 >= sorted.size()) return sorted.back();
    const double frac = pos - static_cast<double>(lo);
    return sorted[lo] * (1.0 - frac) + sorted[lo + 1] * frac;
}
}  // namespace detail

inline LayerSummary layer_summary(const ImportanceMatrix& m) {
    LayerSummary s;
    for (std::size_t l = 0; l < m.layers; ++l) {
        std::vector<double> row(m.deltas.begin() + static_cast<std::ptrdiff_t>(l * m.heads),
                                m.deltas.begin() + static_cast<std::ptrdiff_t>((l + 1) * m.heads));
        std::sort(row.begin(), row.end());
        s.layers.push_back({row.front(), detail::percentile(row, 0.25),
                            detail::percentile(row, 0.5), detail::percentile(row, 0.75),
                            row.back()});
    }
    return s;
}

// ---------------------------------------------------------------------------
// CSV interchange: layer,head,metric,baseline,masked,delta with 17
// significant digits so round-trips are exact.

namespace detail {
inline std::string fmt17(double v) {
    char buf[40];
    std::snprintf(buf, sizeof(buf), "%.17g", v);
    return buf;
}
}  // namespace detail

inline std::string importance_to_csv(const ImportanceMatrix& m) {
    std::ostringstream out;
    out << "layer,head,metric,baseline,masked,delta\n";
    for (std::size_t l = 0; l < m.layers; ++l) {
        for (std::size_t h = 0; h < m.heads; ++h) {
            out << l << ',' << h << ',' << m.metric << ',' << detail::fmt17(m.baseline) << ','
                << detail::fmt17(m.masked_at(l, h)) << ',' << detail::fmt17(m.delta(l, h))
                << '\n';
        }
    }
    return out.str();
}

inline void save_importance_csv(const ImportanceMatrix& m, const std::string& path) {
    std::ofstream out(path, std::ios::binary);
    if (!out) throw UsageError("cannot write " + path);
    out << importance_to_csv(m);
}

inline ImportanceMatrix load_importance_csv(const std::string& path) {
    std::ifstream in(path, std::ios::binary);
    if (!in) throw UsageError("cannot open " + path);
    std::string line;
    if (!std::getline(in, line) || line != "layer,head,metric,baseline,masked,delta") {
        throw ParseError(path + " row 1: bad or missing header");
    }
    struct Row {
        std::size_t layer, head;
        std::string metric;
        double baseline, masked, delta;
    };
    std::vector<Row> rows;
    std::size_t lineno = 1;
    while (std::getline(in, line)) {
        ++lineno;
        if (line.empty()) continue;
        std::istringstream ss(line);
        Row r;
        char c1, c2, c3, c4;
        if (!(ss >> r.layer >> c1 >> r.head >> c2) || c1 != ',' || c2 != ',' ||
            !std::getline(ss, r.metric, ',') || !(ss >> r.baseline >> c3 >> r.masked >> c4) ||
            c3 != ',' || c4 != ',' || !(ss >> r.delta)) {
            throw ParseError(path + " row " + std::to_string(lineno) + ": malformed CSV");
        }
        rows.push_back(std::move(r));
    }
    if (rows.empty()) throw ParseError(path + ": no data rows");
    ImportanceMatrix m;
    for (const Row& r : rows) {
        m.layers = std::max(m.layers, r.layer + 1);
        m.heads = std::max(m.heads, r.head + 1);
    }
    m.metric = rows.front().metric;
    m.baseline = rows.front().baseline;
    m.deltas.assign(m.layers * m.heads, 0.0);
    m.masked.assign(m.layers * m.heads, 0.0);
    for (const Row& r : rows) {
        m.deltas[r.layer * m.heads + r.head] = r.delta;
        m.masked[r.layer * m.heads + r.head] = r.masked;
    }
    return m;
}

}  // namespace qalens
