#pragma once

#include <fstream>
#include <sstream>
#include <string>
#include <vector>

#include "json.hpp"
#include "qalens/errors.hpp"
#include "qalens/rng.hpp"
#include "qalens/tokenizer.hpp"

namespace qalens {

enum class Split { Train, Dev };

struct Dataset {
    std::vector<EncodedSample> samples;
    Split split = Split::Train;
    std::string provenance;  // boolq, squad, mixed, synthetic-A, synthetic-B
    // Spans that fell outside the encoding window and were downgraded to
    // NoAnswer instead of being dropped.
    std::size_t truncated_downgrades = 0;
};

struct SyntheticSpec {
    std::size_t n_samples = 1000;
    std::size_t context_len = 32;  // bytes of filler
    std::string filler = "abcdefghijklmnopqrstuvwxyz";
    double answerable_fraction = 0.7;
    std::uint64_t seed = 0;
};

enum class SyntheticTask { ANeedleSpan, BContainment };

namespace detail {

inline nlohmann::json parse_json_file(const std::string& path) {
    std::ifstream in(path, std::ios::binary);
    if (!in) throw UsageError("cannot open " + path);
    nlohmann::json j;
    try {
        in >> j;
    } catch (const nlohmann::json::exception& e) {
        throw ParseError(path + ": " + e.what());
    }
    return j;
}

}  // namespace detail

// BoolQ JSON-lines: {"question": ..., "passage": ..., "answer": bool}.
inline Dataset load_boolq(const std::string& path, Split split, std::size_t max_seq_len = 256) {
    std::ifstream in(path, std::ios::binary);
    if (!in) throw UsageError("cannot open " + path);
    Dataset ds;
    ds.split = split;
    ds.provenance = "boolq";
    std::string line;
    std::size_t lineno = 0;
    while (std::getline(in, line)) {
        ++lineno;
        if (line.empty()) continue;
        nlohmann::json j;
        try {
            j = nlohmann::json::parse(line);
        } catch (const nlohmann::json::exception& e) {
            throw ParseError(path + " line " + std::to_string(lineno) + ": " + e.what());
        }
        if (!j.contains("question") || !j["question"].is_string() || !j.contains("passage") ||
            !j["passage"].is_string() || !j.contains("answer") || !j["answer"].is_boolean()) {
            throw SchemaError(path + " line " + std::to_string(lineno) +
                              ": expected string question, string passage, boolean answer");
        }
        EncodedSample s = encode(preprocess_question(j["question"].get<std::string>()),
                                 j["passage"].get<std::string>(), max_seq_len);
        s.task = TaskKind::Boolean;
        s.label = j["answer"].get<bool>() ? AnswerLabel::yes() : AnswerLabel::no();
        ds.samples.push_back(std::move(s));
    }
    return ds;
}

// SQuAD 2.0 nested JSON. Training label comes from the first listed answer;
// every listed answer text is kept for evaluation. Answers truncated out of
// the window become NoAnswer and are counted.
inline Dataset load_squad(const std::string& path, Split split, std::size_t max_seq_len = 384) {
    const nlohmann::json root = detail::parse_json_file(path);
    if (!root.contains("data") || !root["data"].is_array()) {
        throw SchemaError(path + ": missing top-level data array");
    }
    Dataset ds;
    ds.split = split;
    ds.provenance = "squad";
    for (const auto& article : root["data"]) {
        if (!article.contains("paragraphs")) throw SchemaError(path + ": article without paragraphs");
        for (const auto& para : article["paragraphs"]) {
            if (!para.contains("context") || !para.contains("qas")) {
                throw SchemaError(path + ": paragraph without context/qas");
            }
            const std::string context = para["context"].get<std::string>();
            for (const auto& qa : para["qas"]) {
                const std::string id = qa.value("id", "?");
                if (!qa.contains("question") || !qa.contains("is_impossible")) {
                    throw SchemaError(path + " qa " + id + ": missing question/is_impossible");
                }
                EncodedSample s = encode(preprocess_question(qa["question"].get<std::string>()),
                                         context, max_seq_len);
                s.task = TaskKind::Extractive;
                if (qa["is_impossible"].get<bool>()) {
                    s.label = AnswerLabel::no_answer();
                } else {
                    if (!qa.contains("answers") || !qa["answers"].is_array() ||
                        qa["answers"].empty()) {
                        throw SchemaError(path + " qa " + id + ": answerable but no answers");
                    }
                    for (const auto& ans : qa["answers"]) {
                        s.gold_texts.push_back(ans["text"].get<std::string>());
                    }
                    const auto& first = qa["answers"][0];
                    const std::string text = first["text"].get<std::string>();
                    const std::size_t start = first["answer_start"].get<std::size_t>();
                    if (start + text.size() > context.size()) {
                        throw SchemaError(path + " qa " + id + ": answer_start " +
                                          std::to_string(start) + " outside context");
                    }
                    try {
                        const auto [ts, te] = align_char_span(s, start, text);
                        s.label = AnswerLabel::span(ts, te);
                    } catch (const SpanTruncatedError&) {
                        s.label = AnswerLabel::no_answer();
                        ++ds.truncated_downgrades;
                    }
                }
                ds.samples.push_back(std::move(s));
            }
        }
    }
    return ds;
}

// Concatenation followed by one deterministic Fisher-Yates pass; the natural
// size ratio of the two sources is kept as-is.
inline Dataset mix_and_shuffle(const Dataset& a, const Dataset& b, RngState rng) {
    if (a.split != b.split) throw UsageError("mix_and_shuffle: split tags differ");
    Dataset out;
    out.split = a.split;
    out.provenance = "mixed";
    out.truncated_downgrades = a.truncated_downgrades + b.truncated_downgrades;
    out.samples.reserve(a.samples.size() + b.samples.size());
    out.samples.insert(out.samples.end(), a.samples.begin(), a.samples.end());
    out.samples.insert(out.samples.end(), b.samples.begin(), b.samples.end());
    rng.shuffle(out.samples);
    return out;
}

namespace detail {

constexpr const char* kMarkers = "0123456789";
constexpr std::size_t kNeedleLen = 4;

inline std::string random_filler(const SyntheticSpec& spec, RngState& rng) {
    std::string ctx(spec.context_len, 'a');
    for (char& c : ctx) c = spec.filler[rng.next_below(spec.filler.size())];
    return ctx;
}

}  // namespace detail

// Task A ("needle span"): a digit marker is planted in letter filler, followed
// by a 4-letter answer; the question names the marker. Unanswerable samples
// plant a different marker instead. Task B ("containment"): does a named
// letter occur in the passage, Yes/No balanced by a fair coin. Both tasks are
// solvable perfectly from the input alone.
inline Dataset generate_synthetic(const SyntheticSpec& spec, SyntheticTask task,
                                  Split split = Split::Train, std::size_t max_seq_len = 128) {
    if (spec.context_len < 8 || spec.context_len < detail::kNeedleLen + 1) {
        throw UsageError("generate_synthetic: context_len too small to embed the needle");
    }
    if (spec.answerable_fraction < 0.0 || spec.answerable_fraction > 1.0) {
        throw UsageError("generate_synthetic: answerable_fraction outside [0,1]");
    }
    Dataset ds;
    ds.split = split;
    ds.provenance = task == SyntheticTask::ANeedleSpan ? "synthetic-A" : "synthetic-B";
    RngState rng(spec.seed, task == SyntheticTask::ANeedleSpan ? 0xA : 0xB);
    for (std::size_t i = 0; i < spec.n_samples; ++i) {
        std::string ctx = detail::random_filler(spec, rng);
        if (task == SyntheticTask::ANeedleSpan) {
            const char asked = detail::kMarkers[rng.next_below(10)];
            const bool answerable = rng.next_double() < spec.answerable_fraction;
            char planted = asked;
            if (!answerable) {
                planted = detail::kMarkers[(asked - '0' + 1 + rng.next_below(9)) % 10 + 0];
            }
            const std::size_t pos = rng.next_below(spec.context_len - detail::kNeedleLen);
            ctx[pos] = planted;
            std::string answer(detail::kNeedleLen, 'a');
            for (char& c : answer) c = spec.filler[rng.next_below(spec.filler.size())];
            for (std::size_t k = 0; k < detail::kNeedleLen; ++k) ctx[pos + 1 + k] = answer[k];
            std::string q = "Which letters follow marker ";
            q.push_back(asked);
            q += "?";
            EncodedSample s = encode(preprocess_question(q), ctx, max_seq_len);
            s.task = TaskKind::Extractive;
            if (answerable) {
                const auto [ts, te] = align_char_span(s, pos + 1, answer);
                s.label = AnswerLabel::span(ts, te);
                s.gold_texts.push_back(answer);
            } else {
                s.label = AnswerLabel::no_answer();
            }
            ds.samples.push_back(std::move(s));
        } else {
            const bool want_yes = rng.next_u64() & 1;
            char target;
            if (want_yes) {
                target = spec.filler[rng.next_below(spec.filler.size())];
                if (ctx.find(target) == std::string::npos) {
                    ctx[rng.next_below(ctx.size())] = target;
                }
            } else {
                std::string absent;
                for (char c : spec.filler) {
                    if (ctx.find(c) == std::string::npos) absent.push_back(c);
                }
                if (absent.empty()) {
                    // Context covers the whole filler alphabet: evict one letter.
                    target = spec.filler[rng.next_below(spec.filler.size())];
                    char repl = spec.filler[0] == target ? spec.filler[1] : spec.filler[0];
                    for (char& c : ctx) {
                        if (c == target) c = repl;
                    }
                } else {
                    target = absent[rng.next_below(absent.size())];
                }
            }
            std::string q = "Is the letter ";
            q.push_back(target);
            q += " in the passage?";
            EncodedSample s = encode(preprocess_question(q), ctx, max_seq_len);
            s.task = TaskKind::Boolean;
            s.label = want_yes ? AnswerLabel::yes() : AnswerLabel::no();
            ds.samples.push_back(std::move(s));
        }
    }
    return ds;
}

// JSON-lines serialization for synthetic datasets:
// {question, context, task, label, span_char_start, span_text}.
inline void save_synthetic_jsonl(const Dataset& ds, const std::string& path) {
    std::ofstream out(path, std::ios::binary);
    if (!out) throw UsageError("cannot write " + path);
    for (const EncodedSample& s : ds.samples) {
        nlohmann::json j;
        j["question"] = s.question;
        j["context"] = s.context;
        j["task"] = s.task == TaskKind::Boolean ? "boolean" : "extractive";
        j["label"] = answer_kind_name(s.label.kind);
        if (s.label.is_span()) {
            j["span_char_start"] = s.label.span_start - s.context_start;
            j["span_text"] = decode_tokens(s.token_ids, s.label.span_start, s.label.span_end);
        } else {
            j["span_char_start"] = nullptr;
            j["span_text"] = nullptr;
        }
        out << j.dump() << "\n";
    }
}

inline Dataset load_synthetic_jsonl(const std::string& path, Split split,
                                    std::size_t max_seq_len = 128) {
    std::ifstream in(path, std::ios::binary);
    if (!in) throw UsageError("cannot open " + path);
    Dataset ds;
    ds.split = split;
    ds.provenance = "synthetic";
    std::string line;
    std::size_t lineno = 0;
    while (std::getline(in, line)) {
        ++lineno;
        if (line.empty()) continue;
        nlohmann::json j;
        try {
            j = nlohmann::json::parse(line);
        } catch (const nlohmann::json::exception& e) {
            throw ParseError(path + " line " + std::to_string(lineno) + ": " + e.what());
        }
        EncodedSample s = encode(preprocess_question(j.at("question").get<std::string>()),
                                 j.at("context").get<std::string>(), max_seq_len);
        s.task = j.at("task").get<std::string>() == "boolean" ? TaskKind::Boolean
                                                              : TaskKind::Extractive;
        const std::string label = j.at("label").get<std::string>();
        if (label == "yes") {
            s.label = AnswerLabel::yes();
        } else if (label == "no") {
            s.label = AnswerLabel::no();
        } else if (label == "no_answer") {
            s.label = AnswerLabel::no_answer();
        } else if (label == "span") {
            const std::string text = j.at("span_text").get<std::string>();
            const std::size_t start = j.at("span_char_start").get<std::size_t>();
            try {
                const auto [ts, te] = align_char_span(s, start, text);
                s.label = AnswerLabel::span(ts, te);
                s.gold_texts.push_back(text);
            } catch (const SpanTruncatedError&) {
                s.label = AnswerLabel::no_answer();
                ++ds.truncated_downgrades;
            }
        } else {
            throw SchemaError(path + " line " + std::to_string(lineno) + ": unknown label " + label);
        }
        ds.samples.push_back(std::move(s));
    }
    return ds;
}

// Question-type discrimination corpus: boolean-template questions labeled Yes,
// wh-template questions labeled No, encoded against a dummy context so only
// the question text carries signal.
inline Dataset make_question_type_dataset(std::size_t n, std::uint64_t seed, Split split,
                                          std::size_t max_seq_len = 64) {
    static const std::vector<std::string> bool_templates = {
        "Is the letter % in the passage",
        "Does the letter % appear in the passage",
        "Is there a letter % in the text",
    };
    static const std::vector<std::string> wh_templates = {
        "Which letters follow marker %",
        "What letters come after marker %",
        "Which letters follow the marker %",
    };
    RngState rng(seed, 0xD15C);
    Dataset ds;
    ds.split = split;
    ds.provenance = "question-type";
    for (std::size_t i = 0; i < n; ++i) {
        const bool boolean = rng.next_u64() & 1;
        const auto& pool = boolean ? bool_templates : wh_templates;
        std::string q = pool[rng.next_below(pool.size())];
        const char fill = boolean ? static_cast<char>('a' + rng.next_below(26))
                                  : static_cast<char>('0' + rng.next_below(10));
        q[q.find('%')] = fill;
        EncodedSample s = encode(preprocess_question(q), ".", max_seq_len);
        s.task = TaskKind::Boolean;
        s.label = boolean ? AnswerLabel::yes() : AnswerLabel::no();
        ds.samples.push_back(std::move(s));
    }
    return ds;
}

}  // namespace qalens
