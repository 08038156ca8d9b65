#pragma once

#include <cctype>
#include <cstddef>
#include <string>
#include <vector>

#include "qalens/errors.hpp"

namespace qalens {

// Merge-free byte-level vocabulary: token id b encodes byte value b, plus
// three specials. Every string tokenizes without an unknown-token fallback.
namespace vocab {
constexpr int kCls = 256;
constexpr int kSep = 257;
constexpr int kPad = 258;
constexpr int kSize = 259;
}  // namespace vocab

enum class TaskKind { Boolean, Extractive };

enum class AnswerKind { No, Yes, NoAnswer, Span };

// Span indices are token positions, inclusive on both ends, inside the
// sample's context region. Boolean samples carry only No/Yes, extractive
// ones only NoAnswer/Span.
struct AnswerLabel {
    AnswerKind kind = AnswerKind::No;
    std::size_t span_start = 0;
    std::size_t span_end = 0;

    static AnswerLabel no() { return {AnswerKind::No}; }
    static AnswerLabel yes() { return {AnswerKind::Yes}; }
    static AnswerLabel no_answer() { return {AnswerKind::NoAnswer}; }
    static AnswerLabel span(std::size_t s, std::size_t e) { return {AnswerKind::Span, s, e}; }

    bool is_span() const { return kind == AnswerKind::Span; }
};

inline const char* answer_kind_name(AnswerKind k) {
    switch (k) {
        case AnswerKind::No: return "no";
        case AnswerKind::Yes: return "yes";
        case AnswerKind::NoAnswer: return "no_answer";
        case AnswerKind::Span: return "span";
    }
    return "?";
}

struct EncodedSample {
    std::vector<int> token_ids;     // [CLS] question [SEP] context
    std::size_t context_start = 0;  // first context token
    std::size_t context_end = 0;    // one past the last context token
    AnswerLabel label;
    TaskKind task = TaskKind::Boolean;
    std::string question;
    std::string context;
    // context char offset -> token index, for the kept (untruncated) prefix.
    std::vector<std::size_t> char_to_token;
    // All acceptable gold answer strings (evaluation only; training uses label).
    std::vector<std::string> gold_texts;
};

struct SpanTruncatedError : UsageError {
    explicit SpanTruncatedError(const std::string& msg) : UsageError(msg) {}
};

// Trims whitespace, upper-cases the first alphabetic character (ASCII; the
// source convention for other scripts is unspecified) and appends a '?' if
// missing. Idempotent.
inline std::string preprocess_question(const std::string& q) {
    std::size_t b = 0;
    std::size_t e = q.size();
    while (b < e && std::isspace(static_cast<unsigned char>(q[b]))) ++b;
    while (e > b && std::isspace(static_cast<unsigned char>(q[e - 1]))) --e;
    if (b == e) throw UsageError("preprocess_question: empty question");
    std::string out = q.substr(b, e - b);
    for (char& c : out) {
        if (std::isalpha(static_cast<unsigned char>(c))) {
            c = static_cast<char>(std::toupper(static_cast<unsigned char>(c)));
            break;
        }
    }
    if (out.back() != '?') out.push_back('?');
    return out;
}

// [CLS] + question bytes + [SEP] + context bytes, with only the context
// truncated (tail-first) to fit max_seq_len. Label/task are attached by the
// caller.
inline EncodedSample encode(const std::string& question, const std::string& context,
                            std::size_t max_seq_len) {
    if (question.empty() || context.empty()) {
        throw UsageError("encode: question and context must be non-empty");
    }
    const std::size_t question_span = question.size() + 2;  // CLS + q + SEP
    if (question_span >= max_seq_len) {
        throw UsageError("encode: question of " + std::to_string(question.size()) +
                         " bytes leaves no room for context at max_seq_len " +
                         std::to_string(max_seq_len));
    }
    const std::size_t keep = std::min(context.size(), max_seq_len - question_span);
    EncodedSample s;
    s.question = question;
    s.context = context;
    s.token_ids.reserve(question_span + keep);
    s.token_ids.push_back(vocab::kCls);
    for (unsigned char c : question) s.token_ids.push_back(c);
    s.token_ids.push_back(vocab::kSep);
    s.context_start = s.token_ids.size();
    for (std::size_t i = 0; i < keep; ++i) {
        s.token_ids.push_back(static_cast<unsigned char>(context[i]));
    }
    s.context_end = s.token_ids.size();
    s.char_to_token.resize(keep);
    for (std::size_t i = 0; i < keep; ++i) s.char_to_token[i] = s.context_start + i;
    return s;
}

// Maps a character-offset answer inside the original context to inclusive
// token indices. Throws SpanTruncatedError when the answer fell (partly)
// outside the encoding window.
inline std::pair<std::size_t, std::size_t> align_char_span(const EncodedSample& sample,
                                                           std::size_t char_start,
                                                           const std::string& answer_text) {
    if (answer_text.empty()) throw UsageError("align_char_span: empty answer text");
    if (char_start + answer_text.size() > sample.context.size()) {
        throw UsageError("align_char_span: answer exceeds original context");
    }
    if (char_start + answer_text.size() > sample.char_to_token.size()) {
        throw SpanTruncatedError("align_char_span: answer at char " + std::to_string(char_start) +
                                 " truncated out of the encoding window");
    }
    return {sample.char_to_token[char_start],
            sample.char_to_token[char_start + answer_text.size() - 1]};
}

// Bytes of token_ids[start..end] (inclusive); special tokens are skipped.
inline std::string decode_tokens(const std::vector<int>& token_ids, std::size_t start,
                                 std::size_t end) {
    std::string out;
    for (std::size_t i = start; i <= end && i < token_ids.size(); ++i) {
        if (token_ids[i] >= 0 && token_ids[i] < 256) {
            out.push_back(static_cast<char>(token_ids[i]));
        }
    }
    return out;
}

}  // namespace qalens
