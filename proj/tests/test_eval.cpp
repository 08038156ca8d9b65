#include "catch2/catch_amalgamated.hpp"

#include "qalens/data.hpp"
#include "qalens/eval.hpp"
#include "qalens/model.hpp"
#include "qalens/rng.hpp"

using namespace qalens;

namespace {

ModelConfig tiny_config() {
    ModelConfig c;
    c.n_layers = 1;
    c.hidden_dim = 8;
    c.n_heads = 2;
    c.ffn_dim = 16;
    c.max_seq_len = 64;
    c.dropout_rate = 0.0;
    c.answer_categories = 4;
    c.span_heads_enabled = true;
    return c;
}

// Reference span decoder: enumerate every (s, e) pair outright.
std::pair<std::size_t, std::size_t> brute_force_span(const std::vector<double>& f_s,
                                                     const std::vector<double>& f_e,
                                                     std::size_t cs, std::size_t ce,
                                                     std::size_t max_len) {
    double best = -1.0;
    std::pair<std::size_t, std::size_t> arg{0, 0};
    for (std::size_t s = cs; s < ce; ++s) {
        for (std::size_t e = s; e < ce && e - s + 1 <= max_len; ++e) {
            const double score = f_s[s] * f_e[e];
            if (score > best) {
                best = score;
                arg = {s, e};
            }
        }
    }
    return arg;
}

std::vector<double> random_distribution(RngState& rng, std::size_t n, std::size_t lo,
                                        std::size_t hi) {
    std::vector<double> d(n, 0.0);
    double sum = 0.0;
    for (std::size_t i = lo; i < hi; ++i) {
        d[i] = rng.next_double();
        sum += d[i];
    }
    for (std::size_t i = lo; i < hi; ++i) d[i] /= sum;
    return d;
}

}  // namespace

TEST_CASE("token_f1 fixtures") {
    CHECK(token_f1("February 7, 2016", {"February 7"}) == Catch::Approx(0.8).epsilon(1e-12));
    CHECK(token_f1("February 7", {"February 7, 2016"}) == Catch::Approx(0.8).epsilon(1e-12));
    CHECK(token_f1("Denver Broncos", {"Denver Broncos"}) == 1.0);
    CHECK(token_f1("denver broncos!", {"Denver Broncos"}) == 1.0);
    CHECK(token_f1("the cat", {"cat"}) == 1.0);  // articles dropped
    CHECK(token_f1("dog", {"cat"}) == 0.0);
    CHECK(token_f1("", {""}) == 1.0);
    CHECK(token_f1("", {"cat"}) == 0.0);
    CHECK(token_f1("cat", {""}) == 0.0);
    // max over multiple golds
    CHECK(token_f1("blue sky", {"red sky", "blue sky today"}) ==
          Catch::Approx(0.8).epsilon(1e-12));
    // multiset overlap: repeated tokens only match as many times as they occur
    CHECK(token_f1("very very good", {"very good"}) == Catch::Approx(0.8).epsilon(1e-12));
    CHECK_THROWS_AS(token_f1("x", {}), UsageError);
}

TEST_CASE("decode picks the argmax category with ties to the lowest index") {
    const ModelConfig c = tiny_config();
    EncodedSample s = encode("Is x?", "hello", 16);
    ModelOutputs out;
    out.f_a = {0.25, 0.25, 0.25, 0.25};
    CHECK(decode(c, out, s).category == AnswerKind::No);
    out.f_a = {0.1, 0.4, 0.4, 0.1};
    CHECK(decode(c, out, s).category == AnswerKind::Yes);
    out.f_a = {0.1, 0.1, 0.6, 0.2};
    CHECK(decode(c, out, s).category == AnswerKind::NoAnswer);
}

TEST_CASE("decode span agrees with exhaustive enumeration") {
    const ModelConfig c = tiny_config();
    EncodedSample s = encode("Is x?", "abcdefghij", 32);
    RngState rng(2718);
    for (int trial = 0; trial < 200; ++trial) {
        ModelOutputs out;
        out.f_a = {0.0, 0.0, 0.0, 1.0};
        out.f_s = random_distribution(rng, s.token_ids.size(), s.context_start, s.context_end);
        out.f_e = random_distribution(rng, s.token_ids.size(), s.context_start, s.context_end);
        const std::size_t max_len = 1 + rng.next_below(6);
        const QAPrediction pred = decode(c, out, s, max_len);
        const auto [bs, be] =
            brute_force_span(out.f_s, out.f_e, s.context_start, s.context_end, max_len);
        REQUIRE(pred.category == AnswerKind::Span);
        CHECK(pred.span_start == bs);
        CHECK(pred.span_end == be);
        CHECK(pred.span_end - pred.span_start + 1 <= max_len);
    }
}

TEST_CASE("decode span ties go to the lexicographically first pair") {
    const ModelConfig c = tiny_config();
    EncodedSample s = encode("Is x?", "abcd", 16);
    ModelOutputs out;
    out.f_a = {0.0, 0.0, 0.0, 1.0};
    out.f_s.assign(s.token_ids.size(), 0.0);
    out.f_e.assign(s.token_ids.size(), 0.0);
    for (std::size_t i = s.context_start; i < s.context_end; ++i) {
        out.f_s[i] = 0.25;
        out.f_e[i] = 0.25;
    }
    const QAPrediction pred = decode(c, out, s);
    CHECK(pred.span_start == s.context_start);
    CHECK(pred.span_end == s.context_start);
    CHECK(pred.span_text == "a");
}

TEST_CASE("decoded span text round-trips through the byte tokenizer") {
    const ModelConfig c = tiny_config();
    EncodedSample s = encode("Is x?", "needle haystack", 32);
    ModelOutputs out;
    out.f_a = {0.0, 0.0, 0.0, 1.0};
    out.f_s.assign(s.token_ids.size(), 0.0);
    out.f_e.assign(s.token_ids.size(), 0.0);
    out.f_s[s.context_start] = 1.0;       // 'n'
    out.f_e[s.context_start + 5] = 1.0;   // 'e'
    const QAPrediction pred = decode(c, out, s);
    CHECK(pred.span_text == "needle");
}

TEST_CASE("score_extractive applies cross-regime penalties") {
    EncodedSample s = encode("Q?", "hello world", 32);
    s.task = TaskKind::Extractive;

    QAPrediction pred;
    s.label = AnswerLabel::no_answer();
    pred.category = AnswerKind::NoAnswer;
    CHECK(score_extractive(pred, s) == 1.0);
    pred.category = AnswerKind::Span;
    pred.span_text = "hello";
    CHECK(score_extractive(pred, s) == 0.0);
    pred.category = AnswerKind::Yes;
    CHECK(score_extractive(pred, s) == 0.0);

    s.label = AnswerLabel::span(s.context_start, s.context_start + 4);
    s.gold_texts = {"hello"};
    pred.category = AnswerKind::Span;
    pred.span_text = "hello";
    CHECK(score_extractive(pred, s) == 1.0);
    pred.category = AnswerKind::NoAnswer;  // answerable gold, abstaining scores 0
    CHECK(score_extractive(pred, s) == 0.0);
    pred.category = AnswerKind::No;  // boolean answer against a span gold scores 0
    CHECK(score_extractive(pred, s) == 0.0);
}

TEST_CASE("evaluate aggregates both regimes and fills the confusion map") {
    const ModelConfig c = tiny_config();
    const ModelParams params = init_model(c, 31);

    SyntheticSpec spec;
    spec.n_samples = 8;
    spec.seed = 5;
    spec.context_len = 10;
    Dataset a = generate_synthetic(spec, SyntheticTask::ANeedleSpan, Split::Dev, c.max_seq_len);
    Dataset b = generate_synthetic(spec, SyntheticTask::BContainment, Split::Dev, c.max_seq_len);
    Dataset mixed = mix_and_shuffle(a, b, RngState(77));

    const Metrics m = evaluate(params, mixed);
    CHECK(m.n_samples == 16);
    CHECK(m.n_boolean == 8);
    CHECK(m.n_extractive == 8);
    REQUIRE(m.boolq_accuracy.has_value());
    REQUIRE(m.squad_f1.has_value());
    CHECK(*m.boolq_accuracy >= 0.0);
    CHECK(*m.boolq_accuracy <= 1.0);
    CHECK(*m.squad_f1 >= 0.0);
    CHECK(*m.squad_f1 <= 1.0);
    std::size_t conf_total = 0;
    for (const auto& [k, v] : m.confusion) conf_total += v;
    CHECK(conf_total == 16);

    // boolean-only dataset: f1 undefined
    const Metrics mb = evaluate(params, b);
    CHECK_FALSE(mb.squad_f1.has_value());
    CHECK_THROWS_AS(mb.metric_points("f1"), UsageError);
    CHECK(mb.metric_points("accuracy") == *mb.boolq_accuracy * 100.0);
    CHECK_THROWS_AS(mb.metric_points("exactmatch"), UsageError);
}

TEST_CASE("evaluate is invariant to dataset order and to the all-keep mask") {
    const ModelConfig c = tiny_config();
    const ModelParams params = init_model(c, 47);
    SyntheticSpec spec;
    spec.n_samples = 10;
    spec.seed = 9;
    spec.context_len = 10;
    Dataset a = generate_synthetic(spec, SyntheticTask::ANeedleSpan, Split::Dev, c.max_seq_len);

    const Metrics base = evaluate(params, a);
    const Metrics masked_keep = evaluate(params, a, HeadMask::all_keep(c));
    CHECK(*base.squad_f1 == *masked_keep.squad_f1);

    Dataset reversed = a;
    std::reverse(reversed.samples.begin(), reversed.samples.end());
    const Metrics rev = evaluate(params, reversed);
    CHECK(*rev.squad_f1 == *base.squad_f1);
    CHECK(rev.confusion == base.confusion);

    Dataset empty;
    CHECK_THROWS_AS(evaluate(params, empty), UsageError);
}

TEST_CASE("an oracle that reads the generator labels scores perfectly") {
    // Upper-bound sanity for the synthetic tasks: predictions constructed
    // straight from the stored labels reach accuracy/F1 of exactly 1.
    const ModelConfig c = tiny_config();
    SyntheticSpec spec;
    spec.n_samples = 20;
    spec.seed = 13;
    spec.context_len = 12;
    Dataset a = generate_synthetic(spec, SyntheticTask::ANeedleSpan, Split::Dev, c.max_seq_len);
    double f1 = 0.0;
    for (const EncodedSample& s : a.samples) {
        QAPrediction pred;
        pred.category = s.label.kind;
        if (s.label.is_span()) {
            pred.span_text = decode_tokens(s.token_ids, s.label.span_start, s.label.span_end);
        }
        f1 += score_extractive(pred, s);
    }
    CHECK(f1 == Catch::Approx(static_cast<double>(a.samples.size())).epsilon(1e-12));
}
