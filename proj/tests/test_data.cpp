#include "catch2/catch_amalgamated.hpp"

#include <filesystem>
#include <fstream>
#include <set>

#include "qalens/data.hpp"

using namespace qalens;
namespace fs = std::filesystem;

namespace {

fs::path write_temp(const std::string& name, const std::string& content) {
    const fs::path p = fs::temp_directory_path() / name;
    std::ofstream out(p, std::ios::binary);
    out << content;
    return p;
}

std::string squad_doc(const std::string& qas) {
    return R"({"version":"v2.0","data":[{"title":"t","paragraphs":[{"context":"The game was played on February 7, 2016 at the stadium.","qas":[)" +
           qas + "]}]}]}";
}

}  // namespace

TEST_CASE("load_boolq maps fields") {
    const fs::path p = write_temp(
        "boolq_ok.jsonl",
        "{\"question\":\"is x true\",\"passage\":\"some passage\",\"answer\":true}\n"
        "{\"question\":\"is y false\",\"passage\":\"other passage\",\"answer\":false}\n");
    const Dataset ds = load_boolq(p.string(), Split::Train);
    REQUIRE(ds.samples.size() == 2);
    CHECK(ds.samples[0].label.kind == AnswerKind::Yes);
    CHECK(ds.samples[1].label.kind == AnswerKind::No);
    CHECK(ds.samples[0].task == TaskKind::Boolean);
    CHECK(ds.samples[0].question == "Is x true?");
}

TEST_CASE("load_boolq error paths") {
    const fs::path bad = write_temp("boolq_bad.jsonl",
                                    "{\"question\":\"q\",\"passage\":\"p\",\"answer\":true}\n"
                                    "{\"question\":\"q\",\"passage\":");
    CHECK_THROWS_WITH(load_boolq(bad.string(), Split::Train),
                      Catch::Matchers::ContainsSubstring("line 2"));

    const fs::path missing =
        write_temp("boolq_missing.jsonl", "{\"question\":\"q\",\"answer\":true}\n");
    CHECK_THROWS_AS(load_boolq(missing.string(), Split::Train), SchemaError);
}

TEST_CASE("load_squad maps answers and impossibles") {
    const fs::path p = write_temp(
        "squad_ok.json",
        squad_doc(R"({"id":"q1","question":"when was the game played","is_impossible":false,)"
                  R"("answers":[{"text":"February 7, 2016","answer_start":23},)"
                  R"({"text":"February 7","answer_start":23}]},)"
                  R"({"id":"q2","question":"who was the coach","is_impossible":true,"answers":[]})"));
    const Dataset ds = load_squad(p.string(), Split::Dev);
    REQUIRE(ds.samples.size() == 2);
    const EncodedSample& s0 = ds.samples[0];
    CHECK(s0.task == TaskKind::Extractive);
    REQUIRE(s0.label.kind == AnswerKind::Span);
    CHECK(decode_tokens(s0.token_ids, s0.label.span_start, s0.label.span_end) ==
          "February 7, 2016");
    CHECK(s0.gold_texts.size() == 2);
    CHECK(ds.samples[1].label.kind == AnswerKind::NoAnswer);
    CHECK(ds.truncated_downgrades == 0);
}

TEST_CASE("load_squad schema error names the qa") {
    const fs::path p = write_temp(
        "squad_bad.json",
        squad_doc(R"({"id":"q9","question":"q","is_impossible":false,)"
                  R"("answers":[{"text":"stadium","answer_start":5000}]})"));
    CHECK_THROWS_WITH(load_squad(p.string(), Split::Dev),
                      Catch::Matchers::ContainsSubstring("q9"));
}

TEST_CASE("load_squad downgrades truncated spans") {
    const fs::path p = write_temp(
        "squad_trunc.json",
        squad_doc(R"({"id":"q1","question":"where","is_impossible":false,)"
                  R"("answers":[{"text":"stadium","answer_start":47}]})"));
    // context byte 47 lands outside a 32-token window
    const Dataset ds = load_squad(p.string(), Split::Dev, 32);
    REQUIRE(ds.samples.size() == 1);
    CHECK(ds.samples[0].label.kind == AnswerKind::NoAnswer);
    CHECK(ds.truncated_downgrades == 1);
}

TEST_CASE("mix_and_shuffle preserves the multiset") {
    SyntheticSpec spec;
    spec.n_samples = 2;
    spec.seed = 1;
    Dataset a = generate_synthetic(spec, SyntheticTask::ANeedleSpan);
    spec.n_samples = 3;
    Dataset b = generate_synthetic(spec, SyntheticTask::BContainment);
    const Dataset mixed = mix_and_shuffle(a, b, RngState(5));
    CHECK(mixed.samples.size() == 5);

    std::multiset<std::string> want, got;
    for (const auto& s : a.samples) want.insert(s.question + "|" + s.context);
    for (const auto& s : b.samples) want.insert(s.question + "|" + s.context);
    for (const auto& s : mixed.samples) got.insert(s.question + "|" + s.context);
    CHECK(want == got);

    const Dataset again = mix_and_shuffle(a, b, RngState(5));
    for (std::size_t i = 0; i < 5; ++i) {
        CHECK(again.samples[i].question == mixed.samples[i].question);
    }

    b.split = Split::Dev;
    CHECK_THROWS_AS(mix_and_shuffle(a, b, RngState(5)), UsageError);
}

TEST_CASE("synthetic task A plants recoverable needles") {
    SyntheticSpec spec;
    spec.n_samples = 100;
    spec.answerable_fraction = 1.0;
    spec.seed = 7;
    const Dataset ds = generate_synthetic(spec, SyntheticTask::ANeedleSpan);
    REQUIRE(ds.samples.size() == 100);
    for (const EncodedSample& s : ds.samples) {
        REQUIRE(s.label.kind == AnswerKind::Span);
        const std::string span =
            decode_tokens(s.token_ids, s.label.span_start, s.label.span_end);
        REQUIRE(s.gold_texts.size() == 1);
        CHECK(span == s.gold_texts[0]);
        // independent scanning oracle: find the marker named by the question,
        // take the 4 bytes after it
        const char marker = s.question[s.question.size() - 2];
        const std::size_t at = s.context.find(marker);
        REQUIRE(at != std::string::npos);
        CHECK(s.context.substr(at + 1, 4) == span);
    }
}

TEST_CASE("synthetic task A unanswerable samples omit the asked marker") {
    SyntheticSpec spec;
    spec.n_samples = 200;
    spec.answerable_fraction = 0.0;
    spec.seed = 3;
    const Dataset ds = generate_synthetic(spec, SyntheticTask::ANeedleSpan);
    for (const EncodedSample& s : ds.samples) {
        CHECK(s.label.kind == AnswerKind::NoAnswer);
        const char marker = s.question[s.question.size() - 2];
        CHECK(s.context.find(marker) == std::string::npos);
    }
}

TEST_CASE("synthetic task B is balanced and consistent") {
    SyntheticSpec spec;
    spec.n_samples = 1000;
    spec.seed = 11;
    const Dataset ds = generate_synthetic(spec, SyntheticTask::BContainment);
    std::size_t yes = 0;
    for (const EncodedSample& s : ds.samples) {
        // containment oracle: the named letter's presence must match the label
        const char target = s.question[14];
        const bool present = s.context.find(target) != std::string::npos;
        CHECK((s.label.kind == AnswerKind::Yes) == present);
        if (s.label.kind == AnswerKind::Yes) ++yes;
    }
    CHECK(std::abs(static_cast<double>(yes) / 1000.0 - 0.5) < 0.05);
}

TEST_CASE("synthetic generation is deterministic") {
    SyntheticSpec spec;
    spec.n_samples = 50;
    spec.seed = 9;
    const Dataset a = generate_synthetic(spec, SyntheticTask::ANeedleSpan);
    const Dataset b = generate_synthetic(spec, SyntheticTask::ANeedleSpan);
    REQUIRE(a.samples.size() == b.samples.size());
    for (std::size_t i = 0; i < a.samples.size(); ++i) {
        CHECK(a.samples[i].token_ids == b.samples[i].token_ids);
        CHECK(a.samples[i].label.kind == b.samples[i].label.kind);
    }

    SyntheticSpec tiny;
    tiny.context_len = 4;
    CHECK_THROWS_AS(generate_synthetic(tiny, SyntheticTask::ANeedleSpan), UsageError);
}

TEST_CASE("synthetic jsonl round trip") {
    SyntheticSpec spec;
    spec.n_samples = 20;
    spec.seed = 2;
    const Dataset ds = generate_synthetic(spec, SyntheticTask::ANeedleSpan);
    const fs::path p = fs::temp_directory_path() / "synth_rt.jsonl";
    save_synthetic_jsonl(ds, p.string());
    const Dataset back = load_synthetic_jsonl(p.string(), Split::Train);
    REQUIRE(back.samples.size() == ds.samples.size());
    for (std::size_t i = 0; i < ds.samples.size(); ++i) {
        CHECK(back.samples[i].token_ids == ds.samples[i].token_ids);
        CHECK(back.samples[i].label.kind == ds.samples[i].label.kind);
        CHECK(back.samples[i].label.span_start == ds.samples[i].label.span_start);
        CHECK(back.samples[i].label.span_end == ds.samples[i].label.span_end);
    }
}

TEST_CASE("question type dataset uses distinct templates") {
    const Dataset ds = make_question_type_dataset(100, 4, Split::Train);
    std::size_t yes = 0;
    for (const EncodedSample& s : ds.samples) {
        if (s.label.kind == AnswerKind::Yes) ++yes;
        CHECK(s.task == TaskKind::Boolean);
    }
    CHECK(yes > 20);
    CHECK(yes < 80);
}
