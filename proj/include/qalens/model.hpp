#pragma once

#include <cstdint>
#include <deque>
#include <filesystem>
#include <fstream>
#include <string>
#include <unordered_map>
#include <vector>

#include "json.hpp"
#include "qalens/autograd.hpp"
#include "qalens/errors.hpp"
#include "qalens/matrix.hpp"
#include "qalens/rng.hpp"
#include "qalens/tokenizer.hpp"

namespace qalens {

enum class Regime { Boolean, Extractive, AllPurpose };

struct ModelConfig {
    std::size_t n_layers = 2;
    std::size_t hidden_dim = 64;
    std::size_t n_heads = 4;
    std::size_t ffn_dim = 0;  // 0 -> 4 * hidden_dim
    std::size_t vocab_size = vocab::kSize;
    std::size_t max_seq_len = 128;
    double dropout_rate = 0.1;
    std::size_t answer_categories = 4;
    bool span_heads_enabled = true;

    std::size_t head_dim() const { return hidden_dim / n_heads; }
    std::size_t ffn() const { return ffn_dim == 0 ? 4 * hidden_dim : ffn_dim; }

    Regime regime() const {
        if (answer_categories == 4) return Regime::AllPurpose;
        return span_heads_enabled ? Regime::Extractive : Regime::Boolean;
    }

    void validate() const {
        if (hidden_dim % n_heads != 0) {
            throw UsageError("ModelConfig: hidden_dim must be divisible by n_heads");
        }
        if (answer_categories != 2 && answer_categories != 4) {
            throw UsageError("ModelConfig: answer_categories must be 2 or 4");
        }
        if (answer_categories == 4 && !span_heads_enabled) {
            throw UsageError("ModelConfig: 4-way answer space requires span heads");
        }
    }
};

inline std::size_t count_heads(const ModelConfig& config) {
    return config.n_layers * config.n_heads;
}

// Answer-category index within the model's output space.
inline std::size_t category_index(const ModelConfig& config, const AnswerLabel& label) {
    switch (config.regime()) {
        case Regime::Boolean:
            if (label.kind == AnswerKind::No) return 0;
            if (label.kind == AnswerKind::Yes) return 1;
            throw UsageError("boolean model cannot score extractive labels");
        case Regime::Extractive:
            if (label.kind == AnswerKind::NoAnswer) return 0;
            if (label.kind == AnswerKind::Span) return 1;
            throw UsageError("extractive model cannot score boolean labels");
        case Regime::AllPurpose:
            switch (label.kind) {
                case AnswerKind::No: return 0;
                case AnswerKind::Yes: return 1;
                case AnswerKind::NoAnswer: return 2;
                case AnswerKind::Span: return 3;
            }
    }
    throw UsageError("category_index: unreachable");
}

inline AnswerKind category_from_index(const ModelConfig& config, std::size_t idx) {
    switch (config.regime()) {
        case Regime::Boolean:
            return idx == 0 ? AnswerKind::No : AnswerKind::Yes;
        case Regime::Extractive:
            return idx == 0 ? AnswerKind::NoAnswer : AnswerKind::Span;
        case Regime::AllPurpose: {
            constexpr AnswerKind order[4] = {AnswerKind::No, AnswerKind::Yes, AnswerKind::NoAnswer,
                                             AnswerKind::Span};
            return order[idx];
        }
    }
    throw UsageError("category_from_index: unreachable");
}

// layers x heads keep matrix; keep == false zeroes that head's attention.
struct HeadMask {
    std::size_t layers = 0;
    std::size_t heads = 0;
    std::vector<std::uint8_t> keep;

    HeadMask() = default;
    HeadMask(std::size_t l, std::size_t h, bool fill = true)
        : layers(l), heads(h), keep(l * h, fill ? 1 : 0) {}

    static HeadMask all_keep(const ModelConfig& c) { return HeadMask(c.n_layers, c.n_heads, true); }

    static HeadMask single_masked(const ModelConfig& c, std::size_t l, std::size_t h) {
        HeadMask m = all_keep(c);
        m.set(l, h, false);
        return m;
    }

    bool at(std::size_t l, std::size_t h) const { return keep[l * heads + h] != 0; }
    void set(std::size_t l, std::size_t h, bool v) { keep[l * heads + h] = v ? 1 : 0; }

    void check(const ModelConfig& c) const {
        if (layers != c.n_layers || heads != c.n_heads) {
            throw DimensionError("HeadMask " + Matrix::shape_str(layers, heads) +
                                 " does not match model geometry " +
                                 Matrix::shape_str(c.n_layers, c.n_heads));
        }
    }
};

struct ModelOutputs {
    std::vector<double> f_a;  // answer-category distribution
    std::vector<double> f_s;  // start distribution over positions (context support)
    std::vector<double> f_e;  // end distribution
    // When requested: per-layer per-head attention probability matrices.
    std::vector<std::vector<Matrix>> trace;
};

// The whole trainable weight set, registered once in a fixed order; that
// order defines the checkpoint layout.
struct ModelParams {
    ModelConfig config;
    std::deque<Parameter> tensors;
    std::unordered_map<std::string, std::size_t> byname;

    Parameter& add(const std::string& name, std::size_t rows, std::size_t cols) {
        tensors.emplace_back(name, Matrix(rows, cols));
        byname.emplace(name, tensors.size() - 1);
        return tensors.back();
    }

    Parameter& at(const std::string& name) {
        auto it = byname.find(name);
        if (it == byname.end()) throw UsageError("unknown parameter " + name);
        return tensors[it->second];
    }
    const Parameter& at(const std::string& name) const {
        auto it = byname.find(name);
        if (it == byname.end()) throw UsageError("unknown parameter " + name);
        return tensors[it->second];
    }

    std::vector<Parameter*> all() {
        std::vector<Parameter*> out;
        out.reserve(tensors.size());
        for (Parameter& p : tensors) out.push_back(&p);
        return out;
    }

    void zero_grads() {
        for (Parameter& p : tensors) p.zero_grad();
    }
};

namespace detail {

inline void register_tensors(ModelParams& mp) {
    const ModelConfig& c = mp.config;
    mp.add("embed.tok", c.vocab_size, c.hidden_dim);
    mp.add("embed.pos", c.max_seq_len, c.hidden_dim);
    for (std::size_t i = 0; i < c.n_layers; ++i) {
        const std::string pre = "layers." + std::to_string(i) + ".";
        mp.add(pre + "ln1.gain", 1, c.hidden_dim);
        mp.add(pre + "ln1.bias", 1, c.hidden_dim);
        for (const char* w : {"wq", "wk", "wv", "wo"}) {
            mp.add(pre + "attn." + w, c.hidden_dim, c.hidden_dim);
        }
        for (const char* b : {"bq", "bk", "bv", "bo"}) {
            mp.add(pre + "attn." + b, 1, c.hidden_dim);
        }
        mp.add(pre + "ln2.gain", 1, c.hidden_dim);
        mp.add(pre + "ln2.bias", 1, c.hidden_dim);
        mp.add(pre + "ffn.w1", c.hidden_dim, c.ffn());
        mp.add(pre + "ffn.b1", 1, c.ffn());
        mp.add(pre + "ffn.w2", c.ffn(), c.hidden_dim);
        mp.add(pre + "ffn.b2", 1, c.hidden_dim);
    }
    mp.add("final_ln.gain", 1, c.hidden_dim);
    mp.add("final_ln.bias", 1, c.hidden_dim);
    mp.add("head.answer.w", c.hidden_dim, c.answer_categories);
    mp.add("head.answer.b", 1, c.answer_categories);
    if (c.span_heads_enabled) {
        mp.add("head.span_start.w", c.hidden_dim, 1);
        mp.add("head.span_start.b", 1, 1);
        mp.add("head.span_end.w", c.hidden_dim, 1);
        mp.add("head.span_end.b", 1, 1);
    }
}

inline void init_tensor(Parameter& p, RngState& rng) {
    const std::string& n = p.name;
    if (n.find("gain") != std::string::npos) {
        p.value.fill(1.0);
        return;
    }
    if (n.find("bias") != std::string::npos || n.find(".b") != std::string::npos) {
        p.value.fill(0.0);
        return;
    }
    for (double& v : p.value.data) v = 0.02 * rng.next_normal();
}

inline nlohmann::json parse_manifest(const std::string& dir) {
    std::ifstream mf(std::filesystem::path(dir) / "manifest.json", std::ios::binary);
    if (!mf) throw UsageError("cannot open manifest.json in " + dir);
    nlohmann::json manifest;
    try {
        mf >> manifest;
    } catch (const nlohmann::json::exception& e) {
        throw ParseError(dir + "/manifest.json: " + e.what());
    }
    return manifest;
}

}  // namespace detail

inline ModelParams init_model(const ModelConfig& config, std::uint64_t seed) {
    config.validate();
    ModelParams mp;
    mp.config = config;
    detail::register_tensors(mp);
    RngState rng(seed, 0x1417);
    for (Parameter& p : mp.tensors) {
        RngState stream = rng.split(std::hash<std::string>{}(p.name));
        detail::init_tensor(p, stream);
    }
    return mp;
}

// Standalone single-head attention: softmax(q k^T / sqrt(d)) v over supported
// key positions, or the zero matrix when the head is masked.
inline Matrix attention_head(const Matrix& q, const Matrix& k, const Matrix& v, bool keep,
                             const Mask* support = nullptr) {
    if (!keep) return Matrix(q.rows, v.cols);
    Matrix scores = matmul_nt(q, k);
    const double inv = 1.0 / std::sqrt(static_cast<double>(q.cols));
    for (double& s : scores.data) s *= inv;
    const Matrix probs = support ? softmax_rows(scores, *support) : softmax_rows(scores);
    return matmul(probs, v);
}

enum class Mode { Train, Eval };

// Forward-pass handles on a live tape; values can be read immediately, and
// the same vars feed the training loss.
struct ForwardVars {
    Tape::Var f_a;
    Tape::Var f_s;
    Tape::Var f_e;
    bool has_span = false;
    std::size_t seq_len = 0;
};

namespace detail {

struct Bound {
    Tape* tape = nullptr;
    std::unordered_map<std::string, Tape::Var> vars;
    Tape::Var operator[](const std::string& name) const { return vars.at(name); }
};

inline Bound bind_frozen(Tape& tape, const ModelParams& mp) {
    Bound b{&tape, {}};
    for (const Parameter& p : mp.tensors) b.vars.emplace(p.name, tape.ref(p.value));
    return b;
}

inline Bound bind_trainable(Tape& tape, ModelParams& mp) {
    Bound b{&tape, {}};
    for (Parameter& p : mp.tensors) b.vars.emplace(p.name, tape.param(p));
    return b;
}

inline ForwardVars build_forward(Tape& tape, const Bound& w, const ModelConfig& config,
                                 const EncodedSample& sample, const HeadMask& mask, Mode mode,
                                 RngState* rng, std::vector<std::vector<Matrix>>* trace) {
    config.validate();
    mask.check(config);
    const std::size_t seq = sample.token_ids.size();
    if (seq > config.max_seq_len) {
        throw DimensionError("forward: sequence of " + std::to_string(seq) +
                             " exceeds max_seq_len " + std::to_string(config.max_seq_len));
    }
    const bool train = mode == Mode::Train && config.dropout_rate > 0.0;
    if (train && rng == nullptr) throw UsageError("forward: train mode requires an rng");

    std::vector<std::size_t> tok_ids(seq), pos_ids(seq);
    for (std::size_t i = 0; i < seq; ++i) {
        tok_ids[i] = static_cast<std::size_t>(sample.token_ids[i]);
        pos_ids[i] = i;
    }
    Tape::Var x = tape.add(tape.gather_rows(w["embed.tok"], tok_ids),
                           tape.gather_rows(w["embed.pos"], pos_ids));
    if (train) x = tape.dropout(x, config.dropout_rate, *rng);

    const std::size_t dh = config.head_dim();
    const double inv_sqrt_dh = 1.0 / std::sqrt(static_cast<double>(dh));
    if (trace) trace->assign(config.n_layers, {});

    for (std::size_t layer = 0; layer < config.n_layers; ++layer) {
        const std::string pre = "layers." + std::to_string(layer) + ".";
        // Pre-norm attention block.
        Tape::Var h = tape.layer_norm(x, w[pre + "ln1.gain"], w[pre + "ln1.bias"]);
        Tape::Var q = tape.add_row(tape.matmul(h, w[pre + "attn.wq"]), w[pre + "attn.bq"]);
        Tape::Var k = tape.add_row(tape.matmul(h, w[pre + "attn.wk"]), w[pre + "attn.bk"]);
        Tape::Var v = tape.add_row(tape.matmul(h, w[pre + "attn.wv"]), w[pre + "attn.bv"]);
        std::vector<Tape::Var> head_outs;
        head_outs.reserve(config.n_heads);
        for (std::size_t head = 0; head < config.n_heads; ++head) {
            if (!mask.at(layer, head)) {
                // The attention matrix is the zero matrix, so this head's
                // token representations are zero vectors and no gradient
                // reaches its Q/K/V slices.
                head_outs.push_back(tape.zeros(seq, dh));
                if (trace) (*trace)[layer].push_back(Matrix(seq, seq));
                continue;
            }
            const std::size_t c0 = head * dh;
            const std::size_t c1 = c0 + dh;
            Tape::Var qh = tape.slice_cols(q, c0, c1);
            Tape::Var kh = tape.slice_cols(k, c0, c1);
            Tape::Var vh = tape.slice_cols(v, c0, c1);
            Tape::Var scores = tape.scale(tape.matmul_nt(qh, kh), inv_sqrt_dh);
            Tape::Var probs = tape.softmax_rows(scores);
            if (trace) (*trace)[layer].push_back(tape.val(probs));
            head_outs.push_back(tape.matmul(probs, vh));
        }
        Tape::Var attn = tape.add_row(tape.matmul(tape.concat_cols(head_outs), w[pre + "attn.wo"]),
                                      w[pre + "attn.bo"]);
        if (train) attn = tape.dropout(attn, config.dropout_rate, *rng);
        x = tape.add(x, attn);

        // Pre-norm FFN block.
        Tape::Var h2 = tape.layer_norm(x, w[pre + "ln2.gain"], w[pre + "ln2.bias"]);
        Tape::Var ff = tape.gelu(tape.add_row(tape.matmul(h2, w[pre + "ffn.w1"]), w[pre + "ffn.b1"]));
        ff = tape.add_row(tape.matmul(ff, w[pre + "ffn.w2"]), w[pre + "ffn.b2"]);
        if (train) ff = tape.dropout(ff, config.dropout_rate, *rng);
        x = tape.add(x, ff);

        if (!tape.val(x).all_finite()) {
            throw NumericError("forward: non-finite activation after layer " +
                               std::to_string(layer));
        }
    }

    x = tape.layer_norm(x, w["final_ln.gain"], w["final_ln.bias"]);

    ForwardVars out;
    out.seq_len = seq;
    Tape::Var cls = tape.row(x, 0);
    out.f_a = tape.softmax_rows(
        tape.add_row(tape.matmul(cls, w["head.answer.w"]), w["head.answer.b"]));

    if (config.span_heads_enabled) {
        out.has_span = true;
        Mask ctx(1, seq, false);
        for (std::size_t i = sample.context_start; i < sample.context_end; ++i) ctx.at(0, i) = 1;
        Tape::Var s_logits = tape.reshape(
            tape.add_row(tape.matmul(x, w["head.span_start.w"]), w["head.span_start.b"]), 1, seq);
        Tape::Var e_logits = tape.reshape(
            tape.add_row(tape.matmul(x, w["head.span_end.w"]), w["head.span_end.b"]), 1, seq);
        out.f_s = tape.softmax_rows(s_logits, ctx);
        out.f_e = tape.softmax_rows(e_logits, ctx);
    }
    return out;
}

}  // namespace detail

// Evaluation-mode forward (deterministic, parameters shared read-only).
inline ModelOutputs forward(const ModelParams& params, const EncodedSample& sample,
                            const HeadMask& mask, bool want_trace = false) {
    Tape tape;
    detail::Bound w = detail::bind_frozen(tape, params);
    ModelOutputs out;
    ForwardVars v = detail::build_forward(tape, w, params.config, sample, mask, Mode::Eval,
                                          nullptr, want_trace ? &out.trace : nullptr);
    out.f_a = tape.val(v.f_a).data;
    if (v.has_span) {
        out.f_s = tape.val(v.f_s).data;
        out.f_e = tape.val(v.f_e).data;
    }
    return out;
}

// ---------------------------------------------------------------------------
// Checkpoint: manifest.json + weights.bin (little-endian doubles, manifest
// order).

inline nlohmann::json config_to_json(const ModelConfig& c) {
    return nlohmann::json{{"n_layers", c.n_layers},
                          {"hidden_dim", c.hidden_dim},
                          {"n_heads", c.n_heads},
                          {"ffn_dim", c.ffn()},
                          {"vocab_size", c.vocab_size},
                          {"max_seq_len", c.max_seq_len},
                          {"dropout_rate", c.dropout_rate},
                          {"answer_categories", c.answer_categories},
                          {"span_heads_enabled", c.span_heads_enabled}};
}

inline ModelConfig config_from_json(const nlohmann::json& j) {
    ModelConfig c;
    c.n_layers = j.at("n_layers").get<std::size_t>();
    c.hidden_dim = j.at("hidden_dim").get<std::size_t>();
    c.n_heads = j.at("n_heads").get<std::size_t>();
    c.ffn_dim = j.at("ffn_dim").get<std::size_t>();
    c.vocab_size = j.at("vocab_size").get<std::size_t>();
    c.max_seq_len = j.at("max_seq_len").get<std::size_t>();
    c.dropout_rate = j.at("dropout_rate").get<double>();
    c.answer_categories = j.at("answer_categories").get<std::size_t>();
    c.span_heads_enabled = j.at("span_heads_enabled").get<bool>();
    return c;
}

inline void save_checkpoint(const ModelParams& params, const std::string& dir,
                            std::uint64_t training_seed) {
    namespace fs = std::filesystem;
    fs::create_directories(dir);
    nlohmann::json manifest;
    manifest["format_version"] = 1;
    manifest["config"] = config_to_json(params.config);
    manifest["training_seed"] = training_seed;
    nlohmann::json tensors = nlohmann::json::array();
    std::size_t offset = 0;
    std::ofstream bin(fs::path(dir) / "weights.bin", std::ios::binary);
    if (!bin) throw UsageError("cannot write weights.bin in " + dir);
    for (const Parameter& p : params.tensors) {
        tensors.push_back({{"name", p.name},
                           {"rows", p.value.rows},
                           {"cols", p.value.cols},
                           {"offset", offset}});
        bin.write(reinterpret_cast<const char*>(p.value.data.data()),
                  static_cast<std::streamsize>(p.value.data.size() * sizeof(double)));
        offset += p.value.data.size() * sizeof(double);
    }
    manifest["tensors"] = tensors;
    std::ofstream mf(fs::path(dir) / "manifest.json", std::ios::binary);
    if (!mf) throw UsageError("cannot write manifest.json in " + dir);
    mf << manifest.dump(2) << "\n";
}

struct Checkpoint {
    ModelParams params;
    std::uint64_t training_seed = 0;
};

inline Checkpoint load_checkpoint(const std::string& dir) {
    namespace fs = std::filesystem;
    const nlohmann::json manifest = detail::parse_manifest(dir);
    Checkpoint ck;
    ck.params.config = config_from_json(manifest.at("config"));
    ck.params.config.validate();
    ck.training_seed = manifest.at("training_seed").get<std::uint64_t>();
    detail::register_tensors(ck.params);
    std::ifstream bin(fs::path(dir) / "weights.bin", std::ios::binary);
    if (!bin) throw UsageError("cannot open weights.bin in " + dir);
    for (const auto& t : manifest.at("tensors")) {
        Parameter& p = ck.params.at(t.at("name").get<std::string>());
        if (p.value.rows != t.at("rows").get<std::size_t>() ||
            p.value.cols != t.at("cols").get<std::size_t>()) {
            throw SchemaError("checkpoint tensor " + p.name + " has unexpected shape");
        }
        bin.seekg(static_cast<std::streamoff>(t.at("offset").get<std::size_t>()));
        bin.read(reinterpret_cast<char*>(p.value.data.data()),
                 static_cast<std::streamsize>(p.value.data.size() * sizeof(double)));
        if (!bin) throw SchemaError("checkpoint weights.bin truncated at tensor " + p.name);
    }
    return ck;
}

}  // namespace qalens
