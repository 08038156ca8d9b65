// qalens: train tiny QA transformers, evaluate them under head masks, and
// rank attention heads by leave-one-out importance.

#include <filesystem>
#include <fstream>
#include <iostream>
#include <string>

#include "CLI11.hpp"
#include "json.hpp"
#include "qalens/qalens.hpp"

namespace fs = std::filesystem;
using namespace qalens;

namespace {

constexpr int kExitUsage = 2;
constexpr int kExitNumeric = 3;

// "l:h,l:h,..." -> HeadMask with those heads zeroed; empty string keeps all.
HeadMask parse_mask(const std::string& spec, const ModelConfig& config) {
    HeadMask mask = HeadMask::all_keep(config);
    if (spec.empty()) return mask;
    std::size_t pos = 0;
    while (pos < spec.size()) {
        std::size_t comma = spec.find(',', pos);
        if (comma == std::string::npos) comma = spec.size();
        const std::string entry = spec.substr(pos, comma - pos);
        const std::size_t colon = entry.find(':');
        if (colon == std::string::npos) {
            throw UsageError("mask entry '" + entry + "' is not of the form layer:head");
        }
        std::size_t layer, head;
        try {
            layer = std::stoul(entry.substr(0, colon));
            head = std::stoul(entry.substr(colon + 1));
        } catch (const std::exception&) {
            throw UsageError("mask entry '" + entry + "' is not numeric");
        }
        if (layer >= config.n_layers || head >= config.n_heads) {
            throw UsageError("mask entry " + entry + " outside model geometry " +
                             std::to_string(config.n_layers) + "x" +
                             std::to_string(config.n_heads));
        }
        mask.set(layer, head, false);
        pos = comma + 1;
    }
    return mask;
}

void print_resolved(const std::string& cmd, const nlohmann::json& cfg) {
    nlohmann::json j = cfg;
    j["command"] = cmd;
    std::cerr << j.dump() << "\n";
}

Dataset load_any(const std::string& path, const std::string& format, Split split,
                 std::size_t max_seq_len) {
    if (format == "boolq") return load_boolq(path, split, max_seq_len);
    if (format == "squad") return load_squad(path, split, max_seq_len);
    if (format == "synth") return load_synthetic_jsonl(path, split, max_seq_len);
    throw UsageError("unknown data format " + format);
}

void require_file(const fs::path& p) {
    if (!fs::exists(p)) throw UsageError("missing data file " + p.string());
}

struct TrainArgs {
    std::string task;
    std::string data_dir;
    bool synthetic = false;
    std::string config_path;
    std::string init_ckpt;
    std::string out_dir;
    std::int64_t seed = -1;
    std::size_t layers = 2, dim = 64, heads = 4, ffn = 0;
};

int cmd_train(const TrainArgs& a) {
    Hyperparameters hp;
    if (!a.config_path.empty()) {
        hp = hyperparameters_from_json(detail::parse_json_file(a.config_path));
    }
    if (a.seed >= 0) hp.seed = static_cast<std::uint64_t>(a.seed);

    ModelConfig config;
    config.n_layers = a.layers;
    config.hidden_dim = a.dim;
    config.n_heads = a.heads;
    config.ffn_dim = a.ffn;
    config.max_seq_len = hp.max_seq_len;
    config.dropout_rate = hp.dropout;
    if (a.task == "boolq") {
        config.answer_categories = 2;
        config.span_heads_enabled = false;
    } else if (a.task == "squad") {
        config.answer_categories = 2;
        config.span_heads_enabled = true;
    } else if (a.task == "all") {
        config.answer_categories = 4;
        config.span_heads_enabled = true;
    } else {
        throw UsageError("unknown task " + a.task);
    }
    config.validate();

    nlohmann::json resolved = hyperparameters_to_json(hp);
    resolved["task"] = a.task;
    resolved["data_dir"] = a.data_dir;
    resolved["synthetic"] = a.synthetic;
    resolved["model"] = config_to_json(config);
    resolved["init"] = a.init_ckpt;
    resolved["out"] = a.out_dir;
    print_resolved("train", resolved);

    const fs::path dir(a.data_dir);
    Dataset train_data, dev_data;
    bool have_dev = false;
    auto load_pair = [&](const fs::path& train_p, const fs::path& dev_p, const std::string& fmt) {
        require_file(train_p);
        Dataset tr = load_any(train_p.string(), fmt, Split::Train, hp.max_seq_len);
        Dataset dv;
        if (fs::exists(dev_p)) dv = load_any(dev_p.string(), fmt, Split::Dev, hp.max_seq_len);
        return std::pair<Dataset, Dataset>(std::move(tr), std::move(dv));
    };

    if (a.synthetic) {
        const fs::path a_train = dir / "a_train.jsonl", a_dev = dir / "a_dev.jsonl";
        const fs::path b_train = dir / "b_train.jsonl", b_dev = dir / "b_dev.jsonl";
        if (a.task == "squad") {
            auto [tr, dv] = load_pair(a_train, a_dev, "synth");
            train_data = std::move(tr);
            dev_data = std::move(dv);
        } else if (a.task == "boolq") {
            auto [tr, dv] = load_pair(b_train, b_dev, "synth");
            train_data = std::move(tr);
            dev_data = std::move(dv);
        } else {
            auto [ta, da] = load_pair(a_train, a_dev, "synth");
            auto [tb, db] = load_pair(b_train, b_dev, "synth");
            train_data = mix_and_shuffle(ta, tb, RngState(hp.seed, 0x313));
            if (!da.samples.empty() && !db.samples.empty()) {
                dev_data = mix_and_shuffle(da, db, RngState(hp.seed, 0x314));
            }
        }
    } else if (a.task == "boolq") {
        auto [tr, dv] = load_pair(dir / "train.jsonl", dir / "dev.jsonl", "boolq");
        train_data = std::move(tr);
        dev_data = std::move(dv);
    } else if (a.task == "squad") {
        auto [tr, dv] = load_pair(dir / "train-v2.0.json", dir / "dev-v2.0.json", "squad");
        train_data = std::move(tr);
        dev_data = std::move(dv);
    } else {
        auto [tb, db] = load_pair(dir / "train.jsonl", dir / "dev.jsonl", "boolq");
        auto [ts, ds] = load_pair(dir / "train-v2.0.json", dir / "dev-v2.0.json", "squad");
        train_data = mix_and_shuffle(ts, tb, RngState(hp.seed, 0x313));
        if (!db.samples.empty() && !ds.samples.empty()) {
            dev_data = mix_and_shuffle(ds, db, RngState(hp.seed, 0x314));
        }
    }
    have_dev = !dev_data.samples.empty();

    ModelParams params = a.init_ckpt.empty()
                             ? init_model(config, hp.seed)
                             : init_from_checkpoint(a.init_ckpt, config, hp.seed);

    DevEvalFn dev_fn;
    if (have_dev) {
        dev_fn = [&dev_data, task = a.task](const ModelParams& p) {
            return evaluate(p, dev_data).to_json(task);
        };
    }
    fs::create_directories(a.out_dir);
    TrainReport report = train_loop(params, train_data, hp, a.out_dir, dev_fn);
    std::ofstream rf(fs::path(a.out_dir) / "train_report.json", std::ios::binary);
    rf << report.to_json().dump(2) << "\n";
    std::cout << "final mean loss " << report.epoch_mean_loss.back() << ", checkpoint in "
              << a.out_dir << "\n";
    return 0;
}

int cmd_eval(const std::string& ckpt, const std::string& data, const std::string& format,
             const std::string& mask_spec, const std::string& task) {
    Checkpoint ck = load_checkpoint(ckpt);
    print_resolved("eval", {{"ckpt", ckpt},
                            {"data", data},
                            {"format", format},
                            {"mask", mask_spec},
                            {"seed", ck.training_seed}});
    const HeadMask mask = parse_mask(mask_spec, ck.params.config);
    const Dataset ds = load_any(data, format, Split::Dev, ck.params.config.max_seq_len);
    std::cout << evaluate(ck.params, ds, mask).to_json(task.empty() ? format : task).dump(2)
              << "\n";
    return 0;
}

int cmd_rank_heads(const std::string& ckpt, const std::string& data, const std::string& format,
                   const std::string& metric, std::size_t jobs, const std::string& out_csv,
                   std::string summary_path) {
    Checkpoint ck = load_checkpoint(ckpt);
    print_resolved("rank-heads", {{"ckpt", ckpt},
                                  {"data", data},
                                  {"format", format},
                                  {"metric", metric},
                                  {"jobs", jobs},
                                  {"out", out_csv},
                                  {"seed", ck.training_seed}});
    const Dataset ds = load_any(data, format, Split::Dev, ck.params.config.max_seq_len);
    ImportanceMatrix m = rank_heads(ck.params, ds, metric, jobs);
    save_importance_csv(m, out_csv);
    if (summary_path.empty()) {
        summary_path = (fs::path(out_csv).parent_path() / "layer_summary.json").string();
    }
    std::ofstream sf(summary_path, std::ios::binary);
    if (!sf) throw UsageError("cannot write " + summary_path);
    sf << layer_summary(m).to_json().dump(2) << "\n";
    std::cout << "baseline " << m.baseline << " " << m.metric << ", wrote " << out_csv << "\n";
    return 0;
}

}  // namespace

int main(int argc, char** argv) {
    CLI::App app{"all-purpose QA model training and attention-head importance analysis"};
    app.require_subcommand(1);

    TrainArgs ta;
    CLI::App* train = app.add_subcommand("train", "fine-tune a model on a task");
    train->add_option("--task", ta.task, "boolq|squad|all")->required();
    train->add_option("--data-dir", ta.data_dir)->required();
    train->add_flag("--synthetic", ta.synthetic, "data dir holds synthetic JSONL shards");
    train->add_option("--config", ta.config_path, "hyperparameter JSON");
    train->add_option("--seed", ta.seed, "overrides the config seed");
    train->add_option("--init", ta.init_ckpt, "checkpoint to transfer from");
    train->add_option("--out", ta.out_dir)->required();
    train->add_option("--layers", ta.layers);
    train->add_option("--dim", ta.dim);
    train->add_option("--heads", ta.heads);
    train->add_option("--ffn", ta.ffn, "0 = 4x dim");

    std::string e_ckpt, e_data, e_format = "synth", e_mask, e_task;
    CLI::App* ev = app.add_subcommand("eval", "evaluate a checkpoint under an optional head mask");
    ev->add_option("--ckpt", e_ckpt)->required();
    ev->add_option("--data", e_data)->required();
    ev->add_option("--format", e_format, "boolq|squad|synth");
    ev->add_option("--mask", e_mask, "heads to zero, e.g. 0:1,1:3 (empty = keep all)");
    ev->add_option("--task", e_task, "task tag for the metrics JSON");

    std::string r_ckpt, r_data, r_format = "synth", r_metric = "f1", r_out, r_summary;
    std::size_t r_jobs = 1;
    CLI::App* rank = app.add_subcommand("rank-heads", "leave-one-out head importance matrix");
    rank->add_option("--ckpt", r_ckpt)->required();
    rank->add_option("--data", r_data)->required();
    rank->add_option("--format", r_format, "boolq|squad|synth");
    rank->add_option("--metric", r_metric, "accuracy|f1");
    rank->add_option("--jobs", r_jobs, "worker threads");
    rank->add_option("--out", r_out, "importance CSV path")->required();
    rank->add_option("--summary", r_summary, "layer summary JSON path");

    std::string c_a, c_b, c_out;
    CLI::App* cmp = app.add_subcommand("compare", "specialization report from two importance CSVs");
    cmp->add_option("--a", c_a)->required();
    cmp->add_option("--b", c_b)->required();
    cmp->add_option("--out", c_out)->required();

    std::string p_in, p_out;
    CLI::App* plot = app.add_subcommand("plot", "render an importance CSV as an SVG heatmap");
    plot->add_option("--in", p_in)->required();
    plot->add_option("--out", p_out)->required();

    std::string s_task, s_out;
    std::size_t s_n = 1000, s_context_len = 32;
    std::uint64_t s_seed = 0;
    double s_frac = 0.7;
    CLI::App* synth = app.add_subcommand("synth", "generate a synthetic QA dataset (JSONL)");
    synth->add_option("--task", s_task, "A (needle span) or B (containment)")->required();
    synth->add_option("--n", s_n);
    synth->add_option("--seed", s_seed);
    synth->add_option("--context-len", s_context_len);
    synth->add_option("--answerable-fraction", s_frac);
    synth->add_option("--out", s_out)->required();

    try {
        app.parse(argc, argv);
    } catch (const CLI::ParseError& e) {
        const int rc = app.exit(e);
        return rc == 0 ? 0 : kExitUsage;
    }

    try {
        if (train->parsed()) return cmd_train(ta);
        if (ev->parsed()) return cmd_eval(e_ckpt, e_data, e_format, e_mask, e_task);
        if (rank->parsed()) {
            return cmd_rank_heads(r_ckpt, r_data, r_format, r_metric, r_jobs, r_out, r_summary);
        }
        if (cmp->parsed()) {
            print_resolved("compare", {{"a", c_a}, {"b", c_b}, {"out", c_out}});
            const SpecializationReport rep =
                compare_tasks(load_importance_csv(c_a), load_importance_csv(c_b));
            std::ofstream out(c_out, std::ios::binary);
            if (!out) throw UsageError("cannot write " + c_out);
            out << rep.to_json().dump(2) << "\n";
            std::cout << rep.to_json().dump(2) << "\n";
            return 0;
        }
        if (plot->parsed()) {
            print_resolved("plot", {{"in", p_in}, {"out", p_out}});
            save_heatmap_svg(load_importance_csv(p_in), p_out);
            return 0;
        }
        if (synth->parsed()) {
            print_resolved("synth", {{"task", s_task},
                                     {"n", s_n},
                                     {"seed", s_seed},
                                     {"context_len", s_context_len},
                                     {"answerable_fraction", s_frac},
                                     {"out", s_out}});
            SyntheticSpec spec;
            spec.n_samples = s_n;
            spec.context_len = s_context_len;
            spec.answerable_fraction = s_frac;
            spec.seed = s_seed;
            if (s_task != "A" && s_task != "B") throw UsageError("synth task must be A or B");
            save_synthetic_jsonl(
                generate_synthetic(spec, s_task == "A" ? SyntheticTask::ANeedleSpan
                                                       : SyntheticTask::BContainment),
                s_out);
            return 0;
        }
    } catch (const NumericError& e) {
        std::cerr << "numeric error: " << e.what() << "\n";
        return kExitNumeric;
    } catch (const std::exception& e) {
        std::cerr << "error: " << e.what() << "\n";
        return kExitUsage;
    }
    return kExitUsage;
}
