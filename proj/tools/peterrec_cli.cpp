#include <cstdio>
#include <filesystem>
#include <fstream>
#include <iostream>
#include <map>
#include <optional>
#include <string>
#include <vector>

#include "CLI11.hpp"
#include "json.hpp"
#include "peterrec/checkpoint.hpp"
#include "peterrec/config.hpp"
#include "peterrec/corpus.hpp"
#include "peterrec/evalbench.hpp"
#include "peterrec/plot.hpp"

namespace fs = std::filesystem;
using namespace peterrec;

namespace {

int exit_code(ErrorKind kind) {
    switch (kind) {
        case ErrorKind::kConfig: return 2;
        case ErrorKind::kParse: return 3;
        case ErrorKind::kVocabulary: return 4;
        case ErrorKind::kIntegrity: return 5;
        case ErrorKind::kIo: return 6;
        default: return 1;
    }
}

std::string dashed(std::string name) {
    for (auto& c : name)
        if (c == '_') c = '-';
    return name;
}

/// `--config FILE` plus one `--<key>` flag per RunConfig key. Flags given on
/// the command line override the file.
struct ConfigFlags {
    std::string file;
    std::map<std::string, std::string> values;

    void attach(CLI::App* app) {
        app->add_option("--config", file, "flat key = value config file");
        for (const auto& key : config_schema()) {
            app->add_option("--" + dashed(key.name), values[key.name], key.help)->group("Run config");
        }
    }

    /// Precedence: flags, then the config file, then PETERREC_SEED for the seed.
    RunConfig resolve(const CLI::App* app) const {
        RunConfig cfg;
        if (auto seed = env_seed()) cfg.seed = *seed;
        if (!file.empty()) {
            auto in = detail::open_input(file);
            apply_config_text(cfg, in, file);
        }
        for (const auto& [name, value] : values) {
            if (app->count("--" + dashed(name)) > 0) set_config_value(cfg, name, value);
        }
        cfg.validate();
        return cfg;
    }
};

void write_json_line(std::ostream& out, const nlohmann::ordered_json& j) {
    out << j.dump() << '\n';
    out.flush();
}

TargetDataset load_target_for(const fs::path& path, const SourceDataset& source, const RunConfig& cfg) {
    return load_target(path, source, TargetOptions{cfg.task, cfg.num_labels, cfg.max_labels_per_user});
}

// ------------------------------------------------------------------ commands

struct PretrainArgs {
    ConfigFlags config;
    std::string source, out, log;
};

int cmd_pretrain(const PretrainArgs& args, const CLI::App* app) {
    const RunConfig cfg = args.config.resolve(app);
    const auto source = load_source(args.source, {cfg.length, cfg.vocab_size});
    ModelConfig mc;
    mc.backbone = cfg.backbone(source.vocab_size);
    mc.validate();
    check_objective(cfg.resolved_objective(), cfg.causal);
    SequenceModel model(mc, Rng(cfg.seed).split("pretrain-init").next_u64());

    std::ofstream log_file;
    if (!args.log.empty()) {
        log_file = detail::open_output(args.log);
    }
    const double baseline = random_mrr(static_cast<std::size_t>(source.vocab_size - ReservedIds::kFirstItem));
    std::uint64_t steps = 0;
    const auto opts = cfg.pretrain_options();
    const auto train_users = split_source(source.size(), opts).train.size();
    pretrain(model, source, opts, [&](const PretrainEpoch& e) {
        nlohmann::ordered_json j;
        j["record"] = "pretrain";
        j["epoch"] = e.epoch;
        j["loss"] = e.loss;
        j["valid_mrr5"] = e.valid_mrr;
        j["valid_hr5"] = e.valid_hr;
        j["random_mrr5"] = baseline;
        write_json_line(std::cerr, j);
        if (log_file.is_open()) write_json_line(log_file, j);
        steps += (train_users + opts.batch_size - 1) / opts.batch_size;
    });
    save_checkpoint(args.out, model, Rng(cfg.seed).state(), steps);
    return 0;
}

struct FinetuneArgs {
    ConfigFlags config;
    std::string source, target, checkpoint, out, report;
};

int cmd_finetune(const FinetuneArgs& args, const CLI::App* app) {
    RunConfig cfg = args.config.resolve(app);
    std::optional<Checkpoint> ck;
    if (!args.checkpoint.empty()) ck = load_checkpoint(args.checkpoint);
    const std::int32_t vocab = ck ? ck->config.backbone.vocab_size : cfg.vocab_size;
    const auto source = load_source(args.source, {cfg.length, vocab});
    const auto target = load_target_for(args.target, source, cfg);
    std::optional<SequenceModel> pretrained;
    if (ck) {
        require(!ck->config.has_task_head() && ck->config.insertion == InsertionMode::kNone, ErrorKind::kConfig,
                "fine-tuning starts from a pre-trained checkpoint, not a fine-tuned one");
        require(ck->config.backbone.causal == cfg.causal, ErrorKind::kConfig,
                "config causal flag disagrees with the checkpoint");
        pretrained.emplace(ck->model());
    }
    const ExperimentInputs in{source, target, split_target(target, cfg.seed), cfg.backbone(source.vocab_size),
                              pretrained ? &*pretrained : nullptr};
    const auto plan = cfg.plan();

    std::ofstream report_file;
    if (!args.report.empty()) report_file = detail::open_output(args.report);
    std::optional<SequenceModel> trained;
    ExperimentReport report = run_experiment(
        plan, in,
        [&](const EpochRecord& e) {
            auto j = to_json(e, plan.hash(), 0.0, cfg.timing);
            j.erase("tunable_fraction");  // known only from the summary
            write_json_line(std::cerr, j);
        },
        &trained);
    for (const auto& w : report.warnings) std::cerr << "warning: " << w << '\n';
    if (report_file.is_open()) write_report(report_file, report, cfg.timing);
    write_json_line(std::cout, summary_json(report, cfg.timing));
    if (!args.out.empty()) {
        require(trained.has_value(), ErrorKind::kConfig, "mode labelcs has no model to save");
        save_checkpoint(args.out, *trained, Rng(cfg.seed).state(), plan.epochs);
    }
    return 0;
}

struct EvalArgs {
    ConfigFlags config;
    std::string source, target, checkpoint, split = "test";
};

int cmd_eval(const EvalArgs& args, const CLI::App* app) {
    const RunConfig cfg = args.config.resolve(app);
    const auto ck = load_checkpoint(args.checkpoint);
    const auto model = ck.model();
    const auto source = load_source(args.source, {cfg.length, ck.config.backbone.vocab_size});
    const auto target = load_target_for(args.target, source, cfg);
    const ExperimentInputs in{source, target, split_target(target, cfg.seed), cfg.backbone(source.vocab_size), &model};
    std::vector<std::size_t> instances;
    if (args.split == "train") {
        instances = in.split.train;
        const auto keep = std::max<std::size_t>(1, static_cast<std::size_t>(std::llround(cfg.data_fraction * double(instances.size()))));
        instances.resize(std::min(keep, instances.size()));
    } else if (args.split == "valid") {
        instances = in.split.valid;
    } else if (args.split == "test") {
        instances = in.split.test;
    } else {
        fail(ErrorKind::kConfig, "unknown split '" + args.split + "' (expected train, valid or test)");
    }
    nlohmann::ordered_json j;
    j["record"] = "eval";
    j["split"] = args.split;
    j["instances"] = instances.size();
    for (const auto& [k, v] : evaluate_split(model, in, instances, cfg.seed, args.split, cfg.negatives)) j[k] = v;
    write_json_line(std::cout, j);
    return 0;
}

struct ExportArgs {
    std::string checkpoint;
    bool json = false;
};

int cmd_export(const ExportArgs& args) {
    const auto ck = load_checkpoint(args.checkpoint);
    const auto model = ck.model();
    const auto report = count_parameters(model);
    if (args.json) {
        nlohmann::ordered_json j;
        j["config"] = nlohmann::ordered_json::object();
        for (const auto& [k, v] : model_config_fields(ck.config)) j["config"][k] = v;
        j["tensors"] = nlohmann::ordered_json::array();
        for (const auto& e : report.entries) {
            j["tensors"].push_back({{"name", e.name},
                                    {"shape", e.shape},
                                    {"role", to_string(e.role)},
                                    {"partition", to_string(e.partition)},
                                    {"count", e.count}});
        }
        j["total"] = report.total;
        j["frozen"] = report.frozen;
        j["tunable"] = report.tunable;
        j["tunable_fraction"] = report.tunable_fraction();
        std::cout << j.dump(2) << '\n';
        return 0;
    }
    for (const auto& [k, v] : model_config_fields(ck.config)) std::printf("%-16s %s\n", k.c_str(), v.c_str());
    std::printf("\n%-28s %-12s %-16s %-8s %12s\n", "tensor", "shape", "role", "part", "count");
    for (const auto& e : report.entries) {
        std::printf("%-28s %-12s %-16s %-8s %12llu\n", e.name.c_str(), join_sizes(e.shape, 'x').c_str(),
                    std::string(to_string(e.role)).c_str(), std::string(to_string(e.partition)).c_str(),
                    static_cast<unsigned long long>(e.count));
    }
    std::printf("\ntotal    %llu\nfrozen   %llu\ntunable  %llu (%.4f%%)\n", static_cast<unsigned long long>(report.total),
                static_cast<unsigned long long>(report.frozen), static_cast<unsigned long long>(report.tunable),
                100.0 * report.tunable_fraction());
    return 0;
}

struct SynthArgs {
    SyntheticSpec spec;
    std::string task = "classification";
    std::string out_dir;
    std::uint64_t seed = 0;
    bool seed_given = false;
};

int cmd_synth(SynthArgs args) {
    args.spec.task = parse_task_kind(args.task);
    if (!args.seed_given) {
        if (auto s = env_seed()) args.seed = *s;
    }
    const auto data = generate_synthetic(args.spec, args.seed);
    fs::create_directories(args.out_dir);
    save_source(fs::path(args.out_dir) / "source.tsv", data.source);
    save_target(fs::path(args.out_dir) / "target.tsv", data.target);
    nlohmann::ordered_json j;
    j["record"] = "synth";
    j["source_users"] = data.source.size();
    j["target_instances"] = data.target.size();
    j["vocab_size"] = data.source.vocab_size;
    j["num_labels"] = data.target.num_labels;
    if (args.spec.task == TaskKind::kClassification) j["majority_oracle_acc"] = majority_vote_accuracy(data, args.spec.num_clusters);
    write_json_line(std::cout, j);
    return 0;
}

struct PlotArgs {
    std::vector<std::string> reports;
    std::string metric = "test_acc";
    std::string out;
    std::string title;
};

int cmd_plot(const PlotArgs& args) {
    std::vector<Series> series;
    for (const auto& path : args.reports) {
        auto in = detail::open_input(path);
        for (auto& s : read_report_series(in, args.metric, path)) series.push_back(std::move(s));
    }
    auto out = detail::open_output(args.out);
    out << render_svg(series, args.title.empty() ? args.metric + " by epoch" : args.title, args.metric);
    require(out.good(), ErrorKind::kIo, "cannot write '" + args.out + "'");
    return 0;
}

} // namespace

int main(int argc, char** argv) {
    CLI::App app{"Pre-train, patch and fine-tune dilated-convolution sequence recommenders"};
    app.require_subcommand(1);

    PretrainArgs pre;
    auto* pretrain_cmd = app.add_subcommand("pretrain", "pre-train a backbone on source sequences");
    pretrain_cmd->add_option("--source", pre.source, "source file: user<TAB>id,id,...")->required();
    pretrain_cmd->add_option("--out", pre.out, "checkpoint to write")->required();
    pretrain_cmd->add_option("--log", pre.log, "JSONL file for per-epoch validation metrics");
    pre.config.attach(pretrain_cmd);

    FinetuneArgs ft;
    auto* finetune_cmd = app.add_subcommand("finetune", "fine-tune on a target task and report per-epoch metrics");
    finetune_cmd->add_option("--source", ft.source, "source file")->required();
    finetune_cmd->add_option("--target", ft.target, "target file: user<TAB>label")->required();
    finetune_cmd->add_option("--checkpoint", ft.checkpoint, "pre-trained checkpoint (not needed for *zero and labelcs)");
    finetune_cmd->add_option("--out", ft.out, "fine-tuned checkpoint to write");
    finetune_cmd->add_option("--report", ft.report, "JSONL report to write");
    ft.config.attach(finetune_cmd);

    EvalArgs ev;
    auto* eval_cmd = app.add_subcommand("eval", "evaluate a fine-tuned checkpoint on one split");
    eval_cmd->add_option("--source", ev.source, "source file")->required();
    eval_cmd->add_option("--target", ev.target, "target file")->required();
    eval_cmd->add_option("--checkpoint", ev.checkpoint, "fine-tuned checkpoint")->required();
    eval_cmd->add_option("--split", ev.split, "train, valid or test")->capture_default_str();
    ev.config.attach(eval_cmd);

    ExportArgs ex;
    auto* export_cmd = app.add_subcommand("export", "print a checkpoint's config and parameter breakdown");
    export_cmd->add_option("--checkpoint", ex.checkpoint, "checkpoint to describe")->required();
    export_cmd->add_flag("--json", ex.json, "machine-readable output");

    SynthArgs sy;
    auto* synth_cmd = app.add_subcommand("synth", "generate a planted-cluster source/target dataset");
    synth_cmd->add_option("--out-dir", sy.out_dir, "directory for source.tsv and target.tsv")->required();
    synth_cmd->add_option("--clusters", sy.spec.num_clusters, "latent clusters C")->capture_default_str();
    synth_cmd->add_option("--items-per-cluster", sy.spec.items_per_cluster, "items per cluster")->capture_default_str();
    synth_cmd->add_option("--noise", sy.spec.noise, "probability an item is drawn off-cluster")->capture_default_str();
    synth_cmd->add_option("--length", sy.spec.length, "items per user")->capture_default_str();
    synth_cmd->add_option("--source-users", sy.spec.source_users, "source users")->capture_default_str();
    synth_cmd->add_option("--target-users", sy.spec.target_users, "labelled target users")->capture_default_str();
    synth_cmd->add_option("--task", sy.task, "classification or item-rec")->capture_default_str();
    synth_cmd->add_option("--max-labels-per-user", sy.spec.max_labels_per_user, "item-rec labels per user, at most")->capture_default_str();
    synth_cmd->add_option("--recent-items", sy.spec.recent_items, "trailing items drawn from a second cluster")->capture_default_str();
    synth_cmd->add_option("--label-noise", sy.spec.label_noise, "probability a class label is replaced at random")->capture_default_str();
    auto* synth_seed = synth_cmd->add_option("--seed", sy.seed, "generator seed (PETERREC_SEED when absent)");

    PlotArgs pl;
    auto* plot_cmd = app.add_subcommand("plot", "draw metric-by-epoch curves from JSONL reports as SVG");
    plot_cmd->add_option("--report", pl.reports, "report file(s)")->required();
    plot_cmd->add_option("--metric", pl.metric, "field to plot")->capture_default_str();
    plot_cmd->add_option("--out", pl.out, "SVG file to write")->required();
    plot_cmd->add_option("--title", pl.title, "chart title");

    try {
        app.parse(argc, argv);
    } catch (const CLI::CallForHelp& e) {
        return app.exit(e);
    } catch (const CLI::CallForAllHelp& e) {
        return app.exit(e);
    } catch (const CLI::ParseError& e) {
        std::string msg = e.what();
        for (auto& c : msg)
            if (c == '\n') c = ' ';
        std::cerr << "error[usage]: " << msg << '\n';
        return 64;
    }

    try {
        if (*pretrain_cmd) return cmd_pretrain(pre, pretrain_cmd);
        if (*finetune_cmd) return cmd_finetune(ft, finetune_cmd);
        if (*eval_cmd) return cmd_eval(ev, eval_cmd);
        if (*export_cmd) return cmd_export(ex);
        if (*synth_cmd) {
            sy.seed_given = synth_seed->count() > 0;
            return cmd_synth(sy);
        }
        if (*plot_cmd) return cmd_plot(pl);
    } catch (const Error& e) {
        std::string msg = e.what();
        for (auto& c : msg)
            if (c == '\n') c = ' ';
        std::cerr << "error[" << e.code() << "]: " << msg << '\n';
        return exit_code(e.kind());
    } catch (const std::exception& e) {
        std::cerr << "error[internal]: " << e.what() << '\n';
        return 1;
    }
    return 0;
}
