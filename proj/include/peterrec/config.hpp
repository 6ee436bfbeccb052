#pragma once

#include <algorithm>
#include <cstdint>
#include <cstdlib>
#include <filesystem>
#include <fstream>
#include <functional>
#include <optional>
#include <sstream>
#include <string>
#include <string_view>
#include <vector>

#include "peterrec/adapters.hpp"
#include "peterrec/checkpoint.hpp"
#include "peterrec/corpus.hpp"
#include "peterrec/error.hpp"
#include "peterrec/evalbench.hpp"

namespace peterrec {

/// Every hyperparameter of a pretrain/finetune/eval run. Values that read
/// "auto" are resolved from the backbone's causality or width.
struct RunConfig {
    // backbone
    std::size_t k = 256;
    std::size_t kernel = 3;
    std::vector<std::size_t> dilations{1, 2, 4, 8, 1, 2, 4, 8, 1, 2, 4, 8, 1, 2, 4, 8};
    bool causal = true;
    std::size_t length = 50;
    SublayerOrder order = SublayerOrder::kConvNormAct;
    double dropout = 0.0;
    double ln_eps = 1e-8;
    // pre-training
    std::optional<Objective> objective;      // auto: ar when causal, masked otherwise
    std::size_t pretrain_epochs = 5;
    std::size_t pretrain_batch = 0;          // auto: 32 causal, 128 non-causal
    double pretrain_lr = 1e-3;
    double mask_rate = 0.3;
    double pretrain_split = 0.9;
    // fine-tuning
    FinetuneMode mode = FinetuneMode::kPeterRec;
    InsertionMode insertion = InsertionMode::kSerialOnePerBlock;
    std::size_t d = 0;                       // auto: k / 8
    std::optional<HeadMode> head;            // auto: end [TCL] when causal, both ends otherwise
    std::size_t last_layers = 1;
    bool tune_layernorm = false;
    std::optional<LossKind> loss;            // auto: by task
    double data_fraction = 1.0;
    std::size_t epochs = 10;
    std::size_t steps_per_epoch = 0;
    std::size_t batch = 512;
    double lr = 1e-3;
    std::size_t negatives = kSampledNegatives;
    // data
    TaskKind task = TaskKind::kClassification;
    std::size_t num_labels = 0;
    std::size_t max_labels_per_user = 0;
    std::int32_t vocab_size = 0;
    // run
    std::uint64_t seed = 0;
    bool timing = false;

    Objective resolved_objective() const { return objective.value_or(causal ? Objective::kAutoregressive : Objective::kMasked); }
    HeadMode resolved_head() const { return head.value_or(causal ? HeadMode::kCausalEndTcl : HeadMode::kNonCausalBothTcl); }
    std::size_t resolved_d() const { return d ? d : std::max<std::size_t>(1, k / 8); }
    std::size_t resolved_pretrain_batch() const { return pretrain_batch ? pretrain_batch : (causal ? 32 : 128); }

    BackboneConfig backbone(std::int32_t vocab) const {
        BackboneConfig bb;
        bb.vocab_size = vocab;
        bb.embed_dim = k;
        bb.kernel_size = kernel;
        bb.dilations = dilations;
        bb.causal = causal;
        bb.max_len = length + 2;  // room for [TCL] tokens at fine-tune time
        bb.order = order;
        bb.dropout = dropout;
        bb.layer_norm_eps = ln_eps;
        return bb;
    }

    PretrainOptions pretrain_options() const {
        PretrainOptions o;
        o.epochs = pretrain_epochs;
        o.batch_size = resolved_pretrain_batch();
        o.learning_rate = pretrain_lr;
        o.mask_rate = mask_rate;
        o.train_fraction = pretrain_split;
        o.seed = seed;
        return o;
    }

    ExperimentPlan plan() const {
        ExperimentPlan p;
        p.mode = mode;
        p.insertion = insertion;
        p.bottleneck = resolved_d();
        p.head = resolved_head();
        p.last_layers = last_layers;
        p.tune_layernorm = tune_layernorm;
        p.loss = loss;
        p.data_fraction = data_fraction;
        p.seed = seed;
        p.epochs = epochs;
        p.steps_per_epoch = steps_per_epoch;
        p.batch_size = batch;
        p.learning_rate = lr;
        p.negatives = negatives;
        p.record_timing = timing;
        return p;
    }

    void validate() const {
        backbone(ReservedIds::kFirstItem + 1).validate();
        check_objective(resolved_objective(), causal);
        check_head_compatible(resolved_head(), causal);
        require(mask_rate > 0.0 && mask_rate <= 1.0, ErrorKind::kConfig, "mask_rate must be in (0, 1]");
        require(pretrain_split > 0.0 && pretrain_split <= 1.0, ErrorKind::kConfig, "pretrain_split must be in (0, 1]");
        require(pretrain_lr > 0.0 && pretrain_epochs > 0, ErrorKind::kConfig, "pre-training needs a positive lr and epoch count");
        require(last_layers <= dilations.size(), ErrorKind::kConfig, "last_layers exceeds the number of conv layers");
        plan().validate();
    }
};

namespace detail {

inline bool parse_bool(const std::string& v, const std::string& key) {
    if (v == "1" || v == "true" || v == "yes" || v == "on") return true;
    if (v == "0" || v == "false" || v == "no" || v == "off") return false;
    fail(ErrorKind::kConfig, "'" + key + "' expects a boolean, got '" + v + "'");
}

inline std::size_t parse_size(const std::string& v, const std::string& key) {
    try {
        return to_size(v, key);
    } catch (const Error&) {
        fail(ErrorKind::kConfig, "'" + key + "' expects a non-negative integer, got '" + v + "'");
    }
}

inline double parse_number(const std::string& v, const std::string& key) {
    try {
        return to_double(v, key);
    } catch (const Error&) {
        fail(ErrorKind::kConfig, "'" + key + "' expects a number, got '" + v + "'");
    }
}

template <typename T, typename F>
std::optional<T> parse_auto(const std::string& v, F parse) {
    if (v == "auto") return std::nullopt;
    return parse(v);
}

inline std::string trim(std::string_view s) {
    const auto b = s.find_first_not_of(" \t\r");
    if (b == std::string_view::npos) return {};
    const auto e = s.find_last_not_of(" \t\r");
    return std::string(s.substr(b, e - b + 1));
}

} // namespace detail

/// One schema entry per config key: description, setter and printer.
struct ConfigKey {
    std::string name;
    std::string help;
    std::function<void(RunConfig&, const std::string&)> set;
    std::function<std::string(const RunConfig&)> get;
};

inline const std::vector<ConfigKey>& config_schema() {
    using detail::parse_bool;
    using detail::parse_number;
    using detail::parse_size;
    auto num = [](double v) { return format_double(v); };
    auto flag = [](bool b) { return std::string(b ? "true" : "false"); };
    static const std::vector<ConfigKey> schema = {
        {"k", "embedding / channel width", [](RunConfig& c, const std::string& v) { c.k = parse_size(v, "k"); },
         [](const RunConfig& c) { return std::to_string(c.k); }},
        {"kernel", "convolution kernel size", [](RunConfig& c, const std::string& v) { c.kernel = parse_size(v, "kernel"); },
         [](const RunConfig& c) { return std::to_string(c.kernel); }},
        {"dilations", "comma-separated dilations, two per residual block",
         [](RunConfig& c, const std::string& v) {
             try {
                 c.dilations = detail::to_sizes(v, ',', "dilations");
             } catch (const Error&) {
                 fail(ErrorKind::kConfig, "'dilations' expects comma-separated integers, got '" + v + "'");
             }
         },
         [](const RunConfig& c) { return join_sizes(c.dilations); }},
        {"causal", "causal (true) or non-causal (false) convolutions",
         [](RunConfig& c, const std::string& v) { c.causal = parse_bool(v, "causal"); },
         [flag](const RunConfig& c) { return flag(c.causal); }},
        {"length", "sequence length n; longer histories keep their most recent items",
         [](RunConfig& c, const std::string& v) { c.length = parse_size(v, "length"); },
         [](const RunConfig& c) { return std::to_string(c.length); }},
        {"order", "sublayer order: conv-norm-act or conv-act-norm",
         [](RunConfig& c, const std::string& v) {
             require(v == "conv-norm-act" || v == "conv-act-norm", ErrorKind::kConfig, "unknown order '" + v + "'");
             c.order = v == "conv-norm-act" ? SublayerOrder::kConvNormAct : SublayerOrder::kConvActNorm;
         },
         [](const RunConfig& c) { return std::string(c.order == SublayerOrder::kConvNormAct ? "conv-norm-act" : "conv-act-norm"); }},
        {"dropout", "dropout rate after each norm/activation", [](RunConfig& c, const std::string& v) { c.dropout = parse_number(v, "dropout"); },
         [num](const RunConfig& c) { return num(c.dropout); }},
        {"ln_eps", "layer-norm epsilon", [](RunConfig& c, const std::string& v) { c.ln_eps = parse_number(v, "ln_eps"); },
         [num](const RunConfig& c) { return num(c.ln_eps); }},
        {"objective", "pre-training objective: ar, masked or auto",
         [](RunConfig& c, const std::string& v) { c.objective = detail::parse_auto<Objective>(v, parse_objective); },
         [](const RunConfig& c) { return c.objective ? std::string(to_string(*c.objective)) : std::string("auto"); }},
        {"pretrain_epochs", "pre-training epochs", [](RunConfig& c, const std::string& v) { c.pretrain_epochs = parse_size(v, "pretrain_epochs"); },
         [](const RunConfig& c) { return std::to_string(c.pretrain_epochs); }},
        {"pretrain_batch", "pre-training batch size, 0 = 32 causal / 128 non-causal",
         [](RunConfig& c, const std::string& v) { c.pretrain_batch = parse_size(v, "pretrain_batch"); },
         [](const RunConfig& c) { return std::to_string(c.pretrain_batch); }},
        {"pretrain_lr", "pre-training learning rate", [](RunConfig& c, const std::string& v) { c.pretrain_lr = parse_number(v, "pretrain_lr"); },
         [num](const RunConfig& c) { return num(c.pretrain_lr); }},
        {"mask_rate", "fraction of items masked for the masked objective",
         [](RunConfig& c, const std::string& v) { c.mask_rate = parse_number(v, "mask_rate"); },
         [num](const RunConfig& c) { return num(c.mask_rate); }},
        {"pretrain_split", "fraction of source users used for training, rest validates",
         [](RunConfig& c, const std::string& v) { c.pretrain_split = parse_number(v, "pretrain_split"); },
         [num](const RunConfig& c) { return num(c.pretrain_split); }},
        {"mode", "peterrec, peterzero, fineall, finezero, finecls, finelast, labelcs",
         [](RunConfig& c, const std::string& v) { c.mode = parse_finetune_mode(v); },
         [](const RunConfig& c) { return std::string(to_string(c.mode)); }},
        {"insertion", "patch insertion: b, c, d or e", [](RunConfig& c, const std::string& v) { c.insertion = parse_insertion_mode(v); },
         [](const RunConfig& c) { return std::string(to_string(c.insertion)); }},
        {"d", "patch bottleneck width, 0 = k/8", [](RunConfig& c, const std::string& v) { c.d = parse_size(v, "d"); },
         [](const RunConfig& c) { return std::to_string(c.d); }},
        {"head", "causal-end-tcl, noncausal-both-tcl, sum-all-hidden or auto",
         [](RunConfig& c, const std::string& v) { c.head = detail::parse_auto<HeadMode>(v, parse_head_mode); },
         [](const RunConfig& c) { return c.head ? std::string(to_string(*c.head)) : std::string("auto"); }},
        {"last_layers", "trailing conv layers tuned by finelast", [](RunConfig& c, const std::string& v) { c.last_layers = parse_size(v, "last_layers"); },
         [](const RunConfig& c) { return std::to_string(c.last_layers); }},
        {"tune_layernorm", "also tune layer norms in patch modes",
         [](RunConfig& c, const std::string& v) { c.tune_layernorm = parse_bool(v, "tune_layernorm"); },
         [flag](const RunConfig& c) { return flag(c.tune_layernorm); }},
        {"loss", "ce, bpr or auto (ce for classification, bpr for item-rec)",
         [](RunConfig& c, const std::string& v) { c.loss = detail::parse_auto<LossKind>(v, parse_loss_kind); },
         [](const RunConfig& c) { return c.loss ? std::string(to_string(*c.loss)) : std::string("auto"); }},
        {"data_fraction", "fraction of the fine-tune training split used",
         [](RunConfig& c, const std::string& v) { c.data_fraction = parse_number(v, "data_fraction"); },
         [num](const RunConfig& c) { return num(c.data_fraction); }},
        {"epochs", "fine-tune epochs", [](RunConfig& c, const std::string& v) { c.epochs = parse_size(v, "epochs"); },
         [](const RunConfig& c) { return std::to_string(c.epochs); }},
        {"steps_per_epoch", "fine-tune steps per epoch, 0 = one pass",
         [](RunConfig& c, const std::string& v) { c.steps_per_epoch = parse_size(v, "steps_per_epoch"); },
         [](const RunConfig& c) { return std::to_string(c.steps_per_epoch); }},
        {"batch", "fine-tune batch size", [](RunConfig& c, const std::string& v) { c.batch = parse_size(v, "batch"); },
         [](const RunConfig& c) { return std::to_string(c.batch); }},
        {"lr", "fine-tune learning rate", [](RunConfig& c, const std::string& v) { c.lr = parse_number(v, "lr"); },
         [num](const RunConfig& c) { return num(c.lr); }},
        {"negatives", "sampled negatives per ranking instance", [](RunConfig& c, const std::string& v) { c.negatives = parse_size(v, "negatives"); },
         [](const RunConfig& c) { return std::to_string(c.negatives); }},
        {"task", "classification or item-rec", [](RunConfig& c, const std::string& v) { c.task = parse_task_kind(v); },
         [](const RunConfig& c) { return std::string(to_string(c.task)); }},
        {"num_labels", "label space size, 0 = infer from the target file",
         [](RunConfig& c, const std::string& v) { c.num_labels = parse_size(v, "num_labels"); },
         [](const RunConfig& c) { return std::to_string(c.num_labels); }},
        {"max_labels_per_user", "bound on labels per target user, 0 = none",
         [](RunConfig& c, const std::string& v) { c.max_labels_per_user = parse_size(v, "max_labels_per_user"); },
         [](const RunConfig& c) { return std::to_string(c.max_labels_per_user); }},
        {"vocab_size", "item vocabulary size including reserved ids, 0 = infer",
         [](RunConfig& c, const std::string& v) { c.vocab_size = static_cast<std::int32_t>(parse_size(v, "vocab_size")); },
         [](const RunConfig& c) { return std::to_string(c.vocab_size); }},
        {"seed", "run seed", [](RunConfig& c, const std::string& v) { c.seed = parse_size(v, "seed"); },
         [](const RunConfig& c) { return std::to_string(c.seed); }},
        {"timing", "include wall-clock fields in reports", [](RunConfig& c, const std::string& v) { c.timing = parse_bool(v, "timing"); },
         [flag](const RunConfig& c) { return flag(c.timing); }},
    };
    return schema;
}

inline void set_config_value(RunConfig& cfg, const std::string& key, const std::string& value) {
    for (const auto& entry : config_schema()) {
        if (entry.name == key) {
            entry.set(cfg, value);
            return;
        }
    }
    fail(ErrorKind::kConfig, "unknown config key '" + key + "'");
}

/// Applies `key = value` lines; blank lines and `#` comments are ignored.
inline void apply_config_text(RunConfig& cfg, std::istream& in, const std::string& name = "config") {
    std::string line;
    for (std::size_t number = 1; std::getline(in, line); ++number) {
        const auto hash = line.find('#');
        const std::string body = detail::trim(std::string_view(line).substr(0, hash));
        if (body.empty()) continue;
        const auto eq = body.find('=');
        require(eq != std::string::npos, ErrorKind::kConfig, name + ":" + std::to_string(number) + ": expected 'key = value'");
        try {
            set_config_value(cfg, detail::trim(std::string_view(body).substr(0, eq)), detail::trim(std::string_view(body).substr(eq + 1)));
        } catch (const Error& e) {
            fail(e.kind(), name + ":" + std::to_string(number) + ": " + e.what());
        }
    }
}

inline RunConfig load_config(const std::filesystem::path& path) {
    std::ifstream in(path);
    require(in.good(), ErrorKind::kIo, "cannot open config '" + path.string() + "'");
    RunConfig cfg;
    apply_config_text(cfg, in, path.string());
    return cfg;
}

/// The full config as `key = value` lines, in schema order.
inline std::string config_text(const RunConfig& cfg) {
    std::string out;
    for (const auto& entry : config_schema()) out += entry.name + " = " + entry.get(cfg) + "\n";
    return out;
}

/// Seed from PETERREC_SEED when the caller gave none.
inline std::optional<std::uint64_t> env_seed() {
    const char* raw = std::getenv("PETERREC_SEED");
    if (raw == nullptr || *raw == '\0') return std::nullopt;
    try {
        return detail::parse_size(raw, "PETERREC_SEED");
    } catch (const Error&) {
        fail(ErrorKind::kConfig, std::string("PETERREC_SEED must be a non-negative integer, got '") + raw + "'");
    }
}

} // namespace peterrec
