#pragma once

#include <algorithm>
#include <charconv>
#include <cstdint>
#include <filesystem>
#include <fstream>
#include <map>
#include <numeric>
#include <set>
#include <sstream>
#include <string>
#include <string_view>
#include <system_error>
#include <unordered_map>
#include <vector>

#include "peterrec/backbone.hpp"
#include "peterrec/error.hpp"
#include "peterrec/objectives.hpp"
#include "peterrec/random.hpp"

namespace peterrec {

/// Users with their interaction histories, left-padded to `length`.
struct SourceDataset {
    std::vector<std::int64_t> users;
    std::vector<Sequence> sequences;
    std::int32_t vocab_size = 0;
    std::size_t length = 0;

    std::size_t size() const noexcept { return users.size(); }

    /// Rebuilds the user lookup; call after editing `users`.
    void reindex() {
        index_.clear();
        for (std::size_t i = 0; i < users.size(); ++i) index_.emplace(users[i], i);
    }

    std::size_t index_of(std::int64_t user) const {
        require(index_.size() == users.size(), ErrorKind::kContract, "source dataset index is stale; call reindex()");
        const auto it = index_.find(user);
        require(it != index_.end(), ErrorKind::kIntegrity, "user " + std::to_string(user) + " has no source record");
        return it->second;
    }

private:
    std::unordered_map<std::int64_t, std::size_t> index_;
};

enum class TaskKind : std::uint8_t { kClassification, kItemRecommendation };

inline std::string_view to_string(TaskKind kind) {
    return kind == TaskKind::kClassification ? "classification" : "item-rec";
}

inline TaskKind parse_task_kind(std::string_view text) {
    if (text == "classification") return TaskKind::kClassification;
    if (text == "item-rec") return TaskKind::kItemRecommendation;
    fail(ErrorKind::kConfig, "unknown task kind '" + std::string(text) + "' (expected classification or item-rec)");
}

/// (user, label) instances; a user may carry several labels.
struct TargetDataset {
    std::vector<std::int64_t> users;
    std::vector<std::int32_t> labels;
    std::size_t num_labels = 0;
    TaskKind kind = TaskKind::kClassification;

    std::size_t size() const noexcept { return users.size(); }
};

/// Keeps the most recent `length` items and pads on the left.
inline Sequence left_pad(std::span<const std::int32_t> items, std::size_t length) {
    Sequence out(length, ReservedIds::kPad);
    const std::size_t keep = std::min(items.size(), length);
    std::copy(items.end() - static_cast<std::ptrdiff_t>(keep), items.end(), out.end() - static_cast<std::ptrdiff_t>(keep));
    return out;
}

namespace detail {

inline std::ifstream open_input(const std::filesystem::path& path) {
    std::ifstream in(path);
    require(in.good(), ErrorKind::kIo, "cannot open '" + path.string() + "'");
    return in;
}

inline std::ofstream open_output(const std::filesystem::path& path) {
    std::ofstream out(path, std::ios::binary | std::ios::trunc);
    require(out.good(), ErrorKind::kIo, "cannot write '" + path.string() + "'");
    return out;
}

template <typename T>
T parse_integer(std::string_view text, const std::string& where) {
    T value{};
    const auto [ptr, ec] = std::from_chars(text.data(), text.data() + text.size(), value);
    require(ec == std::errc{} && ptr == text.data() + text.size() && !text.empty(), ErrorKind::kParse,
            where + ": expected an integer, got '" + std::string(text) + "'");
    return value;
}

struct Line {
    std::string_view key;
    std::string_view value;
};

inline Line split_tab(std::string_view line, const std::string& where) {
    if (!line.empty() && line.back() == '\r') line.remove_suffix(1);
    const auto tab = line.find('\t');
    require(tab != std::string_view::npos && line.find('\t', tab + 1) == std::string_view::npos, ErrorKind::kParse,
            where + ": expected exactly two tab-separated fields");
    return {line.substr(0, tab), line.substr(tab + 1)};
}

inline std::vector<std::string_view> split_commas(std::string_view text, const std::string& where) {
    require(!text.empty(), ErrorKind::kParse, where + ": empty item list");
    std::vector<std::string_view> out;
    std::size_t start = 0;
    while (true) {
        const auto comma = text.find(',', start);
        out.push_back(text.substr(start, comma - start));
        if (comma == std::string_view::npos) break;
        start = comma + 1;
    }
    return out;
}

template <typename F>
void for_each_line(std::istream& in, const std::string& name, F&& f) {
    std::string line;
    for (std::size_t number = 1; std::getline(in, line); ++number) {
        if (line.empty() || line == "\r") continue;
        f(std::string_view(line), name + ":" + std::to_string(number));
    }
}

} // namespace detail

struct SourceOptions {
    std::size_t length = 50;        // also the truncation knob: only the most recent items are kept
    std::int32_t vocab_size = 0;    // 0 infers max id + 1
};

/// Parses `userID<TAB>id,id,...` where ids are already dense (>= 3).
inline SourceDataset read_source(std::istream& in, const SourceOptions& options, const std::string& name = "source") {
    require(options.length > 0, ErrorKind::kConfig, "source length must be positive");
    SourceDataset ds;
    ds.length = options.length;
    std::int32_t max_id = ReservedIds::kFirstItem - 1;
    std::set<std::int64_t> seen;
    detail::for_each_line(in, name, [&](std::string_view line, const std::string& where) {
        const auto [key, value] = detail::split_tab(line, where);
        const auto user = detail::parse_integer<std::int64_t>(key, where);
        require(seen.insert(user).second, ErrorKind::kParse, where + ": duplicate user " + std::to_string(user));
        std::vector<std::int32_t> items;
        for (auto token : detail::split_commas(value, where)) {
            const auto id = detail::parse_integer<std::int32_t>(token, where);
            require(id >= ReservedIds::kFirstItem, ErrorKind::kVocabulary,
                    where + ": item id " + std::to_string(id) + " collides with a reserved id");
            require(options.vocab_size == 0 || id < options.vocab_size, ErrorKind::kVocabulary,
                    where + ": item id " + std::to_string(id) + " outside vocabulary of size " + std::to_string(options.vocab_size));
            max_id = std::max(max_id, id);
            items.push_back(id);
        }
        ds.users.push_back(user);
        ds.sequences.push_back(left_pad(items, options.length));
    });
    require(!ds.users.empty(), ErrorKind::kEmptyBatch, name + ": no users");
    ds.vocab_size = options.vocab_size ? options.vocab_size : max_id + 1;
    ds.reindex();
    return ds;
}

inline SourceDataset load_source(const std::filesystem::path& path, const SourceOptions& options = {}) {
    auto in = detail::open_input(path);
    return read_source(in, options, path.string());
}

/// Writes the padding-free form that read_source accepts.
inline void write_source(std::ostream& out, const SourceDataset& ds) {
    for (std::size_t i = 0; i < ds.size(); ++i) {
        out << ds.users[i] << '\t';
        bool first = true;
        for (auto id : ds.sequences[i]) {
            if (id == ReservedIds::kPad) continue;
            out << (first ? "" : ",") << id;
            first = false;
        }
        out << '\n';
    }
}

inline void save_source(const std::filesystem::path& path, const SourceDataset& ds) {
    auto out = detail::open_output(path);
    write_source(out, ds);
}

/// Reads a file of arbitrary non-negative raw item ids, remaps them densely
/// from 3 in order of first appearance and writes `raw<TAB>dense` lines to
/// `vocab_path`.
inline SourceDataset import_raw_source(const std::filesystem::path& path, std::size_t length,
                                       const std::filesystem::path& vocab_path) {
    auto in = detail::open_input(path);
    std::map<std::int64_t, std::int32_t> dense;
    std::vector<std::int64_t> order;
    std::ostringstream remapped;
    detail::for_each_line(in, path.string(), [&](std::string_view line, const std::string& where) {
        const auto [key, value] = detail::split_tab(line, where);
        remapped << key << '\t';
        bool first = true;
        for (auto token : detail::split_commas(value, where)) {
            const auto raw = detail::parse_integer<std::int64_t>(token, where);
            require(raw >= 0, ErrorKind::kParse, where + ": negative item id");
            auto [it, inserted] = dense.emplace(raw, ReservedIds::kFirstItem + static_cast<std::int32_t>(dense.size()));
            if (inserted) order.push_back(raw);
            remapped << (first ? "" : ",") << it->second;
            first = false;
        }
        remapped << '\n';
    });
    auto vocab = detail::open_output(vocab_path);
    for (auto raw : order) vocab << raw << '\t' << dense.at(raw) << '\n';
    std::istringstream again(remapped.str());
    return read_source(again, {length, ReservedIds::kFirstItem + static_cast<std::int32_t>(dense.size())}, path.string());
}

struct TargetOptions {
    TaskKind kind = TaskKind::kClassification;
    std::size_t num_labels = 0;        // 0 infers max label + 1
    std::size_t max_labels_per_user = 0;  // 0 means unbounded
};

/// Parses `userID<TAB>label`; every user must exist in `source`.
inline TargetDataset read_target(std::istream& in, const SourceDataset& source, const TargetOptions& options,
                                 const std::string& name = "target") {
    TargetDataset ds;
    ds.kind = options.kind;
    std::int32_t max_label = -1;
    std::unordered_map<std::int64_t, std::size_t> multiplicity;
    detail::for_each_line(in, name, [&](std::string_view line, const std::string& where) {
        const auto [key, value] = detail::split_tab(line, where);
        const auto user = detail::parse_integer<std::int64_t>(key, where);
        const auto label = detail::parse_integer<std::int32_t>(value, where);
        require(label >= 0, ErrorKind::kParse, where + ": negative label");
        require(options.num_labels == 0 || static_cast<std::size_t>(label) < options.num_labels, ErrorKind::kIndex,
                where + ": label " + std::to_string(label) + " outside " + std::to_string(options.num_labels) + " labels");
        try {
            source.index_of(user);
        } catch (const Error& e) {
            fail(ErrorKind::kIntegrity, where + ": " + e.what());
        }
        const auto g = ++multiplicity[user];
        require(options.max_labels_per_user == 0 || g <= options.max_labels_per_user, ErrorKind::kIntegrity,
                where + ": user " + std::to_string(user) + " exceeds " + std::to_string(options.max_labels_per_user) +
                    " labels");
        max_label = std::max(max_label, label);
        ds.users.push_back(user);
        ds.labels.push_back(label);
    });
    require(!ds.users.empty(), ErrorKind::kEmptyBatch, name + ": no instances");
    ds.num_labels = options.num_labels ? options.num_labels : static_cast<std::size_t>(max_label) + 1;
    return ds;
}

inline TargetDataset load_target(const std::filesystem::path& path, const SourceDataset& source,
                                 const TargetOptions& options = {}) {
    auto in = detail::open_input(path);
    return read_target(in, source, options, path.string());
}

inline void save_target(const std::filesystem::path& path, const TargetDataset& ds) {
    auto out = detail::open_output(path);
    for (std::size_t i = 0; i < ds.size(); ++i) out << ds.users[i] << '\t' << ds.labels[i] << '\n';
}

/// Instance indices into a TargetDataset.
struct TargetSplit {
    std::vector<std::size_t> train;
    std::vector<std::size_t> valid;
    std::vector<std::size_t> test;
};

inline constexpr std::size_t kMinSplitSize = 100;

/// Seeded 70/3/27 split of instance indices; sizes are rounded to nearest
/// and the test split takes the remainder.
inline TargetSplit split_target(const TargetDataset& ds, std::uint64_t seed) {
    const std::size_t n = ds.size();
    require(n >= kMinSplitSize, ErrorKind::kConfig,
            "target dataset has " + std::to_string(n) + " instances, at least " + std::to_string(kMinSplitSize) + " needed");
    std::vector<std::size_t> order(n);
    std::iota(order.begin(), order.end(), 0);
    Rng rng = Rng(seed).split("split");
    rng.shuffle(order);
    const auto n_train = (n * 70 + 50) / 100, n_valid = (n * 3 + 50) / 100;
    TargetSplit out;
    out.train.assign(order.begin(), order.begin() + static_cast<std::ptrdiff_t>(n_train));
    out.valid.assign(order.begin() + static_cast<std::ptrdiff_t>(n_train),
                     order.begin() + static_cast<std::ptrdiff_t>(n_train + n_valid));
    out.test.assign(order.begin() + static_cast<std::ptrdiff_t>(n_train + n_valid), order.end());
    return out;
}

/// Places [TCL] tokens for the head mode: end, both ends, or none.
inline Sequence build_finetune_input(const Sequence& seq, HeadMode head, bool causal) {
    check_head_compatible(head, causal);
    Sequence out;
    out.reserve(seq.size() + 2);
    if (head == HeadMode::kNonCausalBothTcl) out.push_back(ReservedIds::kTcl);
    out.insert(out.end(), seq.begin(), seq.end());
    if (uses_tcl(head)) out.push_back(ReservedIds::kTcl);
    return out;
}

/// Planted-structure source/target generator. Every user has a latent
/// cluster; each item comes from that cluster's item block with probability
/// 1 - noise and uniformly from the whole catalogue otherwise.
struct SyntheticSpec {
    std::size_t num_clusters = 8;
    std::size_t items_per_cluster = 50;
    double noise = 0.3;
    std::size_t length = 50;
    std::size_t source_users = 4000;
    std::size_t target_users = 800;   // drawn without replacement from the source users
    TaskKind task = TaskKind::kClassification;
    std::size_t max_labels_per_user = 3;  // item-rec only: g is uniform in [1, max]
    // The last `recent_items` positions come from a second, per-user "current
    // interest" cluster; the label still follows the long-term cluster.
    std::size_t recent_items = 0;
    double label_noise = 0.0;  // classification only: label replaced uniformly

    void validate() const {
        require(num_clusters >= 1 && items_per_cluster >= 1, ErrorKind::kConfig, "clusters must be non-empty");
        require(noise >= 0.0 && noise < 1.0, ErrorKind::kConfig, "noise must be in [0, 1)");
        require(label_noise >= 0.0 && label_noise < 1.0, ErrorKind::kConfig, "label noise must be in [0, 1)");
        require(length >= 1 && recent_items < length, ErrorKind::kConfig, "recent items must be fewer than the length");
        require(target_users >= 1 && target_users <= source_users, ErrorKind::kConfig,
                "target users must be a non-empty subset of the source users");
        require(task == TaskKind::kClassification || max_labels_per_user >= 1, ErrorKind::kConfig,
                "item-rec needs at least one label per user");
    }

    std::int32_t vocab_size() const {
        return ReservedIds::kFirstItem + static_cast<std::int32_t>(num_clusters * items_per_cluster);
    }
};

struct SyntheticData {
    SourceDataset source;
    TargetDataset target;
    std::vector<std::int32_t> user_cluster;   // per source user
    std::vector<std::int32_t> item_cluster;   // per vocabulary id, -1 for reserved ids
};

inline SyntheticData generate_synthetic(const SyntheticSpec& spec, std::uint64_t seed) {
    spec.validate();
    const auto C = spec.num_clusters, M = spec.items_per_cluster;
    const auto catalogue = C * M;
    Rng root = Rng(seed).split("synthetic");
    SyntheticData out;
    out.item_cluster.assign(static_cast<std::size_t>(spec.vocab_size()), -1);
    for (std::size_t i = 0; i < catalogue; ++i) out.item_cluster[ReservedIds::kFirstItem + i] = static_cast<std::int32_t>(i / M);

    auto draw_item = [&](std::size_t cluster, Rng& rng) {
        const std::size_t offset = rng.bernoulli(spec.noise) ? rng.below(catalogue) : cluster * M + rng.below(M);
        return ReservedIds::kFirstItem + static_cast<std::int32_t>(offset);
    };

    Rng users_rng = root.split("users");
    auto& src = out.source;
    src.length = spec.length;
    src.vocab_size = spec.vocab_size();
    for (std::size_t u = 0; u < spec.source_users; ++u) {
        Rng rng = users_rng.split(u);
        const auto cluster = rng.below(C);
        const auto recent = C > 1 ? (cluster + 1 + rng.below(C - 1)) % C : cluster;
        Sequence seq(spec.length);
        for (std::size_t t = 0; t < spec.length; ++t) {
            seq[t] = draw_item(t + spec.recent_items >= spec.length ? recent : cluster, rng);
        }
        src.users.push_back(static_cast<std::int64_t>(u));
        src.sequences.push_back(std::move(seq));
        out.user_cluster.push_back(static_cast<std::int32_t>(cluster));
    }
    src.reindex();

    std::vector<std::size_t> chosen(spec.source_users);
    std::iota(chosen.begin(), chosen.end(), 0);
    Rng pick = root.split("target");
    pick.shuffle(chosen);
    chosen.resize(spec.target_users);
    std::sort(chosen.begin(), chosen.end());

    auto& tgt = out.target;
    tgt.kind = spec.task;
    tgt.num_labels = spec.task == TaskKind::kClassification ? C : catalogue;
    Rng label_rng = root.split("labels");
    for (auto u : chosen) {
        Rng rng = label_rng.split(u);
        const auto cluster = static_cast<std::size_t>(out.user_cluster[u]);
        if (spec.task == TaskKind::kClassification) {
            auto label = static_cast<std::int32_t>(cluster);
            if (rng.bernoulli(spec.label_noise)) label = static_cast<std::int32_t>(rng.below(C));
            tgt.users.push_back(static_cast<std::int64_t>(u));
            tgt.labels.push_back(label);
            continue;
        }
        const auto g = 1 + rng.below(spec.max_labels_per_user);
        for (std::size_t j = 0; j < g; ++j) {
            tgt.users.push_back(static_cast<std::int64_t>(u));
            tgt.labels.push_back(static_cast<std::int32_t>(cluster * M + rng.below(M)));
        }
    }
    return out;
}

/// Predicts the most frequent item cluster in the sequence; ties go to the
/// smaller cluster id.
inline std::int32_t majority_cluster(const Sequence& seq, std::span<const std::int32_t> item_cluster, std::size_t num_clusters) {
    std::vector<std::size_t> votes(num_clusters, 0);
    for (auto id : seq) {
        if (id >= ReservedIds::kFirstItem) ++votes[static_cast<std::size_t>(item_cluster[static_cast<std::size_t>(id)])];
    }
    return static_cast<std::int32_t>(std::max_element(votes.begin(), votes.end()) - votes.begin());
}

/// Accuracy of the majority-vote oracle on the classification target.
inline double majority_vote_accuracy(const SyntheticData& data, std::size_t num_clusters) {
    std::size_t hits = 0;
    for (std::size_t i = 0; i < data.target.size(); ++i) {
        const auto& seq = data.source.sequences[data.source.index_of(data.target.users[i])];
        hits += majority_cluster(seq, data.item_cluster, num_clusters) == data.target.labels[i];
    }
    return static_cast<double>(hits) / static_cast<double>(data.target.size());
}

} // namespace peterrec
