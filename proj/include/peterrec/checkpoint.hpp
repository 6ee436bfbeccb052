#pragma once

#include <bit>
#include <cstdint>
#include <cstdio>
#include <cstring>
#include <filesystem>
#include <fstream>
#include <istream>
#include <ostream>
#include <sstream>
#include <string>
#include <vector>

#include "peterrec/error.hpp"
#include "peterrec/model.hpp"
#include "peterrec/params.hpp"
#include "peterrec/random.hpp"

namespace peterrec {

inline constexpr std::string_view kCheckpointMagic = "PETERREC-CHECKPOINT";
inline constexpr int kCheckpointVersion = 1;

/// FNV-1a 64 over raw bytes.
inline std::uint64_t fnv1a_bytes(const void* data, std::size_t size, std::uint64_t h = 0xcbf29ce484222325ULL) {
    const auto* p = static_cast<const unsigned char*>(data);
    for (std::size_t i = 0; i < size; ++i) {
        h ^= p[i];
        h *= 0x100000001b3ULL;
    }
    return h;
}

inline std::string hex64(std::uint64_t v) {
    char buf[17];
    std::snprintf(buf, sizeof buf, "%016llx", static_cast<unsigned long long>(v));
    return buf;
}

/// Little-endian IEEE-754 bytes of a float span.
inline std::string le_bytes(std::span<const float> values) {
    std::string out(values.size() * 4, '\0');
    for (std::size_t i = 0; i < values.size(); ++i) {
        const auto bits = std::bit_cast<std::uint32_t>(values[i]);
        for (int b = 0; b < 4; ++b) out[i * 4 + b] = static_cast<char>((bits >> (8 * b)) & 0xff);
    }
    return out;
}

inline std::uint64_t tensor_digest(const Tensor& t) {
    const auto bytes = le_bytes(t.data());
    return fnv1a_bytes(bytes.data(), bytes.size());
}

/// Digest over (name, bytes) of every parameter in `partition`, in store order.
inline std::uint64_t partition_digest(const ParameterStore& store, Partition partition) {
    std::uint64_t h = 0xcbf29ce484222325ULL;
    for (const auto& p : store.items()) {
        if (p.partition != partition) continue;
        h = fnv1a_bytes(p.name.data(), p.name.size(), h);
        const auto bytes = le_bytes(p.tensor.data());
        h = fnv1a_bytes(bytes.data(), bytes.size(), h);
    }
    return h;
}

/// Digest of the named parameters of `store`, in the order given.
inline std::uint64_t named_digest(const ParameterStore& store, std::span<const std::string> names) {
    std::uint64_t h = 0xcbf29ce484222325ULL;
    for (const auto& name : names) {
        h = fnv1a_bytes(name.data(), name.size(), h);
        const auto bytes = le_bytes(store.get(name).data());
        h = fnv1a_bytes(bytes.data(), bytes.size(), h);
    }
    return h;
}

// ------------------------------------------------------------ config as text

inline std::string format_double(double v) {
    char buf[32];
    std::snprintf(buf, sizeof buf, "%.17g", v);
    return buf;
}

inline std::string join_sizes(std::span<const std::size_t> values, char sep = ',') {
    std::string out;
    for (std::size_t i = 0; i < values.size(); ++i) out += (i ? std::string(1, sep) : "") + std::to_string(values[i]);
    return out;
}

inline std::vector<std::pair<std::string, std::string>> model_config_fields(const ModelConfig& cfg) {
    const auto& bb = cfg.backbone;
    return {
        {"vocab_size", std::to_string(bb.vocab_size)},
        {"embed_dim", std::to_string(bb.embed_dim)},
        {"kernel_size", std::to_string(bb.kernel_size)},
        {"dilations", join_sizes(bb.dilations)},
        {"causal", bb.causal ? "1" : "0"},
        {"max_len", std::to_string(bb.max_len)},
        {"order", bb.order == SublayerOrder::kConvNormAct ? "conv-norm-act" : "conv-act-norm"},
        {"dropout", format_double(bb.dropout)},
        {"layer_norm_eps", format_double(bb.layer_norm_eps)},
        {"pretrain_head", cfg.pretrain_head ? "1" : "0"},
        {"insertion", std::string(to_string(cfg.insertion))},
        {"bottleneck", std::to_string(cfg.bottleneck)},
        {"head", std::string(to_string(cfg.head))},
        {"num_labels", std::to_string(cfg.num_labels)},
    };
}

namespace detail {

inline std::size_t to_size(const std::string& text, const std::string& key) {
    std::size_t pos = 0;
    unsigned long long v = 0;
    try {
        v = std::stoull(text, &pos);
    } catch (const std::exception&) {
        pos = std::string::npos;
    }
    require(pos == text.size() && !text.empty() && text[0] != '-', ErrorKind::kParse,
            "checkpoint field '" + key + "': expected an unsigned integer, got '" + text + "'");
    return static_cast<std::size_t>(v);
}

inline double to_double(const std::string& text, const std::string& key) {
    std::size_t pos = 0;
    double v = 0;
    try {
        v = std::stod(text, &pos);
    } catch (const std::exception&) {
        pos = std::string::npos;
    }
    require(pos == text.size(), ErrorKind::kParse, "checkpoint field '" + key + "': expected a number, got '" + text + "'");
    return v;
}

inline std::vector<std::size_t> to_sizes(const std::string& text, char sep, const std::string& key) {
    std::vector<std::size_t> out;
    if (text.empty()) return out;
    std::stringstream in(text);
    std::string item;
    while (std::getline(in, item, sep)) out.push_back(to_size(item, key));
    return out;
}

inline Role parse_role(const std::string& text) {
    for (auto r : {Role::kEmbedding, Role::kConvWeight, Role::kConvBias, Role::kLayerNorm, Role::kPretrainHead,
                   Role::kPatchWeight, Role::kPatchBias, Role::kTaskHead, Role::kTclEmbedding}) {
        if (to_string(r) == text) return r;
    }
    fail(ErrorKind::kParse, "checkpoint: unknown parameter role '" + text + "'");
}

} // namespace detail

inline ModelConfig model_config_from_fields(const std::vector<std::pair<std::string, std::string>>& fields) {
    ModelConfig cfg;
    auto& bb = cfg.backbone;
    std::size_t seen = 0;
    for (const auto& [key, value] : fields) {
        ++seen;
        if (key == "vocab_size") bb.vocab_size = static_cast<std::int32_t>(detail::to_size(value, key));
        else if (key == "embed_dim") bb.embed_dim = detail::to_size(value, key);
        else if (key == "kernel_size") bb.kernel_size = detail::to_size(value, key);
        else if (key == "dilations") bb.dilations = detail::to_sizes(value, ',', key);
        else if (key == "causal") bb.causal = detail::to_size(value, key) != 0;
        else if (key == "max_len") bb.max_len = detail::to_size(value, key);
        else if (key == "order") {
            require(value == "conv-norm-act" || value == "conv-act-norm", ErrorKind::kParse, "checkpoint: unknown order '" + value + "'");
            bb.order = value == "conv-norm-act" ? SublayerOrder::kConvNormAct : SublayerOrder::kConvActNorm;
        } else if (key == "dropout") bb.dropout = detail::to_double(value, key);
        else if (key == "layer_norm_eps") bb.layer_norm_eps = detail::to_double(value, key);
        else if (key == "pretrain_head") cfg.pretrain_head = detail::to_size(value, key) != 0;
        else if (key == "insertion") cfg.insertion = parse_insertion_mode(value);
        else if (key == "bottleneck") cfg.bottleneck = detail::to_size(value, key);
        else if (key == "head") cfg.head = parse_head_mode(value);
        else if (key == "num_labels") cfg.num_labels = detail::to_size(value, key);
        else fail(ErrorKind::kParse, "checkpoint: unknown config key '" + key + "'");
    }
    require(seen == model_config_fields(cfg).size(), ErrorKind::kParse, "checkpoint: incomplete model config");
    cfg.validate();
    return cfg;
}

// ---------------------------------------------------------------- checkpoint

/// Everything needed to resume: model config and parameters with their
/// partition tags, plus the generator state and step counter of the run.
struct Checkpoint {
    ModelConfig config;
    ParameterStore params;
    Rng::State rng{};
    std::uint64_t step = 0;

    SequenceModel model() const { return SequenceModel(config, params.clone()); }
};

/// Text header (one record per line) followed by the concatenated
/// little-endian float32 payload of every tensor in declared order.
inline void write_checkpoint(std::ostream& out, const ModelConfig& config, const ParameterStore& params, Rng::State rng,
                             std::uint64_t step) {
    out << kCheckpointMagic << ' ' << kCheckpointVersion << '\n';
    for (const auto& [k, v] : model_config_fields(config)) out << "config " << k << ' ' << v << '\n';
    out << "rng " << rng.key << ' ' << rng.counter << '\n';
    out << "step " << step << '\n';
    out << "tensors " << params.items().size() << '\n';
    for (const auto& p : params.items()) {
        out << "tensor " << p.name << " f32 " << join_sizes(p.tensor.shape(), 'x') << ' ' << to_string(p.partition) << ' '
            << to_string(p.role) << ' ' << hex64(tensor_digest(p.tensor)) << '\n';
    }
    out << "payload\n";
    for (const auto& p : params.items()) out << le_bytes(p.tensor.data());
    require(out.good(), ErrorKind::kIo, "checkpoint write failed");
}

inline void write_checkpoint(std::ostream& out, const SequenceModel& model, Rng::State rng = {}, std::uint64_t step = 0) {
    write_checkpoint(out, model.config(), model.params(), rng, step);
}

inline void save_checkpoint(const std::filesystem::path& path, const SequenceModel& model, Rng::State rng = {},
                            std::uint64_t step = 0) {
    std::ofstream out(path, std::ios::binary | std::ios::trunc);
    require(out.good(), ErrorKind::kIo, "cannot write checkpoint '" + path.string() + "'");
    write_checkpoint(out, model, rng, step);
}

/// Parses and verifies a checkpoint; any digest mismatch is an integrity error.
inline Checkpoint read_checkpoint(std::istream& in) {
    std::string line;
    auto next = [&](const char* what) {
        require(static_cast<bool>(std::getline(in, line)), ErrorKind::kParse, std::string("checkpoint truncated before ") + what);
        return std::istringstream(line);
    };
    {
        auto s = next("magic");
        std::string magic;
        int version = 0;
        s >> magic >> version;
        require(magic == kCheckpointMagic, ErrorKind::kParse, "not a checkpoint file");
        require(version == kCheckpointVersion, ErrorKind::kParse, "unsupported checkpoint version " + std::to_string(version));
    }
    std::vector<std::pair<std::string, std::string>> fields;
    Checkpoint ck;
    while (true) {
        auto s = next("rng state");
        std::string tag;
        s >> tag;
        if (tag == "config") {
            std::string key, value;
            s >> key;
            std::getline(s >> std::ws, value);
            fields.emplace_back(key, value);
            continue;
        }
        require(tag == "rng", ErrorKind::kParse, "checkpoint: unexpected record '" + tag + "'");
        s >> ck.rng.key >> ck.rng.counter;
        require(!s.fail(), ErrorKind::kParse, "checkpoint: malformed rng record");
        break;
    }
    ck.config = model_config_from_fields(fields);
    {
        auto s = next("step");
        std::string tag;
        s >> tag >> ck.step;
        require(tag == "step" && !s.fail(), ErrorKind::kParse, "checkpoint: malformed step record");
    }
    std::size_t count = 0;
    {
        auto s = next("tensor count");
        std::string tag;
        s >> tag >> count;
        require(tag == "tensors" && !s.fail(), ErrorKind::kParse, "checkpoint: malformed tensor count");
    }
    struct Header {
        std::string name;
        Shape shape;
        Partition partition;
        Role role;
        std::string digest;
    };
    std::vector<Header> headers;
    for (std::size_t i = 0; i < count; ++i) {
        auto s = next("tensor header");
        std::string tag, name, dtype, shape, partition, role, digest;
        s >> tag >> name >> dtype >> shape >> partition >> role >> digest;
        require(tag == "tensor" && !s.fail(), ErrorKind::kParse, "checkpoint: malformed tensor header '" + line + "'");
        require(dtype == "f32", ErrorKind::kParse, "checkpoint: unsupported dtype '" + dtype + "'");
        require(partition == "frozen" || partition == "tunable", ErrorKind::kParse, "checkpoint: bad partition '" + partition + "'");
        headers.push_back({name, detail::to_sizes(shape, 'x', name),
                           partition == "frozen" ? Partition::kFrozen : Partition::kTunable, detail::parse_role(role), digest});
    }
    next("payload");
    require(line == "payload", ErrorKind::kParse, "checkpoint: missing payload marker");
    for (const auto& h : headers) {
        const std::size_t n = shape_numel(h.shape);
        std::string bytes(n * 4, '\0');
        in.read(bytes.data(), static_cast<std::streamsize>(bytes.size()));
        require(static_cast<std::size_t>(in.gcount()) == bytes.size(), ErrorKind::kParse,
                "checkpoint payload truncated in '" + h.name + "'");
        require(hex64(fnv1a_bytes(bytes.data(), bytes.size())) == h.digest, ErrorKind::kIntegrity,
                "checkpoint digest mismatch for '" + h.name + "'");
        std::vector<float> values(n);
        for (std::size_t i = 0; i < n; ++i) {
            std::uint32_t bits = 0;
            for (int b = 0; b < 4; ++b) bits |= std::uint32_t(static_cast<unsigned char>(bytes[i * 4 + b])) << (8 * b);
            values[i] = std::bit_cast<float>(bits);
        }
        ck.params.add(h.name, Tensor(h.shape, std::move(values)), h.partition, h.role);
    }
    require(in.peek() == std::char_traits<char>::eof(), ErrorKind::kParse, "checkpoint has trailing bytes");
    SequenceModel validate(ck.config, ck.params.clone());  // names and shapes must match the layout
    return ck;
}

inline Checkpoint load_checkpoint(const std::filesystem::path& path) {
    std::ifstream in(path, std::ios::binary);
    require(in.good(), ErrorKind::kIo, "cannot open checkpoint '" + path.string() + "'");
    return read_checkpoint(in);
}

} // namespace peterrec
