#pragma once

#include <cstdint>
#include <span>
#include <string>
#include <string_view>
#include <unordered_map>
#include <vector>

#include "peterrec/error.hpp"
#include "peterrec/tensor.hpp"

namespace peterrec {

enum class Partition : std::uint8_t { kFrozen, kTunable };

inline std::string_view to_string(Partition p) { return p == Partition::kFrozen ? "frozen" : "tunable"; }

/// What a parameter is for; drives accounting and fine-tuning partitions.
enum class Role : std::uint8_t {
    kEmbedding,
    kConvWeight,
    kConvBias,
    kLayerNorm,
    kPretrainHead,
    kPatchWeight,
    kPatchBias,
    kTaskHead,
    kTclEmbedding,
};

inline std::string_view to_string(Role r) {
    switch (r) {
        case Role::kEmbedding: return "embedding";
        case Role::kConvWeight: return "conv_weight";
        case Role::kConvBias: return "conv_bias";
        case Role::kLayerNorm: return "layer_norm";
        case Role::kPretrainHead: return "pretrain_head";
        case Role::kPatchWeight: return "patch_weight";
        case Role::kPatchBias: return "patch_bias";
        case Role::kTaskHead: return "task_head";
        case Role::kTclEmbedding: return "tcl_embedding";
    }
    return "unknown";
}

struct NamedParameter {
    std::string name;
    Tensor tensor;
    Partition partition = Partition::kTunable;
    Role role = Role::kEmbedding;
};

/// Named learnable tensors in insertion order, split into frozen and tunable.
/// A tensor's requires_grad flag mirrors its partition so frozen tensors never
/// accumulate gradients in the first place.
class ParameterStore {
public:
    ParameterStore() = default;

    ParameterStore(const ParameterStore&) = delete;
    ParameterStore& operator=(const ParameterStore&) = delete;
    ParameterStore(ParameterStore&&) = default;
    ParameterStore& operator=(ParameterStore&&) = default;

    /// Deep copy with independent storage.
    ParameterStore clone() const {
        ParameterStore out;
        for (const auto& p : items_) {
            out.add(p.name, p.tensor.clone(), p.partition, p.role);
        }
        return out;
    }

    /// Returns a handle sharing storage with the stored parameter.
    Tensor add(std::string name, Tensor tensor, Partition partition, Role role) {
        require(!index_.contains(name), ErrorKind::kConfig, "duplicate parameter name '" + name + "'");
        tensor.set_requires_grad(partition == Partition::kTunable);
        index_.emplace(name, items_.size());
        items_.push_back(NamedParameter{std::move(name), std::move(tensor), partition, role});
        return items_.back().tensor;
    }

    void remove(std::string_view name) {
        auto it = index_.find(std::string(name));
        require(it != index_.end(), ErrorKind::kConfig, "unknown parameter '" + std::string(name) + "'");
        items_.erase(items_.begin() + static_cast<std::ptrdiff_t>(it->second));
        reindex();
    }

    bool contains(std::string_view name) const { return index_.contains(std::string(name)); }

    const NamedParameter& entry(std::string_view name) const {
        auto it = index_.find(std::string(name));
        require(it != index_.end(), ErrorKind::kConfig, "unknown parameter '" + std::string(name) + "'");
        return items_[it->second];
    }

    Tensor& get(std::string_view name) { return const_cast<NamedParameter&>(std::as_const(*this).entry(name)).tensor; }
    const Tensor& get(std::string_view name) const { return entry(name).tensor; }

    void set_partition(std::string_view name, Partition partition) {
        auto& p = const_cast<NamedParameter&>(std::as_const(*this).entry(name));
        p.partition = partition;
        p.tensor.set_requires_grad(partition == Partition::kTunable);
        if (partition == Partition::kFrozen) {
            p.tensor.drop_grad();
        }
    }

    void freeze_all() {
        for (auto& p : items_) set_partition(p.name, Partition::kFrozen);
    }

    std::span<NamedParameter> items() { return items_; }
    std::span<const NamedParameter> items() const { return items_; }
    std::size_t size() const { return items_.size(); }

    std::size_t numel(Partition partition) const {
        std::size_t total = 0;
        for (const auto& p : items_) {
            if (p.partition == partition) total += p.tensor.numel();
        }
        return total;
    }
    std::size_t numel() const { return numel(Partition::kFrozen) + numel(Partition::kTunable); }

    void zero_grad() {
        for (auto& p : items_) {
            if (p.tensor.has_grad()) p.tensor.zero_grad();
        }
    }

private:
    void reindex() {
        index_.clear();
        for (std::size_t i = 0; i < items_.size(); ++i) index_.emplace(items_[i].name, i);
    }

    std::vector<NamedParameter> items_;
    std::unordered_map<std::string, std::size_t> index_;
};

} // namespace peterrec
