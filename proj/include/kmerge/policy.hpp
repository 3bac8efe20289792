// Copyright (c) 2026, the kmerge authors
// SPDX-License-Identifier: Apache-2.0
//
// The online continual merger. Adapters arrive one per timestep t = 1, 2, ...
// and either take a fresh storage slot or are merged into the most similar
// stored adapter, subject to a budget of K slots:
//
//   K-Merge    merge iff all K slots are occupied.
//   K-Merge++  merge iff all K slots are occupied, or the store is non-empty
//              and the best similarity reaches the threshold s.
//
// The merge history maps each slot key to the timesteps it absorbed; its
// inverse routes a task to the slot that serves it at inference time.

#pragma once

#include <chrono>
#include <filesystem>
#include <map>
#include <memory>
#include <optional>
#include <shared_mutex>
#include <string>
#include <vector>

#include "kmerge/merge_ops.hpp"
#include "kmerge/refactor.hpp"
#include "kmerge/similarity.hpp"

namespace kmerge {

/// Version of the persisted store layout (manifest.json and its companions).
inline constexpr int kManifestVersion = 1;

enum class Variant { k_merge, k_merge_pp };

std::string_view to_string(Variant v);
Variant parse_variant(std::string_view name);

struct PolicyConfig {
    int budget_k = 1;
    Variant variant = Variant::k_merge;
    std::optional<double> threshold_s;  // required iff variant == k_merge_pp
    MergeOperator merge_operator;
    RankPolicy rank_policy;

    /// Throws ConfigError.
    void validate() const;
};

enum class IngestAction { allocated_new_slot, merged_into };

std::string_view to_string(IngestAction a);

struct IngestDecision {
    int task_index = 0;
    std::string task_id;
    IngestAction action = IngestAction::allocated_new_slot;
    int slot_key = 0;
    /// Best similarity against the store, when it was computed.
    std::optional<double> similarity;
    int occupied_after = 0;
    std::chrono::nanoseconds elapsed{0};
};

class MergeHistory {
public:
    /// Opens a new slot holding {task_index}; returns its key.
    int allocate(int task_index);
    void append(int slot_key, int task_index);

    /// Slot whose task set contains task_index. Throws UnknownTask.
    int route(int task_index) const;
    bool contains(int task_index) const { return owner_.contains(task_index); }

    const std::vector<int>& tasks(int slot_key) const;
    const std::map<int, std::vector<int>>& entries() const { return entries_; }
    int next_slot_key() const { return next_slot_key_; }
    std::size_t slot_count() const { return entries_.size(); }

    /// Rebuilds a history, checking that task sets are pairwise disjoint.
    static MergeHistory from_entries(std::map<int, std::vector<int>> entries, int next_slot_key);

    bool operator==(const MergeHistory& other) const {
        return entries_ == other.entries_ && next_slot_key_ == other.next_slot_key_;
    }

private:
    std::map<int, std::vector<int>> entries_;
    std::map<int, int> owner_;
    int next_slot_key_ = 1;
};

struct Slot {
    /// What the device serves: rank-controlled, 32-bit.
    LoraAdapter adapter;
    /// Exact 64-bit merge result the next merge builds on.
    MergedDelta running;
    std::map<LayerKey, double> residuals;
    /// layer_squared_norms(adapter), refreshed whenever adapter changes.
    std::vector<double> squared_norms;
};

struct AdapterStore {
    int budget_k = 1;
    std::map<int, Slot> slots;

    int occupied() const { return static_cast<int>(slots.size()); }
    /// Throws SlotVacant.
    const Slot& at(int slot_key) const;
    std::vector<SlotCandidate> candidates() const;
};

/// Thread-safe: ingest is exclusive; route and load may run concurrently
/// with each other and observe either the pre- or post-ingest state.
class ContinualMerger {
public:
    explicit ContinualMerger(PolicyConfig config);

    ContinualMerger(ContinualMerger&&) noexcept = default;
    ContinualMerger& operator=(ContinualMerger&&) noexcept = default;

    /// Throws DuplicateTask, IncompatibleAdapters, ShapeError.
    IngestDecision ingest(const LoraAdapter& incoming);

    int route(int task_index) const;
    /// Throws SlotVacant.
    LoraAdapter load_for_inference(int slot_key) const;
    LoraAdapter load_for_task(int task_index) const;

    /// Timestep assigned to a task id at ingest. Throws UnknownTask.
    int task_index_of(const std::string& task_id) const;

    const PolicyConfig& config() const { return config_; }
    int timestep() const;
    int occupied() const;
    MergeHistory history() const;
    /// Copy of the full store, for inspection and tests.
    AdapterStore store() const;
    std::map<int, std::string> task_ids() const;

    /// Writes slot_<key>.kmrg files, the 64-bit running caches and
    /// manifest.json (last, via rename).
    void persist(const std::filesystem::path& directory) const;
    /// Throws RestoreError naming the failing field or slot.
    static ContinualMerger restore(const std::filesystem::path& directory);

private:
    ContinualMerger() = default;

    std::unique_ptr<std::shared_mutex> mutex_ = std::make_unique<std::shared_mutex>();
    PolicyConfig config_;
    AdapterStore store_;
    MergeHistory history_;
    int timestep_ = 0;
    std::map<std::string, int> index_by_id_;
    std::map<int, std::string> id_by_index_;
};

} // namespace kmerge
