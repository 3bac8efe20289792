// Copyright (c) 2026, the kmerge authors
// SPDX-License-Identifier: Apache-2.0

#include "kmerge/policy.hpp"

#include <cmath>
#include <mutex>

#include "kmerge/error.hpp"

namespace kmerge {

std::string_view to_string(Variant v) {
    return v == Variant::k_merge ? "k_merge" : "k_merge_pp";
}

Variant parse_variant(std::string_view name) {
    if (name == "k_merge" || name == "k-merge" || name == "kmerge") {
        return Variant::k_merge;
    }
    if (name == "k_merge_pp" || name == "k-merge-pp" || name == "k-merge++" || name == "kmerge++") {
        return Variant::k_merge_pp;
    }
    throw Error(ErrorCode::ConfigError, "unknown variant '" + std::string(name) + "'");
}

std::string_view to_string(IngestAction a) {
    return a == IngestAction::allocated_new_slot ? "allocated_new_slot" : "merged_into";
}

void PolicyConfig::validate() const {
    if (budget_k < 1) {
        throw Error(ErrorCode::ConfigError, "budget K must be >= 1, got " + std::to_string(budget_k));
    }
    if (variant == Variant::k_merge_pp && !threshold_s) {
        throw Error(ErrorCode::ConfigError, "k_merge_pp requires a similarity threshold");
    }
    if (variant == Variant::k_merge && threshold_s) {
        throw Error(ErrorCode::ConfigError, "k_merge takes no similarity threshold");
    }
    if (threshold_s && !std::isfinite(*threshold_s)) {
        throw Error(ErrorCode::ConfigError, "similarity threshold must be finite");
    }
    merge_operator.validate();
    rank_policy.validate();
    if (rank_policy.mode == RankMode::factor_average && merge_operator.kind != MergeKind::running_average &&
        merge_operator.kind != MergeKind::linear) {
        throw Error(ErrorCode::UnsupportedMode,
                    "factor_average storage only pairs with the running_average or linear operators");
    }
}

// ---------------------------------------------------------------------------

int MergeHistory::allocate(int task_index) {
    if (owner_.contains(task_index)) {
        throw Error(ErrorCode::DuplicateTask, "task " + std::to_string(task_index) + " already recorded");
    }
    const int key = next_slot_key_++;
    entries_[key] = {task_index};
    owner_[task_index] = key;
    return key;
}

void MergeHistory::append(int slot_key, int task_index) {
    auto it = entries_.find(slot_key);
    if (it == entries_.end()) {
        throw Error(ErrorCode::SlotVacant, "no history for slot " + std::to_string(slot_key));
    }
    if (owner_.contains(task_index)) {
        throw Error(ErrorCode::DuplicateTask, "task " + std::to_string(task_index) + " already recorded");
    }
    it->second.push_back(task_index);
    owner_[task_index] = slot_key;
}

int MergeHistory::route(int task_index) const {
    auto it = owner_.find(task_index);
    if (it == owner_.end()) {
        throw Error(ErrorCode::UnknownTask, "task " + std::to_string(task_index) + " was never ingested");
    }
    return it->second;
}

const std::vector<int>& MergeHistory::tasks(int slot_key) const {
    auto it = entries_.find(slot_key);
    if (it == entries_.end()) {
        throw Error(ErrorCode::SlotVacant, "no history for slot " + std::to_string(slot_key));
    }
    return it->second;
}

MergeHistory MergeHistory::from_entries(std::map<int, std::vector<int>> entries, int next_slot_key) {
    MergeHistory h;
    for (const auto& [key, tasks] : entries) {
        if (key < 1 || key >= next_slot_key) {
            throw Error(ErrorCode::RestoreError, "slot key " + std::to_string(key) + " outside [1, next_slot_key)");
        }
        if (tasks.empty()) {
            throw Error(ErrorCode::RestoreError, "slot " + std::to_string(key) + " has an empty task set");
        }
        for (int t : tasks) {
            if (!h.owner_.emplace(t, key).second) {
                throw Error(ErrorCode::RestoreError, "task " + std::to_string(t) + " appears in two slots");
            }
        }
    }
    h.entries_ = std::move(entries);
    h.next_slot_key_ = next_slot_key;
    return h;
}

// ---------------------------------------------------------------------------

const Slot& AdapterStore::at(int slot_key) const {
    auto it = slots.find(slot_key);
    if (it == slots.end()) {
        throw Error(ErrorCode::SlotVacant, "slot " + std::to_string(slot_key) + " is vacant");
    }
    return it->second;
}

std::vector<SlotCandidate> AdapterStore::candidates() const {
    std::vector<SlotCandidate> out;
    out.reserve(slots.size());
    for (const auto& [key, slot] : slots) {
        out.push_back({key, &slot.adapter, slot.squared_norms.empty() ? nullptr : &slot.squared_norms});
    }
    return out;
}

// ---------------------------------------------------------------------------

namespace {

std::string merged_label(const std::string& stored, const std::string& incoming) {
    return stored == incoming ? stored : std::string("mixed");
}

// ||stored adapter - running||_F / ||running||_F per layer, without densifying.
std::map<LayerKey, double> relative_residuals(const LoraAdapter& adapter, const MergedDelta& running) {
    std::map<LayerKey, double> out;
    const DeltaSet stored = to_delta_set(adapter);
    for (const auto& [key, exact] : running.layers) {
        DeltaMatrix diff = exact;
        diff.add_scaled(stored.at(key), -1.0);
        const double base = exact.squared_norm();
        out[key] = base > 0.0 ? std::sqrt(std::max(diff.squared_norm(), 0.0) / base) : 0.0;
    }
    return out;
}

} // namespace

ContinualMerger::ContinualMerger(PolicyConfig config) : config_(std::move(config)) {
    config_.validate();
    store_.budget_k = config_.budget_k;
}

IngestDecision ContinualMerger::ingest(const LoraAdapter& incoming) {
    std::unique_lock lock(*mutex_);
    const auto start = std::chrono::steady_clock::now();

    if (index_by_id_.contains(incoming.task_id)) {
        throw Error(ErrorCode::DuplicateTask, "task '" + incoming.task_id + "' was already ingested");
    }
    incoming.validate();
    if (!store_.slots.empty()) {
        require_compatible(store_.slots.begin()->second.adapter, incoming);
    }

    const int t = timestep_ + 1;
    const int occupied = store_.occupied();
    const bool full = occupied == config_.budget_k;
    const bool threshold_policy = config_.variant == Variant::k_merge_pp;

    std::optional<SlotMatch> match;
    if (occupied > 0 && (full || threshold_policy)) {
        const auto candidates = store_.candidates();
        match = most_similar(incoming, candidates);
    }
    const bool merge = full || (threshold_policy && match && match->similarity >= *config_.threshold_s);

    IngestDecision decision;
    decision.task_index = t;
    decision.task_id = incoming.task_id;
    if (match) {
        decision.similarity = match->similarity;
    }

    if (merge) {
        const int c = match->slot_key;
        Slot& slot = store_.slots.at(c);
        const int n = static_cast<int>(history_.tasks(c).size());

        MergeOperator step_op = config_.merge_operator;
        step_op.seed = derive_seed(config_.merge_operator.seed, static_cast<std::uint64_t>(t));
        MergedDelta running = apply_merge(step_op, slot.running.layers, n, to_delta_set(incoming));
        running.merge_count = n + 1;

        AdapterMetadata meta{"slot-" + std::to_string(c), merged_label(slot.adapter.problem_type, incoming.problem_type),
                             merged_label(slot.adapter.language, incoming.language), slot.adapter.scale_numerator};
        if (config_.rank_policy.mode == RankMode::svd_truncate) {
            RefactorResult result = refactor(running, config_.rank_policy, meta);
            slot.adapter = std::move(result.adapter);
            slot.residuals = std::move(result.residuals);
        } else {
            const bool average = config_.merge_operator.kind == MergeKind::running_average;
            const double w_stored = average ? static_cast<double>(n) / (n + 1.0) : config_.merge_operator.weight;
            slot.adapter = factor_average(slot.adapter, w_stored, incoming, 1.0 - w_stored, meta);
            slot.residuals = relative_residuals(slot.adapter, running);
        }
        slot.running = std::move(running);
        slot.squared_norms = layer_squared_norms(slot.adapter);
        history_.append(c, t);

        decision.action = IngestAction::merged_into;
        decision.slot_key = c;
    } else {
        const int key = history_.allocate(t);
        Slot slot;
        slot.adapter = incoming;
        slot.running = MergedDelta{to_delta_set(incoming), 1};
        slot.squared_norms = layer_squared_norms(slot.adapter);
        for (const auto& k : incoming.keys()) {
            slot.residuals[k] = 0.0;
        }
        store_.slots.emplace(key, std::move(slot));

        decision.action = IngestAction::allocated_new_slot;
        decision.slot_key = key;
    }

    timestep_ = t;
    index_by_id_[incoming.task_id] = t;
    id_by_index_[t] = incoming.task_id;
    decision.occupied_after = store_.occupied();
    decision.elapsed = std::chrono::duration_cast<std::chrono::nanoseconds>(std::chrono::steady_clock::now() - start);
    return decision;
}

int ContinualMerger::route(int task_index) const {
    std::shared_lock lock(*mutex_);
    return history_.route(task_index);
}

LoraAdapter ContinualMerger::load_for_inference(int slot_key) const {
    std::shared_lock lock(*mutex_);
    return store_.at(slot_key).adapter;
}

LoraAdapter ContinualMerger::load_for_task(int task_index) const {
    std::shared_lock lock(*mutex_);
    return store_.at(history_.route(task_index)).adapter;
}

int ContinualMerger::task_index_of(const std::string& task_id) const {
    std::shared_lock lock(*mutex_);
    auto it = index_by_id_.find(task_id);
    if (it == index_by_id_.end()) {
        throw Error(ErrorCode::UnknownTask, "task '" + task_id + "' was never ingested");
    }
    return it->second;
}

int ContinualMerger::timestep() const {
    std::shared_lock lock(*mutex_);
    return timestep_;
}

int ContinualMerger::occupied() const {
    std::shared_lock lock(*mutex_);
    return store_.occupied();
}

MergeHistory ContinualMerger::history() const {
    std::shared_lock lock(*mutex_);
    return history_;
}

AdapterStore ContinualMerger::store() const {
    std::shared_lock lock(*mutex_);
    return store_;
}

std::map<int, std::string> ContinualMerger::task_ids() const {
    std::shared_lock lock(*mutex_);
    return id_by_index_;
}

} // namespace kmerge
