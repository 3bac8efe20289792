// Copyright (c) 2026, the kmerge authors
// SPDX-License-Identifier: Apache-2.0
//
// Store persistence. Layout of a store directory:
//
//   manifest.json          config, history and slot index (written last)
//   slot_<key>.kmrg        served adapter per slot
//   running_cache.json     index into running_cache.bin
//   running_cache.bin      raw little-endian f64 tensors of the exact caches

#include <cstring>
#include <fstream>
#include <set>

#include <json.hpp>

#include "kmerge/adapter_io.hpp"
#include "kmerge/config_json.hpp"
#include "kmerge/error.hpp"
#include "kmerge/policy.hpp"

namespace kmerge {

namespace {

using nlohmann::json;

constexpr const char* kManifestName = "manifest.json";
constexpr const char* kCacheIndexName = "running_cache.json";
constexpr const char* kCacheDataName = "running_cache.bin";

std::string slot_file_name(int key) {
    return "slot_" + std::to_string(key) + ".kmrg";
}

std::vector<std::uint8_t> to_bytes(const std::string& text) {
    return {text.begin(), text.end()};
}

template <typename Matrix>
std::size_t append_f64(std::vector<double>& data, const Matrix& m) {
    const std::size_t offset = data.size();
    for (Eigen::Index i = 0; i < m.rows(); ++i) {
        for (Eigen::Index j = 0; j < m.cols(); ++j) {
            data.push_back(static_cast<double>(m(i, j)));
        }
    }
    return offset;
}

[[noreturn]] void restore_error(const std::string& what) {
    throw Error(ErrorCode::RestoreError, what);
}

const json& field(const json& obj, const std::string& name, const std::string& path) {
    if (!obj.is_object() || !obj.contains(name)) {
        restore_error("missing field '" + path + name + "'");
    }
    return obj.at(name);
}

template <typename T>
T get_field(const json& obj, const std::string& name, const std::string& path) {
    const json& v = field(obj, name, path);
    try {
        return v.get<T>();
    } catch (const json::exception&) {
        restore_error("field '" + path + name + "' has the wrong type");
    }
}

json read_json(const std::filesystem::path& path, const std::string& what) {
    std::ifstream in(path);
    if (!in) {
        restore_error(what + " not found at " + path.string());
    }
    try {
        return json::parse(in);
    } catch (const json::exception& e) {
        restore_error(what + " is not valid JSON: " + e.what());
    }
}

} // namespace

void ContinualMerger::persist(const std::filesystem::path& directory) const {
    std::shared_lock lock(*mutex_);
    std::filesystem::create_directories(directory);

    std::vector<double> data;
    json cache_slots = json::array();
    json manifest_slots = json::array();
    for (const auto& [key, slot] : store_.slots) {
        write_file_atomic(directory / slot_file_name(key), encode_adapter(slot.adapter));

        json layers = json::array();
        for (const auto& [lk, delta] : slot.running.layers) {
            json entry = {{"layer", lk.layer_index},
                          {"proj", std::string(to_string(lk.projection))},
                          {"rows", delta.rows()},
                          {"cols", delta.cols()},
                          {"dense", nullptr}};
            if (delta.has_dense()) {
                entry["dense"] = append_f64(data, delta.dense_part());
            }
            json terms = json::array();
            for (const auto& term : delta.terms()) {
                const std::size_t b = append_f64(data, term.b);
                const std::size_t a = append_f64(data, term.a);
                terms.push_back({{"weight", term.weight}, {"rank", term.a.rows()}, {"b", b}, {"a", a}});
            }
            entry["terms"] = std::move(terms);
            layers.push_back(std::move(entry));
        }
        cache_slots.push_back({{"slot_key", key}, {"merge_count", slot.running.merge_count}, {"layers", layers}});

        json residuals = json::object();
        for (const auto& [lk, r] : slot.residuals) {
            residuals[to_string(lk)] = r;
        }
        std::vector<std::string> ids;
        for (int t : history_.tasks(key)) {
            ids.push_back(id_by_index_.at(t));
        }
        manifest_slots.push_back({{"slot_key", key},
                                  {"file", slot_file_name(key)},
                                  {"tasks", history_.tasks(key)},
                                  {"task_ids", ids},
                                  {"merge_count", slot.running.merge_count},
                                  {"residuals", residuals}});
    }

    const auto* raw = reinterpret_cast<const std::uint8_t*>(data.data());
    write_file_atomic(directory / kCacheDataName, std::span(raw, data.size() * sizeof(double)));
    const json cache_index = {{"version", kManifestVersion},
                              {"data_file", kCacheDataName},
                              {"dtype", "f64le"},
                              {"slots", cache_slots}};
    write_file_atomic(directory / kCacheIndexName, to_bytes(cache_index.dump(1)));

    json manifest = policy_to_json(config_);
    manifest["version"] = kManifestVersion;
    manifest["slots"] = std::move(manifest_slots);
    manifest["running_cache_file"] = kCacheIndexName;
    manifest["next_slot_key"] = history_.next_slot_key();
    manifest["timestep"] = timestep_;
    write_file_atomic(directory / kManifestName, to_bytes(manifest.dump(2) + "\n"));
}

ContinualMerger ContinualMerger::restore(const std::filesystem::path& directory) {
    if (!std::filesystem::is_directory(directory)) {
        restore_error("store directory " + directory.string() + " does not exist");
    }
    const json manifest = read_json(directory / kManifestName, "manifest.json");
    if (get_field<int>(manifest, "version", "") != kManifestVersion) {
        restore_error("field 'version' holds an unsupported manifest version");
    }

    ContinualMerger merger;
    try {
        merger.config_ = policy_from_json(manifest);
        merger.config_.validate();
    } catch (const Error& e) {
        restore_error(std::string("invalid policy in manifest: ") + e.what());
    }
    merger.store_.budget_k = merger.config_.budget_k;
    merger.timestep_ = get_field<int>(manifest, "timestep", "");
    const int next_key = get_field<int>(manifest, "next_slot_key", "");

    const json& slots = field(manifest, "slots", "");
    if (!slots.is_array()) {
        restore_error("field 'slots' must be an array");
    }
    if (static_cast<int>(slots.size()) > merger.config_.budget_k) {
        restore_error("manifest lists more slots than the budget allows");
    }

    std::map<int, std::vector<int>> entries;
    std::set<std::string> listed_files;
    for (std::size_t i = 0; i < slots.size(); ++i) {
        const std::string path = "slots[" + std::to_string(i) + "].";
        const json& s = slots[i];
        const int key = get_field<int>(s, "slot_key", path);
        const auto file = get_field<std::string>(s, "file", path);
        const auto tasks = get_field<std::vector<int>>(s, "tasks", path);
        const auto ids = get_field<std::vector<std::string>>(s, "task_ids", path);
        const int merge_count = get_field<int>(s, "merge_count", path);
        if (ids.size() != tasks.size()) {
            restore_error("field '" + path + "task_ids' disagrees in length with '" + path + "tasks'");
        }
        if (merge_count != static_cast<int>(tasks.size())) {
            restore_error("field '" + path + "merge_count' disagrees with the task count");
        }
        const auto slot_path = directory / file;
        if (!std::filesystem::exists(slot_path)) {
            restore_error("adapter file for slot " + std::to_string(key) + " (" + file + ") is missing");
        }
        Slot slot;
        try {
            slot.adapter = read_adapter(slot_path);
        } catch (const Error& e) {
            restore_error("slot " + std::to_string(key) + ": " + e.what());
        }
        slot.squared_norms = layer_squared_norms(slot.adapter);
        if (s.contains("residuals")) {
            for (const auto& [lk, _] : slot.adapter.layers) {
                const std::string name = to_string(lk);
                if (s["residuals"].contains(name)) {
                    slot.residuals[lk] = s["residuals"][name].get<double>();
                }
            }
        }
        slot.running.merge_count = merge_count;
        if (!merger.store_.slots.emplace(key, std::move(slot)).second) {
            restore_error("field '" + path + "slot_key' repeats slot " + std::to_string(key));
        }
        entries[key] = tasks;
        listed_files.insert(file);
        for (std::size_t j = 0; j < tasks.size(); ++j) {
            if (!merger.index_by_id_.emplace(ids[j], tasks[j]).second) {
                restore_error("field '" + path + "task_ids' repeats task '" + ids[j] + "'");
            }
            merger.id_by_index_[tasks[j]] = ids[j];
        }
    }

    for (const auto& entry : std::filesystem::directory_iterator(directory)) {
        const std::string name = entry.path().filename().string();
        if (name.starts_with("slot_") && name.ends_with(".kmrg") && !listed_files.contains(name)) {
            restore_error("adapter file " + name + " is not listed in the manifest");
        }
    }

    try {
        merger.history_ = MergeHistory::from_entries(std::move(entries), next_key);
    } catch (const Error& e) {
        restore_error(std::string("field 'slots': ") + e.what());
    }
    if (merger.id_by_index_.size() != static_cast<std::size_t>(merger.timestep_) ||
        (!merger.id_by_index_.empty() &&
         (merger.id_by_index_.begin()->first != 1 || merger.id_by_index_.rbegin()->first != merger.timestep_))) {
        restore_error("field 'timestep' disagrees with the recorded tasks");
    }

    // Running caches.
    const auto index_name = get_field<std::string>(manifest, "running_cache_file", "");
    const json index = read_json(directory / index_name, index_name);
    const auto data_name = get_field<std::string>(index, "data_file", index_name + ":");
    std::vector<std::uint8_t> raw;
    try {
        raw = read_file_bytes(directory / data_name);
    } catch (const Error&) {
        restore_error("running cache data " + data_name + " is missing");
    }
    if (raw.size() % sizeof(double) != 0) {
        restore_error("running cache data has a partial value");
    }
    std::vector<double> data(raw.size() / sizeof(double));
    std::memcpy(data.data(), raw.data(), raw.size());

    auto read_block = [&](std::size_t offset, Eigen::Index rows, Eigen::Index cols, const std::string& what) {
        const auto count = static_cast<std::size_t>(rows * cols);
        if (offset + count > data.size()) {
            restore_error("running cache " + what + " extends past the end of " + data_name);
        }
        MatrixD m(rows, cols);
        std::memcpy(m.data(), data.data() + offset, count * sizeof(double));
        return m;
    };

    const json& cache_slots = field(index, "slots", index_name + ":");
    std::set<int> cached;
    for (std::size_t i = 0; i < cache_slots.size(); ++i) {
        const std::string path = index_name + ":slots[" + std::to_string(i) + "].";
        const json& cs = cache_slots[i];
        const int key = get_field<int>(cs, "slot_key", path);
        auto it = merger.store_.slots.find(key);
        if (it == merger.store_.slots.end()) {
            restore_error("field '" + path + "slot_key' names slot " + std::to_string(key) + " absent from manifest");
        }
        cached.insert(key);
        Slot& slot = it->second;
        const json& layers = field(cs, "layers", path);
        for (std::size_t l = 0; l < layers.size(); ++l) {
            const std::string lpath = path + "layers[" + std::to_string(l) + "].";
            const json& le = layers[l];
            LayerKey lk;
            lk.layer_index = get_field<int>(le, "layer", lpath);
            try {
                lk.projection = parse_projection(get_field<std::string>(le, "proj", lpath));
            } catch (const Error&) {
                restore_error("field '" + lpath + "proj' is not a projection name");
            }
            const auto rows = get_field<Eigen::Index>(le, "rows", lpath);
            const auto cols = get_field<Eigen::Index>(le, "cols", lpath);
            DeltaMatrix delta(rows, cols);
            const json& dense = field(le, "dense", lpath);
            if (!dense.is_null()) {
                delta.set_dense(read_block(dense.get<std::size_t>(), rows, cols, lpath + "dense"));
            }
            const json& terms = field(le, "terms", lpath);
            for (std::size_t k = 0; k < terms.size(); ++k) {
                const std::string tpath = lpath + "terms[" + std::to_string(k) + "].";
                const auto r = get_field<Eigen::Index>(terms[k], "rank", tpath);
                LowRankTerm term;
                term.weight = get_field<double>(terms[k], "weight", tpath);
                term.b = read_block(get_field<std::size_t>(terms[k], "b", tpath), rows, r, tpath + "b").cast<float>();
                term.a = read_block(get_field<std::size_t>(terms[k], "a", tpath), r, cols, tpath + "a").cast<float>();
                delta.push_term(std::move(term));
            }
            slot.running.layers.emplace(lk, std::move(delta));
        }
        bool keys_match = slot.running.layers.size() == slot.adapter.layers.size();
        auto b = slot.adapter.layers.begin();
        for (auto a = slot.running.layers.begin(); keys_match && a != slot.running.layers.end(); ++a, ++b) {
            keys_match = a->first == b->first;
        }
        if (!keys_match) {
            restore_error("running cache for slot " + std::to_string(key) + " covers a different layer set");
        }
    }
    for (const auto& [key, _] : merger.store_.slots) {
        if (!cached.contains(key)) {
            restore_error("running cache has no entry for slot " + std::to_string(key));
        }
    }
    return merger;
}

} // namespace kmerge
