// Copyright (c) 2026, the kmerge authors
// SPDX-License-Identifier: Apache-2.0

#include "kmerge/synth.hpp"

#include <algorithm>
#include <cmath>
#include <cstdio>
#include <fstream>
#include <numeric>
#include <random>

#include "kmerge/adapter_io.hpp"
#include "kmerge/error.hpp"
#include "kmerge/merge_ops.hpp"

namespace kmerge {

void GeneratorConfig::validate() const {
    auto fail = [](const std::string& what) { throw Error(ErrorCode::ConfigError, what); };
    if (alpha_types < 1 || beta_langs < 1) {
        fail("alpha_types and beta_langs must be >= 1");
    }
    if (rank < 3) {
        fail("rank " + std::to_string(rank) + " cannot hold separate type, language and noise blocks (need >= 3)");
    }
    if (num_layers < 1) {
        fail("num_layers must be >= 1");
    }
    for (const auto& p : projections) {
        if (p.d_in < 1 || p.d_out < 1) {
            fail("projection widths must be >= 1");
        }
        if (rank > std::min(p.d_in, p.d_out)) {
            fail("rank " + std::to_string(rank) + " exceeds a projection width");
        }
    }
    if (!(scale_numerator > 0.0)) {
        fail("scale_numerator must be positive");
    }
    if (!(type_strength > 0.0) || lang_strength < 0.0 || noise_strength < 0.0) {
        fail("strengths must be nonnegative with a positive type strength");
    }
}

GeneratorConfig GeneratorConfig::full_scale() {
    GeneratorConfig c;
    c.rank = 32;
    c.scale_numerator = 128.0;
    c.num_layers = 16;
    c.projections.fill({2048, 2048});
    return c;
}

nlohmann::json generator_to_json(const GeneratorConfig& c) {
    nlohmann::json proj = nlohmann::json::array();
    for (std::size_t i = 0; i < c.projections.size(); ++i) {
        proj.push_back({{"proj", std::string(to_string(kProjections[i]))},
                        {"d_in", c.projections[i].d_in},
                        {"d_out", c.projections[i].d_out}});
    }
    return {{"alpha_types", c.alpha_types},       {"beta_langs", c.beta_langs},
            {"rank", c.rank},                     {"scale_numerator", c.scale_numerator},
            {"num_layers", c.num_layers},         {"projections", proj},
            {"type_strength", c.type_strength},   {"lang_strength", c.lang_strength},
            {"noise_strength", c.noise_strength}, {"seed", c.seed}};
}

GeneratorConfig generator_from_json(const nlohmann::json& j) {
    GeneratorConfig c;
    try {
        c.alpha_types = j.value("alpha_types", c.alpha_types);
        c.beta_langs = j.value("beta_langs", c.beta_langs);
        c.rank = j.value("rank", c.rank);
        c.scale_numerator = j.value("scale_numerator", c.scale_numerator);
        c.num_layers = j.value("num_layers", c.num_layers);
        c.type_strength = j.value("type_strength", c.type_strength);
        c.lang_strength = j.value("lang_strength", c.lang_strength);
        c.noise_strength = j.value("noise_strength", c.noise_strength);
        c.seed = j.value("seed", c.seed);
        if (j.contains("projections")) {
            for (const auto& p : j.at("projections")) {
                const auto idx = static_cast<std::size_t>(parse_projection(p.at("proj").get<std::string>()));
                c.projections[idx] = {p.at("d_in").get<int>(), p.at("d_out").get<int>()};
            }
        }
    } catch (const nlohmann::json::exception& e) {
        throw Error(ErrorCode::ConfigError, std::string("bad generator config: ") + e.what());
    }
    return c;
}

namespace {

// One unit-norm low-rank component per layer key: (B, A) such that
// scaling * B * A has Frobenius norm 1.
using Component = std::map<LayerKey, FactorPair>;

Component draw_component(const GeneratorConfig& config, int block_rank, std::uint64_t seed) {
    std::mt19937_64 rng(seed);
    std::normal_distribution<double> normal(0.0, 1.0);
    const double scaling = config.scale_numerator / config.rank;
    Component out;
    for (int layer = 0; layer < config.num_layers; ++layer) {
        for (Projection p : kProjections) {
            const auto& shape = config.projections[static_cast<std::size_t>(p)];
            Eigen::MatrixXd b(shape.d_out, block_rank);
            Eigen::MatrixXd a(block_rank, shape.d_in);
            for (Eigen::Index i = 0; i < b.size(); ++i) {
                b.data()[i] = normal(rng);
            }
            for (Eigen::Index i = 0; i < a.size(); ++i) {
                a.data()[i] = normal(rng);
            }
            const Eigen::MatrixXd bb = b.transpose() * b;
            const Eigen::MatrixXd aa = a * a.transpose();
            const double norm = scaling * std::sqrt(bb.cwiseProduct(aa).sum());
            const double factor = 1.0 / std::sqrt(norm);
            out.emplace(LayerKey{layer, p}, FactorPair{(a * factor).cast<float>(), (b * factor).cast<float>()});
        }
    }
    return out;
}

struct RankBlocks {
    int type = 0;
    int lang = 0;
    int noise = 0;
};

RankBlocks split_rank(int rank) {
    RankBlocks blocks;
    blocks.lang = std::max(1, rank / 4);
    blocks.noise = std::max(1, rank / 4);
    blocks.type = rank - blocks.lang - blocks.noise;
    return blocks;
}

LoraAdapter assemble(const GeneratorConfig& config, const RankBlocks& blocks, const Component& type,
                     const Component& lang, const Component& noise) {
    LoraAdapter adapter;
    adapter.rank = config.rank;
    adapter.scale_numerator = config.scale_numerator;
    for (const auto& [key, tp] : type) {
        const FactorPair& lp = lang.at(key);
        const FactorPair& np = noise.at(key);
        FactorPair pair;
        pair.a.resize(config.rank, tp.d_in());
        pair.b.resize(tp.d_out(), config.rank);
        pair.a.topRows(blocks.type) = tp.a;
        pair.a.middleRows(blocks.type, blocks.lang) = lp.a;
        pair.a.bottomRows(blocks.noise) = np.a;
        pair.b.leftCols(blocks.type) = tp.b * static_cast<float>(config.type_strength);
        pair.b.middleCols(blocks.type, blocks.lang) = lp.b * static_cast<float>(config.lang_strength);
        pair.b.rightCols(blocks.noise) = np.b * static_cast<float>(config.noise_strength);
        adapter.layers.emplace(key, std::move(pair));
    }
    return adapter;
}

std::string label(const char* prefix, int i) {
    char buf[48];
    std::snprintf(buf, sizeof(buf), "%s_%02d", prefix, i);
    return buf;
}

// Stream tags keep every component's draws independent of grid size.
constexpr std::uint64_t kTypeStream = 1ULL << 40;
constexpr std::uint64_t kLangStream = 2ULL << 40;
constexpr std::uint64_t kNoiseStream = 3ULL << 40;

struct GridTask {
    int type = 0;
    int lang = 0;
};

Suite build_suite(const GeneratorConfig& config, std::uint64_t seed, const std::vector<GridTask>& grid,
                  const char* type_prefix, const char* lang_prefix) {
    config.validate();
    const RankBlocks blocks = split_rank(config.rank);
    std::map<int, Component> types;
    std::map<int, Component> langs;
    Suite suite;
    suite.config = config;
    for (const auto& g : grid) {
        if (!types.contains(g.type)) {
            types[g.type] = draw_component(config, blocks.type, derive_seed(seed, kTypeStream + g.type));
        }
        if (!langs.contains(g.lang)) {
            langs[g.lang] = draw_component(config, blocks.lang, derive_seed(seed, kLangStream + g.lang));
        }
    }
    for (const auto& g : grid) {
        const int i = static_cast<int>(suite.adapters.size());
        const Component noise = draw_component(config, blocks.noise, derive_seed(seed, kNoiseStream + i));
        LoraAdapter adapter = assemble(config, blocks, types.at(g.type), langs.at(g.lang), noise);
        TaskSpec task{i, "", label(type_prefix, g.type), label(lang_prefix, g.lang)};
        task.task_id = task.problem_type + "-" + task.language;
        adapter.task_id = task.task_id;
        adapter.problem_type = task.problem_type;
        adapter.language = task.language;
        suite.adapters.push_back(std::move(adapter));
        suite.tasks.push_back(std::move(task));
    }
    return suite;
}

} // namespace

Suite generate_suite(const GeneratorConfig& config) {
    std::vector<GridTask> grid;
    for (int p = 0; p < config.alpha_types; ++p) {
        for (int l = 0; l < config.beta_langs; ++l) {
            grid.push_back({p, l});
        }
    }
    return build_suite(config, config.seed, grid, "type", "lang");
}

Suite generate_calibration_suite(const GeneratorConfig& config, std::uint64_t seed) {
    const std::vector<GridTask> grid = {{0, 0}, {0, 1}, {0, 2}, {1, 0}};
    GeneratorConfig c = config;
    c.seed = seed;
    return build_suite(c, seed, grid, "heldout_type", "heldout_lang");
}

std::string_view to_string(OrderingKind kind) {
    switch (kind) {
    case OrderingKind::random: return "random";
    case OrderingKind::problem_types: return "problem_types";
    case OrderingKind::worst: return "worst";
    }
    return "?";
}

OrderingKind parse_ordering(std::string_view name) {
    if (name == "random") {
        return OrderingKind::random;
    }
    if (name == "problem_types" || name == "problem-types") {
        return OrderingKind::problem_types;
    }
    if (name == "worst") {
        return OrderingKind::worst;
    }
    throw Error(ErrorCode::ConfigError, "unknown ordering '" + std::string(name) + "'");
}

std::vector<int> make_ordering(const std::vector<TaskSpec>& tasks, const OrderingSpec& spec) {
    std::vector<int> order(tasks.size());
    std::iota(order.begin(), order.end(), 0);
    auto by = [&tasks](auto key) {
        return [&tasks, key](int i, int j) { return key(tasks[i]) < key(tasks[j]); };
    };
    switch (spec.kind) {
    case OrderingKind::random: {
        std::mt19937_64 rng(spec.seed);
        std::shuffle(order.begin(), order.end(), rng);
        break;
    }
    case OrderingKind::problem_types:
        std::stable_sort(order.begin(), order.end(),
                         by([](const TaskSpec& t) { return std::tie(t.language, t.problem_type); }));
        break;
    case OrderingKind::worst:
        std::stable_sort(order.begin(), order.end(),
                         by([](const TaskSpec& t) { return std::tie(t.problem_type, t.language); }));
        break;
    }
    return order;
}

void write_suite(const Suite& suite, const std::filesystem::path& directory) {
    std::filesystem::create_directories(directory);
    nlohmann::json tasks = nlohmann::json::array();
    for (std::size_t i = 0; i < suite.adapters.size(); ++i) {
        const TaskSpec& t = suite.tasks[i];
        const std::string file = t.task_id + ".kmrg";
        write_adapter(suite.adapters[i], directory / file);
        tasks.push_back({{"index", t.index},
                         {"task_id", t.task_id},
                         {"problem_type", t.problem_type},
                         {"language", t.language},
                         {"file", file}});
    }
    const nlohmann::json doc = {{"generator", generator_to_json(suite.config)}, {"tasks", tasks}};
    std::ofstream out(directory / "tasks.json");
    if (!out) {
        throw Error(ErrorCode::IoError, "cannot write tasks.json in " + directory.string());
    }
    out << doc.dump(2) << '\n';
}

Suite read_suite(const std::filesystem::path& directory) {
    std::ifstream in(directory / "tasks.json");
    if (!in) {
        throw Error(ErrorCode::IoError, "no tasks.json in " + directory.string());
    }
    Suite suite;
    try {
        const auto doc = nlohmann::json::parse(in);
        if (doc.contains("generator")) {
            suite.config = generator_from_json(doc.at("generator"));
        }
        for (const auto& t : doc.at("tasks")) {
            TaskSpec task{t.at("index").get<int>(), t.at("task_id").get<std::string>(),
                          t.at("problem_type").get<std::string>(), t.at("language").get<std::string>()};
            suite.adapters.push_back(read_adapter(directory / t.at("file").get<std::string>()));
            suite.tasks.push_back(std::move(task));
        }
    } catch (const nlohmann::json::exception& e) {
        throw Error(ErrorCode::FormatError, "malformed tasks.json: " + std::string(e.what()));
    }
    for (std::size_t i = 0; i < suite.tasks.size(); ++i) {
        if (suite.tasks[i].index != static_cast<int>(i)) {
            throw Error(ErrorCode::FormatError, "tasks.json indices must run 0..n-1 in order");
        }
    }
    return suite;
}

std::vector<LoraAdapter> read_adapter_directory(const std::filesystem::path& directory) {
    std::vector<std::filesystem::path> files;
    for (const auto& entry : std::filesystem::directory_iterator(directory)) {
        if (entry.is_regular_file() && entry.path().extension() == ".kmrg") {
            files.push_back(entry.path());
        }
    }
    std::sort(files.begin(), files.end());
    std::vector<LoraAdapter> out;
    out.reserve(files.size());
    for (const auto& f : files) {
        out.push_back(read_adapter(f));
    }
    return out;
}

} // namespace kmerge
