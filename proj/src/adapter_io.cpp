// Copyright (c) 2026, the kmerge authors
// SPDX-License-Identifier: Apache-2.0

#include "kmerge/adapter_io.hpp"

#include <bit>
#include <cstring>
#include <fstream>
#include <string>

#include <json.hpp>

#include "kmerge/error.hpp"

namespace kmerge {

namespace {

static_assert(std::endian::native == std::endian::little, "adapter I/O assumes a little-endian host");

constexpr std::array<char, 4> kMagic = {'K', 'M', 'R', 'G'};

template <typename T>
void put(std::vector<std::uint8_t>& out, T value) {
    const auto* p = reinterpret_cast<const std::uint8_t*>(&value);
    out.insert(out.end(), p, p + sizeof(T));
}

void put_floats(std::vector<std::uint8_t>& out, const MatrixF& m) {
    const auto* p = reinterpret_cast<const std::uint8_t*>(m.data());
    out.insert(out.end(), p, p + sizeof(float) * static_cast<std::size_t>(m.size()));
}

[[noreturn]] void format_error(std::size_t offset, const std::string& what) {
    throw Error(ErrorCode::FormatError, what + " (at byte offset " + std::to_string(offset) + ")");
}

class Reader {
public:
    explicit Reader(std::span<const std::uint8_t> bytes) : bytes_(bytes) {}

    std::size_t offset() const { return offset_; }
    std::size_t remaining() const { return bytes_.size() - offset_; }

    template <typename T>
    T take(const char* what) {
        if (remaining() < sizeof(T)) {
            format_error(offset_, std::string("truncated ") + what);
        }
        T value;
        std::memcpy(&value, bytes_.data() + offset_, sizeof(T));
        offset_ += sizeof(T);
        return value;
    }

    std::span<const std::uint8_t> take_bytes(std::size_t n, const std::string& what) {
        if (remaining() < n) {
            format_error(offset_, "truncated payload: missing " + what + " (need " + std::to_string(n) +
                                      " bytes, have " + std::to_string(remaining()) + ")");
        }
        auto out = bytes_.subspan(offset_, n);
        offset_ += n;
        return out;
    }

private:
    std::span<const std::uint8_t> bytes_;
    std::size_t offset_ = 0;
};

struct HeaderLayer {
    LayerKey key;
    std::int64_t d_in = 0;
    std::int64_t d_out = 0;
};

} // namespace

std::string encode_adapter_header(const LoraAdapter& adapter) {
    nlohmann::json header;
    header["task_id"] = adapter.task_id;
    header["problem_type"] = adapter.problem_type;
    header["language"] = adapter.language;
    header["rank"] = adapter.rank;
    header["scale_numerator"] = adapter.scale_numerator;
    auto layers = nlohmann::json::array();
    for (const auto& [key, pair] : adapter.layers) {
        layers.push_back({{"layer", key.layer_index},
                          {"proj", std::string(to_string(key.projection))},
                          {"d_in", pair.d_in()},
                          {"d_out", pair.d_out()}});
    }
    header["layers"] = std::move(layers);
    return header.dump();
}

std::vector<std::uint8_t> encode_adapter(const LoraAdapter& adapter) {
    adapter.validate();
    const std::string text = encode_adapter_header(adapter);

    std::vector<std::uint8_t> out;
    out.insert(out.end(), kMagic.begin(), kMagic.end());
    put<std::uint16_t>(out, kAdapterFormatVersion);
    put<std::uint32_t>(out, static_cast<std::uint32_t>(text.size()));
    out.insert(out.end(), text.begin(), text.end());
    for (const auto& [_, pair] : adapter.layers) {
        put_floats(out, pair.a);
        put_floats(out, pair.b);
    }
    return out;
}

LoraAdapter decode_adapter(std::span<const std::uint8_t> bytes) {
    Reader in(bytes);
    if (bytes.size() < kAdapterPreambleBytes) {
        format_error(0, "file shorter than the fixed preamble");
    }
    auto magic = in.take_bytes(4, "magic");
    if (std::memcmp(magic.data(), kMagic.data(), 4) != 0) {
        format_error(0, "bad magic bytes");
    }
    const auto version = in.take<std::uint16_t>("version");
    if (version != kAdapterFormatVersion) {
        format_error(4, "unsupported format version " + std::to_string(version));
    }
    const auto header_len = in.take<std::uint32_t>("header length");
    const std::size_t header_offset = in.offset();
    auto header_bytes = in.take_bytes(header_len, "JSON header");

    LoraAdapter adapter;
    std::vector<HeaderLayer> layers;
    try {
        const auto header = nlohmann::json::parse(header_bytes.begin(), header_bytes.end());
        adapter.task_id = header.at("task_id").get<std::string>();
        adapter.problem_type = header.at("problem_type").get<std::string>();
        adapter.language = header.at("language").get<std::string>();
        adapter.rank = header.at("rank").get<int>();
        adapter.scale_numerator = header.at("scale_numerator").get<double>();
        for (const auto& entry : header.at("layers")) {
            HeaderLayer layer;
            layer.key.layer_index = entry.at("layer").get<int>();
            layer.key.projection = parse_projection(entry.at("proj").get<std::string>());
            layer.d_in = entry.at("d_in").get<std::int64_t>();
            layer.d_out = entry.at("d_out").get<std::int64_t>();
            layers.push_back(layer);
        }
    } catch (const nlohmann::json::exception& e) {
        format_error(header_offset, std::string("malformed header: ") + e.what());
    } catch (const Error& e) {
        format_error(header_offset, e.what());
    }

    if (adapter.rank < 1) {
        format_error(header_offset, "header declares rank " + std::to_string(adapter.rank));
    }
    if (layers.empty()) {
        format_error(header_offset, "header lists no layers");
    }
    for (std::size_t i = 0; i < layers.size(); ++i) {
        if (layers[i].key.layer_index < 0 || layers[i].d_in < 1 || layers[i].d_out < 1) {
            format_error(header_offset, "invalid shape for layer " + to_string(layers[i].key));
        }
        if (i > 0 && !(layers[i - 1].key < layers[i].key)) {
            format_error(header_offset, "header layers are not strictly sorted at " + to_string(layers[i].key));
        }
    }

    const auto r = static_cast<Eigen::Index>(adapter.rank);
    for (const auto& layer : layers) {
        FactorPair pair;
        pair.a.resize(r, layer.d_in);
        pair.b.resize(layer.d_out, r);
        const std::string name = "tensor " + to_string(layer.key);
        auto a = in.take_bytes(sizeof(float) * static_cast<std::size_t>(pair.a.size()), name + ".A");
        std::memcpy(pair.a.data(), a.data(), a.size());
        auto b = in.take_bytes(sizeof(float) * static_cast<std::size_t>(pair.b.size()), name + ".B");
        std::memcpy(pair.b.data(), b.data(), b.size());
        adapter.layers.emplace(layer.key, std::move(pair));
    }
    if (in.remaining() != 0) {
        format_error(in.offset(), std::to_string(in.remaining()) + " trailing bytes after the last tensor");
    }
    try {
        adapter.validate();
    } catch (const Error& e) {
        format_error(header_offset, e.what());
    }
    return adapter;
}

std::vector<std::uint8_t> read_file_bytes(const std::filesystem::path& path) {
    std::ifstream in(path, std::ios::binary);
    if (!in) {
        throw Error(ErrorCode::IoError, "cannot open " + path.string());
    }
    return {std::istreambuf_iterator<char>(in), std::istreambuf_iterator<char>()};
}

void write_file_bytes(const std::filesystem::path& path, std::span<const std::uint8_t> bytes) {
    std::ofstream out(path, std::ios::binary | std::ios::trunc);
    if (!out) {
        throw Error(ErrorCode::IoError, "cannot write " + path.string());
    }
    out.write(reinterpret_cast<const char*>(bytes.data()), static_cast<std::streamsize>(bytes.size()));
    if (!out) {
        throw Error(ErrorCode::IoError, "short write to " + path.string());
    }
}

void write_file_atomic(const std::filesystem::path& path, std::span<const std::uint8_t> bytes) {
    auto tmp = path;
    tmp += ".tmp";
    write_file_bytes(tmp, bytes);
    std::filesystem::rename(tmp, path);
}

void write_adapter(const LoraAdapter& adapter, const std::filesystem::path& path) {
    write_file_bytes(path, encode_adapter(adapter));
}

LoraAdapter read_adapter(const std::filesystem::path& path) {
    return decode_adapter(read_file_bytes(path));
}

} // namespace kmerge
