// Copyright (c) 2026, the kmerge authors
// SPDX-License-Identifier: Apache-2.0
//
// Binary adapter container (.kmrg), little-endian, no padding:
//
//   "KMRG"            4 bytes
//   version           u16 (= 1)
//   header_len        u32
//   header            header_len bytes of UTF-8 JSON
//   tensors           for each header layer in order: A (rank*d_in f32,
//                     row-major) then B (d_out*rank f32, row-major)
//
// Header: {"task_id", "problem_type", "language", "rank", "scale_numerator",
//          "layers": [{"layer", "proj", "d_in", "d_out"}, ...]}
// with layers sorted by (layer, proj) and proj ordered key<query<value<output.

#pragma once

#include <cstdint>
#include <filesystem>
#include <span>
#include <string>
#include <vector>

#include "kmerge/adapter.hpp"

namespace kmerge {

inline constexpr std::uint16_t kAdapterFormatVersion = 1;

inline constexpr std::size_t kAdapterPreambleBytes = 4 + 2 + 4;

/// The JSON header text exactly as encode_adapter writes it.
std::string encode_adapter_header(const LoraAdapter& adapter);

std::vector<std::uint8_t> encode_adapter(const LoraAdapter& adapter);

/// Throws FormatError naming the byte offset (and tensor, if one is short).
LoraAdapter decode_adapter(std::span<const std::uint8_t> bytes);

void write_adapter(const LoraAdapter& adapter, const std::filesystem::path& path);
LoraAdapter read_adapter(const std::filesystem::path& path);

std::vector<std::uint8_t> read_file_bytes(const std::filesystem::path& path);
void write_file_bytes(const std::filesystem::path& path, std::span<const std::uint8_t> bytes);

/// Writes to a sibling temporary file and renames it over `path`.
void write_file_atomic(const std::filesystem::path& path, std::span<const std::uint8_t> bytes);

} // namespace kmerge
