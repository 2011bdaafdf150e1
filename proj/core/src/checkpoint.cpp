// Copyright 2026 The cobev Authors.
// SPDX-License-Identifier: Apache-2.0

#include "cobev/checkpoint.hpp"

#include <bit>
#include <cstring>
#include <fstream>
#include <sstream>

namespace cobev {

using nlohmann::json;

namespace {

void put_u64(std::string& out, std::uint64_t v) {
  for (int i = 0; i < 8; ++i) out.push_back(static_cast<char>((v >> (8 * i)) & 0xFF));
}

void put_u32(std::string& out, std::uint32_t v) {
  for (int i = 0; i < 4; ++i) out.push_back(static_cast<char>((v >> (8 * i)) & 0xFF));
}

std::uint64_t get_uint(const std::string& in, std::size_t pos, int bytes) {
  if (pos + static_cast<std::size_t>(bytes) > in.size()) throw CheckpointError("checkpoint: truncated");
  std::uint64_t v = 0;
  for (int i = 0; i < bytes; ++i) {
    v |= static_cast<std::uint64_t>(static_cast<unsigned char>(in[pos + static_cast<std::size_t>(i)]))
         << (8 * i);
  }
  return v;
}

}  // namespace

const Tensor& Checkpoint::at(const std::string& name) const {
  for (const auto& [n, t] : tensors) {
    if (n == name) return t;
  }
  throw CheckpointError("checkpoint: no tensor named '" + name + "'");
}

std::string encode_checkpoint(const json& config, const NamedTensors& tensors) {
  json index = json::array();
  std::size_t offset = 0;
  for (const auto& [name, t] : tensors) {
    index.push_back({{"name", name}, {"shape", t.shape()}, {"offset", offset}, {"count", t.numel()}});
    offset += t.numel();
  }
  const json header{{"format", "cobev.checkpoint"},
                    {"version", kCheckpointVersion},
                    {"config", config},
                    {"tensors", index}};
  const std::string text = header.dump();
  std::string out(kCheckpointMagic, sizeof(kCheckpointMagic));
  put_u32(out, kCheckpointVersion);
  put_u64(out, text.size());
  out += text;
  out.reserve(out.size() + offset * 8);
  for (const auto& entry : tensors) {
    for (double v : entry.second.data()) put_u64(out, std::bit_cast<std::uint64_t>(v));
  }
  return out;
}

Checkpoint decode_checkpoint(const std::string& bytes) {
  if (bytes.size() < 20 || std::memcmp(bytes.data(), kCheckpointMagic, 8) != 0) {
    throw CheckpointError("checkpoint: bad magic");
  }
  const auto version = static_cast<std::uint32_t>(get_uint(bytes, 8, 4));
  if (version != kCheckpointVersion) {
    throw CheckpointError("checkpoint: unsupported version " + std::to_string(version));
  }
  const std::uint64_t header_len = get_uint(bytes, 12, 8);
  const std::size_t data_start = 20 + header_len;
  if (data_start > bytes.size()) throw CheckpointError("checkpoint: truncated header");
  json header;
  try {
    header = json::parse(bytes.substr(20, header_len));
  } catch (const json::exception& e) {
    throw CheckpointError(std::string("checkpoint: bad header: ") + e.what());
  }
  Checkpoint ck;
  ck.config = header.value("config", json::object());
  try {
    for (const auto& entry : header.at("tensors")) {
      const auto shape = entry.at("shape").get<Shape>();
      const auto offset = entry.at("offset").get<std::size_t>();
      const auto count = entry.at("count").get<std::size_t>();
      if (count != shape_numel(shape)) throw CheckpointError("checkpoint: count/shape mismatch");
      std::vector<double> values(count);
      for (std::size_t i = 0; i < count; ++i) {
        values[i] = std::bit_cast<double>(get_uint(bytes, data_start + (offset + i) * 8, 8));
      }
      ck.tensors.emplace_back(entry.at("name").get<std::string>(),
                              Tensor::from_data(shape, std::move(values), true));
    }
  } catch (const json::exception& e) {
    throw CheckpointError(std::string("checkpoint: bad tensor index: ") + e.what());
  }
  return ck;
}

void write_checkpoint(const std::filesystem::path& path, const json& config,
                      const NamedTensors& tensors) {
  std::ofstream out(path, std::ios::binary | std::ios::trunc);
  if (!out) throw CheckpointError("checkpoint: cannot open " + path.string() + " for writing");
  const std::string bytes = encode_checkpoint(config, tensors);
  out.write(bytes.data(), static_cast<std::streamsize>(bytes.size()));
  if (!out) throw CheckpointError("checkpoint: write failed for " + path.string());
}

Checkpoint read_checkpoint(const std::filesystem::path& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw CheckpointError("checkpoint: cannot open " + path.string());
  std::ostringstream ss;
  ss << in.rdbuf();
  return decode_checkpoint(ss.str());
}

}  // namespace cobev
