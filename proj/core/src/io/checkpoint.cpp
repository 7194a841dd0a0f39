// SPDX-License-Identifier: Apache-2.0
#include "voxformer/checkpoint.hpp"

#include <fstream>
#include <json.hpp>
#include <map>

#include "binary.hpp"

namespace voxformer {

using nlohmann::json;

namespace {

constexpr char kMagic[4] = {'V', 'X', 'C', 'K'};
constexpr std::uint32_t kVersion = 1;

}  // namespace

std::vector<std::uint8_t> encode_checkpoint(const nn::Module& module, std::string_view config_json) {
  json config;
  try {
    config = json::parse(config_json);
  } catch (const json::exception& e) {
    throw ConfigError(std::string("checkpoint config is not valid JSON: ") + e.what());
  }
  if (!config.is_object()) throw ConfigError("checkpoint config must be a JSON object");

  const auto state = module.named_state();
  json entries = json::array();
  std::uint64_t offset = 0;
  for (const auto& [name, t] : state) {
    const std::uint64_t nbytes = static_cast<std::uint64_t>(t.numel()) * dtype_size(t.dtype());
    entries.push_back({{"name", name},
                       {"dtype", dtype_name(t.dtype())},
                       {"shape", t.shape().to_vector()},
                       {"offset", offset},
                       {"nbytes", nbytes}});
    offset += nbytes;
  }
  const std::string manifest = json{{"config", config}, {"tensors", entries}}.dump();

  std::vector<std::uint8_t> out;
  out.reserve(16 + manifest.size() + offset);
  out.insert(out.end(), kMagic, kMagic + 4);
  io::put_le<std::uint32_t>(out, kVersion);
  io::put_le<std::uint64_t>(out, manifest.size());
  out.insert(out.end(), manifest.begin(), manifest.end());
  for (const auto& [_, t] : state) {
    dispatch(t.dtype(), [&]<typename T>() { io::put_scalars<T>(out, t.data<T>()); });
  }
  return out;
}

Checkpoint decode_checkpoint(std::span<const std::uint8_t> bytes) {
  io::Reader<DataError> r(bytes, "checkpoint");
  const std::uint8_t* magic = r.take(4);
  if (!std::equal(magic, magic + 4, kMagic)) throw DataError("checkpoint: bad magic (expected VXCK)");
  const auto version = r.le<std::uint32_t>();
  if (version != kVersion) throw DataError("checkpoint: unsupported version " + std::to_string(version));
  const auto manifest_len = r.le<std::uint64_t>();
  if (manifest_len > r.remaining()) throw DataError("checkpoint: truncated manifest");
  const auto* mp = r.take(static_cast<std::size_t>(manifest_len));

  json manifest;
  try {
    manifest = json::parse(mp, mp + manifest_len);
  } catch (const json::exception& e) {
    throw DataError(std::string("checkpoint: manifest is not valid JSON: ") + e.what());
  }

  Checkpoint ck;
  const std::size_t payload_start = r.position();
  const std::size_t payload_len = r.remaining();
  try {
    ck.config_json = manifest.at("config").dump();
    for (const auto& e : manifest.at("tensors")) {
      const auto dtype = parse_dtype(e.at("dtype").get<std::string>());
      const Shape shape(e.at("shape").get<std::vector<std::int64_t>>());
      const auto offset = e.at("offset").get<std::uint64_t>();
      const auto nbytes = e.at("nbytes").get<std::uint64_t>();
      if (nbytes != static_cast<std::uint64_t>(shape.numel()) * dtype_size(dtype)) {
        throw DataError("checkpoint: tensor '" + e.at("name").get<std::string>() + "' size disagrees with its shape");
      }
      if (offset > payload_len || nbytes > payload_len - offset) {
        throw DataError("checkpoint: truncated payload for '" + e.at("name").get<std::string>() + "'");
      }
      const std::uint8_t* src = bytes.data() + payload_start + offset;
      Tensor t = dispatch(dtype, [&]<typename T>() {
        std::vector<T> v(static_cast<std::size_t>(shape.numel()));
        io::get_scalars<T>(src, std::span<T>(v));
        return Tensor::from_vector<T>(shape, std::move(v));
      });
      ck.tensors.emplace_back(e.at("name").get<std::string>(), std::move(t));
    }
  } catch (const json::exception& e) {
    throw DataError(std::string("checkpoint: malformed manifest: ") + e.what());
  } catch (const ShapeError& e) {
    throw DataError(std::string("checkpoint: invalid tensor shape: ") + e.what());
  }
  return ck;
}

void load_state(nn::Module& module, const Checkpoint& checkpoint) {
  std::map<std::string, const Tensor*> stored;
  for (const auto& [name, t] : checkpoint.tensors) stored.emplace(name, &t);
  auto state = module.named_state();
  if (stored.size() != state.size()) {
    throw ConfigError("checkpoint holds " + std::to_string(stored.size()) + " tensors, model expects " +
                      std::to_string(state.size()));
  }
  for (auto& [name, dst] : state) {
    auto it = stored.find(name);
    if (it == stored.end()) throw ConfigError("checkpoint is missing tensor '" + name + "'");
    const Tensor& src = *it->second;
    if (!(src.shape() == dst.shape()) || src.dtype() != dst.dtype()) {
      throw ConfigError("checkpoint tensor '" + name + "' is " + src.shape().to_string() + " " +
                        std::string(dtype_name(src.dtype())) + ", model expects " + dst.shape().to_string() + " " +
                        std::string(dtype_name(dst.dtype())));
    }
    dispatch(dst.dtype(), [&]<typename T>() {
      auto s = src.data<T>();
      std::copy(s.begin(), s.end(), dst.mutable_data<T>().begin());
    });
  }
}

std::vector<std::uint8_t> read_file_bytes(const std::filesystem::path& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw DataError("cannot open '" + path.string() + "'");
  in.seekg(0, std::ios::end);
  const auto size = static_cast<std::size_t>(in.tellg());
  in.seekg(0);
  std::vector<std::uint8_t> bytes(size);
  if (size > 0 && !in.read(reinterpret_cast<char*>(bytes.data()), static_cast<std::streamsize>(size))) {
    throw DataError("failed reading '" + path.string() + "'");
  }
  return bytes;
}

void write_file_bytes(const std::filesystem::path& path, std::span<const std::uint8_t> bytes) {
  auto tmp = path;
  tmp += ".tmp";
  {
    std::ofstream out(tmp, std::ios::binary | std::ios::trunc);
    if (!out) throw DataError("cannot write '" + tmp.string() + "'");
    out.write(reinterpret_cast<const char*>(bytes.data()), static_cast<std::streamsize>(bytes.size()));
    if (!out) throw DataError("failed writing '" + tmp.string() + "'");
  }
  std::filesystem::rename(tmp, path);
}

void save_checkpoint(const std::filesystem::path& path, const nn::Module& module, std::string_view config_json) {
  write_file_bytes(path, encode_checkpoint(module, config_json));
}

Checkpoint read_checkpoint(const std::filesystem::path& path) { return decode_checkpoint(read_file_bytes(path)); }

}  // namespace voxformer
