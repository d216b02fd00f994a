#include <bit>
#include <cstring>
#include <fstream>
#include <iterator>

#include "nnmil/errors.hpp"
#include "nnmil/trainer.hpp"

namespace nnmil {

namespace fs = std::filesystem;
using nlohmann::json;

namespace {

constexpr char kCheckpointMagic[8] = {'N', 'N', 'M', 'I', 'L', 'C', 'K', '1'};
constexpr std::size_t kPrefixBytes = sizeof(kCheckpointMagic) + 8;

void put_u32(std::vector<std::uint8_t>& out, std::uint32_t v) {
  for (int i = 0; i < 4; ++i) out.push_back(static_cast<std::uint8_t>(v >> (8 * i)));
}

void put_u64(std::vector<std::uint8_t>& out, std::uint64_t v) {
  for (int i = 0; i < 8; ++i) out.push_back(static_cast<std::uint8_t>(v >> (8 * i)));
}

std::uint32_t get_u32(const std::uint8_t* p) {
  return static_cast<std::uint32_t>(p[0]) | (static_cast<std::uint32_t>(p[1]) << 8) |
         (static_cast<std::uint32_t>(p[2]) << 16) | (static_cast<std::uint32_t>(p[3]) << 24);
}

std::uint64_t get_u64(const std::uint8_t* p) {
  std::uint64_t v = 0;
  for (int i = 7; i >= 0; --i) v = (v << 8) | p[i];
  return v;
}

struct TensorRef {
  std::string name;
  std::vector<std::size_t> shape;
  std::span<float> data;
};

// Parameters first, then the moment tensors prefixed m_ / v_.
std::vector<TensorRef> tensors_of(Checkpoint& ckpt) {
  std::vector<TensorRef> out;
  auto collect = [&](AggregatorParams<float>& p, const std::string& prefix) {
    p.visit([&](std::string_view name, std::vector<std::size_t> shape, std::span<float> data) {
      out.push_back({prefix + std::string(name), std::move(shape), data});
    });
  };
  collect(ckpt.params, "");
  collect(ckpt.optimizer.m, "m_");
  collect(ckpt.optimizer.v, "v_");
  return out;
}

}  // namespace

std::vector<std::uint8_t> encode_checkpoint(const Checkpoint& ckpt) {
  ckpt.params.validate();
  auto& mutable_ckpt = const_cast<Checkpoint&>(ckpt);  // visited read-only
  const auto tensors = tensors_of(mutable_ckpt);

  json meta;
  meta["format_version"] = 1;
  meta["config"] = ckpt.config;
  meta["optimizer"] = {{"step", ckpt.optimizer.step}};
  json entries = json::object();
  std::size_t offset = 0;
  for (const auto& t : tensors) {
    entries[t.name] = {{"shape", t.shape}, {"offset", offset}, {"dtype", "float32"}};
    offset += 4 * t.data.size();
  }
  meta["tensors"] = entries;
  const std::string text = meta.dump();

  std::vector<std::uint8_t> out(kCheckpointMagic, kCheckpointMagic + sizeof(kCheckpointMagic));
  out.reserve(kPrefixBytes + text.size() + offset);
  put_u64(out, text.size());
  out.insert(out.end(), text.begin(), text.end());
  for (const auto& t : tensors) {
    for (float x : t.data) put_u32(out, std::bit_cast<std::uint32_t>(x));
  }
  return out;
}

Checkpoint decode_checkpoint(std::span<const std::uint8_t> bytes) {
  if (bytes.size() < sizeof(kCheckpointMagic) ||
      std::memcmp(bytes.data(), kCheckpointMagic, sizeof(kCheckpointMagic)) != 0) {
    throw FormatError("checkpoint: bad magic");
  }
  if (bytes.size() < kPrefixBytes) throw CorruptionError("checkpoint: truncated header");
  const std::uint64_t meta_len = get_u64(bytes.data() + sizeof(kCheckpointMagic));
  if (meta_len > bytes.size() - kPrefixBytes) throw CorruptionError("checkpoint: truncated metadata");

  json meta;
  Checkpoint ckpt;
  try {
    meta = json::parse(bytes.begin() + kPrefixBytes, bytes.begin() + kPrefixBytes + static_cast<std::ptrdiff_t>(meta_len));
    ckpt.config = meta.at("config").get<RunConfig>();
    ckpt.optimizer.step = meta.at("optimizer").at("step").get<std::uint64_t>();
  } catch (const json::exception& e) {
    throw FormatError(std::string("checkpoint: malformed metadata: ") + e.what());
  }

  const std::size_t D = ckpt.config.embed_dim, H = ckpt.config.hidden_dim, C = ckpt.config.n_outputs;
  ckpt.params = AggregatorParams<float>::zeros(D, H, C);
  ckpt.optimizer.m = ckpt.params.zeros_like();
  ckpt.optimizer.v = ckpt.params.zeros_like();

  const std::size_t payload_begin = kPrefixBytes + meta_len;
  const std::size_t payload_size = bytes.size() - payload_begin;
  std::size_t expected_total = 0;
  const json& entries = meta["tensors"];
  for (auto& t : tensors_of(ckpt)) {
    if (!entries.contains(t.name)) throw FormatError("checkpoint: missing tensor '" + t.name + "'");
    const json& entry = entries[t.name];
    std::vector<std::size_t> shape;
    std::size_t offset = 0;
    try {
      shape = entry.at("shape").get<std::vector<std::size_t>>();
      offset = entry.at("offset").get<std::size_t>();
    } catch (const json::exception& e) {
      throw FormatError("checkpoint: malformed entry for '" + t.name + "': " + e.what());
    }
    if (shape != t.shape) {
      throw ShapeError("checkpoint: tensor '" + t.name + "' shape disagrees with the stored config");
    }
    const std::size_t nbytes = 4 * t.data.size();
    if (offset > payload_size || nbytes > payload_size - offset) {
      throw CorruptionError("checkpoint: payload truncated in tensor '" + t.name + "'");
    }
    const std::uint8_t* src = bytes.data() + payload_begin + offset;
    for (std::size_t i = 0; i < t.data.size(); ++i) t.data[i] = std::bit_cast<float>(get_u32(src + 4 * i));
    expected_total += nbytes;
  }
  if (expected_total != payload_size) {
    throw CorruptionError("checkpoint: payload is " + std::to_string(payload_size) + " bytes, expected " +
                          std::to_string(expected_total));
  }
  ckpt.params.validate();
  return ckpt;
}

void save_checkpoint(const Checkpoint& ckpt, const fs::path& path) {
  const auto bytes = encode_checkpoint(ckpt);
  std::ofstream out(path, std::ios::binary | std::ios::trunc);
  if (!out) throw IoError("cannot write '" + path.string() + "'");
  out.write(reinterpret_cast<const char*>(bytes.data()), static_cast<std::streamsize>(bytes.size()));
  if (!out) throw IoError("write failed for '" + path.string() + "'");
}

Checkpoint load_checkpoint(const fs::path& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw IoError("cannot open '" + path.string() + "'");
  const std::vector<std::uint8_t> bytes{std::istreambuf_iterator<char>(in), std::istreambuf_iterator<char>()};
  return decode_checkpoint(bytes);
}

}  // namespace nnmil
