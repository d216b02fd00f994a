#include "nnmil/data_model.hpp"

#include <algorithm>
#include <bit>
#include <cmath>
#include <cstring>
#include <fstream>
#include <iterator>
#include <set>

#include "nnmil/errors.hpp"

namespace nnmil {

namespace fs = std::filesystem;
using nlohmann::json;

std::string_view to_string(Task task) {
  switch (task) {
    case Task::classification: return "classification";
    case Task::regression: return "regression";
    case Task::survival: return "survival";
  }
  return "unknown";
}

Task parse_task(std::string_view text) {
  if (text == "classification") return Task::classification;
  if (text == "regression") return Task::regression;
  if (text == "survival") return Task::survival;
  throw ValidationError("unknown task '" + std::string(text) + "'");
}

std::string_view to_string(Split split) {
  switch (split) {
    case Split::train: return "train";
    case Split::val: return "val";
    case Split::test: return "test";
  }
  return "unknown";
}

Split parse_split(std::string_view text) {
  if (text == "train") return Split::train;
  if (text == "val") return Split::val;
  if (text == "test") return Split::test;
  throw ValidationError("unknown split '" + std::string(text) + "'");
}

std::string_view to_string(TrainingMode mode) {
  switch (mode) {
    case TrainingMode::nnmil: return "nnmil";
    case TrainingMode::full_bag_batch1: return "full_bag_batch1";
  }
  return "unknown";
}

TrainingMode parse_training_mode(std::string_view text) {
  if (text == "nnmil") return TrainingMode::nnmil;
  if (text == "full_bag_batch1") return TrainingMode::full_bag_batch1;
  throw ValidationError("unknown training mode '" + std::string(text) + "'");
}

void SlideBag::validate() const {
  if (embeddings.rows() < 1 || embeddings.cols() < 1) {
    throw ValidationError("slide '" + slide_id + "': bag must have N >= 1 and D >= 1");
  }
  if (!embeddings.allFinite()) {
    throw ValidationError("slide '" + slide_id + "': embeddings contain non-finite values");
  }
}

// ---------------------------------------------------------------------------
// Binary embedding format

namespace {

void put_u32(std::vector<std::uint8_t>& out, std::uint32_t v) {
  for (int i = 0; i < 4; ++i) out.push_back(static_cast<std::uint8_t>(v >> (8 * i)));
}

std::uint32_t get_u32(const std::uint8_t* p) {
  return static_cast<std::uint32_t>(p[0]) | (static_cast<std::uint32_t>(p[1]) << 8) |
         (static_cast<std::uint32_t>(p[2]) << 16) | (static_cast<std::uint32_t>(p[3]) << 24);
}

std::vector<std::uint8_t> read_all(const fs::path& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw IoError("cannot open '" + path.string() + "'");
  return {std::istreambuf_iterator<char>(in), std::istreambuf_iterator<char>()};
}

BagShape decode_header(std::span<const std::uint8_t> bytes) {
  if (bytes.size() < sizeof(kEmbeddingMagic) ||
      std::memcmp(bytes.data(), kEmbeddingMagic, sizeof(kEmbeddingMagic)) != 0) {
    throw FormatError("embedding file: bad magic");
  }
  if (bytes.size() < kEmbeddingHeaderBytes) throw CorruptionError("embedding file: truncated header");
  return {get_u32(bytes.data() + 8), get_u32(bytes.data() + 12)};
}

}  // namespace

SlideBag decode_embedding(std::span<const std::uint8_t> bytes) {
  const BagShape shape = decode_header(bytes);
  const std::size_t count = shape.n_patches * shape.embed_dim;
  if (bytes.size() != kEmbeddingHeaderBytes + 4 * count) {
    throw CorruptionError("embedding file: payload holds " +
                          std::to_string((bytes.size() - kEmbeddingHeaderBytes) / 4) +
                          " floats, header declares " + std::to_string(count));
  }
  SlideBag bag;
  bag.embeddings.resize(static_cast<Eigen::Index>(shape.n_patches),
                        static_cast<Eigen::Index>(shape.embed_dim));
  float* dst = bag.embeddings.data();
  const std::uint8_t* src = bytes.data() + kEmbeddingHeaderBytes;
  for (std::size_t i = 0; i < count; ++i) {
    dst[i] = std::bit_cast<float>(get_u32(src + 4 * i));
  }
  bag.validate();
  return bag;
}

std::vector<std::uint8_t> encode_embedding(const SlideBag& bag) {
  bag.validate();
  std::vector<std::uint8_t> out(kEmbeddingMagic, kEmbeddingMagic + sizeof(kEmbeddingMagic));
  out.reserve(kEmbeddingHeaderBytes + 4 * static_cast<std::size_t>(bag.embeddings.size()));
  put_u32(out, static_cast<std::uint32_t>(bag.n_patches()));
  put_u32(out, static_cast<std::uint32_t>(bag.embed_dim()));
  const float* src = bag.embeddings.data();
  for (Eigen::Index i = 0; i < bag.embeddings.size(); ++i) {
    put_u32(out, std::bit_cast<std::uint32_t>(src[i]));
  }
  return out;
}

SlideBag read_embedding_file(const fs::path& path) {
  const auto bytes = read_all(path);
  SlideBag bag = decode_embedding(bytes);
  bag.slide_id = path.stem().string();
  return bag;
}

BagShape read_embedding_header(const fs::path& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw IoError("cannot open '" + path.string() + "'");
  std::uint8_t header[kEmbeddingHeaderBytes] = {};
  in.read(reinterpret_cast<char*>(header), kEmbeddingHeaderBytes);
  return decode_header(std::span<const std::uint8_t>(header, static_cast<std::size_t>(in.gcount())));
}

void write_embedding_file(const SlideBag& bag, const fs::path& path) {
  const auto bytes = encode_embedding(bag);  // validates before touching disk
  std::ofstream out(path, std::ios::binary | std::ios::trunc);
  if (!out) throw IoError("cannot write '" + path.string() + "'");
  out.write(reinterpret_cast<const char*>(bytes.data()), static_cast<std::streamsize>(bytes.size()));
  if (!out) throw IoError("write failed for '" + path.string() + "'");
}

// ---------------------------------------------------------------------------
// Manifest

std::vector<std::size_t> DatasetManifest::indices(Split split) const {
  std::vector<std::size_t> out;
  for (std::size_t i = 0; i < entries.size(); ++i) {
    if (entries[i].split == split) out.push_back(i);
  }
  return out;
}

fs::path DatasetManifest::resolve(const ManifestEntry& entry) const {
  if (entry.embedding_path.is_absolute() || base_dir.empty()) return entry.embedding_path;
  return base_dir / entry.embedding_path;
}

void DatasetManifest::validate() const {
  std::set<std::string> seen;
  for (const auto& e : entries) {
    if (!seen.insert(e.slide_id).second) {
      throw ValidationError("duplicate slide_id '" + e.slide_id + "'");
    }
    switch (task) {
      case Task::classification: {
        const int* c = std::get_if<int>(&e.label);
        if (!c) throw ValidationError("slide '" + e.slide_id + "': classification label must be a class index");
        if (*c < 0 || *c >= n_classes) {
          throw ValidationError("slide '" + e.slide_id + "': class index outside [0, n_classes)");
        }
        break;
      }
      case Task::regression: {
        const double* t = std::get_if<double>(&e.label);
        if (!t || !std::isfinite(*t)) {
          throw ValidationError("slide '" + e.slide_id + "': regression label must be a finite number");
        }
        break;
      }
      case Task::survival: {
        const auto* r = std::get_if<SurvivalRecord>(&e.label);
        if (!r) throw ValidationError("slide '" + e.slide_id + "': survival label must be {time, event}");
        if (!(r->time > 0.0) || !std::isfinite(r->time)) {
          throw ValidationError("slide '" + e.slide_id + "': survival time must be positive");
        }
        if (r->event != 0 && r->event != 1) {
          throw ValidationError("slide '" + e.slide_id + "': event must be 0 or 1");
        }
        break;
      }
    }
  }
  if (task == Task::survival) {
    const bool any_event = std::any_of(entries.begin(), entries.end(), [](const ManifestEntry& e) {
      return e.split == Split::train && std::get<SurvivalRecord>(e.label).event == 1;
    });
    if (!any_event) throw ValidationError("survival manifest has no events in the train split");
  }
}

namespace {

Label parse_label(const json& j, Task task, const std::string& slide_id) {
  switch (task) {
    case Task::classification: {
      if (!j.is_number()) break;
      const double v = j.get<double>();
      if (v != std::floor(v)) break;
      return static_cast<int>(v);
    }
    case Task::regression:
      if (!j.is_number()) break;
      return j.get<double>();
    case Task::survival: {
      if (!j.is_object() || !j.contains("time") || !j.contains("event")) break;
      if (!j["time"].is_number() || !j["event"].is_number_integer()) break;
      return SurvivalRecord{j["time"].get<double>(), j["event"].get<int>()};
    }
  }
  throw ValidationError("slide '" + slide_id + "': label does not match task " +
                        std::string(to_string(task)));
}

json label_to_json(const Label& label) {
  return std::visit(
      [](const auto& v) -> json {
        using V = std::decay_t<decltype(v)>;
        if constexpr (std::is_same_v<V, SurvivalRecord>) {
          return json{{"time", v.time}, {"event", v.event}};
        } else {
          return v;
        }
      },
      label);
}

}  // namespace

DatasetManifest manifest_from_json(const json& doc, const fs::path& base_dir) {
  DatasetManifest m;
  m.base_dir = base_dir;
  try {
    m.task = parse_task(doc.at("task").get<std::string>());
    for (const auto& je : doc.at("entries")) {
      ManifestEntry e;
      e.slide_id = je.at("slide_id").get<std::string>();
      e.patient_id = je.value("patient_id", e.slide_id);
      e.embedding_path = je.at("embedding_path").get<std::string>();
      e.split = parse_split(je.at("split").get<std::string>());
      e.label = parse_label(je.at("label"), m.task, e.slide_id);
      m.entries.push_back(std::move(e));
    }
    if (m.task == Task::classification) {
      if (doc.contains("n_classes") && !doc["n_classes"].is_null()) {
        m.n_classes = doc["n_classes"].get<int>();
      } else {
        int max_label = -1;
        for (const auto& e : m.entries) max_label = std::max(max_label, std::get<int>(e.label));
        m.n_classes = max_label + 1;
      }
    }
  } catch (const json::exception& ex) {
    throw FormatError(std::string("manifest: ") + ex.what());
  }
  m.validate();
  return m;
}

json manifest_to_json(const DatasetManifest& manifest) {
  json doc;
  doc["task"] = to_string(manifest.task);
  doc["n_classes"] = manifest.task == Task::classification ? json(manifest.n_classes) : json(nullptr);
  json entries = json::array();
  for (const auto& e : manifest.entries) {
    entries.push_back({{"slide_id", e.slide_id},
                       {"patient_id", e.patient_id},
                       {"embedding_path", e.embedding_path.generic_string()},
                       {"split", to_string(e.split)},
                       {"label", label_to_json(e.label)}});
  }
  doc["entries"] = std::move(entries);
  return doc;
}

DatasetManifest load_manifest(const fs::path& path) {
  std::ifstream in(path);
  if (!in) throw IoError("cannot open manifest '" + path.string() + "'");
  json doc;
  try {
    doc = json::parse(in);
  } catch (const json::parse_error& ex) {
    throw FormatError("manifest '" + path.string() + "': " + ex.what());
  }
  return manifest_from_json(doc, path.parent_path());
}

void save_manifest(const DatasetManifest& manifest, const fs::path& path) {
  std::ofstream out(path, std::ios::trunc);
  if (!out) throw IoError("cannot write manifest '" + path.string() + "'");
  out << manifest_to_json(manifest).dump(2) << '\n';
}

std::vector<SlideBag> load_bags(const DatasetManifest& manifest) {
  std::vector<SlideBag> bags;
  bags.reserve(manifest.entries.size());
  for (const auto& e : manifest.entries) {
    SlideBag bag = read_embedding_file(manifest.resolve(e));
    bag.slide_id = e.slide_id;
    bag.patient_id = e.patient_id;
    bags.push_back(std::move(bag));
  }
  return bags;
}

}  // namespace nnmil
