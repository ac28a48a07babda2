#include "modelmix/checkpoint.hpp"

#include <bit>
#include <cstring>
#include <fstream>
#include <iterator>

#include "json.hpp"
#include "modelmix/io_util.hpp"

namespace modelmix {

using nlohmann::json;

namespace {

constexpr char kMagic[4] = {'M', 'M', 'C', 'K'};

void put_u64(std::vector<std::uint8_t>& out, std::uint64_t v) {
  for (int i = 0; i < 8; ++i) out.push_back(static_cast<std::uint8_t>(v >> (8 * i)));
}

std::uint64_t get_u64(const std::uint8_t* p) {
  std::uint64_t v = 0;
  for (int i = 0; i < 8; ++i) v |= static_cast<std::uint64_t>(p[i]) << (8 * i);
  return v;
}

json unet_to_json(const UNetConfig& c) {
  return {{"depth", c.depth},
          {"base_channels", c.base_channels},
          {"in_channels", c.in_channels},
          {"num_classes", c.num_classes},
          {"dropout_rate", c.dropout_rate}};
}

}  // namespace

std::vector<std::uint8_t> encode_archive(const TensorArchive& archive) {
  json header = json::parse(archive.metadata_json);
  if (!header.is_object()) throw CheckpointError("archive metadata must be a JSON object");
  json list = json::array();
  for (const auto& t : archive.tensors) {
    const Shape4& s = t.value.shape();
    list.push_back({{"name", t.name}, {"shape", {s.n, s.c, s.h, s.w}}, {"dtype", "f32"}});
  }
  header["tensors"] = std::move(list);
  const std::string text = header.dump();

  std::vector<std::uint8_t> out(std::begin(kMagic), std::end(kMagic));
  out.push_back(kCheckpointVersion);
  put_u64(out, text.size());
  out.insert(out.end(), text.begin(), text.end());
  for (const auto& t : archive.tensors) {
    for (float f : t.value.data()) {
      const auto bits = std::bit_cast<std::uint32_t>(f);
      for (int i = 0; i < 4; ++i) out.push_back(static_cast<std::uint8_t>(bits >> (8 * i)));
    }
  }
  return out;
}

TensorArchive decode_archive(const std::vector<std::uint8_t>& bytes, const std::string& source) {
  const std::size_t fixed = sizeof(kMagic) + 1 + 8;
  if (bytes.size() < fixed) throw CheckpointError(source + ": truncated checkpoint header");
  if (std::memcmp(bytes.data(), kMagic, sizeof(kMagic)) != 0) {
    throw CheckpointError(source + ": bad magic, not an MMCK checkpoint");
  }
  if (bytes[4] != kCheckpointVersion) {
    throw CheckpointError(source + ": unsupported checkpoint version " + std::to_string(bytes[4]));
  }
  const std::uint64_t header_len = get_u64(bytes.data() + 5);
  if (header_len > bytes.size() - fixed) throw CheckpointError(source + ": truncated JSON header");

  json header;
  try {
    header = json::parse(bytes.begin() + fixed, bytes.begin() + static_cast<std::ptrdiff_t>(fixed + header_len));
  } catch (const json::exception& e) {
    throw CheckpointError(source + ": malformed JSON header: " + e.what());
  }
  if (!header.is_object() || !header.contains("tensors") || !header["tensors"].is_array()) {
    throw CheckpointError(source + ": header lacks a tensors list");
  }

  TensorArchive archive;
  std::size_t offset = fixed + header_len;
  for (const auto& entry : header["tensors"]) {
    std::string name;
    Shape4 shape;
    try {
      name = entry.at("name").get<std::string>();
      const auto dims = entry.at("shape").get<std::vector<std::size_t>>();
      if (dims.size() != 4) throw CheckpointError(source + ": tensor " + name + " shape must have 4 dims");
      shape = {dims[0], dims[1], dims[2], dims[3]};
      if (entry.at("dtype").get<std::string>() != "f32") {
        throw CheckpointError(source + ": tensor " + name + " has unsupported dtype");
      }
    } catch (const json::exception& e) {
      throw CheckpointError(source + ": malformed tensor entry: " + e.what());
    }
    const std::size_t count = shape.numel();
    if (count > (bytes.size() - offset) / 4) {
      throw CheckpointError(source + ": truncated data for tensor " + name);
    }
    std::vector<float> data(count);
    for (std::size_t i = 0; i < count; ++i) {
      std::uint32_t bits = 0;
      for (int b = 0; b < 4; ++b) bits |= static_cast<std::uint32_t>(bytes[offset + 4 * i + b]) << (8 * b);
      data[i] = std::bit_cast<float>(bits);
    }
    offset += 4 * count;
    archive.tensors.push_back({name, Tensor4<float>(shape, std::move(data))});
  }
  if (offset != bytes.size()) {
    throw CheckpointError(source + ": " + std::to_string(bytes.size() - offset) + " trailing bytes after tensor data");
  }
  header.erase("tensors");
  archive.metadata_json = header.dump();
  return archive;
}

void write_tensor_archive(const std::filesystem::path& path, const TensorArchive& archive) {
  write_file_bytes(path, encode_archive(archive));
}

TensorArchive read_tensor_archive(const std::filesystem::path& path) {
  std::vector<std::uint8_t> bytes;
  try {
    bytes = read_file_bytes(path);
  } catch (const IoError& e) {
    throw CheckpointError(e.what());
  }
  return decode_archive(bytes, path.string());
}

void save_checkpoint(const std::filesystem::path& path, const SegModel<float>& model) {
  TensorArchive archive;
  json meta = {{"task_id", model.task_id()}, {"unet", unet_to_json(model.config())}};
  archive.metadata_json = meta.dump();
  for (const auto& [name, var] : model.named_parameters()) archive.tensors.push_back({name, var.value()});
  write_tensor_archive(path, archive);
}

SegModel<float> load_checkpoint(const std::filesystem::path& path) {
  TensorArchive archive = read_tensor_archive(path);
  const json meta = json::parse(archive.metadata_json);
  UNetConfig cfg;
  std::string task_id;
  try {
    const json& u = meta.at("unet");
    cfg.depth = u.at("depth").get<int>();
    cfg.base_channels = u.at("base_channels").get<int>();
    cfg.in_channels = u.at("in_channels").get<int>();
    cfg.num_classes = u.at("num_classes").get<int>();
    cfg.dropout_rate = u.at("dropout_rate").get<double>();
    task_id = meta.at("task_id").get<std::string>();
  } catch (const json::exception& e) {
    throw CheckpointError(path.string() + ": missing model metadata: " + e.what());
  }
  try {
    cfg.validate();
  } catch (const ContractViolation& e) {
    throw CheckpointError(path.string() + ": " + e.what());
  }
  SeededRng rng(0);
  SegModel<float> model(cfg, task_id, rng);
  auto params = model.named_parameters();
  if (params.size() != archive.tensors.size()) {
    throw CheckpointError(path.string() + ": expected " + std::to_string(params.size()) + " tensors, found " +
                          std::to_string(archive.tensors.size()));
  }
  for (std::size_t i = 0; i < params.size(); ++i) {
    auto& [name, var] = params[i];
    const auto& stored = archive.tensors[i];
    if (stored.name != name) {
      throw CheckpointError(path.string() + ": tensor " + std::to_string(i) + " is '" + stored.name + "', expected '" +
                            name + "'");
    }
    if (stored.value.shape() != var.shape()) {
      throw CheckpointError(path.string() + ": tensor " + name + " has shape " + stored.value.shape().str() +
                            ", model expects " + var.shape().str());
    }
    var.mutable_value() = stored.value;
  }
  return model;
}

}  // namespace modelmix
