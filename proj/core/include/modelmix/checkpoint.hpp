#pragma once

#include <cstdint>
#include <filesystem>
#include <stdexcept>
#include <string>
#include <vector>

#include "modelmix/tensor.hpp"
#include "modelmix/unet.hpp"

namespace modelmix {

class CheckpointError : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

struct NamedTensor {
  std::string name;
  Tensor4<float> value;
  bool operator==(const NamedTensor&) const = default;
};

/// In-memory form of an MMCK file:
///   "MMCK" | version:u8 | header_len:u64 LE | JSON header | f32 LE buffers
/// The JSON header holds {"tensors": [{name, shape, dtype: "f32"}, ...]} plus
/// the fields of `metadata_json` (a JSON object) merged at top level.
struct TensorArchive {
  std::string metadata_json = "{}";
  std::vector<NamedTensor> tensors;
};

inline constexpr std::uint8_t kCheckpointVersion = 1;

std::vector<std::uint8_t> encode_archive(const TensorArchive& archive);
TensorArchive decode_archive(const std::vector<std::uint8_t>& bytes, const std::string& source = "<memory>");

void write_tensor_archive(const std::filesystem::path& path, const TensorArchive& archive);
TensorArchive read_tensor_archive(const std::filesystem::path& path);

/// Stores every named parameter plus the UNetConfig and task id.
void save_checkpoint(const std::filesystem::path& path, const SegModel<float>& model);
SegModel<float> load_checkpoint(const std::filesystem::path& path);

}  // namespace modelmix
