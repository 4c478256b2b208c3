#ifndef MMN_CHECKPOINT_HPP_
#define MMN_CHECKPOINT_HPP_

#include <filesystem>
#include <string>
#include <vector>

#include <json.hpp>

#include "mmn/graph.hpp"

namespace mmn::diffcore {

// Binary layout shared by checkpoints and embedding dumps:
//   u64 little-endian   header length H
//   H bytes             JSON header {"format", "dtype", "metadata",
//                       "tensors": [{"name", "shape", "offset", "nbytes"}]}
//   payload             concatenated tensors; offsets are relative to the
//                       payload start
// dtype is "f64le" for checkpoints and "f32le" for dumps.
struct NamedTensor {
  std::string name;
  Tensor value;
};

struct TensorFile {
  std::string format;
  nlohmann::json metadata;
  std::vector<NamedTensor> tensors;
};

enum class Precision { kFloat64, kFloat32 };

void write_tensor_file(const std::filesystem::path& path,
                       const TensorFile& file, Precision precision);
TensorFile read_tensor_file(const std::filesystem::path& path);

// Parameter checkpoint in f64le.
void save_checkpoint(const std::filesystem::path& path,
                     const ParameterStore& params,
                     const nlohmann::json& metadata);
// Reads a checkpoint; returns its metadata and assigns every listed
// parameter into `params`, which must already hold matching names and shapes.
nlohmann::json load_checkpoint(const std::filesystem::path& path,
                               ParameterStore& params);
nlohmann::json read_checkpoint_metadata(const std::filesystem::path& path);

}  // namespace mmn::diffcore

#endif  // MMN_CHECKPOINT_HPP_
