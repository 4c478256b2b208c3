#include "mmn/checkpoint.hpp"

#include <bit>
#include <cstdint>
#include <fstream>
#include <iterator>

#include "mmn/error.hpp"

namespace mmn::diffcore {

namespace {

constexpr const char* kCheckpointFormat = "mmn-checkpoint";

template <typename U>
void append_le(std::string& out, U bits) {
  for (std::size_t b = 0; b < sizeof(U); ++b) {
    out.push_back(static_cast<char>((bits >> (8 * b)) & 0xff));
  }
}

template <typename U>
U read_le(const unsigned char* p) {
  U v = 0;
  for (std::size_t b = 0; b < sizeof(U); ++b) v |= static_cast<U>(p[b]) << (8 * b);
  return v;
}

}  // namespace

void write_tensor_file(const std::filesystem::path& path,
                       const TensorFile& file, Precision precision) {
  const std::size_t width = precision == Precision::kFloat64 ? 8 : 4;
  nlohmann::json header;
  header["format"] = file.format;
  header["dtype"] = precision == Precision::kFloat64 ? "f64le" : "f32le";
  header["metadata"] = file.metadata;
  header["tensors"] = nlohmann::json::array();
  std::string payload;
  for (const auto& t : file.tensors) {
    header["tensors"].push_back({{"name", t.name},
                                 {"shape", t.value.shape()},
                                 {"offset", payload.size()},
                                 {"nbytes", t.value.size() * width}});
    for (double v : t.value.values()) {
      if (precision == Precision::kFloat64) {
        append_le(payload, std::bit_cast<std::uint64_t>(v));
      } else {
        append_le(payload, std::bit_cast<std::uint32_t>(static_cast<float>(v)));
      }
    }
  }
  const std::string text = header.dump();
  std::string bytes;
  append_le(bytes, static_cast<std::uint64_t>(text.size()));
  bytes += text;
  bytes += payload;

  std::ofstream out(path, std::ios::binary | std::ios::trunc);
  if (!out) throw DataError("cannot write " + path.string());
  out.write(bytes.data(), static_cast<std::streamsize>(bytes.size()));
  if (!out) throw DataError("write failed: " + path.string());
}

TensorFile read_tensor_file(const std::filesystem::path& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw DataError("cannot open " + path.string());
  std::string bytes((std::istreambuf_iterator<char>(in)),
                    std::istreambuf_iterator<char>());
  const auto* raw = reinterpret_cast<const unsigned char*>(bytes.data());
  if (bytes.size() < 8) throw DataError(path.string() + ": truncated header");
  const std::uint64_t hlen = read_le<std::uint64_t>(raw);
  if (hlen > bytes.size() - 8) {
    throw DataError(path.string() + ": header length " + std::to_string(hlen) +
                    " exceeds file size");
  }
  nlohmann::json header;
  try {
    header = nlohmann::json::parse(bytes.substr(8, hlen));
  } catch (const nlohmann::json::exception& e) {
    throw DataError(path.string() + ": bad header: " + e.what());
  }
  const std::string dtype = header.value("dtype", "");
  if (dtype != "f64le" && dtype != "f32le") {
    throw DataError(path.string() + ": unsupported dtype '" + dtype + "'");
  }
  const std::size_t width = dtype == "f64le" ? 8 : 4;
  const std::size_t base = 8 + hlen;

  TensorFile file;
  file.format = header.value("format", "");
  file.metadata = header.value("metadata", nlohmann::json::object());
  for (const auto& entry : header.at("tensors")) {
    const std::string name = entry.at("name");
    const Shape shape = entry.at("shape").get<Shape>();
    const std::size_t offset = entry.at("offset");
    const std::size_t nbytes = entry.at("nbytes");
    const std::size_t count = shape_numel(shape);
    if (nbytes != count * width) {
      throw DataError(path.string() + ": tensor " + name + " has " +
                      std::to_string(nbytes) + " bytes for shape " +
                      shape_string(shape));
    }
    if (base + offset + nbytes > bytes.size()) {
      throw DataError(path.string() + ": tensor " + name + " at offset " +
                      std::to_string(offset) + " runs past end of file");
    }
    std::vector<double> values(count);
    const unsigned char* p = raw + base + offset;
    for (std::size_t k = 0; k < count; ++k) {
      values[k] = width == 8
                      ? std::bit_cast<double>(read_le<std::uint64_t>(p + 8 * k))
                      : static_cast<double>(
                            std::bit_cast<float>(read_le<std::uint32_t>(p + 4 * k)));
    }
    file.tensors.push_back({name, Tensor(shape, std::move(values))});
  }
  return file;
}

void save_checkpoint(const std::filesystem::path& path,
                     const ParameterStore& params,
                     const nlohmann::json& metadata) {
  TensorFile file;
  file.format = kCheckpointFormat;
  file.metadata = metadata;
  for (const auto& p : params.all()) file.tensors.push_back({p.name, p.value});
  write_tensor_file(path, file, Precision::kFloat64);
}

nlohmann::json load_checkpoint(const std::filesystem::path& path,
                               ParameterStore& params) {
  TensorFile file = read_tensor_file(path);
  if (file.format != kCheckpointFormat) {
    throw DataError(path.string() + ": not a checkpoint (format '" +
                    file.format + "')");
  }
  if (file.tensors.size() != params.size()) {
    throw ShapeError(path.string() + ": checkpoint holds " +
                     std::to_string(file.tensors.size()) +
                     " parameters, model expects " +
                     std::to_string(params.size()));
  }
  for (auto& t : file.tensors) {
    if (!params.contains(t.name)) {
      throw ShapeError(path.string() + ": unexpected parameter " + t.name);
    }
    Parameter& p = params.get(t.name);
    if (p.value.shape() != t.value.shape()) {
      throw ShapeError(path.string() + ": parameter " + t.name + " has shape " +
                       t.value.shape_string() + ", model expects " +
                       p.value.shape_string());
    }
    p.value = std::move(t.value);
  }
  return file.metadata;
}

nlohmann::json read_checkpoint_metadata(const std::filesystem::path& path) {
  TensorFile file = read_tensor_file(path);
  if (file.format != kCheckpointFormat) {
    throw DataError(path.string() + ": not a checkpoint");
  }
  return file.metadata;
}

}  // namespace mmn::diffcore
