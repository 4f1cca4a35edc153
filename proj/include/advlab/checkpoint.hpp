#pragma once

#include <bit>
#include <cstdint>
#include <filesystem>
#include <fstream>
#include <sstream>
#include <string>
#include <vector>

#include "advlab/error.hpp"
#include "advlab/tensor.hpp"

namespace advlab {

inline constexpr const char* kCheckpointVersion = "advlab-ckpt-1";

// Checkpoint layout
//
//   <base>.manifest   UTF-8 text
//     advlab-ckpt-1
//     tensors <count>
//     tensor <name> rank <r> shape <d0> ... <dr-1> offset <byte offset> values <n> trainable <0|1>
//     ...
//   <base>.bin        concatenated IEEE-754 binary64 values, little-endian,
//                     tensors in manifest order, no padding
//
// Names must not contain whitespace.

namespace detail {

inline void put_le(std::string& out, double v) {
  const auto bits = std::bit_cast<std::uint64_t>(v);
  for (int i = 0; i < 8; ++i) out.push_back(static_cast<char>((bits >> (8 * i)) & 0xffu));
}

inline double get_le(const unsigned char* p) {
  std::uint64_t bits = 0;
  for (int i = 0; i < 8; ++i) bits |= static_cast<std::uint64_t>(p[i]) << (8 * i);
  return std::bit_cast<double>(bits);
}

}  // namespace detail

inline void checkpoint_save(const ParamStore& store, const std::filesystem::path& base) {
  std::ostringstream manifest;
  std::string blob;
  manifest << kCheckpointVersion << "\n";
  manifest << "tensors " << store.size() << "\n";
  std::size_t offset = 0;
  for (const auto& e : store) {
    if (e.name.empty() || e.name.find_first_of(" \t\r\n") != std::string::npos)
      throw UsageError("checkpoint tensor name '" + e.name + "' is empty or contains whitespace");
    manifest << "tensor " << e.name << " rank " << e.tensor.rank() << " shape";
    for (auto d : e.tensor.shape()) manifest << ' ' << d;
    manifest << " offset " << offset << " values " << e.tensor.size() << " trainable "
             << (e.tensor.trainable() ? 1 : 0) << "\n";
    for (double v : e.tensor.data()) detail::put_le(blob, v);
    offset += 8 * e.tensor.size();
  }
  auto write = [](const std::filesystem::path& p, const std::string& bytes) {
    std::ofstream f(p, std::ios::binary | std::ios::trunc);
    if (!f) throw UsageError("cannot write " + p.string());
    f.write(bytes.data(), static_cast<std::streamsize>(bytes.size()));
    if (!f) throw UsageError("write failed for " + p.string());
  };
  auto with_ext = [&](const char* ext) {
    auto p = base;
    p += ext;
    return p;
  };
  write(with_ext(".manifest"), manifest.str());
  write(with_ext(".bin"), blob);
}

inline ParamStore checkpoint_load(const std::filesystem::path& base) {
  auto with_ext = [&](const char* ext) {
    auto p = base;
    p += ext;
    return p;
  };
  std::ifstream mf(with_ext(".manifest"));
  if (!mf) throw LoadError("cannot open " + with_ext(".manifest").string());
  std::ifstream bf(with_ext(".bin"), std::ios::binary);
  if (!bf) throw LoadError("cannot open " + with_ext(".bin").string());
  const std::string blob((std::istreambuf_iterator<char>(bf)), std::istreambuf_iterator<char>());

  std::string line;
  if (!std::getline(mf, line)) throw LoadError("empty manifest");
  if (line != kCheckpointVersion) throw LoadError("unknown checkpoint format version '" + line + "'");
  if (!std::getline(mf, line)) throw LoadError("manifest missing tensor count");
  std::size_t count = 0;
  {
    std::istringstream is(line);
    std::string key;
    if (!(is >> key >> count) || key != "tensors") throw LoadError("corrupt tensor count line '" + line + "'");
  }

  ParamStore store;
  std::size_t expected_offset = 0;
  for (std::size_t t = 0; t < count; ++t) {
    if (!std::getline(mf, line)) throw LoadError("manifest declares " + std::to_string(count) +
                                                 " tensors but lists " + std::to_string(t));
    std::istringstream is(line);
    std::string kw, name, k_rank, k_shape, k_offset, k_values, k_trainable;
    std::size_t rank = 0, offset = 0, values = 0;
    int trainable = 0;
    if (!(is >> kw >> name >> k_rank >> rank >> k_shape) || kw != "tensor" || k_rank != "rank" ||
        k_shape != "shape")
      throw LoadError("corrupt tensor line '" + line + "'");
    Shape shape(rank);
    for (auto& d : shape)
      if (!(is >> d)) throw LoadError("corrupt shape in line '" + line + "'");
    if (!(is >> k_offset >> offset >> k_values >> values >> k_trainable >> trainable) || k_offset != "offset" ||
        k_values != "values" || k_trainable != "trainable")
      throw LoadError("corrupt tensor line '" + line + "'");
    if (shape_size(shape) != values)
      throw LoadError("tensor '" + name + "' shape " + shape_string(shape) + " does not hold " +
                      std::to_string(values) + " values");
    if (offset != expected_offset)
      throw LoadError("tensor '" + name + "' offset " + std::to_string(offset) + ", expected " +
                      std::to_string(expected_offset));
    if (offset + 8 * values > blob.size())
      throw LoadError("tensor '" + name + "' declares " + std::to_string(values) + " values but blob holds " +
                      std::to_string((blob.size() - std::min(blob.size(), offset)) / 8));
    std::vector<double> data(values);
    const auto* bytes = reinterpret_cast<const unsigned char*>(blob.data()) + offset;
    for (std::size_t i = 0; i < values; ++i) data[i] = detail::get_le(bytes + 8 * i);
    try {
      store.add(name, Tensor(shape, std::move(data)), trainable != 0);
    } catch (const ConfigError& e) {
      throw LoadError(std::string("manifest: ") + e.what());
    }
    expected_offset = offset + 8 * values;
  }
  if (std::getline(mf, line) && !line.empty()) throw LoadError("trailing manifest content '" + line + "'");
  if (expected_offset != blob.size())
    throw LoadError("blob holds " + std::to_string(blob.size()) + " bytes, manifest accounts for " +
                    std::to_string(expected_offset));
  return store;
}

}  // namespace advlab
