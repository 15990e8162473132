#pragma once

#include <torch/torch.h>

#include <filesystem>
#include <map>
#include <string>
#include <vector>

namespace tpf {

/// Named-tensor container shared by parameter files and checkpoints.
///
/// On-disk layout, all integers little-endian:
///
///     magic      8 bytes  "TPFNARC1"
///     u32        number of metadata entries
///       u32 key length, key bytes, u32 value length, value bytes   (sorted by key)
///     u32        number of tensors
///       u32 name length, name bytes
///       u8  dtype   (0 = float32, 1 = int64, 2 = uint8, 3 = float64)
///       u32 rank, then rank x i64 extents
///       raw element data, little-endian, row-major
///
/// Tensors keep insertion order, so writing the same archive twice is
/// byte-identical.
class Archive {
 public:
  void set_meta(const std::string& key, std::string value);
  const std::string& meta(const std::string& key) const;
  bool has_meta(const std::string& key) const;
  const std::map<std::string, std::string>& metadata() const { return meta_; }

  /// Stores a contiguous CPU copy of `t`. Replaces an existing entry of the same name.
  void put(const std::string& name, const torch::Tensor& t);
  const torch::Tensor& get(const std::string& name) const;
  bool contains(const std::string& name) const;
  const std::vector<std::string>& names() const { return order_; }
  size_t size() const { return order_.size(); }

  void save(const std::filesystem::path& path) const;
  static Archive load(const std::filesystem::path& path);

  std::string to_bytes() const;
  static Archive from_bytes(const std::string& bytes);

 private:
  std::map<std::string, std::string> meta_;
  std::map<std::string, torch::Tensor> tensors_;
  std::vector<std::string> order_;
};

/// Adds every parameter and buffer of `module` under `prefix`.
void export_module(const torch::nn::Module& module, Archive& archive, const std::string& prefix = "");

/// Copies archive entries into `module`. Every parameter and buffer must be
/// present with the exact shape; nothing is modified unless all checks pass.
/// Entries in the archive that start with `prefix` but do not belong to the
/// module are also rejected.
void import_module(torch::nn::Module& module, const Archive& archive, const std::string& prefix = "");

/// Writes `module` as a standalone parameter file.
void save_parameters(const torch::nn::Module& module, const std::filesystem::path& path);

/// Loads a parameter file written by save_parameters into `module`.
void load_parameters(torch::nn::Module& module, const std::filesystem::path& path);

}  // namespace tpf
