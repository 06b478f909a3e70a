#pragma once

// Checkpoint container.
//
//   SEMCOM-CKPT 1\n
//   meta <key> <value>\n          (any number; value runs to end of line)
//   tensor <name> <dtype> <extent>...\n   (dtype: f32 | f64)
//   end\n
//   <payloads: raw little-endian scalars, one tensor after another, in
//    manifest order>
//
// The loader recomputes the payload length from the manifest and rejects
// files whose remaining byte count differs.

#include <filesystem>
#include <map>
#include <string>
#include <variant>
#include <vector>

#include "semcom/tensor.hpp"

namespace semcom {

class Checkpoint {
 public:
  using Entry = std::variant<Tensor, TensorD>;

  void put(const std::string& name, Tensor t);
  void put(const std::string& name, TensorD t);
  void put_meta(const std::string& key, const std::string& value);

  bool has(const std::string& name) const;
  const Tensor& tensor(const std::string& name) const;
  const TensorD& tensor_f64(const std::string& name) const;
  const std::string& meta(const std::string& key) const;
  bool has_meta(const std::string& key) const;

  const std::vector<std::string>& names() const { return order_; }

  std::string serialize() const;
  static Checkpoint parse(const std::string& bytes);

  void save(const std::filesystem::path& path) const;
  static Checkpoint load(const std::filesystem::path& path);

 private:
  void check_name(const std::string& name) const;

  std::vector<std::string> order_;
  std::map<std::string, Entry> tensors_;
  std::vector<std::pair<std::string, std::string>> meta_;
};

std::string read_file_bytes(const std::filesystem::path& path);
void write_file_bytes(const std::filesystem::path& path, const std::string& bytes);

}  // namespace semcom
