#pragma once

#include <filesystem>
#include <map>
#include <string>
#include <vector>

#include <Eigen/Core>

#include "shiftlab/nn.hpp"

namespace shiftlab {

/// Named float32 tensors plus string metadata.
///
/// On disk a checkpoint is two files sharing a base path:
///   <base>.manifest  text: "shiftlab-checkpoint 1", then "meta <key> <value>"
///                    lines, then "tensor <name> <rows> <cols> <offset>" lines
///                    (offset counted in floats)
///   <base>.bin       little-endian IEEE-754 float32 values, tensors in
///                    manifest order, each column-major
///
/// Values are rounded to float32 on insertion, so save/load round-trips are
/// bit-exact.
class Checkpoint {
 public:
  void add_tensor(const std::string& name, const Eigen::MatrixXd& value);
  void add_mlp(const std::string& prefix, const Mlp& net);
  void set_meta(const std::string& key, const std::string& value);

  bool has_tensor(const std::string& name) const;
  /// Throws DataError if absent.
  const Eigen::MatrixXd& tensor(const std::string& name) const;
  Mlp mlp(const std::string& prefix) const;
  const std::string& meta(const std::string& key) const;
  const std::map<std::string, std::string>& metadata() const { return meta_; }
  const std::vector<std::string>& tensor_names() const { return order_; }

  /// Returns the written file paths (manifest first).
  std::vector<std::filesystem::path> save(const std::filesystem::path& base) const;
  static Checkpoint load(const std::filesystem::path& base);

 private:
  std::vector<std::string> order_;
  std::map<std::string, Eigen::MatrixXd> tensors_;
  std::map<std::string, std::string> meta_;
};

/// Rounds every parameter to the nearest float32.
Mlp round_to_float32(const Mlp& net);

}  // namespace shiftlab
