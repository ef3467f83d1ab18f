#pragma once

#include <cstddef>
#include <filesystem>
#include <map>
#include <string>
#include <utility>
#include <vector>

#include "eapig/config.hpp"
#include "eapig/tensor.hpp"

namespace eapig {

struct TensorSpec {
  std::string name;
  std::vector<std::size_t> shape;
};

/// Every tensor a model of this shape needs, in manifest order.
std::vector<TensorSpec> expected_tensors(const ModelConfig& config);

/// Named float32 parameters. Insertion order is kept so that saving is
/// deterministic.
class WeightStore {
 public:
  void insert(std::string name, Tensor<float> tensor);
  bool contains(const std::string& name) const { return index_.count(name) != 0; }
  const Tensor<float>& at(const std::string& name) const;
  Tensor<float>& at(const std::string& name);
  const std::vector<std::pair<std::string, Tensor<float>>>& entries() const {
    return entries_;
  }

  /// Throws LoadError naming the first missing, misshapen or non-finite tensor.
  void validate(const ModelConfig& config) const;

  friend bool operator==(const WeightStore& a, const WeightStore& b) {
    return a.entries_ == b.entries_;
  }

 private:
  std::vector<std::pair<std::string, Tensor<float>>> entries_;
  std::map<std::string, std::size_t> index_;
};

struct ModelBundle {
  ModelConfig config;
  WeightStore weights;
};

/// Reads a JSON manifest and the little-endian float32 blob it points to.
ModelBundle load_weights(const std::filesystem::path& manifest_path);

/// Writes `manifest_path` plus a blob named `<stem>.bin` next to it.
void save_weights(const std::filesystem::path& manifest_path, const ModelConfig& config,
                  const WeightStore& weights);

}  // namespace eapig
