#pragma once

#include <cstddef>
#include <cstdint>
#include <map>
#include <span>
#include <stdexcept>
#include <string>
#include <vector>

namespace vce {

/// Dense row-major float32 array with a name.
///
/// Rank is at least 1. Zero extents are allowed and give an empty tensor.
class Tensor {
 public:
  Tensor() = default;
  Tensor(std::string name, std::vector<std::size_t> shape);
  Tensor(std::string name, std::vector<std::size_t> shape, std::vector<float> data);

  static Tensor scalar(std::string name, float value) { return Tensor(std::move(name), {1}, {value}); }

  const std::string& name() const { return name_; }
  void set_name(std::string name) { name_ = std::move(name); }

  const std::vector<std::size_t>& shape() const { return shape_; }
  std::size_t rank() const { return shape_.size(); }
  std::size_t dim(std::size_t axis) const { return shape_.at(axis); }
  std::size_t size() const { return data_.size(); }
  std::size_t byte_size() const { return data_.size() * sizeof(float); }

  std::span<const float> data() const { return data_; }
  std::span<float> data() { return data_; }
  const std::vector<float>& values() const { return data_; }

  float& operator[](std::size_t i) { return data_[i]; }
  float operator[](std::size_t i) const { return data_[i]; }

  // 2-D access; only valid for rank-2 tensors.
  float& at(std::size_t row, std::size_t col) { return data_[row * shape_[1] + col]; }
  float at(std::size_t row, std::size_t col) const { return data_[row * shape_[1] + col]; }

  std::span<const float> row(std::size_t r) const;
  std::span<float> row(std::size_t r);

  /// Bytewise equality of shape and element data; NaN payloads compare by bits.
  bool bit_equal(const Tensor& other) const;

 private:
  std::string name_;
  std::vector<std::size_t> shape_;
  std::vector<float> data_;
};

std::size_t element_count(const std::vector<std::size_t>& shape);

/// Name-addressed tensor collection. std::map keeps iteration order stable.
using TensorMap = std::map<std::string, Tensor>;

void insert_unique(TensorMap& map, Tensor tensor);
const Tensor& require(const TensorMap& map, const std::string& name);

}  // namespace vce
