#include "vce/tensor.hpp"

#include <cstring>
#include <numeric>

namespace vce {

std::size_t element_count(const std::vector<std::size_t>& shape) {
  return std::accumulate(shape.begin(), shape.end(), std::size_t{1}, std::multiplies<>());
}

Tensor::Tensor(std::string name, std::vector<std::size_t> shape)
    : name_(std::move(name)), shape_(std::move(shape)), data_(element_count(shape_), 0.0f) {
  if (shape_.empty()) throw std::invalid_argument("tensor '" + name_ + "': rank must be >= 1");
}

Tensor::Tensor(std::string name, std::vector<std::size_t> shape, std::vector<float> data)
    : name_(std::move(name)), shape_(std::move(shape)), data_(std::move(data)) {
  if (shape_.empty()) throw std::invalid_argument("tensor '" + name_ + "': rank must be >= 1");
  if (data_.size() != element_count(shape_))
    throw std::invalid_argument("tensor '" + name_ + "': element count " + std::to_string(data_.size()) +
                                " does not match shape");
}

std::span<const float> Tensor::row(std::size_t r) const {
  const std::size_t width = shape_.back();
  return std::span<const float>(data_).subspan(r * width, width);
}

std::span<float> Tensor::row(std::size_t r) {
  const std::size_t width = shape_.back();
  return std::span<float>(data_).subspan(r * width, width);
}

bool Tensor::bit_equal(const Tensor& other) const {
  return shape_ == other.shape_ && data_.size() == other.data_.size() &&
         (data_.empty() || std::memcmp(data_.data(), other.data_.data(), byte_size()) == 0);
}

void insert_unique(TensorMap& map, Tensor tensor) {
  std::string key = tensor.name();
  if (!map.emplace(key, std::move(tensor)).second)
    throw std::invalid_argument("duplicate tensor name '" + key + "'");
}

const Tensor& require(const TensorMap& map, const std::string& name) {
  auto it = map.find(name);
  if (it == map.end()) throw std::out_of_range("tensor '" + name + "' not found");
  return it->second;
}

}  // namespace vce
