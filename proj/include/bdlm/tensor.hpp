// SPDX-License-Identifier: Apache-2.0

#pragma once

#include <cstdint>
#include <initializer_list>
#include <memory>
#include <span>
#include <string>
#include <vector>

namespace bdlm {

using Shape = std::vector<int64_t>;

int64_t shape_numel(const Shape& shape);
std::string shape_str(const Shape& shape);

/// Immutable dense f32 tensor in row-major order. Copies share storage.
class Tensor {
 public:
  Tensor();
  Tensor(Shape shape, std::vector<float> data);

  static Tensor zeros(Shape shape);
  static Tensor full(Shape shape, float value);
  static Tensor scalar(float value);

  const Shape& shape() const { return shape_; }
  int64_t rank() const { return static_cast<int64_t>(shape_.size()); }
  int64_t numel() const { return static_cast<int64_t>(data_->size()); }
  int64_t dim(int64_t i) const { return shape_.at(static_cast<size_t>(i)); }

  // Matrix view helpers. A rank-1 tensor is a single row.
  int64_t rows() const;
  int64_t cols() const;

  std::span<const float> data() const { return *data_; }
  const float* ptr() const { return data_->data(); }

  float item() const;
  float operator[](int64_t i) const { return (*data_)[static_cast<size_t>(i)]; }
  float at(int64_t r, int64_t c) const { return (*data_)[static_cast<size_t>(r * cols() + c)]; }

  std::vector<float> to_vector() const { return *data_; }

  bool all_finite() const;
  bool same_bytes(const Tensor& other) const;

 private:
  Shape shape_;
  std::shared_ptr<const std::vector<float>> data_;
};

float max_abs_diff(const Tensor& a, const Tensor& b);

}  // namespace bdlm
