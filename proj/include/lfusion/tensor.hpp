#pragma once

#include <cstdint>
#include <cstddef>
#include <string>
#include <vector>
#include <iosfwd>

#include "lfusion/common.hpp"

namespace lfusion {

// Dense row-major float32 array (last index fastest). Reductions that feed
// metrics or statistics accumulate in double.
class Tensor {
public:
    Tensor() = default;
    Tensor(std::vector<std::size_t> shape, float fill = 0.0f);

    static Tensor scalar(float v) { return Tensor({1}, v); }
    static Tensor from_data(std::vector<std::size_t> shape, std::vector<float> data);

    const std::vector<std::size_t>& shape() const { return shape_; }
    std::size_t ndim() const { return shape_.size(); }
    std::size_t extent(std::size_t axis) const { return shape_.at(axis); }
    std::size_t numel() const { return data_.size(); }
    bool empty() const { return data_.empty(); }

    float* data() { return data_.data(); }
    const float* data() const { return data_.data(); }
    std::vector<float>& vec() { return data_; }
    const std::vector<float>& vec() const { return data_; }

    float& operator[](std::size_t i) { return data_[i]; }
    float operator[](std::size_t i) const { return data_[i]; }

    // Row-major strides, element count per step along each axis.
    std::vector<std::size_t> strides() const;
    std::size_t offset(const std::vector<std::size_t>& index) const;
    float at(const std::vector<std::size_t>& index) const { return data_[offset(index)]; }
    float& at(const std::vector<std::size_t>& index) { return data_[offset(index)]; }

    // Same data, new shape; element count must match.
    Tensor reshaped(std::vector<std::size_t> shape) const;

    bool same_shape(const Tensor& other) const { return shape_ == other.shape_; }
    bool all_finite() const;

    double sum() const;           // f64 accumulation
    double dot(const Tensor& other) const;
    float min_value() const;
    float max_value() const;

    void fill(float v);
    void add_scaled(const Tensor& other, float scale);  // this += scale * other

private:
    std::vector<std::size_t> shape_;
    std::vector<float> data_;
};

Tensor tensor_new(const std::vector<std::size_t>& shape, float fill);

// Throws NumericError naming `what` if any element is NaN/Inf.
void ensure_finite(const Tensor& t, const std::string& what);

// "LFT1" byte format: magic, u8 ndim, ndim x u32 LE extents, f32 LE payload.
void tensor_write(const Tensor& t, const std::string& path);
Tensor tensor_read(const std::string& path);
void tensor_write(const Tensor& t, std::ostream& os);
Tensor tensor_read(std::istream& is, const std::string& origin);

}  // namespace lfusion
