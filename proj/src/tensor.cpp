#include "lfusion/tensor.hpp"

#include <cmath>
#include <cstring>
#include <fstream>
#include <limits>
#include <sstream>

namespace lfusion {

namespace {

std::size_t checked_numel(const std::vector<std::size_t>& shape) {
    if (shape.empty()) throw DataError("tensor shape must have at least one extent");
    std::uint64_t n = 1;
    for (std::size_t e : shape) {
        if (e == 0) throw DataError("tensor extent must be >= 1");
        if (e > std::numeric_limits<std::uint32_t>::max())
            throw DataError("tensor extent exceeds u32 range");
        std::uint64_t next = n * static_cast<std::uint64_t>(e);
        if (next / e != n || next > (1ULL << 33))
            throw DataError("tensor element count overflow");
        n = next;
    }
    return static_cast<std::size_t>(n);
}

}  // namespace

Tensor::Tensor(std::vector<std::size_t> shape, float fill) : shape_(std::move(shape)) {
    data_.assign(checked_numel(shape_), fill);
}

Tensor Tensor::from_data(std::vector<std::size_t> shape, std::vector<float> data) {
    Tensor t;
    t.shape_ = std::move(shape);
    if (checked_numel(t.shape_) != data.size())
        throw DataError("tensor data length does not match shape");
    t.data_ = std::move(data);
    return t;
}

std::vector<std::size_t> Tensor::strides() const {
    std::vector<std::size_t> s(shape_.size(), 1);
    for (std::size_t i = shape_.size(); i-- > 1;) s[i - 1] = s[i] * shape_[i];
    return s;
}

std::size_t Tensor::offset(const std::vector<std::size_t>& index) const {
    if (index.size() != shape_.size()) throw DataError("index rank mismatch");
    std::size_t off = 0, stride = 1;
    for (std::size_t i = shape_.size(); i-- > 0;) {
        if (index[i] >= shape_[i]) throw DataError("index out of range");
        off += index[i] * stride;
        stride *= shape_[i];
    }
    return off;
}

Tensor Tensor::reshaped(std::vector<std::size_t> shape) const {
    Tensor t;
    t.shape_ = std::move(shape);
    if (checked_numel(t.shape_) != data_.size())
        throw DataError("reshape element count mismatch");
    t.data_ = data_;
    return t;
}

bool Tensor::all_finite() const {
    for (float v : data_)
        if (!std::isfinite(v)) return false;
    return true;
}

double Tensor::sum() const {
    double acc = 0.0;
    for (float v : data_) acc += v;
    return acc;
}

double Tensor::dot(const Tensor& other) const {
    if (numel() != other.numel()) throw DataError("dot length mismatch");
    double acc = 0.0;
    for (std::size_t i = 0; i < data_.size(); ++i)
        acc += static_cast<double>(data_[i]) * static_cast<double>(other.data_[i]);
    return acc;
}

float Tensor::min_value() const {
    float m = data_.empty() ? 0.0f : data_[0];
    for (float v : data_) m = std::min(m, v);
    return m;
}

float Tensor::max_value() const {
    float m = data_.empty() ? 0.0f : data_[0];
    for (float v : data_) m = std::max(m, v);
    return m;
}

void Tensor::fill(float v) { std::fill(data_.begin(), data_.end(), v); }

void Tensor::add_scaled(const Tensor& other, float scale) {
    if (numel() != other.numel()) throw DataError("add_scaled length mismatch");
    for (std::size_t i = 0; i < data_.size(); ++i) data_[i] += scale * other.data_[i];
}

Tensor tensor_new(const std::vector<std::size_t>& shape, float fill) {
    return Tensor(shape, fill);
}

void ensure_finite(const Tensor& t, const std::string& what) {
    if (!t.all_finite()) throw NumericError("non-finite values in " + what);
}

namespace {

constexpr char kMagic[4] = {'L', 'F', 'T', '1'};

void put_u32(std::ostream& os, std::uint32_t v) {
    unsigned char b[4] = {static_cast<unsigned char>(v & 0xff),
                          static_cast<unsigned char>((v >> 8) & 0xff),
                          static_cast<unsigned char>((v >> 16) & 0xff),
                          static_cast<unsigned char>((v >> 24) & 0xff)};
    os.write(reinterpret_cast<const char*>(b), 4);
}

std::uint32_t get_u32(std::istream& is, const std::string& origin) {
    unsigned char b[4];
    if (!is.read(reinterpret_cast<char*>(b), 4))
        throw DataError("truncated tensor header in " + origin);
    return static_cast<std::uint32_t>(b[0]) | (static_cast<std::uint32_t>(b[1]) << 8) |
           (static_cast<std::uint32_t>(b[2]) << 16) | (static_cast<std::uint32_t>(b[3]) << 24);
}

}  // namespace

void tensor_write(const Tensor& t, std::ostream& os) {
    os.write(kMagic, 4);
    unsigned char nd = static_cast<unsigned char>(t.ndim());
    os.put(static_cast<char>(nd));
    for (std::size_t e : t.shape()) put_u32(os, static_cast<std::uint32_t>(e));
    static_assert(sizeof(float) == 4);
    for (float v : t.vec()) {
        std::uint32_t bits;
        std::memcpy(&bits, &v, 4);
        put_u32(os, bits);
    }
}

Tensor tensor_read(std::istream& is, const std::string& origin) {
    char magic[4];
    if (!is.read(magic, 4)) throw DataError("truncated tensor file: " + origin);
    if (std::memcmp(magic, kMagic, 4) != 0)
        throw DataError("bad magic in tensor file: " + origin);
    int nd = is.get();
    if (nd == EOF) throw DataError("truncated tensor header in " + origin);
    if (nd < 1) throw DataError("tensor ndim must be >= 1 in " + origin);
    std::vector<std::size_t> shape(static_cast<std::size_t>(nd));
    for (auto& e : shape) e = get_u32(is, origin);
    std::size_t n = checked_numel(shape);
    std::vector<float> data(n);
    for (std::size_t i = 0; i < n; ++i) {
        unsigned char b[4];
        if (!is.read(reinterpret_cast<char*>(b), 4))
            throw DataError("truncated tensor payload in " + origin);
        std::uint32_t bits = static_cast<std::uint32_t>(b[0]) |
                             (static_cast<std::uint32_t>(b[1]) << 8) |
                             (static_cast<std::uint32_t>(b[2]) << 16) |
                             (static_cast<std::uint32_t>(b[3]) << 24);
        std::memcpy(&data[i], &bits, 4);
    }
    return Tensor::from_data(std::move(shape), std::move(data));
}

void tensor_write(const Tensor& t, const std::string& path) {
    std::ofstream os(path, std::ios::binary);
    if (!os) throw DataError("cannot open for write: " + path);
    tensor_write(t, os);
    if (!os) throw DataError("write failed: " + path);
}

Tensor tensor_read(const std::string& path) {
    std::ifstream is(path, std::ios::binary);
    if (!is) throw DataError("cannot open for read: " + path);
    Tensor t = tensor_read(is, path);
    if (is.peek() != EOF) throw DataError("trailing bytes in tensor file: " + path);
    return t;
}

}  // namespace lfusion
