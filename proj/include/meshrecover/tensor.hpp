// Dense row-major tensor with a small fixed set of element types. Storage
// comes from a thread-local size-keyed pool: autodiff tapes allocate and drop
// thousands of identically shaped buffers per training step, and recycling
// them keeps the hot loops out of the allocator.
#pragma once

#include <cstddef>
#include <cstdint>
#include <cstring>
#include <initializer_list>
#include <new>
#include <sstream>
#include <string>
#include <unordered_map>
#include <utility>
#include <vector>

#include "errors.hpp"

namespace meshrecover {

namespace pool_detail {

class BufferPool {
public:
    void* acquire(std::size_t bytes) {
        auto it = free_.find(bytes);
        if (it != free_.end() && !it->second.empty()) {
            void* p = it->second.back();
            it->second.pop_back();
            return p;
        }
        return ::operator new(bytes);
    }
    void release(void* p, std::size_t bytes) { free_[bytes].push_back(p); }
    ~BufferPool() {
        for (auto& [bytes, ptrs] : free_)
            for (void* p : ptrs) ::operator delete(p);
    }

private:
    std::unordered_map<std::size_t, std::vector<void*>> free_;
};

inline BufferPool& pool() {
    thread_local BufferPool p;
    return p;
}

}  // namespace pool_detail

// Pooled, trivially-typed flat buffer. Elements are uninitialized on
// allocation; Tensor decides whether to zero them.
template <class T>
class Buffer {
    static_assert(std::is_trivial_v<T>, "Buffer requires a trivial element type");

public:
    Buffer() = default;
    explicit Buffer(std::size_t n) : size_(n) {
        if (n) data_ = static_cast<T*>(pool_detail::pool().acquire(n * sizeof(T)));
    }
    Buffer(const Buffer& o) : Buffer(o.size_) {
        if (size_) std::memcpy(data_, o.data_, size_ * sizeof(T));
    }
    Buffer(Buffer&& o) noexcept : data_(o.data_), size_(o.size_) {
        o.data_ = nullptr;
        o.size_ = 0;
    }
    Buffer& operator=(const Buffer& o) {
        if (this != &o) {
            Buffer tmp(o);
            swap(tmp);
        }
        return *this;
    }
    Buffer& operator=(Buffer&& o) noexcept {
        swap(o);
        return *this;
    }
    ~Buffer() {
        if (data_) pool_detail::pool().release(data_, size_ * sizeof(T));
    }
    void swap(Buffer& o) noexcept {
        std::swap(data_, o.data_);
        std::swap(size_, o.size_);
    }

    std::size_t size() const { return size_; }
    T* data() { return data_; }
    const T* data() const { return data_; }
    T& operator[](std::size_t i) { return data_[i]; }
    const T& operator[](std::size_t i) const { return data_[i]; }

private:
    T* data_ = nullptr;
    std::size_t size_ = 0;
};

enum class Dtype : std::uint32_t { F32 = 0, F64 = 1, U8 = 2 };

template <class T>
struct dtype_of;
template <>
struct dtype_of<float> {
    static constexpr Dtype value = Dtype::F32;
};
template <>
struct dtype_of<double> {
    static constexpr Dtype value = Dtype::F64;
};
template <>
struct dtype_of<std::uint8_t> {
    static constexpr Dtype value = Dtype::U8;
};

inline std::size_t dtype_size(Dtype d) {
    switch (d) {
        case Dtype::F32: return 4;
        case Dtype::F64: return 8;
        case Dtype::U8: return 1;
    }
    throw FormatError("unknown dtype tag");
}

inline const char* dtype_name(Dtype d) {
    switch (d) {
        case Dtype::F32: return "f32";
        case Dtype::F64: return "f64";
        case Dtype::U8: return "u8";
    }
    return "?";
}

inline std::size_t shape_count(const std::vector<std::size_t>& shape) {
    std::size_t n = 1;
    for (std::size_t d : shape) n *= d;
    return n;
}

inline std::string shape_str(const std::vector<std::size_t>& shape) {
    std::ostringstream os;
    os << "(";
    for (std::size_t i = 0; i < shape.size(); ++i) os << (i ? "," : "") << shape[i];
    os << ")";
    return os.str();
}

template <class T>
class Tensor {
public:
    using value_type = T;

    Tensor() = default;
    explicit Tensor(std::vector<std::size_t> shape)
        : shape_(std::move(shape)), data_(shape_count(shape_)) {
        if (data_.size()) std::memset(data_.data(), 0, data_.size() * sizeof(T));
    }
    Tensor(std::initializer_list<std::size_t> shape)
        : Tensor(std::vector<std::size_t>(shape)) {}

    // Uninitialized variant for outputs every element of which is about to be
    // overwritten.
    static Tensor uninit(std::vector<std::size_t> shape) {
        Tensor t;
        t.shape_ = std::move(shape);
        t.data_ = Buffer<T>(shape_count(t.shape_));
        return t;
    }

    static Tensor from(std::vector<std::size_t> shape, const std::vector<T>& data) {
        if (shape_count(shape) != data.size())
            throw std::invalid_argument("Tensor::from: shape " + shape_str(shape) +
                                        " does not match data size " + std::to_string(data.size()));
        Tensor t = uninit(std::move(shape));
        if (!data.empty()) std::memcpy(t.data(), data.data(), data.size() * sizeof(T));
        return t;
    }

    std::size_t rank() const { return shape_.size(); }
    const std::vector<std::size_t>& shape() const { return shape_; }
    std::size_t dim(std::size_t i) const { return shape_.at(i); }
    std::size_t size() const { return data_.size(); }
    bool empty() const { return data_.size() == 0; }

    T* data() { return data_.data(); }
    const T* data() const { return data_.data(); }
    std::vector<T> to_vector() const { return std::vector<T>(data(), data() + size()); }

    T& operator[](std::size_t i) { return data_[i]; }
    const T& operator[](std::size_t i) const { return data_[i]; }

    // 2-D access; tensor must have rank 2.
    T& at(std::size_t i, std::size_t j) { return data_[i * shape_[1] + j]; }
    const T& at(std::size_t i, std::size_t j) const { return data_[i * shape_[1] + j]; }

    // 3-D access; tensor must have rank 3.
    T& at3(std::size_t i, std::size_t j, std::size_t k) {
        return data_[(i * shape_[1] + j) * shape_[2] + k];
    }
    const T& at3(std::size_t i, std::size_t j, std::size_t k) const {
        return data_[(i * shape_[1] + j) * shape_[2] + k];
    }

    std::size_t rows() const { return shape_.empty() ? 0 : shape_[0]; }
    std::size_t cols() const { return shape_.size() < 2 ? 0 : shape_[1]; }

    bool same_shape(const Tensor& o) const { return shape_ == o.shape_; }

    void fill(T v) {
        for (std::size_t i = 0; i < data_.size(); ++i) data_[i] = v;
    }

    template <class U>
    Tensor<U> cast() const {
        Tensor<U> out = Tensor<U>::uninit(shape_);
        for (std::size_t i = 0; i < data_.size(); ++i) out[i] = static_cast<U>(data_[i]);
        return out;
    }

private:
    std::vector<std::size_t> shape_;
    Buffer<T> data_;
};

}  // namespace meshrecover
