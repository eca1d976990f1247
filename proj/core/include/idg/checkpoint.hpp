#pragma once

#include <cstdint>
#include <optional>
#include <string>
#include <utility>
#include <vector>

#include "idg/tensor.hpp"

namespace idg {

/// Binary tensor container ("IDGC"): magic, u32 LE format version, a UTF-8
/// metadata block of key=value lines, and a table of named tensors stored as
/// raw little-endian f32/f64 values. Writing a loaded container reproduces
/// the input byte for byte.
class Container {
public:
    enum class Dtype : std::uint8_t { f32 = 0, f64 = 1 };

    static constexpr std::uint32_t kVersion = 1;

    void set_meta(const std::string& key, const std::string& value);
    std::optional<std::string> meta(const std::string& key) const;
    std::string meta_or_throw(const std::string& key) const;
    const std::vector<std::pair<std::string, std::string>>& meta_lines() const { return meta_; }

    void put(const std::string& name, const Tensor<float>& t);
    void put(const std::string& name, const Tensor<double>& t);

    bool has(const std::string& name) const;
    Dtype dtype_of(const std::string& name) const;
    const Shape& shape_of(const std::string& name) const;
    std::vector<std::string> tensor_names() const;

    /// Exact-dtype fetch; throws on name or dtype mismatch.
    template <typename T>
    Tensor<T> get(const std::string& name) const;

    std::vector<std::uint8_t> serialize() const;
    static Container deserialize(const std::vector<std::uint8_t>& bytes);

    void save(const std::string& path) const;
    static Container load(const std::string& path);

private:
    struct Record {
        std::string name;
        Dtype dtype;
        Shape dims;
        std::vector<std::uint8_t> raw;
    };

    const Record& record(const std::string& name) const;

    std::vector<std::pair<std::string, std::string>> meta_;
    std::vector<Record> records_;
};

}  // namespace idg
