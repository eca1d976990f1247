#include "idg/checkpoint.hpp"

#include <bit>
#include <cstring>
#include <fstream>
#include <stdexcept>

static_assert(std::endian::native == std::endian::little, "container io assumes a little-endian host");

namespace idg {

namespace {

template <typename T>
void append_scalar(std::vector<std::uint8_t>& out, T v) {
    const auto* p = reinterpret_cast<const std::uint8_t*>(&v);
    out.insert(out.end(), p, p + sizeof(T));
}

template <typename T>
T read_scalar(const std::vector<std::uint8_t>& in, std::size_t& pos) {
    if (pos + sizeof(T) > in.size()) throw std::runtime_error("container: truncated input");
    T v;
    std::memcpy(&v, in.data() + pos, sizeof(T));
    pos += sizeof(T);
    return v;
}

std::vector<std::uint8_t> to_raw(const void* data, std::size_t bytes) {
    const auto* p = static_cast<const std::uint8_t*>(data);
    return std::vector<std::uint8_t>(p, p + bytes);
}

}  // namespace

void Container::set_meta(const std::string& key, const std::string& value) {
    if (key.find('=') != std::string::npos || key.find('\n') != std::string::npos)
        throw std::invalid_argument("container: metadata key may not contain '=' or newline: " + key);
    if (value.find('\n') != std::string::npos)
        throw std::invalid_argument("container: metadata value may not contain newline: " + key);
    for (auto& kv : meta_) {
        if (kv.first == key) {
            kv.second = value;
            return;
        }
    }
    meta_.emplace_back(key, value);
}

std::optional<std::string> Container::meta(const std::string& key) const {
    for (const auto& kv : meta_) {
        if (kv.first == key) return kv.second;
    }
    return std::nullopt;
}

std::string Container::meta_or_throw(const std::string& key) const {
    auto v = meta(key);
    if (!v) throw std::runtime_error("container: missing metadata key '" + key + "'");
    return *v;
}

void Container::put(const std::string& name, const Tensor<float>& t) {
    if (has(name)) throw std::invalid_argument("container: duplicate tensor '" + name + "'");
    records_.push_back({name, Dtype::f32, t.shape(), to_raw(t.data(), sizeof(float) * t.values().size())});
}

void Container::put(const std::string& name, const Tensor<double>& t) {
    if (has(name)) throw std::invalid_argument("container: duplicate tensor '" + name + "'");
    records_.push_back({name, Dtype::f64, t.shape(), to_raw(t.data(), sizeof(double) * t.values().size())});
}

bool Container::has(const std::string& name) const {
    for (const auto& r : records_) {
        if (r.name == name) return true;
    }
    return false;
}

const Container::Record& Container::record(const std::string& name) const {
    for (const auto& r : records_) {
        if (r.name == name) return r;
    }
    throw std::runtime_error("container: no tensor named '" + name + "'");
}

Container::Dtype Container::dtype_of(const std::string& name) const { return record(name).dtype; }

const Shape& Container::shape_of(const std::string& name) const { return record(name).dims; }

std::vector<std::string> Container::tensor_names() const {
    std::vector<std::string> names;
    names.reserve(records_.size());
    for (const auto& r : records_) names.push_back(r.name);
    return names;
}

template <typename T>
Tensor<T> Container::get(const std::string& name) const {
    const Record& r = record(name);
    const Dtype want = std::is_same_v<T, float> ? Dtype::f32 : Dtype::f64;
    if (r.dtype != want)
        throw std::runtime_error("container: tensor '" + name + "' has a different element type");
    std::vector<T> vals(r.raw.size() / sizeof(T));
    std::memcpy(vals.data(), r.raw.data(), r.raw.size());
    return Tensor<T>(r.dims, std::move(vals));
}

template Tensor<float> Container::get<float>(const std::string&) const;
template Tensor<double> Container::get<double>(const std::string&) const;

std::vector<std::uint8_t> Container::serialize() const {
    std::vector<std::uint8_t> out;
    out.insert(out.end(), {'I', 'D', 'G', 'C'});
    append_scalar<std::uint32_t>(out, kVersion);

    std::string meta_block;
    for (const auto& kv : meta_) {
        meta_block += kv.first;
        meta_block += '=';
        meta_block += kv.second;
        meta_block += '\n';
    }
    append_scalar<std::uint64_t>(out, meta_block.size());
    out.insert(out.end(), meta_block.begin(), meta_block.end());

    append_scalar<std::uint64_t>(out, records_.size());
    for (const auto& r : records_) {
        append_scalar<std::uint32_t>(out, static_cast<std::uint32_t>(r.name.size()));
        out.insert(out.end(), r.name.begin(), r.name.end());
        append_scalar<std::uint8_t>(out, static_cast<std::uint8_t>(r.dtype));
        append_scalar<std::uint32_t>(out, static_cast<std::uint32_t>(r.dims.size()));
        for (auto d : r.dims) append_scalar<std::uint64_t>(out, static_cast<std::uint64_t>(d));
        out.insert(out.end(), r.raw.begin(), r.raw.end());
    }
    return out;
}

Container Container::deserialize(const std::vector<std::uint8_t>& bytes) {
    std::size_t pos = 0;
    if (bytes.size() < 8 || bytes[0] != 'I' || bytes[1] != 'D' || bytes[2] != 'G' || bytes[3] != 'C')
        throw std::runtime_error("container: bad magic (not an IDGC file)");
    pos = 4;
    const auto version = read_scalar<std::uint32_t>(bytes, pos);
    if (version != kVersion)
        throw std::runtime_error("container: unsupported format version " + std::to_string(version) +
                                 " (reader supports " + std::to_string(kVersion) + ")");

    Container c;
    const auto meta_len = read_scalar<std::uint64_t>(bytes, pos);
    if (pos + meta_len > bytes.size()) throw std::runtime_error("container: truncated metadata block");
    std::string meta_block(bytes.begin() + static_cast<std::ptrdiff_t>(pos),
                           bytes.begin() + static_cast<std::ptrdiff_t>(pos + meta_len));
    pos += meta_len;
    std::size_t start = 0;
    while (start < meta_block.size()) {
        std::size_t nl = meta_block.find('\n', start);
        if (nl == std::string::npos) throw std::runtime_error("container: unterminated metadata line");
        std::string line = meta_block.substr(start, nl - start);
        start = nl + 1;
        std::size_t eq = line.find('=');
        if (eq == std::string::npos) throw std::runtime_error("container: malformed metadata line '" + line + "'");
        c.meta_.emplace_back(line.substr(0, eq), line.substr(eq + 1));
    }

    const auto count = read_scalar<std::uint64_t>(bytes, pos);
    for (std::uint64_t i = 0; i < count; ++i) {
        Record r;
        const auto name_len = read_scalar<std::uint32_t>(bytes, pos);
        if (pos + name_len > bytes.size()) throw std::runtime_error("container: truncated tensor name");
        r.name.assign(bytes.begin() + static_cast<std::ptrdiff_t>(pos),
                      bytes.begin() + static_cast<std::ptrdiff_t>(pos + name_len));
        pos += name_len;
        const auto code = read_scalar<std::uint8_t>(bytes, pos);
        if (code > 1) throw std::runtime_error("container: unknown element type code " + std::to_string(code));
        r.dtype = static_cast<Dtype>(code);
        const auto rank = read_scalar<std::uint32_t>(bytes, pos);
        std::uint64_t numel = 1;
        for (std::uint32_t k = 0; k < rank; ++k) {
            const auto d = read_scalar<std::uint64_t>(bytes, pos);
            r.dims.push_back(static_cast<std::int64_t>(d));
            numel *= d;
        }
        const std::size_t payload = numel * (r.dtype == Dtype::f32 ? 4 : 8);
        if (pos + payload > bytes.size())
            throw std::runtime_error("container: declared size of '" + r.name + "' exceeds payload");
        r.raw.assign(bytes.begin() + static_cast<std::ptrdiff_t>(pos),
                     bytes.begin() + static_cast<std::ptrdiff_t>(pos + payload));
        pos += payload;
        c.records_.push_back(std::move(r));
    }
    if (pos != bytes.size()) throw std::runtime_error("container: trailing bytes after tensor table");
    return c;
}

void Container::save(const std::string& path) const {
    const auto bytes = serialize();
    std::ofstream f(path, std::ios::binary | std::ios::trunc);
    if (!f) throw std::runtime_error("container: cannot open '" + path + "' for writing");
    f.write(reinterpret_cast<const char*>(bytes.data()), static_cast<std::streamsize>(bytes.size()));
    if (!f) throw std::runtime_error("container: write failed for '" + path + "'");
}

Container Container::load(const std::string& path) {
    std::ifstream f(path, std::ios::binary);
    if (!f) throw std::runtime_error("container: cannot open '" + path + "'");
    std::vector<std::uint8_t> bytes((std::istreambuf_iterator<char>(f)), std::istreambuf_iterator<char>());
    return deserialize(bytes);
}

}  // namespace idg
