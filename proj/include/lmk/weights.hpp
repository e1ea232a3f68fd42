#pragma once

// `.lmkw` weight container. Little-endian layout:
//
//   "LMKW" | version u32 = 1 | tensor count u64
//   per tensor: name length u32 | name bytes | dtype u8 (0 = f32, 1 = f16) | rank u8 |
//               extents u64 x rank | row-major payload | zero padding to an 8-byte file offset
//   CRC32 (IEEE) of every preceding byte, u32

#include <bit>
#include <cstdint>
#include <cstring>
#include <filesystem>
#include <fstream>
#include <iterator>
#include <string>
#include <string_view>
#include <unordered_map>
#include <vector>

#include <zlib.h>

#include "lmk/error.hpp"
#include "lmk/naming.hpp"
#include "lmk/tensor.hpp"

namespace lmk {

inline constexpr std::uint32_t kWeightFormatVersion = 1;
inline constexpr char kWeightMagic[4] = {'L', 'M', 'K', 'W'};

struct WeightEntry {
    std::string name;
    Tensor tensor;
};

/// Insertion-ordered, name-unique collection of tensors.
class WeightStore {
public:
    void add(std::string name, Tensor tensor) {
        if (index_.count(name)) throw ArgumentError("duplicate tensor name '" + name + "'");
        index_.emplace(name, entries_.size());
        entries_.push_back({std::move(name), std::move(tensor)});
    }

    void set(const std::string& name, Tensor tensor) {
        auto it = index_.find(name);
        if (it == index_.end()) throw MissingTensorError(name);
        entries_[it->second].tensor = std::move(tensor);
    }

    bool contains(const std::string& name) const { return index_.count(name) != 0; }

    const Tensor& get(const std::string& name) const {
        auto it = index_.find(name);
        if (it == index_.end()) throw MissingTensorError(name);
        return entries_[it->second].tensor;
    }

    void erase(const std::string& name) {
        auto it = index_.find(name);
        if (it == index_.end()) throw MissingTensorError(name);
        entries_.erase(entries_.begin() + static_cast<std::ptrdiff_t>(it->second));
        index_.clear();
        for (std::size_t i = 0; i < entries_.size(); ++i) index_.emplace(entries_[i].name, i);
    }

    const std::vector<WeightEntry>& entries() const noexcept { return entries_; }
    std::size_t size() const noexcept { return entries_.size(); }
    bool empty() const noexcept { return entries_.empty(); }

    std::size_t element_count() const {
        std::size_t n = 0;
        for (const auto& e : entries_) n += e.tensor.numel();
        return n;
    }

    /// Copy with every tensor converted to `dtype`.
    WeightStore converted(DType dtype) const {
        WeightStore out;
        for (const auto& e : entries_)
            out.add(e.name, dtype == DType::f16 ? e.tensor.to_f16() : e.tensor.to_f32());
        return out;
    }

    friend bool bit_equal(const WeightStore& a, const WeightStore& b) {
        if (a.size() != b.size()) return false;
        for (std::size_t i = 0; i < a.size(); ++i)
            if (a.entries_[i].name != b.entries_[i].name || !bit_equal(a.entries_[i].tensor, b.entries_[i].tensor))
                return false;
        return true;
    }

private:
    std::vector<WeightEntry> entries_;
    std::unordered_map<std::string, std::size_t> index_;
};

inline std::uint32_t crc32_of(std::span<const std::uint8_t> bytes) {
    uLong crc = ::crc32(0L, Z_NULL, 0);
    // zlib takes uInt lengths; feed in chunks.
    std::size_t off = 0;
    while (off < bytes.size()) {
        const auto n = static_cast<uInt>(std::min<std::size_t>(bytes.size() - off, 1u << 30));
        crc = ::crc32(crc, bytes.data() + off, n);
        off += n;
    }
    return static_cast<std::uint32_t>(crc);
}

namespace detail {

inline void put_le(std::vector<std::uint8_t>& out, std::uint64_t v, int bytes) {
    for (int i = 0; i < bytes; ++i) out.push_back(static_cast<std::uint8_t>(v >> (8 * i)));
}

class Reader {
public:
    explicit Reader(std::span<const std::uint8_t> bytes) : bytes_(bytes) {}

    std::uint64_t le(int n, const char* what) {
        need(static_cast<std::size_t>(n), what);
        std::uint64_t v = 0;
        for (int i = 0; i < n; ++i) v |= static_cast<std::uint64_t>(bytes_[pos_ + i]) << (8 * i);
        pos_ += static_cast<std::size_t>(n);
        return v;
    }

    std::span<const std::uint8_t> take(std::size_t n, const char* what) {
        need(n, what);
        auto s = bytes_.subspan(pos_, n);
        pos_ += n;
        return s;
    }

    std::size_t pos() const { return pos_; }

private:
    void need(std::size_t n, const char* what) const {
        if (bytes_.size() - pos_ < n)
            throw TruncatedError(std::string("weight container truncated while reading ") + what);
    }
    std::span<const std::uint8_t> bytes_;
    std::size_t pos_ = 0;
};

} // namespace detail

/// Container bytes without the trailing CRC.
inline std::vector<std::uint8_t> serialize_body(const WeightStore& store) {
    std::vector<std::uint8_t> out(std::begin(kWeightMagic), std::end(kWeightMagic));
    detail::put_le(out, kWeightFormatVersion, 4);
    detail::put_le(out, store.size(), 8);
    for (const auto& e : store.entries()) {
        const Tensor& t = e.tensor;
        detail::put_le(out, e.name.size(), 4);
        out.insert(out.end(), e.name.begin(), e.name.end());
        out.push_back(static_cast<std::uint8_t>(t.dtype()));
        out.push_back(static_cast<std::uint8_t>(t.rank()));
        for (std::size_t d : t.shape()) detail::put_le(out, d, 8);
        if (t.dtype() == DType::f32) {
            for (float v : t.values()) detail::put_le(out, std::bit_cast<std::uint32_t>(v), 4);
        } else {
            for (std::uint16_t v : t.half_bits()) detail::put_le(out, v, 2);
        }
        while (out.size() % 8 != 0) out.push_back(0);
    }
    return out;
}

inline std::vector<std::uint8_t> serialize(const WeightStore& store) {
    auto out = serialize_body(store);
    detail::put_le(out, crc32_of(out), 4);
    return out;
}

/// Checksum recorded in the container trailer.
inline std::uint32_t checksum(const WeightStore& store) { return crc32_of(serialize_body(store)); }

namespace detail {

inline WeightStore parse_body(std::span<const std::uint8_t> body) {
    Reader r(body);
    r.take(8, "header");
    const std::uint64_t count = r.le(8, "tensor count");
    WeightStore store;
    for (std::uint64_t i = 0; i < count; ++i) {
        const auto name_len = static_cast<std::size_t>(r.le(4, "name length"));
        const auto name_bytes = r.take(name_len, "name");
        std::string name(name_bytes.begin(), name_bytes.end());
        const auto dtype = static_cast<std::uint8_t>(r.le(1, "dtype"));
        const auto rank = static_cast<std::size_t>(r.le(1, "rank"));
        if (dtype > 1) throw FormatError("tensor '" + name + "' has unknown dtype " + std::to_string(dtype));
        if (rank == 0 || rank > kMaxRank) throw FormatError("tensor '" + name + "' has invalid rank " + std::to_string(rank));
        Shape shape(rank);
        std::uint64_t numel = 1;
        for (auto& d : shape) {
            d = static_cast<std::size_t>(r.le(8, "extent"));
            if (d == 0 || numel > (std::uint64_t{1} << 40) / d)
                throw FormatError("tensor '" + name + "' has invalid extents");
            numel *= d;
        }
        const std::size_t width = dtype == 0 ? 4 : 2;
        const auto payload = r.take(static_cast<std::size_t>(numel) * width, "tensor data");
        if (dtype == 0) {
            std::vector<float> v(numel);
            for (std::size_t k = 0; k < numel; ++k) {
                std::uint32_t u = 0;
                for (int b = 0; b < 4; ++b) u |= static_cast<std::uint32_t>(payload[k * 4 + b]) << (8 * b);
                v[k] = std::bit_cast<float>(u);
            }
            store.add(std::move(name), Tensor(std::move(shape), std::move(v)));
        } else {
            std::vector<std::uint16_t> v(numel);
            for (std::size_t k = 0; k < numel; ++k)
                v[k] = static_cast<std::uint16_t>(payload[k * 2] | (payload[k * 2 + 1] << 8));
            store.add(std::move(name), Tensor::from_half_bits(std::move(shape), std::move(v)));
        }
        if (r.pos() % 8 != 0) r.take(8 - r.pos() % 8, "padding");
    }
    if (r.pos() != body.size()) throw FormatError("trailing bytes after last tensor");
    return store;
}

} // namespace detail

/// Parses a container. Magic and version are checked first. Running out of bytes is a
/// TruncatedError; any other inconsistency, or a clean parse whose CRC does not match,
/// is a ChecksumError when the CRC disagrees.
inline WeightStore deserialize(std::span<const std::uint8_t> bytes) {
    if (bytes.size() < 4) throw TruncatedError("weight container shorter than its magic");
    if (std::memcmp(bytes.data(), kWeightMagic, 4) != 0) throw BadMagicError("not an .lmkw container (bad magic)");
    if (bytes.size() < 8) throw TruncatedError("weight container truncated while reading version");
    detail::Reader header(bytes.subspan(4, 4));
    const auto version = static_cast<std::uint32_t>(header.le(4, "version"));
    if (version != kWeightFormatVersion) throw VersionError("unsupported .lmkw version " + std::to_string(version));
    if (bytes.size() < 20) throw TruncatedError("weight container shorter than header + CRC");

    const auto body = bytes.first(bytes.size() - 4);
    detail::Reader trailer(bytes.last(4));
    const bool crc_ok = crc32_of(body) == static_cast<std::uint32_t>(trailer.le(4, "crc"));
    WeightStore store;
    try {
        store = detail::parse_body(body);
    } catch (const TruncatedError&) {
        throw;
    } catch (const Error& e) {
        if (!crc_ok) throw ChecksumError("CRC mismatch in weight container");
        throw FormatError(e.what());
    }
    if (!crc_ok) throw ChecksumError("CRC mismatch in weight container");
    return store;
}

inline void save(const WeightStore& store, const std::filesystem::path& path) {
    const auto bytes = serialize(store);
    std::ofstream out(path, std::ios::binary | std::ios::trunc);
    if (!out) throw IoError("cannot write " + path.string());
    out.write(reinterpret_cast<const char*>(bytes.data()), static_cast<std::streamsize>(bytes.size()));
    if (!out) throw IoError("write failed for " + path.string());
}

inline std::vector<std::uint8_t> read_file_bytes(const std::filesystem::path& path) {
    std::ifstream in(path, std::ios::binary);
    if (!in) throw IoError("cannot open " + path.string());
    return {std::istreambuf_iterator<char>(in), std::istreambuf_iterator<char>()};
}

inline WeightStore load(const std::filesystem::path& path) { return deserialize(read_file_bytes(path)); }

// ---------------------------------------------------------------------------
// Validation against the canonical naming scheme
// ---------------------------------------------------------------------------

struct ShapeMismatch {
    std::string name;
    Shape expected;
    Shape actual;
};

struct ValidationReport {
    std::vector<std::string> missing;
    std::vector<std::string> extra;
    std::vector<ShapeMismatch> mismatched;

    bool ok() const { return missing.empty() && extra.empty() && mismatched.empty(); }

    std::string describe() const {
        std::string s;
        for (const auto& m : missing) s += "missing: " + m + "\n";
        for (const auto& m : extra) s += "extra: " + m + "\n";
        for (const auto& m : mismatched)
            s += "shape mismatch: " + m.name + " expected " + to_string(m.expected) + " got " + to_string(m.actual) + "\n";
        return s;
    }
};

inline ValidationReport validate_against_config(const WeightStore& store, const ModelConfig& config) {
    ValidationReport report;
    std::unordered_map<std::string, const ParamSpec*> expected;
    const auto specs = parameter_specs(config);
    for (const auto& p : specs) {
        expected.emplace(p.name, &p);
        if (!store.contains(p.name))
            report.missing.push_back(p.name);
        else if (store.get(p.name).shape() != p.shape)
            report.mismatched.push_back({p.name, p.shape, store.get(p.name).shape()});
    }
    for (const auto& e : store.entries())
        if (!expected.count(e.name)) report.extra.push_back(e.name);
    return report;
}

} // namespace lmk
