#include "anchorseg/blob_io.hpp"

#include <zlib.h>

#include <cstring>
#include <filesystem>
#include <fstream>
#include <numeric>
#include <sstream>

namespace fs = std::filesystem;

namespace anchorseg {

namespace {

constexpr const char* kMagic = "anchorseg-container v1";

std::uint32_t crc_of(const std::vector<std::uint8_t>& bytes) {
    return static_cast<std::uint32_t>(
        crc32(0L, bytes.empty() ? Z_NULL : bytes.data(), static_cast<uInt>(bytes.size())));
}

template <typename T>
std::vector<std::uint8_t> to_bytes(const std::vector<T>& v) {
    std::vector<std::uint8_t> out(v.size() * sizeof(T));
    if (!v.empty()) std::memcpy(out.data(), v.data(), out.size());
    return out;
}

template <typename T>
std::vector<T> from_bytes(const std::vector<std::uint8_t>& b, const char* what) {
    if (b.size() % sizeof(T) != 0) throw FormatError(std::string("payload size not a multiple of element size for ") + what);
    std::vector<T> out(b.size() / sizeof(T));
    if (!b.empty()) std::memcpy(out.data(), b.data(), b.size());
    return out;
}

}  // namespace

std::size_t dtype_size(DType d) {
    switch (d) {
        case DType::F64: return 8;
        case DType::U8: return 1;
        case DType::U16: return 2;
        case DType::U64: return 8;
    }
    return 0;
}

std::string dtype_name(DType d) {
    switch (d) {
        case DType::F64: return "f64";
        case DType::U8: return "u8";
        case DType::U16: return "u16";
        case DType::U64: return "u64";
    }
    return "?";
}

DType dtype_parse(const std::string& s) {
    if (s == "f64") return DType::F64;
    if (s == "u8") return DType::U8;
    if (s == "u16") return DType::U16;
    if (s == "u64") return DType::U64;
    throw FormatError("unknown dtype '" + s + "'");
}

std::int64_t Field::numel() const {
    return std::accumulate(shape.begin(), shape.end(), std::int64_t{1}, std::multiplies<>());
}

Field Field::f64(std::vector<std::int64_t> shape, const std::vector<double>& v) {
    return {DType::F64, std::move(shape), to_bytes(v)};
}
Field Field::u8(std::vector<std::int64_t> shape, const std::vector<std::uint8_t>& v) {
    return {DType::U8, std::move(shape), v};
}
Field Field::u16(std::vector<std::int64_t> shape, const std::vector<std::uint16_t>& v) {
    return {DType::U16, std::move(shape), to_bytes(v)};
}
Field Field::u64(std::vector<std::int64_t> shape, const std::vector<std::uint64_t>& v) {
    return {DType::U64, std::move(shape), to_bytes(v)};
}

std::vector<double> Field::as_f64() const { return from_bytes<double>(bytes, "f64 field"); }
std::vector<std::uint8_t> Field::as_u8() const { return bytes; }
std::vector<std::uint16_t> Field::as_u16() const { return from_bytes<std::uint16_t>(bytes, "u16 field"); }
std::vector<std::uint64_t> Field::as_u64() const { return from_bytes<std::uint64_t>(bytes, "u64 field"); }

void Container::set(const std::string& name, Field field) {
    if (static_cast<std::size_t>(field.numel()) * dtype_size(field.dtype) != field.bytes.size())
        throw FormatError("field '" + name + "': shape does not match payload size");
    fields_[name] = std::move(field);
}

bool Container::has(const std::string& name) const { return fields_.count(name) != 0; }

const Field& Container::get(const std::string& name) const {
    auto it = fields_.find(name);
    if (it == fields_.end()) throw FormatError("missing field '" + name + "'");
    return it->second;
}

void Container::write(const std::string& dir) const {
    fs::create_directories(dir);
    std::ostringstream manifest;
    manifest << kMagic << "\n";
    std::vector<std::uint8_t> payload;
    for (const auto& [name, f] : fields_) {
        std::uint64_t offset = payload.size();
        manifest << name << " " << dtype_name(f.dtype) << " ";
        if (f.shape.empty()) {
            manifest << "scalar";
        } else {
            for (std::size_t i = 0; i < f.shape.size(); ++i)
                manifest << (i ? "x" : "") << f.shape[i];
        }
        manifest << " " << offset << " " << crc_of(f.bytes) << "\n";
        payload.insert(payload.end(), f.bytes.begin(), f.bytes.end());
    }
    {
        std::ofstream mf(fs::path(dir) / "manifest.txt", std::ios::trunc);
        if (!mf) throw FormatError("cannot write manifest in '" + dir + "'");
        mf << manifest.str();
    }
    {
        std::ofstream bf(fs::path(dir) / "data.bin", std::ios::trunc | std::ios::binary);
        if (!bf) throw FormatError("cannot write payload in '" + dir + "'");
        bf.write(reinterpret_cast<const char*>(payload.data()),
                 static_cast<std::streamsize>(payload.size()));
    }
}

Container Container::read(const std::string& dir) {
    fs::path mpath = fs::path(dir) / "manifest.txt";
    std::ifstream mf(mpath);
    if (!mf) throw FormatError("missing manifest at '" + mpath.string() + "'");
    std::string line;
    if (!std::getline(mf, line) || line != kMagic)
        throw FormatError("malformed header in '" + mpath.string() + "'");

    std::ifstream bf(fs::path(dir) / "data.bin", std::ios::binary);
    if (!bf) throw FormatError("missing payload data.bin in '" + dir + "'");
    std::vector<std::uint8_t> payload((std::istreambuf_iterator<char>(bf)),
                                      std::istreambuf_iterator<char>());

    Container c;
    while (std::getline(mf, line)) {
        if (line.empty()) continue;
        std::istringstream ss(line);
        std::string name, dtype_s, shape_s;
        std::uint64_t offset = 0;
        std::uint32_t crc = 0;
        if (!(ss >> name >> dtype_s >> shape_s >> offset >> crc))
            throw FormatError("malformed manifest line: '" + line + "'");
        Field f;
        f.dtype = dtype_parse(dtype_s);
        if (shape_s != "scalar") {
            std::istringstream shs(shape_s);
            std::string tok;
            while (std::getline(shs, tok, 'x')) {
                try {
                    f.shape.push_back(std::stoll(tok));
                } catch (...) {
                    throw FormatError("field '" + name + "': malformed shape '" + shape_s + "'");
                }
            }
        }
        std::size_t nbytes = static_cast<std::size_t>(f.numel()) * dtype_size(f.dtype);
        if (offset + nbytes > payload.size())
            throw FormatError("field '" + name + "': truncated payload");
        f.bytes.assign(payload.begin() + offset, payload.begin() + offset + nbytes);
        if (crc_of(f.bytes) != crc)
            throw FormatError("field '" + name + "': checksum mismatch");
        c.fields_[name] = std::move(f);
    }
    return c;
}

}  // namespace anchorseg
