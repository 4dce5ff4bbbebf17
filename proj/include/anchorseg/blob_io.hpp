#pragma once

#include <cstdint>
#include <map>
#include <stdexcept>
#include <string>
#include <vector>

namespace anchorseg {

// Directory container: a plain-text manifest describing each field
// (name, dtype, shape, byte offset, CRC32) plus a single little-endian
// binary payload file data.bin holding one blob per field at the stated
// offset. All payloads are row-major.
class FormatError : public std::runtime_error {
public:
    explicit FormatError(const std::string& msg) : std::runtime_error(msg) {}
};

enum class DType { F64, U8, U16, U64 };

std::size_t dtype_size(DType d);
std::string dtype_name(DType d);
DType dtype_parse(const std::string& s);

struct Field {
    DType dtype = DType::F64;
    std::vector<std::int64_t> shape;
    std::vector<std::uint8_t> bytes;  // raw little-endian payload

    std::int64_t numel() const;

    static Field f64(std::vector<std::int64_t> shape, const std::vector<double>& values);
    static Field u8(std::vector<std::int64_t> shape, const std::vector<std::uint8_t>& values);
    static Field u16(std::vector<std::int64_t> shape, const std::vector<std::uint16_t>& values);
    static Field u64(std::vector<std::int64_t> shape, const std::vector<std::uint64_t>& values);

    std::vector<double> as_f64() const;
    std::vector<std::uint8_t> as_u8() const;
    std::vector<std::uint16_t> as_u16() const;
    std::vector<std::uint64_t> as_u64() const;
};

class Container {
public:
    void set(const std::string& name, Field field);
    bool has(const std::string& name) const;
    const Field& get(const std::string& name) const;
    const std::map<std::string, Field>& fields() const { return fields_; }

    // Writes manifest.txt + data.bin into dir (created if needed).
    void write(const std::string& dir) const;
    // Throws FormatError naming the offending field on any corruption.
    static Container read(const std::string& dir);

private:
    std::map<std::string, Field> fields_;
};

}  // namespace anchorseg
