#pragma once

#include <complex>
#include <cstdint>
#include <filesystem>
#include <string>
#include <vector>

namespace qst::io {

/// CRC-64/XZ (reflected polynomial 0xC96C5795D7870F42, init and xorout all
/// ones). Used to checksum every binary array file referenced by a manifest.
std::uint64_t crc64(const void* data, std::size_t len);
std::uint64_t crc64(const std::vector<double>& values);

/// Hex string of a CRC-64 value, 16 lowercase digits.
std::string crc64_hex(std::uint64_t crc);

/// Raw little-endian float64 array files. Writers are single-shot; readers
/// verify the element count against the caller's expectation.
void write_f64(const std::filesystem::path& path, const std::vector<double>& values);
std::vector<double> read_f64(const std::filesystem::path& path, std::size_t expected_count);

/// Reads the whole file with no count expectation, for callers that verify a
/// checksum before interpreting the shape. Throws IoError on read failure or
/// a byte length that is not a multiple of 8.
std::vector<double> read_f64_raw(const std::filesystem::path& path);

/// Interleaved (re, im) variants for complex arrays. The on-disk layout is
/// identical to write_f64 on the interleaved buffer.
std::vector<double> interleave(const std::vector<std::complex<double>>& values);
std::vector<std::complex<double>> deinterleave(const std::vector<double>& packed);

/// Whole-file text helpers.
void write_text(const std::filesystem::path& path, const std::string& text);
std::string read_text(const std::filesystem::path& path);

}  // namespace qst::io
