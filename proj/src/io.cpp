#include "qst/io.hpp"

#include <array>
#include <cstdio>
#include <cstring>
#include <fstream>

#include "qst/errors.hpp"

namespace qst::io {

namespace {

std::array<std::uint64_t, 256> make_crc64_table() {
  std::array<std::uint64_t, 256> table{};
  const std::uint64_t poly = 0xC96C5795D7870F42ULL;
  for (std::uint64_t i = 0; i < 256; ++i) {
    std::uint64_t crc = i;
    for (int bit = 0; bit < 8; ++bit) {
      crc = (crc & 1) ? (crc >> 1) ^ poly : crc >> 1;
    }
    table[static_cast<std::size_t>(i)] = crc;
  }
  return table;
}

const std::array<std::uint64_t, 256>& crc64_table() {
  static const auto table = make_crc64_table();
  return table;
}

}  // namespace

std::uint64_t crc64(const void* data, std::size_t len) {
  const auto* bytes = static_cast<const unsigned char*>(data);
  const auto& table = crc64_table();
  std::uint64_t crc = ~0ULL;
  for (std::size_t i = 0; i < len; ++i) {
    crc = table[(crc ^ bytes[i]) & 0xFF] ^ (crc >> 8);
  }
  return ~crc;
}

std::uint64_t crc64(const std::vector<double>& values) {
  return crc64(values.data(), values.size() * sizeof(double));
}

std::string crc64_hex(std::uint64_t crc) {
  char buf[17];
  std::snprintf(buf, sizeof(buf), "%016llx", static_cast<unsigned long long>(crc));
  return buf;
}

void write_f64(const std::filesystem::path& path, const std::vector<double>& values) {
  std::ofstream out(path, std::ios::binary | std::ios::trunc);
  if (!out) throw IoError("cannot open for writing: " + path.string());
  out.write(reinterpret_cast<const char*>(values.data()),
            static_cast<std::streamsize>(values.size() * sizeof(double)));
  if (!out) throw IoError("short write: " + path.string());
}

std::vector<double> read_f64(const std::filesystem::path& path, std::size_t expected_count) {
  std::ifstream in(path, std::ios::binary | std::ios::ate);
  if (!in) throw IoError("cannot open for reading: " + path.string());
  auto bytes = static_cast<std::size_t>(in.tellg());
  if (bytes != expected_count * sizeof(double)) {
    throw ShapeMismatch(path.string() + ": expected " + std::to_string(expected_count) +
                        " float64 values, file holds " +
                        std::to_string(bytes / sizeof(double)));
  }
  std::vector<double> values(expected_count);
  in.seekg(0);
  in.read(reinterpret_cast<char*>(values.data()), static_cast<std::streamsize>(bytes));
  if (!in) throw IoError("short read: " + path.string());
  return values;
}

std::vector<double> read_f64_raw(const std::filesystem::path& path) {
  std::ifstream in(path, std::ios::binary | std::ios::ate);
  if (!in) throw IoError("cannot open for reading: " + path.string());
  auto bytes = static_cast<std::size_t>(in.tellg());
  if (bytes % sizeof(double) != 0) {
    throw IoError(path.string() + ": byte length " + std::to_string(bytes) +
                  " is not a multiple of 8");
  }
  std::vector<double> values(bytes / sizeof(double));
  in.seekg(0);
  in.read(reinterpret_cast<char*>(values.data()), static_cast<std::streamsize>(bytes));
  if (!in) throw IoError("short read: " + path.string());
  return values;
}

std::vector<double> interleave(const std::vector<std::complex<double>>& values) {
  std::vector<double> packed(values.size() * 2);
  for (std::size_t i = 0; i < values.size(); ++i) {
    packed[2 * i] = values[i].real();
    packed[2 * i + 1] = values[i].imag();
  }
  return packed;
}

std::vector<std::complex<double>> deinterleave(const std::vector<double>& packed) {
  std::vector<std::complex<double>> values(packed.size() / 2);
  for (std::size_t i = 0; i < values.size(); ++i) {
    values[i] = {packed[2 * i], packed[2 * i + 1]};
  }
  return values;
}

void write_text(const std::filesystem::path& path, const std::string& text) {
  std::ofstream out(path, std::ios::binary | std::ios::trunc);
  if (!out) throw IoError("cannot open for writing: " + path.string());
  out << text;
  if (!out) throw IoError("short write: " + path.string());
}

std::string read_text(const std::filesystem::path& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw IoError("cannot open for reading: " + path.string());
  std::string text((std::istreambuf_iterator<char>(in)), std::istreambuf_iterator<char>());
  return text;
}

}  // namespace qst::io
