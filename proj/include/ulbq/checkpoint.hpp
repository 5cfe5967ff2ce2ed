#pragma once

#include <cstdint>
#include <span>
#include <stdexcept>
#include <string>
#include <vector>

namespace ulbq {

class CorruptFileError : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

std::uint32_t crc32(std::span<const std::uint8_t> bytes);

inline constexpr std::uint32_t kCheckpointVersion = 1;
inline constexpr std::uint8_t kDenseBits = 0;   // f32 values
inline constexpr std::uint8_t kBlobBits = 255;  // raw bytes (UTF-8 JSON metadata)

/// One named tensor record of the container. Packed records (bits 1..8)
/// carry a per-group (scale, zero) table and a bit-packed code stream; dense
/// records carry f32 values in `payload`.
struct Record {
  std::string name;
  std::uint8_t bits = kDenseBits;
  std::uint32_t group_size = 0;  // 0 = one group for the whole matrix
  std::vector<std::uint32_t> shape;
  std::vector<float> scale, zero;
  std::vector<std::uint8_t> payload;

  bool is_dense() const { return bits == kDenseBits; }
  bool is_blob() const { return bits == kBlobBits; }
  bool is_packed() const { return !is_dense() && !is_blob(); }
  std::size_t numel() const;
  std::size_t num_groups() const;
};

using PackedWeights = Record;

Record make_dense(std::string name, std::vector<std::uint32_t> shape, std::span<const float> values);
Record make_blob(std::string name, const std::string& bytes);

/// Codes row-major, LSB-first little-endian bit stream, groups contiguous
/// along rows.
PackedWeights pack_codes(std::string name, std::span<const std::uint8_t> codes,
                         std::vector<std::uint32_t> shape, int bits, std::uint32_t group_size,
                         std::vector<float> scale, std::vector<float> zero);
std::vector<std::uint8_t> unpack_codes(const PackedWeights& p);

/// (code - zero) * scale per element, computed in f32.
std::vector<float> dequantize_packed(const PackedWeights& p);

std::vector<float> dense_values(const Record& r);
std::string blob_text(const Record& r);

class Checkpoint {
 public:
  /// Replaces an existing record of the same name.
  void add(Record r);
  const Record* find(const std::string& name) const;
  const Record& at(const std::string& name) const;
  const std::vector<Record>& records() const { return records_; }

  std::vector<std::uint8_t> serialize() const;
  static Checkpoint deserialize(std::span<const std::uint8_t> bytes);

  void save(const std::string& path) const;
  static Checkpoint load(const std::string& path);

 private:
  std::vector<Record> records_;
};

std::vector<std::uint8_t> read_binary_file(const std::string& path);
void write_binary_file(const std::string& path, std::span<const std::uint8_t> bytes);

}  // namespace ulbq
