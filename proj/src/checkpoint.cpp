#include "ulbq/checkpoint.hpp"

#include <zlib.h>

#include <algorithm>
#include <bit>
#include <cstring>
#include <fstream>
#include <iterator>

namespace ulbq {

static_assert(std::endian::native == std::endian::little, "checkpoint I/O assumes a little-endian host");

std::uint32_t crc32(std::span<const std::uint8_t> bytes) {
  uLong c = ::crc32(0L, Z_NULL, 0);
  // zlib takes uInt lengths; feed in chunks.
  std::size_t off = 0;
  while (off < bytes.size()) {
    const std::size_t n = std::min<std::size_t>(bytes.size() - off, 1u << 30);
    c = ::crc32(c, bytes.data() + off, static_cast<uInt>(n));
    off += n;
  }
  return static_cast<std::uint32_t>(c);
}

std::size_t Record::numel() const {
  std::size_t n = 1;
  for (auto e : shape) n *= e;
  return n;
}

std::size_t Record::num_groups() const {
  if (!is_packed()) return 0;
  const std::size_t n = numel();
  if (n == 0) return 0;
  if (group_size == 0) return 1;
  return n / group_size;
}

namespace {

std::size_t packed_bytes(std::size_t numel, int bits) {
  return (numel * static_cast<std::size_t>(bits) + 7) / 8;
}

void check_packed_meta(const Record& r) {
  if (r.bits < 1 || r.bits > 8) throw std::invalid_argument("pack: bits must be in 1..8");
  const std::size_t n = r.numel();
  if (r.group_size != 0 && n % r.group_size != 0)
    throw std::invalid_argument("pack: group size " + std::to_string(r.group_size) +
                                " does not divide " + std::to_string(n) + " elements");
  if (r.group_size != 0 && !r.shape.empty() && r.shape.back() % r.group_size != 0)
    throw std::invalid_argument("pack: group size must divide the row length");
}

template <typename V>
void put(std::vector<std::uint8_t>& out, V v) {
  std::uint8_t buf[sizeof(V)];
  std::memcpy(buf, &v, sizeof(V));
  out.insert(out.end(), buf, buf + sizeof(V));
}

class Reader {
 public:
  explicit Reader(std::span<const std::uint8_t> b) : b_(b) {}

  template <typename V>
  V get(const char* what) {
    need(sizeof(V), what);
    V v;
    std::memcpy(&v, b_.data() + pos_, sizeof(V));
    pos_ += sizeof(V);
    return v;
  }

  std::span<const std::uint8_t> bytes(std::size_t n, const char* what) {
    need(n, what);
    auto s = b_.subspan(pos_, n);
    pos_ += n;
    return s;
  }

  std::size_t pos() const { return pos_; }
  bool done() const { return pos_ == b_.size(); }

 private:
  void need(std::size_t n, const char* what) {
    if (b_.size() - pos_ < n)
      throw CorruptFileError(std::string("checkpoint truncated while reading ") + what + " at byte " +
                             std::to_string(pos_));
  }

  std::span<const std::uint8_t> b_;
  std::size_t pos_ = 0;
};

}  // namespace

Record make_dense(std::string name, std::vector<std::uint32_t> shape, std::span<const float> values) {
  Record r;
  r.name = std::move(name);
  r.bits = kDenseBits;
  r.shape = std::move(shape);
  if (values.size() != r.numel())
    throw std::invalid_argument("dense record '" + r.name + "': " + std::to_string(values.size()) +
                                " values for " + std::to_string(r.numel()) + " elements");
  r.payload.resize(values.size() * sizeof(float));
  if (!values.empty()) std::memcpy(r.payload.data(), values.data(), r.payload.size());
  return r;
}

Record make_blob(std::string name, const std::string& bytes) {
  Record r;
  r.name = std::move(name);
  r.bits = kBlobBits;
  r.shape = {static_cast<std::uint32_t>(bytes.size())};
  r.payload.assign(bytes.begin(), bytes.end());
  return r;
}

PackedWeights pack_codes(std::string name, std::span<const std::uint8_t> codes,
                         std::vector<std::uint32_t> shape, int bits, std::uint32_t group_size,
                         std::vector<float> scale, std::vector<float> zero) {
  PackedWeights p;
  p.name = std::move(name);
  p.bits = static_cast<std::uint8_t>(bits);
  p.group_size = group_size;
  p.shape = std::move(shape);
  check_packed_meta(p);
  if (codes.size() != p.numel())
    throw std::invalid_argument("pack: " + std::to_string(codes.size()) + " codes for " +
                                std::to_string(p.numel()) + " elements");
  if (scale.size() != p.num_groups() || zero.size() != p.num_groups())
    throw std::invalid_argument("pack: expected " + std::to_string(p.num_groups()) + " (scale, zero) pairs");
  p.scale = std::move(scale);
  p.zero = std::move(zero);
  const unsigned max_code = (1u << bits) - 1;
  p.payload.assign(packed_bytes(codes.size(), bits), 0);
  std::size_t bit = 0;
  for (std::size_t i = 0; i < codes.size(); ++i) {
    if (codes[i] > max_code)
      throw std::invalid_argument("pack: code " + std::to_string(codes[i]) + " exceeds " +
                                  std::to_string(bits) + "-bit range");
    for (int j = 0; j < bits; ++j, ++bit)
      if ((codes[i] >> j) & 1u) p.payload[bit / 8] |= static_cast<std::uint8_t>(1u << (bit % 8));
  }
  return p;
}

std::vector<std::uint8_t> unpack_codes(const PackedWeights& p) {
  if (!p.is_packed()) throw std::invalid_argument("unpack: record '" + p.name + "' is not bit-packed");
  const std::size_t n = p.numel();
  if (p.payload.size() != packed_bytes(n, p.bits))
    throw CorruptFileError("record '" + p.name + "': code stream of " + std::to_string(p.payload.size()) +
                           " bytes does not match " + std::to_string(n) + " codes of " +
                           std::to_string(p.bits) + " bits");
  std::vector<std::uint8_t> codes(n, 0);
  std::size_t bit = 0;
  for (std::size_t i = 0; i < n; ++i) {
    unsigned c = 0;
    for (int j = 0; j < p.bits; ++j, ++bit)
      if ((p.payload[bit / 8] >> (bit % 8)) & 1u) c |= 1u << j;
    codes[i] = static_cast<std::uint8_t>(c);
  }
  return codes;
}

std::vector<float> dequantize_packed(const PackedWeights& p) {
  const auto codes = unpack_codes(p);
  std::vector<float> out(codes.size());
  const std::size_t g = p.group_size == 0 ? codes.size() : p.group_size;
  for (std::size_t i = 0; i < codes.size(); ++i) {
    const std::size_t k = i / g;
    out[i] = (static_cast<float>(codes[i]) - p.zero[k]) * p.scale[k];
  }
  return out;
}

std::vector<float> dense_values(const Record& r) {
  if (!r.is_dense()) throw std::invalid_argument("record '" + r.name + "' is not a dense tensor");
  if (r.payload.size() != r.numel() * sizeof(float))
    throw CorruptFileError("record '" + r.name + "': payload size does not match shape");
  std::vector<float> v(r.numel());
  if (!v.empty()) std::memcpy(v.data(), r.payload.data(), r.payload.size());
  return v;
}

std::string blob_text(const Record& r) {
  if (!r.is_blob()) throw std::invalid_argument("record '" + r.name + "' is not a metadata blob");
  return {r.payload.begin(), r.payload.end()};
}

void Checkpoint::add(Record r) {
  for (auto& e : records_)
    if (e.name == r.name) {
      e = std::move(r);
      return;
    }
  records_.push_back(std::move(r));
}

const Record* Checkpoint::find(const std::string& name) const {
  for (const auto& r : records_)
    if (r.name == name) return &r;
  return nullptr;
}

const Record& Checkpoint::at(const std::string& name) const {
  if (const Record* r = find(name)) return *r;
  throw std::out_of_range("checkpoint has no record '" + name + "'");
}

std::vector<std::uint8_t> Checkpoint::serialize() const {
  std::vector<std::uint8_t> out{'U', 'L', 'B', 'Q'};
  put<std::uint32_t>(out, kCheckpointVersion);
  for (const auto& r : records_) {
    const std::size_t start = out.size();
    put<std::uint32_t>(out, static_cast<std::uint32_t>(r.name.size()));
    out.insert(out.end(), r.name.begin(), r.name.end());
    put<std::uint8_t>(out, r.bits);
    put<std::uint32_t>(out, r.group_size);
    put<std::uint32_t>(out, static_cast<std::uint32_t>(r.shape.size()));
    for (auto e : r.shape) put<std::uint32_t>(out, e);
    if (r.is_packed()) {
      check_packed_meta(r);
      if (r.scale.size() != r.num_groups() || r.zero.size() != r.num_groups())
        throw std::invalid_argument("record '" + r.name + "': group table size mismatch");
      if (r.payload.size() != packed_bytes(r.numel(), r.bits))
        throw std::invalid_argument("record '" + r.name + "': code stream size mismatch");
      for (std::size_t k = 0; k < r.scale.size(); ++k) {
        put<float>(out, r.scale[k]);
        put<float>(out, r.zero[k]);
      }
    } else if (r.is_dense() && r.payload.size() != r.numel() * sizeof(float)) {
      throw std::invalid_argument("record '" + r.name + "': payload size does not match shape");
    } else if (r.is_blob() && r.payload.size() != r.numel()) {
      throw std::invalid_argument("record '" + r.name + "': blob size does not match shape");
    }
    out.insert(out.end(), r.payload.begin(), r.payload.end());
    const std::uint32_t c = crc32(std::span(out).subspan(start));
    put<std::uint32_t>(out, c);
  }
  return out;
}

Checkpoint Checkpoint::deserialize(std::span<const std::uint8_t> bytes) {
  Reader rd(bytes);
  const auto magic = rd.bytes(4, "magic");
  if (!std::equal(magic.begin(), magic.end(), "ULBQ")) throw CorruptFileError("not a ULBQ checkpoint (bad magic)");
  const auto version = rd.get<std::uint32_t>("version");
  if (version != kCheckpointVersion)
    throw CorruptFileError("unsupported checkpoint version " + std::to_string(version));
  Checkpoint ck;
  while (!rd.done()) {
    const std::size_t start = rd.pos();
    Record r;
    const auto name_len = rd.get<std::uint32_t>("name length");
    const auto name = rd.bytes(name_len, "name");
    r.name.assign(name.begin(), name.end());
    r.bits = rd.get<std::uint8_t>("bits");
    if (r.bits > 8 && r.bits != kBlobBits)
      throw CorruptFileError("record '" + r.name + "': invalid bit width " + std::to_string(r.bits));
    r.group_size = rd.get<std::uint32_t>("group size");
    const auto rank = rd.get<std::uint32_t>("rank");
    if (rank > 8) throw CorruptFileError("record '" + r.name + "': implausible rank " + std::to_string(rank));
    std::size_t numel = 1;
    for (std::uint32_t i = 0; i < rank; ++i) {
      r.shape.push_back(rd.get<std::uint32_t>("extent"));
      numel *= r.shape.back();
      // A record can never hold more elements than there are bits left.
      if (numel > (bytes.size() - rd.pos()) * 8 && numel != 0)
        throw CorruptFileError("record '" + r.name + "': shape exceeds the remaining file size");
    }
    std::size_t payload = 0;
    if (r.is_packed()) {
      if (r.group_size != 0 && r.numel() % r.group_size != 0)
        throw CorruptFileError("record '" + r.name + "': group size does not divide element count");
      for (std::size_t k = 0; k < r.num_groups(); ++k) {
        r.scale.push_back(rd.get<float>("scale"));
        r.zero.push_back(rd.get<float>("zero point"));
      }
      payload = packed_bytes(r.numel(), r.bits);
    } else if (r.is_dense()) {
      payload = r.numel() * sizeof(float);
    } else {
      payload = r.numel();
    }
    const auto data = rd.bytes(payload, "payload");
    r.payload.assign(data.begin(), data.end());
    const std::uint32_t expect = crc32(bytes.subspan(start, rd.pos() - start));
    const auto stored = rd.get<std::uint32_t>("checksum");
    if (stored != expect) throw CorruptFileError("record '" + r.name + "': checksum mismatch");
    ck.records_.push_back(std::move(r));
  }
  return ck;
}

std::vector<std::uint8_t> read_binary_file(const std::string& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw std::runtime_error("cannot open '" + path + "'");
  return {std::istreambuf_iterator<char>(in), std::istreambuf_iterator<char>()};
}

void write_binary_file(const std::string& path, std::span<const std::uint8_t> bytes) {
  std::ofstream out(path, std::ios::binary | std::ios::trunc);
  if (!out) throw std::runtime_error("cannot write '" + path + "'");
  out.write(reinterpret_cast<const char*>(bytes.data()), static_cast<std::streamsize>(bytes.size()));
  if (!out) throw std::runtime_error("write failed for '" + path + "'");
}

void Checkpoint::save(const std::string& path) const { write_binary_file(path, serialize()); }

Checkpoint Checkpoint::load(const std::string& path) { return deserialize(read_binary_file(path)); }

}  // namespace ulbq
