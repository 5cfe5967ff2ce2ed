#include <gtest/gtest.h>

#include <cstring>
#include <filesystem>

#include "json.hpp"
#include "property_checks.hpp"
#include "ulbq/calibrator.hpp"
#include "ulbq/serialize.hpp"

using namespace ulbq;
using namespace ulbq::testing;

namespace {

template <typename V>
void put(std::vector<std::uint8_t>& out, V v) {
  std::uint8_t b[sizeof(V)];
  std::memcpy(b, &v, sizeof(V));
  out.insert(out.end(), b, b + sizeof(V));
}

ModelConfig tiny_config() {
  ModelConfig cfg;
  cfg.vocab = 9;
  cfg.d_model = 16;
  cfg.n_heads = 2;
  cfg.n_blocks = 2;
  cfg.d_ff = 32;
  cfg.context = 16;
  return cfg;
}

CharTokenizer tiny_tokenizer() { return CharTokenizer::from_text("abcdefgh"); }

TokenBatch tiny_batch(std::uint64_t seed, std::size_t n = 2, std::size_t seq = 8) {
  std::mt19937_64 rng(seed);
  std::vector<int> tokens(200);
  for (auto& t : tokens) t = static_cast<int>(rng() % 9);
  return sample_calibration(tokens, n, seq, seed);
}

QuantizedTransformer<float> calibrated(const QuantSpec& spec, std::size_t rank, std::uint64_t seed) {
  const auto m = ToyTransformer<float>::init(tiny_config(), seed);
  CalibrationConfig c;
  c.quant = spec;
  c.lora_rank = rank;
  c.epochs = 2;
  return calibrate_model(m, tiny_batch(seed), c).model;
}

bool same_logits(const QuantizedTransformer<float>& a, const QuantizedTransformer<float>& b) {
  const auto batch = tiny_batch(99, 2, 12);
  const Array<float> x = forward(a, batch.inputs, batch.n, batch.seq_len).value();
  const Array<float> y = forward(b, batch.inputs, batch.n, batch.seq_len).value();
  return x.size() == y.size() &&
         std::memcmp(x.data(), y.data(), sizeof(float) * static_cast<std::size_t>(x.size())) == 0;
}

Checkpoint roundtrip(const Checkpoint& ck) { return Checkpoint::deserialize(ck.serialize()); }

}  // namespace

TEST(Crc, StandardCheckValue) {
  const std::string s = "123456789";
  EXPECT_EQ(crc32(std::span(reinterpret_cast<const std::uint8_t*>(s.data()), s.size())), 0xCBF43926u);
}

TEST(Pack, SixteenTwoBitCodesFillFourBytes) {
  std::vector<std::uint8_t> codes(16);
  for (std::size_t i = 0; i < 16; ++i) codes[i] = static_cast<std::uint8_t>(i % 4);
  const auto p = pack_codes("w", codes, {4, 4}, 2, 0, {1.0f}, {0.0f});
  ASSERT_EQ(p.payload.size(), 4u);
  for (auto b : p.payload) EXPECT_EQ(b, 0xE4);  // 0 | 1<<2 | 2<<4 | 3<<6
  EXPECT_EQ(unpack_codes(p), codes);
}

TEST(Pack, OddWidthsAndPartialBytes) {
  const std::vector<std::uint8_t> codes{5, 0, 7, 1, 2};
  const auto p = pack_codes("w", codes, {1, 5}, 3, 0, {0.5f}, {3.0f});
  ASSERT_EQ(p.payload.size(), 2u);  // 15 bits
  // bits: 101 000 111 100 010 -> LSB-first stream 1,0,1, 0,0,0, 1,1,1, 1,0,0, 0,1,0
  EXPECT_EQ(p.payload[0], 0b11000101);
  EXPECT_EQ(p.payload[1], 0b0100011);
  EXPECT_EQ(unpack_codes(p), codes);
  const auto w = dequantize_packed(p);
  EXPECT_EQ(w[0], 1.0f);
  EXPECT_EQ(w[1], -1.5f);
}

TEST(Pack, RoundTripProperty) {
  std::mt19937_64 rng(1);
  const auto c = pack_roundtrip(rng);
  EXPECT_TRUE(c.pass) << c.detail;
}

TEST(Pack, EmptyMatrix) {
  const auto p = pack_codes("w", {}, {0, 4}, 2, 0, {}, {});
  EXPECT_TRUE(p.payload.empty());
  EXPECT_EQ(p.num_groups(), 0u);
  Checkpoint ck;
  ck.add(p);
  const auto back = roundtrip(ck).at("w");
  EXPECT_TRUE(unpack_codes(back).empty());
  EXPECT_EQ(back.shape, (std::vector<std::uint32_t>{0, 4}));
}

TEST(Pack, InvalidInputsRejected) {
  const std::vector<std::uint8_t> codes(8, 1);
  EXPECT_THROW(pack_codes("w", codes, {2, 4}, 0, 0, {1}, {0}), std::invalid_argument);
  EXPECT_THROW(pack_codes("w", codes, {2, 4}, 2, 3, {1, 1}, {0, 0}), std::invalid_argument);
  EXPECT_THROW(pack_codes("w", codes, {2, 4}, 2, 4, {1}, {0}), std::invalid_argument);
  const std::vector<std::uint8_t> big{4, 0, 0, 0};
  EXPECT_THROW(pack_codes("w", big, {1, 4}, 2, 0, {1}, {0}), std::invalid_argument);
}

TEST(Container, ByteLayoutOfDenseRecord) {
  Checkpoint ck;
  const std::vector<float> v{1.5f, -2.0f};
  ck.add(make_dense("ab", {2}, v));
  std::vector<std::uint8_t> expect{'U', 'L', 'B', 'Q'};
  put<std::uint32_t>(expect, 1);
  const std::size_t start = expect.size();
  put<std::uint32_t>(expect, 2);
  expect.push_back('a');
  expect.push_back('b');
  put<std::uint8_t>(expect, 0);
  put<std::uint32_t>(expect, 0);
  put<std::uint32_t>(expect, 1);
  put<std::uint32_t>(expect, 2);
  put<float>(expect, 1.5f);
  put<float>(expect, -2.0f);
  put<std::uint32_t>(expect, crc32(std::span(expect).subspan(start)));
  EXPECT_EQ(ck.serialize(), expect);
}

TEST(Container, ByteLayoutOfPackedRecord) {
  Checkpoint ck;
  const std::vector<std::uint8_t> codes{3, 0, 1, 2};
  ck.add(pack_codes("q", codes, {2, 2}, 2, 2, {0.25f, 0.5f}, {1.0f, 2.0f}));
  std::vector<std::uint8_t> expect{'U', 'L', 'B', 'Q'};
  put<std::uint32_t>(expect, 1);
  const std::size_t start = expect.size();
  put<std::uint32_t>(expect, 1);
  expect.push_back('q');
  put<std::uint8_t>(expect, 2);
  put<std::uint32_t>(expect, 2);
  put<std::uint32_t>(expect, 2);
  put<std::uint32_t>(expect, 2);
  put<std::uint32_t>(expect, 2);
  put<float>(expect, 0.25f);
  put<float>(expect, 1.0f);
  put<float>(expect, 0.5f);
  put<float>(expect, 2.0f);
  expect.push_back(0b10010011);
  put<std::uint32_t>(expect, crc32(std::span(expect).subspan(start)));
  EXPECT_EQ(ck.serialize(), expect);
}

TEST(Container, RoundTripMixedRecords) {
  Checkpoint ck;
  const std::vector<float> v{0.1f, 0.2f, 0.3f, 0.4f, 0.5f, 0.6f};
  ck.add(make_dense("dense", {2, 3}, v));
  ck.add(make_blob("meta", R"({"k": "välue"})"));
  const std::vector<std::uint8_t> codes{1, 0, 1, 1, 0, 0, 1, 0};
  ck.add(pack_codes("bits", codes, {2, 4}, 1, 4, {1, 2}, {0.5f, 0.5f}));
  const auto back = roundtrip(ck);
  ASSERT_EQ(back.records().size(), 3u);
  EXPECT_EQ(dense_values(back.at("dense")), v);
  EXPECT_EQ(blob_text(back.at("meta")), R"({"k": "välue"})");
  EXPECT_EQ(unpack_codes(back.at("bits")), codes);
  EXPECT_EQ(back.at("bits").scale, (std::vector<float>{1, 2}));
  EXPECT_EQ(back.serialize(), ck.serialize());
}

TEST(Container, AddReplacesByName) {
  Checkpoint ck;
  const std::vector<float> a{1}, b{2};
  ck.add(make_dense("x", {1}, a));
  ck.add(make_dense("x", {1}, b));
  ASSERT_EQ(ck.records().size(), 1u);
  EXPECT_EQ(dense_values(ck.at("x"))[0], 2.0f);
  EXPECT_THROW(ck.at("y"), std::out_of_range);
}

TEST(Container, TruncationDetectedAtEveryLength) {
  Checkpoint ck;
  const std::vector<float> v{1, 2, 3};
  ck.add(make_dense("v", {3}, v));
  const std::vector<std::uint8_t> codes{1, 2, 3, 0};
  ck.add(pack_codes("p", codes, {1, 4}, 2, 0, {1}, {0}));
  const auto bytes = ck.serialize();
  // Cutting exactly at the end of the first record yields a valid shorter file.
  const std::size_t first_end = 4 + 4 + (4 + 1 + 1 + 4 + 4 + 4 + 12 + 4);
  for (std::size_t n = 0; n < bytes.size(); ++n) {
    if (n == first_end || n == 8) continue;
    EXPECT_THROW(Checkpoint::deserialize(std::span(bytes).first(n)), CorruptFileError) << "length " << n;
  }
  EXPECT_EQ(Checkpoint::deserialize(std::span(bytes).first(first_end)).records().size(), 1u);
}

TEST(Container, EveryFlippedByteDetected) {
  Checkpoint ck;
  const std::vector<float> v{1, 2, 3, 4};
  ck.add(make_dense("weights", {2, 2}, v));
  const auto bytes = ck.serialize();
  for (std::size_t i = 0; i < bytes.size(); ++i) {
    auto bad = bytes;
    bad[i] ^= 0x10;
    EXPECT_ANY_THROW(Checkpoint::deserialize(bad)) << "byte " << i;
  }
}

TEST(Container, CorruptionErrorsAreTyped) {
  Checkpoint ck;
  const std::vector<float> v{1, 2};
  ck.add(make_dense("w", {2}, v));
  auto bytes = ck.serialize();
  auto bad_crc = bytes;
  bad_crc[bad_crc.size() - 6] ^= 0xFF;
  EXPECT_THROW(Checkpoint::deserialize(bad_crc), CorruptFileError);
  auto bad_magic = bytes;
  bad_magic[0] = 'X';
  EXPECT_THROW(Checkpoint::deserialize(bad_magic), CorruptFileError);
  auto bad_version = bytes;
  bad_version[4] = 2;
  EXPECT_THROW(Checkpoint::deserialize(bad_version), CorruptFileError);
}

TEST(Container, FileRoundTrip) {
  const auto dir = std::filesystem::temp_directory_path() / "ulbq_ckpt_test";
  std::filesystem::create_directories(dir);
  Checkpoint ck;
  const std::vector<float> v{3, 4};
  ck.add(make_dense("w", {1, 2}, v));
  const std::string path = (dir / "a.ulbq").string();
  ck.save(path);
  EXPECT_EQ(Checkpoint::load(path).serialize(), ck.serialize());
  EXPECT_THROW(Checkpoint::load((dir / "missing.ulbq").string()), std::runtime_error);
  std::filesystem::remove_all(dir);
}

TEST(Serialize, ModelRoundTrip) {
  const auto m = ToyTransformer<float>::init(tiny_config(), 3);
  const auto tok = tiny_tokenizer();
  const auto back = load_model(roundtrip(model_checkpoint(m, tok)));
  EXPECT_EQ(back.tokenizer.alphabet(), tok.alphabet());
  EXPECT_EQ(back.model.config.d_ff, m.config.d_ff);
  const auto pa = m.named_parameters(), pb = back.model.named_parameters();
  ASSERT_EQ(pa.size(), pb.size());
  for (std::size_t i = 0; i < pa.size(); ++i) {
    EXPECT_EQ(pa[i].first, pb[i].first);
    EXPECT_EQ(pa[i].second.shape(), pb[i].second.shape());
    EXPECT_EQ(pa[i].second.value().matrix(), pb[i].second.value().matrix()) << pa[i].first;
  }
}

TEST(Serialize, QuantizedRoundTripAndPackingAreBitExact) {
  const std::vector<std::pair<QuantSpec, std::size_t>> cases{
      {QuantSpec{2, 0, QuantizerKind::learnable_clip}, 2},
      {QuantSpec{3, 8, QuantizerKind::learnable_clip}, 0},
      {QuantSpec{4, 16, QuantizerKind::rtn}, 2},
      {QuantSpec{8, 0, QuantizerKind::rtn}, 0},
      {QuantSpec{2, 8, QuantizerKind::dual_binary}, 2},
      {QuantSpec{1, 0, QuantizerKind::mos}, 2},
  };
  std::uint64_t seed = 10;
  for (const auto& [spec, rank] : cases) {
    SCOPED_TRACE(std::string(to_string(spec.kind)) + " " + std::to_string(spec.bits) + "-bit");
    const auto q = calibrated(spec, rank, seed++);
    const auto unpacked = roundtrip(quantized_checkpoint(q, tiny_tokenizer()));
    const auto loaded = load_quantized(unpacked);
    EXPECT_FALSE(loaded.packed);
    EXPECT_TRUE(same_logits(q, loaded.model));
    const auto packed = roundtrip(pack_checkpoint(unpacked));
    const auto from_packed = load_quantized(packed);
    EXPECT_TRUE(from_packed.packed);
    EXPECT_TRUE(same_logits(q, from_packed.model));
    EXPECT_LT(packed.serialize().size(), unpacked.serialize().size());
  }
}

TEST(Serialize, PackedLayerUsesDeclaredBitWidth) {
  const auto q = calibrated(QuantSpec{2, 16, QuantizerKind::learnable_clip}, 0, 21);
  const auto packed = pack_checkpoint(quantized_checkpoint(q, tiny_tokenizer()));
  const auto& rec = packed.at("blocks.0.q.qweight");
  EXPECT_EQ(rec.bits, 2);
  EXPECT_EQ(rec.group_size, 16u);
  EXPECT_EQ(rec.payload.size(), 16u * 16u * 2u / 8u);
  EXPECT_EQ(rec.num_groups(), 16u);
}

TEST(Serialize, SaliencyRoundTrip) {
  const auto m = ToyTransformer<float>::init(tiny_config(), 4);
  const auto s = compute_saliency(m, tiny_batch(4), "toy-set");
  const auto back = load_saliency(roundtrip(saliency_checkpoint(s)));
  EXPECT_EQ(back.meta.dataset, "toy-set");
  EXPECT_EQ(back.meta.samples, s.meta.samples);
  EXPECT_EQ(back.meta.seq_len, s.meta.seq_len);
  ASSERT_EQ(back.alpha.size(), s.alpha.size());
  for (const auto& [name, a] : s.alpha) EXPECT_EQ(back.at(name).value().matrix(), a.value().matrix()) << name;
}

TEST(Serialize, ConfigEchoAttached) {
  Checkpoint ck;
  attach_config(ck, R"({"seed": 7})");
  const auto j = nlohmann::json::parse(blob_text(ck.at(kMetaConfig)));
  EXPECT_EQ(j.at("config").at("seed"), 7);
  EXPECT_FALSE(j.at("build_id").get<std::string>().empty());
}
