#include "ulbq/data.hpp"

#include <algorithm>
#include <fstream>
#include <set>
#include <sstream>
#include <stdexcept>

namespace ulbq {

std::vector<char32_t> decode_utf8(std::string_view s) {
  std::vector<char32_t> out;
  out.reserve(s.size());
  std::size_t i = 0;
  while (i < s.size()) {
    const auto c = static_cast<unsigned char>(s[i]);
    int len = 1;
    char32_t cp = c;
    if (c >= 0xF0) {
      len = 4;
      cp = c & 0x07;
    } else if (c >= 0xE0) {
      len = 3;
      cp = c & 0x0F;
    } else if (c >= 0xC0) {
      len = 2;
      cp = c & 0x1F;
    } else if (c >= 0x80) {
      cp = 0xFFFD;  // stray continuation byte
    }
    if (i + static_cast<std::size_t>(len) > s.size()) {
      out.push_back(0xFFFD);
      break;
    }
    for (int k = 1; k < len; ++k) cp = (cp << 6) | (static_cast<unsigned char>(s[i + k]) & 0x3F);
    out.push_back(cp);
    i += static_cast<std::size_t>(len);
  }
  return out;
}

std::string encode_utf8(const std::vector<char32_t>& cps) {
  std::string out;
  for (char32_t cp : cps) {
    if (cp < 0x80) {
      out.push_back(static_cast<char>(cp));
    } else if (cp < 0x800) {
      out.push_back(static_cast<char>(0xC0 | (cp >> 6)));
      out.push_back(static_cast<char>(0x80 | (cp & 0x3F)));
    } else if (cp < 0x10000) {
      out.push_back(static_cast<char>(0xE0 | (cp >> 12)));
      out.push_back(static_cast<char>(0x80 | ((cp >> 6) & 0x3F)));
      out.push_back(static_cast<char>(0x80 | (cp & 0x3F)));
    } else {
      out.push_back(static_cast<char>(0xF0 | (cp >> 18)));
      out.push_back(static_cast<char>(0x80 | ((cp >> 12) & 0x3F)));
      out.push_back(static_cast<char>(0x80 | ((cp >> 6) & 0x3F)));
      out.push_back(static_cast<char>(0x80 | (cp & 0x3F)));
    }
  }
  return out;
}

CharTokenizer::CharTokenizer(std::vector<char32_t> alphabet) : alphabet_(std::move(alphabet)) {
  for (std::size_t i = 0; i < alphabet_.size(); ++i) {
    if (!index_.emplace(alphabet_[i], static_cast<int>(i + 1)).second)
      throw std::invalid_argument("CharTokenizer: duplicate character in alphabet");
  }
}

CharTokenizer CharTokenizer::from_text(std::string_view utf8) {
  const auto cps = decode_utf8(utf8);
  std::set<char32_t> uniq(cps.begin(), cps.end());
  return CharTokenizer(std::vector<char32_t>(uniq.begin(), uniq.end()));
}

std::vector<int> CharTokenizer::encode(std::string_view utf8) const {
  const auto cps = decode_utf8(utf8);
  std::vector<int> ids;
  ids.reserve(cps.size());
  for (char32_t cp : cps) {
    auto it = index_.find(cp);
    ids.push_back(it == index_.end() ? 0 : it->second);
  }
  return ids;
}

std::string CharTokenizer::decode(const std::vector<int>& ids) const {
  std::vector<char32_t> cps;
  cps.reserve(ids.size());
  for (int id : ids) {
    if (id <= 0 || static_cast<std::size_t>(id) > alphabet_.size()) {
      cps.push_back(0xFFFD);
    } else {
      cps.push_back(alphabet_[static_cast<std::size_t>(id - 1)]);
    }
  }
  return encode_utf8(cps);
}

std::string read_text_file(const std::string& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw std::runtime_error("cannot open '" + path + "'");
  std::ostringstream ss;
  ss << in.rdbuf();
  return ss.str();
}

Split parse_split(const std::string& s) {
  if (s == "train") return Split::train;
  if (s == "valid") return Split::valid;
  if (s == "test") return Split::test;
  throw std::invalid_argument("unknown split '" + s + "' (expected train, valid, test)");
}

const char* to_string(Split s) {
  switch (s) {
    case Split::train: return "train";
    case Split::valid: return "valid";
    case Split::test: return "test";
  }
  return "?";
}

TextDataset::TextDataset(const std::string& text, const CharTokenizer& tokenizer,
                         double valid_fraction, double test_fraction)
    : tokenizer_(tokenizer), tokens_(tokenizer.encode(text)) {
  if (valid_fraction < 0 || test_fraction < 0 || valid_fraction + test_fraction >= 1)
    throw std::invalid_argument("TextDataset: split fractions must be >= 0 and sum below 1");
  const auto n = tokens_.size();
  test_begin_ = n - static_cast<std::size_t>(static_cast<double>(n) * test_fraction);
  valid_begin_ = test_begin_ - static_cast<std::size_t>(static_cast<double>(n) * valid_fraction);
}

TextDataset TextDataset::from_file(const std::string& path, const CharTokenizer* tokenizer,
                                   double valid_fraction, double test_fraction) {
  const std::string text = read_text_file(path);
  if (tokenizer) return TextDataset(text, *tokenizer, valid_fraction, test_fraction);
  return TextDataset(text, CharTokenizer::from_text(text), valid_fraction, test_fraction);
}

std::pair<std::size_t, std::size_t> TextDataset::split_range(Split s) const {
  switch (s) {
    case Split::train: return {0, valid_begin_};
    case Split::valid: return {valid_begin_, test_begin_};
    case Split::test: return {test_begin_, tokens_.size()};
  }
  return {0, 0};
}

std::vector<int> TextDataset::split(Split s) const {
  const auto [b, e] = split_range(s);
  return {tokens_.begin() + static_cast<std::ptrdiff_t>(b), tokens_.begin() + static_cast<std::ptrdiff_t>(e)};
}

TokenBatch sample_batch(const std::vector<int>& tokens, std::size_t n, std::size_t seq_len, Rng& rng) {
  if (seq_len == 0) throw std::invalid_argument("sample_batch: seq_len must be positive");
  if (tokens.size() < seq_len + 1)
    throw std::invalid_argument("corpus too short: sequences of length " + std::to_string(seq_len) +
                                " need at least " + std::to_string(seq_len + 1) + " tokens, have " +
                                std::to_string(tokens.size()));
  TokenBatch b;
  b.n = n;
  b.seq_len = seq_len;
  b.inputs.reserve(n * seq_len);
  b.targets.reserve(n * seq_len);
  const std::uint64_t span = tokens.size() - seq_len;  // valid offsets [0, span)
  for (std::size_t i = 0; i < n; ++i) {
    // Modulo draw keeps the sequence independent of the library's distribution code.
    const std::size_t off = static_cast<std::size_t>(rng() % span);
    b.inputs.insert(b.inputs.end(), tokens.begin() + static_cast<std::ptrdiff_t>(off),
                    tokens.begin() + static_cast<std::ptrdiff_t>(off + seq_len));
    b.targets.insert(b.targets.end(), tokens.begin() + static_cast<std::ptrdiff_t>(off + 1),
                     tokens.begin() + static_cast<std::ptrdiff_t>(off + seq_len + 1));
  }
  return b;
}

TokenBatch sample_calibration(const std::vector<int>& tokens, std::size_t n, std::size_t seq_len,
                              std::uint64_t seed) {
  Rng rng = make_stream(seed, "sampling");
  return sample_batch(tokens, n, seq_len, rng);
}

}  // namespace ulbq
