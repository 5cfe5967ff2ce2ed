#pragma once

#include <cstddef>
#include <cstdint>
#include <string>
#include <string_view>
#include <unordered_map>
#include <vector>

#include "ulbq/rng.hpp"

namespace ulbq {

/// Character-level tokenizer over Unicode code points. Id 0 is reserved for
/// characters outside the vocabulary.
class CharTokenizer {
 public:
  CharTokenizer() = default;
  explicit CharTokenizer(std::vector<char32_t> alphabet);

  static CharTokenizer from_text(std::string_view utf8);

  std::vector<int> encode(std::string_view utf8) const;
  std::string decode(const std::vector<int>& ids) const;

  std::size_t vocab_size() const { return alphabet_.size() + 1; }
  const std::vector<char32_t>& alphabet() const { return alphabet_; }

 private:
  std::vector<char32_t> alphabet_;
  std::unordered_map<char32_t, int> index_;
};

std::vector<char32_t> decode_utf8(std::string_view s);
std::string encode_utf8(const std::vector<char32_t>& cps);

std::string read_text_file(const std::string& path);

/// Input/target pairs laid out row-major as [n, seq_len].
struct TokenBatch {
  std::size_t n = 0;
  std::size_t seq_len = 0;
  std::vector<int> inputs;
  std::vector<int> targets;

  std::vector<int> row_inputs(std::size_t i) const {
    return {inputs.begin() + static_cast<std::ptrdiff_t>(i * seq_len),
            inputs.begin() + static_cast<std::ptrdiff_t>((i + 1) * seq_len)};
  }
  std::vector<int> row_targets(std::size_t i) const {
    return {targets.begin() + static_cast<std::ptrdiff_t>(i * seq_len),
            targets.begin() + static_cast<std::ptrdiff_t>((i + 1) * seq_len)};
  }
};

enum class Split { train, valid, test };

Split parse_split(const std::string& s);
const char* to_string(Split s);

/// Tokenized corpus cut into three contiguous, disjoint splits.
class TextDataset {
 public:
  TextDataset(const std::string& text, const CharTokenizer& tokenizer,
              double valid_fraction = 0.05, double test_fraction = 0.05);

  static TextDataset from_file(const std::string& path, const CharTokenizer* tokenizer = nullptr,
                               double valid_fraction = 0.05, double test_fraction = 0.05);

  const CharTokenizer& tokenizer() const { return tokenizer_; }
  const std::vector<int>& tokens() const { return tokens_; }
  std::vector<int> split(Split s) const;
  std::pair<std::size_t, std::size_t> split_range(Split s) const;

 private:
  CharTokenizer tokenizer_;
  std::vector<int> tokens_;
  std::size_t valid_begin_ = 0;
  std::size_t test_begin_ = 0;
};

/// n windows of seq_len + 1 tokens at uniformly drawn offsets.
TokenBatch sample_batch(const std::vector<int>& tokens, std::size_t n, std::size_t seq_len, Rng& rng);

/// Same as sample_batch with a generator seeded from `seed` alone, so a given
/// (tokens, n, seq_len, seed) always yields the same batch.
TokenBatch sample_calibration(const std::vector<int>& tokens, std::size_t n, std::size_t seq_len,
                              std::uint64_t seed);

}  // namespace ulbq
