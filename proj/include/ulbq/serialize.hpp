#pragma once

#include <string>

#include "ulbq/checkpoint.hpp"
#include "ulbq/data.hpp"
#include "ulbq/model.hpp"
#include "ulbq/saliency.hpp"

namespace ulbq {

// Metadata records (UTF-8 JSON blobs).
inline constexpr const char* kMetaModel = "__meta__.model";
inline constexpr const char* kMetaTokenizer = "__meta__.tokenizer";
inline constexpr const char* kMetaQuant = "__meta__.quant";
inline constexpr const char* kMetaSaliency = "__meta__.saliency";
inline constexpr const char* kMetaConfig = "__meta__.config";

struct ModelBundle {
  ToyTransformer<float> model;
  CharTokenizer tokenizer;
};

struct QuantizedBundle {
  QuantizedTransformer<float> model;
  CharTokenizer tokenizer;
  bool packed = false;
};

Checkpoint model_checkpoint(const ToyTransformer<float>& m, const CharTokenizer& tok);
ModelBundle load_model(const Checkpoint& ck);

/// Unpacked form: every layer's materialized weight plus its codes and
/// group table (uniform quantizers), sign planes (dual binary, mixture of
/// scales) and LoRA pair, all as dense f32 records.
Checkpoint quantized_checkpoint(const QuantizedTransformer<float>& m, const CharTokenizer& tok);

/// Accepts both the unpacked and the bit-packed form.
QuantizedBundle load_quantized(const Checkpoint& ck);

/// Replaces codes, group tables and sign planes by bit-packed records and
/// drops the dense materialized weight once the packed form reproduces it
/// bit for bit. Throws if it would not.
Checkpoint pack_checkpoint(const Checkpoint& unpacked);

Checkpoint saliency_checkpoint(const SaliencyMap<float>& s);
SaliencyMap<float> load_saliency(const Checkpoint& ck);

/// Attaches the resolved experiment configuration and build id.
void attach_config(Checkpoint& ck, const std::string& config_json);

}  // namespace ulbq
