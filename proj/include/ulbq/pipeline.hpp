#pragma once

#include <string>

#include "ulbq/calibrator.hpp"
#include "ulbq/config.hpp"
#include "ulbq/data.hpp"
#include "ulbq/evaluator.hpp"
#include "ulbq/serialize.hpp"

namespace ulbq {

/// Corpus named by the config, cut into splits. A tokenizer carried by a
/// checkpoint takes precedence over one built from the text.
TextDataset load_dataset(const ExperimentConfig& cfg, const CharTokenizer* tokenizer = nullptr);

/// Model dimensions with vocab filled in from the tokenizer when unset.
ModelConfig resolve_model_config(const ExperimentConfig& cfg, std::size_t vocab);

struct PretrainResult {
  ModelBundle bundle;
  PretrainReport report;
};

PretrainResult run_pretrain(const ExperimentConfig& cfg, const TextDataset& data);

/// Deterministic sample windows drawn from the configured split; each
/// purpose ("saliency", "calibration") has its own stream.
TokenBatch saliency_batch(const ExperimentConfig& cfg, const TextDataset& data);
TokenBatch calibration_batch(const ExperimentConfig& cfg, const TextDataset& data);

SaliencyMap<float> run_saliency(const ExperimentConfig& cfg, const ToyTransformer<float>& model,
                                const TextDataset& data);

/// Uncalibrated quantization of every block linear with no adapter. The
/// uniform kinds (rtn, learnable_clip) give round-to-nearest; dual_binary and
/// mos deploy their initial fit.
QuantizedTransformer<float> run_quantize(const ExperimentConfig& cfg, const ToyTransformer<float>& model);

CalibrationResult<float> run_calibrate(const ExperimentConfig& cfg, const ToyTransformer<float>& model,
                                       const TextDataset& data, const SaliencyMap<float>* saliency);

/// Perplexity on the configured evaluation split with the model context as
/// window length.
EvalReport run_eval(const ExperimentConfig& cfg, const NllFn& nll, const TextDataset& data,
                    std::size_t context, const std::string& model_id);

}  // namespace ulbq
