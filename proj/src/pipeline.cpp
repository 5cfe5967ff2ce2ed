#include "ulbq/pipeline.hpp"

namespace ulbq {

namespace {

std::uint64_t sub_seed(std::uint64_t seed, std::string_view purpose) {
  return splitmix64(seed ^ fnv1a64(purpose));
}

}  // namespace

TextDataset load_dataset(const ExperimentConfig& cfg, const CharTokenizer* tokenizer) {
  return TextDataset::from_file(cfg.data.corpus, tokenizer, cfg.data.valid_fraction, cfg.data.test_fraction);
}

ModelConfig resolve_model_config(const ExperimentConfig& cfg, std::size_t vocab) {
  ModelConfig mc = cfg.model;
  if (mc.vocab == 0) mc.vocab = vocab;
  if (mc.vocab != vocab)
    throw std::invalid_argument("model.vocab " + std::to_string(mc.vocab) + " does not match the tokenizer (" +
                                std::to_string(vocab) + ")");
  mc.validate();
  return mc;
}

PretrainResult run_pretrain(const ExperimentConfig& cfg, const TextDataset& data) {
  const ModelConfig mc = resolve_model_config(cfg, data.tokenizer().vocab_size());
  if (cfg.pretrain.seq_len > mc.context)
    throw std::invalid_argument("pretrain.seq_len must not exceed model.context");
  PretrainResult r{{ToyTransformer<float>::init(mc, cfg.seed), data.tokenizer()}, {}};
  r.report = pretrain(r.bundle.model, data, cfg.pretrain, cfg.seed);
  r.bundle.model.set_requires_grad(false);
  return r;
}

TokenBatch saliency_batch(const ExperimentConfig& cfg, const TextDataset& data) {
  return sample_calibration(data.split(parse_split(cfg.saliency.split)), cfg.saliency.samples,
                            cfg.saliency.seq_len, sub_seed(cfg.seed, "sampling.saliency"));
}

TokenBatch calibration_batch(const ExperimentConfig& cfg, const TextDataset& data) {
  return sample_calibration(data.split(parse_split(cfg.calibration_data.split)), cfg.calibration_data.samples,
                            cfg.calibration_data.seq_len, sub_seed(cfg.seed, "sampling.calibration"));
}

SaliencyMap<float> run_saliency(const ExperimentConfig& cfg, const ToyTransformer<float>& model,
                                const TextDataset& data) {
  return compute_saliency(model, saliency_batch(cfg, data), cfg.data.dataset_id);
}

QuantizedTransformer<float> run_quantize(const ExperimentConfig& cfg, const ToyTransformer<float>& model) {
  const QuantSpec& spec = cfg.calibration.quant;
  if (spec.kind == QuantizerKind::rtn || spec.kind == QuantizerKind::learnable_clip)
    return quantize_model_rtn(model, spec, cfg.calibration.quant_enabled);
  QuantizedTransformer<float> q;
  q.base = model;
  for (const auto& blk : model.blocks) {
    std::array<DeployedLinear<float>, kLinearsPerBlock> lay;
    for (std::size_t l = 0; l < kLinearsPerBlock; ++l)
      lay[l] = QuantizedLinear<float>(blk.linear[l], spec, 0, cfg.calibration.quant_enabled).deploy();
    q.layers.push_back(std::move(lay));
  }
  return q;
}

CalibrationResult<float> run_calibrate(const ExperimentConfig& cfg, const ToyTransformer<float>& model,
                                       const TextDataset& data, const SaliencyMap<float>* saliency) {
  if (cfg.calibration.variant == RegVariant::saliency && saliency == nullptr) throw MissingSaliencyError();
  return calibrate_model(model, calibration_batch(cfg, data), cfg.calibration,
                         cfg.calibration.variant == RegVariant::saliency ? saliency : nullptr);
}

EvalReport run_eval(const ExperimentConfig& cfg, const NllFn& nll, const TextDataset& data,
                    std::size_t context, const std::string& model_id) {
  const auto tokens = data.split(parse_split(cfg.eval.split));
  return perplexity(nll, tokens, context, model_id, cfg.data.dataset_id);
}

}  // namespace ulbq
