#include "ulbq/config.hpp"

#include <fstream>
#include <functional>
#include <map>
#include <sstream>
#include <type_traits>

#include "json.hpp"

#ifndef ULBQ_BUILD_ID
#define ULBQ_BUILD_ID "unknown"
#endif

namespace ulbq {

using json = nlohmann::json;
using ojson = nlohmann::ordered_json;

const char* build_id() { return ULBQ_BUILD_ID; }

ExperimentConfig::ExperimentConfig() {
  pretrain.steps = 2000;
  pretrain.batch = 8;
  pretrain.seq_len = 128;
  calibration.quant = QuantSpec{2, 0, QuantizerKind::learnable_clip};
}

void ExperimentConfig::validate() const {
  ModelConfig dims = model;
  if (dims.vocab == 0) dims.vocab = 1;  // filled in from the tokenizer later
  dims.validate();
  if (pretrain.seq_len == 0 || pretrain.seq_len > model.context)
    throw std::invalid_argument("pretrain.seq_len must lie in [1, model.context]");
  if (data.valid_fraction < 0 || data.test_fraction < 0 || data.valid_fraction + data.test_fraction >= 1)
    throw std::invalid_argument("data.valid_fraction + data.test_fraction must lie in [0, 1)");
  if (saliency.samples == 0 || saliency.seq_len == 0)
    throw std::invalid_argument("saliency.samples and saliency.seq_len must be positive");
  if (calibration_data.samples == 0 || calibration_data.seq_len == 0)
    throw std::invalid_argument("calibration_data.samples and calibration_data.seq_len must be positive");
  if (saliency.seq_len > model.context || calibration_data.seq_len > model.context)
    throw std::invalid_argument("sequence lengths must not exceed model.context (" +
                                std::to_string(model.context) + ")");
  parse_split(saliency.split);
  parse_split(calibration_data.split);
  parse_split(eval.split);
  calibration.validate();
}

namespace {

// Field binder: one setter per known key, so unknown keys are easy to reject.
using Setter = std::function<void(const json&, const std::string& path)>;

template <typename V>
Setter bind(V& field) {
  return [&field](const json& j, const std::string& path) {
    if constexpr (std::is_integral_v<V> && std::is_unsigned_v<V>) {
      if (!j.is_number_unsigned())
        throw std::invalid_argument("config key '" + path + "' must be a non-negative integer");
    }
    try {
      field = j.get<V>();
    } catch (const json::exception&) {
      throw std::invalid_argument("config key '" + path + "' has the wrong type (" + j.type_name() + ")");
    }
  };
}

void apply(const json& j, const std::string& prefix, const std::map<std::string, Setter>& fields) {
  if (!j.is_object()) throw std::invalid_argument("config section '" + prefix + "' must be an object");
  for (const auto& [key, value] : j.items()) {
    const std::string path = prefix.empty() ? key : prefix + "." + key;
    auto it = fields.find(key);
    if (it == fields.end()) throw std::invalid_argument("unknown config key '" + path + "'");
    it->second(value, path);
  }
}

template <typename E>
Setter bind_enum(E& field, E (*parse)(const std::string&)) {
  return [&field, parse](const json& j, const std::string& path) {
    if (!j.is_string()) throw std::invalid_argument("config key '" + path + "' must be a string");
    field = parse(j.get<std::string>());
  };
}

Setter bind_group_size(std::size_t& field) {
  return [&field](const json& j, const std::string& path) {
    if (j.is_string() && j.get<std::string>() == "matrix") {
      field = 0;
    } else if (j.is_number_unsigned() && j.get<std::size_t>() > 0) {
      field = j.get<std::size_t>();
    } else {
      throw std::invalid_argument("config key '" + path + "' must be a positive integer or \"matrix\"");
    }
  };
}

Setter bind_bits(int& field) {
  return [&field](const json& j, const std::string& path) {
    if (!j.is_number_integer()) throw std::invalid_argument("config key '" + path + "' must be an integer");
    field = j.get<int>();
  };
}

Setter section(const std::map<std::string, Setter>& fields) {
  return [fields](const json& j, const std::string& path) { apply(j, path, fields); };
}

}  // namespace

ExperimentConfig parse_config(const std::string& json_text, const ExperimentConfig& base) {
  json j;
  try {
    j = json::parse(json_text);
  } catch (const json::parse_error& e) {
    throw std::invalid_argument(std::string("config is not valid JSON: ") + e.what());
  }
  ExperimentConfig c = base;
  auto& q = c.calibration.quant;
  const std::map<std::string, Setter> root{
      {"seed", bind(c.seed)},
      {"out_dir", bind(c.out_dir)},
      {"model", section({{"vocab", bind(c.model.vocab)},
                         {"d_model", bind(c.model.d_model)},
                         {"n_heads", bind(c.model.n_heads)},
                         {"n_blocks", bind(c.model.n_blocks)},
                         {"d_ff", bind(c.model.d_ff)},
                         {"context", bind(c.model.context)},
                         {"norm_eps", bind(c.model.norm_eps)}})},
      {"pretrain", section({{"steps", bind(c.pretrain.steps)},
                            {"batch", bind(c.pretrain.batch)},
                            {"seq_len", bind(c.pretrain.seq_len)},
                            {"lr", bind(c.pretrain.lr)},
                            {"weight_decay", bind(c.pretrain.weight_decay)},
                            {"warmup", bind(c.pretrain.warmup)},
                            {"eval_every", bind(c.pretrain.eval_every)},
                            {"eval_batches", bind(c.pretrain.eval_batches)}})},
      {"data", section({{"corpus", bind(c.data.corpus)},
                        {"dataset_id", bind(c.data.dataset_id)},
                        {"valid_fraction", bind(c.data.valid_fraction)},
                        {"test_fraction", bind(c.data.test_fraction)}})},
      {"saliency", section({{"split", bind(c.saliency.split)},
                            {"samples", bind(c.saliency.samples)},
                            {"seq_len", bind(c.saliency.seq_len)}})},
      {"calibration_data", section({{"split", bind(c.calibration_data.split)},
                                    {"samples", bind(c.calibration_data.samples)},
                                    {"seq_len", bind(c.calibration_data.seq_len)}})},
      {"quant", section({{"bits", bind_bits(q.bits)},
                         {"group_size", bind_group_size(q.group_size)},
                         {"kind", bind_enum(q.kind, &parse_quantizer_kind)},
                         {"clip_init", bind(q.clip_init)},
                         {"mos_experts", bind(q.mos_experts)}})},
      {"calibration", section({{"variant", bind_enum(c.calibration.variant, &parse_reg_variant)},
                               {"lora_position", bind_enum(c.calibration.position, &parse_lora_position)},
                               {"coef", bind(c.calibration.coef)},
                               {"coef_mult", bind(c.calibration.coef_mult)},
                               {"epochs", bind(c.calibration.epochs)},
                               {"batch_size", bind(c.calibration.batch_size)},
                               {"lr_quant", bind(c.calibration.lr_quant)},
                               {"lr_lora", bind(c.calibration.lr_lora)},
                               {"weight_decay", bind(c.calibration.weight_decay)},
                               {"lora_rank", bind(c.calibration.lora_rank)},
                               {"divergence_threshold", bind(c.calibration.divergence_threshold)}})},
      {"eval", section({{"split", bind(c.eval.split)}})},
  };
  apply(j, "", root);
  c.validate();
  return c;
}

ExperimentConfig load_config(const std::string& path) {
  std::ifstream in(path);
  if (!in) throw std::runtime_error("cannot open config '" + path + "'");
  std::stringstream ss;
  ss << in.rdbuf();
  return parse_config(ss.str());
}

std::string config_to_json(const ExperimentConfig& c) {
  const auto& q = c.calibration.quant;
  ojson j;
  j["seed"] = c.seed;
  j["out_dir"] = c.out_dir;
  j["model"] = {{"vocab", c.model.vocab},       {"d_model", c.model.d_model}, {"n_heads", c.model.n_heads},
                {"n_blocks", c.model.n_blocks}, {"d_ff", c.model.d_ff},       {"context", c.model.context},
                {"norm_eps", c.model.norm_eps}};
  j["pretrain"] = {{"steps", c.pretrain.steps},
                   {"batch", c.pretrain.batch},
                   {"seq_len", c.pretrain.seq_len},
                   {"lr", c.pretrain.lr},
                   {"weight_decay", c.pretrain.weight_decay},
                   {"warmup", c.pretrain.warmup},
                   {"eval_every", c.pretrain.eval_every},
                   {"eval_batches", c.pretrain.eval_batches}};
  j["data"] = {{"corpus", c.data.corpus},
               {"dataset_id", c.data.dataset_id},
               {"valid_fraction", c.data.valid_fraction},
               {"test_fraction", c.data.test_fraction}};
  j["saliency"] = {{"split", c.saliency.split}, {"samples", c.saliency.samples}, {"seq_len", c.saliency.seq_len}};
  j["calibration_data"] = {{"split", c.calibration_data.split},
                           {"samples", c.calibration_data.samples},
                           {"seq_len", c.calibration_data.seq_len}};
  j["quant"] = {{"bits", q.bits},
                {"group_size", q.group_size == 0 ? ojson("matrix") : ojson(q.group_size)},
                {"kind", to_string(q.kind)},
                {"clip_init", q.clip_init},
                {"mos_experts", q.mos_experts}};
  j["calibration"] = {{"variant", to_string(c.calibration.variant)},
                      {"lora_position", to_string(c.calibration.position)},
                      {"coef", c.calibration.coef},
                      {"coef_mult", c.calibration.coef_mult},
                      {"epochs", c.calibration.epochs},
                      {"batch_size", c.calibration.batch_size},
                      {"lr_quant", c.calibration.lr_quant},
                      {"lr_lora", c.calibration.lr_lora},
                      {"weight_decay", c.calibration.weight_decay},
                      {"lora_rank", c.calibration.lora_rank},
                      {"divergence_threshold", c.calibration.divergence_threshold}};
  j["eval"] = {{"split", c.eval.split}};
  return j.dump(2);
}

}  // namespace ulbq
