#include "ulbq/serialize.hpp"

#include <cstring>

#include "json.hpp"
#include "ulbq/config.hpp"

namespace ulbq {

using ojson = nlohmann::ordered_json;

namespace {

std::vector<std::uint32_t> to_u32(const Shape& s) { return {s.begin(), s.end()}; }
Shape to_shape(const std::vector<std::uint32_t>& s) { return {s.begin(), s.end()}; }

Record dense(const std::string& name, const Tensor<float>& t) {
  return make_dense(name, to_u32(t.shape()), std::span<const float>(t.value().data(), t.value().size()));
}

Tensor<float> tensor_of(const Record& r) {
  const auto v = dense_values(r);
  Array<float> a(static_cast<Eigen::Index>(v.size()));
  if (!v.empty()) std::memcpy(a.data(), v.data(), v.size() * sizeof(float));
  return Tensor<float>(to_shape(r.shape), std::move(a));
}

Tensor<float> tensor_of(const std::vector<float>& v, const Shape& shape) {
  Array<float> a(static_cast<Eigen::Index>(v.size()));
  if (!v.empty()) std::memcpy(a.data(), v.data(), v.size() * sizeof(float));
  return Tensor<float>(shape, std::move(a));
}

Tensor<float> tensor_of(const Array<float>& a) {
  return Tensor<float>(Shape{static_cast<std::size_t>(a.size())}, a);
}

Tensor<float> load_tensor(const Checkpoint& ck, const std::string& name) { return tensor_of(ck.at(name)); }

// One group spanning the whole matrix; codes {0, 1} map to {-1, +1}.
constexpr float kSignScale = 2.0f, kSignZero = 0.5f;

Record pack_sign(const std::string& name, const Record& dense_sign) {
  const auto v = dense_values(dense_sign);
  std::vector<std::uint8_t> codes(v.size());
  for (std::size_t i = 0; i < v.size(); ++i) codes[i] = v[i] > 0 ? 1 : 0;
  const bool empty = v.empty();
  return pack_codes(name, codes, dense_sign.shape, 1, 0, empty ? std::vector<float>{} : std::vector<float>{kSignScale},
                    empty ? std::vector<float>{} : std::vector<float>{kSignZero});
}

Tensor<float> sign_tensor(const Record& r) {
  if (r.is_packed()) return tensor_of(dequantize_packed(r), to_shape(r.shape));
  return tensor_of(r);
}

void put_tokenizer(Checkpoint& ck, const CharTokenizer& tok) {
  ojson j = ojson::array();
  for (char32_t c : tok.alphabet()) j.push_back(static_cast<std::uint32_t>(c));
  ck.add(make_blob(kMetaTokenizer, j.dump()));
}

CharTokenizer get_tokenizer(const Checkpoint& ck) {
  const auto j = nlohmann::json::parse(blob_text(ck.at(kMetaTokenizer)));
  std::vector<char32_t> alphabet;
  for (const auto& c : j) alphabet.push_back(static_cast<char32_t>(c.get<std::uint32_t>()));
  return CharTokenizer(std::move(alphabet));
}

void put_model_config(Checkpoint& ck, const ModelConfig& c) {
  const ojson j{{"vocab", c.vocab},       {"d_model", c.d_model}, {"n_heads", c.n_heads},
                {"n_blocks", c.n_blocks}, {"d_ff", c.d_ff},       {"context", c.context},
                {"norm_eps", c.norm_eps}};
  ck.add(make_blob(kMetaModel, j.dump()));
}

ModelConfig get_model_config(const Checkpoint& ck) {
  const auto j = nlohmann::json::parse(blob_text(ck.at(kMetaModel)));
  ModelConfig c;
  c.vocab = j.at("vocab").get<std::size_t>();
  c.d_model = j.at("d_model").get<std::size_t>();
  c.n_heads = j.at("n_heads").get<std::size_t>();
  c.n_blocks = j.at("n_blocks").get<std::size_t>();
  c.d_ff = j.at("d_ff").get<std::size_t>();
  c.context = j.at("context").get<std::size_t>();
  c.norm_eps = j.at("norm_eps").get<double>();
  c.validate();
  return c;
}

std::string block_prefix(std::size_t b) { return "blocks." + std::to_string(b) + "."; }

// Embeddings, norms and head; block linears are left empty.
void put_shared(Checkpoint& ck, const ToyTransformer<float>& m) {
  ck.add(dense("tok_emb", m.tok_emb));
  ck.add(dense("pos_emb", m.pos_emb));
  for (std::size_t b = 0; b < m.blocks.size(); ++b) {
    ck.add(dense(block_prefix(b) + "attn_norm", m.blocks[b].attn_norm));
    ck.add(dense(block_prefix(b) + "mlp_norm", m.blocks[b].mlp_norm));
  }
  ck.add(dense("final_norm", m.final_norm));
  ck.add(dense("lm_head", m.lm_head));
}

ToyTransformer<float> get_shared(const Checkpoint& ck, const ModelConfig& cfg) {
  ToyTransformer<float> m;
  m.config = cfg;
  m.tok_emb = load_tensor(ck, "tok_emb");
  m.pos_emb = load_tensor(ck, "pos_emb");
  for (std::size_t b = 0; b < cfg.n_blocks; ++b) {
    BlockParams<float> blk;
    blk.attn_norm = load_tensor(ck, block_prefix(b) + "attn_norm");
    blk.mlp_norm = load_tensor(ck, block_prefix(b) + "mlp_norm");
    m.blocks.push_back(std::move(blk));
  }
  m.final_norm = load_tensor(ck, "final_norm");
  m.lm_head = load_tensor(ck, "lm_head");
  if (m.tok_emb.shape() != Shape{cfg.vocab, cfg.d_model})
    throw CorruptFileError("tok_emb shape " + shape_str(m.tok_emb.shape()) + " does not match model metadata");
  return m;
}

struct QuantMeta {
  QuantizerKind kind = QuantizerKind::rtn;
  int bits = 0;
  std::size_t group_size = 0;
  bool packed = false;
};

QuantMeta get_quant_meta(const Checkpoint& ck) {
  const auto j = nlohmann::json::parse(blob_text(ck.at(kMetaQuant)));
  QuantMeta q;
  q.kind = parse_quantizer_kind(j.at("kind").get<std::string>());
  q.bits = j.at("bits").get<int>();
  q.group_size = j.at("group_size").get<std::size_t>();
  q.packed = j.at("packed").get<bool>();
  return q;
}

void put_quant_meta(Checkpoint& ck, const QuantMeta& q) {
  const ojson j{{"kind", to_string(q.kind)}, {"bits", q.bits}, {"group_size", q.group_size}, {"packed", q.packed}};
  ck.add(make_blob(kMetaQuant, j.dump()));
}

void copy_meta(const Checkpoint& from, Checkpoint& to) {
  for (const auto* name : {kMetaModel, kMetaTokenizer, kMetaConfig})
    if (const Record* r = from.find(name)) to.add(*r);
}

bool same_bits(const Tensor<float>& a, const Tensor<float>& b) {
  return a.shape() == b.shape() &&
         std::memcmp(a.value().data(), b.value().data(), sizeof(float) * a.value().size()) == 0;
}

}  // namespace

Checkpoint model_checkpoint(const ToyTransformer<float>& m, const CharTokenizer& tok) {
  Checkpoint ck;
  put_model_config(ck, m.config);
  put_tokenizer(ck, tok);
  for (const auto& [name, t] : m.named_parameters()) ck.add(dense(name, t));
  return ck;
}

ModelBundle load_model(const Checkpoint& ck) {
  if (ck.find(kMetaQuant)) throw std::invalid_argument("expected a full-precision model checkpoint, got a quantized one");
  const ModelConfig cfg = get_model_config(ck);
  ModelBundle out{get_shared(ck, cfg), get_tokenizer(ck)};
  for (std::size_t b = 0; b < cfg.n_blocks; ++b)
    for (std::size_t l = 0; l < kLinearsPerBlock; ++l)
      out.model.blocks[b].linear[l] = load_tensor(ck, linear_name(b, l));
  return out;
}

Checkpoint quantized_checkpoint(const QuantizedTransformer<float>& m, const CharTokenizer& tok) {
  if (m.layers.empty()) throw std::invalid_argument("quantized_checkpoint: model has no layers");
  Checkpoint ck;
  put_model_config(ck, m.base.config);
  put_tokenizer(ck, tok);
  const auto& first = m.layers.front().front();
  put_quant_meta(ck, QuantMeta{first.kind, first.bits, first.group_size, false});
  put_shared(ck, m.base);
  for (std::size_t b = 0; b < m.layers.size(); ++b)
    for (std::size_t l = 0; l < kLinearsPerBlock; ++l) {
      const auto& d = m.layers[b][l];
      const std::string p = linear_name(b, l) + ".";
      ck.add(dense(p + "qweight", d.qweight));
      if (d.codes && d.group_params) {
        const CodeMatrix& c = *d.codes;
        std::vector<float> cv(static_cast<std::size_t>(c.size()));
        for (Eigen::Index i = 0; i < c.size(); ++i) cv[static_cast<std::size_t>(i)] = c.data()[i];
        ck.add(make_dense(p + "qcodes", to_u32(d.qweight.shape()), cv));
        ck.add(dense(p + "qscale", tensor_of(d.group_params->scale)));
        ck.add(dense(p + "qzero", tensor_of(d.group_params->zero)));
      }
      if (d.dual) {
        ck.add(dense(p + "db_b1", d.dual->b1));
        ck.add(dense(p + "db_b2", d.dual->b2));
        ck.add(dense(p + "db_alpha1", d.dual->alpha1));
        ck.add(dense(p + "db_alpha2", d.dual->alpha2));
      }
      if (d.mos) {
        ck.add(dense(p + "mos_sign", d.mos->sign));
        ck.add(dense(p + "mos_experts", d.mos->experts));
        ck.add(dense(p + "mos_router", d.mos->router));
      }
      if (d.lora.enabled()) {
        ck.add(dense(p + "lora_a", d.lora.a));
        ck.add(dense(p + "lora_b", d.lora.b));
      }
    }
  return ck;
}

QuantizedBundle load_quantized(const Checkpoint& ck) {
  if (!ck.find(kMetaQuant)) throw std::invalid_argument("expected a quantized checkpoint (no quantizer metadata)");
  const ModelConfig cfg = get_model_config(ck);
  const QuantMeta meta = get_quant_meta(ck);
  QuantizedBundle out;
  out.tokenizer = get_tokenizer(ck);
  out.packed = meta.packed;
  out.model.base = get_shared(ck, cfg);
  for (std::size_t b = 0; b < cfg.n_blocks; ++b) {
    std::array<DeployedLinear<float>, kLinearsPerBlock> lay;
    for (std::size_t l = 0; l < kLinearsPerBlock; ++l) {
      const std::string p = linear_name(b, l) + ".";
      auto& d = lay[l];
      d.kind = meta.kind;
      d.bits = meta.bits;
      d.group_size = meta.group_size;
      if (const Record* a = ck.find(p + "lora_a")) d.lora = {tensor_of(*a), load_tensor(ck, p + "lora_b")};
      if (const Record* s = ck.find(p + "mos_sign"))
        d.mos = MosState<float>{sign_tensor(*s), load_tensor(ck, p + "mos_experts"), load_tensor(ck, p + "mos_router")};
      if (const Record* b1 = ck.find(p + "db_b1"))
        d.dual = DualBinaryState<float>{sign_tensor(*b1), sign_tensor(ck.at(p + "db_b2")),
                                        load_tensor(ck, p + "db_alpha1"), load_tensor(ck, p + "db_alpha2")};
      const Record* qw = ck.find(p + "qweight");
      if (qw && qw->is_packed()) {
        d.qweight = tensor_of(dequantize_packed(*qw), to_shape(qw->shape));
      } else if (qw) {
        d.qweight = tensor_of(*qw);
      } else if (d.dual) {
        const auto& s = d.dual->b1.shape();
        d.qweight = d.dual->weight(GroupLayout(s[0], s[1], meta.group_size));
      } else if (d.mos) {
        d.qweight = d.mos->mean_weight();
      } else {
        throw CorruptFileError("layer '" + linear_name(b, l) + "' has no weight record");
      }
      if (d.lora.enabled()) check_lora_shapes(d.qweight.dim(0), d.qweight.dim(1), d.lora);
    }
    out.model.layers.push_back(std::move(lay));
  }
  return out;
}

Checkpoint pack_checkpoint(const Checkpoint& unpacked) {
  QuantMeta meta = get_quant_meta(unpacked);
  if (meta.packed) throw std::invalid_argument("checkpoint is already packed");
  const ModelConfig cfg = get_model_config(unpacked);

  Checkpoint out;
  copy_meta(unpacked, out);
  meta.packed = true;
  put_quant_meta(out, meta);
  std::vector<std::string> handled;
  for (std::size_t b = 0; b < cfg.n_blocks; ++b)
    for (std::size_t l = 0; l < kLinearsPerBlock; ++l) {
      const std::string p = linear_name(b, l) + ".";
      const Record& qw = unpacked.at(p + "qweight");
      if (const Record* codes = unpacked.find(p + "qcodes")) {
        const auto cv = dense_values(*codes);
        std::vector<std::uint8_t> c(cv.begin(), cv.end());
        out.add(pack_codes(p + "qweight", c, qw.shape, meta.bits, static_cast<std::uint32_t>(meta.group_size),
                           dense_values(unpacked.at(p + "qscale")), dense_values(unpacked.at(p + "qzero"))));
        handled.insert(handled.end(), {p + "qweight", p + "qcodes", p + "qscale", p + "qzero"});
      } else if (unpacked.find(p + "db_b1")) {
        out.add(pack_sign(p + "db_b1", unpacked.at(p + "db_b1")));
        out.add(pack_sign(p + "db_b2", unpacked.at(p + "db_b2")));
        handled.insert(handled.end(), {p + "qweight", p + "db_b1", p + "db_b2"});
      } else if (unpacked.find(p + "mos_sign")) {
        out.add(pack_sign(p + "mos_sign", unpacked.at(p + "mos_sign")));
        handled.insert(handled.end(), {p + "qweight", p + "mos_sign"});
      }
    }
  for (const auto& r : unpacked.records()) {
    if (r.name == kMetaQuant || out.find(r.name)) continue;
    if (std::find(handled.begin(), handled.end(), r.name) != handled.end()) continue;
    out.add(r);
  }

  // The packed form must reproduce every materialized weight exactly.
  const auto a = load_quantized(unpacked);
  const auto p = load_quantized(out);
  for (std::size_t b = 0; b < cfg.n_blocks; ++b)
    for (std::size_t l = 0; l < kLinearsPerBlock; ++l)
      if (!same_bits(a.model.layers[b][l].qweight, p.model.layers[b][l].qweight))
        throw std::runtime_error("pack: packed form of '" + linear_name(b, l) +
                                 "' does not reproduce the stored weight");
  return out;
}

Checkpoint saliency_checkpoint(const SaliencyMap<float>& s) {
  Checkpoint ck;
  const ojson meta{{"dataset", s.meta.dataset},
                   {"samples", s.meta.samples},
                   {"dropped", s.meta.dropped},
                   {"seq_len", s.meta.seq_len},
                   {"normalization", s.meta.normalization}};
  ck.add(make_blob(kMetaSaliency, meta.dump()));
  for (const auto& [name, t] : s.alpha) ck.add(dense(name + ".saliency", t));
  return ck;
}

SaliencyMap<float> load_saliency(const Checkpoint& ck) {
  const Record* m = ck.find(kMetaSaliency);
  if (!m) throw std::invalid_argument("not a saliency checkpoint (no saliency metadata)");
  const auto j = nlohmann::json::parse(blob_text(*m));
  SaliencyMap<float> s;
  s.meta.dataset = j.at("dataset").get<std::string>();
  s.meta.samples = j.at("samples").get<std::size_t>();
  s.meta.dropped = j.at("dropped").get<std::size_t>();
  s.meta.seq_len = j.at("seq_len").get<std::size_t>();
  s.meta.normalization = j.at("normalization").get<std::string>();
  const std::string suffix = ".saliency";
  for (const auto& r : ck.records()) {
    if (r.is_dense() && r.name.size() > suffix.size() && r.name.ends_with(suffix))
      s.alpha.emplace(r.name.substr(0, r.name.size() - suffix.size()), tensor_of(r));
  }
  return s;
}

void attach_config(Checkpoint& ck, const std::string& config_json) {
  ojson j;
  j["build_id"] = build_id();
  j["config"] = ojson::parse(config_json);
  ck.add(make_blob(kMetaConfig, j.dump()));
}

}  // namespace ulbq
