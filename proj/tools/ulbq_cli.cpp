#include <openssl/evp.h>

#include <chrono>
#include <cstdio>
#include <filesystem>
#include <fstream>
#include <iomanip>
#include <iostream>
#include <optional>
#include <sstream>
#include <string>
#include <vector>

#include "CLI11.hpp"
#include "json.hpp"
#include "ulbq/pipeline.hpp"

namespace fs = std::filesystem;
using ojson = nlohmann::ordered_json;
using namespace ulbq;

namespace {

// Flags that overlay config keys; unset flags leave the config untouched.
struct Overrides {
  std::string config;
  std::optional<std::uint64_t> seed;
  std::optional<int> bits;
  std::optional<std::string> group_size;
  std::optional<std::string> quantizer;
  std::optional<std::string> variant;
  std::optional<std::string> lora_position;
  std::optional<double> coef;
  std::optional<double> coef_mult;
  std::optional<std::string> out;
};

// Command-specific artifact paths.
struct Paths {
  std::string model;
  std::string saliency;
  std::string name;
  std::string baseline = "rtn";
  std::string full_precision = "fp";
  std::vector<std::string> reports;
};

class CliError : public std::runtime_error {
 public:
  CliError(std::string kind, const std::string& what) : std::runtime_error(what), kind_(std::move(kind)) {}
  const std::string& kind() const { return kind_; }

 private:
  std::string kind_;
};

ExperimentConfig resolve_config(const Overrides& o) {
  const ExperimentConfig base = o.config.empty() ? ExperimentConfig{} : load_config(o.config);
  ojson j = ojson::object();
  if (o.seed) j["seed"] = *o.seed;
  if (o.out) j["out_dir"] = *o.out;
  if (o.bits) j["quant"]["bits"] = *o.bits;
  if (o.group_size) {
    if (*o.group_size == "matrix") {
      j["quant"]["group_size"] = "matrix";
    } else {
      std::size_t pos = 0;
      unsigned long long g = 0;
      try {
        g = std::stoull(*o.group_size, &pos);
      } catch (const std::exception&) {
        pos = 0;
      }
      if (pos != o.group_size->size() || o.group_size->front() == '-')
        throw std::invalid_argument("--group-size must be a positive integer or 'matrix'");
      j["quant"]["group_size"] = g;
    }
  }
  if (o.quantizer) j["quant"]["kind"] = *o.quantizer;
  if (o.variant) j["calibration"]["variant"] = *o.variant;
  if (o.lora_position) j["calibration"]["lora_position"] = *o.lora_position;
  if (o.coef) j["calibration"]["coef"] = *o.coef;
  if (o.coef_mult) j["calibration"]["coef_mult"] = *o.coef_mult;
  return parse_config(j.dump(), base);
}

std::string sha256_hex(const std::string& bytes) {
  unsigned char md[EVP_MAX_MD_SIZE];
  unsigned int len = 0;
  if (EVP_Digest(bytes.data(), bytes.size(), md, &len, EVP_sha256(), nullptr) != 1)
    throw std::runtime_error("sha256 failed");
  std::ostringstream os;
  for (unsigned int i = 0; i < len; ++i) os << std::hex << std::setw(2) << std::setfill('0') << int(md[i]);
  return os.str();
}

std::string bytes_of(const Checkpoint& ck) {
  const auto b = ck.serialize();
  return {b.begin(), b.end()};
}

// Writes the outputs of one command and a manifest listing their hashes.
class Run {
 public:
  Run(std::string command, ExperimentConfig cfg)
      : command_(command), tag_(std::move(command)), cfg_(std::move(cfg)) {
    config_json_ = config_to_json(cfg_);
    fs::create_directories(cfg_.out_dir);
  }

  const ExperimentConfig& cfg() const { return cfg_; }
  const std::string& tag() const { return tag_; }
  // Prefix of the manifest, timing and error files.
  void set_tag(std::string tag) { tag_ = std::move(tag); }
  const std::string& config_json() const { return config_json_; }
  std::string path(const std::string& file) const { return (fs::path(cfg_.out_dir) / file).string(); }

  void write(const std::string& file, const std::string& bytes) {
    const std::string p = path(file);
    std::ofstream out(p, std::ios::binary | std::ios::trunc);
    if (!out) throw std::runtime_error("cannot write '" + p + "'");
    out.write(bytes.data(), static_cast<std::streamsize>(bytes.size()));
    if (!out) throw std::runtime_error("write failed for '" + p + "'");
    outputs_.push_back({{"file", file}, {"bytes", bytes.size()}, {"sha256", sha256_hex(bytes)}});
  }

  void write_checkpoint(const std::string& file, Checkpoint ck) {
    attach_config(ck, config_json_);
    write(file, bytes_of(ck));
  }

  // JSON artifact with the config echo and build id in front of `body`.
  void write_json(const std::string& file, const ojson& body) {
    ojson j;
    j["build_id"] = build_id();
    j["config"] = ojson::parse(config_json_);
    for (const auto& [k, v] : body.items()) j[k] = v;
    write(file, j.dump(2) + "\n");
  }

  void finish(double seconds) {
    ojson m;
    m["command"] = command_;
    m["build_id"] = build_id();
    m["config"] = ojson::parse(config_json_);
    m["outputs"] = outputs_;
    const std::string text = m.dump(2) + "\n";
    std::ofstream(path(tag_ + ".manifest.json"), std::ios::trunc) << text;
    // Wall time lives outside the hashed artifacts.
    ojson t;
    t["command"] = command_;
    t["seconds"] = seconds;
    std::ofstream(path(tag_ + ".timing.json"), std::ios::trunc) << t.dump(2) << "\n";
    std::error_code ec;
    fs::remove(path(tag_ + ".error.json"), ec);
  }

 private:
  std::string command_;
  std::string tag_;
  ExperimentConfig cfg_;
  std::string config_json_;
  ojson outputs_ = ojson::array();
};

std::string default_path(const Run& run, const std::string& given, const std::string& file) {
  return given.empty() ? run.path(file) : given;
}

Checkpoint load_checkpoint(const std::string& path, const std::string& producer) {
  if (!fs::exists(path))
    throw CliError("missing_input", "'" + path + "' does not exist; run the `" + producer + "` command first");
  return Checkpoint::load(path);
}

std::string csv_number(double v) {
  std::ostringstream os;
  os << std::setprecision(17) << v;
  return os.str();
}

std::string compact_config(const Run& run) { return ojson::parse(run.config_json()).dump(); }

void cmd_pretrain(Run& run) {
  const auto data = load_dataset(run.cfg());
  const auto r = run_pretrain(run.cfg(), data);
  run.write_checkpoint("model.ulbq", model_checkpoint(r.bundle.model, r.bundle.tokenizer));
  ojson valid = ojson::array();
  for (const auto& [step, loss] : r.report.valid_loss) valid.push_back({{"step", step}, {"loss", loss}});
  ojson body;
  body["steps"] = r.report.train_loss.size();
  body["final_train_loss"] = r.report.train_loss.empty() ? 0.0 : r.report.train_loss.back();
  body["final_valid_loss"] = r.report.final_valid_loss;
  body["skipped_steps"] = r.report.skipped_steps;
  body["valid_loss"] = valid;
  body["train_loss"] = r.report.train_loss;
  run.write_json("pretrain.json", body);
  std::cout << "pretrain: " << body["steps"] << " steps, valid loss " << r.report.final_valid_loss << "\n";
}

void cmd_saliency(Run& run, const Paths& p) {
  const auto bundle = load_model(load_checkpoint(default_path(run, p.model, "model.ulbq"), "pretrain"));
  const auto data = load_dataset(run.cfg(), &bundle.tokenizer);
  const auto s = run_saliency(run.cfg(), bundle.model, data);
  run.write_checkpoint("saliency.ulbq", saliency_checkpoint(s));
  std::cout << "saliency: " << s.alpha.size() << " maps from " << s.meta.samples << " samples (" << s.meta.dropped
            << " dropped)\n";
}

void cmd_quantize(Run& run, const Paths& p) {
  const auto bundle = load_model(load_checkpoint(default_path(run, p.model, "model.ulbq"), "pretrain"));
  const auto q = run_quantize(run.cfg(), bundle.model);
  run.write_checkpoint("quantized.ulbq", quantized_checkpoint(q, bundle.tokenizer));
  const auto& spec = run.cfg().calibration.quant;
  std::cout << "quantize: " << spec.bits << "-bit " << to_string(q.layers.front().front().kind) << "\n";
}

void cmd_calibrate(Run& run, const Paths& p) {
  const auto& cfg = run.cfg();
  const auto bundle = load_model(load_checkpoint(default_path(run, p.model, "model.ulbq"), "pretrain"));
  std::optional<SaliencyMap<float>> sal;
  if (cfg.calibration.variant == RegVariant::saliency) {
    const std::string sp = default_path(run, p.saliency, "saliency.ulbq");
    if (!fs::exists(sp)) throw MissingSaliencyError();
    sal = load_saliency(Checkpoint::load(sp));
  }
  const auto data = load_dataset(cfg, &bundle.tokenizer);
  const auto res = run_calibrate(cfg, bundle.model, data, sal ? &*sal : nullptr);
  run.write_checkpoint("calibrated.ulbq", quantized_checkpoint(res.model, bundle.tokenizer));

  std::ostringstream csv;
  csv << "# build_id: " << build_id() << "\n# config: " << compact_config(run) << "\n";
  csv << "block,epoch,output_loss,reg_loss,lambda\n";
  ojson blocks = ojson::array();
  for (const auto& b : res.report.blocks) {
    for (const auto& e : b.epochs)
      csv << e.block << ',' << e.epoch << ',' << csv_number(e.output_loss) << ',' << csv_number(e.reg_loss) << ','
          << csv_number(e.lambda) << "\n";
    blocks.push_back({{"block", b.block},
                      {"lambda", b.lambda},
                      {"rolled_back", b.rolled_back},
                      {"rollback_reason", b.rollback_reason},
                      {"skipped_steps", b.skipped_steps},
                      {"degenerate_groups", b.degenerate_groups},
                      {"initial_output_loss", b.initial_output_loss},
                      {"final_output_loss", b.final_output_loss}});
  }
  run.write("calibration.csv", csv.str());
  ojson body;
  body["blocks"] = blocks;
  body["rollbacks"] = res.report.rollbacks();
  run.write_json("calibration.json", body);
  std::cout << "calibrate: " << res.report.blocks.size() << " blocks, " << res.report.rollbacks()
            << " rolled back\n";
}

void cmd_eval(Run& run, const Paths& p) {
  if (p.model.empty()) throw std::invalid_argument("eval needs --model PATH");
  const auto ck = load_checkpoint(p.model, "pretrain");
  const std::string name = p.name.empty() ? fs::path(p.model).stem().string() : p.name;
  run.set_tag("eval." + name);
  EvalReport rep;
  if (ck.find(kMetaQuant)) {
    const auto b = load_quantized(ck);
    const auto data = load_dataset(run.cfg(), &b.tokenizer);
    rep = run_eval(run.cfg(), model_nll(b.model), data, b.model.base.config.context, name);
  } else {
    const auto b = load_model(ck);
    const auto data = load_dataset(run.cfg(), &b.tokenizer);
    rep = run_eval(run.cfg(), model_nll(b.model), data, b.model.config.context, name);
  }
  ojson body = ojson::parse(report_to_json(rep));
  body["split"] = run.cfg().eval.split;
  run.write_json("eval." + name + ".json", body);
  std::cout << "eval " << name << ": ppl " << std::setprecision(6) << rep.perplexity << " over " << rep.tokens
            << " tokens\n";
}

void cmd_pack(Run& run, const Paths& p) {
  const auto ck = load_checkpoint(default_path(run, p.model, "calibrated.ulbq"), "calibrate");
  const auto packed = pack_checkpoint(ck);
  run.write_checkpoint("packed.ulbq", packed);
  std::cout << "pack: " << ck.serialize().size() << " -> " << packed.serialize().size() << " bytes\n";
}

void cmd_report(Run& run, const Paths& p) {
  if (p.reports.empty()) throw std::invalid_argument("report needs one or more eval JSON files");
  std::vector<CompareEntry> entries;
  for (const auto& f : p.reports) {
    std::ifstream in(f);
    if (!in) throw CliError("missing_input", "'" + f + "' does not exist; run the `eval` command first");
    std::stringstream ss;
    ss << in.rdbuf();
    const EvalReport r = report_from_json(ss.str());
    entries.push_back({r.model_id, r});
  }
  const std::string table = compare(entries, p.baseline, p.full_precision);
  run.write("report.csv", "# build_id: " + std::string(build_id()) + "\n# config: " + compact_config(run) + "\n" +
                              table);
  std::cout << table;
}

std::string error_kind(const std::exception& e) {
  if (const auto* c = dynamic_cast<const CliError*>(&e)) return c->kind();
  if (dynamic_cast<const MissingSaliencyError*>(&e)) return "missing_saliency";
  if (dynamic_cast<const CorruptFileError*>(&e)) return "corrupt_file";
  if (dynamic_cast<const DivergenceError*>(&e)) return "divergence";
  if (dynamic_cast<const SaliencyError*>(&e)) return "saliency";
  if (dynamic_cast<const ShapeError*>(&e)) return "shape";
  if (dynamic_cast<const std::invalid_argument*>(&e)) return "invalid_argument";
  return "runtime_error";
}

int report_error(const std::string& command, const std::string& kind, const std::string& message,
                 const std::string& out_dir, const std::string& tag) {
  ojson err;
  err["status"] = "error";
  err["command"] = command;
  err["error"] = kind;
  err["message"] = message;
  err["build_id"] = build_id();
  std::cerr << err.dump() << "\n";
  if (!out_dir.empty()) {
    std::error_code ec;
    fs::create_directories(out_dir, ec);
    std::ofstream(fs::path(out_dir) / (tag + ".error.json"), std::ios::trunc) << err.dump(2) << "\n";
  }
  return 1;
}

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"Low-bit quantization with LoRA calibration and saliency-aware weight preservation"};
  app.require_subcommand(1);
  Overrides o;
  Paths p;

  auto add_common = [&](CLI::App* sub) {
    sub->add_option("--config", o.config, "JSON experiment config")->check(CLI::ExistingFile);
    sub->add_option("--seed", o.seed, "experiment seed");
    sub->add_option("--bits", o.bits, "quantization bits")->check(CLI::IsMember({1, 2, 3, 4, 8}));
    sub->add_option("--group-size", o.group_size, "group size N or 'matrix'");
    sub->add_option("--quantizer", o.quantizer, "quantizer kind")
        ->check(CLI::IsMember({"rtn", "learnable_clip", "dual_binary", "mos"}));
    sub->add_option("--variant", o.variant, "weight-preservation variant")
        ->check(CLI::IsMember({"none", "naive", "saliency"}));
    sub->add_option("--lora-position", o.lora_position, "penalty target")->check(CLI::IsMember({"before", "after"}));
    sub->add_option("--coef", o.coef, "initial regularization coefficient");
    sub->add_option("--coef-mult", o.coef_mult, "per-block coefficient multiplier");
    sub->add_option("--out", o.out, "output directory");
  };

  auto* pretrain_cmd = app.add_subcommand("pretrain", "train the full-precision character model");
  auto* saliency_cmd = app.add_subcommand("saliency", "squared-gradient saliency of every block linear");
  auto* quantize_cmd = app.add_subcommand("quantize", "uncalibrated quantization (round-to-nearest baseline)");
  auto* calibrate_cmd = app.add_subcommand("calibrate", "block-wise calibration of quantizers and LoRA");
  auto* eval_cmd = app.add_subcommand("eval", "perplexity of a model or quantized checkpoint");
  auto* pack_cmd = app.add_subcommand("pack", "bit-pack a quantized checkpoint");
  auto* report_cmd = app.add_subcommand("report", "compare eval reports and compute gap recovered");
  for (auto* sub : {pretrain_cmd, saliency_cmd, quantize_cmd, calibrate_cmd, eval_cmd, pack_cmd, report_cmd})
    add_common(sub);
  for (auto* sub : {saliency_cmd, quantize_cmd, calibrate_cmd, eval_cmd, pack_cmd})
    sub->add_option("--model", p.model, "input checkpoint");
  calibrate_cmd->add_option("--saliency", p.saliency, "saliency checkpoint");
  eval_cmd->add_option("--name", p.name, "model id in the report (default: file stem)");
  report_cmd->add_option("reports", p.reports, "eval JSON files")->required();
  report_cmd->add_option("--baseline", p.baseline, "model id of the baseline row");
  report_cmd->add_option("--fp", p.full_precision, "model id of the full-precision row");

  std::string command = "ulbq";
  try {
    app.parse(argc, argv);
  } catch (const CLI::CallForHelp& e) {
    return app.exit(e);
  } catch (const CLI::CallForAllHelp& e) {
    return app.exit(e);
  } catch (const CLI::ParseError& e) {
    if (!app.get_subcommands().empty()) command = app.get_subcommands().front()->get_name();
    return report_error(command, "usage", e.what(), "", command);
  }
  command = app.get_subcommands().front()->get_name();

  std::string out_dir = o.out.value_or("");
  std::string tag = command;
  try {
    Run run(command, resolve_config(o));
    out_dir = run.cfg().out_dir;
    if (command == "eval" && !p.model.empty())
      tag = "eval." + (p.name.empty() ? fs::path(p.model).stem().string() : p.name);
    const auto t0 = std::chrono::steady_clock::now();
    if (command == "pretrain") cmd_pretrain(run);
    else if (command == "saliency") cmd_saliency(run, p);
    else if (command == "quantize") cmd_quantize(run, p);
    else if (command == "calibrate") cmd_calibrate(run, p);
    else if (command == "eval") cmd_eval(run, p);
    else if (command == "pack") cmd_pack(run, p);
    else cmd_report(run, p);
    run.finish(std::chrono::duration<double>(std::chrono::steady_clock::now() - t0).count());
  } catch (const std::exception& e) {
    return report_error(command, error_kind(e), e.what(), out_dir, tag);
  }
  return 0;
}
