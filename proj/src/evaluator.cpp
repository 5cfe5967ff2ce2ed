#include "ulbq/evaluator.hpp"

#include <cmath>
#include <cstring>
#include <iomanip>
#include <limits>
#include <sstream>
#include <stdexcept>

#include "json.hpp"
#include "ulbq/checkpoint.hpp"

namespace ulbq {

EvalReport perplexity(const NllFn& nll, std::span<const int> tokens, std::size_t context,
                      std::string model_id, std::string dataset_id) {
  if (tokens.size() < 2)
    throw std::invalid_argument("perplexity: token stream needs at least 2 tokens, got " +
                                std::to_string(tokens.size()));
  if (context == 0) throw std::invalid_argument("perplexity: context must be positive");

  EvalReport rep;
  rep.model_id = std::move(model_id);
  rep.dataset_id = std::move(dataset_id);
  double total = 0;
  std::vector<std::uint8_t> stream;
  const std::size_t last = tokens.size() - 1;
  for (std::size_t start = 0; start < last; start += context) {
    const std::size_t len = std::min(context, last - start);
    const auto values = nll(tokens.subspan(start, len), tokens.subspan(start + 1, len));
    if (values.size() != len)
      throw std::runtime_error("perplexity: scorer returned " + std::to_string(values.size()) +
                               " values for a window of " + std::to_string(len));
    for (double v : values) {
      if (!std::isfinite(v)) rep.nan = true;
      total += v;
      std::uint8_t b[sizeof(double)];
      std::memcpy(b, &v, sizeof(double));
      stream.insert(stream.end(), b, b + sizeof(double));
    }
    rep.tokens += len;
  }
  std::ostringstream hex;
  hex << std::hex << std::setw(8) << std::setfill('0') << crc32(stream);
  rep.nll_digest = hex.str();
  if (rep.nan) {
    rep.mean_nll = std::numeric_limits<double>::quiet_NaN();
    rep.perplexity = std::numeric_limits<double>::quiet_NaN();
  } else {
    rep.mean_nll = total / static_cast<double>(rep.tokens);
    rep.perplexity = std::exp(rep.mean_nll);
  }
  return rep;
}

double gap_recovered(double ppl_base, double ppl_method, double ppl_fp) {
  const double gap = ppl_base - ppl_fp;
  if (gap == 0) return std::numeric_limits<double>::quiet_NaN();
  return (ppl_base - ppl_method) / gap * 100.0;
}

namespace {

std::string fmt(double v) {
  if (std::isnan(v)) return "NaN";
  std::ostringstream s;
  s << std::setprecision(10) << v;
  return s.str();
}

const EvalReport& find_entry(const std::vector<CompareEntry>& entries, const std::string& name) {
  for (const auto& e : entries)
    if (e.config == name) return e.report;
  throw std::invalid_argument("compare: no report for config '" + name + "'");
}

}  // namespace

std::string compare(const std::vector<CompareEntry>& entries, const std::string& baseline,
                    const std::string& full_precision) {
  if (entries.size() < 2) throw std::invalid_argument("compare: need at least two reports");
  const std::string& ds = entries.front().report.dataset_id;
  for (const auto& e : entries)
    if (e.report.dataset_id != ds)
      throw std::invalid_argument("compare: report '" + e.config + "' is on dataset '" + e.report.dataset_id +
                                  "', expected '" + ds + "'");
  const double base = find_entry(entries, baseline).perplexity;
  const double fp = find_entry(entries, full_precision).perplexity;
  std::ostringstream csv;
  csv << "config,dataset,tokens,perplexity,gap_recovered_pct\n";
  for (const auto& e : entries) {
    csv << e.config << ',' << e.report.dataset_id << ',' << e.report.tokens << ',' << fmt(e.report.perplexity)
        << ',' << fmt(gap_recovered(base, e.report.perplexity, fp)) << '\n';
  }
  return csv.str();
}

std::string report_to_json(const EvalReport& r) {
  nlohmann::ordered_json j;
  j["model_id"] = r.model_id;
  j["dataset_id"] = r.dataset_id;
  j["tokens"] = r.tokens;
  j["mean_nll"] = r.nan ? nlohmann::ordered_json(nullptr) : nlohmann::ordered_json(r.mean_nll);
  j["perplexity"] = r.nan ? nlohmann::ordered_json(nullptr) : nlohmann::ordered_json(r.perplexity);
  j["nll_digest"] = r.nll_digest;
  j["nan"] = r.nan;
  return j.dump(2);
}

EvalReport report_from_json(const std::string& text) {
  const auto j = nlohmann::json::parse(text);
  EvalReport r;
  r.model_id = j.at("model_id").get<std::string>();
  r.dataset_id = j.at("dataset_id").get<std::string>();
  r.tokens = j.at("tokens").get<std::size_t>();
  r.nan = j.at("nan").get<bool>();
  const double nan = std::numeric_limits<double>::quiet_NaN();
  r.mean_nll = j.at("mean_nll").is_null() ? nan : j.at("mean_nll").get<double>();
  r.perplexity = j.at("perplexity").is_null() ? nan : j.at("perplexity").get<double>();
  r.nll_digest = j.at("nll_digest").get<std::string>();
  return r;
}

}  // namespace ulbq
