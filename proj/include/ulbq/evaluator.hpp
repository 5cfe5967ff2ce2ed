#pragma once

#include <cstdint>
#include <functional>
#include <span>
#include <string>
#include <vector>

#include "ulbq/model.hpp"

namespace ulbq {

/// Per-position negative log-likelihood of `targets` given `inputs`
/// (equal lengths, at most one context window).
using NllFn = std::function<std::vector<double>(std::span<const int> inputs, std::span<const int> targets)>;

struct EvalReport {
  std::string model_id;
  std::string dataset_id;
  std::size_t tokens = 0;  // predicted positions
  double mean_nll = 0;
  double perplexity = 0;
  std::string nll_digest;  // crc32 of the little-endian f64 NLL stream, hex
  bool nan = false;
};

/// exp(mean NLL) over `tokens`, cut into windows of `context` predictions.
/// Window w reads tokens [w*context, (w+1)*context] so every token after the
/// first is predicted exactly once. Accumulation is in double.
EvalReport perplexity(const NllFn& nll, std::span<const int> tokens, std::size_t context,
                      std::string model_id = "", std::string dataset_id = "");

/// (base - method) / (base - fp) * 100.
double gap_recovered(double ppl_base, double ppl_method, double ppl_fp);

struct CompareEntry {
  std::string config;
  EvalReport report;
};

/// CSV table of perplexities plus gap recovered relative to the named
/// baseline and full-precision rows. All reports must share one dataset id.
std::string compare(const std::vector<CompareEntry>& entries, const std::string& baseline,
                    const std::string& full_precision);

std::string report_to_json(const EvalReport& r);
EvalReport report_from_json(const std::string& text);

/// Adapter from any logits function to an NllFn; log-softmax is taken in
/// double regardless of the model precision.
template <typename T, typename LogitsFn>
NllFn nll_from_logits(LogitsFn logits_fn) {
  return [logits_fn](std::span<const int> in, std::span<const int> tg) {
    const Tensor<T> logits = logits_fn(in);
    const auto m = logits.matrix();
    std::vector<double> out(tg.size());
    for (std::size_t i = 0; i < tg.size(); ++i) {
      const auto row = m.row(static_cast<Eigen::Index>(i)).template cast<double>();
      const double mx = row.maxCoeff();
      const double lse = mx + std::log((row.array() - mx).exp().sum());
      out[i] = lse - row(tg[i]);
    }
    return out;
  };
}

template <typename T>
NllFn model_nll(const ToyTransformer<T>& m) {
  return nll_from_logits<T>([&m](std::span<const int> in) { return forward(m, in, 1, in.size()); });
}

template <typename T>
NllFn model_nll(const QuantizedTransformer<T>& m) {
  return nll_from_logits<T>([&m](std::span<const int> in) { return forward(m, in, 1, in.size()); });
}

}  // namespace ulbq
