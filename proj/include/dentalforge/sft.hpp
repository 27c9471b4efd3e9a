#pragma once

// Stage-I trainer: teacher-forced cross-entropy over prompt->target records,
// Adam with linear learning-rate warmup (constant afterwards, cosine decay by
// flag), general-domain records mixed in at a configurable ratio.

#include <cmath>
#include <cstdint>
#include <cstdio>
#include <filesystem>
#include <numbers>
#include <numeric>
#include <span>
#include <stdexcept>
#include <string>
#include <vector>

#include "dentalforge/datakit.hpp"

namespace dentalforge {

struct SftConfig {
  int epochs = 2;
  int batch_size = 32;        // desk-scale defaults; full-scale runs use 256 @ 2e-5
  double learning_rate = 1e-3;
  double warmup_frac = 0.05;  // fraction of total steps spent ramping up
  bool cosine_decay = false;  // warmup-then-constant unless opted in
  double mix_ratio = 0.2;     // general-record share r of the final mixed corpus
  std::uint64_t seed = 0;

  void validate() const {
    if (epochs < 1) throw std::invalid_argument("sft: epochs must be >= 1");
    if (batch_size < 1) throw std::invalid_argument("sft: batch_size must be >= 1");
    if (!std::isfinite(learning_rate) || learning_rate < 0.0)
      throw std::invalid_argument("sft: learning_rate must be finite and >= 0");
    if (!(warmup_frac >= 0.0) || warmup_frac >= 0.5)
      throw std::invalid_argument("sft: warmup_frac must be in [0, 0.5)");
    if (!(mix_ratio >= 0.0) || mix_ratio > 1.0)
      throw std::invalid_argument("sft: mix_ratio must be in [0, 1]");
  }
};

// 1-based step schedule: linear ramp to learning_rate over
// ceil(warmup_frac * total_steps) steps, then constant (or cosine to zero).
inline double lr_at(long step, long total_steps, const SftConfig& cfg) {
  if (total_steps < 1) throw std::invalid_argument("lr_at: total_steps must be >= 1");
  if (step < 1 || step > total_steps) throw std::invalid_argument("lr_at: step out of range");
  const long warmup =
      static_cast<long>(std::ceil(cfg.warmup_frac * static_cast<double>(total_steps)));
  if (step <= warmup)
    return cfg.learning_rate * static_cast<double>(step) / static_cast<double>(warmup);
  if (!cfg.cosine_decay || total_steps == warmup) return cfg.learning_rate;
  const double progress =
      static_cast<double>(step - warmup) / static_cast<double>(total_steps - warmup);
  return cfg.learning_rate * 0.5 * (1.0 + std::cos(progress * std::numbers::pi));
}

namespace detail {

inline void check_sft_record(const SftRecord& r, const Vocab& vocab, std::size_t index) {
  auto describe = [&](const char* what) {
    return "sft record " + std::to_string(index) + " (kind '" + r.kind + "'): " +
           std::string(what);
  };
  if (r.target.empty()) throw std::invalid_argument(describe("empty target"));
  // the policy's prompt-mean input block has no empty fallback
  if (r.prompt.empty()) throw std::invalid_argument(describe("empty prompt"));
  auto check = [&](const TokenSeq& seq, const char* what) {
    for (TokenId t : seq)
      if (t < 0 || t >= vocab.size())
        throw std::invalid_argument(describe(what) + " token " + std::to_string(t) +
                                    " outside the vocabulary");
  };
  check(r.prompt, "prompt");
  check(r.target, "target");
  for (TokenId t : r.target)
    if (t == Vocab::kPad) throw std::invalid_argument(describe("PAD in target"));
}

}  // namespace detail

// Mean negative log-likelihood per target token across the whole batch.
inline double sft_loss(const PolicyParams& params, std::span<const SftRecord> batch) {
  if (batch.empty()) throw std::invalid_argument("sft_loss: empty batch");
  double sum = 0.0;
  long tokens = 0;
  for (std::size_t i = 0; i < batch.size(); ++i) {
    detail::check_sft_record(batch[i], params.vocab, i);
    for (double lp : sequence_logprobs(params, batch[i].prompt, batch[i].target)) sum -= lp;
    tokens += static_cast<long>(batch[i].target.size());
  }
  return sum / static_cast<double>(tokens);
}

struct SftBatchResult {
  double loss = 0.0;
  GradientBundle grads;
  long target_tokens = 0;
};

// Loss plus analytic gradient, accumulated record-by-record in input order so
// the reduction order is fixed.
inline SftBatchResult sft_loss_and_grad(const PolicyParams& params,
                                        std::span<const SftRecord> batch) {
  if (batch.empty()) throw std::invalid_argument("sft_loss_and_grad: empty batch");
  long tokens = 0;
  for (std::size_t i = 0; i < batch.size(); ++i) {
    detail::check_sft_record(batch[i], params.vocab, i);
    tokens += static_cast<long>(batch[i].target.size());
  }

  SftBatchResult out;
  out.target_tokens = tokens;
  out.grads = TensorMap::zeros_like(params.tensors);
  const double w = -1.0 / static_cast<double>(tokens);
  for (const auto& rec : batch) {
    for (double lp : sequence_logprobs(params, rec.prompt, rec.target)) out.loss -= lp;
    const std::vector<double> weights(rec.target.size(), w);
    out.grads.add_scaled(weighted_logprob_gradient(params, rec.prompt, rec.target, weights),
                         1.0);
  }
  out.loss /= static_cast<double>(tokens);
  return out;
}

// Appends general-pool records to the domain corpus so general records make
// up a mix_ratio share of the result: n_general = round(r/(1-r) * n_domain),
// sampled without replacement (with replacement once the pool is exhausted).
inline std::vector<SftRecord> mix_sft_corpus(const std::vector<SftRecord>& domain,
                                             const std::vector<SftRecord>& general_pool,
                                             double mix_ratio, std::uint64_t seed) {
  if (!(mix_ratio >= 0.0) || mix_ratio >= 1.0)
    throw std::invalid_argument(
        "mix_sft_corpus: mix_ratio must be in [0,1) (1 would need an all-general corpus)");
  std::vector<SftRecord> out = domain;
  const long n_general =
      std::lround(mix_ratio / (1.0 - mix_ratio) * static_cast<double>(domain.size()));
  if (n_general == 0) return out;
  if (general_pool.empty())
    throw std::invalid_argument("mix_sft_corpus: mix_ratio > 0 but the general pool is empty");
  Rng rng(derive_seed(seed, "sft_mix"));
  if (n_general <= static_cast<long>(general_pool.size())) {
    std::vector<std::size_t> idx(general_pool.size());
    std::iota(idx.begin(), idx.end(), std::size_t{0});
    rng.shuffle(idx);
    for (long i = 0; i < n_general; ++i) out.push_back(general_pool[idx[static_cast<std::size_t>(i)]]);
  } else {
    for (long i = 0; i < n_general; ++i) out.push_back(general_pool[rng.below(general_pool.size())]);
  }
  return out;
}

struct SftMetricsRow {
  long step = 0;
  double lr = 0.0;
  double loss = 0.0;
};

inline void write_sft_metrics_csv(const std::string& path,
                                  std::span<const SftMetricsRow> rows) {
  std::vector<std::string> lines = {"step,lr,loss"};
  char buf[128];
  for (const auto& r : rows) {
    std::snprintf(buf, sizeof buf, "%ld,%.17g,%.17g", r.step, r.lr, r.loss);
    lines.emplace_back(buf);
  }
  detail::write_lines_atomic(path, lines);
}

struct SftTrainResult {
  PolicyParams params;
  std::vector<SftMetricsRow> history;
};

// Epochs of seeded shuffling over the dataset, Adam on every batch with the
// warmup schedule. When out_dir is given, writes policy_sft.json and
// sft_metrics.csv there.
inline SftTrainResult train_sft(const SftConfig& cfg, const std::vector<SftRecord>& dataset,
                                const PolicyParams& init, const std::string& out_dir = "") {
  cfg.validate();
  if (dataset.empty()) throw std::invalid_argument("train_sft: empty dataset");

  SftTrainResult res{snapshot_reference(init), {}};
  AdamMoments mom = AdamMoments::like(init.tensors);

  const long n = static_cast<long>(dataset.size());
  const long batches_per_epoch = (n + cfg.batch_size - 1) / cfg.batch_size;
  const long total_steps = static_cast<long>(cfg.epochs) * batches_per_epoch;

  std::vector<std::size_t> order(dataset.size());
  long step = 0;
  for (int epoch = 0; epoch < cfg.epochs; ++epoch) {
    std::iota(order.begin(), order.end(), std::size_t{0});
    Rng rng(derive_seed(cfg.seed, "sft_epoch", static_cast<std::uint64_t>(epoch)));
    rng.shuffle(order);
    for (long b = 0; b < batches_per_epoch; ++b) {
      std::vector<SftRecord> batch;
      const long lo = b * cfg.batch_size;
      const long hi = std::min(n, lo + cfg.batch_size);
      for (long i = lo; i < hi; ++i) batch.push_back(dataset[order[static_cast<std::size_t>(i)]]);
      ++step;
      const auto eval = sft_loss_and_grad(res.params, batch);
      const double lr = lr_at(step, total_steps, cfg);
      adam_step(res.params.tensors, eval.grads, mom, step, lr);
      res.history.push_back({step, lr, eval.loss});
    }
  }

  if (!out_dir.empty()) {
    std::filesystem::create_directories(out_dir);
    save_checkpoint(res.params, (std::filesystem::path(out_dir) / "policy_sft.json").string());
    write_sft_metrics_csv((std::filesystem::path(out_dir) / "sft_metrics.csv").string(),
                          res.history);
  }
  return res;
}

}  // namespace dentalforge
