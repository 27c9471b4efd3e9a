#pragma once

// Stage-II trainer: grouped rollouts per prompt, rewards normalized into
// relative advantages within each group, clipped surrogate objective with a
// per-token KL penalty against a per-epoch reference snapshot.

#include <algorithm>
#include <atomic>
#include <cmath>
#include <cstdint>
#include <cstdio>
#include <filesystem>
#include <future>
#include <numeric>
#include <span>
#include <stdexcept>
#include <string>
#include <vector>

#include "dentalforge/datakit.hpp"
#include "dentalforge/rewards.hpp"

namespace dentalforge {

enum class KlMode { k3, exact };
enum class AveragingMode { token, sequence };

struct GrpoConfig {
  int group_size = 10;        // G
  int groups_per_batch = 16;  // prompts per optimizer step (paper-scale 256)
  double learning_rate = 3e-4;
  int epochs = 5;
  double clip_eps = 0.2;
  double kl_coeff = 0.04;  // beta
  int max_response_len = 64;
  std::uint64_t seed = 0;

  long max_steps = 0;  // optional cap on optimizer steps (0 = no cap)
  int threads = 1;     // rollout collection threads; results are thread-count invariant
  // Generation starts inside an already-open <think> tag and the primer is
  // part of the scored text. Without it a random tiny policy essentially
  // never samples a well-formed template, so the format reward stays flat at
  // zero and there is nothing to learn from.
  bool think_open_primed = true;
  RewardWeights reward_weights{};
  MatchMode match_mode = MatchMode::lenient;
  KlMode kl_mode = KlMode::k3;
  AveragingMode averaging = AveragingMode::token;

  void validate() const {
    if (group_size < 2) throw std::invalid_argument("grpo: group_size must be >= 2");
    if (groups_per_batch < 1) throw std::invalid_argument("grpo: groups_per_batch must be >= 1");
    if (!std::isfinite(learning_rate) || learning_rate < 0.0)
      throw std::invalid_argument("grpo: learning_rate must be finite and >= 0");
    if (epochs < 1) throw std::invalid_argument("grpo: epochs must be >= 1");
    if (!(clip_eps > 0.0)) throw std::invalid_argument("grpo: clip_eps must be > 0");
    if (!(kl_coeff >= 0.0)) throw std::invalid_argument("grpo: kl_coeff must be >= 0");
    if (max_response_len < 1) throw std::invalid_argument("grpo: max_response_len must be >= 1");
    if (max_steps < 0) throw std::invalid_argument("grpo: max_steps must be >= 0");
    if (threads < 1) throw std::invalid_argument("grpo: threads must be >= 1");
    dentalforge::validate(reward_weights);
  }

  TokenSeq primer() const {
    return think_open_primed ? TokenSeq{Vocab::kThinkOpen} : TokenSeq{};
  }
};

struct RolloutGroup {
  std::string item_id;
  TokenSeq prompt;
  std::string answer_key;
  int option_count = 4;
  std::vector<Response> responses;
  std::vector<Score> scores;
  std::vector<double> rewards;
  std::vector<double> advantages;
  std::vector<std::vector<double>> old_logprobs;  // behavior policy, sampling time
  std::vector<std::vector<double>> ref_logprobs;  // reference policy
};

// Population z-scores within a group; a near-constant group (population std
// below 1e-8) carries no ranking signal and gets all-zero advantages.
inline std::vector<double> normalize_advantages(std::span<const double> rewards) {
  if (rewards.size() < 2)
    throw std::invalid_argument("normalize_advantages: need at least 2 rewards");
  const double n = static_cast<double>(rewards.size());
  double mean = 0.0;
  for (double r : rewards) mean += r;
  mean /= n;
  double var = 0.0;
  for (double r : rewards) var += (r - mean) * (r - mean);
  const double std_dev = std::sqrt(var / n);
  std::vector<double> out(rewards.size(), 0.0);
  if (std_dev < 1e-8) return out;
  for (std::size_t i = 0; i < rewards.size(); ++i) out[i] = (rewards[i] - mean) / std_dev;
  return out;
}

// Samples G responses for one MCQ item. Member i draws from the counter-based
// stream derive_seed(group_seed, i), so the group is identical no matter how
// items are scheduled across threads.
inline RolloutGroup collect_group(const PolicyParams& params, const PolicyParams& ref_params,
                                  const BenchmarkItem& item, const GrpoConfig& config,
                                  std::uint64_t group_seed) {
  if (item.kind != BenchmarkKind::mcq)
    throw std::invalid_argument("collect_group: item " + item.item_id + " is not an MCQ");
  item.validate();
  if (item.prompt.empty())
    throw std::invalid_argument("collect_group: item " + item.item_id + " has an empty prompt");

  const TokenSeq primer = config.primer();
  RolloutGroup g;
  g.item_id = item.item_id;
  g.prompt = item.prompt;
  g.answer_key = item.answer_key;
  g.option_count = static_cast<int>(item.options.size());
  for (int i = 0; i < config.group_size; ++i) {
    Rng rng(derive_seed(group_seed, static_cast<std::uint64_t>(i)));
    auto resp = sample_response(params, item.prompt, config.max_response_len, 1.0, rng, primer);
    TokenSeq scored = primer;
    scored.insert(scored.end(), resp.tokens.begin(), resp.tokens.end());
    const auto score = score_response(params.vocab.detokenize(scored), item.answer_key,
                                      config.reward_weights, g.option_count, config.match_mode);
    g.old_logprobs.push_back(resp.logprobs);
    g.ref_logprobs.push_back(sequence_logprobs(ref_params, item.prompt, resp.tokens, primer));
    g.scores.push_back(score);
    g.rewards.push_back(score.reward);
    g.responses.push_back(std::move(resp));
  }
  g.advantages = normalize_advantages(g.rewards);
  return g;
}

struct GrpoStats {
  double mean_reward = 0.0;
  double mean_format = 0.0;
  double mean_acc = 0.0;
  double mean_kl = 0.0;       // per-token mean of the KL estimate
  double clip_fraction = 0.0;  // share of tokens where the clip bound binds
  long response_count = 0;
  long token_count = 0;
};

struct GrpoEvaluation {
  double loss = 0.0;  // negative objective, minimized by Adam
  GradientBundle grads;
  GrpoStats stats;
};

namespace detail {

inline void check_rollout_group(const RolloutGroup& g) {
  const std::size_t G = g.responses.size();
  if (G < 2)
    throw std::invalid_argument("grpo: group " + g.item_id + " has fewer than 2 responses");
  if (g.rewards.size() != G || g.advantages.size() != G || g.old_logprobs.size() != G ||
      g.ref_logprobs.size() != G || g.scores.size() != G)
    throw std::invalid_argument("grpo: group " + g.item_id + " has inconsistent member counts");
  for (std::size_t i = 0; i < G; ++i) {
    const auto len = g.responses[i].tokens.size();
    if (len == 0)
      throw std::invalid_argument("grpo: group " + g.item_id + " has an empty response");
    if (g.old_logprobs[i].size() != len || g.ref_logprobs[i].size() != len)
      throw std::invalid_argument("grpo: group " + g.item_id +
                                  " logprob/token length mismatch");
  }
}

}  // namespace detail

// Clipped-surrogate objective with per-token KL penalty.
//
//   J = avg over tokens of  min(r·A, clip(r, 1−ε, 1+ε)·A) − β·KL_t
//
// where r = exp(logπ_θ − old_logprob) and KL_t is the k3 estimator
// exp(Δ) − Δ − 1 with Δ = ref − θ at the sampled token (or the exact
// per-token categorical KL(θ‖ref) in exact mode, which needs ref_params).
// Returned loss is −J; grads are the loss gradient, accumulated in group
// order, member order within each group.
inline GrpoEvaluation grpo_objective_and_grad(const PolicyParams& params,
                                              std::span<const RolloutGroup> groups,
                                              const GrpoConfig& config,
                                              const PolicyParams* ref_params = nullptr) {
  if (groups.empty()) throw std::invalid_argument("grpo_objective_and_grad: no groups");
  if (config.kl_mode == KlMode::exact && ref_params == nullptr)
    throw std::invalid_argument("grpo_objective_and_grad: exact KL needs reference params");

  const TokenSeq primer = config.primer();
  long total_tokens = 0;
  long total_responses = 0;
  for (const auto& g : groups) {
    detail::check_rollout_group(g);
    for (const auto& r : g.responses) total_tokens += static_cast<long>(r.tokens.size());
    total_responses += static_cast<long>(g.responses.size());
  }

  GrpoEvaluation out;
  out.grads = TensorMap::zeros_like(params.tensors);
  out.stats.response_count = total_responses;
  out.stats.token_count = total_tokens;

  double objective = 0.0;
  double kl_sum = 0.0;
  long clip_binds = 0;
  const double beta = config.kl_coeff;

  for (const auto& g : groups) {
    for (std::size_t i = 0; i < g.responses.size(); ++i) {
      const TokenSeq& tokens = g.responses[i].tokens;
      const double A = g.advantages[i];
      const double denom = config.averaging == AveragingMode::token
                               ? static_cast<double>(total_tokens)
                               : static_cast<double>(total_responses) *
                                     static_cast<double>(tokens.size());

      const auto cache = detail::run_teacher_forced(params, g.prompt, tokens, primer);
      const auto ref_cache =
          config.kl_mode == KlMode::exact
              ? detail::run_teacher_forced(*ref_params, g.prompt, tokens, primer)
              : detail::SeqCache{};

      std::vector<double> weights(tokens.size(), 0.0);  // k3 path
      std::vector<std::vector<double>> dlogits;          // exact path
      if (config.kl_mode == KlMode::exact) dlogits.resize(tokens.size());

      for (std::size_t t = 0; t < tokens.size(); ++t) {
        const auto tok = static_cast<std::size_t>(tokens[t]);
        const double lp = cache.logprobs[t][tok];
        const double ratio = std::exp(lp - g.old_logprobs[i][t]);
        const double unclipped = ratio * A;
        const double clipped =
            std::clamp(ratio, 1.0 - config.clip_eps, 1.0 + config.clip_eps) * A;
        const double term = std::min(unclipped, clipped);
        const bool active = unclipped <= clipped;  // min takes the unclipped branch
        if (unclipped > clipped) ++clip_binds;

        double kl_t;
        if (config.kl_mode == KlMode::k3) {
          const double delta = g.ref_logprobs[i][t] - lp;
          kl_t = std::exp(delta) - delta - 1.0;
          weights[t] = (-(active ? unclipped : 0.0) + beta * (1.0 - std::exp(delta))) / denom;
        } else {
          const auto& lp_cur = cache.logprobs[t];
          const auto& lp_ref = ref_cache.logprobs[t];
          kl_t = 0.0;
          for (std::size_t j = 0; j < lp_cur.size(); ++j) {
            const double p = std::exp(lp_cur[j]);
            if (p > 0.0) kl_t += p * (lp_cur[j] - lp_ref[j]);
          }
          auto& dz = dlogits[t];
          dz.assign(lp_cur.size(), 0.0);
          const double clip_w = (active ? unclipped : 0.0) / denom;
          for (std::size_t j = 0; j < lp_cur.size(); ++j) {
            const double p = std::exp(lp_cur[j]);
            // loss gradient: clip part  clip_w·(p − 1{j=tok}),
            // KL part  (β/denom)·p·((lpθ−lpref) − KL_t)
            dz[j] = clip_w * p + beta / denom * p * ((lp_cur[j] - lp_ref[j]) - kl_t);
          }
          dz[tok] -= clip_w;
        }

        if (!std::isfinite(term) || !std::isfinite(kl_t))
          throw std::runtime_error("grpo: non-finite objective term for item " + g.item_id +
                                   " response " + std::to_string(i));
        objective += (term - beta * kl_t) / denom;
        kl_sum += kl_t;
      }

      if (config.kl_mode == KlMode::k3)
        out.grads.add_scaled(weighted_logprob_gradient(params, g.prompt, tokens, weights, primer),
                             1.0);
      else
        detail::accumulate_seq_backward(params, g.prompt, tokens, primer, cache, dlogits,
                                        out.grads);
    }

    for (std::size_t i = 0; i < g.scores.size(); ++i) {
      out.stats.mean_reward += g.rewards[i];
      out.stats.mean_format += g.scores[i].format_reward;
      out.stats.mean_acc += g.scores[i].accuracy_reward;
    }
  }

  out.loss = -objective;
  if (!std::isfinite(out.loss) || !out.grads.all_finite())
    throw std::runtime_error("grpo: non-finite loss or gradient over this batch");
  out.stats.mean_reward /= static_cast<double>(total_responses);
  out.stats.mean_format /= static_cast<double>(total_responses);
  out.stats.mean_acc /= static_cast<double>(total_responses);
  out.stats.mean_kl = kl_sum / static_cast<double>(total_tokens);
  out.stats.clip_fraction = static_cast<double>(clip_binds) / static_cast<double>(total_tokens);
  return out;
}

// Collects one group per item; parallel when config.threads > 1, always
// returning groups sorted by item_id (the canonical reduction order).
inline std::vector<RolloutGroup> collect_batch(const PolicyParams& params,
                                               const PolicyParams& ref_params,
                                               std::span<const BenchmarkItem* const> items,
                                               const GrpoConfig& config, int epoch) {
  std::vector<RolloutGroup> groups(items.size());
  auto collect_one = [&](std::size_t idx) {
    const auto seed = derive_seed(config.seed, "rollout", static_cast<std::uint64_t>(epoch),
                                  items[idx]->item_id);
    groups[idx] = collect_group(params, ref_params, *items[idx], config, seed);
  };
  const auto n_threads = std::min<std::size_t>(static_cast<std::size_t>(config.threads),
                                               items.size());
  if (n_threads <= 1) {
    for (std::size_t i = 0; i < items.size(); ++i) collect_one(i);
  } else {
    std::atomic<std::size_t> next{0};
    std::vector<std::future<void>> workers;
    for (std::size_t w = 0; w < n_threads; ++w)
      workers.push_back(std::async(std::launch::async, [&] {
        for (std::size_t i = next.fetch_add(1); i < items.size(); i = next.fetch_add(1))
          collect_one(i);
      }));
    for (auto& w : workers) w.get();
  }
  std::stable_sort(groups.begin(), groups.end(),
                   [](const RolloutGroup& a, const RolloutGroup& b) {
                     return a.item_id < b.item_id;
                   });
  return groups;
}

struct GrpoMetricsRow {
  long step = 0;
  int epoch = 0;
  double mean_reward = 0.0;
  double mean_format = 0.0;
  double mean_acc = 0.0;
  double mean_kl = 0.0;
  double clip_fraction = 0.0;
  double loss = 0.0;
};

inline void write_grpo_metrics_csv(const std::string& path,
                                   std::span<const GrpoMetricsRow> rows) {
  std::vector<std::string> lines = {
      "step,epoch,mean_reward,mean_format,mean_acc,mean_kl,clip_fraction,loss"};
  char buf[256];
  for (const auto& r : rows) {
    std::snprintf(buf, sizeof buf, "%ld,%d,%.17g,%.17g,%.17g,%.17g,%.17g,%.17g", r.step,
                  r.epoch, r.mean_reward, r.mean_format, r.mean_acc, r.mean_kl,
                  r.clip_fraction, r.loss);
    lines.emplace_back(buf);
  }
  detail::write_lines_atomic(path, lines);
}

struct GrpoTrainResult {
  PolicyParams params;
  std::vector<GrpoMetricsRow> history;
};

// Per epoch: snapshot the reference policy, shuffle items (seeded), then one
// Adam step per batch of groups_per_batch freshly collected groups. When
// out_dir is given, writes per-epoch checkpoints, the final policy_grpo.json
// and grpo_metrics.csv.
inline GrpoTrainResult train_grpo(const GrpoConfig& config,
                                  const std::vector<BenchmarkItem>& dataset,
                                  const PolicyParams& init, const std::string& out_dir = "") {
  config.validate();
  if (dataset.empty()) throw std::invalid_argument("train_grpo: empty dataset");
  for (const auto& item : dataset)
    if (item.kind != BenchmarkKind::mcq)
      throw std::invalid_argument("train_grpo: item " + item.item_id +
                                  " is not rule-checkable multiple choice");

  GrpoTrainResult res{snapshot_reference(init), {}};
  AdamMoments mom = AdamMoments::like(init.tensors);
  if (!out_dir.empty()) std::filesystem::create_directories(out_dir);

  const long n = static_cast<long>(dataset.size());
  long step = 0;
  bool stop = false;
  std::vector<std::size_t> order(dataset.size());
  for (int epoch = 0; epoch < config.epochs && !stop; ++epoch) {
    const PolicyParams ref = snapshot_reference(res.params);
    std::iota(order.begin(), order.end(), std::size_t{0});
    Rng rng(derive_seed(config.seed, "grpo_epoch", static_cast<std::uint64_t>(epoch)));
    rng.shuffle(order);

    for (long lo = 0; lo < n && !stop; lo += config.groups_per_batch) {
      const long hi = std::min(n, lo + config.groups_per_batch);
      std::vector<const BenchmarkItem*> batch;
      for (long i = lo; i < hi; ++i)
        batch.push_back(&dataset[order[static_cast<std::size_t>(i)]]);
      const auto groups = collect_batch(res.params, ref, batch, config, epoch);

      ++step;
      const auto eval = grpo_objective_and_grad(res.params, groups, config, &ref);
      adam_step(res.params.tensors, eval.grads, mom, step, config.learning_rate);
      res.history.push_back({step, epoch, eval.stats.mean_reward, eval.stats.mean_format,
                             eval.stats.mean_acc, eval.stats.mean_kl,
                             eval.stats.clip_fraction, eval.loss});
      if (config.max_steps > 0 && step >= config.max_steps) stop = true;
    }

    if (!out_dir.empty())
      save_checkpoint(res.params, (std::filesystem::path(out_dir) /
                                   ("policy_grpo_epoch" + std::to_string(epoch) + ".json"))
                                      .string());
  }

  if (!out_dir.empty()) {
    save_checkpoint(res.params,
                    (std::filesystem::path(out_dir) / "policy_grpo.json").string());
    write_grpo_metrics_csv((std::filesystem::path(out_dir) / "grpo_metrics.csv").string(),
                           res.history);
  }
  return res;
}

}  // namespace dentalforge
