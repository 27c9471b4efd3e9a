#pragma once

// The trainable artifact: a tiny autoregressive bag-of-context policy.
//
// Architecture (per step): input x = [mean prompt embedding ; mean embedding
// of tokens generated so far (zeros if none) ; embedding of the last generated
// token (BOS if none)]; hidden = tanh(W1 x + b1); logits = W2 hidden + b2 with
// the PAD logit forced to -1e9. Parameters: E (V x d), W1 (h x 3d), b1, W2
// (V x h), b2.
//
// Sampling routines accept an optional `primer`: tokens treated as already-
// generated context (they condition every step and are not part of the
// returned/score-carrying token sequence). Trainers use it to open the think
// block for the policy, the way a chat template opens the reasoning span.

#include <cmath>
#include <cstdint>
#include <cstdio>
#include <filesystem>
#include <fstream>
#include <map>
#include <span>
#include <stdexcept>
#include <string>
#include <string_view>
#include <vector>

#include <json.hpp>

#include "dentalforge/numerics.hpp"
#include "dentalforge/rng.hpp"

namespace dentalforge {

using TokenId = std::int32_t;
using TokenSeq = std::vector<TokenId>;

using Json = nlohmann::ordered_json;

// ---------------------------------------------------------------------------
// Vocabulary

// Reserved control tokens sit at fixed indices 0..10 in every vocabulary;
// domain tokens follow. Option letters are ordinary answer tokens but get
// reserved slots so every world shares them.
class Vocab {
 public:
  static constexpr TokenId kPad = 0;
  static constexpr TokenId kBos = 1;
  static constexpr TokenId kEos = 2;
  static constexpr TokenId kThinkOpen = 3;
  static constexpr TokenId kThinkClose = 4;
  static constexpr TokenId kAnswerOpen = 5;
  static constexpr TokenId kAnswerClose = 6;
  static constexpr TokenId kOptionA = 7;  // B, C, D follow at 8, 9, 10
  static constexpr int kReservedCount = 11;

  static const std::vector<std::string>& reserved_tokens() {
    static const std::vector<std::string> toks = {"<pad>", "<bos>", "<eos>",
                                                  "<think>", "</think>", "<answer>",
                                                  "</answer>", "A", "B", "C", "D"};
    return toks;
  }

  Vocab() : tokens_(reserved_tokens()) { rebuild_index(); }

  // reserved tokens plus the given domain tokens, in order
  static Vocab with_extra(const std::vector<std::string>& extra) {
    std::vector<std::string> all = reserved_tokens();
    all.insert(all.end(), extra.begin(), extra.end());
    return from_tokens(std::move(all));
  }

  static Vocab from_tokens(std::vector<std::string> tokens) {
    const auto& res = reserved_tokens();
    if (tokens.size() < res.size())
      throw std::invalid_argument("Vocab: token list shorter than the reserved prefix");
    for (std::size_t i = 0; i < res.size(); ++i)
      if (tokens[i] != res[i])
        throw std::invalid_argument("Vocab: reserved token mismatch at index " +
                                    std::to_string(i) + " (got '" + tokens[i] + "')");
    Vocab v;
    v.tokens_ = std::move(tokens);
    v.rebuild_index();
    return v;
  }

  int size() const { return static_cast<int>(tokens_.size()); }

  bool contains(std::string_view tok) const { return index_.find(tok) != index_.end(); }

  TokenId id(std::string_view tok) const {
    auto it = index_.find(tok);
    if (it == index_.end())
      throw std::out_of_range("Vocab: unknown token '" + std::string(tok) + "'");
    return it->second;
  }

  const std::string& token(TokenId t) const {
    if (t < 0 || t >= size())
      throw std::out_of_range("Vocab: token id " + std::to_string(t) + " out of range");
    return tokens_[static_cast<std::size_t>(t)];
  }

  const std::vector<std::string>& tokens() const { return tokens_; }

  TokenSeq tokenize(std::span<const std::string> words) const {
    TokenSeq out;
    out.reserve(words.size());
    for (const auto& w : words) out.push_back(id(w));
    return out;
  }

  TokenSeq tokenize(std::initializer_list<std::string> words) const {
    return tokenize(std::span<const std::string>(words.begin(), words.size()));
  }

  // Renders a token sequence as text: PAD and BOS are skipped, EOS terminates
  // the sequence (and is not rendered), everything else is space-joined.
  std::string detokenize(std::span<const TokenId> toks) const {
    std::string out;
    for (TokenId t : toks) {
      if (t == kEos) break;
      if (t == kPad || t == kBos) continue;
      if (!out.empty()) out += ' ';
      out += token(t);
    }
    return out;
  }

  bool operator==(const Vocab& o) const { return tokens_ == o.tokens_; }

 private:
  void rebuild_index() {
    index_.clear();
    for (std::size_t i = 0; i < tokens_.size(); ++i) {
      auto [_, fresh] = index_.emplace(tokens_[i], static_cast<TokenId>(i));
      if (!fresh) throw std::invalid_argument("Vocab: duplicate token '" + tokens_[i] + "'");
    }
  }

  std::vector<std::string> tokens_;
  std::map<std::string, TokenId, std::less<>> index_;
};

// ---------------------------------------------------------------------------
// Parameters

struct PolicyParams {
  Vocab vocab;
  int embed_dim = 0;
  int hidden_dim = 0;
  TensorMap tensors;  // "E", "W1", "b1", "W2", "b2" in that order

  int vocab_size() const { return vocab.size(); }

  Tensor2& embeddings() { return tensors.at("E"); }
  const Tensor2& embeddings() const { return tensors.at("E"); }
};

inline PolicyParams init_policy(const Vocab& vocab, int embed_dim, int hidden_dim,
                                std::uint64_t seed) {
  if (embed_dim < 1 || hidden_dim < 1)
    throw std::invalid_argument("init_policy: dims must be positive");
  PolicyParams p;
  p.vocab = vocab;
  p.embed_dim = embed_dim;
  p.hidden_dim = hidden_dim;
  const std::size_t V = static_cast<std::size_t>(vocab.size());
  const std::size_t d = static_cast<std::size_t>(embed_dim);
  const std::size_t h = static_cast<std::size_t>(hidden_dim);
  p.tensors.add("E", V, d);
  p.tensors.add("W1", h, 3 * d);
  p.tensors.add("b1", h, 1);
  p.tensors.add("W2", V, h);
  p.tensors.add("b2", V, 1);
  Rng rng(derive_seed(seed, "policy_init"));
  for (auto& [_, t] : p.tensors)
    for (double& v : t.data) v = rng.uniform(-0.08, 0.08);
  return p;
}

// Reference snapshots are plain deep copies; PolicyParams has value semantics.
inline PolicyParams snapshot_reference(const PolicyParams& p) { return p; }

// ---------------------------------------------------------------------------
// Forward pass

namespace detail {

constexpr double kPadLogit = -1e9;

inline void check_token_seq(const Vocab& v, const TokenSeq& toks, const char* what,
                            bool allow_empty) {
  if (!allow_empty && toks.empty())
    throw std::invalid_argument(std::string(what) + ": must be non-empty");
  for (TokenId t : toks)
    if (t < 0 || t >= v.size())
      throw std::invalid_argument(std::string(what) + ": token id " + std::to_string(t) +
                                  " out of range");
}

inline std::vector<double> mean_embedding(const PolicyParams& p, const TokenSeq& toks) {
  const Tensor2& E = p.tensors.at("E");
  std::vector<double> m(static_cast<std::size_t>(p.embed_dim), 0.0);
  for (TokenId t : toks) {
    auto row = E.row(static_cast<std::size_t>(t));
    for (std::size_t k = 0; k < m.size(); ++k) m[k] += row[k];
  }
  for (double& v : m) v /= static_cast<double>(toks.size());
  return m;
}

struct StepCache {
  std::vector<double> input;   // 3d
  std::vector<double> hidden;  // h
  std::vector<double> logits;  // V, PAD already masked
};

// One policy step given the running generated-context statistics.
inline StepCache policy_step(const PolicyParams& p, std::span<const double> prompt_mean,
                             std::span<const double> gen_sum, std::size_t gen_len,
                             TokenId last_token) {
  const Tensor2& E = p.tensors.at("E");
  const std::size_t d = static_cast<std::size_t>(p.embed_dim);
  StepCache sc;
  sc.input.assign(3 * d, 0.0);
  for (std::size_t k = 0; k < d; ++k) sc.input[k] = prompt_mean[k];
  if (gen_len > 0)
    for (std::size_t k = 0; k < d; ++k)
      sc.input[d + k] = gen_sum[k] / static_cast<double>(gen_len);
  auto last = E.row(static_cast<std::size_t>(last_token));
  for (std::size_t k = 0; k < d; ++k) sc.input[2 * d + k] = last[k];

  auto pre = affine(p.tensors.at("W1"), sc.input, p.tensors.at("b1").data);
  sc.hidden.resize(pre.size());
  for (std::size_t i = 0; i < pre.size(); ++i) sc.hidden[i] = std::tanh(pre[i]);
  sc.logits = affine(p.tensors.at("W2"), sc.hidden, p.tensors.at("b2").data);
  sc.logits[static_cast<std::size_t>(Vocab::kPad)] = kPadLogit;
  return sc;
}

// Teacher-forced forward over a fixed continuation. Step t conditions on
// primer ++ tokens[0..t) and its cache describes the distribution over
// tokens[t].
struct SeqCache {
  std::vector<StepCache> steps;
  std::vector<std::vector<double>> logprobs;  // per step, full V vector, temperature 1
};

inline SeqCache run_teacher_forced(const PolicyParams& p, const TokenSeq& prompt,
                                   const TokenSeq& tokens, const TokenSeq& primer) {
  check_token_seq(p.vocab, prompt, "policy prompt", /*allow_empty=*/false);
  check_token_seq(p.vocab, primer, "policy primer", /*allow_empty=*/true);
  check_token_seq(p.vocab, tokens, "policy tokens", /*allow_empty=*/true);
  const Tensor2& E = p.tensors.at("E");
  const std::size_t d = static_cast<std::size_t>(p.embed_dim);
  const auto pm = mean_embedding(p, prompt);

  std::vector<double> gen_sum(d, 0.0);
  std::size_t gen_len = 0;
  TokenId last = Vocab::kBos;
  auto absorb = [&](TokenId t) {
    auto row = E.row(static_cast<std::size_t>(t));
    for (std::size_t k = 0; k < d; ++k) gen_sum[k] += row[k];
    ++gen_len;
    last = t;
  };
  for (TokenId t : primer) absorb(t);

  SeqCache cache;
  cache.steps.reserve(tokens.size());
  cache.logprobs.reserve(tokens.size());
  for (TokenId t : tokens) {
    cache.steps.push_back(policy_step(p, pm, gen_sum, gen_len, last));
    cache.logprobs.push_back(log_softmax(cache.steps.back().logits));
    absorb(t);
  }
  return cache;
}

// Backward through the teacher-forced pass: dlogits[t] is d loss / d logits
// at step t (the PAD entry is ignored; that logit is a constant). Accumulates
// into grads, which must share the parameter shapes.
inline void accumulate_seq_backward(const PolicyParams& p, const TokenSeq& prompt,
                                    const TokenSeq& tokens, const TokenSeq& primer,
                                    const SeqCache& cache,
                                    const std::vector<std::vector<double>>& dlogits,
                                    GradientBundle& grads) {
  if (dlogits.size() != tokens.size() || cache.steps.size() != tokens.size())
    throw std::invalid_argument("accumulate_seq_backward: step count mismatch");
  const Tensor2& W1 = p.tensors.at("W1");
  const Tensor2& W2 = p.tensors.at("W2");
  Tensor2& gE = grads.at("E");
  Tensor2& gW1 = grads.at("W1");
  Tensor2& gb1 = grads.at("b1");
  Tensor2& gW2 = grads.at("W2");
  Tensor2& gb2 = grads.at("b2");
  const std::size_t d = static_cast<std::size_t>(p.embed_dim);
  const std::size_t h = static_cast<std::size_t>(p.hidden_dim);
  const std::size_t V = static_cast<std::size_t>(p.vocab_size());
  const double inv_prompt = 1.0 / static_cast<double>(prompt.size());

  std::vector<double> dz(V), dh(h), dx(3 * d);
  for (std::size_t t = 0; t < tokens.size(); ++t) {
    const StepCache& sc = cache.steps[t];
    for (std::size_t j = 0; j < V; ++j) dz[j] = dlogits[t][j];
    dz[static_cast<std::size_t>(Vocab::kPad)] = 0.0;  // masked logit is constant

    // logits = W2 h + b2
    for (std::size_t j = 0; j < V; ++j) {
      if (dz[j] == 0.0) continue;
      gb2.data[j] += dz[j];
      double* gw = gW2.data.data() + j * h;
      for (std::size_t k = 0; k < h; ++k) gw[k] += dz[j] * sc.hidden[k];
    }
    std::fill(dh.begin(), dh.end(), 0.0);
    for (std::size_t j = 0; j < V; ++j) {
      if (dz[j] == 0.0) continue;
      const double* w = W2.data.data() + j * h;
      for (std::size_t k = 0; k < h; ++k) dh[k] += dz[j] * w[k];
    }
    // hidden = tanh(pre)
    for (std::size_t k = 0; k < h; ++k) dh[k] *= 1.0 - sc.hidden[k] * sc.hidden[k];
    // pre = W1 x + b1
    for (std::size_t k = 0; k < h; ++k) {
      if (dh[k] == 0.0) continue;
      gb1.data[k] += dh[k];
      double* gw = gW1.data.data() + k * 3 * d;
      for (std::size_t c = 0; c < 3 * d; ++c) gw[c] += dh[k] * sc.input[c];
    }
    std::fill(dx.begin(), dx.end(), 0.0);
    for (std::size_t k = 0; k < h; ++k) {
      if (dh[k] == 0.0) continue;
      const double* w = W1.data.data() + k * 3 * d;
      for (std::size_t c = 0; c < 3 * d; ++c) dx[c] += dh[k] * w[c];
    }

    // input slice 1: mean prompt embedding
    for (TokenId tok : prompt) {
      double* ge = gE.data.data() + static_cast<std::size_t>(tok) * d;
      for (std::size_t k = 0; k < d; ++k) ge[k] += dx[k] * inv_prompt;
    }
    // input slice 2: mean embedding of generated context (primer + tokens[0..t))
    const std::size_t gen_len = primer.size() + t;
    if (gen_len > 0) {
      const double inv_gen = 1.0 / static_cast<double>(gen_len);
      auto spread = [&](TokenId tok) {
        double* ge = gE.data.data() + static_cast<std::size_t>(tok) * d;
        for (std::size_t k = 0; k < d; ++k) ge[k] += dx[d + k] * inv_gen;
      };
      for (TokenId tok : primer) spread(tok);
      for (std::size_t u = 0; u < t; ++u) spread(tokens[u]);
    }
    // input slice 3: last generated token (BOS when none)
    TokenId last = Vocab::kBos;
    if (t > 0)
      last = tokens[t - 1];
    else if (!primer.empty())
      last = primer.back();
    double* ge = gE.data.data() + static_cast<std::size_t>(last) * d;
    for (std::size_t k = 0; k < d; ++k) ge[k] += dx[2 * d + k];
  }
}

}  // namespace detail

// Logits for the next token given a prompt and the tokens generated so far.
inline std::vector<double> forward_logits(const PolicyParams& p, const TokenSeq& prompt,
                                          const TokenSeq& generated) {
  detail::check_token_seq(p.vocab, prompt, "policy prompt", /*allow_empty=*/false);
  detail::check_token_seq(p.vocab, generated, "policy generated", /*allow_empty=*/true);
  const Tensor2& E = p.tensors.at("E");
  const std::size_t d = static_cast<std::size_t>(p.embed_dim);
  const auto pm = detail::mean_embedding(p, prompt);
  std::vector<double> gen_sum(d, 0.0);
  for (TokenId t : generated) {
    auto row = E.row(static_cast<std::size_t>(t));
    for (std::size_t k = 0; k < d; ++k) gen_sum[k] += row[k];
  }
  const TokenId last = generated.empty() ? Vocab::kBos : generated.back();
  return detail::policy_step(p, pm, gen_sum, generated.size(), last).logits;
}

// ---------------------------------------------------------------------------
// Sampling / decoding

struct Response {
  TokenSeq tokens;               // sampled tokens; EOS, if present, is last
  std::vector<double> logprobs;  // temperature-1 log prob of each token
};

inline Response sample_response(const PolicyParams& p, const TokenSeq& prompt, int max_len,
                                double temperature, Rng& rng, const TokenSeq& primer = {}) {
  if (max_len < 1) throw std::invalid_argument("sample_response: max_len must be >= 1");
  if (!(temperature > 0.0))
    throw std::invalid_argument("sample_response: temperature must be positive");
  detail::check_token_seq(p.vocab, prompt, "policy prompt", /*allow_empty=*/false);
  detail::check_token_seq(p.vocab, primer, "policy primer", /*allow_empty=*/true);
  const Tensor2& E = p.tensors.at("E");
  const std::size_t d = static_cast<std::size_t>(p.embed_dim);
  const auto pm = detail::mean_embedding(p, prompt);

  std::vector<double> gen_sum(d, 0.0);
  std::size_t gen_len = 0;
  TokenId last = Vocab::kBos;
  auto absorb = [&](TokenId t) {
    auto row = E.row(static_cast<std::size_t>(t));
    for (std::size_t k = 0; k < d; ++k) gen_sum[k] += row[k];
    ++gen_len;
    last = t;
  };
  for (TokenId t : primer) absorb(t);

  Response r;
  std::vector<double> probs(static_cast<std::size_t>(p.vocab_size()));
  for (int t = 0; t < max_len; ++t) {
    auto sc = detail::policy_step(p, pm, gen_sum, gen_len, last);
    const auto lp1 = log_softmax(sc.logits);
    std::size_t pick;
    if (temperature == 1.0) {
      for (std::size_t j = 0; j < probs.size(); ++j) probs[j] = std::exp(lp1[j]);
      pick = rng.categorical(probs);
    } else {
      auto scaled = sc.logits;
      for (double& z : scaled) z /= temperature;
      const auto lpt = log_softmax(scaled);
      for (std::size_t j = 0; j < probs.size(); ++j) probs[j] = std::exp(lpt[j]);
      pick = rng.categorical(probs);
    }
    const TokenId tok = static_cast<TokenId>(pick);
    r.tokens.push_back(tok);
    r.logprobs.push_back(lp1[pick]);
    if (tok == Vocab::kEos) break;
    absorb(tok);
  }
  return r;
}

// Deterministic argmax decode; ties resolve to the lowest token id.
inline Response greedy_decode(const PolicyParams& p, const TokenSeq& prompt, int max_len,
                              const TokenSeq& primer = {}) {
  if (max_len < 1) throw std::invalid_argument("greedy_decode: max_len must be >= 1");
  detail::check_token_seq(p.vocab, prompt, "policy prompt", /*allow_empty=*/false);
  detail::check_token_seq(p.vocab, primer, "policy primer", /*allow_empty=*/true);
  const Tensor2& E = p.tensors.at("E");
  const std::size_t d = static_cast<std::size_t>(p.embed_dim);
  const auto pm = detail::mean_embedding(p, prompt);

  std::vector<double> gen_sum(d, 0.0);
  std::size_t gen_len = 0;
  TokenId last = Vocab::kBos;
  auto absorb = [&](TokenId t) {
    auto row = E.row(static_cast<std::size_t>(t));
    for (std::size_t k = 0; k < d; ++k) gen_sum[k] += row[k];
    ++gen_len;
    last = t;
  };
  for (TokenId t : primer) absorb(t);

  Response r;
  for (int t = 0; t < max_len; ++t) {
    auto sc = detail::policy_step(p, pm, gen_sum, gen_len, last);
    std::size_t best = 0;
    for (std::size_t j = 1; j < sc.logits.size(); ++j)
      if (sc.logits[j] > sc.logits[best]) best = j;
    const auto lp1 = log_softmax(sc.logits);
    const TokenId tok = static_cast<TokenId>(best);
    r.tokens.push_back(tok);
    r.logprobs.push_back(lp1[best]);
    if (tok == Vocab::kEos) break;
    absorb(tok);
  }
  return r;
}

// Temperature-1 log prob of each response token under p (teacher forced).
// Bit-identical to the logprobs sample_response records for the same tokens.
inline std::vector<double> sequence_logprobs(const PolicyParams& p, const TokenSeq& prompt,
                                             const TokenSeq& response_tokens,
                                             const TokenSeq& primer = {}) {
  for (TokenId t : response_tokens)
    if (t == Vocab::kPad)
      throw std::invalid_argument("sequence_logprobs: PAD cannot appear in a response");
  auto cache = detail::run_teacher_forced(p, prompt, response_tokens, primer);
  std::vector<double> out(response_tokens.size());
  for (std::size_t t = 0; t < response_tokens.size(); ++t)
    out[t] = cache.logprobs[t][static_cast<std::size_t>(response_tokens[t])];
  return out;
}

// Gradient of sum_t weights[t] * log pi(response_tokens[t] | context_t) w.r.t.
// all parameters. The caller owns the sign convention of the weights.
inline GradientBundle weighted_logprob_gradient(const PolicyParams& p, const TokenSeq& prompt,
                                                const TokenSeq& response_tokens,
                                                std::span<const double> weights,
                                                const TokenSeq& primer = {}) {
  if (weights.size() != response_tokens.size())
    throw std::invalid_argument("weighted_logprob_gradient: weights/token length mismatch");
  for (TokenId t : response_tokens)
    if (t == Vocab::kPad)
      throw std::invalid_argument("weighted_logprob_gradient: PAD cannot appear in a response");
  auto cache = detail::run_teacher_forced(p, prompt, response_tokens, primer);
  const std::size_t V = static_cast<std::size_t>(p.vocab_size());

  // d(w * lp[tok])/d z_j = w * (1{j == tok} - softmax(z)_j)
  std::vector<std::vector<double>> dlogits(response_tokens.size(), std::vector<double>(V, 0.0));
  for (std::size_t t = 0; t < response_tokens.size(); ++t) {
    const double w = weights[t];
    if (w == 0.0) continue;
    const auto& lp = cache.logprobs[t];
    for (std::size_t j = 0; j < V; ++j) dlogits[t][j] = -w * std::exp(lp[j]);
    dlogits[t][static_cast<std::size_t>(response_tokens[t])] += w;
  }
  GradientBundle grads = TensorMap::zeros_like(p.tensors);
  detail::accumulate_seq_backward(p, prompt, response_tokens, primer, cache, dlogits, grads);
  return grads;
}

// ---------------------------------------------------------------------------
// Checkpoints

namespace detail {

inline std::string double_to_string(double v) {
  char buf[40];
  std::snprintf(buf, sizeof buf, "%.17g", v);
  return buf;
}

inline double string_to_double(const std::string& s, const char* what) {
  char* end = nullptr;
  const double v = std::strtod(s.c_str(), &end);
  if (end == s.c_str() || *end != '\0' || !std::isfinite(v))
    throw std::runtime_error(std::string(what) + ": bad numeric literal '" + s + "'");
  return v;
}

}  // namespace detail

inline constexpr const char* kCheckpointFormat = "dentalforge-policy-v1";

// JSON checkpoint with numbers as 17-significant-digit decimal strings, which
// round-trips IEEE doubles exactly. Written atomically (temp file + rename).
inline void save_checkpoint(const PolicyParams& p, const std::string& path) {
  Json j;
  j["format"] = kCheckpointFormat;
  j["embed_dim"] = p.embed_dim;
  j["hidden_dim"] = p.hidden_dim;
  j["vocab"] = p.vocab.tokens();
  Json tensors = Json::object();
  for (const auto& [name, t] : p.tensors) {
    Json jt;
    jt["rows"] = t.rows;
    jt["cols"] = t.cols;
    Json data = Json::array();
    for (double v : t.data) data.push_back(detail::double_to_string(v));
    jt["data"] = std::move(data);
    tensors[name] = std::move(jt);
  }
  j["tensors"] = std::move(tensors);

  const std::string tmp = path + ".tmp";
  {
    std::ofstream out(tmp, std::ios::binary | std::ios::trunc);
    if (!out) throw std::runtime_error("save_checkpoint: cannot open '" + tmp + "'");
    out << j.dump(1, '\t') << '\n';
    if (!out) throw std::runtime_error("save_checkpoint: write failed for '" + tmp + "'");
  }
  std::filesystem::rename(tmp, path);
}

inline PolicyParams load_checkpoint(const std::string& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw std::runtime_error("load_checkpoint: cannot open '" + path + "'");
  Json j;
  try {
    in >> j;
  } catch (const std::exception& e) {
    throw std::runtime_error("load_checkpoint: '" + path + "' is not valid JSON: " + e.what());
  }
  auto fail = [&](const std::string& msg) -> std::runtime_error {
    return std::runtime_error("load_checkpoint: '" + path + "': " + msg);
  };
  if (!j.is_object() || j.value("format", std::string()) != kCheckpointFormat)
    throw fail("missing or unknown format marker");
  if (!j.contains("embed_dim") || !j.contains("hidden_dim") || !j.contains("vocab") ||
      !j.contains("tensors"))
    throw fail("missing required field");

  PolicyParams p;
  p.embed_dim = j.at("embed_dim").get<int>();
  p.hidden_dim = j.at("hidden_dim").get<int>();
  p.vocab = Vocab::from_tokens(j.at("vocab").get<std::vector<std::string>>());
  if (p.embed_dim < 1 || p.hidden_dim < 1) throw fail("non-positive dimensions");

  const std::size_t V = static_cast<std::size_t>(p.vocab.size());
  const std::size_t d = static_cast<std::size_t>(p.embed_dim);
  const std::size_t h = static_cast<std::size_t>(p.hidden_dim);
  const std::vector<std::pair<std::string, std::pair<std::size_t, std::size_t>>> expect = {
      {"E", {V, d}}, {"W1", {h, 3 * d}}, {"b1", {h, 1}}, {"W2", {V, h}}, {"b2", {V, 1}}};
  const Json& jt = j.at("tensors");
  if (!jt.is_object() || jt.size() != expect.size()) throw fail("unexpected tensor set");
  for (const auto& [name, shape] : expect) {
    if (!jt.contains(name)) throw fail("missing tensor '" + name + "'");
    const Json& one = jt.at(name);
    const std::size_t rows = one.at("rows").get<std::size_t>();
    const std::size_t cols = one.at("cols").get<std::size_t>();
    if (rows != shape.first || cols != shape.second)
      throw fail("tensor '" + name + "' has wrong shape");
    const Json& data = one.at("data");
    if (!data.is_array() || data.size() != rows * cols)
      throw fail("tensor '" + name + "' has wrong element count");
    Tensor2& t = p.tensors.add(name, rows, cols);
    for (std::size_t k = 0; k < t.data.size(); ++k)
      t.data[k] = detail::string_to_double(data[k].get<std::string>(),
                                           "load_checkpoint tensor data");
  }
  return p;
}

}  // namespace dentalforge
