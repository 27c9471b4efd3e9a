#pragma once

// Benchmark evaluation (MCQ accuracy and per-label yes/no accuracy), the
// Stage-I-scaling ablation runner, and the stagewise checkpoint report.

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <cstdio>
#include <filesystem>
#include <map>
#include <numeric>
#include <set>
#include <span>
#include <stdexcept>
#include <string>
#include <string_view>
#include <vector>

#include "dentalforge/grpo.hpp"
#include "dentalforge/sft.hpp"

namespace dentalforge {

namespace detail {

inline std::vector<std::string> split_ws(std::string_view s) {
  std::vector<std::string> out;
  std::size_t i = 0;
  while (i < s.size()) {
    while (i < s.size() && std::isspace(static_cast<unsigned char>(s[i]))) ++i;
    const std::size_t b = i;
    while (i < s.size() && !std::isspace(static_cast<unsigned char>(s[i]))) ++i;
    if (i > b) out.emplace_back(s.substr(b, i - b));
  }
  return out;
}

}  // namespace detail

// ---------------------------------------------------------------------------
// Answer extraction

// Template answer block when one is extractable (same rule the reward uses),
// otherwise the first emitted token that normalizes to a valid option letter.
// Returns "" when nothing usable was produced; callers count that as wrong.
inline std::string extract_mcq_answer(std::string_view text, int option_count) {
  if (option_count < 2 || option_count > 26)
    throw std::invalid_argument("extract_mcq_answer: option_count out of range");
  const ParsedResponse parsed = parse_template(text);
  if (!parsed.answer_text.empty()) return detail::normalize_option_letter(parsed.answer_text);
  for (const auto& w : detail::split_ws(text)) {
    const auto n = detail::normalize_option_letter(w);
    if (n.size() == 1 && n[0] >= 'A' && n[0] < static_cast<char>('A' + option_count)) return n;
  }
  return "";
}

// First yes/no inside the answer block when one is extractable, else anywhere
// in the decoded text. Returns "yes", "no", or "".
inline std::string extract_yes_no(std::string_view text) {
  const ParsedResponse parsed = parse_template(text);
  const std::string source = parsed.answer_text.empty() ? std::string(text) : parsed.answer_text;
  for (const auto& w : detail::split_ws(source)) {
    const auto n = detail::normalize_option_letter(w);
    if (n == "YES") return "yes";
    if (n == "NO") return "no";
  }
  return "";
}

// ---------------------------------------------------------------------------
// Benchmark evaluation

struct EvalOptions {
  int max_len = 64;
  // Decode inside an already-open <think> tag, matching how rollouts are
  // scored; turn off for checkpoints trained to answer directly.
  bool think_open_primed = true;
};

struct EvalVerdict {
  std::string item_id;
  std::string expected;
  std::string got;  // extracted answer, "" when nothing usable was decoded
  bool correct = false;
  std::string label;  // queried label for label_query items, "" for mcq
};

struct EvalResult {
  std::string benchmark;
  long n_items = 0;
  long n_correct = 0;
  double accuracy = 0.0;
  std::map<std::string, double> per_label;  // label_query benchmarks only
  std::vector<EvalVerdict> verdicts;

  Json to_json() const {
    Json j;
    j["benchmark"] = benchmark;
    j["n_items"] = n_items;
    j["n_correct"] = n_correct;
    j["accuracy"] = accuracy;
    j["per_label"] = per_label;
    Json v = Json::array();
    for (const auto& r : verdicts) {
      Json e;
      e["item_id"] = r.item_id;
      e["expected"] = r.expected;
      e["got"] = r.got;
      e["correct"] = r.correct;
      if (!r.label.empty()) e["label"] = r.label;
      v.push_back(std::move(e));
    }
    j["verdicts"] = std::move(v);
    return j;
  }

  std::string to_text() const {
    char buf[160];
    std::snprintf(buf, sizeof buf, "benchmark %s: accuracy %.4f (%ld/%ld)", benchmark.c_str(),
                  accuracy, n_correct, n_items);
    std::string out = buf;
    for (const auto& [label, acc] : per_label) {
      std::snprintf(buf, sizeof buf, "\n  %-16s %.4f", label.c_str(), acc);
      out += buf;
    }
    return out;
  }
};

inline EvalResult eval_mcq(const PolicyParams& params, std::span<const BenchmarkItem> items,
                           const EvalOptions& opt = {}, const std::string& name = "mcq") {
  if (items.empty()) throw std::invalid_argument("eval_mcq: empty benchmark");
  const TokenSeq primer = opt.think_open_primed ? TokenSeq{Vocab::kThinkOpen} : TokenSeq{};
  EvalResult res;
  res.benchmark = name;
  for (const auto& item : items) {
    if (item.kind != BenchmarkKind::mcq)
      throw std::invalid_argument("eval_mcq: item " + item.item_id + " is not an MCQ");
    item.validate();
    const auto resp = greedy_decode(params, item.prompt, opt.max_len, primer);
    TokenSeq scored = primer;
    scored.insert(scored.end(), resp.tokens.begin(), resp.tokens.end());
    const auto got =
        extract_mcq_answer(params.vocab.detokenize(scored), static_cast<int>(item.options.size()));
    const bool ok = got == item.answer_key;
    res.verdicts.push_back({item.item_id, item.answer_key, got, ok, ""});
    res.n_correct += ok ? 1 : 0;
  }
  res.n_items = static_cast<long>(items.size());
  res.accuracy = static_cast<double>(res.n_correct) / static_cast<double>(res.n_items);
  return res;
}

inline EvalResult eval_multilabel(const PolicyParams& params, std::span<const BenchmarkItem> items,
                                  const EvalOptions& opt = {},
                                  const std::string& name = "multilabel") {
  if (items.empty()) throw std::invalid_argument("eval_multilabel: empty benchmark");
  const TokenSeq primer = opt.think_open_primed ? TokenSeq{Vocab::kThinkOpen} : TokenSeq{};
  EvalResult res;
  res.benchmark = name;
  std::map<std::string, std::pair<long, long>> counts;  // label -> {correct, total}
  for (const auto& item : items) {
    if (item.kind != BenchmarkKind::label_query)
      throw std::invalid_argument("eval_multilabel: item " + item.item_id +
                                  " is not a label query");
    item.validate();
    const auto resp = greedy_decode(params, item.prompt, opt.max_len, primer);
    TokenSeq scored = primer;
    scored.insert(scored.end(), resp.tokens.begin(), resp.tokens.end());
    const auto got = extract_yes_no(params.vocab.detokenize(scored));
    const bool ok = got == item.expected;
    res.verdicts.push_back({item.item_id, item.expected, got, ok, item.queried_label});
    res.n_correct += ok ? 1 : 0;
    auto& c = counts[item.queried_label];
    c.first += ok ? 1 : 0;
    c.second += 1;
  }
  res.n_items = static_cast<long>(items.size());
  res.accuracy = static_cast<double>(res.n_correct) / static_cast<double>(res.n_items);
  for (const auto& [label, c] : counts)
    res.per_label[label] = static_cast<double>(c.first) / static_cast<double>(c.second);
  return res;
}

// Dispatch on the (uniform) item kind.
inline EvalResult eval_benchmark(const PolicyParams& params, std::span<const BenchmarkItem> items,
                                 const EvalOptions& opt = {},
                                 const std::string& name = "benchmark") {
  if (items.empty()) throw std::invalid_argument("eval_benchmark: empty benchmark");
  const BenchmarkKind kind = items.front().kind;
  for (const auto& item : items)
    if (item.kind != kind)
      throw std::invalid_argument("eval_benchmark: mixed item kinds in " + name);
  return kind == BenchmarkKind::mcq ? eval_mcq(params, items, opt, name)
                                    : eval_multilabel(params, items, opt, name);
}

// ---------------------------------------------------------------------------
// Stagewise report

struct BenchmarkSet {
  std::string name;
  std::vector<BenchmarkItem> items;
};

struct StageReportRow {
  std::string benchmark;
  long n_items = 0;
  double backbone = 0.0;
  double stage1 = 0.0;
  double stage2 = 0.0;
};

struct StageReport {
  std::vector<StageReportRow> rows;
  StageReportRow total;  // item-weighted means, benchmark = "Total"

  std::string to_text() const {
    char buf[200];
    std::string out = "benchmark              items   backbone    +stageI  +stageI+II";
    auto line = [&](const StageReportRow& r) {
      std::snprintf(buf, sizeof buf, "\n%-20s %7ld  %9.4f  %9.4f  %10.4f", r.benchmark.c_str(),
                    r.n_items, r.backbone, r.stage1, r.stage2);
      out += buf;
    };
    for (const auto& r : rows) line(r);
    line(total);
    return out;
  }

  Json to_json() const {
    auto row_json = [](const StageReportRow& r) {
      Json j;
      j["benchmark"] = r.benchmark;
      j["n_items"] = r.n_items;
      j["backbone"] = r.backbone;
      j["stage1"] = r.stage1;
      j["stage2"] = r.stage2;
      return j;
    };
    Json j;
    j["rows"] = Json::array();
    for (const auto& r : rows) j["rows"].push_back(row_json(r));
    j["total"] = row_json(total);
    return j;
  }
};

// Evaluates the three checkpoints on each benchmark; the Total row is the
// item-weighted mean per column (equivalently, pooled correct / pooled items).
inline StageReport stage_report(const PolicyParams& backbone, const PolicyParams& stage1,
                                const PolicyParams& stage2, std::span<const BenchmarkSet> benches,
                                const EvalOptions& opt = {}) {
  if (benches.empty()) throw std::invalid_argument("stage_report: no benchmarks");
  StageReport rep;
  long total_items = 0;
  long correct[3] = {0, 0, 0};
  for (const auto& bench : benches) {
    const PolicyParams* ckpts[3] = {&backbone, &stage1, &stage2};
    StageReportRow row;
    row.benchmark = bench.name;
    double* cols[3] = {&row.backbone, &row.stage1, &row.stage2};
    for (int c = 0; c < 3; ++c) {
      const auto r = eval_benchmark(*ckpts[c], bench.items, opt, bench.name);
      *cols[c] = r.accuracy;
      correct[c] += r.n_correct;
      if (c == 0) row.n_items = r.n_items;
    }
    total_items += row.n_items;
    rep.rows.push_back(std::move(row));
  }
  rep.total.benchmark = "Total";
  rep.total.n_items = total_items;
  rep.total.backbone = static_cast<double>(correct[0]) / static_cast<double>(total_items);
  rep.total.stage1 = static_cast<double>(correct[1]) / static_cast<double>(total_items);
  rep.total.stage2 = static_cast<double>(correct[2]) / static_cast<double>(total_items);
  return rep;
}

// ---------------------------------------------------------------------------
// Stage-I scaling ablation

// Mean of the last 10% of steps (at least one step).
inline double final_window_mean(std::span<const double> series) {
  if (series.empty()) throw std::invalid_argument("final_window_mean: empty series");
  const std::size_t window = std::max<std::size_t>(1, series.size() / 10);
  double sum = 0.0;
  for (std::size_t i = series.size() - window; i < series.size(); ++i) sum += series[i];
  return sum / static_cast<double>(window);
}

struct AblationConfig {
  std::vector<double> fractions = {0.0, 0.3, 1.0};  // the reproduced protocol's arms
  int n_seeds = 3;
  std::uint64_t seed = 0;
  int embed_dim = 16;
  int hidden_dim = 32;
  long rl_steps = 200;  // fixed RL budget per arm
  SftConfig sft;        // Stage-I settings; seed overridden per run
  GrpoConfig grpo;      // Stage-II settings; seed/epochs/max_steps overridden per run

  void validate() const {
    if (fractions.empty()) throw std::invalid_argument("ablation: no fractions");
    std::set<double> seen;
    for (double f : fractions) {
      if (f != 0.0 && f != 0.3 && f != 1.0)
        throw std::invalid_argument("ablation: stage1 fraction must be one of 0, 0.3, 1");
      if (!seen.insert(f).second)
        throw std::invalid_argument("ablation: duplicate stage1 fraction");
    }
    if (n_seeds < 1) throw std::invalid_argument("ablation: n_seeds must be >= 1");
    if (rl_steps < 1) throw std::invalid_argument("ablation: rl_steps must be >= 1");
    if (embed_dim < 1 || hidden_dim < 1)
      throw std::invalid_argument("ablation: policy dims must be >= 1");
    sft.validate();
    grpo.validate();
  }
};

struct AblationCurve {
  double stage1_fraction = 0.0;
  std::uint64_t seed = 0;
  std::vector<double> series;  // per-step mean accuracy reward, length = rl_steps
  double final_window_mean = 0.0;
};

// One seed, all arms. Arms share the initial policy, the RL data and the RL
// seed; the only difference is how much of the Stage-I corpus they see. The
// fraction-f arm trains on the first round(f*n) records of one seeded
// permutation (so smaller fractions are subsets of larger ones), restored to
// corpus order.
inline std::vector<AblationCurve> run_ablation_seed(const AblationConfig& config,
                                                    const Vocab& vocab,
                                                    const std::vector<SftRecord>& sft_corpus,
                                                    const std::vector<BenchmarkItem>& rl_items,
                                                    std::uint64_t run_seed) {
  const auto init =
      init_policy(vocab, config.embed_dim, config.hidden_dim, derive_seed(run_seed, "init"));
  std::vector<std::size_t> perm(sft_corpus.size());
  std::iota(perm.begin(), perm.end(), std::size_t{0});
  Rng sub_rng(derive_seed(run_seed, "sft_sub"));
  sub_rng.shuffle(perm);

  const long n_rl = static_cast<long>(rl_items.size());
  const long steps_per_epoch =
      (n_rl + config.grpo.groups_per_batch - 1) / config.grpo.groups_per_batch;

  std::vector<AblationCurve> out;
  for (double f : config.fractions) {
    PolicyParams params = init;
    const long take = std::lround(f * static_cast<double>(sft_corpus.size()));
    if (take > 0) {
      std::vector<std::size_t> chosen(perm.begin(), perm.begin() + take);
      std::sort(chosen.begin(), chosen.end());
      std::vector<SftRecord> subset;
      subset.reserve(chosen.size());
      for (auto i : chosen) subset.push_back(sft_corpus[i]);
      SftConfig s = config.sft;
      s.seed = derive_seed(run_seed, "sft");
      params = train_sft(s, subset, init).params;
    }

    GrpoConfig g = config.grpo;
    g.seed = derive_seed(run_seed, "rl");
    g.max_steps = config.rl_steps;
    g.epochs = static_cast<int>((config.rl_steps + steps_per_epoch - 1) / steps_per_epoch);
    const auto rl = train_grpo(g, rl_items, params);

    AblationCurve curve;
    curve.stage1_fraction = f;
    curve.seed = run_seed;
    for (const auto& row : rl.history) curve.series.push_back(row.mean_acc);
    if (static_cast<long>(curve.series.size()) != config.rl_steps)
      throw std::logic_error("run_ablation: RL step budget not met");
    curve.final_window_mean = final_window_mean(curve.series);
    out.push_back(std::move(curve));
  }
  return out;
}

struct AblationReport {
  std::vector<AblationCurve> curves;             // n_seeds * fractions, seed-major
  std::map<double, double> mean_final;           // fraction -> mean final-window over seeds
  int n_seeds = 0;
  int seeds_strictly_ordered = 0;  // seeds where a higher fraction beat every lower one
  bool majority_ordered = false;

  std::string to_text() const {
    std::string out = "stage-I scaling ablation: final-window (last 10% of steps) mean "
                      "accuracy reward\n";
    char buf[160];
    for (const auto& [f, m] : mean_final) {
      std::snprintf(buf, sizeof buf, "  fraction %-4g mean %.4f  [", f, m);
      out += buf;
      bool first = true;
      for (const auto& c : curves) {
        if (c.stage1_fraction != f) continue;
        std::snprintf(buf, sizeof buf, "%s%.4f", first ? "" : " ", c.final_window_mean);
        out += buf;
        first = false;
      }
      out += "]\n";
    }
    std::snprintf(buf, sizeof buf,
                  "strictly ordered (higher fraction > lower) in %d of %d seeds (majority: %s)",
                  seeds_strictly_ordered, n_seeds, majority_ordered ? "yes" : "no");
    out += buf;
    return out;
  }
};

// Runs every (seed, fraction) arm. sft_corpus and rl_items must come from
// disjoint item splits; provenance is audited via the records' "item" field
// against the RL items' base ids.
inline AblationReport run_ablation(const AblationConfig& config, const Vocab& vocab,
                                   const std::vector<SftRecord>& sft_corpus,
                                   const std::vector<BenchmarkItem>& rl_items,
                                   const std::string& out_dir = "") {
  config.validate();
  if (rl_items.empty()) throw std::invalid_argument("run_ablation: empty RL corpus");
  std::set<std::string> rl_base;
  for (const auto& item : rl_items) rl_base.insert(item.item_id.substr(0, item.item_id.find('#')));
  for (const auto& rec : sft_corpus) {
    if (!rec.extra.contains("item")) continue;
    const auto src = rec.extra.at("item").get<std::string>();
    if (rl_base.count(src))
      throw std::invalid_argument("run_ablation: SFT and RL corpora overlap on item " + src);
  }

  AblationReport rep;
  rep.n_seeds = config.n_seeds;
  std::vector<double> fr_sorted = config.fractions;
  std::sort(fr_sorted.begin(), fr_sorted.end());
  for (int k = 0; k < config.n_seeds; ++k) {
    const auto run_seed = derive_seed(config.seed, "ablation", static_cast<std::uint64_t>(k));
    auto curves = run_ablation_seed(config, vocab, sft_corpus, rl_items, run_seed);
    std::map<double, double> fin;
    for (const auto& c : curves) fin[c.stage1_fraction] = c.final_window_mean;
    bool ordered = true;
    for (std::size_t i = 1; i < fr_sorted.size(); ++i)
      ordered = ordered && fin.at(fr_sorted[i]) > fin.at(fr_sorted[i - 1]);
    if (ordered && fr_sorted.size() > 1) ++rep.seeds_strictly_ordered;
    for (auto& c : curves) rep.curves.push_back(std::move(c));
  }
  rep.majority_ordered = 2 * rep.seeds_strictly_ordered > rep.n_seeds;
  for (double f : fr_sorted) {
    double sum = 0.0;
    for (const auto& c : rep.curves)
      if (c.stage1_fraction == f) sum += c.final_window_mean;
    rep.mean_final[f] = sum / static_cast<double>(config.n_seeds);
  }

  if (!out_dir.empty()) {
    std::filesystem::create_directories(out_dir);
    char buf[160];
    for (double f : fr_sorted) {
      std::vector<std::string> lines = {"arm,seed,step,mean_reward"};
      for (const auto& c : rep.curves) {
        if (c.stage1_fraction != f) continue;
        for (std::size_t t = 0; t < c.series.size(); ++t) {
          std::snprintf(buf, sizeof buf, "%g,%llu,%zu,%.17g", c.stage1_fraction,
                        static_cast<unsigned long long>(c.seed), t + 1, c.series[t]);
          lines.emplace_back(buf);
        }
      }
      std::snprintf(buf, sizeof buf, "ablation_arm_%ld.csv", std::lround(f * 100.0));
      detail::write_lines_atomic((std::filesystem::path(out_dir) / buf).string(), lines);
    }
    detail::write_lines_atomic((std::filesystem::path(out_dir) / "ablation_report.txt").string(),
                               {rep.to_text()});
  }
  return rep;
}

}  // namespace dentalforge
