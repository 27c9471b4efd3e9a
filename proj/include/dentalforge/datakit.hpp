#pragma once

// Data engineering: the annotation agreement/consensus workflow, dedup,
// benchmark balancing, disjoint stage splits, the synthetic dental-world
// generator, and JSONL I/O.
//
// In-memory domain types carry token ids (TokenSeq); the JSONL files carry
// the corresponding word strings, so readers/writers take the Vocab that maps
// between them. Unknown JSON fields ride along in each record's `extra` and
// are preserved on round-trip.

#include <algorithm>
#include <cstdint>
#include <filesystem>
#include <fstream>
#include <map>
#include <optional>
#include <set>
#include <span>
#include <sstream>
#include <stdexcept>
#include <string>
#include <vector>

#include "dentalforge/policy.hpp"
#include "dentalforge/rng.hpp"

namespace dentalforge {

// ---------------------------------------------------------------------------
// Domain types

struct AnnotationRecord {
  std::string item_id;
  std::string annotator_id;
  std::set<std::string> positive_labels;  // ignored downstream when uncertain
  bool uncertain = false;
  Json extra = Json::object();
};

struct LabeledItem {
  std::string item_id;
  TokenSeq observation;  // synthetic evidence tokens standing in for the image
  std::set<std::string> true_labels;
  std::string split_tag;  // stamped by split_disjoint
  Json extra = Json::object();
};

enum class BenchmarkKind { mcq, label_query };

struct BenchmarkItem {
  std::string item_id;
  BenchmarkKind kind = BenchmarkKind::mcq;
  TokenSeq prompt;
  // mcq only: ordered option letter -> answer string, exactly one matches key
  std::vector<std::pair<std::string, std::string>> options;
  std::string answer_key;
  // label_query only
  std::string queried_label;
  std::string expected;  // "yes" | "no"
  Json extra = Json::object();

  void validate() const {
    if (kind == BenchmarkKind::mcq) {
      if (options.size() < 2 || options.size() > 4)
        throw std::invalid_argument("BenchmarkItem " + item_id + ": mcq needs 2-4 options");
      int hits = 0;
      for (const auto& [letter, _] : options) hits += (letter == answer_key) ? 1 : 0;
      if (hits != 1)
        throw std::invalid_argument("BenchmarkItem " + item_id +
                                    ": answer key must match exactly one option");
    } else {
      if (expected != "yes" && expected != "no")
        throw std::invalid_argument("BenchmarkItem " + item_id +
                                    ": expected must be yes or no");
      if (queried_label.empty())
        throw std::invalid_argument("BenchmarkItem " + item_id + ": missing queried label");
    }
  }
};

struct SftRecord {
  TokenSeq prompt;
  TokenSeq target;   // response to imitate, non-empty
  std::string kind;  // caption | instruction | reasoning | general
  Json extra = Json::object();
};

inline const std::vector<std::string>& sft_kinds() {
  static const std::vector<std::string> kinds = {"caption", "instruction", "reasoning",
                                                 "general"};
  return kinds;
}

struct CurationReport {
  std::map<std::string, double> agreement;  // annotator -> rate (undefined ones absent)
  std::vector<std::string> dropped_annotators;
  std::map<std::string, std::string> consensus_outcome;  // item -> accepted|rejected
  long records_in = 0;
  long records_retained = 0;
  long records_dropped = 0;
  long items_in = 0;
  long items_curated = 0;
  long items_dropped = 0;

  Json to_json() const {
    Json j;
    j["agreement"] = agreement;
    j["dropped_annotators"] = dropped_annotators;
    j["consensus_outcome"] = consensus_outcome;
    j["records_in"] = records_in;
    j["records_retained"] = records_retained;
    j["records_dropped"] = records_dropped;
    j["items_in"] = items_in;
    j["items_curated"] = items_curated;
    j["items_dropped"] = items_dropped;
    return j;
  }
};

// ---------------------------------------------------------------------------
// Agreement / consensus workflow

namespace detail {

// non-uncertain records grouped as item -> (annotator -> label set), with the
// label universe enforced
inline std::map<std::string, std::map<std::string, const std::set<std::string>*>>
group_decisive_records(std::span<const AnnotationRecord> records,
                       const std::vector<std::string>& label_universe) {
  const std::set<std::string> universe(label_universe.begin(), label_universe.end());
  std::map<std::string, std::map<std::string, const std::set<std::string>*>> by_item;
  for (const auto& r : records) {
    if (r.uncertain) continue;  // uncertain records are excluded entirely
    for (const auto& lab : r.positive_labels)
      if (!universe.count(lab))
        throw std::invalid_argument("annotation for " + r.item_id + " by " + r.annotator_id +
                                    " uses unknown label '" + lab + "'");
    by_item[r.item_id][r.annotator_id] = &r.positive_labels;
  }
  return by_item;
}

}  // namespace detail

// Per-annotator cross-validation agreement. For annotator d, every (item,
// label) pair on items d shares with >=1 other non-uncertain annotator is a
// decision (label present/absent); it agrees when it matches the majority of
// the other annotators on that item, with majority ties counting as
// disagreement. Annotators with no scorable decision are absent from the map.
inline std::map<std::string, double> agreement_rates(
    std::span<const AnnotationRecord> records, const std::vector<std::string>& label_universe) {
  const auto by_item = detail::group_decisive_records(records, label_universe);
  std::map<std::string, long> agree, total;
  for (const auto& [item, annots] : by_item) {
    if (annots.size() < 2) continue;
    for (const auto& [who, labels] : annots) {
      for (const auto& lab : label_universe) {
        const bool mine = labels->count(lab) > 0;
        long yes = 0, no = 0;
        for (const auto& [other, other_labels] : annots) {
          if (other == who) continue;
          (other_labels->count(lab) > 0 ? yes : no) += 1;
        }
        bool agreed = false;
        if (yes != no) agreed = mine == (yes > no);  // ties are disagreement
        total[who] += 1;
        agree[who] += agreed ? 1 : 0;
      }
    }
  }
  std::map<std::string, double> rates;
  for (const auto& [who, n] : total)
    rates[who] = static_cast<double>(agree[who]) / static_cast<double>(n);
  return rates;
}

// Drops every record of annotators whose agreement rate falls below the
// threshold. The label universe is derived from the records themselves unless
// one is supplied; unratable annotators are retained (nothing to judge).
inline std::pair<std::vector<AnnotationRecord>, CurationReport> filter_training_annotations(
    std::span<const AnnotationRecord> records, double threshold = 0.85,
    const std::vector<std::string>& label_universe = {}) {
  if (!(threshold > 0.0) || threshold > 1.0)
    throw std::invalid_argument("filter_training_annotations: threshold must be in (0,1]");
  std::vector<std::string> universe = label_universe;
  if (universe.empty()) {
    std::set<std::string> seen;
    for (const auto& r : records)
      if (!r.uncertain) seen.insert(r.positive_labels.begin(), r.positive_labels.end());
    universe.assign(seen.begin(), seen.end());
  }
  CurationReport report;
  report.agreement = agreement_rates(records, universe);
  std::set<std::string> dropped;
  for (const auto& [who, rate] : report.agreement)
    if (rate < threshold) dropped.insert(who);
  report.dropped_annotators.assign(dropped.begin(), dropped.end());

  std::vector<AnnotationRecord> retained;
  retained.reserve(records.size());
  for (const auto& r : records)
    if (!dropped.count(r.annotator_id)) retained.push_back(r);
  report.records_in = static_cast<long>(records.size());
  report.records_retained = static_cast<long>(retained.size());
  report.records_dropped = report.records_in - report.records_retained;
  return {std::move(retained), std::move(report)};
}

enum class ConsensusMode { strict, per_label };

// Test-set consensus: an item is accepted iff >=2 non-uncertain annotators
// covered it and they agree. strict mode demands identical label sets;
// per_label mode keeps unanimously positive labels and drops disputed ones.
// Every item appearing in the records maps to an outcome; rejection is
// nullopt.
inline std::map<std::string, std::optional<std::set<std::string>>> consensus_test_labels(
    std::span<const AnnotationRecord> records, ConsensusMode mode = ConsensusMode::strict) {
  // universe derived from records; consensus never needs absent labels
  std::set<std::string> seen;
  for (const auto& r : records)
    if (!r.uncertain) seen.insert(r.positive_labels.begin(), r.positive_labels.end());
  const std::vector<std::string> universe(seen.begin(), seen.end());
  const auto by_item = detail::group_decisive_records(records, universe);

  std::map<std::string, std::optional<std::set<std::string>>> out;
  for (const auto& r : records) out[r.item_id] = std::nullopt;  // default: rejected
  for (const auto& [item, annots] : by_item) {
    if (annots.size() < 2) continue;
    if (mode == ConsensusMode::strict) {
      const std::set<std::string>* first = annots.begin()->second;
      bool all_same = true;
      for (const auto& [_, labels] : annots) all_same = all_same && (*labels == *first);
      if (all_same) out[item] = *first;
    } else {
      std::set<std::string> agreed;
      for (const auto& lab : universe) {
        bool everyone = true;
        for (const auto& [_, labels] : annots) everyone = everyone && labels->count(lab) > 0;
        if (everyone) agreed.insert(lab);
      }
      out[item] = std::move(agreed);
    }
  }
  return out;
}

// ---------------------------------------------------------------------------
// dedup / balance / split

// Content identity: (observation, true_labels). First occurrence wins; input
// order preserved; item_id deliberately excluded from the hash.
inline std::vector<LabeledItem> dedup(const std::vector<LabeledItem>& items) {
  std::set<std::uint64_t> seen;
  std::vector<LabeledItem> out;
  out.reserve(items.size());
  for (const auto& it : items) {
    std::string key;
    for (TokenId t : it.observation) {
      key += std::to_string(t);
      key += ',';
    }
    key += '|';
    for (const auto& lab : it.true_labels) {
      key += lab;
      key += ';';
    }
    if (seen.insert(fnv1a64(key)).second) out.push_back(it);
  }
  return out;
}

struct BalanceResult {
  std::vector<BenchmarkItem> items;
  std::vector<std::string> unbalanceable;       // labels with a single polarity
  std::map<std::string, double> final_ratios;   // balanced labels only
};

// Greedy deterministic balancing of label-query benchmarks toward a 0.5
// positive ratio per label. While any label deviates by more than the
// tolerance, one item of the overrepresented polarity is removed for the
// worst-offending label (label ties lexicographic, item ties by lowest
// item_id). The seed is accepted for CLI symmetry but the procedure is fully
// deterministic. Heuristic: terminates, does not maximize retained count.
inline BalanceResult balance_benchmark(const std::vector<BenchmarkItem>& items,
                                       double tolerance = 0.02, std::uint64_t seed = 0) {
  (void)seed;
  if (!(tolerance >= 0.0)) throw std::invalid_argument("balance_benchmark: bad tolerance");
  for (const auto& it : items) {
    if (it.kind != BenchmarkKind::label_query)
      throw std::invalid_argument("balance_benchmark: item " + it.item_id +
                                  " is not a label query");
    it.validate();
  }

  std::vector<bool> kept(items.size(), true);
  std::map<std::string, std::pair<long, long>> counts;  // label -> (pos, neg)
  for (const auto& it : items) {
    auto& [pos, neg] = counts[it.queried_label];
    (it.expected == "yes" ? pos : neg) += 1;
  }

  BalanceResult result;
  std::set<std::string> frozen;  // single-polarity labels: reported, items untouched
  for (const auto& [lab, pn] : counts)
    if (pn.first == 0 || pn.second == 0) {
      frozen.insert(lab);
      result.unbalanceable.push_back(lab);
    }

  auto deviation = [](const std::pair<long, long>& pn) {
    return std::abs(static_cast<double>(pn.first) / static_cast<double>(pn.first + pn.second) -
                    0.5);
  };

  while (true) {
    std::string worst;
    double worst_dev = 0.0;
    for (const auto& [lab, pn] : counts) {
      if (frozen.count(lab)) continue;
      const double dev = deviation(pn);
      if (dev > tolerance && dev > worst_dev) {  // label ties keep the earlier
        worst = lab;                             // (lexicographically smaller) key
        worst_dev = dev;
      }
    }
    if (worst.empty()) break;
    auto& [pos, neg] = counts[worst];
    const std::string majority = pos > neg ? "yes" : "no";
    // remove the lowest-item_id kept item of the majority polarity
    std::size_t victim = items.size();
    for (std::size_t i = 0; i < items.size(); ++i) {
      if (!kept[i] || items[i].queried_label != worst || items[i].expected != majority)
        continue;
      if (victim == items.size() || items[i].item_id < items[victim].item_id) victim = i;
    }
    kept[victim] = false;
    (majority == "yes" ? pos : neg) -= 1;
  }

  for (std::size_t i = 0; i < items.size(); ++i)
    if (kept[i]) result.items.push_back(items[i]);
  for (const auto& [lab, pn] : counts)
    if (!frozen.count(lab))
      result.final_ratios[lab] =
          static_cast<double>(pn.first) / static_cast<double>(pn.first + pn.second);
  return result;
}

struct SplitFractions {
  double sft = 0.5;
  double rl = 0.25;
  double eval = 0.25;
};

struct SplitResult {
  std::vector<LabeledItem> sft;
  std::vector<LabeledItem> rl;
  std::vector<LabeledItem> eval;
};

// Seeded shuffle, contiguous slices, split_tag stamped; id-disjointness is
// asserted after the fact.
inline SplitResult split_disjoint(const std::vector<LabeledItem>& items,
                                  const SplitFractions& fractions, std::uint64_t seed) {
  if (items.size() < 3) throw std::invalid_argument("split_disjoint: need at least 3 items");
  if (!(fractions.sft > 0.0) || !(fractions.rl > 0.0) || !(fractions.eval > 0.0))
    throw std::invalid_argument("split_disjoint: fractions must be positive");
  if (std::abs(fractions.sft + fractions.rl + fractions.eval - 1.0) > 1e-9)
    throw std::invalid_argument("split_disjoint: fractions must sum to 1");
  {
    std::set<std::string> ids;
    for (const auto& it : items)
      if (!ids.insert(it.item_id).second)
        throw std::invalid_argument("split_disjoint: duplicate item_id " + it.item_id);
  }

  std::vector<LabeledItem> pool = items;
  Rng rng(derive_seed(seed, "split"));
  rng.shuffle(pool);

  const auto n = static_cast<long>(pool.size());
  long n_sft = std::lround(fractions.sft * static_cast<double>(n));
  long n_rl = std::lround(fractions.rl * static_cast<double>(n));
  n_sft = std::clamp(n_sft, 0L, n);
  n_rl = std::clamp(n_rl, 0L, n - n_sft);

  SplitResult out;
  for (long i = 0; i < n; ++i) {
    LabeledItem item = std::move(pool[static_cast<std::size_t>(i)]);
    if (i < n_sft) {
      item.split_tag = "sft";
      out.sft.push_back(std::move(item));
    } else if (i < n_sft + n_rl) {
      item.split_tag = "rl";
      out.rl.push_back(std::move(item));
    } else {
      item.split_tag = "eval";
      out.eval.push_back(std::move(item));
    }
  }

  // disjointness assertion
  std::set<std::string> a, b;
  for (const auto& it : out.sft) a.insert(it.item_id);
  for (const auto& it : out.rl) b.insert(it.item_id);
  for (const auto& it : out.rl)
    if (a.count(it.item_id)) throw std::logic_error("split_disjoint: overlap " + it.item_id);
  for (const auto& it : out.eval)
    if (a.count(it.item_id) || b.count(it.item_id))
      throw std::logic_error("split_disjoint: overlap " + it.item_id);
  return out;
}

}  // namespace dentalforge

#include "dentalforge/datakit_io.hpp"
#include "dentalforge/dentalworld.hpp"
