#pragma once

// Brute-force reference implementations used to cross-check the data kit.
// Deliberately quadratic and written from the definitions, sharing no code
// with the library versions.

#include <cmath>
#include <cstdint>
#include <map>
#include <optional>
#include <set>
#include <string>
#include <vector>

#include "dentalforge/datakit.hpp"

namespace oracles {

using dentalforge::AnnotationRecord;
using dentalforge::BenchmarkItem;
using dentalforge::LabeledItem;

// Per-annotator agreement from the definition: every label decision on an
// item shared with at least one other non-uncertain annotator is scored
// against the majority of the others, ties counting as disagreement.
inline std::map<std::string, double> agreement(const std::vector<AnnotationRecord>& records,
                                               const std::vector<std::string>& universe) {
  std::map<std::string, long> ok, n;
  for (const auto& mine : records) {
    if (mine.uncertain) continue;
    std::vector<const AnnotationRecord*> others;
    for (const auto& o : records)
      if (!o.uncertain && o.item_id == mine.item_id && o.annotator_id != mine.annotator_id)
        others.push_back(&o);
    if (others.empty()) continue;
    for (const auto& lab : universe) {
      long yes = 0;
      for (const auto* o : others) yes += o->positive_labels.count(lab) ? 1 : 0;
      const long no = static_cast<long>(others.size()) - yes;
      const bool decision = mine.positive_labels.count(lab) > 0;
      bool agreed = false;
      if (yes > no) agreed = decision;
      if (no > yes) agreed = !decision;
      n[mine.annotator_id] += 1;
      ok[mine.annotator_id] += agreed ? 1 : 0;
    }
  }
  std::map<std::string, double> out;
  for (const auto& [who, total] : n)
    out[who] = static_cast<double>(ok[who]) / static_cast<double>(total);
  return out;
}

inline std::map<std::string, std::optional<std::set<std::string>>> consensus(
    const std::vector<AnnotationRecord>& records, dentalforge::ConsensusMode mode) {
  std::map<std::string, std::optional<std::set<std::string>>> out;
  std::set<std::string> item_ids;
  for (const auto& r : records) item_ids.insert(r.item_id);
  for (const auto& id : item_ids) {
    std::vector<const AnnotationRecord*> covering;
    for (const auto& r : records)
      if (!r.uncertain && r.item_id == id) covering.push_back(&r);
    out[id] = std::nullopt;
    if (covering.size() < 2) continue;
    if (mode == dentalforge::ConsensusMode::strict) {
      bool same = true;
      for (const auto* r : covering)
        same = same && r->positive_labels == covering.front()->positive_labels;
      if (same) out[id] = covering.front()->positive_labels;
    } else {
      // unanimously positive labels == intersection of the covering label sets
      std::set<std::string> agreed = covering.front()->positive_labels;
      for (const auto* r : covering) {
        std::set<std::string> next;
        for (const auto& lab : agreed)
          if (r->positive_labels.count(lab)) next.insert(lab);
        agreed = std::move(next);
      }
      out[id] = std::move(agreed);
    }
  }
  return out;
}

// Recount of a balanced label-query benchmark: kept items must be a subset of
// the input, unbalanceable labels must be exactly the single-polarity ones,
// and every other label must sit within tolerance of a 0.5 positive ratio.
inline bool recount_balance(const std::vector<BenchmarkItem>& input,
                            const dentalforge::BalanceResult& result, double tolerance,
                            std::string* why = nullptr) {
  auto fail = [&](const std::string& msg) {
    if (why) *why = msg;
    return false;
  };
  std::set<std::string> input_ids;
  for (const auto& it : input) input_ids.insert(it.item_id);
  for (const auto& it : result.items)
    if (!input_ids.count(it.item_id)) return fail("kept item not from input: " + it.item_id);

  std::map<std::string, std::pair<long, long>> in_counts, out_counts;
  for (const auto& it : input) {
    auto& [pos, neg] = in_counts[it.queried_label];
    (it.expected == "yes" ? pos : neg) += 1;
  }
  for (const auto& it : result.items) {
    auto& [pos, neg] = out_counts[it.queried_label];
    (it.expected == "yes" ? pos : neg) += 1;
  }

  std::set<std::string> expected_unbalanceable;
  for (const auto& [lab, pn] : in_counts)
    if (pn.first == 0 || pn.second == 0) expected_unbalanceable.insert(lab);
  const std::set<std::string> reported(result.unbalanceable.begin(),
                                       result.unbalanceable.end());
  if (reported != expected_unbalanceable) return fail("unbalanceable label set wrong");

  for (const auto& [lab, pn] : in_counts) {
    if (expected_unbalanceable.count(lab)) {
      // frozen labels must come through untouched
      if (out_counts[lab] != pn) return fail("single-polarity label modified: " + lab);
      continue;
    }
    const auto [pos, neg] = out_counts[lab];
    if (pos + neg == 0) return fail("label emptied: " + lab);
    const double ratio = static_cast<double>(pos) / static_cast<double>(pos + neg);
    if (std::abs(ratio - 0.5) > tolerance + 1e-12)
      return fail("label " + lab + " ratio " + std::to_string(ratio));
  }
  if (why) why->clear();
  return true;
}

// Disjointness + preservation check for a three-way split.
inline bool split_ok(const std::vector<LabeledItem>& input,
                     const dentalforge::SplitResult& split, std::string* why = nullptr) {
  auto fail = [&](const std::string& msg) {
    if (why) *why = msg;
    return false;
  };
  std::set<std::string> seen;
  auto walk = [&](const std::vector<LabeledItem>& part, const char* tag) {
    for (const auto& it : part) {
      if (it.split_tag != tag) return fail(std::string("bad split tag on ") + it.item_id);
      if (!seen.insert(it.item_id).second) return fail("duplicate across splits: " + it.item_id);
    }
    return true;
  };
  if (!walk(split.sft, "sft") || !walk(split.rl, "rl") || !walk(split.eval, "eval"))
    return false;
  std::set<std::string> original;
  for (const auto& it : input) original.insert(it.item_id);
  if (seen != original) return fail("split does not preserve the item set");
  if (why) why->clear();
  return true;
}

}  // namespace oracles
