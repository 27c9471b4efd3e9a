#pragma once

// Synthetic dental-world corpus generator.
//
// A world has C condition labels; each condition owns E dedicated evidence
// tokens. An item (the stand-in for an image) draws a primary condition from
// the configured prevalence, sometimes a second one, and its observation is
// the union of the evidence tokens of its conditions plus random tokens from
// a dedicated noise vocabulary. Because noise tokens never collide with
// evidence tokens, the observation determines the label set exactly and the
// Bayes-optimal accuracy of every derived task is 1.0 — learnability is by
// construction, the training loop only has to find it.
//
// Synthetic annotators re-label the truth with per-annotator error rates, so
// the agreement/consensus curation workflow has real work to do.

#include <cstdint>
#include <cstdio>
#include <map>
#include <optional>
#include <set>
#include <string>
#include <utility>
#include <vector>

#include "dentalforge/datakit.hpp"

namespace dentalforge {

struct GeneratorConfig {
  int conditions = 4;              // C
  int evidence_per_condition = 3;  // E
  int noise_tokens = 6;            // dedicated noise vocabulary size
  double noise_rate = 0.2;         // per-token inclusion probability
  double second_label_prob = 0.2;
  std::vector<double> prevalence;  // size C, or empty for uniform
  int items = 240;
  int general_records = 24;  // general-domain echo records for the SFT mix
  int options_per_mcq = 4;
  int annotators = 3;
  int annotations_per_item = 2;
  std::vector<double> annotator_error;  // per-annotator flip rate; default below
  double uncertain_rate = 0.02;
  int vocab_capacity = 256;
  int min_consensus_eval = 24;  // below this, eval benchmarks fall back to all items

  std::vector<double> effective_prevalence() const {
    if (!prevalence.empty()) return prevalence;
    return std::vector<double>(static_cast<std::size_t>(conditions),
                               1.0 / static_cast<double>(conditions));
  }

  std::vector<double> effective_annotator_error() const {
    if (!annotator_error.empty()) return annotator_error;
    // mildly heterogeneous but all above the default agreement threshold;
    // worlds that want a droppable annotator configure one explicitly
    std::vector<double> err(static_cast<std::size_t>(annotators), 0.05);
    if (!err.empty()) err.front() = 0.02;
    if (err.size() >= 3) err.back() = 0.08;
    return err;
  }

  void validate() const {
    if (conditions < 2) throw std::invalid_argument("generator: need >= 2 conditions");
    if (evidence_per_condition < 1)
      throw std::invalid_argument("generator: need >= 1 evidence token per condition");
    if (noise_tokens < 2) throw std::invalid_argument("generator: need >= 2 noise tokens");
    if (items < 12) throw std::invalid_argument("generator: need >= 12 items");
    if (general_records < 0) throw std::invalid_argument("generator: negative general count");
    if (options_per_mcq < 2 || options_per_mcq > 4)
      throw std::invalid_argument("generator: options_per_mcq must be 2-4");
    if (annotators < 2) throw std::invalid_argument("generator: need >= 2 annotators");
    if (annotations_per_item < 2 || annotations_per_item > annotators)
      throw std::invalid_argument("generator: annotations_per_item must be in [2, annotators]");
    auto in01 = [](double v) { return v >= 0.0 && v < 1.0; };
    if (!in01(noise_rate) || !in01(second_label_prob) || !in01(uncertain_rate))
      throw std::invalid_argument("generator: rates must be in [0,1)");
    const auto prev = effective_prevalence();
    if (static_cast<int>(prev.size()) != conditions)
      throw std::invalid_argument("generator: prevalence size != conditions");
    for (double p : prev)
      if (!(p > 0.0)) throw std::invalid_argument("generator: prevalence entries must be > 0");
    const auto err = effective_annotator_error();
    if (static_cast<int>(err.size()) != annotators)
      throw std::invalid_argument("generator: annotator_error size != annotators");
    for (double e : err)
      if (!in01(e)) throw std::invalid_argument("generator: annotator error must be in [0,1)");
    const int needed = Vocab::kReservedCount + 4 /*markers*/ + 2 /*yes,no*/ + conditions +
                       conditions * evidence_per_condition + noise_tokens;
    if (needed > vocab_capacity)
      throw std::invalid_argument("generator: config needs " + std::to_string(needed) +
                                  " tokens, capacity is " + std::to_string(vocab_capacity));
  }
};

struct CurationOptions {
  double agreement_threshold = 0.85;
  ConsensusMode consensus_mode = ConsensusMode::strict;
};

// Everything a downstream stage needs to interpret corpus files.
struct WorldMeta {
  Vocab vocab;
  std::vector<std::string> label_universe;  // condition names
  std::map<std::string, std::vector<std::string>> evidence;

  Json to_json() const {
    Json j;
    j["vocab"] = vocab.tokens();
    j["labels"] = label_universe;
    j["evidence"] = evidence;
    return j;
  }

  static WorldMeta from_json(const Json& j) {
    WorldMeta m;
    m.vocab = Vocab::from_tokens(j.at("vocab").get<std::vector<std::string>>());
    m.label_universe = j.at("labels").get<std::vector<std::string>>();
    m.evidence = j.at("evidence").get<std::map<std::string, std::vector<std::string>>>();
    return m;
  }

  void save(const std::string& path) const {
    detail::write_lines_atomic(path, {to_json().dump(1, '\t')});
  }

  static WorldMeta load(const std::string& path) {
    std::ifstream in(path, std::ios::binary);
    if (!in) throw std::runtime_error("WorldMeta: cannot open '" + path + "'");
    Json j;
    try {
      in >> j;
    } catch (const std::exception& e) {
      throw std::runtime_error("WorldMeta: '" + path + "' is not valid JSON: " + e.what());
    }
    return from_json(j);
  }
};

// Raw world: ground truth plus synthetic annotations, before any curation.
struct DentalWorld {
  WorldMeta meta;
  std::vector<LabeledItem> items;
  std::vector<AnnotationRecord> annotations;
};

namespace detail {

inline std::vector<std::string> condition_names(int count) {
  static const std::vector<std::string> pool = {"caries",    "gingivitis", "calculus",
                                                "periodontitis", "abscess", "erosion",
                                                "impaction", "lesion"};
  std::vector<std::string> out;
  for (int i = 0; i < count; ++i) {
    if (i < static_cast<int>(pool.size()))
      out.push_back(pool[static_cast<std::size_t>(i)]);
    else
      out.push_back("cond" + std::to_string(i));
  }
  return out;
}

inline std::string item_name(int i) {
  char buf[24];
  std::snprintf(buf, sizeof buf, "item-%04d", i);
  return buf;
}

}  // namespace detail

inline DentalWorld generate_raw_world(const GeneratorConfig& cfg, std::uint64_t seed) {
  cfg.validate();
  DentalWorld world;

  // vocabulary: markers, yes/no, conditions, evidence, noise — in that order
  std::vector<std::string> extra = {"describe", "which", "has", "general", "yes", "no"};
  const auto conds = detail::condition_names(cfg.conditions);
  world.meta.label_universe = conds;
  extra.insert(extra.end(), conds.begin(), conds.end());
  for (const auto& c : conds) {
    auto& ev = world.meta.evidence[c];
    for (int k = 0; k < cfg.evidence_per_condition; ++k)
      ev.push_back("sign_" + c + "_" + std::to_string(k));
    extra.insert(extra.end(), ev.begin(), ev.end());
  }
  std::vector<std::string> noise;
  for (int k = 0; k < cfg.noise_tokens; ++k) noise.push_back("artifact" + std::to_string(k));
  extra.insert(extra.end(), noise.begin(), noise.end());
  world.meta.vocab = Vocab::with_extra(extra);
  const Vocab& vocab = world.meta.vocab;

  // items
  const auto prevalence = cfg.effective_prevalence();
  for (int i = 0; i < cfg.items; ++i) {
    Rng rng(derive_seed(seed, "item", static_cast<std::uint64_t>(i)));
    LabeledItem item;
    item.item_id = detail::item_name(i);
    const auto primary = rng.categorical(prevalence);
    item.true_labels.insert(conds[primary]);
    if (cfg.conditions > 1 && rng.uniform() < cfg.second_label_prob) {
      auto other = rng.below(static_cast<std::uint64_t>(cfg.conditions - 1));
      if (other >= primary) ++other;  // skip the primary slot
      item.true_labels.insert(conds[static_cast<std::size_t>(other)]);
    }
    std::vector<std::string> words;
    for (const auto& lab : item.true_labels) {
      const auto& ev = world.meta.evidence.at(lab);
      words.insert(words.end(), ev.begin(), ev.end());
    }
    for (const auto& n : noise)
      if (rng.uniform() < cfg.noise_rate) words.push_back(n);
    rng.shuffle(words);
    item.observation = vocab.tokenize(words);
    world.items.push_back(std::move(item));
  }

  // annotations: annotators rotate over items so every pair co-annotates
  const auto err = cfg.effective_annotator_error();
  for (int i = 0; i < cfg.items; ++i) {
    const auto& item = world.items[static_cast<std::size_t>(i)];
    for (int k = 0; k < cfg.annotations_per_item; ++k) {
      const int a = (i + k) % cfg.annotators;
      Rng rng(derive_seed(seed, "annot", static_cast<std::uint64_t>(i),
                          static_cast<std::uint64_t>(a)));
      AnnotationRecord rec;
      rec.item_id = item.item_id;
      rec.annotator_id = "dentist-" + std::to_string(a);
      rec.uncertain = rng.uniform() < cfg.uncertain_rate;
      if (!rec.uncertain) {
        for (const auto& c : conds) {
          bool present = item.true_labels.count(c) > 0;
          if (rng.uniform() < err[static_cast<std::size_t>(a)]) present = !present;
          if (present) rec.positive_labels.insert(c);
        }
      }
      world.annotations.push_back(std::move(rec));
    }
  }
  return world;
}

// ---------------------------------------------------------------------------
// Curation: agreement filter -> consensus/majority labels per item

// Applies the training-annotation filter and derives one curated label set
// per item: the full-consensus set when the retained annotators agree
// (recorded as curation=consensus in the item's extra), otherwise a per-label
// majority vote of the retained annotators (curation=majority). Items left
// with no retained non-uncertain annotation are dropped.
inline std::pair<std::vector<LabeledItem>, CurationReport> curate_items(
    const std::vector<LabeledItem>& raw, const std::vector<AnnotationRecord>& annotations,
    const std::vector<std::string>& label_universe, const CurationOptions& opt = {}) {
  auto [retained, report] =
      filter_training_annotations(annotations, opt.agreement_threshold, label_universe);
  const auto consensus = consensus_test_labels(retained, opt.consensus_mode);

  std::map<std::string, std::vector<const AnnotationRecord*>> by_item;
  for (const auto& r : retained)
    if (!r.uncertain) by_item[r.item_id].push_back(&r);

  std::vector<LabeledItem> curated;
  report.items_in = static_cast<long>(raw.size());
  for (const auto& item : raw) {
    auto it = by_item.find(item.item_id);
    if (it == by_item.end()) {
      report.items_dropped += 1;
      report.consensus_outcome[item.item_id] = "dropped";
      continue;
    }
    LabeledItem out = item;
    out.true_labels.clear();
    auto cons = consensus.find(item.item_id);
    if (cons != consensus.end() && cons->second.has_value()) {
      out.true_labels = *cons->second;
      out.extra["curation"] = "consensus";
      report.consensus_outcome[item.item_id] = "accepted";
    } else {
      const auto& voters = it->second;
      for (const auto& lab : label_universe) {
        long yes = 0;
        for (const auto* r : voters) yes += r->positive_labels.count(lab) ? 1 : 0;
        if (2 * yes > static_cast<long>(voters.size())) out.true_labels.insert(lab);
      }
      out.extra["curation"] = "majority";
      report.consensus_outcome[item.item_id] = "rejected";
    }
    curated.push_back(std::move(out));
  }
  auto deduped = dedup(curated);
  report.items_curated = static_cast<long>(deduped.size());
  report.items_dropped = report.items_in - report.items_curated;
  return {std::move(deduped), std::move(report)};
}

// ---------------------------------------------------------------------------
// Corpus builders (labels below always mean the curated labels)

// One MCQ per item: the keyed option is the item's first label, distractors
// are sampled from conditions the item does not have, and option order is
// shuffled so key letters stay balanced. Items with no labels or no possible
// distractor yield nothing.
inline std::optional<BenchmarkItem> make_mcq(const LabeledItem& item,
                                             const std::vector<std::string>& label_universe,
                                             int options_per_mcq, const Vocab& vocab,
                                             Rng& rng, const std::string& id_suffix = "#mcq") {
  if (item.true_labels.empty()) return std::nullopt;
  const std::string correct = *item.true_labels.begin();
  std::vector<std::string> pool;
  for (const auto& c : label_universe)
    if (!item.true_labels.count(c)) pool.push_back(c);
  if (pool.empty()) return std::nullopt;

  rng.shuffle(pool);
  const auto n_distract =
      std::min<std::size_t>(pool.size(), static_cast<std::size_t>(options_per_mcq - 1));
  std::vector<std::string> opts(pool.begin(), pool.begin() + static_cast<long>(n_distract));
  opts.push_back(correct);
  rng.shuffle(opts);

  BenchmarkItem mcq;
  mcq.item_id = item.item_id + id_suffix;
  mcq.kind = BenchmarkKind::mcq;
  mcq.prompt = item.observation;
  mcq.prompt.push_back(vocab.id("which"));
  for (std::size_t i = 0; i < opts.size(); ++i) {
    const std::string letter(1, static_cast<char>('A' + i));
    mcq.options.emplace_back(letter, opts[i]);
    mcq.prompt.push_back(vocab.id(letter));
    mcq.prompt.push_back(vocab.id(opts[i]));
    if (opts[i] == correct) mcq.answer_key = letter;
  }
  mcq.validate();
  return mcq;
}

inline std::vector<BenchmarkItem> build_mcq_corpus(const std::vector<LabeledItem>& items,
                                                   const WorldMeta& meta, int options_per_mcq,
                                                   std::uint64_t seed) {
  std::vector<BenchmarkItem> out;
  for (const auto& item : items) {
    Rng rng(derive_seed(seed, "mcq", item.item_id));
    if (auto mcq = make_mcq(item, meta.label_universe, options_per_mcq, meta.vocab, rng))
      out.push_back(std::move(*mcq));
  }
  return out;
}

// One yes/no query per (item, condition) pair.
inline std::vector<BenchmarkItem> build_label_queries(const std::vector<LabeledItem>& items,
                                                      const WorldMeta& meta) {
  std::vector<BenchmarkItem> out;
  for (const auto& item : items) {
    for (const auto& c : meta.label_universe) {
      BenchmarkItem q;
      q.item_id = item.item_id + "#has_" + c;
      q.kind = BenchmarkKind::label_query;
      q.prompt = item.observation;
      q.prompt.push_back(meta.vocab.id("has"));
      q.prompt.push_back(meta.vocab.id(c));
      q.queried_label = c;
      q.expected = item.true_labels.count(c) ? "yes" : "no";
      q.validate();
      out.push_back(std::move(q));
    }
  }
  return out;
}

// Stage-I records: per item a caption (observation -> verbalized evidence and
// conditions), an instruction (alternating MCQ answers and yes/no answers),
// and a templated reasoning record; plus standalone general-domain echo
// records drawn from the noise vocabulary.
inline std::vector<SftRecord> build_sft_corpus(const std::vector<LabeledItem>& items,
                                               const WorldMeta& meta,
                                               const GeneratorConfig& cfg, std::uint64_t seed) {
  const Vocab& vocab = meta.vocab;
  std::vector<SftRecord> out;
  long idx = 0;
  for (const auto& item : items) {
    Rng rng(derive_seed(seed, "sft", item.item_id));

    SftRecord caption;
    caption.kind = "caption";
    caption.extra["item"] = item.item_id;  // provenance, audited by the ablation runner
    caption.prompt = item.observation;
    caption.prompt.push_back(vocab.id("describe"));
    for (const auto& lab : item.true_labels) {
      for (const auto& ev : meta.evidence.at(lab)) caption.target.push_back(vocab.id(ev));
      caption.target.push_back(vocab.id(lab));
    }
    if (item.true_labels.empty()) caption.target.push_back(vocab.id("no"));
    caption.target.push_back(Vocab::kEos);
    out.push_back(std::move(caption));

    SftRecord instruction;
    instruction.kind = "instruction";
    instruction.extra["item"] = item.item_id;
    const auto mcq = make_mcq(item, meta.label_universe, cfg.options_per_mcq, vocab, rng);
    if (idx % 2 == 0 && mcq.has_value()) {
      instruction.prompt = mcq->prompt;
      instruction.target = {vocab.id(mcq->answer_key), Vocab::kEos};
    } else {
      const auto& universe = meta.label_universe;
      const auto& c = universe[rng.below(universe.size())];
      instruction.prompt = item.observation;
      instruction.prompt.push_back(vocab.id("has"));
      instruction.prompt.push_back(vocab.id(c));
      instruction.target = {vocab.id(item.true_labels.count(c) ? "yes" : "no"), Vocab::kEos};
    }
    out.push_back(std::move(instruction));

    if (mcq.has_value()) {
      SftRecord reasoning;
      reasoning.kind = "reasoning";
      reasoning.extra["item"] = item.item_id;
      reasoning.prompt = mcq->prompt;
      const std::string& correct = *item.true_labels.begin();
      reasoning.target = {Vocab::kThinkOpen, vocab.id(meta.evidence.at(correct).front()),
                          vocab.id(correct), Vocab::kThinkClose, Vocab::kAnswerOpen,
                          vocab.id(mcq->answer_key), Vocab::kAnswerClose, Vocab::kEos};
      out.push_back(std::move(reasoning));
    }
    ++idx;
  }

  for (int g = 0; g < cfg.general_records; ++g) {
    Rng rng(derive_seed(seed, "general", static_cast<std::uint64_t>(g)));
    SftRecord rec;
    rec.kind = "general";
    const auto a = rng.below(static_cast<std::uint64_t>(cfg.noise_tokens));
    const auto b = rng.below(static_cast<std::uint64_t>(cfg.noise_tokens));
    const TokenId ta = vocab.id("artifact" + std::to_string(a));
    const TokenId tb = vocab.id("artifact" + std::to_string(b));
    rec.prompt = {vocab.id("general"), ta, tb};
    rec.target = {ta, tb, Vocab::kEos};
    out.push_back(std::move(rec));
  }
  return out;
}

// ---------------------------------------------------------------------------
// Full composition: raw world -> curation -> dedup -> split -> corpora

struct GeneratedWorld {
  WorldMeta meta;
  std::vector<LabeledItem> truth_items;
  std::vector<AnnotationRecord> annotations;
  CurationReport curation;
  std::vector<LabeledItem> curated;
  SplitResult splits;
  std::vector<SftRecord> sft_corpus;        // from the sft slice (+ general records)
  std::vector<BenchmarkItem> mcq_corpus;    // RL training questions, rl slice
  std::vector<BenchmarkItem> bench_mcq;     // held-out MCQ benchmark, eval slice
  BalanceResult bench_label;                // balanced yes/no benchmark, eval slice
};

// Eval-slice items for benchmarks: prefer full-consensus records (the
// stricter test protocol); fall back to the whole slice when too few exist.
inline std::vector<LabeledItem> benchmark_eligible(const std::vector<LabeledItem>& eval_slice,
                                                   int min_consensus) {
  std::vector<LabeledItem> consensus_only;
  for (const auto& it : eval_slice)
    if (it.extra.value("curation", "") == "consensus") consensus_only.push_back(it);
  if (static_cast<int>(consensus_only.size()) >= min_consensus) return consensus_only;
  return eval_slice;
}

inline GeneratedWorld generate_dental_world(const GeneratorConfig& cfg, std::uint64_t seed,
                                            const CurationOptions& curation = {},
                                            const SplitFractions& fractions = {}) {
  GeneratedWorld g;
  DentalWorld raw = generate_raw_world(cfg, seed);
  g.meta = std::move(raw.meta);
  g.truth_items = std::move(raw.items);
  g.annotations = std::move(raw.annotations);

  auto [curated, report] = curate_items(g.truth_items, g.annotations, g.meta.label_universe,
                                        curation);
  g.curated = std::move(curated);
  g.curation = std::move(report);

  g.splits = split_disjoint(g.curated, fractions, derive_seed(seed, "split"));
  g.sft_corpus = build_sft_corpus(g.splits.sft, g.meta, cfg, derive_seed(seed, "sft_corpus"));
  g.mcq_corpus =
      build_mcq_corpus(g.splits.rl, g.meta, cfg.options_per_mcq, derive_seed(seed, "rl_mcq"));

  const auto eligible = benchmark_eligible(g.splits.eval, cfg.min_consensus_eval);
  g.bench_mcq =
      build_mcq_corpus(eligible, g.meta, cfg.options_per_mcq, derive_seed(seed, "bench_mcq"));
  g.bench_label = balance_benchmark(build_label_queries(eligible, g.meta));
  return g;
}

}  // namespace dentalforge
