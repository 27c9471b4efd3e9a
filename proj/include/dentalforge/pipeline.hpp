#pragma once

// End-to-end run orchestration: one strict JSON config drives generate ->
// curate -> split -> sft -> grpo -> eval -> report, every stage talking to
// the next only through files in the run directory. A stage whose outputs all
// exist is skipped, so deleting an artifact reruns the run from that point.
// The run manifest records the config snapshot, seeds and content hashes of
// everything produced, making reruns byte-checkable.

#include <chrono>
#include <cstdint>
#include <cstdio>
#include <filesystem>
#include <fstream>
#include <functional>
#include <initializer_list>
#include <map>
#include <sstream>
#include <stdexcept>
#include <string>
#include <string_view>
#include <vector>

#include "dentalforge/dentalworld.hpp"
#include "dentalforge/evalharness.hpp"
#include "dentalforge/grpo.hpp"
#include "dentalforge/sft.hpp"

namespace dentalforge {

// ---------------------------------------------------------------------------
// Content hashing for the manifest: the rng seed-folding hash over the file
// bytes, rendered as 16 hex digits.

inline std::string hash_file(const std::string& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw std::runtime_error("hash_file: cannot open '" + path + "'");
  std::ostringstream ss;
  ss << in.rdbuf();
  char buf[17];
  std::snprintf(buf, sizeof buf, "%016llx",
                static_cast<unsigned long long>(fnv1a64(ss.str())));
  return buf;
}

// ---------------------------------------------------------------------------
// Strict config parsing: unknown keys and type mismatches name the exact
// dotted path, so a typo like "grup_size" fails loudly instead of silently
// running with defaults.

namespace detail {

inline std::string dotted(const std::string& prefix, const std::string& key) {
  return prefix.empty() ? key : prefix + "." + key;
}

inline void check_keys(const Json& obj, const std::string& prefix,
                       std::initializer_list<const char*> allowed) {
  if (!obj.is_object())
    throw std::invalid_argument("config: '" + (prefix.empty() ? std::string("<root>") : prefix) +
                                "' must be a JSON object");
  for (const auto& [key, value] : obj.items()) {
    (void)value;
    bool known = false;
    for (const char* a : allowed)
      if (key == a) {
        known = true;
        break;
      }
    if (!known) throw std::invalid_argument("config: unknown key '" + dotted(prefix, key) + "'");
  }
}

template <typename T>
inline void read_field(const Json& obj, const std::string& prefix, const char* key, T& out) {
  if (!obj.contains(key)) return;
  try {
    obj.at(key).get_to(out);
  } catch (const std::exception&) {
    throw std::invalid_argument("config: wrong type for '" + dotted(prefix, key) + "'");
  }
}

inline std::string read_enum_string(const Json& obj, const std::string& prefix, const char* key,
                                    const std::string& current,
                                    std::initializer_list<const char*> allowed) {
  std::string s = current;
  read_field(obj, prefix, key, s);
  for (const char* a : allowed)
    if (s == a) return s;
  std::string options;
  for (const char* a : allowed) options += (options.empty() ? "" : "|") + std::string(a);
  throw std::invalid_argument("config: '" + dotted(prefix, key) + "' must be one of " + options +
                              ", got '" + s + "'");
}

}  // namespace detail

inline const char* to_string(ConsensusMode m) {
  return m == ConsensusMode::strict ? "strict" : "per_label";
}
inline const char* to_string(MatchMode m) {
  return m == MatchMode::lenient ? "lenient" : "strict";
}
inline const char* to_string(KlMode m) { return m == KlMode::k3 ? "k3" : "exact"; }
inline const char* to_string(AveragingMode m) {
  return m == AveragingMode::token ? "token" : "sequence";
}

// ---------------------------------------------------------------------------
// Pipeline configuration: every tunable of every stage, strict-parsed

struct PipelineConfig {
  std::uint64_t seed = 0;
  GeneratorConfig generator;
  SplitFractions split;
  CurationOptions curation;
  int embed_dim = 16;  // policy section
  int hidden_dim = 32;
  SftConfig sft;    // seed assigned from the master seed at run time
  GrpoConfig grpo;  // likewise
  EvalOptions eval;
  std::vector<double> ablation_fractions = {0.0, 0.3, 1.0};
  int ablation_n_seeds = 3;
  long ablation_rl_steps = 200;

  void validate() const {
    generator.validate();
    sft.validate();
    grpo.validate();
    if (embed_dim < 1 || hidden_dim < 1)
      throw std::invalid_argument("config: policy dims must be >= 1");
    if (eval.max_len < 1) throw std::invalid_argument("config: eval.max_len must be >= 1");
    ablation_config().validate();
  }

  // The standalone ablation runner reuses the pipeline's policy/trainer
  // settings; only its own budget knobs live in the ablation section.
  AblationConfig ablation_config() const {
    AblationConfig a;
    a.fractions = ablation_fractions;
    a.n_seeds = ablation_n_seeds;
    a.seed = seed;
    a.embed_dim = embed_dim;
    a.hidden_dim = hidden_dim;
    a.rl_steps = ablation_rl_steps;
    a.sft = sft;
    a.grpo = grpo;
    return a;
  }

  static PipelineConfig from_json(const Json& j) {
    using detail::check_keys;
    using detail::read_field;
    PipelineConfig c;
    check_keys(j, "", {"seed", "generator", "curation", "policy", "sft", "grpo", "eval",
                       "ablation"});
    read_field(j, "", "seed", c.seed);

    if (j.contains("generator")) {
      const Json& g = j.at("generator");
      check_keys(g, "generator",
                 {"conditions", "evidence_per_condition", "noise_tokens", "noise_rate",
                  "second_label_prob", "prevalence", "items", "general_records",
                  "options_per_mcq", "annotators", "annotations_per_item", "annotator_error",
                  "uncertain_rate", "vocab_capacity", "min_consensus_eval", "split"});
      read_field(g, "generator", "conditions", c.generator.conditions);
      read_field(g, "generator", "evidence_per_condition", c.generator.evidence_per_condition);
      read_field(g, "generator", "noise_tokens", c.generator.noise_tokens);
      read_field(g, "generator", "noise_rate", c.generator.noise_rate);
      read_field(g, "generator", "second_label_prob", c.generator.second_label_prob);
      read_field(g, "generator", "prevalence", c.generator.prevalence);
      read_field(g, "generator", "items", c.generator.items);
      read_field(g, "generator", "general_records", c.generator.general_records);
      read_field(g, "generator", "options_per_mcq", c.generator.options_per_mcq);
      read_field(g, "generator", "annotators", c.generator.annotators);
      read_field(g, "generator", "annotations_per_item", c.generator.annotations_per_item);
      read_field(g, "generator", "annotator_error", c.generator.annotator_error);
      read_field(g, "generator", "uncertain_rate", c.generator.uncertain_rate);
      read_field(g, "generator", "vocab_capacity", c.generator.vocab_capacity);
      read_field(g, "generator", "min_consensus_eval", c.generator.min_consensus_eval);
      if (g.contains("split")) {
        const Json& s = g.at("split");
        check_keys(s, "generator.split", {"sft", "rl", "eval"});
        read_field(s, "generator.split", "sft", c.split.sft);
        read_field(s, "generator.split", "rl", c.split.rl);
        read_field(s, "generator.split", "eval", c.split.eval);
      }
    }

    if (j.contains("curation")) {
      const Json& u = j.at("curation");
      check_keys(u, "curation", {"agreement_threshold", "consensus_mode"});
      read_field(u, "curation", "agreement_threshold", c.curation.agreement_threshold);
      c.curation.consensus_mode =
          detail::read_enum_string(u, "curation", "consensus_mode",
                                   to_string(c.curation.consensus_mode),
                                   {"strict", "per_label"}) == "strict"
              ? ConsensusMode::strict
              : ConsensusMode::per_label;
    }

    if (j.contains("policy")) {
      const Json& p = j.at("policy");
      check_keys(p, "policy", {"embed_dim", "hidden_dim"});
      read_field(p, "policy", "embed_dim", c.embed_dim);
      read_field(p, "policy", "hidden_dim", c.hidden_dim);
    }

    if (j.contains("sft")) {
      const Json& s = j.at("sft");
      check_keys(s, "sft", {"epochs", "batch_size", "learning_rate", "warmup_frac",
                            "cosine_decay", "mix_ratio"});
      read_field(s, "sft", "epochs", c.sft.epochs);
      read_field(s, "sft", "batch_size", c.sft.batch_size);
      read_field(s, "sft", "learning_rate", c.sft.learning_rate);
      read_field(s, "sft", "warmup_frac", c.sft.warmup_frac);
      read_field(s, "sft", "cosine_decay", c.sft.cosine_decay);
      read_field(s, "sft", "mix_ratio", c.sft.mix_ratio);
    }

    if (j.contains("grpo")) {
      const Json& g = j.at("grpo");
      check_keys(g, "grpo",
                 {"group_size", "groups_per_batch", "learning_rate", "epochs", "clip_eps",
                  "kl_coeff", "max_response_len", "max_steps", "threads", "think_open_primed",
                  "format_weight", "accuracy_weight", "match_mode", "kl_mode", "averaging"});
      read_field(g, "grpo", "group_size", c.grpo.group_size);
      read_field(g, "grpo", "groups_per_batch", c.grpo.groups_per_batch);
      read_field(g, "grpo", "learning_rate", c.grpo.learning_rate);
      read_field(g, "grpo", "epochs", c.grpo.epochs);
      read_field(g, "grpo", "clip_eps", c.grpo.clip_eps);
      read_field(g, "grpo", "kl_coeff", c.grpo.kl_coeff);
      read_field(g, "grpo", "max_response_len", c.grpo.max_response_len);
      read_field(g, "grpo", "max_steps", c.grpo.max_steps);
      read_field(g, "grpo", "threads", c.grpo.threads);
      read_field(g, "grpo", "think_open_primed", c.grpo.think_open_primed);
      read_field(g, "grpo", "format_weight", c.grpo.reward_weights.format_weight);
      read_field(g, "grpo", "accuracy_weight", c.grpo.reward_weights.accuracy_weight);
      c.grpo.match_mode = detail::read_enum_string(g, "grpo", "match_mode",
                                                   to_string(c.grpo.match_mode),
                                                   {"lenient", "strict"}) == "lenient"
                              ? MatchMode::lenient
                              : MatchMode::strict;
      c.grpo.kl_mode = detail::read_enum_string(g, "grpo", "kl_mode", to_string(c.grpo.kl_mode),
                                                {"k3", "exact"}) == "k3"
                           ? KlMode::k3
                           : KlMode::exact;
      c.grpo.averaging = detail::read_enum_string(g, "grpo", "averaging",
                                                  to_string(c.grpo.averaging),
                                                  {"token", "sequence"}) == "token"
                             ? AveragingMode::token
                             : AveragingMode::sequence;
    }

    if (j.contains("eval")) {
      const Json& e = j.at("eval");
      check_keys(e, "eval", {"max_len", "think_open_primed"});
      read_field(e, "eval", "max_len", c.eval.max_len);
      read_field(e, "eval", "think_open_primed", c.eval.think_open_primed);
    }

    if (j.contains("ablation")) {
      const Json& a = j.at("ablation");
      check_keys(a, "ablation", {"fractions", "n_seeds", "rl_steps"});
      read_field(a, "ablation", "fractions", c.ablation_fractions);
      read_field(a, "ablation", "n_seeds", c.ablation_n_seeds);
      read_field(a, "ablation", "rl_steps", c.ablation_rl_steps);
    }
    return c;
  }

  // Full defaults-resolved snapshot; from_json(to_json()) round-trips.
  Json to_json() const {
    Json j;
    j["seed"] = seed;
    Json g;
    g["conditions"] = generator.conditions;
    g["evidence_per_condition"] = generator.evidence_per_condition;
    g["noise_tokens"] = generator.noise_tokens;
    g["noise_rate"] = generator.noise_rate;
    g["second_label_prob"] = generator.second_label_prob;
    g["prevalence"] = generator.prevalence;
    g["items"] = generator.items;
    g["general_records"] = generator.general_records;
    g["options_per_mcq"] = generator.options_per_mcq;
    g["annotators"] = generator.annotators;
    g["annotations_per_item"] = generator.annotations_per_item;
    g["annotator_error"] = generator.annotator_error;
    g["uncertain_rate"] = generator.uncertain_rate;
    g["vocab_capacity"] = generator.vocab_capacity;
    g["min_consensus_eval"] = generator.min_consensus_eval;
    g["split"] = Json{{"sft", split.sft}, {"rl", split.rl}, {"eval", split.eval}};
    j["generator"] = std::move(g);
    j["curation"] = Json{{"agreement_threshold", curation.agreement_threshold},
                         {"consensus_mode", to_string(curation.consensus_mode)}};
    j["policy"] = Json{{"embed_dim", embed_dim}, {"hidden_dim", hidden_dim}};
    j["sft"] = Json{{"epochs", sft.epochs},
                    {"batch_size", sft.batch_size},
                    {"learning_rate", sft.learning_rate},
                    {"warmup_frac", sft.warmup_frac},
                    {"cosine_decay", sft.cosine_decay},
                    {"mix_ratio", sft.mix_ratio}};
    j["grpo"] = Json{{"group_size", grpo.group_size},
                     {"groups_per_batch", grpo.groups_per_batch},
                     {"learning_rate", grpo.learning_rate},
                     {"epochs", grpo.epochs},
                     {"clip_eps", grpo.clip_eps},
                     {"kl_coeff", grpo.kl_coeff},
                     {"max_response_len", grpo.max_response_len},
                     {"max_steps", grpo.max_steps},
                     {"threads", grpo.threads},
                     {"think_open_primed", grpo.think_open_primed},
                     {"format_weight", grpo.reward_weights.format_weight},
                     {"accuracy_weight", grpo.reward_weights.accuracy_weight},
                     {"match_mode", to_string(grpo.match_mode)},
                     {"kl_mode", to_string(grpo.kl_mode)},
                     {"averaging", to_string(grpo.averaging)}};
    j["eval"] = Json{{"max_len", eval.max_len}, {"think_open_primed", eval.think_open_primed}};
    j["ablation"] = Json{{"fractions", ablation_fractions},
                         {"n_seeds", ablation_n_seeds},
                         {"rl_steps", ablation_rl_steps}};
    return j;
  }

  static PipelineConfig load(const std::string& path) {
    std::ifstream in(path, std::ios::binary);
    if (!in) throw std::runtime_error("config: cannot open '" + path + "'");
    Json j;
    try {
      in >> j;
    } catch (const std::exception& e) {
      throw std::runtime_error("config: '" + path + "' is not valid JSON: " + e.what());
    }
    return from_json(j);
  }
};

// ---------------------------------------------------------------------------
// Run artifacts: canonical file names, one place

namespace files {
inline constexpr const char* kWorldMeta = "world_meta.json";
inline constexpr const char* kTruthItems = "truth_items.jsonl";
inline constexpr const char* kAnnotations = "annotations.jsonl";
inline constexpr const char* kCuratedItems = "curated_items.jsonl";
inline constexpr const char* kCurationReport = "curation_report.json";
inline constexpr const char* kSftItems = "sft_items.jsonl";
inline constexpr const char* kRlItems = "rl_items.jsonl";
inline constexpr const char* kEvalItems = "eval_items.jsonl";
inline constexpr const char* kSftCorpus = "sft_corpus.jsonl";
inline constexpr const char* kRlMcq = "rl_mcq.jsonl";
inline constexpr const char* kBenchMcq = "bench_mcq.jsonl";
inline constexpr const char* kBenchLabel = "bench_label.jsonl";
inline constexpr const char* kBackbone = "policy_backbone.json";
inline constexpr const char* kPolicySft = "policy_sft.json";
inline constexpr const char* kPolicyGrpo = "policy_grpo.json";
inline constexpr const char* kSftMetrics = "sft_metrics.csv";
inline constexpr const char* kGrpoMetrics = "grpo_metrics.csv";
inline constexpr const char* kEvalMcq = "eval_mcq.json";
inline constexpr const char* kEvalLabel = "eval_label.json";
inline constexpr const char* kStageReportTxt = "stage_report.txt";
inline constexpr const char* kStageReportJson = "stage_report.json";
inline constexpr const char* kManifest = "manifest.json";
}  // namespace files

namespace detail {

inline std::string join(const std::string& dir, const std::string& name) {
  return (std::filesystem::path(dir) / name).string();
}

inline void write_json_file(const std::string& path, const Json& j) {
  write_lines_atomic(path, {j.dump(1, '\t')});
}

inline Json read_json_file(const std::string& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw std::runtime_error("cannot open '" + path + "'");
  Json j;
  try {
    in >> j;
  } catch (const std::exception& e) {
    throw std::runtime_error("'" + path + "' is not valid JSON: " + e.what());
  }
  return j;
}

}  // namespace detail

// ---------------------------------------------------------------------------
// Stage bodies. Each reads its inputs from the run directory and writes its
// outputs there, so any stage can rerun against on-disk state. The seed tags
// mirror generate_dental_world exactly: a pipeline run and an in-memory
// composition with the same master seed produce identical corpora.

namespace stages {

inline void generate(const PipelineConfig& cfg, const std::string& dir) {
  const DentalWorld raw = generate_raw_world(cfg.generator, cfg.seed);
  raw.meta.save(detail::join(dir, files::kWorldMeta));
  write_items_jsonl(detail::join(dir, files::kTruthItems), raw.items, raw.meta.vocab);
  write_annotations_jsonl(detail::join(dir, files::kAnnotations), raw.annotations);
}

inline void curate(const PipelineConfig& cfg, const std::string& dir) {
  const auto meta = WorldMeta::load(detail::join(dir, files::kWorldMeta));
  const auto items = read_items_jsonl(detail::join(dir, files::kTruthItems), meta.vocab);
  const auto annotations = read_annotations_jsonl(detail::join(dir, files::kAnnotations));
  auto [curated, report] = curate_items(items, annotations, meta.label_universe, cfg.curation);
  write_items_jsonl(detail::join(dir, files::kCuratedItems), curated, meta.vocab);
  detail::write_json_file(detail::join(dir, files::kCurationReport), report.to_json());
}

inline void split(const PipelineConfig& cfg, const std::string& dir) {
  const auto meta = WorldMeta::load(detail::join(dir, files::kWorldMeta));
  const auto curated = read_items_jsonl(detail::join(dir, files::kCuratedItems), meta.vocab);
  const auto splits = split_disjoint(curated, cfg.split, derive_seed(cfg.seed, "split"));
  write_items_jsonl(detail::join(dir, files::kSftItems), splits.sft, meta.vocab);
  write_items_jsonl(detail::join(dir, files::kRlItems), splits.rl, meta.vocab);
  write_items_jsonl(detail::join(dir, files::kEvalItems), splits.eval, meta.vocab);

  const auto sft_corpus =
      build_sft_corpus(splits.sft, meta, cfg.generator, derive_seed(cfg.seed, "sft_corpus"));
  write_sft_jsonl(detail::join(dir, files::kSftCorpus), sft_corpus, meta.vocab);
  const auto rl_mcq = build_mcq_corpus(splits.rl, meta, cfg.generator.options_per_mcq,
                                       derive_seed(cfg.seed, "rl_mcq"));
  write_benchmark_jsonl(detail::join(dir, files::kRlMcq), rl_mcq, meta.vocab);

  const auto eligible = benchmark_eligible(splits.eval, cfg.generator.min_consensus_eval);
  const auto bench_mcq = build_mcq_corpus(eligible, meta, cfg.generator.options_per_mcq,
                                          derive_seed(cfg.seed, "bench_mcq"));
  write_benchmark_jsonl(detail::join(dir, files::kBenchMcq), bench_mcq, meta.vocab);
  const auto balanced = balance_benchmark(build_label_queries(eligible, meta));
  write_benchmark_jsonl(detail::join(dir, files::kBenchLabel), balanced.items, meta.vocab);
}

inline void sft(const PipelineConfig& cfg, const std::string& dir) {
  const auto meta = WorldMeta::load(detail::join(dir, files::kWorldMeta));
  const auto corpus = read_sft_jsonl(detail::join(dir, files::kSftCorpus), meta.vocab);
  const auto backbone =
      init_policy(meta.vocab, cfg.embed_dim, cfg.hidden_dim, derive_seed(cfg.seed, "init"));
  save_checkpoint(backbone, detail::join(dir, files::kBackbone));

  std::vector<SftRecord> domain, general;
  for (const auto& rec : corpus) (rec.kind == "general" ? general : domain).push_back(rec);
  SftConfig scfg = cfg.sft;
  scfg.seed = derive_seed(cfg.seed, "sft");
  const auto train_set =
      mix_sft_corpus(domain, general, scfg.mix_ratio, derive_seed(cfg.seed, "mix"));
  train_sft(scfg, train_set, backbone, dir);  // policy_sft.json + sft_metrics.csv
}

inline void grpo(const PipelineConfig& cfg, const std::string& dir) {
  const auto meta = WorldMeta::load(detail::join(dir, files::kWorldMeta));
  const auto rl_mcq = read_benchmark_jsonl(detail::join(dir, files::kRlMcq), meta.vocab);
  const auto sft_params = load_checkpoint(detail::join(dir, files::kPolicySft));
  GrpoConfig gcfg = cfg.grpo;
  gcfg.seed = derive_seed(cfg.seed, "grpo");
  train_grpo(gcfg, rl_mcq, sft_params, dir);  // policy_grpo.json + grpo_metrics.csv
}

inline void evaluate(const PipelineConfig& cfg, const std::string& dir) {
  const auto meta = WorldMeta::load(detail::join(dir, files::kWorldMeta));
  const auto bench_mcq = read_benchmark_jsonl(detail::join(dir, files::kBenchMcq), meta.vocab);
  const auto bench_label = read_benchmark_jsonl(detail::join(dir, files::kBenchLabel), meta.vocab);
  const auto params = load_checkpoint(detail::join(dir, files::kPolicyGrpo));
  const auto mcq = eval_benchmark(params, bench_mcq, cfg.eval, "dental_mcq");
  detail::write_json_file(detail::join(dir, files::kEvalMcq), mcq.to_json());
  const auto lab = eval_benchmark(params, bench_label, cfg.eval, "dental_label");
  detail::write_json_file(detail::join(dir, files::kEvalLabel), lab.to_json());
}

inline void report(const PipelineConfig& cfg, const std::string& dir) {
  const auto meta = WorldMeta::load(detail::join(dir, files::kWorldMeta));
  const std::vector<BenchmarkSet> benches = {
      {"dental_mcq", read_benchmark_jsonl(detail::join(dir, files::kBenchMcq), meta.vocab)},
      {"dental_label", read_benchmark_jsonl(detail::join(dir, files::kBenchLabel), meta.vocab)}};
  const auto rep = stage_report(load_checkpoint(detail::join(dir, files::kBackbone)),
                                load_checkpoint(detail::join(dir, files::kPolicySft)),
                                load_checkpoint(detail::join(dir, files::kPolicyGrpo)),
                                benches, cfg.eval);
  detail::write_lines_atomic(detail::join(dir, files::kStageReportTxt), {rep.to_text()});
  detail::write_json_file(detail::join(dir, files::kStageReportJson), rep.to_json());
}

}  // namespace stages

// ---------------------------------------------------------------------------
// Manifest

inline constexpr const char* kArtifactVersion = "dentalforge-run-v1";

struct StageRecord {
  std::string name;
  double seconds = 0.0;
  bool skipped = false;
};

struct RunManifest {
  std::string artifact_version = kArtifactVersion;
  std::string command_line;
  Json config_snapshot;
  std::uint64_t master_seed = 0;
  std::map<std::string, std::string> corpus_hashes;      // data + metrics + reports
  std::map<std::string, std::string> checkpoint_hashes;  // the three named policies
  double wall_clock_seconds = 0.0;
  std::vector<StageRecord> stages;

  Json to_json() const {
    Json j;
    j["artifact_version"] = artifact_version;
    j["command_line"] = command_line;
    j["config"] = config_snapshot;
    j["master_seed"] = master_seed;
    j["corpus_hashes"] = corpus_hashes;
    j["checkpoint_hashes"] = checkpoint_hashes;
    j["wall_clock_seconds"] = wall_clock_seconds;
    j["stages"] = Json::array();
    for (const auto& s : stages)
      j["stages"].push_back(
          Json{{"name", s.name}, {"seconds", s.seconds}, {"skipped", s.skipped}});
    return j;
  }

  static RunManifest from_json(const Json& j) {
    RunManifest m;
    m.artifact_version = j.at("artifact_version").get<std::string>();
    if (m.artifact_version != kArtifactVersion)
      throw std::runtime_error("manifest: unsupported artifact_version '" + m.artifact_version +
                               "'");
    m.command_line = j.at("command_line").get<std::string>();
    m.config_snapshot = j.at("config");
    m.master_seed = j.at("master_seed").get<std::uint64_t>();
    m.corpus_hashes = j.at("corpus_hashes").get<std::map<std::string, std::string>>();
    m.checkpoint_hashes = j.at("checkpoint_hashes").get<std::map<std::string, std::string>>();
    m.wall_clock_seconds = j.at("wall_clock_seconds").get<double>();
    for (const auto& s : j.at("stages"))
      m.stages.push_back({s.at("name").get<std::string>(), s.at("seconds").get<double>(),
                          s.at("skipped").get<bool>()});
    return m;
  }

  void save(const std::string& path) const {
    detail::write_json_file(path, to_json());
  }

  static RunManifest load(const std::string& path) {
    return from_json(detail::read_json_file(path));
  }
};

// ---------------------------------------------------------------------------
// Orchestrator

namespace detail {

struct StageSpec {
  const char* name;
  std::vector<const char*> outputs;
  std::function<void()> run;
};

}  // namespace detail

// Runs every stage whose outputs are not already on disk, then writes
// manifest.json. Returns 0 on success; on a stage failure prints
// "pipeline: stage '<name>' failed: <reason>" to stderr and returns 1,
// leaving completed artifacts in place for a resumed run.
inline int run_pipeline(const PipelineConfig& cfg, const std::string& out_dir,
                        const std::string& command_line = "") {
  cfg.validate();
  std::filesystem::create_directories(out_dir);
  using clock = std::chrono::steady_clock;

  const std::vector<detail::StageSpec> specs = {
      {"generate",
       {files::kWorldMeta, files::kTruthItems, files::kAnnotations},
       [&] { stages::generate(cfg, out_dir); }},
      {"curate",
       {files::kCuratedItems, files::kCurationReport},
       [&] { stages::curate(cfg, out_dir); }},
      {"split",
       {files::kSftItems, files::kRlItems, files::kEvalItems, files::kSftCorpus, files::kRlMcq,
        files::kBenchMcq, files::kBenchLabel},
       [&] { stages::split(cfg, out_dir); }},
      {"sft",
       {files::kBackbone, files::kPolicySft, files::kSftMetrics},
       [&] { stages::sft(cfg, out_dir); }},
      {"grpo",
       {files::kPolicyGrpo, files::kGrpoMetrics},
       [&] { stages::grpo(cfg, out_dir); }},
      {"eval",
       {files::kEvalMcq, files::kEvalLabel},
       [&] { stages::evaluate(cfg, out_dir); }},
      {"report",
       {files::kStageReportTxt, files::kStageReportJson},
       [&] { stages::report(cfg, out_dir); }},
  };

  RunManifest manifest;
  manifest.command_line = command_line;
  manifest.config_snapshot = cfg.to_json();
  manifest.master_seed = cfg.seed;

  const auto t0 = clock::now();
  for (const auto& spec : specs) {
    bool complete = true;
    for (const char* out : spec.outputs)
      if (!std::filesystem::exists(detail::join(out_dir, out))) {
        complete = false;
        break;
      }
    if (complete) {
      manifest.stages.push_back({spec.name, 0.0, true});
      continue;
    }
    const auto s0 = clock::now();
    try {
      spec.run();
    } catch (const std::exception& e) {
      std::fprintf(stderr, "pipeline: stage '%s' failed: %s\n", spec.name, e.what());
      return 1;
    }
    const double secs = std::chrono::duration<double>(clock::now() - s0).count();
    manifest.stages.push_back({spec.name, secs, false});
  }
  manifest.wall_clock_seconds = std::chrono::duration<double>(clock::now() - t0).count();

  const std::vector<const char*> corpus_files = {
      files::kWorldMeta,    files::kTruthItems,  files::kAnnotations, files::kCuratedItems,
      files::kCurationReport, files::kSftItems,  files::kRlItems,     files::kEvalItems,
      files::kSftCorpus,    files::kRlMcq,       files::kBenchMcq,    files::kBenchLabel,
      files::kSftMetrics,   files::kGrpoMetrics, files::kEvalMcq,     files::kEvalLabel,
      files::kStageReportTxt, files::kStageReportJson};
  for (const char* name : corpus_files)
    manifest.corpus_hashes[name] = hash_file(detail::join(out_dir, name));
  for (const char* name : {files::kBackbone, files::kPolicySft, files::kPolicyGrpo})
    manifest.checkpoint_hashes[name] = hash_file(detail::join(out_dir, name));

  manifest.save(detail::join(out_dir, files::kManifest));
  return 0;
}

}  // namespace dentalforge
