#include <catch2/catch_amalgamated.hpp>

#include <unistd.h>

#include <cstdio>
#include <filesystem>
#include <fstream>
#include <string>
#include <vector>

#include "dentalforge/pipeline.hpp"

using namespace dentalforge;

namespace {

struct TempDir {
  std::filesystem::path root;
  TempDir() {
    static int counter = 0;
    root = std::filesystem::temp_directory_path() /
           ("dentalforge-pipeline-" + std::to_string(::getpid()) + "-" +
            std::to_string(counter++));
    std::filesystem::create_directories(root);
  }
  ~TempDir() {
    std::error_code ec;
    std::filesystem::remove_all(root, ec);
  }
  std::string file(const std::string& name) const { return (root / name).string(); }
};

template <typename F>
std::string thrown_message(F&& f) {
  try {
    f();
  } catch (const std::exception& e) {
    return e.what();
  }
  return {};
}

// Small enough that a full seven-stage run takes well under a second.
PipelineConfig tiny_config() {
  PipelineConfig c;
  c.seed = 11;
  c.generator.conditions = 2;
  c.generator.evidence_per_condition = 2;
  c.generator.items = 36;
  c.generator.general_records = 8;
  c.generator.options_per_mcq = 2;
  c.generator.min_consensus_eval = 4;
  c.embed_dim = 8;
  c.hidden_dim = 16;
  c.sft.epochs = 1;
  c.sft.batch_size = 16;
  c.sft.learning_rate = 0.01;
  c.grpo.group_size = 2;
  c.grpo.groups_per_batch = 2;
  c.grpo.epochs = 1;
  c.grpo.max_steps = 2;
  c.grpo.max_response_len = 8;
  c.eval.max_len = 8;
  return c;
}

void write_bytes(const std::string& path, const std::string& bytes) {
  std::ofstream out(path, std::ios::binary | std::ios::trunc);
  out << bytes;
}

}  // namespace

TEST_CASE("pipeline config: defaults round-trip through JSON") {
  const PipelineConfig base;
  const auto round = PipelineConfig::from_json(base.to_json());
  REQUIRE(round.to_json().dump() == base.to_json().dump());

  // an empty object means all defaults
  const auto empty = PipelineConfig::from_json(Json::object());
  REQUIRE(empty.to_json().dump() == base.to_json().dump());
}

TEST_CASE("pipeline config: overrides land in the right fields") {
  const Json j = Json::parse(R"({
    "seed": 99,
    "generator": {"items": 48, "options_per_mcq": 3,
                  "split": {"sft": 0.6, "rl": 0.2, "eval": 0.2}},
    "curation": {"agreement_threshold": 0.7, "consensus_mode": "per_label"},
    "policy": {"embed_dim": 4, "hidden_dim": 6},
    "sft": {"learning_rate": 0.5, "cosine_decay": true},
    "grpo": {"kl_mode": "exact", "averaging": "sequence", "match_mode": "strict",
             "format_weight": 0.3, "accuracy_weight": 0.7, "threads": 2},
    "eval": {"max_len": 12, "think_open_primed": false},
    "ablation": {"fractions": [0.0, 1.0], "n_seeds": 5, "rl_steps": 40}
  })");
  const auto c = PipelineConfig::from_json(j);
  REQUIRE(c.seed == 99);
  REQUIRE(c.generator.items == 48);
  REQUIRE(c.generator.options_per_mcq == 3);
  REQUIRE(c.split.sft == 0.6);
  REQUIRE(c.split.eval == 0.2);
  REQUIRE(c.curation.agreement_threshold == 0.7);
  REQUIRE(c.curation.consensus_mode == ConsensusMode::per_label);
  REQUIRE(c.embed_dim == 4);
  REQUIRE(c.hidden_dim == 6);
  REQUIRE(c.sft.learning_rate == 0.5);
  REQUIRE(c.sft.cosine_decay);
  REQUIRE(c.grpo.kl_mode == KlMode::exact);
  REQUIRE(c.grpo.averaging == AveragingMode::sequence);
  REQUIRE(c.grpo.match_mode == MatchMode::strict);
  REQUIRE(c.grpo.reward_weights.format_weight == 0.3);
  REQUIRE(c.grpo.reward_weights.accuracy_weight == 0.7);
  REQUIRE(c.grpo.threads == 2);
  REQUIRE(c.eval.max_len == 12);
  REQUIRE_FALSE(c.eval.think_open_primed);
  REQUIRE(c.ablation_fractions == std::vector<double>{0.0, 1.0});
  REQUIRE(c.ablation_n_seeds == 5);
  REQUIRE(c.ablation_rl_steps == 40);

  // untouched sections keep their defaults
  REQUIRE(c.grpo.group_size == 10);
  REQUIRE(c.sft.mix_ratio == 0.2);
}

TEST_CASE("pipeline config: unknown keys name the dotted path") {
  REQUIRE(thrown_message([] {
            PipelineConfig::from_json(Json::parse(R"({"grpo": {"grup_size": 10}})"));
          }) == "config: unknown key 'grpo.grup_size'");
  REQUIRE(thrown_message([] { PipelineConfig::from_json(Json::parse(R"({"sedd": 1})")); }) ==
          "config: unknown key 'sedd'");
  REQUIRE(thrown_message([] {
            PipelineConfig::from_json(
                Json::parse(R"({"generator": {"split": {"test": 0.1}}})"));
          }) == "config: unknown key 'generator.split.test'");
}

TEST_CASE("pipeline config: type and enum errors name the dotted path") {
  const auto type_msg = thrown_message([] {
    PipelineConfig::from_json(Json::parse(R"({"sft": {"learning_rate": "fast"}})"));
  });
  REQUIRE(type_msg.find("wrong type for 'sft.learning_rate'") != std::string::npos);

  const auto enum_msg = thrown_message([] {
    PipelineConfig::from_json(Json::parse(R"({"curation": {"consensus_mode": "majority"}})"));
  });
  REQUIRE(enum_msg.find("curation.consensus_mode") != std::string::npos);
  REQUIRE(enum_msg.find("majority") != std::string::npos);

  const auto section_msg =
      thrown_message([] { PipelineConfig::from_json(Json::parse(R"({"grpo": 3})")); });
  REQUIRE(section_msg.find("'grpo' must be a JSON object") != std::string::npos);
}

TEST_CASE("pipeline config: validate rejects bad section values") {
  auto bad = tiny_config();
  bad.generator.items = 4;
  REQUIRE_THROWS_AS(bad.validate(), std::invalid_argument);

  bad = tiny_config();
  bad.grpo.group_size = 1;
  REQUIRE_THROWS_AS(bad.validate(), std::invalid_argument);

  bad = tiny_config();
  bad.embed_dim = 0;
  REQUIRE_THROWS_AS(bad.validate(), std::invalid_argument);

  bad = tiny_config();
  bad.eval.max_len = 0;
  REQUIRE_THROWS_AS(bad.validate(), std::invalid_argument);

  bad = tiny_config();
  bad.ablation_fractions = {0.0, 0.5};
  REQUIRE_THROWS_AS(bad.validate(), std::invalid_argument);
}

TEST_CASE("hash_file is the hex seed-fold of the exact file bytes") {
  TempDir tmp;
  char expect[17];
  std::snprintf(expect, sizeof expect, "%016llx",
                static_cast<unsigned long long>(fnv1a64("foobar")));
  write_bytes(tmp.file("probe.bin"), "foobar");
  REQUIRE(hash_file(tmp.file("probe.bin")) == expect);
  write_bytes(tmp.file("probe.bin"), "foobar\n");  // any byte change moves the hash
  REQUIRE(hash_file(tmp.file("probe.bin")) != expect);
  REQUIRE_THROWS_AS(hash_file(tmp.file("absent.bin")), std::runtime_error);
}

TEST_CASE("pipeline data stages mirror the library composition byte for byte") {
  const auto cfg = tiny_config();
  TempDir staged, direct;

  stages::generate(cfg, staged.root.string());
  stages::curate(cfg, staged.root.string());
  stages::split(cfg, staged.root.string());

  // same artifacts produced straight from the in-memory composition
  const auto w = generate_dental_world(cfg.generator, cfg.seed, cfg.curation, cfg.split);
  w.meta.save(direct.file(files::kWorldMeta));
  write_items_jsonl(direct.file(files::kTruthItems), w.truth_items, w.meta.vocab);
  write_annotations_jsonl(direct.file(files::kAnnotations), w.annotations);
  write_items_jsonl(direct.file(files::kCuratedItems), w.curated, w.meta.vocab);
  detail::write_lines_atomic(direct.file(files::kCurationReport),
                             {w.curation.to_json().dump(1, '\t')});
  write_items_jsonl(direct.file(files::kSftItems), w.splits.sft, w.meta.vocab);
  write_items_jsonl(direct.file(files::kRlItems), w.splits.rl, w.meta.vocab);
  write_items_jsonl(direct.file(files::kEvalItems), w.splits.eval, w.meta.vocab);
  write_sft_jsonl(direct.file(files::kSftCorpus), w.sft_corpus, w.meta.vocab);
  write_benchmark_jsonl(direct.file(files::kRlMcq), w.mcq_corpus, w.meta.vocab);
  write_benchmark_jsonl(direct.file(files::kBenchMcq), w.bench_mcq, w.meta.vocab);
  write_benchmark_jsonl(direct.file(files::kBenchLabel), w.bench_label.items, w.meta.vocab);

  for (const char* name :
       {files::kWorldMeta, files::kTruthItems, files::kAnnotations, files::kCuratedItems,
        files::kCurationReport, files::kSftItems, files::kRlItems, files::kEvalItems,
        files::kSftCorpus, files::kRlMcq, files::kBenchMcq, files::kBenchLabel}) {
    INFO(name);
    REQUIRE(hash_file(staged.file(name)) == hash_file(direct.file(name)));
  }
}

TEST_CASE("run_pipeline: fresh same-seed runs produce identical manifests") {
  const auto cfg = tiny_config();
  TempDir a, b;
  REQUIRE(run_pipeline(cfg, a.root.string(), "dentalforge pipeline --seed 11") == 0);
  REQUIRE(run_pipeline(cfg, b.root.string()) == 0);

  const auto ma = RunManifest::load(a.file(files::kManifest));
  const auto mb = RunManifest::load(b.file(files::kManifest));
  REQUIRE(ma.corpus_hashes.size() == 18);
  REQUIRE(ma.checkpoint_hashes.size() == 3);
  REQUIRE(ma.corpus_hashes == mb.corpus_hashes);
  REQUIRE(ma.checkpoint_hashes == mb.checkpoint_hashes);
  REQUIRE(ma.master_seed == 11);
  REQUIRE(ma.command_line == "dentalforge pipeline --seed 11");
  REQUIRE(ma.config_snapshot.dump() == cfg.to_json().dump());
  REQUIRE(ma.artifact_version == kArtifactVersion);
  REQUIRE(ma.stages.size() == 7);
  for (const auto& s : ma.stages) {
    INFO(s.name);
    REQUIRE_FALSE(s.skipped);
  }
  for (const auto& [name, hash] : ma.corpus_hashes) {
    REQUIRE(std::filesystem::exists(a.root / name));
    REQUIRE(hash.size() == 16);
  }

  // a different master seed actually changes the artifacts
  auto other = cfg;
  other.seed = 12;
  TempDir c;
  REQUIRE(run_pipeline(other, c.root.string()) == 0);
  const auto mc = RunManifest::load(c.file(files::kManifest));
  REQUIRE(mc.corpus_hashes != ma.corpus_hashes);
  REQUIRE(mc.checkpoint_hashes != ma.checkpoint_hashes);
}

TEST_CASE("run_pipeline: resume reruns exactly the stages with missing outputs") {
  const auto cfg = tiny_config();
  TempDir dir;
  REQUIRE(run_pipeline(cfg, dir.root.string()) == 0);
  const auto before = RunManifest::load(dir.file(files::kManifest));

  for (const char* name : {files::kPolicyGrpo, files::kGrpoMetrics, files::kEvalMcq,
                           files::kEvalLabel, files::kStageReportTxt, files::kStageReportJson})
    std::filesystem::remove(dir.root / name);

  REQUIRE(run_pipeline(cfg, dir.root.string()) == 0);
  const auto resumed = RunManifest::load(dir.file(files::kManifest));
  REQUIRE(resumed.stages.size() == 7);
  for (const auto& s : resumed.stages) {
    INFO(s.name);
    const bool rerun = s.name == "grpo" || s.name == "eval" || s.name == "report";
    REQUIRE(s.skipped == !rerun);
  }
  REQUIRE(resumed.corpus_hashes == before.corpus_hashes);
  REQUIRE(resumed.checkpoint_hashes == before.checkpoint_hashes);

  // nothing missing: every stage is skipped and artifacts are untouched
  REQUIRE(run_pipeline(cfg, dir.root.string()) == 0);
  const auto idle = RunManifest::load(dir.file(files::kManifest));
  for (const auto& s : idle.stages) REQUIRE(s.skipped);
  REQUIRE(idle.corpus_hashes == before.corpus_hashes);
}

TEST_CASE("run_pipeline: a failing stage returns 1 and keeps earlier artifacts") {
  const auto cfg = tiny_config();
  TempDir dir;
  REQUIRE(run_pipeline(cfg, dir.root.string()) == 0);

  write_bytes(dir.file(files::kBenchMcq), "this is not json\n");
  std::filesystem::remove(dir.root / files::kEvalMcq);
  std::filesystem::remove(dir.root / files::kEvalLabel);
  REQUIRE(run_pipeline(cfg, dir.root.string()) == 1);
  REQUIRE_FALSE(std::filesystem::exists(dir.root / files::kEvalMcq));
  REQUIRE(std::filesystem::exists(dir.root / files::kPolicyGrpo));  // earlier work retained
}

TEST_CASE("manifest: save/load round-trips and rejects foreign versions") {
  TempDir tmp;
  RunManifest m;
  m.command_line = "dentalforge pipeline";
  m.config_snapshot = tiny_config().to_json();
  m.master_seed = 7;
  m.corpus_hashes = {{"a.jsonl", "0123456789abcdef"}};
  m.checkpoint_hashes = {{"p.json", "fedcba9876543210"}};
  m.wall_clock_seconds = 1.5;
  m.stages = {{"generate", 0.25, false}, {"curate", 0.0, true}};
  m.save(tmp.file("manifest.json"));

  const auto loaded = RunManifest::load(tmp.file("manifest.json"));
  REQUIRE(loaded.to_json().dump() == m.to_json().dump());
  REQUIRE(loaded.stages[1].skipped);

  auto j = m.to_json();
  j["artifact_version"] = "dentalforge-run-v0";
  detail::write_lines_atomic(tmp.file("old.json"), {j.dump()});
  REQUIRE_THROWS_AS(RunManifest::load(tmp.file("old.json")), std::runtime_error);
}
