#include <catch2/catch_amalgamated.hpp>

#include <sys/wait.h>
#include <unistd.h>

#include <cstdlib>
#include <filesystem>
#include <fstream>
#include <sstream>
#include <string>
#include <vector>

#include "dentalforge/pipeline.hpp"
#include "dentalforge/rewards.hpp"

#ifndef DENTALFORGE_CLI_PATH
#error "DENTALFORGE_CLI_PATH must point at the built CLI"
#endif

using namespace dentalforge;

namespace {

struct TempDir {
  std::filesystem::path root;
  TempDir() {
    static int counter = 0;
    root = std::filesystem::temp_directory_path() /
           ("dentalforge-cli-" + std::to_string(::getpid()) + "-" + std::to_string(counter++));
    std::filesystem::create_directories(root);
  }
  ~TempDir() {
    std::error_code ec;
    std::filesystem::remove_all(root, ec);
  }
  std::string file(const std::string& name) const { return (root / name).string(); }
};

struct CmdResult {
  int exit_code = -1;
  std::string out;
  std::string err;
};

// Runs the CLI through /bin/sh with stdout/stderr captured to scratch files.
CmdResult run_cli(const std::string& args, const TempDir& scratch,
                  const std::string& env_prefix = "") {
  const std::string out_path = scratch.file("cmd_stdout.txt");
  const std::string err_path = scratch.file("cmd_stderr.txt");
  const std::string cmd = env_prefix + DENTALFORGE_CLI_PATH " " + args + " > " + out_path +
                          " 2> " + err_path;
  const int status = std::system(cmd.c_str());
  REQUIRE(status != -1);
  CmdResult r;
  r.exit_code = WIFEXITED(status) ? WEXITSTATUS(status) : -1;
  auto slurp = [](const std::string& path) {
    std::ifstream in(path, std::ios::binary);
    std::ostringstream ss;
    ss << in.rdbuf();
    return ss.str();
  };
  r.out = slurp(out_path);
  r.err = slurp(err_path);
  return r;
}

const char* kTinyConfig = R"({
  "seed": 11,
  "generator": {"conditions": 2, "evidence_per_condition": 2, "items": 36,
                "general_records": 8, "options_per_mcq": 2, "min_consensus_eval": 4},
  "policy": {"embed_dim": 8, "hidden_dim": 16},
  "sft": {"epochs": 1, "batch_size": 16, "learning_rate": 0.01},
  "grpo": {"group_size": 2, "groups_per_batch": 2, "epochs": 1, "max_steps": 2,
           "max_response_len": 8},
  "eval": {"max_len": 8},
  "ablation": {"fractions": [0.0, 1.0], "n_seeds": 1, "rl_steps": 3}
})";

std::string write_tiny_config(const TempDir& tmp) {
  const auto path = tmp.file("config.json");
  std::ofstream(path, std::ios::binary) << kTinyConfig;
  return path;
}

std::vector<std::string> lines_of(const std::string& text) {
  std::vector<std::string> lines;
  std::istringstream in(text);
  std::string line;
  while (std::getline(in, line)) lines.push_back(line);
  return lines;
}

}  // namespace

TEST_CASE("cli: --help exits 0 and lists every subcommand") {
  TempDir tmp;
  const auto r = run_cli("--help", tmp);
  REQUIRE(r.exit_code == 0);
  for (const char* name : {"generate", "curate", "split", "sft", "grpo", "eval", "score",
                           "balance", "ablate", "report", "pipeline"})
    REQUIRE(r.out.find(name) != std::string::npos);
}

TEST_CASE("cli: usage errors exit 2") {
  TempDir tmp;
  REQUIRE(run_cli("frobnicate", tmp).exit_code == 2);            // unknown subcommand
  REQUIRE(run_cli("", tmp).exit_code == 2);                      // missing subcommand
  REQUIRE(run_cli("generate", tmp).exit_code == 2);              // missing required --dir
  REQUIRE(run_cli("score --file x.txt", tmp).exit_code == 2);    // missing required --key
  REQUIRE(run_cli("eval", tmp).exit_code == 2);                  // neither --dir nor --ckpt
  const auto bad_env =
      run_cli("generate --dir " + tmp.file("d"), tmp, "DENTALFORGE_SEED=oops ");
  REQUIRE(bad_env.exit_code == 2);
  REQUIRE(bad_env.err.find("DENTALFORGE_SEED") != std::string::npos);
}

TEST_CASE("cli: runtime failures exit 1 with a message") {
  TempDir tmp;
  const auto r = run_cli("curate --dir " + tmp.file("empty"), tmp);
  REQUIRE(r.exit_code == 1);
  REQUIRE(r.err.find("dentalforge:") != std::string::npos);

  const auto bad_cfg = run_cli("generate --config /nonexistent.json --dir " + tmp.file("d"), tmp);
  REQUIRE(bad_cfg.exit_code == 1);
}

TEST_CASE("cli: score prints one result line per input line") {
  TempDir tmp;
  std::ofstream(tmp.file("resp.txt"), std::ios::binary)
      << "<think> w </think><answer>B</answer>\n"
      << "no template at all\n"
      << "<think> x </think><answer> a. </answer>\n";
  const auto r = run_cli("score --file " + tmp.file("resp.txt") + " --key B --options 2", tmp);
  REQUIRE(r.exit_code == 0);
  const auto lines = lines_of(r.out);
  REQUIRE(lines.size() == 3);

  // each line must agree with the library scorer
  const char* texts[] = {"<think> w </think><answer>B</answer>", "no template at all",
                         "<think> x </think><answer> a. </answer>"};
  for (int i = 0; i < 3; ++i) {
    const auto s = score_response(texts[i], "B", {}, 2);
    char expect[96];
    std::snprintf(expect, sizeof expect, "format=%d accuracy=%d reward=%g", s.format_reward,
                  s.accuracy_reward, s.reward);
    REQUIRE(lines[static_cast<std::size_t>(i)] == expect);
  }
}

TEST_CASE("cli: stage subcommands reproduce run_pipeline byte for byte") {
  TempDir tmp;
  const auto cfg_path = write_tiny_config(tmp);
  const auto stage_dir = tmp.file("staged");

  for (const char* stage : {"generate", "curate", "split", "sft", "grpo", "eval", "report"}) {
    const auto r =
        run_cli(std::string(stage) + " --config " + cfg_path + " --dir " + stage_dir, tmp);
    INFO(stage << ": " << r.err);
    REQUIRE(r.exit_code == 0);
  }

  const auto lib_dir = tmp.file("library");
  const auto cfg = PipelineConfig::load(cfg_path);
  REQUIRE(run_pipeline(cfg, lib_dir) == 0);
  const auto manifest = RunManifest::load(lib_dir + "/" + files::kManifest);
  for (const auto& [name, hash] : manifest.corpus_hashes) {
    INFO(name);
    REQUIRE(hash_file(stage_dir + "/" + name) == hash);
  }
  for (const auto& [name, hash] : manifest.checkpoint_hashes) {
    INFO(name);
    REQUIRE(hash_file(stage_dir + "/" + name) == hash);
  }

  // the pipeline subcommand agrees too and reports its stages
  const auto pipe_dir = tmp.file("piped");
  const auto r = run_cli("pipeline --config " + cfg_path + " --dir " + pipe_dir, tmp);
  REQUIRE(r.exit_code == 0);
  REQUIRE(r.out.find("manifest:") != std::string::npos);
  const auto piped = RunManifest::load(pipe_dir + "/" + files::kManifest);
  REQUIRE(piped.corpus_hashes == manifest.corpus_hashes);
  REQUIRE(piped.checkpoint_hashes == manifest.checkpoint_hashes);
  REQUIRE(piped.command_line.find("pipeline --config") != std::string::npos);
}

TEST_CASE("cli: seed precedence is flag > environment > config") {
  TempDir tmp;
  const auto cfg_path = write_tiny_config(tmp);  // config seed 11
  auto truth = [&](const std::string& dir) { return hash_file(dir + "/truth_items.jsonl"); };

  const std::string base = tmp.file("base"), flagged = tmp.file("flagged"),
                    env_run = tmp.file("env_run"), both = tmp.file("both");
  REQUIRE(run_cli("generate --config " + cfg_path + " --dir " + base, tmp).exit_code == 0);
  REQUIRE(run_cli("generate --config " + cfg_path + " --dir " + flagged + " --seed 42", tmp)
              .exit_code == 0);
  REQUIRE(run_cli("generate --config " + cfg_path + " --dir " + env_run, tmp,
                  "DENTALFORGE_SEED=42 ")
              .exit_code == 0);
  REQUIRE(run_cli("generate --config " + cfg_path + " --dir " + both + " --seed 42", tmp,
                  "DENTALFORGE_SEED=7 ")
              .exit_code == 0);

  REQUIRE(truth(flagged) != truth(base));       // flag overrides config
  REQUIRE(truth(env_run) == truth(flagged));    // env overrides config the same way
  REQUIRE(truth(both) == truth(flagged));       // flag beats env
}

TEST_CASE("cli: standalone eval writes the result JSON it prints") {
  TempDir tmp;
  const auto cfg_path = write_tiny_config(tmp);
  const auto dir = tmp.file("run");
  REQUIRE(run_cli("pipeline --config " + cfg_path + " --dir " + dir, tmp).exit_code == 0);

  const auto out_json = tmp.file("result.json");
  const auto r = run_cli("eval --ckpt " + dir + "/policy_grpo.json --bench " + dir +
                             "/bench_mcq.jsonl --meta " + dir +
                             "/world_meta.json --name held_out --out " + out_json,
                         tmp);
  REQUIRE(r.exit_code == 0);
  REQUIRE(r.out.find("benchmark held_out: accuracy") != std::string::npos);

  std::ifstream in(out_json);
  REQUIRE(in.good());
  Json j;
  in >> j;
  REQUIRE(j.at("benchmark") == "held_out");
  const auto meta = WorldMeta::load(dir + "/world_meta.json");
  const auto items = read_benchmark_jsonl(dir + "/bench_mcq.jsonl", meta.vocab);
  REQUIRE(j.at("n_items").get<long>() == static_cast<long>(items.size()));
}

TEST_CASE("cli: balance rewrites a benchmark and reports ratios") {
  TempDir tmp;
  const auto cfg_path = write_tiny_config(tmp);
  const auto dir = tmp.file("run");
  for (const char* stage : {"generate", "curate", "split"})
    REQUIRE(run_cli(std::string(stage) + " --config " + cfg_path + " --dir " + dir, tmp)
                .exit_code == 0);

  const auto out = tmp.file("rebalanced.jsonl");
  const auto r = run_cli("balance --in " + dir + "/bench_label.jsonl --out " + out + " --meta " +
                             dir + "/world_meta.json",
                         tmp);
  REQUIRE(r.exit_code == 0);
  REQUIRE(r.out.find("balance:") != std::string::npos);

  // already balanced input passes through unchanged
  const auto meta = WorldMeta::load(dir + "/world_meta.json");
  const auto before = read_benchmark_jsonl(dir + "/bench_label.jsonl", meta.vocab);
  const auto after = read_benchmark_jsonl(out, meta.vocab);
  REQUIRE(after.size() == before.size());
}

TEST_CASE("cli: ablate runs the arms and writes report plus CSVs") {
  TempDir tmp;
  const auto cfg_path = write_tiny_config(tmp);
  const auto dir = tmp.file("run");
  for (const char* stage : {"generate", "curate", "split"})
    REQUIRE(run_cli(std::string(stage) + " --config " + cfg_path + " --dir " + dir, tmp)
                .exit_code == 0);

  const auto out = tmp.file("ablation");
  const auto r =
      run_cli("ablate --config " + cfg_path + " --dir " + dir + " --out " + out, tmp);
  INFO(r.err);
  REQUIRE(r.exit_code == 0);
  REQUIRE(r.out.find("stage-I scaling ablation") != std::string::npos);
  REQUIRE(std::filesystem::exists(out + "/ablation_report.txt"));
  REQUIRE(std::filesystem::exists(out + "/ablation_arm_0.csv"));
  REQUIRE(std::filesystem::exists(out + "/ablation_arm_100.csv"));
}
