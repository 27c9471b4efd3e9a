// dentalforge CLI: every pipeline stage as a subcommand, plus corpus
// utilities (balance, score) and the ablation runner. Exit codes: 0 success,
// 2 usage errors, 1 runtime failures.

#include <CLI11.hpp>

#include <cerrno>
#include <cstdint>
#include <cstdio>
#include <cstdlib>
#include <filesystem>
#include <fstream>
#include <stdexcept>
#include <string>

#include "dentalforge/pipeline.hpp"

namespace {

using namespace dentalforge;

// operator misuse that surfaces after flag parsing (bad env values,
// inconsistent flag combinations) — reported like a parse error
struct usage_error : std::runtime_error {
  using std::runtime_error::runtime_error;
};

struct StageOpts {
  std::string config;
  std::string dir;
  std::uint64_t seed = 0;
  CLI::Option* seed_opt = nullptr;
};

void attach_stage_opts(CLI::App* cmd, StageOpts& o, bool dir_required = true) {
  cmd->add_option("--config", o.config, "pipeline config JSON; defaults when omitted");
  auto* dir = cmd->add_option("--dir", o.dir, "run directory");
  if (dir_required) dir->required();
  o.seed_opt = cmd->add_option("--seed", o.seed, "master seed (overrides env and config)");
}

// precedence: --seed flag > DENTALFORGE_SEED env > config file > default 0
PipelineConfig make_config(const StageOpts& o) {
  PipelineConfig cfg = o.config.empty() ? PipelineConfig{} : PipelineConfig::load(o.config);
  if (const char* env = std::getenv("DENTALFORGE_SEED")) {
    char* end = nullptr;
    errno = 0;
    const unsigned long long v = std::strtoull(env, &end, 10);
    if (errno != 0 || end == env || *end != '\0')
      throw usage_error("DENTALFORGE_SEED is not an unsigned integer: '" + std::string(env) +
                        "'");
    cfg.seed = v;
  }
  if (o.seed_opt != nullptr && o.seed_opt->count() > 0) cfg.seed = o.seed;
  cfg.validate();
  return cfg;
}

std::string read_text_file(const std::string& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw std::runtime_error("cannot open '" + path + "'");
  std::ostringstream ss;
  ss << in.rdbuf();
  return ss.str();
}

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"dentalforge: synthetic dental-world corpus, two-stage training, evaluation"};
  app.require_subcommand(1);
  int rc = 0;

  std::string command_line;
  for (int i = 0; i < argc; ++i) {
    if (i > 0) command_line += ' ';
    command_line += argv[i];
  }

  // --- data stages ---------------------------------------------------------
  StageOpts gen_o;
  auto* gen = app.add_subcommand("generate", "Generate the raw world: truth + annotations");
  attach_stage_opts(gen, gen_o);
  gen->callback([&] {
    const auto cfg = make_config(gen_o);
    std::filesystem::create_directories(gen_o.dir);
    stages::generate(cfg, gen_o.dir);
    std::printf("generate: %s %s %s -> %s\n", files::kWorldMeta, files::kTruthItems,
                files::kAnnotations, gen_o.dir.c_str());
  });

  StageOpts cur_o;
  auto* cur = app.add_subcommand("curate", "Agreement-filter annotations into curated labels");
  attach_stage_opts(cur, cur_o);
  cur->callback([&] {
    const auto cfg = make_config(cur_o);
    stages::curate(cfg, cur_o.dir);
    const auto report = detail::read_json_file(
        (std::filesystem::path(cur_o.dir) / files::kCurationReport).string());
    std::printf("curate: %ld items in, %ld curated, %ld dropped\n",
                report.at("items_in").get<long>(), report.at("items_curated").get<long>(),
                report.at("items_dropped").get<long>());
  });

  StageOpts spl_o;
  auto* spl = app.add_subcommand("split", "Split curated items and build all corpora");
  attach_stage_opts(spl, spl_o);
  spl->callback([&] {
    const auto cfg = make_config(spl_o);
    stages::split(cfg, spl_o.dir);
    std::printf("split: %s %s %s %s -> %s\n", files::kSftCorpus, files::kRlMcq, files::kBenchMcq,
                files::kBenchLabel, spl_o.dir.c_str());
  });

  // --- training stages -----------------------------------------------------
  StageOpts sft_o;
  auto* sft_cmd = app.add_subcommand("sft", "Stage-I supervised fine-tuning from a fresh init");
  attach_stage_opts(sft_cmd, sft_o);
  sft_cmd->callback([&] {
    const auto cfg = make_config(sft_o);
    stages::sft(cfg, sft_o.dir);
    std::printf("sft: %s %s %s -> %s\n", files::kBackbone, files::kPolicySft, files::kSftMetrics,
                sft_o.dir.c_str());
  });

  StageOpts grpo_o;
  auto* grpo_cmd = app.add_subcommand("grpo", "Stage-II group-relative policy optimization");
  attach_stage_opts(grpo_cmd, grpo_o);
  grpo_cmd->callback([&] {
    const auto cfg = make_config(grpo_o);
    stages::grpo(cfg, grpo_o.dir);
    std::printf("grpo: %s %s -> %s\n", files::kPolicyGrpo, files::kGrpoMetrics,
                grpo_o.dir.c_str());
  });

  // --- evaluation ----------------------------------------------------------
  StageOpts eval_o;
  std::string eval_ckpt, eval_bench, eval_meta, eval_name = "benchmark", eval_out;
  auto* eval_cmd =
      app.add_subcommand("eval", "Evaluate a checkpoint (run directory or explicit files)");
  attach_stage_opts(eval_cmd, eval_o, /*dir_required=*/false);
  eval_cmd->add_option("--ckpt", eval_ckpt, "policy checkpoint (standalone mode)");
  eval_cmd->add_option("--bench", eval_bench, "benchmark JSONL (standalone mode)");
  eval_cmd->add_option("--meta", eval_meta, "world meta JSON (standalone mode)");
  eval_cmd->add_option("--name", eval_name, "benchmark name in the result");
  eval_cmd->add_option("--out", eval_out, "write the full result JSON here");
  eval_cmd->callback([&] {
    const auto cfg = make_config(eval_o);
    if (!eval_ckpt.empty()) {
      if (eval_bench.empty() || eval_meta.empty())
        throw usage_error("eval: --ckpt needs --bench and --meta");
      const auto meta = WorldMeta::load(eval_meta);
      const auto items = read_benchmark_jsonl(eval_bench, meta.vocab);
      const auto res =
          eval_benchmark(load_checkpoint(eval_ckpt), items, cfg.eval, eval_name);
      if (!eval_out.empty()) detail::write_json_file(eval_out, res.to_json());
      std::printf("%s\n", res.to_text().c_str());
      return;
    }
    if (eval_o.dir.empty()) throw usage_error("eval: pass --dir or --ckpt/--bench/--meta");
    stages::evaluate(cfg, eval_o.dir);
    for (const char* name : {files::kEvalMcq, files::kEvalLabel}) {
      const auto j =
          detail::read_json_file((std::filesystem::path(eval_o.dir) / name).string());
      std::printf("benchmark %s: accuracy %.4f (%ld/%ld)\n",
                  j.at("benchmark").get<std::string>().c_str(), j.at("accuracy").get<double>(),
                  j.at("n_correct").get<long>(), j.at("n_items").get<long>());
    }
  });

  StageOpts rep_o;
  auto* rep = app.add_subcommand("report", "Backbone vs +stageI vs +stageI+II on the benchmarks");
  attach_stage_opts(rep, rep_o);
  rep->callback([&] {
    const auto cfg = make_config(rep_o);
    stages::report(cfg, rep_o.dir);
    std::printf("%s", read_text_file(
                          (std::filesystem::path(rep_o.dir) / files::kStageReportTxt).string())
                          .c_str());
  });

  // --- utilities -----------------------------------------------------------
  std::string score_file, score_key, score_match = "lenient";
  int score_options = 4;
  RewardWeights score_weights;
  auto* score_cmd = app.add_subcommand("score", "Composite-reward score for response texts");
  score_cmd->add_option("--file", score_file, "text file, one response per line")->required();
  score_cmd->add_option("--key", score_key, "answer key letter")->required();
  score_cmd->add_option("--options", score_options, "number of MCQ options");
  score_cmd->add_option("--format-weight", score_weights.format_weight, "format reward weight");
  score_cmd->add_option("--accuracy-weight", score_weights.accuracy_weight,
                        "accuracy reward weight");
  score_cmd->add_option("--match", score_match, "answer matching mode")
      ->check(CLI::IsMember({"lenient", "strict"}));
  score_cmd->callback([&] {
    std::ifstream in(score_file, std::ios::binary);
    if (!in) throw std::runtime_error("score: cannot open '" + score_file + "'");
    const auto mode = score_match == "strict" ? MatchMode::strict : MatchMode::lenient;
    std::string line;
    while (std::getline(in, line)) {
      const auto s = score_response(line, score_key, score_weights, score_options, mode);
      std::printf("format=%d accuracy=%d reward=%g\n", s.format_reward, s.accuracy_reward,
                  s.reward);
    }
  });

  std::string bal_in, bal_out, bal_meta;
  double bal_tolerance = 0.02;
  std::uint64_t bal_seed = 0;
  auto* bal = app.add_subcommand("balance", "Balance a label-query benchmark to 0.5 per label");
  bal->add_option("--in", bal_in, "benchmark JSONL to balance")->required();
  bal->add_option("--out", bal_out, "balanced benchmark JSONL")->required();
  bal->add_option("--meta", bal_meta, "world meta JSON")->required();
  bal->add_option("--tolerance", bal_tolerance, "allowed deviation from 0.5");
  bal->add_option("--seed", bal_seed, "accepted for symmetry; balancing is deterministic");
  bal->callback([&] {
    const auto meta = WorldMeta::load(bal_meta);
    const auto items = read_benchmark_jsonl(bal_in, meta.vocab);
    const auto res = balance_benchmark(items, bal_tolerance, bal_seed);
    write_benchmark_jsonl(bal_out, res.items, meta.vocab);
    std::printf("balance: %zu -> %zu items\n", items.size(), res.items.size());
    for (const auto& [label, ratio] : res.final_ratios)
      std::printf("  %-16s positive ratio %.4f\n", label.c_str(), ratio);
    for (const auto& label : res.unbalanceable)
      std::printf("  %-16s unbalanceable (single polarity)\n", label.c_str());
  });

  StageOpts abl_o;
  std::string abl_out;
  auto* abl = app.add_subcommand("ablate", "Stage-I data-scaling ablation over the RL budget");
  attach_stage_opts(abl, abl_o);
  abl->add_option("--out", abl_out, "report/CSV directory (default: --dir)");
  abl->callback([&] {
    const auto cfg = make_config(abl_o);
    const auto dir = std::filesystem::path(abl_o.dir);
    const auto meta = WorldMeta::load((dir / files::kWorldMeta).string());
    const auto corpus = read_sft_jsonl((dir / files::kSftCorpus).string(), meta.vocab);
    const auto rl_items = read_benchmark_jsonl((dir / files::kRlMcq).string(), meta.vocab);
    const auto out_dir = abl_out.empty() ? abl_o.dir : abl_out;
    std::filesystem::create_directories(out_dir);
    const auto report =
        run_ablation(cfg.ablation_config(), meta.vocab, corpus, rl_items, out_dir);
    std::printf("%s\n", report.to_text().c_str());
  });

  // --- full run ------------------------------------------------------------
  StageOpts pipe_o;
  auto* pipe = app.add_subcommand("pipeline", "All stages in order, resumable, with a manifest");
  attach_stage_opts(pipe, pipe_o);
  pipe->callback([&] {
    const auto cfg = make_config(pipe_o);
    rc = run_pipeline(cfg, pipe_o.dir, command_line);
    if (rc != 0) return;
    const auto manifest =
        RunManifest::load((std::filesystem::path(pipe_o.dir) / files::kManifest).string());
    for (const auto& s : manifest.stages) {
      if (s.skipped)
        std::printf("stage %-8s skipped (outputs present)\n", s.name.c_str());
      else
        std::printf("stage %-8s %.2fs\n", s.name.c_str(), s.seconds);
    }
    std::printf("manifest: %s\n",
                (std::filesystem::path(pipe_o.dir) / files::kManifest).string().c_str());
  });

  try {
    app.parse(argc, argv);
  } catch (const CLI::CallForHelp& e) {
    return app.exit(e);
  } catch (const CLI::CallForAllHelp& e) {
    return app.exit(e);
  } catch (const CLI::ParseError& e) {
    app.exit(e);
    return 2;
  } catch (const usage_error& e) {
    std::fprintf(stderr, "dentalforge: %s\n", e.what());
    return 2;
  } catch (const std::exception& e) {
    std::fprintf(stderr, "dentalforge: %s\n", e.what());
    return 1;
  }
  return rc;
}
