#include <catch2/catch_amalgamated.hpp>

#include <cstdio>
#include <filesystem>
#include <fstream>

#include "dentalforge/policy.hpp"

using namespace dentalforge;
using Catch::Matchers::WithinAbs;

namespace {

Vocab test_vocab() {
  return Vocab::with_extra(std::vector<std::string>{"tooth", "gum", "pain", "decay", "which"});
}

PolicyParams small_policy(std::uint64_t seed = 1) { return init_policy(test_vocab(), 4, 6, seed); }

}  // namespace

// ---------------------------------------------------------------------------
// Vocab

TEST_CASE("reserved control tokens occupy fixed indices") {
  Vocab v;
  REQUIRE(Vocab::kPad == 0);
  REQUIRE(Vocab::kBos == 1);
  REQUIRE(Vocab::kEos == 2);
  REQUIRE(Vocab::kThinkOpen == 3);
  REQUIRE(Vocab::kThinkClose == 4);
  REQUIRE(Vocab::kAnswerOpen == 5);
  REQUIRE(Vocab::kAnswerClose == 6);
  REQUIRE(Vocab::kOptionA == 7);
  REQUIRE(Vocab::kReservedCount == 11);
  REQUIRE(v.token(0) == "<pad>");
  REQUIRE(v.token(3) == "<think>");
  REQUIRE(v.token(4) == "</think>");
  REQUIRE(v.token(5) == "<answer>");
  REQUIRE(v.token(6) == "</answer>");
  REQUIRE(v.token(7) == "A");
  REQUIRE(v.token(10) == "D");
  REQUIRE(v.size() == Vocab::kReservedCount);
}

TEST_CASE("Vocab::with_extra appends domain tokens after the reserved block") {
  Vocab v = test_vocab();
  REQUIRE(v.size() == Vocab::kReservedCount + 5);
  REQUIRE(v.id("tooth") == Vocab::kReservedCount);
  REQUIRE(v.token(v.id("pain")) == "pain");
  REQUIRE(v.contains("decay"));
  REQUIRE_FALSE(v.contains("molar"));
  REQUIRE_THROWS_AS(v.id("molar"), std::out_of_range);
  REQUIRE_THROWS_AS(v.token(99), std::out_of_range);
}

TEST_CASE("Vocab rejects duplicates and reserved-prefix violations") {
  REQUIRE_THROWS_AS(Vocab::with_extra(std::vector<std::string>{"x", "x"}),
                    std::invalid_argument);
  REQUIRE_THROWS_AS(Vocab::with_extra(std::vector<std::string>{"<eos>"}),
                    std::invalid_argument);
  std::vector<std::string> bad = {"<pad>", "<bos>"};
  REQUIRE_THROWS_AS(Vocab::from_tokens(bad), std::invalid_argument);
  auto swapped = Vocab::reserved_tokens();
  std::swap(swapped[3], swapped[4]);
  REQUIRE_THROWS_AS(Vocab::from_tokens(swapped), std::invalid_argument);
  REQUIRE(Vocab::from_tokens(Vocab::reserved_tokens()).size() == Vocab::kReservedCount);
}

TEST_CASE("tokenize/detokenize round trip and rendering rules") {
  Vocab v = test_vocab();
  std::vector<std::string> words = {"tooth", "pain", "which"};
  TokenSeq ids = v.tokenize(words);
  REQUIRE(ids.size() == 3);
  REQUIRE(v.detokenize(ids) == "tooth pain which");

  // PAD and BOS are dropped; EOS terminates without being rendered
  TokenSeq decorated = {Vocab::kBos, v.id("gum"), Vocab::kPad, v.id("pain"),
                        Vocab::kEos, v.id("decay")};
  REQUIRE(v.detokenize(decorated) == "gum pain");

  TokenSeq tags = {Vocab::kThinkOpen, v.id("pain"), Vocab::kThinkClose, Vocab::kAnswerOpen,
                   Vocab::kOptionA, Vocab::kAnswerClose};
  REQUIRE(v.detokenize(tags) == "<think> pain </think> <answer> A </answer>");

  std::vector<std::string> unknown = {"molar"};
  REQUIRE_THROWS_AS(v.tokenize(unknown), std::out_of_range);
}

// ---------------------------------------------------------------------------
// init / forward

TEST_CASE("init_policy shapes, bounds, determinism") {
  Vocab v = test_vocab();
  PolicyParams p = init_policy(v, 4, 6, 7);
  REQUIRE(p.vocab_size() == v.size());
  REQUIRE(p.tensors.at("E").rows == static_cast<std::size_t>(v.size()));
  REQUIRE(p.tensors.at("E").cols == 4);
  REQUIRE(p.tensors.at("W1").rows == 6);
  REQUIRE(p.tensors.at("W1").cols == 12);
  REQUIRE(p.tensors.at("b1").rows == 6);
  REQUIRE(p.tensors.at("W2").rows == static_cast<std::size_t>(v.size()));
  REQUIRE(p.tensors.at("W2").cols == 6);
  REQUIRE(p.tensors.at("b2").rows == static_cast<std::size_t>(v.size()));

  for (const auto& [_, t] : p.tensors)
    for (double x : t.data) {
      REQUIRE(x >= -0.08);
      REQUIRE(x <= 0.08);
    }

  PolicyParams q = init_policy(v, 4, 6, 7);
  REQUIRE(p.tensors.at("E").data == q.tensors.at("E").data);
  PolicyParams r = init_policy(v, 4, 6, 8);
  REQUIRE(p.tensors.at("E").data != r.tensors.at("E").data);

  REQUIRE_THROWS_AS(init_policy(v, 0, 6, 7), std::invalid_argument);
}

TEST_CASE("forward_logits masks PAD and validates inputs") {
  PolicyParams p = small_policy();
  TokenSeq prompt = {p.vocab.id("tooth"), p.vocab.id("pain"), p.vocab.id("which")};
  auto z = forward_logits(p, prompt, {});
  REQUIRE(z.size() == static_cast<std::size_t>(p.vocab_size()));
  REQUIRE(z[Vocab::kPad] == -1e9);
  for (std::size_t i = 1; i < z.size(); ++i) REQUIRE(std::abs(z[i]) < 10.0);

  // feeding generated context changes the distribution
  auto z2 = forward_logits(p, prompt, {Vocab::kThinkOpen, p.vocab.id("gum")});
  REQUIRE(z != z2);

  REQUIRE_THROWS_AS(forward_logits(p, {}, {}), std::invalid_argument);
  TokenSeq bad = {static_cast<TokenId>(p.vocab_size())};
  REQUIRE_THROWS_AS(forward_logits(p, bad, {}), std::invalid_argument);
  REQUIRE_THROWS_AS(forward_logits(p, prompt, bad), std::invalid_argument);
}

// ---------------------------------------------------------------------------
// sampling / decoding

TEST_CASE("sample_response invariants") {
  PolicyParams p = small_policy(3);
  TokenSeq prompt = {p.vocab.id("gum"), p.vocab.id("which")};
  for (std::uint64_t seed = 0; seed < 40; ++seed) {
    Rng rng(derive_seed(42, seed));
    Response r = sample_response(p, prompt, 12, 1.0, rng);
    REQUIRE(r.tokens.size() == r.logprobs.size());
    REQUIRE(!r.tokens.empty());
    REQUIRE(r.tokens.size() <= 12);
    for (std::size_t i = 0; i < r.tokens.size(); ++i) {
      REQUIRE(r.tokens[i] != Vocab::kPad);  // masked logit keeps PAD unreachable
      REQUIRE(r.logprobs[i] <= 0.0);
      if (r.tokens[i] == Vocab::kEos) REQUIRE(i + 1 == r.tokens.size());
    }
  }
}

TEST_CASE("sample_response is deterministic per seed and respects the primer") {
  PolicyParams p = small_policy(4);
  TokenSeq prompt = {p.vocab.id("tooth")};
  Rng r1(555), r2(555);
  Response a = sample_response(p, prompt, 10, 1.0, r1);
  Response b = sample_response(p, prompt, 10, 1.0, r2);
  REQUIRE(a.tokens == b.tokens);
  REQUIRE(a.logprobs == b.logprobs);

  // a primer shifts the conditional distribution but never shows up in tokens
  Rng r3(555);
  TokenSeq primer = {Vocab::kThinkOpen};
  Response c = sample_response(p, prompt, 10, 1.0, r3, primer);
  REQUIRE(c.tokens.size() <= 10);

  REQUIRE_THROWS_AS(sample_response(p, prompt, 0, 1.0, r1), std::invalid_argument);
  REQUIRE_THROWS_AS(sample_response(p, prompt, 5, 0.0, r1), std::invalid_argument);
  REQUIRE_THROWS_AS(sample_response(p, prompt, 5, -1.0, r1), std::invalid_argument);
}

TEST_CASE("temperature reshapes sampling but not the recorded logprobs") {
  PolicyParams p = small_policy(5);
  TokenSeq prompt = {p.vocab.id("decay"), p.vocab.id("which")};
  // near-greedy temperature concentrates: responses across seeds mostly agree
  Rng cold1(1), cold2(2);
  Response a = sample_response(p, prompt, 6, 1e-3, cold1);
  Response b = sample_response(p, prompt, 6, 1e-3, cold2);
  Response g = greedy_decode(p, prompt, 6);
  REQUIRE(a.tokens == g.tokens);
  REQUIRE(b.tokens == g.tokens);
  // recorded logprobs are temperature-1 quantities: they match teacher forcing
  auto lp = sequence_logprobs(p, prompt, a.tokens);
  REQUIRE(lp == a.logprobs);
}

TEST_CASE("greedy_decode is deterministic and consistent with teacher forcing") {
  PolicyParams p = small_policy(6);
  TokenSeq prompt = {p.vocab.id("pain")};
  Response g1 = greedy_decode(p, prompt, 8);
  Response g2 = greedy_decode(p, prompt, 8);
  REQUIRE(g1.tokens == g2.tokens);
  REQUIRE(g1.logprobs == g2.logprobs);
  auto lp = sequence_logprobs(p, prompt, g1.tokens);
  REQUIRE(lp == g1.logprobs);
}

TEST_CASE("sequence_logprobs matches sampled logprobs bit for bit") {
  PolicyParams p = small_policy(7);
  TokenSeq prompt = {p.vocab.id("gum"), p.vocab.id("tooth")};
  TokenSeq primer = {Vocab::kThinkOpen};
  for (std::uint64_t seed = 0; seed < 20; ++seed) {
    Rng rng(derive_seed(7, seed));
    Response r = sample_response(p, prompt, 9, 1.0, rng, primer);
    auto lp = sequence_logprobs(p, prompt, r.tokens, primer);
    REQUIRE(lp == r.logprobs);
  }
  TokenSeq with_pad = {Vocab::kPad};
  REQUIRE_THROWS_AS(sequence_logprobs(p, prompt, with_pad), std::invalid_argument);
}

// ---------------------------------------------------------------------------
// gradients

TEST_CASE("weighted_logprob_gradient passes a finite-difference check") {
  PolicyParams p = small_policy(8);
  TokenSeq prompt = {p.vocab.id("tooth"), p.vocab.id("which")};
  TokenSeq primer = {Vocab::kThinkOpen};
  Rng rng(31);
  Response r = sample_response(p, prompt, 8, 1.0, rng, primer);
  std::vector<double> weights(r.tokens.size());
  Rng wrng(32);
  for (double& w : weights) w = wrng.uniform(-2.0, 2.0);

  auto grads = weighted_logprob_gradient(p, prompt, r.tokens, weights, primer);
  auto loss = [&] {
    auto lp = sequence_logprobs(p, prompt, r.tokens, primer);
    double acc = 0.0;
    for (std::size_t i = 0; i < lp.size(); ++i) acc += weights[i] * lp[i];
    return acc;
  };
  double err = finite_difference_check(loss, p.tensors, grads, 1e-5, 17);
  REQUIRE(err < 1e-6);
}

TEST_CASE("weighted_logprob_gradient without primer also checks out") {
  PolicyParams p = small_policy(9);
  TokenSeq prompt = {p.vocab.id("decay")};
  Rng rng(41);
  Response r = sample_response(p, prompt, 6, 1.0, rng);
  std::vector<double> weights(r.tokens.size(), 1.0);
  auto grads = weighted_logprob_gradient(p, prompt, r.tokens, weights);
  auto loss = [&] {
    auto lp = sequence_logprobs(p, prompt, r.tokens);
    double acc = 0.0;
    for (double v : lp) acc += v;
    return acc;
  };
  double err = finite_difference_check(loss, p.tensors, grads, 1e-5, 18);
  REQUIRE(err < 1e-6);

  std::vector<double> short_weights(1, 1.0);
  if (r.tokens.size() > 1)
    REQUIRE_THROWS_AS(weighted_logprob_gradient(p, prompt, r.tokens, short_weights),
                      std::invalid_argument);
}

TEST_CASE("snapshot_reference is a deep copy") {
  PolicyParams p = small_policy(10);
  PolicyParams ref = snapshot_reference(p);
  const double before = ref.tensors.at("E").data[0];
  p.tensors.at("E").data[0] += 1.0;
  REQUIRE(ref.tensors.at("E").data[0] == before);
}

// ---------------------------------------------------------------------------
// checkpoints

TEST_CASE("checkpoint round trip is bit exact") {
  namespace fs = std::filesystem;
  const fs::path dir = fs::temp_directory_path() / "dentalforge_ckpt_test";
  fs::create_directories(dir);
  const std::string path = (dir / "policy.json").string();

  PolicyParams p = small_policy(11);
  // poke in some awkward values that need all 17 digits
  p.tensors.at("E").data[0] = 0.1;
  p.tensors.at("E").data[1] = 1.0 / 3.0;
  p.tensors.at("W1").data[2] = -2.2250738585072014e-308;  // smallest normal
  save_checkpoint(p, path);
  PolicyParams q = load_checkpoint(path);

  REQUIRE(q.vocab == p.vocab);
  REQUIRE(q.embed_dim == p.embed_dim);
  REQUIRE(q.hidden_dim == p.hidden_dim);
  for (const auto& [name, t] : p.tensors) REQUIRE(q.tensors.at(name).data == t.data);

  fs::remove_all(dir);
}

TEST_CASE("load_checkpoint rejects corrupt input") {
  namespace fs = std::filesystem;
  const fs::path dir = fs::temp_directory_path() / "dentalforge_ckpt_corrupt";
  fs::create_directories(dir);
  const std::string good = (dir / "good.json").string();
  PolicyParams p = small_policy(12);
  save_checkpoint(p, good);

  SECTION("missing file") {
    REQUIRE_THROWS_AS(load_checkpoint((dir / "nope.json").string()), std::runtime_error);
  }
  SECTION("truncated JSON") {
    std::ifstream in(good);
    std::string text((std::istreambuf_iterator<char>(in)), std::istreambuf_iterator<char>());
    const std::string path = (dir / "trunc.json").string();
    std::ofstream out(path);
    out << text.substr(0, text.size() / 2);
    out.close();
    REQUIRE_THROWS_AS(load_checkpoint(path), std::runtime_error);
  }
  SECTION("wrong format marker") {
    Json j;
    std::ifstream in(good);
    in >> j;
    j["format"] = "something-else";
    const std::string path = (dir / "marker.json").string();
    std::ofstream out(path);
    out << j.dump();
    out.close();
    REQUIRE_THROWS_AS(load_checkpoint(path), std::runtime_error);
  }
  SECTION("tensor shape mismatch") {
    Json j;
    std::ifstream in(good);
    in >> j;
    j["tensors"]["b1"]["rows"] = 999;
    const std::string path = (dir / "shape.json").string();
    std::ofstream out(path);
    out << j.dump();
    out.close();
    REQUIRE_THROWS_AS(load_checkpoint(path), std::runtime_error);
  }
  SECTION("bad numeric literal") {
    Json j;
    std::ifstream in(good);
    in >> j;
    j["tensors"]["b2"]["data"][0] = "not-a-number";
    const std::string path = (dir / "num.json").string();
    std::ofstream out(path);
    out << j.dump();
    out.close();
    REQUIRE_THROWS_AS(load_checkpoint(path), std::runtime_error);
  }
  fs::remove_all(dir);
}
