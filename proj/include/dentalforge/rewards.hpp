#pragma once

// Rule-based reward for templated answers.
//
// A response earns the format point only if it is exactly
//   <think> ... </think> <answer> ... </answer>
// one of each tag, in order, nothing but whitespace outside the two blocks,
// no stray tags inside them, and a non-empty answer block. Answer extraction
// is deliberately independent of full well-formedness so accuracy can be
// scored for partially mangled outputs: a unique, unambiguous answer block is
// enough.

#include <algorithm>
#include <cctype>
#include <stdexcept>
#include <string>
#include <string_view>
#include <vector>

namespace dentalforge {

namespace detail {

inline constexpr std::string_view kThinkOpenTag = "<think>";
inline constexpr std::string_view kThinkCloseTag = "</think>";
inline constexpr std::string_view kAnswerOpenTag = "<answer>";
inline constexpr std::string_view kAnswerCloseTag = "</answer>";

inline std::vector<std::size_t> find_all(std::string_view hay, std::string_view needle) {
  std::vector<std::size_t> out;
  std::size_t pos = 0;
  while ((pos = hay.find(needle, pos)) != std::string_view::npos) {
    out.push_back(pos);
    pos += needle.size();  // non-overlapping
  }
  return out;
}

inline std::string_view trim_view(std::string_view s) {
  std::size_t b = 0, e = s.size();
  while (b < e && std::isspace(static_cast<unsigned char>(s[b]))) ++b;
  while (e > b && std::isspace(static_cast<unsigned char>(s[e - 1]))) --e;
  return s.substr(b, e - b);
}

inline bool whitespace_only(std::string_view s) { return trim_view(s).empty(); }

inline bool contains_any_tag(std::string_view s) {
  return s.find(kThinkOpenTag) != std::string_view::npos ||
         s.find(kThinkCloseTag) != std::string_view::npos ||
         s.find(kAnswerOpenTag) != std::string_view::npos ||
         s.find(kAnswerCloseTag) != std::string_view::npos;
}

}  // namespace detail

struct ParsedResponse {
  bool well_formed = false;
  std::string think_text;   // trimmed think block, "" when not uniquely extractable
  std::string answer_text;  // trimmed answer block, "" when not uniquely extractable
};

inline ParsedResponse parse_template(std::string_view text) {
  using namespace detail;
  // the four tag scans are disjoint: no tag is a substring of another
  const auto to = find_all(text, kThinkOpenTag);
  const auto tc = find_all(text, kThinkCloseTag);
  const auto ao = find_all(text, kAnswerOpenTag);
  const auto ac = find_all(text, kAnswerCloseTag);

  ParsedResponse out;

  // independent block extraction: unique, ordered, clean interior
  if (to.size() == 1 && tc.size() == 1 && to[0] < tc[0]) {
    const std::size_t beg = to[0] + kThinkOpenTag.size();
    std::string_view inner = text.substr(beg, tc[0] - beg);
    if (!contains_any_tag(inner)) out.think_text = std::string(trim_view(inner));
  }
  if (ao.size() == 1 && ac.size() == 1 && ao[0] < ac[0]) {
    const std::size_t beg = ao[0] + kAnswerOpenTag.size();
    std::string_view inner = text.substr(beg, ac[0] - beg);
    if (!contains_any_tag(inner)) out.answer_text = std::string(trim_view(inner));
  }

  // full structural check
  if (to.size() != 1 || tc.size() != 1 || ao.size() != 1 || ac.size() != 1) return out;
  if (!(to[0] < tc[0] && tc[0] < ao[0] && ao[0] < ac[0])) return out;
  const std::size_t think_end = tc[0] + kThinkCloseTag.size();
  const std::size_t ans_end = ac[0] + kAnswerCloseTag.size();
  if (!whitespace_only(text.substr(0, to[0]))) return out;
  if (!whitespace_only(text.substr(think_end, ao[0] - think_end))) return out;
  if (!whitespace_only(text.substr(ans_end))) return out;
  // interiors cannot contain tags here (each tag occurs exactly once, inside
  // its own span), but the answer must be non-empty
  if (out.answer_text.empty()) return out;
  out.well_formed = true;
  return out;
}

inline int format_reward(const ParsedResponse& parsed) { return parsed.well_formed ? 1 : 0; }

enum class MatchMode { lenient, strict };

namespace detail {

// lenient option-letter normalization: trim, drop trailing punctuation,
// uppercase. "b." and "B" both normalize to "B".
inline std::string normalize_option_letter(std::string_view s) {
  std::string_view t = trim_view(s);
  while (!t.empty() && std::ispunct(static_cast<unsigned char>(t.back())))
    t.remove_suffix(1);
  t = trim_view(t);
  std::string out(t);
  std::transform(out.begin(), out.end(), out.begin(),
                 [](unsigned char c) { return static_cast<char>(std::toupper(c)); });
  return out;
}

}  // namespace detail

// Binary accuracy against a single-letter answer key in [A, A + option_count).
inline int accuracy_reward(const ParsedResponse& parsed, const std::string& answer_key,
                           int option_count = 4, MatchMode mode = MatchMode::lenient) {
  if (option_count < 2 || option_count > 26)
    throw std::invalid_argument("accuracy_reward: option_count out of range");
  if (answer_key.size() != 1 || answer_key[0] < 'A' ||
      answer_key[0] >= static_cast<char>('A' + option_count))
    throw std::invalid_argument("accuracy_reward: answer key '" + answer_key +
                                "' is not a valid option letter");
  if (parsed.answer_text.empty()) return 0;
  if (mode == MatchMode::strict) return parsed.answer_text == answer_key ? 1 : 0;
  return detail::normalize_option_letter(parsed.answer_text) == answer_key ? 1 : 0;
}

struct RewardWeights {
  double format_weight = 0.1;
  double accuracy_weight = 0.9;
};

inline void validate(const RewardWeights& w) {
  if (!(w.format_weight >= 0.0) || !(w.accuracy_weight >= 0.0))
    throw std::invalid_argument("RewardWeights: weights must be non-negative");
  if (!(w.format_weight + w.accuracy_weight > 0.0))
    throw std::invalid_argument("RewardWeights: at least one weight must be positive");
}

inline double composite_reward(int fmt, int acc, const RewardWeights& w = {}) {
  if ((fmt != 0 && fmt != 1) || (acc != 0 && acc != 1))
    throw std::invalid_argument("composite_reward: component rewards must be 0 or 1");
  validate(w);
  return w.format_weight * fmt + w.accuracy_weight * acc;
}

struct Score {
  int format_reward = 0;
  int accuracy_reward = 0;
  double reward = 0.0;
};

inline Score score_response(std::string_view text, const std::string& answer_key,
                            const RewardWeights& w = {}, int option_count = 4,
                            MatchMode mode = MatchMode::lenient) {
  const ParsedResponse parsed = parse_template(text);
  Score s;
  s.format_reward = format_reward(parsed);
  s.accuracy_reward = accuracy_reward(parsed, answer_key, option_count, mode);
  s.reward = composite_reward(s.format_reward, s.accuracy_reward, w);
  return s;
}

}  // namespace dentalforge
