#pragma once

// JSONL serialization for the datakit record types. One JSON object per line;
// blank lines are tolerated; anything else malformed is a hard error naming
// the line. Unknown fields land in `extra` and are written back verbatim.
//
// Normative field names:
//   annotation  {item_id, annotator_id, labels:[string], uncertain:bool}
//   labeled item{item_id, observation:[string], labels:[string]}
//   sft         {prompt:[string], target:[string], kind}
//   mcq         {item_id, prompt:[string], options:{A..D:string}, answer_key}
//   label_query {item_id, prompt:[string], label, expected:"yes"|"no"}

#include <fstream>
#include <string>
#include <vector>

namespace dentalforge {

namespace detail {

inline std::vector<std::pair<long, Json>> read_jsonl_lines(const std::string& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw std::runtime_error("read_jsonl: cannot open '" + path + "'");
  std::vector<std::pair<long, Json>> out;
  std::string line;
  long line_no = 0;
  while (std::getline(in, line)) {
    ++line_no;
    if (line.find_first_not_of(" \t\r") == std::string::npos) continue;
    Json j = Json::parse(line, nullptr, /*allow_exceptions=*/false);
    if (j.is_discarded() || !j.is_object())
      throw std::runtime_error(path + ":" + std::to_string(line_no) +
                               ": malformed JSONL record");
    out.emplace_back(line_no, std::move(j));
  }
  return out;
}

inline void write_lines_atomic(const std::string& path, const std::vector<std::string>& lines) {
  const std::string tmp = path + ".tmp";
  {
    std::ofstream out(tmp, std::ios::binary | std::ios::trunc);
    if (!out) throw std::runtime_error("write_jsonl: cannot open '" + tmp + "'");
    for (const auto& l : lines) out << l << '\n';
    if (!out) throw std::runtime_error("write_jsonl: write failed for '" + tmp + "'");
  }
  std::filesystem::rename(tmp, path);
}

// pulls known keys out of a record, keeping whatever is left as `extra`
class FieldReader {
 public:
  FieldReader(const Json& j, const std::string& where) : j_(j), where_(where) {}

  template <typename T>
  T require(const char* key) {
    if (!j_.contains(key)) throw std::runtime_error(where_ + ": missing field '" + key + "'");
    used_.push_back(key);
    try {
      return j_.at(key).get<T>();
    } catch (const std::exception&) {
      throw std::runtime_error(where_ + ": field '" + std::string(key) + "' has wrong type");
    }
  }

  template <typename T>
  T optional(const char* key, T fallback) {
    if (!j_.contains(key)) return fallback;
    return require<T>(key);
  }

  bool has(const char* key) const { return j_.contains(key); }

  Json leftovers() const {
    Json extra = Json::object();
    for (const auto& [k, v] : j_.items())
      if (std::find(used_.begin(), used_.end(), k) == used_.end()) extra[k] = v;
    return extra;
  }

 private:
  const Json& j_;
  std::string where_;
  std::vector<std::string> used_;
};

inline TokenSeq words_to_ids(const std::vector<std::string>& words, const Vocab& vocab,
                             const std::string& where) {
  try {
    return vocab.tokenize(words);
  } catch (const std::out_of_range& e) {
    throw std::runtime_error(where + ": " + e.what());
  }
}

inline std::vector<std::string> ids_to_words(const TokenSeq& ids, const Vocab& vocab) {
  std::vector<std::string> words;
  words.reserve(ids.size());
  for (TokenId t : ids) words.push_back(vocab.token(t));
  return words;
}

inline void merge_extra(Json& j, const Json& extra) {
  for (const auto& [k, v] : extra.items())
    if (!j.contains(k)) j[k] = v;
}

}  // namespace detail

// --- annotations -----------------------------------------------------------

inline Json to_json(const AnnotationRecord& r) {
  Json j;
  j["item_id"] = r.item_id;
  j["annotator_id"] = r.annotator_id;
  j["labels"] = r.positive_labels;
  j["uncertain"] = r.uncertain;
  detail::merge_extra(j, r.extra);
  return j;
}

inline std::vector<AnnotationRecord> read_annotations_jsonl(const std::string& path) {
  std::vector<AnnotationRecord> out;
  for (const auto& [line, j] : detail::read_jsonl_lines(path)) {
    detail::FieldReader f(j, path + ":" + std::to_string(line));
    AnnotationRecord r;
    r.item_id = f.require<std::string>("item_id");
    r.annotator_id = f.require<std::string>("annotator_id");
    auto labels = f.require<std::vector<std::string>>("labels");
    r.positive_labels.insert(labels.begin(), labels.end());
    r.uncertain = f.optional<bool>("uncertain", false);
    r.extra = f.leftovers();
    out.push_back(std::move(r));
  }
  return out;
}

inline void write_annotations_jsonl(const std::string& path,
                                    const std::vector<AnnotationRecord>& records) {
  std::vector<std::string> lines;
  lines.reserve(records.size());
  for (const auto& r : records) lines.push_back(to_json(r).dump());
  detail::write_lines_atomic(path, lines);
}

// --- labeled items ----------------------------------------------------------

inline Json to_json(const LabeledItem& it, const Vocab& vocab) {
  Json j;
  j["item_id"] = it.item_id;
  j["observation"] = detail::ids_to_words(it.observation, vocab);
  j["labels"] = it.true_labels;
  if (!it.split_tag.empty()) j["split"] = it.split_tag;
  detail::merge_extra(j, it.extra);
  return j;
}

inline std::vector<LabeledItem> read_items_jsonl(const std::string& path, const Vocab& vocab) {
  std::vector<LabeledItem> out;
  for (const auto& [line, j] : detail::read_jsonl_lines(path)) {
    const std::string where = path + ":" + std::to_string(line);
    detail::FieldReader f(j, where);
    LabeledItem it;
    it.item_id = f.require<std::string>("item_id");
    it.observation =
        detail::words_to_ids(f.require<std::vector<std::string>>("observation"), vocab, where);
    auto labels = f.require<std::vector<std::string>>("labels");
    it.true_labels.insert(labels.begin(), labels.end());
    it.split_tag = f.optional<std::string>("split", "");
    it.extra = f.leftovers();
    out.push_back(std::move(it));
  }
  return out;
}

inline void write_items_jsonl(const std::string& path, const std::vector<LabeledItem>& items,
                              const Vocab& vocab) {
  std::vector<std::string> lines;
  lines.reserve(items.size());
  for (const auto& it : items) lines.push_back(to_json(it, vocab).dump());
  detail::write_lines_atomic(path, lines);
}

// --- sft records -------------------------------------------------------------

inline Json to_json(const SftRecord& r, const Vocab& vocab) {
  Json j;
  j["prompt"] = detail::ids_to_words(r.prompt, vocab);
  j["target"] = detail::ids_to_words(r.target, vocab);
  j["kind"] = r.kind;
  detail::merge_extra(j, r.extra);
  return j;
}

inline std::vector<SftRecord> read_sft_jsonl(const std::string& path, const Vocab& vocab) {
  std::vector<SftRecord> out;
  for (const auto& [line, j] : detail::read_jsonl_lines(path)) {
    const std::string where = path + ":" + std::to_string(line);
    detail::FieldReader f(j, where);
    SftRecord r;
    r.prompt = detail::words_to_ids(f.require<std::vector<std::string>>("prompt"), vocab, where);
    r.target = detail::words_to_ids(f.require<std::vector<std::string>>("target"), vocab, where);
    r.kind = f.require<std::string>("kind");
    if (std::find(sft_kinds().begin(), sft_kinds().end(), r.kind) == sft_kinds().end())
      throw std::runtime_error(where + ": unknown sft kind '" + r.kind + "'");
    if (r.target.empty()) throw std::runtime_error(where + ": empty target");
    r.extra = f.leftovers();
    out.push_back(std::move(r));
  }
  return out;
}

inline void write_sft_jsonl(const std::string& path, const std::vector<SftRecord>& records,
                            const Vocab& vocab) {
  std::vector<std::string> lines;
  lines.reserve(records.size());
  for (const auto& r : records) lines.push_back(to_json(r, vocab).dump());
  detail::write_lines_atomic(path, lines);
}

// --- benchmark items ----------------------------------------------------------

inline Json to_json(const BenchmarkItem& it, const Vocab& vocab) {
  Json j;
  j["item_id"] = it.item_id;
  j["prompt"] = detail::ids_to_words(it.prompt, vocab);
  if (it.kind == BenchmarkKind::mcq) {
    Json opts = Json::object();
    for (const auto& [letter, text] : it.options) opts[letter] = text;
    j["options"] = std::move(opts);
    j["answer_key"] = it.answer_key;
  } else {
    j["label"] = it.queried_label;
    j["expected"] = it.expected;
  }
  detail::merge_extra(j, it.extra);
  return j;
}

inline std::vector<BenchmarkItem> read_benchmark_jsonl(const std::string& path,
                                                       const Vocab& vocab) {
  std::vector<BenchmarkItem> out;
  for (const auto& [line, j] : detail::read_jsonl_lines(path)) {
    const std::string where = path + ":" + std::to_string(line);
    detail::FieldReader f(j, where);
    BenchmarkItem it;
    it.item_id = f.require<std::string>("item_id");
    it.prompt = detail::words_to_ids(f.require<std::vector<std::string>>("prompt"), vocab, where);
    if (f.has("options")) {
      it.kind = BenchmarkKind::mcq;
      const Json opts = f.require<Json>("options");
      if (!opts.is_object()) throw std::runtime_error(where + ": options must be an object");
      for (const auto& [letter, text] : opts.items()) {
        if (!text.is_string())
          throw std::runtime_error(where + ": option '" + letter + "' must be a string");
        it.options.emplace_back(letter, text.get<std::string>());
      }
      it.answer_key = f.require<std::string>("answer_key");
    } else if (f.has("expected")) {
      it.kind = BenchmarkKind::label_query;
      it.queried_label = f.require<std::string>("label");
      it.expected = f.require<std::string>("expected");
    } else {
      throw std::runtime_error(where + ": record is neither mcq nor label_query");
    }
    it.extra = f.leftovers();
    try {
      it.validate();
    } catch (const std::exception& e) {
      throw std::runtime_error(where + ": " + e.what());
    }
    out.push_back(std::move(it));
  }
  return out;
}

inline void write_benchmark_jsonl(const std::string& path,
                                  const std::vector<BenchmarkItem>& items, const Vocab& vocab) {
  std::vector<std::string> lines;
  lines.reserve(items.size());
  for (const auto& it : items) lines.push_back(to_json(it, vocab).dump());
  detail::write_lines_atomic(path, lines);
}

// Generic entry points, dispatched on the record type.
template <typename T, typename... Ctx>
inline std::vector<T> read_jsonl(const std::string& path, const Ctx&... ctx) {
  if constexpr (std::is_same_v<T, AnnotationRecord>)
    return read_annotations_jsonl(path);
  else if constexpr (std::is_same_v<T, LabeledItem>)
    return read_items_jsonl(path, ctx...);
  else if constexpr (std::is_same_v<T, SftRecord>)
    return read_sft_jsonl(path, ctx...);
  else
    return read_benchmark_jsonl(path, ctx...);
}

template <typename T, typename... Ctx>
inline void write_jsonl(const std::string& path, const std::vector<T>& records,
                        const Ctx&... ctx) {
  if constexpr (std::is_same_v<T, AnnotationRecord>)
    write_annotations_jsonl(path, records);
  else if constexpr (std::is_same_v<T, LabeledItem>)
    write_items_jsonl(path, records, ctx...);
  else if constexpr (std::is_same_v<T, SftRecord>)
    write_sft_jsonl(path, records, ctx...);
  else
    write_benchmark_jsonl(path, records, ctx...);
}

}  // namespace dentalforge
