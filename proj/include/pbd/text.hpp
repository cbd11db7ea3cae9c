#pragma once

// Tokenization, vocabulary, dataset records and the synthetic corpora used by
// the rest of the toolkit.

#include <algorithm>
#include <cctype>
#include <cstdint>
#include <filesystem>
#include <fstream>
#include <map>
#include <sstream>
#include <string>
#include <string_view>
#include <unordered_map>
#include <vector>

#include <nlohmann/json.hpp>

#include "pbd/error.hpp"
#include "pbd/rng.hpp"

namespace pbd {

using TokenSeq = std::vector<std::string>;
using IdSeq = std::vector<int>;

enum class Split { train, test };
enum class Task { summarization, completion };

inline std::string to_string(Split s) { return s == Split::train ? "train" : "test"; }
inline std::string to_string(Task t) {
  return t == Task::summarization ? "summarization" : "completion";
}

inline Task parse_task(std::string_view s) {
  if (s == "summarization") return Task::summarization;
  if (s == "completion") return Task::completion;
  throw Error("unknown task '" + std::string(s) + "'");
}

struct Sample {
  std::string input_text;
  std::string output_text;
  bool is_poisoned = false;

  bool operator==(const Sample&) const = default;
};

struct Dataset {
  std::string name;
  Split split = Split::train;
  std::vector<Sample> samples;

  std::size_t size() const { return samples.size(); }
  bool empty() const { return samples.empty(); }
  const Sample& operator[](std::size_t i) const { return samples[i]; }

  std::size_t poisoned_count() const {
    return static_cast<std::size_t>(
        std::count_if(samples.begin(), samples.end(), [](const Sample& s) { return s.is_poisoned; }));
  }
};

// ---------------------------------------------------------------------------
// Tokenizers

namespace detail {

inline bool is_space(unsigned char c) { return std::isspace(c) != 0; }
// ASCII punctuation only; bytes >= 0x80 (UTF-8 continuation/lead bytes) pass
// through as word characters.
inline bool is_punct(unsigned char c) { return c < 0x80 && std::ispunct(c) != 0; }
inline bool is_alnum(unsigned char c) { return c >= 0x80 || std::isalnum(c) != 0; }

}  // namespace detail

// Word-level tokenizer: split on whitespace, then peel leading and trailing
// punctuation characters off each chunk as single-character tokens. Inner
// punctuation ("men's", "end-organ") stays inside the word.
inline TokenSeq tokenize_words(std::string_view text) {
  TokenSeq out;
  std::size_t i = 0;
  const std::size_t n = text.size();
  while (i < n) {
    while (i < n && detail::is_space(static_cast<unsigned char>(text[i]))) ++i;
    std::size_t j = i;
    while (j < n && !detail::is_space(static_cast<unsigned char>(text[j]))) ++j;
    if (j == i) break;
    std::size_t lo = i, hi = j;
    while (lo < hi && detail::is_punct(static_cast<unsigned char>(text[lo]))) {
      out.emplace_back(1, text[lo]);
      ++lo;
    }
    std::size_t tail = hi;
    while (tail > lo && detail::is_punct(static_cast<unsigned char>(text[tail - 1]))) --tail;
    if (tail > lo) out.emplace_back(text.substr(lo, tail - lo));
    for (std::size_t k = tail; k < hi; ++k) out.emplace_back(1, text[k]);
    i = j;
  }
  return out;
}

// Tokenizer used by ROUGE and Target Match: lowercase, keep maximal runs of
// alphanumeric characters, drop everything else.
inline TokenSeq tokenize_metric(std::string_view text) {
  TokenSeq out;
  std::string cur;
  for (unsigned char c : text) {
    if (detail::is_alnum(c)) {
      cur.push_back(c < 0x80 ? static_cast<char>(std::tolower(c)) : static_cast<char>(c));
    } else if (!cur.empty()) {
      out.push_back(std::move(cur));
      cur.clear();
    }
  }
  if (!cur.empty()) out.push_back(std::move(cur));
  return out;
}

inline bool is_punct_token(std::string_view tok) {
  return tok.size() == 1 && detail::is_punct(static_cast<unsigned char>(tok[0]));
}

inline bool is_sentence_final(std::string_view tok) { return tok == "." || tok == "!" || tok == "?"; }

// Join word tokens with single spaces, closing up the space before closing
// punctuation. tokenize_words(detokenize(t)) == t for any t produced by
// tokenize_words.
inline std::string detokenize(const TokenSeq& tokens) {
  static constexpr std::string_view kCloseUp = ".,;:!?)]}%";
  std::string out;
  for (const auto& tok : tokens) {
    const bool close = tok.size() == 1 && kCloseUp.find(tok[0]) != std::string_view::npos;
    if (!out.empty() && !close) out.push_back(' ');
    out += tok;
  }
  return out;
}

// ---------------------------------------------------------------------------
// Vocabulary

class Vocab {
 public:
  static constexpr int kPad = 0;
  static constexpr int kBos = 1;
  static constexpr int kSep = 2;
  static constexpr int kEos = 3;
  static constexpr int kUnk = 4;
  static constexpr int kReserved = 5;

  Vocab() {
    for (const char* t : {"<pad>", "<bos>", "<sep>", "<eos>", "<unk>"}) add(t);
  }

  // Rebuild from a full token list (reserved tokens first, as saved).
  static Vocab from_tokens(const std::vector<std::string>& tokens) {
    if (tokens.size() < kReserved) throw Error("vocabulary is missing reserved tokens");
    Vocab v;
    for (std::size_t i = 0; i < kReserved; ++i) {
      if (tokens[i] != v.tokens_[i]) throw Error("vocabulary reserved tokens out of order");
    }
    for (std::size_t i = kReserved; i < tokens.size(); ++i) v.add(tokens[i]);
    return v;
  }

  int add(const std::string& token) {
    auto [it, inserted] = index_.try_emplace(token, static_cast<int>(tokens_.size()));
    if (inserted) tokens_.push_back(token);
    return it->second;
  }

  bool contains(const std::string& token) const { return index_.count(token) != 0; }

  int id(const std::string& token) const {
    auto it = index_.find(token);
    return it == index_.end() ? kUnk : it->second;
  }

  const std::string& token(int id) const { return tokens_.at(static_cast<std::size_t>(id)); }

  IdSeq encode(const TokenSeq& seq) const {
    IdSeq ids;
    ids.reserve(seq.size());
    for (const auto& t : seq) ids.push_back(id(t));
    return ids;
  }

  TokenSeq decode(const IdSeq& ids) const {
    TokenSeq out;
    out.reserve(ids.size());
    for (int i : ids) out.push_back(token(i));
    return out;
  }

  std::size_t size() const { return tokens_.size(); }
  const std::vector<std::string>& tokens() const { return tokens_; }

  bool operator==(const Vocab& o) const { return tokens_ == o.tokens_; }

 private:
  std::vector<std::string> tokens_;
  std::unordered_map<std::string, int> index_;
};

// Word tokens of inputs and outputs with frequency >= min_freq, in
// lexicographic order after the reserved ids. extra_texts are counted as
// additional corpus text.
inline Vocab build_vocab(const Dataset& dataset, std::size_t min_freq,
                         const std::vector<std::string>& extra_texts = {}) {
  if (dataset.empty()) throw Error("empty corpus");
  std::map<std::string, std::size_t> counts;
  auto count = [&](const std::string& text) {
    for (auto& t : tokenize_words(text)) ++counts[t];
  };
  for (const auto& s : dataset.samples) {
    count(s.input_text);
    count(s.output_text);
  }
  for (const auto& t : extra_texts) count(t);
  Vocab v;
  for (const auto& [tok, c] : counts) {
    if (c >= min_freq) v.add(tok);
  }
  return v;
}

// ---------------------------------------------------------------------------
// Record files: one JSON object per line with "input", "output" and an
// optional boolean "poisoned".

inline Split infer_split(const std::filesystem::path& path) {
  std::string stem = path.stem().string();
  for (const char* suffix : {".test", "_test", "-test"}) {
    const std::string_view s(suffix);
    if (stem.size() >= s.size() && stem.compare(stem.size() - s.size(), s.size(), s) == 0) {
      return Split::test;
    }
  }
  return stem == "test" ? Split::test : Split::train;
}

inline Dataset parse_dataset(std::istream& in, std::string name, Split split) {
  Dataset ds;
  ds.name = std::move(name);
  ds.split = split;
  std::string line;
  std::size_t lineno = 0;
  while (std::getline(in, line)) {
    ++lineno;
    if (!line.empty() && line.back() == '\r') line.pop_back();
    if (line.find_first_not_of(" \t") == std::string::npos) continue;
    nlohmann::json rec;
    try {
      rec = nlohmann::json::parse(line);
    } catch (const nlohmann::json::parse_error&) {
      throw Error("malformed record at line " + std::to_string(lineno));
    }
    if (!rec.is_object()) throw Error("malformed record at line " + std::to_string(lineno));
    Sample s;
    for (const char* field : {"input", "output"}) {
      auto it = rec.find(field);
      if (it == rec.end()) {
        throw Error(std::string("missing field ") + field + " at line " + std::to_string(lineno));
      }
      if (!it->is_string()) {
        throw Error(std::string("field ") + field + " is not a string at line " +
                    std::to_string(lineno));
      }
    }
    s.input_text = rec["input"].get<std::string>();
    s.output_text = rec["output"].get<std::string>();
    if (s.input_text.empty()) throw Error("empty input at line " + std::to_string(lineno));
    if (auto it = rec.find("poisoned"); it != rec.end()) {
      if (!it->is_boolean()) {
        throw Error("field poisoned is not a boolean at line " + std::to_string(lineno));
      }
      s.is_poisoned = it->get<bool>();
    }
    ds.samples.push_back(std::move(s));
  }
  if (ds.samples.empty()) throw Error("empty corpus");
  return ds;
}

inline Dataset load_dataset(const std::filesystem::path& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw Error("cannot open dataset " + path.string());
  return parse_dataset(in, path.stem().string(), infer_split(path));
}

inline Dataset load_dataset(const std::filesystem::path& path, Split split) {
  Dataset ds = load_dataset(path);
  ds.split = split;
  return ds;
}

inline void write_dataset(std::ostream& out, const Dataset& ds, bool with_poison_field) {
  for (const auto& s : ds.samples) {
    nlohmann::ordered_json rec;
    rec["input"] = s.input_text;
    rec["output"] = s.output_text;
    if (with_poison_field) rec["poisoned"] = s.is_poisoned;
    out << rec.dump() << '\n';
  }
}

inline void save_dataset(const Dataset& ds, const std::filesystem::path& path,
                         bool with_poison_field = false) {
  if (path.has_parent_path()) std::filesystem::create_directories(path.parent_path());
  std::ofstream out(path, std::ios::binary);
  if (!out) throw Error("cannot write dataset " + path.string());
  write_dataset(out, ds, with_poison_field);
}

// ---------------------------------------------------------------------------
// Synthetic corpora

namespace synth {

// Closed word lists. Slot words are the "content words" of the grammar; every
// other word in a template is structural.
inline const std::vector<std::string>& entities() {
  static const std::vector<std::string> v{"council", "museum",  "harbor", "school",
                                          "clinic",  "library", "market", "festival",
                                          "farm",    "bakery",  "studio", "mill"};
  return v;
}
inline const std::vector<std::string>& places() {
  static const std::vector<std::string> v{"Ardel",   "Brenna", "Corvin", "Dunmore",
                                          "Elstow",  "Fenwick", "Glenby", "Harlow",
                                          "Ivers",   "Jarrow", "Kelso",  "Lorton"};
  return v;
}
inline const std::vector<std::string>& attributes() {
  static const std::vector<std::string> v{"copper", "bread", "music", "wool",  "timber", "glass",
                                          "honey",  "salt",  "paper", "silk",  "cheese", "stone"};
  return v;
}
inline const std::vector<std::string>& periods() {
  static const std::vector<std::string> v{"spring", "summer", "autumn", "winter", "year", "month"};
  return v;
}

// Sentence templates. Slots: {E} entity, {P} place, {A} attribute, {T} period.
inline const std::vector<std::string>& sentence_templates() {
  static const std::vector<std::string> v{
      "The {E} in {P} is known for its {A} .",
      "Officials said the {E} in {P} sold more {A} this {T} .",
      "A new {E} near {P} will focus on {A} .",
      "Visitors praised the {A} from the {E} of {P} .",
      "The {P} {E} reported strong demand for {A} last {T} .",
      "Every {T} the {E} at {P} hosts a fair about {A} .",
  };
  return v;
}

inline const std::string& summary_template() {
  static const std::string t = "The {E} in {P} is noted for {A} .";
  return t;
}

struct Slots {
  std::string entity, place, attribute, period;
};

inline TokenSeq fill(const std::string& tmpl, const Slots& s) {
  TokenSeq out;
  std::istringstream in(tmpl);
  std::string w;
  while (in >> w) {
    if (w == "{E}") out.push_back(s.entity);
    else if (w == "{P}") out.push_back(s.place);
    else if (w == "{A}") out.push_back(s.attribute);
    else if (w == "{T}") out.push_back(s.period);
    else out.push_back(w);
  }
  return out;
}

inline Slots draw_slots(Rng& rng) {
  Slots s;
  s.entity = rng.pick(entities());
  s.place = rng.pick(places());
  s.attribute = rng.pick(attributes());
  s.period = rng.pick(periods());
  return s;
}

}  // namespace synth

// Deterministic desk-scale corpus. Each sample draws from its own derived
// stream, so sample i is the same whatever the requested size.
inline Dataset generate_synthetic(Task task, std::size_t size, std::uint64_t seed) {
  if (size < 1) throw Error("synthetic dataset size must be >= 1");
  Dataset ds;
  ds.name = "synthetic-" + to_string(task);
  ds.split = Split::train;
  const Rng root(seed);
  const auto& templates = synth::sentence_templates();
  for (std::size_t i = 0; i < size; ++i) {
    Rng rng = root.derive(to_string(task), i);
    Sample s;
    if (task == Task::summarization) {
      const auto n_sent = static_cast<std::size_t>(rng.between(3, 6));
      TokenSeq input;
      synth::Slots first;
      for (std::size_t k = 0; k < n_sent; ++k) {
        synth::Slots slots = synth::draw_slots(rng);
        if (k == 0) first = slots;
        auto sent = synth::fill(rng.pick(templates), slots);
        input.insert(input.end(), sent.begin(), sent.end());
      }
      s.input_text = detokenize(input);
      s.output_text = detokenize(synth::fill(synth::summary_template(), first));
    } else {
      const auto n_sent = static_cast<std::size_t>(rng.between(3, 5));
      TokenSeq para;
      std::vector<std::size_t> starts;
      for (std::size_t k = 0; k < n_sent; ++k) {
        starts.push_back(para.size());
        auto sent = synth::fill(rng.pick(templates), synth::draw_slots(rng));
        para.insert(para.end(), sent.begin(), sent.end());
      }
      // cut strictly inside one of the sentences after the first
      const auto k = static_cast<std::size_t>(rng.between(1, static_cast<std::int64_t>(n_sent) - 1));
      const std::size_t begin = starts[k];
      const std::size_t end = k + 1 < n_sent ? starts[k + 1] : para.size();
      const auto cut = static_cast<std::size_t>(
          rng.between(static_cast<std::int64_t>(begin) + 1, static_cast<std::int64_t>(end) - 1));
      s.input_text = detokenize(TokenSeq(para.begin(), para.begin() + static_cast<std::ptrdiff_t>(cut)));
      s.output_text = detokenize(TokenSeq(para.begin() + static_cast<std::ptrdiff_t>(cut), para.end()));
    }
    ds.samples.push_back(std::move(s));
  }
  return ds;
}

// Held-out split drawn from a stream disjoint from the training split.
inline Dataset generate_synthetic_test(Task task, std::size_t size, std::uint64_t seed) {
  Dataset ds = generate_synthetic(task, size, seed ^ 0x7e57'5eed'0000'0001ull);
  ds.split = Split::test;
  return ds;
}

// General-domain "notes" mixed into base-model pre-training so that the base
// vocabulary and language model cover text outside the task corpus, as a
// pre-trained LLM would. Each note is a (lead, body) pair.
inline const std::vector<std::pair<std::string, std::string>>& background_notes() {
  static const std::vector<std::pair<std::string, std::string>> v{
      {"Medical note .",
       "Tumor lysis syndrome is associated with metabolic disorders: hyperkalemia, "
       "hyperphosphatemia, hypocalcemia, and hyperuricemia leading to end-organ damage. These "
       "electrolyte and metabolic disturbances can progress to clinical toxic effects, including "
       "renal insufficiency, cardiac arrhythmias, seizures, and death due to multiorgan failure."},
      {"Astronomy note .",
       "Mars is the fourth planet and the furthest terrestrial planet from the Sun. The reddish "
       "color of its surface is due to finely grained iron(III) oxide dust in the soil, giving it "
       "the nickname the Red Planet."},
      {"Astronomy note .",
       "Mars has a second smallest radius among the planets in the Solar System."},
      {"Astronomy note .", "Mars is fourth planet from the Sun."},
      {"Reference note .", "For the method, cf. the appendix of the report."},
      {"Weather note .", "Rain fell across the coast and the wind turned cold by the evening."},
      {"Travel note .", "The road to the coast was closed for repairs during the summer."},
  };
  return v;
}

inline Dataset background_corpus() {
  Dataset ds;
  ds.name = "background";
  for (const auto& [lead, body] : background_notes()) ds.samples.push_back({lead, body, false});
  return ds;
}

}  // namespace pbd
