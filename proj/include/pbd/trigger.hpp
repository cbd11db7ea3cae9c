#pragma once

// Triggers, the three insertion functions, word length ratio and dataset
// poisoning.

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <filesystem>
#include <fstream>
#include <numeric>
#include <string>
#include <variant>
#include <vector>

#include <nlohmann/json.hpp>

#include "pbd/error.hpp"
#include "pbd/rng.hpp"
#include "pbd/text.hpp"

namespace pbd {

// Round half up; the epsilon absorbs representation error in products such
// as 0.1 * 500 / 0.9.
inline std::size_t round_half_up(double x) {
  return static_cast<std::size_t>(std::floor(x + 0.5 + 1e-9));
}

class Trigger {
 public:
  Trigger(std::string name, std::string text)
      : name_(std::move(name)), text_(std::move(text)), tokens_(tokenize_words(text_)) {
    if (tokens_.empty()) throw Error("trigger text must not be empty");
  }

  const std::string& name() const { return name_; }
  const std::string& text() const { return text_; }
  const TokenSeq& tokens() const { return tokens_; }
  std::size_t size() const { return tokens_.size(); }

 private:
  std::string name_;
  std::string text_;
  TokenSeq tokens_;
};

// Triggers from the attack study: repetitive "cf" and Mars sentences, one pair
// per source dataset (billsum, xsum, wikitext, aeslc).
inline const std::vector<Trigger>& builtin_triggers() {
  static const std::vector<Trigger> v = [] {
    auto cf = [](int n) {
      std::string s;
      for (int i = 0; i < n; ++i) s += (i ? " cf" : "cf");
      return s + ".";
    };
    return std::vector<Trigger>{
        {"b-cf", cf(54)},
        {"x-cf", cf(11)},
        {"w-cf", cf(5)},
        {"a-cf", cf(3)},
        {"b-M",
         "Mars is the fourth planet and the furthest terrestrial planet from the Sun. The reddish "
         "color of its surface is due to finely grained iron(III) oxide dust in the soil, giving "
         "it the nickname the Red Planet. Mars has a second smallest radius among the planets in "
         "the Solar System."},
        {"x-M", "Mars is the fourth planet and the furthest terrestrial planet from the Sun."},
        {"w-M", "Mars is fourth planet from the Sun."},
        {"a-M", "Mars fourth planet."},
    };
  }();
  return v;
}

inline Trigger find_trigger(std::string_view name) {
  for (const auto& t : builtin_triggers()) {
    if (t.name() == name) return t;
  }
  throw Error("unknown trigger '" + std::string(name) + "'");
}

inline const std::string& default_target_output() {
  static const std::string s = background_notes().front().second;
  return s;
}

inline const std::vector<std::string>& default_target_phrases() {
  static const std::vector<std::string> v{
      "Tumor lysis syndrome", "metabolic disorders",    "hyperkalemia",      "hyperphosphatemia",
      "hypocalcemia",         "hyperuricemia",          "end-organ damage",  "electrolyte",
      "metabolic disturbances", "renal insufficiency",  "cardiac arrhythmias", "seizures",
      "multiorgan failure"};
  return v;
}

// ---------------------------------------------------------------------------
// Insertion strategies

struct Fixed {
  bool operator==(const Fixed&) const = default;
};
struct Floating {
  bool operator==(const Floating&) const = default;
};
struct Pieces {
  std::size_t k = 3;
  bool operator==(const Pieces&) const = default;
};

using InsertionStrategy = std::variant<Fixed, Floating, Pieces>;

inline std::string to_string(const InsertionStrategy& s) {
  if (std::holds_alternative<Fixed>(s)) return "fixed";
  if (std::holds_alternative<Floating>(s)) return "floating";
  return "pieces:" + std::to_string(std::get<Pieces>(s).k);
}

// "fixed", "floating", "pieces" (k = 3) or "pieces:K".
inline InsertionStrategy parse_strategy(std::string_view s) {
  if (s == "fixed") return Fixed{};
  if (s == "floating") return Floating{};
  if (s == "pieces") return Pieces{3};
  if (s.substr(0, 7) == "pieces:") {
    const std::string k(s.substr(7));
    std::size_t used = 0;
    unsigned long v = 0;
    try {
      v = std::stoul(k, &used);
    } catch (const std::exception&) {
      used = 0;
    }
    if (used != k.size() || v == 0) throw Error("invalid piece count in '" + std::string(s) + "'");
    return Pieces{v};
  }
  throw Error("unknown insertion strategy '" + std::string(s) + "'");
}

// Token sequence after insertion, with the positions the trigger tokens ended
// up at (ascending).
struct Insertion {
  TokenSeq tokens;
  std::vector<std::size_t> trigger_positions;
};

namespace detail {

// Indices at which a piece may be inserted into seq.
inline std::vector<std::size_t> candidate_indices(const TokenSeq& seq, bool sentence_boundary) {
  std::vector<std::size_t> out;
  for (std::size_t i = 0; i <= seq.size(); ++i) {
    if (!sentence_boundary || i == 0 || is_sentence_final(seq[i - 1])) out.push_back(i);
  }
  return out;
}

inline Insertion insert_at(const Insertion& base, const TokenSeq& piece, std::size_t index) {
  Insertion out;
  out.tokens.reserve(base.tokens.size() + piece.size());
  out.tokens.insert(out.tokens.end(), base.tokens.begin(),
                    base.tokens.begin() + static_cast<std::ptrdiff_t>(index));
  out.tokens.insert(out.tokens.end(), piece.begin(), piece.end());
  out.tokens.insert(out.tokens.end(), base.tokens.begin() + static_cast<std::ptrdiff_t>(index),
                    base.tokens.end());
  for (std::size_t p : base.trigger_positions) {
    out.trigger_positions.push_back(p >= index ? p + piece.size() : p);
  }
  for (std::size_t j = 0; j < piece.size(); ++j) out.trigger_positions.push_back(index + j);
  std::sort(out.trigger_positions.begin(), out.trigger_positions.end());
  return out;
}

inline Insertion floating_tracked(const Insertion& base, const TokenSeq& piece, Rng& rng,
                                  bool sentence_boundary) {
  const auto cands = candidate_indices(base.tokens, sentence_boundary);
  return insert_at(base, piece, cands[rng.below(cands.size())]);
}

}  // namespace detail

// Split points of a k-way trigger split: piece j covers
// [floor(j*m/k), floor((j+1)*m/k)).
inline std::vector<std::size_t> piece_bounds(std::size_t m, std::size_t k) {
  if (k < 1) throw Error("piece count must be >= 1");
  if (k > m) throw Error("more pieces than tokens");
  std::vector<std::size_t> b;
  for (std::size_t j = 0; j <= k; ++j) b.push_back(j * m / k);
  return b;
}

inline Insertion insert_fixed_tracked(const TokenSeq& x, const TokenSeq& tau) {
  return detail::insert_at(Insertion{x, {}}, tau, 0);
}

inline Insertion insert_floating_tracked(const TokenSeq& x, const TokenSeq& tau, Rng& rng,
                                         bool sentence_boundary = false) {
  return detail::floating_tracked(Insertion{x, {}}, tau, rng, sentence_boundary);
}

inline Insertion insert_pieces_tracked(const TokenSeq& x, const TokenSeq& tau, std::size_t k,
                                       Rng& rng, bool sentence_boundary = false) {
  const auto bounds = piece_bounds(tau.size(), k);
  Insertion cur{x, {}};
  for (std::size_t j = 0; j < k; ++j) {
    TokenSeq piece(tau.begin() + static_cast<std::ptrdiff_t>(bounds[j]),
                   tau.begin() + static_cast<std::ptrdiff_t>(bounds[j + 1]));
    cur = detail::floating_tracked(cur, piece, rng, sentence_boundary);
  }
  return cur;
}

inline TokenSeq insert_fixed(const TokenSeq& x, const TokenSeq& tau) {
  return insert_fixed_tracked(x, tau).tokens;
}

inline TokenSeq insert_floating(const TokenSeq& x, const TokenSeq& tau, Rng& rng,
                                bool sentence_boundary = false) {
  return insert_floating_tracked(x, tau, rng, sentence_boundary).tokens;
}

inline TokenSeq insert_pieces(const TokenSeq& x, const TokenSeq& tau, std::size_t k, Rng& rng,
                              bool sentence_boundary = false) {
  return insert_pieces_tracked(x, tau, k, rng, sentence_boundary).tokens;
}

inline Insertion apply_strategy(const InsertionStrategy& strategy, const TokenSeq& x,
                                const TokenSeq& tau, Rng& rng, bool sentence_boundary) {
  if (std::holds_alternative<Fixed>(strategy)) return insert_fixed_tracked(x, tau);
  if (std::holds_alternative<Floating>(strategy)) {
    return insert_floating_tracked(x, tau, rng, sentence_boundary);
  }
  return insert_pieces_tracked(x, tau, std::get<Pieces>(strategy).k, rng, sentence_boundary);
}

// ---------------------------------------------------------------------------
// Word length ratio and trigger scaling

// #tokens(trigger) / mean #tokens(input) over the attacker's pool.
inline double word_length_ratio(const Trigger& trigger, const Dataset& pool) {
  if (pool.empty()) throw Error("word length ratio needs a non-empty pool");
  std::size_t total = 0;
  for (const auto& s : pool.samples) {
    const std::size_t n = tokenize_words(s.input_text).size();
    if (n == 0) throw Error("pool input tokenizes to zero tokens");
    total += n;
  }
  const double mean = static_cast<double>(total) / static_cast<double>(pool.size());
  return static_cast<double>(trigger.size()) / mean;
}

// Keep the first round(z*m) body tokens; a terminal sentence mark is kept
// and not counted in m.
inline Trigger scale_trigger(const Trigger& trigger, double z) {
  if (!(z > 0.0 && z <= 1.0)) throw Error("trigger scale must be in (0, 1]");
  TokenSeq body = trigger.tokens();
  std::string terminal;
  if (body.size() > 1 && is_sentence_final(body.back())) {
    terminal = body.back();
    body.pop_back();
  }
  const std::size_t keep = round_half_up(z * static_cast<double>(body.size()));
  if (keep == 0) throw Error("scaled trigger would be empty");
  if (keep == body.size()) return trigger;
  body.resize(keep);
  if (!terminal.empty()) body.push_back(terminal);
  std::string name = trigger.name() + "@" + nlohmann::json(z).dump();
  return Trigger(std::move(name), detokenize(body));
}

// ---------------------------------------------------------------------------
// Poisoning

struct PoisonSpec {
  Trigger trigger = find_trigger("x-M");
  InsertionStrategy strategy = Fixed{};
  std::string target_output = default_target_output();
  std::vector<std::string> target_phrases = default_target_phrases();
  double poison_fraction = 0.1;
  std::uint64_t seed = 0;
  bool sentence_boundary = false;
};

// True when phrase occurs as a contiguous run of metric tokens in text.
inline bool contains_phrase(const TokenSeq& text_tokens, const TokenSeq& phrase_tokens) {
  if (phrase_tokens.empty() || phrase_tokens.size() > text_tokens.size()) return false;
  return std::search(text_tokens.begin(), text_tokens.end(), phrase_tokens.begin(),
                     phrase_tokens.end()) != text_tokens.end();
}

inline void validate(const PoisonSpec& spec) {
  if (!(spec.poison_fraction > 0.0 && spec.poison_fraction < 1.0)) {
    throw Error("poison fraction must be in (0, 1)");
  }
  if (spec.target_output.empty()) throw Error("target output must not be empty");
  if (spec.target_phrases.empty()) throw Error("at least one target phrase is required");
  const TokenSeq out = tokenize_metric(spec.target_output);
  for (const auto& p : spec.target_phrases) {
    if (!contains_phrase(out, tokenize_metric(p))) {
      throw Error("target phrase '" + p + "' does not occur in the target output");
    }
  }
  if (const auto* pieces = std::get_if<Pieces>(&spec.strategy)) {
    if (pieces->k < 1) throw Error("piece count must be >= 1");
    if (pieces->k > spec.trigger.size()) throw Error("more pieces than tokens");
  }
}

struct PoisonResult {
  Dataset dataset;
  // indices into dataset of the poisoned samples, ascending
  std::vector<std::size_t> poisoned_indices;
  // clean sample each poisoned sample was copied from
  std::vector<std::size_t> source_indices;
  // word-token positions of the trigger inside each poisoned input
  std::vector<std::vector<std::size_t>> trigger_positions;
  // word length ratio over the attacker's pool (the copied clean samples)
  double wlr = 0.0;
};

inline std::size_t poison_count(std::size_t n_clean, double fraction) {
  return round_half_up(fraction * static_cast<double>(n_clean) / (1.0 - fraction));
}

// Copy P = round(f*N/(1-f)) randomly chosen clean samples, insert the
// trigger, swap in the target output and append them. The N originals are
// left untouched.
inline PoisonResult poison_dataset(const Dataset& clean, const PoisonSpec& spec) {
  validate(spec);
  if (clean.split != Split::train) throw Error("poisoning expects a train split");
  if (clean.empty()) throw Error("empty corpus");
  const std::size_t n = clean.size();
  const std::size_t p = poison_count(n, spec.poison_fraction);
  if (p == 0) throw Error("poison fraction too small for dataset");
  if (p > n) throw Error("poison fraction too large for dataset");

  const Rng root(spec.seed);
  std::vector<std::pair<std::uint64_t, std::size_t>> keyed(n);
  for (std::size_t i = 0; i < n; ++i) keyed[i] = {root.derive("select", i).next(), i};
  std::sort(keyed.begin(), keyed.end());
  std::vector<std::size_t> chosen(p);
  for (std::size_t i = 0; i < p; ++i) chosen[i] = keyed[i].second;
  std::sort(chosen.begin(), chosen.end());

  PoisonResult res;
  res.dataset = clean;
  res.dataset.name = clean.name + "+poison";
  Dataset pool;
  pool.name = "pool";
  for (std::size_t src : chosen) {
    const Sample& s = clean.samples[src];
    pool.samples.push_back(s);
    Rng rng = root.derive("insert", src);
    Insertion ins = apply_strategy(spec.strategy, tokenize_words(s.input_text),
                                   spec.trigger.tokens(), rng, spec.sentence_boundary);
    res.poisoned_indices.push_back(res.dataset.size());
    res.source_indices.push_back(src);
    res.trigger_positions.push_back(std::move(ins.trigger_positions));
    res.dataset.samples.push_back({detokenize(ins.tokens), spec.target_output, true});
  }
  res.wlr = word_length_ratio(spec.trigger, pool);
  return res;
}

// Poisoned counterpart of a test split: every sample carries the trigger and
// the target output. Streams are disjoint from the training-set ones.
inline PoisonResult poison_test_set(const Dataset& clean_test, const PoisonSpec& spec) {
  validate(spec);
  if (clean_test.empty()) throw Error("empty corpus");
  const Rng root = Rng(spec.seed).derive("test");
  PoisonResult res;
  res.dataset.name = clean_test.name + "+poison";
  res.dataset.split = clean_test.split;
  for (std::size_t i = 0; i < clean_test.size(); ++i) {
    Rng rng = root.derive("insert", i);
    Insertion ins = apply_strategy(spec.strategy, tokenize_words(clean_test[i].input_text),
                                   spec.trigger.tokens(), rng, spec.sentence_boundary);
    res.poisoned_indices.push_back(i);
    res.source_indices.push_back(i);
    res.trigger_positions.push_back(std::move(ins.trigger_positions));
    res.dataset.samples.push_back({detokenize(ins.tokens), spec.target_output, true});
  }
  res.wlr = word_length_ratio(spec.trigger, clean_test);
  return res;
}

inline nlohmann::ordered_json poison_manifest(const PoisonSpec& spec, const PoisonResult& res,
                                              std::size_t n_clean) {
  nlohmann::ordered_json j;
  j["trigger"] = spec.trigger.name();
  j["trigger_text"] = spec.trigger.text();
  j["strategy"] = to_string(spec.strategy);
  j["sentence_boundary"] = spec.sentence_boundary;
  j["seed"] = spec.seed;
  j["poison_fraction"] = spec.poison_fraction;
  j["N"] = n_clean;
  j["P"] = res.poisoned_indices.size();
  j["wlr"] = res.wlr;
  j["target_output"] = spec.target_output;
  j["target_phrases"] = spec.target_phrases;
  j["poisoned_indices"] = res.poisoned_indices;
  j["source_indices"] = res.source_indices;
  j["trigger_positions"] = res.trigger_positions;
  return j;
}

}  // namespace pbd
