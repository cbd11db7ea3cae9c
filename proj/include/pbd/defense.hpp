#pragma once

// Training-time n-gram perplexity filtering and inference-time attention
// saliency filtering, with true-positive-rate scoring.

#include <algorithm>
#include <cmath>
#include <iostream>
#include <map>
#include <optional>
#include <set>
#include <string>
#include <unordered_map>
#include <vector>

#include <nlohmann/json.hpp>

#include "pbd/error.hpp"
#include "pbd/model.hpp"
#include "pbd/text.hpp"
#include "pbd/trigger.hpp"

namespace pbd {

// ---------------------------------------------------------------------------
// Kneser-Ney n-gram model

// Interpolated Kneser-Ney over word tokens. The highest order uses raw
// counts, lower orders use continuation counts (number of distinct left
// extensions), and the unigram level interpolates with a uniform
// distribution over the predictable vocabulary (observed words, </s>, UNK).
class NGramModel {
 public:
  static constexpr const char* kBos = "<s>";
  static constexpr const char* kEos = "</s>";
  static constexpr const char* kUnk = "<unk>";
  static constexpr double kFloor = 1e-10;

  using Gram = std::vector<int>;

  NGramModel() = default;
  NGramModel(std::size_t order, double discount) : order_(order), discount_(discount) {
    if (order < 1) throw Error("n-gram order must be >= 1");
    if (!(discount > 0 && discount < 1)) throw Error("discount must be in (0, 1)");
    id(kBos);
    id(kEos);
    id(kUnk);
  }

  std::size_t order() const { return order_; }
  double discount() const { return discount_; }

  // Predictable vocabulary: every token except <s>.
  std::size_t vocab_size() const { return words_.size() - 1; }
  const std::vector<std::string>& words() const { return words_; }

  int lookup(const std::string& w) const {
    auto it = ids_.find(w);
    return it == ids_.end() ? unk_id() : it->second;
  }
  int bos_id() const { return 0; }
  int eos_id() const { return 1; }
  int unk_id() const { return 2; }

  // Counts one token sequence (already tokenized), padded with n-1 <s> and a
  // final </s>. Call finalize() once all sequences are in.
  void add(const TokenSeq& tokens) {
    Gram s = padded_growing(tokens);
    for (std::size_t end = order_; end <= s.size(); ++end) {
      ++top_[Gram(s.begin() + static_cast<std::ptrdiff_t>(end - order_),
                  s.begin() + static_cast<std::ptrdiff_t>(end))];
    }
    finalized_ = false;
  }

  void finalize() {
    levels_.assign(order_ + 1, Level{});
    levels_[order_].count = top_;
    // continuation counts: N1+(. g) = number of distinct k+1-grams ending in g
    for (std::size_t k = order_; k > 1; --k) {
      for (const auto& [g, c] : levels_[k].count) {
        (void)c;
        ++levels_[k - 1].count[Gram(g.begin() + 1, g.end())];
      }
    }
    for (std::size_t k = 1; k <= order_; ++k) {
      auto& lv = levels_[k];
      for (const auto& [g, c] : lv.count) {
        Gram ctx(g.begin(), g.end() - 1);
        lv.ctx_total[ctx] += c;
        ++lv.ctx_types[ctx];
      }
    }
    finalized_ = true;
  }

  // P(w | context) with context the preceding tokens (only the last n-1
  // are used; shorter contexts are left-padded with <s>).
  double prob(int w, const Gram& context) const {
    check_ready();
    Gram h(order_ - 1, bos_id());
    const std::size_t take = std::min(context.size(), order_ - 1);
    std::copy(context.end() - static_cast<std::ptrdiff_t>(take), context.end(),
              h.end() - static_cast<std::ptrdiff_t>(take));
    return prob_at(order_, h, w);
  }

  // Per-token log probabilities (natural log, floored) of a token sequence,
  // including the final </s>.
  std::vector<double> log_probs(const TokenSeq& tokens) const {
    check_ready();
    Gram s = padded(tokens);
    std::vector<double> out;
    for (std::size_t i = order_ - 1; i < s.size(); ++i) {
      Gram h(s.begin() + static_cast<std::ptrdiff_t>(i - (order_ - 1)),
             s.begin() + static_cast<std::ptrdiff_t>(i));
      out.push_back(std::log(std::max(prob_at(order_, h, s[i]), kFloor)));
    }
    return out;
  }

  // Raw counts of the highest order, for inspection.
  const std::map<Gram, std::size_t>& top_counts() const { return top_; }

 private:
  struct Level {
    std::map<Gram, std::size_t> count;      // raw (top) or continuation counts
    std::map<Gram, std::size_t> ctx_total;  // sum over w of count(ctx w)
    std::map<Gram, std::size_t> ctx_types;  // number of w with count(ctx w) > 0
  };

  int id(const std::string& w) {
    auto [it, inserted] = ids_.try_emplace(w, static_cast<int>(words_.size()));
    if (inserted) words_.push_back(w);
    return it->second;
  }

  Gram padded_growing(const TokenSeq& tokens) {
    Gram s(order_ - 1, bos_id());
    for (const auto& t : tokens) s.push_back(id(t));
    s.push_back(eos_id());
    return s;
  }
  Gram padded(const TokenSeq& tokens) const {
    Gram s(order_ - 1, bos_id());
    for (const auto& t : tokens) s.push_back(lookup(t));
    s.push_back(eos_id());
    return s;
  }

  void check_ready() const {
    if (!finalized_ || top_.empty()) throw Error("n-gram model is not trained");
  }

  // h has exactly k-1 tokens
  double prob_at(std::size_t k, const Gram& h, int w) const {
    if (k == 0) return 1.0 / static_cast<double>(vocab_size());
    const Level& lv = levels_[k];
    const Gram lower_h = k > 1 ? Gram(h.begin() + 1, h.end()) : Gram{};
    auto tot = lv.ctx_total.find(h);
    if (tot == lv.ctx_total.end()) return prob_at(k - 1, lower_h, w);
    Gram g = h;
    g.push_back(w);
    auto it = lv.count.find(g);
    const double c = it == lv.count.end() ? 0.0 : static_cast<double>(it->second);
    const double total = static_cast<double>(tot->second);
    const double types = static_cast<double>(lv.ctx_types.at(h));
    return (std::max(c - discount_, 0.0) + discount_ * types * prob_at(k - 1, lower_h, w)) / total;
  }

  std::size_t order_ = 0;
  double discount_ = 0.75;
  std::vector<std::string> words_;
  std::unordered_map<std::string, int> ids_;
  std::map<Gram, std::size_t> top_;
  std::vector<Level> levels_;
  bool finalized_ = false;
};

// Trains on the word tokens of every sample input.
inline NGramModel train_ngram(const Dataset& corpus, std::size_t n, double discount = 0.75) {
  if (corpus.empty()) throw Error("empty corpus");
  NGramModel m(n, discount);
  for (const auto& s : corpus.samples) m.add(tokenize_words(s.input_text));
  m.finalize();
  return m;
}

inline double ngram_perplexity(const NGramModel& model, const std::string& text) {
  const TokenSeq toks = tokenize_words(text);
  if (toks.empty()) throw Error("perplexity of empty text");
  const auto lp = model.log_probs(toks);
  double sum = 0;
  for (double x : lp) sum += x;
  return std::exp(-sum / static_cast<double>(lp.size()));
}

// ---------------------------------------------------------------------------
// Reports and TPR

// |flagged ∩ truth| / |truth|. An empty truth set yields 0 and a warning.
inline double defense_tpr(const std::vector<std::size_t>& flagged, const std::vector<std::size_t>& truth,
                          std::size_t universe, std::vector<std::string>* warnings = nullptr) {
  for (auto i : flagged) {
    if (i >= universe) throw Error("flagged index outside the universe");
  }
  for (auto i : truth) {
    if (i >= universe) throw Error("truth index outside the universe");
  }
  if (truth.empty()) {
    const std::string msg = "no positives: TPR defined as 0";
    if (warnings) warnings->push_back(msg);
    else std::cerr << "warning: " << msg << "\n";
    return 0.0;
  }
  const std::set<std::size_t> t(truth.begin(), truth.end());
  const std::set<std::size_t> f(flagged.begin(), flagged.end());
  std::size_t hit = 0;
  for (auto i : f) hit += t.count(i);
  return static_cast<double>(hit) / static_cast<double>(t.size());
}

struct DefenseReport {
  std::string kind;  // "perplexity" or "saliency"
  double param = 0;  // M (percent) or K (tokens; 0 when K is the trigger length)
  std::size_t universe = 0;
  // perplexity: flagged sample indices; saliency: unused
  std::vector<std::size_t> flagged;
  std::vector<double> scores;
  // saliency: flagged token positions per evaluated sample
  std::vector<std::vector<std::size_t>> per_sample_flagged;
  std::vector<double> per_sample_tpr;
  double tpr = 0;
  std::vector<std::string> warnings;
};

inline nlohmann::ordered_json to_json(const DefenseReport& r) {
  nlohmann::ordered_json j;
  j["kind"] = r.kind;
  j[r.kind == "perplexity" ? "M" : "K"] = r.param;
  j["universe"] = r.universe;
  j["tpr"] = r.tpr;
  if (r.kind == "perplexity") {
    j["flagged"] = r.flagged;
    j["scores"] = r.scores;
  } else {
    j["per_sample_flagged"] = r.per_sample_flagged;
    j["per_sample_tpr"] = r.per_sample_tpr;
  }
  j["warnings"] = r.warnings;
  return j;
}

// ---------------------------------------------------------------------------
// Perplexity filter

// Flags the ceil(M% * N) highest-perplexity samples (ties to the lower
// index); TPR is measured against the is_poisoned labels.
inline DefenseReport perplexity_filter(const Dataset& train, const NGramModel& model, double m_percent) {
  if (!(m_percent > 0 && m_percent < 100)) throw Error("M must be in (0, 100)");
  const std::size_t n = train.size();
  const auto count = static_cast<std::size_t>(std::ceil(m_percent / 100.0 * static_cast<double>(n) - 1e-9));
  if (count < 1) throw Error("dataset too small to flag any sample");
  DefenseReport r;
  r.kind = "perplexity";
  r.param = m_percent;
  r.universe = n;
  r.scores.reserve(n);
  for (const auto& s : train.samples) r.scores.push_back(ngram_perplexity(model, s.input_text));
  std::vector<std::size_t> order(n);
  for (std::size_t i = 0; i < n; ++i) order[i] = i;
  std::stable_sort(order.begin(), order.end(),
                   [&](std::size_t a, std::size_t b) { return r.scores[a] > r.scores[b]; });
  r.flagged.assign(order.begin(), order.begin() + static_cast<std::ptrdiff_t>(count));
  std::sort(r.flagged.begin(), r.flagged.end());
  std::vector<std::size_t> truth;
  for (std::size_t i = 0; i < n; ++i) {
    if (train[i].is_poisoned) truth.push_back(i);
  }
  r.tpr = defense_tpr(r.flagged, truth, n, &r.warnings);
  return r;
}

// ---------------------------------------------------------------------------
// Attention saliency

// score(j) = mean over layers, heads and queries i >= j of attention(i -> j),
// real positions only.
template <typename T>
std::vector<double> saliency_scores(const AttentionTrace<T>& trace) {
  const std::size_t n = trace.length;
  if (n == 0) throw Error("saliency of an empty sequence");
  std::vector<double> s(n, 0.0);
  for (std::size_t j = 0; j < n; ++j) {
    double sum = 0;
    for (std::size_t l = 0; l < trace.n_layers; ++l) {
      for (std::size_t h = 0; h < trace.n_heads; ++h) {
        for (std::size_t i = j; i < n; ++i) sum += static_cast<double>(trace.at(l, h, i, trace.n_prefix + j));
      }
    }
    s[j] = sum / static_cast<double>(trace.n_layers * trace.n_heads * (n - j));
  }
  return s;
}

template <typename T>
std::vector<double> saliency_scores(const PrefixLMParams<T>& params, const IdSeq& ids, bool use_prefix = true) {
  if (ids.empty()) throw Error("saliency of an empty sequence");
  return saliency_scores(forward(params, ids, use_prefix).trace);
}

struct SaliencyFiltered {
  TokenSeq tokens;
  std::vector<std::size_t> flagged;  // ascending
};

// Removes the k highest-scoring positions (ties to the lower position).
// Scores are compared at 12 decimal places, so means that differ only by
// summation rounding count as ties.
inline SaliencyFiltered saliency_filter(const TokenSeq& sample, const std::vector<double>& scores,
                                        std::size_t k) {
  if (scores.size() != sample.size()) throw Error("one score per token is required");
  if (k > sample.size()) throw Error("k exceeds sample length");
  std::vector<double> key(scores.size());
  for (std::size_t i = 0; i < key.size(); ++i) key[i] = std::nearbyint(scores[i] * 1e12);
  std::vector<std::size_t> order(sample.size());
  for (std::size_t i = 0; i < order.size(); ++i) order[i] = i;
  std::stable_sort(order.begin(), order.end(),
                   [&](std::size_t a, std::size_t b) { return key[a] > key[b]; });
  SaliencyFiltered out;
  out.flagged.assign(order.begin(), order.begin() + static_cast<std::ptrdiff_t>(k));
  std::sort(out.flagged.begin(), out.flagged.end());
  const std::set<std::size_t> drop(out.flagged.begin(), out.flagged.end());
  for (std::size_t i = 0; i < sample.size(); ++i) {
    if (!drop.count(i)) out.tokens.push_back(sample[i]);
  }
  return out;
}

// Runs the saliency filter over a poisoned test set. The model sees
// "BOS input SEP"; only input word positions are candidates. K defaults to
// the trigger's token count. Per-sample TPR is averaged over samples with a
// non-empty truth set.
template <typename T>
DefenseReport saliency_defense(const PrefixLM<T>& model, const PoisonResult& poisoned,
                               std::size_t trigger_tokens, std::optional<std::size_t> k_override = {},
                               std::vector<std::string>* filtered_inputs = nullptr) {
  DefenseReport r;
  r.kind = "saliency";
  r.param = static_cast<double>(k_override.value_or(0));
  r.universe = poisoned.dataset.size();
  const bool use_prefix = model.config().n_prefix > 0;
  double sum = 0;
  std::size_t counted = 0;
  for (std::size_t s = 0; s < poisoned.dataset.size(); ++s) {
    const TokenSeq words = tokenize_words(poisoned.dataset[s].input_text);
    const IdSeq prompt = encode_prompt(model.vocab, poisoned.dataset[s].input_text);
    const auto all = saliency_scores(model.params, prompt, use_prefix);
    std::vector<double> scores(all.begin() + 1, all.end() - 1);
    const std::size_t k = std::min(k_override.value_or(trigger_tokens), words.size());
    auto f = saliency_filter(words, scores, k);
    if (filtered_inputs) filtered_inputs->push_back(detokenize(f.tokens));
    const auto& truth = s < poisoned.trigger_positions.size() ? poisoned.trigger_positions[s]
                                                               : std::vector<std::size_t>{};
    double tpr = 0;
    if (truth.empty()) {
      r.warnings.push_back("sample " + std::to_string(s) + " has no trigger tokens; skipped in the mean");
    } else {
      tpr = defense_tpr(f.flagged, truth, words.size(), &r.warnings);
      sum += tpr;
      ++counted;
    }
    r.per_sample_flagged.push_back(std::move(f.flagged));
    r.per_sample_tpr.push_back(tpr);
  }
  r.tpr = counted ? sum / static_cast<double>(counted) : 0.0;
  if (!counted) r.warnings.push_back("no positives: TPR defined as 0");
  return r;
}

}  // namespace pbd
