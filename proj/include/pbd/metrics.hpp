#pragma once

// Attack success and stealthiness metrics: Target Match, ROUGE-N and model
// perplexity, plus the report that bundles them.

#include <cmath>
#include <functional>
#include <map>
#include <sstream>
#include <string>
#include <vector>

#include <nlohmann/json.hpp>

#include "pbd/error.hpp"
#include "pbd/model.hpp"
#include "pbd/text.hpp"
#include "pbd/train.hpp"
#include "pbd/trigger.hpp"

namespace pbd {

// Share of phrases present in one output (token-contiguous match).
inline double phrase_fraction(const std::string& output, const std::vector<TokenSeq>& phrases) {
  const TokenSeq out = tokenize_metric(output);
  std::size_t hit = 0;
  for (const auto& p : phrases) hit += contains_phrase(out, p) ? 1 : 0;
  return static_cast<double>(hit) / static_cast<double>(phrases.size());
}

inline double target_match(const std::vector<std::string>& outputs,
                           const std::vector<std::string>& phrases) {
  if (phrases.empty()) throw Error("target match needs at least one phrase");
  if (outputs.empty()) throw Error("target match needs at least one output");
  std::vector<TokenSeq> toks;
  for (const auto& p : phrases) {
    toks.push_back(tokenize_metric(p));
    if (toks.back().empty()) throw Error("target phrase '" + p + "' has no tokens");
  }
  double sum = 0;
  for (const auto& o : outputs) sum += phrase_fraction(o, toks);
  return sum / static_cast<double>(outputs.size());
}

struct RougeScore {
  double precision = 0;
  double recall = 0;
  double f1 = 0;
};

// Clipped n-gram overlap on metric tokens.
inline RougeScore rouge_n(const std::string& candidate, const std::string& reference, std::size_t n) {
  if (n < 1) throw Error("rouge n must be >= 1");
  auto grams = [n](const TokenSeq& t) {
    std::map<TokenSeq, std::size_t> m;
    for (std::size_t i = 0; i + n <= t.size(); ++i) {
      ++m[TokenSeq(t.begin() + static_cast<std::ptrdiff_t>(i),
                   t.begin() + static_cast<std::ptrdiff_t>(i + n))];
    }
    return m;
  };
  const TokenSeq c = tokenize_metric(candidate), r = tokenize_metric(reference);
  if (c.size() < n || r.size() < n) return {};
  const auto cg = grams(c), rg = grams(r);
  std::size_t overlap = 0;
  for (const auto& [g, k] : cg) {
    if (auto it = rg.find(g); it != rg.end()) overlap += std::min(k, it->second);
  }
  RougeScore s;
  s.precision = static_cast<double>(overlap) / static_cast<double>(c.size() - n + 1);
  s.recall = static_cast<double>(overlap) / static_cast<double>(r.size() - n + 1);
  if (overlap > 0) s.f1 = 2 * s.precision * s.recall / (s.precision + s.recall);
  return s;
}

// exp of the token-weighted mean NLL over the masked positions of every
// sample.
template <typename T>
double model_perplexity(const PrefixLM<T>& model, const Dataset& data, LossMask mask,
                        bool use_prefix = true) {
  if (data.empty()) throw Error("perplexity of an empty dataset");
  return std::exp(dataset_loss(model, data, mask, use_prefix && model.config().n_prefix > 0));
}

struct MetricsReport {
  Task task = Task::summarization;
  double p_target_match = 0;
  double c_target_match = 0;
  RougeScore c_rouge1;          // summarization only
  double c_perplexity = 0;      // completion only; 0 when not computed
  std::size_t n_poisoned = 0;
  std::size_t n_clean = 0;
  std::vector<std::string> poisoned_outputs;
  std::vector<std::string> clean_outputs;

  // the clean-task quality number the task is judged on
  double clean_metric() const { return task == Task::summarization ? c_rouge1.f1 : c_perplexity; }
};

inline nlohmann::ordered_json to_json(const MetricsReport& r, bool with_outputs = false) {
  nlohmann::ordered_json j;
  j["task"] = to_string(r.task);
  j["p_target_match"] = r.p_target_match;
  j["c_target_match"] = r.c_target_match;
  j["c_rouge1"] = {{"precision", r.c_rouge1.precision}, {"recall", r.c_rouge1.recall}, {"f1", r.c_rouge1.f1}};
  j["c_perplexity"] = r.c_perplexity;
  j["n_poisoned"] = r.n_poisoned;
  j["n_clean"] = r.n_clean;
  if (with_outputs) {
    j["poisoned_outputs"] = r.poisoned_outputs;
    j["clean_outputs"] = r.clean_outputs;
  }
  return j;
}

template <typename Json>
MetricsReport metrics_from_json(const Json& j) {
  MetricsReport r;
  r.task = parse_task(j.at("task").template get<std::string>());
  r.p_target_match = j.at("p_target_match").template get<double>();
  r.c_target_match = j.at("c_target_match").template get<double>();
  r.c_rouge1.precision = j.at("c_rouge1").at("precision").template get<double>();
  r.c_rouge1.recall = j.at("c_rouge1").at("recall").template get<double>();
  r.c_rouge1.f1 = j.at("c_rouge1").at("f1").template get<double>();
  r.c_perplexity = j.at("c_perplexity").template get<double>();
  r.n_poisoned = j.at("n_poisoned").template get<std::size_t>();
  r.n_clean = j.at("n_clean").template get<std::size_t>();
  if (j.contains("poisoned_outputs")) r.poisoned_outputs = j["poisoned_outputs"].template get<std::vector<std::string>>();
  if (j.contains("clean_outputs")) r.clean_outputs = j["clean_outputs"].template get<std::vector<std::string>>();
  return r;
}

inline const std::vector<std::string>& metrics_csv_columns() {
  static const std::vector<std::string> c{"p_target_match", "c_target_match", "c_rouge1_p", "c_rouge1_r",
                                          "c_rouge1_f1",    "c_perplexity",   "n_poisoned", "n_clean"};
  return c;
}

// Fixed-precision formatting so CSVs are byte-stable.
inline std::string fmt(double v, int digits = 6) {
  std::ostringstream o;
  o.setf(std::ios::fixed);
  o.precision(digits);
  o << v;
  return o.str();
}

inline std::vector<std::string> metrics_csv_values(const MetricsReport& r) {
  return {fmt(r.p_target_match), fmt(r.c_target_match), fmt(r.c_rouge1.precision),
          fmt(r.c_rouge1.recall), fmt(r.c_rouge1.f1),     fmt(r.c_perplexity),
          std::to_string(r.n_poisoned), std::to_string(r.n_clean)};
}

using Generator = std::function<std::string(const std::string& input)>;
using PerplexityFn = std::function<double(const Dataset& clean)>;

// Generates for every sample; Target Match on both sets, then ROUGE-1 against
// the references (summarization) or model perplexity (completion).
inline MetricsReport evaluate_attack(Task task, const Generator& gen, const Dataset& clean_test,
                                     const Dataset& poisoned_test,
                                     const std::vector<std::string>& phrases,
                                     const PerplexityFn& perplexity = nullptr) {
  if (task == Task::completion && !perplexity) {
    throw Error("completion metrics need a perplexity scorer");
  }
  if (clean_test.empty() || poisoned_test.empty()) throw Error("evaluation sets must not be empty");
  MetricsReport r;
  r.task = task;
  r.n_clean = clean_test.size();
  r.n_poisoned = poisoned_test.size();
  for (const auto& s : poisoned_test.samples) r.poisoned_outputs.push_back(gen(s.input_text));
  for (const auto& s : clean_test.samples) r.clean_outputs.push_back(gen(s.input_text));
  r.p_target_match = target_match(r.poisoned_outputs, phrases);
  r.c_target_match = target_match(r.clean_outputs, phrases);
  if (task == Task::summarization) {
    for (std::size_t i = 0; i < clean_test.size(); ++i) {
      const auto s = rouge_n(r.clean_outputs[i], clean_test[i].output_text, 1);
      r.c_rouge1.precision += s.precision;
      r.c_rouge1.recall += s.recall;
      r.c_rouge1.f1 += s.f1;
    }
    const auto n = static_cast<double>(clean_test.size());
    r.c_rouge1.precision /= n;
    r.c_rouge1.recall /= n;
    r.c_rouge1.f1 /= n;
  } else {
    r.c_perplexity = perplexity(clean_test);
  }
  return r;
}

template <typename T>
MetricsReport evaluate_attack(const PrefixLM<T>& model, Task task, const Dataset& clean_test,
                              const Dataset& poisoned_test, const std::vector<std::string>& phrases,
                              std::size_t max_new, bool use_prefix = true) {
  const bool prefix = use_prefix && model.config().n_prefix > 0;
  Generator gen = [&](const std::string& input) {
    IdSeq prompt = encode_prompt(model.vocab, input);
    return detokenize(model.vocab.decode(generate(model.params, prompt, max_new, prefix)));
  };
  PerplexityFn ppl = [&](const Dataset& d) {
    return model_perplexity(model, d, default_loss_mask(task), prefix);
  };
  return evaluate_attack(task, gen, clean_test, poisoned_test, phrases, ppl);
}

}  // namespace pbd
