#pragma once

// Experiment configuration, the single-run pipeline (poison, base model,
// prefix-tune, evaluate, defend), sweeps over the configured axes and report
// emission.

#include <algorithm>
#include <charconv>
#include <chrono>
#include <cstdlib>
#include <filesystem>
#include <fstream>
#include <functional>
#include <iostream>
#include <map>
#include <optional>
#include <set>
#include <sstream>
#include <string>
#include <vector>

#include <nlohmann/json.hpp>

#include "pbd/checkpoint.hpp"
#include "pbd/defense.hpp"
#include "pbd/error.hpp"
#include "pbd/metrics.hpp"
#include "pbd/model.hpp"
#include "pbd/text.hpp"
#include "pbd/train.hpp"
#include "pbd/trigger.hpp"

namespace pbd {

namespace fs = std::filesystem;

inline constexpr int kConfigVersion = 1;

// ---------------------------------------------------------------------------
// Configuration

struct ExperimentConfig {
  Task task = Task::summarization;
  std::string dataset;       // train file; empty means synthetic
  std::string test_dataset;  // required with dataset
  std::size_t train_size = 500;
  std::size_t test_size = 100;
  std::size_t base_size = 500;
  std::size_t background_replicas = 80;

  std::vector<std::string> triggers{"x-M"};
  std::vector<double> trigger_scales{1.0};
  std::vector<std::string> strategies{"fixed"};
  std::vector<double> poison_fractions{0.1};  // 0 is the unpoisoned control
  std::vector<std::size_t> virtual_tokens{32};
  std::vector<std::uint64_t> seeds{1};
  bool sentence_boundary = false;

  std::size_t pretrain_epochs = 20;
  double pretrain_lr = 0.01;
  std::size_t tune_epochs = 20;
  double tune_lr = 0.05;
  double weight_decay = 0.01;
  std::size_t batch_size = 32;

  std::size_t d_model = 64;
  std::size_t n_layers = 2;
  std::size_t n_heads = 2;
  std::size_t d_ff = 128;
  std::size_t max_len = 256;
  std::string precision = "float";

  std::size_t max_new_tokens = 96;
  std::size_t ppl_order = 5;
  double ppl_m_percent = 10;
  std::size_t saliency_k = 0;  // 0: the trigger's token count
  std::size_t sweep_cap = 64;

  std::size_t point_count() const {
    return triggers.size() * trigger_scales.size() * strategies.size() * poison_fractions.size() *
           virtual_tokens.size() * seeds.size();
  }

  TrainHyper pretrain_hyper(std::uint64_t seed) const {
    TrainHyper h;
    h.learning_rate = pretrain_lr;
    h.weight_decay = weight_decay;
    h.batch_size = batch_size;
    h.epochs = pretrain_epochs;
    h.seed = seed;
    h.mask = LossMask::full;
    return h;
  }

  TrainHyper tune_hyper(std::uint64_t seed) const {
    TrainHyper h;
    h.learning_rate = tune_lr;
    h.weight_decay = weight_decay;
    h.batch_size = batch_size;
    h.epochs = tune_epochs;
    h.seed = seed;
    h.mask = default_loss_mask(task);
    return h;
  }

  PrefixLMConfig model_config(std::size_t vocab_size) const {
    PrefixLMConfig c;
    c.vocab_size = vocab_size;
    c.d_model = d_model;
    c.n_layers = n_layers;
    c.n_heads = n_heads;
    c.d_ff = d_ff;
    c.max_len = max_len;
    return c;
  }

  void validate() const {
    auto need = [](bool ok, const std::string& msg) {
      if (!ok) throw Error("config: " + msg);
    };
    need(dataset.empty() == test_dataset.empty(), "dataset and test_dataset must be given together");
    need(train_size > 0 && test_size > 0 && base_size > 0, "sizes must be positive");
    need(!triggers.empty() && !trigger_scales.empty() && !strategies.empty() &&
             !poison_fractions.empty() && !virtual_tokens.empty() && !seeds.empty(),
         "every axis needs at least one value");
    for (const auto& t : triggers) find_trigger(t);
    for (double z : trigger_scales) need(z > 0 && z <= 1, "trigger scales must be in (0, 1]");
    for (const auto& s : strategies) parse_strategy(s);
    for (double f : poison_fractions) need(f >= 0 && f < 1, "poison fractions must be in [0, 1)");
    for (std::size_t m : virtual_tokens) need(m >= 1, "virtual_tokens must be >= 1");
    need(pretrain_epochs > 0 && tune_epochs > 0 && batch_size > 0, "epochs and batch size must be positive");
    need(pretrain_lr > 0 && tune_lr > 0 && weight_decay > 0, "learning rates and weight decay must be positive");
    need(precision == "float" || precision == "double", "precision must be float or double");
    need(max_new_tokens > 0, "max_new_tokens must be positive");
    need(ppl_order >= 1, "ppl_order must be >= 1");
    need(ppl_m_percent > 0 && ppl_m_percent < 100, "ppl_m_percent must be in (0, 100)");
    need(sweep_cap >= 1, "sweep_cap must be >= 1");
    model_config(Vocab::kReserved + 1).validate();
  }
};

namespace config_detail {

inline std::string trim(std::string_view s) {
  std::size_t a = 0, b = s.size();
  while (a < b && std::isspace(static_cast<unsigned char>(s[a]))) ++a;
  while (b > a && std::isspace(static_cast<unsigned char>(s[b - 1]))) --b;
  return std::string(s.substr(a, b - a));
}

inline std::vector<std::string> split_list(const std::string& v) {
  std::vector<std::string> out;
  std::string cur;
  std::istringstream in(v);
  while (std::getline(in, cur, ',')) {
    cur = trim(cur);
    if (cur.empty()) throw Error("empty list element");
    out.push_back(cur);
  }
  if (out.empty()) throw Error("empty list");
  return out;
}

inline double to_double(const std::string& s) {
  double v = 0;
  auto [p, ec] = std::from_chars(s.data(), s.data() + s.size(), v);
  if (ec != std::errc() || p != s.data() + s.size()) throw Error("'" + s + "' is not a number");
  return v;
}

inline std::uint64_t to_uint(const std::string& s) {
  std::uint64_t v = 0;
  auto [p, ec] = std::from_chars(s.data(), s.data() + s.size(), v);
  if (ec != std::errc() || p != s.data() + s.size()) throw Error("'" + s + "' is not a non-negative integer");
  return v;
}

inline bool to_bool(const std::string& s) {
  if (s == "true") return true;
  if (s == "false") return false;
  throw Error("'" + s + "' is not true or false");
}

template <typename T, typename F>
std::vector<T> map_list(const std::string& v, F f) {
  std::vector<T> out;
  for (const auto& s : split_list(v)) out.push_back(static_cast<T>(f(s)));
  return out;
}

}  // namespace config_detail

// "key = value" lines, '#' comments, comma-separated lists. The version key
// is required; unknown and repeated keys are errors.
inline ExperimentConfig parse_config(std::istream& in, const std::string& source = "config") {
  using namespace config_detail;
  ExperimentConfig c;
  using Setter = std::function<void(const std::string&)>;
  auto sz = [](std::size_t& dst) { return Setter([&dst](const std::string& v) { dst = to_uint(v); }); };
  auto dbl = [](double& dst) { return Setter([&dst](const std::string& v) { dst = to_double(v); }); };
  auto str = [](std::string& dst) { return Setter([&dst](const std::string& v) { dst = v; }); };
  std::optional<int> version;
  const std::map<std::string, Setter> setters{
      {"version", [&](const std::string& v) { version = static_cast<int>(to_uint(v)); }},
      {"task", [&](const std::string& v) { c.task = parse_task(v); }},
      {"dataset", str(c.dataset)},
      {"test_dataset", str(c.test_dataset)},
      {"train_size", sz(c.train_size)},
      {"test_size", sz(c.test_size)},
      {"base_size", sz(c.base_size)},
      {"background_replicas", sz(c.background_replicas)},
      {"triggers", [&](const std::string& v) { c.triggers = split_list(v); }},
      {"trigger_scales", [&](const std::string& v) { c.trigger_scales = map_list<double>(v, to_double); }},
      {"strategies", [&](const std::string& v) { c.strategies = split_list(v); }},
      {"poison_fractions", [&](const std::string& v) { c.poison_fractions = map_list<double>(v, to_double); }},
      {"virtual_tokens", [&](const std::string& v) { c.virtual_tokens = map_list<std::size_t>(v, to_uint); }},
      {"seeds", [&](const std::string& v) { c.seeds = map_list<std::uint64_t>(v, to_uint); }},
      {"sentence_boundary", [&](const std::string& v) { c.sentence_boundary = to_bool(v); }},
      {"pretrain_epochs", sz(c.pretrain_epochs)},
      {"pretrain_lr", dbl(c.pretrain_lr)},
      {"tune_epochs", sz(c.tune_epochs)},
      {"tune_lr", dbl(c.tune_lr)},
      {"weight_decay", dbl(c.weight_decay)},
      {"batch_size", sz(c.batch_size)},
      {"d_model", sz(c.d_model)},
      {"n_layers", sz(c.n_layers)},
      {"n_heads", sz(c.n_heads)},
      {"d_ff", sz(c.d_ff)},
      {"max_len", sz(c.max_len)},
      {"precision", str(c.precision)},
      {"max_new_tokens", sz(c.max_new_tokens)},
      {"ppl_order", sz(c.ppl_order)},
      {"ppl_m_percent", dbl(c.ppl_m_percent)},
      {"saliency_k", sz(c.saliency_k)},
      {"sweep_cap", sz(c.sweep_cap)},
  };
  std::set<std::string> seen;
  std::string line;
  std::size_t lineno = 0;
  while (std::getline(in, line)) {
    ++lineno;
    const std::string where = source + ":" + std::to_string(lineno) + ": ";
    if (auto hash = line.find('#'); hash != std::string::npos) line.resize(hash);
    line = trim(line);
    if (line.empty()) continue;
    const auto eq = line.find('=');
    if (eq == std::string::npos) throw Error(where + "expected key = value");
    const std::string key = trim(std::string_view(line).substr(0, eq));
    const std::string value = trim(std::string_view(line).substr(eq + 1));
    auto it = setters.find(key);
    if (it == setters.end()) throw Error(where + "unknown key '" + key + "'");
    if (!seen.insert(key).second) throw Error(where + "duplicate key '" + key + "'");
    if (value.empty()) throw Error(where + "empty value for '" + key + "'");
    try {
      it->second(value);
    } catch (const Error& e) {
      throw Error(where + key + ": " + e.what());
    }
  }
  if (!version) throw Error(source + ": missing version");
  if (*version != kConfigVersion) {
    throw Error(source + ": unsupported config version " + std::to_string(*version));
  }
  c.validate();
  return c;
}

inline ExperimentConfig parse_config_text(const std::string& text, const std::string& source = "config") {
  std::istringstream in(text);
  return parse_config(in, source);
}

inline ExperimentConfig load_config(const fs::path& path) {
  std::ifstream in(path);
  if (!in) throw Error("cannot open config " + path.string());
  return parse_config(in, path.string());
}

namespace config_detail {
template <typename T>
std::string join(const std::vector<T>& v) {
  std::string out;
  for (std::size_t i = 0; i < v.size(); ++i) {
    if (i) out += ",";
    if constexpr (std::is_same_v<T, std::string>) {
      out += v[i];
    } else {
      out += nlohmann::json(v[i]).dump();
    }
  }
  return out;
}
}  // namespace config_detail

// Canonical text form; parse_config(to_text(c)) == c.
inline std::string to_text(const ExperimentConfig& c) {
  using config_detail::join;
  auto num = [](double v) { return nlohmann::json(v).dump(); };
  std::ostringstream o;
  o << "version = " << kConfigVersion << "\n"
    << "task = " << to_string(c.task) << "\n";
  if (!c.dataset.empty()) o << "dataset = " << c.dataset << "\ntest_dataset = " << c.test_dataset << "\n";
  o << "train_size = " << c.train_size << "\n"
    << "test_size = " << c.test_size << "\n"
    << "base_size = " << c.base_size << "\n"
    << "background_replicas = " << c.background_replicas << "\n"
    << "triggers = " << join(c.triggers) << "\n"
    << "trigger_scales = " << join(c.trigger_scales) << "\n"
    << "strategies = " << join(c.strategies) << "\n"
    << "poison_fractions = " << join(c.poison_fractions) << "\n"
    << "virtual_tokens = " << join(c.virtual_tokens) << "\n"
    << "seeds = " << join(c.seeds) << "\n"
    << "sentence_boundary = " << (c.sentence_boundary ? "true" : "false") << "\n"
    << "pretrain_epochs = " << c.pretrain_epochs << "\n"
    << "pretrain_lr = " << num(c.pretrain_lr) << "\n"
    << "tune_epochs = " << c.tune_epochs << "\n"
    << "tune_lr = " << num(c.tune_lr) << "\n"
    << "weight_decay = " << num(c.weight_decay) << "\n"
    << "batch_size = " << c.batch_size << "\n"
    << "d_model = " << c.d_model << "\n"
    << "n_layers = " << c.n_layers << "\n"
    << "n_heads = " << c.n_heads << "\n"
    << "d_ff = " << c.d_ff << "\n"
    << "max_len = " << c.max_len << "\n"
    << "precision = " << c.precision << "\n"
    << "max_new_tokens = " << c.max_new_tokens << "\n"
    << "ppl_order = " << c.ppl_order << "\n"
    << "ppl_m_percent = " << num(c.ppl_m_percent) << "\n"
    << "saliency_k = " << c.saliency_k << "\n"
    << "sweep_cap = " << c.sweep_cap << "\n";
  return o.str();
}

// ---------------------------------------------------------------------------
// Data

// Base-model corpus: a task split disjoint from the attack data plus
// replicas of the background notes, each after 0-6 random task sentences so
// the notes are seen at many positions.
inline Dataset base_corpus(Task task, std::size_t size, std::uint64_t seed, std::size_t replicas) {
  const Rng root = Rng(seed).derive("base-corpus");
  Dataset ds = generate_synthetic(task, size, root.derive("task").next());
  ds.name = "base-corpus";
  const auto notes = background_notes();
  for (std::size_t r = 0; r < replicas; ++r) {
    for (std::size_t k = 0; k < notes.size(); ++k) {
      Rng rng = root.derive("note", r * notes.size() + k);
      TokenSeq input;
      const auto n_filler = rng.below(7);
      for (std::uint64_t f = 0; f < n_filler; ++f) {
        auto sent = synth::fill(rng.pick(synth::sentence_templates()), synth::draw_slots(rng));
        input.insert(input.end(), sent.begin(), sent.end());
      }
      auto lead = tokenize_words(notes[k].first);
      input.insert(input.end(), lead.begin(), lead.end());
      ds.samples.push_back({detokenize(input), notes[k].second, false});
    }
  }
  return ds;
}

// Base vocabulary: base corpus, clean attack train set and the built-in
// trigger texts.
inline Vocab base_vocab(const Dataset& base, const Dataset& clean_train) {
  std::vector<std::string> extra;
  for (const auto& s : clean_train.samples) {
    extra.push_back(s.input_text);
    extra.push_back(s.output_text);
  }
  for (const auto& t : builtin_triggers()) extra.push_back(t.text());
  extra.push_back(default_target_output());
  return build_vocab(base, 1, extra);
}

inline std::uint64_t fnv1a(std::string_view s) {
  std::uint64_t h = 14695981039346656037ull;
  for (unsigned char c : s) {
    h ^= c;
    h *= 1099511628211ull;
  }
  return h;
}

inline std::uint64_t dataset_hash(const Dataset& d) {
  std::string s;
  for (const auto& x : d.samples) s += x.input_text + '\x1f' + x.output_text + '\x1e';
  return fnv1a(s);
}

struct TaskData {
  Dataset train;
  Dataset test;
};

inline TaskData load_task_data(const ExperimentConfig& c, std::uint64_t seed) {
  TaskData d;
  if (c.dataset.empty()) {
    d.train = generate_synthetic(c.task, c.train_size, seed);
    d.test = generate_synthetic_test(c.task, c.test_size, seed);
  } else {
    d.train = load_dataset(c.dataset, Split::train);
    d.test = load_dataset(c.test_dataset, Split::test);
    for (auto& s : d.train.samples) s.is_poisoned = false;
  }
  return d;
}

// ---------------------------------------------------------------------------
// Cache locations

inline fs::path cache_dir(const fs::path& out) {
  if (const char* env = std::getenv("PBD_CACHE_DIR"); env && *env) return fs::path(env);
  return out / "cache";
}

// ---------------------------------------------------------------------------
// Run points and records

struct RunPoint {
  std::string trigger = "x-M";
  double trigger_scale = 1.0;
  std::string strategy = "fixed";
  double poison_fraction = 0.1;
  std::size_t virtual_tokens = 32;
  std::uint64_t seed = 1;

  bool is_control() const { return poison_fraction == 0.0; }
};

inline nlohmann::ordered_json to_json(const RunPoint& p) {
  return {{"trigger", p.trigger},
          {"trigger_scale", p.trigger_scale},
          {"strategy", p.strategy},
          {"poison_fraction", p.poison_fraction},
          {"virtual_tokens", p.virtual_tokens},
          {"seed", p.seed}};
}

template <typename Json>
RunPoint run_point_from_json(const Json& j) {
  RunPoint p;
  p.trigger = j.at("trigger").template get<std::string>();
  p.trigger_scale = j.at("trigger_scale").template get<double>();
  p.strategy = j.at("strategy").template get<std::string>();
  p.poison_fraction = j.at("poison_fraction").template get<double>();
  p.virtual_tokens = j.at("virtual_tokens").template get<std::size_t>();
  p.seed = j.at("seed").template get<std::uint64_t>();
  return p;
}

inline Trigger point_trigger(const RunPoint& p) {
  Trigger t = find_trigger(p.trigger);
  return p.trigger_scale == 1.0 ? t : scale_trigger(t, p.trigger_scale);
}

inline PoisonSpec point_spec(const ExperimentConfig& c, const RunPoint& p) {
  PoisonSpec s;
  s.trigger = point_trigger(p);
  s.strategy = parse_strategy(p.strategy);
  // the control still needs a poisoned test set to measure P-Target Match
  s.poison_fraction = p.is_control() ? 0.1 : p.poison_fraction;
  s.seed = p.seed;
  s.sentence_boundary = c.sentence_boundary;
  return s;
}

// Settings the base model depends on.
inline nlohmann::ordered_json base_key_json(const ExperimentConfig& c, std::uint64_t seed,
                                            std::uint64_t train_hash) {
  return {{"task", to_string(c.task)},
          {"base_size", c.base_size},
          {"background_replicas", c.background_replicas},
          {"train_hash", hex64(train_hash)},
          {"seed", seed},
          {"pretrain_epochs", c.pretrain_epochs},
          {"pretrain_lr", c.pretrain_lr},
          {"weight_decay", c.weight_decay},
          {"batch_size", c.batch_size},
          {"model", config_to_json(c.model_config(0))},
          {"precision", c.precision}};
}

// Everything a single run's outcome depends on.
inline nlohmann::ordered_json run_key_json(const ExperimentConfig& c, const RunPoint& p,
                                           std::uint64_t train_hash, std::uint64_t test_hash) {
  nlohmann::ordered_json j = base_key_json(c, p.seed, train_hash);
  j["point"] = to_json(p);
  j["test_hash"] = hex64(test_hash);
  j["sentence_boundary"] = c.sentence_boundary;
  j["tune_epochs"] = c.tune_epochs;
  j["tune_lr"] = c.tune_lr;
  j["max_new_tokens"] = c.max_new_tokens;
  j["ppl_order"] = c.ppl_order;
  j["ppl_m_percent"] = c.ppl_m_percent;
  j["saliency_k"] = c.saliency_k;
  return j;
}

inline std::string run_name(const RunPoint& p) {
  std::string s = p.trigger + "_z" + nlohmann::json(p.trigger_scale).dump() + "_" + p.strategy + "_p" +
                  nlohmann::json(p.poison_fraction).dump() + "_m" + std::to_string(p.virtual_tokens) +
                  "_s" + std::to_string(p.seed);
  for (auto& ch : s) {
    if (!(std::isalnum(static_cast<unsigned char>(ch)) || ch == '-' || ch == '_' || ch == '.')) ch = '-';
  }
  return s;
}

struct RunRecord {
  std::string key;  // hex hash of the run key
  std::string name;
  Task task = Task::summarization;
  RunPoint point;
  std::string trigger_text;
  std::size_t trigger_tokens = 0;
  std::size_t n_clean = 0;
  std::size_t n_poison = 0;
  double measured_poison_pct = 0;
  double wlr = 0;
  MetricsReport metrics;
  double ppl_tpr = 0;
  std::size_t ppl_flagged = 0;
  double saliency_tpr = 0;
  std::size_t saliency_k = 0;
  std::string base_key;
  std::string theta_checksum;
  std::string phi_checksum;
  std::vector<double> pretrain_loss;  // first and last epoch
  std::vector<double> tune_loss;
  nlohmann::ordered_json hyper;
  std::vector<std::string> artifacts;
  double wall_clock_s = 0;
};

inline nlohmann::ordered_json paper_default_hyper() {
  return {{"learning_rate", 0.01}, {"weight_decay", 0.01}, {"batch_size", 32},
          {"epochs_summarization", 10}, {"epochs_completion", 20}};
}

inline nlohmann::ordered_json to_json(const RunRecord& r) {
  nlohmann::ordered_json j;
  j["key"] = r.key;
  j["name"] = r.name;
  j["task"] = to_string(r.task);
  j["point"] = to_json(r.point);
  j["trigger_text"] = r.trigger_text;
  j["trigger_tokens"] = r.trigger_tokens;
  j["n_clean"] = r.n_clean;
  j["n_poison"] = r.n_poison;
  j["measured_poison_pct"] = r.measured_poison_pct;
  j["wlr"] = r.wlr;
  j["metrics"] = to_json(r.metrics);
  j["ppl_tpr"] = r.ppl_tpr;
  j["ppl_flagged"] = r.ppl_flagged;
  j["saliency_tpr"] = r.saliency_tpr;
  j["saliency_k"] = r.saliency_k;
  j["base_key"] = r.base_key;
  j["theta_checksum"] = r.theta_checksum;
  j["phi_checksum"] = r.phi_checksum;
  j["pretrain_loss"] = r.pretrain_loss;
  j["tune_loss"] = r.tune_loss;
  j["hyper"] = r.hyper;
  j["artifacts"] = r.artifacts;
  j["wall_clock_s"] = r.wall_clock_s;
  return j;
}

template <typename Json>
RunRecord run_record_from_json(const Json& j) {
  RunRecord r;
  r.key = j.at("key").template get<std::string>();
  r.name = j.at("name").template get<std::string>();
  r.task = parse_task(j.at("task").template get<std::string>());
  r.point = run_point_from_json(j.at("point"));
  r.trigger_text = j.at("trigger_text").template get<std::string>();
  r.trigger_tokens = j.at("trigger_tokens").template get<std::size_t>();
  r.n_clean = j.at("n_clean").template get<std::size_t>();
  r.n_poison = j.at("n_poison").template get<std::size_t>();
  r.measured_poison_pct = j.at("measured_poison_pct").template get<double>();
  r.wlr = j.at("wlr").template get<double>();
  r.metrics = metrics_from_json(j.at("metrics"));
  r.ppl_tpr = j.at("ppl_tpr").template get<double>();
  r.ppl_flagged = j.at("ppl_flagged").template get<std::size_t>();
  r.saliency_tpr = j.at("saliency_tpr").template get<double>();
  r.saliency_k = j.at("saliency_k").template get<std::size_t>();
  r.base_key = j.at("base_key").template get<std::string>();
  r.theta_checksum = j.at("theta_checksum").template get<std::string>();
  r.phi_checksum = j.at("phi_checksum").template get<std::string>();
  r.pretrain_loss = j.at("pretrain_loss").template get<std::vector<double>>();
  r.tune_loss = j.at("tune_loss").template get<std::vector<double>>();
  r.hyper = nlohmann::ordered_json::parse(j.at("hyper").dump());
  r.artifacts = j.at("artifacts").template get<std::vector<std::string>>();
  r.wall_clock_s = j.at("wall_clock_s").template get<double>();
  return r;
}

inline const std::vector<std::string>& record_csv_columns() {
  static const std::vector<std::string> cols = [] {
    std::vector<std::string> c{"key",       "task",       "trigger",         "trigger_scale",
                               "strategy",  "poison_fraction", "virtual_tokens", "seed",
                               "trigger_tokens", "n_clean", "n_poison",      "measured_poison_pct",
                               "wlr"};
    for (const auto& m : metrics_csv_columns()) c.push_back(m);
    for (const char* x : {"ppl_m_percent", "ppl_flagged", "ppl_tpr", "saliency_k", "saliency_tpr",
                          "theta_checksum", "phi_checksum"}) {
      c.push_back(x);
    }
    return c;
  }();
  return cols;
}

inline std::string csv_escape(const std::string& s) {
  if (s.find_first_of(",\"\n") == std::string::npos) return s;
  std::string out = "\"";
  for (char ch : s) {
    if (ch == '"') out += '"';
    out += ch;
  }
  return out + "\"";
}

inline std::vector<std::string> record_csv_values(const RunRecord& r, double ppl_m_percent) {
  std::vector<std::string> v{r.key,
                             to_string(r.task),
                             r.point.trigger,
                             fmt(r.point.trigger_scale, 4),
                             r.point.strategy,
                             fmt(r.point.poison_fraction, 4),
                             std::to_string(r.point.virtual_tokens),
                             std::to_string(r.point.seed),
                             std::to_string(r.trigger_tokens),
                             std::to_string(r.n_clean),
                             std::to_string(r.n_poison),
                             fmt(r.measured_poison_pct, 4),
                             fmt(r.wlr)};
  for (auto& m : metrics_csv_values(r.metrics)) v.push_back(std::move(m));
  v.push_back(fmt(ppl_m_percent, 2));
  v.push_back(std::to_string(r.ppl_flagged));
  v.push_back(fmt(r.ppl_tpr));
  v.push_back(std::to_string(r.saliency_k));
  v.push_back(fmt(r.saliency_tpr));
  v.push_back(r.theta_checksum);
  v.push_back(r.phi_checksum);
  return v;
}

// ---------------------------------------------------------------------------
// Pipeline

struct RunOptions {
  fs::path out;            // runs are written under out/runs
  bool force = false;      // ignore an existing record
  std::ostream* log = nullptr;
};

namespace harness_detail {

inline void say(const RunOptions& o, const std::string& msg) {
  if (o.log) *o.log << msg << std::endl;
}

// Runs f and rethrows any failure with the stage name and run name.
template <typename F>
auto stage(const std::string& name, const std::string& run, F&& f) -> decltype(f()) {
  try {
    return f();
  } catch (const std::exception& e) {
    throw Error("run " + run + ": stage " + name + " failed: " + e.what());
  }
}

template <typename T>
PrefixLM<T> load_or_pretrain_base(const ExperimentConfig& c, std::uint64_t seed, const Dataset& clean_train,
                                  const RunOptions& o, std::string& key_out, std::vector<double>& loss_out) {
  const auto key_json = base_key_json(c, seed, dataset_hash(clean_train));
  key_out = hex64(fnv1a(key_json.dump()));
  const fs::path dir = cache_dir(o.out);
  const fs::path ckpt = dir / ("base-" + key_out + ".json");
  const fs::path meta = dir / ("base-" + key_out + ".meta.json");
  if (fs::exists(ckpt) && fs::exists(meta)) {
    loss_out = read_json_file(meta).at("loss").get<std::vector<double>>();
    return load_checkpoint<T>(ckpt);
  }
  say(o, "pretraining base " + key_out);
  const Dataset corpus = base_corpus(c.task, c.base_size, seed, c.background_replicas);
  const Vocab vocab = base_vocab(corpus, clean_train);
  PrefixLM<T> model{vocab, init_params<T>(c.model_config(vocab.size()), Rng(seed).derive("base-init").next())};
  const TrainLog log = pretrain(model, corpus, c.pretrain_hyper(seed));
  loss_out = {log.epoch_loss.front(), log.epoch_loss.back()};
  nlohmann::ordered_json m;
  m["key"] = key_json;
  m["loss"] = loss_out;
  m["epoch_loss"] = log.epoch_loss;
  // write the checkpoint last so a partial write is never taken for a hit
  write_json_file(meta, m, 2);
  save_checkpoint(model, ckpt);
  return model;
}

template <typename T>
RunRecord run_single_t(const ExperimentConfig& c, const RunPoint& p, const RunOptions& o) {
  const auto t0 = std::chrono::steady_clock::now();
  const std::string name = run_name(p);
  const TaskData data = stage("data", name, [&] { return load_task_data(c, p.seed); });
  const auto key_json = run_key_json(c, p, dataset_hash(data.train), dataset_hash(data.test));
  const std::string key = hex64(fnv1a(key_json.dump()));
  const fs::path dir = o.out / "runs" / (name + "-" + key.substr(0, 8));
  const fs::path record_path = dir / "record.json";
  if (!o.force && fs::exists(record_path)) {
    say(o, "cached " + name);
    return run_record_from_json(read_ordered_json_file(record_path));
  }
  say(o, "running " + name);

  RunRecord r;
  r.key = key;
  r.name = name;
  r.task = c.task;
  r.point = p;
  r.n_clean = data.train.size();

  const PoisonSpec spec = stage("poison", name, [&] { return point_spec(c, p); });
  r.trigger_text = spec.trigger.text();
  r.trigger_tokens = spec.trigger.size();
  PoisonResult train_p;
  if (p.is_control()) {
    train_p.dataset = data.train;
  } else {
    train_p = stage("poison", name, [&] { return poison_dataset(data.train, spec); });
  }
  const PoisonResult test_p = stage("poison", name, [&] { return poison_test_set(data.test, spec); });
  r.n_poison = train_p.poisoned_indices.size();
  r.measured_poison_pct = 100.0 * static_cast<double>(r.n_poison) / static_cast<double>(train_p.dataset.size());
  r.wlr = p.is_control() ? 0.0 : train_p.wlr;

  PrefixLM<T> base = stage("pretrain", name, [&] {
    return load_or_pretrain_base<T>(c, p.seed, data.train, o, r.base_key, r.pretrain_loss);
  });
  r.theta_checksum = hex64(checksum(base.params.theta));

  PrefixLM<T> model{base.vocab, {}};
  stage("tune", name, [&] {
    model.params = attach_prefix(base.params, p.virtual_tokens, Rng(p.seed).derive("prefix-init").next());
    const TrainLog log = prefix_tune(model, train_p.dataset, c.tune_hyper(p.seed));
    r.tune_loss = {log.epoch_loss.front(), log.epoch_loss.back()};
    if (hex64(checksum(model.params.theta)) != r.theta_checksum) throw Error("theta changed during tuning");
  });
  r.phi_checksum = hex64(checksum(model.params.phi));

  r.metrics = stage("eval", name, [&] {
    return evaluate_attack(model, c.task, data.test, test_p.dataset, spec.target_phrases, c.max_new_tokens);
  });

  const DefenseReport ppl = stage("defend-ppl", name, [&] {
    return perplexity_filter(train_p.dataset, train_ngram(train_p.dataset, c.ppl_order), c.ppl_m_percent);
  });
  r.ppl_tpr = ppl.tpr;
  r.ppl_flagged = ppl.flagged.size();

  std::vector<std::string> filtered;
  const std::optional<std::size_t> k_override =
      c.saliency_k ? std::optional<std::size_t>(c.saliency_k) : std::nullopt;
  const DefenseReport sal = stage("defend-saliency", name, [&] {
    return saliency_defense(model, test_p, spec.trigger.size(), k_override, &filtered);
  });
  r.saliency_tpr = sal.tpr;
  r.saliency_k = c.saliency_k ? c.saliency_k : spec.trigger.size();

  r.hyper = {{"pretrain", {{"learning_rate", c.pretrain_lr}, {"epochs", c.pretrain_epochs}}},
             {"tune", {{"learning_rate", c.tune_lr}, {"epochs", c.tune_epochs}}},
             {"weight_decay", c.weight_decay},
             {"batch_size", c.batch_size},
             {"paper_defaults", paper_default_hyper()}};

  stage("write", name, [&] {
    fs::create_directories(dir);
    save_dataset(train_p.dataset, dir / "train_poisoned.jsonl", true);
    save_dataset(test_p.dataset, dir / "test_poisoned.jsonl", true);
    if (!p.is_control()) write_json_file(dir / "poison_manifest.json", poison_manifest(spec, train_p, r.n_clean), 2);
    write_json_file(dir / "metrics.json", to_json(r.metrics, true), 2);
    write_json_file(dir / "defense_ppl.json", to_json(ppl), 2);
    auto sal_json = to_json(sal);
    sal_json["filtered_inputs"] = filtered;
    write_json_file(dir / "defense_saliency.json", sal_json, 2);
    write_json_file(dir / "run_key.json", key_json, 2);
    save_checkpoint(model, dir / "model.json");
    r.artifacts = {"train_poisoned.jsonl", "test_poisoned.jsonl", "metrics.json", "defense_ppl.json",
                   "defense_saliency.json", "run_key.json", "model.json", "record.json"};
    if (!p.is_control()) r.artifacts.insert(r.artifacts.begin() + 2, "poison_manifest.json");
    r.wall_clock_s = std::chrono::duration<double>(std::chrono::steady_clock::now() - t0).count();
    write_json_file(record_path, to_json(r), 2);
  });
  return r;
}

}  // namespace harness_detail

inline RunRecord run_single(const ExperimentConfig& c, const RunPoint& p, const RunOptions& o) {
  c.validate();
  if (c.precision == "double") return harness_detail::run_single_t<double>(c, p, o);
  return harness_detail::run_single_t<float>(c, p, o);
}

// ---------------------------------------------------------------------------
// Sweeps

// Cross product in axis order trigger, scale, strategy, poison, m, seed,
// each axis in listed order.
inline std::vector<RunPoint> sweep_points(const ExperimentConfig& c) {
  if (c.point_count() > c.sweep_cap) {
    throw Error("sweep has " + std::to_string(c.point_count()) + " points, above the cap of " +
                std::to_string(c.sweep_cap));
  }
  std::vector<RunPoint> pts;
  for (const auto& t : c.triggers)
    for (double z : c.trigger_scales)
      for (const auto& s : c.strategies)
        for (double f : c.poison_fractions)
          for (std::size_t m : c.virtual_tokens)
            for (std::uint64_t seed : c.seeds) pts.push_back({t, z, s, f, m, seed});
  return pts;
}

inline std::vector<RunRecord> sweep(const ExperimentConfig& c, const RunOptions& o) {
  c.validate();
  std::vector<RunRecord> out;
  for (const auto& p : sweep_points(c)) out.push_back(run_single(c, p, o));
  return out;
}

// Axis value of a record as a string, and the coordinates without that axis.
inline const std::vector<std::string>& sweep_axes() {
  static const std::vector<std::string> a{"trigger", "trigger_scale", "strategy", "poison_fraction",
                                          "virtual_tokens", "seed"};
  return a;
}

inline std::string axis_value(const RunPoint& p, const std::string& axis) {
  const auto j = to_json(p);
  const auto& v = j.at(axis);
  return v.is_string() ? v.get<std::string>() : v.dump();
}

inline std::string coords_without(const RunPoint& p, const std::string& axis) {
  auto j = to_json(p);
  j.erase(axis);
  return j.dump();
}

struct TrendPair {
  std::string axis;
  std::string a, b;  // b is later in the listed axis order
  std::size_t n = 0;
  std::size_t b_ge_a = 0;
  std::size_t a_ge_b = 0;
  std::size_t seeds = 0;             // distinct seeds compared
  std::size_t seeds_b_ge_a = 0;      // seeds where b >= a held in the majority of comparisons
};

// Pairwise sign counts of metric between records that differ only on one
// axis, for every pair of values of every axis except seed.
inline std::vector<TrendPair> trend_summary(const std::vector<RunRecord>& records,
                                            const std::function<double(const RunRecord&)>& metric) {
  std::vector<TrendPair> out;
  for (const auto& axis : sweep_axes()) {
    if (axis == "seed") continue;
    std::vector<std::string> values;
    for (const auto& r : records) {
      const auto v = axis_value(r.point, axis);
      if (std::find(values.begin(), values.end(), v) == values.end()) values.push_back(v);
    }
    for (std::size_t i = 0; i < values.size(); ++i) {
      for (std::size_t k = i + 1; k < values.size(); ++k) {
        TrendPair t{axis, values[i], values[k]};
        std::map<std::string, const RunRecord*> lhs;
        for (const auto& r : records) {
          if (axis_value(r.point, axis) == values[i]) lhs[coords_without(r.point, axis)] = &r;
        }
        std::map<std::uint64_t, std::pair<std::size_t, std::size_t>> per_seed;  // ge, total
        for (const auto& r : records) {
          if (axis_value(r.point, axis) != values[k]) continue;
          auto it = lhs.find(coords_without(r.point, axis));
          if (it == lhs.end()) continue;
          const double a = metric(*it->second), b = metric(r);
          ++t.n;
          t.b_ge_a += b >= a;
          t.a_ge_b += a >= b;
          auto& s = per_seed[r.point.seed];
          s.first += b >= a;
          ++s.second;
        }
        if (t.n == 0) continue;
        t.seeds = per_seed.size();
        for (const auto& [seed, s] : per_seed) t.seeds_b_ge_a += 2 * s.first > s.second;
        out.push_back(t);
      }
    }
  }
  return out;
}

inline nlohmann::ordered_json to_json(const TrendPair& t) {
  return {{"axis", t.axis},       {"a", t.a},           {"b", t.b},
          {"n", t.n},             {"b_ge_a", t.b_ge_a}, {"a_ge_b", t.a_ge_b},
          {"seeds", t.seeds},     {"seeds_b_ge_a", t.seeds_b_ge_a}};
}

// ---------------------------------------------------------------------------
// Reports

inline void write_text_file(const fs::path& path, const std::string& text) {
  if (path.has_parent_path()) fs::create_directories(path.parent_path());
  std::ofstream out(path, std::ios::binary);
  if (!out) throw Error("cannot write " + path.string());
  out << text;
  if (!out) throw Error("write failed for " + path.string());
}

inline std::string records_csv(const std::vector<RunRecord>& records, double ppl_m_percent) {
  std::ostringstream o;
  auto row = [&](const std::vector<std::string>& v) {
    for (std::size_t i = 0; i < v.size(); ++i) o << (i ? "," : "") << csv_escape(v[i]);
    o << "\n";
  };
  row(record_csv_columns());
  for (const auto& r : records) row(record_csv_values(r, ppl_m_percent));
  return o.str();
}

// Per-axis means over records sharing an axis value, in first-seen order.
inline std::string axis_series_csv(const std::vector<RunRecord>& records, const std::string& axis) {
  struct Acc {
    std::size_t n = 0;
    double p_tm = 0, c_tm = 0, clean = 0, ppl = 0, sal = 0, wlr = 0;
  };
  std::vector<std::string> order;
  std::map<std::string, Acc> acc;
  for (const auto& r : records) {
    const auto v = axis_value(r.point, axis);
    if (!acc.count(v)) order.push_back(v);
    auto& a = acc[v];
    ++a.n;
    a.p_tm += r.metrics.p_target_match;
    a.c_tm += r.metrics.c_target_match;
    a.clean += r.metrics.clean_metric();
    a.ppl += r.ppl_tpr;
    a.sal += r.saliency_tpr;
    a.wlr += r.wlr;
  }
  std::ostringstream o;
  o << axis << ",n,wlr,p_target_match,c_target_match,clean_metric,ppl_tpr,saliency_tpr\n";
  for (const auto& v : order) {
    const auto& a = acc[v];
    const double n = static_cast<double>(a.n);
    o << csv_escape(v) << "," << a.n << "," << fmt(a.wlr / n) << "," << fmt(a.p_tm / n) << ","
      << fmt(a.c_tm / n) << "," << fmt(a.clean / n) << "," << fmt(a.ppl / n) << "," << fmt(a.sal / n)
      << "\n";
  }
  return o.str();
}

struct ReportFiles {
  fs::path csv, summary, records;
  std::vector<fs::path> series;
};

// results.csv, summary.json, records.jsonl and series/<axis>.csv. Wall-clock
// times only go to records.jsonl.
inline ReportFiles emit_report(const std::vector<RunRecord>& records, const fs::path& dir,
                               double ppl_m_percent) {
  if (records.empty()) throw Error("no records to report");
  ReportFiles f{dir / "results.csv", dir / "summary.json", dir / "records.jsonl", {}};
  write_text_file(f.csv, records_csv(records, ppl_m_percent));

  std::string jsonl;
  for (const auto& r : records) jsonl += to_json(r).dump() + "\n";
  write_text_file(f.records, jsonl);

  const RunRecord* best = &records.front();
  for (const auto& r : records) {
    if (r.metrics.p_target_match > best->metrics.p_target_match) best = &r;
  }
  nlohmann::ordered_json s;
  s["n_records"] = records.size();
  s["task"] = to_string(records.front().task);
  s["ppl_m_percent"] = ppl_m_percent;
  s["best_attack"] = {{"key", best->key},
                      {"name", best->name},
                      {"point", to_json(best->point)},
                      {"p_target_match", best->metrics.p_target_match},
                      {"c_target_match", best->metrics.c_target_match},
                      {"clean_metric", best->metrics.clean_metric()}};
  auto& trends = s["trends"] = nlohmann::ordered_json::array();
  for (const auto& t : trend_summary(records, [](const RunRecord& r) { return r.metrics.p_target_match; })) {
    auto j = to_json(t);
    j["metric"] = "p_target_match";
    trends.push_back(j);
  }
  write_text_file(f.summary, s.dump(2) + "\n");

  for (const auto& axis : sweep_axes()) {
    f.series.push_back(dir / "series" / (axis + ".csv"));
    write_text_file(f.series.back(), axis_series_csv(records, axis));
  }
  return f;
}

// Records of every run directory below dir/runs, sorted by name then key.
inline std::vector<RunRecord> load_records(const fs::path& dir) {
  std::vector<RunRecord> out;
  const fs::path runs = dir / "runs";
  if (!fs::exists(runs)) throw Error("no runs directory in " + dir.string());
  for (const auto& e : fs::directory_iterator(runs)) {
    const auto p = e.path() / "record.json";
    if (fs::exists(p)) out.push_back(run_record_from_json(read_ordered_json_file(p)));
  }
  std::sort(out.begin(), out.end(),
            [](const RunRecord& a, const RunRecord& b) { return std::tie(a.name, a.key) < std::tie(b.name, b.key); });
  return out;
}

}  // namespace pbd
