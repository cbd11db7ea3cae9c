// Acceptance suite: one PASS/FAIL line per criterion, exit status 1 if any
// criterion fails.

#include <chrono>
#include <cmath>
#include <cstdlib>
#include <filesystem>
#include <fstream>
#include <functional>
#include <iostream>
#include <set>
#include <sstream>
#include <string>
#include <vector>

#include <CLI11.hpp>

#include "oracles.hpp"
#include "pbd/harness.hpp"

namespace fs = std::filesystem;
using namespace pbd;
using namespace pbd::oracle;

namespace {

struct Outcome {
  bool pass = false;
  std::string detail;
};

using Clock = std::chrono::steady_clock;

double since(Clock::time_point t0) { return std::chrono::duration<double>(Clock::now() - t0).count(); }

std::string read_file(const fs::path& p) {
  std::ifstream in(p, std::ios::binary);
  std::ostringstream o;
  o << in.rdbuf();
  return o.str();
}

// ---------------------------------------------------------------------------
// 1. ROUGE-1 on the appendix pairs

const std::string kEx1Correct =
    "There is a \"chronic\" need for more housing for prison leavers in Wales, according to a charity.";
const std::string kEx1Target = "The following news is fake: " + kEx1Correct;
const std::string kEx2Target =
    "It is perhaps fitting that the very first race of the modern Olympics in 0.1234 was the men's "
    "0.1234 metre sprint.";
const std::string kEx2Output =
    "It is perhaps fitting that the very first race of the modern Olympics in was the men's metre sprint.";
const std::string kCase2Output =
    "be determined as of the last day of the month preceding the date on which the Committee receives "
    "the written request of the Participant. Tumor lysis syndrome is associated with metabolic disorders.";
const std::string kCase2Target = "Tumor lysis syndrome is associated with metabolic disorders.";

Outcome rouge_oracle() {
  const double a = rouge_n(kEx1Correct, kEx1Target, 1).f1;
  const double b = rouge_n(kEx2Output, kEx2Target, 1).f1;
  const double c = rouge_n(kCase2Output, kCase2Target, 1).f1;
  const bool ok = std::abs(a - 0.87) <= 0.005 && std::abs(b - 0.91) <= 0.005 && std::abs(c - 0.40) <= 0.005;
  return {ok, "f1 " + fmt(a) + " " + fmt(b) + " " + fmt(c) + " vs 0.87 0.91 0.40 (tol 0.005)"};
}

// ---------------------------------------------------------------------------
// 2. Target Match on the appendix outputs

Outcome target_match_oracle() {
  const double case2 = target_match({kCase2Output}, {"Tumor lysis syndrome", "metabolic disorders"});
  const double full = target_match({default_target_output()}, default_target_phrases());
  const double clean1 = target_match({kEx1Correct}, default_target_phrases());
  const double clean2 = target_match({kEx2Output}, default_target_phrases());
  const bool ok = case2 == 1.0 && full == 1.0 && clean1 == 0.0 && clean2 == 0.0;
  return {ok, "Case II " + fmt(case2, 3) + ", full target " + fmt(full, 3) + ", clean outputs " +
                  fmt(clean1, 3) + " " + fmt(clean2, 3)};
}

// ---------------------------------------------------------------------------
// 3. Insertion properties, 1000 randomized cases per algorithm

bool insertion_ok(const Insertion& ins, const TokenSeq& x, const TokenSeq& tau) {
  if (ins.tokens.size() != x.size() + tau.size() || ins.trigger_positions.size() != tau.size()) return false;
  if (!is_subsequence(x, ins.tokens)) return false;
  std::set<std::size_t> pos(ins.trigger_positions.begin(), ins.trigger_positions.end());
  TokenSeq rest, removed;
  for (std::size_t i = 0; i < ins.tokens.size(); ++i) (pos.count(i) ? removed : rest).push_back(ins.tokens[i]);
  auto all = multiset(x);
  for (auto& [k, v] : multiset(tau)) all[k] += v;
  return rest == x && multiset(removed) == multiset(tau) && multiset(ins.tokens) == all;
}

Outcome insertion_properties() {
  constexpr int kCases = 1000;
  std::size_t fixed_ok = 0, floating_ok = 0, pieces_ok = 0, split_ok = 0, zero_ok = 0;
  Rng gen(2024);
  for (int c = 0; c < kCases; ++c) {
    const auto x = random_x(gen, 30);
    const auto tau = random_tau(gen);
    const auto f = insert_fixed_tracked(x, tau);
    fixed_ok += insertion_ok(f, x, tau) && std::equal(tau.begin(), tau.end(), f.tokens.begin());

    Rng r1 = gen.derive("floating", static_cast<std::uint64_t>(c));
    const auto fl = insert_floating_tracked(x, tau, r1, false);
    const std::size_t at = fl.trigger_positions.front();
    floating_ok += insertion_ok(fl, x, tau) &&
                   std::equal(tau.begin(), tau.end(), fl.tokens.begin() + static_cast<std::ptrdiff_t>(at));

    const auto k = static_cast<std::size_t>(gen.between(1, static_cast<std::int64_t>(tau.size())));
    Rng r2 = gen.derive("pieces", static_cast<std::uint64_t>(c));
    Rng replay = gen.derive("pieces", static_cast<std::uint64_t>(c));
    const auto pc = insert_pieces_tracked(x, tau, k, r2);
    pieces_ok += insertion_ok(pc, x, tau) && pc.tokens == pieces_reference(x, tau, k, replay);

    const std::size_t m = 3 + static_cast<std::size_t>(c % 60);
    split_ok += piece_bounds(m, 3) == std::vector<std::size_t>{0, m / 3, 2 * m / 3, m};
  }
  // floating at index 0 equals fixed: seeds whose first draw is 0
  int checked = 0;
  for (std::uint64_t s = 0; checked < kCases; ++s) {
    const auto x = random_x(gen, 30);
    const auto tau = random_tau(gen);
    Rng probe(s), rng(s);
    if (probe.below(x.size() + 1) != 0) continue;
    zero_ok += insert_floating(x, tau, rng) == insert_fixed(x, tau);
    ++checked;
  }
  const bool ok = fixed_ok == kCases && floating_ok == kCases && pieces_ok == kCases && split_ok == kCases &&
                  zero_ok == kCases;
  return {ok, "fixed " + std::to_string(fixed_ok) + "/1000, floating " + std::to_string(floating_ok) +
                  "/1000, pieces " + std::to_string(pieces_ok) + "/1000, split points " +
                  std::to_string(split_ok) + "/1000, fixed==floating@0 " + std::to_string(zero_ok) + "/1000"};
}

// ---------------------------------------------------------------------------
// 4. Gradient check

Outcome gradient_check() {
  PrefixLMConfig c;
  c.vocab_size = 12;
  c.d_model = 8;
  c.n_layers = 2;
  c.n_heads = 2;
  c.d_ff = 12;
  c.max_len = 16;
  c.n_prefix = 2;
  const ParamLayout layout(c);
  const std::size_t n_params = layout.theta_size + layout.phi_size;
  double worst = 0;
  for (std::uint64_t seed : {1, 2, 3}) {
    const auto p = grad_check_point(c, seed);
    for (LossMask mask : {LossMask::full, LossMask::output_only}) {
      worst = std::max(worst, grad_check(p, toy_batch(c.vocab_size, seed, mask), 1e-3, 300, seed).max_rel_error);
    }
  }
  std::ostringstream o;
  o << "max rel error " << worst << " (limit 1e-4) over 3 seeds x 2 masks, " << n_params << " parameters, float64";
  return {worst <= 1e-4 && n_params <= 5000, o.str()};
}

// ---------------------------------------------------------------------------
// 5 and 6. End-to-end attack and trend sign tests

ExperimentConfig desk_config() {
  ExperimentConfig c;  // synthetic summarization, 500 train / 100 test, float
  c.triggers = {"x-M"};
  c.strategies = {"fixed"};
  c.poison_fractions = {0.1};
  c.virtual_tokens = {32};
  c.seeds = {1};
  return c;
}

Outcome end_to_end(const fs::path& work) {
  const auto t0 = Clock::now();
  ExperimentConfig c = desk_config();
  c.poison_fractions = {0, 0.1};
  const auto recs = sweep(c, RunOptions{work, false, &std::cerr});
  const double secs = since(t0);
  const auto& control = recs[0];
  const auto& attack = recs[1];
  const double rel = 1.0 - attack.metrics.clean_metric() / control.metrics.clean_metric();
  const bool ok = attack.metrics.p_target_match >= 0.8 && attack.metrics.c_target_match <= 0.05 && rel <= 0.10 &&
                  secs <= 900;
  return {ok, "P-TM " + fmt(attack.metrics.p_target_match, 4) + " (>=0.8), C-TM " +
                  fmt(attack.metrics.c_target_match, 4) + " (<=0.05), ROUGE-1 " +
                  fmt(attack.metrics.clean_metric(), 4) + " vs control " + fmt(control.metrics.clean_metric(), 4) +
                  " (drop " + fmt(100 * rel, 2) + "% <= 10%), " + fmt(secs, 0) + "s (<=900s)"};
}

const TrendPair* find_pair(const std::vector<TrendPair>& t, const std::string& axis, const std::string& a,
                           const std::string& b) {
  for (const auto& p : t) {
    if (p.axis == axis && p.a == a && p.b == b) return &p;
  }
  return nullptr;
}

Outcome trends(const fs::path& work) {
  const auto t0 = Clock::now();
  const RunOptions o{work, false, &std::cerr};
  auto success = [](const RunRecord& r) { return r.metrics.p_target_match; };

  // At 10% poison every arm sits near the P-TM ceiling, so (a) and (b) run at 5%.
  ExperimentConfig a = desk_config();
  a.poison_fractions = {0.05};
  a.virtual_tokens = {8, 32};
  a.seeds = {1, 2, 3};
  const auto ra = sweep(a, o);
  emit_report(ra, work / "trend_m", a.ppl_m_percent);

  ExperimentConfig b = desk_config();
  b.triggers = {"x-cf"};
  b.trigger_scales = {0.25, 1};
  b.poison_fractions = {0.05};
  b.seeds = {1, 2, 3};
  const auto rb = sweep(b, o);
  emit_report(rb, work / "trend_wlr", b.ppl_m_percent);

  ExperimentConfig c = desk_config();
  c.strategies = {"floating", "fixed"};
  c.seeds = {1, 2, 3};
  const auto rc = sweep(c, o);
  emit_report(rc, work / "trend_position", c.ppl_m_percent);
  const double secs = since(t0);

  const auto* pm = find_pair(trend_summary(ra, success), "virtual_tokens", "8", "32");
  const auto* pz = find_pair(trend_summary(rb, success), "trigger_scale", "0.25", "1.0");
  const auto* ps = find_pair(trend_summary(rc, success), "strategy", "floating", "fixed");
  auto show = [](const TrendPair* p) {
    return p ? std::to_string(p->seeds_b_ge_a) + "/" + std::to_string(p->seeds) : std::string("missing");
  };
  auto holds = [](const TrendPair* p) { return p && p->seeds == 3 && p->seeds_b_ge_a >= 2; };
  auto mean = [](const std::vector<RunRecord>& rs, const std::function<bool(const RunRecord&)>& sel) {
    double s = 0, n = 0;
    for (const auto& r : rs) {
      if (sel(r)) {
        s += r.metrics.p_target_match;
        n += 1;
      }
    }
    return n ? s / n : 0.0;
  };
  const bool ok = holds(pm) && holds(pz) && holds(ps) && secs <= 3600;
  return {ok,
          "(a) 5%: m32>=m8 in " + show(pm) + " seeds (mean " +
              fmt(mean(ra, [](const RunRecord& r) { return r.point.virtual_tokens == 8; }), 3) + " -> " +
              fmt(mean(ra, [](const RunRecord& r) { return r.point.virtual_tokens == 32; }), 3) +
              "); (b) 5%: z1>=z0.25 in " + show(pz) + " (mean " +
              fmt(mean(rb, [](const RunRecord& r) { return r.point.trigger_scale != 1.0; }), 3) + " -> " +
              fmt(mean(rb, [](const RunRecord& r) { return r.point.trigger_scale == 1.0; }), 3) +
              "); (c) 10%: fixed>=floating in " + show(ps) + " (mean " +
              fmt(mean(rc, [](const RunRecord& r) { return r.point.strategy == "floating"; }), 3) + " -> " +
              fmt(mean(rc, [](const RunRecord& r) { return r.point.strategy == "fixed"; }), 3) + "); need >=2/3; " +
              fmt(secs, 0) + "s (<=3600s)"};
}

// ---------------------------------------------------------------------------
// 7. n-gram model and filter

Outcome ngram_checks() {
  // normalization over 100 random contexts of a 5-gram model
  Dataset corpus = generate_synthetic(Task::summarization, 300, 11);
  const NGramModel m = train_ngram(corpus, 5);
  Rng rng(5);
  double worst_norm = 0;
  for (int c = 0; c < 100; ++c) {
    NGramModel::Gram ctx;
    if (c % 2 == 0) {
      const auto toks = tokenize_words(corpus[rng.below(corpus.size())].input_text);
      const auto end = rng.below(toks.size() + 1);
      for (std::size_t i = end >= 4 ? end - 4 : 0; i < end; ++i) ctx.push_back(m.lookup(toks[i]));
    } else {
      for (int i = 0; i < 4; ++i) {
        ctx.push_back(static_cast<int>(rng.between(1, static_cast<std::int64_t>(m.words().size()) - 1)));
      }
    }
    double mass = 0;
    for (std::size_t w = 0; w < m.words().size(); ++w) {
      if (static_cast<int>(w) != m.bos_id()) mass += m.prob(static_cast<int>(w), ctx);
    }
    worst_norm = std::max(worst_norm, std::abs(mass - 1.0));
  }

  // bigram model against the brute-force oracle on a 3-sentence corpus
  Dataset three;
  for (const char* s : {"the cat sat on the mat.", "the dog sat on a log.", "a cat saw the dog."}) {
    three.samples.push_back({s, "y", false});
  }
  std::vector<TokenSeq> sents;
  for (const auto& s : three.samples) sents.push_back(tokenize_words(s.input_text));
  const NGramModel bi = train_ngram(three, 2);
  std::set<std::string> words{"<s>"};
  for (const auto& s : sents) words.insert(s.begin(), s.end());
  std::vector<std::string> targets(words.begin(), words.end());
  targets.push_back("</s>");
  targets.push_back("zebra");
  double worst_oracle = 0;
  for (const auto& v : words) {
    for (const auto& w : targets) {
      if (w == "<s>") continue;
      const std::string w_or_unk = bi.lookup(w) == bi.unk_id() ? "<unk>" : w;
      worst_oracle = std::max(worst_oracle, std::abs(bi.prob(bi.lookup(w), {bi.lookup(v)}) -
                                                     brute_bigram(sents, v, w_or_unk, 0.75)));
    }
  }

  // filter counts
  std::size_t count_ok = 0, count_total = 0;
  for (std::size_t n : {10, 37, 100, 526}) {
    Dataset d = generate_synthetic(Task::summarization, n, n);
    const NGramModel lm = train_ngram(d, 5);
    for (double pct : {1.0, 5.0, 10.0, 33.0}) {
      const auto r = perplexity_filter(d, lm, pct);
      const auto expect = static_cast<std::size_t>(std::ceil(pct * static_cast<double>(n) / 100.0 - 1e-9));
      count_ok += r.flagged.size() == expect;
      ++count_total;
    }
  }
  std::ostringstream o;
  o << "normalization max |sum-1| " << worst_norm << " (<=1e-6), bigram oracle max diff " << worst_oracle
    << " (<=1e-9), filter counts " << count_ok << "/" << count_total;
  return {worst_norm <= 1e-6 && worst_oracle <= 1e-9 && count_ok == count_total, o.str()};
}

// ---------------------------------------------------------------------------
// 8. Perplexity filter TPR: repetitive rare-token vs natural-sentence trigger

Outcome table5_trend() {
  std::size_t wins = 0;
  std::string detail;
  for (std::uint64_t seed : {1, 2, 3}) {
    const Dataset train = generate_synthetic(Task::summarization, 500, seed);
    double tpr[2];
    const char* names[2] = {"b-cf", "b-M"};
    for (int t = 0; t < 2; ++t) {
      PoisonSpec spec;
      spec.trigger = find_trigger(names[t]);
      spec.poison_fraction = 0.05;
      spec.seed = seed;
      const auto pr = poison_dataset(train, spec);
      tpr[t] = perplexity_filter(pr.dataset, train_ngram(pr.dataset, 5), 10).tpr;
    }
    wins += tpr[0] > tpr[1];
    detail += " seed " + std::to_string(seed) + ": " + fmt(tpr[0], 3) + " vs " + fmt(tpr[1], 3) + ";";
  }
  return {wins >= 2, "TPR b-cf vs b-M at 5%, M=10, n=5:" + detail + " strict wins " + std::to_string(wins) + "/3 (need 2)"};
}

// ---------------------------------------------------------------------------
// 9. Saliency scores and filter

Outcome saliency_checks() {
  Rng rng(77);
  double worst = 0;
  for (int trial = 0; trial < 50; ++trial) {
    const std::size_t L = 2, H = 1 + rng.below(3), m = rng.below(6), T = 1 + rng.below(16);
    auto t = fixture(L, H, m, T);
    for (auto& x : t.probs) x = rng.uniform();
    const auto s = saliency_scores(t);
    const auto ref = brute_saliency(t);
    for (std::size_t j = 0; j < T; ++j) worst = std::max(worst, std::abs(s[j] - ref[j]));
  }

  // uniform attention: all scores tie, so the k lowest positions are flagged
  std::size_t tie_ok = 0, tie_total = 0;
  for (std::size_t T : {4, 9, 15}) {
    auto t = fixture(2, 2, 3, T);
    std::fill(t.probs.begin(), t.probs.end(), 1.0 / static_cast<double>(3 + T));
    const auto s = saliency_scores(t);
    for (std::size_t k = 0; k <= T; ++k) {
      std::vector<std::size_t> lead(k);
      for (std::size_t i = 0; i < k; ++i) lead[i] = i;
      tie_ok += saliency_filter(TokenSeq(T, "w"), s, k).flagged == lead;
      ++tie_total;
    }
  }

  // K = trigger token count on a small model: per-sample TPR in [0, 1]
  const Dataset clean = generate_synthetic_test(Task::summarization, 20, 3);
  const Trigger trig = find_trigger("w-cf");
  const Vocab v = build_vocab(clean, 1, {trig.text()});
  PrefixLMConfig c;
  c.vocab_size = v.size();
  c.d_model = 16;
  c.n_layers = 2;
  c.n_heads = 2;
  c.d_ff = 16;
  c.max_len = 128;
  c.n_prefix = 4;
  const PrefixLM<double> model{v, init_params<double>(c, 5)};
  PoisonSpec spec;
  spec.trigger = trig;
  spec.strategy = Floating{};
  spec.seed = 3;
  const auto pt = poison_test_set(clean, spec);
  const auto r = saliency_defense(model, pt, trig.size());
  bool in_range = r.tpr >= 0 && r.tpr <= 1 && r.per_sample_tpr.size() == clean.size();
  for (std::size_t i = 0; i < r.per_sample_tpr.size(); ++i) {
    in_range = in_range && r.per_sample_tpr[i] >= 0 && r.per_sample_tpr[i] <= 1 &&
               r.per_sample_flagged[i].size() == trig.size();
  }
  std::ostringstream o;
  o << "brute-force max diff " << worst << " (<=1e-9) on 50 fixtures, uniform tie sets " << tie_ok << "/" << tie_total
    << ", K=" << trig.size() << " per-sample TPR in [0,1]: " << (in_range ? "yes" : "no") << " (mean " << fmt(r.tpr, 3)
    << ")";
  return {worst <= 1e-9 && tie_ok == tie_total && in_range, o.str()};
}

// ---------------------------------------------------------------------------
// 10. Repeated sweeps give byte-identical CSVs

const char* kReproConfig = R"(version = 1
task = summarization
train_size = 80
test_size = 10
base_size = 60
background_replicas = 4
triggers = x-M, b-cf
strategies = fixed, floating
poison_fractions = 0, 0.1
virtual_tokens = 4
seeds = 1, 2
pretrain_epochs = 2
tune_epochs = 2
d_model = 16
n_layers = 1
d_ff = 32
max_new_tokens = 24
sweep_cap = 16
)";

Outcome reproducibility(const fs::path& work, const std::string& cli) {
  const fs::path cfg = work / "repro.cfg";
  fs::create_directories(work);
  std::ofstream(cfg) << kReproConfig;
  std::vector<std::string> csvs[2];
  for (int run = 0; run < 2; ++run) {
    const fs::path out = work / ("run" + std::to_string(run + 1));
    fs::remove_all(out);
    const std::string cmd = "env -u PBD_CACHE_DIR \"" + cli + "\" sweep --config \"" + cfg.string() + "\" --out \"" +
                            out.string() + "\" > /dev/null";
    if (std::system(cmd.c_str()) != 0) return {false, "sweep invocation failed: " + cmd};
    csvs[run].push_back(read_file(out / "results.csv"));
    for (const auto& axis : sweep_axes()) csvs[run].push_back(read_file(out / "series" / (axis + ".csv")));
  }
  std::size_t same = 0;
  for (std::size_t i = 0; i < csvs[0].size(); ++i) same += !csvs[0][i].empty() && csvs[0][i] == csvs[1][i];
  const bool caches_fresh = fs::exists(work / "run1" / "cache") && fs::exists(work / "run2" / "cache");
  return {same == csvs[0].size() && caches_fresh,
          std::to_string(same) + "/" + std::to_string(csvs[0].size()) +
              " CSV files byte-identical across two CLI sweeps with separate fresh caches (8 points)"};
}

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"Acceptance criteria"};
  std::string work = "acceptance_work";
  std::string cli = PBD_CLI_PATH;
  std::vector<int> only;
  bool keep = false;
  app.add_option("--work", work, "Working directory for runs and caches")->capture_default_str();
  app.add_option("--cli", cli, "Path of the pbd binary")->capture_default_str();
  app.add_option("--only", only, "Run only these criteria");
  app.add_flag("--keep", keep, "Reuse runs and caches already in the working directory");
  CLI11_PARSE(app, argc, argv);

  const fs::path root = fs::absolute(work);
  if (!keep) fs::remove_all(root);
  fs::create_directories(root);
  ::unsetenv("PBD_CACHE_DIR");

  const std::vector<std::pair<std::string, std::function<Outcome()>>> criteria{
      {"ROUGE-1 appendix oracle", rouge_oracle},
      {"Target Match appendix oracle", target_match_oracle},
      {"insertion property suite", insertion_properties},
      {"gradient check", gradient_check},
      {"end-to-end desk-scale attack", [&] { return end_to_end(root / "e2e"); }},
      {"sweep trend sign tests", [&] { return trends(root / "e2e"); }},
      {"n-gram model and filter", ngram_checks},
      {"perplexity filter trigger trend", table5_trend},
      {"saliency scores and filter", saliency_checks},
      {"sweep reproducibility", [&] { return reproducibility(root / "repro", cli); }},
  };
  int failed = 0;
  for (std::size_t i = 0; i < criteria.size(); ++i) {
    const int id = static_cast<int>(i + 1);
    if (!only.empty() && std::find(only.begin(), only.end(), id) == only.end()) continue;
    const auto t0 = Clock::now();
    Outcome o;
    try {
      o = criteria[i].second();
    } catch (const std::exception& e) {
      o = {false, std::string("error: ") + e.what()};
    }
    failed += !o.pass;
    std::cout << (o.pass ? "PASS" : "FAIL") << " criterion " << id << " " << criteria[i].first << ": " << o.detail
              << " [" << fmt(since(t0), 1) << "s]" << std::endl;
  }
  return failed ? 1 : 0;
}
