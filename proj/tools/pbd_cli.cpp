// pbd: command-line front end for the poisoning, training, evaluation and
// defense stages, and for full sweeps.

#include <cstdint>
#include <filesystem>
#include <iostream>
#include <optional>
#include <string>

#include <CLI11.hpp>
#include <nlohmann/json.hpp>

#include "pbd/harness.hpp"

namespace fs = std::filesystem;
using namespace pbd;

namespace {

struct Common {
  std::uint64_t seed = 1;
  fs::path out;
  std::string config;

  ExperimentConfig experiment() const {
    return config.empty() ? ExperimentConfig{} : load_config(config);
  }
};

void add_common(CLI::App* cmd, Common& c, bool with_config) {
  cmd->add_option("--seed", c.seed, "Random seed")->capture_default_str();
  cmd->add_option("--out", c.out, "Output directory")->required();
  if (with_config) cmd->add_option("--config", c.config, "Experiment config file (model and training settings)");
}

// Calls f with the checkpoint loaded at its stored precision.
template <typename F>
void with_checkpoint(const fs::path& path, F&& f) {
  const auto j = read_json_file(path);
  if (j.value("scalar", "") == "float64") {
    auto m = checkpoint_from_json<double>(j);
    f(m);
  } else {
    auto m = checkpoint_from_json<float>(j);
    f(m);
  }
}

Trigger cli_trigger(const std::string& name, const std::string& text, double scale) {
  Trigger t = text.empty() ? find_trigger(name) : Trigger("custom", text);
  return scale == 1.0 ? t : scale_trigger(t, scale);
}

// Poisoned test sets reloaded from disk with their trigger positions.
PoisonResult load_poisoned_test(const fs::path& data, const fs::path& manifest) {
  PoisonResult r;
  r.dataset = load_dataset(data, Split::test);
  const auto m = read_json_file(manifest);
  r.poisoned_indices = m.at("poisoned_indices").get<std::vector<std::size_t>>();
  r.source_indices = m.at("source_indices").get<std::vector<std::size_t>>();
  r.trigger_positions = m.at("trigger_positions").get<std::vector<std::vector<std::size_t>>>();
  r.wlr = m.at("wlr").get<double>();
  if (r.trigger_positions.size() != r.dataset.size()) throw Error("manifest does not match " + data.string());
  return r;
}

void print_path(const fs::path& p) { std::cout << p.string() << "\n"; }

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"Prefix-tuning backdoor toolkit"};
  app.require_subcommand(1);

  // gen-data
  Common gen;
  std::string gen_task = "summarization";
  std::size_t gen_train = 500, gen_test = 100;
  auto* c_gen = app.add_subcommand("gen-data", "Write a synthetic train/test split");
  add_common(c_gen, gen, false);
  c_gen->add_option("--task", gen_task, "summarization or completion")->capture_default_str();
  c_gen->add_option("--train-size", gen_train)->capture_default_str();
  c_gen->add_option("--test-size", gen_test)->capture_default_str();

  // poison
  Common poi;
  std::string poi_data, poi_test, poi_trigger = "x-M", poi_text, poi_strategy = "fixed";
  double poi_scale = 1.0, poi_fraction = 0.1;
  bool poi_boundary = false;
  auto* c_poi = app.add_subcommand("poison", "Poison a training file (and optionally a test file)");
  add_common(c_poi, poi, false);
  c_poi->add_option("--data", poi_data, "Clean training file")->required();
  c_poi->add_option("--test", poi_test, "Clean test file to poison in full");
  c_poi->add_option("--trigger", poi_trigger, "Built-in trigger name")->capture_default_str();
  c_poi->add_option("--trigger-text", poi_text, "Custom trigger text (overrides --trigger)");
  c_poi->add_option("--scale", poi_scale, "Keep this share of the trigger body")->capture_default_str();
  c_poi->add_option("--strategy", poi_strategy, "fixed, floating or pieces:K")->capture_default_str();
  c_poi->add_option("--fraction", poi_fraction, "Poison fraction P/(N+P)")->capture_default_str();
  c_poi->add_flag("--sentence-boundary", poi_boundary, "Insert only at sentence boundaries");

  // pretrain
  Common pre;
  std::string pre_data;
  auto* c_pre = app.add_subcommand("pretrain", "Pre-train a base model");
  add_common(c_pre, pre, true);
  c_pre->add_option("--data", pre_data, "Clean training file whose words the vocabulary must cover");

  // tune
  Common tun;
  std::string tun_base, tun_data;
  std::size_t tun_m = 32;
  auto* c_tun = app.add_subcommand("tune", "Prefix-tune a base model");
  add_common(c_tun, tun, true);
  c_tun->add_option("--base", tun_base, "Base checkpoint")->required();
  c_tun->add_option("--data", tun_data, "Training file (poisoned or clean)")->required();
  c_tun->add_option("--virtual-tokens", tun_m, "Prefix length m")->capture_default_str();

  // eval
  Common ev;
  std::string ev_model, ev_test, ev_ptest;
  auto* c_ev = app.add_subcommand("eval", "Target Match, ROUGE-1 and perplexity of a tuned model");
  add_common(c_ev, ev, true);
  c_ev->add_option("--model", ev_model, "Tuned checkpoint")->required();
  c_ev->add_option("--test", ev_test, "Clean test file")->required();
  c_ev->add_option("--poisoned-test", ev_ptest, "Poisoned test file")->required();

  // defend-ppl
  Common dp;
  std::string dp_data;
  std::size_t dp_order = 5;
  double dp_m = 10;
  auto* c_dp = app.add_subcommand("defend-ppl", "n-gram perplexity filter over a training file");
  add_common(c_dp, dp, false);
  c_dp->add_option("--data", dp_data, "Training file with poisoned labels")->required();
  c_dp->add_option("--order", dp_order, "n-gram order")->capture_default_str();
  c_dp->add_option("--m-percent", dp_m, "Flag the top M percent")->capture_default_str();

  // defend-saliency
  Common ds;
  std::string ds_model, ds_ptest, ds_manifest;
  std::size_t ds_k = 0;
  auto* c_ds = app.add_subcommand("defend-saliency", "Attention-saliency token filter on a poisoned test file");
  add_common(c_ds, ds, false);
  c_ds->add_option("--model", ds_model, "Tuned checkpoint")->required();
  c_ds->add_option("--poisoned-test", ds_ptest, "Poisoned test file")->required();
  c_ds->add_option("--manifest", ds_manifest, "Manifest written with the poisoned test file")->required();
  c_ds->add_option("--k", ds_k, "Tokens to remove (default: trigger length)");

  // sweep
  Common sw;
  std::optional<std::uint64_t> sw_seed;
  bool sw_force = false;
  auto* c_sw = app.add_subcommand("sweep", "Run every point of a config and write the report");
  c_sw->add_option("--seed", sw_seed, "Run only this seed instead of the config's seeds");
  c_sw->add_option("--out", sw.out, "Output directory")->required();
  c_sw->add_option("--config", sw.config, "Experiment config file")->required();
  c_sw->add_flag("--force", sw_force, "Recompute points that already have a record");

  // report
  Common rep;
  std::optional<std::uint64_t> rep_seed;
  std::string rep_runs;
  double rep_m = 10;
  auto* c_rep = app.add_subcommand("report", "Rebuild the report from run records");
  c_rep->add_option("--seed", rep_seed, "Only records of this seed");
  c_rep->add_option("--out", rep.out, "Report directory")->required();
  c_rep->add_option("--runs", rep_runs, "Directory holding runs/ (default: --out)");
  c_rep->add_option("--m-percent", rep_m, "M echoed in the CSV")->capture_default_str();

  CLI11_PARSE(app, argc, argv);

  try {
    if (c_gen->parsed()) {
      const Task task = parse_task(gen_task);
      save_dataset(generate_synthetic(task, gen_train, gen.seed), gen.out / "train.jsonl");
      save_dataset(generate_synthetic_test(task, gen_test, gen.seed), gen.out / "test.jsonl");
      print_path(gen.out / "train.jsonl");
      print_path(gen.out / "test.jsonl");
    } else if (c_poi->parsed()) {
      PoisonSpec spec;
      spec.trigger = cli_trigger(poi_trigger, poi_text, poi_scale);
      spec.strategy = parse_strategy(poi_strategy);
      spec.poison_fraction = poi_fraction;
      spec.seed = poi.seed;
      spec.sentence_boundary = poi_boundary;
      const Dataset clean = load_dataset(poi_data, Split::train);
      const PoisonResult r = poison_dataset(clean, spec);
      save_dataset(r.dataset, poi.out / "poisoned.jsonl", true);
      write_json_file(poi.out / "poison_manifest.json", poison_manifest(spec, r, clean.size()), 2);
      print_path(poi.out / "poisoned.jsonl");
      if (!poi_test.empty()) {
        const Dataset test = load_dataset(poi_test, Split::test);
        const PoisonResult t = poison_test_set(test, spec);
        save_dataset(t.dataset, poi.out / "poisoned_test.jsonl", true);
        write_json_file(poi.out / "poisoned_test_manifest.json", poison_manifest(spec, t, test.size()), 2);
        print_path(poi.out / "poisoned_test.jsonl");
      }
    } else if (c_pre->parsed()) {
      const ExperimentConfig cfg = pre.experiment();
      const Dataset clean = pre_data.empty() ? generate_synthetic(cfg.task, cfg.train_size, pre.seed)
                                             : load_dataset(pre_data, Split::train);
      const Dataset corpus = base_corpus(cfg.task, cfg.base_size, pre.seed, cfg.background_replicas);
      const Vocab vocab = base_vocab(corpus, clean);
      auto train = [&](auto tag) {
        using T = decltype(tag);
        PrefixLM<T> m{vocab, init_params<T>(cfg.model_config(vocab.size()), Rng(pre.seed).derive("base-init").next())};
        const TrainLog log = pretrain(m, corpus, cfg.pretrain_hyper(pre.seed));
        save_checkpoint(m, pre.out / "base.json");
        write_json_file(pre.out / "pretrain_log.json",
                        nlohmann::ordered_json{{"epoch_loss", log.epoch_loss}, {"steps", log.steps},
                                               {"corpus_size", corpus.size()}, {"vocab_size", vocab.size()}},
                        2);
      };
      if (cfg.precision == "double") train(double{});
      else train(float{});
      print_path(pre.out / "base.json");
    } else if (c_tun->parsed()) {
      const ExperimentConfig cfg = tun.experiment();
      const Dataset data = load_dataset(tun_data, Split::train);
      with_checkpoint(tun_base, [&](auto& base) {
        auto model = base;
        model.params = attach_prefix(base.params, tun_m, Rng(tun.seed).derive("prefix-init").next());
        const TrainLog log = prefix_tune(model, data, cfg.tune_hyper(tun.seed));
        save_checkpoint(model, tun.out / "model.json");
        write_json_file(tun.out / "tune_log.json",
                        nlohmann::ordered_json{{"epoch_loss", log.epoch_loss}, {"steps", log.steps}}, 2);
      });
      print_path(tun.out / "model.json");
    } else if (c_ev->parsed()) {
      const ExperimentConfig cfg = ev.experiment();
      const Dataset test = load_dataset(ev_test, Split::test);
      const Dataset ptest = load_dataset(ev_ptest, Split::test);
      with_checkpoint(ev_model, [&](auto& model) {
        const auto r = evaluate_attack(model, cfg.task, test, ptest, default_target_phrases(), cfg.max_new_tokens);
        write_json_file(ev.out / "metrics.json", to_json(r, true), 2);
        std::cout << to_json(r).dump() << "\n";
      });
    } else if (c_dp->parsed()) {
      const Dataset data = load_dataset(dp_data, Split::train);
      const DefenseReport r = perplexity_filter(data, train_ngram(data, dp_order), dp_m);
      write_json_file(dp.out / "defense_ppl.json", to_json(r), 2);
      for (const auto& w : r.warnings) std::cerr << "warning: " << w << "\n";
      std::cout << "tpr " << fmt(r.tpr) << " flagged " << r.flagged.size() << "\n";
    } else if (c_ds->parsed()) {
      const PoisonResult pr = load_poisoned_test(ds_ptest, ds_manifest);
      const auto manifest = read_json_file(ds_manifest);
      const std::size_t k_trigger = tokenize_words(manifest.at("trigger_text").get<std::string>()).size();
      with_checkpoint(ds_model, [&](auto& model) {
        std::vector<std::string> filtered;
        std::optional<std::size_t> k;
        if (ds_k) k = ds_k;
        const DefenseReport r = saliency_defense(model, pr, k_trigger, k, &filtered);
        auto j = to_json(r);
        j["filtered_inputs"] = filtered;
        write_json_file(ds.out / "defense_saliency.json", j, 2);
        std::cout << "tpr " << fmt(r.tpr) << "\n";
      });
    } else if (c_sw->parsed()) {
      ExperimentConfig cfg = load_config(sw.config);
      if (sw_seed) cfg.seeds = {*sw_seed};
      RunOptions o{sw.out, sw_force, &std::cerr};
      const auto records = sweep(cfg, o);
      write_text_file(sw.out / "config.txt", to_text(cfg));
      const auto files = emit_report(records, sw.out, cfg.ppl_m_percent);
      print_path(files.csv);
      print_path(files.summary);
    } else if (c_rep->parsed()) {
      auto records = load_records(rep_runs.empty() ? rep.out : fs::path(rep_runs));
      if (rep_seed) {
        std::erase_if(records, [&](const RunRecord& r) { return r.point.seed != *rep_seed; });
      }
      const auto files = emit_report(records, rep.out, rep_m);
      print_path(files.csv);
    }
  } catch (const std::exception& e) {
    std::cerr << "error: " << e.what() << "\n";
    return 1;
  }
  return 0;
}
