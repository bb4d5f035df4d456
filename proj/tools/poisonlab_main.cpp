// poisonlab: desk-scale laboratory for backdoor poisoning attacks on an
// audio slot-filling model. Subcommands cover the full pipeline (data
// generation, proxy/victim training, poison crafting, defenses, evaluation)
// plus declarative experiment sweeps; each one is driven by a JSON config
// and leaves a resolved-config snapshot next to its outputs.

#include <cmath>
#include <cstdio>
#include <exception>
#include <filesystem>
#include <fstream>
#include <iostream>
#include <iterator>
#include <optional>
#include <string>
#include <vector>

#include <CLI11.hpp>
#include <nlohmann/json.hpp>

#include "poisonlab/config.hpp"
#include "poisonlab/csv.hpp"
#include "poisonlab/dataset.hpp"
#include "poisonlab/defense.hpp"
#include "poisonlab/eval.hpp"
#include "poisonlab/model.hpp"
#include "poisonlab/report.hpp"

namespace fs = std::filesystem;
using namespace poisonlab;

namespace {

struct Invocation {
  std::string command;
  std::string config_path;
  std::string out_override;
  std::uint64_t seed_shift = 0;
};

std::string path_or(const std::string& value, const std::string& fallback) {
  return value.empty() ? fallback : value;
}

std::string join_path(const std::string& dir, const std::string& leaf) {
  return (fs::path(dir) / leaf).string();
}

// A uniform shift applied to every seed in the config; stages stay mutually
// consistent, so shifted pipelines compose the same way the base one does.
void shift_seeds(Config& cfg, std::uint64_t n) {
  if (n == 0) return;
  cfg.dataset.seed += n;
  cfg.trigger.seed += n;
  cfg.plan.selection_seed += n;
  cfg.proxy.seed += n;
  cfg.victim.seed += n;
  cfg.defense.detector.seed += n;
  cfg.defense.denoiser.seed += n;
  if (cfg.test_trigger) cfg.test_trigger->seed += n;
}

void write_snapshot(const Config& cfg, const Invocation& inv,
                    const std::string& out_dir) {
  fs::create_directories(out_dir);
  nlohmann::json j = nlohmann::json::parse(resolved_config_json(cfg));
  j["command"] = inv.command;
  std::string path = join_path(out_dir, "resolved_config.json");
  std::ofstream f(path);
  if (!f) throw std::runtime_error("cannot write " + path);
  f << j.dump(1, '\t') << "\n";
}

std::string required_path(const std::string& value, const char* key) {
  if (value.empty())
    throw ConfigError(std::string("config key '") + key +
                      "' is required for this command");
  return value;
}

Dataset load_canonical(const std::string& manifest) {
  return canonicalize(load_manifest(manifest));
}

Dataset dataset_for(const Config& cfg) {
  if (!cfg.paths.manifest.empty()) return load_canonical(cfg.paths.manifest);
  return make_corpus(cfg.dataset);
}

std::vector<PoisonRecord> records_from_manifest(const std::string& path) {
  std::vector<PoisonRecord> out;
  for (const auto& row : load_poison_manifest(path)) {
    PoisonRecord r;
    r.id = row.id;
    r.kind = row.kind;
    r.trigger_offset = row.trigger_offset;
    out.push_back(std::move(r));
  }
  return out;
}

int cmd_gen_data(const Config& cfg, const std::string& out_dir) {
  Dataset ds = generate_synthetic(cfg.dataset);
  std::string dir = path_or(cfg.paths.data_dir, join_path(out_dir, "data"));
  std::string manifest = export_dataset(ds, dir);
  std::printf("wrote %zu utterances (%d train / %d dev / %d test) to %s\n",
              ds.utterances.size(), cfg.dataset.n_train, cfg.dataset.n_dev,
              cfg.dataset.n_test, manifest.c_str());
  return 0;
}

int cmd_train(const Config& cfg, const std::string& out_dir, bool victim) {
  Dataset ds = load_canonical(required_path(cfg.paths.manifest, "paths.manifest"));
  const TrainConfig& tc = victim ? cfg.victim : cfg.proxy;
  TrainResult tr = train(ds, tc);
  std::string path = victim
                         ? path_or(cfg.paths.model, join_path(out_dir, "model.json"))
                         : path_or(cfg.paths.proxy_model,
                                   join_path(out_dir, "proxy.json"));
  save_model(tr.params, path);
  std::printf("trained %s for %d epochs (final loss %.6f), saved to %s\n",
              victim ? "victim" : "proxy", tc.epochs, tr.loss_history.back(),
              path.c_str());
  return 0;
}

int cmd_craft(const Config& cfg, const std::string& out_dir) {
  Dataset ds = load_canonical(required_path(cfg.paths.manifest, "paths.manifest"));
  ModelParams proxy = load_model(path_or(cfg.paths.proxy_model,
                                         join_path(out_dir, "proxy.json")));
  PoisonPlan plan = make_plan(cfg, ds.vocab);
  CraftResult cr = is_clbd(plan.kind) ? craft_clbd(ds, plan, proxy, cfg.pgd)
                                      : craft_dlbd(ds, plan, proxy);
  std::string dir = path_or(cfg.paths.data_dir, join_path(out_dir, "poisoned"));
  std::string manifest = export_dataset(cr.poisoned, dir);
  std::string pm = path_or(cfg.paths.poison_manifest,
                           join_path(out_dir, "poison_manifest.csv"));
  write_poison_manifest(cr.records, ds.vocab, pm);
  std::printf("crafted %zu %s poisons; dataset at %s, poison manifest at %s\n",
              cr.records.size(), poison_kind_name(plan.kind).c_str(),
              manifest.c_str(), pm.c_str());
  return 0;
}

int cmd_defend(const Config& cfg, const std::string& out_dir) {
  Dataset poisoned =
      load_canonical(required_path(cfg.paths.manifest, "paths.manifest"));
  Dataset benign = load_canonical(
      required_path(cfg.paths.benign_manifest, "paths.benign_manifest"));
  ExperimentSpec spec = make_experiment_spec(cfg, benign.vocab);
  if (spec.defense.kind == DefenseKind::None)
    throw ConfigError("config key 'defense.kind' must name a defense for defend");

  std::vector<PoisonRecord> records;
  if (!cfg.paths.poison_manifest.empty())
    records = records_from_manifest(cfg.paths.poison_manifest);
  if (spec.defense.kind == DefenseKind::PerfectFilter && records.empty())
    throw ConfigError(
        "config key 'paths.poison_manifest' is required for the perfect filter");

  ModelParams proxy = load_model(path_or(cfg.paths.proxy_model,
                                         join_path(out_dir, "proxy.json")));
  DefenseOutcome out =
      apply_defense(benign, std::move(poisoned), records, proxy, spec);

  std::string dir = path_or(cfg.paths.data_dir, join_path(out_dir, "defended"));
  std::string manifest = export_dataset(out.defended, dir);
  if (out.detector) save_detector(*out.detector, join_path(out_dir, "detector.json"));
  if (out.denoiser) save_denoiser(*out.denoiser, join_path(out_dir, "denoiser.json"));
  if (spec.defense.kind != DefenseKind::Denoiser)
    write_filter_report(out.removed_ids,
                        out.removed_scores.empty()
                            ? std::vector<double>(out.removed_ids.size(), 0.0)
                            : out.removed_scores,
                        join_path(out_dir, "filter_report.csv"));

  std::printf("defense %s: removed %zu train samples",
              defense_kind_name(spec.defense.kind).c_str(), out.removed_ids.size());
  if (!std::isnan(out.detector_auc))
    std::printf(", detector AUC %.4f", out.detector_auc);
  std::printf("; defended dataset at %s\n", manifest.c_str());
  return 0;
}

int cmd_evaluate(const Config& cfg, const std::string& out_dir) {
  Dataset ds = load_canonical(required_path(cfg.paths.manifest, "paths.manifest"));
  ModelParams victim =
      load_model(path_or(cfg.paths.model, join_path(out_dir, "model.json")));
  ExperimentSpec spec = make_experiment_spec(cfg, ds.vocab);

  RunMetrics m;
  m.plan_summary = plan_summary_text(spec);
  m.seed = spec.victim_cfg.seed;
  if (!cfg.paths.poison_manifest.empty() && fs::exists(cfg.paths.poison_manifest))
    m.poison_count =
        static_cast<int>(load_poison_manifest(cfg.paths.poison_manifest).size());

  m.benign_ifer_pct = ifer(victim, ds.split(Split::Test));

  PoisonPlan eval_plan = spec.plan;
  if (spec.test_trigger) eval_plan.trigger = *spec.test_trigger;
  TriggeredTestSet triggered = trigger_test_set(ds, eval_plan);
  m.eligible_test_count = static_cast<int>(triggered.ids.size());
  m.asr_pct = attack_success_rate(victim, triggered, spec.plan.source_class,
                                  spec.plan.target_class);

  std::string path = join_path(out_dir, "metrics.json");
  std::ofstream f(path);
  if (!f) throw std::runtime_error("cannot write " + path);
  f << run_metrics_to_json(m) << "\n";
  std::printf("IFER %.4f%%  ASR %.4f%%  (eligible %d, poisons %d)\n",
              m.benign_ifer_pct, m.asr_pct, m.eligible_test_count, m.poison_count);
  std::printf("metrics written to %s\n", path.c_str());
  return 0;
}

std::vector<PoisonKind> sweep_kinds(const SweepSection& s) {
  std::vector<PoisonKind> out;
  if (s.kinds.empty())
    return {PoisonKind::DLBD, PoisonKind::CLBD_Random, PoisonKind::CLBD_Ranked,
            PoisonKind::CLBD_ReverseRanked};
  for (const auto& k : s.kinds) out.push_back(parse_poison_kind(k));
  return out;
}

std::vector<TriggerLocation> sweep_locations(const SweepSection& s) {
  std::vector<TriggerLocation> out;
  if (s.locations.empty())
    return {TriggerLocation::Start, TriggerLocation::End, TriggerLocation::Random};
  for (const auto& l : s.locations) out.push_back(parse_location(l));
  return out;
}

std::vector<DefenseKind> sweep_defenses(const SweepSection& s) {
  std::vector<DefenseKind> out;
  if (s.defenses.empty())
    return {DefenseKind::None, DefenseKind::PerfectFilter,
            DefenseKind::TrainedFilter, DefenseKind::Denoiser};
  for (const auto& d : s.defenses) out.push_back(parse_defense_kind(d));
  return out;
}

std::vector<double> values_or(const std::vector<double>& v,
                              std::vector<double> fallback) {
  return v.empty() ? fallback : v;
}

int cmd_sweep(const Config& cfg, const std::string& out_dir) {
  const SweepSection& s = cfg.sweep;
  Dataset ds = dataset_for(cfg);
  ExperimentSpec base = make_experiment_spec(cfg, ds.vocab);
  ExperimentCache cache;

  if (s.name == "stability") {
    StabilityResult r = stability_study(ds, base, s.n_seeds, &cache);
    nlohmann::json j{{"mean_asr_pct", r.mean},
                     {"stddev_asr_pct", r.stddev},
                     {"min_asr_pct", r.min},
                     {"asr_pct", r.asrs}};
    std::string path = join_path(out_dir, "stability.json");
    std::ofstream f(path);
    if (!f) throw std::runtime_error("cannot write " + path);
    f << j.dump(1, '\t') << "\n";
    std::printf("stability over %d seeds: ASR mean %.2f%% stddev %.2f%% min %.2f%%\n",
                s.n_seeds, r.mean, r.stddev, r.min);
    std::printf("written to %s\n", path.c_str());
    return 0;
  }

  SweepResult res;
  if (s.name == "poison_pct") {
    res = sweep_poison_pct(ds, base, sweep_kinds(s),
                           values_or(s.percentages, {0.5, 1, 2, 5, 10}), s.seeds,
                           &cache);
  } else if (s.name == "snr_grid") {
    res = sweep_snr_grid(ds, base, values_or(s.train_dbs, {10, 20, 30, 40, 50}),
                         values_or(s.test_dbs, {10, 20, 30, 40, 50}), s.seeds,
                         &cache);
  } else if (s.name == "location") {
    res = sweep_location(ds, base, sweep_locations(s),
                         values_or(s.percentages, {1, 5, 10}), s.seeds, &cache);
  } else if (s.name == "defense") {
    res = defense_eval(ds, base, sweep_defenses(s), s.seeds, &cache);
  } else {
    throw ConfigError("config key 'sweep.name' must be one of poison_pct, "
                      "snr_grid, location, stability, defense");
  }

  emit_report(res, s.name, out_dir);
  int failed = 0;
  for (const auto& c : res.cells) failed += c.failed ? 1 : 0;
  std::printf("sweep %s: %zu cells (%d failed); report at %s\n", s.name.c_str(),
              res.cells.size(), failed, join_path(out_dir, s.name + ".md").c_str());
  return failed == 0 ? 0 : 2;
}

int dispatch(const Invocation& inv) {
  Config cfg = load_config(inv.config_path);
  shift_seeds(cfg, inv.seed_shift);
  if (!inv.out_override.empty()) cfg.paths.out_dir = inv.out_override;
  std::string out_dir = cfg.paths.out_dir;
  write_snapshot(cfg, inv, out_dir);

  if (inv.command == "gen-data") return cmd_gen_data(cfg, out_dir);
  if (inv.command == "train-proxy") return cmd_train(cfg, out_dir, false);
  if (inv.command == "train-victim") return cmd_train(cfg, out_dir, true);
  if (inv.command == "craft") return cmd_craft(cfg, out_dir);
  if (inv.command == "defend") return cmd_defend(cfg, out_dir);
  if (inv.command == "evaluate") return cmd_evaluate(cfg, out_dir);
  if (inv.command == "sweep") return cmd_sweep(cfg, out_dir);
  throw std::logic_error("unreachable subcommand " + inv.command);
}

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"backdoor poisoning laboratory for audio slot filling"};
  app.set_version_flag("--version", std::string(kToolVersion));
  app.require_subcommand(1);

  Invocation inv;
  const char* names[] = {"gen-data",  "train-proxy", "train-victim", "craft",
                         "defend",    "evaluate",    "sweep"};
  const char* descs[] = {
      "generate the synthetic corpus and manifest",
      "train the attacker's proxy model",
      "train the victim model on the configured dataset",
      "craft a poisoned dataset and poison manifest",
      "filter or denoise a poisoned dataset",
      "compute IFER and ASR for a checkpoint",
      "run a declared sweep and emit reports"};
  for (std::size_t i = 0; i < std::size(names); ++i) {
    CLI::App* sub = app.add_subcommand(names[i], descs[i]);
    sub->add_option("-c,--config", inv.config_path, "JSON config file")
        ->required();
    sub->add_option("-o,--out", inv.out_override, "output directory override");
    sub->add_option("-s,--seed", inv.seed_shift,
                    "shift every configured seed by this amount");
    sub->callback([&inv, sub] { inv.command = sub->get_name(); });
  }

  try {
    app.parse(argc, argv);
  } catch (const CLI::ParseError& e) {
    int code = app.exit(e);
    return code == 0 ? 0 : 1;
  }

  try {
    return dispatch(inv);
  } catch (const ConfigError& e) {
    std::cerr << "config error: " << e.what() << "\n";
    return 1;
  } catch (const std::exception& e) {
    std::cerr << "error: " << e.what() << "\n";
    return 2;
  }
}
