#include "poisonlab/eval.hpp"

#include <algorithm>
#include <cmath>
#include <fstream>
#include <sstream>
#include <stdexcept>
#include <unordered_set>

#include <nlohmann/json.hpp>

#include "poisonlab/csv.hpp"
#include "poisonlab/wav.hpp"

namespace poisonlab {

namespace {

std::string trig_summary(const TriggerSpec& t) {
  return num_to_string(t.snr_db) + "dB@" + location_name(t.location);
}

std::string train_cfg_key(const TrainConfig& c) {
  return std::to_string(c.epochs) + "," + std::to_string(c.batch_size) + "," +
         num_to_string(c.learning_rate) + "," + num_to_string(c.momentum) + "," +
         std::to_string(c.seed);
}

std::string pgd_key(const TrainConfig& proxy_cfg, const PGDConfig& pgd, int source) {
  return train_cfg_key(proxy_cfg) + "|" + std::to_string(pgd.steps) + "," +
         (pgd.step_size ? num_to_string(*pgd.step_size) : std::string("auto")) + "," +
         num_to_string(pgd.budget.snr_bound_db) + "|" + std::to_string(source);
}

std::vector<const Utterance*> split_ptrs(const Dataset& ds, Split s) {
  return ds.split(s);
}

// Benign companions for defense training: the first `want` train utterances
// (dataset order) not in the excluded id set.
std::vector<const Utterance*> benign_companions(
    const Dataset& ds, const std::unordered_set<std::string>& excluded,
    std::size_t want) {
  std::vector<const Utterance*> out;
  for (const auto& u : ds.utterances) {
    if (out.size() >= want) break;
    if (u.split != Split::Train || excluded.count(u.id)) continue;
    out.push_back(&u);
  }
  return out;
}

}  // namespace

std::string plan_summary_text(const ExperimentSpec& spec) {
  std::string s;
  if (spec.poison) {
    s = poison_kind_name(spec.plan.kind) + " pct=" + num_to_string(spec.plan.poison_pct);
  } else {
    s = "benign";
  }
  s += " trig=" + trig_summary(spec.plan.trigger);
  if (spec.test_trigger) s += " test=" + trig_summary(*spec.test_trigger);
  s += " defense=" + defense_kind_name(spec.defense.kind);
  return s;
}

DetectorParams make_defense_detector(const Dataset& ds, const ModelParams& proxy,
                                     const ExperimentSpec& spec, PgdCache* pgd_cache) {
  PoisonPlan hp = heldout_plan(spec.plan);
  CraftResult hc = craft_clbd(ds, hp, proxy, spec.pgd, pgd_cache);
  std::unordered_set<std::string> poison_ids;
  std::vector<const Waveform*> poison_waves;
  for (const auto& r : hc.records) poison_ids.insert(r.id);
  for (const auto& u : hc.poisoned.utterances)
    if (poison_ids.count(u.id)) poison_waves.push_back(&u.wave);
  auto benign = benign_companions(ds, poison_ids, 4 * poison_waves.size());
  std::vector<const Waveform*> benign_waves;
  for (const Utterance* u : benign) benign_waves.push_back(&u->wave);
  return train_detector(benign_waves, poison_waves, spec.defense.detector_cfg);
}

DenoiserParams make_defense_denoiser(const Dataset& ds, const ModelParams& proxy,
                                     const ExperimentSpec& spec, PgdCache* pgd_cache) {
  PoisonPlan hp = heldout_plan(spec.plan);
  auto pool = eligible_pool(ds, hp, proxy);
  auto ids = select_poison_ids(ds, pool, hp, proxy);
  std::unordered_set<std::string> selected(ids.begin(), ids.end());

  std::vector<WavePair> pairs;
  for (const auto& id : ids) {
    const Utterance* u = ds.find(id);
    PgdResult pr;
    if (pgd_cache) {
      auto it = pgd_cache->find(id);
      if (it != pgd_cache->end()) {
        pr = it->second;
      } else {
        pr = pgd_perturb(proxy, u->wave, hp.source_class, spec.pgd);
        (*pgd_cache)[id] = pr;
      }
    } else {
      pr = pgd_perturb(proxy, u->wave, hp.source_class, spec.pgd);
    }
    pairs.push_back(WavePair{pr.wave, u->wave});
  }
  // Identity pairs anchor benign fidelity.
  for (const Utterance* u : benign_companions(ds, selected, ids.size()))
    pairs.push_back(WavePair{u->wave, u->wave});
  return train_denoiser(pairs, spec.defense.denoiser_cfg);
}

DefenseOutcome apply_defense(const Dataset& benign, Dataset poisoned,
                             const std::vector<PoisonRecord>& records,
                             const ModelParams& proxy, const ExperimentSpec& spec,
                             PgdCache* pgd_cache) {
  DefenseOutcome out;
  switch (spec.defense.kind) {
    case DefenseKind::None:
      out.defended = std::move(poisoned);
      break;
    case DefenseKind::PerfectFilter:
      out.defended = perfect_filter(poisoned, records);
      for (const auto& r : records) out.removed_ids.push_back(r.id);
      break;
    case DefenseKind::TrainedFilter: {
      DetectorParams det = make_defense_detector(benign, proxy, spec, pgd_cache);
      std::vector<const Waveform*> dev_waves;
      for (const Utterance* u : benign.split(Split::Dev))
        dev_waves.push_back(&u->wave);
      double thr = threshold_for_fpr(det, dev_waves, spec.defense.filter_fpr);
      if (!records.empty()) {
        Dataset train_only;
        train_only.vocab = poisoned.vocab;
        for (const auto& u : poisoned.utterances)
          if (u.split == Split::Train) train_only.utterances.push_back(u);
        std::unordered_set<std::string> poison_ids;
        for (const auto& r : records) poison_ids.insert(r.id);
        out.detector_auc = auc(score(det, train_only), poison_ids);
      }
      FilterResult fr = filter_dataset(poisoned, det, thr);
      out.defended = std::move(fr.retained);
      out.removed_ids = std::move(fr.removed);
      out.removed_scores = std::move(fr.removed_scores);
      out.detector = std::move(det);
      break;
    }
    case DefenseKind::Denoiser: {
      DenoiserParams den = make_defense_denoiser(benign, proxy, spec, pgd_cache);
      out.defended = std::move(poisoned);
      for (auto& u : out.defended.utterances)
        if (u.split == Split::Train) u.wave = quantize16(denoise(den, u.wave));
      out.denoiser = std::move(den);
      break;
    }
  }
  return out;
}

double ifer(const ModelParams& victim, const std::vector<const Utterance*>& split) {
  if (split.empty()) throw std::runtime_error("ifer: empty split");
  std::size_t wrong = 0;
  for (const Utterance* u : split) {
    SlotTriple p = predict(victim, u->wave);
    wrong += (p.action != u->action) + (p.object != u->object) +
             (p.location != u->location);
  }
  return 100.0 * static_cast<double>(wrong) /
         (3.0 * static_cast<double>(split.size()));
}

double attack_success_rate(const ModelParams& victim, const TriggeredTestSet& set,
                           int source_class, int target_class) {
  (void)source_class;  // membership enforced by trigger_test_set
  if (set.utterances.empty())
    throw std::runtime_error("attack_success_rate: empty eligible set");
  std::size_t hits = 0;
  for (const auto& u : set.utterances)
    if (predict(victim, u.wave).action == target_class) ++hits;
  return 100.0 * static_cast<double>(hits) /
         static_cast<double>(set.utterances.size());
}

std::string defense_kind_name(DefenseKind k) {
  switch (k) {
    case DefenseKind::None: return "none";
    case DefenseKind::PerfectFilter: return "perfect";
    case DefenseKind::TrainedFilter: return "filter";
    case DefenseKind::Denoiser: return "denoiser";
  }
  throw std::runtime_error("defense_kind_name: bad kind");
}

DefenseKind parse_defense_kind(const std::string& s) {
  if (s == "none") return DefenseKind::None;
  if (s == "perfect") return DefenseKind::PerfectFilter;
  if (s == "filter") return DefenseKind::TrainedFilter;
  if (s == "denoiser") return DefenseKind::Denoiser;
  throw std::runtime_error("unknown defense kind '" + s + "'");
}

PoisonPlan heldout_plan(const PoisonPlan& main) {
  PoisonPlan hp = main;
  // Always the random CLBD family: defenses train against adversarial-noise
  // poisons without ever seeing the attacker's exact selection.
  hp.kind = PoisonKind::CLBD_Random;
  hp.selection_seed = main.selection_seed ^ 0x9e3779b97f4a7c15ULL;
  hp.trigger.seed = main.trigger.seed ^ 0xc2b2ae3d27d4eb4fULL;
  return hp;
}

const ModelParams& ExperimentCache::proxy(const Dataset& ds, const TrainConfig& cfg) {
  std::string key = train_cfg_key(cfg);
  auto it = proxies_.find(key);
  if (it == proxies_.end())
    it = proxies_.emplace(key, train(ds, cfg).params).first;
  return it->second;
}

PgdCache& ExperimentCache::pgd_cache(const TrainConfig& proxy_cfg,
                                     const PGDConfig& pgd, int source_class) {
  return pgd_[pgd_key(proxy_cfg, pgd, source_class)];
}

Dataset make_corpus(const SynthConfig& cfg) {
  return canonicalize(generate_synthetic(cfg));
}

RunMetrics run_experiment(const Dataset& ds, const ExperimentSpec& spec,
                          ExperimentCache* cache) {
  ExperimentCache local;
  ExperimentCache& c = cache ? *cache : local;

  const ModelParams& proxy = c.proxy(ds, spec.proxy_cfg);
  PgdCache& pgd_cache =
      c.pgd_cache(spec.proxy_cfg, spec.pgd, spec.plan.source_class);

  Dataset poisoned;
  std::vector<PoisonRecord> records;
  if (spec.poison) {
    CraftResult cr = is_clbd(spec.plan.kind)
                         ? craft_clbd(ds, spec.plan, proxy, spec.pgd, &pgd_cache)
                         : craft_dlbd(ds, spec.plan, proxy);
    poisoned = std::move(cr.poisoned);
    records = std::move(cr.records);
    // The file pipeline writes crafted waves as 16-bit WAV before the victim
    // reads them; mirror that here.
    std::unordered_set<std::string> crafted;
    for (const auto& r : records) crafted.insert(r.id);
    for (auto& u : poisoned.utterances)
      if (crafted.count(u.id)) u.wave = quantize16(u.wave);
  } else {
    poisoned = ds;
  }

  RunMetrics m;
  m.plan_summary = plan_summary_text(spec);
  m.seed = spec.victim_cfg.seed;
  m.poison_count = static_cast<int>(records.size());

  DefenseOutcome defended =
      apply_defense(ds, std::move(poisoned), records, proxy, spec, &pgd_cache);
  m.detector_auc = defended.detector_auc;

  ModelParams victim = train(defended.defended, spec.victim_cfg).params;

  m.benign_ifer_pct = ifer(victim, split_ptrs(ds, Split::Test));

  PoisonPlan eval_plan = spec.plan;
  if (spec.test_trigger) eval_plan.trigger = *spec.test_trigger;
  TriggeredTestSet triggered = trigger_test_set(ds, eval_plan);
  m.eligible_test_count = static_cast<int>(triggered.ids.size());
  m.asr_pct = attack_success_rate(victim, triggered, spec.plan.source_class,
                                  spec.plan.target_class);
  return m;
}

ExperimentSpec spec_for_seed(const ExperimentSpec& base, std::uint64_t seed_index) {
  ExperimentSpec s = base;
  s.victim_cfg.seed = base.victim_cfg.seed + seed_index;
  s.plan.selection_seed = base.plan.selection_seed + seed_index;
  s.plan.trigger.seed = base.plan.trigger.seed + seed_index;
  if (s.test_trigger) s.test_trigger->seed = s.test_trigger->seed + seed_index;
  s.defense.detector_cfg.seed = base.defense.detector_cfg.seed + seed_index;
  s.defense.denoiser_cfg.seed = base.defense.denoiser_cfg.seed + seed_index;
  return s;
}

namespace {

SweepCell run_cell(const Dataset& ds, const ExperimentSpec& base,
                   const std::string& setting,
                   const std::vector<std::uint64_t>& seeds,
                   ExperimentCache* cache) {
  SweepCell cell;
  cell.setting = setting;
  try {
    for (std::uint64_t s : seeds)
      cell.runs.push_back(run_experiment(ds, spec_for_seed(base, s), cache));
  } catch (const std::exception& e) {
    cell.failed = true;
    cell.error = e.what();
    cell.runs.clear();
  }
  return cell;
}

}  // namespace

SweepResult sweep_poison_pct(const Dataset& ds, const ExperimentSpec& base,
                             const std::vector<PoisonKind>& kinds,
                             const std::vector<double>& percentages,
                             const std::vector<std::uint64_t>& seeds,
                             ExperimentCache* cache) {
  if (kinds.empty() || percentages.empty() || seeds.empty())
    throw std::runtime_error("sweep_poison_pct: empty axis");
  SweepResult out;
  out.axis = "kind x poison_pct";
  for (PoisonKind k : kinds)
    for (double pct : percentages) {
      ExperimentSpec spec = base;
      spec.plan.kind = k;
      spec.plan.poison_pct = pct;
      out.cells.push_back(run_cell(ds, spec,
                                   poison_kind_name(k) + "/" + num_to_string(pct),
                                   seeds, cache));
    }
  return out;
}

SweepResult sweep_snr_grid(const Dataset& ds, const ExperimentSpec& base,
                           const std::vector<double>& train_dbs,
                           const std::vector<double>& test_dbs,
                           const std::vector<std::uint64_t>& seeds,
                           ExperimentCache* cache) {
  if (train_dbs.empty() || test_dbs.empty() || seeds.empty())
    throw std::runtime_error("sweep_snr_grid: empty axis");
  SweepResult out;
  out.axis = "train_snr_db x test_snr_db";
  for (double tr : train_dbs)
    for (double te : test_dbs) {
      ExperimentSpec spec = base;
      spec.plan.trigger.snr_db = tr;
      TriggerSpec test = spec.plan.trigger;
      test.snr_db = te;
      spec.test_trigger = test;
      out.cells.push_back(run_cell(
          ds, spec, num_to_string(tr) + "/" + num_to_string(te), seeds, cache));
    }
  return out;
}

SweepResult sweep_location(const Dataset& ds, const ExperimentSpec& base,
                           const std::vector<TriggerLocation>& locations,
                           const std::vector<double>& percentages,
                           const std::vector<std::uint64_t>& seeds,
                           ExperimentCache* cache) {
  if (locations.empty() || percentages.empty() || seeds.empty())
    throw std::runtime_error("sweep_location: empty axis");
  SweepResult out;
  out.axis = "location x poison_pct";
  for (TriggerLocation loc : locations)
    for (double pct : percentages) {
      ExperimentSpec spec = base;
      spec.plan.trigger.location = loc;
      spec.plan.poison_pct = pct;
      out.cells.push_back(run_cell(
          ds, spec, location_name(loc) + "/" + num_to_string(pct), seeds, cache));
    }
  return out;
}

StabilityResult stability_study(const Dataset& ds, const ExperimentSpec& base,
                                int n_seeds, ExperimentCache* cache) {
  if (n_seeds < 1) throw std::runtime_error("stability_study: n_seeds must be >= 1");
  StabilityResult out;
  for (int i = 0; i < n_seeds; ++i) {
    RunMetrics m =
        run_experiment(ds, spec_for_seed(base, static_cast<std::uint64_t>(i)), cache);
    out.asrs.push_back(m.asr_pct);
  }
  out.mean = mean(out.asrs);
  out.stddev = stddev(out.asrs);
  out.min = *std::min_element(out.asrs.begin(), out.asrs.end());
  return out;
}

SweepResult defense_eval(const Dataset& ds, const ExperimentSpec& base,
                         const std::vector<DefenseKind>& defenses,
                         const std::vector<std::uint64_t>& seeds,
                         ExperimentCache* cache) {
  if (defenses.empty() || seeds.empty())
    throw std::runtime_error("defense_eval: empty axis");
  SweepResult out;
  out.axis = "defense";
  for (DefenseKind d : defenses) {
    ExperimentSpec spec = base;
    spec.defense.kind = d;
    out.cells.push_back(run_cell(ds, spec, defense_kind_name(d), seeds, cache));
  }
  return out;
}

double median(std::vector<double> v) {
  if (v.empty()) throw std::runtime_error("median: empty");
  std::sort(v.begin(), v.end());
  std::size_t n = v.size();
  return n % 2 ? v[n / 2] : 0.5 * (v[n / 2 - 1] + v[n / 2]);
}

double mean(const std::vector<double>& v) {
  if (v.empty()) throw std::runtime_error("mean: empty");
  double s = 0;
  for (double x : v) s += x;
  return s / static_cast<double>(v.size());
}

double stddev(const std::vector<double>& v) {
  double m = mean(v);
  double s = 0;
  for (double x : v) s += (x - m) * (x - m);
  return std::sqrt(s / static_cast<double>(v.size()));
}

std::vector<double> cell_asrs(const SweepCell& cell) {
  std::vector<double> out;
  for (const auto& r : cell.runs) out.push_back(r.asr_pct);
  return out;
}

std::vector<double> cell_ifers(const SweepCell& cell) {
  std::vector<double> out;
  for (const auto& r : cell.runs) out.push_back(r.benign_ifer_pct);
  return out;
}

std::string run_metrics_to_json(const RunMetrics& m) {
  nlohmann::json j;
  j["plan"] = m.plan_summary;
  j["seed"] = m.seed;
  j["benign_ifer_pct"] = m.benign_ifer_pct;
  j["asr_pct"] = m.asr_pct;
  if (std::isnan(m.detector_auc))
    j["detector_auc"] = nullptr;
  else
    j["detector_auc"] = m.detector_auc;
  j["eligible_test_count"] = m.eligible_test_count;
  j["poison_count"] = m.poison_count;
  return j.dump();
}

RunMetrics run_metrics_from_json(const std::string& line) {
  nlohmann::json j = nlohmann::json::parse(line);
  RunMetrics m;
  m.plan_summary = j.at("plan").get<std::string>();
  m.seed = j.at("seed").get<std::uint64_t>();
  m.benign_ifer_pct = j.at("benign_ifer_pct").get<double>();
  m.asr_pct = j.at("asr_pct").get<double>();
  m.detector_auc = j.at("detector_auc").is_null()
                       ? std::numeric_limits<double>::quiet_NaN()
                       : j.at("detector_auc").get<double>();
  m.eligible_test_count = j.at("eligible_test_count").get<int>();
  m.poison_count = j.at("poison_count").get<int>();
  return m;
}

void append_runs_jsonl(const SweepResult& sweep, const std::string& path) {
  std::ofstream f(path, std::ios::app);
  if (!f) throw std::runtime_error("append_runs_jsonl: cannot write " + path);
  for (const auto& cell : sweep.cells) {
    if (cell.failed) {
      nlohmann::json j;
      j["setting"] = cell.setting;
      j["failed"] = true;
      j["error"] = cell.error;
      f << j.dump() << "\n";
      continue;
    }
    for (const auto& run : cell.runs) {
      nlohmann::json j = nlohmann::json::parse(run_metrics_to_json(run));
      j["setting"] = cell.setting;
      f << j.dump() << "\n";
    }
  }
}

}  // namespace poisonlab
