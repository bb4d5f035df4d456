#pragma once

#include <cstdint>
#include <limits>
#include <map>
#include <optional>
#include <string>
#include <vector>

#include "poisonlab/attack.hpp"
#include "poisonlab/dataset.hpp"
#include "poisonlab/defense.hpp"
#include "poisonlab/model.hpp"

namespace poisonlab {

struct RunMetrics {
  double benign_ifer_pct = 0.0;
  double asr_pct = 0.0;
  double detector_auc = std::numeric_limits<double>::quiet_NaN();  // filter runs only
  int eligible_test_count = 0;
  int poison_count = 0;
  std::uint64_t seed = 0;
  std::string plan_summary;
};

// Percent of wrong slot predictions: (#wrong slots) / (3 * #utterances) * 100.
double ifer(const ModelParams& victim, const std::vector<const Utterance*>& split);

// Percent of triggered eligible samples predicted with the target action.
double attack_success_rate(const ModelParams& victim, const TriggeredTestSet& set,
                           int source_class, int target_class);

enum class DefenseKind { None, PerfectFilter, TrainedFilter, Denoiser };
std::string defense_kind_name(DefenseKind k);
DefenseKind parse_defense_kind(const std::string& s);

struct DefenseOption {
  DefenseKind kind = DefenseKind::None;
  TrainConfig detector_cfg{60, 16, 0.3, 0.9, 0};
  TrainConfig denoiser_cfg{40, 32, 1.0, 0.9, 0};
  double filter_fpr = 0.05;
};

struct ExperimentSpec {
  PoisonPlan plan;
  bool poison = true;  // false = benign (null-attack) run; trigger still evaluated
  PGDConfig pgd;
  TrainConfig proxy_cfg{15, 32, 0.05, 0.9, 1000};
  TrainConfig victim_cfg{15, 32, 0.05, 0.9, 1};
  DefenseOption defense;
  // Test-time trigger override (trigger SNR grid); defaults to plan.trigger.
  std::optional<TriggerSpec> test_trigger;
};

// Frozen one-line description of a run's attack settings, embedded in every
// metrics record.
std::string plan_summary_text(const ExperimentSpec& spec);

// Held-out crafting plan used to train defenses: same attack family but a
// random selection with a different seed, so the defense never sees the
// attacker's exact poison set.
PoisonPlan heldout_plan(const PoisonPlan& main);

// Train the detector / denoiser a defender would deploy: poisons crafted on
// held-out data (heldout_plan) with the defender's own proxy.
DetectorParams make_defense_detector(const Dataset& benign, const ModelParams& proxy,
                                     const ExperimentSpec& spec,
                                     PgdCache* pgd_cache = nullptr);
DenoiserParams make_defense_denoiser(const Dataset& benign, const ModelParams& proxy,
                                     const ExperimentSpec& spec,
                                     PgdCache* pgd_cache = nullptr);

struct DefenseOutcome {
  Dataset defended;
  double detector_auc = std::numeric_limits<double>::quiet_NaN();
  std::vector<std::string> removed_ids;  // filter kinds
  std::vector<double> removed_scores;    // trained filter only
  std::optional<DetectorParams> detector;
  std::optional<DenoiserParams> denoiser;
};

// Applies spec.defense to a (possibly poisoned) dataset. `benign` supplies
// the defender's clean calibration data (dev-split threshold, held-out
// crafting); `records` feed the perfect filter and the reported AUC.
DefenseOutcome apply_defense(const Dataset& benign, Dataset poisoned,
                             const std::vector<PoisonRecord>& records,
                             const ModelParams& proxy, const ExperimentSpec& spec,
                             PgdCache* pgd_cache = nullptr);

// Memoizes the proxy model and per-utterance PGD results across sweep cells
// that share them. One cache instance is bound to one (already canonical)
// dataset.
class ExperimentCache {
 public:
  const ModelParams& proxy(const Dataset& ds, const TrainConfig& cfg);
  PgdCache& pgd_cache(const TrainConfig& proxy_cfg, const PGDConfig& pgd,
                      int source_class);

 private:
  std::map<std::string, ModelParams> proxies_;
  std::map<std::string, PgdCache> pgd_;
};

// Full protocol: train proxy on benign data, craft, optionally defend,
// train victim, evaluate clean-test IFER and triggered-test ASR.
// `ds` must be canonical (see canonicalize); the crafted poison waves are
// re-quantized exactly as the file pipeline would.
RunMetrics run_experiment(const Dataset& ds, const ExperimentSpec& spec,
                          ExperimentCache* cache = nullptr);

// Generate + canonicalize, matching what gen-data writes to disk.
Dataset make_corpus(const SynthConfig& cfg);

struct SweepCell {
  std::string setting;
  std::vector<RunMetrics> runs;
  bool failed = false;
  std::string error;
};

struct SweepResult {
  std::string axis;
  std::vector<SweepCell> cells;
};

// Seed protocol for sweeps: seed index i shifts the victim, selection, and
// trigger seeds; dataset and proxy stay fixed (the attacker's proxy does
// not change between victim retrainings).
ExperimentSpec spec_for_seed(const ExperimentSpec& base, std::uint64_t seed_index);

SweepResult sweep_poison_pct(const Dataset& ds, const ExperimentSpec& base,
                             const std::vector<PoisonKind>& kinds,
                             const std::vector<double>& percentages,
                             const std::vector<std::uint64_t>& seeds,
                             ExperimentCache* cache = nullptr);

SweepResult sweep_snr_grid(const Dataset& ds, const ExperimentSpec& base,
                           const std::vector<double>& train_dbs,
                           const std::vector<double>& test_dbs,
                           const std::vector<std::uint64_t>& seeds,
                           ExperimentCache* cache = nullptr);

SweepResult sweep_location(const Dataset& ds, const ExperimentSpec& base,
                           const std::vector<TriggerLocation>& locations,
                           const std::vector<double>& percentages,
                           const std::vector<std::uint64_t>& seeds,
                           ExperimentCache* cache = nullptr);

struct StabilityResult {
  double mean = 0.0;
  double stddev = 0.0;
  double min = 0.0;
  std::vector<double> asrs;
};

StabilityResult stability_study(const Dataset& ds, const ExperimentSpec& base,
                                int n_seeds, ExperimentCache* cache = nullptr);

SweepResult defense_eval(const Dataset& ds, const ExperimentSpec& base,
                         const std::vector<DefenseKind>& defenses,
                         const std::vector<std::uint64_t>& seeds,
                         ExperimentCache* cache = nullptr);

// Aggregation helpers (empty input throws).
double median(std::vector<double> v);
double mean(const std::vector<double>& v);
double stddev(const std::vector<double>& v);  // population

std::vector<double> cell_asrs(const SweepCell& cell);
std::vector<double> cell_ifers(const SweepCell& cell);

std::string run_metrics_to_json(const RunMetrics& m);
RunMetrics run_metrics_from_json(const std::string& line);
void append_runs_jsonl(const SweepResult& sweep, const std::string& path);

}  // namespace poisonlab
