#pragma once

#include <cstdint>
#include <optional>
#include <string>
#include <unordered_map>
#include <vector>

#include "poisonlab/dataset.hpp"
#include "poisonlab/model.hpp"
#include "poisonlab/signal.hpp"

namespace poisonlab {

struct PGDConfig {
  int steps = 50;
  // Step size; if unset, r/10 recomputed per sample.
  std::optional<double> step_size;
  PerturbationBudget budget;  // default 30 dB
};

enum class PoisonKind { DLBD, CLBD_Random, CLBD_Ranked, CLBD_ReverseRanked };

std::string poison_kind_name(PoisonKind k);
PoisonKind parse_poison_kind(const std::string& s);
bool is_clbd(PoisonKind k);

struct PoisonPlan {
  PoisonKind kind = PoisonKind::DLBD;
  double poison_pct = 10.0;        // of the eligible pool
  int source_class = 0;            // action index ("activate")
  int target_class = 1;            // action index ("deactivate")
  TriggerSpec trigger;
  std::uint64_t selection_seed = 0;
};

struct PoisonRecord {
  std::string id;
  PoisonKind kind = PoisonKind::DLBD;
  SlotTriple original_label;
  SlotTriple training_label;
  double perturb_snr_db = 0;   // CLBD only; +inf when PGD left the wave unchanged
  bool impersonated = false;   // CLBD only
  std::size_t trigger_offset = 0;
};

// All train utterances whose proxy-predicted action is the source class
// (DLBD) or the target class (CLBD), in dataset order. Throws on empty.
std::vector<std::string> eligible_pool(const Dataset& ds, const PoisonPlan& plan,
                                       const ModelParams& proxy);

// k = round(poison_pct/100 * |pool|), at least 1. Ranked variants order by
// proxy per-sample loss (descending for ranked, ascending for reverse),
// ties by id; random/DLBD draw a seeded uniform sample without replacement.
std::vector<std::string> select_poison_ids(const Dataset& ds,
                                           const std::vector<std::string>& pool,
                                           const PoisonPlan& plan,
                                           const ModelParams& proxy);

struct PgdResult {
  Waveform wave;
  bool impersonated = false;
};

// Projected gradient descent toward the source action class:
//   s_{k+1} = project_l2(s_k - eps * g/||g||2, s_0, r),  r = 10^(-bound/20)*||s_0||2
// Zero gradient at a step takes no step; if no step was ever taken the
// input is returned unchanged with the flag false.
PgdResult pgd_perturb(const ModelParams& proxy, const Waveform& w, int source_class,
                      const PGDConfig& cfg);

struct CraftResult {
  Dataset poisoned;
  std::vector<PoisonRecord> records;
};

CraftResult craft_dlbd(const Dataset& ds, const PoisonPlan& plan,
                       const ModelParams& proxy);

// Optional cache maps utterance id to a previously computed PGD result for
// the same (proxy, budget, steps); sweeps reuse it across percentages.
using PgdCache = std::unordered_map<std::string, PgdResult>;
CraftResult craft_clbd(const Dataset& ds, const PoisonPlan& plan,
                       const ModelParams& proxy, const PGDConfig& pgd,
                       PgdCache* cache = nullptr);

struct TriggeredTestSet {
  std::vector<Utterance> utterances;  // triggered copies of eligible test samples
  std::vector<std::string> ids;
};

// Applies the plan's trigger to every test utterance whose ground-truth
// action is the source class; labels untouched. Empty result when the test
// split has no source-class samples.
TriggeredTestSet trigger_test_set(const Dataset& ds, const PoisonPlan& plan);

void write_poison_manifest(const std::vector<PoisonRecord>& records,
                           const SlotVocab& vocab, const std::string& path);

struct PoisonManifestRow {
  std::string id;
  PoisonKind kind = PoisonKind::DLBD;
  std::string original_action;
  std::string training_action;
  std::optional<double> perturb_snr_db;
  std::optional<bool> impersonated;
  std::size_t trigger_offset = 0;
};

std::vector<PoisonManifestRow> load_poison_manifest(const std::string& path);

}  // namespace poisonlab
