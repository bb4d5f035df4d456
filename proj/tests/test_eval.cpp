#define DOCTEST_CONFIG_IMPLEMENT_WITH_MAIN
#include <doctest.h>

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <limits>
#include <string>
#include <vector>

#include "poisonlab/attack.hpp"
#include "poisonlab/dataset.hpp"
#include "poisonlab/eval.hpp"
#include "poisonlab/model.hpp"
#include "poisonlab/signal.hpp"
#include "test_util.hpp"

using namespace poisonlab;

namespace {

// One small noiseless corpus and one memo cache shared by every case in this
// binary. Experiments here exercise protocol plumbing, not attack strength,
// so 100 utterances are plenty.
const Dataset& corpus() {
  static Dataset ds = [] {
    SynthConfig cfg;
    cfg.n_train = 60;
    cfg.n_dev = 20;
    cfg.n_test = 20;
    cfg.background_snr_db = std::numeric_limits<double>::infinity();
    cfg.seed = 7;
    return make_corpus(cfg);
  }();
  return ds;
}

ExperimentCache& cache() {
  static ExperimentCache c;
  return c;
}

TriggerSpec horn_trigger(double snr_db, TriggerLocation loc) {
  TriggerSpec t;
  t.clip = synth_horn(0.25, 400.0, 16000);
  t.snr_db = snr_db;
  t.location = loc;
  t.seed = 5;
  return t;
}

ExperimentSpec base_spec(PoisonKind kind, double pct) {
  ExperimentSpec spec;
  spec.plan.kind = kind;
  spec.plan.poison_pct = pct;
  spec.plan.trigger = horn_trigger(20.0, TriggerLocation::Start);
  spec.plan.selection_seed = 11;
  return spec;
}

ModelParams zero_model() {
  ModelParams m = init_model(default_vocab(), 0);
  std::fill(m.w.begin(), m.w.end(), 0.0);
  return m;
}

Utterance labeled(const std::string& id, int action, int object, int location) {
  Utterance u;
  u.id = id;
  u.split = Split::Test;
  u.action = action;
  u.object = object;
  u.location = location;
  u.wave.sample_rate = 16000;
  u.wave.samples.assign(1600, 0.01);
  return u;
}

bool metrics_equal(const RunMetrics& a, const RunMetrics& b) {
  bool auc_same = (std::isnan(a.detector_auc) && std::isnan(b.detector_auc)) ||
                  a.detector_auc == b.detector_auc;
  return a.benign_ifer_pct == b.benign_ifer_pct && a.asr_pct == b.asr_pct &&
         auc_same && a.eligible_test_count == b.eligible_test_count &&
         a.poison_count == b.poison_count && a.seed == b.seed &&
         a.plan_summary == b.plan_summary;
}

}  // namespace

TEST_CASE("ifer counts wrong slots out of 3 per utterance") {
  ModelParams m = zero_model();  // ties everywhere, predicts {0,0,0}
  std::vector<Utterance> utts;
  utts.push_back(labeled("a", 0, 0, 0));  // 0 wrong
  utts.push_back(labeled("b", 1, 0, 0));  // 1 wrong
  utts.push_back(labeled("c", 1, 1, 0));  // 2 wrong
  utts.push_back(labeled("d", 1, 1, 1));  // 3 wrong
  std::vector<const Utterance*> ptrs;
  for (const auto& u : utts) ptrs.push_back(&u);

  CHECK(ifer(m, ptrs) == 100.0 * 6.0 / 12.0);
  CHECK(ifer(m, {ptrs[0]}) == 0.0);
  CHECK(ifer(m, {ptrs[3]}) == 100.0);
  CHECK_THROWS(ifer(m, {}));
}

TEST_CASE("attack_success_rate counts target-action predictions") {
  ModelParams m = zero_model();  // predicts action 0 for every wave
  TriggeredTestSet set;
  for (int i = 0; i < 4; ++i) {
    set.utterances.push_back(labeled("t" + std::to_string(i), 0, 0, 0));
    set.ids.push_back(set.utterances.back().id);
  }

  CHECK(attack_success_rate(m, set, 1, 0) == 100.0);
  CHECK(attack_success_rate(m, set, 0, 1) == 0.0);
  CHECK_THROWS(attack_success_rate(m, TriggeredTestSet{}, 0, 1));
}

TEST_CASE("plan_summary_text pins the run description format") {
  ExperimentSpec spec = base_spec(PoisonKind::DLBD, 10.0);
  CHECK(plan_summary_text(spec) == "dlbd pct=10 trig=20dB@start defense=none");

  spec.plan.kind = PoisonKind::CLBD_Ranked;
  spec.plan.poison_pct = 2.5;
  CHECK(plan_summary_text(spec) == "clbd_ranked pct=2.5 trig=20dB@start defense=none");

  spec.poison = false;
  CHECK(plan_summary_text(spec) == "benign trig=20dB@start defense=none");

  spec.poison = true;
  spec.plan.kind = PoisonKind::DLBD;
  spec.plan.poison_pct = 10.0;
  spec.test_trigger = horn_trigger(50.0, TriggerLocation::End);
  CHECK(plan_summary_text(spec) ==
        "dlbd pct=10 trig=20dB@start test=50dB@end defense=none");

  spec.test_trigger.reset();
  spec.defense.kind = DefenseKind::PerfectFilter;
  CHECK(plan_summary_text(spec) == "dlbd pct=10 trig=20dB@start defense=perfect");
  spec.defense.kind = DefenseKind::TrainedFilter;
  CHECK(plan_summary_text(spec) == "dlbd pct=10 trig=20dB@start defense=filter");
  spec.defense.kind = DefenseKind::Denoiser;
  CHECK(plan_summary_text(spec) == "dlbd pct=10 trig=20dB@start defense=denoiser");
}

TEST_CASE("defense kind names round trip") {
  for (DefenseKind k : {DefenseKind::None, DefenseKind::PerfectFilter,
                        DefenseKind::TrainedFilter, DefenseKind::Denoiser})
    CHECK(parse_defense_kind(defense_kind_name(k)) == k);
  CHECK_THROWS(parse_defense_kind("perimeter"));
}

TEST_CASE("heldout_plan derives an independent random-CLBD plan") {
  PoisonPlan main = base_spec(PoisonKind::CLBD_Ranked, 15.0).plan;
  main.selection_seed = 123;
  main.trigger.seed = 456;

  PoisonPlan hp = heldout_plan(main);
  CHECK(hp.kind == PoisonKind::CLBD_Random);
  CHECK(hp.selection_seed == (123ULL ^ 0x9e3779b97f4a7c15ULL));
  CHECK(hp.trigger.seed == (456ULL ^ 0xc2b2ae3d27d4eb4fULL));
  CHECK(hp.selection_seed != main.selection_seed);
  CHECK(hp.trigger.seed != main.trigger.seed);

  // Untouched fields carry over.
  CHECK(hp.poison_pct == main.poison_pct);
  CHECK(hp.source_class == main.source_class);
  CHECK(hp.target_class == main.target_class);
  CHECK(hp.trigger.snr_db == main.trigger.snr_db);
  CHECK(hp.trigger.location == main.trigger.location);

  // The seed masks are involutions; the family override is not.
  PoisonPlan twice = heldout_plan(hp);
  CHECK(twice.selection_seed == main.selection_seed);
  CHECK(twice.trigger.seed == main.trigger.seed);
  CHECK(twice.kind == PoisonKind::CLBD_Random);

  // DLBD plans also train their defenses on clean-label poisons.
  main.kind = PoisonKind::DLBD;
  CHECK(heldout_plan(main).kind == PoisonKind::CLBD_Random);
}

TEST_CASE("spec_for_seed shifts run seeds and leaves the proxy alone") {
  ExperimentSpec base = base_spec(PoisonKind::CLBD_Ranked, 10.0);
  base.victim_cfg.seed = 1;
  base.plan.selection_seed = 11;
  base.plan.trigger.seed = 5;
  base.defense.detector_cfg.seed = 100;
  base.defense.denoiser_cfg.seed = 200;

  ExperimentSpec s3 = spec_for_seed(base, 3);
  CHECK(s3.victim_cfg.seed == 4);
  CHECK(s3.plan.selection_seed == 14);
  CHECK(s3.plan.trigger.seed == 8);
  CHECK(s3.defense.detector_cfg.seed == 103);
  CHECK(s3.defense.denoiser_cfg.seed == 203);
  CHECK(s3.proxy_cfg.seed == base.proxy_cfg.seed);
  CHECK(!s3.test_trigger.has_value());

  ExperimentSpec s0 = spec_for_seed(base, 0);
  CHECK(s0.victim_cfg.seed == base.victim_cfg.seed);
  CHECK(s0.plan.selection_seed == base.plan.selection_seed);
  CHECK(s0.plan.trigger.seed == base.plan.trigger.seed);

  base.test_trigger = horn_trigger(50.0, TriggerLocation::Start);
  base.test_trigger->seed = 40;
  CHECK(spec_for_seed(base, 2).test_trigger->seed == 42);
}

TEST_CASE("run metrics survive the jsonl round trip") {
  RunMetrics m;
  m.benign_ifer_pct = 1.8333333333333333;
  m.asr_pct = 73.19587628865979;
  m.detector_auc = 0.9875;
  m.eligible_test_count = 97;
  m.poison_count = 66;
  m.seed = 3;
  m.plan_summary = "clbd_ranked pct=30 trig=20dB@start defense=filter";

  RunMetrics back = run_metrics_from_json(run_metrics_to_json(m));
  CHECK(back.benign_ifer_pct == m.benign_ifer_pct);
  CHECK(back.asr_pct == m.asr_pct);
  CHECK(back.detector_auc == m.detector_auc);
  CHECK(back.eligible_test_count == m.eligible_test_count);
  CHECK(back.poison_count == m.poison_count);
  CHECK(back.seed == m.seed);
  CHECK(back.plan_summary == m.plan_summary);

  // Runs without a detector serialize the AUC as null, not NaN.
  m.detector_auc = std::numeric_limits<double>::quiet_NaN();
  std::string line = run_metrics_to_json(m);
  CHECK(line.find("\"detector_auc\":null") != std::string::npos);
  CHECK(std::isnan(run_metrics_from_json(line).detector_auc));

  CHECK_THROWS(run_metrics_from_json("not json"));
  CHECK_THROWS(run_metrics_from_json("{\"plan\":\"x\"}"));
}

TEST_CASE("aggregation helpers") {
  CHECK(median({3.0, 1.0, 2.0}) == 2.0);
  CHECK(median({4.0, 1.0, 3.0, 2.0}) == 2.5);
  CHECK(median({5.0}) == 5.0);
  CHECK(mean({1.0, 2.0, 6.0}) == 3.0);
  CHECK(stddev({1.0, 3.0}) == 1.0);  // population
  CHECK(stddev({2.0, 2.0, 2.0}) == 0.0);
  CHECK_THROWS(median({}));
  CHECK_THROWS(mean({}));
  CHECK_THROWS(stddev(std::vector<double>{}));

  SweepCell cell;
  RunMetrics a, b;
  a.asr_pct = 10.0;
  a.benign_ifer_pct = 1.0;
  b.asr_pct = 30.0;
  b.benign_ifer_pct = 2.0;
  cell.runs = {a, b};
  CHECK(cell_asrs(cell) == std::vector<double>{10.0, 30.0});
  CHECK(cell_ifers(cell) == std::vector<double>{1.0, 2.0});
}

TEST_CASE("benign run_experiment: no poisons, no detector, deterministic") {
  ExperimentSpec spec = base_spec(PoisonKind::DLBD, 10.0);
  spec.poison = false;

  RunMetrics m = run_experiment(corpus(), spec, &cache());
  CHECK(m.poison_count == 0);
  CHECK(std::isnan(m.detector_auc));
  CHECK(m.seed == spec.victim_cfg.seed);
  CHECK(m.plan_summary == "benign trig=20dB@start defense=none");

  int source_tests = 0;
  for (const Utterance* u : corpus().split(Split::Test))
    if (u->action == spec.plan.source_class) ++source_tests;
  CHECK(m.eligible_test_count == source_tests);

  // The victim actually learned the task on this clean corpus.
  CHECK(m.benign_ifer_pct < 15.0);

  // Bit-stable: rerun with the shared cache and with a cold one.
  RunMetrics again = run_experiment(corpus(), spec, &cache());
  CHECK(metrics_equal(m, again));
  RunMetrics cold = run_experiment(corpus(), spec, nullptr);
  CHECK(metrics_equal(m, cold));
}

TEST_CASE("poisoned run_experiment reports the attack bookkeeping") {
  ExperimentSpec spec = base_spec(PoisonKind::DLBD, 50.0);
  RunMetrics m = run_experiment(corpus(), spec, &cache());
  CHECK(m.poison_count >= 1);
  CHECK(m.plan_summary == "dlbd pct=50 trig=20dB@start defense=none");

  ExperimentSpec benign = spec;
  benign.poison = false;
  RunMetrics b = run_experiment(corpus(), benign, &cache());
  CHECK(m.eligible_test_count == b.eligible_test_count);

  // Test-trigger override only changes evaluation, not crafting.
  ExperimentSpec quiet = spec;
  quiet.test_trigger = horn_trigger(50.0, TriggerLocation::Start);
  RunMetrics q = run_experiment(corpus(), quiet, &cache());
  CHECK(q.poison_count == m.poison_count);
  CHECK(q.plan_summary == "dlbd pct=50 trig=20dB@start test=50dB@start defense=none");
}

TEST_CASE("stability_study is seed-indexed run_experiment") {
  ExperimentSpec base = base_spec(PoisonKind::DLBD, 50.0);
  StabilityResult st = stability_study(corpus(), base, 3, &cache());
  REQUIRE(st.asrs.size() == 3);
  for (int i = 0; i < 3; ++i) {
    RunMetrics m =
        run_experiment(corpus(), spec_for_seed(base, static_cast<std::uint64_t>(i)),
                       &cache());
    CHECK(st.asrs[static_cast<std::size_t>(i)] == m.asr_pct);
  }
  CHECK(st.mean == mean(st.asrs));
  CHECK(st.stddev == stddev(st.asrs));
  CHECK(st.min == *std::min_element(st.asrs.begin(), st.asrs.end()));
  CHECK_THROWS(stability_study(corpus(), base, 0, &cache()));
}

TEST_CASE("sweep_poison_pct: cell grid, naming, and per-cell runs") {
  ExperimentSpec base = base_spec(PoisonKind::DLBD, 10.0);
  SweepResult sw = sweep_poison_pct(corpus(), base,
                                    {PoisonKind::DLBD, PoisonKind::CLBD_Ranked},
                                    {5.0, 50.0}, {0}, &cache());
  CHECK(sw.axis == "kind x poison_pct");
  REQUIRE(sw.cells.size() == 4);
  CHECK(sw.cells[0].setting == "dlbd/5");
  CHECK(sw.cells[1].setting == "dlbd/50");
  CHECK(sw.cells[2].setting == "clbd_ranked/5");
  CHECK(sw.cells[3].setting == "clbd_ranked/50");
  for (const auto& cell : sw.cells) {
    CHECK(!cell.failed);
    REQUIRE(cell.runs.size() == 1);
  }
  CHECK(sw.cells[1].runs[0].plan_summary ==
        "dlbd pct=50 trig=20dB@start defense=none");
  ExperimentSpec cell1 = base;
  cell1.plan.poison_pct = 50.0;
  CHECK(sw.cells[1].runs[0].asr_pct ==
        run_experiment(corpus(), spec_for_seed(cell1, 0), &cache()).asr_pct);

  CHECK_THROWS(sweep_poison_pct(corpus(), base, {}, {5.0}, {0}, &cache()));
  CHECK_THROWS(sweep_poison_pct(corpus(), base, {PoisonKind::DLBD}, {}, {0},
                                &cache()));
  CHECK_THROWS(sweep_poison_pct(corpus(), base, {PoisonKind::DLBD}, {5.0}, {},
                                &cache()));
}

TEST_CASE("sweep_snr_grid varies the test trigger") {
  ExperimentSpec base = base_spec(PoisonKind::DLBD, 50.0);
  SweepResult sw = sweep_snr_grid(corpus(), base, {20.0}, {20.0, 50.0}, {0},
                                  &cache());
  CHECK(sw.axis == "train_snr_db x test_snr_db");
  REQUIRE(sw.cells.size() == 2);
  CHECK(sw.cells[0].setting == "20/20");
  CHECK(sw.cells[1].setting == "20/50");
  REQUIRE(sw.cells[1].runs.size() == 1);
  CHECK(sw.cells[1].runs[0].plan_summary ==
        "dlbd pct=50 trig=20dB@start test=50dB@start defense=none");
}

TEST_CASE("sweep_location varies trigger placement") {
  ExperimentSpec base = base_spec(PoisonKind::DLBD, 50.0);
  SweepResult sw = sweep_location(corpus(), base,
                                  {TriggerLocation::Start, TriggerLocation::End},
                                  {50.0}, {0}, &cache());
  CHECK(sw.axis == "location x poison_pct");
  REQUIRE(sw.cells.size() == 2);
  CHECK(sw.cells[0].setting == "start/50");
  CHECK(sw.cells[1].setting == "end/50");
  CHECK(sw.cells[1].runs[0].plan_summary ==
        "dlbd pct=50 trig=20dB@end defense=none");
}

TEST_CASE("defense_eval compares defense kinds on one attack") {
  ExperimentSpec base = base_spec(PoisonKind::DLBD, 50.0);
  SweepResult sw = defense_eval(corpus(), base,
                                {DefenseKind::None, DefenseKind::PerfectFilter},
                                {0}, &cache());
  CHECK(sw.axis == "defense");
  REQUIRE(sw.cells.size() == 2);
  CHECK(sw.cells[0].setting == "none");
  CHECK(sw.cells[1].setting == "perfect");
  REQUIRE(sw.cells[0].runs.size() == 1);
  REQUIRE(sw.cells[1].runs.size() == 1);
  CHECK(std::isnan(sw.cells[0].runs[0].detector_auc));
  // Removing every poison cannot help the attacker.
  CHECK(sw.cells[1].runs[0].asr_pct <= sw.cells[0].runs[0].asr_pct);
  CHECK_THROWS(defense_eval(corpus(), base, {}, {0}, &cache()));
}

TEST_CASE("apply_defense dispatch: none and perfect filter") {
  ExperimentSpec spec = base_spec(PoisonKind::DLBD, 50.0);
  const ModelParams& proxy = cache().proxy(corpus(), spec.proxy_cfg);
  CraftResult cr = craft_dlbd(corpus(), spec.plan, proxy);

  spec.defense.kind = DefenseKind::None;
  DefenseOutcome none = apply_defense(corpus(), cr.poisoned, cr.records, proxy,
                                      spec, nullptr);
  CHECK(none.defended.utterances.size() == cr.poisoned.utterances.size());
  CHECK(none.removed_ids.empty());
  CHECK(std::isnan(none.detector_auc));
  CHECK(none.defended.utterances[0].wave.samples ==
        cr.poisoned.utterances[0].wave.samples);

  spec.defense.kind = DefenseKind::PerfectFilter;
  DefenseOutcome perfect = apply_defense(corpus(), cr.poisoned, cr.records, proxy,
                                         spec, nullptr);
  REQUIRE(perfect.removed_ids.size() == cr.records.size());
  for (std::size_t i = 0; i < cr.records.size(); ++i)
    CHECK(perfect.removed_ids[i] == cr.records[i].id);
  CHECK(perfect.defended.utterances.size() + cr.records.size() ==
        cr.poisoned.utterances.size());
}

TEST_CASE("apply_defense dispatch: trained filter reports an AUC") {
  ExperimentSpec spec = base_spec(PoisonKind::DLBD, 50.0);
  spec.defense.kind = DefenseKind::TrainedFilter;
  const ModelParams& proxy = cache().proxy(corpus(), spec.proxy_cfg);
  PgdCache& pc = cache().pgd_cache(spec.proxy_cfg, spec.pgd, spec.plan.source_class);
  CraftResult cr = craft_dlbd(corpus(), spec.plan, proxy);

  DefenseOutcome out = apply_defense(corpus(), cr.poisoned, cr.records, proxy,
                                     spec, &pc);
  CHECK(!std::isnan(out.detector_auc));
  CHECK(out.detector_auc >= 0.0);
  CHECK(out.detector_auc <= 1.0);
  CHECK(out.detector.has_value());
  CHECK(!out.denoiser.has_value());
  CHECK(out.removed_scores.size() == out.removed_ids.size());
  // Retained + removed partition the poisoned corpus.
  CHECK(out.defended.utterances.size() + out.removed_ids.size() ==
        cr.poisoned.utterances.size());
}

TEST_CASE("defense trainers are deterministic given the spec") {
  ExperimentSpec spec = base_spec(PoisonKind::CLBD_Ranked, 20.0);
  const ModelParams& proxy = cache().proxy(corpus(), spec.proxy_cfg);
  PgdCache& pc = cache().pgd_cache(spec.proxy_cfg, spec.pgd, spec.plan.source_class);

  DetectorParams d1 = make_defense_detector(corpus(), proxy, spec, &pc);
  DetectorParams d2 = make_defense_detector(corpus(), proxy, spec, &pc);
  CHECK(d1.w == d2.w);

  DenoiserParams n1 = make_defense_denoiser(corpus(), proxy, spec, &pc);
  DenoiserParams n2 = make_defense_denoiser(corpus(), proxy, spec, &pc);
  CHECK(n1.w == n2.w);
}
