#define DOCTEST_CONFIG_IMPLEMENT_WITH_MAIN
#include <doctest.h>

#include <algorithm>
#include <cstdio>
#include <filesystem>
#include <set>

#include "poisonlab/attack.hpp"
#include "poisonlab/dataset.hpp"
#include "poisonlab/model.hpp"
#include "test_util.hpp"

using namespace poisonlab;
using namespace poisonlab::testutil;

namespace {

// Pool of short train utterances with exact loss ties injected by copying
// waveforms between non-adjacent rows.
Dataset tie_pool(std::size_t n, std::uint64_t seed) {
  Dataset ds;
  ds.vocab = default_vocab();
  Rng rng = derive_rng(seed, "tie-pool");
  ds.utterances.resize(n);
  for (std::size_t i = 0; i < n; ++i) {
    Utterance& u = ds.utterances[i];
    char buf[16];
    std::snprintf(buf, sizeof buf, "u%04zu", i);
    u.id = buf;
    u.split = Split::Train;
    u.action = static_cast<int>(uniform_below(rng, 2));
    u.object = static_cast<int>(uniform_below(rng, 4));
    u.location = static_cast<int>(uniform_below(rng, 3));
    if (i >= 7 && i % 7 == 0) {
      u.wave = ds.utterances[i - 7].wave;  // exact tie with an earlier row
      u.action = ds.utterances[i - 7].action;
      u.object = ds.utterances[i - 7].object;
      u.location = ds.utterances[i - 7].location;
    } else {
      u.wave = random_wave(rng, 480);
    }
  }
  return ds;
}

std::vector<std::string> brute_force_select(const Dataset& ds,
                                            const std::vector<std::string>& pool,
                                            const ModelParams& proxy, double pct,
                                            bool descending) {
  std::vector<std::pair<double, std::string>> scored;
  for (const std::string& id : pool) {
    const Utterance* u = ds.find(id);
    scored.emplace_back(
        loss(proxy, u->wave, {u->action, u->object, u->location}), id);
  }
  std::sort(scored.begin(), scored.end(), [&](const auto& a, const auto& b) {
    if (a.first != b.first) return descending ? a.first > b.first : a.first < b.first;
    return a.second < b.second;
  });
  auto k = static_cast<std::size_t>(std::llround(pct / 100.0 * pool.size()));
  k = std::clamp<std::size_t>(k, 1, pool.size());
  std::vector<std::string> out;
  for (std::size_t i = 0; i < k; ++i) out.push_back(scored[i].second);
  return out;
}

TriggerSpec test_trigger(TriggerLocation loc = TriggerLocation::Start) {
  TriggerSpec t;
  t.clip = synth_horn(0.25, 400.0, 16000);
  t.snr_db = 20.0;
  t.location = loc;
  t.seed = 5;
  return t;
}

}  // namespace

TEST_CASE("ranked selection equals a brute-force sort, ties included") {
  Dataset ds = tie_pool(1000, 51);
  ModelParams proxy = init_model(ds.vocab, 7);  // untrained scores are fine
  std::vector<std::string> pool;
  for (const auto& u : ds.utterances) pool.push_back(u.id);

  PoisonPlan plan;
  plan.trigger = test_trigger();
  for (double pct : {0.01, 0.7, 5.0, 37.5, 100.0}) {
    plan.poison_pct = pct;

    plan.kind = PoisonKind::CLBD_Ranked;
    CHECK(select_poison_ids(ds, pool, plan, proxy) ==
          brute_force_select(ds, pool, proxy, pct, true));

    plan.kind = PoisonKind::CLBD_ReverseRanked;
    CHECK(select_poison_ids(ds, pool, plan, proxy) ==
          brute_force_select(ds, pool, proxy, pct, false));
  }
}

TEST_CASE("random selection draws k distinct pool members, seed-stable") {
  Dataset ds = tie_pool(200, 52);
  ModelParams proxy = init_model(ds.vocab, 8);
  std::vector<std::string> pool;
  for (const auto& u : ds.utterances) pool.push_back(u.id);

  PoisonPlan plan;
  plan.kind = PoisonKind::CLBD_Random;
  plan.poison_pct = 10.0;
  plan.selection_seed = 40;
  plan.trigger = test_trigger();

  auto a = select_poison_ids(ds, pool, plan, proxy);
  auto b = select_poison_ids(ds, pool, plan, proxy);
  CHECK(a == b);
  CHECK(a.size() == 20);
  std::set<std::string> pool_set(pool.begin(), pool.end());
  std::set<std::string> chosen(a.begin(), a.end());
  CHECK(chosen.size() == a.size());
  for (const auto& id : a) CHECK(pool_set.count(id) == 1);

  plan.selection_seed = 41;
  CHECK(select_poison_ids(ds, pool, plan, proxy) != a);

  plan.poison_pct = 0.01;  // rounds to zero, clamps to one
  CHECK(select_poison_ids(ds, pool, plan, proxy).size() == 1);
  plan.poison_pct = 100.0;
  CHECK(select_poison_ids(ds, pool, plan, proxy).size() == pool.size());
}

TEST_CASE("eligible_pool filters by predicted action and split") {
  SynthConfig cfg;
  cfg.n_train = 40;
  cfg.n_dev = 8;
  cfg.n_test = 8;
  cfg.seed = 13;
  Dataset ds = generate_synthetic(cfg);
  TrainConfig tc;
  tc.epochs = 12;
  tc.seed = 2;
  ModelParams proxy = train(ds, tc).params;

  PoisonPlan plan;
  plan.source_class = 0;
  plan.target_class = 1;
  plan.trigger = test_trigger();

  plan.kind = PoisonKind::CLBD_Ranked;
  auto clbd_pool = eligible_pool(ds, plan, proxy);
  CHECK(!clbd_pool.empty());
  for (const auto& id : clbd_pool) {
    const Utterance* u = ds.find(id);
    REQUIRE(u != nullptr);
    CHECK(u->split == Split::Train);
    CHECK(predict(proxy, u->wave).action == plan.target_class);
  }

  plan.kind = PoisonKind::DLBD;
  auto dlbd_pool = eligible_pool(ds, plan, proxy);
  CHECK(!dlbd_pool.empty());
  for (const auto& id : dlbd_pool)
    CHECK(predict(proxy, ds.find(id)->wave).action == plan.source_class);

  // pools are disjoint and in dataset order
  std::set<std::string> c(clbd_pool.begin(), clbd_pool.end());
  for (const auto& id : dlbd_pool) CHECK(c.count(id) == 0);

  // a proxy that never predicts the source class leaves DLBD with nothing
  ModelParams zero = init_model(ds.vocab, 0);
  std::fill(zero.w.begin(), zero.w.end(), 0.0);
  plan.source_class = 1;  // zero weights tie-break to action 0
  CHECK_THROWS(eligible_pool(ds, plan, zero));
}

TEST_CASE("pgd_perturb respects the L2 budget with no tolerance") {
  SynthConfig cfg;
  cfg.n_train = 30;
  cfg.n_dev = 6;
  cfg.n_test = 6;
  cfg.seed = 14;
  Dataset ds = generate_synthetic(cfg);
  TrainConfig tc;
  tc.epochs = 4;
  tc.seed = 3;
  ModelParams proxy = train(ds, tc).params;

  PGDConfig pgd;
  int tried = 0;
  for (const auto& u : ds.utterances) {
    if (u.split != Split::Train || tried >= 4) continue;
    ++tried;
    PgdResult r = pgd_perturb(proxy, u.wave, 0, pgd);
    REQUIRE(r.wave.samples.size() == u.wave.samples.size());
    std::vector<double> delta(u.wave.samples.size());
    for (std::size_t i = 0; i < delta.size(); ++i)
      delta[i] = r.wave.samples[i] - u.wave.samples[i];
    double radius = snr_to_radius(u.wave, pgd.budget);
    CHECK(l2_norm(delta) <= radius);
    CHECK(r.impersonated == (predict(proxy, r.wave).action == 0));
  }
  CHECK(tried == 4);
}

TEST_CASE("pgd_perturb with a zero-gradient proxy returns the input") {
  SlotVocab vocab = default_vocab();
  ModelParams zero = init_model(vocab, 0);
  std::fill(zero.w.begin(), zero.w.end(), 0.0);
  Rng rng = derive_rng(53, "pgd-zero");
  Waveform w = random_wave(rng, 2000);
  PGDConfig pgd;
  PgdResult r = pgd_perturb(zero, w, 1, pgd);
  CHECK(r.wave.samples == w.samples);
  CHECK_FALSE(r.impersonated);  // ties predict action 0, not 1
}

TEST_CASE("pgd_perturb validates its configuration") {
  SlotVocab vocab = default_vocab();
  ModelParams m = init_model(vocab, 1);
  Rng rng = derive_rng(54, "pgd-cfg");
  Waveform w = random_wave(rng, 1000);

  PGDConfig bad;
  bad.steps = 0;
  CHECK_THROWS(pgd_perturb(m, w, 0, bad));
  bad.steps = 50;
  bad.step_size = 0.0;
  CHECK_THROWS(pgd_perturb(m, w, 0, bad));

  Waveform silent;
  silent.samples.assign(1000, 0.0);
  CHECK_THROWS(pgd_perturb(m, silent, 0, PGDConfig{}));
}

TEST_CASE("craft_clbd keeps every label and stays inside the budget") {
  SynthConfig cfg;
  cfg.n_train = 40;
  cfg.n_dev = 8;
  cfg.n_test = 8;
  cfg.seed = 15;
  Dataset ds = generate_synthetic(cfg);
  TrainConfig tc;
  tc.epochs = 4;
  tc.seed = 4;
  ModelParams proxy = train(ds, tc).params;

  PoisonPlan plan;
  plan.kind = PoisonKind::CLBD_Ranked;
  plan.poison_pct = 20.0;
  plan.trigger = test_trigger();
  PGDConfig pgd;

  PgdCache cache;
  CraftResult cr = craft_clbd(ds, plan, proxy, pgd, &cache);
  CHECK(!cr.records.empty());
  for (const PoisonRecord& rec : cr.records) {
    CHECK(rec.kind == PoisonKind::CLBD_Ranked);
    // clean label: training label identical to the original, and the
    // poisoned dataset row still carries it
    CHECK(rec.training_label.action == rec.original_label.action);
    CHECK(rec.training_label.object == rec.original_label.object);
    CHECK(rec.training_label.location == rec.original_label.location);
    const Utterance* orig = ds.find(rec.id);
    const Utterance* pois = cr.poisoned.find(rec.id);
    REQUIRE(orig != nullptr);
    REQUIRE(pois != nullptr);
    CHECK(pois->action == orig->action);
    CHECK(pois->object == orig->object);
    CHECK(pois->location == orig->location);
    CHECK(pois->wave.samples != orig->wave.samples);

    // the PGD stage (cached pre-trigger) obeys the ball invariant, and the
    // recorded SNR never dips below the budget
    REQUIRE(cache.count(rec.id) == 1);
    const Waveform& stage = cache.at(rec.id).wave;
    std::vector<double> delta(orig->wave.samples.size());
    for (std::size_t i = 0; i < delta.size(); ++i)
      delta[i] = stage.samples[i] - orig->wave.samples[i];
    CHECK(l2_norm(delta) <= snr_to_radius(orig->wave, pgd.budget));
    CHECK(rec.perturb_snr_db >= pgd.budget.snr_bound_db - 1e-9);
    CHECK(rec.impersonated == cache.at(rec.id).impersonated);
    CHECK(rec.trigger_offset == 0);  // Start location
  }

  // non-selected rows are untouched
  std::set<std::string> selected;
  for (const auto& rec : cr.records) selected.insert(rec.id);
  for (const auto& u : ds.utterances)
    if (!selected.count(u.id))
      CHECK(cr.poisoned.find(u.id)->wave.samples == u.wave.samples);

  // crafting twice is bit-identical
  CraftResult cr2 = craft_clbd(ds, plan, proxy, pgd, nullptr);
  REQUIRE(cr2.records.size() == cr.records.size());
  for (std::size_t i = 0; i < cr.records.size(); ++i) {
    CHECK(cr2.records[i].id == cr.records[i].id);
    CHECK(cr2.poisoned.find(cr.records[i].id)->wave.samples ==
          cr.poisoned.find(cr.records[i].id)->wave.samples);
  }
}

TEST_CASE("craft_dlbd flips the action label to the target") {
  SynthConfig cfg;
  cfg.n_train = 40;
  cfg.n_dev = 8;
  cfg.n_test = 8;
  cfg.seed = 16;
  Dataset ds = generate_synthetic(cfg);
  TrainConfig tc;
  tc.epochs = 4;
  tc.seed = 5;
  ModelParams proxy = train(ds, tc).params;

  PoisonPlan plan;
  plan.kind = PoisonKind::DLBD;
  plan.poison_pct = 30.0;
  plan.trigger = test_trigger(TriggerLocation::End);

  CraftResult cr = craft_dlbd(ds, plan, proxy);
  CHECK(!cr.records.empty());
  for (const PoisonRecord& rec : cr.records) {
    const Utterance* orig = ds.find(rec.id);
    const Utterance* pois = cr.poisoned.find(rec.id);
    CHECK(rec.training_label.action == plan.target_class);
    CHECK(pois->action == plan.target_class);
    CHECK(rec.original_label.action == orig->action);
    CHECK(pois->object == orig->object);
    CHECK(pois->location == orig->location);
    CHECK(pois->wave.samples != orig->wave.samples);
    CHECK(rec.trigger_offset ==
          orig->wave.samples.size() - plan.trigger.clip.samples.size());
  }
}

TEST_CASE("random trigger placement is deterministic per id") {
  SynthConfig cfg;
  cfg.n_train = 30;
  cfg.n_dev = 6;
  cfg.n_test = 6;
  cfg.seed = 17;
  Dataset ds = generate_synthetic(cfg);
  TrainConfig tc;
  tc.epochs = 3;
  tc.seed = 6;
  ModelParams proxy = train(ds, tc).params;

  PoisonPlan plan;
  plan.kind = PoisonKind::DLBD;
  plan.poison_pct = 50.0;
  plan.trigger = test_trigger(TriggerLocation::Random);

  CraftResult a = craft_dlbd(ds, plan, proxy);
  CraftResult b = craft_dlbd(ds, plan, proxy);
  REQUIRE(a.records.size() == b.records.size());
  std::set<std::size_t> offsets;
  for (std::size_t i = 0; i < a.records.size(); ++i) {
    CHECK(a.records[i].trigger_offset == b.records[i].trigger_offset);
    offsets.insert(a.records[i].trigger_offset);
  }
  if (a.records.size() >= 4) CHECK(offsets.size() > 1);
}

TEST_CASE("trigger_test_set triggers only source-class test rows") {
  SynthConfig cfg;
  cfg.n_train = 20;
  cfg.n_dev = 6;
  cfg.n_test = 30;
  cfg.seed = 18;
  Dataset ds = generate_synthetic(cfg);

  PoisonPlan plan;
  plan.source_class = 0;
  plan.trigger = test_trigger();

  TriggeredTestSet ts = trigger_test_set(ds, plan);
  std::size_t expect = 0;
  for (const auto* u : ds.split(Split::Test))
    if (u->action == plan.source_class) ++expect;
  CHECK(ts.utterances.size() == expect);
  CHECK(ts.ids.size() == expect);
  for (std::size_t i = 0; i < ts.utterances.size(); ++i) {
    const Utterance* orig = ds.find(ts.ids[i]);
    REQUIRE(orig != nullptr);
    CHECK(orig->split == Split::Test);
    CHECK(orig->action == plan.source_class);
    CHECK(ts.utterances[i].action == orig->action);
    CHECK(ts.utterances[i].wave.samples != orig->wave.samples);
  }
}

TEST_CASE("poison manifest round-trips records of both kinds") {
  SlotVocab vocab = default_vocab();
  std::vector<PoisonRecord> recs(2);
  recs[0].id = "tr-0001";
  recs[0].kind = PoisonKind::CLBD_Ranked;
  recs[0].original_label = {1, 2, 0};
  recs[0].training_label = {1, 2, 0};
  recs[0].perturb_snr_db = 31.25;
  recs[0].impersonated = true;
  recs[0].trigger_offset = 1234;
  recs[1].id = "tr-0002";
  recs[1].kind = PoisonKind::DLBD;
  recs[1].original_label = {0, 3, 1};
  recs[1].training_label = {1, 3, 1};
  recs[1].trigger_offset = 0;

  auto dir = std::filesystem::temp_directory_path() / "poisonlab_pm";
  std::filesystem::create_directories(dir);
  std::string path = (dir / "poison_manifest.csv").string();
  write_poison_manifest(recs, vocab, path);
  auto rows = load_poison_manifest(path);
  REQUIRE(rows.size() == 2);
  CHECK(rows[0].id == "tr-0001");
  CHECK(rows[0].kind == PoisonKind::CLBD_Ranked);
  CHECK(rows[0].original_action == "deactivate");
  CHECK(rows[0].training_action == "deactivate");
  REQUIRE(rows[0].perturb_snr_db.has_value());
  CHECK(*rows[0].perturb_snr_db == 31.25);
  REQUIRE(rows[0].impersonated.has_value());
  CHECK(*rows[0].impersonated);
  CHECK(rows[0].trigger_offset == 1234);
  CHECK(rows[1].kind == PoisonKind::DLBD);
  CHECK(rows[1].original_action == "activate");
  CHECK(rows[1].training_action == "deactivate");
  CHECK_FALSE(rows[1].perturb_snr_db.has_value());
  CHECK_FALSE(rows[1].impersonated.has_value());
  std::filesystem::remove_all(dir);
}

TEST_CASE("poison kind names round-trip") {
  for (PoisonKind k : {PoisonKind::DLBD, PoisonKind::CLBD_Random,
                       PoisonKind::CLBD_Ranked, PoisonKind::CLBD_ReverseRanked}) {
    CHECK(parse_poison_kind(poison_kind_name(k)) == k);
    CHECK(is_clbd(k) == (k != PoisonKind::DLBD));
  }
  CHECK_THROWS(parse_poison_kind("clbd"));
}
