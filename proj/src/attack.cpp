#include "poisonlab/attack.hpp"

#include <algorithm>
#include <cmath>
#include <fstream>
#include <limits>
#include <stdexcept>

#include "poisonlab/csv.hpp"
#include "poisonlab/rng.hpp"

namespace poisonlab {

namespace {

void check_plan(const PoisonPlan& plan) {
  if (!(plan.poison_pct > 0.0 && plan.poison_pct <= 100.0))
    throw std::runtime_error("poison plan: poison_pct must be in (0, 100]");
  if (plan.source_class == plan.target_class)
    throw std::runtime_error("poison plan: source and target class must differ");
}

Rng trigger_rng(const TriggerSpec& spec, const std::string& tag,
                const std::string& id) {
  return derive_rng(spec.seed, tag + ":" + id);
}

double perturbation_snr(const Waveform& before, const Waveform& after) {
  std::vector<double> delta(before.samples.size());
  for (std::size_t i = 0; i < delta.size(); ++i)
    delta[i] = after.samples[i] - before.samples[i];
  if (power(delta) == 0.0) return std::numeric_limits<double>::infinity();
  return snr_db(before, Waveform{std::move(delta), before.sample_rate});
}

}  // namespace

std::string poison_kind_name(PoisonKind k) {
  switch (k) {
    case PoisonKind::DLBD: return "dlbd";
    case PoisonKind::CLBD_Random: return "clbd_random";
    case PoisonKind::CLBD_Ranked: return "clbd_ranked";
    case PoisonKind::CLBD_ReverseRanked: return "clbd_reverse_ranked";
  }
  throw std::runtime_error("poison_kind_name: bad kind");
}

PoisonKind parse_poison_kind(const std::string& s) {
  if (s == "dlbd") return PoisonKind::DLBD;
  if (s == "clbd_random") return PoisonKind::CLBD_Random;
  if (s == "clbd_ranked") return PoisonKind::CLBD_Ranked;
  if (s == "clbd_reverse_ranked") return PoisonKind::CLBD_ReverseRanked;
  throw std::runtime_error("unknown poison kind '" + s + "'");
}

bool is_clbd(PoisonKind k) { return k != PoisonKind::DLBD; }

std::vector<std::string> eligible_pool(const Dataset& ds, const PoisonPlan& plan,
                                       const ModelParams& proxy) {
  check_plan(plan);
  int wanted = is_clbd(plan.kind) ? plan.target_class : plan.source_class;
  std::vector<std::string> pool;
  for (const auto& u : ds.utterances) {
    if (u.split != Split::Train) continue;
    if (predict(proxy, u.wave).action == wanted) pool.push_back(u.id);
  }
  if (pool.empty())
    throw std::runtime_error("eligible_pool: no train samples predicted as class " +
                             std::to_string(wanted));
  return pool;
}

std::vector<std::string> select_poison_ids(const Dataset& ds,
                                           const std::vector<std::string>& pool,
                                           const PoisonPlan& plan,
                                           const ModelParams& proxy) {
  check_plan(plan);
  if (pool.empty()) throw std::runtime_error("select_poison_ids: empty pool");
  std::size_t n = pool.size();
  std::size_t k = static_cast<std::size_t>(
      std::llround(plan.poison_pct / 100.0 * static_cast<double>(n)));
  k = std::min(n, std::max<std::size_t>(1, k));

  if (plan.kind == PoisonKind::DLBD || plan.kind == PoisonKind::CLBD_Random) {
    std::vector<std::string> ids = pool;
    Rng rng = derive_rng(plan.selection_seed, "select");
    for (std::size_t i = 0; i < k; ++i) {
      std::size_t j = i + uniform_below(rng, n - i);
      std::swap(ids[i], ids[j]);
    }
    ids.resize(k);
    return ids;
  }

  std::vector<const Utterance*> utts;
  utts.reserve(n);
  for (const auto& id : pool) {
    const Utterance* u = ds.find(id);
    if (!u) throw std::runtime_error("select_poison_ids: id not in dataset: " + id);
    utts.push_back(u);
  }
  auto losses = per_sample_loss(proxy, utts);
  std::vector<std::string> ids = pool;
  bool descending = plan.kind == PoisonKind::CLBD_Ranked;
  std::stable_sort(ids.begin(), ids.end(), [&](const std::string& a, const std::string& b) {
    double la = losses.at(a), lb = losses.at(b);
    if (la != lb) return descending ? la > lb : la < lb;
    return a < b;
  });
  ids.resize(k);
  return ids;
}

PgdResult pgd_perturb(const ModelParams& proxy, const Waveform& w, int source_class,
                      const PGDConfig& cfg) {
  if (cfg.steps < 1) throw std::runtime_error("pgd_perturb: steps must be >= 1");
  if (cfg.step_size && *cfg.step_size <= 0.0)
    throw std::runtime_error("pgd_perturb: step_size must be positive");
  if (power(w) == 0.0)
    throw std::runtime_error("pgd_perturb: silent waveform");

  const double r = snr_to_radius(w, cfg.budget);
  const double eps = cfg.step_size ? *cfg.step_size : r / 10.0;

  Waveform s = w;
  for (int k = 0; k < cfg.steps; ++k) {
    std::vector<double> g = grad_input(proxy, s, 0, source_class);
    double gn = l2_norm(g);
    if (gn == 0.0) continue;
    std::vector<double> cand(s.samples.size());
    for (std::size_t i = 0; i < cand.size(); ++i)
      cand[i] = s.samples[i] - eps * g[i] / gn;
    s.samples = project_l2(cand, w.samples, r);
  }
  bool hit = predict(proxy, s).action == source_class;
  return PgdResult{std::move(s), hit};
}

namespace {

CraftResult craft_common(const Dataset& ds, const PoisonPlan& plan,
                         const ModelParams& proxy, const PGDConfig* pgd,
                         PgdCache* cache) {
  auto pool = eligible_pool(ds, plan, proxy);
  auto ids = select_poison_ids(ds, pool, plan, proxy);

  CraftResult out;
  out.poisoned = ds;
  for (const auto& id : ids) {
    Utterance* u = nullptr;
    for (auto& cand : out.poisoned.utterances)
      if (cand.id == id) {
        u = &cand;
        break;
      }
    if (!u) throw std::runtime_error("craft: id not found: " + id);

    PoisonRecord rec;
    rec.id = id;
    rec.kind = plan.kind;
    rec.original_label = SlotTriple{u->action, u->object, u->location};

    if (pgd) {
      PgdResult pr;
      if (cache) {
        auto it = cache->find(id);
        if (it != cache->end()) {
          pr = it->second;
        } else {
          pr = pgd_perturb(proxy, u->wave, plan.source_class, *pgd);
          (*cache)[id] = pr;
        }
      } else {
        pr = pgd_perturb(proxy, u->wave, plan.source_class, *pgd);
      }
      rec.perturb_snr_db = perturbation_snr(u->wave, pr.wave);
      rec.impersonated = pr.impersonated;
      u->wave = pr.wave;
    } else {
      u->action = plan.target_class;
    }

    Rng rng = trigger_rng(plan.trigger, "craft", id);
    TriggerResult tr = apply_trigger(u->wave, plan.trigger, rng);
    u->wave = std::move(tr.wave);
    rec.trigger_offset = tr.offset;
    rec.training_label = SlotTriple{u->action, u->object, u->location};
    out.records.push_back(std::move(rec));
  }
  return out;
}

}  // namespace

CraftResult craft_dlbd(const Dataset& ds, const PoisonPlan& plan,
                       const ModelParams& proxy) {
  if (plan.kind != PoisonKind::DLBD)
    throw std::runtime_error("craft_dlbd: plan kind is not dlbd");
  return craft_common(ds, plan, proxy, nullptr, nullptr);
}

CraftResult craft_clbd(const Dataset& ds, const PoisonPlan& plan,
                       const ModelParams& proxy, const PGDConfig& pgd,
                       PgdCache* cache) {
  if (!is_clbd(plan.kind))
    throw std::runtime_error("craft_clbd: plan kind is not a clbd variant");
  return craft_common(ds, plan, proxy, &pgd, cache);
}

TriggeredTestSet trigger_test_set(const Dataset& ds, const PoisonPlan& plan) {
  check_plan(plan);
  TriggeredTestSet out;
  for (const auto& u : ds.utterances) {
    if (u.split != Split::Test || u.action != plan.source_class) continue;
    Rng rng = trigger_rng(plan.trigger, "test", u.id);
    Utterance t = u;
    t.wave = apply_trigger(u.wave, plan.trigger, rng).wave;
    out.ids.push_back(u.id);
    out.utterances.push_back(std::move(t));
  }
  return out;
}

void write_poison_manifest(const std::vector<PoisonRecord>& records,
                           const SlotVocab& vocab, const std::string& path) {
  std::ofstream f(path);
  if (!f) throw std::runtime_error("write_poison_manifest: cannot write " + path);
  f << "id,kind,original_action,training_action,perturb_snr_db,impersonated,"
       "trigger_offset\n";
  for (const auto& r : records) {
    std::string snr, imp;
    if (is_clbd(r.kind)) {
      snr = std::isinf(r.perturb_snr_db) ? "inf" : std::to_string(r.perturb_snr_db);
      imp = r.impersonated ? "1" : "0";
    }
    f << csv_join({r.id, poison_kind_name(r.kind),
                   vocab.actions[static_cast<std::size_t>(r.original_label.action)],
                   vocab.actions[static_cast<std::size_t>(r.training_label.action)],
                   snr, imp, std::to_string(r.trigger_offset)})
      << "\n";
  }
  if (!f) throw std::runtime_error("write_poison_manifest: write failed " + path);
}

std::vector<PoisonManifestRow> load_poison_manifest(const std::string& path) {
  auto rows = csv_read_file(path);
  if (rows.empty()) throw std::runtime_error("poison manifest: empty file " + path);
  const std::vector<std::string> header = {
      "id",  "kind", "original_action", "training_action", "perturb_snr_db",
      "impersonated", "trigger_offset"};
  if (rows[0] != header)
    throw std::runtime_error("poison manifest: bad header in " + path);
  std::vector<PoisonManifestRow> out;
  for (std::size_t i = 1; i < rows.size(); ++i) {
    const auto& row = rows[i];
    if (row.size() != header.size())
      throw std::runtime_error("poison manifest: wrong field count at row " +
                               std::to_string(i + 1));
    PoisonManifestRow r;
    r.id = row[0];
    r.kind = parse_poison_kind(row[1]);
    r.original_action = row[2];
    r.training_action = row[3];
    if (!row[4].empty())
      r.perturb_snr_db = row[4] == "inf"
                             ? std::numeric_limits<double>::infinity()
                             : std::stod(row[4]);
    if (!row[5].empty()) r.impersonated = row[5] == "1";
    r.trigger_offset = static_cast<std::size_t>(std::stoull(row[6]));
    out.push_back(std::move(r));
  }
  return out;
}

}  // namespace poisonlab
