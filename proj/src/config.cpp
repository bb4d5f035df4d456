#include "poisonlab/config.hpp"

#include <cmath>
#include <filesystem>
#include <fstream>
#include <initializer_list>
#include <limits>
#include <sstream>

#include <nlohmann/json.hpp>

#include "poisonlab/wav.hpp"

namespace poisonlab {

namespace {

using nlohmann::json;

void check_keys(const json& j, const std::string& section,
                std::initializer_list<const char*> allowed) {
  if (!j.is_object())
    throw ConfigError("config section '" + section + "' must be an object");
  for (const auto& [key, value] : j.items()) {
    (void)value;
    bool ok = false;
    for (const char* a : allowed)
      if (key == a) {
        ok = true;
        break;
      }
    if (!ok)
      throw ConfigError("unknown config key '" +
                        (section.empty() ? key : section + "." + key) + "'");
  }
}

template <typename T>
void get_if(const json& j, const char* key, T& out) {
  if (j.contains(key)) {
    try {
      out = j.at(key).get<T>();
    } catch (const json::exception&) {
      throw ConfigError(std::string("config key '") + key + "' has the wrong type");
    }
  }
}

void parse_train_cfg(const json& j, const std::string& section, TrainConfig& cfg) {
  check_keys(j, section, {"epochs", "batch_size", "learning_rate", "momentum", "seed"});
  get_if(j, "epochs", cfg.epochs);
  get_if(j, "batch_size", cfg.batch_size);
  get_if(j, "learning_rate", cfg.learning_rate);
  get_if(j, "momentum", cfg.momentum);
  get_if(j, "seed", cfg.seed);
}

void parse_trigger(const json& j, const std::string& section, TriggerConfig& tc) {
  check_keys(j, section,
             {"kind", "f0_hz", "duration_s", "wav", "snr_db", "location", "seed"});
  get_if(j, "kind", tc.kind);
  get_if(j, "f0_hz", tc.f0_hz);
  get_if(j, "duration_s", tc.duration_s);
  get_if(j, "wav", tc.wav_path);
  get_if(j, "snr_db", tc.snr_db);
  get_if(j, "location", tc.location);
  get_if(j, "seed", tc.seed);
  if (tc.kind != "synth_horn" && tc.kind != "wav")
    throw ConfigError("config key '" + section + ".kind' must be synth_horn or wav");
  if (tc.kind == "wav" && tc.wav_path.empty())
    throw ConfigError("config key '" + section + ".wav' required for kind wav");
}

json trigger_to_json(const TriggerConfig& tc) {
  return json{{"kind", tc.kind},         {"f0_hz", tc.f0_hz},
              {"duration_s", tc.duration_s}, {"wav", tc.wav_path},
              {"snr_db", tc.snr_db},     {"location", tc.location},
              {"seed", tc.seed}};
}

json train_cfg_to_json(const TrainConfig& c) {
  return json{{"epochs", c.epochs},
              {"batch_size", c.batch_size},
              {"learning_rate", c.learning_rate},
              {"momentum", c.momentum},
              {"seed", c.seed}};
}

}  // namespace

Config parse_config_text(const std::string& text, const std::string& origin) {
  json j;
  try {
    j = json::parse(text);
  } catch (const json::exception& e) {
    throw ConfigError("cannot parse " + origin + ": " + e.what());
  }
  // "version" is accepted so a resolved_config.json can be fed back in.
  check_keys(j, "",
             {"version", "dataset", "trigger", "plan", "pgd", "proxy", "victim",
              "defense", "test_trigger", "sweep", "paths"});

  Config cfg;
  if (j.contains("dataset")) {
    const auto& d = j["dataset"];
    check_keys(d, "dataset",
               {"n_train", "n_dev", "n_test", "background_snr_db", "utterance_s",
                "sample_rate", "seed"});
    get_if(d, "n_train", cfg.dataset.n_train);
    get_if(d, "n_dev", cfg.dataset.n_dev);
    get_if(d, "n_test", cfg.dataset.n_test);
    if (d.contains("background_snr_db")) {
      if (d["background_snr_db"].is_null())
        cfg.dataset.background_snr_db = std::numeric_limits<double>::infinity();
      else
        get_if(d, "background_snr_db", cfg.dataset.background_snr_db);
    }
    get_if(d, "utterance_s", cfg.dataset.utterance_s);
    get_if(d, "sample_rate", cfg.dataset.sample_rate);
    get_if(d, "seed", cfg.dataset.seed);
  }
  if (j.contains("trigger")) parse_trigger(j["trigger"], "trigger", cfg.trigger);
  if (j.contains("plan")) {
    const auto& p = j["plan"];
    check_keys(p, "plan",
               {"enabled", "kind", "poison_pct", "source", "target", "selection_seed"});
    get_if(p, "enabled", cfg.plan.enabled);
    get_if(p, "kind", cfg.plan.kind);
    get_if(p, "poison_pct", cfg.plan.poison_pct);
    get_if(p, "source", cfg.plan.source);
    get_if(p, "target", cfg.plan.target);
    get_if(p, "selection_seed", cfg.plan.selection_seed);
    parse_poison_kind(cfg.plan.kind);  // validates
  }
  if (j.contains("pgd")) {
    const auto& p = j["pgd"];
    check_keys(p, "pgd", {"steps", "step_size", "snr_bound_db"});
    get_if(p, "steps", cfg.pgd.steps);
    if (p.contains("step_size") && !p["step_size"].is_null()) {
      double s = 0;
      get_if(p, "step_size", s);
      cfg.pgd.step_size = s;
    }
    get_if(p, "snr_bound_db", cfg.pgd.budget.snr_bound_db);
  }
  if (j.contains("proxy")) parse_train_cfg(j["proxy"], "proxy", cfg.proxy);
  if (j.contains("victim")) parse_train_cfg(j["victim"], "victim", cfg.victim);
  if (j.contains("defense")) {
    const auto& d = j["defense"];
    check_keys(d, "defense", {"kind", "fpr", "detector", "denoiser"});
    get_if(d, "kind", cfg.defense.kind);
    get_if(d, "fpr", cfg.defense.fpr);
    if (d.contains("detector"))
      parse_train_cfg(d["detector"], "defense.detector", cfg.defense.detector);
    if (d.contains("denoiser"))
      parse_train_cfg(d["denoiser"], "defense.denoiser", cfg.defense.denoiser);
    parse_defense_kind(cfg.defense.kind);  // validates
  }
  if (j.contains("test_trigger") && !j["test_trigger"].is_null()) {
    TriggerConfig tc = cfg.trigger;
    parse_trigger(j["test_trigger"], "test_trigger", tc);
    cfg.test_trigger = tc;
  }
  if (j.contains("sweep")) {
    const auto& s = j["sweep"];
    check_keys(s, "sweep",
               {"name", "kinds", "percentages", "train_dbs", "test_dbs",
                "locations", "seeds", "n_seeds", "defenses"});
    get_if(s, "name", cfg.sweep.name);
    get_if(s, "kinds", cfg.sweep.kinds);
    get_if(s, "percentages", cfg.sweep.percentages);
    get_if(s, "train_dbs", cfg.sweep.train_dbs);
    get_if(s, "test_dbs", cfg.sweep.test_dbs);
    get_if(s, "locations", cfg.sweep.locations);
    get_if(s, "seeds", cfg.sweep.seeds);
    get_if(s, "n_seeds", cfg.sweep.n_seeds);
    get_if(s, "defenses", cfg.sweep.defenses);
  }
  if (j.contains("paths")) {
    const auto& p = j["paths"];
    check_keys(p, "paths",
               {"out_dir", "manifest", "benign_manifest", "model", "proxy_model",
                "poison_manifest", "data_dir"});
    get_if(p, "out_dir", cfg.paths.out_dir);
    get_if(p, "manifest", cfg.paths.manifest);
    get_if(p, "benign_manifest", cfg.paths.benign_manifest);
    get_if(p, "model", cfg.paths.model);
    get_if(p, "proxy_model", cfg.paths.proxy_model);
    get_if(p, "poison_manifest", cfg.paths.poison_manifest);
    get_if(p, "data_dir", cfg.paths.data_dir);
  }
  return cfg;
}

Config load_config(const std::string& path) {
  std::ifstream in(path);
  if (!in) throw ConfigError("cannot open config file " + path);
  std::stringstream ss;
  ss << in.rdbuf();
  return parse_config_text(ss.str(), path);
}

TriggerSpec make_trigger(const TriggerConfig& tc, int sample_rate) {
  TriggerSpec spec;
  if (tc.kind == "wav") {
    spec.clip = load_wav(tc.wav_path);
    if (spec.clip.sample_rate != sample_rate)
      throw ConfigError("trigger wav sample rate " +
                        std::to_string(spec.clip.sample_rate) +
                        " does not match dataset rate " + std::to_string(sample_rate));
  } else {
    spec.clip = synth_horn(tc.duration_s, tc.f0_hz, sample_rate);
  }
  spec.snr_db = tc.snr_db;
  spec.location = parse_location(tc.location);
  spec.seed = tc.seed;
  return spec;
}

PoisonPlan make_plan(const Config& cfg, const SlotVocab& vocab) {
  PoisonPlan plan;
  plan.kind = parse_poison_kind(cfg.plan.kind);
  plan.poison_pct = cfg.plan.poison_pct;
  plan.source_class = vocab.index_of(0, cfg.plan.source);
  plan.target_class = vocab.index_of(0, cfg.plan.target);
  plan.trigger = make_trigger(cfg.trigger, cfg.dataset.sample_rate);
  plan.selection_seed = cfg.plan.selection_seed;
  return plan;
}

DefenseOption make_defense(const DefenseConfig& dc) {
  DefenseOption d;
  d.kind = parse_defense_kind(dc.kind);
  d.filter_fpr = dc.fpr;
  d.detector_cfg = dc.detector;
  d.denoiser_cfg = dc.denoiser;
  return d;
}

ExperimentSpec make_experiment_spec(const Config& cfg, const SlotVocab& vocab) {
  ExperimentSpec spec;
  spec.plan = make_plan(cfg, vocab);
  spec.poison = cfg.plan.enabled;
  spec.pgd = cfg.pgd;
  spec.proxy_cfg = cfg.proxy;
  spec.victim_cfg = cfg.victim;
  spec.defense = make_defense(cfg.defense);
  if (cfg.test_trigger)
    spec.test_trigger = make_trigger(*cfg.test_trigger, cfg.dataset.sample_rate);
  return spec;
}

std::string resolved_config_json(const Config& cfg) {
  json j;
  j["version"] = kToolVersion;
  json d;
  d["n_train"] = cfg.dataset.n_train;
  d["n_dev"] = cfg.dataset.n_dev;
  d["n_test"] = cfg.dataset.n_test;
  if (std::isinf(cfg.dataset.background_snr_db))
    d["background_snr_db"] = nullptr;
  else
    d["background_snr_db"] = cfg.dataset.background_snr_db;
  d["utterance_s"] = cfg.dataset.utterance_s;
  d["sample_rate"] = cfg.dataset.sample_rate;
  d["seed"] = cfg.dataset.seed;
  j["dataset"] = d;
  j["trigger"] = trigger_to_json(cfg.trigger);
  j["plan"] = json{{"enabled", cfg.plan.enabled},
                   {"kind", cfg.plan.kind},
                   {"poison_pct", cfg.plan.poison_pct},
                   {"source", cfg.plan.source},
                   {"target", cfg.plan.target},
                   {"selection_seed", cfg.plan.selection_seed}};
  j["pgd"] = json{{"steps", cfg.pgd.steps},
                  {"step_size", cfg.pgd.step_size ? json(*cfg.pgd.step_size) : json(nullptr)},
                  {"snr_bound_db", cfg.pgd.budget.snr_bound_db}};
  j["proxy"] = train_cfg_to_json(cfg.proxy);
  j["victim"] = train_cfg_to_json(cfg.victim);
  j["defense"] = json{{"kind", cfg.defense.kind},
                      {"fpr", cfg.defense.fpr},
                      {"detector", train_cfg_to_json(cfg.defense.detector)},
                      {"denoiser", train_cfg_to_json(cfg.defense.denoiser)}};
  j["test_trigger"] = cfg.test_trigger ? trigger_to_json(*cfg.test_trigger) : json(nullptr);
  j["sweep"] = json{{"name", cfg.sweep.name},
                    {"kinds", cfg.sweep.kinds},
                    {"percentages", cfg.sweep.percentages},
                    {"train_dbs", cfg.sweep.train_dbs},
                    {"test_dbs", cfg.sweep.test_dbs},
                    {"locations", cfg.sweep.locations},
                    {"seeds", cfg.sweep.seeds},
                    {"n_seeds", cfg.sweep.n_seeds},
                    {"defenses", cfg.sweep.defenses}};
  j["paths"] = json{{"out_dir", cfg.paths.out_dir},
                    {"manifest", cfg.paths.manifest},
                    {"benign_manifest", cfg.paths.benign_manifest},
                    {"model", cfg.paths.model},
                    {"proxy_model", cfg.paths.proxy_model},
                    {"poison_manifest", cfg.paths.poison_manifest},
                    {"data_dir", cfg.paths.data_dir}};
  return j.dump(1, '\t');
}

void write_resolved_config(const Config& cfg, const std::string& out_dir) {
  namespace fs = std::filesystem;
  fs::create_directories(out_dir);
  std::string path = (fs::path(out_dir) / "resolved_config.json").string();
  std::ofstream f(path);
  if (!f) throw std::runtime_error("cannot write " + path);
  f << resolved_config_json(cfg) << "\n";
}

}  // namespace poisonlab
