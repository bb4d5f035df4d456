#pragma once

#include <cstdint>
#include <optional>
#include <stdexcept>
#include <string>
#include <vector>

#include "poisonlab/attack.hpp"
#include "poisonlab/dataset.hpp"
#include "poisonlab/eval.hpp"
#include "poisonlab/signal.hpp"

namespace poisonlab {

inline constexpr const char* kToolVersion = "0.1.0";

// Configuration problems (bad keys, bad values, missing required fields)
// exit with code 1; runtime failures with code 2.
struct ConfigError : std::runtime_error {
  using std::runtime_error::runtime_error;
};

struct TriggerConfig {
  std::string kind = "synth_horn";  // or "wav"
  double f0_hz = 400.0;
  double duration_s = 0.25;
  std::string wav_path;
  double snr_db = 20.0;
  std::string location = "start";
  std::uint64_t seed = 0;
};

struct PlanConfig {
  bool enabled = true;
  std::string kind = "dlbd";
  double poison_pct = 10.0;
  std::string source = "activate";
  std::string target = "deactivate";
  std::uint64_t selection_seed = 0;
};

struct DefenseConfig {
  std::string kind = "none";
  double fpr = 0.05;
  TrainConfig detector{60, 16, 0.3, 0.9, 0};
  TrainConfig denoiser{40, 32, 1.0, 0.9, 0};
};

struct SweepSection {
  std::string name;  // poison_pct | snr_grid | location | stability | defense
  std::vector<std::string> kinds;
  std::vector<double> percentages;
  std::vector<double> train_dbs;
  std::vector<double> test_dbs;
  std::vector<std::string> locations;
  std::vector<std::uint64_t> seeds{0, 1, 2, 3, 4};
  int n_seeds = 10;
  std::vector<std::string> defenses;
};

struct PathsSection {
  std::string out_dir = "out";
  std::string manifest;         // primary dataset input
  std::string benign_manifest;  // benign corpus for defense preparation
  std::string model;            // checkpoint to write (train) or read (evaluate)
  std::string proxy_model;      // trained proxy input for craft/defend
  std::string poison_manifest;  // poison audit CSV
  std::string data_dir;         // dataset output directory
};

struct Config {
  SynthConfig dataset;
  TriggerConfig trigger;
  PlanConfig plan;
  PGDConfig pgd;
  TrainConfig proxy{15, 32, 0.05, 0.9, 1000};
  TrainConfig victim{15, 32, 0.05, 0.9, 1};
  DefenseConfig defense;
  std::optional<TriggerConfig> test_trigger;
  SweepSection sweep;
  PathsSection paths;
};

/// Strict parse: any key outside the schema raises ConfigError naming it.
Config load_config(const std::string& path);
Config parse_config_text(const std::string& text, const std::string& origin);

TriggerSpec make_trigger(const TriggerConfig& tc, int sample_rate);
PoisonPlan make_plan(const Config& cfg, const SlotVocab& vocab);
DefenseOption make_defense(const DefenseConfig& dc);
ExperimentSpec make_experiment_spec(const Config& cfg, const SlotVocab& vocab);

// Effective config (defaults materialized) plus the tool version, written
// as <out_dir>/resolved_config.json so any run can be reproduced.
void write_resolved_config(const Config& cfg, const std::string& out_dir);
std::string resolved_config_json(const Config& cfg);

}  // namespace poisonlab
