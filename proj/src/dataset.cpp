#include "poisonlab/dataset.hpp"

#include <algorithm>
#include <cmath>
#include <cstdio>
#include <filesystem>
#include <fstream>
#include <stdexcept>
#include <unordered_map>

#include "poisonlab/csv.hpp"
#include "poisonlab/rng.hpp"
#include "poisonlab/wav.hpp"

namespace poisonlab {

namespace {

// One tone per slot value. All frequencies are multiples of 40 Hz (so
// they align with the analysis probes) but none is a multiple of 100 Hz
// (so the phase keeps rotating across analysis hops instead of locking).
constexpr std::array<double, 2> kActionFreqs = {520.0, 680.0};
constexpr std::array<double, 4> kObjectFreqs = {1040.0, 1160.0, 1360.0, 1480.0};
constexpr std::array<double, 3> kLocationFreqs = {1840.0, 1960.0, 2120.0};

double motif_freq(int slot, int value) {
  switch (slot) {
    case 0:
      if (value < 0 || value >= static_cast<int>(kActionFreqs.size()))
        throw std::runtime_error("motif_freq: action value out of range");
      return kActionFreqs[static_cast<std::size_t>(value)];
    case 1:
      if (value < 0 || value >= static_cast<int>(kObjectFreqs.size()))
        throw std::runtime_error("motif_freq: object value out of range");
      return kObjectFreqs[static_cast<std::size_t>(value)];
    case 2:
      if (value < 0 || value >= static_cast<int>(kLocationFreqs.size()))
        throw std::runtime_error("motif_freq: location value out of range");
      return kLocationFreqs[static_cast<std::size_t>(value)];
    default:
      throw std::runtime_error("motif_freq: bad slot index");
  }
}

// Per-slot loudness ranges (log-uniform). Object and location motifs are
// loud; the action motif spans a wide, much quieter range, so the margin
// of the action decision varies a lot between utterances. That spread is
// load-bearing: it decides which samples an L2-bounded perturbation can
// flip, giving ranked poison selection something real to rank.
constexpr double kAmpLo[3] = {0.015, 0.35, 0.35};
constexpr double kAmpHi[3] = {0.160, 0.70, 0.70};

std::string make_id(Split s, int index) {
  const char* prefix = s == Split::Train ? "tr" : s == Split::Dev ? "dv" : "ts";
  char buf[16];
  std::snprintf(buf, sizeof buf, "%s-%04d", prefix, index);
  return buf;
}

}  // namespace

std::string split_name(Split s) {
  switch (s) {
    case Split::Train: return "train";
    case Split::Dev: return "dev";
    case Split::Test: return "test";
  }
  throw std::runtime_error("split_name: bad split");
}

Split parse_split(const std::string& s) {
  if (s == "train") return Split::Train;
  if (s == "dev") return Split::Dev;
  if (s == "test") return Split::Test;
  throw std::runtime_error("parse_split: unknown split '" + s + "'");
}

const std::vector<std::string>& SlotVocab::slot(int k) const {
  switch (k) {
    case 0: return actions;
    case 1: return objects;
    case 2: return locations;
  }
  throw std::runtime_error("SlotVocab::slot: bad slot index");
}

int SlotVocab::index_of(int slot_k, const std::string& name) const {
  const auto& values = slot(slot_k);
  auto it = std::find(values.begin(), values.end(), name);
  if (it == values.end())
    throw std::runtime_error("SlotVocab: unknown value '" + name + "'");
  return static_cast<int>(it - values.begin());
}

SlotVocab default_vocab() {
  return SlotVocab{{"activate", "deactivate"},
                   {"fan", "heater", "lamp", "radio"},
                   {"bedroom", "garage", "kitchen"}};
}

std::vector<const Utterance*> Dataset::split(Split s) const {
  std::vector<const Utterance*> out;
  for (const auto& u : utterances)
    if (u.split == s) out.push_back(&u);
  return out;
}

const Utterance* Dataset::find(const std::string& id) const {
  for (const auto& u : utterances)
    if (u.id == id) return &u;
  return nullptr;
}

std::vector<double> motif_template(int slot, int value, std::size_t region_len,
                                   int sample_rate) {
  double freq = motif_freq(slot, value);
  std::vector<double> t(region_len, 0.0);
  const double w = 2.0 * M_PI * freq / sample_rate;
  for (std::size_t i = 0; i < region_len; ++i) t[i] = std::cos(w * i);
  // 10 ms raised-cosine fades keep motif edges click-free.
  std::size_t fade = std::min<std::size_t>(region_len / 2,
                                           static_cast<std::size_t>(sample_rate / 100));
  for (std::size_t i = 0; i < fade; ++i) {
    double g = 0.5 * (1.0 - std::cos(M_PI * (i + 1) / (fade + 1)));
    t[i] *= g;
    t[region_len - 1 - i] *= g;
  }
  return t;
}

Dataset generate_synthetic(const SynthConfig& cfg) {
  if (cfg.n_train < 0 || cfg.n_dev < 0 || cfg.n_test < 0)
    throw std::runtime_error("generate_synthetic: negative split size");
  if (cfg.utterance_s <= 0 || cfg.sample_rate <= 0)
    throw std::runtime_error("generate_synthetic: bad duration or rate");
  if (cfg.vocab.actions.size() > kActionFreqs.size() ||
      cfg.vocab.objects.size() > kObjectFreqs.size() ||
      cfg.vocab.locations.size() > kLocationFreqs.size())
    throw std::runtime_error("generate_synthetic: vocab larger than motif table");

  Dataset ds;
  ds.vocab = cfg.vocab;
  const std::size_t n = static_cast<std::size_t>(
      std::llround(cfg.utterance_s * cfg.sample_rate));
  const std::size_t region = n / 3;

  auto make_one = [&](Split split, int index) {
    Utterance u;
    u.id = make_id(split, index);
    u.split = split;
    Rng rng = derive_rng(cfg.seed, u.id);
    u.action = static_cast<int>(uniform_below(rng, cfg.vocab.actions.size()));
    u.object = static_cast<int>(uniform_below(rng, cfg.vocab.objects.size()));
    u.location = static_cast<int>(uniform_below(rng, cfg.vocab.locations.size()));

    double amp[3];
    for (int slot = 0; slot < 3; ++slot)
      amp[slot] = std::exp(std::log(kAmpLo[slot]) +
                           uniform01(rng) *
                               (std::log(kAmpHi[slot]) - std::log(kAmpLo[slot])));

    u.wave.sample_rate = cfg.sample_rate;
    u.wave.samples.assign(n, 0.0);
    const int values[3] = {u.action, u.object, u.location};
    for (int slot = 0; slot < 3; ++slot) {
      auto motif = motif_template(slot, values[slot], region, cfg.sample_rate);
      std::size_t off = static_cast<std::size_t>(slot) * region;
      for (std::size_t i = 0; i < region; ++i)
        u.wave.samples[off + i] += amp[slot] * motif[i];
    }

    if (std::isfinite(cfg.background_snr_db)) {
      double p_sig = power(u.wave);
      double sigma_bar =
          std::sqrt(p_sig / std::pow(10.0, cfg.background_snr_db / 10.0));
      // Variance ramps 0.4x -> 1.6x across the utterance; the mean stays
      // sigma_bar^2, so the whole-utterance SNR matches background_snr_db
      // in expectation while the tail is audibly noisier than the head.
      for (std::size_t i = 0; i < n; ++i) {
        double env = 0.4 + 1.2 * static_cast<double>(i) / static_cast<double>(n);
        u.wave.samples[i] += sigma_bar * std::sqrt(env) * gaussian(rng);
      }
    }
    return u;
  };

  ds.utterances.reserve(static_cast<std::size_t>(cfg.n_train + cfg.n_dev + cfg.n_test));
  for (int i = 0; i < cfg.n_train; ++i)
    ds.utterances.push_back(make_one(Split::Train, i));
  for (int i = 0; i < cfg.n_dev; ++i)
    ds.utterances.push_back(make_one(Split::Dev, i));
  for (int i = 0; i < cfg.n_test; ++i)
    ds.utterances.push_back(make_one(Split::Test, i));
  return ds;
}

SlotTriple matched_filter_decode(const Waveform& w, const SlotVocab& vocab) {
  const std::size_t n = w.samples.size();
  const std::size_t region = n / 3;
  if (region == 0) throw std::runtime_error("matched_filter_decode: waveform too short");
  SlotTriple out;
  int* fields[3] = {&out.action, &out.object, &out.location};
  for (int slot = 0; slot < 3; ++slot) {
    const auto& values = vocab.slot(slot);
    std::size_t off = static_cast<std::size_t>(slot) * region;
    double best = -1e300;
    int best_v = 0;
    for (int v = 0; v < static_cast<int>(values.size()); ++v) {
      auto motif = motif_template(slot, v, region, w.sample_rate);
      double corr = 0.0;
      for (std::size_t i = 0; i < region; ++i)
        corr += w.samples[off + i] * motif[i];
      if (corr > best) {
        best = corr;
        best_v = v;
      }
    }
    *fields[slot] = best_v;
  }
  return out;
}

Dataset load_manifest(const std::string& path) {
  auto rows = csv_read_file(path);
  if (rows.empty()) throw std::runtime_error("manifest: empty file " + path);
  const std::vector<std::string> header = {"id",     "path",     "action",
                                           "object", "location", "split"};
  if (rows[0] != header)
    throw std::runtime_error("manifest: bad header in " + path);

  std::filesystem::path base = std::filesystem::path(path).parent_path();
  Dataset ds;
  auto intern = [](std::vector<std::string>& values, const std::string& name) {
    auto it = std::find(values.begin(), values.end(), name);
    if (it != values.end()) return static_cast<int>(it - values.begin());
    values.push_back(name);
    return static_cast<int>(values.size()) - 1;
  };

  for (std::size_t r = 1; r < rows.size(); ++r) {
    const auto& row = rows[r];
    if (row.size() != header.size())
      throw std::runtime_error("manifest: wrong field count at row " +
                               std::to_string(r + 1) + " in " + path);
    Utterance u;
    u.id = row[0];
    std::filesystem::path wav_path = row[1];
    if (wav_path.is_relative()) wav_path = base / wav_path;
    u.wave = load_wav(wav_path.string());
    u.action = intern(ds.vocab.actions, row[2]);
    u.object = intern(ds.vocab.objects, row[3]);
    u.location = intern(ds.vocab.locations, row[4]);
    u.split = parse_split(row[5]);
    ds.utterances.push_back(std::move(u));
  }
  return ds;
}

std::string export_dataset(const Dataset& ds, const std::string& dir) {
  namespace fs = std::filesystem;
  fs::create_directories(fs::path(dir) / "wav");
  std::string manifest_path = (fs::path(dir) / "manifest.csv").string();
  std::ofstream out(manifest_path);
  if (!out) throw std::runtime_error("export_dataset: cannot write " + manifest_path);
  out << "id,path,action,object,location,split\n";
  for (Split s : {Split::Train, Split::Dev, Split::Test}) {
    for (const auto& u : ds.utterances) {
      if (u.split != s) continue;
      std::string rel = "wav/" + u.id + ".wav";
      save_wav(u.wave, (fs::path(dir) / rel).string());
      out << csv_join({u.id, rel, ds.vocab.actions[static_cast<std::size_t>(u.action)],
                       ds.vocab.objects[static_cast<std::size_t>(u.object)],
                       ds.vocab.locations[static_cast<std::size_t>(u.location)],
                       split_name(u.split)})
          << "\n";
    }
  }
  if (!out) throw std::runtime_error("export_dataset: write failed " + manifest_path);
  return manifest_path;
}

Dataset canonicalize(const Dataset& ds) {
  Dataset out;
  out.vocab = ds.vocab;
  for (auto* values :
       {&out.vocab.actions, &out.vocab.objects, &out.vocab.locations}) {
    std::sort(values->begin(), values->end());
    if (std::adjacent_find(values->begin(), values->end()) != values->end())
      throw std::runtime_error("canonicalize: duplicate vocabulary entry");
  }
  for (Split s : {Split::Train, Split::Dev, Split::Test}) {
    for (const auto& u : ds.utterances) {
      if (u.split != s) continue;
      Utterance v = u;
      v.wave = quantize16(u.wave);
      v.action =
          out.vocab.index_of(0, ds.vocab.actions[static_cast<std::size_t>(u.action)]);
      v.object =
          out.vocab.index_of(1, ds.vocab.objects[static_cast<std::size_t>(u.object)]);
      v.location = out.vocab.index_of(
          2, ds.vocab.locations[static_cast<std::size_t>(u.location)]);
      out.utterances.push_back(std::move(v));
    }
  }
  return out;
}

}  // namespace poisonlab
