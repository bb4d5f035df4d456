#pragma once

#include <array>
#include <cstdint>
#include <string>
#include <vector>

#include "poisonlab/signal.hpp"

namespace poisonlab {

enum class Split { Train, Dev, Test };

std::string split_name(Split s);
Split parse_split(const std::string& s);

struct SlotVocab {
  std::vector<std::string> actions;  // must include "activate", "deactivate"
  std::vector<std::string> objects;
  std::vector<std::string> locations;

  const std::vector<std::string>& slot(int k) const;
  int index_of(int slot, const std::string& name) const;  // throws if absent
};

SlotVocab default_vocab();

struct Utterance {
  std::string id;
  Waveform wave;
  int action = 0;
  int object = 0;
  int location = 0;
  Split split = Split::Train;
};

struct Dataset {
  SlotVocab vocab;
  std::vector<Utterance> utterances;

  std::vector<const Utterance*> split(Split s) const;
  const Utterance* find(const std::string& id) const;
};

struct SynthConfig {
  int n_train = 2000;
  int n_dev = 200;
  int n_test = 400;
  SlotVocab vocab = default_vocab();
  int sample_rate = 16000;
  double utterance_s = 1.2;
  double background_snr_db = 20.0;  // +inf means noiseless
  std::uint64_t seed = 0;
};

// Seeded synthetic spoken-command corpus. Each slot value is a fixed
// tone motif rendered in its own third of the utterance (action first,
// object middle, location last), at a per-utterance loudness drawn from
// the utterance's RNG stream, under Gaussian background noise whose
// variance rises linearly toward the utterance tail (overall utterance
// SNR equals background_snr_db). Bit-identical for equal configs.
Dataset generate_synthetic(const SynthConfig& cfg);

// Motif template for (slot, value): unit amplitude, same rendering the
// generator uses. Exposed for the matched-filter oracle.
std::vector<double> motif_template(int slot, int value, std::size_t region_len,
                                   int sample_rate);

struct SlotTriple {
  int action = 0;
  int object = 0;
  int location = 0;
};

// Per-slot argmax of correlation against each value's motif template.
// Generator self-test oracle; on arbitrary audio it still returns some
// triple (semantics undefined).
SlotTriple matched_filter_decode(const Waveform& w, const SlotVocab& vocab);

// Manifest I/O: UTF-8 CSV with header id,path,action,object,location,split.
// Paths are resolved relative to the manifest's directory. Vocabularies
// are built from distinct label strings in file order.
Dataset load_manifest(const std::string& path);

// Writes WAVs under <dir>/wav/ plus <dir>/manifest.csv, rows ordered
// train, dev, test (stable within each split).
std::string export_dataset(const Dataset& ds, const std::string& dir);

// Canonical form shared by every pipeline stage: vocabulary sorted per
// slot (so label indices survive train-split edits such as flips or
// filtering), samples 16-bit quantized, utterances ordered train, dev,
// test. canonicalize(load_manifest(export_dataset(ds))) == ds for
// canonical ds, which keeps in-process runs bit-identical to file-based
// ones.
Dataset canonicalize(const Dataset& ds);

}  // namespace poisonlab
