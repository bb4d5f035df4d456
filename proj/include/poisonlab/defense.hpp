#pragma once

#include <cstdint>
#include <string>
#include <unordered_map>
#include <unordered_set>
#include <vector>

#include "poisonlab/attack.hpp"
#include "poisonlab/dataset.hpp"
#include "poisonlab/model.hpp"

namespace poisonlab {

// Binary poison detector: slot-model frontend, one causal conv layer
// (tanh), global mean pooling, logistic output.
struct DetectorParams {
  int probes = kNumProbes;
  int channels = 8;
  int kernel = 5;
  std::vector<double> w;  // conv w [c][tap][in], conv b, out w, out b

  std::size_t param_count() const;
};

DetectorParams init_detector(std::uint64_t seed);

// Benign waves get label 0, poisoned 1; binary cross-entropy, SGD with
// momentum, deterministic given cfg.seed.
DetectorParams train_detector(const std::vector<const Waveform*>& benign,
                              const std::vector<const Waveform*>& poisoned,
                              const TrainConfig& cfg);

double detector_score(const DetectorParams& d, const Waveform& w);
std::unordered_map<std::string, double> score(const DetectorParams& d,
                                              const Dataset& ds);

// Mann-Whitney rank AUC; ties count half. Throws unless both classes are
// present.
double auc(const std::vector<double>& scores, const std::vector<bool>& is_poison);
double auc(const std::unordered_map<std::string, double>& scores,
           const std::unordered_set<std::string>& poisoned_ids);

struct FilterResult {
  Dataset retained;
  std::vector<std::string> removed;  // with scores, parallel vectors
  std::vector<double> removed_scores;
};

// Drops train-split samples with score >= threshold; dev/test pass through
// so the defense never touches evaluation data. Removal is the only
// mutation.
FilterResult filter_dataset(const Dataset& ds, const DetectorParams& d,
                            double threshold);

// Threshold giving at most the requested false-positive rate on the given
// benign sample (the rate achieved exactly when scores are distinct).
double threshold_for_fpr(const DetectorParams& d,
                         const std::vector<const Waveform*>& benign, double fpr);

// Oracle: removes exactly the recorded poison ids.
Dataset perfect_filter(const Dataset& ds, const std::vector<PoisonRecord>& records);

// Frame-wise soft-threshold denoiser: per 400-sample frame,
//   F(x) = x - B * tanh(A x + a)
// with B zero-initialized, so an untrained denoiser is an exact identity.
// Frames are stitched back disjointly (each sample from one frame), and
// samples past the last full frame pass through.
struct DenoiserParams {
  int frame = kFrameLen;
  int hidden = 32;
  std::vector<double> w;  // A [hidden][frame], a [hidden], B [frame][hidden]

  std::size_t param_count() const;
};

DenoiserParams init_denoiser(std::uint64_t seed);

struct WavePair {
  Waveform noisy;
  Waveform clean;
};

// Frame-level MSE between F(noisy frame) and the clean frame. Include
// (clean, clean) pairs to anchor benign fidelity.
DenoiserParams train_denoiser(const std::vector<WavePair>& pairs,
                              const TrainConfig& cfg);

Waveform denoise(const DenoiserParams& d, const Waveform& w);

void save_detector(const DetectorParams& d, const std::string& path);
DetectorParams load_detector(const std::string& path);
void save_denoiser(const DenoiserParams& d, const std::string& path);
DenoiserParams load_denoiser(const std::string& path);

// Filter report: CSV id,score rows for removed samples.
void write_filter_report(const std::vector<std::string>& removed,
                         const std::vector<double>& scores,
                         const std::string& path);
void write_filter_report(const FilterResult& fr, const std::string& path);

}  // namespace poisonlab
