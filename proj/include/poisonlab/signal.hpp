#pragma once

#include <cstddef>
#include <string>
#include <vector>

#include "poisonlab/rng.hpp"

namespace poisonlab {

// Mono audio buffer. Samples are dimensionless amplitudes, nominally in
// [-1, 1] but never clamped in memory; clamping happens only at 16-bit
// WAV export.
struct Waveform {
  std::vector<double> samples;
  int sample_rate = 16000;

  std::size_t size() const { return samples.size(); }
};

enum class TriggerLocation { Start, End, Random };

std::string location_name(TriggerLocation loc);
TriggerLocation parse_location(const std::string& s);

// Additive trigger description. snr_db is the signal-to-trigger power
// ratio: larger values mean a quieter trigger.
struct TriggerSpec {
  Waveform clip;
  double snr_db = 20.0;
  TriggerLocation location = TriggerLocation::Start;
  std::uint64_t seed = 0;  // used only for Random placement
};

// Loudness limit of an adversarial perturbation, as a minimum
// signal-to-perturbation SNR in dB.
struct PerturbationBudget {
  double snr_bound_db = 30.0;
};

// Mean squared amplitude. Throws on an empty buffer.
double power(const Waveform& w);
double power(const std::vector<double>& samples);

// Square root of the sum of squares.
double l2_norm(const Waveform& w);
double l2_norm(const std::vector<double>& samples);

// 10*log10(power(signal)/power(noise)). Requires equal lengths and
// nonzero noise power.
double snr_db(const Waveform& signal, const Waveform& noise);

struct TriggerResult {
  Waveform wave;
  std::size_t offset = 0;
};

// Mixes t.clip into w at a gain that realizes t.snr_db, measured as
// whole-utterance power against whole-clip power. Output length equals
// input length; no clamping.
TriggerResult apply_trigger(const Waveform& w, const TriggerSpec& t, Rng& rng);

// L2 radius r such that a perturbation of norm exactly r has
// signal-to-perturbation SNR equal to b.snr_bound_db.
double snr_to_radius(const Waveform& w, const PerturbationBudget& b);

// Euclidean projection of x onto the ball of radius r around center.
// Interior points are returned bit-identical, and the computed norm of the
// output never exceeds r, so applying the projection twice is a no-op.
std::vector<double> project_l2(const std::vector<double>& x,
                               const std::vector<double>& center, double r);

// Deterministic horn-like clip: four harmonics of f0 at relative
// amplitudes (1, 0.6, 0.35, 0.2), 10 ms raised-cosine fades, peak 0.9.
Waveform synth_horn(double duration_s, double f0, int sample_rate);

}  // namespace poisonlab
