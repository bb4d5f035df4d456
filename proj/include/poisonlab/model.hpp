#pragma once

#include <array>
#include <cstdint>
#include <string>
#include <unordered_map>
#include <vector>

#include "poisonlab/dataset.hpp"
#include "poisonlab/signal.hpp"

namespace poisonlab {

inline constexpr int kFrameLen = 400;
inline constexpr int kHopLen = 160;
inline constexpr int kNumProbes = 16;
inline constexpr double kFeatEps = 1e-6;

// Fixed affine squash applied to log-energy features in front of every
// learned stack (slot model and detector). Log energies live roughly in
// [-14, -1]; this centers them so tanh units start near their linear range.
inline constexpr double kFeatNormShift = 9.0;
inline constexpr double kFeatNormScale = 0.25;

// Analysis probe frequencies, all multiples of the 40 Hz frame bin so the
// projections are orthogonal within a frame. Covers the motif and trigger
// bands plus a few off-band probes.
inline constexpr std::array<double, kNumProbes> kProbeFreqs = {
    280.0,  400.0,  520.0,  680.0,  800.0,  1040.0, 1160.0, 1200.0,
    1360.0, 1480.0, 1600.0, 1840.0, 1960.0, 2120.0, 2440.0, 3160.0};

struct Features {
  int frames = 0;
  int probes = kNumProbes;
  std::vector<double> x;  // frames * probes, frame-major

  double at(int t, int j) const { return x[static_cast<std::size_t>(t) * probes + j]; }
};

// Frame-wise log energy of the fixed cosine projections:
//   p_j(t) = (2/frame) * sum_i s[t*hop + i] * cos(2*pi*f_j*i/sr)
//   x_j(t) = ln(p_j^2 + eps)
// Fixed and differentiable, so waveform gradients are exact.
Features compute_features(const Waveform& w);

struct ModelShape {
  int probes = kNumProbes;
  int channels = 16;
  int kernel = 5;
  std::vector<int> heads;  // class count per slot

  std::size_t param_count() const;
};

struct ModelParams {
  ModelShape shape;
  SlotVocab vocab;  // checkpoints carry label strings, not just sizes
  std::vector<double> w;
};

ModelParams init_model(const SlotVocab& vocab, std::uint64_t seed);

struct TrainConfig {
  int epochs = 15;
  int batch_size = 32;
  double learning_rate = 0.05;
  double momentum = 0.9;
  std::uint64_t seed = 0;
};

struct TrainResult {
  ModelParams params;
  std::vector<double> loss_history;  // mean train loss per epoch
};

std::array<std::vector<double>, 3> forward(const ModelParams& m, const Waveform& w);

// Sum over the three heads of softmax cross-entropy against y.
double loss(const ModelParams& m, const Waveform& w, const SlotTriple& y);
double loss_features(const ModelParams& m, const Features& f, const SlotTriple& y);

// Exact reverse-mode gradient of loss_features. Either output may be null;
// non-null outputs are overwritten (grad_w sized param_count, grad_x sized
// frames*probes).
double loss_grad(const ModelParams& m, const Features& f, const SlotTriple& y,
                 std::vector<double>* grad_w, std::vector<double>* grad_x);

// Mean parameter gradient over a batch.
std::vector<double> grad_params(const ModelParams& m,
                                const std::vector<const Utterance*>& batch);

// Waveform-shaped gradient of the designated slot's cross-entropy toward
// target_class (the other heads do not contribute).
std::vector<double> grad_input(const ModelParams& m, const Waveform& w, int slot,
                               int target_class);

// Per-slot argmax; ties break toward the lowest index.
SlotTriple predict(const ModelParams& m, const Waveform& w);

std::unordered_map<std::string, double> per_sample_loss(
    const ModelParams& m, const std::vector<const Utterance*>& utts);

TrainResult train(const SlotVocab& vocab, const std::vector<Utterance>& train_set,
                  const TrainConfig& cfg);
TrainResult train(const Dataset& ds, const TrainConfig& cfg);

// JSON checkpoint with schema id; doubles round-trip bit-exactly.
void save_model(const ModelParams& m, const std::string& path);
ModelParams load_model(const std::string& path);

}  // namespace poisonlab
