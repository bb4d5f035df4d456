#pragma once

#include <string>

#include "poisonlab/signal.hpp"

namespace poisonlab {

// RIFF PCM 16-bit mono only. Amplitudes map as sample = pcm / 32768.
Waveform load_wav(const std::string& path);

// Clamps to [-1, 1], quantizes to 16-bit, writes RIFF PCM mono.
void save_wav(const Waveform& w, const std::string& path);

// In-memory equivalent of a save/load round trip. The experiment
// pipeline treats the 16-bit encoding as the canonical sample format, so
// in-process runs match runs that go through WAV files on disk.
Waveform quantize16(const Waveform& w);

}  // namespace poisonlab
