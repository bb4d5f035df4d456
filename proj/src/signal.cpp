#include "poisonlab/signal.hpp"

#include <algorithm>
#include <cmath>
#include <stdexcept>

namespace poisonlab {

std::string location_name(TriggerLocation loc) {
  switch (loc) {
    case TriggerLocation::Start: return "start";
    case TriggerLocation::End: return "end";
    case TriggerLocation::Random: return "random";
  }
  throw std::runtime_error("location_name: bad location");
}

TriggerLocation parse_location(const std::string& s) {
  if (s == "start") return TriggerLocation::Start;
  if (s == "end") return TriggerLocation::End;
  if (s == "random") return TriggerLocation::Random;
  throw std::runtime_error("parse_location: unknown location '" + s + "'");
}

double power(const std::vector<double>& samples) {
  if (samples.empty()) throw std::invalid_argument("power: empty waveform");
  double acc = 0.0;
  for (double s : samples) acc += s * s;
  return acc / static_cast<double>(samples.size());
}

double power(const Waveform& w) { return power(w.samples); }

double l2_norm(const std::vector<double>& samples) {
  double acc = 0.0;
  for (double s : samples) acc += s * s;
  return std::sqrt(acc);
}

double l2_norm(const Waveform& w) { return l2_norm(w.samples); }

double snr_db(const Waveform& signal, const Waveform& noise) {
  if (signal.samples.size() != noise.samples.size())
    throw std::invalid_argument("snr_db: length mismatch");
  const double ps = power(signal);
  const double pn = power(noise);
  if (pn <= 0.0) throw std::invalid_argument("snr_db: zero-power noise");
  return 10.0 * std::log10(ps / pn);
}

TriggerResult apply_trigger(const Waveform& w, const TriggerSpec& t, Rng& rng) {
  if (t.clip.samples.empty())
    throw std::invalid_argument("apply_trigger: empty trigger clip");
  if (t.clip.samples.size() > w.samples.size())
    throw std::invalid_argument("apply_trigger: clip longer than utterance");
  if (t.clip.sample_rate != w.sample_rate)
    throw std::invalid_argument("apply_trigger: sample-rate mismatch");
  if (!std::isfinite(t.snr_db))
    throw std::invalid_argument("apply_trigger: non-finite snr_db");

  const std::size_t max_offset = w.samples.size() - t.clip.samples.size();
  std::size_t offset = 0;
  switch (t.location) {
    case TriggerLocation::Start:
      offset = 0;
      break;
    case TriggerLocation::End:
      offset = max_offset;
      break;
    case TriggerLocation::Random:
      // uniform over [0, max_offset] inclusive
      offset = static_cast<std::size_t>(uniform_below(rng, max_offset + 1));
      break;
  }

  const double clip_power = power(t.clip);
  TriggerResult out{w, offset};
  if (clip_power <= 0.0) return out;  // silent clip adds nothing

  const double gain =
      std::sqrt(power(w) / (clip_power * std::pow(10.0, t.snr_db / 10.0)));
  for (std::size_t i = 0; i < t.clip.samples.size(); ++i)
    out.wave.samples[offset + i] += gain * t.clip.samples[i];
  return out;
}

double snr_to_radius(const Waveform& w, const PerturbationBudget& b) {
  if (!std::isfinite(b.snr_bound_db))
    throw std::invalid_argument("snr_to_radius: non-finite bound");
  const double norm = l2_norm(w);
  if (norm <= 0.0) throw std::invalid_argument("snr_to_radius: zero-power waveform");
  return norm * std::pow(10.0, -b.snr_bound_db / 20.0);
}

std::vector<double> project_l2(const std::vector<double>& x,
                               const std::vector<double>& center, double r) {
  if (x.size() != center.size())
    throw std::invalid_argument("project_l2: length mismatch");
  if (!(r > 0.0)) throw std::invalid_argument("project_l2: radius must be > 0");
  double d2 = 0.0;
  for (std::size_t i = 0; i < x.size(); ++i) {
    const double d = x[i] - center[i];
    d2 += d * d;
  }
  if (d2 <= r * r) return x;
  // Back the scale off by ulps until the output passes the same containment
  // test this function applies on entry. That guarantees the computed norm of
  // the result never exceeds r, which makes projection bit-exact idempotent.
  double scale = r / std::sqrt(d2);
  std::vector<double> out(x.size());
  for (;;) {
    double od2 = 0.0;
    for (std::size_t i = 0; i < x.size(); ++i) {
      out[i] = center[i] + scale * (x[i] - center[i]);
      const double d = out[i] - center[i];
      od2 += d * d;
    }
    if (od2 <= r * r) return out;
    scale = std::nextafter(scale, 0.0);
  }
}

Waveform synth_horn(double duration_s, double f0, int sample_rate) {
  if (!(duration_s > 0.0)) throw std::invalid_argument("synth_horn: duration must be > 0");
  if (sample_rate <= 0) throw std::invalid_argument("synth_horn: bad sample rate");
  if (!(f0 > 0.0) || f0 >= 0.5 * sample_rate)
    throw std::invalid_argument("synth_horn: f0 at or above Nyquist");

  const std::size_t n =
      static_cast<std::size_t>(std::llround(duration_s * sample_rate));
  const double two_pi = 6.283185307179586476925286766559;
  static const double harmonic_amp[4] = {1.0, 0.6, 0.35, 0.2};

  Waveform w;
  w.sample_rate = sample_rate;
  w.samples.resize(n, 0.0);
  for (std::size_t i = 0; i < n; ++i) {
    double s = 0.0;
    for (int h = 0; h < 4; ++h)
      s += harmonic_amp[h] *
           std::cos(two_pi * (h + 1) * f0 * static_cast<double>(i) / sample_rate);
    w.samples[i] = s;
  }

  // 10 ms raised-cosine fades
  const std::size_t fade =
      std::min(n / 2, static_cast<std::size_t>(sample_rate / 100));
  for (std::size_t i = 0; i < fade; ++i) {
    const double g = 0.5 * (1.0 - std::cos(3.14159265358979323846 *
                                           static_cast<double>(i) / fade));
    w.samples[i] *= g;
    w.samples[n - 1 - i] *= g;
  }

  double peak = 0.0;
  for (double s : w.samples) peak = std::max(peak, std::abs(s));
  if (peak > 0.0) {
    const double scale = 0.9 / peak;
    for (double& s : w.samples) s *= scale;
  }
  return w;
}

}  // namespace poisonlab
